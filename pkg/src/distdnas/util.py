"""Shared plumbing: seed derivation, stable hashing, deterministic artifacts.

Every random draw in the package flows through ``rng_for`` so that a single
root seed plus a handful of string/int labels fully determines a run. File
artifacts (JSON, CSV, npz) are written so that re-running with the same
config reproduces them byte for byte.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
import zlib
from pathlib import Path

import numpy as np

# FNV-1a 64-bit, fixed offset/prime. Used for the categorical hashing trick;
# must never change or cached shards / checkpoints become incompatible.
_FNV64_OFFSET = 0xCBF29CE484222325
_FNV64_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV64_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV64_PRIME) & _U64
    return h


def _label_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def rng_for(seed: int, *labels) -> np.random.Generator:
    """Generator for (seed, labels...). Distinct label tuples give independent streams."""
    entropy = (int(seed),) + tuple(_label_int(l) for l in labels)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(obj, sort_keys=True, indent=1))
        f.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def fmt6(x) -> str:
    """CSV field formatting: floats at 6 significant digits, rest as str."""
    if isinstance(x, (float, np.floating)):
        return "%.6g" % float(x)
    return str(x)


def write_csv(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt6(v) for v in row))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_csv(path):
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# np.savez embeds file mtimes in the zip archive, which breaks byte-level
# reproducibility; write npy members with a pinned timestamp instead.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_npz_deterministic(path, arrays: dict, meta: dict | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        if meta is not None:
            info = zipfile.ZipInfo("meta.json", date_time=_ZIP_EPOCH)
            zf.writestr(info, canonical_json(meta))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
            zf.writestr(info, buf.getvalue())


def load_npz(path):
    arrays, meta = {}, None
    with zipfile.ZipFile(path, "r") as zf:
        for name in zf.namelist():
            raw = zf.read(name)
            if name == "meta.json":
                meta = json.loads(raw.decode("utf-8"))
            elif name.endswith(".npy"):
                arrays[name[:-4]] = np.load(io.BytesIO(raw), allow_pickle=False)
    return arrays, meta
