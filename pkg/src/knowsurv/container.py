"""Self-describing binary containers used for all on-disk tensors.

Two file kinds share the same primitives:

* patient feature files (magic ``KSPF``): one patient's patch-feature
  matrix, gene (name, expression) pairs, texts and raw survival label;
* named-tensor files (magic ``KSNT``): gene embedding tables and model
  checkpoints.

Everything is little-endian; dims are uint32, float payloads are float32
stored row-major, strings are uint32-length-prefixed UTF-8. Round trips
are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

PATIENT_MAGIC = b"KSPF"
TENSOR_MAGIC = b"KSNT"
FORMAT_VERSION = 1


class DataFormatError(ValueError):
    """Raised when a file fails structural validation."""


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise DataFormatError(f"truncated file: wanted {n} bytes, got {len(raw)}")
    return raw


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def _write_f32(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4", order="C")  # keeps 0-d shapes intact
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def _read_f32(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
    if ndim > 8:
        raise DataFormatError(f"implausible tensor rank {ndim}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return data.reshape(shape).copy()


def _check_magic(fh, expected: bytes, path) -> int:
    magic = _read_exact(fh, 4)
    if magic != expected:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {expected!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    return version


def write_patient_file(
    path,
    *,
    patient_id: str,
    cancer_type: str,
    raw_time: float,
    censorship: int,
    patch_features: np.ndarray,
    genes: list[tuple[str, float]],
    report_text: str,
    pbk_pathology: str,
    pbk_genomic: str,
) -> None:
    patch_features = np.asarray(patch_features)
    if patch_features.ndim != 2:
        raise DataFormatError("patch_features must be a 2-D matrix")
    if censorship not in (0, 1):
        raise DataFormatError(f"censorship must be 0 or 1, got {censorship}")
    if raw_time < 0:
        raise DataFormatError(f"raw_time must be nonnegative, got {raw_time}")
    with open(path, "wb") as fh:
        fh.write(PATIENT_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        _write_str(fh, patient_id)
        _write_str(fh, cancer_type)
        fh.write(struct.pack("<d", float(raw_time)))
        fh.write(struct.pack("<B", int(censorship)))
        _write_f32(fh, patch_features)
        fh.write(struct.pack("<I", len(genes)))
        for name, value in genes:
            _write_str(fh, name)
            fh.write(struct.pack("<f", float(value)))
        _write_str(fh, report_text)
        _write_str(fh, pbk_pathology)
        _write_str(fh, pbk_genomic)


def read_patient_file(path) -> dict:
    """Parse a patient feature file into a plain dict (no filtering)."""
    path = Path(path)
    with open(path, "rb") as fh:
        _check_magic(fh, PATIENT_MAGIC, path)
        out = {
            "patient_id": _read_str(fh),
            "cancer_type": _read_str(fh),
        }
        (out["raw_time"],) = struct.unpack("<d", _read_exact(fh, 8))
        (out["censorship"],) = struct.unpack("<B", _read_exact(fh, 1))
        patches = _read_f32(fh)
        if patches.ndim != 2:
            raise DataFormatError(f"{path}: patch matrix must be 2-D")
        out["patch_features"] = patches
        (n_genes,) = struct.unpack("<I", _read_exact(fh, 4))
        genes = []
        for _ in range(n_genes):
            name = _read_str(fh)
            (value,) = struct.unpack("<f", _read_exact(fh, 4))
            genes.append((name, value))
        out["genes"] = genes
        out["report_text"] = _read_str(fh)
        out["pbk_pathology"] = _read_str(fh)
        out["pbk_genomic"] = _read_str(fh)
        if fh.read(1):
            raise DataFormatError(f"{path}: trailing bytes after payload")
    return out


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write a named-tensor container (float32 payloads)."""
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            _write_str(fh, name)
            _write_f32(fh, np.asarray(arr))


def read_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        _check_magic(fh, TENSOR_MAGIC, path)
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            name = _read_str(fh)
            if name in out:
                raise DataFormatError(f"{path}: duplicate tensor name {name!r}")
            out[name] = _read_f32(fh)
        if fh.read(1):
            raise DataFormatError(f"{path}: trailing bytes after payload")
    return out
