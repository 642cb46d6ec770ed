"""On-disk formats: matrix datasets (text and binary), labels and parameter files.

Text datasets start with the line ``MDS1 n d_c d_r``, followed by ``n``
blocks of ``d_c`` lines with ``d_r`` numbers each. Binary datasets start
with the four bytes ``MDSB``, three little-endian uint64 counts, then the
values as little-endian float64 in observation-major, row-major order.

Every writer goes through a temporary file in the target directory and an
atomic rename, so readers never see a half-written file.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CorruptParameterError, DimensionError, FormatError
from .model import MatrixDataset, TbfaParams

TEXT_MAGIC = "MDS1"
BINARY_MAGIC = b"MDSB"
PARAMS_MAGIC = "TBFA-PARAMS 1"
_HEADER = struct.Struct("<4sQQQ")
_PARAM_MATRICES = ("W", "C", "Psi_c", "R", "Psi_r")


def atomic_write(path, data: bytes | str) -> None:
    """Write ``data`` to ``path`` via a temp file and ``os.replace``."""
    path = Path(path)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v: float) -> str:
    return "%.17g" % v


# ---------------------------------------------------------------------------
# datasets


def dumps_text(x: np.ndarray) -> str:
    x = np.asarray(x, dtype=float)
    n, d_c, d_r = x.shape
    lines = [f"{TEXT_MAGIC} {n} {d_c} {d_r}"]
    for obs in x:
        lines.extend(" ".join(_fmt(v) for v in row) for row in obs)
    return "\n".join(lines) + "\n"


def dumps_binary(x: np.ndarray) -> bytes:
    x = np.ascontiguousarray(x, dtype="<f8")
    n, d_c, d_r = x.shape
    return _HEADER.pack(BINARY_MAGIC, n, d_c, d_r) + x.tobytes(order="C")


def loads(raw: bytes) -> np.ndarray:
    """Parse either dataset variant from raw bytes into an ``(n, d_c, d_r)`` array."""
    if raw[:4] == BINARY_MAGIC:
        if len(raw) < _HEADER.size:
            raise FormatError("truncated binary header")
        _, n, d_c, d_r = _HEADER.unpack_from(raw)
        body = raw[_HEADER.size:]
        if len(body) != 8 * n * d_c * d_r:
            raise FormatError(f"binary body has {len(body)} bytes, expected {8 * n * d_c * d_r}")
        return np.frombuffer(body, dtype="<f8").astype(float).reshape(n, d_c, d_r)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("not an MDS file") from exc
    head, _, body = text.partition("\n")
    parts = head.split()
    if len(parts) != 4 or parts[0] != TEXT_MAGIC:
        raise FormatError(f"bad header line {head[:40]!r}")
    try:
        n, d_c, d_r = (int(p) for p in parts[1:])
        values = np.array(body.split(), dtype=float)
    except ValueError as exc:
        raise FormatError(f"unparseable dataset: {exc}") from exc
    if values.size != n * d_c * d_r:
        raise FormatError(f"found {values.size} values, header promises {n * d_c * d_r}")
    return values.reshape(n, d_c, d_r)


def write_dataset(path, data, binary: bool = False) -> None:
    x = data.observations if isinstance(data, MatrixDataset) else np.asarray(data, dtype=float)
    if x.ndim == 2:
        x = x[None]
    atomic_write(path, dumps_binary(x) if binary else dumps_text(x))


def read_dataset(path, labels_path=None) -> MatrixDataset:
    x = loads(Path(path).read_bytes())
    labels = None
    if labels_path is not None and Path(labels_path).exists():
        labels = read_labels(labels_path)
        if len(labels) != x.shape[0]:
            raise FormatError(f"{len(labels)} labels for {x.shape[0]} observations")
    return MatrixDataset(x, labels=labels)


def write_labels(path, labels) -> None:
    atomic_write(path, "".join(f"{lab}\n" for lab in labels))


def read_labels(path) -> tuple[str, ...]:
    return tuple(Path(path).read_text(encoding="utf-8").split())


# ---------------------------------------------------------------------------
# parameter files


def dumps_params(params: TbfaParams) -> str:
    """Key-value lines followed by row-major matrix blocks with explicit dims."""
    lines = [PARAMS_MAGIC,
             f"gaussian {int(params.gaussian)}",
             f"nu {'inf' if math.isinf(params.nu) else _fmt(params.nu)}"]
    for name in _PARAM_MATRICES:
        m = np.asarray(getattr(params, name), dtype=float)
        m2 = m.reshape(-1, 1) if m.ndim == 1 else m
        lines.append(f"matrix {name} {m2.shape[0]} {m2.shape[1]}")
        if m2.size:
            lines.extend(" ".join(_fmt(v) for v in row) for row in m2)
    return "\n".join(lines) + "\n"


def loads_params(text: str) -> TbfaParams:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != PARAMS_MAGIC:
        raise FormatError("missing parameter-file header")
    scalars: dict[str, str] = {}
    mats: dict[str, np.ndarray] = {}
    i = 1
    try:
        while i < len(lines):
            parts = lines[i].split()
            if parts[0] == "matrix":
                name, rows, cols = parts[1], int(parts[2]), int(parts[3])
                # blocks with zero columns have no body lines
                body = rows if cols else 0
                block = [ln.split() for ln in lines[i + 1:i + 1 + body]]
                mats[name] = np.array(block, dtype=float).reshape(rows, cols)
                i += 1 + body
            else:
                scalars[parts[0]] = parts[1]
                i += 1
    except (ValueError, IndexError) as exc:
        raise FormatError(f"malformed parameter file near line {i + 1}: {exc}") from exc
    missing = [k for k in _PARAM_MATRICES if k not in mats]
    if missing:
        raise FormatError(f"parameter file lacks {missing}")
    gaussian = scalars.get("gaussian", "0") == "1"
    nu = float(scalars.get("nu", "inf"))
    try:
        return TbfaParams(W=mats["W"], C=mats["C"], Psi_c=mats["Psi_c"].ravel(), R=mats["R"],
                          Psi_r=mats["Psi_r"].ravel(), nu=nu, gaussian=gaussian)
    except (DimensionError, CorruptParameterError) as exc:
        raise FormatError(f"invalid parameters: {exc}") from exc


def write_params(path, params: TbfaParams) -> None:
    atomic_write(path, dumps_params(params))


def read_params(path) -> TbfaParams:
    return loads_params(Path(path).read_text(encoding="utf-8"))
