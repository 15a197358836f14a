"""Binary file formats for ensembles, kernels and eigensystems.

Layout shared by all three formats::

    8 bytes   magic ("FLOWKL01", "FLOWKK01" or "FLOWKE01")
    8 bytes   header length L, unsigned little-endian
    L bytes   UTF-8 JSON header
    rest      little-endian float64 payload

Ensemble payload: ``X`` in column-major order (``m n N`` values).
Kernel payload: ``blocks[k, l, i, i']`` in row-major order (``n^2 m^2`` values).
Eigensystem payload: ``J`` eigenvalues, then ``eigenflows[j, k, i]`` in
row-major order (``J n m`` values).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import BasisTruncation, DiscreteKernel, EigenSystem, FlowEnsemble, Grid

__all__ = [
    "FormatError",
    "ValidationReport",
    "ENSEMBLE_MAGIC",
    "KERNEL_MAGIC",
    "EIGEN_MAGIC",
    "write_ensemble",
    "read_ensemble",
    "write_kernel",
    "read_kernel",
    "write_eigensystem",
    "read_eigensystem",
    "write_eigenvalues_csv",
    "validate_file",
    "sniff",
]

ENSEMBLE_MAGIC = b"FLOWKL01"
KERNEL_MAGIC = b"FLOWKK01"
EIGEN_MAGIC = b"FLOWKE01"
KINDS = {ENSEMBLE_MAGIC: "ensemble", KERNEL_MAGIC: "kernel", EIGEN_MAGIC: "eigensystem"}
_PREFIX = 16


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        where = f" (byte offset {offset})" if offset is not None else ""
        super().__init__(message + where)


@dataclass
class ValidationReport:
    path: str
    kind: str | None = None
    header: dict | None = None
    errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def as_dict(self) -> dict:
        return {
            "path": self.path,
            "kind": self.kind,
            "ok": self.ok,
            "header": self.header,
            "errors": [{"offset": e.offset, "message": str(e)} for e in self.errors],
        }


def _encode(magic: bytes, header: dict, payload: np.ndarray) -> bytes:
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<Q", len(hbytes)) + hbytes + payload.astype("<f8").tobytes()


def _grid_header(grid: Grid, trunc: BasisTruncation) -> dict:
    return {"domain_length": grid.domain_length, "n": grid.n, "m": trunc.m}


def _positive_int(header: dict, key: str, errors: list, offset: int, allow_zero=False) -> int | None:
    v = header.get(key)
    if isinstance(v, bool) or not isinstance(v, int) or v < (0 if allow_zero else 1):
        what = "nonnegative" if allow_zero else "positive"
        errors.append(FormatError(f"header field {key!r} must be a {what} integer, got {v!r}", offset))
        return None
    return v


def _expected_count(kind: str, header: dict, errors: list, offset: int) -> int | None:
    n = _positive_int(header, "n", errors, offset)
    m = _positive_int(header, "m", errors, offset)
    L = header.get("domain_length")
    if isinstance(L, bool) or not isinstance(L, (int, float)) or not np.isfinite(L) or L <= 0:
        errors.append(FormatError(f"header field 'domain_length' must be positive, got {L!r}", offset))
    if n is None or m is None:
        return None
    if kind == "ensemble":
        N = _positive_int(header, "N", errors, offset, allow_zero=True)
        return None if N is None else m * n * N
    if kind == "kernel":
        return n * n * m * m
    J = _positive_int(header, "J", errors, offset, allow_zero=True)
    if J is None:
        return None
    if J > m * n:
        errors.append(FormatError(f"header J={J} exceeds m*n={m * n}", offset))
        return None
    return J + J * n * m


def _parse(data: bytes, errors: list, expect: str | None = None):
    """Decode ``data``; append every problem found to ``errors``."""
    if len(data) < _PREFIX:
        errors.append(FormatError(f"file too short for magic and header length: {len(data)} bytes", 0))
        return None, None, None
    magic = data[:8]
    kind = KINDS.get(magic)
    if kind is None:
        errors.append(FormatError(f"unknown magic {magic!r}", 0))
        return None, None, None
    if expect is not None and kind != expect:
        errors.append(FormatError(f"expected a {expect} file, found {kind} magic {magic.decode()}", 0))
        return kind, None, None
    (hlen,) = struct.unpack("<Q", data[8:16])
    if _PREFIX + hlen > len(data):
        errors.append(FormatError(f"header length {hlen} runs past end of file ({len(data)} bytes)", 8))
        return kind, None, None
    try:
        header = json.loads(data[_PREFIX : _PREFIX + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        errors.append(FormatError(f"header is not valid JSON: {exc}", _PREFIX))
        return kind, None, None
    if not isinstance(header, dict):
        errors.append(FormatError("header must be a JSON object", _PREFIX))
        return kind, None, None
    start = _PREFIX + hlen
    count = _expected_count(kind, header, errors, _PREFIX)
    if count is None:
        return kind, header, None
    expected_bytes, actual_bytes = 8 * count, len(data) - start
    if actual_bytes < expected_bytes:
        errors.append(
            FormatError(f"truncated payload: expected {expected_bytes} bytes, found {actual_bytes}", len(data))
        )
        return kind, header, None
    if actual_bytes > expected_bytes:
        errors.append(
            FormatError(
                f"trailing bytes: expected {expected_bytes} payload bytes, found {actual_bytes}",
                start + expected_bytes,
            )
        )
        return kind, header, None
    payload = np.frombuffer(data, dtype="<f8", count=count, offset=start).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(payload))
    if bad.size:
        off = start + 8 * int(bad[0])
        errors.append(FormatError(f"non-finite value {payload[bad[0]]} in payload ({bad.size} total)", off))
        return kind, header, None
    return kind, header, payload


def _load(path, expect: str):
    errors: list = []
    kind, header, payload = _parse(Path(path).read_bytes(), errors, expect)
    if errors:
        raise errors[0]
    return header, payload


def write_ensemble(path, ens: FlowEnsemble) -> None:
    header = _grid_header(ens.grid, ens.trunc)
    header["N"] = ens.N
    for key in ("seed", "generator"):
        if key in ens.meta:
            header[key] = ens.meta[key]
    Path(path).write_bytes(_encode(ENSEMBLE_MAGIC, header, ens.X.T.reshape(-1)))


def read_ensemble(path) -> FlowEnsemble:
    header, payload = _load(path, "ensemble")
    grid = Grid(header["n"], float(header["domain_length"]))
    trunc = BasisTruncation(header["m"])
    X = payload.reshape(header["N"], grid.n * trunc.m).T
    meta = {k: header[k] for k in ("seed", "generator") if k in header}
    return FlowEnsemble(grid, trunc, X, meta)


def write_kernel(path, K: DiscreteKernel) -> None:
    Path(path).write_bytes(_encode(KERNEL_MAGIC, _grid_header(K.grid, K.trunc), K.blocks.reshape(-1)))


def read_kernel(path) -> DiscreteKernel:
    header, payload = _load(path, "kernel")
    grid = Grid(header["n"], float(header["domain_length"]))
    n, m = grid.n, header["m"]
    return DiscreteKernel(grid, BasisTruncation(m), payload.reshape(n, n, m, m))


def write_eigensystem(path, eig: EigenSystem) -> None:
    header = _grid_header(eig.grid, eig.trunc)
    header["J"] = eig.count
    payload = np.concatenate([eig.eigenvalues, eig.eigenflows.reshape(-1)])
    Path(path).write_bytes(_encode(EIGEN_MAGIC, header, payload))


def read_eigensystem(path) -> EigenSystem:
    header, payload = _load(path, "eigensystem")
    grid = Grid(header["n"], float(header["domain_length"]))
    m, J = header["m"], header["J"]
    return EigenSystem(grid, BasisTruncation(m), payload[:J], payload[J:].reshape(J, grid.n, m))


def write_eigenvalues_csv(path, eig: EigenSystem) -> None:
    lines = ["j,lambda"] + [f"{j},{lam!r}" for j, lam in enumerate(eig.eigenvalues.tolist(), 1)]
    Path(path).write_text("\n".join(lines) + "\n")


def sniff(path) -> str | None:
    """Kind of file at ``path`` judged by its magic, or ``None``."""
    with open(path, "rb") as fh:
        return KINDS.get(fh.read(8))


def validate_file(path) -> ValidationReport:
    """Check magic, header, payload length and finiteness without raising."""
    report = ValidationReport(str(path))
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        report.errors.append(FormatError(f"cannot read file: {exc}"))
        return report
    kind, header, _ = _parse(data, report.errors)
    report.kind, report.header = kind, header
    return report
