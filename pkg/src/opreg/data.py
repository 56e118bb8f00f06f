"""Operator datasets in aligned, unaligned and prod layouts, plus the ONDS container.

Shapes per layout, with N functions sampled at k points and K observations
of dimension d:

============  ==============  =============  ============
layout        function        grid           output
============  ==============  =============  ============
aligned       [N, k]          [K, d]         [N, K]
unaligned     [N, k]          [N, K, d]      [N, K]
prod          [N*K, k]        [N*K, d]       [N*K, 1]
============  ==============  =============  ============

The prod layout repeats each function row K times; :class:`RepeatedRows`
keeps that virtual so a 1000 x 1849 set does not need 27 GB.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .darcy import DarcyField, interpolate_bilinear, sample_observations
from .errors import BadMagicError, DataFormatError, ShapeError, TruncatedError, VersionError

MAGIC = b"ONDS"
VERSION = 1
_HEADER = struct.Struct("<4sIBIQQQ")
_MODE_CODES = {"aligned": 0, "unaligned": 1}


@dataclass
class OperatorDataset:
    mode: str
    function_matrix: np.ndarray
    grid_matrix: np.ndarray
    output_matrix: np.ndarray
    mean_field: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in _MODE_CODES:
            raise ValueError(f"mode must be 'aligned' or 'unaligned', got {self.mode!r}")
        self.function_matrix = np.asarray(self.function_matrix, dtype=np.float64)
        self.grid_matrix = np.asarray(self.grid_matrix, dtype=np.float64)
        self.output_matrix = np.asarray(self.output_matrix, dtype=np.float64)
        if self.mean_field is not None:
            self.mean_field = np.asarray(self.mean_field, dtype=np.float64)
        self.validate()

    @property
    def n_samples(self) -> int:
        return self.function_matrix.shape[0]

    @property
    def n_sensors(self) -> int:
        return self.function_matrix.shape[1]

    @property
    def n_points(self) -> int:
        return self.output_matrix.shape[1]

    @property
    def dim(self) -> int:
        return self.grid_matrix.shape[-1]

    @property
    def resolution(self) -> int:
        """Side of the square output grid, ``sqrt(K)``."""
        r = int(round(np.sqrt(self.n_points)))
        if r * r != self.n_points:
            raise ShapeError(f"K = {self.n_points} is not a square number")
        return r

    def validate(self) -> None:
        n, _ = self.function_matrix.shape
        if self.output_matrix.ndim != 2 or self.output_matrix.shape[0] != n:
            raise ShapeError(f"output matrix {self.output_matrix.shape} does not match {n} functions")
        big_k = self.output_matrix.shape[1]
        want = (big_k, self.dim) if self.mode == "aligned" else (n, big_k, self.dim)
        if self.grid_matrix.shape != want:
            raise ShapeError(f"{self.mode} grid matrix must be {list(want)}, got {list(self.grid_matrix.shape)}")
        if self.mean_field is not None and self.mean_field.shape != (big_k,):
            raise ShapeError(f"mean field must be [{big_k}], got {list(self.mean_field.shape)}")

    def subset(self, rows: Sequence[int]) -> "OperatorDataset":
        rows = np.asarray(rows, dtype=np.intp)
        grid = self.grid_matrix if self.mode == "aligned" else self.grid_matrix[rows]
        return OperatorDataset(self.mode, self.function_matrix[rows], grid, self.output_matrix[rows], self.mean_field)

    def grid_for(self, rows: Sequence[int]) -> np.ndarray:
        """Per-sample observation blocks ``[len(rows), K, d]`` for either layout."""
        rows = np.asarray(rows, dtype=np.intp)
        if self.mode == "aligned":
            return np.broadcast_to(self.grid_matrix, (len(rows),) + self.grid_matrix.shape)
        return self.grid_matrix[rows]

    def prod(self) -> "ProdDataset":
        return ProdDataset(self)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "function": self.function_matrix.shape,
            "grid": self.grid_matrix.shape,
            "output": self.output_matrix.shape,
        }


class RepeatedRows:
    """Read-only ``[N*K, k]`` view whose row ``r`` is ``base[r // K]``."""

    def __init__(self, base: np.ndarray, repeats: int):
        self.base = base
        self.repeats = repeats

    @property
    def shape(self) -> tuple[int, int]:
        return (self.base.shape[0] * self.repeats, self.base.shape[1])

    def __len__(self) -> int:
        return self.shape[0]

    def __getitem__(self, rows):
        return self.base[np.asarray(rows) // self.repeats]

    def sample_index(self, rows) -> np.ndarray:
        return np.asarray(rows, dtype=np.intp) // self.repeats


@dataclass
class ProdDataset:
    """One row per (function, observation) pair."""

    base: OperatorDataset

    @property
    def mode(self) -> str:
        return "prod"

    @property
    def function_matrix(self) -> RepeatedRows:
        return RepeatedRows(self.base.function_matrix, self.base.n_points)

    @property
    def grid_matrix(self) -> np.ndarray:
        return self.base.grid_for(np.arange(self.base.n_samples)).reshape(-1, self.base.dim)

    @property
    def output_matrix(self) -> np.ndarray:
        return self.base.output_matrix.reshape(-1, 1)

    @property
    def n_rows(self) -> int:
        return self.base.n_samples * self.base.n_points

    def shapes(self) -> dict[str, tuple[int, ...]]:
        n, big_k, d = self.base.n_samples, self.base.n_points, self.base.dim
        return {"function": (n * big_k, self.base.n_sensors), "grid": (n * big_k, d), "output": (n * big_k, 1)}


def expected_shapes(mode: str, n: int, k: int, big_k: int, d: int = 2) -> dict[str, tuple[int, ...]]:
    """Matrix shapes a layout must have (the training-data-size table)."""
    if mode == "aligned":
        return {"function": (n, k), "grid": (big_k, d), "output": (n, big_k)}
    if mode == "unaligned":
        return {"function": (n, k), "grid": (n, big_k, d), "output": (n, big_k)}
    if mode == "prod":
        return {"function": (n * big_k, k), "grid": (n * big_k, d), "output": (n * big_k, 1)}
    raise ValueError(f"unknown layout {mode!r}")


def mean_field(labels: np.ndarray) -> np.ndarray:
    """Column-wise average of the label matrix."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2 or labels.shape[0] == 0:
        raise ValueError("mean field needs a non-empty [N, K] label matrix")
    return labels.mean(axis=0)


def split_indices(n: int, n_train: int, n_test: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint train/test index sets drawn without replacement."""
    if n_train < 1 or n_test < 0 or n_train + n_test > n:
        raise ValueError(f"cannot split {n} samples into {n_train} train / {n_test} test")
    perm = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0xC0FFEE,))).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train : n_train + n_test])


def assemble_dataset(
    fields: Sequence[DarcyField],
    mode: str,
    count: int | None = None,
    seed: int = 0,
    mean_rows: Sequence[int] | None = None,
    order: str = "banded",
) -> OperatorDataset | ProdDataset:
    """Pack Darcy fields into a dataset.

    ``mode`` is ``aligned``, ``unaligned`` or ``prod`` (unaligned observations
    in prod layout).  Unaligned values are bilinear interpolations of each
    pressure field at that sample's own points.  ``mean_rows`` selects the
    samples whose labels define the stored mean field.
    """
    if not fields:
        raise ValueError("no fields to assemble")
    r = fields[0].resolution
    for i, f in enumerate(fields):
        if f.k.shape != (r, r) or f.h.shape != (r, r):
            raise ShapeError(f"field {i} has resolution {f.k.shape}, expected {(r, r)}")
    count = r * r if count is None else count
    base_mode = "unaligned" if mode == "prod" else mode
    functions = np.stack([f.k.reshape(-1) for f in fields])
    if base_mode == "aligned":
        grid = sample_observations(r, count, "aligned", seed)
        outputs = np.stack([f.h.reshape(-1) for f in fields])
    elif base_mode == "unaligned":
        grid = np.stack([sample_observations(r, count, "unaligned", seed, i, order=order) for i in range(len(fields))])
        outputs = np.stack([interpolate_bilinear(f.h, pts) for f, pts in zip(fields, grid)])
    else:
        raise ValueError(f"mode must be aligned, unaligned or prod, got {mode!r}")
    mean = None if mean_rows is None else mean_field(outputs[np.asarray(mean_rows, dtype=np.intp)])
    ds = OperatorDataset(base_mode, functions, grid, outputs, mean)
    out = ds.prod() if mode == "prod" else ds
    want = expected_shapes(mode, len(fields), r * r, count)
    if out.shapes() != want:
        raise ShapeError(f"assembled shapes {out.shapes()} differ from {want}")
    return out


# ---------------------------------------------------------------- ONDS container


def write_dataset(ds: OperatorDataset, path: str | Path) -> None:
    """Write the little-endian ONDS container."""
    header = _HEADER.pack(MAGIC, VERSION, _MODE_CODES[ds.mode], ds.dim, ds.n_samples, ds.n_sensors, ds.n_points)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (ds.function_matrix, ds.grid_matrix, ds.output_matrix):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if ds.mean_field is None:
            fh.write(b"\x00")
        else:
            fh.write(b"\x01")
            fh.write(np.ascontiguousarray(ds.mean_field, dtype="<f8").tobytes())


def read_header(buf: bytes) -> dict:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"not an ONDS file (magic {bytes(buf[:4])!r})")
    if len(buf) < _HEADER.size:
        raise TruncatedError("ONDS header truncated")
    magic, version, mode, d, n, k, big_k = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionError(f"unsupported ONDS version {version} (expected {VERSION})")
    if mode not in (0, 1):
        raise DataFormatError(f"unknown ONDS mode byte {mode}")
    return {"mode": "aligned" if mode == 0 else "unaligned", "d": d, "N": n, "k": k, "K": big_k}


def read_dataset(path: str | Path) -> OperatorDataset:
    buf = Path(path).read_bytes()
    hdr = read_header(buf)
    n, k, big_k, d = hdr["N"], hdr["k"], hdr["K"], hdr["d"]
    grid_shape = (big_k, d) if hdr["mode"] == "aligned" else (n, big_k, d)
    offset = _HEADER.size
    arrays = []
    for shape in ((n, k), grid_shape, (n, big_k)):
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(buf):
            raise TruncatedError(f"ONDS payload truncated at byte {len(buf)} (need {offset + nbytes})")
        arrays.append(np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64))
        offset += nbytes
    if offset >= len(buf):
        raise TruncatedError("ONDS trailer byte missing")
    flag = buf[offset]
    offset += 1
    mean = None
    if flag == 1:
        if offset + 8 * big_k > len(buf):
            raise TruncatedError("ONDS mean field truncated")
        mean = np.frombuffer(buf, dtype="<f8", count=big_k, offset=offset).astype(np.float64)
        offset += 8 * big_k
    elif flag != 0:
        raise DataFormatError(f"bad ONDS trailer flag {flag}")
    if offset != len(buf):
        raise DataFormatError(f"{len(buf) - offset} unexpected trailing bytes in ONDS file")
    return OperatorDataset(hdr["mode"], arrays[0], arrays[1], arrays[2], mean)
