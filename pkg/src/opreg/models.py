"""DeepONet variants: dot / Cartesian / POD-splice / decoder / multi-decoder merges.

Every model routes the function matrix to the branch net, observation
coordinates to the trunk net and, for the multi-decoder, the training-label
mean field to a branch-average net, then merges.  Predictions are produced in
a normalized label space and mapped back by ``label_shift + label_scale * y``;
both constants default to the identity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import OperatorDataset, ProdDataset, mean_field
from .errors import LayoutError, ShapeError
from .layers import Network, forward

MODEL_KINDS = ("deeponet", "deeponet-cart", "pod-deeponet", "decoder", "multi-decoder")

# layouts each kind accepts
LAYOUTS = {
    "deeponet": ("prod",),
    "deeponet-cart": ("aligned",),
    "pod-deeponet": ("aligned",),
    "decoder": ("aligned", "unaligned"),
    "multi-decoder": ("aligned", "unaligned"),
}

__all__ = [
    "MODEL_KINDS",
    "Batch",
    "DotProduct",
    "CartesianProduct",
    "PODSplice",
    "Decoder",
    "MultiDecoder",
    "OperatorModel",
    "dot_merge",
    "cartesian_merge",
    "compute_pod_modes",
    "pod_merge",
    "decoder_merge",
    "multi_decoder_merge",
    "mean_field",
    "mse_loss",
    "model_forward",
    "make_batch",
]


# ---------------------------------------------------------------- merges


def dot_merge(branch_out: Tensor, trunk_out: Tensor, b0: Tensor | float = 0.0) -> Tensor:
    """Row-wise ``sum_k branch[i, k] * trunk[i, k] + b0`` as ``[B, 1]``."""
    if branch_out.shape != trunk_out.shape:
        raise ShapeError(f"dot merge width mismatch: branch {branch_out.shape}, trunk {trunk_out.shape}")
    return ad.sum(branch_out * trunk_out, axis=1, keepdims=True) + b0


def cartesian_merge(branch_out: Tensor, trunk_out: Tensor, b0: Tensor | float = 0.0) -> Tensor:
    """``branch @ trunk.T + b0``: every function against one shared point set."""
    if branch_out.shape[1] != trunk_out.shape[1]:
        raise ShapeError(f"Cartesian merge width mismatch: branch {branch_out.shape}, trunk {trunk_out.shape}")
    return ad.matmul(branch_out, ad.transpose(trunk_out)) + b0


def compute_pod_modes(labels: np.ndarray, m: int, center: bool = True):
    """Top-``m`` right singular vectors of the (centered) label matrix.

    Returns ``(mean [K], modes [K, m], singular_values [m])``.  Each mode's
    sign is fixed so its largest-magnitude entry is positive.  When fewer than
    ``m`` singular values are nonzero the remaining columns are still an
    orthonormal completion, with a warning.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n, big_k = labels.shape
    if n < 2:
        raise ValueError("POD needs at least two label rows")
    if not 1 <= m <= min(n, big_k):
        raise ValueError(f"POD mode count {m} must lie in [1, min(N, K) = {min(n, big_k)}]")
    mean = labels.mean(axis=0) if center else np.zeros(big_k)
    _, s, vt = np.linalg.svd(labels - mean, full_matrices=False)
    modes = vt[:m].T.copy()
    pivots = np.argmax(np.abs(modes), axis=0)
    modes *= np.where(modes[pivots, np.arange(m)] < 0, -1.0, 1.0)
    tol = max(labels.shape) * np.finfo(np.float64).eps * (s[0] if s.size and s[0] > 0 else 1.0)
    rank = int(np.sum(s > tol))
    if rank < m:
        warnings.warn(f"label matrix has rank {rank} < {m} POD modes; padding with an orthonormal completion", stacklevel=2)
    return mean, modes, s[:m].copy()


def pod_merge(branch_out: Tensor, trunk_out: Tensor | None, mean: np.ndarray, modes: np.ndarray) -> Tensor:
    """Splice POD modes (first) with trunk columns (second), then project."""
    mean = np.asarray(mean, dtype=np.float64)
    modes = np.asarray(modes, dtype=np.float64)
    basis = Tensor(modes)
    if trunk_out is not None and trunk_out.shape[1] > 0:
        if trunk_out.shape[0] != modes.shape[0]:
            raise ShapeError(f"trunk rows {trunk_out.shape[0]} != POD mode length {modes.shape[0]}")
        basis = ad.concat([basis, trunk_out], axis=1)
    if branch_out.shape[1] != basis.shape[1]:
        raise ShapeError(
            f"POD splice width {basis.shape[1]} (modes {modes.shape[1]} + trunk) != branch width {branch_out.shape[1]}"
        )
    return ad.matmul(branch_out, ad.transpose(basis)) + mean


def _decode(rows: list[Tensor], decoder: Network, k: int | None, training: bool, rng) -> Tensor:
    n = rows[0].shape[0]
    stacked = ad.stack(rows, axis=1)
    want = int(np.prod(decoder.input_shape))
    if want != stacked.shape[1] * stacked.shape[2]:
        raise ShapeError(f"decoder input {decoder.input_shape} cannot hold the spliced block {stacked.shape[1:]}")
    out = forward(decoder, ad.reshape(stacked, (n,) + decoder.input_shape), training, rng)
    if k is not None and out.shape[1:] != (k,):
        raise ShapeError(f"decoder output width {out.shape[1:]} != K = {k}")
    return out


def decoder_merge(branch_out: Tensor, trunk_out: Tensor, decoder: Network, k: int | None = None, training=False, rng=None) -> Tensor:
    """Stack (branch, trunk) as rows of a ``[2, p]`` block and decode to ``[N, K]``."""
    if branch_out.shape != trunk_out.shape:
        raise ShapeError(f"decoder merge width mismatch: branch {branch_out.shape}, trunk {trunk_out.shape}")
    return _decode([branch_out, trunk_out], decoder, k, training, rng)


def multi_decoder_merge(
    branch_out: Tensor, branch_avg_out: Tensor, trunk_out: Tensor, decoder: Network, k: int | None = None, training=False, rng=None
) -> Tensor:
    """Stack (branch, branch-average, trunk) as a ``[3, p]`` block and decode.

    A single-row ``branch_avg_out`` is broadcast over the batch.
    """
    n = branch_out.shape[0]
    if branch_avg_out.shape[0] == 1 and n != 1:
        branch_avg_out = ad.take(branch_avg_out, np.zeros(n, dtype=np.intp))
    if not (branch_out.shape == branch_avg_out.shape == trunk_out.shape):
        raise ShapeError(
            f"multi-decoder width mismatch: {branch_out.shape}, {branch_avg_out.shape}, {trunk_out.shape}"
        )
    return _decode([branch_out, branch_avg_out, trunk_out], decoder, k, training, rng)


def mse_loss(pred: Tensor, truth) -> Tensor:
    """Mean of squared differences over every entry."""
    truth = truth if isinstance(truth, Tensor) else Tensor(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"MSE shape mismatch: prediction {pred.shape}, truth {truth.shape}")
    diff = pred - truth
    return ad.mean(diff * diff)


# ---------------------------------------------------------------- model


@dataclass
class DotProduct:
    b0: Tensor = field(default_factory=lambda: Tensor(np.zeros(1), requires_grad=True))


@dataclass
class CartesianProduct:
    b0: Tensor = field(default_factory=lambda: Tensor(np.zeros(1), requires_grad=True))


@dataclass
class PODSplice:
    modes_count: int
    center: bool = True
    mean: np.ndarray | None = None
    modes: np.ndarray | None = None
    singular_values: np.ndarray | None = None


@dataclass
class Decoder:
    net: Network


@dataclass
class MultiDecoder:
    net: Network


MergeStrategy = Union[DotProduct, CartesianProduct, PODSplice, Decoder, MultiDecoder]


@dataclass
class OperatorModel:
    kind: str
    branch: Network
    trunk: Network
    merge: MergeStrategy
    branch_average: Network | None = None
    mean_field: np.ndarray | None = None
    function_shift: float = 0.0
    function_scale: float = 1.0
    label_shift: float = 0.0
    label_scale: float = 1.0
    meta: dict = field(default_factory=dict)  # run settings carried into checkpoints

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if (self.branch_average is not None) != isinstance(self.merge, MultiDecoder):
            raise ValueError("a branch-average net is present exactly for the multi-decoder merge")
        p = self.branch.output_shape
        trunk_p = self.trunk.output_shape
        if isinstance(self.merge, PODSplice):
            if p[0] != self.merge.modes_count + trunk_p[0]:
                raise ShapeError(f"POD branch width {p[0]} != modes {self.merge.modes_count} + trunk {trunk_p[0]}")
        elif p != trunk_p:
            raise ShapeError(f"branch output {p} != trunk output {trunk_p}")
        if self.branch_average is not None and self.branch_average.output_shape != p:
            raise ShapeError(f"branch-average output {self.branch_average.output_shape} != branch output {p}")

    @property
    def latent_width(self) -> int:
        return self.branch.output_shape[0]

    @property
    def layouts(self) -> tuple[str, ...]:
        return LAYOUTS[self.kind]

    def networks(self) -> dict[str, Network]:
        nets = {"branch": self.branch, "trunk": self.trunk}
        if self.branch_average is not None:
            nets["branch_average"] = self.branch_average
        if isinstance(self.merge, (Decoder, MultiDecoder)):
            nets["decoder"] = self.merge.net
        return nets

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors in definition order."""
        params: dict[str, Tensor] = {}
        for prefix, net in self.networks().items():
            for name, t in net.params.items():
                params[f"{prefix}.{name}"] = t
        if isinstance(self.merge, (DotProduct, CartesianProduct)):
            params["merge.b0"] = self.merge.b0
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        """Fixed arrays fitted from training data."""
        out: dict[str, np.ndarray] = {
            "norm": np.array([self.function_shift, self.function_scale, self.label_shift, self.label_scale])
        }
        if isinstance(self.merge, PODSplice):
            out["pod.mean"] = self.merge.mean
            out["pod.modes"] = self.merge.modes
        if self.mean_field is not None:
            out["mean_field"] = self.mean_field
        return out

    def prepare(self, train: OperatorDataset, normalize: bool = True) -> None:
        """Fit normalization, POD modes and the mean field on training data."""
        if normalize:
            f = train.function_matrix
            self.function_shift = float(f.mean())
            self.function_scale = float(f.std()) or 1.0
            y = train.output_matrix
            self.label_shift = float(y.mean())
            self.label_scale = float(y.std()) or 1.0
        scaled = (train.output_matrix - self.label_shift) / self.label_scale
        if isinstance(self.merge, PODSplice):
            self.merge.mean, self.merge.modes, self.merge.singular_values = compute_pod_modes(
                scaled, self.merge.modes_count, center=self.merge.center
            )
        if isinstance(self.merge, MultiDecoder):
            self.mean_field = mean_field(train.output_matrix)


@dataclass
class Batch:
    """A minibatch in one layout.

    ``function`` holds distinct function rows.  In the prod layout
    ``function_index`` maps each row of ``grid`` to its function.
    """

    layout: str
    function: np.ndarray
    grid: np.ndarray
    labels: np.ndarray | None = None
    function_index: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.grid) if self.layout == "prod" else len(self.function)


def make_batch(ds: OperatorDataset | ProdDataset, rows=None) -> Batch:
    """Slice ``rows`` (samples, or prod rows) out of a dataset."""
    if isinstance(ds, ProdDataset):
        rows = np.arange(ds.n_rows) if rows is None else np.asarray(rows, dtype=np.intp)
        base = ds.base
        sample = rows // base.n_points
        point = rows % base.n_points
        uniq, inverse = np.unique(sample, return_inverse=True)
        if base.mode == "aligned":
            grid = base.grid_matrix[point]
        else:
            grid = base.grid_matrix[sample, point]
        return Batch("prod", base.function_matrix[uniq], grid, base.output_matrix[sample, point][:, None], inverse)
    rows = np.arange(ds.n_samples) if rows is None else np.asarray(rows, dtype=np.intp)
    grid = ds.grid_matrix if ds.mode == "aligned" else ds.grid_matrix[rows]
    return Batch(ds.mode, ds.function_matrix[rows], grid, ds.output_matrix[rows])


def _run(net: Network, data: np.ndarray, training: bool, rng) -> Tensor:
    x = np.asarray(data, dtype=np.float64)
    return forward(net, Tensor(x.reshape((x.shape[0],) + net.input_shape)), training, rng)


def model_forward(
    model: OperatorModel, batch: Batch, training: bool = False, rng: np.random.Generator | None = None, normalized: bool = False
) -> Tensor:
    """Predict in label units: ``[B, 1]`` for prod batches, ``[N, K]`` otherwise.

    ``normalized=True`` skips the final denormalization (training loss space).
    """
    if batch.layout not in model.layouts:
        if isinstance(model.merge, PODSplice) and batch.layout != "aligned":
            raise LayoutError("POD-DeepONet requires aligned data: one observation set feeds the POD basis")
        raise LayoutError(f"model '{model.kind}' accepts {'/'.join(model.layouts)} data, got {batch.layout}")
    functions = (batch.function - model.function_shift) / model.function_scale
    merge = model.merge
    n_out = batch.size
    if n_out == 0:
        width = 1 if batch.layout == "prod" else batch.grid.shape[-2]
        return Tensor(np.zeros((0, width)))
    if isinstance(merge, DotProduct):
        b = _run(model.branch, functions, training, rng)
        b = ad.take(b, batch.function_index)
        t = _run(model.trunk, batch.grid, training, rng)
        out = dot_merge(b, t, merge.b0)
    elif isinstance(merge, CartesianProduct):
        out = cartesian_merge(_run(model.branch, functions, training, rng), _run(model.trunk, batch.grid, training, rng), merge.b0)
    elif isinstance(merge, PODSplice):
        if merge.modes is None:
            raise ShapeError("POD modes have not been computed; call prepare() on training data")
        b = _run(model.branch, functions, training, rng)
        t = _run(model.trunk, batch.grid, training, rng) if model.trunk.output_shape[0] > 0 else None
        out = pod_merge(b, t, merge.mean, merge.modes)
    else:
        n = len(functions)
        big_k = batch.grid.shape[-2]
        grid = np.broadcast_to(batch.grid, (n,) + batch.grid.shape) if batch.grid.ndim == 2 else batch.grid
        b = _run(model.branch, functions, training, rng)
        t = _run(model.trunk, grid, training, rng)
        if isinstance(merge, Decoder):
            out = decoder_merge(b, t, merge.net, big_k, training, rng)
        else:
            if model.mean_field is None:
                raise ShapeError("multi-decoder needs a mean field; call prepare() on training data")
            avg = (model.mean_field[None, :] - model.label_shift) / model.label_scale
            a = _run(model.branch_average, avg, training, rng)
            out = multi_decoder_merge(b, a, t, merge.net, big_k, training, rng)
    if not normalized and (model.label_scale != 1.0 or model.label_shift != 0.0):
        out = out * model.label_scale + model.label_shift
    return out
