"""Training loop, evaluation and the method-comparison table.

Randomness is drawn from streams derived from the master seed (split,
per-epoch shuffle, dropout), so a run is a pure function of its inputs.
Metrics are accumulated in a fixed order; wall-clock seconds are the only
non-reproducible column.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._threads import thread_count
from .autodiff import backward
from .checkpoint import save_checkpoint
from .configs import build_model, darcy_desk
from .data import OperatorDataset, ProdDataset, read_dataset, split_indices
from .errors import ConfigError, LayoutError, NumericalError, OpregError
from .layers import AdamState, adam_step
from .models import LAYOUTS, MODEL_KINDS, OperatorModel, make_batch, model_forward, mse_loss

log = logging.getLogger(__name__)

CSV_HEADER = ("case", "method", "resolution", "train_mse", "test_mse", "epochs", "seconds")
METHOD_NAMES = {
    "deeponet": "DeepONet",
    "deeponet-cart": "DeepONet-Cartesian",
    "pod-deeponet": "POD-DeepONet",
    "decoder": "Decoder-DeepONet",
    "multi-decoder": "Multi-Decoder-DeepONet",
}
DIVERGENCE_FACTOR = 1e6
EVAL_ROWS = 8192
EVAL_SAMPLES = 64

# seed-stream tags
_SHUFFLE = 1
_DROPOUT = 2


@dataclass(frozen=True)
class TrainConfig:
    model: str = "decoder"
    lr: float = 1e-5
    epochs: int = 2000
    batch: int | None = None  # samples per step; rows per step for prod. None -> 32 / 4096
    seed: int = 0
    dropout: float | None = None
    pod_modes: int = 32
    n_train: int = 1000
    n_test: int = 200
    normalize: bool = True
    data: str | None = None
    ckpt: str | None = None

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model!r}; choose from {', '.join(MODEL_KINDS)}")
        if not self.lr >= 0:  # lr = 0 is allowed as a no-op run
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch is not None and self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.pod_modes < 1:
            raise ConfigError("pod_modes must be >= 1")

    @property
    def batch_size(self) -> int:
        if self.batch is not None:
            return self.batch
        return 4096 if self.model == "deeponet" else 32


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    train_mse: float
    test_mse: float
    seconds: float


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def split_sizes(n: int, n_train: int, n_test: int) -> tuple[int, int]:
    """Requested split sizes, shrunk to a 5:1 split when the pool is too small."""
    if n_train + n_test <= n:
        return n_train, n_test
    if n < 2:
        raise ConfigError(f"need at least 2 samples to split, got {n}")
    test = max(1, round(n / 6))
    return n - test, test


def split_dataset(data: OperatorDataset, cfg: TrainConfig) -> tuple[OperatorDataset, OperatorDataset]:
    n_train, n_test = split_sizes(data.n_samples, cfg.n_train, cfg.n_test)
    tr, te = split_indices(data.n_samples, n_train, n_test, cfg.seed)
    return data.subset(tr), data.subset(te)


def training_view(model: OperatorModel, data: OperatorDataset) -> OperatorDataset | ProdDataset:
    """The dataset in the layout ``model`` trains on (prod for dot-product DeepONet)."""
    if isinstance(data, ProdDataset):
        data = data.base
    if model.kind == "deeponet":
        return data.prod()
    if data.mode not in LAYOUTS[model.kind]:
        if model.kind == "pod-deeponet":
            raise LayoutError("POD-DeepONet requires aligned data: one observation set feeds the POD basis")
        raise LayoutError(f"model '{model.kind}' accepts {'/'.join(LAYOUTS[model.kind])} data, got {data.mode}")
    return data


def _units(view) -> int:
    return view.n_rows if isinstance(view, ProdDataset) else view.n_samples


def mse_of(model: OperatorModel, data: OperatorDataset) -> float:
    """Eval-mode MSE over every label entry, accumulated in a fixed chunk order."""
    view = training_view(model, data)
    total = _units(view)
    if total == 0:
        raise ValueError("cannot evaluate an empty dataset")
    step = EVAL_ROWS if isinstance(view, ProdDataset) else EVAL_SAMPLES
    sse = 0.0
    count = 0
    for start in range(0, total, step):
        batch = make_batch(view, np.arange(start, min(start + step, total)))
        pred = model_forward(model, batch, training=False).data
        sse += float(np.sum((pred - batch.labels) ** 2))
        count += pred.size
    return sse / count


def evaluate(model: OperatorModel, data: OperatorDataset, split: str = "test", cfg: TrainConfig | None = None) -> float:
    """MSE of ``model`` on the train or test split that ``cfg`` defines (``all`` for the whole set)."""
    if split == "all":
        return mse_of(model, data)
    if split not in ("train", "test"):
        raise ConfigError(f"split must be train, test or all, got {split!r}")
    train_ds, test_ds = split_dataset(data, cfg or TrainConfig(model=model.kind))
    return mse_of(model, train_ds if split == "train" else test_ds)


def train(
    model: OperatorModel,
    data: OperatorDataset,
    cfg: TrainConfig,
    clock: Callable[[], float] = time.perf_counter,
) -> tuple[OperatorModel, list[MetricsRecord]]:
    """Fit ``model`` with Adam on the seed-defined train split.

    Returns the model (trained in place) and one record per epoch; record 0 is
    the untrained model.  Raises :class:`LayoutError` before any work if the
    data layout does not suit the model, :class:`NumericalError` on a
    non-finite or diverging loss.
    """
    if model.kind != cfg.model:
        raise ConfigError(f"config names model '{cfg.model}' but the model is '{model.kind}'")
    training_view(model, data)
    train_ds, test_ds = split_dataset(data, cfg)
    model.prepare(train_ds, normalize=cfg.normalize)
    view = training_view(model, train_ds)
    params = model.parameters()
    state = AdamState()
    dropout_rng = _rng(cfg.seed, _DROPOUT)
    units = _units(view)
    bs = min(cfg.batch_size, units)
    start = clock()
    history = [MetricsRecord(0, mse_of(model, train_ds), mse_of(model, test_ds), 0.0)]
    initial = history[0].train_mse / model.label_scale**2
    log.info("epoch 0: train %.6e test %.6e", history[0].train_mse, history[0].test_mse)
    for epoch in range(1, cfg.epochs + 1):
        order = _rng(cfg.seed, _SHUFFLE, epoch).permutation(units)
        for lo in range(0, units, bs):
            batch = make_batch(view, order[lo : lo + bs])
            pred = model_forward(model, batch, training=True, rng=dropout_rng, normalized=True)
            loss = mse_loss(pred, (batch.labels - model.label_shift) / model.label_scale)
            value = float(loss.data[0])
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, step {lo // bs}")
            if initial > 0 and value > DIVERGENCE_FACTOR * initial:
                raise NumericalError(
                    f"loss diverged at epoch {epoch}: {value:.3e} exceeds {DIVERGENCE_FACTOR:g} x initial {initial:.3e}"
                )
            for p in params.values():
                p.grad = None
            backward(loss)
            adam_step(params, None, state, cfg.lr)
        rec = MetricsRecord(epoch, mse_of(model, train_ds), mse_of(model, test_ds), clock() - start)
        if not (np.isfinite(rec.train_mse) and np.isfinite(rec.test_mse)):
            raise NumericalError(f"non-finite metrics after epoch {epoch}")
        history.append(rec)
        log.debug("epoch %d: train %.6e test %.6e (%.1fs)", epoch, rec.train_mse, rec.test_mse, rec.seconds)
    log.info("epoch %d: train %.6e test %.6e", history[-1].epoch, history[-1].train_mse, history[-1].test_mse)
    model.meta = {"seed": cfg.seed, "n_train": cfg.n_train, "n_test": cfg.n_test, "epochs": cfg.epochs, "lr": cfg.lr}
    if cfg.ckpt:
        save_checkpoint(model, cfg.ckpt)
    return model, history


def metrics_csv(history: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "train_mse", "test_mse", "seconds"))
    for r in history:
        w.writerow((r.epoch, repr(r.train_mse), repr(r.test_mse), f"{r.seconds:.3f}"))
    return buf.getvalue()


# ---------------------------------------------------------------- comparison


def default_architecture(kind: str, data: OperatorDataset, cfg: TrainConfig) -> dict:
    return darcy_desk(kind, data.resolution, pod_modes=cfg.pod_modes)


def _cell(case: str, kind: str, data: OperatorDataset, cfg: TrainConfig, clock, architecture) -> tuple:
    method = METHOD_NAMES[kind]
    res = f"{data.resolution}*{data.resolution}"
    try:
        cell_cfg = replace(cfg, model=kind, ckpt=None)
        model = build_model(architecture(kind, data, cell_cfg), seed=cfg.seed, dropout=cfg.dropout)
        _, hist = train(model, data, cell_cfg, clock=clock)
        last = hist[-1]
        return (case, method, res, repr(last.train_mse), repr(last.test_mse), last.epoch, f"{last.seconds:.3f}")
    except (OpregError, ValueError, ArithmeticError) as exc:
        log.warning("%s / %s failed: %s", case, method, exc)
        return (case, f"{method} [failed: {type(exc).__name__}: {exc}]", res, "nan", "nan", 0, "0.000")


def compare(
    datasets: Sequence[str | Path | OperatorDataset],
    kinds: Sequence[str],
    cfg: TrainConfig | None = None,
    out: str | Path | None = None,
    clock: Callable[[], float] = time.perf_counter,
    architecture: Callable[[str, OperatorDataset, TrainConfig], dict] = default_architecture,
) -> str:
    """Train every (dataset, kind) cell under one seed and budget; return the CSV text.

    Cases are numbered in dataset-major order.  A failing cell is recorded in
    its row (``nan`` errors, reason appended to the method) and the rest still run.
    """
    cfg = cfg or TrainConfig()
    for kind in kinds:
        if kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {kind!r}")
    loaded = [d if isinstance(d, OperatorDataset) else read_dataset(d) for d in datasets]
    cells = [(d, kind) for d in loaded for kind in kinds]
    jobs = [(f"case-{i + 1}", kind, d) for i, (d, kind) in enumerate(cells)]
    workers = min(thread_count(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda j: _cell(j[0], j[1], j[2], cfg, clock, architecture), jobs))
    else:
        rows = [_cell(case, kind, d, cfg, clock, architecture) for case, kind, d in jobs]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(rows)
    text = buf.getvalue()
    if out is not None:
        Path(out).write_text(text, encoding="utf-8")
    return text
