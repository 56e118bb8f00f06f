"""Scaled Darcy benchmarks and the metric digest used for determinism checks.

``python -m opreg.benchmark`` prints the digest as JSON so a fresh process
(with a different ``OPREG_THREADS``) can be compared against an in-process run.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import sys

import numpy as np

from ._threads import limited_threads
from .darcy import generate_fields, poisson_series, solve_darcy
from .data import assemble_dataset
from .models import compute_pod_modes
from .training import TrainConfig, compare
from .verify import grf_variance

# Scaled protocol shared by every model in a comparison: same seed, same lr,
# same epoch count, default batch sizes.
SCALED = {"resolution": 29, "samples": 250, "n_train": 200, "n_test": 50, "epochs": 200, "lr": 1e-5}
ORDERING_KINDS = ("deeponet", "decoder", "multi-decoder")
POD_KINDS = ("deeponet-cart", "pod-deeponet")


def _zero_clock() -> float:
    return 0.0


def scaled_table(mode: str, kinds, seed: int = 0, epochs: int | None = None) -> str:
    """CSV comparison on a freshly generated scaled Darcy set (seconds column pinned to 0)."""
    s = SCALED
    fields = generate_fields(s["resolution"], s["samples"], seed)
    data = assemble_dataset(fields, mode, seed=seed)
    cfg = TrainConfig(lr=s["lr"], epochs=epochs or s["epochs"], seed=seed, n_train=s["n_train"], n_test=s["n_test"])
    return compare([data], list(kinds), cfg, clock=_zero_clock)


def table_errors(text: str) -> dict[str, tuple[float, float]]:
    """method -> (train MSE, test MSE) from a comparison CSV."""
    return {r["method"]: (float(r["train_mse"]), float(r["test_mse"])) for r in csv.DictReader(io.StringIO(text))}


def poisson_metrics() -> dict:
    h = solve_darcy(np.ones((61, 61)))
    mins = [float(f.h[1:-1, 1:-1].min()) for f in generate_fields(29, 100, 0)]
    return {"center": float(h[30, 30]), "oracle": float(poisson_series(0.5, 0.5)), "interior_min": min(mins)}


def shape_digest(seed: int = 0) -> str:
    """Hash of assembled datasets at every tabulated resolution and mode."""
    digest = hashlib.sha256()
    for r in (29, 43, 61):
        fields = generate_fields(r, 2, seed)
        for mode in ("aligned", "unaligned"):
            ds = assemble_dataset(fields, mode, seed=seed)
            for arr in (ds.function_matrix, ds.grid_matrix, ds.output_matrix):
                digest.update(repr(arr.shape).encode())
                digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def pod_metrics(seed: int = 0) -> dict:
    labels = assemble_dataset(generate_fields(29, 60, seed), "aligned").output_matrix
    _, modes, _ = compute_pod_modes(labels, 32)
    # the first 30 rows have full numerical rank; larger pools repeat
    # constant-permeability fields, whose heads are collinear
    head = labels[:30]
    mean, full, _ = compute_pod_modes(head, len(head), center=False)
    recon = mean + (head - mean) @ full @ full.T
    return {
        "orthonormality": float(np.max(np.abs(modes.T @ modes - np.eye(32)))),
        "reconstruction": float(np.max(np.abs(recon - head)) / np.max(np.abs(head))),
    }


def digest(seed: int = 0, epochs: int | None = None) -> dict:
    """Every reproducible number behind the oracle and benchmark checks."""
    with limited_threads():
        var, target, values = grf_variance(seed=seed)
        return {
            "poisson": poisson_metrics(),
            "grf": {"variance": var, "target": target, "values": sorted(values)},
            "shapes": shape_digest(seed),
            "ordering": scaled_table("unaligned", ORDERING_KINDS, seed, epochs),
            "pod": {**pod_metrics(seed), "table": scaled_table("aligned", POD_KINDS, seed, epochs)},
        }


def main(argv: list[str] | None = None) -> None:
    argv = sys.argv[1:] if argv is None else argv
    seed = int(argv[0]) if argv else 0
    epochs = int(argv[1]) if len(argv) > 1 else None
    json.dump(digest(seed, epochs), sys.stdout, sort_keys=True)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
