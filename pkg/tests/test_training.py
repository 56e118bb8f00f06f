import struct

import numpy as np
import pytest

from opreg.checkpoint import load_checkpoint, save_checkpoint
from opreg.configs import build_model, darcy_desk
from opreg.darcy import generate_fields
from opreg.data import assemble_dataset
from opreg.errors import CheckpointError, ConfigError, LayoutError, NumericalError, TruncatedError
from opreg.layers import checksum
from opreg.training import (
    CSV_HEADER,
    TrainConfig,
    compare,
    evaluate,
    metrics_csv,
    mse_of,
    split_sizes,
    train,
)


@pytest.fixture(scope="module")
def fields13():
    return generate_fields(13, 12, seed=1)


@pytest.fixture(scope="module")
def unaligned13(fields13):
    return assemble_dataset(fields13, "unaligned", seed=1)


@pytest.fixture(scope="module")
def aligned13(fields13):
    return assemble_dataset(fields13, "aligned")


def _model(kind, data, seed=0):
    return build_model(darcy_desk(kind, data.resolution, pod_modes=4), seed=seed)


def _cfg(kind, **kw):
    base = {"model": kind, "lr": 1e-3, "epochs": 3, "n_train": 9, "n_test": 3, "pod_modes": 4}
    return TrainConfig(**{**base, **kw})


def _fixed_clock():
    return 0.0


def test_train_reduces_loss_on_twenty_samples():
    data = assemble_dataset(generate_fields(29, 20, seed=2), "unaligned", seed=2)
    cfg = TrainConfig(model="decoder", lr=1e-4, epochs=50, n_train=16, n_test=4)
    _, hist = train(_model("decoder", data), data, cfg)
    assert [r.epoch for r in hist] == list(range(51))
    assert hist[-1].train_mse < hist[0].train_mse


def test_zero_learning_rate_is_a_no_op(unaligned13):
    model = _model("decoder", unaligned13)
    before = checksum(model.parameters())
    _, hist = train(model, unaligned13, _cfg("decoder", lr=0.0))
    assert checksum(model.parameters()) == before
    assert len({(r.train_mse, r.test_mse) for r in hist}) == 1


@pytest.mark.parametrize("kind", ["deeponet", "decoder", "multi-decoder"])
def test_same_seed_same_history(unaligned13, kind):
    runs = []
    for _ in range(2):
        _, hist = train(_model(kind, unaligned13), unaligned13, _cfg(kind, dropout=0.2), clock=_fixed_clock)
        runs.append(metrics_csv(hist))
    assert runs[0] == runs[1]


def test_different_seed_changes_history(unaligned13):
    a = train(_model("decoder", unaligned13), unaligned13, _cfg("decoder"))[1]
    b = train(_model("decoder", unaligned13, seed=1), unaligned13, _cfg("decoder", seed=1))[1]
    assert a[-1].train_mse != b[-1].train_mse


def test_history_records_are_well_formed(aligned13):
    _, hist = train(_model("pod-deeponet", aligned13), aligned13, _cfg("pod-deeponet"))
    assert all(r.train_mse >= 0 and r.test_mse >= 0 for r in hist)
    assert all(b.epoch == a.epoch + 1 for a, b in zip(hist, hist[1:]))
    lines = metrics_csv(hist).splitlines()
    assert lines[0] == "epoch,train_mse,test_mse,seconds" and len(lines) == len(hist) + 1


def test_layout_rejected_before_training(unaligned13):
    with pytest.raises(LayoutError, match="aligned"):
        train(_model("pod-deeponet", unaligned13), unaligned13, _cfg("pod-deeponet"))
    with pytest.raises(ConfigError):
        train(_model("decoder", unaligned13), unaligned13, _cfg("multi-decoder"))


def test_config_validation():
    for kw in ({"lr": -1.0}, {"epochs": 0}, {"batch": 0}, {"model": "fno"}, {"dropout": 1.0}):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)
    assert TrainConfig(model="deeponet").batch_size == 4096
    assert TrainConfig(model="decoder").batch_size == 32


def test_split_sizes_shrink():
    assert split_sizes(1200, 1000, 200) == (1000, 200)
    assert split_sizes(12, 1000, 200) == (10, 2)
    with pytest.raises(ConfigError):
        split_sizes(1, 1, 1)


def test_divergence_guard(unaligned13):
    with pytest.raises(NumericalError):
        train(_model("decoder", unaligned13), unaligned13, _cfg("decoder", lr=1e6, epochs=20))


def test_non_finite_labels_abort(fields13):
    data = assemble_dataset(fields13, "aligned")
    data.output_matrix[:, 0] = np.nan
    with pytest.raises(NumericalError):
        train(_model("deeponet-cart", data), data, _cfg("deeponet-cart", normalize=False))


# ---------------------------------------------------------------- evaluate


def test_evaluate_zero_model_on_zero_labels(aligned13):
    zero = assemble_dataset(generate_fields(13, 3, seed=0), "aligned")
    zero.output_matrix[:] = 0.0
    model = _model("deeponet-cart", zero)
    model.prepare(zero, normalize=False)
    for name, p in model.parameters().items():
        if name.startswith("trunk.") and name.split(".")[1] == "2":
            p.data[:] = 0.0
    assert mse_of(model, zero) == 0.0


def test_evaluate_pure_and_permutation_invariant(unaligned13):
    model = _model("multi-decoder", unaligned13)
    model.prepare(unaligned13)
    before = checksum(model.parameters())
    a = mse_of(model, unaligned13)
    assert mse_of(model, unaligned13) == a
    assert checksum(model.parameters()) == before
    perm = np.random.default_rng(0).permutation(unaligned13.n_samples)
    assert abs(mse_of(model, unaligned13.subset(perm)) - a) <= 1e-14 * a


def test_evaluate_splits(unaligned13):
    model = _model("decoder", unaligned13)
    cfg = _cfg("decoder")
    model.prepare(unaligned13)
    tr, te = evaluate(model, unaligned13, "train", cfg), evaluate(model, unaligned13, "test", cfg)
    n_tr, n_te = split_sizes(unaligned13.n_samples, cfg.n_train, cfg.n_test)
    total = evaluate(model, unaligned13, "all")
    assert abs((tr * n_tr + te * n_te) / (n_tr + n_te) - total) < 1e-12 * total
    with pytest.raises(ConfigError):
        evaluate(model, unaligned13, "valid", cfg)


# ---------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("kind,layout", [("deeponet", "unaligned"), ("pod-deeponet", "aligned"), ("multi-decoder", "unaligned")])
def test_checkpoint_roundtrip_preserves_evaluate(tmp_path, unaligned13, aligned13, kind, layout):
    data = aligned13 if layout == "aligned" else unaligned13
    path = tmp_path / "m.onck"
    model, _ = train(_model(kind, data), data, _cfg(kind, epochs=1, ckpt=str(path)))
    back = load_checkpoint(path, expected_kind=kind)
    assert checksum(back.parameters()) == checksum(model.parameters())
    assert mse_of(back, data) == mse_of(model, data)
    assert back.meta["seed"] == 0 and back.meta["n_train"] == 9


def _count_offset(blob):
    (length,) = struct.unpack_from("<Q", blob, 8)
    return 16 + length


def test_checkpoint_integrity_errors(tmp_path, unaligned13):
    path = tmp_path / "d.onck"
    model = _model("decoder", unaligned13)
    model.prepare(unaligned13)
    save_checkpoint(model, path)
    good = path.read_bytes()
    off = _count_offset(good)
    (count,) = struct.unpack_from("<I", good, off)
    bad = tmp_path / "bad.onck"
    bad.write_bytes(good[:off] + struct.pack("<I", count + 1) + good[off + 4 :])
    with pytest.raises(CheckpointError, match="count"):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError, match="expected 'multi-decoder'"):
        load_checkpoint(path, expected_kind="multi-decoder")
    bad.write_bytes(good[:-8])
    with pytest.raises(TruncatedError):
        load_checkpoint(bad)
    bad.write_bytes(good + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(bad)


# ---------------------------------------------------------------- compare


def test_compare_empty_model_list(unaligned13):
    assert compare([unaligned13], []) == ",".join(CSV_HEADER) + "\n"


def test_compare_rows_and_rerun_bytes(tmp_path, unaligned13):
    cfg = _cfg("decoder", epochs=1)
    kinds = ["deeponet", "decoder", "multi-decoder"]
    out = tmp_path / "t.csv"
    text = compare([unaligned13], kinds, cfg, out=out, clock=_fixed_clock)
    rows = text.splitlines()
    assert len(rows) == 4 and out.read_text() == text
    assert [r.split(",")[1] for r in rows[1:]] == ["DeepONet", "Decoder-DeepONet", "Multi-Decoder-DeepONet"]
    assert all(r.split(",")[2] == "13*13" for r in rows[1:])
    assert compare([unaligned13], kinds, cfg, clock=_fixed_clock) == text


def test_compare_records_failing_cell(unaligned13, aligned13):
    text = compare([unaligned13, aligned13], ["pod-deeponet"], _cfg("pod-deeponet", epochs=1), clock=_fixed_clock)
    rows = text.splitlines()[1:]
    assert rows[0].startswith("case-1,POD-DeepONet [failed: LayoutError") and ",nan,nan," in rows[0]
    assert rows[1].startswith("case-2,POD-DeepONet,13*13,") and "nan" not in rows[1]


def test_compare_thread_count_invariant(monkeypatch, unaligned13):
    cfg = _cfg("decoder", epochs=1)
    monkeypatch.setenv("OPREG_THREADS", "1")
    one = compare([unaligned13], ["decoder", "deeponet"], cfg, clock=_fixed_clock)
    monkeypatch.setenv("OPREG_THREADS", "3")
    assert compare([unaligned13], ["decoder", "deeponet"], cfg, clock=_fixed_clock) == one
