import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from opreg.autodiff import Tensor
from opreg.configs import AIRFOIL_CONFIGS, build_model, darcy_decoder, darcy_desk, darcy_multi_decoder
from opreg.data import OperatorDataset, mean_field
from opreg.errors import LayoutError, ShapeError
from opreg.layers import Dense, Flatten, build_network
from opreg.models import (
    Batch,
    cartesian_merge,
    compute_pod_modes,
    decoder_merge,
    dot_merge,
    make_batch,
    model_forward,
    mse_loss,
    multi_decoder_merge,
    pod_merge,
)
from opreg.verify import cartesian_prod_gap


def T(x):
    return Tensor(np.asarray(x, dtype=float))


def test_dot_merge_examples():
    assert dot_merge(T([[1, 0]]), T([[0, 1]]), 0.0).data[0, 0] == 0.0
    assert dot_merge(T([[1, 2]]), T([[3, 4]]), 0.5).data[0, 0] == 11.5
    assert np.all(dot_merge(T(np.ones((3, 2))), T(np.zeros((3, 2))), 0.25).data == 0.25)
    with pytest.raises(ShapeError):
        dot_merge(T(np.ones((3, 2))), T(np.ones((3, 4))))


def test_cartesian_merge_examples():
    b, t = T([[1.0, 2.0]]), T([[3.0, 4.0]])
    assert cartesian_merge(b, t, 0.5).data[0, 0] == dot_merge(b, t, 0.5).data[0, 0]
    assert np.all(cartesian_merge(T(np.zeros((4, 3))), T(np.ones((5, 3))), 1.5).data == 1.5)


def test_cartesian_prod_equivalence():
    assert cartesian_prod_gap(8, 25, 10) < 1e-12


@given(st.integers(1, 6), st.integers(1, 9), st.integers(1, 5), st.integers(0, 10**6))
@settings(max_examples=20, deadline=None)
def test_property_cartesian_prod_equivalence(n, big_k, p, seed):
    assert cartesian_prod_gap(n, big_k, p, seed) < 1e-12


def test_pod_constant_rows():
    v = np.arange(5.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mean, modes, s = compute_pod_modes(np.tile(v, (4, 1)), 2)
    assert np.allclose(mean, v) and np.allclose(s, 0)


def test_pod_rank_one():
    w = np.array([1.0, -2.0, 2.0])
    a = np.array([1.0, 2.0, -3.0, 0.5])
    labels = np.outer(a, w)
    with pytest.warns(UserWarning, match="rank"):
        _, modes, s = compute_pod_modes(labels, 2, center=False)
    assert np.allclose(np.abs(modes[:, 0]), np.abs(w) / np.linalg.norm(w))
    assert s[1] < 1e-12


def test_pod_full_rank_reconstruction_and_orthonormality():
    labels = np.random.default_rng(0).standard_normal((50, 200))
    # centering drops the rank to 49; the 50th mode is an orthonormal completion
    with pytest.warns(UserWarning, match="rank 49"):
        mean, modes, s = compute_pod_modes(labels, 50)
    assert np.max(np.abs(modes.T @ modes - np.eye(50))) < 1e-10
    assert np.all(np.diff(s) <= 0)
    recon = mean + (labels - mean) @ modes @ modes.T
    assert np.max(np.abs(recon - labels)) < 1e-8


def test_pod_truncation_residual():
    rng = np.random.default_rng(1)
    labels = rng.standard_normal((30, 12)) @ np.diag(np.linspace(3, 0.1, 12)) @ rng.standard_normal((12, 40))
    m = 5
    mean, modes, _ = compute_pod_modes(labels, m)
    s_all = np.linalg.svd(labels - mean, compute_uv=False)
    coeffs = (labels - mean) @ modes
    recon = pod_merge(T(coeffs), None, mean, modes).data
    assert abs(np.linalg.norm(recon - labels) - np.sqrt(np.sum(s_all[m:] ** 2))) < 1e-8


def test_pod_errors():
    with pytest.raises(ValueError):
        compute_pod_modes(np.ones((3, 4)), 5)
    with pytest.raises(ValueError):
        compute_pod_modes(np.ones((1, 4)), 1)


def test_pod_merge_examples():
    rng = np.random.default_rng(2)
    modes = np.linalg.qr(rng.standard_normal((6, 3)))[0]
    mean = rng.standard_normal(6)
    branch = np.zeros((2, 5))
    branch[0, 1] = 1.0
    out = pod_merge(T(branch), T(np.zeros((6, 2))), mean, modes).data
    assert np.allclose(out[0], mean + modes[:, 1])
    assert np.allclose(out[1], mean)
    # modes first, trunk columns second
    trunk = rng.standard_normal((6, 2))
    branch = np.zeros((1, 5))
    branch[0, 3] = 1.0
    assert np.allclose(pod_merge(T(branch), T(trunk), mean, modes).data[0], mean + trunk[:, 0])
    with pytest.raises(ShapeError):
        pod_merge(T(np.zeros((1, 4))), T(trunk), mean, modes)


def test_pod_table_widths():
    cfg = AIRFOIL_CONFIGS["pod-deeponet"]()
    model = build_model(cfg)
    assert model.branch.output_shape == (128,) and model.trunk.output_shape == (64,)
    assert model.merge.modes_count == 64


def _zero_final(net):
    last = max(int(k.split(".")[0]) for k in net.params)
    net.params[f"{last}.kernel"].data[:] = 0
    net.params[f"{last}.bias"].data[:] = 0


def test_decoder_merge_widths_and_zero_field():
    specs, shape = darcy_decoder(61)["decoder"]
    dec = build_network(specs, shape, 0)
    b = T(np.random.default_rng(0).standard_normal((2, 200)))
    assert decoder_merge(b, b, dec, 3721).shape == (2, 3721)
    _zero_final(dec)
    assert not decoder_merge(b, b, dec, 3721).data.any()
    with pytest.raises(ShapeError):
        decoder_merge(b, b, dec, 841)


def test_multi_decoder_merge_widths_and_zero_field():
    specs, shape = darcy_multi_decoder(61)["decoder"]
    dec = build_network(specs, shape, 0)
    rng = np.random.default_rng(1)
    b, a, t = (T(rng.standard_normal((3, 20))) for _ in range(3))
    assert multi_decoder_merge(b, a, t, dec, 3721).shape == (3, 3721)
    assert multi_decoder_merge(b, T(a.data[:1]), t, dec).shape == (3, 3721)
    _zero_final(dec)
    assert not multi_decoder_merge(b, a, t, dec).data.any()
    with pytest.raises(ShapeError):
        multi_decoder_merge(b, T(np.zeros((3, 19))), t, dec)


def test_decoder_row_order_matters():
    dec = build_network([Flatten(), Dense(8, "relu"), Dense(4)], (2, 3), 3)
    rng = np.random.default_rng(3)
    b, t = T(rng.standard_normal((2, 3))), T(rng.standard_normal((2, 3)))
    assert not np.allclose(decoder_merge(b, t, dec).data, decoder_merge(t, b, dec).data)


def test_mean_field_examples():
    assert np.array_equal(mean_field([[1.0, 2.0], [3.0, 4.0]]), [2.0, 3.0])
    assert np.array_equal(mean_field([[5.0, 6.0]]), [5.0, 6.0])
    v = np.array([[1.5, -2.0, 3.0]])
    assert not mean_field(np.vstack([v, -v])).any()
    with pytest.raises(ValueError):
        mean_field(np.zeros((0, 3)))


@given(
    arrays(np.float64, (4, 3), elements=st.integers(-8, 8).map(float)),
    arrays(np.float64, (4, 3), elements=st.integers(-8, 8).map(float)),
    st.sampled_from([0.5, 2.0, -1.0, 0.25]),
    st.sampled_from([1.0, -0.5, 4.0]),
)
@settings(max_examples=40, deadline=None)
def test_property_mean_field_linear(a, b, x, y):
    assert np.array_equal(mean_field(x * a + y * b), x * mean_field(a) + y * mean_field(b))


def test_mse_examples():
    p = T([[1.0, 2.0]])
    assert mse_loss(p, p.data).data[0] == 0.0
    assert np.isclose(mse_loss(T(np.full((2, 3), 3.0)), np.zeros((2, 3))).data[0], 9.0)
    assert mse_loss(p, np.zeros((1, 2))).data[0] == 2.5
    with pytest.raises(ShapeError):
        mse_loss(p, np.zeros((2, 1)))


# ---------------------------------------------------------------- model_forward


def _dataset(mode, n=3, r=13, seed=0):
    rng = np.random.default_rng(seed)
    f = rng.choice([3.0, 12.0], size=(n, r * r))
    if mode == "aligned":
        grid = np.stack(np.meshgrid(np.linspace(0, 1, r), np.linspace(0, 1, r), indexing="ij"), -1).reshape(-1, 2)
    else:
        grid = rng.random((n, r * r, 2))
    return OperatorDataset(mode, f, grid, rng.standard_normal((n, r * r)))


@pytest.mark.parametrize("kind", ["deeponet", "decoder", "multi-decoder"])
def test_unaligned_output_shapes(kind):
    ds = _dataset("unaligned", n=3, r=29)
    model = build_model(darcy_desk(kind, 29), seed=0)
    model.prepare(ds)
    view = ds.prod() if kind == "deeponet" else ds
    out = model_forward(model, make_batch(view))
    assert out.shape == ((3 * 841, 1) if kind == "deeponet" else (3, 841))


def test_darcy_61_decoder_unaligned_shapes():
    ds = _dataset("unaligned", n=2, r=61)
    model = build_model(darcy_decoder(61), seed=0)
    assert ds.shapes() == {"function": (2, 3721), "grid": (2, 3721, 2), "output": (2, 3721)}
    assert model_forward(model, make_batch(ds)).shape == (2, 3721)


@pytest.mark.parametrize("kind", ["pod-deeponet", "deeponet-cart"])
def test_aligned_only_models_reject_unaligned(kind):
    model = build_model(darcy_desk(kind, 13, pod_modes=2), seed=0)
    model.prepare(_dataset("aligned"))
    with pytest.raises(LayoutError, match="aligned" if kind == "pod-deeponet" else "accepts"):
        model_forward(model, make_batch(_dataset("unaligned")))


def test_dot_model_rejects_sample_batches():
    model = build_model(darcy_desk("deeponet", 13), seed=0)
    with pytest.raises(LayoutError):
        model_forward(model, make_batch(_dataset("aligned")))


def test_cartesian_empty_batch():
    model = build_model(darcy_desk("deeponet-cart", 13), seed=0)
    ds = _dataset("aligned")
    batch = Batch("aligned", np.zeros((0, 169)), ds.grid_matrix, np.zeros((0, 169)))
    assert model_forward(model, batch).shape == (0, 169)


def test_prod_batch_dedupes_functions():
    ds = _dataset("unaligned", n=4)
    batch = make_batch(ds.prod(), np.array([0, 1, 170, 500, 2]))
    assert len(batch.function) == 3
    assert np.array_equal(batch.function[batch.function_index], ds.function_matrix[[0, 0, 1, 2, 0]])


def test_normalization_round_trip():
    ds = _dataset("aligned", n=6)
    model = build_model(darcy_desk("deeponet-cart", 13), seed=0)
    model.prepare(ds)
    batch = make_batch(ds)
    raw = model_forward(model, batch).data
    norm = model_forward(model, batch, normalized=True).data
    assert np.allclose(raw, norm * model.label_scale + model.label_shift, rtol=0, atol=1e-12)


def test_branch_average_iff_multi_decoder():
    from opreg.models import OperatorModel

    m = build_model(darcy_desk("multi-decoder", 29), seed=0)
    with pytest.raises(ValueError):
        OperatorModel("multi-decoder", m.branch, m.trunk, m.merge, branch_average=None)


def test_multi_decoder_mean_field_from_training_labels():
    ds = _dataset("unaligned", n=5, r=29)
    model = build_model(darcy_desk("multi-decoder", 29), seed=0)
    model.prepare(ds.subset([0, 1, 2]))
    assert np.array_equal(model.mean_field, ds.output_matrix[:3].mean(axis=0))
