"""Network architectures: Darcy and airfoil tables, and desk-scale variants.

Each builder returns a dict of ``name -> (layer specs, per-sample input shape)``
plus merge settings; :func:`build_model` instantiates one as an
:class:`~opreg.models.OperatorModel`.
"""

from __future__ import annotations

import numpy as np

from .layers import Conv2D, Conv2DTranspose, Dense, Dropout, Flatten, build_network, spec_from_dict, spec_to_dict
from .models import CartesianProduct, Decoder, DotProduct, MultiDecoder, OperatorModel, PODSplice

DEFAULT_DROPOUT = 0.1


def _conv(filters, kernel, stride, act="relu"):
    return Conv2D(filters, kernel if isinstance(kernel, tuple) else (kernel, kernel), (stride, stride), act)


def _conv_stack(c1: int, c2: int, kernel=5, stride=2):
    return [_conv(c1, kernel, stride), _conv(c2, kernel, stride), Flatten()]


# ---------------------------------------------------------------- Darcy


def darcy_deeponet(resolution: int) -> dict:
    return {
        "kind": "deeponet",
        "branch": (_conv_stack(64, 128) + [Dense(256, "relu"), Dense(256)], (resolution, resolution, 1)),
        "trunk": ([Dense(256, "relu"), Dense(512, "relu"), Dense(512, "relu"), Dense(256)], (2,)),
    }


def darcy_decoder(resolution: int) -> dict:
    k = resolution * resolution
    return {
        "kind": "decoder",
        "branch": (_conv_stack(16, 8) + [Dense(200)], (resolution, resolution, 1)),
        "trunk": (_conv_stack(16, 8) + [Dense(200)], (resolution, resolution, 2)),
        "decoder": ([Flatten(), Dense(1000, "relu"), Dense(k)], (2, 200)),
    }


def darcy_multi_decoder(resolution: int) -> dict:
    k = resolution * resolution
    sub = _conv_stack(16, 8) + [Dense(128, "relu"), Dense(20)]
    return {
        "kind": "multi-decoder",
        "branch": (sub, (resolution, resolution, 1)),
        "branch_average": (sub, (resolution, resolution, 1)),
        "trunk": (sub, (resolution, resolution, 2)),
        "decoder": ([Flatten(), Dense(500, "relu"), Dense(k)], (3, 20)),
    }


def darcy_desk(kind: str, resolution: int, pod_modes: int = 32) -> dict:
    """Desk-scale Darcy nets.

    The decoder variants are the tabulated ones.  The dot/Cartesian/POD
    DeepONets keep the conv branch but shrink the dense widths, since the
    prod layout pushes N*K rows through the trunk every epoch.
    """
    branch_in = (resolution, resolution, 1)
    if kind == "decoder":
        return darcy_decoder(resolution)
    if kind == "multi-decoder":
        return darcy_multi_decoder(resolution)
    if kind in ("deeponet", "deeponet-cart"):
        return {
            "kind": kind,
            "branch": (_conv_stack(16, 8) + [Dense(128, "relu"), Dense(64)], branch_in),
            "trunk": ([Dense(64, "relu"), Dense(64, "relu"), Dense(64)], (2,)),
        }
    if kind == "pod-deeponet":
        return {
            "kind": kind,
            "branch": (_conv_stack(16, 8) + [Dense(128, "relu"), Dense(pod_modes + 32)], branch_in),
            "trunk": ([Dense(64, "relu"), Dense(32)], (2,)),
            "pod_modes": pod_modes,
        }
    raise ValueError(f"unknown model kind {kind!r}")


def darcy_full(kind: str, resolution: int, pod_modes: int = 32) -> dict:
    """Darcy nets at tabulated widths; Cartesian/POD reuse the DeepONet table."""
    if kind == "deeponet":
        return darcy_deeponet(resolution)
    if kind == "deeponet-cart":
        return {**darcy_deeponet(resolution), "kind": kind}
    if kind == "pod-deeponet":
        cfg = darcy_deeponet(resolution)
        branch, shape = cfg["branch"]
        trunk, tshape = cfg["trunk"]
        return {
            "kind": kind,
            "branch": (branch[:-1] + [Dense(256)], shape),
            "trunk": (trunk[:-1] + [Dense(256 - pod_modes)], tshape),
            "pod_modes": pod_modes,
        }
    if kind == "decoder":
        return darcy_decoder(resolution)
    if kind == "multi-decoder":
        return darcy_multi_decoder(resolution)
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------- airfoil


AIRFOIL_SHAPE = (32, 16, 1)
AIRFOIL_GRID = (100, 241, 2)
AIRFOIL_POINTS = 100 * 241


def airfoil_deeponet() -> dict:
    return {
        "kind": "deeponet",
        "branch": (_conv_stack(64, 128) + [Dense(128, "relu"), Dense(200)], AIRFOIL_SHAPE),
        "trunk": ([Dense(256, "relu"), Dense(256, "relu"), Dense(200)], (2,)),
    }


def airfoil_deeponet_aligned() -> dict:
    return {
        "kind": "deeponet-cart",
        "branch": (
            [Dense(512, "relu"), Dense(1024, "relu"), Dense(1024, "relu"), Dense(512, "relu"), Dense(128)],
            (256,),
        ),
        "trunk": ([Dense(256, "relu"), Dense(256, "relu"), Dense(128)], (2,)),
    }


def airfoil_pod_deeponet() -> dict:
    return {
        "kind": "pod-deeponet",
        "branch": (_conv_stack(64, 128) + [Dense(128, "relu"), Dense(128)], AIRFOIL_SHAPE),
        "trunk": ([Dense(128, "relu"), Dense(64)], (2,)),
        "pod_modes": 64,
    }


def _transpose_decoder(dropout: float) -> list:
    return [
        Conv2DTranspose(64, (2, 2), (5, 5), "relu"),
        Conv2D(1, (1, 1), (1, 1), "relu"),
        Flatten(),
        Dropout(dropout),
        Dense(AIRFOIL_POINTS),
    ]


def airfoil_decoder(dropout: float = DEFAULT_DROPOUT) -> dict:
    return {
        "kind": "decoder",
        "branch": (_conv_stack(32, 16) + [Dense(200)], AIRFOIL_SHAPE),
        "trunk": (_conv_stack(32, 16, kernel=(3, 5), stride=3) + [Dense(200)], AIRFOIL_GRID),
        "decoder": (_transpose_decoder(dropout), (2, 200, 1)),
    }


def airfoil_multi_decoder(dropout: float = DEFAULT_DROPOUT) -> dict:
    return {
        "kind": "multi-decoder",
        "branch": (_conv_stack(32, 16) + [Dense(200)], AIRFOIL_SHAPE),
        "branch_average": (_conv_stack(32, 16) + [Dense(200)], AIRFOIL_GRID[:2] + (1,)),
        "trunk": (_conv_stack(32, 16) + [Dense(200)], AIRFOIL_GRID),
        "decoder": (_transpose_decoder(dropout), (3, 200, 1)),
    }


AIRFOIL_CONFIGS = {
    "deeponet": airfoil_deeponet,
    "deeponet-aligned": airfoil_deeponet_aligned,
    "pod-deeponet": airfoil_pod_deeponet,
    "decoder": airfoil_decoder,
    "multi-decoder": airfoil_multi_decoder,
}


# ---------------------------------------------------------------- instantiation


def _subseed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=(i,)).generate_state(1)[0])


def _set_dropout(specs, rate):
    if rate is None:
        return list(specs)
    return [Dropout(rate) if isinstance(s, Dropout) else s for s in specs]


def build_model(config: dict, seed: int = 0, dropout: float | None = None) -> OperatorModel:
    """Instantiate networks for an architecture dict, one derived seed per subnet."""
    kind = config["kind"]
    nets = {}
    for i, name in enumerate(("branch", "trunk", "branch_average", "decoder")):
        if name in config:
            specs, shape = config[name]
            nets[name] = build_network(_set_dropout(specs, dropout), shape, _subseed(seed, i))
    if kind == "deeponet":
        merge = DotProduct()
    elif kind == "deeponet-cart":
        merge = CartesianProduct()
    elif kind == "pod-deeponet":
        merge = PODSplice(modes_count=int(config["pod_modes"]), center=bool(config.get("pod_center", True)))
    elif kind == "decoder":
        merge = Decoder(nets["decoder"])
    elif kind == "multi-decoder":
        merge = MultiDecoder(nets["decoder"])
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return OperatorModel(kind, nets["branch"], nets["trunk"], merge, branch_average=nets.get("branch_average"))


def model_config(model: OperatorModel) -> dict:
    """JSON-ready description sufficient to rebuild ``model``'s architecture."""
    cfg: dict = {"kind": model.kind}
    for name, net in model.networks().items():
        cfg[name] = {"input_shape": list(net.input_shape), "layers": [spec_to_dict(s) for s in net.specs]}
    if isinstance(model.merge, PODSplice):
        cfg["pod_modes"] = model.merge.modes_count
        cfg["pod_center"] = model.merge.center
    return cfg


def config_from_json(cfg: dict) -> dict:
    """Inverse of :func:`model_config` into the builder format."""
    out: dict = {"kind": cfg["kind"]}
    for name in ("branch", "trunk", "branch_average", "decoder"):
        if name in cfg:
            out[name] = ([spec_from_dict(s) for s in cfg[name]["layers"]], tuple(cfg[name]["input_shape"]))
    for key in ("pod_modes", "pod_center"):
        if key in cfg:
            out[key] = cfg[key]
    return out
