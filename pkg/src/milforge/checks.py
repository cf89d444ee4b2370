"""Finite-difference checks of every differentiable block at 64-bit precision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cfsd import instance_loss, select_top_p
from .gradcheck import DEFAULT_TOLERANCE, GradcheckReport, gradcheck
from .model import (
    MILModel,
    ModelConfig,
    attention_pool,
    forward,
    gated_scores,
    instance_probs,
    parameter_shapes,
    transformer_forward,
)

BLOCKS = ("gated_attention", "pooling", "transformer_2dpe", "pathmil_full")


@dataclass(frozen=True)
class CheckShape:
    k: int = 6
    d: int = 16
    c: int = 4
    embed: int = 8
    attn: int = 6
    heads: int = 2

    def __post_init__(self):
        if self.k > 6 or self.d > 16 or self.c > 4:
            raise ValueError("gradcheck shapes are limited to K<=6, D<=16, C<=4")


def _config(shape: CheckShape, kind: str = "pathmil", pe: str = "2d") -> ModelConfig:
    return ModelConfig(
        kind=kind,
        num_classes=shape.c,
        feature_dim=shape.d,
        pe=pe,
        heads=shape.heads,
        embed_dim=shape.embed,
        attn_dim=shape.attn,
    )


def _params(cfg: ModelConfig, rng: np.random.Generator, names=None) -> dict[str, np.ndarray]:
    init = MILModel.init(cfg, seed=int(rng.integers(2**31)), dtype=T.CHECK_DTYPE)
    out = {}
    for name, p in init.params.items():
        if names is None or name in names:
            # Perturb away from init so LayerNorm gains/biases are not at trivial values.
            out[name] = p.data + 0.1 * rng.standard_normal(p.shape)
    return out


def _model(cfg: ModelConfig, tensors: dict[str, T.Tensor]) -> MILModel:
    return MILModel(cfg, {k: v for k, v in tensors.items() if k in parameter_shapes(cfg)})


def _project(x: T.Tensor, weights: np.ndarray) -> T.Tensor:
    """Random linear functional that turns a block's output into a scalar."""
    return T.sum_all(T.mul(x, T.Tensor(weights)))


def check_gated_attention(shape: CheckShape, rng, **kw) -> GradcheckReport:
    cfg = _config(shape, "clamsb", "none")
    names = ("attn.V", "attn.bV", "attn.U", "attn.bU", "attn.W", "attn.bW")
    inputs = _params(cfg, rng, names)
    inputs["h"] = rng.standard_normal((shape.k, shape.embed))
    r1 = rng.standard_normal((shape.k, shape.c))
    r2 = rng.standard_normal((shape.k, shape.c))

    def fn(t):
        sc = gated_scores(t["h"], _model(cfg, t))
        return T.add(_project(sc.s, r1), _project(sc.alpha, r2))

    return gradcheck(fn, inputs, **kw)


def check_pooling(shape: CheckShape, rng, **kw) -> GradcheckReport:
    inputs = {
        "h": rng.standard_normal((shape.k, shape.embed)),
        "s": rng.standard_normal((shape.k, shape.c)),
    }
    r = rng.standard_normal((shape.c, shape.embed))

    def fn(t):
        return _project(attention_pool(t["h"], T.softmax_cols(t["s"])), r)

    return gradcheck(fn, inputs, **kw)


def check_transformer(shape: CheckShape, rng, **kw) -> GradcheckReport:
    cfg = _config(shape)
    names = [n for n in parameter_shapes(cfg) if n.startswith(("tf", "cls"))]
    inputs = _params(cfg, rng, names)
    inputs["h"] = rng.standard_normal((shape.k, shape.embed))
    coords = rng.uniform(0, 1000, size=(shape.k, 2))
    r = rng.standard_normal((1, shape.embed))

    def fn(t):
        return _project(transformer_forward(t["h"], coords, _model(cfg, t)), r)

    return gradcheck(fn, inputs, **kw)


def check_pathmil(shape: CheckShape, rng, **kw) -> GradcheckReport:
    """Full 2DPE PathMIL with bag cross-entropy plus instance BCE on a fixed selection."""
    cfg = _config(shape)
    inputs = _params(cfg, rng)
    features = rng.standard_normal((shape.k, shape.d))
    coords = rng.uniform(0, 1000, size=(shape.k, 2))
    label = int(rng.integers(shape.c))
    probe = forward(MILModel(cfg, {k: T.Tensor(v) for k, v in inputs.items()}), features, coords)
    # Selection is a discrete step; freeze it so finite differences see a smooth function.
    idx, pseudo = select_top_p(label, probe.scores.s.data, 0.20)

    def fn(t):
        out = forward(_model(cfg, t), features, coords)
        l_bag = T.cross_entropy(out.logits, label)
        l_inst = instance_loss(instance_probs(T.take_rows(out.scores.s, idx)), pseudo)
        return T.add(l_bag, l_inst)

    return gradcheck(fn, inputs, **kw)


CHECKS = {
    "gated_attention": check_gated_attention,
    "pooling": check_pooling,
    "transformer_2dpe": check_transformer,
    "pathmil_full": check_pathmil,
}


def run_checks(
    blocks=BLOCKS,
    shape: CheckShape | None = None,
    seed: int = 0,
    tolerance: float = DEFAULT_TOLERANCE,
    max_entries: int | None = None,
) -> dict[str, GradcheckReport]:
    shape = shape or CheckShape()
    out = {}
    for name in blocks:
        if name not in CHECKS:
            raise KeyError(f"unknown gradcheck block {name!r}")
        rng = np.random.default_rng([seed, BLOCKS.index(name)])
        out[name] = CHECKS[name](shape, rng, tolerance=tolerance, max_entries=max_entries)
    return out
