"""Network blocks: gated attention, pooling, transformer with 2-D positional encoding.

Weights follow the ``out x in`` convention, so an affine map of the rows of
``x`` is ``linear(x, W, b) = x @ W.T + b``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .data import Bag, ConfigurationError
from .tensor import Tensor

MODEL_KINDS = ("maxpool", "meanpool", "abmil", "clamsb", "pathmil")
ATTENTION_KINDS = ("abmil", "clamsb", "pathmil")
PE_MODES = ("none", "2d")

CHECKPOINT_MAGIC = b"MILW"
CHECKPOINT_VERSION = 1
PE_BASE = 10000.0


@dataclass
class ModelConfig:
    kind: str = "clamsb"
    num_classes: int = 2
    feature_dim: int = 512
    pe: str = "none"
    sigma: float = 100.0
    heads: int = 8
    embed_dim: int = 512
    attn_dim: int = 256

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if self.pe not in PE_MODES:
            raise ConfigurationError(f"unknown pe mode {self.pe!r}")
        if self.pe == "2d" and self.kind != "pathmil":
            raise ConfigurationError("2-D positional encoding only applies to pathmil")
        if self.kind == "pathmil" and self.embed_dim % self.heads:
            raise ConfigurationError("embed_dim must be divisible by heads")
        if self.embed_dim % 2:
            raise ConfigurationError("embed_dim must be even for sinusoidal encoding")

    @property
    def has_attention(self) -> bool:
        return self.kind in ATTENTION_KINDS


@dataclass
class AttentionScores:
    """Pre-softmax gated scores ``s`` and per-class softmax over instances ``alpha`` (both K x C)."""

    s: Tensor
    alpha: Tensor


@dataclass
class ForwardOutput:
    logits: Tensor
    scores: AttentionScores | None = None
    extras: dict = field(default_factory=dict)


class MILModel:
    """A configured model variant and its named parameters."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=T.TRAIN_DTYPE) -> "MILModel":
        rng = np.random.default_rng(seed)
        shapes = parameter_shapes(config)
        params = {}
        for name, shape in shapes.items():
            arr = _init_array(name, shape, _fan_in(name, shapes), rng)
            params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise T.DimensionError(f"{k}: checkpoint shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = v.astype(self.params[k].dtype, copy=True)

    def astype(self, dtype) -> "MILModel":
        return MILModel(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()},
        )

    def __call__(self, bag: Bag) -> ForwardOutput:
        return forward(self, bag.features, bag.coords)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    e, a, c = cfg.embed_dim, cfg.attn_dim, cfg.num_classes
    shapes: dict[str, tuple[int, ...]] = {"fc.W": (e, cfg.feature_dim), "fc.b": (e,)}
    if cfg.kind in ("maxpool", "meanpool"):
        shapes.update({"head.W": (c, e), "head.b": (c,)})
        return shapes
    shapes.update({"attn.V": (a, e), "attn.bV": (a,)})
    if cfg.kind != "abmil":
        shapes.update({"attn.U": (a, e), "attn.bU": (a,)})
    shapes.update({"attn.W": (c, a), "attn.bW": (c,)})
    if cfg.kind == "abmil":
        shapes.update({"head.W": (c, c * e), "head.b": (c,)})
    elif cfg.kind == "clamsb":
        shapes.update({"head.W": (c, e), "head.b": (c,)})
    else:
        shapes["cls"] = (e,)
        for layer in (1, 2):
            p = f"tf{layer}."
            shapes.update({p + "ln.g": (e,), p + "ln.b": (e,)})
            for proj in ("q", "k", "v", "o"):
                shapes.update({f"{p}W{proj}": (e, e), f"{p}b{proj}": (e,)})
        shapes.update({"tf.ln.g": (e,), "tf.ln.b": (e,)})
        shapes.update({"head.W": (c, e + c * e), "head.b": (c,)})
    return shapes


def _init_array(name: str, shape: tuple[int, ...], fan_in: int | None, rng: np.random.Generator) -> np.ndarray:
    if name == "cls":
        return rng.normal(0.0, 0.02, size=shape)
    if name.endswith("ln.g"):
        return np.ones(shape)
    if name.endswith("ln.b"):
        return np.zeros(shape)
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _fan_in(name: str, shapes: dict[str, tuple[int, ...]]) -> int | None:
    """Fan-in of a weight, or of the weight a bias belongs to."""
    shape = shapes[name]
    if len(shape) == 2:
        return shape[1]
    prefix, _, leaf = name.rpartition(".")
    for weight in (f"{prefix}.W", f"{prefix}.{leaf[1:]}", f"{prefix}.W{leaf[1:]}"):
        if leaf.startswith("b") and weight in shapes and len(shapes[weight]) == 2:
            return shapes[weight][1]
    return None


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


def fc_embed(features: Tensor, model: MILModel) -> Tensor:
    """Affine embedding of each instance row to ``embed_dim``."""
    if features.shape[1] != model.config.feature_dim:
        raise T.DimensionError(
            f"bag feature dim {features.shape[1]} != model feature dim {model.config.feature_dim}"
        )
    return T.linear(features, model["fc.W"], model["fc.b"])


def gated_scores(h: Tensor, model: MILModel) -> AttentionScores:
    """Per-class gated attention scores; row k depends on ``h[k]`` only."""
    a = T.tanh(T.linear(h, model["attn.V"], model["attn.bV"]))
    if "attn.U" in model.params:
        a = T.mul(a, T.sigmoid(T.linear(h, model["attn.U"], model["attn.bU"])))
    s = T.linear(a, model["attn.W"], model["attn.bW"])
    return AttentionScores(s=s, alpha=T.softmax_cols(s))


def attention_pool(h: Tensor, alpha: Tensor) -> Tensor:
    """Class-wise weighted sums of instance rows, shape C x E."""
    if h.shape[0] != alpha.shape[0]:
        raise T.DimensionError(f"attention_pool: {h.shape[0]} instances vs {alpha.shape[0]} weights")
    return T.matmul(T.transpose(alpha), h)


def instance_probs(s: Tensor) -> Tensor:
    return T.sigmoid(s)


def normalize_coords(coords: np.ndarray) -> np.ndarray:
    """Shift each axis to start at 0 and divide both by the larger axis range."""
    c = np.asarray(coords, dtype=np.float64)
    shifted = c - c.min(axis=0)
    max_scale = float(shifted.max()) if shifted.size else 0.0
    if max_scale <= 0.0:
        max_scale = 1.0
    return shifted / max_scale


def sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    """Transformer sinusoidal encoding: even columns sin, odd columns cos."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    i = np.arange(dim // 2, dtype=np.float64)
    freq = 1.0 / PE_BASE ** (2 * i / dim)
    out = np.empty((pos.shape[0], dim))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq)
    return out


def positional_offsets(coords: np.ndarray, dim: int, sigma: float) -> np.ndarray:
    """(K+1) x dim offsets added by the 2-D encoding; row 0 (CLS) is zero."""
    norm = normalize_coords(coords)
    enc = sinusoid(sigma * norm[:, 0], dim) + sinusoid(sigma * norm[:, 1], dim)
    return np.vstack([np.zeros((1, dim)), enc])


def two_d_pos_enc(x: Tensor, coords: np.ndarray, sigma: float = 100.0) -> Tensor:
    if x.shape[0] != len(coords) + 1:
        raise T.DimensionError(f"2DPE: {x.shape[0]} rows need {x.shape[0] - 1} coordinates, got {len(coords)}")
    offsets = positional_offsets(coords, x.shape[1], sigma).astype(x.dtype)
    return T.add(x, Tensor(offsets))


def self_attention(x: Tensor, model: MILModel, prefix: str, heads: int, keep: dict | None = None) -> Tensor:
    """Multi-head scaled dot-product attention over the rows of ``x``."""
    e = x.shape[1]
    hd = e // heads
    q = T.linear(x, model[prefix + "Wq"], model[prefix + "bq"])
    k = T.linear(x, model[prefix + "Wk"], model[prefix + "bk"])
    v = T.linear(x, model[prefix + "Wv"], model[prefix + "bv"])
    outs = []
    maps = []
    for head in range(heads):
        lo, hi = head * hd, (head + 1) * hd
        qh, kh, vh = T.slice_cols(q, lo, hi), T.slice_cols(k, lo, hi), T.slice_cols(v, lo, hi)
        att = T.softmax_rows(T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(hd)))
        maps.append(att)
        outs.append(T.matmul(att, vh))
    if keep is not None:
        keep.setdefault("attention_maps", []).append(maps)
    return T.linear(T.concat_cols(outs), model[prefix + "Wo"], model[prefix + "bo"])


def transformer_layer(x: Tensor, model: MILModel, layer: int, keep: dict | None = None) -> Tensor:
    p = f"tf{layer}."
    y = T.layer_norm(x, model[p + "ln.g"], model[p + "ln.b"])
    return T.add(x, self_attention(y, model, p, model.config.heads, keep))


def transformer_forward(h: Tensor, coords: np.ndarray | None, model: MILModel, keep: dict | None = None) -> Tensor:
    """Prepend CLS, run two pre-norm attention layers (2DPE in between), return the CLS row (1 x E)."""
    cls = T.reshape(model["cls"], (1, model.config.embed_dim))
    x = T.concat_rows([cls, h])
    x = transformer_layer(x, model, 1, keep)
    if coords is not None:
        x = two_d_pos_enc(x, coords, model.config.sigma)
    x = transformer_layer(x, model, 2, keep)
    x = T.layer_norm(x, model["tf.ln.g"], model["tf.ln.b"])
    return T.take_rows(x, [0])


def pathmil_forward(features: Tensor, coords: np.ndarray | None, model: MILModel, keep: dict | None = None) -> ForwardOutput:
    cfg = model.config
    if cfg.pe == "2d" and coords is None:
        raise ConfigurationError("model uses 2-D positional encoding but the bag has no coordinates")
    if cfg.pe == "none":
        coords = None
    h = fc_embed(features, model)
    scores = gated_scores(h, model)
    pooled = attention_pool(h, scores.alpha)
    summary = transformer_forward(h, coords, model, keep)
    flat = T.reshape(pooled, (1, cfg.num_classes * cfg.embed_dim))
    logits = T.linear(T.concat_cols([summary, flat]), model["head.W"], model["head.b"])
    return ForwardOutput(T.reshape(logits, (cfg.num_classes,)), scores)


def baseline_forward(features: Tensor, model: MILModel) -> ForwardOutput:
    cfg = model.config
    h = fc_embed(features, model)
    if cfg.kind in ("maxpool", "meanpool"):
        pooled = T.max_rows(h) if cfg.kind == "maxpool" else T.mean_rows(h)
        logits = T.linear(pooled, model["head.W"], model["head.b"])
        return ForwardOutput(T.reshape(logits, (cfg.num_classes,)))
    scores = gated_scores(h, model)
    pooled = attention_pool(h, scores.alpha)
    if cfg.kind == "abmil":
        flat = T.reshape(pooled, (1, cfg.num_classes * cfg.embed_dim))
        logits = T.reshape(T.linear(flat, model["head.W"], model["head.b"]), (cfg.num_classes,))
    else:
        # One affine readout per class, applied to that class's pooled row.
        logits = T.add(T.sum_cols(T.mul(pooled, model["head.W"])), model["head.b"])
    return ForwardOutput(logits, scores)


def forward(model: MILModel, features, coords=None, keep: dict | None = None) -> ForwardOutput:
    x = T.as_tensor(features, dtype=model["fc.W"].dtype)
    if x.dtype != model["fc.W"].dtype:
        x = Tensor(x.data.astype(model["fc.W"].dtype))
    if model.config.kind == "pathmil":
        return pathmil_forward(x, coords, model, keep)
    return baseline_forward(x, model)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CFG = struct.Struct("<BIIBdIII")


def checkpoint_bytes(model: MILModel) -> bytes:
    cfg = model.config
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += _CFG.pack(
        MODEL_KINDS.index(cfg.kind),
        cfg.num_classes,
        cfg.feature_dim,
        PE_MODES.index(cfg.pe),
        float(cfg.sigma),
        cfg.heads,
        cfg.embed_dim,
        cfg.attn_dim,
    )
    out += struct.pack("<I", len(model.params))
    for name, p in model.params.items():
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape)
        out += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    return bytes(out)


def model_from_bytes(raw: bytes) -> MILModel:
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    kind, c, d, pe, sigma, heads, e, a = _CFG.unpack_from(raw, 8)
    cfg = ModelConfig(
        kind=MODEL_KINDS[kind], num_classes=c, feature_dim=d, pe=PE_MODES[pe],
        sigma=sigma, heads=heads, embed_dim=e, attn_dim=a,
    )
    pos = 8 + _CFG.size
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + n].decode("utf-8")
        pos += n
        (nd,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{nd}I", raw, pos)
        pos += 4 * nd
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
        params[name] = Tensor(data, requires_grad=True, name=name)
    expected = parameter_shapes(cfg)
    if set(expected) != set(params):
        raise ValueError("checkpoint parameter names do not match its config")
    return MILModel(cfg, params)


def save_checkpoint(path, model: MILModel) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> MILModel:
    return model_from_bytes(Path(path).read_bytes())


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
