"""Transformer encoder stack and the two-layer reconstruction head."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor
from .errors import ConfigError
from .rng import Rng


@dataclass
class ModelConfig:
    n_layers: int = 3
    d_model: int = 768
    n_heads: int = 12
    d_ff: int = 3072
    dropout: float = 0.1
    input_dim: int = 40
    activation: str = "gelu"
    norm_order: str = "post"
    position_encoding: bool = True
    ln_eps: float = 1e-12

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "input_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"model.d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"model.dropout must lie in [0, 1), got {self.dropout}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"model.activation must be gelu or relu, got {self.activation!r}")
        if self.norm_order not in ("post", "pre"):
            raise ConfigError(f"model.norm_order must be post or pre, got {self.norm_order!r}")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


PRESETS = {
    "micro": dict(n_layers=2, d_model=32, n_heads=2, d_ff=64, input_dim=8),
    "base": dict(n_layers=3, d_model=768, n_heads=12, d_ff=3072),
    "medium": dict(n_layers=6, d_model=768, n_heads=12, d_ff=3072),
    "large": dict(n_layers=12, d_model=768, n_heads=12, d_ff=3072),
    "xlarge": dict(n_layers=24, d_model=768, n_heads=12, d_ff=3072),
}


def preset(name, **overrides):
    try:
        kw = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    kw.update(overrides)
    return ModelConfig(**kw)


def layer_parameter_count(cfg):
    d, f = cfg.d_model, cfg.d_ff
    return 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * 2 * d


def parameter_counts(cfg):
    """Closed-form parameter counts by component."""
    d, h = cfg.d_model, cfg.input_dim
    return {
        "input": h * d + d,
        "layers": cfg.n_layers * layer_parameter_count(cfg),
        "norm": 2 * d,
        "head": (d * d + d) + (d * h + h),
    }


# ---------------------------------------------------------------------------
# parameters

def _layer_shapes(cfg, i):
    d, f = cfg.d_model, cfg.d_ff
    p = f"layers.{i}."
    shapes = {}
    for proj in ("q", "k", "v", "o"):
        shapes[p + f"attn.{proj}.weight"] = (d, d)
        shapes[p + f"attn.{proj}.bias"] = (d,)
    shapes[p + "ln1.gain"] = (d,)
    shapes[p + "ln1.bias"] = (d,)
    shapes[p + "ff1.weight"] = (d, f)
    shapes[p + "ff1.bias"] = (f,)
    shapes[p + "ff2.weight"] = (f, d)
    shapes[p + "ff2.bias"] = (d,)
    shapes[p + "ln2.gain"] = (d,)
    shapes[p + "ln2.bias"] = (d,)
    return shapes


def encoder_shapes(cfg):
    shapes = {"input.weight": (cfg.input_dim, cfg.d_model), "input.bias": (cfg.d_model,)}
    for i in range(cfg.n_layers):
        shapes.update(_layer_shapes(cfg, i))
    shapes["norm.gain"] = (cfg.d_model,)
    shapes["norm.bias"] = (cfg.d_model,)
    return shapes


def head_shapes(cfg):
    d, h = cfg.d_model, cfg.input_dim
    return {"head.0.weight": (d, d), "head.0.bias": (d,), "head.1.weight": (d, h), "head.1.bias": (h,)}


def _init_tensor(name, shape, gen, dtype):
    if name.endswith(".gain"):
        data = np.ones(shape, dtype=dtype)
    elif name.endswith(".bias"):
        data = np.zeros(shape, dtype=dtype)
    else:
        data = (0.02 * gen.standard_normal(shape)).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


def init_params(cfg, seed, dtype=np.float32):
    """Fresh ``(encoder_params, head_params)``: weights ~ N(0, 0.02^2), biases 0, gains 1."""
    gen = Rng(seed).numpy_generator()
    enc = {n: _init_tensor(n, s, gen, dtype) for n, s in encoder_shapes(cfg).items()}
    head = {n: _init_tensor(n, s, gen, dtype) for n, s in head_shapes(cfg).items()}
    return enc, head


def params_from_arrays(arrays, requires_grad=True, dtype=None):
    out = {}
    for name, arr in arrays.items():
        arr = np.array(arr, dtype=dtype or arr.dtype, copy=True)
        out[name] = Tensor(arr, requires_grad=requires_grad, name=name)
    return out


def params_to_arrays(params):
    return {name: t.data.copy() for name, t in params.items()}


def count_parameters(params):
    return int(sum(t.data.size for t in params.values()))


# ---------------------------------------------------------------------------
# forward

_POS_CACHE = {}


def sinusoid_table(length, d_model, dtype=np.float32):
    key = (length, d_model, np.dtype(dtype).str)
    table = _POS_CACHE.get(key)
    if table is None:
        pos = np.arange(length, dtype=np.float64)[:, None]
        i = np.arange(0, d_model, 2, dtype=np.float64)
        angle = pos / np.power(10000.0, i / d_model)
        table = np.zeros((length, d_model), dtype=np.float64)
        table[:, 0::2] = np.sin(angle)
        table[:, 1::2] = np.cos(angle[:, : d_model // 2])
        table = table.astype(dtype)
        _POS_CACHE[key] = table
    return table


def _activation(cfg):
    return ad.gelu if cfg.activation == "gelu" else ad.relu


def _affine(x, params, prefix):
    return x @ params[prefix + ".weight"] + params[prefix + ".bias"]


def _attention(h, params, prefix, cfg, key_mask, train, gen):
    B, L, d = h.shape
    nh, dh = cfg.n_heads, cfg.head_dim

    def heads(t):
        return t.reshape(B, L, nh, dh).transpose(0, 2, 1, 3)

    q = heads(_affine(h, params, prefix + ".q"))
    k = heads(_affine(h, params, prefix + ".k"))
    v = heads(_affine(h, params, prefix + ".v"))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    probs = ad.softmax(scores, axis=-1, mask=key_mask)
    probs = ad.dropout(probs, cfg.dropout, gen, train)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    return _affine(ctx, params, prefix + ".o")


def _layer_norm(x, params, prefix, cfg):
    return ad.layer_norm(x, params[prefix + ".gain"], params[prefix + ".bias"], cfg.ln_eps)


def encode(x, params, cfg, pad_mask=None, train_mode=False, gen=None):
    """Run the encoder; returns one hidden-state tensor per layer.

    ``x`` is ``[L, H]`` or ``[B, L, H]`` (array or Tensor); ``pad_mask`` is a
    boolean array of the matching leading shape, True on real frames.  Padded
    keys get zero attention weight.  ``gen`` (numpy Generator) drives dropout
    and is required in train mode when dropout > 0.

    With ``norm_order="post"`` the ``norm`` LayerNorm normalizes the input
    embedding; with ``"pre"`` it is applied to the last layer's output.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=params["input.weight"].dtype))
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.ndim != 3 or x.shape[-1] != cfg.input_dim:
        raise ContractViolation(f"encoder expects [B, L, {cfg.input_dim}] input, got {x.shape}")
    B, L, _ = x.shape
    if pad_mask is None:
        pad_mask = np.ones((B, L), dtype=bool)
    pad_mask = np.asarray(pad_mask, dtype=bool).reshape(B, L)
    if train_mode and cfg.dropout > 0 and gen is None:
        raise ContractViolation("train_mode with dropout needs a random generator")
    key_mask = pad_mask[:, None, None, :]
    act = _activation(cfg)

    h = _affine(x, params, "input")
    if cfg.position_encoding:
        h = h + sinusoid_table(L, cfg.d_model, h.dtype)
    if cfg.norm_order == "post":
        h = _layer_norm(h, params, "norm", cfg)
    h = ad.dropout(h, cfg.dropout, gen, train_mode)

    hidden = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        if cfg.norm_order == "post":
            a = _attention(h, params, p + ".attn", cfg, key_mask, train_mode, gen)
            h = _layer_norm(h + ad.dropout(a, cfg.dropout, gen, train_mode), params, p + ".ln1", cfg)
            f = _affine(act(_affine(h, params, p + ".ff1")), params, p + ".ff2")
            h = _layer_norm(h + ad.dropout(f, cfg.dropout, gen, train_mode), params, p + ".ln2", cfg)
        else:
            a = _attention(_layer_norm(h, params, p + ".ln1", cfg), params, p + ".attn", cfg, key_mask, train_mode, gen)
            h = h + ad.dropout(a, cfg.dropout, gen, train_mode)
            f = _affine(act(_affine(_layer_norm(h, params, p + ".ln2", cfg), params, p + ".ff1")), params, p + ".ff2")
            h = h + ad.dropout(f, cfg.dropout, gen, train_mode)
        hidden.append(h)
    if cfg.norm_order == "pre":
        hidden[-1] = _layer_norm(hidden[-1], params, "norm", cfg)
    if squeeze:
        hidden = [t.reshape(L, cfg.d_model) for t in hidden]
    return hidden


def reconstruct(h_last, head, activation="gelu"):
    """Per-frame affine -> nonlinearity -> affine back to the input dimension."""
    act = ad.gelu if activation == "gelu" else ad.relu
    return _affine(act(_affine(h_last, head, "head.0")), head, "head.1")
