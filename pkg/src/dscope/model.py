"""Decoder-only patch transformer for multivariate forecasting.

Channels are folded into the batch axis (channel independence). Each channel
window is instance-normalized, cut into overlapping patches, embedded, passed
through pre-norm causal blocks and mapped to the horizon by a linear head on
the flattened final hidden state.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .seeding import stream
from .tensor import NumericError, Tensor

LN_EPS = 1e-5
INSTANCE_EPS = 1e-5

BLOCK_PARAMS = (
    "ln1.g", "ln1.b",
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.g", "ln2.b",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
)  # fmt: skip


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 8
    d_model: int = 64
    heads: int = 4
    patch_size: int = 16
    stride: int = 8
    t_in: int = 128
    t_out: int = 32
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.layers < 0:
            raise ModelConfigError("layers must be >= 0")
        if self.heads < 1 or self.d_model % self.heads:
            raise ModelConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.patch_size < 1 or self.stride < 1:
            raise ModelConfigError("patch_size and stride must be positive")
        if self.t_in < self.patch_size:
            raise ModelConfigError(f"t_in={self.t_in} is shorter than patch_size={self.patch_size}")
        if self.n_patches < 2:
            raise ModelConfigError(f"t_in={self.t_in}, P={self.patch_size}, S={self.stride} gives {self.n_patches} patch; need >= 2")
        if self.t_out < 1:
            raise ModelConfigError("t_out must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def n_patches(self) -> int:
        return (self.t_in - self.patch_size) // self.stride + 1

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.d_model))

    def to_dict(self) -> dict:
        return asdict(self)


def block_param_count(cfg: ModelConfig) -> int:
    d, m = cfg.d_model, cfg.mlp_hidden
    return 4 * d + 4 * (d * d + d) + (d * m + m) + (m * d + d)


def count_parameters_for(cfg: ModelConfig, n_layers: int | None = None) -> int:
    """Closed-form parameter count."""
    d, n_p = cfg.d_model, cfg.n_patches
    layers = cfg.layers if n_layers is None else n_layers
    embed = cfg.patch_size * d + d
    pos = n_p * d
    final_norm = 2 * d
    head = n_p * d * cfg.t_out + cfg.t_out
    return embed + pos + layers * block_param_count(cfg) + final_norm + head


def _shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m = cfg.d_model, cfg.mlp_hidden
    return {
        "ln1.g": (d,), "ln1.b": (d,),
        "attn.wq": (d, d), "attn.bq": (d,), "attn.wk": (d, d), "attn.bk": (d,),
        "attn.wv": (d, d), "attn.bv": (d,), "attn.wo": (d, d), "attn.bo": (d,),
        "ln2.g": (d,), "ln2.b": (d,),
        "mlp.w1": (d, m), "mlp.b1": (m,), "mlp.w2": (m, d), "mlp.b2": (d,),
    }  # fmt: skip


def block_key(layer_id: int, name: str) -> str:
    return f"blocks.{layer_id}.{name}"


class ForecastModel:
    """Parameters plus the original ids of the blocks it still contains."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], layer_ids: list[int]):
        self.config = config
        self.params = params
        self.layer_ids = list(layer_ids)
        if any(b <= a for a, b in zip(self.layer_ids, self.layer_ids[1:])):
            raise ModelConfigError(f"layer_ids must be strictly increasing: {self.layer_ids}")

    @classmethod
    def init(cls, config: ModelConfig, dtype=np.float64) -> "ForecastModel":
        rng = stream(config.seed, "init")
        d, n_p = config.d_model, config.n_patches
        p: dict[str, np.ndarray] = {}

        def gauss(*shape):
            return rng.normal(0.0, 0.02, size=shape)

        p["embed.w"] = gauss(config.patch_size, d)
        p["embed.b"] = np.zeros(d)
        p["pos"] = gauss(n_p, d)
        for l in range(config.layers):
            for name, shape in _shapes(config).items():
                if name.endswith(".g"):
                    arr = np.ones(shape)
                elif name.split(".")[1].startswith("b"):
                    arr = np.zeros(shape)
                else:
                    arr = gauss(*shape)
                p[block_key(l, name)] = arr
        p["ln_f.g"] = np.ones(d)
        p["ln_f.b"] = np.zeros(d)
        p["head.w"] = gauss(n_p * d, config.t_out)
        p["head.b"] = np.zeros(config.t_out)
        params = {k: Tensor(v, requires_grad=True, name=k, dtype=dtype) for k, v in p.items()}
        return cls(config, params, list(range(config.layers)))

    @property
    def n_layers(self) -> int:
        return len(self.layer_ids)

    @property
    def dtype(self):
        return self.params["embed.w"].dtype

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def with_params(self, params: dict[str, Tensor]) -> "ForecastModel":
        return ForecastModel(self.config, params, self.layer_ids)

    def astype(self, dtype) -> "ForecastModel":
        params = {k: Tensor(v.data, requires_grad=v.requires_grad, name=k, dtype=dtype) for k, v in self.params.items()}
        return self.with_params(params)

    def copy(self) -> "ForecastModel":
        return self.astype(self.dtype)

    def __repr__(self) -> str:
        return f"ForecastModel(layers={self.layer_ids}, d_model={self.config.d_model}, heads={self.config.heads})"


def count_parameters(model: ForecastModel) -> int:
    return int(sum(t.data.size for t in model.params.values()))


# ---------------------------------------------------------------------------
# instrumentation


@dataclass
class LayerTrace:
    """Captured states for one forward call.

    ``hidden[0]`` is the embedding plus positions; ``hidden[i + 1]`` is the
    output of block ``layer_ids[i]``; ``attn[i]`` holds that block's head maps.
    Leading axis is the folded (window, channel) batch.
    """

    hidden: list[np.ndarray]
    attn: list[np.ndarray]
    layer_ids: list[int]
    batch: int = 0
    channels: int = 0
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return len(self.hidden)


# ---------------------------------------------------------------------------
# forward pieces


def instance_normalize(x: np.ndarray, eps: float = INSTANCE_EPS):
    """Per-window, per-channel standardization over the time axis.

    Returns ``(normed, (mean, std, flagged))``; std is clamped to ``eps``
    for constant channels.
    """
    x = np.asarray(x)
    if x.shape[1] < 2:
        raise ModelConfigError("instance normalization needs at least 2 time steps")
    mean = x.mean(axis=1, keepdims=True)
    std = x.std(axis=1, keepdims=True)
    flagged = std < eps
    std = np.where(flagged, eps, std)
    return (x - mean) / std, (mean, std, flagged)


def instance_denormalize(y, mean: np.ndarray, std: np.ndarray):
    if isinstance(y, Tensor):
        return T.add(T.mul(y, std.astype(y.dtype)), mean.astype(y.dtype))
    return y * std + mean


def make_patches(x_normed: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, t_in) -> (B, N_p, P) overlapping patches."""
    if x_normed.shape[-1] < cfg.patch_size:
        raise ModelConfigError(f"input length {x_normed.shape[-1]} < patch_size {cfg.patch_size}")
    view = np.lib.stride_tricks.sliding_window_view(x_normed, cfg.patch_size, axis=-1)
    return np.ascontiguousarray(view[:, :: cfg.stride][:, : cfg.n_patches])


def patch_embed(model: ForecastModel, x_normed: np.ndarray) -> Tensor:
    cfg = model.config
    patches = Tensor._wrap(make_patches(x_normed.astype(model.dtype, copy=False), cfg))
    p = model.params
    return T.add(T.linear(patches, p["embed.w"], p["embed.b"]), p["pos"])


_MASKS: dict[tuple[int, str], np.ndarray] = {}


def causal_mask(n: int, dtype=np.float64) -> np.ndarray:
    key = (n, np.dtype(dtype).str)
    if key not in _MASKS:
        m = np.triu(np.full((n, n), -np.inf, dtype=dtype), k=1)
        m[np.tril_indices(n)] = 0.0
        m.setflags(write=False)
        _MASKS[key] = m
    return _MASKS[key]


def attention(model: ForecastModel, layer_id: int, x: Tensor) -> tuple[Tensor, np.ndarray]:
    cfg = model.config
    p = model.params
    k_ = lambda n: p[block_key(layer_id, n)]  # noqa: E731
    b, n, d = x.shape
    h, dh = cfg.heads, cfg.head_dim

    def heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

    q = heads(T.linear(x, k_("attn.wq"), k_("attn.bq")))
    k = T.transpose(T.reshape(T.linear(x, k_("attn.wk"), k_("attn.bk")), (b, n, h, dh)), (0, 2, 3, 1))
    v = heads(T.linear(x, k_("attn.wv"), k_("attn.bv")))
    scores = T.mul(T.matmul(q, k), np.asarray(1.0 / math.sqrt(dh), dtype=x.dtype))
    a = T.softmax_rows(scores, causal_mask(n, x.dtype))
    ctx = T.reshape(T.transpose(T.matmul(a, v), (0, 2, 1, 3)), (b, n, d))
    return T.linear(ctx, k_("attn.wo"), k_("attn.bo")), a.data


def block(model: ForecastModel, layer_id: int, x: Tensor) -> tuple[Tensor, np.ndarray]:
    p = model.params
    k_ = lambda n: p[block_key(layer_id, n)]  # noqa: E731
    att, amap = attention(model, layer_id, T.layer_norm(x, k_("ln1.g"), k_("ln1.b"), LN_EPS))
    x = T.add(x, att)
    hdn = T.gelu(T.linear(T.layer_norm(x, k_("ln2.g"), k_("ln2.b"), LN_EPS), k_("mlp.w1"), k_("mlp.b1")))
    x = T.add(x, T.linear(hdn, k_("mlp.w2"), k_("mlp.b2")))
    return x, amap


def head(model: ForecastModel, h: Tensor, batch: int, channels: int, mean, std) -> Tensor:
    """Final norm + linear head on flattened patches, then undo instance norm."""
    p = model.params
    cfg = model.config
    z = T.layer_norm(h, p["ln_f.g"], p["ln_f.b"], LN_EPS)
    z = T.reshape(z, (batch * channels, cfg.n_patches * cfg.d_model))
    y = T.linear(z, p["head.w"], p["head.b"])  # (B*V, t_out)
    y = T.transpose(T.reshape(y, (batch, channels, cfg.t_out)), (0, 2, 1))
    return instance_denormalize(y, mean, std)


def forward(model: ForecastModel, x, capture: bool = False):
    """Forecast ``(B, t_out, V)`` from ``(B, t_in, V)``.

    Returns ``(forecast, trace)``; ``forecast`` is a Tensor (recorded on the
    active tape, if any) and ``trace`` is None unless ``capture``.
    """
    cfg = model.config
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim != 3 or x.shape[1] != cfg.t_in:
        raise ModelConfigError(f"expected input (B, {cfg.t_in}, V), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite model input")
    b, _, v = x.shape
    normed, (mean, std, _) = instance_normalize(x)
    folded = normed.transpose(0, 2, 1).reshape(b * v, cfg.t_in)
    h = patch_embed(model, folded)
    hidden = [h.data] if capture else None
    attn = [] if capture else None
    for lid in model.layer_ids:
        h, amap = block(model, lid, h)
        if not np.all(np.isfinite(h.data)):
            raise NumericError(f"non-finite activation in layer {lid}")
        if capture:
            hidden.append(h.data)
            attn.append(amap)
    mean_d = mean.astype(model.dtype)
    std_d = std.astype(model.dtype)
    out = head(model, h, b, v, mean_d, std_d)
    trace = None
    if capture:
        trace = LayerTrace(hidden, attn, list(model.layer_ids), b, v, mean_d, std_d)
    return out, trace


def predict(model: ForecastModel, x, batch_size: int = 256) -> np.ndarray:
    """Tape-free forecast as a numpy array, batched to bound memory."""
    x = np.asarray(x)
    outs = [forward(model, x[i : i + batch_size])[0].data for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


def project_hidden_to_series(model: ForecastModel, trace: LayerTrace, layer: int) -> np.ndarray:
    """Forecast obtained by feeding captured state ``hidden[layer]`` to the head.

    ``layer`` indexes captured states: 0 is the embedding, ``n_states - 1``
    is the final block output.
    """
    if not 0 <= layer < trace.n_states:
        raise IndexError(f"layer {layer} out of range for {trace.n_states} captured states")
    h = Tensor._wrap(np.asarray(trace.hidden[layer]))
    return head(model, h, trace.batch, trace.channels, trace.mean, trace.std).data
