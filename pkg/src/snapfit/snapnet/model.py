"""SnapNet: shared per-joint CNN-GRU encoder, attention pooling over joints, sigmoid head.

Parameters live in a plain ``dict[str, np.ndarray]`` so the optimizer,
checkpointing and the gradient oracle can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .loss import focal_grad_logit, focal_loss

VARIANTS = ("full", "no_attention", "no_gru", "no_cnn")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    T: int = 50
    N: int = 7
    k: int = 5
    d_c: int = 16
    d_h: int = 32
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.k % 2 != 1:
            raise ConfigError("kernel size must be odd")
        if self.d_c < 1 or self.d_h < 1:
            raise ConfigError("feature sizes must be positive")
        if self.uses_cnn and self.T < self.k:
            raise ConfigError(f"window length {self.T} shorter than kernel {self.k}")
        if self.uses_cnn and self.T_prime < 1:
            raise ConfigError("window too short for conv + pool")

    @property
    def T_prime(self) -> int:
        return (self.T - self.k + 1) // 2

    @property
    def uses_cnn(self) -> bool:
        return self.variant != "no_cnn"

    @property
    def uses_gru(self) -> bool:
        return self.variant != "no_gru"

    @property
    def uses_attention(self) -> bool:
        return self.variant != "no_attention"

    @property
    def embed_dim(self) -> int:
        return self.d_h if self.uses_gru else self.d_c


def build_variant(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes of the requested variant."""
    shapes: dict[str, tuple[int, ...]] = {}
    if config.uses_cnn:
        shapes["conv_W"] = (config.d_c, config.k)
        shapes["conv_b"] = (config.d_c,)
    if config.uses_gru:
        d_in = config.d_c if config.uses_cnn else 1
        H = config.d_h
        shapes["gru_Wx"] = (d_in, 3 * H)
        shapes["gru_Wh"] = (H, 3 * H)
        shapes["gru_b"] = (3 * H,)
    E = config.embed_dim
    if config.uses_attention:
        shapes["att_W"] = (E, E)
        shapes["att_b"] = (E,)
        shapes["att_u"] = (E,)
    shapes["out_w"] = (E,)
    shapes["out_b"] = ()
    return shapes


def param_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s, dtype=np.int64) for s in build_variant(config).values()))


_FAN_IN = {
    "conv_W": lambda s: s[1],
    "gru_Wx": lambda s: s[0],
    "gru_Wh": lambda s: s[0],
    "att_W": lambda s: s[1],
    "att_u": lambda s: s[0],
    "out_w": lambda s: s[0],
}


def init_params(config: ModelConfig, rng, dtype=np.float64) -> dict[str, np.ndarray]:
    """Uniform fan-in initialization for weights, zeros for biases.

    ``rng`` is an :class:`~snapfit.numerics.RngStream`; every tensor draws
    from its own child stream so adding a tensor never shifts the others.
    Draws are made in float64 and then cast, so a float32 model starts from
    the rounded float64 initialization.
    """
    params = {}
    for i, (name, shape) in enumerate(sorted(build_variant(config).items())):
        if name in _FAN_IN:
            bound = 1.0 / np.sqrt(_FAN_IN[name](shape))
            params[name] = np.asarray(rng.child(i).uniform(-bound, bound, size=shape), dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def param_dtype(params) -> type:
    """The compute dtype of a parameter set: float32 only if every tensor is float32."""
    return np.float32 if all(np.asarray(p).dtype == np.float32 for p in params.values()) else np.float64


def cast_params(params, dtype) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(s, axis=-1):
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_jacobian(alpha: np.ndarray) -> np.ndarray:
    """d alpha_i / d s_j for a single softmax vector."""
    return np.diag(alpha) - np.outer(alpha, alpha)


def attention_pool(h, params):
    """Attention over the joint axis.

    h: (..., N, E). Returns (pooled (..., E), weights (..., N)).
    """
    a = np.tanh(h @ params["att_W"].T + params["att_b"])
    alpha = softmax(a @ params["att_u"], axis=-1)
    return np.einsum("...n,...ne->...e", alpha, h), alpha


def _check_windows(X, config: ModelConfig, dtype=np.float64) -> np.ndarray:
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != (config.T, config.N):
        raise ConfigError(f"expected windows of shape (*, {config.T}, {config.N}), got {X.shape}")
    return X


def _forward(X, params, config: ModelConfig, kern):
    W, T, N = X.shape
    seq = X.transpose(0, 2, 1).reshape(W * N, T)
    cache = {}
    if config.uses_cnn:
        feats, cache["conv"] = kern.conv_forward(seq, params["conv_W"], params["conv_b"])
    else:
        feats = seq[:, :, None]
    if config.uses_gru:
        emb, cache["gru"] = kern.gru_forward(feats, params["gru_Wx"], params["gru_Wh"], params["gru_b"])
    else:
        cache["pool_len"] = feats.shape[1]
        emb = feats.mean(axis=1)
    emb = emb.reshape(W, N, -1)
    if config.uses_attention:
        a = np.tanh(emb @ params["att_W"].T + params["att_b"])
        alpha = softmax(a @ params["att_u"], axis=-1)
        g = np.einsum("wn,wne->we", alpha, emb)
        cache["att"] = (a, alpha)
    else:
        g = emb.mean(axis=1)
    logit = g @ params["out_w"] + params["out_b"]
    cache.update(emb=emb, g=g, logit=logit)
    return logit, cache


def logits(X, params, config: ModelConfig, kern=None) -> np.ndarray:
    """Pre-sigmoid scores, always returned as float64."""
    X = _check_windows(X, config, param_dtype(params))
    return np.asarray(_forward(X, params, config, kern or kernels)[0], dtype=np.float64)


def predict_proba(X, params, config: ModelConfig, kern=None) -> np.ndarray:
    return _sigmoid(logits(X, params, config, kern))


def forward(window, params, config: ModelConfig, kern=None) -> float:
    """Snap probability for a single (T, N) window."""
    window = np.asarray(window)
    if window.shape != (config.T, config.N):
        raise ConfigError(f"expected a ({config.T}, {config.N}) window, got {window.shape}")
    return float(predict_proba(window, params, config, kern)[0])


def _backward(dlogit, params, config: ModelConfig, cache, kern):
    grads = {}
    emb, g = cache["emb"], cache["g"]
    W, N, E = emb.shape
    grads["out_w"] = g.T @ dlogit
    grads["out_b"] = np.asarray(dlogit.sum(), dtype=dlogit.dtype)
    dg = dlogit[:, None] * params["out_w"]
    if config.uses_attention:
        a, alpha = cache["att"]
        demb = alpha[..., None] * dg[:, None, :]
        dalpha = np.einsum("wne,we->wn", emb, dg)
        ds = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        grads["att_u"] = np.einsum("wn,wne->e", ds, a)
        dpre = ds[..., None] * params["att_u"] * (1.0 - a * a)
        grads["att_W"] = np.einsum("wne,wnf->ef", dpre, emb)
        grads["att_b"] = dpre.sum(axis=(0, 1))
        demb = demb + dpre @ params["att_W"]
    else:
        demb = np.broadcast_to(dg[:, None, :] / N, (W, N, E))
    demb = np.ascontiguousarray(demb.reshape(W * N, E))
    if config.uses_gru:
        dfeats, grads["gru_Wx"], grads["gru_Wh"], grads["gru_b"] = kern.gru_backward(
            demb, cache["gru"], need_dx=config.uses_cnn
        )
    else:
        L = cache["pool_len"]
        dfeats = np.repeat(demb[:, None, :] / L, L, axis=1)
    if config.uses_cnn:
        grads["conv_W"], grads["conv_b"] = kern.conv_backward(np.ascontiguousarray(dfeats), cache["conv"])
    return grads


class TrainingFault(FloatingPointError):
    pass


def loss_and_grad(X, y, params, config: ModelConfig, alpha=0.25, gamma=2.0, kern=None):
    """Mean focal loss over a batch and its exact gradient w.r.t. every parameter."""
    kern = kern or kernels
    dtype = param_dtype(params)
    X = _check_windows(X, config, dtype)
    y = np.asarray(y, dtype=np.float64)
    logit, cache = _forward(X, params, config, kern)
    logit = np.asarray(logit, dtype=np.float64)
    if not np.all(np.isfinite(logit)):
        raise TrainingFault(f"non-finite logit for window {int(np.argmin(np.isfinite(logit)))} of the batch")
    p = _sigmoid(logit)
    loss = float(np.mean(focal_loss(y, p, alpha, gamma)))
    dlogit = (focal_grad_logit(y, logit, alpha, gamma) / X.shape[0]).astype(dtype)
    grads = _backward(dlogit, params, config, cache, kern)
    for name, gr in grads.items():
        if not np.all(np.isfinite(gr)):
            raise TrainingFault(f"non-finite gradient in {name}")
    return loss, grads


def backward(batch, params, config: ModelConfig, alpha=0.25, gamma=2.0, kern=None):
    """Gradient of the mean focal loss of ``batch = (X, y)``."""
    X, y = batch
    return loss_and_grad(X, y, params, config, alpha, gamma, kern)[1]


def flatten(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(params[k]) for k in sorted(params)])


def unflatten(vec: np.ndarray, like: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out, i = {}, 0
    for k in sorted(like):
        n = int(np.prod(like[k].shape, dtype=np.int64))
        out[k] = vec[i : i + n].reshape(like[k].shape).copy()
        i += n
    return out
