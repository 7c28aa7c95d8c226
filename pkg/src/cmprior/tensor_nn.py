"""Dense numpy kernels with hand-written reverse-mode gradients.

Every differentiable op comes as a ``*_forward`` returning ``(output, cache)``
and a ``*_backward`` consuming the cache and the upstream gradient. Parameters
are plain ``np.ndarray`` objects collected in ``dict[str, np.ndarray]`` so the
optimizer and the finite-difference checker can treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, InvalidParameterError, TrainingError

Params = dict[str, np.ndarray]


# --------------------------------------------------------------------------- MLP


@dataclass
class MlpWeights:
    """Dense layers with ReLU between them (none after the last)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {i} input width does not chain")

    @classmethod
    def init(cls, widths: Sequence[int], rng: np.random.Generator, dtype=np.float64) -> "MlpWeights":
        """He-uniform init for widths ``[in, h1, ..., out]``."""
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = math.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(weights, biases)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def named(self, prefix: str) -> Params:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{i}.w"] = w
            out[f"{prefix}.{i}.b"] = b
        return out

    def astype(self, dtype) -> "MlpWeights":
        return MlpWeights([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])


def mlp_forward(x: np.ndarray, mlp: MlpWeights):
    if x.shape[-1] != mlp.weights[0].shape[0]:
        raise DimensionError(f"MLP expects last extent {mlp.weights[0].shape[0]}, got {x.shape[-1]}")
    lead = x.shape[:-1]
    h = x.reshape(-1, x.shape[-1])
    inputs = []
    n = len(mlp.weights)
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        inputs.append(h)
        h = h @ w + b
        if i < n - 1:
            h = np.maximum(h, 0)
    return h.reshape(*lead, h.shape[-1]), (lead, inputs)


def mlp_apply(x: np.ndarray, mlp: MlpWeights) -> np.ndarray:
    return mlp_forward(x, mlp)[0]


def mlp_backward(mlp: MlpWeights, cache, grad_out: np.ndarray, prefix: str = "mlp"):
    """Returns ``(grad_x, grads)`` with ``grads`` keyed like ``mlp.named(prefix)``."""
    lead, inputs = cache
    g = grad_out.reshape(-1, grad_out.shape[-1])
    grads = {}
    for i in reversed(range(len(mlp.weights))):
        grads[f"{prefix}.{i}.w"] = inputs[i].T @ g
        grads[f"{prefix}.{i}.b"] = g.sum(axis=0)
        g = g @ mlp.weights[i].T
        if i > 0:
            # inputs[i] is the ReLU output of layer i-1
            g = g * (inputs[i] > 0)
    return g.reshape(*lead, g.shape[-1]), grads


# ------------------------------------------------------------------ convolution


def _pad(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((1, 1), (1, 1), (0, 0)))


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.stack([xp[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)], axis=2)


def conv3x3_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray):
    """Zero-padded, stride-1 3x3 convolution on an ``(h, w, cin)`` map."""
    if x.ndim != 3 or x.shape[0] < 1 or x.shape[1] < 1:
        raise DimensionError(f"expected (h, w, c) input, got {x.shape}")
    h, w, cin = x.shape
    if kernel.shape[:3] != (3, 3, cin) or bias.shape != (kernel.shape[3],):
        raise DimensionError(f"kernel {kernel.shape} / bias {bias.shape} incompatible with {cin} channels")
    cols = _im2col(_pad(x), h, w).reshape(h * w, 9 * cin)
    kmat = kernel.reshape(9 * cin, -1)
    out = (cols @ kmat + bias).reshape(h, w, -1)
    return out, (x.shape, cols, kmat)


def conv3x3_apply(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return conv3x3_forward(x, kernel, bias)[0]


def conv3x3_backward(cache, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_kernel, grad_bias)``."""
    (h, w, cin), cols, kmat = cache
    g = grad_out.reshape(h * w, -1)
    grad_k = (cols.T @ g).reshape(3, 3, cin, -1)
    grad_b = g.sum(axis=0)
    gcols = (g @ kmat.T).reshape(h, w, 9, cin)
    gxp = np.zeros((h + 2, w + 2, cin), dtype=grad_out.dtype)
    for idx in range(9):
        dy, dx = divmod(idx, 3)
        gxp[dy:dy + h, dx:dx + w] += gcols[:, :, idx]
    return gxp[1:-1, 1:-1], grad_k, grad_b


# -------------------------------------------------------------- cross-attention


@dataclass
class AttentionWeights:
    """Single-head projections: queries, keys, values and output."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @classmethod
    def init(cls, width: int, rng: np.random.Generator, dim: int | None = None, dtype=np.float64):
        dim = width if dim is None else dim
        s_in, s_out = 1.0 / math.sqrt(width), 1.0 / math.sqrt(dim)
        return cls(
            rng.normal(0, s_in, (width, dim)).astype(dtype),
            rng.normal(0, s_in, (width, dim)).astype(dtype),
            rng.normal(0, s_in, (width, dim)).astype(dtype),
            rng.normal(0, s_out, (dim, width)).astype(dtype),
        )

    def named(self, prefix: str) -> Params:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk, f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_forward(queries: np.ndarray, keys_values: np.ndarray, aw: AttentionWeights):
    """Attention read-out (without the residual) of ``(m, c)`` queries over ``(n, c)`` tokens."""
    if keys_values.shape[0] == 0:
        raise InvalidParameterError("cross-attention needs at least one key")
    if queries.shape[-1] != aw.wq.shape[0] or keys_values.shape[-1] != aw.wk.shape[0]:
        raise DimensionError(
            f"queries {queries.shape} / tokens {keys_values.shape} do not match projection widths"
        )
    q = queries @ aw.wq
    k = keys_values @ aw.wk
    v = keys_values @ aw.wv
    scale = 1.0 / math.sqrt(aw.wq.shape[1])
    attn = softmax((q @ k.T) * scale, axis=1)
    o = attn @ v
    out = o @ aw.wo
    return out, (queries, keys_values, q, k, v, attn, o, scale)


def attention_backward(aw: AttentionWeights, cache, grad_out: np.ndarray, prefix: str = "attn"):
    """Returns ``(grad_queries, grad_keys_values, grads)``."""
    queries, kv, q, k, v, attn, o, scale = cache
    grads = {f"{prefix}.wo": o.T @ grad_out}
    g_o = grad_out @ aw.wo.T
    g_attn = g_o @ v.T
    g_v = attn.T @ g_o
    g_s = attn * (g_attn - (g_attn * attn).sum(axis=1, keepdims=True)) * scale
    g_q = g_s @ k
    g_k = g_s.T @ q
    grads[f"{prefix}.wq"] = queries.T @ g_q
    grads[f"{prefix}.wk"] = kv.T @ g_k
    grads[f"{prefix}.wv"] = kv.T @ g_v
    g_queries = g_q @ aw.wq.T
    g_kv = g_k @ aw.wk.T + g_v @ aw.wv.T
    return g_queries, g_kv, grads


def cross_attention_apply(queries: np.ndarray, keys_values: np.ndarray, aw: AttentionWeights) -> np.ndarray:
    """Single-head scaled dot-product attention added residually to ``queries``."""
    return queries + attention_forward(queries, keys_values, aw)[0]


# ------------------------------------------------------------------------ loss


def weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray, class_weights: np.ndarray):
    """Weighted softmax cross-entropy, normalized by the sum of applied weights.

    Returns ``(loss, grad_logits)``.
    """
    k = logits.shape[-1]
    z = logits.reshape(-1, k)
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != z.shape[0]:
        raise DimensionError("one label per logit row required")
    if (y < 0).any() or (y >= k).any():
        raise InvalidParameterError(f"labels must lie in [0, {k})")
    cw = np.asarray(class_weights, dtype=z.dtype)
    if cw.shape != (k,) or (cw <= 0).any():
        raise InvalidParameterError("class weights must be K positive values")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    nll = log_norm - shifted[rows, y]
    w = cw[y]
    total_w = w.sum()
    loss = float((w * nll).sum() / total_w)
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, y] -= 1
    grad *= (w / total_w)[:, None]
    return loss, grad.reshape(logits.shape)


# ------------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay, updating parameter arrays in place.

    ``param_lr`` and ``param_decay`` override the base learning rate and
    weight decay for individual parameter names.
    """

    def __init__(
        self,
        params: Params,
        lr: float = 2e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        param_lr: dict[str, float] | None = None,
        param_decay: dict[str, float] | None = None,
    ):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.param_lr = dict(param_lr or {})
        self.param_decay = dict(param_decay or {})
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, grads: Params, lr_scale: float = 1.0) -> None:
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for {name!r}", self.step_count)
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            lr = self.param_lr.get(name, self.lr) * lr_scale
            wd = self.param_decay.get(name, self.weight_decay)
            if wd:
                p *= 1 - lr * wd
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` followed by cosine annealing to zero."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0) if span > 0 else 1.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ----------------------------------------------------------------- grad check


def grad_check(
    f: Callable[[Params], tuple[float, Params]],
    params: Params,
    h: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` maps the parameter dict to ``(value, grads)``; parameters are
    perturbed in place and restored. ``max_entries`` samples that many
    entries per parameter instead of checking all of them.
    """
    _, analytic = f(params)
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            idx = np.arange(flat.size)
        ga = analytic.get(name)
        ga = np.zeros_like(p) if ga is None else ga
        ga = ga.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp, _ = f(params)
            flat[i] = orig - h
            fm, _ = f(params)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = float(ga[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
