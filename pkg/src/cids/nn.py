"""Small dense-network stack in numpy: MLPs with manual backprop, Gaussian
(mixture) likelihood heads, Adam, finite-difference checking and text
checkpoints.

Everything runs in float64. Weight matrices are stored as ``(fan_in, fan_out)``
so a layer computes ``x @ W + b`` on row-major batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

LOGVAR_MIN = -8.0
LOGVAR_MAX = 8.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

CKPT_MAGIC = "cids-ckpt v1"


class DenseNet:
    """Fully connected ReLU network with a linear output layer.

    Parameters live in ``self.params`` as ``[W0, b0, W1, b1, ...]``; ``forward``
    caches the activations needed by the next ``backward`` call.
    """

    def __init__(self, sizes: Sequence[int], params: List[np.ndarray]):
        sizes = [int(s) for s in sizes]
        if len(params) != 2 * (len(sizes) - 1):
            raise ValueError("expected one weight and one bias per layer")
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if params[2 * k].shape != (n_in, n_out) or params[2 * k + 1].shape != (n_out,):
                raise ValueError(f"layer {k} has shape {params[2 * k].shape}, expected {(n_in, n_out)}")
        self.sizes = sizes
        self.params = [np.asarray(p, dtype=np.float64) for p in params]
        self._cache = None

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def copy(self) -> "DenseNet":
        return DenseNet(self.sizes, [p.copy() for p in self.params])

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input has {x.shape[-1]} features, network expects {self.in_dim}")
        inputs = []
        h = x
        for k in range(self.n_layers):
            inputs.append(h)
            z = h @ self.params[2 * k] + self.params[2 * k + 1]
            h = np.maximum(z, 0.0) if k < self.n_layers - 1 else z
        self._cache = inputs
        return h[0] if squeeze else h

    __call__ = forward

    def backward(self, grad_out: np.ndarray):
        """Backpropagate ``dL/dy`` from the last ``forward`` call.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` aligned to
        ``self.params``.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != (self._cache[0].shape[0], self.out_dim):
            raise ValueError(f"gradient shape {g.shape} does not match the last forward pass")
        grads: List[Optional[np.ndarray]] = [None] * len(self.params)
        for k in reversed(range(self.n_layers)):
            h_in = self._cache[k]
            grads[2 * k] = h_in.T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.params[2 * k].T
            if k > 0:
                # h_in is the ReLU output of layer k-1; its mask equals the preactivation mask
                g = g * (h_in > 0.0)
        return grads, g


def init_mlp(in_dim: int, out_dim: int, hidden: int = 128, hidden_layers: int = 3, seed=0) -> DenseNet:
    """Glorot-uniform weights, zero biases, deterministic per ``seed``."""
    if min(in_dim, out_dim) < 1 or hidden < 1 or hidden_layers < 0:
        raise ValueError("layer sizes must be positive")
    rng = np.random.default_rng(seed)
    sizes = [in_dim] + [hidden] * hidden_layers + [out_dim]
    params = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        params.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
        params.append(np.zeros(n_out))
    return DenseNet(sizes, params)


@dataclass
class GaussianHead:
    """Diagonal Gaussian with clamped log-variance."""

    mean: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.logvar = np.clip(np.asarray(self.logvar, dtype=np.float64), LOGVAR_MIN, LOGVAR_MAX)

    @classmethod
    def from_output(cls, out: np.ndarray) -> "GaussianHead":
        d = out.shape[-1] // 2
        return cls(out[..., :d], out[..., d:])


def gaussian_nll(target, head: GaussianHead):
    """Negative log-density summed over the last axis."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != head.mean.shape:
        raise ValueError("target and head shapes differ")
    sq = (target - head.mean) ** 2
    per_dim = HALF_LOG_2PI + 0.5 * head.logvar + sq / (2.0 * np.exp(head.logvar))
    return per_dim.sum(axis=-1)


def gaussian_nll_grad(target, head: GaussianHead, raw_logvar=None):
    """Gradients of ``gaussian_nll`` w.r.t. mean and log-variance.

    If the unclamped ``raw_logvar`` is given, the log-variance gradient is
    zeroed where the clamp is active.
    """
    target = np.asarray(target, dtype=np.float64)
    inv_var = np.exp(-head.logvar)
    diff = target - head.mean
    d_mean = -diff * inv_var
    d_logvar = 0.5 - 0.5 * diff ** 2 * inv_var
    if raw_logvar is not None:
        d_logvar = d_logvar * ((raw_logvar >= LOGVAR_MIN) & (raw_logvar <= LOGVAR_MAX))
    return d_mean, d_logvar


def head_size(out_dim: int, n_components: int) -> int:
    """Number of network outputs needed for a per-dimension mixture head."""
    return 2 * out_dim if n_components == 1 else 3 * n_components * out_dim


def mixture_nll(target: np.ndarray, out: np.ndarray, n_components: int = 1):
    """Per-dimension Gaussian-mixture negative log-likelihood.

    Each target dimension gets its own ``n_components``-way mixture. For a
    single component the layout is ``[mean | logvar]`` and the result equals
    ``gaussian_nll`` per dimension; otherwise ``[logits | means | logvars]``,
    each block ``d * K`` wide and ordered dimension-major.

    Returns ``(nll, jac)`` where ``nll`` has shape ``(n, d)`` and ``jac`` maps a
    weight matrix ``w`` of shape ``(n, d)`` to ``d(sum(w * nll))/d(out)``.
    """
    target = np.asarray(target, dtype=np.float64)
    n, d = target.shape
    k = n_components
    if out.shape != (n, head_size(d, k)):
        raise ValueError(f"head output shape {out.shape} does not fit {d} dims x {k} components")
    if k == 1:
        raw_lv = out[:, d:]
        head = GaussianHead(out[:, :d], raw_lv)
        sq = (target - head.mean) ** 2
        nll = HALF_LOG_2PI + 0.5 * head.logvar + sq / (2.0 * np.exp(head.logvar))
        d_mean, d_lv = gaussian_nll_grad(target, head, raw_lv)

        def jac(w):
            return np.concatenate([w * d_mean, w * d_lv], axis=1)

        return nll, jac

    logits = out[:, : d * k].reshape(n, d, k)
    means = out[:, d * k : 2 * d * k].reshape(n, d, k)
    raw_lv = out[:, 2 * d * k :].reshape(n, d, k)
    lv = np.clip(raw_lv, LOGVAR_MIN, LOGVAR_MAX)
    log_pi = logits - _logsumexp(logits, axis=-1, keepdims=True)
    diff = target[:, :, None] - means
    inv_var = np.exp(-lv)
    log_comp = log_pi - HALF_LOG_2PI - 0.5 * lv - 0.5 * diff ** 2 * inv_var
    lse = _logsumexp(log_comp, axis=-1, keepdims=True)
    nll = -lse[..., 0]
    resp = np.exp(log_comp - lse)
    pi = np.exp(log_pi)
    g_logit = pi - resp
    g_mean = -resp * diff * inv_var
    g_lv = resp * (0.5 - 0.5 * diff ** 2 * inv_var)
    g_lv = g_lv * ((raw_lv >= LOGVAR_MIN) & (raw_lv <= LOGVAR_MAX))

    def jac(w):
        w3 = w[:, :, None]
        return np.concatenate(
            [(w3 * g_logit).reshape(n, -1), (w3 * g_mean).reshape(n, -1), (w3 * g_lv).reshape(n, -1)],
            axis=1,
        )

    return nll, jac


def _logsumexp(x, axis=-1, keepdims=False):
    m = np.max(x, axis=axis, keepdims=True)
    s = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return s if keepdims else np.squeeze(s, axis=axis)


@dataclass
class AdamState:
    """Moment accumulators for one parameter list."""

    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: List[np.ndarray], grads: Sequence[np.ndarray], lr: float, state: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Convenience wrapper binding a parameter list to an ``AdamState``."""

    def __init__(self, params: List[np.ndarray], lr: float = 1e-3):
        self.params = params
        self.lr = lr
        self.state = AdamState.like(params)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        adam_step(self.params, grads, self.lr, self.state)


def finite_diff_check(net: DenseNet, loss_fn: Callable, x: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(y)`` must return ``(loss, dloss_dy)`` for network output ``y``.
    Relative error per entry is ``|analytic - numeric| / (|analytic| + 1e-8)``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    net.forward(x)
    _, dy = loss_fn(net.forward(x))
    analytic, _ = net.backward(dy)
    worst = 0.0
    for p, g in zip(net.params, analytic):
        flat = p.reshape(-1)
        g_flat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn(net.forward(x))[0]
            flat[i] = orig - eps
            lm = loss_fn(net.forward(x))[0]
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            err = abs(g_flat[i] - numeric) / (abs(g_flat[i]) + 1e-8)
            worst = max(worst, err)
    return worst


def soft_update(target: DenseNet, source: DenseNet, tau: float) -> None:
    """Polyak averaging ``target <- tau * source + (1 - tau) * target``."""
    for pt, ps in zip(target.params, source.params):
        pt *= 1.0 - tau
        pt += tau * ps


# -- checkpoints ---------------------------------------------------------------


def _fmt(values: np.ndarray) -> str:
    return " ".join(repr(float(v)) if np.isfinite(v) else str(float(v)) for v in values.reshape(-1))


def dumps_checkpoint(nets: dict) -> str:
    """Serialize named networks into the line-oriented ``cids-ckpt v1`` format.

    Layout::

        cids-ckpt v1
        net <name> sizes=<n0>,<n1>,...
        tensor <index> <shape>
        <space separated values>
        ...
    """
    lines = [CKPT_MAGIC]
    for name in sorted(nets):
        net = nets[name]
        lines.append(f"net {name} sizes={','.join(str(s) for s in net.sizes)}")
        for i, p in enumerate(net.params):
            lines.append(f"tensor {i} {'x'.join(str(s) for s in p.shape)}")
            lines.append(_fmt(p))
    return "\n".join(lines) + "\n"


def loads_checkpoint(text: str) -> dict:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CKPT_MAGIC:
        raise ValueError("not a cids-ckpt v1 checkpoint")
    nets = {}
    i = 1
    while i < len(lines):
        header = lines[i].split()
        if not header:
            i += 1
            continue
        if header[0] != "net" or not header[2].startswith("sizes="):
            raise ValueError(f"line {i + 1}: expected a net header")
        name = header[1]
        sizes = [int(s) for s in header[2][len("sizes="):].split(",")]
        n_tensors = 2 * (len(sizes) - 1)
        params = []
        i += 1
        for _ in range(n_tensors):
            t_header = lines[i].split()
            shape = tuple(int(s) for s in t_header[2].split("x"))
            values = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
            params.append(values.reshape(shape))
            i += 2
        nets[name] = DenseNet(sizes, params)
    return nets


def save_checkpoint(path, nets: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_checkpoint(nets))


def load_checkpoint(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return loads_checkpoint(fh.read())
