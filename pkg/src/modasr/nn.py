"""Minimal neural-network substrate with exact hand-derived gradients.

Everything runs in 64-bit floats. Layers implement an explicit
forward/backward pair (no autodiff graph); every backward has been verified
against central finite differences. Sequence layers operate on time-major
batches of shape (T, B, D) with an optional (T, B) mask so variable-length
sequences can share one batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, TrainingError

DTYPE = np.float64

# Uniform weight-init half-width; forget-gate biases start at +1.0 to keep
# early cell states alive.
INIT_SCALE = 0.08
FORGET_BIAS = 1.0


class Parameter:
    """A named trainable array with an accumulated gradient.

    ``frozen`` parameters keep their value through optimizer steps and are
    excluded from gradient-norm statistics.
    """

    __slots__ = ("name", "value", "grad", "frozen")

    def __init__(self, name: str, value: np.ndarray, frozen: bool = False):
        self.name = name
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.frozen = frozen

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape}, frozen={self.frozen})"


def uniform_init(rng: np.random.Generator, shape, scale: float = INIT_SCALE) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape).astype(DTYPE)


def _as_time_major(x: np.ndarray) -> np.ndarray:
    """Accept (T, D) or (T, B, D); return (T, B, D)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 2:
        return x[:, None, :]
    if x.ndim == 3:
        return x
    raise ConfigurationError(f"expected a (T, D) or (T, B, D) array, got shape {x.shape}")


def lengths_to_mask(lengths: Sequence[int], max_len: int) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    return (np.arange(max_len)[:, None] < lengths[None, :]).astype(DTYPE)


def pack_sequences(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Pad a list of (T_i, D) arrays into one (T_max, B, D) batch.

    Returns the packed batch and the vector of true lengths. Padding rows
    are zero.
    """
    lengths = np.array([s.shape[0] for s in seqs], dtype=np.int64)
    t_max = int(lengths.max())
    dim = seqs[0].shape[1]
    out = np.zeros((t_max, len(seqs), dim), dtype=DTYPE)
    for b, s in enumerate(seqs):
        out[: s.shape[0], b, :] = s
    return out, lengths


class Dense:
    """Affine map applied row-wise: out = x @ W + b."""

    def __init__(self, name: str, in_dim: int, out_dim: int,
                 rng: Optional[np.random.Generator] = None, zero_init: bool = False):
        if in_dim < 1 or out_dim < 1:
            raise ConfigurationError(f"{name}: dense dims must be >= 1")
        if zero_init or rng is None:
            w = np.zeros((in_dim, out_dim), dtype=DTYPE)
        else:
            w = uniform_init(rng, (in_dim, out_dim))
        self.W = Parameter(f"{name}.W", w)
        self.b = Parameter(f"{name}.b", np.zeros((1, out_dim), dtype=DTYPE))
        self.in_dim = in_dim
        self.out_dim = out_dim

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-1] != self.in_dim:
            raise ConfigurationError(
                f"{self.W.name}: input dim {x.shape[-1]} != expected {self.in_dim}")
        flat = x.reshape(-1, self.in_dim)
        out = flat @ self.W.value + self.b.value
        return out.reshape(x.shape[:-1] + (self.out_dim,)), flat

    def backward(self, grad_out: np.ndarray, cache) -> np.ndarray:
        flat_x = cache
        g = grad_out.reshape(-1, self.out_dim)
        self.W.grad += flat_x.T @ g
        self.b.grad += g.sum(axis=0, keepdims=True)
        gx = g @ self.W.value.T
        return gx.reshape(grad_out.shape[:-1] + (self.in_dim,))


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max-subtraction for stability."""
    logits = np.asarray(logits, dtype=DTYPE)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax_backward(grad_out: np.ndarray, log_probs: np.ndarray) -> np.ndarray:
    return grad_out - np.exp(log_probs) * grad_out.sum(axis=-1, keepdims=True)


class Embedding:
    """Id-to-vector lookup with additive gradient scatter."""

    def __init__(self, name: str, num_ids: int, dim: int, rng: np.random.Generator):
        self.table = Parameter(f"{name}.table", uniform_init(rng, (num_ids, dim)))
        self.num_ids = num_ids

    def parameters(self) -> list[Parameter]:
        return [self.table]

    def forward(self, ids: Sequence[int]) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_ids):
            raise DataError(f"{self.table.name}: id out of range [0, {self.num_ids})")
        return self.table.value[ids]

    def backward(self, grad_rows: np.ndarray, ids: Sequence[int]) -> None:
        np.add.at(self.table.grad, np.asarray(ids, dtype=np.int64), grad_rows)


@dataclass
class LstmConfig:
    """Topology of a unidirectional LSTM stack."""

    input_dim: int
    cell_dim: int
    projection_dim: Optional[int] = None
    num_layers: int = 1

    def __post_init__(self):
        if min(self.input_dim, self.cell_dim, self.num_layers) < 1:
            raise ConfigurationError("LSTM dims and layer count must be >= 1")
        if self.projection_dim is not None:
            if self.projection_dim < 1:
                raise ConfigurationError("projection_dim must be >= 1")
            if self.projection_dim >= self.cell_dim:
                raise ConfigurationError("projection_dim must be < cell_dim")

    @property
    def output_dim(self) -> int:
        return self.projection_dim if self.projection_dim is not None else self.cell_dim


class LstmLayer:
    """Single unidirectional LSTM layer, optionally with a linear projection
    of the output (the projected vector feeds the recurrence).

    Gate pre-activations are packed as [input | forget | output | candidate]
    so the three sigmoids run in one call.
    """

    def __init__(self, name: str, input_dim: int, cell_dim: int,
                 projection_dim: Optional[int], rng: np.random.Generator):
        h = cell_dim
        self.input_dim = input_dim
        self.cell_dim = h
        self.proj_dim = projection_dim
        r = projection_dim if projection_dim is not None else h
        self.out_dim = r
        self.Wx = Parameter(f"{name}.Wx", uniform_init(rng, (input_dim, 4 * h)))
        self.Wh = Parameter(f"{name}.Wh", uniform_init(rng, (r, 4 * h)))
        bias = np.zeros((1, 4 * h), dtype=DTYPE)
        bias[0, h:2 * h] = FORGET_BIAS
        self.b = Parameter(f"{name}.b", bias)
        if projection_dim is not None:
            self.Wp = Parameter(f"{name}.Wp", uniform_init(rng, (h, r)))
        else:
            self.Wp = None

    def parameters(self) -> list[Parameter]:
        ps = [self.Wx, self.Wh, self.b]
        if self.Wp is not None:
            ps.append(self.Wp)
        return ps

    def forward(self, x: np.ndarray, mask: Optional[np.ndarray] = None):
        """x: (T, B, D); mask: (T, B) of 0/1 or None. Returns (out, cache)
        with out (T, B, R); rows at or past a sequence's length are zero."""
        x = _as_time_major(x)
        t_len, batch, d = x.shape
        if d != self.input_dim:
            raise ConfigurationError(
                f"{self.Wx.name}: input dim {d} != expected {self.input_dim}")
        h = self.cell_dim
        xg = x.reshape(t_len * batch, d) @ self.Wx.value
        xg = xg.reshape(t_len, batch, 4 * h) + self.b.value[0]

        sig = np.empty((t_len, batch, 3 * h), dtype=DTYPE)   # i, f, o after sigmoid
        cand = np.empty((t_len, batch, h), dtype=DTYPE)      # g after tanh
        cells = np.empty((t_len, batch, h), dtype=DTYPE)     # masked cell states
        tanh_c = np.empty((t_len, batch, h), dtype=DTYPE)
        raw_h = np.empty((t_len, batch, h), dtype=DTYPE)     # o * tanh(c)
        out = np.empty((t_len, batch, self.out_dim), dtype=DTYPE)

        h_prev = np.zeros((batch, self.out_dim), dtype=DTYPE)
        c_prev = np.zeros((batch, h), dtype=DTYPE)
        for t in range(t_len):
            a = xg[t] + h_prev @ self.Wh.value
            s = 1.0 / (1.0 + np.exp(-a[:, :3 * h]))
            g = np.tanh(a[:, 3 * h:])
            c = s[:, :h] * g + s[:, h:2 * h] * c_prev
            if mask is not None:
                c = c * mask[t][:, None]
            tc = np.tanh(c)
            hr = s[:, 2 * h:] * tc
            ho = hr @ self.Wp.value if self.Wp is not None else hr
            sig[t] = s
            cand[t] = g
            cells[t] = c
            tanh_c[t] = tc
            raw_h[t] = hr
            out[t] = ho
            h_prev = ho
            c_prev = c
        cache = (x, sig, cand, cells, tanh_c, raw_h, out, mask)
        return out, cache

    def backward(self, grad_out: np.ndarray, cache) -> np.ndarray:
        """grad_out: (T, B, R). Accumulates parameter gradients, returns the
        gradient w.r.t. the layer input, shape (T, B, D)."""
        x, sig, cand, cells, tanh_c, raw_h, out, mask = cache
        t_len, batch, _ = x.shape
        h = self.cell_dim
        dxg = np.empty((t_len, batch, 4 * h), dtype=DTYPE)
        dh_carry = np.zeros((batch, self.out_dim), dtype=DTYPE)
        dc_carry = np.zeros((batch, h), dtype=DTYPE)
        d_wh = np.zeros_like(self.Wh.value)
        d_wp = np.zeros_like(self.Wp.value) if self.Wp is not None else None

        for t in range(t_len - 1, -1, -1):
            dho = grad_out[t] + dh_carry
            if self.Wp is not None:
                d_wp += raw_h[t].T @ dho
                dhr = dho @ self.Wp.value.T
            else:
                dhr = dho
            s = sig[t]
            i_g, f_g, o_g = s[:, :h], s[:, h:2 * h], s[:, 2 * h:]
            do = dhr * tanh_c[t]
            dct = dhr * o_g * (1.0 - tanh_c[t] ** 2) + dc_carry
            if mask is not None:
                dct = dct * mask[t][:, None]
            c_prev = cells[t - 1] if t > 0 else np.zeros_like(dct)
            di = dct * cand[t]
            df = dct * c_prev
            dg = dct * i_g
            dc_carry = dct * f_g
            da = dxg[t]
            da[:, :h] = di * i_g * (1.0 - i_g)
            da[:, h:2 * h] = df * f_g * (1.0 - f_g)
            da[:, 2 * h:3 * h] = do * o_g * (1.0 - o_g)
            da[:, 3 * h:] = dg * (1.0 - cand[t] ** 2)
            h_prev = out[t - 1] if t > 0 else np.zeros((batch, self.out_dim), dtype=DTYPE)
            d_wh += h_prev.T @ da
            dh_carry = da @ self.Wh.value.T

        self.Wh.grad += d_wh
        if self.Wp is not None:
            self.Wp.grad += d_wp
        flat = dxg.reshape(t_len * batch, 4 * h)
        self.Wx.grad += x.reshape(t_len * batch, -1).T @ flat
        self.b.grad += flat.sum(axis=0, keepdims=True)
        return (flat @ self.Wx.value.T).reshape(x.shape)

    # Incremental (per-step) interface, used by the attention decoder.

    def step(self, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
        """One cell step on a (B, D) input. Returns (h, c, cache)."""
        h = self.cell_dim
        a = x @ self.Wx.value + h_prev @ self.Wh.value + self.b.value
        s = 1.0 / (1.0 + np.exp(-a[:, :3 * h]))
        g = np.tanh(a[:, 3 * h:])
        c = s[:, :h] * g + s[:, h:2 * h] * c_prev
        tc = np.tanh(c)
        hr = s[:, 2 * h:] * tc
        ho = hr @ self.Wp.value if self.Wp is not None else hr
        return ho, c, (x, h_prev, c_prev, s, g, c, tc, hr)

    def step_backward(self, dho: np.ndarray, dc_next: np.ndarray, cache):
        """Backward of one step. Returns (dx, dh_prev, dc_prev)."""
        x, h_prev, c_prev, s, g, c, tc, hr = cache
        h = self.cell_dim
        i_g, f_g, o_g = s[:, :h], s[:, h:2 * h], s[:, 2 * h:]
        if self.Wp is not None:
            self.Wp.grad += hr.T @ dho
            dhr = dho @ self.Wp.value.T
        else:
            dhr = dho
        do = dhr * tc
        dct = dhr * o_g * (1.0 - tc ** 2) + dc_next
        di = dct * g
        df = dct * c_prev
        dg = dct * i_g
        dc_prev = dct * f_g
        da = np.concatenate(
            [di * i_g * (1.0 - i_g),
             df * f_g * (1.0 - f_g),
             do * o_g * (1.0 - o_g),
             dg * (1.0 - g ** 2)], axis=1)
        self.Wx.grad += x.T @ da
        self.Wh.grad += h_prev.T @ da
        self.b.grad += da.sum(axis=0, keepdims=True)
        return da @ self.Wx.value.T, da @ self.Wh.value.T, dc_prev


class LstmStack:
    """num_layers LstmLayers applied in sequence."""

    def __init__(self, name: str, cfg: LstmConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = []
        in_dim = cfg.input_dim
        for k in range(cfg.num_layers):
            layer = LstmLayer(f"{name}.l{k}", in_dim, cfg.cell_dim, cfg.projection_dim, rng)
            self.layers.append(layer)
            in_dim = layer.out_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x: np.ndarray, mask: Optional[np.ndarray] = None):
        caches = []
        out = _as_time_major(x)
        for layer in self.layers:
            out, cache = layer.forward(out, mask)
            caches.append(cache)
        return out, caches

    def backward(self, grad_out: np.ndarray, caches) -> np.ndarray:
        g = grad_out
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            g = layer.backward(g, cache)
        return g


def global_grad_norm(params: Sequence[Parameter]) -> float:
    total = 0.0
    for p in params:
        if not p.frozen:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def _check_finite_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        if not p.frozen and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter '{p.name}'")


class Adam:
    """Adam with global gradient-norm clipping. Frozen parameters are never
    touched; all gradients are zeroed after each step."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float = 5.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        _check_finite_grads(self.params)
        scale = 1.0
        if self.clip_norm is not None and self.clip_norm > 0:
            norm = global_grad_norm(self.params)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.frozen:
                continue
            g = p.grad * scale
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        for p in self.params:
            p.zero_grad()


class Sgd:
    """Plain SGD with the same clipping/freezing contract as Adam."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 clip_norm: float = 5.0):
        self.params = list(params)
        self.lr = lr
        self.clip_norm = clip_norm

    def step(self) -> None:
        _check_finite_grads(self.params)
        scale = 1.0
        if self.clip_norm is not None and self.clip_norm > 0:
            norm = global_grad_norm(self.params)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for p in self.params:
            if not p.frozen:
                p.value -= self.lr * scale * p.grad
        for p in self.params:
            p.zero_grad()


def gradient_check(loss_fn: Callable[[], float], params: Sequence[Parameter],
                   step: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must be deterministic, return the scalar loss, and leave the
    analytic gradients accumulated in ``params``. Returns the maximum
    relative error across every scalar entry of every parameter.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss_fn()
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat_v = p.value.reshape(-1)
        flat_g = ga.reshape(-1)
        for idx in range(flat_v.size):
            orig = flat_v[idx]
            flat_v[idx] = orig + step
            lp = loss_fn()
            flat_v[idx] = orig - step
            lm = loss_fn()
            flat_v[idx] = orig
            num = (lp - lm) / (2.0 * step)
            # absolute floor keeps fd rounding noise on near-zero entries
            # from masquerading as relative error
            denom = max(abs(flat_g[idx]) + abs(num), 1e-5)
            worst = max(worst, abs(flat_g[idx] - num) / denom)
    for p in params:
        p.zero_grad()
    return worst


# Checkpoint container: an .npz holding one array per parameter plus a JSON
# metadata blob (topology config, RNG seed, parameter order, frozen flags).
# Float64 arrays round-trip bit-exactly.

def save_checkpoint(path, params: Sequence[Parameter], config: dict, seed: int) -> None:
    meta = {
        "config": config,
        "seed": int(seed),
        "param_names": [p.name for p in params],
        "frozen": [bool(p.frozen) for p in params],
    }
    arrays = {f"param_{k}": p.value for k, p in enumerate(params)}
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[list[Parameter], dict, int]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        params = []
        for k, name in enumerate(meta["param_names"]):
            p = Parameter(name, data[f"param_{k}"], frozen=meta["frozen"][k])
            params.append(p)
    return params, meta["config"], meta["seed"]
