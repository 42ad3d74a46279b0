"""Tanh MLP surrogate with exact space-time jets and their parameter gradients.

The network maps ``z = (x, t)`` (``n`` spatial coordinates followed by time) to
a scalar. ``forward_jet`` pushes the triple (layer value, input Jacobian,
spatial Laplacian) through every layer, which yields ``u``, ``du/dt``,
``grad_x u`` and ``lap_x u`` exactly. ``loss_param_grad`` runs the adjoint of
that propagation, so any loss built from jet components can be differentiated
with respect to every weight and bias (and, as a by-product, with respect to
the input point).

Arrays are float64 throughout. Jacobians are stored as ``(batch, n + 1,
width)`` so each linear layer is a single 2-D matrix product.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .rng import stream

ACTIVATIONS = ("tanh",)


class DivergenceError(FloatingPointError):
    """A loss or gradient became non-finite."""


def _tanh_derivs(v):
    """tanh and its first three derivatives at ``v``."""
    a = np.tanh(v)
    s1 = 1.0 - a * a
    s2 = -2.0 * a * s1
    s3 = -2.0 * s1 * (s1 - 2.0 * a * a)
    return a, s1, s2, s3


@dataclass(frozen=True)
class MlpParams:
    """Weights ``W[k]`` of shape ``(dims[k+1], dims[k])`` and biases ``b[k]``.

    Hidden layers apply tanh; the final layer is linear with a single output.
    """

    weights: tuple
    biases: tuple
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=np.float64) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=np.float64) for b in self.biases))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("need one bias vector per weight matrix")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: weight {w.shape} and bias {b.shape} do not match")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k}: expects {w.shape[1]} inputs, previous layer gives "
                                 f"{self.weights[k - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite parameters")
        if self.weights[-1].shape[0] != 1:
            raise ValueError("output dimension must be 1")
        if self.weights[0].shape[1] < 2:
            raise ValueError("input dimension must be at least 2 (x and t)")

    @property
    def layer_dims(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_spatial(self) -> int:
        return self.weights[0].shape[1] - 1

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def to_vector(self) -> np.ndarray:
        return _flatten(self.weights, self.biases)

    def with_vector(self, vec) -> "MlpParams":
        ws, bs = _unflatten(vec, self.layer_dims)
        return MlpParams(ws, bs, self.activation)


@dataclass(frozen=True)
class ParamGrad:
    """Gradient congruent with an :class:`MlpParams`."""

    weights: tuple
    biases: tuple

    def to_vector(self) -> np.ndarray:
        return _flatten(self.weights, self.biases)

    def sup_norm(self) -> float:
        return float(max(np.max(np.abs(a)) for a in self.weights + self.biases))

    def __add__(self, other: "ParamGrad") -> "ParamGrad":
        return ParamGrad(tuple(a + b for a, b in zip(self.weights, other.weights)),
                         tuple(a + b for a, b in zip(self.biases, other.biases)))

    def scale(self, c: float) -> "ParamGrad":
        return ParamGrad(tuple(c * a for a in self.weights), tuple(c * a for a in self.biases))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.weights + self.biases)


def _flatten(weights, biases):
    parts = []
    for w, b in zip(weights, biases):
        parts.append(np.ravel(w))
        parts.append(np.ravel(b))
    return np.concatenate(parts)


def _unflatten(vec, dims):
    vec = np.asarray(vec, dtype=np.float64)
    ws, bs, pos = [], [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        ws.append(vec[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in).copy())
        pos += fan_in * fan_out
        bs.append(vec[pos:pos + fan_out].copy())
        pos += fan_out
    if pos != vec.size:
        raise ValueError(f"vector has {vec.size} entries, expected {pos}")
    return ws, bs


class PdeJet(NamedTuple):
    """Value and the space-time derivatives a residual needs.

    Fields are scalars (``spatial_grad`` of shape ``(n,)``) for a single point,
    or carry a leading batch axis.
    """

    value: np.ndarray
    time_partial: np.ndarray
    spatial_grad: np.ndarray
    laplacian: np.ndarray


class ResidualPartials(NamedTuple):
    """Derivatives of a point-wise scalar loss with respect to each jet field."""

    d_value: np.ndarray
    d_time_partial: np.ndarray
    d_spatial_grad: np.ndarray
    d_laplacian: np.ndarray


def init_network(layer_dims: Sequence[int], seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError(f"invalid layer dims {layer_dims}")
    if dims[-1] != 1:
        raise ValueError("output dimension must be 1")
    if dims[0] < 2:
        raise ValueError("input dimension must be at least 2 (x and t)")
    rng = stream(seed, "init")
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpParams(tuple(ws), tuple(bs))


def _as_batch(params, x, t):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    if x.shape[1] != params.n_spatial:
        raise ValueError(f"point has {x.shape[1]} spatial coordinates, network expects {params.n_spatial}")
    return np.concatenate([x, t[:, None]], axis=1), single


def _jet_forward(params, z, keep_cache=False):
    """Forward (v, J, L) propagation on a batch ``z`` of shape ``(B, n+1)``."""
    B, d = z.shape
    n = d - 1
    layers = list(zip(params.weights, params.biases))
    cache = []
    a, Jt, L = z, None, None
    for k, (W, b) in enumerate(layers):
        h = W.shape[0]
        v = a @ W.T + b
        if Jt is None:
            Jp = np.broadcast_to(W.T, (B, d, h))
            Lp = np.zeros((B, h))
        else:
            Jp = (Jt.reshape(B * d, -1) @ W.T).reshape(B, d, h)
            Lp = L @ W.T
        if k == len(layers) - 1:
            if keep_cache:
                cache.append((a, Jt, L))
            return v[:, 0], Jp[:, :, 0], Lp[:, 0], cache
        act, s1, s2, s3 = _tanh_derivs(v)
        Q = np.einsum("bkh,bkh->bh", Jp[:, :n, :], Jp[:, :n, :])
        if keep_cache:
            cache.append((a, Jt, L, act, s1, s2, s3, Jp, Lp, Q))
        Jt = s1[:, None, :] * Jp
        L = s1 * Lp + s2 * Q
        a = act


def _jet_backward(params, cache, d_val, d_grad, d_lap, want_params=True):
    """Adjoint of :func:`_jet_forward` for batch-summed cotangents.

    ``d_grad`` is the cotangent of the full (spatial + time) input gradient.
    Returns ``(ParamGrad or None, dz)`` where ``dz[b]`` is the gradient of the
    b-th point's contribution with respect to that point's input.
    """
    Ws = params.weights
    nl = len(Ws)
    B, d = d_grad.shape
    n = d - 1
    dWs = [None] * nl
    dbs = [None] * nl
    w_out = Ws[-1][0]
    a_prev, Jt_prev, L_prev = cache[-1]
    if want_params:
        dW = d_val @ a_prev if a_prev is not None else None
        if Jt_prev is None:
            dW = dW + d_grad.sum(axis=0)
        else:
            dW = dW + d_grad.reshape(-1) @ Jt_prev.reshape(B * d, -1) + d_lap @ L_prev
        dWs[-1] = dW[None, :]
        dbs[-1] = np.array([d_val.sum()])
    if nl == 1:
        return (ParamGrad(tuple(dWs), tuple(dbs)) if want_params else None), d_val[:, None] * w_out[None, :]
    A_a = d_val[:, None] * w_out[None, :]
    A_J = d_grad[:, :, None] * w_out[None, None, :]
    A_L = d_lap[:, None] * w_out[None, :]
    for k in range(nl - 2, -1, -1):
        W = Ws[k]
        a_prev, Jt_prev, L_prev, act, s1, s2, s3, Jp, Lp, Q = cache[k]
        A_v = A_a * s1 + s2 * np.einsum("bkh,bkh->bh", A_J, Jp) + A_L * (s2 * Lp + s3 * Q)
        A_Jp = s1[:, None, :] * A_J
        A_Jp[:, :n, :] += 2.0 * (A_L * s2)[:, None, :] * Jp[:, :n, :]
        A_Lp = s1 * A_L
        if want_params:
            dW = A_v.T @ a_prev
            if Jt_prev is None:
                dW += A_Jp.sum(axis=0).T
            else:
                dW += A_Jp.reshape(B * d, -1).T @ Jt_prev.reshape(B * d, -1) + A_Lp.T @ L_prev
            dWs[k] = dW
            dbs[k] = A_v.sum(axis=0)
        if k == 0:
            dz = A_v @ W
        else:
            A_a = A_v @ W
            A_J = (A_Jp.reshape(B * d, -1) @ W).reshape(B, d, -1)
            A_L = A_Lp @ W
    return (ParamGrad(tuple(dWs), tuple(dbs)) if want_params else None), dz


def forward_jet(params: MlpParams, x, t) -> PdeJet:
    """Exact value, time partial, spatial gradient and spatial Laplacian.

    ``x`` may be a single point ``(n,)`` or a batch ``(B, n)``; ``t`` a scalar
    or ``(B,)``.
    """
    z, single = _as_batch(params, x, t)
    n = z.shape[1] - 1
    val, grad, lap, _ = _jet_forward(params, z)
    jet = PdeJet(val, grad[:, n], grad[:, :n], lap)
    if single:
        return PdeJet(float(val[0]), float(grad[0, n]), grad[0, :n].copy(), float(lap[0]))
    return jet


def forward_value(params: MlpParams, x, t) -> np.ndarray:
    """Plain network output on a batch (no derivatives)."""
    z, single = _as_batch(params, x, t)
    a = z
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = a @ W.T + b
        if k < len(params.weights) - 1:
            a = np.tanh(a)
    return float(a[0, 0]) if single else a[:, 0]


def value_input_grad(params: MlpParams, x, t):
    """Network value and its gradient with respect to ``(x, t)`` on a batch.

    Ordinary backpropagation; much cheaper than a full jet when only
    first-order input derivatives are needed.
    """
    z, _ = _as_batch(params, x, t)
    acts = [z]
    derivs = []
    a = z
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = a @ W.T + b
        if k < len(params.weights) - 1:
            a = np.tanh(a)
            derivs.append(1.0 - a * a)
            acts.append(a)
    g = np.broadcast_to(params.weights[-1], (z.shape[0], params.weights[-1].shape[1]))
    for k in range(len(params.weights) - 2, -1, -1):
        g = (g * derivs[k]) @ params.weights[k]
    return a[:, 0], np.array(g)


PartialsFn = Callable[[PdeJet, np.ndarray, np.ndarray], tuple]


def loss_param_grad(params: MlpParams, x, t, partials_at: PartialsFn, return_input_grad=False):
    """Mean point-wise loss over a batch and its exact parameter gradient.

    ``partials_at(jet, x, t)`` receives the batched jet at the points and
    returns ``(losses, ResidualPartials)`` with one entry per point. The
    gradient is the adjoint of the jet propagation applied to those
    partials, so it is linear in them.

    With ``return_input_grad`` the per-point gradients of each point's loss
    with respect to ``(x, t)`` are returned as a third value (unscaled by the
    batch mean).
    """
    z, _ = _as_batch(params, x, t)
    B, d = z.shape
    if B == 0:
        raise ValueError("need at least one point")
    n = d - 1
    val, grad, lap, cache = _jet_forward(params, z, keep_cache=True)
    jet = PdeJet(val, grad[:, n], grad[:, :n], lap)
    losses, partials = partials_at(jet, z[:, :n], z[:, n])
    losses = np.broadcast_to(np.asarray(losses, dtype=np.float64), (B,))
    mean_loss = float(np.sum(losses) / B)
    if not np.isfinite(mean_loss):
        raise DivergenceError(f"non-finite loss {mean_loss}")
    d_val = np.broadcast_to(np.asarray(partials.d_value, dtype=np.float64), (B,))
    d_grad = np.empty((B, d))
    d_grad[:, :n] = np.broadcast_to(np.asarray(partials.d_spatial_grad, dtype=np.float64), (B, n))
    d_grad[:, n] = np.broadcast_to(np.asarray(partials.d_time_partial, dtype=np.float64), (B,))
    d_lap = np.broadcast_to(np.asarray(partials.d_laplacian, dtype=np.float64), (B,))
    g, dz = _jet_backward(params, cache, d_val / B, d_grad / B, d_lap / B)
    if not g.is_finite():
        raise DivergenceError("non-finite parameter gradient")
    if return_input_grad:
        return mean_loss, g, dz * B
    return mean_loss, g


def jet_input_grad(params: MlpParams, x, t, partials_at: PartialsFn):
    """Per-point losses and their gradients with respect to ``(x, t)``.

    Same adjoint as :func:`loss_param_grad` but skips the weight gradients.
    """
    z, _ = _as_batch(params, x, t)
    B, d = z.shape
    n = d - 1
    val, grad, lap, cache = _jet_forward(params, z, keep_cache=True)
    jet = PdeJet(val, grad[:, n], grad[:, :n], lap)
    losses, partials = partials_at(jet, z[:, :n], z[:, n])
    d_grad = np.empty((B, d))
    d_grad[:, :n] = partials.d_spatial_grad
    d_grad[:, n] = partials.d_time_partial
    _, dz = _jet_backward(params, cache,
                          np.broadcast_to(np.asarray(partials.d_value, dtype=np.float64), (B,)),
                          d_grad,
                          np.broadcast_to(np.asarray(partials.d_laplacian, dtype=np.float64), (B,)),
                          want_params=False)
    return np.asarray(losses, dtype=np.float64), dz


# Checkpoint layout (little endian):
#   8 bytes  magic b"HJBMLP01"
#   uint32   number of layer dims D, then D x uint32 dims
#   uint32   length of activation tag, then the ASCII tag
#   float64  W0 (row-major), b0, W1, b1, ...
_MAGIC = b"HJBMLP01"


def save_params(path, params: MlpParams) -> None:
    dims = params.layer_dims
    tag = params.activation.encode("ascii")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
        fh.write(struct.pack("<I", len(tag)) + tag)
        fh.write(params.to_vector().astype("<f8").tobytes())


def load_params(path) -> MlpParams:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    pos = 8
    (nd,) = struct.unpack_from("<I", data, pos)
    pos += 4
    dims = struct.unpack_from(f"<{nd}I", data, pos)
    pos += 4 * nd
    (nt,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tag = data[pos:pos + nt].decode("ascii")
    pos += nt
    vec = np.frombuffer(data[pos:], dtype="<f8").astype(np.float64)
    ws, bs = _unflatten(vec, dims)
    return MlpParams(tuple(ws), tuple(bs), tag)
