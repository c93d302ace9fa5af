"""Fully connected tanh networks with batch normalization.

Architecture (defaults): ``input -> BN -> affine(d, d+50) -> BN -> tanh ->
affine(d+50, d+50) -> BN -> tanh -> affine(d+50, 1)``.

All parameters live in one flat float64 vector.  The affine blocks come
first, one per layer, each stored as its weight matrix in row-major order
followed by its bias; for the default shape this block has length
``(d+50)(d+1) + (d+50)(d+51) + (d+51)``.  After it come the batch
normalization scale and shift vectors, ``scale_0, shift_0, scale_1, ...``,
one pair per normalization site.

Gradients are computed by hand-written reverse mode; the hot paths are
dispatched to the compiled kernel module when available.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from . import _kernels_py
from ._backend import kernels as _K
from .rng import RngStream


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Raised when a forward pass produces non-finite values."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


@dataclass(frozen=True)
class NetworkShape:
    input_dim: int
    hidden_dim: Optional[int] = None
    hidden_layers: int = 2
    output_dim: int = 1
    batch_norm: bool = True

    def __post_init__(self):
        if self.hidden_dim is None:
            object.__setattr__(self, "hidden_dim", self.input_dim + 50)
        if self.output_dim != 1:
            raise ShapeError("only scalar-output networks are supported")
        if self.input_dim < 1 or self.hidden_dim < 1 or self.hidden_layers < 1:
            raise ShapeError(f"invalid network shape {self}")

    @property
    def sizes(self):
        return (self.input_dim,) + (self.hidden_dim,) * self.hidden_layers + (1,)


class ParamLayout:
    """Offsets of every block inside a flat parameter vector."""

    def __init__(self, shape: NetworkShape):
        self.shape = shape
        sizes = shape.sizes
        self.n_layers = len(sizes) - 1
        self.batch_norm = bool(shape.batch_norm)
        self.sizes = np.asarray(sizes, dtype=np.int64)
        w_off, b_off = [], []
        pos = 0
        for i in range(self.n_layers):
            k, l = sizes[i], sizes[i + 1]
            w_off.append(pos)
            b_off.append(pos + l * k)
            pos += l * k + l
        self.n_affine = pos
        site_dims = list(sizes[:self.n_layers]) if self.batch_norm else []
        sc_off, sh_off, st_off = [], [], []
        st = 0
        for f in site_dims:
            sc_off.append(pos)
            sh_off.append(pos + f)
            st_off.append(st)
            pos += 2 * f
            st += f
        self.n_params = pos
        self.n_stats = st
        self.site_dims = np.asarray(site_dims, dtype=np.int64)
        self.w_off = np.asarray(w_off, dtype=np.int64)
        self.b_off = np.asarray(b_off, dtype=np.int64)
        # kernels index these arrays per site, so keep them length n_layers
        pad = [0] * (self.n_layers - len(site_dims))
        self.sc_off = np.asarray(sc_off + pad, dtype=np.int64)
        self.sh_off = np.asarray(sh_off + pad, dtype=np.int64)
        self.st_off = np.asarray(st_off + pad, dtype=np.int64)
        if not site_dims:
            self.site_dims = np.zeros(self.n_layers, dtype=np.int64)

    @property
    def n_sites(self):
        return self.n_layers if self.batch_norm else 0

    def weights(self, theta, i):
        k, l = int(self.sizes[i]), int(self.sizes[i + 1])
        return theta[self.w_off[i]:self.w_off[i] + l * k].reshape(l, k)

    def bias(self, theta, i):
        l = int(self.sizes[i + 1])
        return theta[self.b_off[i]:self.b_off[i] + l]

    def bn_scale(self, theta, s):
        return theta[self.sc_off[s]:self.sc_off[s] + self.site_dims[s]]

    def bn_shift(self, theta, s):
        return theta[self.sh_off[s]:self.sh_off[s] + self.site_dims[s]]


_LAYOUTS = {}


def layout_for(shape: NetworkShape) -> ParamLayout:
    lay = _LAYOUTS.get(shape)
    if lay is None:
        lay = _LAYOUTS[shape] = ParamLayout(shape)
    return lay


def param_count(shape: NetworkShape) -> int:
    return layout_for(shape).n_params


@dataclass(frozen=True)
class BatchNormState:
    """Running statistics for all normalization sites, concatenated site by site."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-3
    update_count: int = 0

    @classmethod
    def initial(cls, shape: NetworkShape, momentum=0.99, epsilon=1e-3):
        n = layout_for(shape).n_stats
        return cls(np.zeros(n), np.ones(n), momentum, epsilon, 0)

    def site(self, shape: NetworkShape, s):
        lay = layout_for(shape)
        o, f = lay.st_off[s], lay.site_dims[s]
        return self.running_mean[o:o + f], self.running_var[o:o + f]


def batchnorm_update_state(state: BatchNormState, batch_mean, batch_var) -> BatchNormState:
    mom = state.momentum
    return replace(
        state,
        running_mean=mom * state.running_mean + (1.0 - mom) * np.asarray(batch_mean),
        running_var=mom * state.running_var + (1.0 - mom) * np.asarray(batch_var),
        update_count=state.update_count + 1,
    )


@dataclass
class ForwardCache:
    """Intermediate values of a batch-statistics forward pass."""

    pre_activations: List[np.ndarray] = field(default_factory=list)
    post_activations: List[np.ndarray] = field(default_factory=list)
    batch_mean: np.ndarray = None
    batch_var: np.ndarray = None
    raw: dict = None


# -- elementary maps ---------------------------------------------------------

def affine_apply(params, x, in_dim: int, out_dim: int):
    """``W x + b`` for a slice holding ``W`` (row-major, out_dim x in_dim) then ``b``."""
    params = np.asarray(params, dtype=float)
    x = np.asarray(x, dtype=float)
    if params.shape != (out_dim * in_dim + out_dim,):
        raise ShapeError(
            f"affine slice has length {params.size}, expected {out_dim * in_dim + out_dim}")
    if x.shape[-1] != in_dim:
        raise ShapeError(f"input has dimension {x.shape[-1]}, expected {in_dim}")
    W = params[:out_dim * in_dim].reshape(out_dim, in_dim)
    return x @ W.T + params[out_dim * in_dim:]


def tanh_apply(x):
    return np.tanh(x)


def batchnorm_train(batch, scale, shift, epsilon):
    """Normalize each column with the batch's own mean and biased variance.

    Returns ``(normalized, batch_mean, batch_var)``.
    """
    batch = np.asarray(batch, dtype=float)
    if batch.ndim == 1:
        batch = batch[:, None]
    if batch.shape[0] < 1:
        raise ShapeError("batch normalization needs at least one row")
    mean = batch.mean(axis=0)
    var = np.mean((batch - mean) ** 2, axis=0)
    y = np.asarray(scale) * (batch - mean) / np.sqrt(var + epsilon) + np.asarray(shift)
    return y, mean, var


# -- networks ----------------------------------------------------------------

def init_params(stream: RngStream, shape: NetworkShape, scheme="uniform") -> np.ndarray:
    """Fan-in scaled weights (variance ``1/fan_in``), zero biases, BN scale 1 / shift 0."""
    lay = layout_for(shape)
    theta = np.zeros(lay.n_params)
    for i in range(lay.n_layers):
        k, l = int(lay.sizes[i]), int(lay.sizes[i + 1])
        if scheme == "uniform":
            limit = np.sqrt(3.0 / k)
            w = (2.0 * stream.uniform(l * k) - 1.0) * limit
        elif scheme == "normal":
            w = stream.normal(l * k) / np.sqrt(k)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        theta[lay.w_off[i]:lay.w_off[i] + l * k] = w
    for s in range(lay.n_sites):
        lay.bn_scale(theta, s)[:] = 1.0
    return theta


def _check_batch(lay, X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != lay.sizes[0]:
        raise ShapeError(f"batch must have shape (J, {lay.sizes[0]}), got {X.shape}")
    return X


def _check_theta(lay, theta):
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    if theta.shape != (lay.n_params,):
        raise ShapeError(f"parameter vector has length {theta.size}, expected {lay.n_params}")
    return theta


def _raise_nonfinite(lay, cache_layers, what):
    for i, arr in enumerate(cache_layers):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite {what} at layer {i}", layer=i)
    raise NumericError(f"non-finite {what} at output layer", layer=len(cache_layers))


def net_forward_train(theta, batch, shape: NetworkShape, epsilon=1e-3):
    """Forward pass with batch statistics; returns ``(outputs, ForwardCache)``."""
    lay = layout_for(shape)
    theta = _check_theta(lay, theta)
    X = _check_batch(lay, batch)
    out, raw = _kernels_py.forward_train(theta, lay, X, epsilon)
    mean, var = _kernels_py._stats(raw, lay)
    cache = ForwardCache(pre_activations=list(raw["xhat"]),
                         post_activations=list(raw["A"]),
                         batch_mean=mean, batch_var=var, raw=raw)
    if not np.all(np.isfinite(out)):
        _raise_nonfinite(lay, cache.post_activations, "activation")
    return out, cache


def net_param_grad(theta, batch, weights, shape: NetworkShape, epsilon=1e-3):
    """Gradient of ``sum_j weights[j] * V(theta, batch[j])`` with respect to theta.

    Batch statistics are differentiated through (full BN backprop).
    """
    lay = layout_for(shape)
    theta = _check_theta(lay, theta)
    X = _check_batch(lay, batch)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    return _K.param_grad(theta, lay, X, weights, epsilon)[1]


def loss_and_grad(theta, batch, targets, shape: NetworkShape, epsilon=1e-3):
    """Mean squared error against ``targets`` plus everything the trainer needs.

    Returns ``(loss, grad, outputs, batch_mean, batch_var)``.
    """
    lay = layout_for(shape)
    return _K.loss_grad(theta, lay, _check_batch(lay, batch),
                        np.ascontiguousarray(targets, dtype=np.float64), epsilon)


def net_forward_infer_batch(theta, state: BatchNormState, X, shape: NetworkShape,
                            want_grad=False):
    """Running-statistics evaluation at many points; returns ``(values, input_grads)``."""
    lay = layout_for(shape)
    theta = _check_theta(lay, theta)
    X = _check_batch(lay, X)
    out, dX = _K.infer(theta, lay, state.running_mean, state.running_var, X,
                       state.epsilon, want_grad)
    if not np.all(np.isfinite(out)):
        _, raw = _kernels_py.forward_train(theta, lay, X, state.epsilon)
        _raise_nonfinite(lay, raw["A"], "activation")
    return out, dX


def net_forward_batch_stats(theta, X, shape: NetworkShape, epsilon=1e-3, want_grad=False):
    """Evaluate with the batch's own BN statistics, frozen for the input gradient.

    Values equal :func:`net_forward_train`; ``dX[j]`` is the gradient of
    output ``j`` with the statistics held constant.  Returns
    ``(values, input_grads, batch_mean, batch_var)``.
    """
    lay = layout_for(shape)
    theta = _check_theta(lay, theta)
    X = _check_batch(lay, X)
    mean, var = np.zeros(max(lay.n_stats, 1)), np.ones(max(lay.n_stats, 1))
    out, dX = _K.infer(theta, lay, mean[:lay.n_stats], var[:lay.n_stats], X, epsilon,
                       want_grad, True)
    if not np.all(np.isfinite(out)):
        _, raw = _kernels_py.forward_train(theta, lay, X, epsilon)
        _raise_nonfinite(lay, raw["A"], "activation")
    return out, dX, mean[:lay.n_stats], var[:lay.n_stats]


def net_forward_infer(theta, state: BatchNormState, x, shape: NetworkShape) -> float:
    out, _ = net_forward_infer_batch(theta, state, np.atleast_1d(x)[None, :], shape)
    return float(out[0])


def net_input_grad(theta, state: BatchNormState, x, shape: NetworkShape) -> np.ndarray:
    _, dX = net_forward_infer_batch(theta, state, np.atleast_1d(x)[None, :], shape,
                                    want_grad=True)
    return dX[0]


# -- binary dump -------------------------------------------------------------

_MAGIC = b"SPDEDS01"
_HEADER = struct.Struct("<8s7q")


def dump_network(path, theta, state: BatchNormState, shape: NetworkShape):
    """Write parameters and BN state as little-endian int64 header + float64 payload."""
    lay = layout_for(shape)
    header = _HEADER.pack(_MAGIC, shape.input_dim, shape.hidden_dim, shape.hidden_layers,
                          lay.n_sites, lay.n_params, lay.n_stats, state.update_count)
    payload = np.concatenate([theta, state.running_mean, state.running_var,
                              [state.momentum, state.epsilon]]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def load_network(path):
    """Inverse of :func:`dump_network`; returns ``(theta, state, shape)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, d, hidden, layers, sites, n_params, n_stats, count = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a network dump")
    shape = NetworkShape(d, hidden, layers, batch_norm=sites > 0)
    vals = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    if vals.size != n_params + 2 * n_stats + 2:
        raise ValueError(f"{path}: truncated payload")
    theta = vals[:n_params].copy()
    state = BatchNormState(vals[n_params:n_params + n_stats].copy(),
                           vals[n_params + n_stats:n_params + 2 * n_stats].copy(),
                           float(vals[-2]), float(vals[-1]), int(count))
    return theta, state, shape
