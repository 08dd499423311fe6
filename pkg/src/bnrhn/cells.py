"""Recurrent transition functions and their exact backward passes.

The highway step at depth d computes::

    h = tanh(x W_H + s' R_H + b_H)
    t = sigmoid(x W_T + s' R_T + b_T)
    c = 1 - t                                  (coupled)
    c = sigmoid(x W_C + s' R_C + b_C)          (decoupled, batch-normalized)
    s_out = h * t + s_in * c

where ``s'`` is the batch-normalized loop input in the decoupled variant and
plain ``s_in`` otherwise. The carry path always uses the raw ``s_in`` so a
closed transform gate passes the state through unchanged. ``x`` only enters
at the first depth.

Gradients are returned as ``{path: array}`` dicts whose keys match
``bnrhn._tree.trainable(params)``.
"""

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import _tree
from .batchnorm import BnLayer, bn_backward, bn_forward_infer, bn_forward_train, make_bn_layer
from .numkernel import ShapeError, sigmoid

__all__ = [
    "ConfigurationError",
    "Variant",
    "HighwayDepthParams",
    "RhnParams",
    "LstmParams",
    "highway_step",
    "highway_backward",
    "rhn_time_step",
    "rhn_step_backward",
    "lstm_step",
    "lstm_step_backward",
    "step_backward",
    "cell_forward",
    "cell_backward",
    "init_params",
]


class ConfigurationError(ValueError):
    """Invalid combination of cell options or dimensions."""


class Variant(str, Enum):
    COUPLED = "coupled"
    DECOUPLED_BN = "decoupled_bn"


@dataclass(frozen=True)
class HighwayDepthParams:
    R_H: np.ndarray
    R_T: np.ndarray
    b_H: np.ndarray
    b_T: np.ndarray
    R_C: np.ndarray | None = None
    b_C: np.ndarray | None = None
    W_H: np.ndarray | None = None
    W_T: np.ndarray | None = None
    W_C: np.ndarray | None = None

    @property
    def width(self):
        return self.R_H.shape[0]

    @property
    def takes_input(self):
        return self.W_H is not None

    @property
    def coupled(self):
        return self.R_C is None


@dataclass(frozen=True)
class RhnParams:
    per_depth: tuple
    variant: Variant = field(default=Variant.COUPLED, metadata={"static": True})
    # One layer per normalized depth: all D depths, or only d=1.
    bn_state: tuple | None = None
    bn_input: BnLayer | None = None

    def __post_init__(self):
        if not self.per_depth:
            raise ConfigurationError("an RHN needs recurrence depth D >= 1")
        if not self.per_depth[0].takes_input:
            raise ConfigurationError("depth 1 must carry input weights")
        for d, p in enumerate(self.per_depth[1:], start=2):
            if p.takes_input:
                raise ConfigurationError(f"depth {d} must not carry input weights")
        coupled = self.variant is Variant.COUPLED
        for d, p in enumerate(self.per_depth, start=1):
            if p.coupled != coupled:
                raise ConfigurationError(
                    f"depth {d} carry-gate weights do not match variant {self.variant.value}"
                )
        if coupled and (self.bn_state is not None or self.bn_input is not None):
            raise ConfigurationError("batch normalization is only defined for the decoupled variant")
        if not coupled:
            if self.bn_state is None or self.bn_input is None:
                raise ConfigurationError("the decoupled variant needs batch-norm sites")
            if len(self.bn_state) not in (1, len(self.per_depth)):
                raise ConfigurationError("bn_state must hold 1 or D layers")

    @property
    def depth(self):
        return len(self.per_depth)

    @property
    def width(self):
        return self.per_depth[0].width

    @property
    def input_width(self):
        return self.per_depth[0].W_H.shape[0]

    def bn_for_depth(self, d):
        """Batch-norm layer for 0-based depth ``d`` or None."""
        if self.bn_state is None or d >= len(self.bn_state):
            return None
        return self.bn_state[d]


@dataclass(frozen=True)
class LstmParams:
    W_i: np.ndarray
    W_f: np.ndarray
    W_o: np.ndarray
    W_g: np.ndarray
    R_i: np.ndarray
    R_f: np.ndarray
    R_o: np.ndarray
    R_g: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_g: np.ndarray

    @property
    def width(self):
        return self.R_i.shape[0]

    @property
    def input_width(self):
        return self.W_i.shape[0]


# --------------------------------------------------------------------------
# highway step


@dataclass
class HighwayCache:
    s_in: np.ndarray
    s_hat: np.ndarray
    x_hat: np.ndarray | None
    h: np.ndarray
    t: np.ndarray
    c: np.ndarray
    bn_cache: object = None
    bnx_cache: object = None
    bn_after: BnLayer | None = None
    bnx_after: BnLayer | None = None


def _normalize(v, layer, mode):
    if mode == "train":
        return bn_forward_train(v, layer)
    y, cache = bn_forward_infer(v, layer, return_cache=True)
    return y, cache, layer


def highway_step(s_in, x, p, variant, bn=None, mode="train", bn_x=None):
    """One highway transformation; returns ``(s_out, cache)``.

    ``bn`` normalizes the loop input entering the gate pre-activations and
    ``bn_x`` normalizes ``x``. Updated running statistics (train mode) are
    available as ``cache.bn_after`` / ``cache.bnx_after``.
    """
    variant = Variant(variant)
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"mode must be 'train' or 'infer', got {mode!r}")
    if variant is Variant.COUPLED and (bn is not None or bn_x is not None):
        raise ConfigurationError("batch normalization supplied to a coupled highway step")
    if p.coupled != (variant is Variant.COUPLED):
        raise ConfigurationError(f"parameters do not match variant {variant.value}")
    if p.takes_input and x is None:
        raise ConfigurationError("input x is required at recurrence depth 1")
    if not p.takes_input and x is not None:
        raise ConfigurationError("input x is only accepted at recurrence depth 1")
    if s_in.ndim != 2 or s_in.shape[1] != p.width:
        raise ShapeError(f"state of shape {s_in.shape} does not match width {p.width}")

    cache = HighwayCache(s_in=s_in, s_hat=s_in, x_hat=None, h=None, t=None, c=None)
    if bn is not None:
        cache.s_hat, cache.bn_cache, cache.bn_after = _normalize(s_in, bn, mode)
    a_H = cache.s_hat @ p.R_H + p.b_H
    a_T = cache.s_hat @ p.R_T + p.b_T
    a_C = None if p.coupled else cache.s_hat @ p.R_C + p.b_C
    if x is not None:
        if x.ndim != 2 or x.shape[0] != s_in.shape[0] or x.shape[1] != p.W_H.shape[0]:
            raise ShapeError(f"input of shape {x.shape} does not match weights {p.W_H.shape}")
        x_hat = x
        if bn_x is not None:
            x_hat, cache.bnx_cache, cache.bnx_after = _normalize(x, bn_x, mode)
        cache.x_hat = x_hat
        a_H = a_H + x_hat @ p.W_H
        a_T = a_T + x_hat @ p.W_T
        if a_C is not None:
            a_C = a_C + x_hat @ p.W_C
    cache.h = np.tanh(a_H)
    cache.t = sigmoid(a_T)
    cache.c = 1.0 - cache.t if a_C is None else sigmoid(a_C)
    s_out = cache.h * cache.t + s_in * cache.c
    return s_out, cache


def highway_backward(ds_out, cache, p, bn=None, bn_x=None):
    """Backward through one highway step.

    Returns ``(ds_in, dx, grads)`` with ``grads`` keyed by the field names of
    ``p`` plus ``bn.gamma``/``bn.beta`` and ``bn_x.gamma``/``bn_x.beta`` when
    those sites were used.
    """
    h, t, c, s_in = cache.h, cache.t, cache.c, cache.s_in
    ds_in = ds_out * c
    dh = ds_out * t
    dt = ds_out * h
    dc = ds_out * s_in
    if p.coupled:
        dt = dt - dc
    da_H = dh * (1.0 - h * h)
    da_T = dt * t * (1.0 - t)
    grads = {
        "R_H": cache.s_hat.T @ da_H,
        "R_T": cache.s_hat.T @ da_T,
        "b_H": da_H.sum(axis=0, keepdims=True),
        "b_T": da_T.sum(axis=0, keepdims=True),
    }
    ds_hat = da_H @ p.R_H.T + da_T @ p.R_T.T
    da_C = None
    if not p.coupled:
        da_C = dc * c * (1.0 - c)
        grads["R_C"] = cache.s_hat.T @ da_C
        grads["b_C"] = da_C.sum(axis=0, keepdims=True)
        ds_hat = ds_hat + da_C @ p.R_C.T

    dx = None
    if p.takes_input:
        grads["W_H"] = cache.x_hat.T @ da_H
        grads["W_T"] = cache.x_hat.T @ da_T
        dx = da_H @ p.W_H.T + da_T @ p.W_T.T
        if da_C is not None:
            grads["W_C"] = cache.x_hat.T @ da_C
            dx = dx + da_C @ p.W_C.T
        if cache.bnx_cache is not None:
            dx, dgamma, dbeta = bn_backward(dx, cache.bnx_cache, bn_x)
            grads["bn_x.gamma"] = dgamma
            grads["bn_x.beta"] = dbeta

    if cache.bn_cache is not None:
        ds_bn, dgamma, dbeta = bn_backward(ds_hat, cache.bn_cache, bn)
        grads["bn.gamma"] = dgamma
        grads["bn.beta"] = dbeta
        ds_in = ds_in + ds_bn
    else:
        ds_in = ds_in + ds_hat
    return ds_in, dx, grads


# --------------------------------------------------------------------------
# RHN time step (fold over depth)


@dataclass
class RhnStepCache:
    depth_caches: list
    params_after: RhnParams


def rhn_time_step(s_prev, x_t, params, mode="train"):
    """Apply depths 1..D to ``s_prev`` with ``x_t`` entering at depth 1.

    Returns ``(s_t, cache)``; ``cache.params_after`` holds the parameters
    with running statistics advanced (identical to ``params`` in infer mode
    or for the coupled variant).
    """
    s = s_prev
    caches = []
    new_bn = list(params.bn_state) if params.bn_state is not None else None
    new_bn_input = params.bn_input
    for d, p in enumerate(params.per_depth):
        s, cache = highway_step(
            s,
            x_t if d == 0 else None,
            p,
            params.variant,
            bn=params.bn_for_depth(d),
            mode=mode,
            bn_x=params.bn_input if d == 0 else None,
        )
        if cache.bn_after is not None:
            new_bn[d] = cache.bn_after
        if cache.bnx_after is not None:
            new_bn_input = cache.bnx_after
        caches.append(cache)
    after = params
    if mode == "train" and params.variant is Variant.DECOUPLED_BN:
        after = replace(params, bn_state=tuple(new_bn), bn_input=new_bn_input)
    return s, RhnStepCache(depth_caches=caches, params_after=after)


def _add_into(total, key, value):
    if key in total:
        total[key] = total[key] + value
    else:
        total[key] = value


def rhn_step_backward(ds_t, cache, params):
    """Returns ``(ds_prev, dx_t, grads)`` for one RHN time step."""
    if len(cache.depth_caches) != params.depth:
        raise RuntimeError("cache depth does not match parameter depth")
    grads = {}
    ds = ds_t
    dx = None
    for d in reversed(range(params.depth)):
        ds, dx_d, g = highway_backward(
            ds,
            cache.depth_caches[d],
            params.per_depth[d],
            bn=params.bn_for_depth(d),
            bn_x=params.bn_input if d == 0 else None,
        )
        if dx_d is not None:
            dx = dx_d
        for key, value in g.items():
            if key.startswith("bn_x."):
                _add_into(grads, "bn_input." + key[5:], value)
            elif key.startswith("bn."):
                _add_into(grads, f"bn_state.{d}.{key[3:]}", value)
            else:
                _add_into(grads, f"per_depth.{d}.{key}", value)
    return ds, dx, grads


# --------------------------------------------------------------------------
# LSTM baseline


@dataclass
class LstmCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray


def lstm_step(h_prev, c_prev, x_t, p):
    """Standard LSTM step; returns ``(h, c, cache)``."""
    if x_t.shape[1] != p.input_width or h_prev.shape[1] != p.width or c_prev.shape != h_prev.shape:
        raise ShapeError(
            f"LSTM shapes x{x_t.shape} h{h_prev.shape} c{c_prev.shape} do not match "
            f"input width {p.input_width} / hidden width {p.width}"
        )
    i = sigmoid(x_t @ p.W_i + h_prev @ p.R_i + p.b_i)
    f = sigmoid(x_t @ p.W_f + h_prev @ p.R_f + p.b_f)
    o = sigmoid(x_t @ p.W_o + h_prev @ p.R_o + p.b_o)
    g = np.tanh(x_t @ p.W_g + h_prev @ p.R_g + p.b_g)
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, LstmCache(x_t, h_prev, c_prev, i, f, o, g, c, tanh_c)


def lstm_step_backward(dh, dc, cache, p):
    """Returns ``(dh_prev, dc_prev, dx, grads)``."""
    do = dh * cache.tanh_c
    dc = dc + dh * cache.o * (1.0 - cache.tanh_c ** 2)
    di = dc * cache.g
    dg = dc * cache.i
    df = dc * cache.c_prev
    dc_prev = dc * cache.f
    pre = {
        "i": di * cache.i * (1.0 - cache.i),
        "f": df * cache.f * (1.0 - cache.f),
        "o": do * cache.o * (1.0 - cache.o),
        "g": dg * (1.0 - cache.g ** 2),
    }
    grads = {}
    dx = 0.0
    dh_prev = 0.0
    for k, da in pre.items():
        grads[f"W_{k}"] = cache.x.T @ da
        grads[f"R_{k}"] = cache.h_prev.T @ da
        grads[f"b_{k}"] = da.sum(axis=0, keepdims=True)
        dx = dx + da @ getattr(p, f"W_{k}").T
        dh_prev = dh_prev + da @ getattr(p, f"R_{k}").T
    return dh_prev, dc_prev, dx, grads


def step_backward(d_out, cache, params):
    """Dispatch to the RHN or LSTM backward pass.

    For an RHN ``d_out`` is dL/ds_t; for an LSTM it is the pair (dL/dh, dL/dc).
    """
    if isinstance(params, RhnParams):
        return rhn_step_backward(d_out, cache, params)
    if isinstance(params, LstmParams):
        dh, dc = d_out
        return lstm_step_backward(dh, dc, cache, params)
    raise TypeError(f"unsupported cell parameters {type(params).__name__}")


# --------------------------------------------------------------------------
# uniform state interface used by the decoder


def initial_state(params, s0):
    """Recurrent state tuple seeded from the projected feature vector."""
    if isinstance(params, LstmParams):
        return (s0, np.zeros_like(s0))
    return (s0,)


def cell_forward(params, state, x, mode="train"):
    """Returns ``(new_state, output, cache, params_after)``."""
    if isinstance(params, LstmParams):
        h, c, cache = lstm_step(state[0], state[1], x, params)
        return (h, c), h, cache, params
    s, cache = rhn_time_step(state[0], x, params, mode)
    return (s,), s, cache, cache.params_after


def cell_backward(params, cache, d_state):
    """Returns ``(d_state_prev, dx, grads)`` matching :func:`cell_forward`."""
    if isinstance(params, LstmParams):
        dh, dc, dx, grads = lstm_step_backward(d_state[0], d_state[1], cache, params)
        return (dh, dc), dx, grads
    ds, dx, grads = rhn_step_backward(d_state[0], cache, params)
    return (ds,), dx, grads


def zero_state_grad(state):
    return tuple(np.zeros_like(s) for s in state)


# --------------------------------------------------------------------------
# initialization


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def init_params(
    kind,
    input_width,
    width,
    depth=3,
    variant=Variant.COUPLED,
    seed=0,
    init_scale=0.04,
    transform_bias=-2.0,
    carry_bias=2.0,
    bn_gamma=0.1,
    bn_every_depth=True,
):
    """Seeded uniform initialization of an ``"rhn"`` or ``"lstm"`` cell.

    Weights are drawn from Uniform(-init_scale, init_scale). For an RHN the
    transform-gate bias starts at ``transform_bias`` and the carry-gate bias
    (decoupled variant) at ``carry_bias``; all other biases start at zero.
    """
    if input_width < 1 or width < 1 or depth < 1:
        raise ConfigurationError(
            f"dimensions must be positive (input_width={input_width}, width={width}, depth={depth})"
        )
    if init_scale < 0:
        raise ConfigurationError(f"init_scale must be non-negative, got {init_scale}")
    rng = _rng(seed)

    def uniform(rows, cols):
        if init_scale == 0:
            return np.zeros((rows, cols))
        return rng.uniform(-init_scale, init_scale, size=(rows, cols))

    def const(value):
        return np.full((1, width), float(value))

    if kind == "lstm":
        w = {f"W_{k}": uniform(input_width, width) for k in "ifog"}
        r = {f"R_{k}": uniform(width, width) for k in "ifog"}
        b = {f"b_{k}": const(0.0) for k in "ifog"}
        return LstmParams(**w, **r, **b)
    if kind != "rhn":
        raise ConfigurationError(f"unknown cell kind {kind!r}")

    variant = Variant(variant)
    decoupled = variant is Variant.DECOUPLED_BN
    per_depth = []
    for d in range(depth):
        fields = {}
        if d == 0:
            fields["W_H"] = uniform(input_width, width)
            fields["W_T"] = uniform(input_width, width)
            if decoupled:
                fields["W_C"] = uniform(input_width, width)
        fields["R_H"] = uniform(width, width)
        fields["R_T"] = uniform(width, width)
        fields["b_H"] = const(0.0)
        fields["b_T"] = const(transform_bias)
        if decoupled:
            fields["R_C"] = uniform(width, width)
            fields["b_C"] = const(carry_bias)
        per_depth.append(HighwayDepthParams(**fields))
    if not decoupled:
        return RhnParams(per_depth=tuple(per_depth), variant=variant)
    n_sites = depth if bn_every_depth else 1
    return RhnParams(
        per_depth=tuple(per_depth),
        variant=variant,
        bn_state=tuple(make_bn_layer(width, gamma=bn_gamma) for _ in range(n_sites)),
        bn_input=make_bn_layer(input_width, gamma=bn_gamma),
    )


def trainable_arrays(params):
    return _tree.trainable(params)
