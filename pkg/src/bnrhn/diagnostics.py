"""Gradient-flow instrumentation.

Temporal Jacobians of the RHN transition, Gershgorin discs, per-step
gradient-norm traces, global-norm clipping and a central-difference
gradient checker.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .cells import LstmParams, RhnParams, rhn_step_backward, rhn_time_step
from .numkernel import ShapeError, global_norm

__all__ = [
    "ContractError",
    "GradCheckEvaluationError",
    "GershDisc",
    "GradTrace",
    "GradCheckReport",
    "BpttRun",
    "temporal_jacobian",
    "gershgorin_discs",
    "clip_by_global_norm",
    "grad_check",
    "unroll_cell",
    "grad_norm_trace",
    "write_discs_csv",
    "write_trace_csv",
    "write_jacobian_csv",
]


class ContractError(ValueError):
    """A diagnostic was called outside its documented preconditions."""


class GradCheckEvaluationError(FloatingPointError):
    def __init__(self, message, coordinate):
        super().__init__(message)
        self.coordinate = coordinate


@dataclass(frozen=True)
class GershDisc:
    center: float
    radius: float

    def contains(self, z, atol=0.0):
        return abs(z - self.center) <= self.radius + atol


@dataclass
class GradTrace:
    """Per-time-step ``||dL/ds_t||``, listed from the loss step backward."""

    norms: list
    pre_clip: list = field(default_factory=list)
    post_clip: list = field(default_factory=list)

    def ratio(self):
        """max/min of the per-step norms (inf when some norm is zero)."""
        lo = min(self.norms)
        hi = max(self.norms)
        if hi == 0:
            return 1.0
        return float("inf") if lo == 0 else hi / lo


def _transition(step, x):
    if isinstance(step, RhnParams):
        return lambda s: rhn_time_step(s, x, step, mode="infer")[0]
    if isinstance(step, LstmParams):
        raise TypeError("temporal Jacobians are defined for RHN parameters or a callable step")
    return lambda s: step(s, x)


def temporal_jacobian(step, s, x, method="analytic", h=1e-6):
    """``J[i, j] = d s_t[i] / d s_{t-1}[j]`` at the point (s, x).

    ``step`` is RHN parameters (batch norm evaluated in inference mode) or a
    callable ``f(s, x) -> s_next``; the analytic method needs parameters.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != 1:
        raise ContractError(f"temporal Jacobian needs a single state row, got shape {s.shape}")
    if x is not None:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != 1:
            raise ContractError(f"temporal Jacobian needs a single input row, got shape {x.shape}")
    F = s.shape[1]
    if method == "analytic":
        if not isinstance(step, RhnParams):
            raise ContractError("the analytic Jacobian needs RHN parameters")
        _, cache = rhn_time_step(s, x, step, mode="infer")
        J = np.empty((F, F))
        for i in range(F):
            e = np.zeros((1, F))
            e[0, i] = 1.0
            ds_prev, _, _ = rhn_step_backward(e, cache, step)
            J[i] = ds_prev[0]
        return J
    if method == "finite_diff":
        f = _transition(step, x)
        J = np.empty((F, F))
        for j in range(F):
            sp = s.copy()
            sm = s.copy()
            sp[0, j] += h
            sm[0, j] -= h
            J[:, j] = (f(sp)[0] - f(sm)[0]) / (2 * h)
        return J
    raise ValueError(f"unknown Jacobian method {method!r}")


def gershgorin_discs(j):
    j = np.asarray(j, dtype=np.float64)
    if j.ndim != 2 or j.shape[0] != j.shape[1]:
        raise ShapeError(f"Gershgorin discs need a square matrix, got {j.shape}")
    absj = np.abs(j)
    radii = absj.sum(axis=1) - np.diag(absj)
    return [GershDisc(center=float(j[i, i]), radius=float(max(radii[i], 0.0))) for i in range(len(j))]


def clip_by_global_norm(grads, threshold):
    """Rescale gradients so their joint norm is at most ``threshold``.

    ``grads`` may be a list or a dict of arrays; the same container type is
    returned together with the norm measured before clipping.
    """
    if not threshold > 0:
        raise ValueError(f"clip threshold must be positive, got {threshold}")
    values = list(grads.values()) if isinstance(grads, dict) else list(grads)
    norm = global_norm(values)
    if norm <= threshold:
        return grads, norm
    scale = threshold / norm
    if isinstance(grads, dict):
        return {k: v * scale for k, v in grads.items()}, norm
    return [v * scale for v in values], norm


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: tuple
    passed: bool
    n_checked: int

    def __bool__(self):
        return self.passed


def _coordinates(shapes, max_coords, rng):
    every = [(k, idx) for k, shape in shapes for idx in np.ndindex(*shape)]
    if max_coords is None or len(every) <= max_coords:
        return every
    pick = rng.choice(len(every), size=max_coords, replace=False)
    return [every[i] for i in sorted(pick)]


def grad_check(f, params, analytic, h=1e-5, tol=1e-4, max_coords=None, seed=0):
    """Compare ``analytic`` gradients of ``f`` against central differences.

    ``params`` and ``analytic`` are parallel lists or dicts of arrays;
    ``f(params)`` must return a float. Coordinates are perturbed in place and
    restored. With ``max_coords`` a seeded random subset is checked.
    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if isinstance(params, dict):
        keys = list(params)
        arrays = params
        grads = analytic
    else:
        keys = list(range(len(params)))
        arrays = dict(enumerate(params))
        grads = dict(enumerate(analytic))
    shapes = [(k, arrays[k].shape) for k in keys]
    for k in keys:
        if np.shape(grads[k]) != arrays[k].shape:
            raise ShapeError(f"analytic gradient for {k!r} has shape {np.shape(grads[k])}, expected {arrays[k].shape}")
    coords = _coordinates(shapes, max_coords, np.random.default_rng(seed))

    worst_err, worst = 0.0, None
    for k, idx in coords:
        a = arrays[k]
        orig = a[idx]
        try:
            a[idx] = orig + h
            fp = f(params)
            a[idx] = orig - h
            fm = f(params)
        finally:
            a[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradCheckEvaluationError(f"non-finite objective when perturbing {k!r}{list(idx)}", (k, idx))
        num = float((fp - fm) / (2 * h))
        ana = float(grads[k][idx])
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        if worst is None or err > worst_err:
            worst_err, worst = err, (k, idx, ana, num)
    return GradCheckReport(max_rel_err=worst_err, worst=worst, passed=worst_err < tol, n_checked=len(coords))


@dataclass
class BpttRun:
    params: RhnParams
    states: list
    caches: list


def unroll_cell(params, s0, xs, mode="infer"):
    """Run the RHN over the inputs ``xs`` from ``s0``, keeping caches for BPTT."""
    states = [np.asarray(s0, dtype=np.float64)]
    caches = []
    p = params
    for x in xs:
        s, cache = rhn_time_step(states[-1], x, p, mode)
        states.append(s)
        caches.append((p, cache))
        p = cache.params_after
    return BpttRun(params=params, states=states, caches=caches)


def grad_norm_trace(run, ds_final):
    """Backpropagate ``ds_final`` from the last step and record the norm of
    dL/ds_t at t = T, T-1, ..., 1."""
    ds = np.asarray(ds_final, dtype=np.float64)
    norms = []
    for p, cache in reversed(run.caches):
        norms.append(float(np.linalg.norm(ds)))
        ds, _, _ = rhn_step_backward(ds, cache, p)
    return GradTrace(norms=norms)


def write_discs_csv(discs, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "center", "radius"])
        for i, d in enumerate(discs):
            w.writerow([i, repr(d.center), repr(d.radius)])


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "grad_norm"])
        T = len(trace.norms)
        for k, n in enumerate(trace.norms):
            w.writerow([T - k, repr(n)])


def write_jacobian_csv(j, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "value"])
        for (r, c), v in np.ndenumerate(j):
            w.writerow([r, c, repr(float(v))])
