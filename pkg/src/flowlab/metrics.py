"""Stability and error-bound metrics.

Two families: empirical stability of matched transports (cosine similarity
of endpoints started from the same source, against a fixed-derangement
baseline) and the theoretical transport error bound

    W2 <= exp( integral of L_t ) * ( integral of E ||v - v*||^2 )^(1/2),

whose ingredients (median spectral norm of the velocity Jacobian via power
iteration, Monte-Carlo velocity error against the exact field) are computed
here.  The bound is reported, never used to claim stability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LatentDataset, Rng
from .errors import ValidationError
from .transport import ClosedFormField, VelocityField


def default_time_grid(t_limit: float, points: int = 11) -> np.ndarray:
    """Uniform 11-point grid, kept inside (0, t_limit]."""
    return np.linspace(0.05, min(0.95, t_limit), points)


# --- endpoint similarity ------------------------------------------------------


@dataclass(frozen=True)
class StabilityReport:
    """Matched-endpoint cosine similarities and their derangement baseline."""

    matched: np.ndarray
    matched_mean: float
    matched_std: float
    baseline_mean: float
    baseline_std: float
    agreement_rate: float | None = None

    @property
    def gap(self) -> float:
        return self.matched_mean - self.baseline_mean

    def to_json(self) -> dict:
        out = {
            "matched_mean": self.matched_mean,
            "matched_std": self.matched_std,
            "baseline_mean": self.baseline_mean,
            "baseline_std": self.baseline_std,
            "gap": self.gap,
            "matched": [float(v) for v in self.matched],
        }
        if self.agreement_rate is not None:
            out["agreement_rate"] = self.agreement_rate
        return out


def _row_cosines(a: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    # dot / sqrt(dot*dot) keeps the self-similarity of a row exactly 1:
    # sqrt(x*x) == x in IEEE doubles, while pre-normalizing rows loses a ulp
    daa = np.einsum("ij,ij->i", a, a)
    dbb = np.einsum("ij,ij->i", b, b)
    if np.any(daa == 0) or np.any(dbb == 0):
        raise ValidationError(f"zero-norm {what} endpoint; cosine similarity undefined")
    return np.einsum("ij,ij->i", a, b) / np.sqrt(daa * dbb)


def endpoint_similarity(
    endpoints_a: np.ndarray,
    endpoints_b: np.ndarray,
    agreement_rate: float | None = None,
) -> StabilityReport:
    """Row i of both input matrices must come from the same source point.

    The unrelated-pair baseline pairs row i of a with row i+1 (mod m) of b,
    a fixed derangement: deterministic, and never a matched pair.
    """
    a = np.atleast_2d(np.asarray(endpoints_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(endpoints_b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValidationError(f"endpoint shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < 2:
        raise ValidationError("need >= 2 endpoint pairs for a derangement baseline")
    matched = _row_cosines(a, b, "matched")
    shifted = _row_cosines(a, np.roll(b, -1, axis=0), "baseline")
    return StabilityReport(
        matched=matched,
        matched_mean=float(matched.mean()),
        matched_std=float(matched.std()),
        baseline_mean=float(shifted.mean()),
        baseline_std=float(shifted.std()),
        agreement_rate=agreement_rate,
    )


# --- spectral-norm (Lipschitz) estimation ---------------------------------------


@dataclass(frozen=True)
class LipschitzEstimate:
    value: float  # median over probes
    per_probe: np.ndarray
    converged: bool
    t: float

    def __float__(self) -> float:
        return self.value


def _fd_jvp(field: VelocityField, x: np.ndarray, t: float, v: np.ndarray) -> np.ndarray:
    """Central-difference Jacobian-vector product, eps = 1e-4 (1 + ||x||)."""
    nv = np.linalg.norm(v)
    if nv == 0:
        return np.zeros_like(v)
    u = v / nv
    eps = 1e-4 * (1.0 + np.linalg.norm(x))
    return nv * (field.velocity(x + eps * u, t) - field.velocity(x - eps * u, t)) / (2.0 * eps)


def _probe_operators(field: VelocityField):
    """(jvp, vjp) callables for one field.

    Surrogates expose analytic input-space products; any other field falls
    back to finite differences, reusing the forward product as its own
    transpose.  That substitution is exact whenever the x-Jacobian is
    symmetric, which holds for the closed-form field (its Jacobian is a
    shifted, scaled softmax covariance).
    """
    jvp = getattr(field, "jvp_x", None)
    vjp = getattr(field, "vjp_x", None)
    if callable(jvp) and callable(vjp):
        return jvp, vjp
    fd = lambda x, t, v: _fd_jvp(field, x, t, v)
    return fd, fd


def lipschitz_estimate(
    field: VelocityField,
    probes: np.ndarray,
    t: float,
    iters: int = 50,
    rng: Rng | None = None,
    rtol: float = 1e-9,
) -> LipschitzEstimate:
    """Median spectral norm of the velocity x-Jacobian over probe states.

    Per probe: power iteration on J^T J, alternating a Jacobian-vector
    product with its transpose.  A probe that has not settled (relative
    change above ``rtol`` after ``iters``) clears the converged flag but
    the value is still returned.
    """
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    if rng is None:
        rng = Rng(0)
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    jvp, vjp = _probe_operators(field)
    g = rng.generator
    estimates = np.empty(probes.shape[0])
    converged = True
    for p, x in enumerate(probes):
        v = g.standard_normal(x.size)
        v /= np.linalg.norm(v)
        s_prev = 0.0
        s = 0.0
        for _ in range(iters):
            u = jvp(x, t, v)
            s = float(np.linalg.norm(u))
            if s == 0.0:
                break
            w = vjp(x, t, u)
            nw = np.linalg.norm(w)
            if nw == 0.0:
                break
            v = w / nw
            if abs(s - s_prev) <= rtol * max(s, 1e-300):
                break
            s_prev = s
        else:
            converged = False
        estimates[p] = s
    return LipschitzEstimate(
        value=float(np.median(estimates)), per_probe=estimates, converged=converged, t=float(t)
    )


def lipschitz_curve(
    field: VelocityField,
    probes: np.ndarray,
    t_grid: np.ndarray,
    iters: int = 50,
    rng: Rng | None = None,
) -> tuple[np.ndarray, float, bool]:
    """Median L_t over a time grid plus exp of the [0,1]-normalized
    trapezoidal integral (the bound's exponential factor)."""
    if rng is None:
        rng = Rng(0)
    t_grid = np.asarray(t_grid, dtype=np.float64)
    values = np.empty(t_grid.size)
    ok = True
    for i, t in enumerate(t_grid):
        est = lipschitz_estimate(field, probes, float(t), iters=iters, rng=rng.child(f"lip-{i}"))
        values[i] = est.value
        ok = ok and est.converged
    span = float(t_grid[-1] - t_grid[0])
    integral = float(np.trapezoid(values, t_grid) / span) if span > 0 else float(values[0])
    return values, float(np.exp(integral)), ok


# --- velocity error --------------------------------------------------------------


def _check_disjoint(ds_val: LatentDataset, reference: ClosedFormField) -> None:
    """A shared id only counts as training leakage when the row matches."""
    ref = reference.dataset
    shared, val_pos, ref_pos = np.intersect1d(ds_val.ids, ref.ids, return_indices=True)
    for sid, vp, rp in zip(shared, val_pos, ref_pos):
        if np.array_equal(ds_val.data[vp], ref.data[rp]):
            raise ValidationError(
                f"validation sample id {int(sid)} duplicates a reference training row"
            )


def velocity_error(
    field: VelocityField,
    reference: ClosedFormField,
    ds_val: LatentDataset,
    t_grid: np.ndarray | None = None,
    probes_per_t: int = 256,
    rng: Rng | None = None,
) -> tuple[float, np.ndarray]:
    """Monte-Carlo epsilon: root of the time-averaged expected squared
    velocity error on interpolation states built from validation rows.

    The [0,1] integral is approximated by the trapezoidal mean over the
    grid (times the unit interval), so a constant integrand is recovered
    exactly.  Returns (epsilon, per-t squared errors).
    """
    if rng is None:
        rng = Rng(0)
    if t_grid is None:
        t_grid = default_time_grid(min(field.t_limit, reference.t_max))
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if np.any(t_grid <= 0) or np.any(t_grid > reference.t_max):
        raise ValidationError("t_grid must lie inside (0, t_max]")
    if probes_per_t < 1:
        raise ValidationError("probes_per_t must be >= 1")
    _check_disjoint(ds_val, reference)
    g = rng.generator
    sq = np.empty(t_grid.size)
    for i, t in enumerate(t_grid):
        x0 = g.standard_normal((probes_per_t, ds_val.d))
        x1 = ds_val.data[g.integers(0, ds_val.n, size=probes_per_t)]
        xt = (1.0 - t) * x0 + t * x1
        diff = field.velocity_batch(xt, float(t)) - reference.velocity_batch(xt, float(t))
        sq[i] = float(np.einsum("ij,ij->", diff, diff) / probes_per_t)
    span = float(t_grid[-1] - t_grid[0])
    mean_sq = float(np.trapezoid(sq, t_grid) / span) if span > 0 else float(sq[0])
    return float(np.sqrt(mean_sq)), sq


# --- the bound --------------------------------------------------------------------


@dataclass(frozen=True)
class BoundReport:
    """exp-factor x epsilon, with the per-t samples that produced each."""

    exp_factor: float
    epsilon: float
    bound: float
    t_grid: np.ndarray | None = None
    lipschitz_samples: np.ndarray | None = None
    sq_error_samples: np.ndarray | None = None

    def to_json(self) -> dict:
        out = {"exp_factor": self.exp_factor, "epsilon": self.epsilon, "bound": self.bound}
        if self.t_grid is not None:
            out["t_grid"] = [float(v) for v in self.t_grid]
        if self.lipschitz_samples is not None:
            out["lipschitz_samples"] = [float(v) for v in self.lipschitz_samples]
        if self.sq_error_samples is not None:
            out["sq_error_samples"] = [float(v) for v in self.sq_error_samples]
        return out


def w2_bound(
    lipschitz_integral_exp: float,
    epsilon: float,
    t_grid: np.ndarray | None = None,
    lipschitz_samples: np.ndarray | None = None,
    sq_error_samples: np.ndarray | None = None,
) -> BoundReport:
    """bound = exp-factor x epsilon, exactly; everything else is context."""
    if lipschitz_integral_exp < 0 or epsilon < 0:
        raise ValidationError("bound inputs must be >= 0")
    return BoundReport(
        exp_factor=float(lipschitz_integral_exp),
        epsilon=float(epsilon),
        bound=float(lipschitz_integral_exp) * float(epsilon),
        t_grid=t_grid,
        lipschitz_samples=lipschitz_samples,
        sq_error_samples=sq_error_samples,
    )


def combine_triangle(bound_i: float | BoundReport, bound_j: float | BoundReport) -> float:
    """Pairwise bound between two approximate flows through the exact one:
    the triangle inequality turns two (exact, approx) bounds into a sum."""
    bi = bound_i.bound if isinstance(bound_i, BoundReport) else float(bound_i)
    bj = bound_j.bound if isinstance(bound_j, BoundReport) else float(bound_j)
    if bi < 0 or bj < 0:
        raise ValidationError("bounds must be >= 0")
    return bi + bj
