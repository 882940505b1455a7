"""Closed-form rectified-flow transport over a finite dataset.

Given targets x^1..x^n, the marginal-preserving velocity field of the
linear-interpolation flow has an exact softmax form

    u(x, t) = sum_i lambda_i(x, t) (x^i - x) / (1 - t),
    lambda_i(x, t) = softmax_i( -||x - t x^i||^2 / (2 (1 - t)^2) ),

so no model needs to be trained to transport the standard-normal prior onto
the dataset.  This module evaluates that field stably, integrates its ODE
with fixed-step Euler in either time direction, and computes the stability
quantities defined on top of it: endpoint assignments, path deviations, and
per-sample dominance statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LatentDataset, Rng
from .errors import DivergenceError, ValidationError

T_MAX_DEFAULT = 1.0 - 1e-3


class VelocityField:
    """Interface shared by the closed-form field and learned surrogates."""

    #: latest time at which the field may be evaluated
    t_limit: float = 1.0

    def velocity_batch(self, x: np.ndarray, t: float) -> np.ndarray:
        """Velocities for a batch of states, shape (m, d) -> (m, d)."""
        raise NotImplementedError

    def velocity(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.velocity_batch(x[None, :], t)[0]


class ClosedFormField(VelocityField):
    """The exact velocity field of a dataset, with precomputed sample norms.

    Softmax exponents are expanded as ||x||^2 - 2t <x, x^i> + t^2 ||x^i||^2
    so a batch evaluation is one matrix product; the softmax is
    max-subtracted.  Evaluation is refused above ``t_max`` where the 1/(1-t)
    factors blow up.
    """

    def __init__(self, dataset: LatentDataset, t_max: float = T_MAX_DEFAULT):
        if dataset.n < 1:
            raise ValidationError("closed-form field needs a non-empty dataset")
        if not 0.0 < t_max < 1.0:
            raise ValidationError(f"t_max must lie in (0, 1), got {t_max}")
        self.dataset = dataset
        self.t_max = float(t_max)
        self.t_limit = self.t_max
        self._x = dataset.data  # (n, d), read-only
        self._sqnorm = np.einsum("ij,ij->i", self._x, self._x)

    @property
    def n(self) -> int:
        return self.dataset.n

    def _check_t(self, t) -> None:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > self.t_max):
            raise ValidationError(
                f"evaluation time outside [0, t_max={self.t_max}]: got {float(np.max(t)) if t.size else t}"
            )

    def weights_batch(self, x: np.ndarray, t) -> np.ndarray:
        """Softmax weights lambda, shape (m, n).

        ``t`` may be a scalar or one value per row of ``x``; the mixed-time
        form serves the dominance sampler, which draws a fresh t per probe.
        """
        self._check_t(t)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dataset.d:
            raise ValidationError(f"state dimension {x.shape[1]} != dataset d={self.dataset.d}")
        if not np.all(np.isfinite(x)):
            raise ValidationError("non-finite state passed to weights_batch")
        t = np.asarray(t, dtype=np.float64)
        tc = t.reshape(-1, 1) if t.ndim else t  # column when per-row
        inner = x @ self._x.T  # (m, n)
        # -(||x||^2 - 2t<x,x^i> + t^2 ||x^i||^2) / (2 (1-t)^2); the ||x||^2
        # term is constant per row and dropped (softmax shift invariance)
        expo = (2.0 * tc * inner - (tc * tc) * self._sqnorm[None, :]) / (2.0 * (1.0 - tc) ** 2)
        expo -= expo.max(axis=1, keepdims=True)
        w = np.exp(expo)
        w /= w.sum(axis=1, keepdims=True)
        return w

    def velocity_batch(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        w = self.weights_batch(x, t)
        t = float(t)
        return (w @ self._x - x) / (1.0 - t)

    def jvp(self, x: np.ndarray, t: float, v: np.ndarray) -> np.ndarray:
        """Jacobian-vector product d/de u(x + e v, t) at e=0, analytically.

        The x-Jacobian is [ t/(1-t)^2 (C - m m^T) - I ] / (1-t) with
        C = sum_i lambda_i x^i x^i^T and m = sum_i lambda_i x^i; it is
        symmetric, so this doubles as the vjp.
        """
        x = np.asarray(x, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        t = float(t)
        w = self.weights_batch(x[None, :], t)[0]
        m = w @ self._x
        xv = self._x @ v
        cv = (w * xv) @ self._x  # C v without forming C
        inner = cv - m * (m @ v)
        return ((t / (1.0 - t) ** 2) * inner - v) / (1.0 - t)

    vjp = jvp  # symmetric Jacobian


def softmax_weights(field: ClosedFormField, x: np.ndarray, t: float) -> np.ndarray:
    """Softmax weights of a single state; sums to 1 within 1e-12."""
    return field.weights_batch(np.asarray(x, dtype=np.float64)[None, :], float(t))[0]


def closed_form_velocity(field: ClosedFormField, x: np.ndarray, t: float) -> np.ndarray:
    return field.velocity(x, t)


# --- ODE integration --------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """States of one Euler path; times strictly monotone either direction."""

    times: np.ndarray
    states: np.ndarray  # (len(times), d)
    field_tag: str = ""

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        states = np.asarray(self.states, dtype=np.float64)
        if times.ndim != 1 or times.size < 2 or states.shape[0] != times.size:
            raise ValidationError("trajectory needs >= 2 matching times/states")
        dt = np.diff(times)
        if not (np.all(dt > 0) or np.all(dt < 0)):
            raise ValidationError("trajectory times must be strictly monotone")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]


def time_grid(t_start: float, t_end: float, steps: int) -> np.ndarray:
    """Uniform grid with exact endpoints; shared grids make stitched and
    plain integrations bit-comparable."""
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if t_start == t_end:
        raise ValidationError("t_start and t_end must differ")
    return np.linspace(float(t_start), float(t_end), int(steps) + 1)


def _check_grid(field: VelocityField, times: np.ndarray) -> None:
    # the whole grid must sit inside the field's valid range
    lo, hi = float(np.min(times)), float(np.max(times))
    if lo < 0.0 or hi > field.t_limit + 1e-12:
        raise ValidationError(
            f"time grid [{lo:.6g}, {hi:.6g}] leaves the field's valid range [0, {field.t_limit:.6g}]"
        )


def euler_states(field: VelocityField, x0: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Explicit Euler over an explicit grid for a batch, returning only the
    final states (trajectory recording at scale is memory-prohibitive)."""
    _check_grid(field, times)
    x = np.array(np.atleast_2d(np.asarray(x0, dtype=np.float64)))
    for k in range(len(times) - 1):
        h = times[k + 1] - times[k]
        x = x + h * field.velocity_batch(x, float(times[k]))
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state at step {k + 1} (t={times[k + 1]:.6g})", step=k + 1)
    return x


def integrate(
    field: VelocityField,
    x_start: np.ndarray,
    t_start: float,
    t_end: float,
    steps: int,
    field_tag: str = "",
) -> Trajectory:
    """Fixed-step explicit Euler; h < 0 inverts the flow.  Records every
    intermediate state and lands on ``t_end`` exactly."""
    return integrate_grid(field, x_start, time_grid(t_start, t_end, steps), field_tag)


def integrate_grid(field: VelocityField, x_start: np.ndarray, times: np.ndarray, field_tag: str = "") -> Trajectory:
    x = np.asarray(x_start, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError("integrate expects a single d-vector; use euler_states for batches")
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite start state")
    _check_grid(field, times)
    states = np.empty((len(times), x.size))
    states[0] = x
    for k in range(len(times) - 1):
        h = times[k + 1] - times[k]
        x = x + h * field.velocity(x, float(times[k]))
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state at step {k + 1} (t={times[k + 1]:.6g})", step=k + 1)
        states[k + 1] = x
    return Trajectory(times=np.asarray(times, dtype=np.float64), states=states, field_tag=field_tag)


# --- assignment --------------------------------------------------------------


@dataclass(frozen=True)
class AssignmentResult:
    source_id: int
    assigned_id: int
    winner_weight: float
    margin: float


def assign_states(field: ClosedFormField, states: np.ndarray, t_eval: float) -> list[AssignmentResult]:
    """Assignment of already-transported states: argmax softmax weight at
    ``t_eval``, ties broken toward the lowest sample id."""
    w = field.weights_batch(np.atleast_2d(np.asarray(states, dtype=np.float64)), float(t_eval))
    # scan columns in increasing-id order so argmax's first-hit rule is the
    # lowest-id tie break
    order = np.argsort(field.dataset.ids, kind="stable")
    w_ord = w[:, order]
    ids_ord = field.dataset.ids[order]
    win = np.argmax(w_ord, axis=1)
    rows = np.arange(w.shape[0])
    winner_w = w_ord[rows, win]
    w_ord[rows, win] = -np.inf
    runner_w = w_ord.max(axis=1) if w.shape[1] > 1 else np.zeros(w.shape[0])
    return [
        AssignmentResult(
            source_id=int(i),
            assigned_id=int(ids_ord[win[i]]),
            winner_weight=float(winner_w[i]),
            margin=float(winner_w[i] - runner_w[i]),
        )
        for i in rows
    ]


def assign(
    field: ClosedFormField,
    x0_batch: np.ndarray,
    steps: int = 100,
    t_eval: float | None = None,
) -> list[AssignmentResult]:
    """Integrate each source forward to ``t_eval`` (default the field's
    t_max) and assign it the argmax-weight sample there.

    Ties break toward the lowest sample id, which also makes the result
    invariant to dataset row order.
    """
    if t_eval is None:
        t_eval = field.t_max
    if not 0.0 < t_eval <= field.t_max:
        raise ValidationError(f"t_eval must lie in (0, t_max], got {t_eval}")
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=np.float64))
    xt = euler_states(field, x0, time_grid(0.0, float(t_eval), steps))
    return assign_states(field, xt, float(t_eval))


def agreement_fraction(
    full: list[AssignmentResult],
    pruned: list[AssignmentResult],
    kept_ids,
) -> tuple[float, int]:
    """Fraction of sources keeping their assignment after pruning, among
    those whose full-data assignee survived.

    Sources whose assignee was removed have no stable notion of agreement
    (the flow must commit elsewhere), so they are excluded from the
    denominator; the count of conditioned sources is returned alongside.
    """
    if len(full) != len(pruned):
        raise ValidationError("assignment lists must cover the same sources")
    kept = set(int(i) for i in kept_ids)
    survived = [(a, b) for a, b in zip(full, pruned) if a.assigned_id in kept]
    if not survived:
        return float("nan"), 0
    same = sum(1 for a, b in survived if a.assigned_id == b.assigned_id)
    return same / len(survived), len(survived)


# --- path deviation ----------------------------------------------------------


def path_deviation(traj_a: Trajectory, traj_b: Trajectory) -> float:
    """Trapezoidal approximation of the time integral of the pointwise
    Euclidean distance between two trajectories on identical grids."""
    if traj_a.times.shape != traj_b.times.shape or not np.array_equal(traj_a.times, traj_b.times):
        raise ValidationError("path_deviation requires identical time grids")
    dist = np.linalg.norm(traj_a.states - traj_b.states, axis=1)
    return float(np.trapezoid(dist, traj_a.times))


def deviation_lockstep(
    field_a: VelocityField,
    x0_a: np.ndarray,
    field_b: VelocityField,
    x0_b: np.ndarray,
    times: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row path deviations, integrating both fields in lockstep.

    Row i of ``x0_a`` is paired with row i of ``x0_b`` on the shared grid;
    the trapezoid sum is accumulated on the fly so full batch trajectories
    never need to be stored.  Returns (deviations, endpoints_a,
    endpoints_b) so callers can reuse the transported states.
    """
    xa = np.array(np.atleast_2d(np.asarray(x0_a, dtype=np.float64)))
    xb = np.array(np.atleast_2d(np.asarray(x0_b, dtype=np.float64)))
    if xa.shape != xb.shape:
        raise ValidationError("paired source batches must share a shape")
    _check_grid(field_a, times)
    _check_grid(field_b, times)
    acc = np.zeros(xa.shape[0])
    prev = np.linalg.norm(xa - xb, axis=1)
    for k in range(len(times) - 1):
        h = times[k + 1] - times[k]
        t = float(times[k])
        xa = xa + h * field_a.velocity_batch(xa, t)
        xb = xb + h * field_b.velocity_batch(xb, t)
        if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(xb))):
            raise DivergenceError(f"non-finite state at step {k + 1}", step=k + 1)
        cur = np.linalg.norm(xa - xb, axis=1)
        acc += 0.5 * abs(h) * (prev + cur)
        prev = cur
    return acc, xa, xb


# --- dominance ---------------------------------------------------------------


@dataclass(frozen=True)
class DominanceResult:
    """Per-sample dominance, sorted by frequency descending.

    ``freq`` counts argmax wins over probes; ``lambda_mass`` is the
    accumulated softmax mass, normalized.  Both readings of "dominant" are
    reported since either could be meant; ``cum_mass`` accumulates freq.
    """

    sample_ids: np.ndarray
    freq: np.ndarray
    cum_mass: np.ndarray
    lambda_mass: np.ndarray


def dominance_distribution(field: ClosedFormField, probes: int, rng: Rng) -> DominanceResult:
    """Sample interpolation states x_t = (1-t) x0 + t x1 (x0 prior, x1 a
    dataset row, t ~ U(0, t_max)) and count which sample wins the softmax."""
    if probes < 1:
        raise ValidationError("probes must be >= 1")
    g = rng.generator
    n, d = field.dataset.n, field.dataset.d
    counts = np.zeros(n)
    mass = np.zeros(n)
    batch = 4096
    done = 0
    while done < probes:
        b = min(batch, probes - done)
        x0 = g.standard_normal((b, d))
        rows = g.integers(0, n, size=b)
        t = g.uniform(0.0, field.t_max, size=b)
        xt = (1.0 - t)[:, None] * x0 + t[:, None] * field.dataset.data[rows]
        w = field.weights_batch(xt, t)
        winners = np.argmax(w, axis=1)
        counts += np.bincount(winners, minlength=n)
        mass += w.sum(axis=0)
        done += b
    freq = counts / probes
    lam = mass / mass.sum()
    order = np.argsort(-freq, kind="stable")
    freq = freq[order]
    return DominanceResult(
        sample_ids=field.dataset.ids[order],
        freq=freq,
        cum_mass=np.cumsum(freq),
        lambda_mass=lam[order],
    )
