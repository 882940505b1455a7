"""Two-field stitched inference.

A cheap coarse field carries trajectories from noise up to a split time t0
and an expensive fine field finishes them.  The seam is kept tight either
by construction (closed-form coarse on a subset) or by fine-tuning the
coarse network against the fine field's velocity at states reached by
inverting the fine ODE back to t0.  Cost accounting is analytic: step
counts times per-step cost, no wall clocks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import LatentDataset, Rng
from .errors import ValidationError
from .surrogate import SurrogateModel, TrainConfig, fm_loss
from .transport import Trajectory, VelocityField, euler_states, integrate_grid, time_grid


class StitchedField(VelocityField):
    """Routes evaluation to coarse for t < t0 and fine for t >= t0.

    Routing is exact at the boundary, so a stitched field whose two halves
    are the same object is indistinguishable from that field.
    """

    def __init__(self, coarse: VelocityField, fine: VelocityField, t0: float):
        if not 0.0 <= t0 < 1.0:
            raise ValidationError(f"t0 must lie in [0, 1), got {t0}")
        self.coarse = coarse
        self.fine = fine
        self.t0 = float(t0)
        self.t_limit = fine.t_limit

    def velocity_batch(self, x: np.ndarray, t: float) -> np.ndarray:
        if t < self.t0:
            return self.coarse.velocity_batch(x, t)
        return self.fine.velocity_batch(x, t)


def stitched_grid(t0: float, t_end: float, steps_coarse: int, steps_fine: int) -> np.ndarray:
    """Concatenated time grid 0 -> t0 -> t_end with the seam point shared.
    Degenerates to a single segment when t0 sits on either boundary."""
    if t0 <= 0.0:
        return time_grid(0.0, t_end, steps_fine)
    if t0 >= t_end:
        return time_grid(0.0, t_end, steps_coarse)
    a = time_grid(0.0, t0, steps_coarse)
    b = time_grid(t0, t_end, steps_fine)
    return np.concatenate([a, b[1:]])


def stitched_sample(
    field: StitchedField,
    x0_batch: np.ndarray,
    steps_coarse: int,
    steps_fine: int,
) -> list[Trajectory]:
    """Full stitched trajectories, one per source row."""
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=np.float64))
    times = stitched_grid(field.t0, field.t_limit, steps_coarse, steps_fine)
    return [integrate_grid(field, row, times, field_tag="stitched") for row in x0]


def stitched_endpoints(
    field: StitchedField,
    x0_batch: np.ndarray,
    steps_coarse: int,
    steps_fine: int,
) -> np.ndarray:
    """Endpoint-only batch variant; avoids storing m full trajectories."""
    times = stitched_grid(field.t0, field.t_limit, steps_coarse, steps_fine)
    return euler_states(field, x0_batch, times)


def invert_to_seam(fine: VelocityField, x1: np.ndarray, t0: float, steps: int) -> np.ndarray:
    """Integrate the fine field backward from its latest valid time to t0.

    Accepts a single vector or a batch; closed-form fields start at their
    t_max rather than 1 (the field is singular there), surrogates at 1.
    """
    if not 0.0 < t0 < 1.0:
        raise ValidationError(f"t0 must lie in (0, 1), got {t0}")
    x1 = np.asarray(x1, dtype=np.float64)
    start = fine.t_limit
    if t0 >= start:
        return x1.copy()
    single = x1.ndim == 1
    out = euler_states(fine, np.atleast_2d(x1), time_grid(start, t0, steps))
    return out[0] if single else out


def finetune_coarse(
    coarse: SurrogateModel,
    fine: VelocityField,
    ds: LatentDataset,
    t0: float,
    lambda_v: float,
    cfg: TrainConfig,
    rng: Rng,
    inversion_steps: int = 50,
) -> tuple[SurrogateModel, np.ndarray]:
    """Train the coarse network on FM loss restricted to t in [0, t0) plus
    a seam-continuity penalty lambda_v ||v_F(x_t0, t0) - v_C(x_t0, t0)||^2.

    Seam states are recomputed per minibatch by inverting the (frozen) fine
    field from the batch's data points.  Gradients flow through the raw
    coarse parameters; the EMA shadow tracks them for inference.  Returns
    the tuned model and an (steps, 2) array of (fm, seam) loss terms.
    """
    if lambda_v < 0:
        raise ValidationError("lambda_v must be >= 0")
    if not 0.0 < t0 < 1.0:
        raise ValidationError(f"t0 must lie in (0, 1), got {t0}")
    g = rng.generator
    velocity = np.zeros(coarse.param_count)
    curve = np.empty((cfg.steps, 2))
    for step in range(cfg.steps):
        rows = g.integers(0, ds.n, size=cfg.batch_size)
        x1 = ds.data[rows]
        x0 = g.standard_normal(x1.shape)
        t = g.uniform(0.0, t0, size=cfg.batch_size)
        loss_fm, grad = fm_loss(coarse, x0, x1, t)
        loss_seam = 0.0
        if lambda_v > 0:
            xs = invert_to_seam(fine, x1, t0, inversion_steps)
            target = fine.velocity_batch(xs, t0)
            loss_seam, grad_seam = coarse.loss_at(xs, t0, target)
            grad = grad + lambda_v * grad_seam
        velocity = cfg.momentum * velocity - cfg.lr * grad
        coarse.set_params(coarse.pack() + velocity)
        coarse.ema_update(cfg.ema_decay)
        curve[step] = (loss_fm, loss_seam)
    return coarse, curve


# --- seam diagnostics ---------------------------------------------------------


@dataclass(frozen=True)
class SeamReport:
    """Per-probe seam velocity gaps and stitched-vs-fine endpoint drift."""

    seam_gap: np.ndarray
    endpoint_dev: np.ndarray
    t0: float

    def __post_init__(self):
        if self.seam_gap.shape != self.endpoint_dev.shape:
            raise ValidationError("seam report arrays must align")
        if np.any(self.seam_gap < 0) or np.any(self.endpoint_dev < 0):
            raise ValidationError("gaps and deviations are norms, must be >= 0")

    @property
    def probes(self) -> int:
        return self.seam_gap.size

    def summary(self) -> dict:
        return {
            "probes": int(self.probes),
            "t0": self.t0,
            "seam_gap_mean": float(self.seam_gap.mean()),
            "seam_gap_median": float(np.median(self.seam_gap)),
            "endpoint_dev_mean": float(self.endpoint_dev.mean()),
            "endpoint_dev_median": float(np.median(self.endpoint_dev)),
        }


def compute_seam_report(
    coarse: VelocityField,
    fine: VelocityField,
    x0_batch: np.ndarray,
    t0: float,
    steps_coarse: int,
    steps_fine: int,
) -> SeamReport:
    """Drive probes through the stitched field and through fine alone on the
    same time grid; report velocity gaps at the seam states and endpoint
    distances."""
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=np.float64))
    stitched = StitchedField(coarse, fine, t0)
    times = stitched_grid(t0, fine.t_limit, steps_coarse, steps_fine)
    if 0.0 < t0 < fine.t_limit:
        seam_idx = steps_coarse
        x_seam = euler_states(stitched, x0, times[: seam_idx + 1])
        gap = np.linalg.norm(
            fine.velocity_batch(x_seam, t0) - coarse.velocity_batch(x_seam, t0), axis=1
        )
        end_stitched = euler_states(stitched, x_seam, times[seam_idx:])
    else:
        gap = np.zeros(x0.shape[0])
        end_stitched = euler_states(stitched, x0, times)
    end_fine = euler_states(fine, x0, times)
    dev = np.linalg.norm(end_stitched - end_fine, axis=1)
    return SeamReport(seam_gap=gap, endpoint_dev=dev, t0=float(t0))


def save_seam_csv(report: SeamReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["probe_id", "seam_gap", "endpoint_dev"])
        for i in range(report.probes):
            w.writerow([i, repr(float(report.seam_gap[i])), repr(float(report.endpoint_dev[i]))])


# --- cost accounting ------------------------------------------------------------


@dataclass(frozen=True)
class CostReport:
    stitched_cost: float
    fine_only_cost: float
    speedup: float


def cost_model(t0: float, steps: int, cost_coarse_per_step: float, cost_fine_per_step: float) -> CostReport:
    """Analytic step-count accounting: the coarse field covers a t0 fraction
    of the steps, fine covers the rest; speedup is against fine-only."""
    if cost_coarse_per_step <= 0 or cost_fine_per_step <= 0:
        raise ValidationError("per-step costs must be positive")
    if not 0.0 <= t0 <= 1.0:
        raise ValidationError(f"t0 must lie in [0, 1], got {t0}")
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    stitched = t0 * steps * cost_coarse_per_step + (1.0 - t0) * steps * cost_fine_per_step
    fine_only = steps * cost_fine_per_step
    return CostReport(stitched_cost=stitched, fine_only_cost=fine_only, speedup=fine_only / stitched)
