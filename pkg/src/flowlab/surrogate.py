"""A small feed-forward velocity network with hand-rolled backprop.

The model regresses the straight-path target x1 - x0 on interpolation
states x_t = (1-t) x0 + t x1.  It exists to be probed, not to win
benchmarks: training produces per-sample loss/gradient scores for pruning,
a learned field for stitched inference, and checkpoints for bound
experiments.  Gradients are exact reverse-mode, written out explicitly so
the whole artifact stays numpy-only.

Layout: input is concat(x, sinusoidal time embedding), tanh hidden layers,
linear output of width d.  An EMA shadow of the parameters is updated after
every optimizer step and used for inference.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import LatentDataset, Rng
from .errors import DataFormatError, DivergenceError, ValidationError
from .transport import VelocityField

TIME_EMB_DEFAULT = 32
CKPT_MAGIC = b"LFSM"
CKPT_VERSION = 1


def time_embedding(t, width: int) -> np.ndarray:
    """Sinusoidal features of t over geometrically spaced frequencies."""
    if width % 2 or width < 2:
        raise ValidationError(f"time embedding width must be even and >= 2, got {width}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class SurrogateModel(VelocityField):
    """MLP velocity field v(x, t) with exact manual gradients.

    ``params`` are the live training weights; ``ema`` is the shadow used by
    :meth:`velocity_batch` and everything downstream that integrates the
    field.
    """

    t_limit = 1.0

    def __init__(
        self,
        d: int,
        hidden: tuple[int, ...] = (256, 256, 256),
        time_emb: int = TIME_EMB_DEFAULT,
        rng: Rng | None = None,
    ):
        if d < 1 or any(h < 1 for h in hidden):
            raise ValidationError("all layer widths must be >= 1")
        if rng is None:
            rng = Rng(0)
        self.d = int(d)
        self.time_emb = int(time_emb)
        self.widths = [self.d + self.time_emb, *[int(h) for h in hidden], self.d]
        g = rng.generator
        self.params: list[tuple[np.ndarray, np.ndarray]] = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            w = g.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            self.params.append((w, np.zeros(fan_out)))
        self.ema = [(w.copy(), b.copy()) for w, b in self.params]

    # -- parameter plumbing --

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in self.params)

    def pack(self, params=None) -> np.ndarray:
        params = self.params if params is None else params
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in params])

    def unpack(self, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.param_count:
            raise ValidationError(f"parameter vector has {theta.size} entries, model needs {self.param_count}")
        out, pos = [], 0
        for w, b in self.params:
            wf = theta[pos: pos + w.size].reshape(w.shape)
            pos += w.size
            bf = theta[pos: pos + b.size]
            pos += b.size
            out.append((wf.copy(), bf.copy()))
        return out

    def set_params(self, theta: np.ndarray) -> None:
        self.params = self.unpack(theta)

    def sync_ema(self) -> None:
        self.ema = [(w.copy(), b.copy()) for w, b in self.params]

    def ema_update(self, decay: float) -> None:
        for (ew, eb), (w, b) in zip(self.ema, self.params):
            ew *= decay
            ew += (1.0 - decay) * w
            eb *= decay
            eb += (1.0 - decay) * b

    # -- forward / backward --

    def _forward(self, params, x: np.ndarray, t) -> tuple[np.ndarray, list[np.ndarray]]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.d:
            raise ValidationError(f"input dimension {x.shape[1]} != model d={self.d}")
        t = np.asarray(t, dtype=np.float64)
        tv = np.full(x.shape[0], float(t)) if t.ndim == 0 else t
        h = np.concatenate([x, time_embedding(tv, self.time_emb)], axis=1)
        acts = [h]
        for w, b in params[:-1]:
            h = np.tanh(h @ w + b)
            acts.append(h)
        w, b = params[-1]
        y = h @ w + b
        if not np.all(np.isfinite(y)):
            raise DivergenceError("non-finite activations in forward pass")
        return y, acts

    def forward(self, x: np.ndarray, t, use_ema: bool = False) -> np.ndarray:
        return self._forward(self.ema if use_ema else self.params, x, t)[0]

    def velocity_batch(self, x: np.ndarray, t: float) -> np.ndarray:
        """Inference field: the EMA parameters."""
        return self.forward(x, t, use_ema=True)

    def _backward(self, acts: list[np.ndarray], dy: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.params)
        delta = dy
        for i in range(len(self.params) - 1, -1, -1):
            grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
            if i > 0:
                delta = (delta @ self.params[i][0].T) * (1.0 - acts[i] ** 2)
        return grads

    def loss_at(self, x_in: np.ndarray, t, target: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean squared error of the raw-parameter forward pass against an
        arbitrary target, with the packed gradient.  The FM loss and the
        seam-continuity loss are both instances of this primitive."""
        target = np.atleast_2d(np.asarray(target, dtype=np.float64))
        y, acts = self._forward(self.params, x_in, t)
        r = y - target
        loss = float(np.einsum("ij,ij->", r, r) / r.shape[0])
        grads = self._backward(acts, 2.0 * r / r.shape[0])
        return loss, self.pack(grads)

    def per_sample_sqnorms(self, x_in: np.ndarray, t, target: np.ndarray, last_layer_only: bool = False):
        """Per-sample loss and squared gradient norm, batched.

        For a single sample the weight gradient of each layer is an outer
        product, so its squared Frobenius norm factorizes as
        ||activation||^2 ||delta||^2 (plus ||delta||^2 for the bias); that
        identity turns n separate backprops into one batched pass.
        """
        target = np.atleast_2d(np.asarray(target, dtype=np.float64))
        y, acts = self._forward(self.params, x_in, t)
        r = y - target
        losses = np.einsum("ij,ij->i", r, r)
        delta = 2.0 * r
        sq = np.zeros(r.shape[0])
        for i in range(len(self.params) - 1, -1, -1):
            if not last_layer_only or i == len(self.params) - 1:
                dn = np.einsum("ij,ij->i", delta, delta)
                an = np.einsum("ij,ij->i", acts[i], acts[i])
                sq += dn * (an + 1.0)
            if i > 0:
                delta = (delta @ self.params[i][0].T) * (1.0 - acts[i] ** 2)
        return losses, sq

    # -- input-space derivatives of the inference (EMA) field --

    def jvp_x(self, x: np.ndarray, t: float, v: np.ndarray) -> np.ndarray:
        """Forward-mode directional derivative d/de v_ema(x + e v, t).

        t is held fixed, so the time-embedding block carries a zero tangent.
        """
        x = np.asarray(x, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        _, acts = self._forward(self.ema, x[None, :], float(t))
        dh = np.concatenate([v, np.zeros(self.time_emb)])
        for i, (w, _) in enumerate(self.ema[:-1]):
            dh = (dh @ w) * (1.0 - acts[i + 1][0] ** 2)
        return dh @ self.ema[-1][0]

    def vjp_x(self, x: np.ndarray, t: float, u: np.ndarray) -> np.ndarray:
        """Reverse-mode pullback u^T J of the EMA field, x block only."""
        x = np.asarray(x, dtype=np.float64)
        delta = np.asarray(u, dtype=np.float64)
        _, acts = self._forward(self.ema, x[None, :], float(t))
        for i in range(len(self.ema) - 1, 0, -1):
            delta = (delta @ self.ema[i][0].T) * (1.0 - acts[i][0] ** 2)
        return (delta @ self.ema[0][0].T)[: self.d]

    def config_echo(self) -> dict:
        return {"d": self.d, "hidden": self.widths[1:-1], "time_emb": self.time_emb}


def fm_loss(model: SurrogateModel, x0: np.ndarray, x1: np.ndarray, t: float) -> tuple[float, np.ndarray]:
    """Flow-matching loss ||v(x_t, t) - (x1 - x0)||^2 on one pair, with the
    exact parameter gradient."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr >= 1.0):
        raise ValidationError(f"t must lie in [0, 1), got {t}")
    tc = t_arr[:, None] if t_arr.ndim else t_arr
    xt = (1.0 - tc) * x0 + tc * x1
    return model.loss_at(xt, t_arr, x1 - x0)


def evaluate_field(model: SurrogateModel, x: np.ndarray, t: float) -> np.ndarray:
    """EMA forward pass; the model acts as a VelocityField through this."""
    return model.velocity_batch(np.atleast_2d(np.asarray(x, dtype=np.float64)), t)[0]


# --- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    steps: int = 2000
    lr: float = 1e-2
    momentum: float = 0.9
    ema_decay: float = 0.999
    t_mode: str = "continuous"  # or "grid"
    t_grid_k: int = 21
    coupling: str = "random"  # or "ot"
    t_low: float = 0.0
    t_high: float = 1.0  # exclusive; restricted ranges serve seam training

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0:
            raise ValidationError("batch_size >= 1 and steps >= 0 required")
        if self.lr <= 0:
            raise ValidationError("learning rate must be positive")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValidationError("ema_decay must lie in [0, 1]")
        if self.t_mode not in ("continuous", "grid"):
            raise ValidationError(f"t_mode must be continuous or grid, got {self.t_mode!r}")
        if self.t_mode == "grid" and self.t_grid_k < 2:
            raise ValidationError("grid t sampling requires K >= 2")
        if self.coupling not in ("random", "ot"):
            raise ValidationError(f"coupling must be random or ot, got {self.coupling!r}")
        if not 0.0 <= self.t_low < self.t_high <= 1.0:
            raise ValidationError("need 0 <= t_low < t_high <= 1")


def ot_pairing(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    """Within-batch assignment minimizing sum ||x0_i - x1_sigma(i)||^2.

    Exact (Hungarian) up to batch 256; greedy nearest-unused beyond, where
    the cubic exact solve starts to bite.
    """
    b = x0.shape[0]
    cost = (
        np.einsum("ij,ij->i", x0, x0)[:, None]
        - 2.0 * x0 @ x1.T
        + np.einsum("ij,ij->i", x1, x1)[None, :]
    )
    if b <= 256:
        _, cols = linear_sum_assignment(cost)
        return cols
    out = np.empty(b, dtype=np.int64)
    used = np.zeros(b, dtype=bool)
    for i in range(b):
        row = np.where(used, np.inf, cost[i])
        j = int(np.argmin(row))
        out[i] = j
        used[j] = True
    return out


def _draw_t(cfg: TrainConfig, g: np.random.Generator, size: int) -> np.ndarray:
    if cfg.t_mode == "grid":
        grid = cfg.t_low + (cfg.t_high - cfg.t_low) * (np.arange(cfg.t_grid_k) / cfg.t_grid_k)
        return g.choice(grid, size=size)
    return g.uniform(cfg.t_low, cfg.t_high, size=size)


def train(
    model: SurrogateModel,
    ds: LatentDataset,
    cfg: TrainConfig,
    rng: Rng,
) -> tuple[SurrogateModel, np.ndarray]:
    """Minibatch momentum SGD on the FM objective; EMA after every step.

    Returns the model (whose EMA parameters are the inference field) and
    the per-step loss curve.
    """
    g = rng.generator
    velocity = np.zeros(model.param_count)
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        rows = g.integers(0, ds.n, size=cfg.batch_size)
        x1 = ds.data[rows]
        x0 = g.standard_normal(x1.shape)
        t = _draw_t(cfg, g, cfg.batch_size)
        if cfg.coupling == "ot":
            x1 = x1[ot_pairing(x0, x1)]
        loss, grad = fm_loss(model, x0, x1, t)
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss diverged at step {step}", step=step)
        velocity = cfg.momentum * velocity - cfg.lr * grad
        model.set_params(model.pack() + velocity)
        model.ema_update(cfg.ema_decay)
        losses[step] = loss
    return model, losses


# --- per-sample scoring --------------------------------------------------------


@dataclass(frozen=True)
class ScoreTable:
    """Normalized per-sample loss and gradient scores with their context."""

    ids: np.ndarray
    loss_score: np.ndarray
    grad_score: np.ndarray
    noise: np.ndarray  # the M shared source vectors
    times: np.ndarray  # the T shared timesteps
    mu_loss: np.ndarray  # per-t normalizers
    mu_grad: np.ndarray

    def __post_init__(self):
        for name in ("loss_score", "grad_score"):
            v = getattr(self, name)
            if not np.all(np.isfinite(v)):
                raise ValidationError(f"{name} contains non-finite entries")
        if np.any(self.mu_loss <= 0) or np.any(self.mu_grad <= 0):
            raise ValidationError("score normalizers must be strictly positive")


def score_samples(
    model: SurrogateModel,
    ds: LatentDataset,
    M: int = 2,
    T: int = 8,
    rng: Rng | None = None,
    normalizer: str = "two-pass",
    grad_scope: str = "full",
    stream_decay: float = 0.9,
) -> ScoreTable:
    """Loss/gradient scores under shared noise paths.

    M source vectors and T timesteps are fixed once and reused for every
    sample, so identical rows get identical scores.  Per-t normalizers
    divide out the strong t-dependence of both quantities; the default
    two-pass mode uses the plain mean over the sample stream (exactly
    permutation-invariant), while "stream" updates an EMA in row order and
    normalizes each sample by the running value, which is order-dependent
    but cheaper in one pass.
    """
    if M < 1 or T < 1:
        raise ValidationError("M and T must be >= 1")
    if normalizer not in ("two-pass", "stream", "none"):
        raise ValidationError(f"normalizer must be two-pass, stream or none, got {normalizer!r}")
    if grad_scope not in ("full", "last"):
        raise ValidationError(f"grad_scope must be full or last, got {grad_scope!r}")
    if rng is None:
        rng = Rng(0)
    g = rng.generator
    noise = g.standard_normal((M, ds.d))
    times = np.linspace(0.0, 1.0, T + 2)[1:-1]

    # raw values averaged over the M noise paths, per (sample, t)
    loss_mt = np.zeros((ds.n, T))
    grad_mt = np.zeros((ds.n, T))
    for k, tk in enumerate(times):
        for m in range(M):
            x0 = np.broadcast_to(noise[m], ds.data.shape)
            xt = (1.0 - tk) * x0 + tk * ds.data
            losses, sqnorms = model.per_sample_sqnorms(
                xt, float(tk), ds.data - x0, last_layer_only=(grad_scope == "last")
            )
            loss_mt[:, k] += losses / M
            grad_mt[:, k] += sqnorms / M

    def _normalize(values: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
        if normalizer == "none":
            # mu frozen to 1: scores are plain M/T averages of the raw values
            return values.mean(axis=1), np.ones(T)
        if normalizer == "two-pass":
            mu = values.mean(axis=0)
            if np.any(mu <= 0):
                raise ValidationError(f"zero {what} normalizer at some t; model output is degenerate")
            return (values / mu).mean(axis=1), mu
        mu = values[0].copy()
        if np.any(mu <= 0):
            raise ValidationError(f"zero {what} normalizer at some t; model output is degenerate")
        scores = np.empty(ds.n)
        for i in range(ds.n):
            mu = stream_decay * mu + (1.0 - stream_decay) * values[i]
            if np.any(mu <= 0):
                raise ValidationError(f"zero {what} normalizer at some t; model output is degenerate")
            scores[i] = float(np.mean(values[i] / mu))
        return scores, mu

    s_loss, mu_loss = _normalize(loss_mt, "loss")
    s_grad, mu_grad = _normalize(grad_mt, "gradient")
    return ScoreTable(
        ids=ds.ids.copy(), loss_score=s_loss, grad_score=s_grad,
        noise=noise, times=times, mu_loss=mu_loss, mu_grad=mu_grad,
    )


def save_scores_csv(table: ScoreTable, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("id,loss_score,grad_score\n")
        order = np.argsort(table.ids, kind="stable")
        for r in order:
            fh.write(f"{int(table.ids[r])},{float(table.loss_score[r])!r},{float(table.grad_score[r])!r}\n")


def load_scores_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids, sl, sg = [], [], []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "id,loss_score,grad_score":
            raise DataFormatError(f"unexpected score table header {header!r}")
        for line in fh:
            if not line.strip():
                continue
            a, b, c = line.strip().split(",")
            ids.append(int(a))
            sl.append(float(b))
            sg.append(float(c))
    return np.asarray(ids, dtype=np.int64), np.asarray(sl), np.asarray(sg)


# --- checkpoints ----------------------------------------------------------------
#
# magic "LFSM" | version u32 | layer count u32 | widths u32 each |
# f64 packed raw parameters | f64 packed EMA parameters |
# length-prefixed UTF-8 JSON config echo.  Little-endian throughout.


def save_model(model: SurrogateModel, path, config_echo: dict | None = None) -> None:
    echo = dict(model.config_echo())
    if config_echo:
        echo.update(config_echo)
    blob = json.dumps(echo, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(model.widths)))
        fh.write(struct.pack(f"<{len(model.widths)}I", *model.widths))
        fh.write(np.ascontiguousarray(model.pack(), dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.pack(model.ema), dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def load_model(path) -> tuple[SurrogateModel, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise DataFormatError(f"bad checkpoint magic {magic!r}, expected {CKPT_MAGIC!r}")
        head = fh.read(8)
        if len(head) != 8:
            raise DataFormatError("truncated checkpoint header")
        version, nw = struct.unpack("<II", head)
        if version != CKPT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        wbytes = fh.read(4 * nw)
        if len(wbytes) != 4 * nw:
            raise DataFormatError("truncated layer widths")
        widths = list(struct.unpack(f"<{nw}I", wbytes))
        if nw < 2:
            raise DataFormatError("checkpoint declares fewer than two layers")
        d = widths[-1]
        emb = widths[0] - d
        if emb < 2:
            raise DataFormatError("checkpoint widths imply a non-positive time embedding")
        model = SurrogateModel(d=d, hidden=tuple(widths[1:-1]), time_emb=emb, rng=Rng(0))
        count = model.param_count
        raw = fh.read(8 * count)
        if len(raw) != 8 * count:
            raise DataFormatError("truncated parameter payload")
        model.set_params(np.frombuffer(raw, dtype="<f8"))
        raw = fh.read(8 * count)
        if len(raw) != 8 * count:
            raise DataFormatError("truncated EMA payload")
        model.ema = model.unpack(np.frombuffer(raw, dtype="<f8"))
        lb = fh.read(4)
        if len(lb) != 4:
            raise DataFormatError("truncated config echo length")
        (blen,) = struct.unpack("<I", lb)
        blob = fh.read(blen)
        if len(blob) != blen:
            raise DataFormatError("truncated config echo")
        if fh.read(1):
            raise DataFormatError("trailing bytes after checkpoint payload")
        echo = json.loads(blob.decode("utf-8"))
    return model, echo
