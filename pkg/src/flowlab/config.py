"""Experiment configuration: one JSON document, every key defaulted.

Unknown keys are rejected rather than ignored so a typo cannot silently
fall back to a default.  The defaults below are the single source of truth;
``defaults_markdown`` renders them for the docs, and a test keeps the
rendered table in sync.
"""

from __future__ import annotations

import copy
import json

from .errors import ValidationError

DEFAULTS: dict = {
    "seed": 0,
    "threads": 0,
    "data": {
        "n": 5000,
        "d": 4096,
        "components": 4,
        "mean_scale": 1.0,
        "scale": 1.0,
        "val_n": 500,
    },
    "transport": {
        "t_max": 0.999,
        "steps": 100,
        "sources": 1000,
        "dominance_probes": 20000,
    },
    "pruning": {
        "pr": 0.5,
        "k": 24,
        "mode": "balanced",
        "direction": "nearest",
        "rff_features": 1024,
        "bandwidth": None,
        "global": False,
    },
    "surrogate": {
        "hidden": [256, 256, 256],
        "time_emb": 32,
        "batch_size": 64,
        "steps": 2000,
        "lr": 0.01,
        "momentum": 0.9,
        "ema_decay": 0.999,
        "t_mode": "continuous",
        "t_grid_k": 21,
        "coupling": "random",
        "score_m": 2,
        "score_t": 8,
        "normalizer": "two-pass",
        "grad_scope": "full",
    },
    "c2f": {
        "t0": 0.7,
        "lambda_v": 1.0,
        "steps_coarse": 20,
        "steps_fine": 20,
        "inversion_steps": 50,
        "finetune_steps": 0,
        "cost_coarse": 33.0,
        "cost_fine": 675.0,
        "probes": 64,
    },
    "metrics": {
        "probes": 32,
        "power_iters": 50,
        "grid_points": 11,
        "probes_per_t": 256,
    },
}

DESCRIPTIONS: dict[str, str] = {
    "seed": "master seed; per-module streams are derived from it by name",
    "threads": "BLAS thread cap (0 = leave the library default)",
    "data.n": "training samples to generate",
    "data.d": "latent dimensionality",
    "data.components": "mixture components",
    "data.mean_scale": "stdev of the component-mean draw",
    "data.scale": "isotropic stdev within each component",
    "data.val_n": "validation samples (separate stream; 0 = skip)",
    "transport.t_max": "latest evaluation time for closed-form fields",
    "transport.steps": "Euler steps per unit time interval",
    "transport.sources": "source points per stability experiment",
    "transport.dominance_probes": "interpolation probes for dominance counting",
    "pruning.pr": "fraction of the dataset to remove",
    "pruning.k": "cluster count for the clustering criteria",
    "pruning.mode": "quota allocation: balanced or proportional",
    "pruning.direction": "distance rule end: nearest or furthest",
    "pruning.rff_features": "random Fourier features for the kernel rule",
    "pruning.bandwidth": "RBF bandwidth (null = per-pool median heuristic)",
    "pruning.global": "run kernel/coreset rules dataset-wide, ignoring clusters",
    "surrogate.hidden": "hidden layer widths",
    "surrogate.time_emb": "sinusoidal time-embedding width (even)",
    "surrogate.batch_size": "training minibatch size",
    "surrogate.steps": "training steps",
    "surrogate.lr": "SGD learning rate",
    "surrogate.momentum": "SGD momentum",
    "surrogate.ema_decay": "shadow-parameter decay per step",
    "surrogate.t_mode": "t sampling: continuous or grid",
    "surrogate.t_grid_k": "grid size K when t_mode=grid",
    "surrogate.coupling": "minibatch pairing: random or ot",
    "surrogate.score_m": "shared noise vectors M for scoring",
    "surrogate.score_t": "shared timesteps T for scoring",
    "surrogate.normalizer": "score normalizer: two-pass or stream",
    "surrogate.grad_scope": "gradient-score scope: full or last",
    "c2f.t0": "split time between coarse and fine",
    "c2f.lambda_v": "seam-continuity loss weight",
    "c2f.steps_coarse": "Euler steps on [0, t0]",
    "c2f.steps_fine": "Euler steps on [t0, end]",
    "c2f.inversion_steps": "Euler steps for fine-field inversion",
    "c2f.finetune_steps": "coarse fine-tuning steps (0 = skip)",
    "c2f.cost_coarse": "analytic per-step cost of the coarse field",
    "c2f.cost_fine": "analytic per-step cost of the fine field",
    "c2f.probes": "probe sources per t0 in the sweep",
    "metrics.probes": "probe states for spectral-norm estimation",
    "metrics.power_iters": "power-iteration steps per probe",
    "metrics.grid_points": "time-grid points for bound integrals",
    "metrics.probes_per_t": "Monte-Carlo probes per grid time",
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ValidationError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValidationError(f"config key {where!r} must be a section")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults deep-merged with a JSON file and programmatic overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            try:
                body = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(body, dict):
            raise ValidationError("config root must be a JSON object")
        cfg = _merge(cfg, body)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def _rows(tree: dict, prefix: str = ""):
    for key, value in tree.items():
        name = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict):
            yield from _rows(value, name)
        else:
            yield name, value


def defaults_markdown() -> str:
    """Markdown defaults table, kept in sync with DEFAULTS by a test."""
    lines = ["| key | default | meaning |", "| --- | --- | --- |"]
    for name, value in _rows(DEFAULTS):
        shown = "null" if value is None else json.dumps(value)
        lines.append(f"| `{name}` | `{shown}` | {DESCRIPTIONS[name]} |")
    return "\n".join(lines) + "\n"


if __name__ == "__main__":
    print(defaults_markdown(), end="")
