"""Command-line orchestration.

Every subcommand is a pure function of (config, input files, seed): results
land in --out as CSV for tabular sweeps and JSON for nested reports, and a
re-run with the same inputs reproduces them byte for byte.  One master seed
fans out into per-purpose streams through the name hash in
:func:`flowlab.data.stream_id`, so experiments never share draws.

Exit codes: 0 success, 2 config/validation error, 3 numeric divergence,
4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as configmod
from .data import LatentDataset, Rng, generate_gmm, load_dataset, make_gmm_spec, sample_source, save_dataset, stream_id
from .errors import DataFormatError, DivergenceError, ValidationError
from .metrics import combine_triangle, endpoint_similarity, lipschitz_estimate, velocity_error, w2_bound
from .pruning import (
    allocate_quota,
    apply_selection,
    cluster_dataset,
    load_id_list,
    save_id_list,
    save_selection_csv,
    select_by_coreset,
    select_by_distance,
    select_by_kernel,
    select_by_score,
    select_random,
)
from .stitching import compute_seam_report, cost_model, finetune_coarse, save_seam_csv
from .surrogate import (
    SurrogateModel,
    TrainConfig,
    load_model,
    load_scores_csv,
    save_model,
    save_scores_csv,
    score_samples,
    train,
)
from .transport import (
    ClosedFormField,
    agreement_fraction,
    assign_states,
    deviation_lockstep,
    dominance_distribution,
    euler_states,
    time_grid,
)

PR_GRID_DEFAULT = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"
T0_GRID_DEFAULT = "0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"

#: canonical criterion tags -> (family, quota mode, rank direction)
_TAGS = {
    "random": ("random", None, None),
    "C_b": ("distance", "balanced", "nearest"),
    "C_p": ("distance", "proportional", "nearest"),
    "C_b^-1": ("distance", "balanced", "furthest"),
    "C_p^-1": ("distance", "proportional", "furthest"),
    "C_b^kappa": ("kernel", "balanced", None),
    "C_b^cs": ("coreset", "balanced", None),
    "L": ("loss", None, "highest"),
    "L^-1": ("loss", None, "lowest"),
    "G": ("grad", None, "highest"),
    "G^-1": ("grad", None, "lowest"),
}
_FAMILIES = ("random", "distance", "kernel", "coreset", "loss", "grad")


def _rng(cfg: dict, purpose: str) -> Rng:
    return Rng(cfg["seed"], stream_id(purpose))


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ValidationError(f"expected a comma-separated float list, got {text!r}") from exc


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in row) + "\n")
    print(f"wrote {path}")


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {path}")


def _resolve_criterion(args) -> tuple[str, str, str | None]:
    """Accepts canonical tags (C_b, L^-1, ...) or family names qualified by
    --mode/--direction/--invert.  Returns (family, mode, direction)."""
    name = args.criterion
    mode = args.mode
    if name in _TAGS:
        family, tag_mode, direction = _TAGS[name]
        if tag_mode is not None:
            mode = tag_mode
        if family in ("loss", "grad") and args.invert:
            direction = "lowest"
        return family, mode, direction
    if name not in _FAMILIES:
        known = ", ".join(sorted(set(_TAGS) | set(_FAMILIES)))
        raise ValidationError(f"unknown criterion {name!r}; choose one of: {known}")
    if name in ("loss", "grad"):
        return name, mode, "lowest" if args.invert else "highest"
    if name == "distance":
        return name, mode, "furthest" if args.invert else args.direction
    return name, mode, None


def _run_selection(ds: LatentDataset, cfg: dict, args, rng: Rng):
    family, mode, direction = _resolve_criterion(args)
    pcfg = cfg["pruning"]
    pr = pcfg["pr"] if args.pr is None else args.pr
    k = pcfg["k"] if getattr(args, "k", None) is None else args.k
    global_scope = pcfg["global"] or getattr(args, "global_scope", False)
    if family == "random":
        return select_random(ds, pr, rng.child("random"))
    if family in ("loss", "grad"):
        if not getattr(args, "scores", None):
            raise ValidationError(
                f"criterion {args.criterion!r} ranks by surrogate scores; "
                "run the score subcommand first and pass its CSV via --scores"
            )
        ids, s_loss, s_grad = load_scores_csv(args.scores)
        by_id = dict(zip(ids.tolist(), (s_loss if family == "loss" else s_grad).tolist()))
        missing = [int(i) for i in ds.ids if int(i) not in by_id]
        if missing:
            raise ValidationError(f"score table lacks ids {missing[:5]}")
        scores = np.array([by_id[int(i)] for i in ds.ids])
        return select_by_score(ds, scores, pr, direction, base_tag="L" if family == "loss" else "G")
    if family in ("kernel", "coreset") and global_scope:
        if family == "kernel":
            return select_by_kernel(
                ds, None, None, rng.child("kernel"), pcfg["rff_features"], pcfg["bandwidth"],
                pr=pr, global_scope=True,
            )
        return select_by_coreset(ds, None, None, pr=pr, global_scope=True)
    model = cluster_dataset(ds, k, rng.child("kmeans"))
    quotas = allocate_quota(model, pr, mode)
    if family == "distance":
        return select_by_distance(ds, model, quotas, direction, pr=pr, mode=mode)
    if family == "kernel":
        return select_by_kernel(
            ds, model, quotas, rng.child("kernel"), pcfg["rff_features"], pcfg["bandwidth"], pr=pr
        )
    return select_by_coreset(ds, model, quotas, pr=pr)


# --- subcommands ---------------------------------------------------------------


def cmd_gen_data(cfg: dict, args, out: Path) -> int:
    dcfg = cfg["data"]
    spec = make_gmm_spec(
        d=dcfg["d"], components=dcfg["components"], mean_scale=dcfg["mean_scale"],
        scale=dcfg["scale"], seed=cfg["seed"],
    )
    ds = generate_gmm(spec, dcfg["n"], rng=_rng(cfg, "gmm-samples"))
    save_dataset(ds, out / "dataset.lfsd")
    print(f"wrote {out / 'dataset.lfsd'} (n={ds.n}, d={ds.d})")
    if dcfg["val_n"]:
        val = generate_gmm(spec, dcfg["val_n"], rng=_rng(cfg, "gmm-val"))
        save_dataset(val, out / "val.lfsd")
        print(f"wrote {out / 'val.lfsd'} (n={val.n}, d={val.d})")
    _write_json(out / "gen-data.config.json", cfg)
    return 0


def cmd_prune(cfg: dict, args, out: Path) -> int:
    ds = load_dataset(args.data)
    sel = _run_selection(ds, cfg, args, _rng(cfg, "prune"))
    save_selection_csv(sel, ds, out / "selection.csv")
    save_id_list(sel, out / "kept_ids.txt")
    print(f"wrote {out / 'selection.csv'}")
    print(f"wrote {out / 'kept_ids.txt'}")
    print(f"criterion {sel.criterion} (scope {sel.scope}) kept {sel.kept} of {sel.n_total}")
    return 0


def cmd_score(cfg: dict, args, out: Path) -> int:
    ds = load_dataset(args.data)
    model, _ = load_model(args.model)
    scfg = cfg["surrogate"]
    table = score_samples(
        model, ds, M=scfg["score_m"], T=scfg["score_t"], rng=_rng(cfg, "score"),
        normalizer=scfg["normalizer"], grad_scope=scfg["grad_scope"],
    )
    save_scores_csv(table, out / "scores.csv")
    print(f"wrote {out / 'scores.csv'}")
    return 0


def cmd_train(cfg: dict, args, out: Path) -> int:
    ds = load_dataset(args.data)
    scfg = cfg["surrogate"]
    model = SurrogateModel(
        d=ds.d, hidden=tuple(scfg["hidden"]), time_emb=scfg["time_emb"],
        rng=_rng(cfg, "surrogate-init"),
    )
    tc = TrainConfig(
        batch_size=scfg["batch_size"],
        steps=scfg["steps"] if args.steps is None else args.steps,
        lr=scfg["lr"], momentum=scfg["momentum"], ema_decay=scfg["ema_decay"],
        t_mode=scfg["t_mode"], t_grid_k=scfg["t_grid_k"], coupling=scfg["coupling"],
    )
    model, losses = train(model, ds, tc, _rng(cfg, "surrogate-train"))
    save_model(model, out / "model.lfsm", config_echo={"train": scfg, "seed": cfg["seed"]})
    print(f"wrote {out / 'model.lfsm'} ({model.param_count} parameters)")
    _write_csv(out / "loss_curve.csv", ["step", "loss"], [[i, float(v)] for i, v in enumerate(losses)])
    return 0


def cmd_stability(cfg: dict, args, out: Path) -> int:
    ds = load_dataset(args.data)
    tcfg = cfg["transport"]
    t_max = tcfg["t_max"]
    steps = tcfg["steps"] if args.steps is None else args.steps
    field_full = ClosedFormField(ds, t_max)
    sources = sample_source(_rng(cfg, "stability-sources"), tcfg["sources"], ds.d)
    grid = time_grid(0.0, t_max, steps)

    end_full = euler_states(field_full, sources, grid)
    assign_full = assign_states(field_full, end_full, t_max)
    base_dev, _, _ = deviation_lockstep(
        field_full, sources, field_full, np.roll(sources, -1, axis=0), grid
    )
    baseline_mean = float(base_dev.mean())

    agree_rows, dev_rows, sim_rows = [], [], []
    for pr in _floats(args.pr_grid):
        args.pr = pr
        sel = _run_selection(ds, cfg, args, _rng(cfg, f"stability-prune-{pr:g}"))
        field_pr = ClosedFormField(apply_selection(ds, sel), t_max)
        dev, _, end_pr = deviation_lockstep(field_full, sources, field_pr, sources, grid)
        assign_pr = assign_states(field_pr, end_pr, t_max)
        frac, count = agreement_fraction(assign_full, assign_pr, sel.kept_ids)
        kept = set(int(i) for i in sel.kept_ids)
        mask = np.array([a.assigned_id in kept for a in assign_full])
        dev_c = dev[mask] if mask.any() else dev
        sim = endpoint_similarity(end_full, end_pr, agreement_rate=frac)
        agree_rows.append([float(pr), float(frac), count, sel.kept])
        dev_rows.append([float(pr), float(np.median(dev_c)), float(np.quantile(dev_c, 0.95)), baseline_mean])
        sim_rows.append([float(pr), sim.matched_mean, sim.matched_std, sim.baseline_mean, sim.baseline_std])
    _write_csv(out / "stability_agreement.csv", ["pr", "unchanged_fraction", "conditioned_sources", "kept"], agree_rows)
    _write_csv(out / "deviation.csv", ["pr", "median", "p95", "baseline_mean"], dev_rows)
    _write_csv(out / "similarity.csv", ["pr", "matched_mean", "matched_std", "baseline_mean", "baseline_std"], sim_rows)

    dom = dominance_distribution(field_full, tcfg["dominance_probes"], _rng(cfg, "dominance"))
    _write_csv(
        out / "dominance.csv",
        ["sample_id", "dominance_freq", "cum_mass", "lambda_mass"],
        [
            [int(dom.sample_ids[i]), float(dom.freq[i]), float(dom.cum_mass[i]), float(dom.lambda_mass[i])]
            for i in range(dom.freq.size)
        ],
    )
    return 0


def _clone_surrogate(model: SurrogateModel) -> SurrogateModel:
    twin = SurrogateModel(d=model.d, hidden=tuple(model.widths[1:-1]), time_emb=model.time_emb, rng=Rng(0))
    twin.set_params(model.pack())
    twin.ema = [(w.copy(), b.copy()) for w, b in model.ema]
    return twin


def cmd_c2f(cfg: dict, args, out: Path) -> int:
    ds = load_dataset(args.data)
    ccfg = cfg["c2f"]
    t_max = cfg["transport"]["t_max"]
    fine = ClosedFormField(ds, t_max)
    coarse_model = None
    if args.selection:
        coarse = ClosedFormField(ds.subset_by_ids(load_id_list(args.selection)), t_max)
    elif args.drop_label is not None:
        coarse = ClosedFormField(ds.drop_label(args.drop_label), t_max)
    elif args.coarse_model:
        coarse_model, _ = load_model(args.coarse_model)
        coarse = coarse_model
    else:
        coarse = fine
    probes = sample_source(_rng(cfg, "c2f-probes"), ccfg["probes"], ds.d)

    rows = []
    for t0 in _floats(args.t0_grid):
        active = coarse
        if coarse_model is not None and ccfg["finetune_steps"] > 0 and 0.0 < t0 < 1.0:
            scfg = cfg["surrogate"]
            tc = TrainConfig(
                batch_size=scfg["batch_size"], steps=ccfg["finetune_steps"], lr=scfg["lr"],
                momentum=scfg["momentum"], ema_decay=scfg["ema_decay"],
            )
            active, _ = finetune_coarse(
                _clone_surrogate(coarse_model), fine, ds, t0, ccfg["lambda_v"], tc,
                _rng(cfg, f"c2f-finetune-{t0:g}"), inversion_steps=ccfg["inversion_steps"],
            )
        report = compute_seam_report(active, fine, probes, t0, ccfg["steps_coarse"], ccfg["steps_fine"])
        save_seam_csv(report, out / f"seam_t0_{t0:.2f}.csv")
        print(f"wrote {out / f'seam_t0_{t0:.2f}.csv'}")
        cost = cost_model(t0, cfg["transport"]["steps"], ccfg["cost_coarse"], ccfg["cost_fine"])
        rows.append([
            float(t0),
            float(np.median(report.seam_gap)),
            float(np.median(report.endpoint_dev)),
            cost.stitched_cost,
            cost.fine_only_cost,
            cost.speedup,
        ])
    _write_csv(
        out / "c2f_sweep.csv",
        ["t0", "seam_gap_median", "endpoint_dev_median", "stitched_cost", "fine_only_cost", "speedup"],
        rows,
    )
    return 0


def _bound_field(cfg: dict, reference: ClosedFormField, ds: LatentDataset, selection, model_path):
    if selection and model_path:
        raise ValidationError("pass either a selection or a model for a bound field, not both")
    if selection:
        return ClosedFormField(ds.subset_by_ids(load_id_list(selection)), reference.t_max), f"selection:{selection}"
    if model_path:
        model, _ = load_model(model_path)
        return model, f"model:{model_path}"
    return reference, "reference"


def _one_bound(cfg: dict, field, reference: ClosedFormField, ds_val: LatentDataset, rng: Rng) -> dict:
    mcfg = cfg["metrics"]
    t_hi = min(0.95, field.t_limit, reference.t_max)
    grid = np.linspace(0.05, t_hi, mcfg["grid_points"])
    g = rng.child("lip-states").generator
    lips = np.empty(grid.size)
    converged = True
    for i, t in enumerate(grid):
        x0 = g.standard_normal((mcfg["probes"], ds_val.d))
        x1 = ds_val.data[g.integers(0, ds_val.n, size=mcfg["probes"])]
        xt = (1.0 - t) * x0 + t * x1
        est = lipschitz_estimate(field, xt, float(t), iters=mcfg["power_iters"], rng=rng.child(f"pw-{i}"))
        lips[i] = est.value
        converged = converged and est.converged
    span = float(grid[-1] - grid[0])
    exp_factor = float(np.exp(np.trapezoid(lips, grid) / span))
    eps, sq = velocity_error(field, reference, ds_val, grid, mcfg["probes_per_t"], rng.child("eps"))
    report = w2_bound(exp_factor, eps, t_grid=grid, lipschitz_samples=lips, sq_error_samples=sq)
    payload = report.to_json()
    payload["power_iteration_converged"] = bool(converged)
    return payload


def cmd_bound(cfg: dict, args, out: Path) -> int:
    ds = load_dataset(args.data)
    ds_val = load_dataset(args.val)
    reference = ClosedFormField(ds, cfg["transport"]["t_max"])
    field, tag = _bound_field(cfg, reference, ds, args.selection, args.model)
    payload = _one_bound(cfg, field, reference, ds_val, _rng(cfg, "bound"))
    payload["field"] = tag
    if args.selection2 or args.model2:
        field2, tag2 = _bound_field(cfg, reference, ds, args.selection2, args.model2)
        second = _one_bound(cfg, field2, reference, ds_val, _rng(cfg, "bound-2"))
        second["field"] = tag2
        payload = {
            "first": payload,
            "second": second,
            "triangle": combine_triangle(payload["bound"], second["bound"]),
        }
    _write_json(out / "bound.json", payload)
    return 0


def cmd_report(cfg: dict, args, out: Path) -> int:
    from .reporting import render_report

    for path in render_report(out):
        print(f"wrote {path}")
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="flowlab",
        description="Closed-form flow transport: stability, pruning, stitching, bounds.",
    )
    p.add_argument("--config", default=None, help="JSON config file (defaults documented in docs/defaults.md)")
    p.add_argument("--seed", type=int, default=None, help="master seed override (default: config value 0)")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread cap (default: library default)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="generate the synthetic mixture dataset")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("prune", help="run a selection criterion over a dataset")
    sp.add_argument("--data", required=True, help="dataset file")
    sp.add_argument("--criterion", default="random",
                    help="tag (C_b, C_p^-1, C_b^kappa, C_b^cs, L, G, ...) or family "
                         "(random, distance, kernel, coreset, loss, grad) (default: random)")
    sp.add_argument("--pr", type=float, default=None, help="pruning fraction (default: config value)")
    sp.add_argument("--k", type=int, default=None, help="cluster count (default: config value)")
    sp.add_argument("--mode", choices=("balanced", "proportional"), default="balanced",
                    help="quota allocation (default: balanced)")
    sp.add_argument("--direction", choices=("nearest", "furthest"), default="nearest",
                    help="distance-rule end (default: nearest)")
    sp.add_argument("--invert", action="store_true", help="flip the rule (furthest / lowest scores)")
    sp.add_argument("--global", dest="global_scope", action="store_true",
                    help="kernel/coreset over the whole dataset, no clusters")
    sp.add_argument("--scores", default=None, help="score CSV from the score subcommand")
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("score", help="per-sample loss/gradient scores from a trained surrogate")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True, help="surrogate checkpoint")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("train", help="train the surrogate velocity network")
    sp.add_argument("--data", required=True)
    sp.add_argument("--steps", type=int, default=None, help="training steps (default: config value)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("stability", help="assignment/deviation/similarity sweep over pruning fractions")
    sp.add_argument("--data", required=True)
    sp.add_argument("--pr-grid", default=PR_GRID_DEFAULT, help=f"comma list (default: {PR_GRID_DEFAULT})")
    sp.add_argument("--criterion", default="random", help="selection criterion (default: random)")
    sp.add_argument("--pr", type=float, default=None, help=argparse.SUPPRESS)
    sp.add_argument("--k", type=int, default=None, help="cluster count (default: config value)")
    sp.add_argument("--mode", choices=("balanced", "proportional"), default="balanced",
                    help="quota allocation (default: balanced)")
    sp.add_argument("--direction", choices=("nearest", "furthest"), default="nearest",
                    help="distance-rule end (default: nearest)")
    sp.add_argument("--invert", action="store_true", help="flip the rule")
    sp.add_argument("--global", dest="global_scope", action="store_true", help="dataset-wide kernel/coreset")
    sp.add_argument("--scores", default=None, help="score CSV for loss/grad criteria")
    sp.add_argument("--steps", type=int, default=None, help="Euler steps (default: config value)")
    sp.set_defaults(func=cmd_stability)

    sp = sub.add_parser("c2f", help="stitched coarse-to-fine sweep over split times")
    sp.add_argument("--data", required=True)
    sp.add_argument("--t0-grid", default=T0_GRID_DEFAULT, help=f"comma list (default: {T0_GRID_DEFAULT})")
    sp.add_argument("--selection", default=None, help="kept-id list defining a pruned closed-form coarse field")
    sp.add_argument("--drop-label", type=int, default=None, help="coarse field missing one component label")
    sp.add_argument("--coarse-model", default=None, help="surrogate checkpoint as the coarse field")
    sp.set_defaults(func=cmd_c2f)

    sp = sub.add_parser("bound", help="transport error bound for a field against the exact one")
    sp.add_argument("--data", required=True, help="training dataset (defines the exact field)")
    sp.add_argument("--val", required=True, help="validation dataset (disjoint rows)")
    sp.add_argument("--selection", default=None, help="kept-id list: bound a pruned closed-form field")
    sp.add_argument("--model", default=None, help="surrogate checkpoint: bound a learned field")
    sp.add_argument("--selection2", default=None, help="second field for the pairwise triangle bound")
    sp.add_argument("--model2", default=None, help="second field for the pairwise triangle bound")
    sp.set_defaults(func=cmd_bound)

    sp = sub.add_parser("report", help="aggregate CSV/JSON results in --out into figures and a summary")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = configmod.load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.threads is not None:
            cfg["threads"] = args.threads
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if cfg["threads"]:
            with threadpool_limits(limits=int(cfg["threads"])):
                return int(args.func(cfg, args, out))
        return int(args.func(cfg, args, out))
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        where = f" (step {exc.step})" if exc.step is not None else ""
        print(f"diverged: {exc}{where}", file=sys.stderr)
        return 3
    except (DataFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
