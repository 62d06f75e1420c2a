"""Batch command-line pipeline: sample, train, predict, evaluate, bench.

Every command is deterministic given its full flag set (seeds included),
writes output files atomically, and exits 0 on success, 2 on usage or
validation problems, 1 on runtime failures. ``--json-errors`` switches
stderr diagnostics to one-line JSON. ``--config FILE`` supplies defaults
from a flat JSON object keyed by flag name (underscores for dashes);
explicit flags win over the config file, which wins over built-ins, and
the effective settings are echoed into every report.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._io import FORMAT_VERSION, atomic_write_text, dump_json, fmt_float, read_json
from .chained import (
    CgpFitConfig,
    cgp_fit,
    cgp_predict_moments,
    cgp_predict_samples,
    load_cgp,
    save_cgp,
)
from .data import fit_transforms, load_csv, write_csv, zscore_filter
from .errors import DataError, ExpressionError, FormatError, ShapeError
from .gpr import GprFitConfig, gpr_fit, gpr_nll, gpr_predict, load_gpr, save_gpr
from .metrics import (
    EmpiricalDistribution,
    normalized_wasserstein,
    point_metrics,
    wasserstein1,
)
from .synthbench import (
    ReplicationStudy,
    derive_seed,
    generate_dataset,
    load_scenario,
    replication_reference,
    shipped_scenario_ids,
)

USAGE_ERRORS = (
    DataError, ShapeError, ExpressionError, FormatError, ValueError,
    FileNotFoundError,
)


# =========================
# Small helpers
# =========================

def _meta_path(path) -> Path:
    return Path(path).with_suffix(".meta.json")


def _config_echo(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys if hasattr(args, k)}


def _emit_error(json_errors: bool, exc: BaseException) -> None:
    if json_errors:
        doc = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(doc), file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)


def _load_model_any(path):
    """Model file -> ("gpr"|"hgpr", model), dispatching on the kind field."""
    doc = read_json(path)
    kind = doc.get("kind")
    if kind == "gpr":
        return "gpr", load_gpr(path)
    if kind == "cgp":
        return "hgpr", load_cgp(path)
    raise FormatError(f"{path}: unrecognized model kind {kind!r}")


# =========================
# Slice grammar
# =========================

def _parse_slice(text: str):
    """Split 'u=6..22 step 4; Hs=1; default-case' into parts.

    Returns (fixed values, sweeps as (name, values) in clause order,
    whether default-case completion was requested).
    """
    fixed: dict[str, float] = {}
    sweeps: list[tuple[str, np.ndarray]] = []
    use_default = False
    for raw in text.split(";"):
        part = raw.strip()
        if not part:
            continue
        if part == "default-case":
            use_default = True
            continue
        if "=" not in part:
            raise DataError(f"cannot parse slice clause {part!r}")
        name, rhs = part.split("=", 1)
        name = name.strip()
        rhs = rhs.strip()
        if ".." in rhs:
            span, _, step_part = rhs.partition("step")
            lo_s, sep, hi_s = span.partition("..")
            if not sep or not step_part.strip():
                raise DataError(
                    f"slice sweep {part!r} must look like 'name=a..b step c'"
                )
            try:
                lo = float(lo_s)
                hi = float(hi_s)
                step = float(step_part)
            except ValueError:
                raise DataError(f"non-numeric value in slice sweep {part!r}") from None
            if step <= 0:
                raise DataError(f"slice sweep step must be positive in {part!r}")
            count = int(np.floor((hi - lo) / step + 1e-9)) + 1
            if count < 1:
                raise DataError(f"slice sweep {part!r} is empty")
            sweeps.append((name, lo + step * np.arange(count)))
        else:
            try:
                fixed[name] = float(rhs)
            except ValueError:
                raise DataError(f"non-numeric value in slice clause {part!r}") from None
    return fixed, sweeps, use_default


def _expand_slice(text: str, feature_names, scenario=None) -> np.ndarray:
    """Expand a slice spec into query rows ordered like ``feature_names``."""
    feature_names = tuple(feature_names)
    fixed, sweeps, use_default = _parse_slice(text)
    known = set(feature_names)
    for name in (*fixed, *(n for n, _ in sweeps)):
        if name not in known:
            raise DataError(f"slice names unknown feature {name!r} (have {feature_names})")
    if use_default:
        if scenario is None:
            raise DataError("slice uses default-case; pass --scenario to resolve it")
        if tuple(scenario.feature_names) != feature_names:
            raise DataError(
                f"scenario features {scenario.feature_names} do not match "
                f"{feature_names}"
            )
    rows = []
    grids = [vals for _, vals in sweeps] or [np.zeros(1)]
    for combo in itertools.product(*grids):
        assigned = dict(fixed)
        if sweeps:
            for (name, _), value in zip(sweeps, combo):
                assigned[name] = float(value)
        if use_default:
            env = scenario.resolve_default_case(assigned)
        else:
            missing = known - set(assigned)
            if missing:
                raise DataError(
                    f"slice leaves features {sorted(missing)} unassigned and "
                    "default-case was not requested"
                )
            env = assigned
        rows.append([env[n] for n in feature_names])
    return np.asarray(rows, dtype=float)


# =========================
# sample
# =========================

SAMPLE_KEYS = ("scenario", "n", "design", "seed", "replicate", "at_slice")


def cmd_sample(args) -> int:
    scenario = load_scenario(args.scenario)
    out = Path(args.out)

    if args.replicate is not None:
        if args.at_slice is None:
            raise DataError("--replicate needs --at-slice to define the conditions")
        conditions = _expand_slice(args.at_slice, scenario.feature_names, scenario)
        study = replication_reference(scenario, conditions, args.replicate, args.seed)
        doc = study.to_dict()
        doc["master_seed"] = args.seed
        doc["config"] = _config_echo(args, SAMPLE_KEYS)
        dump_json(doc, out)
        print(
            f"wrote replication study ({study.num_conditions} conditions x "
            f"{args.replicate} draws) to {out}"
        )
        return 0

    if args.n is None:
        raise DataError("--n is required (or use --replicate)")
    if args.n < 1:
        raise ValueError(f"--n must be >= 1, got {args.n}")
    d = generate_dataset(scenario, args.n, args.design, args.seed)
    write_csv(d, out)
    dump_json(
        {
            "format_version": FORMAT_VERSION,
            "kind": "dataset_meta",
            "scenario": scenario.id,
            "design": args.design,
            "master_seed": args.seed,
            "n": args.n,
            "feature_names": list(d.feature_names),
            "target_name": d.target_name,
            "target_positive": scenario.target_positive,
            "config": _config_echo(args, SAMPLE_KEYS),
        },
        _meta_path(out),
    )
    print(f"wrote {d.n} rows to {out}")
    return 0


# =========================
# train
# =========================

TRAIN_KEYS = (
    "data", "model", "target", "target_positive", "zscore", "n_train",
    "inducing", "seed", "max_iters", "learning_rate", "minibatch",
    "learn_z", "noise_param", "restarts",
)


def _train_core(d_raw, model_kind, *, target_positive, zscore, n_train,
                inducing, seed, max_iters, learning_rate, minibatch,
                learn_z, noise_param, restarts):
    """Pipeline + fit shared by ``train`` and ``bench``.

    Returns (model, report detail dict, transformed DataSet).
    """
    if model_kind not in ("gpr", "hgpr"):
        raise ValueError(f"model must be 'gpr' or 'hgpr', got {model_kind!r}")
    cap = n_train if n_train is not None else d_raw.n
    if model_kind == "hgpr" and inducing is not None and inducing > cap:
        raise ValueError(
            f"--inducing {inducing} exceeds the training size {cap}"
        )

    if zscore and zscore > 0 and d_raw.n >= 3:
        kept, removed = zscore_filter(d_raw, zscore)
    else:
        kept, removed = d_raw, np.empty(0, dtype=int)
    if n_train is not None:
        if n_train < 2:
            raise ValueError(f"--n-train must be >= 2, got {n_train}")
        if n_train > kept.n:
            raise ValueError(
                f"--n-train {n_train} exceeds the {kept.n} rows available "
                "after filtering"
            )
        kept = kept.take(np.arange(n_train))
    transformed, _ = fit_transforms(kept, target_positive=target_positive)

    if model_kind == "gpr":
        cfg = GprFitConfig(
            restarts=restarts,
            max_iters=max_iters if max_iters is not None else 150,
            seed=seed,
        )
        model = gpr_fit(transformed, cfg)
        detail = {
            "final_nll": gpr_nll(
                model.params, model.noise_variance, model.mean_const,
                transformed.features, transformed.target,
            ),
            "kernel": {
                "lengthscales": model.params.lengthscales.tolist(),
                "signal_variance": model.params.signal_variance,
            },
            "noise_variance": model.noise_variance,
            "mean_const": model.mean_const,
        }
    else:
        num_inducing = inducing if inducing is not None else min(100, transformed.n)
        cfg = CgpFitConfig(
            num_inducing=num_inducing,
            max_iters=max_iters if max_iters is not None else 400,
            learning_rate=learning_rate,
            minibatch_size=minibatch,
            learn_Z=learn_z,
            seed=seed,
            noise_parameterization=noise_param,
        )
        model, trace = cgp_fit(transformed, cfg)
        best = max(trace, key=lambda r: r.elbo)
        detail = {
            "final_elbo": best.elbo,
            "final_report": best.to_dict(),
            "elbo_trace": [r.elbo for r in trace],
            "num_inducing": num_inducing,
        }
    detail["outliers_removed"] = int(removed.size)
    detail["n_train"] = transformed.n
    return model, detail, transformed


def cmd_train(args) -> int:
    data_path = Path(args.data)
    d_raw = load_csv(data_path, args.target)

    scenario_id = None
    if args.target_positive == "auto":
        target_positive = False
        meta_p = _meta_path(data_path)
        if meta_p.exists():
            meta = read_json(meta_p)
            scenario_id = meta.get("scenario")
            target_positive = bool(meta.get("target_positive", False))
    else:
        target_positive = args.target_positive == "true"

    t0 = time.perf_counter()
    model, detail, _ = _train_core(
        d_raw, args.model,
        target_positive=target_positive, zscore=args.zscore,
        n_train=args.n_train, inducing=args.inducing, seed=args.seed,
        max_iters=args.max_iters, learning_rate=args.learning_rate,
        minibatch=args.minibatch, learn_z=args.learn_z,
        noise_param=args.noise_param, restarts=args.restarts,
    )
    wall = time.perf_counter() - t0

    out = Path(args.out)
    if args.model == "gpr":
        save_gpr(model, out)
    else:
        save_cgp(model, out)
    report_path = Path(args.report) if args.report else out.with_suffix(".report.json")
    report = {
        "format_version": FORMAT_VERSION,
        "kind": "train_report",
        "model_kind": args.model,
        "data": str(data_path),
        "scenario": scenario_id,
        "rows_loaded": d_raw.n,
        "target_positive": target_positive,
        "wall_time_s": wall,
        "config": _config_echo(args, TRAIN_KEYS),
        **detail,
    }
    dump_json(report, report_path)
    headline = detail.get("final_elbo", detail.get("final_nll"))
    print(f"trained {args.model} on {detail['n_train']} rows "
          f"(objective {headline:.4f}) -> {out}")
    return 0


# =========================
# predict
# =========================

PREDICT_KEYS = ("model", "queries", "at_slice", "scenario", "samples", "seed")


def _gauss_moments_physical(transforms, mean_t, var_t):
    """Map Gaussian predictive moments back to physical units.

    Affine target transforms map exactly; log-transformed targets give a
    lognormal predictive whose moments are also closed-form.
    """
    if transforms is None:
        return float(mean_t), float(var_t)
    rec = transforms.target
    mu = rec.shift + rec.scale * mean_t
    s2 = rec.scale ** 2 * var_t
    if rec.takes_log:
        mean = np.exp(mu + 0.5 * s2)
        return float(mean), float((np.exp(s2) - 1.0) * mean * mean)
    return float(mu), float(s2)


def _predict_one(kind, model, x_raw, num_samples, qseed):
    """Per-query stats: physical-unit mean, variance, and draws."""
    Xs = model.scale_features(np.asarray(x_raw, dtype=float).reshape(1, -1))
    if kind == "gpr":
        mean_t, var_t = gpr_predict(model, Xs, include_noise=True)
        mean, var = _gauss_moments_physical(model.transforms, mean_t[0], var_t[0])
        samples = np.empty(0)
        if num_samples > 0:
            rng = np.random.default_rng(qseed)
            t = mean_t[0] + np.sqrt(var_t[0]) * rng.standard_normal(num_samples)
            samples = model.transforms.invert_target(t) if model.transforms else t
        return {"mean": mean, "variance": var, "samples": samples}

    log_target = model.transforms is not None and model.transforms.target.takes_log
    draw_count = num_samples if num_samples > 0 else (5000 if log_target else 0)
    samples = np.empty(0)
    if draw_count > 0:
        samples = cgp_predict_samples(model, Xs[0], draw_count, qseed)
    if log_target:
        # no closed-form moments through the exp; summarize the draws
        mean, var = float(np.mean(samples)), float(np.var(samples))
    else:
        mean_t, var_t = cgp_predict_moments(model, Xs)
        mean, var = _gauss_moments_physical(model.transforms, mean_t[0], var_t[0])
    return {"mean": mean, "variance": var, "samples": samples[:num_samples]}


def _write_predictions_csv(path, feature_names, queries, stats) -> None:
    lines = [",".join(["query_index", *feature_names, "statistic", "value"])]
    for qi, st in enumerate(stats):
        feats = [fmt_float(v) for v in queries[qi]]
        for name, value in (("mean", st["mean"]), ("variance", st["variance"])):
            lines.append(",".join([str(qi), *feats, name, fmt_float(value)]))
        for value in st["samples"]:
            lines.append(",".join([str(qi), *feats, "sample", fmt_float(value)]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _read_query_csv(path, feature_names) -> np.ndarray:
    """Feature columns (by name) from a CSV; extra columns are ignored."""
    import csv as _csv

    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    meta_p = _meta_path(path)
    if meta_p.exists():
        meta = read_json(meta_p)
        if meta.get("format_version") != FORMAT_VERSION:
            raise FormatError(
                f"{meta_p}: format_version {meta.get('format_version')!r} does "
                f"not match this build ({FORMAT_VERSION})"
            )
    with open(path, encoding="utf-8", newline="") as fh:
        reader = _csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        missing = [n for n in feature_names if n not in header]
        if missing:
            raise DataError(f"{path}: missing feature columns {missing}")
        cols = [header.index(n) for n in feature_names]
        rows = []
        for data_row, raw in enumerate(reader, start=1):
            if not raw:
                continue
            try:
                rows.append([float(raw[c]) for c in cols])
            except (ValueError, IndexError):
                raise DataError(
                    f"{path}: row {data_row} is not a valid query row", row=data_row
                ) from None
    if not rows:
        raise DataError(f"{path}: no query rows")
    return np.asarray(rows, dtype=float)


def cmd_predict(args) -> int:
    kind, model = _load_model_any(args.model)
    if (args.queries is None) == (args.at_slice is None):
        raise DataError("exactly one of --queries or --at-slice is required")
    if args.at_slice is not None:
        scenario = load_scenario(args.scenario) if args.scenario else None
        queries = _expand_slice(args.at_slice, model.feature_names, scenario)
    else:
        queries = _read_query_csv(args.queries, model.feature_names)

    num_samples = args.samples
    if num_samples is None:
        num_samples = 5000 if kind == "hgpr" else 0
    if num_samples < 0:
        raise ValueError(f"--samples must be >= 0, got {num_samples}")

    stats = [
        _predict_one(kind, model, queries[qi], num_samples, derive_seed(args.seed, qi))
        for qi in range(queries.shape[0])
    ]
    out = Path(args.out)
    _write_predictions_csv(out, model.feature_names, queries, stats)
    dump_json(
        {
            "format_version": FORMAT_VERSION,
            "kind": "predictions_meta",
            "model": str(args.model),
            "model_kind": kind,
            "seed": args.seed,
            "samples": num_samples,
            "num_queries": int(queries.shape[0]),
            "feature_names": list(model.feature_names),
            "slice": args.at_slice,
            "queries_file": args.queries,
            "config": _config_echo(args, PREDICT_KEYS),
        },
        _meta_path(out),
    )
    print(f"wrote predictions for {queries.shape[0]} queries to {out}")
    return 0


# =========================
# evaluate
# =========================

EVALUATE_KEYS = ("reference", "predictions", "labels")


def _read_predictions(path, feature_names):
    """Predictions CSV back into per-query stat dicts (in query order)."""
    import csv as _csv

    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    per_query: dict[int, dict] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = _csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        expected = ["query_index", *feature_names, "statistic", "value"]
        if header != expected:
            raise FormatError(f"{path}: header {header} != expected {expected}")
        m = len(feature_names)
        for raw in reader:
            if not raw:
                continue
            qi = int(raw[0])
            entry = per_query.setdefault(
                qi,
                {"features": np.asarray([float(v) for v in raw[1:1 + m]]),
                 "mean": None, "variance": None, "samples": []},
            )
            stat, value = raw[1 + m], float(raw[2 + m])
            if stat == "sample":
                entry["samples"].append(value)
            elif stat in ("mean", "variance"):
                entry[stat] = value
            else:
                raise FormatError(f"{path}: unknown statistic {stat!r}")
    out = []
    for qi in sorted(per_query):
        entry = per_query[qi]
        entry["samples"] = np.asarray(entry["samples"])
        if entry["mean"] is None or entry["variance"] is None:
            raise FormatError(f"{path}: query {qi} is missing mean/variance rows")
        out.append(entry)
    return out


def _match_condition(condition, stats, label):
    for qi, entry in enumerate(stats):
        if np.allclose(entry["features"], condition, rtol=1e-9, atol=1e-12):
            return qi
    raise DataError(
        f"condition {condition.tolist()} has no matching query in the "
        f"predictions for {label!r}"
    )


def _evaluate_core(study: ReplicationStudy, labeled_stats):
    """Per-condition distribution metrics for each labeled prediction set."""
    feature_names = study.feature_names or tuple(
        f"x{j}" for j in range(study.conditions.shape[1])
    )
    per_condition = []
    means = {label: [] for label, _ in labeled_stats}
    d_w1s = {label: [] for label, _ in labeled_stats}
    for ci in range(study.num_conditions):
        ref = study.distributions[ci]
        cond = study.conditions[ci]
        entry = {
            "condition_index": ci,
            "condition": {n: float(v) for n, v in zip(feature_names, cond)},
            "reference_mean": ref.mean(),
            "reference_std": ref.std(),
            "results": {},
        }
        for label, stats in labeled_stats:
            qi = _match_condition(cond, stats, label)
            st = stats[qi]
            if st["samples"].size == 0:
                raise DataError(
                    f"predictions for {label!r} carry no sample rows; rerun "
                    "predict with --samples"
                )
            pred = EmpiricalDistribution(st["samples"])
            entry["results"][label] = {
                "d_w1": normalized_wasserstein(ref, pred),
                "w1": wasserstein1(ref, pred),
                "mean": st["mean"],
                "variance": st["variance"],
                "mean_abs_error": abs(st["mean"] - ref.mean()),
            }
            means[label].append(st["mean"])
            d_w1s[label].append(entry["results"][label]["d_w1"])
        per_condition.append(entry)

    ref_means = [c["reference_mean"] for c in per_condition]
    summary = {}
    for label, _ in labeled_stats:
        summary[label] = {
            "mean_d_w1": float(np.mean(d_w1s[label])),
            "max_d_w1": float(np.max(d_w1s[label])),
            "mean_vs_reference": point_metrics(ref_means, means[label]).to_dict(),
        }
    return per_condition, summary


def _evaluation_csv(per_condition) -> str:
    lines = ["condition_index,model,metric,value"]
    for entry in per_condition:
        ci = entry["condition_index"]
        lines.append(f"{ci},reference,mean,{fmt_float(entry['reference_mean'])}")
        lines.append(f"{ci},reference,std,{fmt_float(entry['reference_std'])}")
        for label in entry["results"]:
            for metric in ("d_w1", "w1", "mean", "variance"):
                value = entry["results"][label][metric]
                lines.append(f"{ci},{label},{metric},{fmt_float(value)}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(args) -> int:
    study = ReplicationStudy.load(args.reference)
    if args.labels and len(args.labels) != len(args.predictions):
        raise DataError(
            f"{len(args.labels)} labels for {len(args.predictions)} prediction files"
        )
    feature_names = study.feature_names or tuple(
        f"x{j}" for j in range(study.conditions.shape[1])
    )
    labeled = []
    used = set()
    for i, ppath in enumerate(args.predictions):
        if args.labels:
            label = args.labels[i]
        else:
            meta_p = _meta_path(Path(ppath))
            label = f"model{i}"
            if meta_p.exists():
                label = read_json(meta_p).get("model_kind", label)
        while label in used:
            label += "+"
        used.add(label)
        labeled.append((label, _read_predictions(ppath, feature_names)))

    t0 = time.perf_counter()
    per_condition, summary = _evaluate_core(study, labeled)
    report = {
        "format_version": FORMAT_VERSION,
        "kind": "evaluation",
        "reference": {
            "path": str(args.reference),
            "scenario": study.scenario_id,
            "replications": study.replications,
            "num_conditions": study.num_conditions,
        },
        "models": [label for label, _ in labeled],
        "per_condition": per_condition,
        "summary": summary,
        "config": _config_echo(args, EVALUATE_KEYS),
        "wall_time_s": time.perf_counter() - t0,
    }
    out = Path(args.out)
    dump_json(report, out)
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".csv")
    atomic_write_text(csv_path, _evaluation_csv(per_condition))
    for label, _ in labeled:
        print(f"{label}: mean d_W1 = {summary[label]['mean_d_w1']:.4f}")
    return 0


# =========================
# bench
# =========================

BENCH_KEYS = ("scenario", "n", "inducing", "replications", "samples", "seed", "outdir")


def cmd_bench(args) -> int:
    scenario = load_scenario(args.scenario)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()

    d_raw = generate_dataset(scenario, args.n, "sobol", args.seed)
    write_csv(d_raw, outdir / "data.csv")

    timings = {}
    models = {}
    for kind in ("gpr", "hgpr"):
        t0 = time.perf_counter()
        model, detail, _ = _train_core(
            d_raw, kind,
            target_positive=scenario.target_positive, zscore=3.0, n_train=None,
            inducing=args.inducing, seed=args.seed, max_iters=None,
            learning_rate=1e-2, minibatch=None, learn_z=False,
            noise_param="variance", restarts=3,
        )
        timings[f"train_{kind}_s"] = time.perf_counter() - t0
        models[kind] = model
        if kind == "gpr":
            save_gpr(model, outdir / "gpr.json")
        else:
            save_cgp(model, outdir / "hgpr.json")

    # sweep the first feature across the central part of its box, fill the
    # rest from the scenario's default case
    first = scenario.feature_specs[0]
    lo, hi = first.bounds_at({})
    sweep = np.linspace(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo), 5)
    conditions = np.asarray([
        [scenario.resolve_default_case({first.name: u})[n] for n in scenario.feature_names]
        for u in sweep
    ])
    study = replication_reference(
        scenario, conditions, args.replications, derive_seed(args.seed, 101)
    )
    study.save(outdir / "reference.json")

    labeled = []
    for kind in ("gpr", "hgpr"):
        stats = [
            _predict_one(kind, models[kind], conditions[ci], args.samples,
                         derive_seed(args.seed, 200 + ci))
            for ci in range(conditions.shape[0])
        ]
        for ci, st in enumerate(stats):
            st["features"] = conditions[ci]
        labeled.append((kind, stats))
    per_condition, summary = _evaluate_core(study, labeled)

    report = {
        "format_version": FORMAT_VERSION,
        "kind": "bench_report",
        "scenario": scenario.id,
        "n": args.n,
        "inducing": args.inducing,
        "replications": args.replications,
        "samples": args.samples,
        "per_condition": per_condition,
        "summary": summary,
        "timings_s": timings,
        "wall_time_s": time.perf_counter() - t_start,
        "config": _config_echo(args, BENCH_KEYS),
    }
    dump_json(report, outdir / "bench.json")
    for kind in ("gpr", "hgpr"):
        print(f"{scenario.id} {kind}: mean d_W1 = {summary[kind]['mean_d_w1']:.4f}")
    print(f"bench artifacts in {outdir} ({report['wall_time_s']:.1f} s)")
    return 0


# =========================
# Parser and entry point
# =========================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetgp",
        description="Heteroscedastic GP surrogate pipeline for stochastic simulators.",
    )
    parser.add_argument("--version", action="version", version=f"hetgp {__version__}")
    parser.add_argument("--json-errors", action="store_true",
                        help="emit errors as one-line JSON on stderr")
    parser.add_argument("--config", metavar="FILE",
                        help="JSON file of default flag values (flags still win)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="draw a dataset or replication reference")
    p.add_argument("--scenario", required=True,
                   help=f"scenario id {shipped_scenario_ids()} or a JSON path")
    p.add_argument("--n", type=int, help="number of design points")
    p.add_argument("--design", choices=("sobol", "pseudorandom"), default="sobol")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--replicate", type=int, metavar="R",
                   help="write R repeated draws per --at-slice condition instead")
    p.add_argument("--at-slice", help="conditions for --replicate, e.g. "
                   "'u=6..22 step 4; default-case'")
    p.add_argument("-o", "--out", required=True, help="output CSV (or JSON with --replicate)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="fit a model on a dataset CSV")
    p.add_argument("--data", required=True, help="training CSV")
    p.add_argument("--model", choices=("gpr", "hgpr"), required=True)
    p.add_argument("--target", default="y", help="target column name")
    p.add_argument("--target-positive", choices=("auto", "true", "false"),
                   default="auto",
                   help="log-transform the target (auto: from the dataset sidecar)")
    p.add_argument("--zscore", type=float, default=3.0,
                   help="target outlier threshold in std devs (0 disables)")
    p.add_argument("--n-train", type=int, help="cap on training rows (after filtering)")
    p.add_argument("--inducing", type=int, help="inducing points for hgpr")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, help="optimizer iterations")
    p.add_argument("--learning-rate", type=float, default=1e-2)
    p.add_argument("--minibatch", type=int, help="minibatch size (default full batch)")
    p.add_argument("--learn-z", action="store_true", help="optimize inducing inputs")
    p.add_argument("--noise-param", choices=("variance", "stddev"), default="variance",
                   help="read g as log noise variance or log noise stddev")
    p.add_argument("--restarts", type=int, default=3, help="gpr optimizer restarts")
    p.add_argument("-o", "--out", required=True, help="model JSON path")
    p.add_argument("--report", help="report JSON path (default <out>.report.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predictive stats at query points")
    p.add_argument("--model", required=True, help="model JSON from train")
    p.add_argument("--queries", help="CSV of query points (feature columns by name)")
    p.add_argument("--at-slice", help="inline query spec, e.g. 'u=6..22 step 4; default-case'")
    p.add_argument("--scenario", help="scenario id/path (needed for default-case slices)")
    p.add_argument("--samples", type=int,
                   help="predictive draws per query (default: 5000 for hgpr, 0 for gpr)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", required=True, help="predictions CSV path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against a replication reference")
    p.add_argument("--reference", required=True, help="replication JSON from sample --replicate")
    p.add_argument("--predictions", required=True, nargs="+",
                   help="one or more predictions CSVs")
    p.add_argument("--labels", nargs="+", help="labels for the prediction files")
    p.add_argument("-o", "--out", required=True, help="evaluation report JSON")
    p.add_argument("--csv", help="evaluation CSV path (default <out>.csv)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="quick end-to-end scenario run")
    p.add_argument("--scenario", default="S1")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--inducing", type=int, default=50)
    p.add_argument("--replications", type=int, default=100)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", default="bench_out")
    p.set_defaults(func=cmd_bench)

    return parser


def _walk_parsers(parser):
    yield parser
    for action in parser._actions:  # noqa: SLF001 - argparse has no public walk
        if isinstance(action, argparse._SubParsersAction):
            for p in action.choices.values():
                yield from _walk_parsers(p)


def _own_dests(parser) -> set:
    return {
        a.dest
        for a in parser._actions  # noqa: SLF001
        if a.dest != "help" and not isinstance(a, argparse._SubParsersAction)
    }


def _apply_config(parser, doc) -> None:
    """Install config values as defaults everywhere the dest exists.

    Subparsers re-apply their own defaults over the shared namespace, so
    the values must be set on each subparser, not just the root.
    """
    known = set()
    for p in _walk_parsers(parser):
        dests = _own_dests(p)
        known |= dests
        hits = {k: v for k, v in doc.items() if k in dests}
        if hits:
            p.set_defaults(**hits)
    unknown = set(doc) - known
    if unknown:
        raise FormatError(f"unknown config keys {sorted(unknown)}")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--json-errors", action="store_true")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)

    parser = build_parser()
    if known.config:
        try:
            doc = read_json(known.config)
            if not isinstance(doc, dict):
                raise FormatError(f"{known.config}: config must be a JSON object")
            _apply_config(parser, doc)
        except USAGE_ERRORS as exc:
            _emit_error(known.json_errors, exc)
            return 2

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0

    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        _emit_error(args.json_errors, exc)
        return 2
    except Exception as exc:  # runtime failures: optimizer, I/O, bad state
        _emit_error(args.json_errors, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
