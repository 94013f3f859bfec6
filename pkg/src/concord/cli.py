"""Command-line front end.

Subcommands: ``generate``, ``evaluate``, ``stratify``, ``importance``,
``attention`` and ``compare-groups``. Parameters come from flags, then an
optional TOML file given with ``--config``, then built-in defaults. The
master seed falls back to the ``CONCORD_SEED`` environment variable.

Exit codes: 0 success, 1 error, 2 evaluation finished with failed folds.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attention import TransformerConfig, TransformerParams, attention_rollout, aggregate
from .cox import CoxParams, coefficient_importance
from .data_io import (
    CELL_TYPES,
    SyntheticSpec,
    generate_synthetic,
    load_checkpoint,
    load_report,
    read_bags,
    read_cohort,
    save_model,
    save_report,
    write_cohort,
    write_km_csv,
    write_km_svg,
    write_table,
)
from .data_io.cohort_io import read_cells
from .data_io.export import attention_svg
from .errors import ConcordError
from .evaluation import (
    DEFAULT_GRID,
    CoxFamily,
    CvReport,
    DenseFamily,
    FitCache,
    ImageFamily,
    MultimodalFamily,
    RandomFamily,
    compare_models,
    compare_to_random,
    make_fold_plan,
    run_nested_cv,
    stratify_hazard,
)
from .fusion import FusionConfig, MultimodalModel
from .survival_stats import mann_whitney_u

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("concord")

SEED_ENV = "CONCORD_SEED"
MODEL_CHOICES = ("cox", "mlp_relu", "snn_selu", "image", "multimodal", "random")
EXIT_OK, EXIT_ERROR, EXIT_DEGRADED = 0, 1, 2

# built-in defaults per subcommand; TOML and flags override these
DEFAULTS = {
    "generate": {
        "n": 100, "p_binary": 4, "p_continuous": 2, "beta": None, "image_signal": 1.0,
        "censoring": 0.3, "d_in": 512, "patches": [8, 16], "n_sites": 2,
        "weibull_shape": 1.5, "weibull_scale": 12.0, "out": None,
    },
    "evaluate": {
        "cohort": None, "models": ["cox", "image", "multimodal"], "fusion": ["late", "late"],
        "nonimage_kind": "cox", "k_outer": 5, "k_inner": 3, "l1": [0.0, 0.1], "l2": [0.01, 0.1, 1.0],
        "model_dim": 32, "layers": 2, "heads": 4, "steps": 200, "max_patches": 64, "lr": 1e-3,
        "out": None,
    },
    "stratify": {"report": None, "cohort": None, "out": None},
    "importance": {"checkpoints": None, "out": None, "level": 0.95},
    "attention": {"model": None, "bags": None, "patient": None, "out": None, "svg_dir": None},
    "compare-groups": {"cells": None, "stratification": None, "out": None},
}


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _words(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="concord", description="Multimodal survival modelling with nested cross-validation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p):
        p.add_argument("--config", type=Path, help="TOML file with parameters (flags take precedence)")
        p.add_argument("--seed", type=int, help=f"master seed (default: ${SEED_ENV} or 0)")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress to stderr")

    p = sub.add_parser("generate", help="write a synthetic cohort")
    common(p)
    p.add_argument("--n", type=int, help="number of patients")
    p.add_argument("--p-binary", type=int, help="number of binary mutation features")
    p.add_argument("--p-continuous", type=int, help="number of continuous features")
    p.add_argument("--beta", type=_floats, help="comma-separated true coefficients")
    p.add_argument("--image-signal", type=float, help="strength of the image-borne risk factor (>= 0)")
    p.add_argument("--censoring", type=float, help="target censoring fraction")
    p.add_argument("--d-in", type=int, help="patch embedding dimension")
    p.add_argument("--patches", type=_ints, help="LOW,HIGH patches per patient")
    p.add_argument("--n-sites", type=int, help="number of sites to label")
    p.add_argument("--weibull-shape", type=float)
    p.add_argument("--weibull-scale", type=float)
    p.add_argument("--out", type=Path, help="output directory")

    p = sub.add_parser("evaluate", help="nested cross-validation of one or more model families")
    common(p)
    p.add_argument("--cohort", type=Path, help="cohort directory")
    p.add_argument("--models", type=_words, help=f"comma-separated subset of {','.join(MODEL_CHOICES)}")
    p.add_argument("--fusion", type=_words, help="NONIMAGE_MODE,IMAGE_MODE, each early or late")
    p.add_argument("--nonimage-kind", choices=("cox", "mlp_relu", "snn_selu"), help="non-image branch of the multimodal model")
    p.add_argument("--k-outer", type=int)
    p.add_argument("--k-inner", type=int)
    p.add_argument("--l1", type=_floats, help="grid values for the l1 penalty")
    p.add_argument("--l2", type=_floats, help="grid values for the l2 penalty")
    p.add_argument("--model-dim", type=int, help="aggregator width")
    p.add_argument("--layers", type=int, help="aggregator depth")
    p.add_argument("--heads", type=int, help="attention heads")
    p.add_argument("--steps", type=int, help="aggregator training steps")
    p.add_argument("--max-patches", type=int, help="patches sampled per bag per training step")
    p.add_argument("--lr", type=float, help="aggregator learning rate")
    p.add_argument("--out", type=Path, help="output directory")

    p = sub.add_parser("stratify", help="quartile hazard groups, Kaplan-Meier curves and log-rank test")
    common(p)
    p.add_argument("--report", type=Path, help="report JSON written by evaluate")
    p.add_argument("--cohort", type=Path, help="cohort directory whose records override the report's follow-up")
    p.add_argument("--out", type=Path, help="output directory")

    p = sub.add_parser("importance", help="average Cox coefficients across fold checkpoints")
    common(p)
    p.add_argument("--checkpoints", type=Path, nargs="+", help="Cox or multimodal fold checkpoints")
    p.add_argument("--level", type=float, help="confidence level")
    p.add_argument("--out", type=Path, help="output directory")

    p = sub.add_parser("attention", help="per-patch attention rollout weights")
    common(p)
    p.add_argument("--model", type=Path, help="aggregator or multimodal checkpoint")
    p.add_argument("--bags", type=Path, help="bags file (ndjson)")
    p.add_argument("--patient", help="restrict to one patient id")
    p.add_argument("--out", type=Path, help="output CSV")
    p.add_argument("--svg-dir", type=Path, help="directory for per-patient SVG scatter plots")

    p = sub.add_parser("compare-groups", help="Mann-Whitney tests of cell fractions, high vs low risk")
    common(p)
    p.add_argument("--cells", type=Path, help="cell-fraction CSV")
    p.add_argument("--stratification", type=Path, help="stratification JSON written by stratify")
    p.add_argument("--out", type=Path, help="output directory")
    return parser


def resolve_config(command: str, args: argparse.Namespace, environ=os.environ) -> dict:
    """Merge defaults, the TOML file and flags into one plain dict.

    The TOML file may hold keys at top level or in a table named after the
    subcommand; the table wins over the top level.
    """
    conf = dict(DEFAULTS[command])
    seed = 0
    if environ.get(SEED_ENV, "").strip():
        try:
            seed = int(environ[SEED_ENV])
        except ValueError:
            raise ValueError(f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}") from None
    if args.config is not None:
        if not args.config.exists():
            raise FileNotFoundError(f"config file not found: {args.config}")
        with open(args.config, "rb") as fh:
            data = tomllib.load(fh)
        layers = [{k: v for k, v in data.items() if not isinstance(v, dict)}, data.get(command, {})]
        for layer in layers:
            for key, value in layer.items():
                key = key.replace("-", "_")
                if key == "seed":
                    seed = int(value)
                elif key in conf:
                    conf[key] = value
                else:
                    raise ValueError(f"{args.config}: unknown key {key!r} for {command}")
    for key in conf:
        value = getattr(args, key, None)
        if value is not None:
            conf[key] = value
    if args.seed is not None:
        seed = args.seed
    conf["seed"] = int(seed)
    conf["command"] = command
    return {k: _plain(v) for k, v in conf.items()}


def _plain(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _require(conf: dict, *keys: str) -> None:
    missing = [k for k in keys if conf.get(k) in (None, [], "")]
    if missing:
        raise ValueError(f"missing required parameter(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(conf: dict) -> int:
    _require(conf, "out")
    spec = SyntheticSpec(
        n=conf["n"], p_binary=conf["p_binary"], p_continuous=conf["p_continuous"],
        beta=None if conf["beta"] is None else tuple(conf["beta"]), weibull_shape=conf["weibull_shape"],
        weibull_scale=conf["weibull_scale"], censoring=conf["censoring"], image_signal=conf["image_signal"],
        patches=tuple(conf["patches"]), d_in=conf["d_in"], n_sites=conf["n_sites"], seed=conf["seed"],
    )
    bundle = generate_synthetic(spec)
    manifest = {"config": conf, **bundle.metadata}
    for path in write_cohort(conf["out"], bundle, manifest):
        print(path)
    return EXIT_OK


def _families(conf: dict, d_in: int) -> list:
    tconf = TransformerConfig(
        d_in=d_in, model_dim=conf["model_dim"], n_layers=conf["layers"], n_heads=conf["heads"],
        steps=conf["steps"], max_patches=conf["max_patches"], lr=conf["lr"],
    )
    modes = conf["fusion"]
    if len(modes) != 2:
        raise ValueError("--fusion takes two modes, e.g. late,late")
    cache = FitCache()
    grid = [{"l1": float(a), "l2": float(b)} for a in conf["l1"] for b in conf["l2"]]
    out = []
    for name in conf["models"]:
        if name == "cox":
            out.append((name, CoxFamily(), grid))
        elif name in ("mlp_relu", "snn_selu"):
            out.append((name, DenseFamily(name), grid))
        elif name == "image":
            out.append((name, ImageFamily(tconf, cache), [{}]))
        elif name == "multimodal":
            fc = FusionConfig(
                nonimage_mode=modes[0], image_mode=modes[1], nonimage_kind=conf["nonimage_kind"], transformer=tconf,
            )
            out.append((name, MultimodalFamily(fc, cache), grid))
        elif name == "random":
            out.append((name, RandomFamily(), [{}]))
        else:
            raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODEL_CHOICES)}")
    return out


def _summary_line(name: str, rep: dict) -> str:
    agg = rep["aggregate"]
    sd = "-" if agg["sd"] is None else f"{agg['sd']:.3f}"
    ci = "-" if agg["ci95"] is None else f"{agg['ci95'][0]:.2f}-{agg['ci95'][1]:.2f}"
    folds = sum(f["status"] == "ok" for f in rep["folds"])
    sites = " ".join(
        f"{s}={v['c_index']:.3f}" if v["c_index"] is not None else f"{s}=-" for s, v in rep.get("sites", {}).items()
    )
    return f"{name:<12} {agg['mean']:.3f} ({sd})  95% CI {ci}  folds {folds}/{len(rep['folds'])}  {sites}".rstrip()


def cmd_evaluate(conf: dict) -> int:
    _require(conf, "cohort", "out", "models")
    cohort = read_cohort(conf["cohort"])
    out = Path(conf["out"])
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    plan = make_fold_plan(cohort.records, conf["k_outer"], conf["k_inner"], conf["seed"])
    degraded = False
    reports = {}
    for name, family, grid in _families(conf, cohort.bags[0].d_in):
        log.info("evaluating %s", name)
        report = run_nested_cv(cohort, family, plan, grid, keep_models=True)
        doc = report.to_dict()
        doc["config"] = conf
        for k, model in enumerate(report.models):
            if model is not None and name != "random":
                save_model(out / "checkpoints" / f"{name}_fold{k}.json", model, {"model": name, "fold": k, "seed": conf["seed"]})
        save_report(out / f"report_{name}.json", doc)
        reports[name] = (report, doc)
        degraded |= report.degraded

    comparisons = {"config": conf, "vs_random": {}, "paired": []}
    names = list(reports)
    for name in names:
        comparisons["vs_random"][name] = compare_to_random(reports[name][0]).to_dict()
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            res = compare_models(reports[a][0], reports[b][0])
            comparisons["paired"].append({"a": a, "b": b, **res.to_dict()})
    save_report(out / "comparisons.json", comparisons)

    print(f"{'model':<12} mean c-index (sd)")
    for name in names:
        print(_summary_line(name, reports[name][1]))
    for row in comparisons["paired"]:
        print(f"{row['a']} vs {row['b']}: t = {row['statistic']:.3f}, p = {row['p_value']:.3f}")
    return EXIT_DEGRADED if degraded else EXIT_OK


def cmd_stratify(conf: dict) -> int:
    _require(conf, "report", "out")
    report = CvReport.from_dict(load_report(conf["report"]))
    records = read_cohort(conf["cohort"]).records if conf["cohort"] else None
    result = stratify_hazard(report, records)
    out = Path(conf["out"])
    out.mkdir(parents=True, exist_ok=True)
    labels = [f"Q{g}" for g in range(1, 5)]
    write_km_csv(out / "km.csv", result.curves, labels)
    write_km_svg(out / "km.svg", result.curves, labels, title=f"{report.model}: log-rank p = {result.test.p_value:.3g}")
    doc = {"config": conf, "model": report.model, **result.to_dict()}
    save_report(out / "stratification.json", doc)
    print(f"quartile sizes: {' '.join(str(s) for s in result.group_sizes)}")
    print(f"log-rank chi2 = {result.test.statistic:.3f} (df {result.test.degrees_of_freedom:g}), p = {result.test.p_value:.4g}")
    return EXIT_OK


def _cox_part(model, path) -> CoxParams:
    if isinstance(model, CoxParams):
        return model
    if isinstance(model, MultimodalModel) and isinstance(model.nonimage, CoxParams):
        return model.nonimage
    raise ValueError(f"{path}: checkpoint has no linear Cox model")


def cmd_importance(conf: dict) -> int:
    _require(conf, "checkpoints", "out")
    models = [_cox_part(load_checkpoint(p)[0], p) for p in conf["checkpoints"]]
    rows = coefficient_importance(models, conf["level"])
    out = Path(conf["out"])
    out.mkdir(parents=True, exist_ok=True)
    header = ("feature", "avg_coef", "ci_low", "ci_high", "p")
    table = [(r.feature, r.avg_coef, r.ci_low, r.ci_high, r.p) for r in rows]
    write_table(out / "importance.csv", header, table)
    save_report(out / "importance.json", {"config": conf, "rows": [dict(zip(header, t)) for t in table]})
    print(f"{'feature':<20} {'avg_coef':>9} {'ci_low':>9} {'ci_high':>9} {'p':>7}")
    for f, c, lo, hi, p in table:
        print(f"{f:<20} {c:>9.3f} {lo:>9.3f} {hi:>9.3f} {p:>7.3f}")
    return EXIT_OK


def cmd_attention(conf: dict) -> int:
    _require(conf, "model", "bags", "out")
    model = load_checkpoint(conf["model"])[0]
    if isinstance(model, MultimodalModel):
        model = model.image
    if not isinstance(model, TransformerParams):
        raise ValueError(f"{conf['model']}: checkpoint has no attention aggregator")
    bags = read_bags(conf["bags"])
    if conf["patient"] is not None:
        bags = [b for b in bags if b.patient_id == conf["patient"]]
        if not bags:
            raise ValueError(f"patient {conf['patient']!r} not found in {conf['bags']}")
    rows = []
    svg_dir = Path(conf["svg_dir"]) if conf["svg_dir"] else None
    if svg_dir is not None:
        svg_dir.mkdir(parents=True, exist_ok=True)
    for bag in bags:
        hm = attention_rollout(aggregate(model, bag).trace, bag.patch_ids, bag.coords)
        for j, (pid, w) in enumerate(zip(hm.patch_ids, hm.weights)):
            xy = ("", "") if bag.coords is None else (int(bag.coords[j, 0]), int(bag.coords[j, 1]))
            rows.append((bag.patient_id, pid, *xy, float(w)))
        if svg_dir is not None and bag.coords is not None:
            (svg_dir / f"attention_{bag.patient_id}.svg").write_text(attention_svg(hm), encoding="utf-8")
    out = Path(conf["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(out, ("patient_id", "patch_id", "x", "y", "weight"), rows)
    print(f"wrote {len(rows)} patch weights for {len(bags)} patient(s) to {out}")
    return EXIT_OK


def compare_cell_groups(ids: Sequence[str], table: np.ndarray, quartile: dict) -> list[dict]:
    """Mann-Whitney test per cell type; high risk = quartiles 3-4, low = 1-2."""
    missing = [pid for pid in quartile if pid not in set(ids)]
    if missing:
        raise ValueError(f"no cell fractions for patient(s): {', '.join(missing[:5])}")
    pos = {pid: i for i, pid in enumerate(ids)}
    high = [pos[p] for p, q in sorted(quartile.items()) if q >= 3]
    low = [pos[p] for p, q in sorted(quartile.items()) if q <= 2]
    if not high or not low:
        raise ValueError("both risk groups need at least one patient")
    rows = []
    for j, cell in enumerate(CELL_TYPES):
        a, b = table[high, j], table[low, j]
        res = mann_whitney_u(a, b)
        rows.append({
            "cell_type": cell,
            "median_high": float(np.median(a)),
            "median_low": float(np.median(b)),
            "u": res.statistic,
            "p": res.p_value,
            "n_high": len(high),
            "n_low": len(low),
        })
    return rows


def cmd_compare_groups(conf: dict) -> int:
    _require(conf, "cells", "stratification", "out")
    ids, table = read_cells(conf["cells"])
    strat = load_report(conf["stratification"])
    rows = compare_cell_groups(ids, table, strat["quartile"])
    out = Path(conf["out"])
    out.mkdir(parents=True, exist_ok=True)
    header = ("cell_type", "median_high", "median_low", "u", "p", "n_high", "n_low")
    write_table(out / "cell_groups.csv", header, [tuple(r[h] for h in header) for r in rows])
    save_report(out / "cell_groups.json", {"config": conf, "rows": rows})
    print(f"{'cell type':<16} {'high':>7} {'low':>7} {'p':>8}")
    for r in rows:
        print(f"{r['cell_type']:<16} {r['median_high']:>7.3f} {r['median_low']:>7.3f} {r['p']:>8.4f}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "stratify": cmd_stratify,
    "importance": cmd_importance,
    "attention": cmd_attention,
    "compare-groups": cmd_compare_groups,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        conf = resolve_config(args.command, args)
        return COMMANDS[args.command](conf)
    except (ConcordError, OSError, ValueError, tomllib.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
