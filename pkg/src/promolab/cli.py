"""Command line entry points for the promotion modeling pipeline.

Subcommands cover the batch workflow end to end::

    promolab generate --config cfg.yaml --seed 7 --out run/
    promolab train    --data run/dataset.csv --out run/ --variant full
    promolab predict  --model run/model.npz --data run/dataset.csv --out run/
    promolab allocate --model run/model.npz --data run/dataset.csv --budget 500 --out run/
    promolab evaluate --data run/dataset.csv --out run/ --variant full
    promolab sweep    --model run/model.npz --data run/dataset.csv --budget-grid 100,200,400 --out run/
    promolab report   --out run/ run/eval_full.json --curve full=run/curve.csv

Configuration is one YAML file with ``generation``, ``model`` and
``evaluation`` sections; every omitted value falls back to the package
default and unknown keys are rejected. ``PROMOLAB_LOG_LEVEL`` sets log
verbosity (DEBUG/INFO/WARNING/ERROR). Exit codes: 0 on success, 1 for
validation problems (bad flags, config, or input files), 2 for runtime
failures.

Outputs are written through a temp file and renamed, so an interrupted run
never leaves a truncated artifact behind.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .allocator import build_problem, solve_exact_dp, solve_lagrangian
from .datagen import (
    FeatureConfig,
    GenConfig,
    RctDataset,
    decorrelated_response_spec,
    default_response_spec,
    generate_rct,
)
from .errors import PromolabError, ValidationError
from .evaluator import (
    EvalReport,
    budget_sweep,
    curve_to_csv,
    evaluate_variant,
    load_curve_csv,
)
from .losses import LossWeights
from .model import (
    VARIANTS,
    ModelConfig,
    load_model,
    predict_matrix,
    save_model,
    train_model,
)
from .report import write_report

ENV_LOG_LEVEL = "PROMOLAB_LOG_LEVEL"

logger = logging.getLogger("promolab.cli")

_WORLDS = ("default", "decorrelated")


@dataclasses.dataclass
class PipelineConfig:
    generation: GenConfig
    model: ModelConfig
    n_folds: int = 5
    budget: float | None = None
    budget_grid: tuple = ()

    def __post_init__(self):
        if self.n_folds < 2:
            raise ValidationError("evaluation.n_folds must be at least 2")
        if self.budget is not None and self.budget < 0:
            raise ValidationError("evaluation.budget must be nonnegative")
        self.budget_grid = tuple(float(b) for b in self.budget_grid)
        if any(b < 0 for b in self.budget_grid):
            raise ValidationError("evaluation.budget_grid entries must be nonnegative")


def _known_keys(section: dict, allowed, where: str):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ValidationError(f"unknown key(s) {unknown} in {where}")


def parse_config(
    path=None,
    seed: int = 0,
    variant: str | None = None,
    budget_grid=None,
) -> PipelineConfig:
    """Load the YAML config; CLI flags override the file's values."""
    raw = {}
    if path is not None:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
        if not isinstance(raw, dict):
            raise ValidationError(f"config root must be a mapping, got {type(raw).__name__}")
    _known_keys(raw, ("generation", "model", "evaluation"), "config")

    gen_raw = dict(raw.get("generation") or {})
    _known_keys(
        gen_raw,
        (
            "n_customers",
            "coupon_values",
            "assignment_probs",
            "phi",
            "rho",
            "promo_gamma_shape",
            "world",
            "features",
        ),
        "generation",
    )
    world = gen_raw.pop("world", "default")
    if world not in _WORLDS:
        raise ValidationError(f"generation.world must be one of {_WORLDS}, got {world!r}")
    feat_raw = dict(gen_raw.pop("features", None) or {})
    _known_keys(feat_raw, [f.name for f in dataclasses.fields(FeatureConfig)], "generation.features")
    coupon_values = np.asarray(
        gen_raw.pop("coupon_values", [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]), dtype=np.float64
    )
    spec_factory = default_response_spec if world == "default" else decorrelated_response_spec
    generation = GenConfig(
        coupon_values=coupon_values,
        seed=seed,
        features=FeatureConfig(**feat_raw),
        response=spec_factory(len(coupon_values), coupon_values),
        **gen_raw,
    )

    model_raw = dict(raw.get("model") or {})
    _known_keys(model_raw, [f.name for f in dataclasses.fields(ModelConfig)], "model")
    if "weights" in model_raw:
        w = model_raw["weights"]
        if not isinstance(w, dict):
            raise ValidationError("model.weights must be a mapping")
        _known_keys(w, ("w_amount", "w_enduring", "w_direct"), "model.weights")
        model_raw["weights"] = LossWeights(**w)
    if "hidden_dims" in model_raw:
        model_raw["hidden_dims"] = tuple(model_raw["hidden_dims"])
    if variant is not None:
        model_raw["variant"] = variant
    model = ModelConfig(**model_raw)

    eval_raw = dict(raw.get("evaluation") or {})
    _known_keys(eval_raw, ("n_folds", "budget", "budget_grid"), "evaluation")
    if budget_grid is not None:
        eval_raw["budget_grid"] = budget_grid
    return PipelineConfig(generation=generation, model=model, **eval_raw)


def _parse_budget_grid(text: str | None):
    if text is None:
        return None
    try:
        grid = tuple(float(tok) for tok in text.split(",") if tok.strip() != "")
    except ValueError as exc:
        raise ValidationError(f"could not parse budget grid {text!r}: {exc}") from exc
    if not grid:
        raise ValidationError("budget grid is empty")
    return grid


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _atomic_write(path: Path, writer, suffix: str = ".tmp"):
    """Run ``writer(tmp_path)`` then rename over ``path``."""
    tmp = Path(str(path) + suffix)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _atomic_save_npz(path: Path, model):
    # np.savez appends ".npz" to names that lack it, so the temp name keeps it
    tmp = Path(str(path) + ".tmp.npz")
    try:
        save_model(model, tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _load_dataset(path, n_arms: int) -> RctDataset:
    dataset = RctDataset.from_csv(path)
    if dataset.n == 0:
        raise ValidationError(f"dataset {path} is empty")
    if int(dataset.arm.max()) >= n_arms:
        raise ValidationError(
            f"dataset {path} references arm {int(dataset.arm.max())} but the config "
            f"defines only {n_arms} arms"
        )
    return dataset


def _cmd_generate(args) -> int:
    cfg = parse_config(args.config, seed=args.seed)
    out = _out_dir(args)
    dataset, truth = generate_rct(cfg.generation)
    _atomic_write(out / "dataset.csv", dataset.to_csv)
    _atomic_write(out / "ground_truth.csv", lambda p: truth.to_csv(p, dataset.customer_id))
    logger.info(
        "generated %d customers x %d arms into %s", dataset.n, truth.n_arms, out
    )
    return 0


def _cmd_train(args) -> int:
    cfg = parse_config(args.config, seed=args.seed, variant=args.variant)
    out = _out_dir(args)
    n_arms = cfg.generation.n_arms
    dataset = _load_dataset(args.data, n_arms)
    result = train_model(
        dataset.features, dataset.arm, dataset.s, dataset.y, n_arms,
        config=cfg.model, seed=args.seed,
    )
    _atomic_save_npz(out / "model.npz", result.model)
    history = {
        "variant": cfg.model.variant,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "stopped_epoch": result.stopped_epoch,
        "epochs": [h.to_dict() for h in result.history],
    }
    _atomic_write(
        out / "history.json",
        lambda p: Path(p).write_text(json.dumps(history, sort_keys=True, indent=2) + "\n"),
    )
    logger.info(
        "trained %s for %d epochs (best validation loss %.6g at epoch %d)",
        cfg.model.variant, result.stopped_epoch, result.best_val_loss, result.best_epoch,
    )
    return 0


def _write_predictions_csv(path, customer_id, pm):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["customer_id", "arm", "f_direct", "f_enduring", "f_amount"])
        n, m = pm.direct.shape
        for i in range(n):
            for j in range(m):
                writer.writerow(
                    [
                        int(customer_id[i]),
                        j,
                        repr(float(pm.direct[i, j])),
                        repr(float(pm.enduring_propensity[i, j])),
                        repr(float(pm.amount[i, j])),
                    ]
                )


def _cmd_predict(args) -> int:
    out = _out_dir(args)
    model = load_model(args.model)
    dataset = _load_dataset(args.data, model.n_arms)
    pm = predict_matrix(model, dataset.features)
    _atomic_write(out / "predictions.csv", lambda p: _write_predictions_csv(p, dataset.customer_id, pm))
    logger.info("wrote %d x %d predictions to %s", pm.direct.shape[0], pm.direct.shape[1], out)
    return 0


def _cmd_allocate(args) -> int:
    cfg = parse_config(args.config, seed=args.seed)
    out = _out_dir(args)
    model = load_model(args.model)
    if model.n_arms != cfg.generation.n_arms:
        raise ValidationError(
            f"model has {model.n_arms} arms but the config defines {cfg.generation.n_arms}"
        )
    dataset = _load_dataset(args.data, model.n_arms)
    pm = predict_matrix(model, dataset.features)
    problem = build_problem(pm.amount, pm.direct, cfg.generation.coupon_values, args.budget)
    if args.solver == "dp":
        plan = solve_exact_dp(problem, cost_resolution=None)
    else:
        plan = solve_lagrangian(problem)
    _atomic_write(out / "plan.csv", lambda p: plan.to_csv(p, dataset.customer_id))
    logger.info(
        "allocated at budget %.6g: value %.6g, cost %.6g", args.budget, plan.total_value, plan.total_cost
    )
    return 0


def _cmd_evaluate(args) -> int:
    cfg = parse_config(args.config, seed=args.seed, variant=args.variant)
    out = _out_dir(args)
    gen = cfg.generation
    dataset = _load_dataset(args.data, gen.n_arms)
    budget = args.budget if args.budget is not None else cfg.budget
    report = evaluate_variant(
        dataset.features, dataset.arm, dataset.s, dataset.y,
        gen.coupon_values, gen.control_arm, cfg.model,
        seed=args.seed, budget=budget, n_folds=cfg.n_folds,
    )
    path = out / f"eval_{cfg.model.variant}.json"
    _atomic_write(path, lambda p: report.save(p))
    logger.info("evaluation for %s written to %s", cfg.model.variant, path)
    return 0


def _cmd_sweep(args) -> int:
    cfg = parse_config(
        args.config, seed=args.seed, variant=args.variant,
        budget_grid=_parse_budget_grid(args.budget_grid),
    )
    out = _out_dir(args)
    gen = cfg.generation
    dataset = _load_dataset(args.data, gen.n_arms)
    if not cfg.budget_grid:
        raise ValidationError("a budget grid is required (flag --budget-grid or evaluation.budget_grid)")
    if args.model is not None:
        model = load_model(args.model)
        if model.n_arms != gen.n_arms:
            raise ValidationError(
                f"model has {model.n_arms} arms but the config defines {gen.n_arms}"
            )
    else:
        model = train_model(
            dataset.features, dataset.arm, dataset.s, dataset.y, gen.n_arms,
            config=cfg.model, seed=args.seed,
        ).model
    pm = predict_matrix(model, dataset.features)
    points, _ = budget_sweep(
        pm.amount, pm.direct, gen.coupon_values, cfg.budget_grid,
        dataset.arm, dataset.s, dataset.y, gen.control_arm,
    )
    _atomic_write(out / "curve.csv", lambda p: curve_to_csv(points, p))
    logger.info("swept %d budgets into %s", len(points), out / "curve.csv")
    return 0


def _cmd_report(args) -> int:
    out = _out_dir(args)
    if not args.evals:
        raise ValidationError("at least one evaluation JSON is required")
    reports = [EvalReport.load(p) for p in args.evals]
    curves = {}
    for spec in args.curve or []:
        if "=" not in spec:
            raise ValidationError(f"curve spec {spec!r} must look like LABEL=PATH")
        label, path = spec.split("=", 1)
        curves[label] = load_curve_csv(path)
    paths = write_report(out, reports, curves or None)
    logger.info("report written: %s", ", ".join(str(p) for p in paths))
    return 0


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as validation errors (exit 1)."""

    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="promolab", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, model=False):
        p.add_argument("--config", default=None, help="YAML configuration file")
        p.add_argument("--seed", type=int, default=0, help="master random seed")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True, help="trial dataset CSV")
        if model:
            p.add_argument("--model", required=True, help="model checkpoint (.npz)")

    p = sub.add_parser("generate", help="sample a synthetic trial with ground truth")
    common(p)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="fit one model variant on a trial log")
    common(p, data=True)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="score every (customer, arm) pair")
    common(p, data=True, model=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("allocate", help="solve the budgeted incentive assignment")
    common(p, data=True, model=True)
    p.add_argument("--budget", type=float, required=True)
    p.add_argument("--solver", choices=("lagrangian", "dp"), default="lagrangian")
    p.set_defaults(func=_cmd_allocate)

    p = sub.add_parser("evaluate", help="cross-validated metrics plus a budgeted plan estimate")
    common(p, data=True)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--budget", type=float, default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep", help="trace estimated lift across a budget grid")
    common(p, data=True)
    p.add_argument("--model", default=None, help="checkpoint to reuse (else trains fresh)")
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--budget-grid", default=None, help="comma-separated budgets")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="render markdown + SVG from evaluation artifacts")
    p.add_argument("--out", required=True)
    p.add_argument("--curve", action="append", metavar="LABEL=PATH")
    p.add_argument("evals", nargs="*", help="evaluation JSON files")
    p.set_defaults(func=_cmd_report)
    return parser


def _setup_logging():
    name = os.environ.get(ENV_LOG_LEVEL, "INFO").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        raise ValidationError(f"{ENV_LOG_LEVEL}={name!r} is not a valid log level")
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def main(argv=None) -> int:
    try:
        _setup_logging()
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PromolabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort CLI guard
        logger.exception("unhandled failure: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
