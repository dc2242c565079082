"""Command-line entry point.

Subcommands: ``generate`` (synthetic dataset), ``train`` (baseline fit),
``score`` (influence or stochastic-dropout scores to CSV), ``refine``
(score, prune at one ratio, retrain), ``sweep`` (full fold x ratio x seed
grid), ``version``.

Run configuration lives in a JSON document mirroring the pipeline config
plus a dataset path; command-line flags override config values. Unknown
keys are rejected. Every defaulted field is echoed into the emitted
resolved_config.json so a run can be reproduced bit-exactly from its
output directory.

Exit codes: 0 success, 1 runtime failure (IO, malformed data, solver), 2
usage or config error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from . import __version__
from .dataset import (
    Dataset,
    EmsConfig,
    SyntheticSpec,
    ems_standardize_dataset,
    generate_synthetic,
    inject_label_noise,
    load_dataset,
    save_dataset,
)
from .errors import ConfigError
from .influence import InfluenceConfig, influence_scores, save_scores
from .model import ModelSpec, load_params, save_params
from .refine import (
    ExperimentResult,
    PipelineConfig,
    grid_search,
    plan_recovery,
    random_dropout,
    refine_dataset,
)
from .trainer import TrainConfig, train
from .uncertainty import McConfig, mc_dropout_scores

_SECTIONS = {
    "train": TrainConfig,
    "influence": InfluenceConfig,
    "mc": McConfig,
    "ems": EmsConfig,
}
_TOP_KEYS = {"model", "metric", "ratios", "seeds", "data", "ratio", *_SECTIONS}
_METRIC_ALIASES = {"influence": "influence", "mcdropout": "mc-dropout", "mc-dropout": "mc-dropout", "random": "random"}


def _check_keys(doc: dict, allowed, where: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}")


@dataclass
class CliConfig:
    """Parsed and validated run configuration; model dims may still be
    unresolved (they can be inferred from the dataset)."""

    model: dict
    train: TrainConfig
    metric: str
    influence: InfluenceConfig
    mc: McConfig
    ems: EmsConfig
    ratios: tuple[float, ...]
    seeds: tuple[int, ...]
    data: str | None
    ratio: float | None


def load_cli_config(path: str | None, overrides: dict) -> CliConfig:
    """Read the JSON config, apply flag overrides, validate every section."""
    doc: dict = {}
    if path is not None:
        doc = json.loads(Path(path).read_text())
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "config")
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value

    sections = {}
    for name, cls in _SECTIONS.items():
        raw = doc.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        allowed = {f.name for f in fields(cls)}
        _check_keys(raw, allowed, f"config section {name!r}")
        sections[name] = cls(**raw)

    model = doc.get("model", {})
    if not isinstance(model, dict):
        raise ConfigError("config section 'model' must be an object")
    _check_keys(model, {f.name for f in fields(ModelSpec)}, "config section 'model'")
    # Validate the explicit model fields now; dims may come from the dataset.
    probe = dict(model)
    probe.setdefault("input_dim", 1)
    probe.setdefault("n_classes", 2)
    if "arch" not in probe:
        raise ConfigError("model.arch is required")
    ModelSpec(**probe)

    metric = doc.get("metric", "influence")
    if metric not in _METRIC_ALIASES:
        raise ConfigError(
            f"metric must be one of {sorted(set(_METRIC_ALIASES))}, got {metric!r}"
        )
    ratios = doc.get("ratios", [0.0, 0.1, 0.2, 0.3, 0.4])
    seeds = doc.get("seeds", list(range(10)))
    if not isinstance(ratios, (list, tuple)):
        raise ConfigError("ratios must be a list")
    if not isinstance(seeds, (list, tuple)) or not all(
        isinstance(s, int) and not isinstance(s, bool) for s in seeds
    ):
        raise ConfigError("seeds must be a list of integers")
    ratio = doc.get("ratio")
    if ratio is not None and not 0.0 <= float(ratio) < 1.0:
        raise ConfigError(f"ratio must be in [0, 1), got {ratio}")
    return CliConfig(
        model=model,
        train=sections["train"],
        metric=_METRIC_ALIASES[metric],
        influence=sections["influence"],
        mc=sections["mc"],
        ems=sections["ems"],
        ratios=tuple(float(r) for r in ratios),
        seeds=tuple(int(s) for s in seeds),
        data=doc.get("data"),
        ratio=None if ratio is None else float(ratio),
    )


def _resolve_model(cfg: CliConfig, d: Dataset) -> ModelSpec:
    spec = dict(cfg.model)
    spec.setdefault("input_dim", d.n_channels * d.n_timepoints)
    spec.setdefault("n_classes", d.n_classes)
    return ModelSpec(**spec)


def _pipeline(cfg: CliConfig, spec: ModelSpec) -> PipelineConfig:
    return PipelineConfig(
        model=spec,
        train=cfg.train,
        metric=cfg.metric,
        influence=cfg.influence,
        mc=cfg.mc,
        ems=cfg.ems,
        ratios=cfg.ratios,
        seeds=cfg.seeds,
    )


def _resolved_dict(cfg: CliConfig, spec: ModelSpec, extra: dict | None = None) -> dict:
    out = {
        "model": asdict(spec),
        "train": asdict(cfg.train),
        "metric": cfg.metric,
        "influence": asdict(cfg.influence),
        "mc": asdict(cfg.mc),
        "ems": asdict(cfg.ems),
        "ratios": list(cfg.ratios),
        "seeds": list(cfg.seeds),
        "data": cfg.data,
    }
    if extra:
        out.update(extra)
    return out


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def emit_report(r: ExperimentResult, out_dir: str | Path, resolved: dict) -> None:
    """Write raw.csv, summary.csv, resolved_config.json into ``out_dir``.

    Floats carry 9 significant digits; raw rows are sorted by
    (fold, ratio, seed); re-emitting the same result is byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw = ["fold,ratio,seed,accuracy,n_removed,recall,precision"]
    for c in sorted(r.cells, key=lambda c: (c.fold, c.ratio, c.seed)):
        raw.append(
            f"{c.fold},{_fmt(c.ratio)},{c.seed},{_fmt(c.accuracy)},"
            f"{c.n_removed},{_fmt(c.recall)},{_fmt(c.precision)}"
        )
    (out / "raw.csv").write_text("\n".join(raw) + "\n")
    summary = ["ratio,mean,std"]
    for s in r.summary:
        summary.append(f"{_fmt(s.ratio)},{_fmt(s.mean)},{_fmt(s.std)}")
    (out / "summary.csv").write_text("\n".join(summary) + "\n")
    _write_json(out / "resolved_config.json", resolved)


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("REFINE_THREADS")
    return int(env) if env else 1


def _overrides(args) -> dict:
    out = {}
    for key in ("data", "metric", "ratio"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def _log(msg: str) -> None:
    print(msg)


# ---------------------------------------------------------------- commands

def _cmd_generate(args) -> int:
    try:
        spec = SyntheticSpec(
            n_subjects=args.subjects,
            trials_per_subject=args.trials_per_subject,
            n_channels=args.channels,
            n_timepoints=args.timepoints,
            n_classes=args.classes,
            class_separation=args.separation,
            seed=args.seed,
        )
        if not 0.0 <= args.noise_ratio <= 1.0:
            raise ConfigError(f"--noise-ratio must be in [0, 1], got {args.noise_ratio}")
    except ValueError as exc:
        return _usage_error(exc)
    try:
        d = generate_synthetic(spec)
        if args.noise_ratio > 0:
            d = inject_label_noise(d, args.noise_ratio, args.noise_seed)
        out = Path(args.out)
        if out.parent != Path(""):
            out.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(d, out)
        _write_json(
            Path(str(out) + ".json"),
            {
                "command": "generate",
                **asdict(spec),
                "noise_ratio": args.noise_ratio,
                "noise_seed": args.noise_seed,
            },
        )
        _log(f"wrote {d.n} trials ({d.n_channels}x{d.n_timepoints}, "
             f"{d.n_classes} classes) to {out}")
        return 0
    except Exception as exc:
        return _runtime_error(exc)


def _cmd_train(args) -> int:
    try:
        cfg = _require_data(load_cli_config(args.config, _overrides(args)))
    except (ValueError, OSError) as exc:
        return _usage_error(exc)
    try:
        d = load_dataset(cfg.data)
        spec = _resolve_model(cfg, d)
        report = train(spec, ems_standardize_dataset(d, cfg.ems), cfg.train)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_params(report.theta, out / "model.prmv")
        _write_json(out / "resolved_config.json", _resolved_dict(cfg, spec))
        _log(
            f"trained {len(report.loss_curve)} epochs, final loss "
            f"{report.loss_curve[-1]:.6g}, grad norm {report.final_grad_norm:.3e}"
        )
        return 0
    except Exception as exc:
        return _runtime_error(exc)


def _cmd_score(args) -> int:
    try:
        cfg = _require_data(load_cli_config(args.config, _overrides(args)))
        if cfg.metric == "random":
            raise ConfigError("score needs --metric influence or mcdropout")
    except (ValueError, OSError) as exc:
        return _usage_error(exc)
    try:
        d = load_dataset(cfg.data)
        spec = _resolve_model(cfg, d)
        theta = load_params(args.model_path)
        if theta.size != spec.n_params:
            raise ValueError(
                f"parameter file has {theta.size} values, model needs {spec.n_params}"
            )
        dp = ems_standardize_dataset(d, cfg.ems)
        if cfg.metric == "influence":
            sv = influence_scores(spec, theta, dp, cfg.influence)
        else:
            sv = mc_dropout_scores(spec, theta, dp, cfg.mc)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_scores(sv, d, out / "scores.csv")
        _write_json(
            out / "resolved_config.json",
            _resolved_dict(cfg, spec, {"model_path": args.model_path}),
        )
        _log(f"scored {d.n} trials with {cfg.metric}")
        return 0
    except Exception as exc:
        return _runtime_error(exc)


def _cmd_refine(args) -> int:
    try:
        cfg = _require_data(load_cli_config(args.config, _overrides(args)))
        if cfg.ratio is None:
            raise ConfigError("a refinement ratio is required (config key 'ratio' or --ratio)")
    except (ValueError, OSError) as exc:
        return _usage_error(exc)
    try:
        d = load_dataset(cfg.data)
        spec = _resolve_model(cfg, d)
        dp = ems_standardize_dataset(d, cfg.ems)
        stage1 = train(spec, dp, cfg.train)
        if cfg.metric == "random":
            kept, plan = random_dropout(dp, cfg.ratio, cfg.train.seed)
        else:
            if cfg.metric == "influence":
                sv = influence_scores(spec, stage1.theta, dp, cfg.influence)
            else:
                sv = mc_dropout_scores(
                    spec, stage1.theta, dp, replace(cfg.mc, seed=cfg.train.seed)
                )
            kept, plan = refine_dataset(dp, sv, cfg.ratio)
        if kept.n == 0:
            raise ValueError("pruning emptied the training set")
        refit = train(spec, kept, cfg.train)
        precision, recall = plan_recovery(plan, dp.noise_mask)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_params(refit.theta, out / "model.prmv")
        _write_json(
            out / "plan.json",
            {
                "ratio": plan.ratio,
                "threshold": plan.threshold if math.isfinite(plan.threshold) else None,
                "removed_indices": plan.removed_indices,
                "metric_tag": plan.metric_tag,
                "n_removed": len(plan.removed_indices),
                "precision": None if math.isnan(precision) else precision,
                "recall": None if math.isnan(recall) else recall,
            },
        )
        _write_json(
            out / "resolved_config.json",
            _resolved_dict(cfg, spec, {"ratio": cfg.ratio}),
        )
        _log(
            f"removed {len(plan.removed_indices)}/{d.n} trials ({cfg.metric}); "
            f"retrained model written to {out / 'model.prmv'}"
        )
        return 0
    except Exception as exc:
        return _runtime_error(exc)


def _cmd_sweep(args) -> int:
    try:
        cfg = _require_data(load_cli_config(args.config, _overrides(args)))
        threads = _threads(args)
    except (ValueError, OSError) as exc:
        return _usage_error(exc)
    try:
        d = load_dataset(cfg.data)
        spec = _resolve_model(cfg, d)
        result = grid_search(_pipeline(cfg, spec), d, threads=threads, log=_log)
        emit_report(result, args.out, _resolved_dict(cfg, spec))
        best = "none" if result.best_ratio is None else _fmt(result.best_ratio)
        _log(f"swept {len(result.cells)} cells; best ratio {best}")
        return 0
    except Exception as exc:
        return _runtime_error(exc)


def _cmd_version(args) -> int:
    print(__version__)
    return 0


def _require_data(cfg: CliConfig) -> CliConfig:
    if cfg.data is None:
        raise ConfigError("a dataset path is required (config key 'data' or --data)")
    return cfg


def _usage_error(exc: Exception) -> int:
    print(f"error: {exc}", file=sys.stderr)
    return 2


def _runtime_error(exc: Exception) -> int:
    print(f"error: {exc}", file=sys.stderr)
    return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trialrefine",
        description="Influence-score and stochastic-dropout training-set refinement.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset file")
    g.add_argument("--out", required=True, help="output dataset path")
    g.add_argument("--subjects", type=int, required=True)
    g.add_argument("--trials-per-subject", type=int, required=True)
    g.add_argument("--channels", type=int, required=True)
    g.add_argument("--timepoints", type=int, required=True)
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--separation", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-ratio", type=float, default=0.0,
                   help="fraction of labels to reassign")
    g.add_argument("--noise-seed", type=int, default=0)
    g.set_defaults(handler=_cmd_generate)

    def common(p, metric_choices=None):
        p.add_argument("--config", help="JSON config path")
        p.add_argument("--data", help="dataset path (overrides config)")
        p.add_argument("--out", required=True, help="output directory")
        if metric_choices:
            p.add_argument("--metric", choices=metric_choices,
                           help="scoring metric (overrides config)")

    t = sub.add_parser("train", help="train a baseline model on a dataset")
    common(t)
    t.set_defaults(handler=_cmd_train)

    s = sub.add_parser("score", help="score every trial of a dataset")
    common(s, metric_choices=["influence", "mcdropout"])
    s.add_argument("--model-path", required=True, help="trained parameter file")
    s.set_defaults(handler=_cmd_score)

    r = sub.add_parser("refine", help="score, prune at one ratio, retrain")
    common(r, metric_choices=["influence", "mcdropout", "random"])
    r.add_argument("--ratio", type=float, help="removal ratio (overrides config)")
    r.set_defaults(handler=_cmd_refine)

    w = sub.add_parser("sweep", help="full fold x ratio x seed grid search")
    common(w, metric_choices=["influence", "mcdropout", "random"])
    w.add_argument("--threads", type=int, help="worker threads (or REFINE_THREADS)")
    w.set_defaults(handler=_cmd_sweep)

    v = sub.add_parser("version", help="print the package version")
    v.set_defaults(handler=_cmd_version)
    return parser


def execute(argv=None) -> int:
    """Parse ``argv`` and run the selected subcommand; returns the exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else 2
    return args.handler(args)


def main() -> None:
    sys.exit(execute())


if __name__ == "__main__":
    main()
