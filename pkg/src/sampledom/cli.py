"""Command-line entry point: ``sampledom {generate,score,train,evaluate,report}``.

Hyperparameters live in a JSON config file (schema in the README); a handful
of flags and ``--set section.key=value`` override it. Every random stage draws
from one root seed. Exit codes: 0 success, 1 runtime failure, 2 configuration
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from sampledom.data import DatasetFormatError, SynthSpec, generate, holdout_indices, load, save
from sampledom.dominance import CurriculumSchedule, estimate_all, read_score_report, write_score_report
from sampledom.kde import KdeConfig
from sampledom.numerics import AdamWState, child_seed, make_rng
from sampledom.sae import load_checkpoint, save_checkpoint, train_sae
from sampledom.trainer import TrainConfig, evaluate, predict_proba, save_classifier, train_classifier

log = logging.getLogger("sampledom")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

# stage keys for seed fan-out
STAGE_GENERATE, STAGE_SAE, STAGE_CLASSIFIER, STAGE_EVALUATE, STAGE_HOLDOUT = 1, 2, 3, 4, 5


class ConfigError(ValueError):
    """Bad or inconsistent configuration; maps to exit code 2."""


def stage_seed(root: int, *keys: int) -> int:
    return int(child_seed(root, *keys).generate_state(1)[0])


@dataclass(frozen=True)
class SaeSection:
    epochs: int = 500
    lr: float = 0.001
    weight_decay: float = 0.01
    batch_size: int | None = None


@dataclass(frozen=True)
class DominanceSection:
    psi: float = 90.0
    psi_mode: str = "percentile"


@dataclass(frozen=True)
class EvaluateSection:
    num_folds: int = 4
    repeats: int = 1
    crop_modes: tuple[str, ...] = ("no_crop", "crop")


@dataclass(frozen=True)
class PathsSection:
    dataset: str | None = None
    output_dir: str = "runs"
    sae_checkpoint: str | None = None
    scores: str | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    synth: SynthSpec = field(default_factory=SynthSpec)
    kde: KdeConfig = field(default_factory=KdeConfig)
    dominance: DominanceSection = field(default_factory=DominanceSection)
    schedule: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    sae: SaeSection = field(default_factory=SaeSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # keys owned by the root seed or by the command, not settable per section
    RESERVED = {"synth": {"seed"}, "train": {"seed", "schedule", "use_crops"}}

    @property
    def synth_spec(self) -> SynthSpec:
        return replace(self.synth, seed=stage_seed(self.seed, STAGE_GENERATE))

    @property
    def train_config(self) -> TrainConfig:
        return replace(self.train, schedule=self.schedule, seed=stage_seed(self.seed, STAGE_CLASSIFIER))

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for f in fields(self):
            if f.name == "seed":
                continue
            section = asdict(getattr(self, f.name))
            for key in self.RESERVED.get(f.name, ()):
                section.pop(key, None)
            out[f.name] = section
        return out


def _section(cls, name: str, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object, got {type(raw).__name__}")
    allowed = {f.name for f in fields(cls)}
    defaults = cls()
    reserved = RunConfig.RESERVED.get(name, set())
    for key in raw:
        if key not in allowed or key in reserved:
            raise ConfigError(f"unknown config key '{name}.{key}'")
    kwargs = {}
    for key, value in raw.items():
        default = getattr(defaults, key)
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        elif isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{name}.{key}: expected true or false, got {value!r}")
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[key] = value
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    return obj


_SECTIONS = {
    "synth": SynthSpec,
    "kde": KdeConfig,
    "dominance": DominanceSection,
    "schedule": CurriculumSchedule,
    "sae": SaeSection,
    "train": TrainConfig,
    "evaluate": EvaluateSection,
    "paths": PathsSection,
}


def build_config(raw: dict) -> RunConfig:
    """Validate a parsed config document; unknown keys are rejected."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for key in raw:
        if key != "seed" and key not in _SECTIONS:
            raise ConfigError(f"unknown config key '{key}'")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")
    sections = {name: _section(cls, name, raw.get(name, {})) for name, cls in _SECTIONS.items()}
    cfg = RunConfig(seed=seed, **sections)
    # cross-section checks
    if cfg.dominance.psi_mode not in ("percentile", "absolute"):
        raise ConfigError(f"dominance.psi_mode must be 'percentile' or 'absolute', got {cfg.dominance.psi_mode!r}")
    if not 0 < cfg.dominance.psi < 100:
        raise ConfigError(f"dominance.psi must lie in (0, 100), got {cfg.dominance.psi}")
    if cfg.evaluate.num_folds < 2 or cfg.evaluate.repeats < 1:
        raise ConfigError("evaluate.num_folds must be >= 2 and evaluate.repeats >= 1")
    if not set(cfg.evaluate.crop_modes) or not set(cfg.evaluate.crop_modes) <= {"no_crop", "crop"}:
        raise ConfigError(f"evaluate.crop_modes must be a non-empty subset of no_crop, crop: {cfg.evaluate.crop_modes}")
    if cfg.sae.epochs < 0:
        raise ConfigError("sae.epochs must be >= 0")
    if not 0 < cfg.train.val_fraction < 1:
        raise ConfigError(f"train.val_fraction must lie in (0, 1), got {cfg.train.val_fraction}")
    if cfg.train.crop_stride < 1 or cfg.train.crop_window < 4:
        raise ConfigError("train.crop_window must be >= 4 and train.crop_stride >= 1")
    return cfg


def _apply_override(raw: dict, assignment: str) -> None:
    key, sep, text = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects section.key=value, got {assignment!r}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    *parents, leaf = key.split(".")
    node = raw
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: '{p}' is not a section")
    node[leaf] = value


def load_config(path: str | None, overrides=()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    for assignment in overrides:
        _apply_override(raw, assignment)
    return build_config(raw)


# ---------------------------------------------------------------------------
# commands


def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} given (pass it as an argument or set it in the config)")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _load_dataset(path: Path):
    try:
        return load(path)
    except DatasetFormatError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def cmd_generate(cfg: RunConfig, out: Path) -> int:
    ds = generate(cfg.synth_spec)
    save(ds, out / "dataset.sdom")
    counts = Counter(ds.provenance)
    print(f"wrote {out / 'dataset.sdom'}: {len(ds)} trials, {ds.channels} channels, {ds.time_points} samples")
    for tag in ("clean", "outlier", "label_noise"):
        print(f"  {tag:<12}{counts.get(tag, 0):>6}")
    return EXIT_OK


def cmd_score(cfg: RunConfig, out: Path, dataset_path: Path, sae_path: str | None) -> int:
    ds = _load_dataset(dataset_path)
    if sae_path is not None:
        sae = load_checkpoint(_existing(sae_path, "SAE checkpoint"))
        if sae.input_width != ds.time_points:
            raise ConfigError(f"checkpoint expects {sae.input_width} time points, dataset has {ds.time_points}")
    else:
        sae = train_sae(
            ds,
            epochs=cfg.sae.epochs,
            optimizer=AdamWState(lr=cfg.sae.lr, weight_decay=cfg.sae.weight_decay),
            rng=make_rng(child_seed(cfg.seed, STAGE_SAE)),
            batch_size=cfg.sae.batch_size,
        )
        save_checkpoint(sae, out / "sae.saew")
        if sae.history:
            print(f"autoencoder: {len(sae.history)} epochs, mse {sae.history[0]:.4g} -> {sae.history[-1]:.4g}")
    records = estimate_all(ds, sae, cfg.kde, cfg.dominance.psi, cfg.dominance.psi_mode)
    write_score_report(records, out / "scores.csv")
    print(f"wrote {out / 'scores.csv'}: {len(records)} rows")
    _print_score_summary(records)
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path, dataset_path: Path, scores_path: str | None) -> int:
    ds = _load_dataset(dataset_path)
    records = None
    if scores_path is not None:
        records = read_score_report(_existing(scores_path, "score report"))
        if len(records) != len(ds):
            raise ConfigError(f"score report has {len(records)} rows for {len(ds)} trials")
    tcfg = cfg.train_config
    keep, held = holdout_indices(ds, tcfg.val_fraction, stage_seed(cfg.seed, STAGE_HOLDOUT))
    train, val = ds.subset(keep), ds.subset(held)
    if records is not None:
        records = [records[i] for i in keep]
    model = train_classifier(train, val, records, tcfg)
    save_classifier(model, out / "classifier.npz")
    acc = 100.0 * float(np.mean(np.argmax(predict_proba(model, val.signals), axis=1) == val.labels))
    method = "weighted" if records is not None else "baseline"
    print(f"wrote {out / 'classifier.npz'} ({method}, best epoch {model.history['best_epoch']})")
    print(f"validation accuracy {acc:.2f}% on {len(val)} held-out trials")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, out: Path, dataset_path: Path) -> int:
    ds = _load_dataset(dataset_path)
    seeds = [stage_seed(cfg.seed, STAGE_EVALUATE, r) for r in range(cfg.evaluate.repeats)]

    def progress(seed, fold, accs):
        log.info("seed %d fold %d: %s", seed, fold, ", ".join(f"{k} {v:.1f}" for k, v in accs.items()))

    ev = evaluate(
        ds,
        cfg.kde,
        cfg.train_config,
        num_folds=cfg.evaluate.num_folds,
        seeds=seeds,
        sae_epochs=cfg.sae.epochs,
        psi=cfg.dominance.psi,
        psi_mode=cfg.dominance.psi_mode,
        crop_modes=cfg.evaluate.crop_modes,
        progress=progress,
        sae_lr=cfg.sae.lr,
        sae_weight_decay=cfg.sae.weight_decay,
    )
    (out / "evaluation.json").write_text(ev.to_json())
    print(ev.table())
    print(f"wrote {out / 'evaluation.json'}")
    return EXIT_OK


def _print_score_summary(records) -> None:
    groups: dict[str, list[float]] = {}
    for r in records:
        groups.setdefault(r.provenance or "unknown", []).append(r.raw_score)
    dominant = sum(r.is_dominant for r in records)
    print(f"dominant trials: {dominant}/{len(records)}")
    print(f"  {'provenance':<12}{'n':>6}{'mean raw score':>18}")
    for tag in sorted(groups):
        print(f"  {tag:<12}{len(groups[tag]):>6}{np.mean(groups[tag]):>18.6g}")


def cmd_report(path: Path) -> int:
    if path.suffix == ".json":
        from sampledom.trainer import EvalReport, Evaluation

        doc = json.loads(path.read_text())
        try:
            reports = {
                name: EvalReport(name, c["per_fold"], c["confusion"]) for name, c in doc["conditions"].items()
            }
            ev = Evaluation(reports, doc["seeds"], doc["num_folds"], doc.get("settings", {}))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: not an evaluation report ({exc})") from exc
        print(ev.table())
        for crop, delta in doc.get("deltas", {}).items():
            print(f"delta {crop}: {delta:+.2f}")
        return EXIT_OK
    try:
        records = read_score_report(path)
    except (KeyError, ValueError, csv.Error) as exc:
        raise ConfigError(f"{path}: not a score report ({exc})") from exc
    _print_score_summary(records)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides paths.output_dir)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; VALUE is parsed as JSON when possible")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sampledom", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p = sub.add_parser("score", parents=[common], help="train the autoencoder and write dominance scores")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--sae", help="reuse this autoencoder checkpoint instead of training")
    p = sub.add_parser("train", parents=[common], help="train one classifier")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--scores", help="score report; omit for the unweighted baseline")
    p.add_argument("--epochs", type=int)
    p = sub.add_parser("evaluate", parents=[common], help="run the baseline/weighted x crop grid")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--no-crop", action="store_true", help="skip the cropped conditions")
    p.add_argument("--folds", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--sae-epochs", type=int)
    p = sub.add_parser("report", help="summarize a score CSV or evaluation JSON")
    p.add_argument("path")
    return parser


def _overrides(args) -> list[str]:
    sets = list(args.set)
    flag_map = {
        "seed": "seed",
        "out": "paths.output_dir",
        "dataset": "paths.dataset",
        "sae": "paths.sae_checkpoint",
        "scores": "paths.scores",
        "epochs": "train.epochs",
        "folds": "evaluate.num_folds",
        "repeats": "evaluate.repeats",
        "sae_epochs": "sae.epochs",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            sets.append(f"{key}={json.dumps(value)}")
    if getattr(args, "no_crop", False):
        sets.append('evaluate.crop_modes=["no_crop"]')
    return sets


def run(args) -> int:
    if args.command == "report":
        return cmd_report(_existing(args.path, "report input"))
    cfg = load_config(args.config, _overrides(args))
    out = Path(cfg.paths.output_dir)
    dataset = None if args.command == "generate" else _existing(cfg.paths.dataset, "dataset")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    try:
        with FileLock(str(out / ".sampledom.lock"), timeout=0):
            (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
            if args.command == "generate":
                return cmd_generate(cfg, out)
            if args.command == "score":
                return cmd_score(cfg, out, dataset, cfg.paths.sae_checkpoint)
            if args.command == "train":
                return cmd_train(cfg, out, dataset, cfg.paths.scores)
            return cmd_evaluate(cfg, out, dataset)
    except Timeout:
        print(f"error: output directory {out} is in use by another run", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
