"""Command-line pipeline: generate -> train -> select -> eval / baseline / finetune -> report.

Every stage writes into its own directory under ``--out`` and finishes by
dropping a ``stage.json`` stamp holding the config hash and a digest of each
output file.  Stages read only the outputs of earlier stages.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .forest import ForestConfig, ForestGrid, fit_forest, rf_grid_search, self_label
from .metrics import METRIC_NAMES, ResultRow, Scorecard, aggregate, format_table, read_report, report, score_predictions
from .model import ModelConfig, load_net, write_model_card
from .numerics import NumericalError
from .synthetic import (GeneratorConfig, ShiftDescriptor, generate_shifted_task, make_benchmark, read_benchmark,
                        read_shifted_task, write_benchmark, write_shifted_task)
from .tasks import DataError, EvalTask, normalize_task
from .training import (FineTuneConfig, TrainConfig, TrainGrid, evaluate, fine_tune, grid_search,
                       selection_from_logs)

log = logging.getLogger("metaocc")

STAGES = ("generate", "train", "select", "eval", "baseline", "finetune", "report")
REPORT_CRITERIA = ("f1", "f2")
DATASET_ORDER = ("synthetic", "shifted")
MODEL_ORDER = ("RF", "RF Self-Lab", "Meta DS", "DS FT")


class UsageError(Exception):
    """Bad invocation: wrong flags, stages out of order, path collisions."""


@dataclass(frozen=True)
class ShiftedTaskConfig:
    support_size: int = 197
    train_negative_ratio: float = 400.0
    eval_positives: int = 200
    eval_ratio: float = 150.0
    shift: ShiftDescriptor = field(default_factory=ShiftDescriptor.strong)


@dataclass(frozen=True)
class FineTuneSettings:
    factors: tuple[float, ...] = (30.0, 50.0, 70.0, 100.0)
    passes: int = 3
    pos_weight: float = 1.0
    l1: float = 0.0
    batch_size: int = 64
    min_k: int = 8
    max_k: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    counts: tuple[int, int, int] = (46, 7, 8)
    support_fraction: float = 0.1
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(augment=1.0))
    train_grid: TrainGrid = field(default_factory=TrainGrid)
    forest_grid: ForestGrid = field(default_factory=ForestGrid)
    self_label_iterations: int = 10
    shifted: ShiftedTaskConfig = field(default_factory=ShiftedTaskConfig)
    finetune: FineTuneSettings = field(default_factory=FineTuneSettings)
    run_baseline: bool = True
    run_finetune: bool = True

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        nested = {
            "generator": lambda v: GeneratorConfig(**v),
            "train": TrainConfig.from_dict,
            "train_grid": lambda v: TrainGrid(**{k: tuple(x) for k, x in v.items()}),
            "forest_grid": lambda v: ForestGrid(**{k: tuple(x) for k, x in v.items()}),
            "shifted": lambda v: ShiftedTaskConfig(**{**v, "shift": ShiftDescriptor(**v["shift"])}
                                                   if "shift" in v else v),
            "finetune": lambda v: FineTuneSettings(**{**v, "factors": tuple(v.get("factors", (30, 50, 70, 100)))}),
        }
        for key, make in nested.items():
            if isinstance(d.get(key), dict):
                d[key] = make(d[key])
        if "counts" in d:
            d["counts"] = tuple(d["counts"])
        return cls(**d)

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def smoke_config(seed: int = 0) -> ExperimentConfig:
    """Tiny end-to-end preset for CI."""
    return ExperimentConfig(
        seed=seed,
        counts=(5, 2, 2),
        generator=GeneratorConfig(positives_min=40, positives_max=60, cluster_noise=0.15),
        train=TrainConfig(epochs=5, imbalance=10.0, min_k=3, max_k=10, augment=1.0, model=ModelConfig(width=32)),
        train_grid=TrainGrid(lr=(3e-3,), l1=(1e-6,), pos_weight=(1.0, 10.0)),
        forest_grid=ForestGrid(n_trees=(10, 20), max_depth=(10,), min_split=(2,), min_leaf=(1,),
                               bootstrap=(True, False)),
        self_label_iterations=3,
        shifted=ShiftedTaskConfig(support_size=20, train_negative_ratio=50.0, eval_positives=20),
        finetune=FineTuneSettings(min_k=2, max_k=10),
    )


def parse_counts(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(x) for x in text.split("/"))
    except ValueError:
        parts = ()
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError("expected TRAIN/VAL/TEST positive task counts, e.g. 5/2/2")
    return parts


# ----------------------------------------------------------------------------- run directory


class Run:
    def __init__(self, out: Path, cfg: ExperimentConfig):
        self.out = Path(out)
        self.cfg = cfg
        self.hash = cfg.config_hash

    def dir(self, stage: str) -> Path:
        return self.out / stage

    def fresh(self, stage: str) -> Path:
        d = self.dir(stage)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        return d

    def stamp(self, stage: str) -> None:
        d = self.dir(stage)
        outputs = {str(p.relative_to(d)): _sha256(p) for p in sorted(d.rglob("*"))
                   if p.is_file() and p.name != "stage.json"}
        doc = {"stage": stage, "config_hash": self.hash, "outputs": outputs}
        (d / "stage.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    def require(self, stage: str) -> Path:
        d = self.dir(stage)
        stamp = d / "stage.json"
        if not stamp.exists():
            raise UsageError(f"missing output of stage '{stage}' in {self.out}; run `metaocc {stage}` first")
        if json.loads(stamp.read_text())["config_hash"] != self.hash:
            raise UsageError(f"stage '{stage}' in {self.out} was produced by a different config; "
                             f"re-run `metaocc {stage}`")
        return d

    def has(self, stage: str) -> bool:
        try:
            self.require(stage)
        except UsageError:
            return False
        return True


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_results(path: Path, rows: list[ResultRow]) -> None:
    report(rows, path, path.with_suffix(".txt"))


# ----------------------------------------------------------------------------- data helpers


def _eval_tasks(bench, group: str, normalized: bool = True) -> list[EvalTask]:
    out = []
    for tid in getattr(bench.meta_split, group):
        t = normalize_task(bench.tasks[tid]) if normalized else bench.tasks[tid]
        out.append(EvalTask.from_task(t, bench.task_splits[tid]))
    return out


def _shifted(run: Run, normalized: bool = True) -> EvalTask:
    task, split = read_shifted_task(run.dir("generate") / "shifted")
    if normalized:
        task = normalize_task(task)
    return EvalTask.from_task(task, split)


def _selection_label(criterion: str) -> str:
    return f"best meta {criterion.upper()}"


def _best_net(run: Run, criterion: str):
    return load_net(run.dir("select") / f"best_{criterion}.ckpt")


# ----------------------------------------------------------------------------- stages


def cmd_generate(run: Run, force: bool = False) -> None:
    cfg = run.cfg
    targets = [run.out / "config.json"] + [run.dir(s) for s in STAGES]
    if any(p.exists() for p in targets):
        if not force:
            raise UsageError(f"{run.out} already holds a run; pass --force to replace it")
        for p in targets:
            if p.is_dir():
                shutil.rmtree(p)
            elif p.exists():
                p.unlink()
    run.out.mkdir(parents=True, exist_ok=True)
    (run.out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    bench = make_benchmark(cfg.generator, cfg.counts, cfg.seed, cfg.support_fraction)
    d = write_benchmark(bench, run.dir("generate"), cfg.generator)
    s = cfg.shifted
    task, split, recipe = generate_shifted_task(
        cfg.generator, s.shift, seed=cfg.seed + 1_000_003, support_size=s.support_size,
        train_negative_ratio=s.train_negative_ratio, eval_positives=s.eval_positives, eval_ratio=s.eval_ratio)
    write_shifted_task(d / "shifted", task, split, recipe)
    run.stamp("generate")
    log.info("generated %d tasks (%d/%d/%d) in %s", sum(cfg.counts), *cfg.counts, d)


def cmd_train(run: Run, jobs: int = 1) -> None:
    bench = read_benchmark(run.require("generate"))
    train = [normalize_task(t) for t in bench.group("train")]
    val = _eval_tasks(bench, "validation")
    configs = run.cfg.train_grid.configs(replace(run.cfg.train, seed=run.cfg.seed))
    d = run.fresh("train")
    grid_search(configs, train, val, run_dir=d, n_jobs=jobs, config_hash=run.hash)
    run.stamp("train")


def cmd_select(run: Run) -> None:
    src = run.require("train")
    configs = run.cfg.train_grid.configs(replace(run.cfg.train, seed=run.cfg.seed))
    rep = selection_from_logs(configs, src)
    d = run.fresh("select")
    (d / "selection.csv").write_text(rep.to_csv())
    (d / "selection.txt").write_text(rep.to_text())
    for c, (i, epoch) in rep.chosen_all().items():
        ckpt = d / f"best_{c}.ckpt"
        shutil.copyfile(src / f"config_{i:02d}" / "checkpoints" / f"epoch_{epoch:03d}.ckpt", ckpt)
        net, _ = load_net(ckpt)
        write_model_card(d / f"best_{c}.card.txt", net, run.hash,
                         {"grid_config": i, "epoch": epoch, "criterion": c})
    run.stamp("select")


def cmd_eval(run: Run) -> None:
    bench = read_benchmark(run.require("generate"))
    run.require("select")
    tests = _eval_tasks(bench, "test")
    shifted = _shifted(run)
    rows = []
    for c in REPORT_CRITERIA:
        net, _ = _best_net(run, c)
        # scores use the final-test part only; pool rows are never read here
        rows.append(ResultRow("synthetic", "Meta DS", _selection_label(c), aggregate(evaluate(net, tests))))
        rows.append(ResultRow("shifted", "Meta DS", _selection_label(c), aggregate(evaluate(net, [shifted]))))
    d = run.fresh("eval")
    _write_results(d / "results.csv", rows)
    run.stamp("eval")


def _rf_rows(dataset: str, cfg: ForestConfig, tasks: list[EvalTask], selection: str, iterations: int,
             seed: int) -> list[ResultRow]:
    plain, labeled = [], []
    for t in tasks:
        test = t.split.final_test
        forest = fit_forest(cfg, t.X[t.split.train], t.y[t.split.train], seed)
        plain.append(score_predictions(forest.predict(t.X[test]), t.y[test], t.task_id))
        forest, _ = self_label(cfg, t.X, t.y, t.split, iterations=iterations, seed=seed)
        labeled.append(score_predictions(forest.predict(t.X[test]), t.y[test], t.task_id))
    return [ResultRow(dataset, "RF", selection, aggregate(plain)),
            ResultRow(dataset, "RF Self-Lab", selection, aggregate(labeled))]


def cmd_baseline(run: Run) -> None:
    bench = read_benchmark(run.require("generate"))
    cfg = run.cfg
    val = _eval_tasks(bench, "validation", normalized=False)
    tests = _eval_tasks(bench, "test", normalized=False)
    shifted = _shifted(run, normalized=False)
    sel = rf_grid_search(cfg.forest_grid, val, cfg.seed)
    d = run.fresh("baseline")
    lines = ["index," + ",".join(f.name for f in fields(ForestConfig)) + "," + ",".join(METRIC_NAMES)]
    for i, (fc, _, card) in enumerate(sel.rows):
        lines.append(",".join([str(i)] + [str(v) for v in asdict(fc).values()]
                              + [repr(float(v)) for v in card.values()]))
    (d / "forest_grid.csv").write_text("\n".join(lines) + "\n")
    rows = []
    for c in REPORT_CRITERIA:
        fc, _ = sel.best(c)
        label = _selection_label(c)
        rows += _rf_rows("synthetic", fc, tests, label, cfg.self_label_iterations, cfg.seed)
        rows += _rf_rows("shifted", fc, [shifted], label, cfg.self_label_iterations, cfg.seed)
    _write_results(d / "results.csv", rows)
    run.stamp("baseline")


def cmd_finetune(run: Run) -> None:
    run.require("generate")
    run.require("select")
    cfg = run.cfg
    ft = cfg.finetune
    task = _shifted(run)
    support = task.X[task.split.support]
    negatives = task.X[task.split.baseline_negatives]
    test_x, test_y = task.rows("final_test")
    rows, runs = [], ["criterion,factor,best_epoch,epochs,train_score"]
    for c in REPORT_CRITERIA:
        base, meta = _best_net(run, c)
        base_lr = meta["train"]["lr"]
        best = None
        for factor in ft.factors:
            ftc = FineTuneConfig(base_lr=base_lr, factor=factor, passes=ft.passes, pos_weight=ft.pos_weight,
                                 l1=ft.l1, batch_size=ft.batch_size, min_k=ft.min_k, max_k=ft.max_k,
                                 seed=cfg.seed)
            res = fine_tune(base, support, negatives, ftc)
            e = res.best_epoch(c)
            value = res.scores[e][c]
            runs.append(f"{c},{factor!r},{e},{len(res.scores) - 1},{value!r}")
            if best is None or value > best[0]:
                best = (value, res.net_for(c))
        card = aggregate(evaluate(best[1], [task]))
        rows.append(ResultRow("shifted", "DS FT", _selection_label(c), card))
    d = run.fresh("finetune")
    (d / "runs.csv").write_text("\n".join(runs) + "\n")
    _write_results(d / "results.csv", rows)
    run.stamp("finetune")


def _row_key(r: ResultRow):
    def pos(seq, x):
        return seq.index(x) if x in seq else len(seq)
    return pos(DATASET_ORDER, r.dataset), pos(MODEL_ORDER, r.model), r.selection


def cmd_report(run: Run) -> list[ResultRow]:
    rows = read_report(run.require("eval") / "results.csv")
    for stage, wanted in (("baseline", run.cfg.run_baseline), ("finetune", run.cfg.run_finetune)):
        if wanted:
            rows += read_report(run.require(stage) / "results.csv")
    rows.sort(key=_row_key)
    d = run.fresh("report")
    _write_results(d / "results.csv", rows)
    run.stamp("report")
    return rows


def run_pipeline(out, cfg: ExperimentConfig, force: bool = False, jobs: int = 1) -> list[ResultRow]:
    """All stages in order; returns the report rows."""
    run = Run(Path(out), cfg)
    cmd_generate(run, force)
    cmd_train(run, jobs)
    cmd_select(run)
    cmd_eval(run)
    if cfg.run_baseline:
        cmd_baseline(run)
    if cfg.run_finetune:
        cmd_finetune(run)
    return cmd_report(run)


# ----------------------------------------------------------------------------- argument handling


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory")
    common.add_argument("--force", action="store_true", help="replace an existing run directory")
    common.add_argument("--smoke", action="store_true", help="tiny preset: 5/2/2 tasks, small net, 5 epochs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="metaocc", description="Meta-learned few-shot one-class classification pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("generate", parents=[common], help="write the synthetic benchmark and shifted task")
    g.add_argument("--tasks", type=parse_counts, help="TRAIN/VAL/TEST task counts, e.g. 5/2/2")
    _generator_flags(g)
    t = sub.add_parser("train", parents=[common], help="meta-train every grid configuration")
    t.add_argument("--jobs", type=int, default=1, help="parallel grid configurations")
    sub.add_parser("select", parents=[common], help="pick the best epoch/config per criterion")
    sub.add_parser("eval", parents=[common], help="zero-shot scores of the selected models")
    sub.add_parser("baseline", parents=[common], help="grid-selected random forest, with and without self-labeling")
    sub.add_parser("finetune", parents=[common], help="fine-tune selected models on the shifted task")
    sub.add_parser("report", parents=[common], help="merge all results into one table")
    a = sub.add_parser("all", parents=[common], help="run every stage")
    a.add_argument("--tasks", type=parse_counts)
    a.add_argument("--jobs", type=int, default=1)
    _generator_flags(a)
    return p


def _generator_flag(name: str) -> str:
    return "--generator-seed" if name == "seed" else "--" + name.replace("_", "-")


def _generator_flags(p: argparse.ArgumentParser) -> None:
    grp = p.add_argument_group("generator")
    for f in fields(GeneratorConfig):
        grp.add_argument(_generator_flag(f.name), dest=f"gen_{f.name}", type=type(f.default), metavar=f.name.upper(),
                         help=f"default {f.default}")


def resolve_config(args) -> ExperimentConfig | None:
    """The config named by the flags, or None when no flag asks for one."""
    if args.config is not None:
        try:
            cfg = ExperimentConfig.from_dict(json.loads(args.config.read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    elif args.smoke:
        cfg = smoke_config()
    elif args.command in ("generate", "all"):
        cfg = ExperimentConfig()
    else:
        cfg = None
    if args.seed is not None:
        cfg = replace(cfg or _stored(args.out), seed=args.seed)
    if getattr(args, "tasks", None):
        cfg = replace(cfg, counts=args.tasks)
    overrides = {f.name: getattr(args, f"gen_{f.name}") for f in fields(GeneratorConfig)
                 if getattr(args, f"gen_{f.name}", None) is not None}
    if overrides:
        try:
            cfg = replace(cfg, generator=replace(cfg.generator, **overrides))
        except ValueError as exc:
            raise UsageError(f"bad generator setting: {exc}") from None
    return cfg


def _stored(out: Path) -> ExperimentConfig:
    path = Path(out) / "config.json"
    if not path.exists():
        raise UsageError(f"no run in {out}; run `metaocc generate --out {out}` first")
    return ExperimentConfig.from_dict(json.loads(path.read_text()))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        wanted = resolve_config(args)
        if args.command in ("generate", "all"):
            cfg = wanted
        else:
            cfg = _stored(args.out)
            if wanted is not None and wanted.config_hash != cfg.config_hash:
                raise UsageError(f"{args.out} was generated with a different config; "
                                 "re-run `metaocc generate --force` with the new settings")
        run = Run(args.out, cfg)
        if args.command == "all":
            rows = run_pipeline(args.out, cfg, args.force, args.jobs)
            print(format_table(rows), end="")
        elif args.command == "generate":
            cmd_generate(run, args.force)
        elif args.command == "train":
            cmd_train(run, args.jobs)
        elif args.command == "report":
            print(format_table(cmd_report(run)), end="")
        else:
            {"select": cmd_select, "eval": cmd_eval, "baseline": cmd_baseline,
             "finetune": cmd_finetune}[args.command](run)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
