"""Meta-training, meta-validation model selection, zero-shot prediction and fine-tuning."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .metrics import METRIC_NAMES, Scorecard, aggregate, score_predictions
from .model import DeepSetsNet, ModelConfig, build, save_net, score_queries
from .numerics import Adam, NumericalError, Segments, Tape
from .tasks import EvalTask, MetaInstances, SupportSampling, Task, instances_for_task, make_meta_instances

log = logging.getLogger(__name__)

PROB_CLAMP = nx.PROB_CLAMP


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    l1: float = 1e-6
    pos_weight: float = 1.0
    epochs: int = 100
    batch_size: int = 64
    imbalance: float = 50.0
    positive_copies: int = 1
    min_k: int = 8
    max_k: int = 100
    seed: int = 0
    select_by: str = "f1"
    augment: float = 0.0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for name in ("lr", "pos_weight", "epochs", "batch_size", "imbalance", "positive_copies"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.l1 < 0 or self.augment < 0:
            raise ValueError("l1 and augment must be non-negative")
        if self.select_by not in METRIC_NAMES:
            raise ValueError(f"select_by must be one of {METRIC_NAMES}")

    @property
    def sampling(self) -> SupportSampling:
        return SupportSampling(self.min_k, self.max_k)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if isinstance(d.get("model"), dict):
            d["model"] = ModelConfig(**d["model"])
        return cls(**d)


def loss(probability: float, label: int, pos_weight: float = 1.0) -> float:
    """Class-weighted cross-entropy of one prediction (probability clamped away from 0 and 1)."""
    p = min(max(probability, PROB_CLAMP), 1.0 - PROB_CLAMP)
    return -(pos_weight * label * math.log(p) + (1 - label) * math.log1p(-p))


def predict_task(net: DeepSetsNet, support, queries) -> np.ndarray:
    """Zero-shot positive probabilities: every query is paired with the full support set."""
    support = np.atleast_2d(np.asarray(support, dtype=np.float64))
    if support.shape[0] == 0 or support.size == 0:
        raise ValueError("support set is empty")
    return score_queries(net, support, queries)


def evaluate(net: DeepSetsNet, tasks: list[EvalTask], part: str = "final_test") -> list[Scorecard]:
    cards = []
    for t in tasks:
        X, y = t.rows(part)
        p = predict_task(net, t.X[t.split.support], X)
        cards.append(score_predictions((p >= 0.5).astype(np.int64), y, t.task_id))
    return cards


def train_step(net: DeepSetsNet, opt: Adam, rows, queries, seg: Segments, labels, pos_weight: float) -> float:
    with Tape():
        out = nx.weighted_bce(net.logits(rows, queries, seg), labels, pos_weight)
    nx.backward(out)
    opt.step(net.params)
    return out.item()


def jitter(rows, queries, seg: Segments, scale: float, rng: np.random.Generator):
    """Random per-instance sign flip and shift of every feature, applied identically
    to an instance's support rows and query.  Only relative geometry survives, so
    the network cannot memorize where a training task's positives live."""
    sign = rng.choice([-1.0, 1.0], size=queries.shape)
    shift = rng.normal(scale=scale, size=queries.shape)
    return (rows * sign[seg.ids] + shift[seg.ids], queries * sign + shift)


def run_epoch(net: DeepSetsNet, opt: Adam, inst: MetaInstances, batch_size: int, pos_weight: float,
              rng: np.random.Generator, augment: float = 0.0) -> float:
    order = rng.permutation(len(inst))
    total, count = 0.0, 0
    for start in range(0, order.size, batch_size):
        idx = order[start:start + batch_size]
        rows, q, seg, lab = inst.batch(idx)
        if augment > 0:
            rows, q = jitter(rows, q, seg, augment, rng)
        value = train_step(net, opt, rows, q, seg, lab, pos_weight)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss at batch starting {start}")
        total += value * idx.size
        count += idx.size
    return total / count


@dataclass
class EpochChoice:
    epoch: int
    card: Scorecard
    state: dict = field(repr=False)


@dataclass
class TrainResult:
    net: DeepSetsNet
    config: TrainConfig
    history: list[dict]
    best: dict[str, EpochChoice]

    def net_for(self, criterion: str) -> DeepSetsNet:
        """Copy of the network at the epoch that maximized ``criterion`` on meta-validation."""
        out = self.net.copy()
        if criterion in self.best:
            out.params.load_state(self.best[criterion].state)
        return out

    @property
    def selected(self) -> DeepSetsNet:
        return self.net_for(self.config.select_by)

    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


LOG_COLUMNS = ("epoch", "loss") + METRIC_NAMES


def meta_train(net: DeepSetsNet, train_tasks: list[Task], cfg: TrainConfig,
               val_tasks: list[EvalTask] | None = None, run_dir=None,
               config_hash: str = "") -> TrainResult:
    """Minimize weighted cross-entropy over episodic instances.

    Each epoch draws a fresh instance stream (new support subsets, new negative
    subsample) and visits it in shuffled mini-batches.  With ``val_tasks`` the
    epoch maximizing each metric on meta-validation is remembered; ``run_dir``
    receives a checkpoint per epoch and an append-only CSV log.
    """
    opt = Adam(cfg.lr, cfg.l1)
    history: list[dict] = []
    best: dict[str, EpochChoice] = {}
    ckpt_dir = log_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "log.csv"
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_COLUMNS)
    for epoch in range(1, cfg.epochs + 1):
        inst = make_meta_instances(train_tasks, cfg.imbalance, cfg.sampling,
                                   seed=_mix(cfg.seed, epoch), positive_copies=cfg.positive_copies)
        rng = np.random.default_rng([cfg.seed, epoch, 1])
        try:
            mean_loss = run_epoch(net, opt, inst, cfg.batch_size, cfg.pos_weight, rng, cfg.augment)
        except NumericalError:
            if run_dir is not None:
                save_net(run_dir / f"nan_epoch_{epoch:03d}.ckpt", net, {"config_hash": config_hash})
            raise
        rec = {"epoch": epoch, "loss": mean_loss}
        if val_tasks:
            card = aggregate(evaluate(net, val_tasks))
            rec.update(card.as_dict())
            for c in METRIC_NAMES:
                if c not in best or card[c] > best[c].card[c]:
                    best[c] = EpochChoice(epoch, card, net.params.state())
        history.append(rec)
        log.info("epoch %d loss %.5f %s", epoch, mean_loss,
                 f"val f1 {rec['f1']:.4f}" if val_tasks else "")
        if ckpt_dir is not None:
            save_net(ckpt_dir / f"epoch_{epoch:03d}.ckpt", net,
                     {"config_hash": config_hash, "epoch": epoch, "train": cfg.to_dict()})
            cells = [str(epoch), repr(mean_loss)] + [repr(rec[c]) if c in rec else "" for c in METRIC_NAMES]
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(cells)
    return TrainResult(net, cfg, history, best)


def _mix(*ints: int) -> int:
    return int(np.random.SeedSequence(list(ints)).generate_state(1, np.uint64)[0] >> 1)


@dataclass(frozen=True)
class TrainGrid:
    lr: tuple[float, ...] = (1e-3, 1e-4)
    l1: tuple[float, ...] = (1e-5, 1e-6)
    pos_weight: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)

    def configs(self, base: TrainConfig) -> list[TrainConfig]:
        return [replace(base, lr=a, l1=b, pos_weight=c)
                for a, b, c in itertools.product(self.lr, self.l1, self.pos_weight)]


@dataclass
class GridRow:
    index: int
    config: TrainConfig
    best: dict[str, tuple[int, float]]
    card: Scorecard


@dataclass
class SelectionReport:
    rows: list[GridRow]

    def chosen(self, criterion: str) -> tuple[int, int]:
        """(config index, epoch) maximizing ``criterion``; lowest index wins ties."""
        vals = [r.best[criterion][1] for r in self.rows]
        i = int(np.argmax(vals))
        return self.rows[i].index, self.rows[i].best[criterion][0]

    def chosen_all(self) -> dict[str, tuple[int, int]]:
        return {c: self.chosen(c) for c in METRIC_NAMES}

    def to_csv(self) -> str:
        lines = ["index,lr,l1,pos_weight," + ",".join(f"{c}_epoch,{c}" for c in METRIC_NAMES)]
        for r in self.rows:
            cells = [str(r.index), repr(r.config.lr), repr(r.config.l1), repr(r.config.pos_weight)]
            for c in METRIC_NAMES:
                e, v = r.best[c]
                cells += [str(e), repr(float(v))]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        out = [f"{len(self.rows)} configurations"]
        for c, (i, e) in self.chosen_all().items():
            r = self.rows[i]
            out.append(f"best meta {c}: config {i} (lr={r.config.lr:g}, l1={r.config.l1:g}, "
                       f"w+={r.config.pos_weight:g}) epoch {e} -> {r.best[c][1]:.4f}")
        return "\n".join(out) + "\n"


def _train_one(args) -> tuple[int, TrainResult]:
    i, cfg, n_features, train_tasks, val_tasks, run_dir, config_hash = args
    net = build(n_features, cfg.model, seed=cfg.seed)
    sub = None if run_dir is None else Path(run_dir) / f"config_{i:02d}"
    return i, meta_train(net, train_tasks, cfg, val_tasks, sub, config_hash)


def grid_search(configs: list[TrainConfig], train_tasks: list[Task], val_tasks: list[EvalTask],
                run_dir=None, n_jobs: int = 1, config_hash: str = "") -> tuple[SelectionReport, list[TrainResult]]:
    """Train every configuration and rank them on meta-validation."""
    if not val_tasks:
        raise ValueError("grid search needs validation tasks")
    n_features = train_tasks[0].n_features
    jobs = [(i, c, n_features, train_tasks, val_tasks, run_dir, config_hash) for i, c in enumerate(configs)]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            done = dict(ex.map(_train_one, jobs))
    else:
        done = dict(map(_train_one, jobs))
    results = [done[i] for i in range(len(configs))]
    rows = []
    for i, res in enumerate(results):
        best = {c: (res.best[c].epoch, res.best[c].card[c]) for c in METRIC_NAMES}
        rows.append(GridRow(i, configs[i], best, res.best[configs[i].select_by].card))
    return SelectionReport(rows), results


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v) if v else math.nan) for k, v in rec.items()}
                for rec in csv.DictReader(fh)]


def selection_from_logs(configs: list[TrainConfig], run_dir) -> SelectionReport:
    """Rebuild the grid ranking from the per-configuration logs under ``run_dir``."""
    rows = []
    for i, cfg in enumerate(configs):
        path = Path(run_dir) / f"config_{i:02d}" / "log.csv"
        recs = read_log(path)
        if not recs or math.isnan(recs[0]["f1"]):
            raise ValueError(f"{path}: no meta-validation scores")
        best = {}
        for c in METRIC_NAMES:
            top = max(recs, key=lambda r: r[c])  # first maximum -> earliest epoch
            best[c] = (top["epoch"], top[c])
        e = best[cfg.select_by][0]
        rec = recs[e - 1]
        rows.append(GridRow(i, cfg, best, Scorecard(**{c: rec[c] for c in METRIC_NAMES})))
    return SelectionReport(rows)


@dataclass(frozen=True)
class FineTuneConfig:
    base_lr: float = 1e-3
    factor: float = 50.0
    passes: int = 3
    pos_weight: float = 1.0
    l1: float = 0.0
    batch_size: int = 64
    min_k: int = 8
    max_k: int = 100
    seed: int = 0

    @property
    def lr(self) -> float:
        return self.base_lr / 2.0


@dataclass
class FineTuneResult:
    net: DeepSetsNet
    config: FineTuneConfig
    history: list[dict]
    scores: list[Scorecard]
    states: list[dict] = field(repr=False)

    def best_epoch(self, criterion: str = "f1") -> int:
        """Epoch (0 = untouched base model) maximizing ``criterion`` on the training split."""
        return int(np.argmax([s[criterion] for s in self.scores]))

    def net_for(self, criterion: str = "f1") -> DeepSetsNet:
        out = self.net.copy()
        out.params.load_state(self.states[self.best_epoch(criterion)])
        return out


def training_split_score(net: DeepSetsNet, support: np.ndarray, negatives: np.ndarray) -> Scorecard:
    """Score on the fine-tuning data itself; each support positive is judged
    against the remaining support examples only."""
    k = support.shape[0]
    if k > 1:
        keep = ~np.eye(k, dtype=bool)
        rows = np.vstack([support[keep[i]] for i in range(k)])
        p_pos = net.probabilities(rows, support, Segments(np.full(k, k - 1)))
    else:
        p_pos = predict_task(net, support, support)
    p_neg = predict_task(net, support, negatives)
    pred = np.concatenate([p_pos, p_neg]) >= 0.5
    y = np.concatenate([np.ones(k, np.int64), np.zeros(negatives.shape[0], np.int64)])
    return score_predictions(pred.astype(np.int64), y)


def fine_tune(net: DeepSetsNet, support, negatives, ftc: FineTuneConfig) -> FineTuneResult:
    """Continue training on one task with its own negative supervision.

    Every epoch uses all support positives plus ``|support| * factor`` freshly
    sampled negatives; epochs continue until the negatives drawn add up to
    ``passes`` times the negative set.  Each epoch, epoch 0 included, is scored on
    the training split so selection can never do worse than the base model.
    """
    support = np.atleast_2d(np.asarray(support, dtype=np.float64))
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negatives.shape[0] == 0 or negatives.size == 0:
        raise ValueError("fine-tuning needs a non-empty negative set")
    k, n_neg = support.shape[0], negatives.shape[0]
    work = net.copy()
    opt = Adam(ftc.lr, ftc.l1)
    task = Task("fine_tune", np.vstack([support, negatives]),
                np.concatenate([np.ones(k, np.int64), np.zeros(n_neg, np.int64)]))
    sampling = SupportSampling(min(ftc.min_k, max(1, k - 1)), ftc.max_k)
    per_epoch = int(round(k * ftc.factor))
    scores = [training_split_score(work, support, negatives)]
    states = [work.params.state()]
    history = [{"epoch": 0, "loss": float("nan"), "negatives_seen": 0}]
    seen, epoch = 0, 0
    while seen < ftc.passes * n_neg:
        epoch += 1
        rng = np.random.default_rng([ftc.seed, epoch])
        neg_rows = k + rng.choice(n_neg, size=per_epoch, replace=per_epoch > n_neg)
        rows = np.concatenate([np.arange(k), neg_rows])
        subsets, sizes = instances_for_task(task, rows, sampling, rng)
        inst = MetaInstances(
            pools=[support], task_ids=[task.task_id], task_index=np.zeros(rows.size, np.int64),
            queries=task.features[rows], labels=task.labels[rows],
            support_ptr=np.concatenate([[0], np.cumsum(sizes)]),
            support_flat=np.concatenate(subsets).astype(np.int64))
        mean_loss = run_epoch(work, opt, inst, ftc.batch_size, ftc.pos_weight, rng)
        seen += per_epoch
        scores.append(training_split_score(work, support, negatives))
        states.append(work.params.state())
        history.append({"epoch": epoch, "loss": mean_loss, "negatives_seen": seen})
        log.info("fine-tune factor %g epoch %d loss %.5f train f1 %.4f",
                 ftc.factor, epoch, mean_loss, scores[-1].f1)
    return FineTuneResult(work, ftc, history, scores, states)
