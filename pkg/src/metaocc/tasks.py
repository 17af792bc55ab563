"""Tasks, per-task normalization, episodic instance streams and evaluation splits.

A :class:`Task` holds every labelled example of one one-class problem.  Its
support pool (the known positives) and its query set are index arrays into
those rows, so splits and manifests can always refer back to file rows.

Normalization is transductive on purpose: the z-score statistics come from
*all* rows of the task, query rows included.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .numerics import Segments

log = logging.getLogger(__name__)

PARTS = ("support", "baseline_negatives", "pool", "final_test")


class DataError(ValueError):
    """Malformed or unusable task data."""


@dataclass
class Task:
    task_id: str
    features: np.ndarray
    labels: np.ndarray
    support_idx: np.ndarray | None = None
    query_idx: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.size:
            raise DataError(f"task {self.task_id}: {self.features.shape[0]} rows, {self.labels.size} labels")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError(f"task {self.task_id}: labels must be 0/1")
        if self.support_idx is None:
            self.support_idx = np.flatnonzero(self.labels == 1)
        if self.query_idx is None:
            self.query_idx = np.arange(self.labels.size)
        self.support_idx = np.asarray(self.support_idx, dtype=np.int64)
        self.query_idx = np.asarray(self.query_idx, dtype=np.int64)
        if self.support_idx.size < 1:
            raise DataError(f"task {self.task_id}: no positive examples")
        if np.any(self.labels[self.support_idx] != 1):
            raise DataError(f"task {self.task_id}: support rows must be positives")

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def k(self) -> int:
        return self.support_idx.size

    @property
    def m(self) -> int:
        return self.query_idx.size

    @property
    def positives(self) -> np.ndarray:
        return self.features[self.support_idx]

    @property
    def queries(self) -> np.ndarray:
        return self.features[self.query_idx]

    @property
    def query_labels(self) -> np.ndarray:
        return self.labels[self.query_idx]

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return int(self.labels.size - self.labels.sum())


def _example_rows(t: Task) -> np.ndarray:
    return np.union1d(t.support_idx, t.query_idx)


def normalize_task(t: Task) -> Task:
    """Z-score each feature over all of the task's examples.

    Zero-variance features are centred but not scaled.  Statistics compose,
    so :func:`denormalize_task` always returns the original raw values.
    """
    rows = _example_rows(t)
    if rows.size < 2:
        raise DataError(f"task {t.task_id}: need >= 2 examples to normalize")
    x = t.features[rows]
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    feats = (t.features - mu) / sd
    base_mu = t.mean if t.mean is not None else np.zeros_like(mu)
    base_sd = t.std if t.std is not None else np.ones_like(sd)
    return replace(t, features=feats, mean=base_mu + base_sd * mu, std=base_sd * sd)


def denormalize_task(t: Task) -> Task:
    if t.mean is None:
        return t
    return replace(t, features=t.features * t.std + t.mean, mean=None, std=None)


@dataclass(frozen=True)
class SupportSampling:
    """Support-set sizes are drawn uniformly from ``[min_k, min(available, max_k)]``."""

    min_k: int = 8
    max_k: int = 100

    def __post_init__(self):
        if not 1 <= self.min_k <= self.max_k:
            raise ValueError("need 1 <= min_k <= max_k")


@dataclass
class MetaInstances:
    """A packed stream of paired instances.

    ``support_flat[support_ptr[i]:support_ptr[i+1]]`` are row indices into
    ``pools[task_index[i]]`` forming instance ``i``'s support set.
    """

    pools: list[np.ndarray]
    task_ids: list[str]
    task_index: np.ndarray
    queries: np.ndarray
    labels: np.ndarray
    support_ptr: np.ndarray
    support_flat: np.ndarray
    query_rows: np.ndarray | None = None

    def __len__(self) -> int:
        return self.labels.size

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return len(self) - self.n_positive

    def support_sizes(self) -> np.ndarray:
        return np.diff(self.support_ptr)

    def support_of(self, i: int) -> np.ndarray:
        idx = self.support_flat[self.support_ptr[i]:self.support_ptr[i + 1]]
        return self.pools[self.task_index[i]][idx]

    def instance(self, i: int):
        from .model import PairedInstance

        return PairedInstance(self.support_of(i), self.queries[i], int(self.labels[i]),
                              self.task_ids[self.task_index[i]])

    def __iter__(self):
        for i in range(len(self)):
            yield self.instance(i)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray, Segments, np.ndarray]:
        """Packed ``(support_rows, queries, segments, labels)`` for instances ``idx``."""
        idx = np.asarray(idx, dtype=np.int64)
        sizes = self.support_ptr[idx + 1] - self.support_ptr[idx]
        seg = Segments(sizes)
        starts = np.repeat(self.support_ptr[idx], sizes)
        flat = self.support_flat[starts + (np.arange(seg.total_rows) - np.repeat(seg.offsets, sizes))]
        owner = self.task_index[idx]
        if len(self.pools) == 1:
            rows = self.pools[0][flat]
        else:
            rows = np.empty((flat.size, self.queries.shape[1]))
            owner_rows = np.repeat(owner, sizes)
            for t in np.unique(owner):
                sel = owner_rows == t
                rows[sel] = self.pools[t][flat[sel]]
        return rows, self.queries[idx], seg, self.labels[idx]


def _sample_supports(rng, k: int, exclude: np.ndarray, sizes: np.ndarray) -> list[np.ndarray]:
    """Uniform subsets of ``range(k)`` of the given sizes; ``exclude[i]`` (>= 0) is
    never chosen for instance ``i``."""
    out: list[np.ndarray] = []
    if sizes.size == 0:
        return out
    top = int(sizes.max())
    chunk = max(1, 2_000_000 // k)
    for start in range(0, sizes.size, chunk):
        stop = min(start + chunk, sizes.size)
        keys = rng.random((stop - start, k))
        has = exclude[start:stop] >= 0
        keys[np.flatnonzero(has), exclude[start:stop][has]] = np.inf
        # the `top` smallest keys, in key order, give nested uniform subsets
        if top < k:
            cand = np.argpartition(keys, top - 1, axis=1)[:, :top]
        else:
            cand = np.broadcast_to(np.arange(k), keys.shape)
        ck = np.take_along_axis(keys, cand, axis=1)
        cand = np.take_along_axis(cand, np.argsort(ck, axis=1, kind="stable"), axis=1)
        out.extend(cand[i, :s].copy() for i, s in enumerate(sizes[start:stop]))
    return out


def instances_for_task(t: Task, query_rows: np.ndarray, sampling: SupportSampling, rng,
                       support_rows: np.ndarray | None = None) -> tuple[list[np.ndarray], np.ndarray]:
    """Draw one support subset per query row.

    A query that is itself in the support pool is excluded from its own set.
    Returns (list of index arrays into ``support_rows``, support sizes).
    """
    pool_rows = t.support_idx if support_rows is None else support_rows
    k = pool_rows.size
    where = {int(r): i for i, r in enumerate(pool_rows)}
    exclude = np.array([where.get(int(r), -1) for r in query_rows], dtype=np.int64)
    avail = k - (exclude >= 0)
    hi = np.minimum(avail, sampling.max_k)
    lo = np.minimum(sampling.min_k, hi)
    sizes = rng.integers(lo, hi + 1)
    return _sample_supports(rng, k, exclude, sizes), sizes


def make_meta_instances(tasks: list[Task], imbalance: float = 50.0,
                        sampling: SupportSampling = SupportSampling(), seed: int = 0,
                        positive_copies: int = 1) -> MetaInstances:
    """Build a stream of paired instances at ``1:imbalance`` positive:negative.

    Every positive query appears ``positive_copies`` times, each with a freshly
    drawn support set; negatives are sub-sampled without replacement per task to
    reach the target ratio.  Tasks with fewer than ``min_k + 1`` positives are
    skipped.
    """
    if imbalance <= 0:
        raise ValueError("imbalance must be positive")
    pools, ids, t_index, queries, labels, supports, qrows = [], [], [], [], [], [], []
    for j, t in enumerate(tasks):
        if t.k < sampling.min_k + 1:
            log.warning("task %s skipped: %d positives < min_k + 1 = %d", t.task_id, t.k, sampling.min_k + 1)
            continue
        rng = np.random.default_rng([seed, j])
        ql = t.labels[t.query_idx]
        pos_q = np.repeat(t.query_idx[ql == 1], positive_copies)
        neg_all = t.query_idx[ql == 0]
        n_neg = int(round(imbalance * pos_q.size))
        if n_neg > neg_all.size:
            log.warning("task %s: only %d negatives for %d requested", t.task_id, neg_all.size, n_neg)
            n_neg = neg_all.size
        neg_q = np.sort(rng.choice(neg_all, size=n_neg, replace=False))
        rows = np.concatenate([pos_q, neg_q])
        subsets, _ = instances_for_task(t, rows, sampling, rng)
        slot = len(pools)
        pools.append(t.positives)
        ids.append(t.task_id)
        t_index.append(np.full(rows.size, slot))
        queries.append(t.features[rows])
        labels.append(t.labels[rows])
        supports.extend(subsets)
        qrows.append(rows)
    if not pools:
        raise DataError("no usable tasks for meta-instances")
    sizes = np.array([s.size for s in supports], dtype=np.int64)
    return MetaInstances(
        pools=pools,
        task_ids=ids,
        task_index=np.concatenate(t_index),
        queries=np.vstack(queries),
        labels=np.concatenate(labels),
        support_ptr=np.concatenate([[0], np.cumsum(sizes)]),
        support_flat=np.concatenate(supports).astype(np.int64),
        query_rows=np.concatenate(qrows),
    )


@dataclass
class TaskSplit:
    """Row indices of one evaluation task, partitioned four ways."""

    support: np.ndarray
    baseline_negatives: np.ndarray
    pool: np.ndarray
    final_test: np.ndarray

    def parts(self) -> dict[str, np.ndarray]:
        return {p: getattr(self, p) for p in PARTS}

    @property
    def train(self) -> np.ndarray:
        """Rows a fully supervised baseline may fit on."""
        return np.sort(np.concatenate([self.support, self.baseline_negatives]))

    def check_partition(self, n_rows: int) -> None:
        allrows = np.concatenate(list(self.parts().values()))
        if allrows.size != n_rows or np.unique(allrows).size != n_rows:
            raise DataError("split parts do not partition the task rows")


@dataclass(frozen=True)
class EvalTask:
    """Feature rows and labels of one evaluation task, with its split."""

    task_id: str
    X: np.ndarray
    y: np.ndarray
    split: TaskSplit

    @classmethod
    def from_task(cls, t: Task, split: TaskSplit) -> EvalTask:
        split.check_partition(t.labels.size)
        return cls(t.task_id, t.features, t.labels, split)

    def rows(self, part: str) -> tuple[np.ndarray, np.ndarray]:
        idx = getattr(self.split, part)
        return self.X[idx], self.y[idx]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_test_split(t: Task, support_fraction: float = 0.1, seed: int = 0) -> TaskSplit:
    """Support = a fraction of positives, baseline negatives = the same fraction
    of negatives, and the rest halved (per class) into self-labeling pool and
    final test."""
    pos = np.flatnonzero(t.labels == 1)
    neg = np.flatnonzero(t.labels == 0)
    if pos.size < 5:
        raise DataError(f"task {t.task_id}: {pos.size} positives, need >= 5 for a test split")
    rng = np.random.default_rng(seed)
    pos = rng.permutation(pos)
    neg = rng.permutation(neg)
    n_sup = max(1, _round_half_up(support_fraction * pos.size))
    n_bneg = _round_half_up(support_fraction * neg.size)
    rest_p, rest_n = pos[n_sup:], neg[n_bneg:]
    half_p, half_n = rest_p.size // 2, rest_n.size // 2
    return TaskSplit(
        support=np.sort(pos[:n_sup]),
        baseline_negatives=np.sort(neg[:n_bneg]),
        pool=np.sort(np.concatenate([rest_p[:half_p], rest_n[:half_n]])),
        final_test=np.sort(np.concatenate([rest_p[half_p:], rest_n[half_n:]])),
    )


def write_split_manifest(path, splits: dict[str, TaskSplit]) -> None:
    """One CSV line per (task, part) holding space-separated row indices."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "part", "rows"])
        for tid, sp in splits.items():
            for part, rows in sp.parts().items():
                w.writerow([tid, part, " ".join(map(str, rows.tolist()))])


def read_split_manifest(path) -> dict[str, TaskSplit]:
    parts: dict[str, dict[str, np.ndarray]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows = np.array(rec["rows"].split(), dtype=np.int64)
            parts.setdefault(rec["task_id"], {})[rec["part"]] = rows
    out = {}
    for tid, p in parts.items():
        missing = set(PARTS) - set(p)
        if missing:
            raise DataError(f"{path}: task {tid} lacks parts {sorted(missing)}")
        out[tid] = TaskSplit(**p)
    return out


@dataclass
class MetaSplit:
    train: list[str]
    validation: list[str]
    test: list[str]

    def __post_init__(self):
        groups = [set(self.train), set(self.validation), set(self.test)]
        if sum(map(len, groups)) != len(set().union(*groups)):
            raise DataError("a task id appears in more than one meta split")

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task_id", "split"])
            for name in ("train", "validation", "test"):
                for tid in getattr(self, name):
                    w.writerow([tid, name])

    @classmethod
    def read(cls, path) -> MetaSplit:
        groups = {"train": [], "validation": [], "test": []}
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                if rec["split"] not in groups:
                    raise DataError(f"{path}: unknown split {rec['split']!r}")
                groups[rec["split"]].append(rec["task_id"])
        return cls(**groups)


@dataclass(frozen=True)
class FormatDescriptor:
    """Maps CSV column names to roles; ``features=None`` means every other column."""

    task_id: str = "task_id"
    label: str = "label"
    features: tuple[str, ...] | None = None
    role: str | None = None

    @classmethod
    def read(cls, path) -> FormatDescriptor:
        values = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in ("task_id", "label", "features", "role"):
                raise DataError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = val
        if "features" in values:
            values["features"] = tuple(c.strip() for c in values["features"].split(",") if c.strip())
        return cls(**values)


def _bad_line(mask: np.ndarray) -> int:
    # +2: one header line, 1-based numbering
    return int(np.flatnonzero(mask)[0]) + 2


def _read_task_file(path: Path, fmt: FormatDescriptor) -> list[Task]:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: empty file") from None
    cols = list(df.columns)
    if fmt.label not in cols:
        raise DataError(f"{path}: missing label column {fmt.label!r}")
    if fmt.role is not None and fmt.role not in cols:
        raise DataError(f"{path}: missing role column {fmt.role!r}")
    if fmt.features is not None:
        missing = [c for c in fmt.features if c not in cols]
        if missing:
            raise DataError(f"{path}: missing feature columns {missing}")
        feat_cols = list(fmt.features)
    else:
        skip = {fmt.task_id, fmt.label, fmt.role}
        feat_cols = [c for c in cols if c not in skip]
    if not feat_cols:
        raise DataError(f"{path}: no feature columns")
    if df.empty:
        raise DataError(f"{path}: no data rows")

    lab = df[fmt.label].str.strip()
    bad = ~lab.isin(["0", "1", "0.0", "1.0"]).to_numpy()
    if bad.any():
        line = _bad_line(bad)
        raise DataError(f"{path}:{line}: label {df[fmt.label].iloc[line - 2]!r} is not 0 or 1")
    labels = lab.astype(float).astype(np.int64).to_numpy()

    feats = np.empty((len(df), len(feat_cols)))
    for j, c in enumerate(feat_cols):
        text = df[c].str.strip()
        try:
            # exact decimal parsing; pd.to_numeric may be off by one ulp
            vals = text.to_numpy().astype(np.float64)
        except ValueError:
            vals = pd.to_numeric(text, errors="coerce").to_numpy(dtype=np.float64)
        bad = ~np.isfinite(vals)
        if bad.any():
            line = _bad_line(bad)
            raise DataError(f"{path}:{line}: column {c!r} value {df[c].iloc[line - 2]!r} is not a finite number")
        feats[:, j] = vals

    if fmt.task_id in cols:
        tids = df[fmt.task_id].to_numpy()
    else:
        tids = np.full(len(df), path.stem, dtype=object)
    roles = df[fmt.role].str.strip().to_numpy() if fmt.role else None
    if roles is not None:
        bad = ~np.isin(roles, ["support", "query"])
        if bad.any():
            line = _bad_line(bad)
            raise DataError(f"{path}:{line}: role must be 'support' or 'query'")
        bad = (roles == "support") & (labels != 1)
        if bad.any():
            raise DataError(f"{path}:{_bad_line(bad)}: support row must have label 1")

    tasks = []
    _, first = np.unique(tids, return_index=True)
    for tid in tids[np.sort(first)]:
        rows = np.flatnonzero(tids == tid)
        if labels[rows].sum() == 0:
            raise DataError(f"{path}: task {tid!r} has no positive examples")
        kw = {}
        if roles is not None:
            r = roles[rows]
            kw = {"support_idx": np.flatnonzero(r == "support"), "query_idx": np.flatnonzero(r == "query")}
            if kw["support_idx"].size == 0:
                raise DataError(f"{path}: task {tid!r} has no support rows")
        tasks.append(Task(str(tid), feats[rows], labels[rows], **kw))
    return tasks


def load_tasks(path, fmt: FormatDescriptor | None = None) -> list[Task]:
    """Load tasks from one CSV (grouped by task id column) or a directory of CSVs."""
    path = Path(path)
    fmt = fmt or FormatDescriptor()
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if not files:
            raise DataError(f"{path}: no CSV files")
    elif path.exists():
        files = [path]
    else:
        raise DataError(f"{path}: no such file or directory")
    tasks = []
    for f in files:
        tasks.extend(_read_task_file(f, fmt))
    width = {t.n_features for t in tasks}
    if len(width) > 1:
        raise DataError(f"{path}: tasks disagree on feature count {sorted(width)}")
    return tasks


def write_task_csv(path, t: Task) -> None:
    """Write ``task_id,f0..f{n-1},label`` with round-trip exact float text."""
    n = t.n_features
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["task_id"] + [f"f{i}" for i in range(n)] + ["label"]) + "\n")
        for row, y in zip(t.features.tolist(), t.labels.tolist()):
            fh.write(t.task_id + "," + ",".join(map(repr, row)) + f",{y}\n")
