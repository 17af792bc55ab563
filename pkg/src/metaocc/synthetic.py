"""Parametric stand-in for simulated stellar-stream tasks.

Each task places its positives along a random smooth cubic curve in the two
"position" dimensions (with small jitter) and gives them a compact, slowly
drifting cluster signature in a few of the remaining "motion/colour"
dimensions.  The rest of the non-position dimensions carry no signal.
Negatives fill the position box uniformly and follow a uniform + broad
Gaussian mixture elsewhere.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .tasks import (MetaSplit, Task, TaskSplit, load_tasks, make_test_split, read_split_manifest,
                    write_split_manifest, write_task_csv)

N_POSITION_DIMS = 2


@dataclass(frozen=True)
class GeneratorConfig:
    n_features: int = 10
    positives_min: int = 90
    positives_max: int = 920
    ratio: float = 150.0
    curve_order: int = 3
    curve_noise: float = 0.02
    box: float = 1.0
    n_informative: int = 4
    cluster_noise: float = 0.3
    drift_scale: float = 0.3
    center_range: float = 1.5
    background_uniform: float = 0.5
    background_halfwidth: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if self.n_features < N_POSITION_DIMS + 1:
            raise ValueError(f"need at least {N_POSITION_DIMS + 1} features")
        if self.ratio < 1:
            raise ValueError("ratio must be >= 1")
        if min(self.curve_noise, self.cluster_noise, self.box) <= 0:
            raise ValueError("noise scales and box must be positive")
        if not 1 <= self.positives_min <= self.positives_max:
            raise ValueError("need 1 <= positives_min <= positives_max")
        if not 0 <= self.n_informative <= self.n_features - N_POSITION_DIMS:
            raise ValueError("n_informative exceeds the non-position dimensions")
        if self.curve_order < 1:
            raise ValueError("curve_order must be >= 1")
        if not 0 <= self.background_uniform <= 1:
            raise ValueError("background_uniform is a mixture weight in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class SyntheticTaskRecipe:
    """Everything needed to regenerate one task exactly."""

    task_id: str
    n_positive: int
    n_negative: int
    control_points: list[list[float]]
    curve_noise: float
    informative: list[int]
    cluster_center: list[float]
    cluster_scale: list[float]
    cluster_drift: list[float]
    background_scale: list[float]
    background_uniform: float
    background_halfwidth: float
    box: float
    sample_seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticTaskRecipe:
        return cls(**d)


@dataclass(frozen=True)
class ShiftDescriptor:
    """Multiplicative changes to a recipe; the all-ones default is no shift."""

    cluster_scale: float = 1.0
    curve_noise: float = 1.0
    drift: float = 1.0
    center_offset: float = 0.0

    @classmethod
    def strong(cls) -> ShiftDescriptor:
        # tight motion signature, noisier track, stronger drift along the track
        return cls(cluster_scale=0.5, curve_noise=3.0, drift=2.0, center_offset=0.0)


def curve_points(control: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Evaluate the polynomial through ``control`` points placed at equal
    parameter spacing on [0, 1] (Lagrange form)."""
    control = np.asarray(control, dtype=np.float64)
    nodes = np.linspace(0.0, 1.0, control.shape[0])
    basis = np.ones((t.size, nodes.size))
    for j, tj in enumerate(nodes):
        for m, tm in enumerate(nodes):
            if m != j:
                basis[:, j] *= (t - tm) / (tj - tm)
    return basis @ control


def draw_recipe(cfg: GeneratorConfig, seed: int, task_id: str,
                n_positive: int | None = None) -> SyntheticTaskRecipe:
    rng = np.random.default_rng([seed, cfg.seed])
    n_rest = cfg.n_features - N_POSITION_DIMS
    if n_positive is None:
        n_positive = int(rng.integers(cfg.positives_min, cfg.positives_max + 1))
    else:
        rng.integers(cfg.positives_min, cfg.positives_max + 1)
    control = rng.uniform(-0.8 * cfg.box, 0.8 * cfg.box, size=(cfg.curve_order + 1, N_POSITION_DIMS))
    informative = np.sort(rng.choice(n_rest, size=cfg.n_informative, replace=False))
    return SyntheticTaskRecipe(
        task_id=task_id,
        n_positive=n_positive,
        n_negative=int(round(cfg.ratio * n_positive)),
        control_points=control.tolist(),
        curve_noise=cfg.curve_noise,
        informative=informative.tolist(),
        cluster_center=rng.uniform(-cfg.center_range, cfg.center_range, size=cfg.n_informative).tolist(),
        cluster_scale=(cfg.cluster_noise * rng.uniform(0.5, 1.5, size=cfg.n_informative)).tolist(),
        cluster_drift=rng.normal(0.0, cfg.drift_scale, size=cfg.n_informative).tolist(),
        background_scale=rng.uniform(0.8, 1.2, size=n_rest).tolist(),
        background_uniform=cfg.background_uniform,
        background_halfwidth=cfg.background_halfwidth,
        box=cfg.box,
        sample_seed=int(rng.integers(2**63 - 1)),
    )


def _background(rng, n: int, r: SyntheticTaskRecipe) -> np.ndarray:
    n_rest = len(r.background_scale)
    pos = rng.uniform(-r.box, r.box, size=(n, N_POSITION_DIMS))
    gauss = rng.normal(size=(n, n_rest)) * np.asarray(r.background_scale)
    unif = rng.uniform(-r.background_halfwidth, r.background_halfwidth, size=(n, n_rest))
    pick = rng.random((n, n_rest)) < r.background_uniform
    return np.hstack([pos, np.where(pick, unif, gauss)])


def sample_positives(rng, n: int, r: SyntheticTaskRecipe) -> tuple[np.ndarray, np.ndarray]:
    """Positives and their curve parameters ``t``."""
    t = rng.random(n)
    pos = curve_points(np.asarray(r.control_points), t)
    pos = pos + rng.normal(scale=r.curve_noise, size=pos.shape)
    rest = _background(rng, n, r)[:, N_POSITION_DIMS:]
    inf = np.asarray(r.informative, dtype=np.int64)
    if inf.size:
        centre = np.asarray(r.cluster_center) + np.outer(t - 0.5, r.cluster_drift)
        rest[:, inf] = centre + rng.normal(size=(n, inf.size)) * np.asarray(r.cluster_scale)
    return np.hstack([pos, rest]), t


def realize(r: SyntheticTaskRecipe) -> Task:
    """Rows are shuffled so labels are not ordered in the file."""
    rng = np.random.default_rng(r.sample_seed)
    pos, _ = sample_positives(rng, r.n_positive, r)
    neg = _background(rng, r.n_negative, r)
    x = np.vstack([pos, neg])
    y = np.concatenate([np.ones(r.n_positive, dtype=np.int64), np.zeros(r.n_negative, dtype=np.int64)])
    order = rng.permutation(y.size)
    return Task(r.task_id, x[order], y[order])


def generate_task(cfg: GeneratorConfig, seed: int, task_id: str | None = None,
                  n_positive: int | None = None) -> tuple[Task, SyntheticTaskRecipe]:
    recipe = draw_recipe(cfg, seed, task_id or f"task_{seed}", n_positive)
    return realize(recipe), recipe


def distance_to_curve(points: np.ndarray, control, grid: int = 2001) -> np.ndarray:
    """Euclidean distance of each 2-D point to a dense sampling of the curve."""
    c = curve_points(np.asarray(control), np.linspace(0.0, 1.0, grid))
    p = np.asarray(points)[:, :N_POSITION_DIMS]
    d2 = (p * p).sum(1)[:, None] - 2 * p @ c.T + (c * c).sum(1)[None, :]
    return np.sqrt(np.maximum(d2.min(axis=1), 0.0))


def task_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, np.uint64)[0] >> 1)


@dataclass
class Benchmark:
    tasks: dict[str, Task]
    recipes: dict[str, SyntheticTaskRecipe]
    meta_split: MetaSplit
    task_splits: dict[str, TaskSplit] = field(default_factory=dict)

    def group(self, name: str) -> list[Task]:
        return [self.tasks[t] for t in getattr(self.meta_split, name)]


def make_benchmark(cfg: GeneratorConfig, counts=(46, 7, 8), master_seed: int = 0,
                   support_fraction: float = 0.1) -> Benchmark:
    """Generate train/validation/test tasks from one distribution, plus the
    evaluation splits of validation and test tasks."""
    if min(counts) < 1:
        raise ValueError("every meta split needs at least one task")
    tasks, recipes = {}, {}
    names = []
    for i in range(sum(counts)):
        tid = f"stream_{i:03d}"
        tasks[tid], recipes[tid] = generate_task(cfg, task_seed(master_seed, i), tid)
        names.append(tid)
    a, b = counts[0], counts[0] + counts[1]
    split = MetaSplit(names[:a], names[a:b], names[b:])
    task_splits = {
        tid: make_test_split(tasks[tid], support_fraction, seed=task_seed(master_seed, 10_000 + i))
        for i, tid in enumerate(names) if i >= a
    }
    return Benchmark(tasks, recipes, split, task_splits)


def write_benchmark(bench: Benchmark, out_dir, cfg: GeneratorConfig, force: bool = False) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists; pass --force to overwrite")
        shutil.rmtree(out)
    (out / "tasks").mkdir(parents=True, exist_ok=True)
    for tid, t in bench.tasks.items():
        write_task_csv(out / "tasks" / f"{tid}.csv", t)
    bench.meta_split.write(out / "meta_split.csv")
    write_split_manifest(out / "task_splits.csv", bench.task_splits)
    doc = {"generator": asdict(cfg), "recipes": [r.to_dict() for r in bench.recipes.values()]}
    (out / "recipes.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return out


def generate_benchmark(cfg: GeneratorConfig, out_dir, counts=(46, 7, 8), master_seed: int = 0,
                       force: bool = False) -> MetaSplit:
    bench = make_benchmark(cfg, counts, master_seed)
    write_benchmark(bench, out_dir, cfg, force)
    return bench.meta_split


def read_benchmark(data_dir) -> Benchmark:
    """Inverse of :func:`write_benchmark` (task rows round-trip exactly)."""
    d = Path(data_dir)
    tasks = {t.task_id: t for t in load_tasks(d / "tasks")}
    return Benchmark(tasks, read_recipes(d / "recipes.json"), MetaSplit.read(d / "meta_split.csv"),
                     read_split_manifest(d / "task_splits.csv"))


def read_recipes(path) -> dict[str, SyntheticTaskRecipe]:
    doc = json.loads(Path(path).read_text())
    return {d["task_id"]: SyntheticTaskRecipe.from_dict(d) for d in doc["recipes"]}


def apply_shift(r: SyntheticTaskRecipe, shift: ShiftDescriptor) -> SyntheticTaskRecipe:
    return replace(
        r,
        curve_noise=r.curve_noise * shift.curve_noise,
        cluster_scale=[s * shift.cluster_scale for s in r.cluster_scale],
        cluster_drift=[d * shift.drift for d in r.cluster_drift],
        cluster_center=[c + shift.center_offset for c in r.cluster_center],
    )


def generate_shifted_task(cfg: GeneratorConfig, shift: ShiftDescriptor | None = None, seed: int = 0,
                          support_size: int = 197, train_negative_ratio: float = 400.0,
                          eval_positives: int = 200, eval_ratio: float = 150.0,
                          task_id: str = "shifted") -> tuple[Task, TaskSplit, SyntheticTaskRecipe]:
    """A distribution-shifted evaluation task with its split built in.

    The split holds ``support_size`` positives, a negative training set at
    ``1:train_negative_ratio``, and a self-labeling pool and final test each
    with ``eval_positives`` positives at ``1:eval_ratio``.
    """
    shift = shift or ShiftDescriptor()
    n_pos = support_size + 2 * eval_positives
    base = draw_recipe(cfg, seed, task_id, n_positive=n_pos)
    n_train_neg = int(round(train_negative_ratio * support_size))
    n_eval_neg = int(round(eval_ratio * eval_positives))
    recipe = replace(apply_shift(base, shift), n_negative=n_train_neg + 2 * n_eval_neg)

    rng = np.random.default_rng(recipe.sample_seed)
    pos, _ = sample_positives(rng, recipe.n_positive, recipe)
    neg = _background(rng, recipe.n_negative, recipe)
    x = np.vstack([pos, neg])
    y = np.concatenate([np.ones(n_pos, dtype=np.int64), np.zeros(recipe.n_negative, dtype=np.int64)])
    task = Task(task_id, x, y)
    p = np.arange(n_pos)
    n = n_pos + np.arange(recipe.n_negative)
    e1, e2 = support_size + eval_positives, n_train_neg + n_eval_neg
    split = TaskSplit(
        support=p[:support_size],
        baseline_negatives=n[:n_train_neg],
        pool=np.concatenate([p[support_size:e1], n[n_train_neg:e2]]),
        final_test=np.concatenate([p[e1:], n[e2:]]),
    )
    return task, split, recipe


def write_shifted_task(out_dir, task: Task, split: TaskSplit, recipe: SyntheticTaskRecipe) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_task_csv(out / "task.csv", task)
    write_split_manifest(out / "split.csv", {task.task_id: split})
    (out / "recipe.json").write_text(json.dumps(recipe.to_dict(), indent=1, sort_keys=True) + "\n")


def read_shifted_task(out_dir) -> tuple[Task, TaskSplit]:
    out = Path(out_dir)
    (task,) = load_tasks(out / "task.csv")
    return task, read_split_manifest(out / "split.csv")[task.task_id]
