"""Order-equivariant set classifier conditioned on a support set.

A paired instance is the set ``{[p_1, u], ..., [p_k, u]}`` of support vectors
each concatenated with the query ``u``.  The network applies equivariant
layers ``h -> relu(h @ lam + pool(h) @ gam + b)``, pools the set to a single
row, runs a small dense head, and ends in 2 softmax logits.

Batches are packed: the pairs of all instances are stacked row-wise and a
:class:`~metaocc.numerics.Segments` records which rows belong together.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Matrix, ParamStore, Segments

POOLING_KINDS = ("mean", "sum", "max")


class UnsupportedOperation(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``n_layers`` counts equivariant layers plus head layers; the default 5
    is 3 equivariant + 2 dense head layers, followed by the 2-logit output.
    """

    width: int = 100
    n_layers: int = 5
    n_head: int = 2
    pooling: str = "mean"
    late_concat: bool = False

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.n_head < 0 or self.n_layers - self.n_head < 1:
            raise ValueError("need at least one equivariant layer")
        if self.pooling not in POOLING_KINDS:
            raise ValueError(f"pooling must be one of {POOLING_KINDS}")

    @property
    def n_equivariant(self) -> int:
        return self.n_layers - self.n_head


@dataclass
class PairedInstance:
    """A query fused with a support set of positives from the same task."""

    support: np.ndarray
    query: np.ndarray
    label: int | None = None
    task_id: str = ""

    def __post_init__(self):
        self.support = np.atleast_2d(np.asarray(self.support, dtype=np.float64))
        self.query = np.asarray(self.query, dtype=np.float64).reshape(-1)
        if self.support.shape[0] < 1:
            raise DimensionError("support set must hold at least one example")
        if self.support.shape[1] != self.query.size:
            raise DimensionError(
                f"support width {self.support.shape[1]} != query width {self.query.size}")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")

    @property
    def k(self) -> int:
        return self.support.shape[0]

    @property
    def pairs(self) -> np.ndarray:
        """The ``(k, 2n)`` set of ``[support_i, query]`` rows."""
        return np.hstack([self.support, np.broadcast_to(self.query, self.support.shape)])


@dataclass(frozen=True)
class Prediction:
    probability: float

    @property
    def negative_probability(self) -> float:
        return 1.0 - self.probability

    @property
    def label(self) -> int:
        return int(self.probability >= 0.5)


@dataclass
class DeepSetsNet:
    n_features: int
    config: ModelConfig
    params: ParamStore = field(repr=False)
    seed: int | None = None

    @property
    def input_width(self) -> int:
        return self.n_features if self.config.late_concat else 2 * self.n_features

    def logits(self, support_rows: np.ndarray, queries: np.ndarray, seg: Segments) -> Matrix:
        """Forward a packed batch.

        ``support_rows`` stacks every instance's support vectors (``seg`` groups
        them); ``queries`` has one row per instance.
        """
        n = self.n_features
        if support_rows.shape[1] != n or queries.shape[1] != n:
            raise DimensionError(
                f"net expects {n} features, got support {support_rows.shape[1]}, "
                f"query {queries.shape[1]}")
        if queries.shape[0] != len(seg):
            raise DimensionError(f"{queries.shape[0]} queries for {len(seg)} sets")
        cfg, p = self.config, self.params
        if cfg.late_concat:
            h = Matrix(support_rows)
        else:
            h = Matrix(np.hstack([support_rows, queries[seg.ids]]))
        for i in range(cfg.n_equivariant):
            pooled = nx.segment_pool(h, seg, cfg.pooling)
            mixed = nx.expand(nx.matmul(pooled, p[f"eq{i}.gam"]), seg)
            h = nx.relu(nx.add(nx.add(nx.matmul(h, p[f"eq{i}.lam"]), mixed), p[f"eq{i}.b"]))
        z = nx.segment_pool(h, seg, cfg.pooling)
        if cfg.late_concat:
            z = nx.concat_cols(z, Matrix(queries))
        for i in range(cfg.n_head):
            z = nx.relu(nx.add(nx.matmul(z, p[f"head{i}.w"]), p[f"head{i}.b"]))
        return nx.add(nx.matmul(z, p["out.w"]), p["out.b"])

    def probabilities(self, support_rows, queries, seg) -> np.ndarray:
        return nx.positive_probability(self.logits(support_rows, queries, seg).data)

    def copy(self) -> DeepSetsNet:
        other = build(self.n_features, self.config, seed=0)
        other.params.load_state(self.params.state())
        other.seed = self.seed
        return other


def _he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build(n_features: int, config: ModelConfig | None = None, seed: int = 0, **overrides) -> DeepSetsNet:
    """Create a network with He-uniform weights and zero biases drawn from ``seed``.

    ``overrides`` are forwarded to :class:`ModelConfig`, so
    ``build(10, width=100, n_layers=5, seed=7)`` works.
    """
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    if config is None:
        config = ModelConfig(**overrides)
    elif overrides:
        config = ModelConfig(**{**asdict(config), **overrides})
    rng = np.random.default_rng(seed)
    params = ParamStore()
    width = config.width
    d_in = n_features if config.late_concat else 2 * n_features
    for i in range(config.n_equivariant):
        # element and pooled terms are summed, so each sees half the fan-in budget
        params.add(f"eq{i}.lam", _he_uniform(rng, 2 * d_in, (d_in, width)))
        params.add(f"eq{i}.gam", _he_uniform(rng, 2 * d_in, (d_in, width)))
        params.add(f"eq{i}.b", np.zeros((1, width)), penalize=False)
        d_in = width
    if config.late_concat:
        d_in += n_features
    for i in range(config.n_head):
        params.add(f"head{i}.w", _he_uniform(rng, d_in, (d_in, width)))
        params.add(f"head{i}.b", np.zeros((1, width)), penalize=False)
        d_in = width
    params.add("out.w", _he_uniform(rng, d_in, (d_in, 2)))
    params.add("out.b", np.zeros((1, 2)), penalize=False)
    return DeepSetsNet(n_features, config, params, seed)


def forward(net: DeepSetsNet, inst: PairedInstance) -> Prediction:
    """Positive-class probability for one paired instance."""
    if inst.support.shape[1] != net.n_features:
        raise DimensionError(
            f"pair width {2 * inst.support.shape[1]} != net input {2 * net.n_features}")
    seg = Segments([inst.k])
    p = net.probabilities(inst.support, inst.query[None, :], seg)
    return Prediction(float(p[0]))


def forward_ablation_late_concat(net: DeepSetsNet, support, query) -> Prediction:
    """Forward for the variant that pools the raw support set and joins the query afterwards."""
    if not net.config.late_concat:
        raise UnsupportedOperation("network was built without late_concat=True")
    return forward(net, PairedInstance(support, query))


def pack(supports: list[np.ndarray]) -> tuple[np.ndarray, Segments]:
    """Stack a list of ``(k_i, n)`` support arrays into packed rows + segments."""
    return np.vstack(supports), Segments([len(s) for s in supports])


def score_queries(net: DeepSetsNet, support: np.ndarray, queries: np.ndarray,
                  max_rows: int = 200_000) -> np.ndarray:
    """Probability for every query, each paired with the whole ``support``."""
    support = np.atleast_2d(np.asarray(support, dtype=np.float64))
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    k = support.shape[0]
    if k < 1:
        raise ValueError("support set is empty")
    chunk = max(1, max_rows // k)
    out = np.empty(queries.shape[0])
    for start in range(0, queries.shape[0], chunk):
        q = queries[start:start + chunk]
        seg = Segments(np.full(q.shape[0], k))
        out[start:start + q.shape[0]] = net.probabilities(np.tile(support, (q.shape[0], 1)), q, seg)
    return out


def save_net(path, net: DeepSetsNet, meta: dict | None = None) -> None:
    info = dict(meta or {})
    info["n_features"] = net.n_features
    info["model"] = asdict(net.config)
    info["seed"] = net.seed
    nx.save_checkpoint(path, net.params, info)


def load_net(path) -> tuple[DeepSetsNet, dict]:
    arrays, meta = nx.load_checkpoint(path)
    net = build(meta["n_features"], ModelConfig(**meta["model"]), seed=0)
    net.params.load_state(arrays)
    net.seed = meta.get("seed")
    return net, meta


def write_model_card(path, net: DeepSetsNet, config_hash: str, extra: dict | None = None) -> None:
    cfg = net.config
    lines = [
        "model: deep-sets one-class meta classifier",
        f"n_features: {net.n_features}",
        f"input_width: {net.input_width}",
        f"equivariant_layers: {cfg.n_equivariant}",
        f"head_layers: {cfg.n_head}",
        f"width: {cfg.width}",
        f"pooling: {cfg.pooling}",
        f"late_concat: {cfg.late_concat}",
        "activation: relu",
        "output: 2-way softmax, threshold 0.5",
        f"init_seed: {net.seed}",
        f"n_parameters: {sum(m.data.size for _, m in net.params.items())}",
        f"param_digest: {net.params.digest()}",
        f"config_hash: {config_hash}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k}: {v}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
