"""The molecular property network.

Per molecule: stacked graph convolution layers (neighbor transform through
one shared affine layer + leaky ReLU, commutative max/sum/avg reduction,
residual concat with the incoming atom features, then batch normalization
over all atom rows of the batch), order-invariant pooling to a fixed-width
molecule embedding, shared fully connected layers, and one linear output per
task.  The training loss is a weighted sum of per-task RMSE terms computed
over the molecules that carry each label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine.graph import ComputationGraph, ParamStore, glorot_uniform
from .engine.ops import ShapeError
from .featurize import ATOM_FEATURE_WIDTH, PAIR_FEATURE_WIDTH, MolGraph

POOLINGS = ("max_sum_avg", "max", "sum", "avg")


@dataclass
class ModelConfig:
    tasks: list[str]
    conv_layers: int = 2
    conv_width: int | list[int] = 16
    alpha: float = 0.01
    head_widths: list[int] = field(default_factory=lambda: [256, 256])
    task_weights: dict[str, float] = field(default_factory=dict)
    pooling: str = "max_sum_avg"
    input_width: int = ATOM_FEATURE_WIDTH
    pair_width: int = PAIR_FEATURE_WIDTH
    explicit_feature_width: int | None = None
    seed: int = 0
    precision: str = "f64"

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("config needs at least one task")
        if self.conv_layers < 1:
            raise ValueError("conv_layers must be >= 1")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        if any(w < 1 for w in self.conv_widths):
            raise ValueError("conv widths must be >= 1")
        if any(w < 1 for w in self.head_widths):
            raise ValueError("head widths must be >= 1")
        for t, w in self.task_weights.items():
            if t not in self.tasks:
                raise ValueError(f"weight for unknown task {t!r}")
            if w <= 0:
                raise ValueError(f"task weight for {t!r} must be > 0")
        if self.precision not in ("f64", "f32"):
            raise ValueError("precision must be 'f64' or 'f32'")

    @property
    def conv_widths(self) -> list[int]:
        if isinstance(self.conv_width, int):
            return [self.conv_width] * self.conv_layers
        if len(self.conv_width) != self.conv_layers:
            raise ValueError("conv_width list length must equal conv_layers")
        return list(self.conv_width)

    def weight_of(self, task: str) -> float:
        return self.task_weights.get(task, 1.0)

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def atom_widths(self) -> list[int]:
        """Atom feature width entering each layer, plus the final width."""
        widths = [self.input_width]
        for d in self.conv_widths:
            widths.append(widths[-1] + 3 * d)
        return widths

    @property
    def embedding_width(self) -> int:
        final = self.atom_widths()[-1]
        return 3 * final if self.pooling == "max_sum_avg" else final

    def to_dict(self) -> dict:
        return {
            "tasks": list(self.tasks),
            "conv_layers": self.conv_layers,
            "conv_width": self.conv_width,
            "alpha": self.alpha,
            "head_widths": list(self.head_widths),
            "task_weights": dict(self.task_weights),
            "pooling": self.pooling,
            "input_width": self.input_width,
            "pair_width": self.pair_width,
            "explicit_feature_width": self.explicit_feature_width,
            "seed": self.seed,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        if isinstance(obj.get("conv_width"), list):
            obj = dict(obj, conv_width=[int(w) for w in obj["conv_width"]])
        return cls(**obj)


def init_params(config: ModelConfig, dtype=None) -> ParamStore:
    """Seeded parameter store: uniform +-sqrt(6/(fan_in+fan_out)) weights,
    zero biases, unit-variance normalization state."""
    store = ParamStore(dtype=dtype or config.dtype)
    rng = np.random.default_rng(config.seed)
    widths = config.atom_widths()
    for k, d in enumerate(config.conv_widths):
        fan_in = widths[k] + config.pair_width
        store.add_param(f"conv{k}/w", glorot_uniform(rng, fan_in, d))
        store.add_param(f"conv{k}/b", np.zeros(d))
        out_w = widths[k + 1]
        store.add_param(f"conv{k}/bn_gamma", np.ones(out_w))
        store.add_param(f"conv{k}/bn_beta", np.zeros(out_w))
        store.add_buffer(f"conv{k}/bn_mean", np.zeros(out_w))
        store.add_buffer(f"conv{k}/bn_var", np.ones(out_w))
    prev = config.embedding_width
    for i, w in enumerate(config.head_widths):
        store.add_param(f"head{i}/w", glorot_uniform(rng, prev, w))
        store.add_param(f"head{i}/b", np.zeros(w))
        prev = w
    for task in config.tasks:
        store.add_param(f"task/{task}/w", glorot_uniform(rng, prev, 1))
        store.add_param(f"task/{task}/b", np.zeros(1))
        # label scaler (mean, std): heads learn standardized targets, and
        # predictions are mapped back to label units on the way out
        store.add_buffer(f"task/{task}/scale", np.asarray([0.0, 1.0]))
    return store


def task_scaler(store: ParamStore, task: str) -> tuple[float, float]:
    mean, std = store.buffers.get(f"task/{task}/scale", np.asarray([0.0, 1.0]))
    return float(mean), float(std)


def set_task_scaler(store: ParamStore, task: str, mean: float, std: float) -> None:
    std = std if std > 1e-12 else 1.0
    store.buffers[f"task/{task}/scale"] = np.asarray([mean, std], dtype=store.dtype)


@dataclass
class InstanceHandles:
    atom_input: int
    pair_input: int
    embedding: int
    preds: dict[str, int]
    molgraph: MolGraph


@dataclass
class BatchHandles:
    instances: list[InstanceHandles]
    loss: int | None = None
    loss_feeds: dict[int, np.ndarray] = field(default_factory=dict)

    def feeds(self) -> dict[int, np.ndarray]:
        out: dict[int, np.ndarray] = {}
        for h in self.instances:
            out[h.atom_input] = h.molgraph.atom_feats
            out[h.pair_input] = h.molgraph.pair_feats
        out.update(self.loss_feeds)
        return out


def _pool_nids(graph: ComputationGraph, cur: int, n_atoms: int, pooling: str,
               instance: int) -> int:
    lengths = np.asarray([n_atoms], dtype=np.int64)
    kinds = ("max", "sum", "avg") if pooling == "max_sum_avg" else (pooling,)
    parts = [graph.add("segment_reduce", [cur],
                       attrs={"kind": k, "lengths": lengths}, instance=instance)
             for k in kinds]
    if len(parts) == 1:
        return parts[0]
    return graph.add("concat", parts, attrs={"axis": 1}, instance=instance)


def add_molecule(graph: ComputationGraph, mg: MolGraph, config: ModelConfig,
                 mode: str, instance: int) -> InstanceHandles:
    """Append one molecule's sub-DAG; all instances share parameter names."""
    n, e = mg.n_atoms, mg.n_pairs
    if mg.atom_feats.shape[1] != config.input_width:
        raise ShapeError(
            f"featurization width {mg.atom_feats.shape[1]} does not match "
            f"model input width {config.input_width}")
    if n < 1:
        raise ValueError(f"molecule {mg.mol_id!r} has no atoms")
    atom_in = graph.add_input((n, config.input_width), instance)
    pair_in = graph.add_input((e, config.pair_width), instance)
    lengths = mg.segment_lengths
    cur = atom_in
    for k in range(config.conv_layers):
        nbr = graph.add("gather", [cur], attrs={"index": mg.pair_dst}, instance=instance)
        cat = graph.add("concat", [nbr, pair_in], attrs={"axis": 1}, instance=instance)
        lin = graph.add("matmul", [cat], params=(f"conv{k}/w",), instance=instance)
        lin = graph.add("add_bias", [lin], params=(f"conv{k}/b",), instance=instance)
        t = graph.add("leaky_relu", [lin], attrs={"alpha": config.alpha}, instance=instance)
        reduced = [graph.add("segment_reduce", [t],
                             attrs={"kind": kind, "lengths": lengths}, instance=instance)
                   for kind in ("max", "sum", "avg")]
        cur = graph.add("concat", [cur, *reduced], attrs={"axis": 1}, instance=instance)
        cur = graph.add("batch_norm", [cur],
                        params=(f"conv{k}/bn_gamma", f"conv{k}/bn_beta",
                                f"conv{k}/bn_mean", f"conv{k}/bn_var"),
                        attrs={"mode": mode}, instance=instance)
    emb = _pool_nids(graph, cur, n, config.pooling, instance)
    cur = emb
    for i in range(len(config.head_widths)):
        cur = graph.add("matmul", [cur], params=(f"head{i}/w",), instance=instance)
        cur = graph.add("add_bias", [cur], params=(f"head{i}/b",), instance=instance)
        cur = graph.add("leaky_relu", [cur], attrs={"alpha": config.alpha},
                        instance=instance)
    preds = {}
    for task in config.tasks:
        out = graph.add("matmul", [cur], params=(f"task/{task}/w",), instance=instance)
        preds[task] = graph.add("add_bias", [out], params=(f"task/{task}/b",),
                                instance=instance)
    return InstanceHandles(atom_in, pair_in, emb, preds, mg)


def build_batch_graph(store: ParamStore, molgraphs: list[MolGraph],
                      config: ModelConfig, mode: str = "infer",
                      ) -> tuple[ComputationGraph, BatchHandles]:
    if not molgraphs:
        raise ValueError("need at least one molecule")
    graph = ComputationGraph(store)
    instances = [add_molecule(graph, mg, config, mode, idx)
                 for idx, mg in enumerate(molgraphs)]
    handles = BatchHandles(instances)
    graph.outputs = [h.embedding for h in instances]
    for h in instances:
        graph.outputs.extend(h.preds[t] for t in config.tasks)
    return graph, handles


def attach_loss(graph: ComputationGraph, handles: BatchHandles,
                labels: list[dict[str, float]], config: ModelConfig) -> int:
    """Join per-instance predictions into the weighted multi-task RMSE loss.

    Molecules missing a task are masked out of that task's term; a task with
    no labels in the batch contributes exactly zero.
    """
    n = len(handles.instances)
    if len(labels) != n:
        raise ValueError(f"{len(labels)} label rows for {n} instances")
    if not any(t in row for row in labels for t in config.tasks):
        raise ValueError("no supervision in batch: every task is unlabeled")
    terms = []
    for task in config.tasks:
        stacked = graph.add("concat", [h.preds[task] for h in handles.instances],
                            attrs={"axis": 0})
        target = graph.add_input((n, 1))
        mask = graph.add_input((n, 1))
        mean, std = task_scaler(graph.store, task)
        tvals = np.asarray([[(row.get(task, 0.0) - mean) / std] for row in labels])
        mvals = np.asarray([[1.0 if task in row else 0.0] for row in labels])
        handles.loss_feeds[target] = tvals
        handles.loss_feeds[mask] = mvals
        err = graph.add("mse", [stacked, target, mask])
        rmse = graph.add("sqrt", [err])
        terms.append(graph.add("scale", [rmse],
                               attrs={"factor": config.weight_of(task)}))
    loss = terms[0] if len(terms) == 1 else graph.add("add_n", terms)
    handles.loss = loss
    graph.outputs = list(graph.outputs) + [loss]
    return loss


def multi_task_loss_value(preds: dict[str, np.ndarray],
                          labels: list[dict[str, float]],
                          config: ModelConfig) -> float:
    """Closed-form loss: sum_t w_t * RMSE_t over labeled molecules.  Serves
    as the oracle for the graph-built loss node."""
    total = 0.0
    any_labeled = False
    for task in config.tasks:
        rows = [(float(preds[task][i]), row[task])
                for i, row in enumerate(labels) if task in row]
        if not rows:
            continue
        any_labeled = True
        p = np.asarray([r[0] for r in rows])
        y = np.asarray([r[1] for r in rows])
        total += config.weight_of(task) * float(np.sqrt(np.mean((p - y) ** 2)))
    if not any_labeled:
        raise ValueError("no supervision in batch: every task is unlabeled")
    return total


def predict(store: ParamStore, config: ModelConfig, molgraphs: list[MolGraph],
            mode: str = "infer", optimize: bool = True,
            ) -> tuple[list[dict[str, float]], np.ndarray]:
    """Run the batched schedule in inference mode; returns per-molecule task
    scores and the molecule embeddings."""
    from . import batcher  # deferred: batcher builds on model for construction
    graph, handles = build_batch_graph(store, molgraphs, config, mode=mode)
    schedule = batcher.generate_schedule(graph)
    if optimize:
        schedule = batcher.eliminate_scatter_gather(schedule)
    values = schedule.execute(handles.feeds())
    scalers = {task: task_scaler(store, task) for task in config.tasks}
    preds = [{task: float(values[h.preds[task]][0, 0]) * scalers[task][1]
                    + scalers[task][0]
              for task in config.tasks}
             for h in handles.instances]
    emb = np.concatenate([values[h.embedding] for h in handles.instances], axis=0)
    return preds, emb
