"""Training loop, metrics, and checkpointing.

Every step featurizes (or reads cached features), builds the per-molecule
graphs, compiles them with the dynamic batcher, and runs the optimized
schedule forward and backward.  With a fixed seed and one thread the whole
run is reproducible to the byte.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import batcher
from .engine.adam import AdamState, adam_step
from .engine.checkpoint import load_checkpoint, save_checkpoint
from .engine.graph import ParamStore
from .engine.ops import NumericError
from .featurize import MolGraph, featurize_records
from .model import (ModelConfig, attach_loss, build_batch_graph, init_params,
                    predict, set_task_scaler)
from .molio import MoleculeRecord, chronological_split, parse_dataset

CHECKPOINT_KIND = "model"


class TrainingDiverged(ArithmeticError):
    def __init__(self, epoch: int, step: int, message: str):
        super().__init__(f"divergence at epoch {epoch}, step {step}: {message}")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainPlan:
    dataset: str | Path | None = None
    train_file: str | Path | None = None   # explicit split alternative
    test_file: str | Path | None = None
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_dir: str | Path | None = None
    checkpoint_every: int = 1
    spatial_cutoff: float | None = None
    threads: int = 1

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in (0, 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("dataset", "train_file", "test_file", "checkpoint_dir"):
            if out[key] is not None:
                out[key] = str(out[key])
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainPlan":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train plan keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: dict[str, float]
    val_r2: dict[str, float]
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# --- metrics -----------------------------------------------------------------

def rmse(preds: np.ndarray, labels: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(preds) - np.asarray(labels)) ** 2)))


def r_squared(preds: np.ndarray, labels: np.ndarray) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    ss_res = float(np.sum((labels - preds) ** 2))
    ss_tot = float(np.sum((labels - labels.mean()) ** 2))
    if ss_res == 0.0:
        return 1.0
    if ss_tot == 0.0:
        return float("nan")
    return 1.0 - ss_res / ss_tot


# --- checkpoint glue -----------------------------------------------------------

def save_model_checkpoint(path: str | Path, store: ParamStore, config: ModelConfig,
                          adam: AdamState | None = None, extra: dict | None = None) -> None:
    meta = {
        "kind": CHECKPOINT_KIND,
        "model": config.to_dict(),
        "seed": config.seed,
        "dtype": str(np.dtype(store.dtype)),
    }
    if extra:
        meta["extra"] = extra
    tensors: dict[str, np.ndarray] = {}
    for name, val in store.params.items():
        tensors[f"param/{name}"] = val
    for name, val in store.buffers.items():
        tensors[f"buffer/{name}"] = val
    if adam is not None:
        meta["adam"] = {"lr": adam.lr, "beta1": adam.beta1,
                        "beta2": adam.beta2, "eps": adam.eps}
        tensors["adam/t"] = np.asarray([adam.t], dtype=np.int64)
        for name, val in adam.m.items():
            tensors[f"adam/m/{name}"] = val
        for name, val in adam.v.items():
            tensors[f"adam/v/{name}"] = val
    save_checkpoint(path, meta, tensors)


def load_model_checkpoint(path: str | Path,
                          ) -> tuple[ParamStore, ModelConfig, AdamState | None, dict]:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    config = ModelConfig.from_dict(meta["model"])
    store = ParamStore(dtype=np.dtype(meta["dtype"]))
    for name, val in tensors.items():
        if name.startswith("param/"):
            store.add_param(name[len("param/"):], val)
        elif name.startswith("buffer/"):
            store.add_buffer(name[len("buffer/"):], val)
    adam = None
    if "adam" in meta:
        hp = meta["adam"]
        adam = AdamState(lr=hp["lr"], beta1=hp["beta1"], beta2=hp["beta2"],
                         eps=hp["eps"], t=int(tensors["adam/t"][0]))
        for name in store.params:
            adam.m[name] = tensors[f"adam/m/{name}"]
            adam.v[name] = tensors[f"adam/v/{name}"]
    return store, config, adam, meta.get("extra", {})


# --- data plumbing ----------------------------------------------------------------

def resolve_splits(plan: TrainPlan,
                   records: list[MoleculeRecord] | None = None,
                   ) -> tuple[list[MoleculeRecord], list[MoleculeRecord], list[MoleculeRecord]]:
    """(train, val, test) per the plan: chronological test split, then the
    newest val_fraction of the training partition held out for validation."""
    if records is None:
        if plan.train_file is not None:
            train_full = parse_dataset(plan.train_file)
            test = parse_dataset(plan.test_file) if plan.test_file else []
        else:
            if plan.dataset is None:
                raise ValueError("plan needs a dataset path or explicit split files")
            records = parse_dataset(plan.dataset)
            train_full, test = chronological_split(records, plan.test_fraction)
    else:
        train_full, test = chronological_split(records, plan.test_fraction)
    train, val = chronological_split(train_full, plan.val_fraction)
    return train, val, test


def _label_matrix(records: list[MoleculeRecord], task: str) -> tuple[np.ndarray, np.ndarray]:
    labeled = [(i, r.labels[task]) for i, r in enumerate(records) if task in r.labels]
    idx = np.asarray([i for i, _ in labeled], dtype=np.int64)
    y = np.asarray([v for _, v in labeled])
    return idx, y


def predict_records(store: ParamStore, config: ModelConfig,
                    molgraphs: list[MolGraph], chunk: int = 256,
                    ) -> tuple[list[dict[str, float]], np.ndarray]:
    preds: list[dict[str, float]] = []
    embs = []
    for lo in range(0, len(molgraphs), chunk):
        p, e = predict(store, config, molgraphs[lo:lo + chunk])
        preds.extend(p)
        embs.append(e)
    return preds, np.concatenate(embs, axis=0) if embs else np.zeros((0, config.embedding_width))


def eval_metrics(store: ParamStore, config: ModelConfig,
                 molgraphs: list[MolGraph], records: list[MoleculeRecord],
                 ) -> dict[str, dict[str, float]]:
    preds, _ = predict_records(store, config, molgraphs)
    out: dict[str, dict[str, float]] = {}
    for task in config.tasks:
        idx, y = _label_matrix(records, task)
        if idx.size == 0:
            continue
        p = np.asarray([preds[i][task] for i in idx])
        out[task] = {"rmse": rmse(p, y), "r2": r_squared(p, y), "n": int(idx.size)}
    if not out:
        raise ValueError("no labeled molecules for any configured task")
    return out


# --- the loop ------------------------------------------------------------------

def train(plan: TrainPlan, config: ModelConfig,
          records: list[MoleculeRecord] | None = None,
          store: ParamStore | None = None,
          log_fn=None) -> tuple[list[EpochRecord], ParamStore]:
    """Run the full plan; returns per-epoch records and the trained store."""
    train_recs, val_recs, _ = resolve_splits(plan, records)
    missing = [t for t in config.tasks
               if not any(t in r.labels for r in train_recs)]
    if missing:
        raise ValueError(f"tasks with no training labels: {missing}")
    train_graphs, _ = featurize_records(train_recs, plan.spatial_cutoff)
    val_graphs, _ = featurize_records(val_recs, plan.spatial_cutoff)

    if store is None:
        store = init_params(config)
        for task in config.tasks:
            _, y = _label_matrix(train_recs, task)
            if y.size:
                set_task_scaler(store, task, float(y.mean()), float(y.std()))
    adam = AdamState.for_params(store.params, lr=plan.lr, beta1=plan.beta1,
                                beta2=plan.beta2, eps=plan.eps)
    rng = np.random.default_rng(plan.seed)

    ckpt_dir = Path(plan.checkpoint_dir) if plan.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_model_checkpoint(ckpt_dir / "epoch0000.ckpt", store, config, adam,
                              extra={"epoch": 0})

    history: list[EpochRecord] = []
    for epoch in range(1, plan.epochs + 1):
        order = rng.permutation(len(train_graphs))
        losses = []
        for step, lo in enumerate(range(0, len(order), plan.batch_size)):
            batch_idx = order[lo:lo + plan.batch_size]
            mgs = [train_graphs[i] for i in batch_idx]
            labels = [train_recs[i].labels for i in batch_idx]
            if not any(t in row for row in labels for t in config.tasks):
                continue  # fully unlabeled batch carries no supervision
            graph, handles = build_batch_graph(store, mgs, config, mode="train")
            loss_nid = attach_loss(graph, handles, labels, config)
            schedule = batcher.eliminate_scatter_gather(
                batcher.generate_schedule(graph))
            try:
                values, tape = schedule.execute(handles.feeds(), want_tape=True)
            except NumericError as exc:
                raise TrainingDiverged(epoch, step, str(exc)) from exc
            loss = float(values[loss_nid][0, 0])
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, step, f"loss={loss}")
            grads = schedule.backward(tape, loss_nid)
            adam_step(store.params, grads, adam)
            losses.append(loss)

        val_rmse: dict[str, float] = {}
        val_r2: dict[str, float] = {}
        if val_graphs:
            try:
                metrics = eval_metrics(store, config, val_graphs, val_recs)
            except ValueError:
                metrics = {}
            for task, m in metrics.items():
                val_rmse[task] = m["rmse"]
                val_r2[task] = m["r2"]
        ckpt_path = None
        if ckpt_dir and (epoch % plan.checkpoint_every == 0 or epoch == plan.epochs):
            ckpt_path = str(ckpt_dir / f"epoch{epoch:04d}.ckpt")
            save_model_checkpoint(ckpt_path, store, config, adam,
                                  extra={"epoch": epoch})
        record = EpochRecord(epoch, float(np.mean(losses)) if losses else 0.0,
                             val_rmse, val_r2, ckpt_path)
        history.append(record)
        if log_fn is not None:
            log_fn(record)
    return history, store


def evaluate(checkpoint: str | Path, dataset: str | Path | list[MoleculeRecord],
             spatial_cutoff: float | None = None) -> dict[str, dict[str, float]]:
    """Per-task RMSE / R-squared / n over the labeled molecules of a dataset."""
    store, config, _, _ = load_model_checkpoint(checkpoint)
    records = dataset if isinstance(dataset, list) else parse_dataset(dataset)
    graphs, _ = featurize_records(records, spatial_cutoff)
    return eval_metrics(store, config, graphs, records)
