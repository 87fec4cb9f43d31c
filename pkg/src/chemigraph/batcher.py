"""Dynamic batching compiler for heterogeneous computation graphs.

Per-molecule graphs share parameters but differ in tensor sizes, so static
batching does not apply.  This module schedules them dynamically: a frontier
sweep buckets signature-compatible, dependency-free nodes; each bucket is
lowered to gather -> one wide primitive -> scatter; and adjacent
scatter/gather pairs are then eliminated by composing their index maps.  A
sequential interpreter over the original graph serves as the semantics
oracle, and schedules are differentiable so training runs through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine.graph import ComputationGraph, forward as engine_forward
from .engine.ops import (OPS, NumericError, bn_infer_backward, bn_infer_forward,
                         bn_train_backward, bn_train_forward)


# --- batching analysis --------------------------------------------------------


@dataclass(frozen=True)
class BatchBucket:
    round: int
    signature: str
    sig_hash: str
    op: str
    members: tuple[int, ...]  # node ids, ascending


def analyze_batching(graph: ComputationGraph) -> list[BatchBucket]:
    """Frontier scheduling: each round collects every node whose inputs are
    already scheduled and buckets them by signature.

    A train-mode batch_norm node only becomes ready once every member of its
    normalization group is ready, so the whole group lands in one bucket and
    the wide op normalizes over the full batch's rows.
    """
    nodes = graph.nodes
    scheduled = {n.nid for n in nodes if n.op == "input"}
    pending = [n for n in nodes if n.op != "input"]
    bn_groups = graph.bn_groups()
    group_of = {nid: key for key, nids in bn_groups.items() for nid in nids}

    buckets: list[BatchBucket] = []
    rnd = 0
    while pending:
        inputs_ready = {n.nid for n in pending
                        if all(i in scheduled for i in n.inputs)}
        ready = []
        for n in pending:
            if n.nid not in inputs_ready:
                continue
            key = group_of.get(n.nid)
            if key is not None and not all(m in inputs_ready or m in scheduled
                                           for m in bn_groups[key]):
                continue
            ready.append(n)
        if not ready:
            raise ValueError("batching analysis stalled: dependency cycle")
        by_sig: dict[str, list[int]] = {}
        for n in ready:
            by_sig.setdefault(n.signature, []).append(n.nid)
        for sig in sorted(by_sig):
            members = tuple(sorted(by_sig[sig]))
            node = graph.node(members[0])
            buckets.append(BatchBucket(rnd, sig, node.sig_hash, node.op, members))
        done = {nid for sig in by_sig for nid in by_sig[sig]}
        scheduled |= done
        pending = [n for n in pending if n.nid not in done]
        rnd += 1
    return buckets


# --- schedule IR ---------------------------------------------------------------

# A gather span is ("node", nid) — all rows of an original node's value — or
# ("buf", step_sid, lo, hi) — a row range of an earlier step's buffer.
Span = tuple


@dataclass
class GatherStep:
    sid: int
    spans: list[Span]
    bucket: int
    rows: int


@dataclass
class ComputeStep:
    sid: int
    op: str
    input_sids: list[int]
    params: tuple[str, ...]
    attrs: dict
    bucket: int
    rows: int


@dataclass
class ScatterStep:
    sid: int
    src_sid: int
    dests: list[tuple[int, int]]  # (node id, row count), in member order
    bucket: int
    rows: int


@dataclass
class BucketInfo:
    round: int
    op: str
    sig_hash: str
    n_members: int
    gather_rows: list[int]
    scatter_rows: int


@dataclass
class BatchSchedule:
    graph: ComputationGraph
    steps: list
    buckets: list[BucketInfo]
    keep: set[int]                     # node ids materialized by the schedule
    eliminated_pairs: list[tuple[int, int]] = field(default_factory=list)
    identity_gathers: int = 0

    @property
    def launch_count(self) -> int:
        return len(self.steps)

    def execute(self, inputs: dict[int, np.ndarray], want_tape: bool = False):
        values, tape = _run_schedule(self, inputs)
        return (values, tape) if want_tape else values

    def backward(self, tape: "ScheduleTape", loss_nid: int) -> dict[str, np.ndarray]:
        return _schedule_backward(self, tape, loss_nid)


@dataclass
class ScheduleTape:
    buffers: dict[int, np.ndarray]
    values: dict[int, np.ndarray]
    bn_cache: dict[int, tuple]


def generate_schedule(graph: ComputationGraph,
                      buckets: list[BatchBucket] | None = None) -> BatchSchedule:
    """Lower buckets to gather/wide-op/scatter steps.

    Every original node is materialized (identity gathers and scatters
    included); run eliminate_scatter_gather for the optimized plan.
    """
    if buckets is None:
        buckets = analyze_batching(graph)
    steps: list = []
    infos: list[BucketInfo] = []
    sid = 0

    def new_sid() -> int:
        nonlocal sid
        sid += 1
        return sid - 1

    for b_idx, bucket in enumerate(buckets):
        members = [graph.node(nid) for nid in bucket.members]
        head = members[0]
        arity = len(head.inputs)
        in_rows = [[graph.node(m.inputs[j]).rows for m in members] for j in range(arity)]
        out_rows = [m.rows for m in members]

        if head.op == "concat" and head.attrs["axis"] == 0:
            # stacking rows is pure data movement: the gather is the op
            spans = [("node", m.inputs[j]) for m in members for j in range(arity)]
            g = GatherStep(new_sid(), spans, b_idx, sum(out_rows))
            steps.append(g)
            steps.append(ScatterStep(new_sid(), g.sid,
                                     [(m.nid, m.rows) for m in members], b_idx,
                                     sum(out_rows)))
            infos.append(BucketInfo(bucket.round, head.op, bucket.sig_hash,
                                    len(members), [sum(out_rows)], sum(out_rows)))
            continue

        gather_sids = []
        gather_rows = []
        for j in range(arity):
            g = GatherStep(new_sid(), [("node", m.inputs[j]) for m in members],
                           b_idx, sum(in_rows[j]))
            steps.append(g)
            gather_sids.append(g.sid)
            gather_rows.append(sum(in_rows[j]))
        if head.op == "batch_norm":
            wide_attrs = dict(head.attrs)
        else:
            wide_attrs = OPS[head.op].merge_attrs([m.attrs for m in members],
                                                  in_rows, out_rows)
        c = ComputeStep(new_sid(), head.op, gather_sids, head.params, wide_attrs,
                        b_idx, sum(out_rows))
        steps.append(c)
        steps.append(ScatterStep(new_sid(), c.sid,
                                 [(m.nid, m.rows) for m in members], b_idx,
                                 sum(out_rows)))
        infos.append(BucketInfo(bucket.round, head.op, bucket.sig_hash,
                                len(members), gather_rows, sum(out_rows)))

    keep = {n.nid for n in graph.nodes if n.op != "input"}
    return BatchSchedule(graph, steps, infos, keep)


def eliminate_scatter_gather(schedule: BatchSchedule,
                             keep: set[int] | None = None) -> BatchSchedule:
    """Compose scatter->gather index maps away.

    Gather spans that read a scattered node are rewritten to read the wide
    source buffer directly; scatters whose destinations are no longer needed
    are dropped, and gathers that reduce to the identity map are removed
    entirely.  Pure index composition: surviving values are bit-identical.
    """
    graph = schedule.graph
    if keep is None:
        keep = set(graph.outputs) if graph.outputs else set(schedule.keep)
    keep = set(keep)

    # node id -> (scatter sid, source buffer sid, lo, hi)
    produced: dict[int, tuple[int, int, int, int]] = {}
    for step in schedule.steps:
        if isinstance(step, ScatterStep):
            lo = 0
            for nid, rows in step.dests:
                produced[nid] = (step.sid, step.src_sid, lo, lo + rows)
                lo += rows

    step_rows = {step.sid: step.rows for step in schedule.steps}
    scatter_readers: dict[int, set[int]] = {}
    alias: dict[int, int] = {}
    identity_dropped = 0
    new_steps: list = []

    for step in schedule.steps:
        if isinstance(step, GatherStep):
            spans: list[Span] = []
            for span in step.spans:
                if span[0] == "node" and span[1] in produced:
                    scatter_sid, src_sid, lo, hi = produced[span[1]]
                    scatter_readers.setdefault(scatter_sid, set()).add(step.sid)
                    span = ("buf", alias.get(src_sid, src_sid), lo, hi)
                if (spans and span[0] == "buf" and spans[-1][0] == "buf"
                        and spans[-1][1] == span[1] and spans[-1][3] == span[2]):
                    spans[-1] = ("buf", span[1], spans[-1][2], span[3])
                else:
                    spans.append(span)
            if (len(spans) == 1 and spans[0][0] == "buf" and spans[0][2] == 0
                    and step_rows[spans[0][1]] == spans[0][3]):
                alias[step.sid] = spans[0][1]  # identity map: drop the step
                identity_dropped += 1
                continue
            new_steps.append(GatherStep(step.sid, spans, step.bucket, step.rows))
        elif isinstance(step, ComputeStep):
            new_steps.append(ComputeStep(
                step.sid, step.op,
                [alias.get(s, s) for s in step.input_sids],
                step.params, step.attrs, step.bucket, step.rows))
        else:
            new_steps.append(ScatterStep(step.sid, alias.get(step.src_sid, step.src_sid),
                                         step.dests, step.bucket, step.rows))

    kept_steps: list = []
    removed_pairs: list[tuple[int, int]] = []
    for step in new_steps:
        if isinstance(step, ScatterStep) and not any(nid in keep for nid, _ in step.dests):
            for g in sorted(scatter_readers.get(step.sid, ())):
                removed_pairs.append((step.sid, g))
            continue
        kept_steps.append(step)

    return BatchSchedule(graph, kept_steps, schedule.buckets, keep,
                         removed_pairs, identity_dropped)


def _span_rows(graph: ComputationGraph, span: Span) -> int:
    if span[0] == "node":
        return graph.node(span[1]).rows
    return span[3] - span[2]


# --- schedule execution ---------------------------------------------------------

def _run_schedule(schedule: BatchSchedule,
                  inputs: dict[int, np.ndarray]) -> tuple[dict, ScheduleTape]:
    graph = schedule.graph
    store = graph.store
    dtype = store.dtype
    check = graph.check_finite
    buffers: dict[int, np.ndarray] = {}
    values: dict[int, np.ndarray] = {}
    bn_cache: dict[int, tuple] = {}
    for nid, arr in inputs.items():
        values[nid] = np.asarray(arr, dtype=dtype)

    for step in schedule.steps:
        if isinstance(step, GatherStep):
            parts = [values[s[1]] if s[0] == "node" else buffers[s[1]][s[2]:s[3]]
                     for s in step.spans]
            buffers[step.sid] = parts[0].copy() if len(parts) == 1 \
                else np.concatenate(parts, axis=0)
        elif isinstance(step, ComputeStep):
            ins = [buffers[s] for s in step.input_sids]
            if step.op == "batch_norm":
                gamma = store.params[step.params[0]]
                beta = store.params[step.params[1]]
                if step.attrs["mode"] == "train":
                    out, mean, var, xhat, inv_std = bn_train_forward(
                        ins[0], gamma, beta, step.attrs["eps"])
                    mom = step.attrs["momentum"]
                    store.buffers[step.params[2]] = (
                        mom * store.buffers[step.params[2]] + (1 - mom) * mean)
                    store.buffers[step.params[3]] = (
                        mom * store.buffers[step.params[3]] + (1 - mom) * var)
                    bn_cache[step.sid] = (xhat, inv_std)
                else:
                    out = bn_infer_forward(ins[0], gamma, beta,
                                           store.buffers[step.params[2]],
                                           store.buffers[step.params[3]],
                                           step.attrs["eps"])
            else:
                ps = [store.value_of(p) for p in step.params]
                out = OPS[step.op].forward(ins, ps, step.attrs)
            if check and not np.isfinite(out).all():
                raise NumericError(f"non-finite value in batched op {step.op} "
                                   f"(step {step.sid})")
            buffers[step.sid] = out
        else:  # ScatterStep
            src = buffers[step.src_sid]
            lo = 0
            for nid, rows in step.dests:
                values[nid] = src[lo:lo + rows]
                lo += rows
    return values, ScheduleTape(buffers, values, bn_cache)


def _schedule_backward(schedule: BatchSchedule, tape: ScheduleTape,
                       loss_nid: int) -> dict[str, np.ndarray]:
    graph = schedule.graph
    store = graph.store
    if graph.node(loss_nid).shape != (1, 1):
        raise ValueError(f"loss node must be scalar [1,1], got {graph.node(loss_nid).shape}")
    if loss_nid not in tape.values:
        raise ValueError(f"loss node {loss_nid} is not materialized by this schedule")
    grads = {name: np.zeros_like(val) for name, val in store.params.items()}
    dvalues: dict[int, np.ndarray] = {loss_nid: np.ones((1, 1), dtype=store.dtype)}
    dbuffers: dict[int, np.ndarray] = {}

    def dbuf(sid: int) -> np.ndarray:
        if sid not in dbuffers:
            dbuffers[sid] = np.zeros_like(tape.buffers[sid])
        return dbuffers[sid]

    for step in reversed(schedule.steps):
        if isinstance(step, ScatterStep):
            if not any(nid in dvalues for nid, _ in step.dests):
                continue
            target = dbuf(step.src_sid)
            lo = 0
            for nid, rows in step.dests:
                if nid in dvalues:
                    target[lo:lo + rows] += dvalues[nid]
                lo += rows
        elif isinstance(step, ComputeStep):
            gout = dbuffers.get(step.sid)
            if gout is None:
                continue
            ins = [tape.buffers[s] for s in step.input_sids]
            if step.op == "batch_norm":
                gamma = store.params[step.params[0]]
                if step.attrs["mode"] == "train":
                    xhat, inv_std = tape.bn_cache[step.sid]
                    dx, dgamma, dbeta = bn_train_backward(gout, gamma, xhat, inv_std)
                else:
                    dx, dgamma, dbeta = bn_infer_backward(
                        gout, ins[0], gamma,
                        store.buffers[step.params[2]], store.buffers[step.params[3]],
                        step.attrs["eps"])
                grads[step.params[0]] += dgamma
                grads[step.params[1]] += dbeta
                dbuf(step.input_sids[0])
                dbuffers[step.input_sids[0]] += dx
            else:
                ps = [store.value_of(p) for p in step.params]
                in_grads, p_grads = OPS[step.op].backward(
                    gout, ins, ps, tape.buffers[step.sid], step.attrs)
                for pname, pg in zip(step.params, p_grads):
                    grads[pname] += pg
                for s, g in zip(step.input_sids, in_grads):
                    if g is not None:
                        dbuf(s)
                        dbuffers[s] += g
        else:  # GatherStep
            gout = dbuffers.get(step.sid)
            if gout is None:
                continue
            lo = 0
            for span in step.spans:
                rows = _span_rows(graph, span)
                part = gout[lo:lo + rows]
                lo += rows
                if span[0] == "node":
                    nid = span[1]
                    if graph.node(nid).op == "input":
                        continue
                    if nid in dvalues:
                        dvalues[nid] = dvalues[nid] + part
                    else:
                        dvalues[nid] = part.copy()
                else:
                    buf = dbuf(span[1])
                    buf[span[2]:span[3]] += part
    return grads


# --- reference interpreter --------------------------------------------------------

@dataclass
class OpCounter:
    launches: int = 0


def reference_execute(graph: ComputationGraph, inputs: dict[int, np.ndarray],
                      counter: OpCounter | None = None) -> dict[int, np.ndarray]:
    """Sequential oracle: evaluate the original graph one node at a time with
    no merging.  Train-mode batch normalization still uses its group's full
    row statistics, per the node contract.  Counts one launch per node.
    """
    values = engine_forward(graph, inputs)
    if counter is not None:
        counter.launches += sum(1 for n in graph.nodes if n.op != "input")
    return values


def build_instance_graphs(molgraphs, config, store=None, mode: str = "infer",
                          dtype=None):
    """One disjoint sub-DAG per molecule over a shared parameter store.

    Returns a ComputationGraph with a ``handles`` attribute carrying the
    per-instance prediction/embedding node ids (see chemigraph.model).
    """
    from . import model as _model  # local import: model builds on this module
    if store is None:
        store = _model.init_params(config, dtype=dtype)
    graph, handles = _model.build_batch_graph(store, molgraphs, config, mode=mode)
    graph.handles = handles
    return graph


# --- plan report -----------------------------------------------------------------

def format_batchplan(schedule: BatchSchedule) -> str:
    """Stable one-line-per-batched-op dump plus the elimination summary."""
    lines = []
    for info in schedule.buckets:
        gathers = ",".join(str(r) for r in info.gather_rows)
        lines.append(
            f"round={info.round} sig={info.sig_hash} op={info.op} "
            f"members={info.n_members} gather_rows=[{gathers}] "
            f"scatter_rows={info.scatter_rows}")
    lines.append(f"steps={schedule.launch_count} "
                 f"eliminated_pairs={len(schedule.eliminated_pairs)} "
                 f"identity_gathers={schedule.identity_gathers}")
    return "\n".join(lines)
