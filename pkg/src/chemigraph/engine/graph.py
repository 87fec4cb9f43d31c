"""Computation-graph IR with reverse-mode differentiation.

A graph is a DAG of nodes over 2-D tensors.  Parameters live in a ParamStore
shared by any number of graphs (training rebuilds the graph every batch but
keeps one store).  Train-mode batch normalization nodes that share parameters
form a normalization group: statistics are taken over the concatenation of
all group members' rows, in node-id order, no matter how execution is
organized.  That keeps the sequential interpreter and the batched schedule
numerically aligned.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from hashlib import blake2b

import numpy as np

from .ops import (OPS, NumericError, ShapeError, bn_infer_backward,
                  bn_infer_forward, bn_train_backward, bn_train_forward)

BN_DEFAULT_EPS = 1e-5
BN_DEFAULT_MOMENTUM = 0.9


class ParamStore:
    """Named parameter and buffer tensors plus the dtype they live in."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, value: np.ndarray) -> str:
        if name in self.params or name in self.buffers:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.params[name] = np.asarray(value, dtype=self.dtype)
        return name

    def add_buffer(self, name: str, value: np.ndarray) -> str:
        if name in self.params or name in self.buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.asarray(value, dtype=self.dtype)
        return name

    def value_of(self, name: str) -> np.ndarray:
        if name in self.params:
            return self.params[name]
        return self.buffers[name]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...] | None = None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


@dataclass(frozen=True)
class GraphNode:
    nid: int
    op: str
    inputs: tuple[int, ...]
    params: tuple[str, ...]
    attrs: dict
    shape: tuple[int, int]
    instance: int | None
    signature: str
    sig_hash: str

    @property
    def rows(self) -> int:
        return self.shape[0]


def _signature(op: str, params: tuple[str, ...], sig_attrs: tuple,
               in_inner: tuple, out_inner: tuple) -> tuple[str, str]:
    text = f"{op}|p={','.join(params)}|a={sig_attrs!r}|in={in_inner!r}|out={out_inner!r}"
    return text, blake2b(text.encode(), digest_size=8).hexdigest()


class ComputationGraph:
    """Append-only DAG; node inputs must already exist, so insertion order is
    topological by construction."""

    def __init__(self, store: ParamStore, check_finite: bool = True):
        self.store = store
        self.nodes: list[GraphNode] = []
        self.outputs: list[int] = []
        self.check_finite = check_finite
        self._order_cache: list[list[int]] | None = None

    # -- construction --------------------------------------------------------

    def add_input(self, shape: tuple[int, int], instance: int | None = None) -> int:
        nid = len(self.nodes)
        sig, sig_hash = _signature("input", (), (), (), tuple(shape[1:]))
        self.nodes.append(GraphNode(nid, "input", (), (), {}, tuple(shape),
                                    instance, sig, sig_hash))
        self._order_cache = None
        return nid

    def add(self, op: str, inputs: tuple[int, ...] | list[int],
            params: tuple[str, ...] = (), attrs: dict | None = None,
            instance: int | None = None) -> int:
        attrs = dict(attrs or {})
        inputs = tuple(int(i) for i in inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"{op}: input node {i} does not exist")
        for p in params:
            if p not in self.store.params and p not in self.store.buffers:
                raise ValueError(f"{op}: unknown parameter {p!r}")
        in_shapes = [self.nodes[i].shape for i in inputs]

        if op == "batch_norm":
            if len(params) != 4:
                raise ValueError("batch_norm needs (gamma, beta, run_mean, run_var)")
            width = in_shapes[0][1]
            for p in params:
                if self.store.value_of(p).shape != (width,):
                    raise ShapeError(
                        f"batch_norm: param {p!r} shape "
                        f"{self.store.value_of(p).shape} != ({width},)")
            attrs.setdefault("eps", BN_DEFAULT_EPS)
            attrs.setdefault("momentum", BN_DEFAULT_MOMENTUM)
            if attrs.get("mode") not in ("train", "infer"):
                raise ValueError("batch_norm: attrs['mode'] must be 'train' or 'infer'")
            shape = in_shapes[0]
            sig_attrs = ("mode", attrs["mode"], "eps", attrs["eps"],
                         "momentum", attrs["momentum"])
        else:
            opdef = OPS.get(op)
            if opdef is None:
                raise ValueError(f"unknown op {op!r}")
            pshapes = [self.store.value_of(p).shape for p in params]
            shape = opdef.infer_shape(in_shapes, pshapes, attrs)
            sig_attrs = opdef.sig_attrs(attrs)

        in_inner = tuple(s[1:] for s in in_shapes)
        sig, sig_hash = _signature(op, tuple(params), sig_attrs, in_inner,
                                   tuple(shape[1:]))
        nid = len(self.nodes)
        self.nodes.append(GraphNode(nid, op, inputs, tuple(params), attrs,
                                    tuple(shape), instance, sig, sig_hash))
        self._order_cache = None
        return nid

    def node(self, nid: int) -> GraphNode:
        return self.nodes[nid]

    def input_ids(self) -> list[int]:
        return [n.nid for n in self.nodes if n.op == "input"]

    # -- normalization groups --------------------------------------------------

    def bn_groups(self) -> dict[str, list[int]]:
        """Train-mode batch_norm nodes grouped by their gamma parameter."""
        groups: dict[str, list[int]] = {}
        for n in self.nodes:
            if n.op == "batch_norm" and n.attrs["mode"] == "train":
                groups.setdefault(n.params[0], []).append(n.nid)
        return groups

    def evaluation_units(self) -> list[list[int]]:
        """Topological order where each train-mode bn group is one unit.

        Members of a group are evaluated together (their statistics couple
        them); the contracted DAG must stay acyclic.
        """
        if self._order_cache is not None:
            return self._order_cache
        groups = self.bn_groups()
        unit_of: dict[int, tuple] = {}
        members: dict[tuple, list[int]] = {}
        for key, nids in groups.items():
            unit = ("g", key)
            members[unit] = sorted(nids)
            for nid in nids:
                unit_of[nid] = unit
        for n in self.nodes:
            if n.nid not in unit_of:
                unit = ("n", n.nid)
                unit_of[n.nid] = unit
                members[unit] = [n.nid]

        indegree: dict[tuple, int] = {u: 0 for u in members}
        out_edges: dict[tuple, list[tuple]] = {u: [] for u in members}
        for n in self.nodes:
            dst = unit_of[n.nid]
            for i in n.inputs:
                src = unit_of[i]
                if src != dst:
                    out_edges[src].append(dst)
                    indegree[dst] += 1

        heap = [(members[u][0], u) for u, d in indegree.items() if d == 0]
        heapq.heapify(heap)
        order: list[list[int]] = []
        done = 0
        while heap:
            _, unit = heapq.heappop(heap)
            order.append(members[unit])
            done += 1
            for dst in out_edges[unit]:
                indegree[dst] -= 1
                if indegree[dst] == 0:
                    heapq.heappush(heap, (members[dst][0], dst))
        if done != len(members):
            raise ValueError("graph has a cycle (batch_norm group contraction)")
        self._order_cache = order
        return order


# --- execution ---------------------------------------------------------------

def _bn_group_forward(graph: ComputationGraph, nids: list[int],
                      values: dict[int, np.ndarray]) -> None:
    first = graph.node(nids[0])
    gamma = graph.store.params[first.params[0]]
    beta = graph.store.params[first.params[1]]
    xs = [values[graph.node(nid).inputs[0]] for nid in nids]
    x = np.concatenate(xs, axis=0) if len(xs) > 1 else xs[0]
    out, mean, var, _, _ = bn_train_forward(x, gamma, beta, first.attrs["eps"])
    mom = first.attrs["momentum"]
    graph.store.buffers[first.params[2]] = (
        mom * graph.store.buffers[first.params[2]] + (1.0 - mom) * mean)
    graph.store.buffers[first.params[3]] = (
        mom * graph.store.buffers[first.params[3]] + (1.0 - mom) * var)
    offset = 0
    for nid, piece in zip(nids, xs):
        values[nid] = out[offset:offset + piece.shape[0]]
        offset += piece.shape[0]


def forward(graph: ComputationGraph, inputs: dict[int, np.ndarray],
            check_finite: bool | None = None) -> dict[int, np.ndarray]:
    """Evaluate every node; returns a value for each node id."""
    check = graph.check_finite if check_finite is None else check_finite
    dtype = graph.store.dtype
    values: dict[int, np.ndarray] = {}
    for nid, arr in inputs.items():
        node = graph.node(nid)
        arr = np.asarray(arr, dtype=dtype)
        if arr.shape != node.shape:
            raise ShapeError(f"input node {nid}: fed {arr.shape}, declared {node.shape}")
        values[nid] = arr

    for unit in graph.evaluation_units():
        node = graph.node(unit[0])
        if node.op == "input":
            for nid in unit:
                if nid not in values:
                    raise ValueError(f"missing value for input node {nid}")
            continue
        if node.op == "batch_norm" and node.attrs["mode"] == "train":
            _bn_group_forward(graph, unit, values)
        elif node.op == "batch_norm":
            for nid in unit:
                n = graph.node(nid)
                values[nid] = bn_infer_forward(
                    values[n.inputs[0]],
                    graph.store.params[n.params[0]], graph.store.params[n.params[1]],
                    graph.store.buffers[n.params[2]], graph.store.buffers[n.params[3]],
                    n.attrs["eps"])
        else:
            for nid in unit:
                n = graph.node(nid)
                ins = [values[i] for i in n.inputs]
                ps = [graph.store.value_of(p) for p in n.params]
                values[nid] = OPS[n.op].forward(ins, ps, n.attrs)
        if check:
            for nid in unit:
                if not np.isfinite(values[nid]).all():
                    raise NumericError(f"non-finite value at node {nid} ({node.op})")
    return values


def backward(graph: ComputationGraph, loss_nid: int,
             values: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss node for every trainable
    parameter (zeros where unreached)."""
    loss = graph.node(loss_nid)
    if loss.shape != (1, 1):
        raise ValueError(f"loss node must be scalar [1,1], got {loss.shape}")
    dtype = graph.store.dtype
    dvalues: dict[int, np.ndarray] = {loss_nid: np.ones((1, 1), dtype=dtype)}
    grads = {name: np.zeros_like(val) for name, val in graph.store.params.items()}

    for unit in reversed(graph.evaluation_units()):
        node = graph.node(unit[0])
        if node.op == "input":
            continue
        if node.op == "batch_norm" and node.attrs["mode"] == "train":
            live = [nid for nid in unit if nid in dvalues]
            if not live:
                continue
            first = graph.node(unit[0])
            gamma = graph.store.params[first.params[0]]
            xs = [values[graph.node(nid).inputs[0]] for nid in unit]
            x = np.concatenate(xs, axis=0) if len(xs) > 1 else xs[0]
            _, _, _, xhat, inv_std = bn_train_forward(
                x, gamma, graph.store.params[first.params[1]], first.attrs["eps"])
            gout = np.zeros_like(x)
            offset = 0
            for nid, piece in zip(unit, xs):
                if nid in dvalues:
                    gout[offset:offset + piece.shape[0]] = dvalues[nid]
                offset += piece.shape[0]
            dx, dgamma, dbeta = bn_train_backward(gout, gamma, xhat, inv_std)
            grads[first.params[0]] += dgamma
            grads[first.params[1]] += dbeta
            offset = 0
            for nid, piece in zip(unit, xs):
                src = graph.node(nid).inputs[0]
                part = dx[offset:offset + piece.shape[0]]
                offset += piece.shape[0]
                if graph.node(src).op != "input":
                    _accumulate(dvalues, src, part, dtype)
            continue
        for nid in unit:
            if nid not in dvalues:
                continue
            n = graph.node(nid)
            gout = dvalues[nid]
            if n.op == "batch_norm":  # infer mode
                dx, dgamma, dbeta = bn_infer_backward(
                    gout, values[n.inputs[0]],
                    graph.store.params[n.params[0]],
                    graph.store.buffers[n.params[2]], graph.store.buffers[n.params[3]],
                    n.attrs["eps"])
                grads[n.params[0]] += dgamma
                grads[n.params[1]] += dbeta
                in_grads = [dx]
                p_grads: list[np.ndarray] = []
            else:
                ins = [values[i] for i in n.inputs]
                ps = [graph.store.value_of(p) for p in n.params]
                in_grads, p_grads = OPS[n.op].backward(gout, ins, ps, values[nid], n.attrs)
                for pname, pg in zip(n.params, p_grads):
                    grads[pname] += pg
            for src, g in zip(n.inputs, in_grads):
                if g is not None and graph.node(src).op != "input":
                    _accumulate(dvalues, src, g, dtype)
    return grads


def _accumulate(dvalues: dict[int, np.ndarray], nid: int, g: np.ndarray, dtype) -> None:
    if nid in dvalues:
        dvalues[nid] = dvalues[nid] + g
    else:
        dvalues[nid] = np.asarray(g, dtype=dtype)
