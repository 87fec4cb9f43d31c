"""Primitive tensor ops: forward kernels, reverse-mode adjoints, and the
signature metadata the dynamic batcher needs.

All values are 2-D float matrices [rows, width]; scalars travel as [1, 1].
Parameters (weights, biases, normalization affines) are referenced by name
rather than appearing as graph edges.  Every kernel is a pure function of its
arrays except train-mode batch normalization, whose running-statistics update
is handled by the executors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    """Non-finite value produced by an op (debug finite-check tripped)."""


# --- segmented helpers ------------------------------------------------------

def segment_offsets(lengths: np.ndarray) -> np.ndarray:
    out = np.zeros(len(lengths) + 1, dtype=np.int64)
    np.cumsum(lengths, out=out[1:])
    return out


def segment_sum(x: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    # cumsum difference handles zero-length segments (rows come out zero)
    offs = segment_offsets(lengths)
    csum = np.vstack([np.zeros((1, x.shape[1]), x.dtype), np.cumsum(x, axis=0)])
    return csum[offs[1:]] - csum[offs[:-1]]


def segment_max(x: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    offs = segment_offsets(lengths)
    out = np.zeros((len(lengths), x.shape[1]), x.dtype)
    nonempty = lengths > 0
    if x.shape[0] and nonempty.any():
        starts = np.minimum(offs[:-1], x.shape[0] - 1)
        red = np.maximum.reduceat(x, starts, axis=0)
        out[nonempty] = red[nonempty]
    return out


def segment_avg(x: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    sums = segment_sum(x, lengths)
    denom = np.maximum(lengths, 1).astype(x.dtype)
    return sums / denom[:, None]


def _segment_max_argfirst(x: np.ndarray, lengths: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Row index of the first maximum in each (segment, column); -1 if empty."""
    offs = segment_offsets(lengths)
    n, w = x.shape
    arg = np.full((len(lengths), w), -1, dtype=np.int64)
    if n == 0:
        return arg
    seg_of_row = np.repeat(np.arange(len(lengths)), lengths)
    is_max = x == out[seg_of_row]
    row_idx = np.where(is_max, np.arange(n)[:, None], n)
    nonempty = lengths > 0
    starts = np.minimum(offs[:-1], n - 1)
    first = np.minimum.reduceat(row_idx, starts, axis=0)
    arg[nonempty] = first[nonempty]
    return arg


# --- batch normalization kernels -------------------------------------------

def bn_train_forward(x, gamma, beta, eps):
    mean = x.mean(axis=0)
    var = x.var(axis=0)  # biased (1/N)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, mean, var, xhat, inv_std


def bn_train_backward(grad, gamma, xhat, inv_std):
    n = grad.shape[0]
    dgamma = (grad * xhat).sum(axis=0)
    dbeta = grad.sum(axis=0)
    dx = (gamma * inv_std / n) * (n * grad - dbeta - xhat * dgamma)
    return dx, dgamma, dbeta


def bn_infer_forward(x, gamma, beta, run_mean, run_var, eps):
    inv_std = 1.0 / np.sqrt(run_var + eps)
    return gamma * (x - run_mean) * inv_std + beta


def bn_infer_backward(grad, x, gamma, run_mean, run_var, eps):
    inv_std = 1.0 / np.sqrt(run_var + eps)
    dx = grad * gamma * inv_std
    dgamma = (grad * (x - run_mean) * inv_std).sum(axis=0)
    dbeta = grad.sum(axis=0)
    return dx, dgamma, dbeta


# --- op registry ------------------------------------------------------------

@dataclass(frozen=True)
class OpDef:
    name: str
    infer_shape: Callable  # (input_shapes, param_shapes, attrs) -> shape
    forward: Callable      # (inputs, params, attrs) -> array
    backward: Callable     # (grad, inputs, params, output, attrs) -> (in_grads, param_grads)
    sig_attrs: Callable    # attrs -> tuple folded into the batching signature
    # merge_attrs(member_attrs, in_rows, out_rows) -> wide attrs, where
    # in_rows[slot][member] and out_rows[member] are row counts
    merge_attrs: Callable | None = None


def _sig_none(attrs) -> tuple:
    return ()


def _same_attrs(members_attrs, in_rows, out_rows):
    return dict(members_attrs[0])


def _exclusive_offsets(rows: list[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(rows[:-1])]).astype(np.int64) if rows \
        else np.zeros(0, np.int64)


# matmul(X; W) ---------------------------------------------------------------

def _matmul_shape(ins, pshapes, attrs):
    (xs,), (ws,) = ins, pshapes
    if len(xs) != 2 or len(ws) != 2 or xs[1] != ws[0]:
        raise ShapeError(f"matmul: input {xs} incompatible with weight {ws}")
    return (xs[0], ws[1])

def _matmul_fwd(inputs, params, attrs):
    return inputs[0] @ params[0]

def _matmul_bwd(grad, inputs, params, output, attrs):
    return [grad @ params[0].T], [inputs[0].T @ grad]


# add_bias(X; B) --------------------------------------------------------------

def _add_bias_shape(ins, pshapes, attrs):
    (xs,), (bs,) = ins, pshapes
    if len(bs) != 1 or bs[0] != xs[1]:
        raise ShapeError(f"add_bias: input {xs} incompatible with bias {bs}")
    return xs

def _add_bias_fwd(inputs, params, attrs):
    return inputs[0] + params[0]

def _add_bias_bwd(grad, inputs, params, output, attrs):
    return [grad], [grad.sum(axis=0)]


# concat(axis, X...) ----------------------------------------------------------

def _concat_shape(ins, pshapes, attrs):
    axis = attrs["axis"]
    if axis not in (0, 1):
        raise ShapeError(f"concat: axis must be 0 or 1, got {axis}")
    other = 1 - axis
    base = ins[0]
    for s in ins[1:]:
        if s[other] != base[other]:
            raise ShapeError(f"concat(axis={axis}): shape {s} incompatible with {base}")
    total = sum(s[axis] for s in ins)
    return (total, base[1]) if axis == 0 else (base[0], total)

def _concat_fwd(inputs, params, attrs):
    return np.concatenate(inputs, axis=attrs["axis"])

def _concat_bwd(grad, inputs, params, output, attrs):
    axis = attrs["axis"]
    sizes = [x.shape[axis] for x in inputs]
    splits = np.cumsum(sizes)[:-1]
    return list(np.split(grad, splits, axis=axis)), []

def _concat_sig(attrs):
    return ("axis", attrs["axis"])


# leaky_relu(X; alpha) ---------------------------------------------------------

def _eltwise_shape(ins, pshapes, attrs):
    return ins[0]

def _leaky_fwd(inputs, params, attrs):
    x = inputs[0]
    return np.where(x > 0, x, attrs["alpha"] * x)

def _leaky_bwd(grad, inputs, params, output, attrs):
    x = inputs[0]
    return [grad * np.where(x > 0, 1.0, attrs["alpha"])], []

def _leaky_sig(attrs):
    return ("alpha", attrs["alpha"])


# segment_reduce(kind, X; lengths) ---------------------------------------------

def _segred_shape(ins, pshapes, attrs):
    (xs,) = ins
    lengths = attrs["lengths"]
    if int(np.sum(lengths)) != xs[0]:
        raise ShapeError(
            f"segment_reduce: lengths sum {int(np.sum(lengths))} != input rows {xs[0]}")
    return (len(lengths), xs[1])

def _segred_fwd(inputs, params, attrs):
    x = inputs[0]
    lengths = attrs["lengths"]
    kind = attrs["kind"]
    if kind == "sum":
        return segment_sum(x, lengths)
    if kind == "avg":
        return segment_avg(x, lengths)
    if kind == "max":
        return segment_max(x, lengths)
    raise ValueError(f"segment_reduce: unknown kind {kind!r}")

def _segred_bwd(grad, inputs, params, output, attrs):
    x = inputs[0]
    lengths = np.asarray(attrs["lengths"])
    kind = attrs["kind"]
    if kind == "sum":
        return [np.repeat(grad, lengths, axis=0)], []
    if kind == "avg":
        denom = np.maximum(lengths, 1).astype(grad.dtype)
        return [np.repeat(grad / denom[:, None], lengths, axis=0)], []
    # max: route each segment/column gradient to the first attaining row
    dx = np.zeros_like(x)
    arg = _segment_max_argfirst(x, lengths, output)
    valid = arg >= 0
    if valid.any():
        cols = np.broadcast_to(np.arange(x.shape[1]), arg.shape)
        np.add.at(dx, (arg[valid], cols[valid]), grad[valid])
    return [dx], []

def _segred_sig(attrs):
    return ("kind", attrs["kind"])

def _segred_merge(members_attrs, in_rows, out_rows):
    lengths = np.concatenate([np.asarray(a["lengths"], dtype=np.int64)
                              for a in members_attrs])
    return {"kind": members_attrs[0]["kind"], "lengths": lengths}


# gather(X; index) --------------------------------------------------------------

def _gather_shape(ins, pshapes, attrs):
    (xs,) = ins
    index = np.asarray(attrs["index"])
    if index.size and (index.min() < 0 or index.max() >= xs[0]):
        raise ShapeError(f"gather: index out of range for {xs[0]} rows")
    return (index.shape[0], xs[1])

def _gather_fwd(inputs, params, attrs):
    return inputs[0][np.asarray(attrs["index"])]

def _gather_bwd(grad, inputs, params, output, attrs):
    dx = np.zeros_like(inputs[0])
    np.add.at(dx, np.asarray(attrs["index"]), grad)
    return [dx], []

def _gather_merge(members_attrs, in_rows, out_rows):
    offs = _exclusive_offsets(in_rows[0])
    parts = [np.asarray(a["index"], dtype=np.int64) + off
             for a, off in zip(members_attrs, offs)]
    return {"index": np.concatenate(parts) if parts else np.zeros(0, np.int64)}


# scatter(X; index, out_rows) -----------------------------------------------------

def _scatter_shape(ins, pshapes, attrs):
    (xs,) = ins
    index = np.asarray(attrs["index"])
    rows = attrs["out_rows"]
    if index.shape[0] != xs[0]:
        raise ShapeError(f"scatter: index length {index.shape[0]} != input rows {xs[0]}")
    if index.size and (index.min() < 0 or index.max() >= rows):
        raise ShapeError(f"scatter: index out of range for {rows} output rows")
    if index.size != np.unique(index).size:
        raise ShapeError("scatter: index map must be injective")
    return (rows, xs[1])

def _scatter_fwd(inputs, params, attrs):
    x = inputs[0]
    out = np.zeros((attrs["out_rows"], x.shape[1]), x.dtype)
    out[np.asarray(attrs["index"])] = x
    return out

def _scatter_bwd(grad, inputs, params, output, attrs):
    return [grad[np.asarray(attrs["index"])]], []

def _scatter_merge(members_attrs, in_rows, out_rows):
    offs = _exclusive_offsets(out_rows)
    parts = [np.asarray(a["index"], dtype=np.int64) + off
             for a, off in zip(members_attrs, offs)]
    return {
        "index": np.concatenate(parts) if parts else np.zeros(0, np.int64),
        "out_rows": int(sum(a["out_rows"] for a in members_attrs)),
    }


# mse(pred, target, mask) ----------------------------------------------------------

def _mse_shape(ins, pshapes, attrs):
    p, t, m = ins
    if not (p == t == m):
        raise ShapeError(f"mse: shapes differ: pred {p}, target {t}, mask {m}")
    lengths = attrs.get("lengths")
    return (1, 1) if lengths is None else (len(lengths), 1)

def _mse_fwd(inputs, params, attrs):
    pred, target, mask = inputs
    sq = mask * (pred - target) ** 2
    lengths = attrs.get("lengths")
    if lengths is None:
        count = mask.sum()
        val = sq.sum() / count if count > 0 else 0.0
        return np.array([[val]], dtype=pred.dtype)
    counts = segment_sum(mask, lengths).sum(axis=1, keepdims=True)
    sums = segment_sum(sq, lengths).sum(axis=1, keepdims=True)
    return np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)

def _mse_bwd(grad, inputs, params, output, attrs):
    pred, target, mask = inputs
    lengths = attrs.get("lengths")
    if lengths is None:
        count = mask.sum()
        coeff = (grad[0, 0] * 2.0 / count) if count > 0 else 0.0
        dpred = coeff * mask * (pred - target)
    else:
        counts = segment_sum(mask, np.asarray(lengths)).sum(axis=1, keepdims=True)
        coeff = np.divide(grad * 2.0, counts, out=np.zeros_like(grad), where=counts > 0)
        dpred = np.repeat(coeff, np.asarray(lengths), axis=0) * mask * (pred - target)
    # mask is a constant selector by contract
    return [dpred, -dpred, np.zeros_like(mask)], []

def _mse_merge(members_attrs, in_rows, out_rows):
    return {"lengths": np.asarray(in_rows[0], dtype=np.int64)}


# sqrt, scale, add_n -----------------------------------------------------------------

def _sqrt_fwd(inputs, params, attrs):
    return np.sqrt(inputs[0])

def _sqrt_bwd(grad, inputs, params, output, attrs):
    # d sqrt(0) defined as 0: empty/perfect loss terms contribute nothing
    with np.errstate(divide="ignore"):
        d = np.where(output > 0, 0.5 / np.where(output > 0, output, 1.0), 0.0)
    return [grad * d], []

def _scale_fwd(inputs, params, attrs):
    return attrs["factor"] * inputs[0]

def _scale_bwd(grad, inputs, params, output, attrs):
    return [attrs["factor"] * grad], []

def _scale_sig(attrs):
    return ("factor", attrs["factor"])

def _add_n_shape(ins, pshapes, attrs):
    for s in ins[1:]:
        if s != ins[0]:
            raise ShapeError(f"add_n: shape {s} differs from {ins[0]}")
    return ins[0]

def _add_n_fwd(inputs, params, attrs):
    out = inputs[0].copy()
    for x in inputs[1:]:
        out += x
    return out

def _add_n_bwd(grad, inputs, params, output, attrs):
    return [grad for _ in inputs], []


OPS: dict[str, OpDef] = {
    "matmul": OpDef("matmul", _matmul_shape, _matmul_fwd, _matmul_bwd, _sig_none, _same_attrs),
    "add_bias": OpDef("add_bias", _add_bias_shape, _add_bias_fwd, _add_bias_bwd, _sig_none, _same_attrs),
    "concat": OpDef("concat", _concat_shape, _concat_fwd, _concat_bwd, _concat_sig, _same_attrs),
    "leaky_relu": OpDef("leaky_relu", _eltwise_shape, _leaky_fwd, _leaky_bwd, _leaky_sig, _same_attrs),
    "segment_reduce": OpDef("segment_reduce", _segred_shape, _segred_fwd, _segred_bwd, _segred_sig, _segred_merge),
    "gather": OpDef("gather", _gather_shape, _gather_fwd, _gather_bwd, _sig_none, _gather_merge),
    "scatter": OpDef("scatter", _scatter_shape, _scatter_fwd, _scatter_bwd, _sig_none, _scatter_merge),
    "mse": OpDef("mse", _mse_shape, _mse_fwd, _mse_bwd, _sig_none, _mse_merge),
    "sqrt": OpDef("sqrt", _eltwise_shape, _sqrt_fwd, _sqrt_bwd, _sig_none, _same_attrs),
    "scale": OpDef("scale", _eltwise_shape, _scale_fwd, _scale_bwd, _scale_sig, _same_attrs),
    "add_n": OpDef("add_n", _add_n_shape, _add_n_fwd, _add_n_bwd, _sig_none, _same_attrs),
}
