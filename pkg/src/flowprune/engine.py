"""Dense float64 tensor graphs with reverse-mode differentiation.

A ``Record`` is an append-only list of primitive operations over named input
tensors. The vocabulary is deliberately small: matmul, transpose, reshape,
broadcast, add, elementwise multiply, scalar affine, sigmoid / tanh / silu,
axis sums, sum-of-squares, concat and axis slicing. Every backward rule emits
nodes from the same vocabulary, so a gradient is itself a differentiable
graph and Hessian-vector products fall out of a second reverse pass (double
backprop). A central-finite-difference HVP is provided as an independent
cross-check.

Replaying a record is deterministic: evaluation walks needed nodes in id
order, so two calls with identical inputs produce identical bits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

_BINARY = {"add", "mul"}
_UNARY = {"sigmoid", "tanh", "silu"}


@dataclass(frozen=True)
class Node:
    """One primitive operation; ``args`` are ids of earlier nodes."""

    nid: int
    op: str
    args: tuple
    attrs: tuple
    shape: tuple


class Ref:
    """Handle to a node inside a record, used while building graphs."""

    __slots__ = ("record", "nid")

    def __init__(self, record: "Record", nid: int):
        self.record = record
        self.nid = nid

    @property
    def shape(self) -> tuple:
        return self.record.nodes[self.nid].shape

    def __add__(self, other: "Ref") -> "Ref":
        return self.record.add(self, other)

    def __mul__(self, other: "Ref") -> "Ref":
        return self.record.mul(self, other)

    def __repr__(self) -> str:
        node = self.record.nodes[self.nid]
        return f"Ref({node.op}#{self.nid}, shape={node.shape})"


def _as_f64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Record:
    """Append-only computation record; also the graph builder.

    Build with the op methods, mark the result with :meth:`set_output`, then
    evaluate through :func:`forward` / :func:`gradient` /
    :func:`hessian_vector_product`. Gradient and HVP construction extend the
    record in place; the extensions are cached and never affect replay of the
    original output.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.consts: dict[int, np.ndarray] = {}
        self.output: int | None = None
        self._grad_cache: dict[tuple, dict[int, int]] = {}
        self._hvp_cache: dict[tuple, dict[str, int]] = {}
        self._plan_cache: dict[tuple, list[int]] = {}

    # -- construction -----------------------------------------------------

    def _append(self, op: str, args: tuple, attrs: tuple, shape: tuple) -> Ref:
        nid = len(self.nodes)
        self.nodes.append(Node(nid, op, args, attrs, tuple(shape)))
        return Ref(self, nid)

    def _node(self, ref: Ref) -> Node:
        if ref.record is not self:
            raise ValueError("ref belongs to a different record")
        return self.nodes[ref.nid]

    def input(self, name: str, shape: Iterable[int]) -> Ref:
        """Declare a named input. Re-declaring with the same shape is a no-op."""
        shape = tuple(int(s) for s in shape)
        if name in self.inputs:
            nid = self.inputs[name]
            if self.nodes[nid].shape != shape:
                raise ValueError(
                    f"input {name!r} re-declared with shape {shape}, "
                    f"was {self.nodes[nid].shape}"
                )
            return Ref(self, nid)
        ref = self._append("input", (), (name,), shape)
        self.inputs[name] = ref.nid
        return ref

    def const(self, value) -> Ref:
        arr = _as_f64(value)
        ref = self._append("const", (), (), arr.shape)
        self.consts[ref.nid] = arr
        return ref

    def matmul(self, a: Ref, b: Ref) -> Ref:
        sa, sb = self._node(a).shape, self._node(b).shape
        if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
            raise ValueError(f"matmul needs compatible 2-D shapes, got {sa} @ {sb}")
        return self._append("matmul", (a.nid, b.nid), (), (sa[0], sb[1]))

    def transpose(self, a: Ref) -> Ref:
        sa = self._node(a).shape
        if len(sa) != 2:
            raise ValueError(f"transpose needs a 2-D shape, got {sa}")
        return self._append("transpose", (a.nid,), (), (sa[1], sa[0]))

    def reshape(self, a: Ref, shape: Iterable[int]) -> Ref:
        shape = tuple(int(s) for s in shape)
        sa = self._node(a).shape
        if int(np.prod(sa, dtype=np.int64)) != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"cannot reshape {sa} to {shape}")
        return self._append("reshape", (a.nid,), (shape,), shape)

    def broadcast(self, a: Ref, shape: Iterable[int]) -> Ref:
        shape = tuple(int(s) for s in shape)
        sa = self._node(a).shape
        try:
            out = np.broadcast_shapes(sa, shape)
        except ValueError as exc:
            raise ValueError(f"cannot broadcast {sa} to {shape}") from exc
        if out != shape:
            raise ValueError(f"cannot broadcast {sa} to {shape}")
        return self._append("broadcast", (a.nid,), (shape,), shape)

    def _binary(self, op: str, a: Ref, b: Ref) -> Ref:
        sa, sb = self._node(a).shape, self._node(b).shape
        if sa != sb:
            raise ValueError(f"{op} needs equal shapes, got {sa} and {sb}")
        return self._append(op, (a.nid, b.nid), (), sa)

    def add(self, a: Ref, b: Ref) -> Ref:
        return self._binary("add", a, b)

    def mul(self, a: Ref, b: Ref) -> Ref:
        return self._binary("mul", a, b)

    def affine(self, a: Ref, scale: float, shift: float = 0.0) -> Ref:
        return self._append(
            "affine", (a.nid,), (float(scale), float(shift)), self._node(a).shape
        )

    def sigmoid(self, a: Ref) -> Ref:
        return self._append("sigmoid", (a.nid,), (), self._node(a).shape)

    def tanh(self, a: Ref) -> Ref:
        return self._append("tanh", (a.nid,), (), self._node(a).shape)

    def silu(self, a: Ref) -> Ref:
        return self._append("silu", (a.nid,), (), self._node(a).shape)

    def sum_axes(self, a: Ref, axes: Iterable[int] | None = None) -> Ref:
        sa = self._node(a).shape
        if axes is None:
            axes_t = tuple(range(len(sa)))
        else:
            axes_t = tuple(sorted(ax % len(sa) for ax in axes))
        if len(set(axes_t)) != len(axes_t):
            raise ValueError(f"duplicate axes {axes_t}")
        shape = tuple(s for i, s in enumerate(sa) if i not in axes_t)
        return self._append("sum_axes", (a.nid,), (axes_t,), shape)

    def sum_sq(self, a: Ref) -> Ref:
        return self._append("sum_sq", (a.nid,), (), ())

    def concat(self, parts: Iterable[Ref], axis: int) -> Ref:
        parts = list(parts)
        if not parts:
            raise ValueError("concat needs at least one part")
        shapes = [self._node(p).shape for p in parts]
        rank = len(shapes[0])
        axis = axis % rank
        for s in shapes:
            if len(s) != rank or any(
                s[i] != shapes[0][i] for i in range(rank) if i != axis
            ):
                raise ValueError(f"concat shapes incompatible: {shapes}")
        out = list(shapes[0])
        out[axis] = sum(s[axis] for s in shapes)
        return self._append(
            "concat", tuple(p.nid for p in parts), (axis,), tuple(out)
        )

    def slice_axis(self, a: Ref, axis: int, start: int, stop: int) -> Ref:
        sa = self._node(a).shape
        axis = axis % len(sa)
        if not (0 <= start <= stop <= sa[axis]):
            raise ValueError(f"slice [{start}:{stop}] out of range for {sa}")
        shape = list(sa)
        shape[axis] = stop - start
        return self._append(
            "slice", (a.nid,), (axis, start, stop), tuple(shape)
        )

    def linear(self, x: Ref, weight: Ref, bias: Ref | None = None) -> Ref:
        """x @ weight.T (+ bias), with weight stored as [out, in]."""
        out = self.matmul(x, self.transpose(weight))
        if bias is not None:
            rows = self._node(x).shape[0]
            cols = self._node(bias).shape[0]
            out = self.add(
                out, self.broadcast(self.reshape(bias, (1, cols)), (rows, cols))
            )
        return out

    def set_output(self, ref: Ref) -> None:
        self._node(ref)
        self.output = ref.nid

    # -- evaluation --------------------------------------------------------

    def _plan(self, targets: tuple) -> list[int]:
        """Ids of all nodes needed for ``targets``, ascending (toposorted)."""
        if targets in self._plan_cache:
            return self._plan_cache[targets]
        needed = set()
        stack = list(targets)
        while stack:
            nid = stack.pop()
            if nid in needed:
                continue
            needed.add(nid)
            stack.extend(self.nodes[nid].args)
        plan = sorted(needed)
        self._plan_cache[targets] = plan
        return plan

    def evaluate(self, targets: tuple, inputs: Mapping[str, np.ndarray]) -> dict:
        vals: dict[int, np.ndarray] = {}
        for nid in self._plan(targets):
            node = self.nodes[nid]
            op = node.op
            if op == "input":
                name = node.attrs[0]
                if name not in inputs:
                    raise KeyError(f"missing input {name!r}")
                arr = _as_f64(inputs[name])
                if arr.shape != node.shape:
                    raise ValueError(
                        f"input {name!r} has shape {arr.shape}, record expects "
                        f"{node.shape}"
                    )
                vals[nid] = arr
            elif op == "const":
                vals[nid] = self.consts[nid]
            elif op == "matmul":
                vals[nid] = vals[node.args[0]] @ vals[node.args[1]]
            elif op == "transpose":
                vals[nid] = vals[node.args[0]].T
            elif op == "reshape":
                vals[nid] = vals[node.args[0]].reshape(node.attrs[0])
            elif op == "broadcast":
                vals[nid] = np.broadcast_to(vals[node.args[0]], node.attrs[0])
            elif op == "add":
                vals[nid] = vals[node.args[0]] + vals[node.args[1]]
            elif op == "mul":
                vals[nid] = vals[node.args[0]] * vals[node.args[1]]
            elif op == "affine":
                scale, shift = node.attrs
                vals[nid] = vals[node.args[0]] * scale + shift
            elif op == "sigmoid":
                x = vals[node.args[0]]
                vals[nid] = 1.0 / (1.0 + np.exp(-x))
            elif op == "tanh":
                vals[nid] = np.tanh(vals[node.args[0]])
            elif op == "silu":
                x = vals[node.args[0]]
                vals[nid] = x / (1.0 + np.exp(-x))
            elif op == "sum_axes":
                vals[nid] = np.sum(vals[node.args[0]], axis=node.attrs[0])
            elif op == "sum_sq":
                x = vals[node.args[0]]
                vals[nid] = np.sum(x * x)
            elif op == "concat":
                vals[nid] = np.concatenate(
                    [vals[a] for a in node.args], axis=node.attrs[0]
                )
            elif op == "slice":
                axis, start, stop = node.attrs
                idx = [slice(None)] * len(self.nodes[node.args[0]].shape)
                idx[axis] = slice(start, stop)
                vals[nid] = vals[node.args[0]][tuple(idx)]
            else:  # pragma: no cover
                raise ValueError(f"unknown op {op!r}")
        return vals

    # -- differentiation ---------------------------------------------------

    def _vjp(self, node: Node, g: Ref, refs: dict[int, Ref]) -> list[tuple[int, Ref]]:
        """Contributions (parent id, grad ref) for one node, built from primitives."""
        out: list[tuple[int, Ref]] = []
        args = node.args
        if node.op in ("input", "const"):
            return out
        if node.op == "matmul":
            a, b = refs[args[0]], refs[args[1]]
            out.append((args[0], self.matmul(g, self.transpose(b))))
            out.append((args[1], self.matmul(self.transpose(a), g)))
        elif node.op == "transpose":
            out.append((args[0], self.transpose(g)))
        elif node.op == "reshape":
            src_shape = self.nodes[args[0]].shape
            out.append((args[0], self.reshape(g, src_shape)))
        elif node.op == "broadcast":
            src_shape = self.nodes[args[0]].shape
            target = node.attrs[0]
            pre = len(target) - len(src_shape)
            axes = list(range(pre))
            for i, s in enumerate(src_shape):
                if s == 1 and target[pre + i] != 1:
                    axes.append(pre + i)
            red = self.sum_axes(g, axes) if axes else g
            if red.shape != src_shape:
                red = self.reshape(red, src_shape)
            out.append((args[0], red))
        elif node.op == "add":
            out.append((args[0], g))
            out.append((args[1], g))
        elif node.op == "mul":
            out.append((args[0], self.mul(g, refs[args[1]])))
            out.append((args[1], self.mul(g, refs[args[0]])))
        elif node.op == "affine":
            out.append((args[0], self.affine(g, node.attrs[0], 0.0)))
        elif node.op == "sigmoid":
            y = Ref(self, node.nid)
            out.append((args[0], self.mul(g, self.mul(y, self.affine(y, -1.0, 1.0)))))
        elif node.op == "tanh":
            y = Ref(self, node.nid)
            out.append((args[0], self.mul(g, self.affine(self.mul(y, y), -1.0, 1.0))))
        elif node.op == "silu":
            x = refs[args[0]]
            s = self.sigmoid(x)
            inner = self.add(s, self.mul(self.mul(x, s), self.affine(s, -1.0, 1.0)))
            out.append((args[0], self.mul(g, inner)))
        elif node.op == "sum_axes":
            src_shape = self.nodes[args[0]].shape
            axes = node.attrs[0]
            keep = tuple(1 if i in axes else s for i, s in enumerate(src_shape))
            out.append(
                (args[0], self.broadcast(self.reshape(g, keep), src_shape))
            )
        elif node.op == "sum_sq":
            src = refs[args[0]]
            src_shape = self.nodes[args[0]].shape
            gb = self.broadcast(g, src_shape) if src_shape else g
            out.append((args[0], self.affine(self.mul(gb, src), 2.0, 0.0)))
        elif node.op == "concat":
            axis = node.attrs[0]
            off = 0
            for a in args:
                extent = self.nodes[a].shape[axis]
                out.append((a, self.slice_axis(g, axis, off, off + extent)))
                off += extent
        elif node.op == "slice":
            axis, start, stop = node.attrs
            src_shape = self.nodes[args[0]].shape
            parts = []
            if start > 0:
                pre = list(src_shape)
                pre[axis] = start
                parts.append(self.const(np.zeros(pre)))
            parts.append(g)
            if stop < src_shape[axis]:
                post = list(src_shape)
                post[axis] = src_shape[axis] - stop
                parts.append(self.const(np.zeros(post)))
            grad = parts[0] if len(parts) == 1 else self.concat(parts, axis)
            out.append((args[0], grad))
        else:  # pragma: no cover
            raise ValueError(f"no backward rule for {node.op!r}")
        return out

    def _build_grad(self, out_id: int, wrt_ids: tuple) -> dict[int, int]:
        """Extend the record with gradient nodes of node ``out_id`` w.r.t. leaves.

        Returns leaf id -> grad node id; leaves with no path to the output get
        zero-constant gradients.
        """
        key = (out_id, wrt_ids)
        if key in self._grad_cache:
            return self._grad_cache[key]
        if self.nodes[out_id].shape != ():
            raise ValueError("gradient target must be scalar")

        ancestors = set(self._plan((out_id,)))
        # Nodes through which a wrt leaf can influence the output.
        relevant = set()
        for nid in sorted(ancestors):
            node = self.nodes[nid]
            if nid in wrt_ids or any(a in relevant for a in node.args):
                relevant.add(nid)

        refs = {nid: Ref(self, nid) for nid in ancestors}
        contribs: dict[int, list[Ref]] = {out_id: [self.const(np.float64(1.0))]}
        for nid in sorted(ancestors & relevant, reverse=True):
            parts = contribs.get(nid)
            if not parts:
                continue
            g = parts[0]
            for extra in parts[1:]:
                g = self.add(g, extra)
            contribs[nid] = [g]
            for parent, grad_ref in self._vjp(self.nodes[nid], g, refs):
                if parent in relevant:
                    contribs.setdefault(parent, []).append(grad_ref)

        result = {}
        for wid in wrt_ids:
            parts = contribs.get(wid)
            if parts:
                g = parts[0]
                for extra in parts[1:]:
                    g = self.add(g, extra)
                result[wid] = g.nid
            else:
                result[wid] = self.const(np.zeros(self.nodes[wid].shape)).nid
        self._grad_cache[key] = result
        return result

    def _wrt_ids(self, wrt: Iterable[str]) -> tuple:
        names = sorted(set(wrt))
        missing = [n for n in names if n not in self.inputs]
        if missing:
            raise KeyError(f"unknown parameter name(s): {missing}")
        return tuple(self.inputs[n] for n in names), names

    def _ensure_hvp(self, wrt: Iterable[str]) -> dict[str, int]:
        wrt_ids, names = self._wrt_ids(wrt)
        if not names:
            raise ValueError("HVP needs at least one parameter name")
        key = (self.output, wrt_ids)
        if key in self._hvp_cache:
            return self._hvp_cache[key]
        grads = self._build_grad(self.output, wrt_ids)
        phi = None
        for name, wid in zip(names, wrt_ids):
            v = self.input(f"__hvp_v:{name}", self.nodes[wid].shape)
            term = self.sum_axes(self.mul(Ref(self, grads[wid]), v))
            phi = term if phi is None else self.add(phi, term)
        hv = self._build_grad(phi.nid, wrt_ids)
        result = {name: hv[wid] for name, wid in zip(names, wrt_ids)}
        self._hvp_cache[key] = result
        return result


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
    return arr


def _require_output(record: Record) -> int:
    if record.output is None:
        raise ValueError("record has no output; call set_output first")
    return record.output


def forward(record: Record, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Replay the record on ``inputs`` and return its output tensor."""
    out = _require_output(record)
    vals = record.evaluate((out,), inputs)
    return _check_finite(vals[out], "forward output")


def gradient(
    record: Record, inputs: Mapping[str, np.ndarray], wrt: Iterable[str]
) -> dict[str, np.ndarray]:
    """Gradients of the scalar output w.r.t. the named inputs."""
    out = _require_output(record)
    if record.nodes[out].shape != ():
        raise ValueError("gradient requires a scalar record output")
    wrt_ids, names = record._wrt_ids(wrt)
    grads = record._build_grad(out, wrt_ids)
    targets = tuple(grads[w] for w in wrt_ids)
    vals = record.evaluate(targets, inputs)
    return {
        name: _check_finite(vals[grads[wid]], f"gradient[{name}]")
        for name, wid in zip(names, wrt_ids)
    }


def hessian_vector_product(
    record: Record,
    inputs: Mapping[str, np.ndarray],
    wrt: Iterable[str],
    v: Mapping[str, np.ndarray],
    method: str = "exact",
    fd_step: float | None = None,
) -> dict[str, np.ndarray]:
    """H @ v for the Hessian of the scalar output w.r.t. the named inputs.

    ``method="exact"`` differentiates the gradient graph (double backprop);
    ``method="fd"`` uses central differences of the gradient along ``v`` with
    step ``fd_step`` (default ``1e-4 * (1 + max|theta|)``).
    """
    out = _require_output(record)
    if record.nodes[out].shape != ():
        raise ValueError("HVP requires a scalar record output")
    wrt_ids, names = record._wrt_ids(wrt)
    for name in names:
        if name not in v:
            raise KeyError(f"v missing entry for {name!r}")
        vs = _as_f64(v[name]).shape
        ps = record.nodes[record.inputs[name]].shape
        if vs != ps:
            raise ValueError(f"v[{name!r}] has shape {vs}, parameter has {ps}")

    if method == "exact":
        hv = record._ensure_hvp(names)
        feed = dict(inputs)
        for name in names:
            feed[f"__hvp_v:{name}"] = v[name]
        targets = tuple(hv[name] for name in names)
        vals = record.evaluate(targets, feed)
        return {
            name: _check_finite(vals[hv[name]], f"hvp[{name}]") for name in names
        }
    if method == "fd":
        if fd_step is None:
            theta_inf = max(
                (float(np.max(np.abs(_as_f64(inputs[n])))) for n in names),
                default=0.0,
            )
            fd_step = 1e-4 * (1.0 + theta_inf)
        if fd_step <= 0:
            raise ValueError("fd_step must be positive")
        plus = dict(inputs)
        minus = dict(inputs)
        for name in names:
            base = _as_f64(inputs[name])
            vv = _as_f64(v[name])
            plus[name] = base + fd_step * vv
            minus[name] = base - fd_step * vv
        g_plus = gradient(record, plus, names)
        g_minus = gradient(record, minus, names)
        return {
            name: _check_finite(
                (g_plus[name] - g_minus[name]) / (2.0 * fd_step), f"hvp[{name}]"
            )
            for name in names
        }
    raise ValueError(f"unknown HVP method {method!r}")
