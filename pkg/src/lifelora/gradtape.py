"""Minimal reverse-mode autodiff over 2-D float64 arrays.

The op set is closed: anything else is composed from these. Every node value
is a 2-D matrix; scalars are 1x1.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UsageError

OPS = frozenset(
    {
        "param",
        "const",
        "add",
        "matmul",
        "transpose",
        "hadamard",
        "tanh",
        "scale",
        "mul_scalar",
        "sum",
        "softmax",
        "softmax_xent",
        "trace_product",
        "frob_normalize",
        "index",
        "straight_through",
    }
)


@dataclass
class Node:
    id: int
    value: np.ndarray
    op: str
    parents: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    grad: np.ndarray | None = None
    needs_grad: bool = False


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.param_ids: set[int] = set()
        self._backward_done = False

    def __len__(self):
        return len(self.nodes)

    def value(self, i: int) -> np.ndarray:
        return self.nodes[i].value

    def record(self, op: str, inputs, value, **attrs) -> int:
        if op not in OPS:
            raise UsageError(f"unknown op tag {op!r}")
        inputs = tuple(int(i) for i in inputs)
        nid = len(self.nodes)
        for i in inputs:
            if not 0 <= i < nid:
                raise UsageError(f"input node {i} is not on the tape")
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise ShapeError(f"node values must be 2-D, got {value.shape}")
        needs = op == "param" or any(self.nodes[i].needs_grad for i in inputs)
        self.nodes.append(Node(nid, value, op, inputs, attrs, None, needs))
        return nid

    # leaves
    def param(self, value) -> int:
        nid = self.record("param", (), np.array(value, dtype=np.float64, ndmin=2))
        self.param_ids.add(nid)
        return nid

    def const(self, value) -> int:
        return self.record("const", (), np.array(value, dtype=np.float64, ndmin=2))

    # differentiable ops
    def add(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        if va.shape != vb.shape and not (vb.shape[0] == 1 and vb.shape[1] == va.shape[1]):
            raise ShapeError(f"add: {va.shape} + {vb.shape}")
        return self.record("add", (a, b), va + vb)

    def matmul(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        if va.shape[1] != vb.shape[0]:
            raise ShapeError(f"matmul: {va.shape} x {vb.shape}")
        return self.record("matmul", (a, b), va @ vb)

    def transpose(self, a: int) -> int:
        return self.record("transpose", (a,), self.value(a).T.copy())

    def hadamard(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        if va.shape != vb.shape:
            raise ShapeError(f"hadamard: {va.shape} vs {vb.shape}")
        return self.record("hadamard", (a, b), va * vb)

    def tanh(self, a: int) -> int:
        return self.record("tanh", (a,), np.tanh(self.value(a)))

    def scale(self, a: int, c: float) -> int:
        return self.record("scale", (a,), float(c) * self.value(a), c=float(c))

    def mul_scalar(self, s: int, a: int) -> int:
        vs = self.value(s)
        if vs.shape != (1, 1):
            raise ShapeError(f"mul_scalar expects a 1x1 scalar, got {vs.shape}")
        return self.record("mul_scalar", (s, a), vs[0, 0] * self.value(a))

    def sum(self, a: int) -> int:
        return self.record("sum", (a,), np.array([[self.value(a).sum()]]))

    def softmax(self, a: int) -> int:
        v = self.value(a)
        z = np.exp(v - v.max(axis=1, keepdims=True))
        return self.record("softmax", (a,), z / z.sum(axis=1, keepdims=True))

    def softmax_xent(self, logits: int, targets) -> int:
        """Summed negative log-likelihood of integer targets under row softmax."""
        v = self.value(logits)
        targets = np.asarray(targets, dtype=np.int64)
        if targets.shape != (v.shape[0],):
            raise ShapeError(f"softmax_xent: {v.shape[0]} rows vs {targets.shape} targets")
        shifted = v - v.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        logp = shifted[np.arange(len(targets)), targets] - logz
        probs = np.exp(shifted - logz[:, None])
        return self.record(
            "softmax_xent", (logits,), np.array([[-logp.sum()]]), targets=targets, probs=probs
        )

    def trace_product(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        if va.shape != vb.shape:
            raise ShapeError(f"trace_product: {va.shape} vs {vb.shape}")
        return self.record("trace_product", (a, b), np.array([[np.sum(va * vb)]]))

    def frob_normalize(self, a: int, eps: float) -> int:
        v = self.value(a)
        n = float(np.sqrt(np.sum(v * v)))
        return self.record("frob_normalize", (a,), v / (n + eps), eps=float(eps), norm=n)

    def index(self, a: int, i: int, j: int) -> int:
        return self.record("index", (a,), self.value(a)[i : i + 1, j : j + 1].copy(), i=i, j=j)

    def straight_through(self, soft: int, forward_value) -> int:
        """Forward ``forward_value``; backward passes the gradient to ``soft`` unchanged."""
        fv = np.array(forward_value, dtype=np.float64, ndmin=2)
        if fv.shape != self.value(soft).shape:
            raise ShapeError("straight_through forward value must match the soft node shape")
        return self.record("straight_through", (soft,), fv)

    def reset(self):
        for n in self.nodes:
            n.grad = None
        self._backward_done = False


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


def _vjp(node: Node, tape: Tape, g: np.ndarray, need):
    """Vector-Jacobian products for each parent; entries with ``need`` False may be None."""
    op, p = node.op, node.parents
    if op == "add":
        return [_unbroadcast(g, tape.value(p[0]).shape), _unbroadcast(g, tape.value(p[1]).shape)]
    if op == "matmul":
        return [g @ tape.value(p[1]).T if need[0] else None, tape.value(p[0]).T @ g if need[1] else None]
    if op == "transpose":
        return [g.T]
    if op == "hadamard":
        return [g * tape.value(p[1]) if need[0] else None, g * tape.value(p[0]) if need[1] else None]
    if op == "tanh":
        return [g * (1.0 - node.value * node.value)]
    if op == "scale":
        return [node.attrs["c"] * g]
    if op == "mul_scalar":
        s, a = tape.value(p[0]), tape.value(p[1])
        return [np.array([[np.sum(g * a)]]) if need[0] else None, s[0, 0] * g if need[1] else None]
    if op == "sum":
        return [np.full(tape.value(p[0]).shape, g[0, 0])]
    if op == "softmax":
        y = node.value
        return [y * (g - np.sum(g * y, axis=1, keepdims=True))]
    if op == "softmax_xent":
        d = node.attrs["probs"].copy()
        d[np.arange(len(node.attrs["targets"])), node.attrs["targets"]] -= 1.0
        return [g[0, 0] * d]
    if op == "trace_product":
        return [g[0, 0] * tape.value(p[1]) if need[0] else None, g[0, 0] * tape.value(p[0]) if need[1] else None]
    if op == "frob_normalize":
        x = tape.value(p[0])
        n, eps = node.attrs["norm"], node.attrs["eps"]
        out = g / (n + eps)
        if n > 0.0:
            out = out - x * (np.sum(g * x) / (n * (n + eps) ** 2))
        return [out]
    if op == "index":
        out = np.zeros_like(tape.value(p[0]))
        out[node.attrs["i"], node.attrs["j"]] = g[0, 0]
        return [out]
    if op == "straight_through":
        return [g]
    raise UsageError(f"no backward rule for {op!r}")


def backward(tape: Tape, loss_id: int) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss node w.r.t. every trainable leaf.

    A tape may be differentiated once; call ``tape.reset()`` before reusing it.
    """
    if tape._backward_done:
        raise UsageError("backward already ran on this tape; call reset() first")
    loss = tape.nodes[loss_id]
    if loss.value.shape != (1, 1):
        raise UsageError(f"loss must be 1x1, got {loss.value.shape}")
    tape._backward_done = True
    loss.grad = np.ones((1, 1))
    for nid in range(loss_id, -1, -1):
        node = tape.nodes[nid]
        if node.grad is None or not node.parents:
            continue
        need = [tape.nodes[pid].needs_grad for pid in node.parents]
        for pid, pg, nd in zip(node.parents, _vjp(node, tape, node.grad, need), need):
            if not nd:
                continue
            parent = tape.nodes[pid]
            parent.grad = pg if parent.grad is None else parent.grad + pg
    return {
        pid: (tape.nodes[pid].grad if tape.nodes[pid].grad is not None else np.zeros_like(tape.nodes[pid].value))
        for pid in sorted(tape.param_ids)
    }


def gumbel_noise(rng: np.random.Generator, size: int = 2) -> np.ndarray:
    u = rng.uniform(np.finfo(float).tiny, 1.0, size=size)
    return -np.log(-np.log(u))


def st_gumbel_gate(tape: Tape, logits_id: int, noise, tau: float, hard: bool = True) -> tuple[int, int]:
    """Straight-through Gumbel-Softmax gate over (skip, inject).

    Returns ``(hard_bit, gate_id)``. ``gate_id`` is a 1x1 node carrying the hard
    bit in the forward pass (or the soft probability when ``hard=False``) and
    the soft-probability gradient in the backward pass. Ties go to skip.
    """
    if tau <= 0:
        raise UsageError(f"tau must be positive, got {tau}")
    noise = np.asarray(noise, dtype=np.float64).reshape(1, 2)
    if tape.value(logits_id).shape != (1, 2):
        raise ShapeError("gate logits must be 1x2")
    perturbed = tape.add(logits_id, tape.const(noise))
    soft = tape.softmax(tape.scale(perturbed, 1.0 / tau))
    inject = tape.index(soft, 0, 1)
    pv = tape.value(perturbed)[0]
    bit = 1 if pv[1] > pv[0] else 0
    fwd = float(bit) if hard else tape.value(inject)[0, 0]
    return bit, tape.straight_through(inject, [[fwd]])


class Adam:
    def __init__(self, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        """In-place update of ``params[name]`` from ``grads[name]``."""
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
