"""Scalar reverse-mode automatic differentiation.

A :class:`Tape` records a Wengert list of scalar operations.  Building the
graph is separate from evaluating it: expressions on :class:`Node` handles
only append records, :meth:`Tape.forward` evaluates every node in creation
order (which is a topological order) and :meth:`Tape.backward` accumulates
adjoints in reverse.

    tape = Tape()
    a, b = tape.variables(2)
    tape.output(a * b + b)
    tape.forward([2.0, 3.0])   # 9.0
    tape.backward()            # [3.0, 3.0]

The operation set is closed: const, var, add, sub, mul, div, neg, exp, log,
tanh, max0 (ReLU) and square.  The module-level functions :func:`exp`,
:func:`log`, :func:`tanh`, :func:`relu` and :func:`square` dispatch on
their argument, so model code written against them runs both on plain
floats and on tape nodes.
"""

from __future__ import annotations

import math
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Node",
    "Op",
    "Tape",
    "TapeDomainError",
    "TapeStateError",
    "exp",
    "log",
    "relu",
    "square",
    "tanh",
    "value_and_grad",
]


class TapeDomainError(ArithmeticError):
    """An operation was evaluated outside its domain or overflowed."""


class TapeStateError(RuntimeError):
    """forward/backward called out of order."""


class Op(IntEnum):
    CONST = 0
    VAR = 1
    ADD = 2
    SUB = 3
    MUL = 4
    DIV = 5
    NEG = 6
    EXP = 7
    LOG = 8
    TANH = 9
    MAX0 = 10
    SQUARE = 11


_BINARY = {Op.ADD, Op.SUB, Op.MUL, Op.DIV}


class Node:
    """Handle on one record of a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def op(self) -> Op:
        return self.tape._ops[self.index]

    @property
    def parents(self) -> tuple["Node", ...]:
        return tuple(Node(self.tape, p) for p in self.tape._parents[self.index])

    @property
    def value(self) -> float:
        return self.tape._values[self.index]

    @property
    def adjoint(self) -> float:
        return self.tape._adjoints[self.index]

    def __repr__(self):
        return f"Node({self.index}, {self.op.name.lower()})"

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            if other.tape is not self.tape:
                raise ValueError("cannot combine nodes from different tapes")
            return other
        return self.tape.const(float(other))

    def __add__(self, other):
        return self.tape._push(Op.ADD, self.index, self._lift(other).index)

    def __radd__(self, other):
        return self.tape._push(Op.ADD, self._lift(other).index, self.index)

    def __sub__(self, other):
        return self.tape._push(Op.SUB, self.index, self._lift(other).index)

    def __rsub__(self, other):
        return self.tape._push(Op.SUB, self._lift(other).index, self.index)

    def __mul__(self, other):
        return self.tape._push(Op.MUL, self.index, self._lift(other).index)

    def __rmul__(self, other):
        return self.tape._push(Op.MUL, self._lift(other).index, self.index)

    def __truediv__(self, other):
        return self.tape._push(Op.DIV, self.index, self._lift(other).index)

    def __rtruediv__(self, other):
        return self.tape._push(Op.DIV, self._lift(other).index, self.index)

    def __neg__(self):
        return self.tape._push(Op.NEG, self.index)

    def __pos__(self):
        return self


class Tape:
    """A recorded scalar program with a registry of input variables."""

    def __init__(self):
        self._ops: list[Op] = []
        self._parents: list[tuple[int, ...]] = []
        self._consts: dict[int, float] = {}
        self._values: list[float] = []
        self._adjoints: list[float] = []
        self._vars: list[int] = []
        self._root: int | None = None
        self._evaluated = False

    def __len__(self):
        return len(self._ops)

    def _push(self, op: Op, *parents: int) -> Node:
        self._ops.append(op)
        self._parents.append(parents)
        self._evaluated = False
        return Node(self, len(self._ops) - 1)

    # -- graph construction -------------------------------------------------

    def const(self, value: float) -> Node:
        node = self._push(Op.CONST)
        self._consts[node.index] = float(value)
        return node

    def var(self) -> Node:
        node = self._push(Op.VAR)
        self._vars.append(node.index)
        return node

    def variables(self, n: int) -> list[Node]:
        return [self.var() for _ in range(n)]

    def output(self, node: Node) -> Node:
        if not isinstance(node, Node) or node.tape is not self:
            node = self.const(float(node))
        self._root = node.index
        return node

    @property
    def n_inputs(self) -> int:
        return len(self._vars)

    # -- evaluation ---------------------------------------------------------

    def forward(self, inputs: Sequence[float]) -> float:
        """Evaluate every node; return the output value."""
        if self._root is None:
            raise TapeStateError("no output node registered")
        inputs = [float(v) for v in inputs]
        if len(inputs) != len(self._vars):
            raise ValueError(f"tape has {len(self._vars)} inputs, got {len(inputs)}")
        ops, parents = self._ops, self._parents
        vals = [0.0] * len(ops)
        feed = iter(inputs)
        for i, op in enumerate(ops):
            p = parents[i]
            if op is Op.CONST:
                v = self._consts[i]
            elif op is Op.VAR:
                v = next(feed)
            elif op is Op.ADD:
                v = vals[p[0]] + vals[p[1]]
            elif op is Op.MUL:
                v = vals[p[0]] * vals[p[1]]
            elif op is Op.SUB:
                v = vals[p[0]] - vals[p[1]]
            elif op is Op.DIV:
                den = vals[p[1]]
                if den == 0.0:
                    raise TapeDomainError(f"node {i} (div): division by zero")
                v = vals[p[0]] / den
            elif op is Op.NEG:
                v = -vals[p[0]]
            elif op is Op.EXP:
                try:
                    v = math.exp(vals[p[0]])
                except OverflowError:
                    raise TapeDomainError(f"node {i} (exp): overflow at {vals[p[0]]!r}") from None
            elif op is Op.LOG:
                arg = vals[p[0]]
                if not arg > 0.0:
                    raise TapeDomainError(f"node {i} (log): argument {arg!r} is not positive")
                v = math.log(arg)
            elif op is Op.TANH:
                v = math.tanh(vals[p[0]])
            elif op is Op.MAX0:
                v = vals[p[0]] if vals[p[0]] > 0.0 else 0.0
            elif op is Op.SQUARE:
                v = vals[p[0]] * vals[p[0]]
            else:  # pragma: no cover - closed enum
                raise AssertionError(op)
            if not math.isfinite(v):
                raise TapeDomainError(f"node {i} ({op.name.lower()}): non-finite value {v!r}")
            vals[i] = v
        self._values = vals
        self._adjoints = [0.0] * len(ops)
        self._evaluated = True
        return vals[self._root]

    def backward(self) -> np.ndarray:
        """Gradient of the output with respect to each variable, in registration order."""
        if not self._evaluated:
            raise TapeStateError("backward() needs a preceding forward()")
        self._evaluated = False
        vals, ops, parents = self._values, self._ops, self._parents
        adj = [0.0] * len(ops)
        adj[self._root] = 1.0
        for i in range(self._root, -1, -1):
            g = adj[i]
            if g == 0.0:
                continue
            op = ops[i]
            if op is Op.CONST or op is Op.VAR:
                continue
            p = parents[i]
            if op is Op.ADD:
                adj[p[0]] += g
                adj[p[1]] += g
            elif op is Op.MUL:
                adj[p[0]] += g * vals[p[1]]
                adj[p[1]] += g * vals[p[0]]
            elif op is Op.SUB:
                adj[p[0]] += g
                adj[p[1]] -= g
            elif op is Op.DIV:
                den = vals[p[1]]
                adj[p[0]] += g / den
                adj[p[1]] -= g * vals[i] / den
            elif op is Op.NEG:
                adj[p[0]] -= g
            elif op is Op.EXP:
                adj[p[0]] += g * vals[i]
            elif op is Op.LOG:
                adj[p[0]] += g / vals[p[0]]
            elif op is Op.TANH:
                adj[p[0]] += g * (1.0 - vals[i] * vals[i])
            elif op is Op.MAX0:
                # subgradient 0 at the kink
                if vals[p[0]] > 0.0:
                    adj[p[0]] += g
            elif op is Op.SQUARE:
                adj[p[0]] += 2.0 * g * vals[p[0]]
        self._adjoints = adj
        return np.array([adj[k] for k in self._vars])


def _unary(op: Op, fn):
    def apply(x):
        if isinstance(x, Node):
            return x.tape._push(op, x.index)
        return fn(float(x))
    apply.__name__ = op.name.lower()
    return apply


exp = _unary(Op.EXP, math.exp)
log = _unary(Op.LOG, math.log)
tanh = _unary(Op.TANH, math.tanh)
relu = _unary(Op.MAX0, lambda v: v if v > 0.0 else 0.0)
square = _unary(Op.SQUARE, lambda v: v * v)


def value_and_grad(fn, inputs: Iterable[float]) -> tuple[float, np.ndarray]:
    """Trace ``fn`` on a fresh tape at ``inputs``; return value and gradient."""
    inputs = [float(v) for v in inputs]
    tape = Tape()
    tape.output(fn(tape.variables(len(inputs))))
    value = tape.forward(inputs)
    return value, tape.backward()
