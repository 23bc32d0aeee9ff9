"""Tape-based reverse-mode autodiff over the tensor kernels.

A Tape records eager forward operations; backward() replays them in exact
reverse order. Under "mixed" mode every intermediate lives in F16 (one
rounding per op, FP32 accumulation inside matrix products), while the loss
op and its internals stay FP32 so that the loss-scale multiply cannot
itself overflow. Under "float32" everything is FP32.

The backward seed is where loss scaling enters: seeding with S instead of 1
multiplies every gradient by S before it is rounded into the gradient dtype.
"""

from __future__ import annotations

import numpy as np

from .tensor import DType, ShapeError, Tensor, matmul_mixed

MODES = ("float32", "mixed")


class Variable:
    """Named, optionally trainable parameter; dtype follows the model mode."""

    __slots__ = ("name", "value", "trainable")

    def __init__(self, name: str, value: Tensor, trainable: bool = True):
        self.name = name
        self.value = value
        self.trainable = trainable

    def __repr__(self):
        return f"Variable({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype.name})"


class Node:
    __slots__ = ("value", "var_name")

    def __init__(self, value: Tensor, var_name: str | None = None):
        self.value = value
        self.var_name = var_name


class _Op:
    __slots__ = ("kind", "inputs", "output", "backward", "is_loss")

    def __init__(self, kind, inputs, output, backward, is_loss=False):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.is_loss = is_loss


class Tape:
    """Execution trace of differentiable ops for one forward pass."""

    def __init__(self, mode: str = "float32"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.mode = mode
        self.ops: list[_Op] = []
        self.variables: dict[str, Variable] = {}
        self._leaves: dict[str, Node] = {}

    @property
    def model_dtype(self) -> DType:
        return DType.F16 if self.mode == "mixed" else DType.F32

    def activation_bytes(self) -> int:
        """Bytes held by recorded intermediate tensors (loss scalars excluded)."""
        return sum(op.output.value.nbytes for op in self.ops if not op.is_loss)

    # -- graph construction --------------------------------------------------

    def leaf(self, var: Variable) -> Node:
        if var.name in self.variables and self.variables[var.name] is not var:
            raise ValueError(f"duplicate variable name {var.name!r}")
        self.variables[var.name] = var
        if var.name not in self._leaves:
            self._leaves[var.name] = Node(var.value, var_name=var.name)
        return self._leaves[var.name]

    def constant(self, t: Tensor) -> Node:
        return Node(t)

    def _emit(self, kind, inputs, value: Tensor, backward, is_loss=False) -> Node:
        out = Node(value)
        self.ops.append(_Op(kind, inputs, out, backward, is_loss))
        return out

    def _store(self, f32_arr, dtype: DType) -> Tensor:
        return Tensor.from_array(np.asarray(f32_arr, dtype=np.float32), dtype)

    def matmul(self, a: Node, b: Node) -> Node:
        out = matmul_mixed(a.value, b.value, self.model_dtype)
        a32, b32 = a.value.f32(), b.value.f32()

        def backward(g: Tensor):
            g32 = g.f32()
            da = self._store(g32 @ b32.T, a.value.dtype)
            db = self._store(a32.T @ g32, b.value.dtype)
            return [da, db]

        return self._emit("matmul", [a, b], out, backward)

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"add: shapes {a.value.shape} vs {b.value.shape}")
        out = self._store(a.value.f32() + b.value.f32(), self.model_dtype)

        def backward(g: Tensor):
            return [g, g]

        return self._emit("add", [a, b], out, backward)

    def bias_add(self, x: Node, b: Node) -> Node:
        if x.value.shape[-1] != b.value.shape[-1] or b.value.data.ndim != 1:
            raise ShapeError(f"bias_add: shapes {x.value.shape} vs {b.value.shape}")
        out = self._store(x.value.f32() + b.value.f32(), self.model_dtype)

        def backward(g: Tensor):
            g32 = g.f32()
            db = self._store(g32.reshape(-1, g32.shape[-1]).sum(axis=0, dtype=np.float32),
                             b.value.dtype)
            return [g, db]

        return self._emit("bias_add", [x, b], out, backward)

    def mul(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"mul: shapes {a.value.shape} vs {b.value.shape}")
        a32, b32 = a.value.f32(), b.value.f32()
        out = self._store(a32 * b32, self.model_dtype)

        def backward(g: Tensor):
            g32 = g.f32()
            return [self._store(g32 * b32, a.value.dtype),
                    self._store(g32 * a32, b.value.dtype)]

        return self._emit("mul", [a, b], out, backward)

    def scale(self, x: Node, c: float) -> Node:
        c32 = np.float32(c)
        out = self._store(x.value.f32() * c32, self.model_dtype)

        def backward(g: Tensor):
            return [self._store(g.f32() * c32, x.value.dtype)]

        return self._emit("scale", [x], out, backward)

    def tanh(self, x: Node) -> Node:
        y32 = np.tanh(x.value.f32())
        out = self._store(y32, self.model_dtype)

        def backward(g: Tensor):
            return [self._store(g.f32() * (1.0 - y32 * y32), x.value.dtype)]

        return self._emit("tanh", [x], out, backward)

    def sigmoid(self, x: Node) -> Node:
        y32 = 1.0 / (1.0 + np.exp(-x.value.f32()))
        out = self._store(y32, self.model_dtype)

        def backward(g: Tensor):
            return [self._store(g.f32() * y32 * (1.0 - y32), x.value.dtype)]

        return self._emit("sigmoid", [x], out, backward)

    def relu(self, x: Node) -> Node:
        x32 = x.value.f32()
        out = self._store(np.maximum(x32, 0.0), self.model_dtype)
        pos = x32 > 0

        def backward(g: Tensor):
            return [self._store(g.f32() * pos, x.value.dtype)]

        return self._emit("relu", [x], out, backward)

    def embedding_gather(self, table: Node, ids: np.ndarray) -> Node:
        ids = np.asarray(ids)
        if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.value.shape[0]:
            raise ShapeError("embedding ids out of range")
        out = Tensor(table.value.data[ids].copy(), table.value.dtype)

        def backward(g: Tensor):
            acc = np.zeros(table.value.shape, dtype=np.float32)
            np.add.at(acc, ids.reshape(-1), g.f32().reshape(-1, table.value.shape[1]))
            return [self._store(acc, table.value.dtype)]

        return self._emit("embedding_gather", [table], out, backward)

    def concat_last_axis(self, a: Node, b: Node) -> Node:
        if a.value.shape[:-1] != b.value.shape[:-1]:
            raise ShapeError(f"concat: shapes {a.value.shape} vs {b.value.shape}")
        out = Tensor(np.concatenate([a.value.data, b.value.data], axis=-1), a.value.dtype)
        split = a.value.shape[-1]

        def backward(g: Tensor):
            ga = Tensor(np.ascontiguousarray(g.data[..., :split]), g.dtype)
            gb = Tensor(np.ascontiguousarray(g.data[..., split:]), g.dtype)
            return [ga, gb]

        return self._emit("concat_last_axis", [a, b], out, backward)

    def stack_steps(self, steps: list[Node]) -> Node:
        """Stack per-step [batch, h] nodes into [batch, time, h]."""
        out = Tensor(np.stack([s.value.data for s in steps], axis=1), steps[0].value.dtype)

        def backward(g: Tensor):
            return [Tensor(np.ascontiguousarray(g.data[:, t]), g.dtype)
                    for t in range(len(steps))]

        return self._emit("stack_steps", list(steps), out, backward)

    def attn_scores(self, query: Node, states: Node) -> Node:
        """Dot-product scores: [b,h] x [b,t,h] -> [b,t], FP32-accumulated."""
        q32, s32 = query.value.f32(), states.value.f32()
        if q32.shape[-1] != s32.shape[-1]:
            raise ShapeError(f"attn_scores: hidden {q32.shape} vs {s32.shape}")
        out = self._store(np.einsum("bh,bth->bt", q32, s32, dtype=np.float32), self.model_dtype)

        def backward(g: Tensor):
            g32 = g.f32()
            dq = self._store(np.einsum("bt,bth->bh", g32, s32), query.value.dtype)
            ds = self._store(np.einsum("bt,bh->bth", g32, q32), states.value.dtype)
            return [dq, ds]

        return self._emit("attn_scores", [query, states], out, backward)

    def attn_weights(self, scores: Node, valid_mask: np.ndarray) -> Node:
        """Masked softmax over source positions, FP32 math.

        Invalid positions get exactly zero weight; valid weights are
        renormalized so each row sums to one before storage rounding.
        """
        m = np.asarray(valid_mask, dtype=np.float32)
        x = scores.value.f32()
        shifted = x - np.max(np.where(m > 0, x, -np.inf), axis=-1, keepdims=True)
        e = np.exp(shifted, dtype=np.float32) * m
        w32 = (e / np.sum(e, axis=-1, keepdims=True, dtype=np.float32)).astype(np.float32)
        out = self._store(w32, self.model_dtype)

        def backward(g: Tensor):
            g32 = g.f32()
            dot = np.sum(g32 * w32, axis=-1, keepdims=True, dtype=np.float32)
            return [self._store((g32 - dot) * w32, scores.value.dtype)]

        return self._emit("attn_weights", [scores], out, backward)

    def attn_context(self, weights: Node, states: Node) -> Node:
        """Convex combination of states: [b,t] x [b,t,h] -> [b,h]."""
        w32, s32 = weights.value.f32(), states.value.f32()
        out = self._store(np.einsum("bt,bth->bh", w32, s32, dtype=np.float32), self.model_dtype)

        def backward(g: Tensor):
            g32 = g.f32()
            dw = self._store(np.einsum("bh,bth->bt", g32, s32), weights.value.dtype)
            ds = self._store(np.einsum("bt,bh->bth", w32, g32), states.value.dtype)
            return [dw, ds]

        return self._emit("attn_context", [weights, states], out, backward)

    def softmax_cross_entropy_with_mask(self, logits: Node, targets: np.ndarray,
                                        mask: np.ndarray) -> Node:
        """Mean token-level cross-entropy over unmasked positions, FP32 only.

        logits: [batch, time, vocab]; targets: [batch, time] int ids;
        mask: [batch, time], zero exactly at padding.
        """
        targets = np.asarray(targets)
        m = np.asarray(mask, dtype=np.float32)
        if logits.value.shape[:2] != targets.shape or targets.shape != m.shape:
            raise ShapeError("cross entropy: logits/targets/mask shapes disagree")
        n_valid = float(m.sum())
        if n_valid == 0:
            raise ValueError("cross entropy over an all-padding batch")
        x = logits.value.f32()
        shifted = x - np.max(x, axis=-1, keepdims=True)
        logz = np.log(np.sum(np.exp(shifted, dtype=np.float32), axis=-1, dtype=np.float32))
        b_idx, t_idx = np.indices(targets.shape)
        ce = (logz - shifted[b_idx, t_idx, targets]).astype(np.float32)
        loss = np.float32((ce * m).sum(dtype=np.float32) / np.float32(n_valid))
        out = Tensor(np.asarray(loss, dtype=np.float32), DType.F32)

        probs = np.exp(shifted - logz[..., None], dtype=np.float32)

        def backward(g: Tensor):
            seed = g.f32().reshape(())
            d = probs.copy()
            d[b_idx, t_idx, targets] -= 1.0
            d *= (m * (seed / np.float32(n_valid)))[..., None]
            return [self._store(d, logits.value.dtype)]

        return self._emit("softmax_cross_entropy", [logits], out, backward, is_loss=True)

    def reduce_mean(self, x: Node) -> Node:
        n = x.value.size
        out = Tensor(np.asarray(np.mean(x.value.f32(), dtype=np.float32), dtype=np.float32),
                     DType.F32)

        def backward(g: Tensor):
            seed = g.f32().reshape(())
            return [self._store(np.full(x.value.shape, seed / np.float32(n), dtype=np.float32),
                                x.value.dtype)]

        return self._emit("reduce_mean", [x], out, backward, is_loss=True)

    def reduce_sum(self, x: Node) -> Node:
        out = Tensor(np.asarray(np.sum(x.value.f32(), dtype=np.float32), dtype=np.float32),
                     DType.F32)

        def backward(g: Tensor):
            seed = g.f32().reshape(())
            return [self._store(np.full(x.value.shape, seed, dtype=np.float32), x.value.dtype)]

        return self._emit("reduce_sum", [x], out, backward, is_loss=True)


def backward(tape: Tape, loss_seed: float = 1.0, loss: Node | None = None) -> dict[str, Tensor]:
    """Gradients of (loss_seed * loss) for every trainable variable on the tape.

    Non-finite values propagate; detection is the caller's job. Gradient
    dtype equals the variable dtype, so in mixed mode this is where small
    values die (or survive, if the seed carried a loss scale).
    """
    if not tape.ops:
        raise ValueError("backward on an empty tape")
    root = loss if loss is not None else tape.ops[-1].output
    grads: dict[int, Tensor] = {
        id(root): Tensor(np.full(root.value.shape, np.float32(loss_seed), dtype=np.float32),
                         DType.F32)
    }

    def accumulate(node: Node, g: Tensor):
        prev = grads.get(id(node))
        if prev is None:
            grads[id(node)] = g
        else:
            acc = prev.f32() + g.f32()
            grads[id(node)] = Tensor.from_array(acc, prev.dtype)

    for op in reversed(tape.ops):
        out_grad = grads.get(id(op.output))
        if out_grad is None:
            continue
        with np.errstate(over="ignore", invalid="ignore"):
            in_grads = op.backward(out_grad)
        for node, g in zip(op.inputs, in_grads):
            if g is not None:
                accumulate(node, g)

    result: dict[str, Tensor] = {}
    for name, node in tape._leaves.items():
        if tape.variables[name].trainable and id(node) in grads:
            result[name] = grads[id(node)]
    return result
