"""Minimal reverse-mode tape over numpy arrays.

Only the operations the segmentation network needs: affine maps, gathers,
concatenation, max reductions, (leaky) ReLU and batch normalization.
Graphs are built eagerly; ``Tape.backward`` replays recorded closures in
reverse. Neighbor-index selection (knn, argmax) is treated as a constant
of the forward pass, so no gradient flows through it.
"""
from __future__ import annotations

import numpy as np


class Node:
    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value: np.ndarray, requires_grad: bool):
        self.value = value
        self.requires_grad = requires_grad
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g


class Tape:
    """Records (node, backward_closure) pairs in execution order."""

    def __init__(self):
        self._ops: list[tuple[Node, callable]] = []

    def leaf(self, value: np.ndarray, requires_grad: bool = False) -> Node:
        return Node(np.asarray(value), requires_grad)

    def _record(self, value, parents, backward) -> Node:
        req = any(p.requires_grad for p in parents)
        node = Node(value, req)
        if req:
            self._ops.append((node, backward))
        return node

    def backward(self, root: Node, seed: np.ndarray) -> None:
        root.accumulate(seed)
        for node, back in reversed(self._ops):
            if node.grad is not None:
                back(node.grad)

    # ---- ops -------------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        out = a.value @ b.value

        def back(g):
            if a.requires_grad:
                a.accumulate(g @ b.value.T)
            if b.requires_grad:
                b.accumulate(a.value.T @ g)

        return self._record(out, (a, b), back)

    def add(self, a: Node, b: Node) -> Node:
        out = a.value + b.value

        def back(g):
            if a.requires_grad:
                a.accumulate(_unbroadcast(g, a.value.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(g, b.value.shape))

        return self._record(out, (a, b), back)

    def mul(self, a: Node, b: Node) -> Node:
        out = a.value * b.value

        def back(g):
            if a.requires_grad:
                a.accumulate(_unbroadcast(g * b.value, a.value.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(g * a.value, b.value.shape))

        return self._record(out, (a, b), back)

    def reshape(self, a: Node, shape) -> Node:
        orig = a.value.shape
        out = a.value.reshape(shape)

        def back(g):
            a.accumulate(g.reshape(orig))

        return self._record(out, (a,), back)

    def concat(self, nodes: list[Node], axis: int) -> Node:
        out = np.concatenate([n.value for n in nodes], axis=axis)
        sizes = [n.value.shape[axis] for n in nodes]
        splits = np.cumsum(sizes)[:-1]

        def back(g):
            for n, piece in zip(nodes, np.split(g, splits, axis=axis)):
                if n.requires_grad:
                    n.accumulate(piece)

        return self._record(out, tuple(nodes), back)

    def gather_rows(self, a: Node, idx: np.ndarray) -> Node:
        """out[...] = a[idx[...]]; scatter-add on the way back."""
        out = a.value[idx]

        def back(g):
            ga = np.zeros_like(a.value)
            np.add.at(ga, idx, g)
            a.accumulate(ga)

        return self._record(out, (a,), back)

    def edge_features(self, h: Node, neighbors: np.ndarray) -> Node:
        """[h_i, h_j - h_i] per edge; fused gather/broadcast/concat."""
        n, f = h.value.shape
        k = neighbors.shape[1]
        hj = h.value[neighbors]
        hi = np.broadcast_to(h.value[:, None, :], (n, k, f))
        out = np.concatenate([hi, hj - hi], axis=2)

        def back(g):
            gi, gd = g[:, :, :f], g[:, :, f:]
            gh = (gi - gd).sum(axis=1)
            np.add.at(gh, neighbors.ravel(), gd.reshape(-1, f))
            h.accumulate(gh)

        return self._record(out, (h,), back)

    def max_along(self, a: Node, axis: int) -> Node:
        arg = a.value.argmax(axis=axis)
        out = np.take_along_axis(a.value, np.expand_dims(arg, axis), axis).squeeze(axis)

        def back(g):
            ga = np.zeros_like(a.value)
            np.put_along_axis(ga, np.expand_dims(arg, axis),
                              np.expand_dims(g, axis), axis)
            a.accumulate(ga)

        return self._record(out, (a,), back)

    def relu(self, a: Node) -> Node:
        mask = a.value > 0
        out = np.where(mask, a.value, 0.0)

        def back(g):
            a.accumulate(g * mask)

        return self._record(out, (a,), back)

    def leaky_relu(self, a: Node, slope: float) -> Node:
        mask = a.value > 0
        out = np.where(mask, a.value, slope * a.value)

        def back(g):
            a.accumulate(g * np.where(mask, 1.0, slope))

        return self._record(out, (a,), back)

    def batchnorm(self, x: Node, gamma: Node, beta: Node, *, eps: float,
                  training: bool, running_mean: np.ndarray,
                  running_var: np.ndarray, momentum: float,
                  update_stats: bool) -> Node:
        """Normalize over all axes but the last; running stats mutated in place."""
        axes = tuple(range(x.value.ndim - 1))
        if training:
            mean = x.value.mean(axis=axes)
            var = x.value.var(axis=axes)
            if update_stats:
                running_mean *= 1.0 - momentum
                running_mean += momentum * mean
                running_var *= 1.0 - momentum
                running_var += momentum * var
        else:
            mean, var = running_mean, running_var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.value - mean) * inv
        out = gamma.value * xhat + beta.value

        def back(g):
            if gamma.requires_grad:
                gamma.accumulate((g * xhat).sum(axis=axes))
            if beta.requires_grad:
                beta.accumulate(g.sum(axis=axes))
            if x.requires_grad:
                gx = g * gamma.value
                if training:
                    gxhat_mean = gx.mean(axis=axes)
                    gxhat_dot = (gx * xhat).mean(axis=axes)
                    x.accumulate(inv * (gx - gxhat_mean - xhat * gxhat_dot))
                else:
                    x.accumulate(gx * inv)

        return self._record(out, (x, gamma, beta), back)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient g down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g
