"""Independent test oracles.

The finite-difference gradient check and the random-program generator live
here so every gradient assertion in the suite goes through machinery that
never touches the tape's backward rules.
"""

from __future__ import annotations

import numpy as np

from gcdt import tensor as T
from gcdt.rng import Pcg32
from gcdt.tensor import Tensor, record

FD_STEP = 1e-5
REL_TOL = 1e-4


def finite_difference_grads(func, leaves: list[np.ndarray], step: float = FD_STEP):
    """Central differences of a scalar function of float64 leaf arrays."""
    grads = []
    for i, leaf in enumerate(leaves):
        g = np.zeros_like(leaf)
        flat = leaf.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = func(leaves)
            flat[j] = orig - step
            down = func(leaves)
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build, leaves: list[np.ndarray], tol: float = REL_TOL) -> float:
    """Assert analytic gradients match central differences.

    `build(tensors)` maps a list of Tensors to a scalar Tensor; `leaves`
    are float64 arrays. Returns the worst relative error seen.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in leaves]
    with record() as tape:
        loss = build(tensors)
    gmap = tape.backward(loss)
    analytic = [gmap.get(t, np.zeros_like(t.data)) for t in tensors]

    def forward_only(arrays):
        consts = [Tensor(a) for a in arrays]
        return float(build(consts).data)

    numeric = finite_difference_grads(forward_only, [a.copy() for a in leaves])
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = max_rel_error(np.asarray(a, dtype=np.float64), n)
        worst = max(worst, err)
        assert err <= tol, f"gradient mismatch: rel err {err:.3e} > {tol}"
    return worst


# -- random program generator ---------------------------------------------------

PRIMITIVES = (
    "matmul", "add", "mul", "layer_norm", "softmax", "tanh", "gelu",
    "slice", "mask", "take", "concat", "transpose", "reshape",
)


class RandomProgram:
    """A randomly composed pipeline over the primitive set.

    Rebuildable from the same leaf arrays, so one description serves both
    the taped run and the finite-difference re-evaluations.
    """

    def __init__(self, rng: Pcg32, n_ops: int = 6):
        self.leaves: list[np.ndarray] = []
        self.ops: list[tuple] = []  # (name, arg indices / constants)
        shape = (2, 3)
        self._new_leaf(rng, shape)
        node_shapes = [shape]
        for _ in range(n_ops):
            i = rng.randint(len(node_shapes))
            s = node_shapes[i]
            choices = ["tanh", "gelu", "softmax", "layer_norm", "add", "mul",
                       "slice", "mask", "transpose"]
            if len(s) == 2:
                choices += ["matmul", "take", "concat", "reshape"]
            op = choices[rng.randint(len(choices))]
            if op in ("tanh", "gelu", "softmax"):
                self.ops.append((op, i))
                node_shapes.append(s)
            elif op == "layer_norm":
                gi = self._new_leaf(rng, (s[-1],))
                bi = self._new_leaf(rng, (s[-1],))
                self.ops.append((op, i, gi, bi))
                node_shapes.append(s)
            elif op in ("add", "mul"):
                j = self._new_leaf(rng, s)
                self.ops.append((op, i, j))
                node_shapes.append(s)
            elif op == "matmul":
                cols = 2 + rng.randint(3)
                j = self._new_leaf(rng, (s[-1], cols))
                self.ops.append((op, i, j))
                node_shapes.append((s[0], cols))
            elif op == "slice":
                if s[0] < 2:
                    continue
                lo = rng.randint(s[0] - 1)
                hi = lo + 1 + rng.randint(s[0] - lo - 1) + 1
                self.ops.append((op, i, lo, hi))
                node_shapes.append((hi - lo,) + s[1:])
            elif op == "mask":
                mask = rng.bernoulli(0.5, s)
                j = self._new_leaf(rng, s)
                self.ops.append((op, i, j, mask))
                node_shapes.append(s)
            elif op == "take":
                idx = np.array([rng.randint(s[0]) for _ in range(3)], dtype=np.intp)
                self.ops.append((op, i, idx))
                node_shapes.append((3,) + s[1:])
            elif op == "concat":
                j = self._new_leaf(rng, s)
                axis = rng.randint(len(s))
                self.ops.append((op, i, j, axis))
                ns = list(s)
                ns[axis] *= 2
                node_shapes.append(tuple(ns))
            elif op == "transpose":
                axes = tuple(reversed(range(len(s))))
                self.ops.append((op, i, axes))
                node_shapes.append(tuple(s[a] for a in axes))
            elif op == "reshape":
                self.ops.append((op, i, (int(np.prod(s)),)))
                node_shapes.append((int(np.prod(s)),))
        self.n_nodes = 1 + len(self.ops)

    @property
    def used(self) -> set[str]:
        return {op[0] for op in self.ops}

    def _new_leaf(self, rng: Pcg32, shape) -> int:
        self.leaves.append(rng.normal(size=shape) * 0.5)
        return len(self.leaves) - 1

    def build(self, tensors: list[Tensor]) -> Tensor:
        """tensors align with self.leaves; returns the scalar output."""
        nodes = [tensors[0]]
        for op in self.ops:
            name = op[0]
            x = nodes[op[1]]
            if name == "tanh":
                nodes.append(T.tanh(x))
            elif name == "gelu":
                nodes.append(T.gelu(x))
            elif name == "softmax":
                nodes.append(T.softmax(x))
            elif name == "layer_norm":
                nodes.append(T.layer_norm(x, tensors[op[2]], tensors[op[3]]))
            elif name == "add":
                nodes.append(x + tensors[op[2]])
            elif name == "mul":
                nodes.append(x * tensors[op[2]])
            elif name == "matmul":
                nodes.append(T.matmul(x, tensors[op[2]]))
            elif name == "slice":
                nodes.append(x[op[2] : op[3]])
            elif name == "mask":
                nodes.append(T.where(op[3], x, tensors[op[2]]))
            elif name == "take":
                nodes.append(T.take(x, op[2]))
            elif name == "concat":
                nodes.append(T.concat([x, tensors[op[2]]], axis=op[3]))
            elif name == "transpose":
                nodes.append(T.transpose(x, op[2]))
            elif name == "reshape":
                nodes.append(T.reshape(x, op[2]))
            else:
                raise AssertionError(name)
        # mean of every node keeps all paths, including dead ends, in the loss
        total = nodes[0].mean()
        for n in nodes[1:]:
            total = total + n.mean()
        return total.sum() if total.ndim else total
