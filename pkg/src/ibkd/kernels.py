"""Kernel Gram matrices, their centering, and their gradients."""

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, ShapeError
from .linalg import as_matrix

KINDS = ("linear", "rbf", "imq")


@dataclass(frozen=True)
class KernelSpec:
    """Which kernel to use and its parameter.

    ``gamma`` is the RBF inverse bandwidth in ``exp(-gamma * ||x - y||^2)``;
    ``c`` is the IMQ offset in ``(||x - y||^2 + c^2) ** -0.5``.
    """

    kind: str = "rbf"
    gamma: float = 0.5
    c: float = 1.0

    def __post_init__(self):
        kind = str(self.kind).lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        if kind == "rbf" and not self.gamma > 0:
            raise ConfigError(f"RBF kernel needs gamma > 0, got {self.gamma}")
        if kind == "imq" and not self.c > 0:
            raise ConfigError(f"IMQ kernel needs c > 0, got {self.c}")

    @classmethod
    def linear(cls):
        return cls("linear")

    @classmethod
    def rbf(cls, gamma=0.5):
        return cls("rbf", gamma=gamma)

    @classmethod
    def imq(cls, c=1.0):
        return cls("imq", c=c)

    def to_dict(self):
        if self.kind == "rbf":
            return {"kind": "rbf", "gamma": self.gamma}
        if self.kind == "imq":
            return {"kind": "imq", "c": self.c}
        return {"kind": "linear"}

    @classmethod
    def from_dict(cls, d, default_gamma=0.5):
        if isinstance(d, KernelSpec):
            return d
        if not isinstance(d, dict) or "kind" not in d:
            raise ConfigError(f"kernel must be an object with a 'kind' field, got {d!r}")
        unknown = set(d) - {"kind", "gamma", "c"}
        if unknown:
            raise ConfigError(f"unknown kernel fields {sorted(unknown)}")
        return cls(d["kind"], gamma=float(d.get("gamma", default_gamma)), c=float(d.get("c", 1.0)))


def sq_distances(rows):
    """Pairwise squared Euclidean distances, exactly zero on the diagonal."""
    sq = np.einsum("ij,ij->i", rows, rows)
    d = sq[:, None] + sq[None, :] - 2.0 * (rows @ rows.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    # symmetrize against rounding in the matrix product
    return 0.5 * (d + d.T)


def gram(spec: KernelSpec, rows) -> np.ndarray:
    rows = as_matrix(rows, "rows")
    if spec.kind == "linear":
        k = rows @ rows.T
        return 0.5 * (k + k.T)
    d = sq_distances(rows)
    if spec.kind == "rbf":
        return np.exp(-spec.gamma * d)
    return 1.0 / np.sqrt(d + spec.c * spec.c)


def gram_backward(spec: KernelSpec, rows, k, grad_k) -> np.ndarray:
    """Gradient with respect to ``rows`` of a scalar whose gradient w.r.t.
    the Gram matrix ``k = gram(spec, rows)`` is ``grad_k``.
    """
    g = 0.5 * (grad_k + grad_k.T)
    if spec.kind == "linear":
        return 2.0 * (g @ rows)
    # m_ij = dL/dD_ij for the squared distance matrix D
    if spec.kind == "rbf":
        m = g * (-spec.gamma * k)
    else:
        m = g * (-0.5 * k ** 3)
    np.fill_diagonal(m, 0.0)
    # dD_ij/dx_i = 2 (x_i - x_j), and D is symmetric
    return 4.0 * (m.sum(axis=1)[:, None] * rows - m @ rows)


def center(k) -> np.ndarray:
    """``H K H`` with ``H = I - 11^T/n``, by row/column mean subtraction."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ShapeError(f"center needs a square matrix, got shape {k.shape}")
    row_means = k.mean(axis=1, keepdims=True)
    col_means = k.mean(axis=0, keepdims=True)
    return k - row_means - col_means + k.mean()
