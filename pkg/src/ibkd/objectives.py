"""Distillation objectives: HSIC penalty, InfoNCE bounds and stage losses.

Every function named ``*loss*`` or ``infonce_*`` returns a quantity to be
minimized. The gradient functions are analytic and are checked against
``linalg.finite_diff_grad`` in the test suite.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .exceptions import ConfigError, DegenerateSampleError, PairingError, ShapeError
from .kernels import KernelSpec, center, gram, gram_backward
from .linalg import as_matrix


@dataclass
class LossValue:
    total: float
    parts: dict = field(default_factory=dict)


@dataclass
class AlignmentHead:
    """Learnable ``W`` (student dim x teacher dim) scoring ``s_i^T W t_j``."""

    W: np.ndarray

    def __post_init__(self):
        self.W = as_matrix(self.W, "W")

    @classmethod
    def init(cls, d_s, d_t, rng):
        limit = np.sqrt(6.0 / (d_s + d_t))
        return cls(rng.uniform(-limit, limit, size=(d_s, d_t)))

    @property
    def shape(self):
        return self.W.shape


def _check_pair(x_rows, s_rows):
    x = as_matrix(x_rows, "x_rows")
    s = as_matrix(s_rows, "s_rows")
    if x.shape[0] != s.shape[0]:
        raise PairingError(f"x_rows has {x.shape[0]} rows but s_rows has {s.shape[0]}")
    if x.shape[0] < 2:
        raise DegenerateSampleError("HSIC needs at least 2 paired samples")
    return x, s


def _check_tau(tau):
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")


def hsic(x_rows, s_rows, kx: KernelSpec, ks: KernelSpec) -> float:
    """Biased empirical HSIC, ``tr(K_x H K_s H) / l^2``."""
    x, s = _check_pair(x_rows, s_rows)
    l = x.shape[0]
    return float(np.sum(center(gram(kx, x)) * gram(ks, s)) / (l * l))


def hsic_grad_s(x_rows, s_rows, kx: KernelSpec, ks: KernelSpec) -> np.ndarray:
    x, s = _check_pair(x_rows, s_rows)
    l = x.shape[0]
    # d hsic / d K_s = H K_x H / l^2
    grad_k = center(gram(kx, x)) / (l * l)
    return gram_backward(ks, s, gram(ks, s), grad_k)


def _hsic_value_and_grad(x, s, kx, ks):
    l = x.shape[0]
    kxc = center(gram(kx, x)) / (l * l)
    k_s = gram(ks, s)
    return float(np.sum(kxc * k_s)), gram_backward(ks, s, k_s, kxc)


def _distill_logits(s, t, head, tau):
    s = as_matrix(s, "s")
    t = as_matrix(t, "t")
    if s.shape[0] != t.shape[0]:
        raise PairingError(f"student batch has {s.shape[0]} rows but teacher batch has {t.shape[0]}")
    if s.shape[0] < 2:
        raise DegenerateSampleError("InfoNCE needs a batch of at least 2")
    _check_tau(tau)
    W = head.W if isinstance(head, AlignmentHead) else as_matrix(head, "W")
    if W.shape != (s.shape[1], t.shape[1]):
        raise ShapeError(f"alignment matrix is {W.shape}, expected {(s.shape[1], t.shape[1])}")
    return s, t, W, (s @ W @ t.T) / tau


def infonce_distill(s, t, head, tau: float) -> float:
    """Cross-entropy InfoNCE with in-batch negatives over ``u_ij = s_i^T W t_j``."""
    _, _, _, z = _distill_logits(s, t, head, tau)
    return float(np.mean(logsumexp(z, axis=1) - np.diag(z)))


def infonce_distill_grads(s, t, head, tau: float):
    """Return ``(grad_s, grad_W)`` of ``infonce_distill``."""
    s, t, W, z = _distill_logits(s, t, head, tau)
    n = s.shape[0]
    p = np.exp(z - logsumexp(z, axis=1, keepdims=True))
    p[np.diag_indices(n)] -= 1.0
    du = p / (n * tau)
    return du @ t @ W.T, s.T @ du @ t


def _distill_all(s, t, W, tau):
    n = s.shape[0]
    z = (s @ W @ t.T) / tau
    lse = logsumexp(z, axis=1, keepdims=True)
    value = float(np.mean(lse[:, 0] - np.diag(z)))
    p = np.exp(z - lse)
    p[np.diag_indices(n)] -= 1.0
    du = p / (n * tau)
    return value, du @ t @ W.T, s.T @ du @ t


def _supervised_inputs(anchors, positives, negatives, tau):
    a = as_matrix(anchors, "anchors")
    p = as_matrix(positives, "positives")
    if p.shape != a.shape:
        raise PairingError(f"anchors {a.shape} and positives {p.shape} differ")
    l, d = a.shape
    if negatives is None:
        neg = np.zeros((l, 0, d))
    else:
        neg = np.asarray(negatives, dtype=np.float64)
        if neg.ndim != 3 or neg.shape[0] != l or neg.shape[2] != d:
            raise PairingError(f"negatives must have shape ({l}, K, {d}), got {neg.shape}")
        if not np.all(np.isfinite(neg)):
            raise PairingError("negatives contain non-finite entries")
    _check_tau(tau)
    return a, p, neg


def _supervised_all(a, p, neg, tau):
    l = a.shape[0]
    z_in = (a @ p.T) / tau
    z_neg = np.einsum("id,ikd->ik", a, neg) / tau
    z = np.concatenate([z_in, z_neg], axis=1)
    lse = logsumexp(z, axis=1, keepdims=True)
    value = float(np.mean(lse[:, 0] - np.diag(z_in)))
    prob = np.exp(z - lse) / (l * tau)
    g_in = prob[:, :l]
    g_in[np.diag_indices(l)] -= 1.0 / (l * tau)
    g_neg = prob[:, l:]
    grad_a = g_in @ p + np.einsum("ik,ikd->id", g_neg, neg)
    grad_p = g_in.T @ a
    grad_neg = g_neg[:, :, None] * a[:, None, :]
    return value, grad_a, grad_p, grad_neg


def infonce_supervised(anchors, positives, negatives, tau: float) -> float:
    """Supervised InfoNCE: in-batch positives plus K instance negatives.

    ``negatives`` has shape ``(l, K, d)``; ``None`` means ``K = 0``.
    """
    a, p, neg = _supervised_inputs(anchors, positives, negatives, tau)
    l = a.shape[0]
    z_in = (a @ p.T) / tau
    z_neg = np.einsum("id,ikd->ik", a, neg) / tau
    lse = logsumexp(np.concatenate([z_in, z_neg], axis=1), axis=1)
    return float(np.mean(lse - np.diag(z_in)))


def infonce_supervised_grads(anchors, positives, negatives, tau: float):
    """Return ``(grad_anchors, grad_positives, grad_negatives)``."""
    a, p, neg = _supervised_inputs(anchors, positives, negatives, tau)
    return _supervised_all(a, p, neg, tau)[1:]


def loss_distill_stage(s, t, x, head, cfg, with_grads=False):
    """``infonce_distill(s, t) + beta1 * hsic(x, s)``.

    ``cfg`` needs ``tau_distill``, ``beta1`` and ``kernel``. With
    ``with_grads`` the result is ``(LossValue, grad_s, grad_W)``.
    """
    s, t, W, _ = _distill_logits(s, t, head, cfg.tau_distill)
    x, _ = _check_pair(x, s)
    nce, g_s, g_w = _distill_all(s, t, W, cfg.tau_distill)
    h, g_h = _hsic_value_and_grad(x, s, cfg.kernel, cfg.kernel)
    value = LossValue(nce + cfg.beta1 * h, {"infonce": nce, "hsic": h})
    if not with_grads:
        return value
    return value, g_s + cfg.beta1 * g_h, g_w


def loss_finetune_stage(anchors, positives, negatives, x, cfg, with_grads=False):
    """``infonce_supervised + beta2 * hsic(x_anchor, anchors)``.

    ``cfg`` needs ``tau_finetune``, ``beta2`` and ``kernel``. With
    ``with_grads`` the result is ``(LossValue, grad_anchors, grad_positives,
    grad_negatives)``.
    """
    a, p, neg = _supervised_inputs(anchors, positives, negatives, cfg.tau_finetune)
    x, _ = _check_pair(x, a)
    nce, g_a, g_p, g_n = _supervised_all(a, p, neg, cfg.tau_finetune)
    h, g_h = _hsic_value_and_grad(x, a, cfg.kernel, cfg.kernel)
    value = LossValue(nce + cfg.beta2 * h, {"infonce": nce, "hsic": h})
    if not with_grads:
        return value
    return value, g_a + cfg.beta2 * g_h, g_p, g_n
