"""Two-stage training: distillation on unlabeled inputs, then supervised
fine-tuning on (anchor, positive, K negatives) instances, both under Adam."""

import csv
import dataclasses
import json
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .encoder import StudentModel, TeacherModel, backward, forward, glorot
from .exceptions import ConfigError, ConfigRangeWarning, StateError, TrainingError
from .kernels import KernelSpec
from .linalg import as_matrix
from .objectives import AlignmentHead, loss_distill_stage, loss_finetune_stage

# Grid the method's hyperparameters were searched over; values outside
# [min, max] of a grid only warn. Epoch counts are left out: the searched
# 3-10 epochs refer to million-sentence corpora.
SEARCH_RANGES = {
    "lr_distill": (1e-5, 1e-4),
    "lr_finetune": (1e-5, 1e-4),
    "batch_size": (64, 256),
    "tau_distill": (0.01, 0.5),
    "tau_finetune": (0.01, 0.5),
    "gamma": (0.01, 1.0),
    "beta1": (0.1, 2.0),
    "beta2": (0.1, 2.0),
}


@dataclass
class DistillConfig:
    tau_distill: float = 0.1
    tau_finetune: float = 0.05
    beta1: float = 1.0
    beta2: float = 0.5
    gamma: float = 0.5
    kernel: Optional[KernelSpec] = None
    lr_distill: float = 1e-4
    lr_finetune: float = 3e-5
    batch_size: int = 128
    epochs_distill: int = 200
    epochs_finetune: int = 1600
    hard_negatives_K: int = 8
    seed: int = 0
    reduce_to: Optional[int] = None
    hidden_dims: Tuple[int, ...] = (64,)
    out_dim: int = 32
    grad_clip: Optional[float] = 5.0

    def __post_init__(self):
        if self.kernel is None:
            self.kernel = KernelSpec.rbf(self.gamma)
        elif isinstance(self.kernel, dict):
            self.kernel = KernelSpec.from_dict(self.kernel, default_gamma=self.gamma)
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.validate()

    def validate(self, warn=True):
        for name in ("tau_distill", "tau_finetune", "lr_distill", "lr_finetune", "gamma"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("beta1", "beta2"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        for name in ("epochs_distill", "epochs_finetune", "hard_negatives_K"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.out_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("layer dims must be >= 1")
        if self.reduce_to is not None and not 1 <= self.reduce_to < self.out_dim:
            raise ConfigError(f"reduce_to must be in [1, {self.out_dim}), got {self.reduce_to}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be positive or null, got {self.grad_clip}")
        if warn:
            for name, (lo, hi) in SEARCH_RANGES.items():
                value = getattr(self, name)
                if not lo <= value <= hi:
                    warnings.warn(f"{name}={value} is outside the searched range [{lo}, {hi}]",
                                  ConfigRangeWarning, stacklevel=3)

    def layer_dims(self, d_in):
        return (int(d_in),) + self.hidden_dims + (self.out_dim,)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["kernel"] = self.kernel.to_dict()
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta_m: float = 0.9
    beta_v: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if not (len(params) == len(grads) == len(state.m)):
        raise StateError(f"{len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise StateError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
    state.step += 1
    t = state.step
    c_m = 1.0 - state.beta_m ** t
    c_v = 1.0 - state.beta_v ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta_m
        m += (1.0 - state.beta_m) * g
        v *= state.beta_v
        v += (1.0 - state.beta_v) * (g * g)
        p -= lr * (m / c_m) / (np.sqrt(v / c_v) + state.eps)
    return params, state


def clip_global_norm(grads, max_norm):
    if max_norm is None:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads


@dataclass
class EpochRecord:
    epoch: int
    total: float
    infonce: float
    hsic: float
    wall_ms: float
    evaluation: dict = field(default_factory=dict)


@dataclass
class TrainHistory:
    stage: str
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "total", "infonce", "hsic", "wall_ms"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.total), repr(r.infonce), repr(r.hsic), f"{r.wall_ms:.3f}"])


@dataclass
class SupervisedSet:
    """Stacked supervised instances: ``negatives`` has shape (l, K, d)."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        self.anchors = as_matrix(self.anchors, "anchors", allow_empty=True)
        self.positives = as_matrix(self.positives, "positives", allow_empty=True)
        l, d = self.anchors.shape
        neg = np.asarray(self.negatives, dtype=np.float64)
        if neg.size == 0:
            neg = neg.reshape(l, 0, d)
        self.negatives = neg
        if self.positives.shape != (l, d) or neg.ndim != 3 or neg.shape[0] != l or neg.shape[2] != d:
            raise ConfigError(
                f"inconsistent supervised shapes: anchors {self.anchors.shape}, "
                f"positives {self.positives.shape}, negatives {neg.shape}"
            )

    def __len__(self):
        return self.anchors.shape[0]

    @property
    def K(self):
        return self.negatives.shape[1]

    @property
    def dim(self):
        return self.anchors.shape[1]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            break
        yield idx


def _finish_epoch(history, epoch, totals, parts_nce, parts_hsic, t0, evaluate, model):
    record = EpochRecord(
        epoch=epoch,
        total=float(np.mean(totals)),
        infonce=float(np.mean(parts_nce)),
        hsic=float(np.mean(parts_hsic)),
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )
    if evaluate is not None:
        record.evaluation = dict(evaluate(model))
    history.records.append(record)


def run_distill_stage(cfg: DistillConfig, teacher: TeacherModel, student: StudentModel, inputs,
                      ids=None, evaluate: Optional[Callable] = None):
    """Train ``student`` to carry the teacher's information about ``inputs``.

    The loss per batch is ``infonce_distill(S, T) + beta1 * hsic(X, S)``.
    A table teacher is addressed through ``ids`` (one per input row).
    Returns a new ``(StudentModel, TrainHistory)``; ``student`` is untouched.
    """
    x_all = as_matrix(inputs, "inputs")
    n = x_all.shape[0]
    if x_all.shape[1] != student.spec.d_in:
        raise ConfigError(f"inputs have {x_all.shape[1]} features, student expects {student.spec.d_in}")
    if n < cfg.batch_size:
        raise ConfigError(f"corpus of {n} rows is smaller than batch_size {cfg.batch_size}")
    model = student.copy()
    history = TrainHistory("distill")
    if cfg.epochs_distill == 0:
        return model, history
    t_all = teacher.embed(ids=ids, inputs=x_all) if teacher.is_table else teacher.embed(inputs=x_all)
    if t_all.shape[0] != n:
        raise ConfigError(f"teacher produced {t_all.shape[0]} rows for {n} inputs")
    if model.align is None or model.align.W.shape != (model.spec.d_out, t_all.shape[1]):
        model.align = AlignmentHead.init(model.spec.d_out, t_all.shape[1], np.random.default_rng([cfg.seed, 1]))
    # the MLP is trained on its own output; any projection waits for fine-tuning
    params = [p for pair in zip(model.weights, model.biases) for p in pair] + [model.align.W]
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs_distill):
        t0 = time.perf_counter()
        totals, nces, hsics = [], [], []
        for b, idx in enumerate(_batches(n, cfg.batch_size, rng)):
            x = x_all[idx]
            s, cache = forward(model, x)
            if not np.all(np.isfinite(s)):
                raise TrainingError(f"non-finite student embeddings at epoch {epoch}, batch {b}",
                                    epoch=epoch, batch_index=b, history=history)
            loss, g_s, g_w = loss_distill_stage(s, t_all[idx], x, model.align, cfg, with_grads=True)
            if not np.isfinite(loss.total):
                raise TrainingError(f"non-finite distillation loss at epoch {epoch}, batch {b}",
                                    epoch=epoch, batch_index=b, history=history)
            gw, gb, _ = backward(model, cache, g_s)
            grads = [g for pair in zip(gw, gb) for g in pair] + [g_w]
            adam_step(params, clip_global_norm(grads, cfg.grad_clip), state, cfg.lr_distill)
            totals.append(loss.total)
            nces.append(loss.parts["infonce"])
            hsics.append(loss.parts["hsic"])
        _finish_epoch(history, epoch, totals, nces, hsics, t0, evaluate, model)
    return model, history


def run_finetune_stage(cfg: DistillConfig, student: StudentModel, supervised: SupervisedSet,
                       evaluate: Optional[Callable] = None):
    """Fine-tune on supervised instances with
    ``infonce_supervised + beta2 * hsic(x_anchor, s_anchor)``.

    With ``cfg.reduce_to`` set, a projection head to that many dimensions is
    created (or reused) and trained jointly; all embeddings pass through it.
    The distillation alignment head is dropped from the returned model.
    """
    if supervised is None or len(supervised) == 0:
        raise ConfigError("fine-tuning needs a non-empty supervised set")
    if len(supervised) < 2:
        raise ConfigError("fine-tuning needs at least 2 supervised instances")
    if supervised.dim != student.spec.d_in:
        raise ConfigError(f"supervised inputs have {supervised.dim} features, student expects {student.spec.d_in}")
    if supervised.K != cfg.hard_negatives_K:
        raise ConfigError(f"supervised set has K={supervised.K} negatives, config says {cfg.hard_negatives_K}")
    model = student.copy()
    model.align = None
    if cfg.reduce_to is not None:
        if model.proj is None:
            rng_proj = np.random.default_rng([cfg.seed, 2])
            model.proj = glorot(rng_proj, model.spec.d_out, cfg.reduce_to).T.copy()
        elif model.proj.shape[0] != cfg.reduce_to:
            raise ConfigError(f"model projects to {model.proj.shape[0]} dims, config asks for {cfg.reduce_to}")
    history = TrainHistory("finetune")
    if cfg.epochs_finetune == 0:
        return model, history
    params = [p for pair in zip(model.weights, model.biases) for p in pair]
    if model.proj is not None:
        params.append(model.proj)
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    l_all, K, d = supervised.negatives.shape
    for epoch in range(cfg.epochs_finetune):
        t0 = time.perf_counter()
        totals, nces, hsics = [], [], []
        for b, idx in enumerate(_batches(l_all, cfg.batch_size, rng)):
            l = len(idx)
            xa = supervised.anchors[idx]
            stacked = np.concatenate([xa, supervised.positives[idx], supervised.negatives[idx].reshape(l * K, d)])
            s_raw, cache = forward(model, stacked)
            s = s_raw if model.proj is None else s_raw @ model.proj.T
            if not np.all(np.isfinite(s)):
                raise TrainingError(f"non-finite student embeddings at epoch {epoch}, batch {b}",
                                    epoch=epoch, batch_index=b, history=history)
            a, p, neg = s[:l], s[l:2 * l], s[2 * l:].reshape(l, K, s.shape[1])
            loss, g_a, g_p, g_n = loss_finetune_stage(a, p, neg, xa, cfg, with_grads=True)
            if not np.isfinite(loss.total):
                raise TrainingError(f"non-finite fine-tuning loss at epoch {epoch}, batch {b}",
                                    epoch=epoch, batch_index=b, history=history)
            g_s = np.concatenate([g_a, g_p, g_n.reshape(l * K, s.shape[1])])
            grads_extra = []
            if model.proj is not None:
                grads_extra.append(g_s.T @ s_raw)
                g_s = g_s @ model.proj
            gw, gb, _ = backward(model, cache, g_s)
            grads = [g for pair in zip(gw, gb) for g in pair] + grads_extra
            adam_step(params, clip_global_norm(grads, cfg.grad_clip), state, cfg.lr_finetune)
            totals.append(loss.total)
            nces.append(loss.parts["infonce"])
            hsics.append(loss.parts["hsic"])
        _finish_epoch(history, epoch, totals, nces, hsics, t0, evaluate, model)
    return model, history
