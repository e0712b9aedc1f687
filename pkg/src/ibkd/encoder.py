"""Student MLP with hand-written backpropagation, the projection head,
the frozen teacher, and the binary checkpoint format."""

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .exceptions import ConfigError, FormatError, ShapeError, StateError
from .linalg import as_matrix
from .objectives import AlignmentHead

CHECKPOINT_MAGIC = b"IBKD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths ``[d_in, h_1, ..., d_out]``; tanh on hidden layers."""

    layer_dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ConfigError(f"an MLP needs at least input and output dims, got {dims}")
        if min(dims) < 1:
            raise ConfigError(f"all layer dims must be >= 1, got {dims}")

    @property
    def d_in(self):
        return self.layer_dims[0]

    @property
    def d_out(self):
        return self.layer_dims[-1]

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class StudentModel:
    """MLP parameters plus optional projection ``proj`` (d' x d) and
    distillation alignment head.

    Layer ``i`` computes ``h @ weights[i] + biases[i]`` with ``weights[i]`` of
    shape ``(fan_in, fan_out)``.
    """

    spec: MLPSpec
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    proj: Optional[np.ndarray] = None
    align: Optional[AlignmentHead] = None

    def __post_init__(self):
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise ShapeError("parameter count does not match the layer spec")
        dims = self.spec.layer_dims
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ShapeError(f"layer {i} parameters {w.shape}/{b.shape} do not match dims {dims}")
        if self.proj is not None:
            if self.proj.ndim != 2 or self.proj.shape[1] != self.spec.d_out:
                raise ShapeError(f"proj must be (d', {self.spec.d_out}), got {self.proj.shape}")
            if self.proj.shape[0] >= self.spec.d_out:
                raise ConfigError(
                    f"projection must reduce the dimension: {self.proj.shape[0]} >= {self.spec.d_out}"
                )

    @classmethod
    def init(cls, layer_dims: Sequence[int], seed=0):
        spec = MLPSpec(tuple(layer_dims))
        rng = np.random.default_rng(seed)
        dims = spec.layer_dims
        weights = [glorot(rng, dims[i], dims[i + 1]) for i in range(spec.n_layers)]
        biases = [np.zeros(dims[i + 1]) for i in range(spec.n_layers)]
        return cls(spec, weights, biases)

    @property
    def output_dim(self):
        return self.spec.d_out if self.proj is None else self.proj.shape[0]

    def copy(self):
        return StudentModel(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            None if self.proj is None else self.proj.copy(),
            None if self.align is None else AlignmentHead(self.align.W.copy()),
        )

    def parameters(self):
        """Parameter arrays in checkpoint order (mutable views)."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params += [w, b]
        if self.proj is not None:
            params.append(self.proj)
        if self.align is not None:
            params.append(self.align.W)
        return params

    def embed(self, inputs):
        """Final representation: MLP output, projected when ``proj`` is set."""
        out, _ = forward(self, inputs)
        return out if self.proj is None else project(self.proj, out)

    def digest(self):
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()


@dataclass
class ForwardCache:
    model_id: int
    activations: List[np.ndarray] = field(default_factory=list)


def forward(model: StudentModel, inputs):
    """Run the MLP (without the projection head).

    Returns ``(outputs, cache)``; ``cache`` feeds ``backward``.
    """
    x = as_matrix(inputs, "inputs")
    if x.shape[1] != model.spec.d_in:
        raise ShapeError(f"inputs have {x.shape[1]} columns, model expects {model.spec.d_in}")
    acts = [x]
    h = x
    last = model.spec.n_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return h, ForwardCache(id(model), acts)


def backward(model: StudentModel, cache: ForwardCache, grad_out):
    """Reverse-mode pass. Returns ``(grad_weights, grad_biases, grad_in)``."""
    if cache.model_id != id(model) or len(cache.activations) != model.spec.n_layers + 1:
        raise StateError("forward cache does not belong to this model")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != cache.activations[-1].shape:
        raise StateError(f"grad_out shape {g.shape} does not match cached output {cache.activations[-1].shape}")
    n_layers = model.spec.n_layers
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            h = cache.activations[i + 1]
            g = g * (1.0 - h * h)
        grad_w[i] = cache.activations[i].T @ g
        grad_b[i] = g.sum(axis=0)
        g = g @ model.weights[i].T
    return grad_w, grad_b, g


def project(proj, s):
    """Reduced representation ``s @ proj.T`` for ``proj`` of shape (d', d)."""
    proj = as_matrix(proj, "proj")
    s = as_matrix(s, "s")
    if s.shape[1] != proj.shape[1]:
        raise ShapeError(f"embeddings have {s.shape[1]} columns but proj expects {proj.shape[1]}")
    return s @ proj.T


class TeacherModel:
    """Frozen teacher: a network (embeds inputs) or an id -> vector table."""

    def __init__(self, network: Optional[StudentModel] = None, ids=None, vectors=None):
        if (network is None) == (vectors is None):
            raise ConfigError("teacher needs exactly one of a network or an embedding table")
        self._network = None
        self._index = None
        self._vectors = None
        if network is not None:
            self._network = network.copy()
            for p in self._network.parameters():
                p.flags.writeable = False
            self.dim = network.output_dim
        else:
            vectors = np.array(as_matrix(vectors, "vectors", allow_empty=True), copy=True)
            ids = list(ids)
            if len(ids) != vectors.shape[0]:
                raise ShapeError(f"{len(ids)} ids for {vectors.shape[0]} vectors")
            index = {}
            for row, key in enumerate(ids):
                if key in index:
                    raise ConfigError(f"duplicate teacher id {key!r}")
                index[key] = row
            vectors.flags.writeable = False
            self._index = index
            self._ids = tuple(ids)
            self._vectors = vectors
            self.dim = vectors.shape[1]

    @classmethod
    def from_table(cls, ids, vectors):
        return cls(ids=ids, vectors=vectors)

    @classmethod
    def from_network(cls, model):
        return cls(network=model)

    @property
    def is_table(self):
        return self._vectors is not None

    @property
    def ids(self):
        return self._ids if self.is_table else None

    @property
    def vectors(self):
        return self._vectors

    def embed(self, ids=None, inputs=None):
        if self.is_table:
            if ids is None:
                raise ConfigError("a table teacher embeds by id")
            try:
                rows = [self._index[i] for i in ids]
            except KeyError as exc:
                raise ConfigError(f"teacher has no embedding for id {exc.args[0]!r}") from None
            return self._vectors[rows]
        if inputs is None:
            raise ConfigError("a network teacher embeds inputs")
        return self._network.embed(inputs)

    def digest(self):
        h = hashlib.sha256()
        if self.is_table:
            for key in self._ids:
                h.update(key.encode("utf-8") + b"\0")
            h.update(np.ascontiguousarray(self._vectors).astype("<f8").tobytes())
        else:
            h.update(checkpoint_bytes(self._network))
        return h.hexdigest()


def checkpoint_bytes(model: StudentModel) -> bytes:
    """Serialize: magic, version, dims, flags, then f64 LE parameters."""
    dims = model.spec.layer_dims
    head = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(dims))]
    head.append(struct.pack(f"<{len(dims)}I", *dims))
    proj_rows = 0 if model.proj is None else model.proj.shape[0]
    align_cols = 0 if model.align is None else model.align.W.shape[1]
    head.append(struct.pack("<II", proj_rows, align_cols))
    body = [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.parameters()]
    return b"".join(head + body)


def model_from_bytes(buf: bytes) -> StudentModel:
    if len(buf) < 12:
        raise FormatError(f"checkpoint truncated at byte {len(buf)} (header needs 12)")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r} at byte 0")
    version, n_dims = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 4")
    offset = 12
    need = offset + 4 * n_dims + 8
    if len(buf) < need:
        raise FormatError(f"checkpoint truncated at byte {len(buf)} (header needs {need})")
    dims = struct.unpack_from(f"<{n_dims}I", buf, offset)
    offset += 4 * n_dims
    proj_rows, align_cols = struct.unpack_from("<II", buf, offset)
    offset += 8
    spec = MLPSpec(dims)

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(buf):
            raise FormatError(f"checkpoint truncated at byte {len(buf)} (parameter ends at {end})")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset = end
        return arr

    weights, biases = [], []
    for i in range(spec.n_layers):
        weights.append(take((dims[i], dims[i + 1])))
        biases.append(take((dims[i + 1],)))
    proj = take((proj_rows, spec.d_out)) if proj_rows else None
    align = AlignmentHead(take((spec.d_out, align_cols))) if align_cols else None
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after byte {offset}")
    return StudentModel(spec, weights, biases, proj, align)


def save_checkpoint(model: StudentModel, path):
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> StudentModel:
    return model_from_bytes(Path(path).read_bytes())
