"""Embedding file formats and the synthetic teacher/task generator."""

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .encoder import TeacherModel
from .evalsuite import exact_retrieve, mrr_at_k
from .exceptions import ConfigError, FormatError
from .linalg import as_matrix
from .trainer import SupervisedSet

EMBEDDING_MAGIC = b"IBKV"
EMBEDDING_VERSION = 1
_HEADER = struct.Struct("<4sIQI")


@dataclass
class EmbeddingTable:
    """Ordered ids with one vector per id (rows of ``vectors``)."""

    ids: List[str]
    vectors: np.ndarray

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise FormatError(f"{len(self.ids)} ids for vectors of shape {self.vectors.shape}")
        seen = set()
        for i in self.ids:
            if i in seen:
                raise FormatError(f"duplicate id {i!r}")
            seen.add(i)

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (self.ids == other.ids and self.vectors.shape == other.vectors.shape
                and self.vectors.astype("<f8").tobytes() == other.vectors.astype("<f8").tobytes())

    def lookup(self, ids):
        index = {k: r for r, k in enumerate(self.ids)}
        try:
            return self.vectors[[index[i] for i in ids]]
        except KeyError as exc:
            raise FormatError(f"unknown id {exc.args[0]!r}") from None


def _is_jsonl(path):
    return Path(path).suffix.lower() in (".jsonl", ".json")


def embeddings_to_bytes(table: EmbeddingTable) -> bytes:
    dim = table.dim
    parts = [_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, len(table), dim)]
    vectors = np.ascontiguousarray(table.vectors, dtype="<f8")
    for key, row in zip(table.ids, vectors):
        raw = key.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"id {key[:20]!r}... longer than 65535 bytes")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(row.tobytes())
    return b"".join(parts)


def embeddings_from_bytes(buf: bytes) -> EmbeddingTable:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes, need {_HEADER.size}")
    magic, version, count, dim = _HEADER.unpack_from(buf, 0)
    if magic != EMBEDDING_MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0")
    if version != EMBEDDING_VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    offset = _HEADER.size
    ids = []
    seen = set()
    vectors = np.empty((count, dim), dtype=np.float64)
    row_bytes = 8 * dim
    for r in range(count):
        if offset + 2 > len(buf):
            raise FormatError(f"truncated record {r} at byte {offset}")
        (n,) = struct.unpack_from("<H", buf, offset)
        if offset + 2 + n + row_bytes > len(buf):
            raise FormatError(f"truncated record {r} at byte {offset}")
        try:
            key = buf[offset + 2:offset + 2 + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"record {r} id is not UTF-8 at byte {offset + 2}") from None
        if key in seen:
            raise FormatError(f"duplicate id {key!r} at byte {offset}")
        seen.add(key)
        ids.append(key)
        offset += 2 + n
        vectors[r] = np.frombuffer(buf, dtype="<f8", count=dim, offset=offset)
        offset += row_bytes
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes at byte {offset}")
    return EmbeddingTable(ids, vectors)


def write_embeddings(path, table: EmbeddingTable):
    """Write ``table`` as JSONL (``.jsonl``/``.json`` suffix) or IBKV binary."""
    path = Path(path)
    if _is_jsonl(path):
        with open(path, "w") as fh:
            for key, row in zip(table.ids, table.vectors):
                fh.write(json.dumps({"id": key, "vector": [float(v) for v in row]}) + "\n")
    else:
        path.write_bytes(embeddings_to_bytes(table))


def read_embeddings(path) -> EmbeddingTable:
    path = Path(path)
    if not _is_jsonl(path):
        return embeddings_from_bytes(path.read_bytes())
    ids, rows = [], []
    seen = set()
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or "id" not in obj or "vector" not in obj:
                raise FormatError(f"{path}:{lineno}: record needs 'id' and 'vector'")
            key, vec = str(obj["id"]), obj["vector"]
            if not isinstance(vec, list) or not all(isinstance(v, (int, float)) for v in vec):
                raise FormatError(f"{path}:{lineno}: 'vector' must be a list of numbers")
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise FormatError(f"{path}:{lineno}: vector has {len(vec)} entries, expected {dim}")
            if key in seen:
                raise FormatError(f"{path}:{lineno}: duplicate id {key!r}")
            seen.add(key)
            ids.append(key)
            rows.append(vec)
    vectors = np.array(rows, dtype=np.float64).reshape(len(rows), dim or 0)
    return EmbeddingTable(ids, vectors)


@dataclass
class SupervisedInstance:
    anchor: np.ndarray
    positive: np.ndarray
    negatives: np.ndarray


@dataclass
class SyntheticSpec:
    """Desk-scale retrieval/similarity task driven by a hidden latent.

    Inputs are ``x = B z + noise_sigma * eps``; the teacher sees ``z``
    directly and emits ``A z / ||A z||``.
    """

    latent_dim: int = 8
    input_dim: int = 64
    teacher_dim: int = 32
    corpus_size: int = 2000
    query_count: int = 200
    noise_sigma: float = 0.1
    seed: int = 7
    sts_pairs: int = 1000
    negatives_k: int = 8
    input_scale: float = 1.0

    def __post_init__(self):
        for name in ("latent_dim", "input_dim", "teacher_dim", "corpus_size", "query_count", "sts_pairs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.latent_dim > min(self.input_dim, self.teacher_dim):
            raise ConfigError(
                f"latent_dim {self.latent_dim} exceeds min(input_dim, teacher_dim) = "
                f"{min(self.input_dim, self.teacher_dim)}"
            )
        if self.query_count > self.corpus_size:
            raise ConfigError("query_count cannot exceed corpus_size (each query targets a distinct doc)")
        if not self.input_scale > 0:
            raise ConfigError(f"input_scale must be > 0, got {self.input_scale}")
        if not self.noise_sigma >= 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0 <= self.negatives_k < self.corpus_size:
            raise ConfigError(f"negatives_k must be in [0, corpus_size), got {self.negatives_k}")

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("synthetic spec must be a JSON object")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic spec fields {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticTask:
    """Everything the generator emits.

    ``views`` are second noisy inputs of each corpus latent, so
    ``(corpus[i], views[i])`` are the positive pairs. Supervised instances
    use a view as anchor, its corpus doc as positive and the K corpus docs
    the teacher finds most similar among the other latents as negatives.
    ``sts_a[i]``/``sts_b[i]`` are held-out pairs of graded similarity.
    """

    corpus: EmbeddingTable
    views: EmbeddingTable
    queries: EmbeddingTable
    sts: EmbeddingTable
    teacher: TeacherModel
    supervised_ids: List[dict]
    relevance: Dict[str, List[str]]
    spec: Optional[SyntheticSpec] = None
    teacher_mrr: Optional[float] = None

    @property
    def sts_a(self):
        return self.sts.vectors[0::2]

    @property
    def sts_b(self):
        return self.sts.vectors[1::2]

    @property
    def sts_ids(self):
        return self.sts.ids[0::2], self.sts.ids[1::2]

    def positive_pairs(self):
        return self.corpus.vectors, self.views.vectors

    def supervised(self) -> SupervisedSet:
        inputs = {}
        for table in (self.corpus, self.views):
            inputs.update(zip(table.ids, table.vectors))
        d = self.corpus.dim
        try:
            anchors = np.array([inputs[r["anchor"]] for r in self.supervised_ids]).reshape(-1, d)
            positives = np.array([inputs[r["positive"]] for r in self.supervised_ids]).reshape(-1, d)
            K = len(self.supervised_ids[0]["negatives"]) if self.supervised_ids else 0
            negatives = np.array([[inputs[n] for n in r["negatives"]] for r in self.supervised_ids])
        except KeyError as exc:
            raise FormatError(f"supervised instance references unknown id {exc.args[0]!r}") from None
        return SupervisedSet(anchors, positives, negatives.reshape(len(anchors), K, d))

    def instances(self):
        s = self.supervised()
        return [SupervisedInstance(a, p, n) for a, p, n in zip(s.anchors, s.positives, s.negatives)]

    def teacher_for(self, ids):
        return self.teacher.embed(ids=ids)


def _ids(prefix, n):
    return [f"{prefix}{i:05d}" for i in range(n)]


def _top_k_excluding(sims, k, exclude):
    """Top-k column indices per row, skipping ``exclude[row]``; ties by index."""
    sims = sims.copy()
    sims[np.arange(sims.shape[0]), exclude] = -np.inf
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :k]


def gen_synthetic(spec: SyntheticSpec) -> SyntheticTask:
    k, d_in, d_t = spec.latent_dim, spec.input_dim, spec.teacher_dim
    n, q, m = spec.corpus_size, spec.query_count, spec.sts_pairs
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(9)]
    # columns of B have expected norm input_scale
    B = streams[0].normal(size=(d_in, k)) * (spec.input_scale / np.sqrt(d_in))
    A = streams[1].normal(size=(d_t, k))

    def inputs(z, rng):
        return z @ B.T + spec.noise_sigma * rng.normal(size=(z.shape[0], d_in))

    def teach(z):
        t = z @ A.T
        return t / np.linalg.norm(t, axis=1, keepdims=True)

    z_docs = streams[2].normal(size=(n, k))
    corpus = inputs(z_docs, streams[3])
    views = inputs(z_docs, streams[4])
    targets = streams[5].choice(n, size=q, replace=False)
    queries = inputs(z_docs[targets], streams[6])

    z_a = streams[7].normal(size=(m, k))
    w = streams[7].normal(size=(m, k))
    theta = streams[7].uniform(0.0, np.pi / 2, size=(m, 1))
    z_b = np.cos(theta) * z_a + np.sin(theta) * w
    sts_rng = streams[8]
    sts_a, sts_b = inputs(z_a, sts_rng), inputs(z_b, sts_rng)

    doc_ids, view_ids, query_ids = _ids("d", n), _ids("v", n), _ids("q", q)
    sts_ids = [f"s{i:05d}{side}" for i in range(m) for side in (".a", ".b")]
    sts_inputs = np.empty((2 * m, d_in))
    sts_inputs[0::2], sts_inputs[1::2] = sts_a, sts_b

    t_docs = teach(z_docs)
    t_sts = np.empty((2 * m, d_t))
    t_sts[0::2], t_sts[1::2] = teach(z_a), teach(z_b)
    teacher = TeacherModel.from_table(
        doc_ids + view_ids + query_ids + sts_ids,
        np.concatenate([t_docs, t_docs, t_docs[targets], t_sts]),
    )

    negatives = _top_k_excluding(t_docs @ t_docs.T, spec.negatives_k, np.arange(n))
    supervised_ids = [
        {"anchor": view_ids[i], "positive": doc_ids[i], "negatives": [doc_ids[j] for j in negatives[i]]}
        for i in range(n)
    ]
    relevance = {query_ids[i]: [doc_ids[targets[i]]] for i in range(q)}

    task = SyntheticTask(
        corpus=EmbeddingTable(doc_ids, corpus),
        views=EmbeddingTable(view_ids, views),
        queries=EmbeddingTable(query_ids, queries),
        sts=EmbeddingTable(sts_ids, sts_inputs),
        teacher=teacher,
        supervised_ids=supervised_ids,
        relevance=relevance,
        spec=spec,
    )
    task.teacher_mrr = teacher_mrr_at_k(task, 10)
    return task


def teacher_mrr_at_k(task: SyntheticTask, k: int = 10) -> float:
    results = exact_retrieve(
        task.teacher.embed(ids=task.queries.ids), task.teacher.embed(ids=task.corpus.ids), k,
        score="dot", query_ids=task.queries.ids, doc_ids=task.corpus.ids,
    )
    return mrr_at_k(results, task.relevance, k)


TASK_FILES = {
    "corpus": "corpus.ibkv",
    "views": "pairs.ibkv",
    "queries": "queries.ibkv",
    "sts": "sts.ibkv",
    "teacher": "teacher.ibkv",
    "supervised": "supervised.jsonl",
    "relevance": "relevance.jsonl",
}


def save_task(task: SyntheticTask, out_dir):
    """Write the task files; returns ``{name: path}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / fname for name, fname in TASK_FILES.items()}
    for name in ("corpus", "views", "queries", "sts"):
        write_embeddings(paths[name], getattr(task, name))
    write_embeddings(paths["teacher"], EmbeddingTable(list(task.teacher.ids), task.teacher.vectors))
    with open(paths["supervised"], "w") as fh:
        for rec in task.supervised_ids:
            fh.write(json.dumps(rec) + "\n")
    with open(paths["relevance"], "w") as fh:
        for qid, docs in task.relevance.items():
            fh.write(json.dumps({"query": qid, "relevant": docs}) + "\n")
    return paths


def _read_jsonl(path, required):
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            missing = [key for key in required if not isinstance(obj, dict) or key not in obj]
            if missing:
                raise FormatError(f"{path}:{lineno}: missing {missing}")
            records.append(obj)
    return records


def load_task(data_dir) -> SyntheticTask:
    d = Path(data_dir)
    if not d.is_dir():
        raise FormatError(f"data directory {d} does not exist")
    paths = {name: d / fname for name, fname in TASK_FILES.items()}
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise FormatError(f"data directory is missing {missing}")
    teacher_table = read_embeddings(paths["teacher"])
    supervised = _read_jsonl(paths["supervised"], ("anchor", "positive", "negatives"))
    relevance = {r["query"]: list(r["relevant"]) for r in _read_jsonl(paths["relevance"], ("query", "relevant"))}
    spec = None
    manifest = d / "manifest.json"
    teacher_mrr = None
    if manifest.exists():
        meta = json.loads(manifest.read_text())
        if "spec" in meta:
            spec = SyntheticSpec.from_dict(meta["spec"])
        teacher_mrr = meta.get("teacher_mrr_at_10")
    return SyntheticTask(
        corpus=read_embeddings(paths["corpus"]),
        views=read_embeddings(paths["views"]),
        queries=read_embeddings(paths["queries"]),
        sts=read_embeddings(paths["sts"]),
        teacher=TeacherModel.from_table(teacher_table.ids, teacher_table.vectors),
        supervised_ids=supervised,
        relevance=relevance,
        spec=spec,
        teacher_mrr=teacher_mrr,
    )
