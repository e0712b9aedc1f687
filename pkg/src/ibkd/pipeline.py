"""Task-level glue: embed a synthetic task with a model and score it."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataio import SyntheticTask
from .encoder import StudentModel
from .evalsuite import (MetricReport, alignment, correlation_from_covariance, cosine_rows,
                        covariance_matrix, exact_retrieve, mrr_at_k, offdiag_mass, recall_at_k,
                        spearman, uniformity)
from .trainer import DistillConfig, TrainHistory, run_distill_stage, run_finetune_stage


def _embedder(model):
    """``model`` is a StudentModel or ``None`` for the teacher."""
    if model is None:
        return lambda task, table: task.teacher.embed(ids=table.ids)
    return lambda task, table: model.embed(table.vectors)


def retrieval_results(model: Optional[StudentModel], task: SyntheticTask, k: int):
    embed = _embedder(model)
    return exact_retrieve(embed(task, task.queries), embed(task, task.corpus), k, score="dot",
                          query_ids=task.queries.ids, doc_ids=task.corpus.ids)


def evaluate_retrieval(model, task, k=10, recall_k=None, dataset="synthetic-retrieval"):
    """MRR@k and Recall@recall_k (default ``max(k, 1000)`` capped at the corpus)."""
    recall_k = recall_k or min(max(k, 1000), len(task.corpus))
    results = retrieval_results(model, task, max(k, recall_k))
    dim = task.teacher.dim if model is None else model.output_dim
    return MetricReport(dataset, dim, {
        f"mrr@{k}": mrr_at_k(results, task.relevance, k),
        f"recall@{recall_k}": recall_at_k(results, task.relevance, recall_k),
    }), results


def sts_scores(model, task):
    """(predicted cosine, gold teacher cosine) for every held-out pair."""
    ids_a, ids_b = task.sts_ids
    gold = cosine_rows(task.teacher.embed(ids=ids_a), task.teacher.embed(ids=ids_b))
    if model is None:
        return gold.copy(), gold
    return cosine_rows(model.embed(task.sts_a), model.embed(task.sts_b)), gold


def evaluate_sts(model, task, dataset="synthetic-sts"):
    pred, gold = sts_scores(model, task)
    dim = task.teacher.dim if model is None else model.output_dim
    return MetricReport(dataset, dim, {"spearman": spearman(pred, gold)})


@dataclass
class Diagnosis:
    report: MetricReport
    covariance: np.ndarray


def diagnose(model, task, dataset="synthetic-corpus"):
    """Alignment on positive pairs; uniformity and covariance on the corpus."""
    embed = _embedder(model)
    docs = embed(task, task.corpus)
    views = embed(task, task.views)
    cov = covariance_matrix(docs)
    _, zero = correlation_from_covariance(cov)
    warnings = [f"dimension {i} has zero variance; its correlations are reported as 0"
                for i in np.flatnonzero(zero)]
    report = MetricReport(dataset, docs.shape[1], {
        "alignment": alignment(docs, views),
        "uniformity": uniformity(docs),
        "offdiag_mass": offdiag_mass(cov),
    }, warnings)
    return Diagnosis(report, cov)


def train_two_stage(cfg: DistillConfig, task: SyntheticTask, student: Optional[StudentModel] = None,
                    finetune=True):
    """Distill on the corpus, then (optionally) fine-tune on the supervised set.

    Returns ``(distilled, finetuned_or_None, histories)``.
    """
    if student is None:
        student = StudentModel.init(cfg.layer_dims(task.corpus.dim), seed=cfg.seed)
    distilled, h1 = run_distill_stage(cfg, task.teacher, student, task.corpus.vectors, ids=task.corpus.ids)
    histories = [h1]
    tuned = None
    if finetune:
        tuned, h2 = run_finetune_stage(cfg, distilled, task.supervised())
        histories.append(h2)
    return distilled, tuned, histories
