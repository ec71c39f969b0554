"""Prototype classification: the fitness function the ES engine optimizes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import EmbeddingNet, ParamVector, embed

METRICS = ("euclidean", "cosine")


class MissingClassError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


@dataclass
class PrototypeSet:
    prototypes: np.ndarray
    way: int
    metric: str = "euclidean"


@dataclass
class EpisodeResult:
    loss: float
    accuracy: float
    per_query_probs: np.ndarray

    @property
    def fitness(self) -> float:
        return -self.loss


def compute_prototypes(
    support_embeddings: np.ndarray, labels: np.ndarray, way: int | None = None, metric="euclidean"
) -> PrototypeSet:
    labels = np.asarray(labels)
    way = int(labels.max()) + 1 if way is None else way
    counts = np.bincount(labels, minlength=way)
    if (counts == 0).any():
        missing = np.flatnonzero(counts == 0).tolist()
        raise MissingClassError(f"no support rows for class label(s) {missing}")
    sums = np.zeros((way, support_embeddings.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, support_embeddings)
    return PrototypeSet(sums / counts[:, None], way, metric)


def _check_metric(metric: str) -> None:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def similarity(query: np.ndarray, prototype: np.ndarray, metric: str = "euclidean") -> float:
    _check_metric(metric)
    q = np.asarray(query, dtype=np.float64)
    p = np.asarray(prototype, dtype=np.float64)
    if metric == "euclidean":
        d = q - p
        return -float(d @ d)
    nq, np_ = np.linalg.norm(q), np.linalg.norm(p)
    if nq == 0 or np_ == 0:
        raise DegenerateVectorError("cosine similarity of a zero vector is undefined")
    return float(q @ p / (nq * np_))


def similarity_matrix(queries: np.ndarray, prototypes: np.ndarray, metric: str) -> np.ndarray:
    """(queries x prototypes) similarities, vectorized version of :func:`similarity`."""
    _check_metric(metric)
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(prototypes, dtype=np.float64)
    if metric == "euclidean":
        sq = (q * q).sum(1)[:, None] - 2.0 * q @ p.T + (p * p).sum(1)[None, :]
        return -np.maximum(sq, 0.0)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    pn = np.linalg.norm(p, axis=1, keepdims=True)
    if (qn == 0).any() or (pn == 0).any():
        raise DegenerateVectorError("cosine similarity of a zero vector is undefined")
    return (q / qn) @ (p / pn).T


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def classify(
    support_embeddings, support_labels, query_embeddings, query_labels, way: int, metric: str
) -> EpisodeResult:
    """Loss/accuracy of queries against support prototypes, given embeddings."""
    protos = compute_prototypes(support_embeddings, support_labels, way, metric)
    scores = similarity_matrix(query_embeddings, protos.prototypes, metric)
    logp = log_softmax(scores)
    labels = np.asarray(query_labels)
    loss = -logp[np.arange(len(labels)), labels].mean()
    # argmax returns the first maximum: ties go to the lowest class index
    accuracy = (scores.argmax(axis=1) == labels).mean()
    return EpisodeResult(float(loss), float(accuracy), np.exp(logp))


def episode_loss(params: ParamVector, net: EmbeddingNet, ep, metric: str = "euclidean") -> EpisodeResult:
    """Embed support and query in one batch and score the queries."""
    z = embed(net, params, ep.images)
    n_support = len(ep.support)
    return classify(
        z[:n_support], ep.support_labels, z[n_support:], ep.query_labels, ep.way, metric
    )
