"""Full-ranking Recall@K / NDCG@K and embedding-distribution diagnostics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import InteractionDataset, _adjacency_lists
from .objectives import l2_normalize


class EvaluationError(ValueError):
    pass


@dataclass
class MetricsReport:
    split: str
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_evaluated_users: int
    diagnostics: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["recall"] = {f"recall@{k}": v for k, v in self.recall.items()}
        out["ndcg"] = {f"ndcg@{k}": v for k, v in self.ndcg.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, best first, ties by ascending index.

    ``-inf`` marks excluded entries; rows may return fewer than k finite picks,
    in which case excluded items fill the tail in index order.
    """
    scores = np.atleast_2d(scores)
    n_rows, n_cols = scores.shape
    k = min(k, n_cols)
    if k == 0:
        return np.empty((n_rows, 0), dtype=np.int64)
    part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
    kth = np.min(np.take_along_axis(scores, part, axis=1), axis=1)
    out = np.empty((n_rows, k), dtype=np.int64)
    for r in range(n_rows):
        # everything strictly above the k-th value is in; ties at it are resolved by index
        cand = np.flatnonzero(scores[r] >= kth[r])
        order = np.lexsort((cand, -scores[r, cand]))
        out[r] = cand[order[:k]]
    return out


def rank_items(final: np.ndarray, n_users: int, user: int, train_items, k: int) -> np.ndarray:
    """Top-k item indices for one user by dot product, with train items masked out."""
    scores = final[n_users:] @ final[user]
    scores = scores.astype(np.float64)
    scores[np.asarray(train_items, dtype=np.int64)] = -np.inf
    top = top_k(scores[None, :], k)[0]
    # masked items only pad the list when k exceeds the candidates; never return them
    return top[np.isfinite(scores[top])]


def recall_at_k(topk, relevant, k: int) -> float:
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise EvaluationError("recall needs at least one relevant item")
    hits = sum(1 for i in list(topk)[:k] if int(i) in relevant)
    return hits / len(relevant)


def _idcg(n: int) -> float:
    return float(np.sum(1.0 / np.log2(np.arange(2, n + 2))))


def ndcg_at_k(topk, relevant, k: int) -> float:
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise EvaluationError("NDCG needs at least one relevant item")
    dcg = sum(1.0 / np.log2(r + 2) for r, i in enumerate(list(topk)[:k]) if int(i) in relevant)
    return float(dcg / _idcg(min(k, len(relevant))))


def evaluate(
    final: np.ndarray,
    dataset: InteractionDataset,
    split: str = "test",
    ks=(20, 50),
    chunk_size: int = 1024,
    users=None,
) -> MetricsReport:
    """Average Recall/NDCG over users holding at least one item in ``split``.

    Train items are excluded from the ranking; for the test split the
    validation items are excluded too.
    """
    held = dataset.split(split)
    if split == "train":
        raise EvaluationError("evaluate on 'valid' or 'test', not 'train'")
    if len(held) == 0:
        raise EvaluationError(f"split {split!r} is empty")
    ks = sorted(set(int(k) for k in ks))
    seen = [dataset.train_edges] + ([dataset.valid_edges] if split == "test" else [])
    seen_lists = _adjacency_lists(np.concatenate(seen), dataset.n_users)
    held_lists = _adjacency_lists(held, dataset.n_users)

    eval_users = np.array([u for u in range(dataset.n_users) if len(held_lists[u])], dtype=np.int64)
    if users is not None:
        eval_users = np.intersect1d(eval_users, np.asarray(users, dtype=np.int64))
    n_users = dataset.n_users
    item_emb = final[n_users:]
    kmax = max(ks)
    recall_sum = dict.fromkeys(ks, 0.0)
    ndcg_sum = dict.fromkeys(ks, 0.0)
    discounts = 1.0 / np.log2(np.arange(2, kmax + 2))
    idcg_table = np.cumsum(discounts)

    for start in range(0, len(eval_users), chunk_size):
        batch = eval_users[start:start + chunk_size]
        scores = (final[batch] @ item_emb.T).astype(np.float64)
        for r, u in enumerate(batch):
            scores[r, seen_lists[u]] = -np.inf
        top = top_k(scores, kmax)
        for r, u in enumerate(batch):
            rel = held_lists[u]
            hits = np.isin(top[r], rel)
            for k in ks:
                h = hits[:k]
                recall_sum[k] += h.sum() / len(rel)
                # with fewer than k items the ranking is simply shorter
                ndcg_sum[k] += discounts[:len(h)][h].sum() / idcg_table[min(k, len(rel)) - 1]

    n_eval = len(eval_users)
    if n_eval == 0:
        raise EvaluationError(f"no user has items in split {split!r}")
    return MetricsReport(
        split=split,
        recall={k: float(recall_sum[k] / n_eval) for k in ks},
        ndcg={k: float(ndcg_sum[k] / n_eval) for k in ks},
        n_evaluated_users=int(n_eval),
        diagnostics=embedding_shift(final, dataset, split=split),
    )


def _mean_pairwise_cosine(x_hat: np.ndarray) -> float:
    n = len(x_hat)
    if n < 2:
        return float("nan")
    s = x_hat.sum(axis=0)
    return float((s @ s - n) / (n * (n - 1)))


def embedding_shift(final: np.ndarray, dataset: InteractionDataset, split: str = "test") -> dict[str, float]:
    """Distance between user and item centroids on the unit sphere, plus alignment/uniformity summaries."""
    n_users = dataset.n_users
    x_hat, _ = l2_normalize(np.asarray(final, dtype=np.float64))
    users, items = x_hat[:n_users], x_hat[n_users:]
    shift = float(np.linalg.norm(users.mean(axis=0) - items.mean(axis=0)))
    edges = dataset.split(split) if split != "train" else dataset.train_edges
    if len(edges):
        alignment = float(np.mean(np.sum(users[edges[:, 0]] * items[edges[:, 1]], axis=1)))
    else:
        alignment = float("nan")
    return {
        "centroid_distance": shift,
        "mean_alignment": alignment,
        "mean_user_cosine": _mean_pairwise_cosine(users),
        "mean_item_cosine": _mean_pairwise_cosine(items),
    }
