"""Epoch loop: batching, negative sampling, analytic backward pass, lazy Adam, early stopping."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import augmentation as aug
from .dataset import InteractionDataset
from .evaluator import evaluate
from .objectives import (
    LossConfig,
    LossKind,
    bpr_loss,
    l2_normalize,
    normalize_backward,
    sgcl_loss,
    sslrec_loss,
)
from .propagation import (
    EmbeddingState,
    NormalizedAdjacency,
    backward_from_rows,
    build_normalized_adjacency,
    combine_layers,
    export_embeddings,
    init_embeddings,
    propagate,
)

log = logging.getLogger(__name__)

LR_GRID = (1e-2, 5e-3, 1e-3, 5e-4, 1e-4)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    mixup: aug.MixupConfig = field(default_factory=aug.MixupConfig)
    batch_size: int = 1024
    embedding_dim: int = 64
    learning_rate: float = 1e-3
    n_layers: int = 3
    max_epochs: int = 300
    patience: int = 10
    eval_k: int = 20
    seed: int = 2024
    dtype: str = "float64"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> list[str]:
        errors = self.loss.validate() + self.mixup.validate()
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.embedding_dim < 1:
            errors.append(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        if not self.learning_rate > 0:
            errors.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.n_layers < 0:
            errors.append(f"n_layers must be >= 0, got {self.n_layers}")
        if self.max_epochs < 1:
            errors.append(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            errors.append(f"patience must be >= 1, got {self.patience}")
        if self.eval_k < 1:
            errors.append(f"eval_k must be >= 1, got {self.eval_k}")
        if self.dtype not in ("float64", "float32"):
            errors.append(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.mixup.n_mix and self.loss.kind != LossKind.SGCL:
            errors.append("mixup augmentation only applies to the sgcl loss")
        return errors

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"]["kind"] = self.loss.kind.value
        d["loss"]["view_mode"] = self.loss.view_mode.value
        return d


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    valid_recall: float
    valid_ndcg: float
    train_seconds: float
    eval_seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""
    propagation_calls: int = 0
    negative_sampling_calls: int = 0

    @property
    def n_epochs(self) -> int:
        return len(self.epochs)

    def to_dict(self, timing: bool = True) -> dict:
        records = []
        for rec in self.epochs:
            r = asdict(rec)
            if not timing:
                r.pop("train_seconds")
                r.pop("eval_seconds")
            records.append(r)
        return {
            "epochs": records,
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
            "propagation_calls": self.propagation_calls,
            "negative_sampling_calls": self.negative_sampling_calls,
        }


@dataclass
class TrainBatch:
    users: np.ndarray
    items: np.ndarray
    negatives: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.users)


def sample_batch(dataset: InteractionDataset, batch_size: int, rng: np.random.Generator):
    """Yield one epoch of batches: a seeded shuffle of all train edges cut into chunks."""
    edges = dataset.train_edges
    perm = rng.permutation(len(edges))
    for start in range(0, len(edges), batch_size):
        chunk = edges[perm[start:start + batch_size]]
        yield TrainBatch(chunk[:, 0].copy(), chunk[:, 1].copy())


class NegativeSampler:
    """Uniform rejection sampling of items outside the user's train set."""

    def __init__(self, dataset: InteractionDataset):
        self.n_items = dataset.n_items
        edges = dataset.train_edges
        self._keys = np.unique(edges[:, 0] * self.n_items + edges[:, 1])
        self._degree = np.bincount(edges[:, 0], minlength=dataset.n_users)
        self.calls = 0

    def _is_train(self, users, items):
        keys = users * self.n_items + items
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        return self._keys[pos] == keys

    def __call__(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        self.calls += 1
        users = np.asarray(users, dtype=np.int64)
        full = self._degree[users] >= self.n_items
        if np.any(full):
            raise TrainingError(f"user {int(users[full][0])} interacted with every item; no negative exists")
        neg = rng.integers(0, self.n_items, size=len(users))
        bad = np.flatnonzero(self._is_train(users, neg))
        while len(bad):
            neg[bad] = rng.integers(0, self.n_items, size=len(bad))
            bad = bad[self._is_train(users[bad], neg[bad])]
        return neg


def sample_negatives(dataset: InteractionDataset, batch: TrainBatch, rng: np.random.Generator) -> np.ndarray:
    return NegativeSampler(dataset)(batch.users, rng)


def adam_step(
    state: EmbeddingState,
    grad: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> EmbeddingState:
    """Bias-corrected Adam applied only to rows with a nonzero gradient.

    Rows without gradient keep their parameters and moments untouched.
    """
    if grad.shape != state.base.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {state.base.shape}")
    if not np.isfinite(grad).all():
        raise TrainingError("non-finite gradient; aborting epoch")
    state.step += 1
    touched = np.any(grad != 0, axis=1)
    n_touched = int(np.count_nonzero(touched))
    if n_touched == 0:
        return state
    bc1 = 1 - beta1 ** state.step
    bc2 = 1 - beta2 ** state.step
    if 2 * n_touched < len(touched):
        rows = np.flatnonzero(touched)
        m, v, base = state.m[rows], state.v[rows], state.base[rows]
        _adam_update(m, v, base, grad[rows], lr, beta1, beta2, eps, bc1, bc2)
        state.m[rows], state.v[rows], state.base[rows] = m, v, base
    else:
        # most rows move: update everything in place, then put the idle rows back
        idle = np.flatnonzero(~touched)
        saved = state.m[idle], state.v[idle], state.base[idle]
        _adam_update(state.m, state.v, state.base, grad, lr, beta1, beta2, eps, bc1, bc2)
        state.m[idle], state.v[idle], state.base[idle] = saved
    return state


def _adam_update(m, v, base, g, lr, beta1, beta2, eps, bc1, bc2):
    m *= beta1
    m += (1 - beta1) * g
    v *= beta2
    tmp = np.multiply(g, g)
    tmp *= 1 - beta2
    v += tmp
    # lr * (m / bc1) / (sqrt(v / bc2) + eps)
    np.sqrt(v, out=tmp)
    tmp *= 1.0 / np.sqrt(bc2)
    tmp += eps
    np.divide(m, tmp, out=tmp)
    tmp *= lr / bc1
    base -= tmp


def _scatter(n_rows: int, d: int, idx: np.ndarray, rows: np.ndarray, out=None) -> np.ndarray:
    if out is None:
        out = np.zeros((n_rows, d), dtype=rows.dtype)
    np.add.at(out, idx, rows)
    return out


def batch_loss_and_grad(
    adj: NormalizedAdjacency,
    layers: list[np.ndarray],
    final: np.ndarray,
    layer_weights: np.ndarray,
    batch: TrainBatch,
    cfg: TrainConfig,
    rng: np.random.Generator,
    plan=None,
) -> tuple[float, np.ndarray]:
    """Loss on one batch and its gradient w.r.t. the base embeddings.

    ``layers``/``final`` may be stale (computed at the start of the epoch); the
    gradient is the exact one for the point they were computed at.
    """
    d = final.shape[1]
    n_users = adj.n_users
    user_nodes = batch.users
    item_nodes = batch.items + n_users
    loss = cfg.loss
    layer_rows = None

    if loss.kind == LossKind.SGCL:
        ab = aug.augment_batch(user_nodes, item_nodes, layers, final, cfg.mixup, rng, plan=plan)
        u_hat, u_norm = l2_normalize(ab.user_rows)
        v_hat, v_norm = l2_normalize(ab.item_rows)
        if cfg.mixup.separate_terms and ab.n_rounds:
            value = 0.0
            gu_hat = np.empty_like(u_hat)
            gv_hat = np.empty_like(v_hat)
            for blk in ab.blocks():
                out = sgcl_loss(u_hat[blk], v_hat[blk], loss.temperature, loss.exclude_self)
                value += out.value
                gu_hat[blk], gv_hat[blk] = out.grad_users, out.grad_items
        else:
            out = sgcl_loss(u_hat, v_hat, loss.temperature, loss.exclude_self)
            value, gu_hat, gv_hat = out.value, out.grad_users, out.grad_items
        gu_rows = normalize_backward(gu_hat, u_hat, u_norm)
        gv_rows = normalize_backward(gv_hat, v_hat, v_norm)
        gu, gv, gu_layers, gv_layers = ab.backward(gu_rows, gv_rows)
        nodes = np.concatenate([user_nodes, item_nodes])
        rows = np.concatenate([gu, gv])
        if gu_layers is not None:
            layer_rows = np.concatenate([gu_layers, gv_layers], axis=1)
    else:
        if batch.negatives is None:
            raise TrainingError(f"{loss.kind.value} loss needs negatives")
        neg_nodes = batch.negatives + n_users
        u, vp, vn = final[user_nodes], final[item_nodes], final[neg_nodes]
        if loss.kind == LossKind.BPR:
            out = bpr_loss(u, vp, vn)
        else:
            out = sslrec_loss(u, vp, vn, loss.temperature, loss.lam, loss.view_mode, loss.noise_eps, rng)
        value = out.value
        nodes = np.concatenate([user_nodes, item_nodes, neg_nodes])
        rows = np.concatenate([out.grad_users, out.grad_items, out.grad_negatives])

    # gradients live on the batch nodes only; sum duplicate rows per unique node
    support, inverse = np.unique(nodes, return_inverse=True)
    dtype = final.dtype
    grad_final = _scatter(len(support), d, inverse, rows.astype(dtype, copy=False))
    layer_grads = []
    for k, w in enumerate(layer_weights):
        g = dtype.type(w) * grad_final
        if layer_rows is not None:
            _scatter(len(support), d, inverse, layer_rows[k].astype(dtype, copy=False), out=g)
        layer_grads.append(g)
    return value, backward_from_rows(adj, support, layer_grads)


def objective_from_base(adj, base, layer_weights, batch, cfg: TrainConfig, plan=None, seed: int = 0):
    """Fresh forward pass from ``base`` followed by :func:`batch_loss_and_grad`.

    Randomness inside the loss (mixup coefficients, noisy views) is replayed from
    ``plan``/``seed`` so repeated calls evaluate the same function.
    """
    layers = propagate(adj, base, len(layer_weights) - 1)
    final = combine_layers(layers, layer_weights)
    return batch_loss_and_grad(adj, layers, final, layer_weights, batch, cfg, np.random.default_rng(seed), plan)


def fit(
    dataset: InteractionDataset,
    cfg: TrainConfig,
    adj: NormalizedAdjacency | None = None,
    on_epoch=None,
) -> tuple[EmbeddingState, TrainHistory]:
    """Train until ``patience`` epochs pass without a better validation NDCG@K.

    Embeddings are propagated once at the start of every epoch; batch updates in
    that epoch use the gradient at those (stale) layers. Returns the best state.
    """
    errors = cfg.validate()
    if errors:
        raise TrainingError("invalid config: " + "; ".join(errors))
    if len(dataset.valid_edges) == 0:
        raise TrainingError("validation split is empty; early stopping needs it")
    dtype = np.dtype(cfg.dtype)
    if adj is None:
        adj = build_normalized_adjacency(dataset, dtype=dtype)
    state = init_embeddings(dataset.n_nodes, cfg.embedding_dim, cfg.seed, cfg.n_layers, dtype=dtype)
    rng = np.random.default_rng([cfg.seed, 7])
    sampler = NegativeSampler(dataset) if cfg.loss.kind != LossKind.SGCL else None
    history = TrainHistory()
    best_metric = -np.inf
    best_state = state.copy()
    since_best = 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        layers = propagate(adj, state.base, cfg.n_layers)
        history.propagation_calls += 1
        final = combine_layers(layers, state.layer_weights)
        total, n_batches = 0.0, 0
        for batch in sample_batch(dataset, cfg.batch_size, rng):
            if sampler is not None:
                batch.negatives = sampler(batch.users, rng)
            value, grad = batch_loss_and_grad(adj, layers, final, state.layer_weights, batch, cfg, rng)
            if not np.isfinite(value):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            adam_step(state, grad, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            total += value
            n_batches += 1
        t1 = time.perf_counter()

        eval_final = combine_layers(propagate(adj, state.base, cfg.n_layers), state.layer_weights)
        report = evaluate(eval_final, dataset, "valid", ks=(cfg.eval_k,))
        t2 = time.perf_counter()
        rec = EpochRecord(
            epoch=epoch,
            loss=total / n_batches,
            valid_recall=report.recall[cfg.eval_k],
            valid_ndcg=report.ndcg[cfg.eval_k],
            train_seconds=t1 - t0,
            eval_seconds=t2 - t1,
        )
        history.epochs.append(rec)
        log.info(
            "epoch %d loss %.5f recall@%d %.4f ndcg@%d %.4f (%.2fs)",
            epoch, rec.loss, cfg.eval_k, rec.valid_recall, cfg.eval_k, rec.valid_ndcg, rec.train_seconds,
        )
        if on_epoch is not None:
            on_epoch(rec)

        if rec.valid_ndcg > best_metric:
            best_metric = rec.valid_ndcg
            best_state = state.copy()
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                history.stop_reason = "patience"
                break
    else:
        history.stop_reason = "max_epochs"

    history.negative_sampling_calls = sampler.calls if sampler is not None else 0
    best_state.refresh(adj)
    return best_state, history


def with_model(cfg: TrainConfig, model: str) -> TrainConfig:
    """Apply the loss/mixup settings that define a named model."""
    model = model.lower()
    if model == "bpr":
        return replace(cfg, loss=replace(cfg.loss, kind=LossKind.BPR), mixup=replace(cfg.mixup, n_mix=0))
    if model == "sslrec":
        return replace(cfg, loss=replace(cfg.loss, kind=LossKind.SSLREC), mixup=replace(cfg.mixup, n_mix=0))
    if model == "sgcl":
        return replace(cfg, loss=replace(cfg.loss, kind=LossKind.SGCL), mixup=replace(cfg.mixup, n_mix=0))
    if model == "mixsgcl":
        n_mix = cfg.mixup.n_mix or 1
        return replace(cfg, loss=replace(cfg.loss, kind=LossKind.SGCL), mixup=replace(cfg.mixup, n_mix=n_mix))
    raise ValueError(f"unknown model {model!r}; expected bpr, sslrec, sgcl or mixsgcl")


def save_checkpoint(path, state: EmbeddingState, history: TrainHistory, cfg: TrainConfig,
                    dataset: InteractionDataset, extra_config: dict | None = None) -> None:
    """Checkpoint directory: config.json, embeddings.bin (+ index), history.json, timing.json.

    Wall-clock times live in timing.json so the other files are reproducible byte for byte.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    config = {"train": cfg.to_dict(), **(extra_config or {})}
    (path / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    export_embeddings(state.final, dataset, path / "embeddings.bin")
    (path / "history.json").write_text(json.dumps(history.to_dict(timing=False), indent=2) + "\n")
    timing = [{"epoch": r.epoch, "train_seconds": r.train_seconds, "eval_seconds": r.eval_seconds}
              for r in history.epochs]
    (path / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
