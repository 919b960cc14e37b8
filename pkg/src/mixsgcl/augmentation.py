"""Node-level (layer remix) and edge-level (pair interpolation) mixup of positive pairs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MixupConfig:
    n_mix: int = 0
    beta_high: float = 0.5
    seed: int = 0
    alpha_per_node: bool = False
    separate_terms: bool = False  # score each B-row block as its own SGCL term

    def validate(self) -> list[str]:
        errors = []
        if self.n_mix < 0:
            errors.append(f"n_mix must be >= 0, got {self.n_mix}")
        if not 0 < self.beta_high <= 0.5:
            errors.append(f"beta_high must lie in (0, 0.5], got {self.beta_high}")
        return errors


def sample_simplex_weights(n: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw U(0,1) weights and normalize them to sum to one.

    Returns shape ``(n,)``, or ``(size, n)`` when ``size`` is given.
    """
    if n < 1:
        raise ValueError(f"need at least one weight, got {n}")
    shape = (n,) if size is None else (size, n)
    w = rng.random(shape)
    total = w.sum(axis=-1, keepdims=True)
    while np.any(total == 0):
        bad = np.flatnonzero(total.reshape(-1) == 0)
        w.reshape(-1, n)[bad] = rng.random((len(bad), n))
        total = w.sum(axis=-1, keepdims=True)
    return w / total


def node_mixup(layer_embeddings, user_nodes, item_nodes, alpha) -> tuple[np.ndarray, np.ndarray]:
    """Remix each node's layer representations with weights ``alpha``.

    ``alpha`` is either one weight vector for the whole batch or one row per pair.
    """
    n_nodes = len(layer_embeddings[0])
    for idx in (user_nodes, item_nodes):
        if len(idx) and (np.min(idx) < 0 or np.max(idx) >= n_nodes):
            raise IndexError(f"node index out of range [0, {n_nodes})")
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape[-1] != len(layer_embeddings):
        raise ValueError(f"{alpha.shape[-1]} mixup weights for {len(layer_embeddings)} layers")
    return _remix(layer_embeddings, user_nodes, alpha), _remix(layer_embeddings, item_nodes, alpha)


def _remix(layer_embeddings, nodes, alpha):
    dtype = np.result_type(layer_embeddings[0].dtype, np.float32)
    out = np.zeros((len(nodes), layer_embeddings[0].shape[1]), dtype=dtype)
    for k, layer in enumerate(layer_embeddings):
        w = alpha[..., k].astype(dtype)
        out += (w[:, None] if np.ndim(w) else w) * layer[nodes]
    return out


def edge_mixup(u: np.ndarray, v: np.ndarray, beta) -> tuple[np.ndarray, np.ndarray]:
    """Slide each endpoint a fraction beta toward the other: u' = (1-b)u + bv, v' = bu + (1-b)v."""
    if u.shape != v.shape:
        raise ValueError(f"row blocks differ: {u.shape} vs {v.shape}")
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta < 0) or np.any(beta > 0.5):
        raise ValueError("beta must lie in [0, 0.5]")
    b = (beta[:, None] if beta.ndim == 1 else beta).astype(np.result_type(u.dtype, np.float32))
    return (1 - b) * u + b * v, b * u + (1 - b) * v


@dataclass
class AugmentedBatch:
    """Original pairs followed, per round, by one NMix block and one EMix block."""

    user_rows: np.ndarray
    item_rows: np.ndarray
    batch_size: int
    alphas: list[np.ndarray] = field(default_factory=list)
    betas: list[np.ndarray] = field(default_factory=list)

    @property
    def n_rounds(self) -> int:
        return len(self.alphas)

    def blocks(self):
        """Row slices of the original block and every augmented block."""
        b = self.batch_size
        return [slice(s, s + b) for s in range(0, len(self.user_rows), b)]

    def backward(self, grad_user_rows: np.ndarray, grad_item_rows: np.ndarray):
        """Map row gradients back to the combined and per-layer embeddings of the batch pairs.

        Returns ``(grad_user_final, grad_item_final, grad_user_layers, grad_item_layers)``;
        the layer gradients are ``None`` when no rounds were drawn.
        """
        b = self.batch_size
        gu = grad_user_rows[:b].copy()
        gv = grad_item_rows[:b].copy()
        if not self.alphas:
            return gu, gv, None, None
        n_layers = self.alphas[0].shape[-1]
        d = grad_user_rows.shape[1]
        gu_layers = np.zeros((n_layers, b, d))
        gv_layers = np.zeros((n_layers, b, d))
        for r, (alpha, beta) in enumerate(zip(self.alphas, self.betas)):
            nm = slice(b * (1 + 2 * r), b * (2 + 2 * r))
            em = slice(b * (2 + 2 * r), b * (3 + 2 * r))
            a = alpha if alpha.ndim == 2 else np.broadcast_to(alpha, (b, n_layers))
            gu_layers += a.T[:, :, None] * grad_user_rows[nm][None]
            gv_layers += a.T[:, :, None] * grad_item_rows[nm][None]
            bt = beta[:, None]
            gbar_u, gbar_v = grad_user_rows[em], grad_item_rows[em]
            gu += (1 - bt) * gbar_u + bt * gbar_v
            gv += bt * gbar_u + (1 - bt) * gbar_v
        return gu, gv, gu_layers, gv_layers


def draw_plan(batch_size: int, n_layers_plus_one: int, cfg: MixupConfig, rng: np.random.Generator):
    """Sample the random mixup coefficients for every round."""
    alphas, betas = [], []
    for _ in range(cfg.n_mix):
        size = batch_size if cfg.alpha_per_node else None
        alphas.append(sample_simplex_weights(n_layers_plus_one, rng, size=size))
        betas.append(rng.uniform(0.0, cfg.beta_high, size=batch_size))
    return alphas, betas


def augment_batch(
    user_nodes: np.ndarray,
    item_nodes: np.ndarray,
    layer_embeddings: list[np.ndarray],
    final: np.ndarray,
    cfg: MixupConfig,
    rng: np.random.Generator,
    plan=None,
) -> AugmentedBatch:
    """Enlarge a batch of positive pairs with ``cfg.n_mix`` rounds of NMix and EMix.

    Rows are the un-normalized combined embeddings; normalization happens after.
    ``plan`` (alphas, betas) replays fixed coefficients instead of sampling.
    """
    if len(user_nodes) == 0:
        raise ValueError("cannot augment an empty batch")
    u = final[user_nodes]
    v = final[item_nodes]
    alphas, betas = plan if plan is not None else draw_plan(len(user_nodes), len(layer_embeddings), cfg, rng)
    user_blocks, item_blocks = [u], [v]
    for alpha, beta in zip(alphas, betas):
        u_hat, v_hat = node_mixup(layer_embeddings, user_nodes, item_nodes, alpha)
        u_bar, v_bar = edge_mixup(u, v, beta)
        user_blocks += [u_hat, u_bar]
        item_blocks += [v_hat, v_bar]
    return AugmentedBatch(
        user_rows=np.concatenate(user_blocks),
        item_rows=np.concatenate(item_blocks),
        batch_size=len(user_nodes),
        alphas=list(alphas),
        betas=list(betas),
    )
