"""Losses with analytic gradients: BPR, InfoNCE, joint SSLRec and supervised graph contrastive."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax


class LossKind(str, Enum):
    BPR = "bpr"
    SSLREC = "sslrec"
    SGCL = "sgcl"


class ViewMode(str, Enum):
    IDENTITY = "identity"
    NOISE = "noise"


@dataclass(frozen=True)
class LossConfig:
    kind: LossKind = LossKind.SGCL
    temperature: float = 0.2
    lam: float = 0.1
    view_mode: ViewMode = ViewMode.IDENTITY
    noise_eps: float = 0.1
    exclude_self: bool = False  # drop the anchor pair's own terms from the SGCL denominator

    def validate(self) -> list[str]:
        errors = []
        if not self.temperature > 0:
            errors.append(f"temperature must be > 0, got {self.temperature}")
        if not self.lam >= 0:
            errors.append(f"lambda must be >= 0, got {self.lam}")
        if not self.noise_eps >= 0:
            errors.append(f"noise_eps must be >= 0, got {self.noise_eps}")
        return errors


@dataclass
class LossOutput:
    """Loss value and gradients w.r.t. each input row block.

    For InfoNCE ``grad_users``/``grad_items`` are the gradients of the first and
    second view. ``grad_negatives`` is only set by losses that take negatives.
    """

    value: float
    grad_users: np.ndarray
    grad_items: np.ndarray
    grad_negatives: np.ndarray | None = None


def l2_normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms = np.maximum(norms, 1e-12)
    return x / norms, norms


def normalize_backward(grad: np.ndarray, x_hat: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. x/|x| back to x."""
    radial = np.sum(grad * x_hat, axis=1, keepdims=True)
    return (grad - radial * x_hat) / norms


def bpr_loss(u: np.ndarray, v_pos: np.ndarray, v_neg: np.ndarray) -> LossOutput:
    """Mean of -log sigmoid(u.v_pos - u.v_neg)."""
    if not (len(u) == len(v_pos) == len(v_neg)):
        raise ValueError("bpr_loss inputs must have equal row counts")
    diff = v_pos - v_neg
    margin = np.sum(u * diff, axis=1)
    n = len(u)
    value = float(np.logaddexp(0.0, -margin).sum() / n)
    # d/dm softplus(-m) = -sigmoid(-m)
    g = -np.exp(-np.logaddexp(0.0, margin))[:, None] / n
    return LossOutput(value, g * diff, g * u, -g * u)


def infonce_gcl_loss(
    view1: np.ndarray, view2: np.ndarray, temperature: float, reduction: str = "sum"
) -> LossOutput:
    """One side of the in-batch InfoNCE: row t of view1 must pick row t of view2."""
    if len(view1) == 0:
        raise ValueError("InfoNCE needs a non-empty batch")
    if view1.shape != view2.shape:
        raise ValueError(f"view shapes differ: {view1.shape} vs {view2.shape}")
    n = len(view1)
    logits = view1 @ view2.T / temperature
    value = -float(np.trace(log_softmax(logits, axis=1)))
    w = softmax(logits, axis=1)
    w[np.diag_indices(n)] -= 1.0
    grad1 = w @ view2 / temperature
    grad2 = w.T @ view1 / temperature
    if reduction == "mean":
        value, grad1, grad2 = value / n, grad1 / n, grad2 / n
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return LossOutput(value, grad1, grad2)


def _noisy_view(x_hat: np.ndarray, eps: float, rng: np.random.Generator):
    noise = rng.random(x_hat.shape)
    noise /= np.linalg.norm(noise, axis=1, keepdims=True)
    perturbed = x_hat + eps * np.sign(x_hat) * noise
    return l2_normalize(perturbed)


def sslrec_loss(
    u: np.ndarray,
    v_pos: np.ndarray,
    v_neg: np.ndarray,
    temperature: float,
    lam: float,
    view_mode: ViewMode = ViewMode.IDENTITY,
    noise_eps: float = 0.1,
    rng: np.random.Generator | None = None,
) -> LossOutput:
    """BPR plus lam times user-side and item-side InfoNCE, all as per-row means.

    BPR sees the raw rows; the contrastive views are built from the L2-normalized
    rows (identical views, or two independently perturbed ones).
    """
    rec = bpr_loss(u, v_pos, v_neg)
    if lam == 0:
        return rec
    grad_u, grad_pos = rec.grad_users.copy(), rec.grad_items.copy()
    value = rec.value
    for x, grad in ((u, grad_u), (v_pos, grad_pos)):
        x_hat, norms = l2_normalize(x)
        if view_mode == ViewMode.IDENTITY:
            out = infonce_gcl_loss(x_hat, x_hat, temperature, reduction="mean")
            g_hat = out.grad_users + out.grad_items
        else:
            if rng is None:
                raise ValueError("NOISE views need an rng")
            a, a_norm = _noisy_view(x_hat, noise_eps, rng)
            b, b_norm = _noisy_view(x_hat, noise_eps, rng)
            out = infonce_gcl_loss(a, b, temperature, reduction="mean")
            # perturbation is additive and constant, so d(a)/d(x_hat) is the normalize Jacobian
            g_hat = normalize_backward(out.grad_users, a, a_norm) + normalize_backward(out.grad_items, b, b_norm)
        value += lam * out.value
        grad += lam * normalize_backward(g_hat, x_hat, norms)
    return LossOutput(value, grad_u, grad_pos, rec.grad_negatives)


def sslrec_identity_lower_bound(
    u: np.ndarray, v_pos: np.ndarray, v_neg: np.ndarray, temperature: float, lam: float
) -> float:
    """Per-row mean of the SSLRec bound reached when every u.v_pos equals 1.

    log(e + e^{u.v-}) + lam*log sum_u' e^{u.u'/tau} + lam*log sum_v' e^{v.v'/tau} - (tau + 2 lam)/tau
    on normalized rows with identity views.
    """
    u_hat, _ = l2_normalize(u)
    v_hat, _ = l2_normalize(v_pos)
    n_hat, _ = l2_normalize(v_neg)
    neg = np.sum(u_hat * n_hat, axis=1)
    rows = (
        np.logaddexp(1.0, neg)
        + lam * logsumexp(u_hat @ u_hat.T / temperature, axis=1)
        + lam * logsumexp(v_hat @ v_hat.T / temperature, axis=1)
        - (temperature + 2 * lam) / temperature
    )
    return float(rows.mean())


_BLOCK_ELEMENTS = 1 << 18


def sgcl_loss(
    u: np.ndarray, v: np.ndarray, temperature: float, exclude_self: bool = False, block_rows: int | None = None
) -> LossOutput:
    """Supervised graph contrastive loss over row-aligned positive pairs, averaged over pairs.

    Pair t scores exp(u_t.v_t/tau) against sum_t' exp(u_t.u_t'/tau) + exp(v_t.v_t'/tau).
    Anchor rows are processed in blocks so the similarity tiles stay cache-sized.
    """
    if len(u) == 0:
        raise ValueError("SGCL needs a non-empty batch")
    if u.shape != v.shape:
        raise ValueError(f"user/item row blocks differ: {u.shape} vs {v.shape}")
    n = len(u)
    inv_t = 1.0 / temperature
    if block_rows is None:
        block_rows = max(16, _BLOCK_ELEMENTS // n)
    ut = np.ascontiguousarray(u.T)
    vt = np.ascontiguousarray(v.T)
    grad_u = np.zeros_like(u)
    grad_v = np.zeros_like(v)
    log_denom = np.empty(n, dtype=np.result_type(u, np.float32))

    for start in range(0, n, block_rows):
        rows = slice(start, min(start + block_rows, n))
        ub, vb = u[rows], v[rows]
        eu = ub @ ut
        eu *= inv_t
        ev = vb @ vt
        ev *= inv_t
        if exclude_self:
            diag = np.arange(rows.stop - rows.start)
            eu[diag, diag + start] = -np.inf
            ev[diag, diag + start] = -np.inf
        shift = np.maximum(eu.max(axis=1), ev.max(axis=1))[:, None]
        eu -= shift
        ev -= shift
        np.exp(eu, out=eu)
        np.exp(ev, out=ev)
        denom = eu.sum(axis=1) + ev.sum(axis=1)
        log_denom[rows] = np.log(denom) + shift[:, 0]
        # softmax weights over the 2B denominator terms, split into user and item tiles
        eu /= denom[:, None]
        ev /= denom[:, None]
        grad_u[rows] += eu @ u
        grad_u += eu.T @ ub
        grad_v[rows] += ev @ v
        grad_v += ev.T @ vb

    pos = np.einsum("ij,ij->i", u, v) * inv_t
    value = float(np.sum(log_denom - pos) / n)
    scale = inv_t / n
    grad_u -= v
    grad_v -= u
    grad_u *= scale
    grad_v *= scale
    return LossOutput(value, grad_u, grad_v)


def sgcl_pair_lower_bound(batch_size: int, temperature: float) -> float:
    """Smallest per-pair SGCL value possible on unit-norm rows: log(2B) - 2/tau."""
    return float(np.log(2 * batch_size) - 2.0 / temperature)


def sgcl_aligned_bound(u: np.ndarray, v: np.ndarray, temperature: float) -> float:
    """Mean over pairs of log(sum_t' e^{u.u'/tau} + e^{v.v'/tau}) - 1/tau, attained when u.v = 1."""
    both = np.concatenate([u @ u.T, v @ v.T], axis=1) / temperature
    return float(np.mean(logsumexp(both, axis=1)) - 1.0 / temperature)
