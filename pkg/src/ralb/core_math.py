"""Similarity, logit and loss math over joint embeddings.

Everything here is a pure function of float32 tensors and differentiable
with torch autograd. Functions taking ``logits`` accept either a single
vector ``(K,)`` with an ``int`` label, or a batch ``(B, K)`` with a label
vector ``(B,)``; batched calls return one value per sample.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

TAU_EVAL = 0.01
TAU_MIN, TAU_MAX = 0.01, 100.0
DTYPE = torch.float32


def _t(x) -> torch.Tensor:
    # float64 tensors pass through untouched: finite-difference oracles run in double
    if isinstance(x, torch.Tensor):
        return x if x.is_floating_point() else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


def clamp_log_tau(log_tau: torch.Tensor) -> None:
    """In-place clamp so that exp(log_tau) stays in [TAU_MIN, TAU_MAX]."""
    with torch.no_grad():
        log_tau.clamp_(math.log(TAU_MIN), math.log(TAU_MAX))


def normalize(v, eps: float = 0.0) -> torch.Tensor:
    v = _t(v)
    n = v.norm(dim=-1, keepdim=True)
    if eps == 0.0 and bool((n == 0).any()):
        raise ValueError("cannot normalize a zero-norm vector")
    return v / n.clamp_min(eps) if eps else v / n


def cosine_similarity(a, b) -> torch.Tensor:
    a, b = _t(a), _t(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    # a.b and b.a sum identical products in the same order -> exact symmetry
    return (a * b).sum(-1) / (na * nb)


def cosine_matrix(a, b) -> torch.Tensor:
    """``(N, M)`` matrix of cosines between rows of ``a`` and rows of ``b``."""
    return normalize(a) @ normalize(b).T


def _check_pairs(image_embs, text_embs):
    image_embs, text_embs = _t(image_embs), _t(text_embs)
    if image_embs.ndim != 2 or text_embs.ndim != 2:
        raise ValueError("expected 2-D (N, d) embedding batches")
    if image_embs.shape[0] != text_embs.shape[0]:
        raise ValueError(f"batch size mismatch: {image_embs.shape[0]} images vs {text_embs.shape[0]} texts")
    if image_embs.shape[0] == 0:
        raise ValueError("empty batch")
    return image_embs, text_embs


def _reduce(per_sample: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return per_sample.sum()
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "none":
        return per_sample
    raise ValueError(f"unknown reduction {reduction!r}")


def info_nce_from_cosines(cos: torch.Tensor, tau, reduction: str = "sum") -> torch.Tensor:
    """Row-wise InfoNCE with positives on the diagonal."""
    tau = _t(tau)
    if bool((tau <= 0).any()):
        raise ValueError("temperature must be positive")
    logp = F.log_softmax(cos / tau, dim=1)
    return _reduce(-logp.diagonal(), reduction)


def info_nce_image(image_embs, text_embs, tau, reduction: str = "sum") -> torch.Tensor:
    """Image-to-text InfoNCE; i-th image is paired with i-th text. Batch sum by default."""
    image_embs, text_embs = _check_pairs(image_embs, text_embs)
    return info_nce_from_cosines(cosine_matrix(image_embs, text_embs), tau, reduction)


def info_nce_text(image_embs, text_embs, tau, reduction: str = "sum") -> torch.Tensor:
    image_embs, text_embs = _check_pairs(image_embs, text_embs)
    return info_nce_from_cosines(cosine_matrix(text_embs, image_embs), tau, reduction)


def clip_loss(image_embs, text_embs, tau, reduction: str = "sum") -> torch.Tensor:
    return 0.5 * (
        info_nce_image(image_embs, text_embs, tau, reduction)
        + info_nce_text(image_embs, text_embs, tau, reduction)
    )


def zero_shot_logits(image_emb, templates, tau_eval: float = TAU_EVAL) -> torch.Tensor:
    """Cosines to each class template divided by ``tau_eval``."""
    templates = _t(templates)
    if templates.ndim != 2 or templates.shape[0] == 0:
        raise ValueError("need a non-empty (K, d) template matrix")
    image_emb = _t(image_emb)
    single = image_emb.ndim == 1
    cos = cosine_matrix(image_emb.reshape(-1, image_emb.shape[-1]), templates) / tau_eval
    return cos[0] if single else cos


def predict(logits) -> torch.Tensor:
    """Argmax; ties resolve to the lowest class index."""
    return torch.argmax(_t(logits), dim=-1)


def _check_labels(logits, y, min_k: int = 1):
    logits = _t(logits)
    single = logits.ndim == 1
    z = logits.reshape(1, -1) if single else logits
    K = z.shape[1]
    if K < min_k:
        raise ValueError(f"need at least {min_k} classes, got {K}")
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if y.shape[0] != z.shape[0]:
        raise ValueError("one label per logit row required")
    if bool(((y < 0) | (y >= K)).any()):
        raise ValueError(f"label out of range for {K} classes")
    return z, y, single


def _out(v: torch.Tensor, single: bool) -> torch.Tensor:
    return v[0] if single else v


def tecoa_ce_loss(logits, y) -> torch.Tensor:
    """Softmax cross-entropy of the true class."""
    z, y, single = _check_labels(logits, y)
    return _out(F.cross_entropy(z, y, reduction="none"), single)


def fare_distance(adv_emb_raw, orig_emb_raw) -> torch.Tensor:
    """Squared Euclidean distance between (un-normalized) embeddings."""
    a, b = _t(adv_emb_raw), _t(orig_emb_raw)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).sum(-1)


def _others_max(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    mask = F.one_hot(y, z.shape[1]).bool()
    return z.masked_fill(mask, float("-inf")).max(dim=1).values


def dlr_loss(logits, y, denom_eps: float = 0.0) -> torch.Tensor:
    """-(z_y - max_{i!=y} z_i) / (z_(1) - z_(3)) over descending-sorted logits.

    Attacks pass a tiny ``denom_eps`` so exact top-3 ties do not abort a run.
    """
    z, y, single = _check_labels(logits, y)
    if z.shape[1] < 3:
        raise NotImplementedError("DLR loss needs at least 3 classes; use the CW margin instead")
    zs = z.sort(dim=1, descending=True).values
    denom = zs[:, 0] - zs[:, 2]
    if denom_eps == 0.0 and bool((denom == 0).any()):
        raise ArithmeticError("DLR denominator is zero (top-3 logits tied)")
    denom = denom + denom_eps
    zy = z.gather(1, y[:, None])[:, 0]
    return _out(-(zy - _others_max(z, y)) / denom, single)


def cw_margin_loss(logits, y) -> torch.Tensor:
    """max_{i!=y} z_i - z_y (positive once misclassified)."""
    z, y, single = _check_labels(logits, y, min_k=2)
    zy = z.gather(1, y[:, None])[:, 0]
    return _out(_others_max(z, y) - zy, single)
