"""Classification, multi-proxy contrastive and invariant gradient alignment losses.

Proxies are stored as a ``(C, K, h)`` tensor, one ``K x h`` matrix per class.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    lambda_intra: float = 0.1
    lambda_inter: float = 0.1
    tau: float = 0.1
    margin: float = 1.0

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "lambda_intra", "lambda_inter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def cls_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of ``softplus(z) - y z``."""
    if logits.numel() == 0:
        raise ValueError("empty batch")
    if logits.shape != labels.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(labels.shape)}")
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def _assignment_entropy(X: torch.Tensor, P: torch.Tensor, tau: float) -> torch.Tensor:
    log_p = torch.log_softmax(X @ P.T / tau, dim=1)
    return -(log_p.exp() * log_p).sum(dim=1).mean()


def proxy_alignment_loss(
    embeddings: torch.Tensor, labels: torch.Tensor, proxies: torch.Tensor, tau: float
) -> torch.Tensor:
    """Mean soft-assignment entropy of each sample over its own class's proxies.

    Averaged over the classes that actually occur in the batch.
    """
    terms = []
    for c in range(proxies.shape[0]):
        mask = labels == c
        if bool(mask.any()):
            terms.append(_assignment_entropy(embeddings[mask], proxies[c], tau))
    if not terms:
        raise ValueError("no class present in the batch")
    return torch.stack(terms).mean()


def intra_diversity_loss(proxies: torch.Tensor) -> torch.Tensor:
    """Negative mean pairwise distance between proxies of the same class."""
    C, K, _ = proxies.shape
    if K < 2:
        return proxies.sum() * 0.0
    i, j = torch.triu_indices(K, K, offset=1)
    dist = torch.linalg.vector_norm(proxies[:, i] - proxies[:, j], dim=-1)
    return -dist.mean(dim=1).mean()


def inter_separation_loss(proxies: torch.Tensor, margin: float) -> torch.Tensor:
    """Hinge ``max(0, m - ||center_a - center_b||)`` averaged over ordered class pairs."""
    C = proxies.shape[0]
    if C < 2:
        raise ValueError("inter-class separation needs at least two classes")
    centers = proxies.mean(dim=1)
    terms = [
        F.relu(margin - torch.linalg.vector_norm(centers[a] - centers[b]))
        for a, b in itertools.permutations(range(C), 2)
    ]
    return torch.stack(terms).mean()


@dataclass
class MPCTerms:
    pal: torch.Tensor
    intra: torch.Tensor
    inter: torch.Tensor
    total: torch.Tensor


def mpc_loss(
    embeddings: torch.Tensor, labels: torch.Tensor, proxies: torch.Tensor, weights: LossWeights
) -> MPCTerms:
    pal = proxy_alignment_loss(embeddings, labels, proxies, weights.tau)
    intra = intra_diversity_loss(proxies)
    inter = inter_separation_loss(proxies, weights.margin)
    total = pal + weights.lambda_intra * intra + weights.lambda_inter * inter
    return MPCTerms(pal, intra, inter, total)


def dummy_scale_gradient(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """``d/ds mean BCE(s * z, y)`` at ``s = 1``, i.e. ``mean((sigmoid(z) - y) * z)``."""
    if logits.numel() == 0:
        raise ValueError("empty environment batch")
    y = labels.to(logits.dtype)
    return ((torch.sigmoid(logits) - y) * logits).mean()


def iga_penalty_from_logits(
    logits_by_env: Sequence[torch.Tensor], labels_by_env: Sequence[torch.Tensor]
) -> torch.Tensor:
    """Mean over environments of the squared dummy-scale gradient.

    Differentiating the returned tensor with autograd gives
    ``mean_e 2 g_e dg_e/dtheta``, the gradient of the penalty.
    """
    if len(logits_by_env) == 0:
        raise ValueError("no environments")
    g = torch.stack([dummy_scale_gradient(z, y) for z, y in zip(logits_by_env, labels_by_env)])
    return (g ** 2).mean()


def iga_penalty(model, batches: Sequence[tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    """Penalty for ``batches = [(X_e, y_e), ...]`` evaluated through ``model``."""
    logits = [model.logit(X) for X, _ in batches]
    return iga_penalty_from_logits(logits, [y for _, y in batches])
