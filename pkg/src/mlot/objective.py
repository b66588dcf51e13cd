"""Multi-source latent OT objective: transport costs, dual functional, gaps.

Source indices are 0-based throughout (``k in range(K)``). Potentials are
callables mapping an ``(m, d)`` tensor of barycenter-space points to ``m``
values; barycenter maps are callables ``T(z, k)`` returning an ``(n, d)``
tensor (source-agnostic maps simply ignore ``k``).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from scipy.special import logsumexp as np_logsumexp

from .autodiff import (
    TRAIN_EPS,
    Tensor,
    amin,
    as_tensor,
    concat,
    logsumexp,
    no_grad,
    norm,
    pairwise_cosine,
)
from .errors import ContractError, DegenerateInputError, DimensionError
from .oracle import COST_KINDS

Potential = Callable[[Tensor], Tensor]
BarycenterMap = Callable[[Tensor, int], Tensor]


@dataclass
class MlotConfig:
    """Transport-cost and objective hyperparameters."""

    weights: tuple = (1.0,)
    base_cost: str = "euclidean"
    gamma: float = 0.1
    tau: float = 0.07
    beta: float = 2.0
    congruence_coeff: float = 1.0
    strict: bool = False

    def __post_init__(self):
        lam = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if lam.size < 1 or np.any(lam <= 0) or abs(lam.sum() - 1.0) > 1e-12:
            raise ContractError(f"weights must be positive and sum to 1, got {self.weights}")
        if self.base_cost not in COST_KINDS:
            raise ContractError(f"unknown base cost {self.base_cost!r}")
        if self.gamma < 0 or self.tau <= 0 or self.beta <= 0 or self.congruence_coeff < 0:
            raise ContractError("gamma >= 0, tau > 0, beta > 0, congruence_coeff >= 0 required")
        self.weights = tuple(float(w) for w in lam)

    @property
    def K(self) -> int:
        return len(self.weights)


@dataclass
class SourceBatch:
    """Latent samples of one source, optionally with their barycenter images."""

    source_id: int
    latents: np.ndarray
    barycenter_latents: np.ndarray | None = None
    source_specific: np.ndarray | None = None

    def __post_init__(self):
        self.latents = np.atleast_2d(np.asarray(self.latents, dtype=np.float64))
        if self.source_id < 0:
            raise ContractError(f"source_id must be nonnegative, got {self.source_id}")
        if self.barycenter_latents is not None:
            self.barycenter_latents = np.asarray(self.barycenter_latents, dtype=np.float64).reshape(
                self.latents.shape
            )
            if self.source_specific is None:
                self.source_specific = self.latents - self.barycenter_latents
        if self.source_specific is not None and self.barycenter_latents is not None:
            resid = self.latents - self.barycenter_latents - self.source_specific
            if np.max(np.abs(resid), initial=0.0) > 1e-12:
                raise ContractError("source_specific must equal latents - barycenter_latents")

    @property
    def n(self) -> int:
        return self.latents.shape[0]


def source_specific(z, z_b) -> np.ndarray | Tensor:
    """Source-specific residual ``s = z - z_b``."""
    if z.shape != z_b.shape:
        raise DimensionError(f"shape mismatch: {z.shape} vs {z_b.shape}")
    return z - z_b


# -- cost terms ---------------------------------------------------------------------


def base_cost(z: Tensor, z_b: Tensor, kind: str = "euclidean") -> Tensor:
    """Row-wise metric cost between matched rows of ``z`` and ``z_b``."""
    z, z_b = as_tensor(z), as_tensor(z_b)
    if z.shape != z_b.shape:
        raise DimensionError(f"shape mismatch: {z.shape} vs {z_b.shape}")
    diff = z - z_b
    if diff.ndim == 1:
        diff = diff.reshape(1, -1)
    if kind == "euclidean":
        return norm(diff, axis=1)
    if kind == "squared_euclidean":
        return (diff * diff).sum(axis=1)
    raise ContractError(f"unknown base cost {kind!r}")


def contrastive_loss(anchor, positives, negatives, tau: float, strict: bool = True) -> Tensor:
    """Source-level contrastive loss of a single anchor.

    ``-log(sum_+ e^{<s,s+>/tau} / (sum_+ e^{<s,s+>/tau} + sum_- e^{<s,s->/tau}))``
    with ``<.,.>`` the cosine similarity.
    """
    anchor = as_tensor(anchor).reshape(1, -1)
    positives, negatives = as_tensor(positives), as_tensor(negatives)
    if positives.ndim == 1:
        positives = positives.reshape(1, -1)
    if negatives.ndim == 1:
        negatives = negatives.reshape(1, -1)
    if positives.shape[0] < 1 or negatives.shape[0] < 1:
        raise ContractError("contrastive loss needs at least one positive and one negative")
    pos = pairwise_cosine(anchor, positives, strict).reshape(-1) * (1.0 / tau)
    neg = pairwise_cosine(anchor, negatives, strict).reshape(-1) * (1.0 / tau)
    return logsumexp(concat([pos, neg], axis=0)) - logsumexp(pos)


def orthogonality_loss(z_b, source_specific_sets, strict: bool = True) -> Tensor:
    """Sum of absolute cosine similarities between ``z_b`` and every ``s_j``."""
    z_b = as_tensor(z_b).reshape(1, -1)
    if isinstance(source_specific_sets, (list, tuple)):
        S = concat([as_tensor(s) if as_tensor(s).ndim == 2 else as_tensor(s).reshape(1, -1)
                    for s in source_specific_sets], axis=0)
    else:
        S = as_tensor(source_specific_sets)
        if S.ndim == 1:
            S = S.reshape(1, -1)
    if strict and np.linalg.norm(z_b.data) == 0:
        raise DegenerateInputError("orthogonality loss with a zero barycenter vector")
    if strict:
        # zero residuals are orthogonal to everything; drop them
        keep = np.linalg.norm(S.data, axis=1) > 0
        if not np.any(keep):
            return Tensor(0.0)
        S = S[np.flatnonzero(keep)]
    return pairwise_cosine(z_b, S, strict).abs().sum()


def _label_masks(labels: np.ndarray):
    same = labels[:, None] == labels[None, :]
    eye = np.eye(len(labels), dtype=bool)
    return same & ~eye, ~same


def batch_contrastive(S: Tensor, labels: np.ndarray, tau: float, strict: bool = False) -> Tensor:
    """Per-anchor contrastive losses for a labelled batch of residuals.

    Positives are the other same-source rows, negatives all rows of other
    sources.
    """
    S = as_tensor(S)
    labels = np.asarray(labels)
    pos, neg = _label_masks(labels)
    if not np.all(pos.any(axis=1)):
        raise ContractError("every source needs at least two samples per batch for positives")
    if not np.all(neg.any(axis=1)):
        raise ContractError("contrastive loss needs at least two sources in the batch")
    sim = pairwise_cosine(S, S, strict) * (1.0 / tau)
    return logsumexp(sim, axis=1, mask=pos | neg) - logsumexp(sim, axis=1, mask=pos)


def batch_orthogonality(ZB: Tensor, S: Tensor, strict: bool = False) -> Tensor:
    """Per-anchor orthogonality losses: row i is ``sum_j |<zb_i, s_j>|``."""
    return pairwise_cosine(as_tensor(ZB), as_tensor(S), strict).abs().sum(axis=1)


def _per_source_mean(values: Tensor, labels: np.ndarray, K: int) -> list[Tensor]:
    out = []
    for k in range(K):
        idx = np.flatnonzero(labels == k)
        out.append(values[idx].mean() if idx.size else None)
    return out


def auxiliary_terms(Z: Tensor, ZB: Tensor, labels: np.ndarray, cfg: MlotConfig) -> tuple[list, list]:
    """Per-source anchor-averaged contrastive and orthogonality terms."""
    S = Z - ZB
    ctr = batch_contrastive(S, labels, cfg.tau, cfg.strict)
    ort = batch_orthogonality(ZB, S, cfg.strict)
    return _per_source_mean(ctr, labels, cfg.K), _per_source_mean(ort, labels, cfg.K)


def transport_cost(z, z_b, batch_context: Sequence[SourceBatch] | None, k: int, cfg: MlotConfig) -> Tensor:
    """``C_k(z, z_b) = ||z - z_b|| + gamma * (L_ctr + L_ort)`` for a single pair.

    The auxiliary terms treat ``s = z - z_b`` as the anchor; positives are
    the context residuals of source ``k``, negatives those of the other
    sources, and the orthogonality sum runs over every context residual.
    """
    z, z_b = as_tensor(z).reshape(-1), as_tensor(z_b).reshape(-1)
    cost = base_cost(z.reshape(1, -1), z_b.reshape(1, -1), cfg.base_cost).sum()
    if cfg.gamma == 0:
        return cost
    if not batch_context or any(b.source_specific is None for b in batch_context):
        raise ContractError("transport_cost with gamma > 0 needs batch context with residuals")
    pos = [b.source_specific for b in batch_context if b.source_id == k]
    neg = [b.source_specific for b in batch_context if b.source_id != k]
    if not pos or not neg:
        raise ContractError(f"batch context lacks positives or negatives for source {k}")
    S_all = np.concatenate([b.source_specific for b in batch_context], axis=0)
    ctr = contrastive_loss(z - z_b, np.concatenate(pos), np.concatenate(neg), cfg.tau, cfg.strict)
    ort = orthogonality_loss(z_b, S_all, cfg.strict)
    return cost + cfg.gamma * (ctr + ort)


# -- functionals ----------------------------------------------------------------------


def _stack(batches: Sequence[SourceBatch]) -> tuple[np.ndarray, np.ndarray]:
    if not batches or any(b.n == 0 for b in batches):
        raise ContractError("empty batch")
    Z = np.concatenate([b.latents for b in batches], axis=0)
    labels = np.concatenate([np.full(b.n, b.source_id) for b in batches])
    return Z, labels


def _potential_values(f: Potential, pts) -> Tensor:
    out = as_tensor(f(as_tensor(pts)))
    return out.reshape(-1)


def maximin_objective(
    potentials: Sequence[Potential],
    barycenter_map: BarycenterMap,
    batches: Sequence[SourceBatch],
    cfg: MlotConfig,
    latents: Sequence[Tensor] | None = None,
) -> Tensor:
    """Batch estimate of ``F(f, T) = sum_k lam_k E[C_k(z, T z) - f_k(T z)]``.

    ``latents`` optionally supplies the per-source latents as tensors (e.g.
    encoder outputs) so gradients can flow into them.
    """
    Zs = [as_tensor(b.latents) for b in batches] if latents is None else list(latents)
    ZBs = [barycenter_map(Zk, b.source_id) for Zk, b in zip(Zs, batches)]
    return maximin_from_mapped(potentials, Zs, ZBs, [b.source_id for b in batches], cfg)


def maximin_from_mapped(potentials, Zs, ZBs, sources, cfg: MlotConfig) -> Tensor:
    """``F`` given already-mapped latents ``ZBs[i] = T(Zs[i])`` per source."""
    total = Tensor(0.0)
    if cfg.gamma > 0:
        labels = np.concatenate([np.full(Zk.shape[0], k) for Zk, k in zip(Zs, sources)])
        ctr, ort = auxiliary_terms(concat(Zs, axis=0), concat(ZBs, axis=0), labels, cfg)
    for Zk, ZBk, k in zip(Zs, ZBs, sources):
        term = base_cost(Zk, ZBk, cfg.base_cost).mean() - _potential_values(potentials[k], ZBk).mean()
        if cfg.gamma > 0:
            term = term + cfg.gamma * (ctr[k] + ort[k])
        total = total + cfg.weights[k] * term
    return total


def _aux_cost_matrix(z: np.ndarray, k: int, cands: np.ndarray, S: np.ndarray, labels: np.ndarray,
                     exclude: int | None, cfg: MlotConfig) -> np.ndarray:
    """Auxiliary cost of moving ``z`` to each candidate, with fixed context ``S``."""

    def unit(a):
        n = np.sqrt((a * a).sum(axis=-1, keepdims=True) + (0.0 if cfg.strict else TRAIN_EPS))
        return a / np.where(n > 0, n, 1.0)

    s = unit(z[None, :] - cands)
    Su = unit(S)
    sims = s @ Su.T / cfg.tau
    pos = labels == k
    neg = ~pos
    if exclude is not None:
        pos = pos.copy()
        pos[exclude] = False
    ctr = np_logsumexp(sims[:, pos | neg], axis=1) - np_logsumexp(sims[:, pos], axis=1)
    ort = np.abs(unit(cands) @ Su.T).sum(axis=1)
    return ctr + ort


def dual_functional(
    potentials: Sequence[Potential],
    batches: Sequence[SourceBatch],
    candidate_targets,
    cfg: MlotConfig,
) -> Tensor:
    """Batch estimate of ``L(f) = sum_k lam_k E[f_k^{C_k}(z)]``.

    ``candidate_targets`` is either a finite ``(m, d)`` candidate set, over
    which the inner infimum is brute-forced, or a map ``T(z, k)`` whose
    value is substituted for the minimizer. Differentiable w.r.t. the
    potentials (the gradient flows through the minimizing candidate).
    """
    if callable(candidate_targets):
        return maximin_objective(potentials, candidate_targets, batches, cfg)
    cands = np.atleast_2d(np.asarray(candidate_targets, dtype=np.float64))
    if cands.shape[0] == 0:
        raise ContractError("empty candidate set")
    Z, labels = _stack(batches)
    if cands.shape[1] != Z.shape[1]:
        cands = cands.reshape(-1, Z.shape[1])
    if cfg.gamma > 0:
        if any(b.source_specific is None for b in batches):
            raise ContractError("gamma > 0 needs residuals in the batches for the auxiliary terms")
        S = np.concatenate([b.source_specific for b in batches], axis=0)
    total = Tensor(0.0)
    offset = 0
    for b in batches:
        k = b.source_id
        diff = b.latents[:, None, :] - cands[None, :, :]
        C = (diff**2).sum(axis=-1)
        if cfg.base_cost == "euclidean":
            C = np.sqrt(C)
        if cfg.gamma > 0:
            aux = np.stack(
                [_aux_cost_matrix(z, k, cands, S, labels, offset + i, cfg) for i, z in enumerate(b.latents)]
            )
            C = C + cfg.gamma * aux
        fvals = _potential_values(potentials[k], cands).reshape(1, -1)
        inner = amin(Tensor(C) - fvals, axis=1)
        total = total + cfg.weights[k] * inner.mean()
        offset += b.n
    return total


def congruence_penalty(potentials: Sequence[Potential], z_b_batch, weights) -> Tensor:
    """Batch mean of ``(sum_k lam_k f_k(z_b))^2``."""
    z_b = as_tensor(z_b_batch)
    if z_b.shape[0] == 0:
        raise ContractError("empty batch")
    acc = None
    for lam, f in zip(weights, potentials):
        term = _potential_values(f, z_b) * float(lam)
        acc = term if acc is None else acc + term
    return (acc * acc).mean()


def congruence_residual(potentials: Sequence[Potential], z_b_batch, weights) -> float:
    """``mean|sum_k lam_k f_k| / mean|f|`` over a probe batch."""
    with no_grad():
        vals = np.stack([_potential_values(f, z_b_batch).data for f in potentials])
    lam = np.asarray(weights)[:, None]
    denom = np.mean(np.abs(vals))
    return float(np.mean(np.abs((lam * vals).sum(axis=0))) / max(denom, 1e-300))


# -- duality gaps -------------------------------------------------------------------------


def inner_inf_grid(points: np.ndarray, n_per_axis: int = 201, pad: float = 0.2) -> np.ndarray:
    """Candidate set for brute-force inner infima.

    Up to two dimensions: a regular grid over the bounding box of ``points``
    padded by ``pad`` of its extent per side. Higher dimensions: the points
    themselves (the resulting infimum is then only an upper estimate of the
    true one, so gaps are lower estimates).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = pts.shape[1]
    if d > 2:
        return np.unique(pts, axis=0)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    axes = [np.linspace(lo[i] - pad * span[i], hi[i] + pad * span[i], n_per_axis) for i in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def duality_gap_e1(potentials, barycenter_map, batches, inner_inf_grid, cfg: MlotConfig) -> float:
    """Inner-infimum gap ``F(f, T) - L(f)`` with the infimum brute-forced on a grid."""
    with no_grad():
        F = maximin_objective(potentials, barycenter_map, batches, cfg).item()
        L = dual_functional(potentials, batches, inner_inf_grid, cfg).item()
    return F - L


def duality_gap_e2(potentials, batches, l_star: float, inner_inf_grid, cfg: MlotConfig) -> float:
    """Outer-supremum gap ``L* - L(f)``."""
    with no_grad():
        L = dual_functional(potentials, batches, inner_inf_grid, cfg).item()
    return float(l_star) - L


@dataclass
class DualityGapReport:
    e1: float
    e2: float
    l_star: float
    beta: float
    measured_w2_sum: float | None = None
    passed: bool | None = None
    margin: float | None = None

    @property
    def bound(self) -> float:
        return (2.0 / self.beta) * (self.e1 + self.e2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bound"] = self.bound
        d["pass"] = d.pop("passed")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def theorem2_check(report: DualityGapReport, slack: float = 0.05, atol: float = 1e-9) -> tuple[bool, float]:
    """Check ``sum_k lam_k W2^2(T#P_k, T*#P_k) <= (2/beta)(E1 + E2)``.

    Passes when the measured sum is within ``(1 + slack) * bound + atol``;
    the margin is that threshold minus the measured sum.
    """
    if report.measured_w2_sum is None or not math.isfinite(report.measured_w2_sum):
        raise ContractError("theorem2_check needs a measured W2 sum from a known reference map")
    margin = (1.0 + slack) * report.bound + atol - report.measured_w2_sum
    report.passed = bool(margin >= 0)
    report.margin = float(margin)
    return report.passed, report.margin
