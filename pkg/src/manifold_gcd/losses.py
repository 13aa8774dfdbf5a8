"""Training objectives: GCD contrastive losses, SimGCD parametric losses,
CMS mean-shift, and the token manifold capacity (nuclear-norm) term."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import spectral

BASES = ("GCD", "SIMGCD", "CMS")
PROB_EPS = 1e-12


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    tau: float = 0.1
    lambda_bal: float = 0.35
    lambda_mtmc: float = 0.1
    lambda_e: float = 1.0
    k_neighbors: int = 4
    base: str = "GCD"
    # literal reading of the self-supervised denominator (sum over n != i)
    denominator_excludes_positive: bool = False
    # add +sum(sigma) as the published code snippet does, instead of -sum(sigma)
    mtmc_code_sign: bool = False
    # sum only the singular values inside the 99%-energy rank
    mtmc_energy_truncation: bool = False
    # divide the nuclear norm by the unlabeled batch size
    mtmc_batch_rescale: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise LossError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.lambda_bal <= 1.0:
            raise LossError(f"lambda_bal must lie in [0, 1], got {self.lambda_bal}")
        if self.lambda_mtmc < 0 or self.lambda_e < 0:
            raise LossError("lambda_mtmc and lambda_e must be non-negative")
        if self.k_neighbors < 1:
            raise LossError("k_neighbors must be at least 1")
        if self.base not in BASES:
            raise LossError(f"base must be one of {BASES}, got {self.base!r}")


@dataclass
class PrototypeBank:
    """Learnable class prototypes; the first ``n_known`` rows are the known classes."""

    c: np.ndarray
    n_known: int
    n_novel: int = field(default=0)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.c.shape[0] != self.n_known + self.n_novel:
            raise LossError(f"bank has {self.c.shape[0]} rows, expected {self.n_known + self.n_novel}")
        self.renormalize()

    @classmethod
    def random(cls, n_known: int, n_novel: int, dim: int, rng: np.random.Generator) -> "PrototypeBank":
        return cls(rng.standard_normal((n_known + n_novel, dim)), n_known, n_novel)

    def renormalize(self) -> None:
        self.c = self.c / np.linalg.norm(self.c, axis=1, keepdims=True)


def _identity_mask(n):
    return np.eye(n, dtype=bool)


def selfsup_contrastive(z, zp, tau: float, exclude_positive: bool = False) -> ad.Node:
    """InfoNCE between two views: anchor ``z[i]``, positive ``zp[i]``,
    negatives the other rows of ``zp``."""
    b = z.shape[0]
    if b < 2:
        raise LossError("self-supervised contrastive loss needs at least two samples")
    logits = ad.scale(ad.matmul(z, ad.transpose(zp)), 1.0 / tau)
    positive = ad.row_sum(ad.mul(logits, _identity_mask(b).astype(float)))
    mask = ~_identity_mask(b) if exclude_positive else None
    return ad.mean(ad.sub(ad.logsumexp_rows(logits, mask), positive))


def has_labeled_pairs(labels) -> bool:
    labels = np.asarray(labels)
    _, counts = np.unique(labels, return_counts=True)
    return bool(np.any(counts >= 2))


def sup_contrastive(z, zp, labels, tau: float) -> ad.Node:
    """Supervised contrastive loss over labeled rows.  Positives for anchor
    i are the other samples sharing its label; the normaliser runs over
    n != i.  Anchors without a positive are skipped."""
    labels = np.asarray(labels)
    b = z.shape[0]
    if labels.shape != (b,):
        raise LossError(f"labels must have length {b}")
    if np.any(labels < 0):
        raise LossError("sup_contrastive needs labeled rows only")
    pos = (labels[:, None] == labels[None, :]) & ~_identity_mask(b)
    counts = pos.sum(axis=1)
    anchors = counts > 0
    if not anchors.any():
        raise LossError("no labeled positive pairs in batch")
    logits = ad.scale(ad.matmul(z, ad.transpose(zp)), 1.0 / tau)
    log_prob = ad.log_softmax_rows(logits, ~_identity_mask(b))
    weights = np.where(pos, 1.0 / np.maximum(counts, 1)[:, None], 0.0) / anchors.sum()
    return ad.scale(ad.sum(ad.mul(log_prob, weights)), -1.0)


def gcd_loss(z, zp, labels, mask, cfg: LossConfig) -> ad.Node:
    """``(1 - lambda_bal) * L_u(all rows) + lambda_bal * L_l(labeled rows)``."""
    mask = np.asarray(mask, dtype=bool)
    terms = []
    if cfg.lambda_bal < 1.0:
        lu = selfsup_contrastive(z, zp, cfg.tau, cfg.denominator_excludes_positive)
        terms.append(ad.scale(lu, 1.0 - cfg.lambda_bal))
    if cfg.lambda_bal > 0.0:
        idx = np.flatnonzero(mask)
        ll = sup_contrastive(ad.row_select(z, idx), ad.row_select(zp, idx),
                             np.asarray(labels)[idx], cfg.tau)
        terms.append(ad.scale(ll, cfg.lambda_bal))
    return terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])


def mtmc_loss(z_unlabeled, cfg: LossConfig | None = None) -> ad.Node:
    """Negative nuclear norm of the unlabeled class-token embeddings.

    Minimising it spreads the batch over more directions.  With fewer
    than two rows the term is skipped (returned as a constant 0).
    """
    cfg = cfg or LossConfig()
    tape = ad._tape_of(z_unlabeled)
    n = z_unlabeled.shape[0]
    if n < 2:
        warnings.warn(f"mtmc_loss skipped: {n} unlabeled row(s) in batch", stacklevel=2)
        return tape.constant(np.zeros((1, 1)))
    rank = None
    if cfg.mtmc_energy_truncation:
        s = np.linalg.svd(z_unlabeled.value, compute_uv=False)
        rank = spectral.effective_rank_99(s * s)
    norm = ad.nuclear_norm(z_unlabeled, rank)
    factor = 1.0 if cfg.mtmc_code_sign else -1.0
    if cfg.mtmc_batch_rescale:
        factor /= n
    return ad.scale(norm, factor)


def _probabilities(h, protos, tau):
    return ad.row_softmax(ad.scale(ad.matmul(ad.l2_normalize_rows(h), ad.transpose(protos)), 1.0 / tau))


def simgcd_losses(h, hp, labels, mask, protos, cfg: LossConfig, n_known: int | None = None) -> ad.Node:
    """Prototype-classifier objective.

    ``h`` is the student view, ``hp`` the teacher view (sharpened at
    ``tau / 2``, no gradient).  Returns labeled cross-entropy plus
    self-distillation minus ``lambda_e`` times the entropy of the mean
    prediction.  ``protos`` is a node holding the bank rows.
    """
    mask = np.asarray(mask, dtype=bool)
    labels = np.asarray(labels)
    k = protos.shape[0]
    n_known = k if n_known is None else n_known
    lab = labels[mask]
    if lab.size and (lab.min() < 0 or lab.max() >= n_known):
        raise LossError(f"labels must lie in [0, {n_known}) for the known prototypes")
    tape = ad._tape_of(h)
    logits = ad.scale(ad.matmul(ad.l2_normalize_rows(h), ad.transpose(protos)), 1.0 / cfg.tau)
    log_p = ad.log_softmax_rows(logits)
    p = ad.exp(log_p)
    teacher = ad.stop_gradient(_probabilities(hp, protos, cfg.tau / 2.0))
    b = h.shape[0]

    distill = ad.scale(ad.sum(ad.mul(log_p, teacher.value)), -1.0 / b)
    total = distill
    if mask.any():
        onehot = np.zeros((b, k))
        onehot[np.flatnonzero(mask), lab] = 1.0
        ce = ad.scale(ad.sum(ad.mul(log_p, onehot)), -1.0 / mask.sum())
        total = ad.add(total, ce)
    if cfg.lambda_e > 0:
        mean_p = ad.scale(ad.add(ad.col_mean(p), tape.constant(teacher.value.mean(axis=0, keepdims=True))), 0.5)
        ent = ad.scale(ad.sum(ad.mul(mean_p, ad.log(ad.add(mean_p, PROB_EPS)))), -1.0)
        total = ad.sub(total, ad.scale(ent, cfg.lambda_e))
    return total


def cms_mean_shift(z_all, k: int) -> np.ndarray:
    """Replace each row with the normalised flat-kernel mean of its ``k``
    most similar rows (itself included)."""
    z = np.asarray(z_all, dtype=np.float64)
    if k < 1:
        raise LossError("k must be at least 1")
    n = z.shape[0]
    if k > n:
        raise LossError(f"k={k} exceeds the {n} available rows")
    if k == 1:
        return z.copy()
    sim = z @ z.T
    np.fill_diagonal(sim, np.inf)  # self always belongs to its own neighbourhood
    nbrs = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    shifted = z[nbrs].sum(axis=1)
    norms = np.linalg.norm(shifted, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise LossError("mean-shift produced a zero vector")
    return shifted / norms


def cms_loss(z, shifted, labels, mask, cfg: LossConfig) -> ad.Node:
    """GCD contrastive loss with the mean-shifted embedding as the second view."""
    tape = ad._tape_of(z)
    return gcd_loss(z, tape.constant(np.asarray(shifted)), labels, mask, cfg)
