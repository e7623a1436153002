"""Training objectives: CE, top-k gradient-boosting CE, the rotation mix,
the PIRL noise-contrastive loss with its memory bank, and the three DCL terms.

Score arguments are ``N`` vectors or ``B×N`` batches; batched losses are
averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "GceConfig",
    "cross_entropy",
    "gce_loss",
    "rotation_total",
    "cosine_similarity",
    "nce_h",
    "pirl_loss",
    "pirl_total",
    "MemoryBank",
    "memory_bank_update",
    "dcl_cls_loss",
    "dcl_adv_loss",
    "dcl_loc_loss",
    "dcl_total",
]


@dataclass(frozen=True)
class GceConfig:
    k: int = 5
    warmup_epochs: int = 10


def _batched(scores, labels):
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    single = scores.ndim == 1
    if single:
        scores = T.reshape(scores, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = scores.shape[1]
    if labels.shape != (scores.shape[0],):
        raise ValueError(f"{labels.size} labels for {scores.shape[0]} score rows")
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"label out of range [0, {n})")
    onehot = np.zeros(scores.shape, dtype=bool)
    onehot[np.arange(labels.size), labels] = True
    return scores, labels, onehot


def _picked(scores: Tensor, onehot: np.ndarray) -> Tensor:
    return T.sum_(scores * onehot.astype(scores.data.dtype), axis=1)


def cross_entropy(scores, label) -> Tensor:
    """``-log_softmax(scores)[label]``, averaged over a batch."""
    s, _, onehot = _batched(scores, label)
    return T.mean(T.logsumexp(s, axis=1) - _picked(s, onehot))


def gce_selection(scores: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the label plus its ``k`` highest-scoring negatives.

    Ties go to the lower class index.
    """
    b, n = scores.shape
    keep = np.zeros((b, n), dtype=bool)
    for row in range(b):
        masked = scores[row].astype(np.float64).copy()
        masked[labels[row]] = -np.inf
        order = np.argsort(-masked, kind="stable")
        keep[row, order[:k]] = True
        keep[row, labels[row]] = True
    return keep


def gce_loss(scores, label, k: int) -> Tensor:
    """Cross entropy restricted to the true class and the top-``k`` negatives."""
    s, labels, onehot = _batched(scores, label)
    n = s.shape[1]
    if not 1 <= k <= n - 1:
        raise ValueError(f"GCE k must be in [1, {n - 1}], got {k}")
    keep = gce_selection(s.data, labels, k)
    return T.mean(T.logsumexp(s, axis=1, where=keep) - _picked(s, onehot))


def rotation_total(cls_loss, rot_loss, lam: float) -> Tensor:
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    return T.scale(cls_loss, 1 - lam) + T.scale(rot_loss, lam)


# ---------------------------------------------------------------------------
# PIRL
# ---------------------------------------------------------------------------

def cosine_similarity(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    return T.sum_(T.l2_normalize(a, -1) * T.l2_normalize(b, -1), axis=-1)


def nce_h(a, b, negatives, tau: float) -> Tensor:
    """``exp(s(a,b)/τ) / (exp(s(a,b)/τ) + Σ_n exp(s(b,n)/τ))`` for one pair."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    pos = T.scale(cosine_similarity(a, b), 1 / tau)
    negatives = np.asarray(negatives.data if isinstance(negatives, Tensor) else negatives)
    if negatives.size == 0:
        return T.exp(pos - pos)
    neg = T.scale(cosine_similarity(T.reshape(b, (1, -1)), negatives), 1 / tau)
    lse = T.logsumexp(T.concat([T.reshape(pos, (1,)), neg]), axis=0)
    return T.exp(pos - lse)


def _neg_log_normalizers(negatives: np.ndarray, tau: float) -> np.ndarray:
    """log Σ_{n'} exp(s(m_n, m_{n'})/τ) for every negative n (bank constants)."""
    unit = negatives / np.linalg.norm(negatives, axis=-1, keepdims=True)
    sims = np.matmul(unit, np.swapaxes(unit, -1, -2)) / tau
    m = sims.max(axis=-1, keepdims=True)
    return (np.log(np.exp(sims - m).sum(axis=-1, keepdims=True)) + m)[..., 0]


def pirl_loss(v_i, v_t, negatives, tau: float) -> Tensor:
    """NCE loss between an image embedding and its jigsaw embedding.

    ``-log h(v_I, v_It) - Σ_{I'} log(1 - h(v_It, m_I'))`` where every ``h``
    uses the same negative set. Accepts one pair (``E`` vectors, ``n×E``
    negatives) or a batch (``B×E``, ``B×n×E``); batches are averaged.
    The second term is evaluated as a softplus, which is algebraically
    identical and does not lose precision when ``h`` is close to 1.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    v_i = v_i if isinstance(v_i, Tensor) else Tensor(v_i)
    v_t = v_t if isinstance(v_t, Tensor) else Tensor(v_t)
    negatives = np.asarray(negatives.data if isinstance(negatives, Tensor) else negatives,
                           dtype=v_t.data.dtype)
    single = v_i.ndim == 1
    if single:
        v_i, v_t = T.reshape(v_i, (1, -1)), T.reshape(v_t, (1, -1))
        negatives = negatives.reshape(1, -1, v_t.shape[1]) if negatives.size else \
            np.zeros((1, 0, v_t.shape[1]), dtype=negatives.dtype)
    b, e = v_t.shape
    if negatives.shape[0] != b or (negatives.shape[1] and negatives.shape[2] != e):
        raise ValueError(f"negatives shape {negatives.shape} does not match embeddings {v_t.shape}")
    n_neg = negatives.shape[1]
    pos = T.scale(cosine_similarity(v_i, v_t), 1 / tau)  # B
    if n_neg == 0:
        return T.mean(pos - pos)
    unit_t = T.l2_normalize(v_t, -1)
    neg_unit = negatives / np.linalg.norm(negatives, axis=-1, keepdims=True)
    sims = T.scale(T.sum_(T.reshape(unit_t, (b, 1, e)) * neg_unit, axis=2), 1 / tau)  # B×n
    term1 = T.logsumexp(T.concat([T.reshape(pos, (b, 1)), sims], axis=1), axis=1) - pos
    log_c = _neg_log_normalizers(negatives, tau)
    term2 = T.sum_(T.softplus(sims - log_c), axis=1)
    return T.mean(term1 + term2)


def pirl_total(cls_loss, pirl) -> Tensor:
    return T.add(cls_loss, pirl)


class MemoryBank:
    """Unit-norm exponential moving averages of per-image embeddings."""

    def __init__(self, ids, dim: int, beta: float = 0.5, tau: float = 0.07, seed: int = 0):
        if not 0 <= beta <= 1:
            raise ValueError("beta must be in [0, 1]")
        self.ids = np.asarray(ids, dtype=np.int64)
        self.index = {int(i): row for row, i in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise ValueError("memory bank ids must be unique")
        rng = np.random.default_rng([seed, 7])
        reps = rng.normal(size=(len(self.ids), dim))
        self.reps = reps / np.linalg.norm(reps, axis=1, keepdims=True)
        self.beta = beta
        self.tau = tau

    def __len__(self) -> int:
        return len(self.ids)

    def get(self, sid: int) -> np.ndarray:
        return self.reps[self._row(sid)]

    def _row(self, sid: int) -> int:
        try:
            return self.index[int(sid)]
        except KeyError:
            raise KeyError(f"unknown sample id {sid}") from None

    def update(self, sid: int, rep) -> None:
        memory_bank_update(self, sid, rep)

    def sample_negatives(self, anchor_id: int, count: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``min(count, len-1)`` entries uniformly without replacement, excluding the anchor."""
        anchor = self._row(anchor_id)
        count = min(count, len(self) - 1)
        rows = rng.choice(len(self) - 1, size=count, replace=False)
        rows = rows + (rows >= anchor)
        return self.reps[rows]


def memory_bank_update(bank: MemoryBank, sid: int, rep) -> MemoryBank:
    """``m ← normalize(β·m + (1-β)·rep)`` in place."""
    row = bank._row(sid)
    rep = np.asarray(rep, dtype=np.float64)
    if bank.beta == 1:
        return bank  # entries are already unit vectors; skip the no-op renormalisation
    m = bank.beta * bank.reps[row] + (1 - bank.beta) * rep
    norm = np.linalg.norm(m)
    if norm == 0:
        raise ValueError("memory bank update cancelled to a zero vector")
    bank.reps[row] = m / norm
    return bank


# ---------------------------------------------------------------------------
# DCL
# ---------------------------------------------------------------------------

def _ce_sum(scores, labels) -> Tensor:
    s, _, onehot = _batched(scores, labels)
    return T.logsumexp(s, axis=1) - _picked(s, onehot)


def dcl_cls_loss(scores_i, scores_phi, labels) -> Tensor:
    """Batch mean of ``CE(C(I), l) + CE(C(φ(I)), l)``."""
    if scores_i.shape != scores_phi.shape:
        raise ValueError(f"branch size mismatch {scores_i.shape} vs {scores_phi.shape}")
    return T.mean(_ce_sum(scores_i, labels) + _ce_sum(scores_phi, labels))


def dcl_adv_loss(disc_i, disc_phi) -> Tensor:
    """Per-pair CE against provenance: class 0 = original, class 1 = deconstructed."""
    for d in (disc_i, disc_phi):
        if d.shape[-1] != 2:
            raise ValueError(f"discriminator must output 2 scores, got {d.shape[-1]}")
    if disc_i.shape != disc_phi.shape:
        raise ValueError("branch size mismatch")
    b = 1 if disc_i.ndim == 1 else disc_i.shape[0]
    return T.mean(_ce_sum(disc_i, np.zeros(b, dtype=np.int64)) + _ce_sum(disc_phi, np.ones(b, dtype=np.int64)))


LOC_MODES = ("mse", "l1", "bce")


def _identity_targets(k: int) -> np.ndarray:
    idx = np.arange(k)
    grid = np.stack(np.meshgrid(idx, idx, indexing="ij"), axis=-1)
    return 2.0 * grid / (k - 1) - 1.0


def dcl_loc_loss(pred_i, pred_phi, targets, mode: str = "mse") -> Tensor:
    """Location reconstruction loss averaged over the k² cells and the batch.

    ``pred_*`` are ``(B×)k×k×2`` coordinates in (-1, 1) for ``mse``/``l1``;
    for ``bce`` they are ``(B×)k×k×k²`` location logits scored with sigmoid
    binary cross entropy against one-hot cell indices. ``targets`` are the
    normalised origins of the deconstructed cells; the original image is
    compared with the identity grid.
    """
    if mode not in LOC_MODES:
        raise ValueError(f"unknown location loss mode {mode!r}")
    pred_i = pred_i if isinstance(pred_i, Tensor) else Tensor(pred_i)
    pred_phi = pred_phi if isinstance(pred_phi, Tensor) else Tensor(pred_phi)
    targets = np.asarray(targets, dtype=pred_phi.data.dtype)
    if pred_i.shape != pred_phi.shape:
        raise ValueError(f"prediction shapes differ: {pred_i.shape} vs {pred_phi.shape}")
    if targets.ndim == 3:
        targets = targets[None]
    if pred_i.ndim == 3:
        pred_i, pred_phi = T.reshape(pred_i, (1, *pred_i.shape)), T.reshape(pred_phi, (1, *pred_phi.shape))
    b, k = pred_i.shape[0], pred_i.shape[1]
    if targets.shape != (b, k, k, 2):
        raise ValueError(f"targets shape {targets.shape} does not match predictions {pred_i.shape}")
    ident = np.broadcast_to(_identity_targets(k), targets.shape).astype(targets.dtype)
    if mode == "bce":
        if pred_i.shape[-1] != k * k:
            raise ValueError("bce mode needs k² location logits per cell")
        per_cell = []
        for pred, tgt in ((pred_phi, targets), (pred_i, ident)):
            cell = np.rint((tgt + 1) * (k - 1) / 2).astype(np.int64)
            onehot = np.zeros(pred.shape, dtype=pred.data.dtype)
            np.put_along_axis(onehot, (cell[..., 0] * k + cell[..., 1])[..., None], 1.0, -1)
            per_cell.append(T.sum_(T.softplus(pred) - pred * onehot, axis=-1))
        total = per_cell[0] + per_cell[1]
    else:
        if pred_i.shape != targets.shape:
            raise ValueError(f"prediction shape {pred_i.shape} does not match targets {targets.shape}")
        dist = T.square if mode == "mse" else T.abs_
        total = T.sum_(dist(pred_phi - targets), axis=-1) + T.sum_(dist(pred_i - ident), axis=-1)
    return T.mean(total)


def dcl_total(cls, adv, loc, ablation=("cls", "adv", "loc")) -> Tensor:
    """Unweighted sum of the enabled DCL terms."""
    terms = {"cls": cls, "adv": adv, "loc": loc}
    unknown = set(ablation) - set(terms)
    if unknown or not ablation:
        raise ValueError(f"invalid DCL term selection {ablation!r}")
    active = [terms[name] for name in ("cls", "adv", "loc") if name in ablation]
    out = active[0] if isinstance(active[0], Tensor) else Tensor(active[0])
    for t in active[1:]:
        out = T.add(out, t)
    return out
