"""Training objectives: voxel cross-entropy, contrastive InfoNCE over paired
views, the time ramp of the unsupervised weight, their combination, and a
consistency-MSE baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class ContrastiveBatch:
    """Anchor/positive/negative structure over a set of views.

    `views` holds the raw sub-volumes before embedding (may be empty when a
    test supplies embeddings directly). Views listed in `student_idx` are
    embedded by the student branch, the rest by the teacher. Each entry of
    `pairs` is one (anchor, positive) index pair scored independently;
    `negatives[k]` lists the indices contrasted against pair k's anchor.
    """
    pairs: list
    negatives: list
    temperature: float = 0.1
    views: list = field(default_factory=list)
    student_idx: np.ndarray | None = None
    embeddings: Tensor | None = None

    def num_views(self):
        if self.embeddings is not None:
            return self.embeddings.shape[0]
        return len(self.views)

    def validate(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if len(self.pairs) != len(self.negatives):
            raise ValueError("pairs and negative sets must align")
        pair_set = {tuple(p) for p in self.pairs}
        for (i, j), negs in zip(self.pairs, self.negatives):
            if i == j:
                raise ValueError("anchor paired with itself")
            if (j, i) not in pair_set:
                raise ValueError(f"positive relation not symmetric for {(i, j)}")
            negs = set(int(n) for n in negs)
            if i in negs or j in negs:
                raise ValueError("anchor or its positive appears in the negatives")


def supervised_loss(logits, labels):
    """Mean per-voxel cross-entropy. logits (N,D,H,W,C); labels (N,D,H,W) ints."""
    labels = np.asarray(labels)
    c = logits.shape[-1]
    if labels.max() >= c:
        raise ValueError(f"label value {labels.max()} >= class count {c}")
    voxels = labels.size
    logp = logits.log_softmax(axis=-1)
    flat = np.arange(voxels) * c + labels.reshape(-1)
    return -logp.take(flat).mean()


def info_nce(batch):
    """Mean InfoNCE over the batch's anchor-positive pairs.

    Similarities are cosine, divided by the temperature; each pair's
    denominator holds its own positive term plus the pair's negatives.
    """
    batch.validate()
    z = batch.embeddings
    if z is None:
        raise ValueError("batch has no embeddings")
    if not batch.pairs:
        raise ValueError("batch has no anchor-positive pairs")
    if any(len(negs) == 0 for negs in batch.negatives):
        raise ValueError("empty negative set degenerates the loss")
    v = z.shape[0]
    zn = z / z.norm(axis=1, keepdims=True, eps=1e-12).clamp_min(1e-12)
    sims = (zn @ zn.T) * (1.0 / batch.temperature)

    anchors = np.array([i for i, _ in batch.pairs])
    positives = np.array([j for _, j in batch.pairs])
    mask = np.zeros((len(batch.pairs), v), dtype=sims.dtype)
    mask[np.arange(len(batch.pairs)), positives] = 1.0
    for k, negs in enumerate(batch.negatives):
        mask[k, np.asarray(negs, dtype=np.intp)] = 1.0

    row_idx = (anchors[:, None] * v + np.arange(v)[None, :]).reshape(-1)
    rows = sims.take(row_idx).reshape(len(batch.pairs), v)
    denom = (Tensor(mask) * rows.exp()).sum(axis=1).log()
    pos = sims.take(anchors * v + positives)
    return (denom - pos).mean()


@dataclass(frozen=True)
class RampUpSchedule:
    t_max: int
    peak: float = 0.1


def rampup_lambda(t, schedule):
    """peak * exp(-5 (1 - t/t_max)^2); strictly increasing, peak at t_max."""
    if not 0 <= t <= schedule.t_max:
        raise ValueError(f"epoch {t} outside [0, {schedule.t_max}]")
    frac = t / schedule.t_max
    return schedule.peak * math.exp(-5.0 * (1.0 - frac) ** 2)


def _mean_of(losses):
    if not losses:
        return None
    total = losses[0]
    for term in losses[1:]:
        total = total + term
    return total * (1.0 / len(losses))


def combined_objective(sup_losses, con_losses, lam):
    """(1/N') sum sup + lam * (1/M') sum con; an empty side contributes 0."""
    if not sup_losses:
        raise ValueError("a step needs at least one labeled sample")
    total = _mean_of(sup_losses)
    con = _mean_of(con_losses)
    if con is not None and lam != 0.0:
        total = total + con * lam
    return total


def consistency_mse(student_probs, teacher_probs):
    """Mean squared difference of per-voxel probabilities."""
    if student_probs.shape != teacher_probs.shape:
        raise ValueError("probability shapes differ")
    diff = student_probs - teacher_probs
    return (diff * diff).mean()


def softmax_probs(logits):
    return logits.log_softmax(axis=-1).exp()
