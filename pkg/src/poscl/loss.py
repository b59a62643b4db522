"""Multi-positive contrastive loss over a batch of embeddings and a pair mask.

For sample ``i`` with positive set ``P(i)``::

    L_i = -1/|P(i)| * sum_{j in P(i)} log( exp(s_ij / tau) / sum_{k != i} exp(s_ik / tau) )

and the batch loss is the plain sum of ``L_i``.  ``s`` is cosine similarity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, DomainError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


@dataclass(frozen=True, eq=False)
class LossReport:
    loss: Tensor
    per_sample: np.ndarray
    skipped_count: int

    @property
    def total(self):
        return float(self.loss.data)


def cosine_sim_matrix(Z):
    if Z.ndim != 2:
        raise DimensionError(f"embeddings must be rank 2, got {list(Z.shape)}")
    zero = np.flatnonzero(~Z.data.any(axis=1))
    if zero.size:
        raise DomainError(f"cosine similarity undefined for all-zero row {int(zero[0])}")
    # zero rows are rejected above, so normalize exactly (no epsilon under
    # the root, which would bias every similarity by about eps / (2 |z|^2))
    unit, _ = ad.l2_normalize_rows(Z, eps=0.0)
    return unit @ ad.transpose(unit)


def pcl_loss(Z, mask, cfg=LossConfig()):
    """Contrastive loss of embeddings ``Z`` (2N x d) under ``mask``.

    Samples without positives contribute 0 and are counted in
    ``skipped_count``.  The log-sum-exp in the denominator is shifted by the
    largest off-diagonal logit of each row.
    """
    n = Z.shape[0]
    if mask.size != n:
        raise DimensionError(f"mask covers {mask.size} samples, embeddings have {n} rows")
    if n < 2:
        raise DimensionError("contrastive loss needs at least two samples")
    if not np.isfinite(Z.data).all():
        raise DomainError("non-finite embeddings")

    logits = ad.scale(cosine_sim_matrix(Z), 1.0 / cfg.temperature)

    off = ~np.eye(n, dtype=bool)
    shift = np.where(off, logits.data, -np.inf).max(axis=1)
    # the diagonal is masked out below; zero it first so exp cannot overflow
    offset = np.where(off, shift[:, None], logits.data)
    shifted = logits - Tensor(offset)
    denom = ad.sum(ad.mul(ad.exp(shifted), Tensor(off.astype(np.float64))), axis=1)
    lse = ad.log(denom) + Tensor(shift)
    log_prob = logits - ad.repeat_cols(lse, n)

    pos = mask.positive.astype(np.float64)
    counts = pos.sum(axis=1)
    skipped = int(np.count_nonzero(counts == 0))
    if skipped:
        log.debug("%d of %d samples have no positives and are skipped", skipped, n)
    inv = np.divide(1.0, counts, out=np.zeros(n), where=counts > 0)
    per_sample = -ad.mul(ad.sum(ad.mul(log_prob, Tensor(pos)), axis=1), Tensor(inv))
    return LossReport(ad.sum(per_sample), per_sample.data.copy(), skipped)
