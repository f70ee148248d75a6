"""Fine-grained patch-word similarity and the bidirectional contrastive loss.

Image-to-text similarity of a pair: for every patch take its best dot
product over the non-padded tokens, then average over patches. Text-to-image
is the mirror: per token the best patch, averaged over non-padded tokens.
Embeddings are unit-normalized here (not in the encoders) so similarities
stay inside [-1, 1].

The per-item losses keep the printed -(1/b) factor inside each term; the
mini-batch total is 0.5 * sum_i (L_i_i2t + L_i_t2i). Set paper_norm=False
for the conventional mean normalization instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ContractViolation, EmptyTextError
from .numerics import Tensor

NEG_BIG = -1e9  # additive mask for excluded tokens


@dataclass
class AlignConfig:
    temperature: float = 0.07
    batch_size: int = 8
    paper_norm: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractViolation("temperature must be positive")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")


@dataclass
class SimilarityMatrix:
    """Cross-pair similarities plus the argmax match indices.

    m_i2t[i, j, n]: index of the token of report j best matching patch n of
    image i. m_t2i[i, j, k]: index of the patch of image i best matching
    token k of report j (padded k hold -1).
    """

    s_i2t: Tensor  # [b, b]
    s_t2i: Tensor  # [b, b]
    m_i2t: np.ndarray  # [b, b, N]
    m_t2i: np.ndarray  # [b, b, Kmax]


@dataclass
class LossReport:
    per_item_i2t: list[float]
    per_item_t2i: list[float]
    total: Tensor

    @property
    def total_value(self) -> float:
        return float(self.total.values)


def _normalize_pair(z_img: Tensor, z_txt: Tensor, pad: np.ndarray):
    pad = np.asarray(pad, dtype=bool)
    if pad.all():
        raise EmptyTextError("similarity over a fully padded report")
    if z_img.shape[0] < 1:
        raise ContractViolation("similarity needs at least one patch")
    return nm.l2_normalize(z_img), nm.l2_normalize(z_txt), pad


def image_to_text_similarity(z_img: Tensor, z_txt: Tensor, pad: np.ndarray
                             ) -> tuple[Tensor, np.ndarray]:
    """Mean over patches of the best non-padded token match. Returns the
    scalar similarity and the argmax token index per patch."""
    zi, zt, pad = _normalize_pair(z_img, z_txt, pad)
    sims = nm.matmul(zi, nm.transpose(zt))          # [N, K]
    bias = np.where(pad, NEG_BIG, 0.0).astype(sims.values.dtype)
    best, idx = nm.max_with_indices(nm.add(sims, Tensor(bias)), axis=1)
    return nm.mean(best), idx


def text_to_image_similarity(z_img: Tensor, z_txt: Tensor, pad: np.ndarray
                             ) -> tuple[Tensor, np.ndarray]:
    """Mean over non-padded tokens of the best patch match. Returns the
    scalar similarity and the argmax patch index per token (-1 at pads)."""
    zi, zt, pad = _normalize_pair(z_img, z_txt, pad)
    keep = ~pad
    sims = nm.matmul(zi, nm.transpose(zt))          # [N, K]
    best, idx = nm.max_with_indices(sims, axis=0)   # over patches, [K]
    kept = nm.mul(best, Tensor(keep.astype(sims.values.dtype)))
    s = nm.div(nm.sum_(kept), float(keep.sum()))
    out_idx = np.where(keep, idx, -1)
    return s, out_idx


def batch_similarities(z_imgs: Tensor, z_txts: Tensor, pads: np.ndarray
                       ) -> SimilarityMatrix:
    """All b x b cross-pair similarities.

    z_imgs: [b, N, d], z_txts: [b, K, d] (reports padded to a common K),
    pads: [b, K]. The diagonal holds the positive pairs.
    """
    if z_imgs.ndim != 3 or z_txts.ndim != 3:
        raise ContractViolation("batch_similarities expects [b, N, d] and [b, K, d]")
    b, N, _ = z_imgs.shape
    K = z_txts.shape[1]
    pads = np.asarray(pads, dtype=bool)
    if pads.all(axis=1).any():
        raise EmptyTextError("a report in the batch is fully padded")

    zi = nm.l2_normalize(z_imgs)
    zt = nm.l2_normalize(z_txts)
    sims = nm.pair_dot(zi, zt)                       # [b, b, N, K]
    dtype = sims.values.dtype

    # image-to-text: exclude padded tokens from the per-patch max
    bias = np.where(pads, NEG_BIG, 0.0)[None, :, None, :]   # index [i, j, n, k] by (j, k)
    masked = nm.add(sims, Tensor(np.broadcast_to(bias, (b, b, N, K)).astype(dtype)))
    best_tok, m_i2t = nm.max_with_indices(masked, axis=3)   # [b, b, N]
    s_i2t = nm.mean(best_tok, axis=2)                        # [b, b]

    # text-to-image: per-token max over patches, mean over non-padded tokens
    best_patch, m_t2i = nm.max_with_indices(sims, axis=2)    # [b, b, K]
    keep = (~pads).astype(dtype)                             # [b(j), K]
    kept = nm.mul(best_patch, Tensor(keep.reshape(b, K)))
    sums = nm.sum_(kept, axis=2)                             # [b, b]
    counts = Tensor(keep.sum(axis=1))                        # [b(j)]
    s_t2i = nm.div(sums, counts)
    m_t2i = np.where(pads[None, :, :], -1, m_t2i)
    return SimilarityMatrix(s_i2t=s_i2t, s_t2i=s_t2i, m_i2t=m_i2t, m_t2i=m_t2i)


def contrastive_loss(sim: SimilarityMatrix, cfg: AlignConfig) -> LossReport:
    """Bidirectional InfoNCE over the similarity matrices, via log-sum-exp."""
    b = sim.s_i2t.shape[0]
    if sim.s_i2t.shape != (b, b) or sim.s_t2i.shape != (b, b):
        raise ContractViolation("similarity matrices must be square and equal size")
    tau = cfg.temperature
    # the printed per-item terms carry a 1/b factor; paper_norm=False reports
    # raw per-item terms and applies the 1/b once in the total instead
    factor = (1.0 / b) if cfg.paper_norm else 1.0

    diag = np.arange(b)
    logits_i = nm.mul(sim.s_i2t, 1.0 / tau)                # rows i over j
    pos_i = nm.take_rowwise(logits_i, diag)
    li = nm.mul(nm.sub(nm.logsumexp(logits_i, axis=1), pos_i), factor)

    logits_t = nm.mul(nm.transpose(sim.s_t2i), 1.0 / tau)  # row i: column i over j
    pos_t = nm.take_rowwise(logits_t, diag)
    lt = nm.mul(nm.sub(nm.logsumexp(logits_t, axis=1), pos_t), factor)

    total = nm.mul(nm.add(nm.sum_(li), nm.sum_(lt)), 0.5)
    if not cfg.paper_norm:
        total = nm.mul(total, 1.0 / b)
    return LossReport(per_item_i2t=[float(v) for v in li.values],
                      per_item_t2i=[float(v) for v in lt.values],
                      total=total)


def mini_batch_loss(z_imgs: Tensor, z_txts: Tensor, pads: np.ndarray,
                    cfg: AlignConfig) -> tuple[LossReport, SimilarityMatrix]:
    sim = batch_similarities(z_imgs, z_txts, pads)
    return contrastive_loss(sim, cfg), sim


def diagonal_stats(sim: SimilarityMatrix) -> tuple[float, float]:
    """(mean diagonal, mean off-diagonal) of the image-to-text matrix."""
    s = sim.s_i2t.values
    b = s.shape[0]
    diag = float(np.trace(s) / b)
    if b == 1:
        return diag, 0.0
    off = float((s.sum() - np.trace(s)) / (b * b - b))
    return diag, off
