"""Retrieval metrics, text-generation metrics, and the ablation runner."""

from __future__ import annotations

import csv
import json
import math
import statistics
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import SceneDataset
from .encoders import AlignmentModel
from .errors import ContractViolation, NumericDomainError

RECALL_KS = (1, 5, 10)


@dataclass
class RetrievalResult:
    direction: str
    rankings: list[list[int]]           # per query, candidate ids best-first
    recall_at: dict[int, float]         # K -> percentage

    def __post_init__(self):
        ks = sorted(self.recall_at)
        for a, b in zip(ks, ks[1:]):
            if self.recall_at[a] > self.recall_at[b] + 1e-9:
                raise ContractViolation("recall must be monotone in K")


@dataclass
class GenMetricReport:
    bleu: list[float]                   # BLEU-1..4
    rouge_l: float
    flagged_empty: int = 0

    def as_dict(self) -> dict:
        return {"bleu": self.bleu, "rouge_l": self.rouge_l,
                "flagged_empty": self.flagged_empty}


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.maximum(n, 1e-12)


def similarity_matrices(model: AlignmentModel,
                        gallery: Sequence[tuple[str, np.ndarray, list[int]]]
                        ) -> tuple[np.ndarray, np.ndarray]:
    """(image-to-text, text-to-image) score matrices over a gallery of pairs."""
    z_imgs = []
    z_txts = []
    for _, image, ids in gallery:
        zi, _ = model.encode_image_array(image)
        z_imgs.append(_normalize_rows(zi))
        zt, pad = model.encode_token_ids(ids)
        z_txts.append(_normalize_rows(zt[~pad]))
    n = len(gallery)
    s_i2t = np.zeros((n, n))
    s_t2i = np.zeros((n, n))
    for i, zi in enumerate(z_imgs):
        for j, zt in enumerate(z_txts):
            sims = zi @ zt.T
            s_i2t[i, j] = sims.max(axis=1).mean()
            s_t2i[i, j] = sims.max(axis=0).mean()
    return s_i2t, s_t2i


def _recall_from_scores(scores: np.ndarray, ks=RECALL_KS) -> tuple[list[list[int]], dict[int, float]]:
    n = scores.shape[0]
    rankings = []
    hits = {k: 0 for k in ks}
    for q in range(n):
        order = np.lexsort((np.arange(n), -scores[q]))  # desc score, asc id
        rankings.append([int(c) for c in order])
        rank = int(np.where(order == q)[0][0])
        for k in ks:
            if rank < k:
                hits[k] += 1
    return rankings, {k: 100.0 * h / n for k, h in hits.items()}


def retrieval_eval(model: AlignmentModel,
                   gallery: Sequence[tuple[str, np.ndarray, list[int]]],
                   direction: str = "image_to_text") -> RetrievalResult:
    """Rank all candidates for every query; the true partner is the same index."""
    if len(gallery) < 1:
        raise ContractViolation("retrieval needs a nonempty gallery")
    s_i2t, s_t2i = similarity_matrices(model, gallery)
    return retrieval_from_matrices(s_i2t, s_t2i, direction)


def retrieval_from_matrices(s_i2t: np.ndarray, s_t2i: np.ndarray,
                            direction: str) -> RetrievalResult:
    if direction == "image_to_text":
        scores = s_i2t
    elif direction == "text_to_image":
        scores = s_t2i.T  # query report j against image candidates i
    else:
        raise ContractViolation(f"unknown retrieval direction {direction!r}")
    rankings, recall = _recall_from_scores(scores)
    return RetrievalResult(direction=direction, rankings=rankings, recall_at=recall)


# ---------------------------------------------------------------------------
# BLEU / ROUGE-L


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence], references: Sequence[Sequence],
         max_n: int = 4) -> tuple[list[float], int]:
    """Corpus BLEU-1..max_n with brevity penalty exp(1 - r/c) for c < r.

    Modified n-gram precision (reference-clipped counts); a zero precision
    for n >= 2 falls back to add-one smoothing on that order. Returns the
    scores plus the number of empty candidates (flagged).
    """
    if not candidates or len(candidates) != len(references):
        raise ContractViolation("bleu needs matching nonempty corpora")
    flagged = sum(1 for c in candidates if len(c) == 0)
    precisions = []
    for n in range(1, max_n + 1):
        match = total = 0
        for cand, ref in zip(candidates, references):
            cc = _ngrams(cand, n)
            rc = _ngrams(ref, n)
            match += sum(min(v, rc[g]) for g, v in cc.items())
            total += max(len(cand) - n + 1, 0)
        if total == 0:
            precisions.append(0.0)
        elif match == 0 and n >= 2:
            precisions.append((match + 1.0) / (total + 1.0))
        else:
            precisions.append(match / total)
    c_len = sum(len(c) for c in candidates)
    r_len = sum(len(r) for r in references)
    if c_len == 0:
        return [0.0] * max_n, flagged
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    scores = []
    for n in range(1, max_n + 1):
        ps = precisions[:n]
        if any(p == 0.0 for p in ps):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in ps) / n))
    return scores, flagged


def rouge_l(candidate: Sequence, reference: Sequence) -> float:
    """LCS F1 of one candidate/reference pair (0 when there is no overlap)."""
    if len(reference) == 0:
        raise ContractViolation("rouge_l needs a nonempty reference")
    if len(candidate) == 0:
        return 0.0
    la, lb = len(candidate), len(reference)
    prev = [0] * (lb + 1)
    for i in range(1, la + 1):
        cur = [0] * (lb + 1)
        for j in range(1, lb + 1):
            if candidate[i - 1] == reference[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    lcs = prev[lb]
    if lcs == 0:
        return 0.0
    p = lcs / la
    r = lcs / lb
    return 2.0 * p * r / (p + r)


def generation_metrics(candidates: Sequence[Sequence],
                       references: Sequence[Sequence]) -> GenMetricReport:
    scores, flagged = bleu(candidates, references)
    rl = [rouge_l(c, r) for c, r in zip(candidates, references)]
    return GenMetricReport(bleu=scores, rouge_l=float(np.mean(rl)),
                           flagged_empty=flagged)


# ---------------------------------------------------------------------------
# localization score (ground-truth box overlap of best-matching patches)


def _iou(box_a, box_b) -> float:
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    ix0, iy0 = max(ax0, bx0), max(ay0, by0)
    ix1, iy1 = min(ax1, bx1), min(ay1, by1)
    iw, ih = max(ix1 - ix0, 0.0), max(iy1 - iy0, 0.0)
    inter = iw * ih
    area_a = max(ax1 - ax0, 0.0) * max(ay1 - ay0, 0.0)
    area_b = max(bx1 - bx0, 0.0) * max(by1 - by0, 0.0)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def localization_score(model: AlignmentModel, dataset: SceneDataset,
                       split: str = "test", iou_threshold: float = 0.1) -> dict:
    """Fraction of shape-kind mentions whose best-matching adaptive patch
    overlaps the named shape's box with IoU above the threshold."""
    total = hit = 0
    for rec in dataset.split(split):
        image = rec.load_image()
        z_img, patches = model.encode_image_array(image)
        ids = dataset.vocab.encode(rec.report)
        z_txt, pad = model.encode_token_ids(ids)
        zi = _normalize_rows(z_img)
        zt = _normalize_rows(z_txt)
        sims = zi @ zt.T                       # [N, K]
        argmax_patch = sims.argmax(axis=0)
        words = rec.report.split()
        # k-th kind mention in reading order belongs to shape k
        mention = 0
        for tok_idx, w in enumerate(words):
            if w not in ("disk", "bar", "ring", "wedge"):
                continue
            shape = rec.shapes[mention]
            mention += 1
            if shape["kind"] != w:
                raise ContractViolation("report order does not match shapes")
            n = int(argmax_patch[tok_idx])
            p = patches[n]
            patch_box = (max(p.ax, 0.0), max(p.ay, 0.0),
                         min(p.bx, 1.0), min(p.by, 1.0))
            total += 1
            if _iou(patch_box, tuple(shape["bbox"])) > iou_threshold:
                hit += 1
    return {"mentions": total, "hits": hit,
            "fraction": (hit / total) if total else 0.0}


# ---------------------------------------------------------------------------
# ablation runner


@dataclass
class AblationCell:
    adapatch: bool
    num_stages: int
    seed: int
    recall_i2t: dict[int, float] | None = None
    recall_t2i: dict[int, float] | None = None
    failed: str | None = None


@dataclass
class AblationTable:
    cells: list[AblationCell] = field(default_factory=list)

    def medians(self, adapatch: bool, num_stages: int) -> dict[int, float] | None:
        vals = [c.recall_i2t for c in self.cells
                if c.adapatch == adapatch and c.num_stages == num_stages
                and c.failed is None]
        if not vals:
            return None
        return {k: statistics.median(v[k] for v in vals) for k in RECALL_KS}

    def render(self) -> str:
        lines = ["adapatch  stages  seeds  R@1     R@5     R@10"]
        combos = sorted({(c.adapatch, c.num_stages) for c in self.cells},
                        key=lambda t: (t[1], not t[0]))
        for ada, st in combos:
            ok = [c for c in self.cells
                  if c.adapatch == ada and c.num_stages == st and c.failed is None]
            med = self.medians(ada, st)
            mark = "on " if ada else "off"
            if med is None:
                lines.append(f"{mark:>8}  {st:>6}  {len(ok):>5}  all runs failed")
            else:
                lines.append(f"{mark:>8}  {st:>6}  {len(ok):>5}  "
                             f"{med[1]:6.2f}  {med[5]:6.2f}  {med[10]:6.2f}")
        failed = [c for c in self.cells if c.failed is not None]
        for c in failed:
            lines.append(f"# failed: adapatch={c.adapatch} stages={c.num_stages} "
                         f"seed={c.seed}: {c.failed}")
        return "\n".join(lines)


def _config_for(base: RunConfig, adapatch: bool, num_stages: int,
                seed: int) -> RunConfig:
    stage = replace(base.stage,
                    num_stages=num_stages,
                    tap_stage=min(base.stage.tap_stage, num_stages),
                    adapatch_stages=(tuple(s for s in (2, 3) if s <= num_stages)
                                     if adapatch else ()))
    return replace(base, seed=seed, stage=stage)


def run_ablation(base: RunConfig, dataset: SceneDataset, work_dir: str | Path,
                 adapatch_options: Sequence[bool] = (True, False),
                 stage_options: Sequence[int] = (3,),
                 seeds: Sequence[int] = (0, 1, 2),
                 gallery_split: str = "all") -> AblationTable:
    """Train each grid cell identically except the ablated factor and report
    retrieval medians over seeds. Diverging runs are excluded and reported."""
    from .training import load_model, train_align

    work_dir = Path(work_dir)
    table = AblationTable()
    gallery = dataset.pairs(gallery_split)
    for num_stages in stage_options:
        for ada in adapatch_options:
            for seed in seeds:
                cell = AblationCell(adapatch=ada, num_stages=num_stages, seed=seed)
                cfg = _config_for(base, ada, num_stages, seed)
                run_dir = work_dir / f"stages{num_stages}_ada{int(ada)}_seed{seed}"
                try:
                    train_align(cfg, dataset, run_dir)
                    model = load_model(run_dir)
                    s_i2t, s_t2i = similarity_matrices(model, gallery)
                    cell.recall_i2t = retrieval_from_matrices(
                        s_i2t, s_t2i, "image_to_text").recall_at
                    cell.recall_t2i = retrieval_from_matrices(
                        s_i2t, s_t2i, "text_to_image").recall_at
                except NumericDomainError as exc:
                    cell.failed = str(exc)
                table.cells.append(cell)
    return table


def save_metrics(path_base: str | Path, payload: dict) -> None:
    """Write a metrics report as JSON plus a flat CSV next to it."""
    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    flat = _flatten(payload)
    with open(base.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in flat.items():
            w.writerow([k, v])


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, (list, tuple)):
            for i, item in enumerate(v):
                out[f"{key}.{i}"] = item
        else:
            out[key] = v
    return out
