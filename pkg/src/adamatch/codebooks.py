"""Textual and visual codebooks and the matched keyword / keypatch extraction.

The textual codebook ranks report entities by corpus frequency within four
clinical groups. The visual codebook stores the strongest adaptive patches
of the training pairs scoring highest on report-to-image similarity. Both
are matched against a frozen alignment model; extraction never mutates it.

Tie-breaking is (higher score, lower index) everywhere.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nm
from .adapatch import AdaptivePatch
from .encoders import AlignmentModel
from .errors import ContractViolation, EmptyTextError
from .numerics import Tensor

ENTITY_GROUPS = ("biological structure", "detailed description",
                 "disease disorder", "sign symptom")


@dataclass
class EntityRecord:
    surface: str
    group: str

    def __post_init__(self):
        if self.group not in ENTITY_GROUPS:
            raise ContractViolation(f"unknown entity group {self.group!r}")


@dataclass
class CodebookConfig:
    kappa0: int = 200   # keywords kept per entity group
    kappa1: int = 10    # keyword candidates per adaptive patch
    kappa2: int = 1000  # training pairs feeding the visual codebook
    kappa3: int = 20    # keypatches kept per selected pair
    kappa4: int = 5     # keypatch candidates per report token
    n_keywords: int = 10    # keywords handed to the language model
    n_keypatches: int = 5   # keypatches handed to the language model
    crop_resolution: int = 8  # stored pixel crop side per keypatch

    def __post_init__(self):
        for name in ("kappa0", "kappa1", "kappa2", "kappa3", "kappa4",
                     "n_keywords", "n_keypatches", "crop_resolution"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be positive")


@dataclass
class KeywordEntry:
    surface: str
    group: str
    rank: int
    frequency: int
    token_ids: list[int] = field(default_factory=list)
    embeddings: np.ndarray | None = None  # [T, d], one row per token


@dataclass
class TextualCodebook:
    groups: dict[str, list[KeywordEntry]]

    def entries(self) -> list[KeywordEntry]:
        out = []
        for g in ENTITY_GROUPS:
            out.extend(self.groups.get(g, []))
        return out

    @property
    def total_keyword_tokens(self) -> int:
        return sum(len(e.token_ids) for e in self.entries())


@dataclass
class KeywordMatch:
    surface: str
    group: str
    score: float
    patch_index: int      # adaptive patch that produced the winning score
    keyword_index: int    # index into TextualCodebook.entries()


@dataclass
class KeypatchEntry:
    pair_id: str
    patch: AdaptivePatch
    patch_index: int
    embedding: np.ndarray   # [d]
    score: float            # word-patch maximum at creation time
    pixels: np.ndarray      # [crop, crop, C] resampled patch content


@dataclass
class VisualCodebook:
    entries: list[KeypatchEntry]


@dataclass
class KeypatchMatch:
    entry_index: int
    score: float
    entry: KeypatchEntry


def build_textual_codebook(occurrences: Iterable[EntityRecord],
                           cfg: CodebookConfig) -> TextualCodebook:
    """Count (surface, group) frequencies and keep the top kappa0 per group,
    ordered by frequency descending with lexicographic tie-break."""
    counts: Counter[tuple[str, str]] = Counter()
    for rec in occurrences:
        if not isinstance(rec, EntityRecord):
            rec = EntityRecord(*rec)
        counts[(rec.surface, rec.group)] += 1
    groups: dict[str, list[KeywordEntry]] = {g: [] for g in ENTITY_GROUPS}
    for g in ENTITY_GROUPS:
        members = [(surface, n) for (surface, grp), n in counts.items() if grp == g]
        members.sort(key=lambda sn: (-sn[1], sn[0]))
        groups[g] = [KeywordEntry(surface=s, group=g, rank=r, frequency=n)
                     for r, (s, n) in enumerate(members[:cfg.kappa0])]
    return TextualCodebook(groups=groups)


def attach_keyword_embeddings(model: AlignmentModel, book: TextualCodebook) -> None:
    """Tokenize and embed every keyword with the frozen text encoder."""
    for entry in book.entries():
        if entry.embeddings is not None:
            continue
        ids = model.vocab.encode(entry.surface)
        if not ids:
            raise ContractViolation(f"keyword {entry.surface!r} tokenizes to nothing")
        z, pad = model.encode_token_ids(ids)
        entry.token_ids = ids
        entry.embeddings = z[~pad]


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.maximum(n, 1e-12)


def _top_per_column(sim: np.ndarray, k: int, owners: Sequence[int],
                    final_n: int) -> list[tuple[int, float, int]]:
    """Per column take the k best rows, union across columns deduplicated by
    owner keeping the best score; return [(owner, score, column)] ranked."""
    M, N = sim.shape
    best: dict[int, tuple[float, int]] = {}
    k = min(k, M)
    for n in range(N):
        col = sim[:, n]
        order = np.lexsort((np.arange(M), -col))[:k]
        for m in order:
            owner = owners[m]
            score = float(col[m])
            cur = best.get(owner)
            if cur is None or score > cur[0]:
                best[owner] = (score, n)
    ranked = sorted(best.items(), key=lambda kv: (-kv[1][0], kv[0]))
    return [(owner, score, col) for owner, (score, col) in ranked[:final_n]]


def extract_keywords(model: AlignmentModel, image: np.ndarray,
                     book: TextualCodebook, cfg: CodebookConfig
                     ) -> list[KeywordMatch]:
    """Match the codebook against one image's adaptive patches.

    Builds the keyword-token / patch similarity matrix, takes the kappa1 best
    keyword tokens per patch, deduplicates by keyword keeping the maximum
    score, and returns the n_keywords best in descending order.
    """
    entries = book.entries()
    if not entries:
        raise ContractViolation("textual codebook is empty")
    attach_keyword_embeddings(model, book)
    z_img, _ = model.encode_image_array(image)

    rows = []
    owners = []
    for ki, entry in enumerate(entries):
        for row in entry.embeddings:
            rows.append(row)
            owners.append(ki)
    kw = _normalize_rows(np.stack(rows))          # [M, d]
    zp = _normalize_rows(z_img)                   # [N, d]
    sim = kw @ zp.T                               # [M, N] keyword tokens x patches

    picked = _top_per_column(sim, cfg.kappa1, owners, cfg.n_keywords)
    return [KeywordMatch(surface=entries[ki].surface, group=entries[ki].group,
                         score=score, patch_index=patch, keyword_index=ki)
            for ki, score, patch in picked]


def word_patch_maxima(z_img: np.ndarray, z_txt: np.ndarray, pad: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Per non-padded token: (best similarity over patches, argmax patch)."""
    sims = _normalize_rows(z_img) @ _normalize_rows(z_txt).T   # [N, K]
    best = sims.max(axis=0)
    idx = sims.argmax(axis=0)
    keep = ~np.asarray(pad, dtype=bool)
    return best[keep], idx[keep]


def crop_patch_pixels(image: np.ndarray, patch: AdaptivePatch, crop: int) -> np.ndarray:
    """Resample the patch rectangle to crop x crop pixels (border clamped)."""
    from .adapatch import sample_points

    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    pts = sample_points(patch, crop)
    out = nm.bilinear(Tensor(img), Tensor(pts)).values
    return out.reshape(crop, crop, img.shape[-1])


def build_visual_codebook(model: AlignmentModel,
                          dataset: Sequence[tuple[str, np.ndarray, list[int]]],
                          cfg: CodebookConfig) -> VisualCodebook:
    """Store keypatches from the kappa2 pairs with the highest report-to-image
    similarity: per pair, the patches attaining the kappa3 best word-patch
    maxima (duplicate patches collapsed, next-ranked taken instead)."""
    if len(dataset) < 1:
        raise ContractViolation("visual codebook needs at least one pair")

    scored = []
    cache = []
    for i, (pair_id, image, ids) in enumerate(dataset):
        z_img, patches = model.encode_image_array(image)
        z_txt, pad = model.encode_token_ids(ids)
        if pad.all():
            raise EmptyTextError(f"pair {pair_id} has an all-pad report")
        best, argmax_patch = word_patch_maxima(z_img, z_txt, pad)
        s_t2i = float(best.mean())
        scored.append((s_t2i, i))
        cache.append((pair_id, image, z_img, patches, best, argmax_patch))

    scored.sort(key=lambda si: (-si[0], si[1]))
    top_pairs = [i for _, i in scored[:cfg.kappa2]]

    entries: list[KeypatchEntry] = []
    for i in top_pairs:
        pair_id, image, z_img, patches, best, argmax_patch = cache[i]
        order = np.lexsort((np.arange(len(best)), -best))
        seen: set[int] = set()
        for t in order:
            n = int(argmax_patch[t])
            if n in seen:
                continue
            seen.add(n)
            entries.append(KeypatchEntry(
                pair_id=pair_id, patch=patches[n], patch_index=n,
                embedding=z_img[n].copy(), score=float(best[t]),
                pixels=crop_patch_pixels(image, patches[n], cfg.crop_resolution)))
            if len(seen) >= cfg.kappa3:
                break
    return VisualCodebook(entries=entries)


def extract_keypatches(model: AlignmentModel, report_ids: list[int],
                       book: VisualCodebook, cfg: CodebookConfig
                       ) -> list[KeypatchMatch]:
    """Match the visual codebook against one report: kappa4 best keypatches
    per non-padded token, deduplicated keeping the maximum score, top
    n_keypatches returned in descending order."""
    if not book.entries:
        raise ContractViolation("visual codebook is empty")
    z_txt, pad = model.encode_token_ids(report_ids)
    keep = ~pad
    if not keep.any():
        raise EmptyTextError("keypatch extraction over a fully padded report")

    emb = _normalize_rows(np.stack([e.embedding for e in book.entries]))  # [P, d]
    zt = _normalize_rows(z_txt[keep])                                     # [K', d]
    sim = emb @ zt.T                                                      # [P, K']
    picked = _top_per_column(sim, cfg.kappa4, list(range(len(book.entries))),
                             cfg.n_keypatches)
    return [KeypatchMatch(entry_index=p, score=score, entry=book.entries[p])
            for p, score, _tok in picked]


# ---------------------------------------------------------------------------
# persistence: JSON manifest + binary tensor payloads


def save_textual_codebook(path: str | Path, book: TextualCodebook) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = book.entries()
    manifest = []
    rows = []
    offset = 0
    for e in entries:
        t = len(e.token_ids)
        manifest.append({"surface": e.surface, "group": e.group, "rank": e.rank,
                         "frequency": e.frequency, "tokens": e.token_ids,
                         "offset": offset, "length": t})
        if e.embeddings is not None:
            rows.append(e.embeddings)
        offset += t
    (path / "textual.json").write_text(json.dumps(manifest, indent=1))
    if rows:
        nm.save_tensor(path / "textual_embeddings.admt", np.concatenate(rows, axis=0))


def load_textual_codebook(path: str | Path) -> TextualCodebook:
    path = Path(path)
    manifest = json.loads((path / "textual.json").read_text())
    emb = None
    if (path / "textual_embeddings.admt").exists():
        emb = nm.load_tensor(path / "textual_embeddings.admt")
    groups: dict[str, list[KeywordEntry]] = {g: [] for g in ENTITY_GROUPS}
    for rec in manifest:
        e = KeywordEntry(surface=rec["surface"], group=rec["group"],
                         rank=rec["rank"], frequency=rec["frequency"],
                         token_ids=list(rec["tokens"]))
        if emb is not None and rec["length"]:
            e.embeddings = emb[rec["offset"]:rec["offset"] + rec["length"]]
        groups[e.group].append(e)
    return TextualCodebook(groups=groups)


def save_visual_codebook(path: str | Path, book: VisualCodebook) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = []
    for e in book.entries:
        p = e.patch
        manifest.append({"pair_id": e.pair_id, "patch_index": e.patch_index,
                         "score": e.score,
                         "patch": {"cx": p.cx, "cy": p.cy, "dx": p.dx, "dy": p.dy,
                                   "sw": p.sw, "sh": p.sh}})
    (path / "visual.json").write_text(json.dumps(manifest, indent=1))
    if book.entries:
        nm.save_tensor(path / "visual_embeddings.admt",
                       np.stack([e.embedding for e in book.entries]))
        nm.save_tensor(path / "visual_pixels.admt",
                       np.stack([e.pixels for e in book.entries]))


def load_visual_codebook(path: str | Path) -> VisualCodebook:
    path = Path(path)
    manifest = json.loads((path / "visual.json").read_text())
    if not manifest:
        return VisualCodebook(entries=[])
    emb = nm.load_tensor(path / "visual_embeddings.admt")
    pix = nm.load_tensor(path / "visual_pixels.admt")
    entries = []
    for i, rec in enumerate(manifest):
        entries.append(KeypatchEntry(
            pair_id=rec["pair_id"], patch=AdaptivePatch(**rec["patch"]),
            patch_index=rec["patch_index"], embedding=emb[i],
            score=rec["score"], pixels=pix[i]))
    return VisualCodebook(entries=entries)
