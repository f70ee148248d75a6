"""Synthetic paired scenes: small shape "lesions" on a noisy canvas with a
templated report describing each shape.

Every report word is derived from actual scene geometry, so patch-word
correspondence has a usable ground truth: the kind word of each shape maps
to a known bounding box, which makes alignment quality measurable as a
localization score.

Reports follow reading order (top-to-bottom, left-to-right) with phrases
"<size> <intensity> <kind> in the <row> <col> region" joined by a period
token. Entities per shape: kind (disease disorder), size (detailed
description), intensity (sign symptom), region (biological structure).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .cyclic import TEMPLATE_TEXTS
from .encoders import Vocabulary
from .errors import ContractViolation

SHAPE_KINDS = ("disk", "bar", "ring", "wedge")
SIZE_WORDS = ("small", "medium", "large")
INTENSITY_WORDS = ("faint", "bright")
ROW_WORDS = ("upper", "central", "lower")
COL_WORDS = ("left", "middle", "right")
SEPARATOR = "."


@dataclass
class Shape:
    kind: str
    cx: float          # pixels
    cy: float
    size: float        # radius / half-extent in pixels
    aspect: float      # bars: short/long ratio; others unused
    orient: int        # bars: 0 horizontal, 1 vertical; wedges: quadrant
    intensity: float
    size_word: str
    intensity_word: str

    def bbox(self, H: int, W: int) -> tuple[float, float, float, float]:
        """Normalized (x0, y0, x1, y1) covering the drawn extent."""
        if self.kind == "bar":
            hw = self.size if self.orient == 0 else self.size * self.aspect
            hh = self.size * self.aspect if self.orient == 0 else self.size
        else:
            hw = hh = self.size
        return (max((self.cx - hw) / W, 0.0), max((self.cy - hh) / H, 0.0),
                min((self.cx + hw) / W, 1.0), min((self.cy + hh) / H, 1.0))

    def region_words(self, H: int, W: int) -> tuple[str, str]:
        row = ROW_WORDS[min(int(self.cy / (H / 3)), 2)]
        col = COL_WORDS[min(int(self.cx / (W / 3)), 2)]
        return row, col

    def phrase(self, H: int, W: int) -> str:
        row, col = self.region_words(H, W)
        return (f"{self.size_word} {self.intensity_word} {self.kind} "
                f"in the {row} {col} region")


@dataclass
class SyntheticScene:
    scene_id: str
    shapes: list[Shape]
    image: np.ndarray           # [H, W, 1] in [0, 1]
    report: str
    entities: list[dict] = field(default_factory=list)  # surface, group, shape

    @property
    def split(self) -> str:
        return split_of(self.scene_id)


def split_of(scene_id: str) -> str:
    digest = hashlib.md5(scene_id.encode()).digest()
    bucket = digest[0] % 10
    return "train" if bucket < 8 else ("val" if bucket == 8 else "test")


def _smoothstep(x: np.ndarray) -> np.ndarray:
    t = np.clip(x, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _coverage(sdf: np.ndarray, soft: float = 0.8) -> np.ndarray:
    # sdf < 0 inside; ~1px soft edge
    return _smoothstep(0.5 - sdf / soft)


def _render_shape(shape: Shape, H: int, W: int) -> np.ndarray:
    ys, xs = np.mgrid[0:H, 0:W]
    x = xs + 0.5 - shape.cx
    y = ys + 0.5 - shape.cy
    if shape.kind == "disk":
        sdf = np.hypot(x, y) - shape.size
    elif shape.kind == "ring":
        r_out, r_in = shape.size, shape.size * 0.55
        mid, half = (r_out + r_in) / 2, (r_out - r_in) / 2
        sdf = np.abs(np.hypot(x, y) - mid) - half
    elif shape.kind == "bar":
        hw = shape.size if shape.orient == 0 else shape.size * shape.aspect
        hh = shape.size * shape.aspect if shape.orient == 0 else shape.size
        sdf = np.maximum(np.abs(x) - hw, np.abs(y) - hh)
    elif shape.kind == "wedge":
        # right triangle with legs 2*size, axis-aligned, quadrant by orient
        sx = 1.0 if shape.orient in (0, 3) else -1.0
        sy = 1.0 if shape.orient in (0, 1) else -1.0
        u, v = sx * x + shape.size, sy * y + shape.size
        sdf = np.maximum(np.maximum(-u, -v), (u + v - 2 * shape.size) / np.sqrt(2))
    else:
        raise ContractViolation(f"unknown shape kind {shape.kind!r}")
    return _coverage(sdf) * shape.intensity


def render_scene(shapes: list[Shape], H: int, W: int,
                 rng: np.random.Generator) -> np.ndarray:
    img = 0.12 + 0.025 * rng.random((H, W))
    for s in shapes:
        img = np.maximum(img, _render_shape(s, H, W))
    return np.clip(img, 0.0, 1.0)[:, :, None]


_SIZE_RANGES = {
    # (lo, hi) of the size parameter in pixels; terciles give the size word
    "disk": (3.2, 7.5),
    "ring": (4.0, 8.5),
    "bar": (5.0, 10.0),
    "wedge": (4.5, 9.5),
}


def _size_word(kind: str, size: float) -> str:
    lo, hi = _SIZE_RANGES[kind]
    t = (size - lo) / (hi - lo)
    return SIZE_WORDS[min(int(t * 3), 2)]


def _sample_shape(rng: np.random.Generator, H: int, W: int) -> Shape:
    kind = SHAPE_KINDS[rng.integers(0, len(SHAPE_KINDS))]
    lo, hi = _SIZE_RANGES[kind]
    size = float(rng.uniform(lo, hi))
    margin = size + 2.0
    cx = float(rng.uniform(margin, W - margin))
    cy = float(rng.uniform(margin, H - margin))
    bright = bool(rng.random() < 0.5)
    intensity = float(rng.uniform(0.78, 0.92) if bright else rng.uniform(0.38, 0.5))
    return Shape(kind=kind, cx=cx, cy=cy, size=size,
                 aspect=float(rng.uniform(0.28, 0.42)),
                 orient=int(rng.integers(0, 4)), intensity=intensity,
                 size_word=_size_word(kind, size),
                 intensity_word="bright" if bright else "faint")


def _sample_scene(scene_id: str, rng: np.random.Generator, H: int, W: int
                  ) -> SyntheticScene:
    n_shapes = int(rng.integers(1, 5))
    shapes: list[Shape] = []
    attempts = 0
    while len(shapes) < n_shapes and attempts < 200:
        attempts += 1
        cand = _sample_shape(rng, H, W)
        if all(np.hypot(cand.cx - s.cx, cand.cy - s.cy) >= cand.size + s.size + 4
               for s in shapes):
            shapes.append(cand)
    shapes.sort(key=lambda s: (s.cy, s.cx))

    phrases = [s.phrase(H, W) for s in shapes]
    report = f" {SEPARATOR} ".join(phrases)
    if len(report.split()) < 3:
        raise ContractViolation("generated report shorter than 3 tokens")

    entities = []
    for i, s in enumerate(shapes):
        row, col = s.region_words(H, W)
        entities += [
            {"surface": s.kind, "group": "disease disorder", "shape": i},
            {"surface": s.size_word, "group": "detailed description", "shape": i},
            {"surface": s.intensity_word, "group": "sign symptom", "shape": i},
            {"surface": f"{row} {col}", "group": "biological structure", "shape": i},
        ]
    image = render_scene(shapes, H, W, rng)
    return SyntheticScene(scene_id=scene_id, shapes=shapes, image=image,
                          report=report, entities=entities)


def substream(seed: int, name: str) -> np.random.Generator:
    """Named child stream of the run seed (stable across platforms)."""
    tag = int.from_bytes(hashlib.md5(name.encode()).digest()[:4], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def gen_data(n: int, seed: int, out_dir: str | Path,
             image_hw: tuple[int, int] = (64, 64)) -> "SceneDataset":
    """Generate n scenes with disjoint train/val/test splits on disk.

    Reports are unique across the dataset (a colliding scene is resampled);
    the split of a scene depends only on its id hash, never on content.
    """
    if n < 1:
        raise ContractViolation("gen_data needs n >= 1")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    H, W = image_hw
    rng = substream(seed, "data")

    scenes: list[SyntheticScene] = []
    seen_reports: set[str] = set()
    for i in range(n):
        scene_id = f"scene{i:05d}"
        for _ in range(64):
            scene = _sample_scene(scene_id, rng, H, W)
            if scene.report not in seen_reports:
                break
        seen_reports.add(scene.report)
        scenes.append(scene)

    train_texts = [s.report for s in scenes if s.split == "train"]
    vocab = Vocabulary.from_corpus(train_texts or [s.report for s in scenes],
                                   extra=TEMPLATE_TEXTS)
    vocab.save(out_dir / "vocab.txt")

    with open(out_dir / "scenes.jsonl", "w") as fh:
        for s in scenes:
            nm.save_tensor(img_dir / f"{s.scene_id}.admt", s.image)
            fh.write(json.dumps({
                "id": s.scene_id, "split": s.split, "report": s.report,
                "entities": s.entities,
                "shapes": [{"kind": sh.kind, "cx": sh.cx, "cy": sh.cy,
                            "size": sh.size, "aspect": sh.aspect,
                            "orient": sh.orient, "intensity": sh.intensity,
                            "size_word": sh.size_word,
                            "intensity_word": sh.intensity_word,
                            "bbox": list(sh.bbox(H, W))}
                           for sh in s.shapes],
                "image": f"images/{s.scene_id}.admt",
            }) + "\n")
    return SceneDataset.load(out_dir)


@dataclass
class SceneRecord:
    scene_id: str
    split: str
    report: str
    entities: list[dict]
    shapes: list[dict]
    image_path: Path

    def load_image(self) -> np.ndarray:
        return nm.load_tensor(self.image_path)


class SceneDataset:
    def __init__(self, root: Path, records: list[SceneRecord], vocab: Vocabulary):
        self.root = root
        self.records = records
        self.vocab = vocab
        ids = [r.scene_id for r in records]
        if len(set(ids)) != len(ids):
            raise ContractViolation("duplicate scene ids in dataset")
        by_split = {"train": set(), "val": set(), "test": set()}
        for r in records:
            by_split[r.split].add(r.scene_id)
        if (by_split["train"] & by_split["val"]) or (by_split["train"] & by_split["test"]) \
                or (by_split["val"] & by_split["test"]):
            raise ContractViolation("split leakage detected")

    @classmethod
    def load(cls, root: str | Path) -> "SceneDataset":
        root = Path(root)
        scenes_file = root / "scenes.jsonl"
        if not scenes_file.exists():
            from .errors import MissingArtifactError

            raise MissingArtifactError(f"no dataset at {root}; run gen-data first")
        records = []
        with open(scenes_file) as fh:
            for line in fh:
                if not line.strip():
                    continue
                d = json.loads(line)
                records.append(SceneRecord(
                    scene_id=d["id"], split=d["split"], report=d["report"],
                    entities=d["entities"], shapes=d["shapes"],
                    image_path=root / d["image"]))
        vocab = Vocabulary.load(root / "vocab.txt")
        return cls(root, records, vocab)

    def split(self, name: str) -> list[SceneRecord]:
        if name == "all":
            return list(self.records)
        return [r for r in self.records if r.split == name]

    def pairs(self, split: str) -> list[tuple[str, np.ndarray, list[int]]]:
        """(id, image, report token ids) triples for one split."""
        out = []
        for r in self.split(split):
            out.append((r.scene_id, r.load_image(), self.vocab.encode(r.report)))
        return out

    def entity_counts(self) -> dict[tuple[str, str], int]:
        counts: dict[tuple[str, str], int] = {}
        for r in self.records:
            for e in r.entities:
                key = (e["surface"], e["group"])
                counts[key] = counts.get(key, 0) + 1
        return counts
