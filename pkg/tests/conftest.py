import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adamatch.encoders import (
    AlignmentModel,
    StageConfig,
    Vocabulary,
    init_image_encoder,
    init_text_encoder,
)
from adamatch.numerics import Tape, Tensor


def make_tiny_model(seed: int = 0, words: list[str] | None = None,
                    image_hw: tuple[int, int] = (32, 32),
                    **cfg_kw) -> AlignmentModel:
    """Small frozen alignment model over a toy vocabulary (untrained)."""
    base = dict(num_stages=3, patch_sizes=(4, 2, 2, 2), stage_dims=(8, 8, 8, 8),
                adapatch_stages=(2, 3), sample_side=3, tap_stage=3, out_dim=8,
                num_heads=2, ff_mult=2, text_dim=8)
    base.update(cfg_kw)
    cfg = StageConfig(**base)
    vocab = Vocabulary(sorted(set(words or
                                  ["disk", "ring", "bar", "wedge", "small", "large",
                                   "bright", "faint", "upper", "lower", "left",
                                   "right", "in", "region"])))
    rng = np.random.default_rng(seed)
    tape = Tape()
    params = init_image_encoder(cfg, image_hw, 1, rng, tape)
    params.update(init_text_encoder(cfg, len(vocab), 24, rng, tape))
    frozen = {k: Tensor(v.values.copy()) for k, v in params.items()}
    return AlignmentModel(frozen, cfg, vocab)


@pytest.fixture(scope="session")
def tiny_model():
    return make_tiny_model()
