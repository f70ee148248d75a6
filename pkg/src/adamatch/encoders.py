"""Desk-scale staged image encoder with adaptive patch modules and a toy
text encoder.

The image encoder is a small pyramid: stage 1 embeds fixed s x s pixel
patches, later stages merge 2 x 2 cells and, when enabled, re-extract their
embeddings through adaptive patches sampled from the previous stage's grid.
One transformer block per stage. The text side is an embedding table plus
one block. Both project to a common dimension for alignment.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .adapatch import (
    AdaPatchParams,
    AdaptivePatch,
    FeatureGrid,
    Geometry,
    extract_all_patch_embeddings,
    fixed_grid_patches,
    init_adapatch_params,
    predict_geometry_tensors,
)
from .errors import ContractViolation
from .numerics import Tape, Tensor

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
EOS_TOKEN = "<eos>"


class Vocabulary:
    """Whitespace tokenizer over a fixed word list; pad id is always 0."""

    def __init__(self, words: list[str]):
        specials = [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN]
        for s in specials:
            if s in words:
                raise ContractViolation(f"reserved token {s!r} in word list")
        self.tokens = specials + list(words)
        self.index = {w: i for i, w in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractViolation("duplicate words in vocabulary")

    pad_id = 0
    unk_id = 1
    eos_id = 2

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_corpus(cls, texts: list[str], extra: list[str] | None = None) -> "Vocabulary":
        words = set()
        for text in texts:
            words.update(text.split())
        for text in extra or []:
            words.update(text.split())
        return cls(sorted(words))

    def encode(self, text: str, add_eos: bool = False) -> list[int]:
        ids = [self.index.get(w, self.unk_id) for w in text.split()]
        if add_eos:
            ids.append(self.eos_id)
        return ids

    def decode(self, ids: list[int], strip_special: bool = True) -> str:
        words = []
        for i in ids:
            if i < 0 or i >= len(self.tokens):
                raise ContractViolation(f"token id {i} out of vocabulary")
            if strip_special and i in (self.pad_id, self.unk_id, self.eos_id):
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = Path(path).read_text().splitlines()
        vocab = cls.__new__(cls)
        vocab.tokens = tokens
        vocab.index = {w: i for i, w in enumerate(tokens)}
        return vocab


@dataclass
class TokenSequence:
    """Token ids with their pad mask."""

    ids: np.ndarray  # [K] int64
    pad: np.ndarray  # [K] bool, true exactly where ids == pad id

    @classmethod
    def from_ids(cls, ids, pad_id: int = 0) -> "TokenSequence":
        arr = np.asarray(ids, dtype=np.int64)
        return cls(ids=arr, pad=arr == pad_id)

    def __len__(self) -> int:
        return int(self.ids.shape[0])


@dataclass
class EmbeddingSequence:
    embeddings: Tensor  # [count, d]
    mask: np.ndarray    # [count] bool, true for rows to ignore (pads)


@dataclass
class StageConfig:
    """Image encoder layout. Stage 1 never runs adaptive patches."""

    num_stages: int = 3
    patch_sizes: tuple[int, ...] = (4, 2, 2, 2)
    stage_dims: tuple[int, ...] = (32, 32, 32, 32)
    adapatch_stages: tuple[int, ...] = (2, 3)
    sample_side: int = 3          # m
    tap_stage: int = 3
    out_dim: int = 32             # common alignment dim d
    num_heads: int = 2
    ff_mult: int = 2
    text_dim: int = 32
    init_patch_size: float | None = None  # None: start at the cell extent
    min_patch_size: float = 0.0
    # fixed input standardization; raw [0, 1] pixels are too flat for the
    # normalized residual stream to notice content differences
    input_mean: float = 0.4
    input_gain: float = 6.0

    def __post_init__(self):
        if self.num_stages not in (2, 3, 4):
            raise ContractViolation("num_stages must be 2, 3, or 4")
        if 1 in self.adapatch_stages:
            raise ContractViolation("adaptive patches are never enabled for stage 1")
        if self.tap_stage > self.num_stages:
            raise ContractViolation("tap_stage exceeds num_stages")

    def uses_adapatch(self, stage: int) -> bool:
        return stage in self.adapatch_stages and stage <= self.num_stages

    def grid_hw(self, image_hw: tuple[int, int], stage: int) -> tuple[int, int]:
        h, w = image_hw
        for s in self.patch_sizes[:stage]:
            if h % s or w % s:
                raise ContractViolation(f"image {image_hw} not divisible by patch size {s}")
            h, w = h // s, w // s
        return h, w


def _init_affine(rng, tape, din, dout, params, name, scale=None):
    std = scale if scale is not None else 1.0 / math.sqrt(din)
    params[f"{name}.W"] = tape.parameter(rng.normal(0.0, std, (din, dout)))
    params[f"{name}.b"] = tape.parameter(np.zeros(dout))


def _init_block(rng, tape, d, ff, params, name, res_scale: float = 1.0):
    for lin in ("q", "k", "v"):
        _init_affine(rng, tape, d, d, params, f"{name}.{lin}")
    # res_scale < 1 opens the block close to an identity map, keeping the
    # stream content-dominated early in training (used on the image side,
    # where random mixing would swamp the small cross-image differences)
    _init_affine(rng, tape, d, d, params, f"{name}.o",
                 scale=res_scale / math.sqrt(d))
    _init_affine(rng, tape, d, ff, params, f"{name}.ff1")
    _init_affine(rng, tape, ff, d, params, f"{name}.ff2",
                 scale=res_scale / math.sqrt(ff))
    for ln in ("ln1", "ln2"):
        params[f"{name}.{ln}.g"] = tape.parameter(np.ones(d))
        params[f"{name}.{ln}.b"] = tape.parameter(np.zeros(d))


def transformer_block(x: Tensor, params: dict[str, Tensor], name: str,
                      num_heads: int, pad_mask: np.ndarray | None = None,
                      causal: bool = False) -> Tensor:
    """Pre-norm block: x + MHSA(LN(x)), then + FF(LN(x)). x: [B, n, d].

    Rows flagged in pad_mask are never attended to (key masking), so the
    content of padded positions cannot leak into other rows.
    """
    B, n, d = x.shape
    if d % num_heads:
        raise ContractViolation(f"dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def heads(t):
        return nm.transpose(nm.reshape(t, (B, n, num_heads, dh)), (0, 2, 1, 3))

    h = nm.layer_norm(x, params[f"{name}.ln1.g"], params[f"{name}.ln1.b"])
    q = heads(nm.affine(h, params[f"{name}.q.W"], params[f"{name}.q.b"]))
    k = heads(nm.affine(h, params[f"{name}.k.W"], params[f"{name}.k.b"]))
    v = heads(nm.affine(h, params[f"{name}.v.W"], params[f"{name}.v.b"]))
    mask = None
    if pad_mask is not None:
        mask = np.asarray(pad_mask, dtype=bool).reshape(B, 1, n)
    att = nm.scaled_dot_attention(q, k, v, key_pad_mask=mask, causal=causal)
    att = nm.reshape(nm.transpose(att, (0, 2, 1, 3)), (B, n, d))
    x = nm.add(x, nm.affine(att, params[f"{name}.o.W"], params[f"{name}.o.b"]))

    h2 = nm.layer_norm(x, params[f"{name}.ln2.g"], params[f"{name}.ln2.b"])
    ff = nm.affine(nm.relu(nm.affine(h2, params[f"{name}.ff1.W"], params[f"{name}.ff1.b"])),
                   params[f"{name}.ff2.W"], params[f"{name}.ff2.b"])
    return nm.add(x, ff)


def _merge_cells(x: Tensor, s: int) -> Tensor:
    """[B, H, W, C] -> [B, H/s, W/s, s*s*C], cells flattened row-major."""
    B, H, W, C = x.shape
    if H % s or W % s:
        raise ContractViolation(f"grid {H}x{W} not divisible by {s}")
    t = nm.reshape(x, (B, H // s, s, W // s, s, C))
    t = nm.transpose(t, (0, 1, 3, 2, 4, 5))
    return nm.reshape(t, (B, H // s, W // s, s * s * C))


def patch_embed(image: Tensor, s: int, weight: Tensor, bias: Tensor) -> FeatureGrid:
    """Split an [H, W, C] image into s x s patches and project each one."""
    H, W, C = image.shape
    if H % s or W % s:
        raise ContractViolation(f"image {H}x{W} not divisible by patch size {s}")
    merged = _merge_cells(nm.reshape(image, (1, H, W, C)), s)
    grid = nm.affine(merged, weight, bias)
    return FeatureGrid(nm.reshape(grid, grid.shape[1:]))


def init_image_encoder(cfg: StageConfig, image_hw: tuple[int, int], channels: int,
                       rng: np.random.Generator, tape: Tape) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    prev_c = channels
    for stage in range(1, cfg.num_stages + 1):
        s = cfg.patch_sizes[stage - 1]
        d = cfg.stage_dims[stage - 1]
        gh, gw = cfg.grid_hw(image_hw, stage)
        pfx = f"img.stage{stage}"
        _init_affine(rng, tape, s * s * prev_c, d, params, f"{pfx}.merge")
        if cfg.uses_adapatch(stage):
            init_size = cfg.init_patch_size if cfg.init_patch_size is not None else 1.0 / gw
            ada = init_adapatch_params(rng, tape, d, prev_c, cfg.sample_side, d,
                                       init_size=init_size, min_size=cfg.min_patch_size)
            params.update(ada.tensors(f"{pfx}.ada"))
        params[f"{pfx}.pos"] = tape.parameter(
            rng.normal(0.0, 0.02, (gh * gw, d)))
        _init_block(rng, tape, d, cfg.ff_mult * d, params, f"{pfx}.blk",
                    res_scale=0.02)
        # stage-boundary norm keeps the residual stream bounded, so the
        # geometry heads of later stages stay out of tanh saturation
        params[f"{pfx}.out_ln.g"] = tape.parameter(np.ones(d))
        params[f"{pfx}.out_ln.b"] = tape.parameter(np.zeros(d))
        prev_c = d
    _init_affine(rng, tape, cfg.stage_dims[cfg.tap_stage - 1], cfg.out_dim,
                 params, "img.out")
    return params


def init_text_encoder(cfg: StageConfig, vocab_size: int, max_len: int,
                      rng: np.random.Generator, tape: Tape) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    d = cfg.text_dim
    params["txt.emb"] = tape.parameter(rng.normal(0.0, 0.5, (vocab_size, d)))
    params["txt.pos"] = tape.parameter(rng.normal(0.0, 0.02, (max_len, d)))
    _init_block(rng, tape, d, cfg.ff_mult * d, params, "txt.blk")
    _init_affine(rng, tape, d, cfg.out_dim, params, "txt.out")
    return params


def _adapatch_view(params: dict[str, Tensor], prefix: str, m: int,
                   min_size: float) -> AdaPatchParams:
    return AdaPatchParams(
        shared_w=params[f"{prefix}.shared.W"], shared_b=params[f"{prefix}.shared.b"],
        head_ws=[params[f"{prefix}.f{i}.W"] for i in range(1, 5)],
        head_bs=[params[f"{prefix}.f{i}.b"] for i in range(1, 5)],
        f5_w=params[f"{prefix}.f5.W"], f5_b=params[f"{prefix}.f5.b"],
        m=m, min_size=min_size)


def encode_image_batch(params: dict[str, Tensor], images: Tensor, cfg: StageConfig
                       ) -> tuple[Tensor, Geometry | None, list[list[AdaptivePatch]]]:
    """Encode [B, H, W, C] images to [B, N, d] plus the tap-stage patches.

    Returns the tap-stage geometry (None when that stage runs the fixed
    grid) and the per-sample patch lists.
    """
    B, H, W, C = images.shape
    grid = nm.mul(nm.sub(images, cfg.input_mean), cfg.input_gain)
    tap_seq = None
    tap_geometry: Geometry | None = None
    tap_hw = cfg.grid_hw((H, W), cfg.tap_stage)
    for stage in range(1, cfg.num_stages + 1):
        s = cfg.patch_sizes[stage - 1]
        d = cfg.stage_dims[stage - 1]
        gh, gw = cfg.grid_hw((H, W), stage)
        pfx = f"img.stage{stage}"
        merged = nm.affine(_merge_cells(grid, s),
                           params[f"{pfx}.merge.W"], params[f"{pfx}.merge.b"])
        geometry = None
        if cfg.uses_adapatch(stage):
            ada = _adapatch_view(params, f"{pfx}.ada", cfg.sample_side,
                                 cfg.min_patch_size)
            geometry = predict_geometry_tensors(ada, merged, gh, gw)
            seq = extract_all_patch_embeddings(ada, grid, geometry)
        else:
            seq = nm.reshape(merged, (B, gh * gw, d))
        seq = nm.add(seq, params[f"{pfx}.pos"])
        seq = transformer_block(seq, params, f"{pfx}.blk", cfg.num_heads)
        seq = nm.layer_norm(seq, params[f"{pfx}.out_ln.g"], params[f"{pfx}.out_ln.b"])
        if stage == cfg.tap_stage:
            tap_seq = seq
            tap_geometry = geometry
        grid = nm.reshape(seq, (B, gh, gw, d))
    z = nm.affine(tap_seq, params["img.out.W"], params["img.out.b"])

    if tap_geometry is not None:
        patch_lists = [tap_geometry.patches(i) for i in range(B)]
    else:
        patch_lists = [fixed_grid_patches(*tap_hw) for _ in range(B)]
    return z, tap_geometry, patch_lists


def encode_image(params: dict[str, Tensor], image: Tensor, cfg: StageConfig
                 ) -> tuple[EmbeddingSequence, list[AdaptivePatch]]:
    """Single-image wrapper; all rows of z are valid (mask all false)."""
    z, _, patches = encode_image_batch(params, nm.reshape(image, (1,) + image.shape), cfg)
    z1 = nm.reshape(z, z.shape[1:])
    return EmbeddingSequence(z1, np.zeros(z1.shape[0], dtype=bool)), patches[0]


def encode_text_batch(params: dict[str, Tensor], ids: np.ndarray, cfg: StageConfig,
                      pad_id: int = 0) -> tuple[Tensor, np.ndarray]:
    """Encode [B, K] token ids to [B, K, d]; returns the pad mask alongside."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab_size = params["txt.emb"].shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ContractViolation("token id out of vocabulary range")
    B, K = ids.shape
    if K > params["txt.pos"].shape[0]:
        raise ContractViolation(f"sequence length {K} exceeds positional table")
    pad = ids == pad_id
    x = nm.gather(params["txt.emb"], ids, axis=0)
    x = nm.add(x, nm.slice_(params["txt.pos"], (slice(0, K),)))
    x = transformer_block(x, params, "txt.blk", cfg.num_heads, pad_mask=pad)
    z = nm.affine(x, params["txt.out.W"], params["txt.out.b"])
    return z, pad


def encode_text(params: dict[str, Tensor], tokens: TokenSequence, cfg: StageConfig
                ) -> EmbeddingSequence:
    z, pad = encode_text_batch(params, tokens.ids.reshape(1, -1), cfg)
    return EmbeddingSequence(nm.reshape(z, z.shape[1:]), pad[0])


class AlignmentModel:
    """Bundle of trained encoder parameters, layout config, and vocabulary.

    Loaded from a checkpoint the parameters are plain constants, so every
    call is gradient-free and the model cannot be mutated by extraction.
    """

    def __init__(self, params: dict[str, Tensor], cfg: StageConfig,
                 vocab: Vocabulary):
        self.params = params
        self.cfg = cfg
        self.vocab = vocab

    @classmethod
    def from_checkpoint(cls, ckpt_dir) -> "AlignmentModel":
        params, cfg, vocab = load_checkpoint(ckpt_dir)
        if vocab is None:
            raise ContractViolation(f"checkpoint {ckpt_dir} has no vocabulary")
        return cls(params, cfg, vocab)

    def encode_image(self, image: np.ndarray
                     ) -> tuple[EmbeddingSequence, list[AdaptivePatch]]:
        return encode_image(self.params, Tensor(np.asarray(image, dtype=np.float64)),
                            self.cfg)

    def encode_image_array(self, image: np.ndarray) -> tuple[np.ndarray, list[AdaptivePatch]]:
        z, patches = self.encode_image(image)
        return z.embeddings.values, patches

    def encode_token_ids(self, ids) -> tuple[np.ndarray, np.ndarray]:
        seq = TokenSequence.from_ids(ids)
        z = encode_text(self.params, seq, self.cfg)
        return z.embeddings.values, z.mask

    def encode_report(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        ids = self.vocab.encode(text)
        if not ids:
            from .errors import EmptyTextError

            raise EmptyTextError("cannot encode an empty report")
        return self.encode_token_ids(ids)

    def fingerprint(self) -> str:
        return params_fingerprint(self.params)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(ckpt_dir: str | Path, params: dict[str, Tensor],
                    cfg: StageConfig, vocab: Vocabulary | None = None,
                    extra: dict | None = None) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"tensors": {}, "stage_config": _stage_cfg_dict(cfg)}
    if extra:
        manifest["extra"] = extra
    for name, tensor in sorted(params.items()):
        fname = name.replace("/", "_") + ".admt"
        nm.save_tensor(ckpt_dir / fname, tensor.values)
        stage = None
        if ".stage" in name:
            stage = int(name.split(".stage")[1].split(".")[0])
        manifest["tensors"][name] = {"file": fname, "shape": list(tensor.shape),
                                     "stage": stage}
    (ckpt_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    if vocab is not None:
        vocab.save(ckpt_dir / "vocab.txt")


def load_checkpoint(ckpt_dir: str | Path, tape: Tape | None = None
                    ) -> tuple[dict[str, Tensor], StageConfig, Vocabulary | None]:
    """Load parameters; frozen 64-bit constants when no tape is given."""
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    params = {}
    for name, meta in manifest["tensors"].items():
        values = nm.load_tensor(ckpt_dir / meta["file"])
        if tape is None:
            params[name] = Tensor(values.astype(np.float64))
        else:
            params[name] = tape.parameter(values)
    cfg = stage_cfg_from_dict(manifest["stage_config"])
    vocab = None
    if (ckpt_dir / "vocab.txt").exists():
        vocab = Vocabulary.load(ckpt_dir / "vocab.txt")
    return params, cfg, vocab


def _stage_cfg_dict(cfg: StageConfig) -> dict:
    return {"num_stages": cfg.num_stages, "patch_sizes": list(cfg.patch_sizes),
            "stage_dims": list(cfg.stage_dims),
            "adapatch_stages": list(cfg.adapatch_stages),
            "sample_side": cfg.sample_side, "tap_stage": cfg.tap_stage,
            "out_dim": cfg.out_dim, "num_heads": cfg.num_heads,
            "ff_mult": cfg.ff_mult, "text_dim": cfg.text_dim,
            "init_patch_size": cfg.init_patch_size,
            "min_patch_size": cfg.min_patch_size,
            "input_mean": cfg.input_mean, "input_gain": cfg.input_gain}


def stage_cfg_from_dict(d: dict) -> StageConfig:
    d = dict(d)
    for key in ("patch_sizes", "stage_dims", "adapatch_stages"):
        d[key] = tuple(d[key])
    return StageConfig(**d)


def params_fingerprint(params: dict[str, Tensor]) -> str:
    """Stable hash of all parameter bytes (frozen-model guarantee checks)."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].values).tobytes())
    return h.hexdigest()
