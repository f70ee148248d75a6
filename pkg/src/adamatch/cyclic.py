"""Cyclic generation plumbing: mock vector-quantized image codec, unified
token space, instruction records with response masking, and a tiny
autoregressive token language model.

The codec quantizes g x g pixel cells to their nearest codeword; codewords
live in [0, 1] so decode/encode round-trips are token fixpoints. Image
tokens are shifted past the text vocabulary into a single unified id space.
Instruction records mark where the response begins; the language-model loss
counts only positions at or after that boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .encoders import Vocabulary, transformer_block
from .errors import ContractViolation
from .numerics import Tape, Tensor

MARK_INSTRUCTION = "### Instruction:"
MARK_INPUT = "### Input:"
MARK_KEYWORDS = "### Keywords:"
MARK_KEYPATCHES = "### Keypatches:"
MARK_RESPONSE = "### Response:"

REPORT_INSTRUCTION = "describe the findings visible in this scan"
CXR_INSTRUCTION = "render a scan that matches this report"

TEMPLATE_TEXTS = [MARK_INSTRUCTION, MARK_INPUT, MARK_KEYWORDS, MARK_KEYPATCHES,
                  MARK_RESPONSE, REPORT_INSTRUCTION, CXR_INSTRUCTION]

TEMPLATE_REPORT_GEN = "report_gen"
TEMPLATE_CXR_GEN = "cxr_gen"


# ---------------------------------------------------------------------------
# mock vector-quantized codec


@dataclass
class MockVQCodec:
    """Per-cell nearest-codeword quantizer standing in for a learned codec."""

    codebook: np.ndarray  # [V_img, cell*cell*channels], values in [0, 1]
    cell: int = 8
    channels: int = 1

    @classmethod
    def create(cls, seed: int, v_img: int = 1024, cell: int = 8,
               channels: int = 1) -> "MockVQCodec":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7c0de]))
        book = rng.uniform(0.0, 1.0, size=(v_img, cell * cell * channels))
        return cls(codebook=book, cell=cell, channels=channels)

    @property
    def v_img(self) -> int:
        return self.codebook.shape[0]

    def encode(self, image: np.ndarray) -> np.ndarray:
        """[H, W(, C)] image -> [H/g, W/g] token grid (ties: lowest index)."""
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        H, W, C = img.shape
        g = self.cell
        if H % g or W % g or C != self.channels:
            raise ContractViolation(
                f"image {img.shape} incompatible with codec cell {g}/{self.channels}")
        tokens = np.zeros((H // g, W // g), dtype=np.int64)
        for r in range(H // g):
            for c in range(W // g):
                flat = img[r * g:(r + 1) * g, c * g:(c + 1) * g].reshape(-1)
                d2 = ((self.codebook - flat) ** 2).sum(axis=1)
                tokens[r, c] = int(np.argmin(d2))  # first minimum wins
        return tokens

    def decode(self, tokens: np.ndarray) -> np.ndarray:
        """[h, w] token grid -> [h*g, w*g, C] image, clamped to [0, 1]."""
        tok = np.asarray(tokens, dtype=np.int64)
        if tok.size and (tok.min() < 0 or tok.max() >= self.v_img):
            raise ContractViolation("image token out of codec range")
        g = self.cell
        h, w = tok.shape
        out = np.zeros((h * g, w * g, self.channels))
        for r in range(h):
            for c in range(w):
                cellv = self.codebook[tok[r, c]].reshape(g, g, self.channels)
                out[r * g:(r + 1) * g, c * g:(c + 1) * g] = cellv
        return np.clip(out, 0.0, 1.0)

    def encode_cell(self, cell_pixels: np.ndarray) -> int:
        """Quantize a single pre-cropped g x g cell."""
        flat = np.asarray(cell_pixels, dtype=np.float64).reshape(-1)
        if flat.size != self.codebook.shape[1]:
            raise ContractViolation("crop does not match the codec cell size")
        d2 = ((self.codebook - flat) ** 2).sum(axis=1)
        return int(np.argmin(d2))


def vq_encode(codec: MockVQCodec, image: np.ndarray) -> np.ndarray:
    return codec.encode(image)


def vq_decode(codec: MockVQCodec, tokens: np.ndarray) -> np.ndarray:
    return codec.decode(tokens)


# ---------------------------------------------------------------------------
# unified token space


@dataclass(frozen=True)
class TokenSpace:
    """Text ids stay put; image ids shift up by the text vocabulary size."""

    v_text: int
    v_img: int

    @property
    def offset(self) -> int:
        return self.v_text

    @property
    def unified_size(self) -> int:
        return self.v_text + self.v_img

    def to_unified(self, token: int, kind: str) -> int:
        token = int(token)
        if kind == "text":
            if not 0 <= token < self.v_text:
                raise ContractViolation(f"text token {token} out of range")
            return token
        if kind == "image":
            if not 0 <= token < self.v_img:
                raise ContractViolation(f"image token {token} out of range")
            return token + self.offset
        raise ContractViolation(f"unknown token kind {kind!r}")

    def from_unified(self, token: int) -> tuple[str, int]:
        token = int(token)
        if 0 <= token < self.v_text:
            return "text", token
        if self.v_text <= token < self.unified_size:
            return "image", token - self.offset
        raise ContractViolation(f"unified token {token} out of range")

    def image_grid_to_unified(self, tokens: np.ndarray) -> list[int]:
        return [self.to_unified(t, "image") for t in np.asarray(tokens).ravel()]


# ---------------------------------------------------------------------------
# instruction records


@dataclass
class InstructionRecord:
    template: str
    tokens: np.ndarray       # unified ids
    response_start: int
    sections: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if not 0 <= self.response_start <= len(self.tokens):
            raise ContractViolation("response_start outside the sequence")

    @property
    def target_mask(self) -> np.ndarray:
        return np.arange(len(self.tokens)) >= self.response_start

    @property
    def target_tokens(self) -> np.ndarray:
        return self.tokens[self.response_start:]

    @property
    def is_training(self) -> bool:
        return self.response_start < len(self.tokens)

    def prompt_tokens(self) -> np.ndarray:
        return self.tokens[: self.response_start]


def _enc_template(vocab: Vocabulary, text: str) -> list[int]:
    ids = vocab.encode(text)
    if vocab.unk_id in ids:
        raise ContractViolation(f"vocabulary lacks template words of {text!r}")
    return ids


def _assemble(template: str, vocab: Vocabulary, parts: list[tuple[str, list[int]]],
              target: list[int] | None) -> InstructionRecord:
    seq: list[int] = []
    sections: dict[str, list[int]] = {}
    for name, ids in parts:
        seq.extend(ids)
        sections[name] = list(ids)
    seq.extend(_enc_template(vocab, MARK_RESPONSE))
    response_start = len(seq)
    tgt = list(target) if target is not None else []
    seq.extend(tgt)
    sections["response"] = tgt
    return InstructionRecord(template=template, tokens=np.asarray(seq, dtype=np.int64),
                             response_start=response_start, sections=sections)


def assemble_report_instruction(space: TokenSpace, vocab: Vocabulary,
                                image_tokens: np.ndarray, keywords: list[str],
                                target_report_ids: list[int] | None,
                                max_keywords: int | None = None) -> InstructionRecord:
    """Image-to-report record: instruction, image tokens, keywords, response."""
    if max_keywords is not None and len(keywords) > max_keywords:
        raise ContractViolation(f"{len(keywords)} keywords exceed the limit {max_keywords}")
    kw_ids: list[int] = []
    for k in keywords:
        kw_ids.extend(vocab.encode(k))
    parts = [
        ("instruction", _enc_template(vocab, MARK_INSTRUCTION) + _enc_template(vocab, REPORT_INSTRUCTION)),
        ("input", _enc_template(vocab, MARK_INPUT) + space.image_grid_to_unified(image_tokens)),
        ("keywords", _enc_template(vocab, MARK_KEYWORDS) + kw_ids),
    ]
    return _assemble(TEMPLATE_REPORT_GEN, vocab, parts, target_report_ids)


def assemble_cxr_instruction(space: TokenSpace, vocab: Vocabulary,
                             report_ids: list[int], keypatch_tokens: list[int],
                             target_image_tokens: np.ndarray | None) -> InstructionRecord:
    """Report-to-image record: instruction, report, keypatches, response.

    keypatch_tokens are image-codec ids (shifted here); an empty list keeps
    the section header with no payload.
    """
    unified_kp = [space.to_unified(t, "image") for t in keypatch_tokens]
    target = (space.image_grid_to_unified(target_image_tokens)
              if target_image_tokens is not None else None)
    parts = [
        ("instruction", _enc_template(vocab, MARK_INSTRUCTION) + _enc_template(vocab, CXR_INSTRUCTION)),
        ("report", list(map(int, report_ids))),
        ("keypatches", _enc_template(vocab, MARK_KEYPATCHES) + unified_kp),
    ]
    return _assemble(TEMPLATE_CXR_GEN, vocab, parts, target)


def _find_subsequence(tokens: np.ndarray, needle: list[int]) -> list[int]:
    hits = []
    n = len(needle)
    for i in range(len(tokens) - n + 1):
        if list(tokens[i:i + n]) == needle:
            hits.append(i)
    return hits


def parse_instruction(record: InstructionRecord, vocab: Vocabulary) -> dict[str, list[int]]:
    """Recover the section payloads from a record's token stream.

    Also validates the response-key invariant: the "### Response:" token
    subsequence appears exactly once, immediately before response_start.
    """
    toks = record.tokens
    resp_key = vocab.encode(MARK_RESPONSE)
    hits = _find_subsequence(toks, resp_key)
    if len(hits) != 1:
        raise ContractViolation(f"response key appears {len(hits)} times")
    if hits[0] + len(resp_key) != record.response_start:
        raise ContractViolation("response_start is not right after the response key")

    markers = {
        TEMPLATE_REPORT_GEN: [("instruction", MARK_INSTRUCTION), ("input", MARK_INPUT),
                              ("keywords", MARK_KEYWORDS)],
        TEMPLATE_CXR_GEN: [("instruction", MARK_INSTRUCTION),
                           ("keypatches", MARK_KEYPATCHES)],
    }[record.template]
    bounds = []
    for name, marker in markers:
        pos = _find_subsequence(toks[: hits[0]], vocab.encode(marker))
        if len(pos) != 1:
            raise ContractViolation(f"marker {marker!r} appears {len(pos)} times")
        bounds.append((name, pos[0]))
    bounds.sort(key=lambda nb: nb[1])

    out: dict[str, list[int]] = {}
    for idx, (name, start) in enumerate(bounds):
        end = bounds[idx + 1][1] if idx + 1 < len(bounds) else hits[0]
        out[name] = [int(t) for t in toks[start:end]]
    if record.template == TEMPLATE_CXR_GEN:
        # the report sits between the instruction and the keypatches marker
        instr_end = len(vocab.encode(MARK_INSTRUCTION) + vocab.encode(CXR_INSTRUCTION))
        out["report"] = out["instruction"][instr_end:]
        out["instruction"] = out["instruction"][:instr_end]
    out["response"] = [int(t) for t in toks[record.response_start:]]
    return out


# ---------------------------------------------------------------------------
# tiny autoregressive language model


@dataclass
class TinyLMConfig:
    vocab_size: int
    max_len: int = 160
    dim: int = 32
    num_heads: int = 2
    num_blocks: int = 2


def init_tiny_lm(cfg: TinyLMConfig, rng: np.random.Generator, tape: Tape
                 ) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    d = cfg.dim
    params["lm.emb"] = tape.parameter(rng.normal(0.0, 0.5, (cfg.vocab_size, d)))
    params["lm.pos"] = tape.parameter(rng.normal(0.0, 0.02, (cfg.max_len, d)))
    from .encoders import _init_affine, _init_block  # same layer layout

    for b in range(cfg.num_blocks):
        _init_block(rng, tape, d, 2 * d, params, f"lm.blk{b}")
    params["lm.ln.g"] = tape.parameter(np.ones(d))
    params["lm.ln.b"] = tape.parameter(np.zeros(d))
    _init_affine(rng, tape, d, cfg.vocab_size, params, "lm.out")
    return params


def lm_logits(params: dict[str, Tensor], ids: np.ndarray, cfg: TinyLMConfig,
              pad_mask: np.ndarray | None = None) -> Tensor:
    """Causal logits for [B, T] ids -> [B, T, V]; position t sees ids <= t."""
    ids = np.asarray(ids, dtype=np.int64)
    B, T = ids.shape
    if T > cfg.max_len:
        raise ContractViolation(f"sequence length {T} exceeds the context {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ContractViolation("token id outside the unified vocabulary")
    x = nm.gather(params["lm.emb"], ids, axis=0)
    x = nm.add(x, nm.slice_(params["lm.pos"], (slice(0, T),)))
    for b in range(cfg.num_blocks):
        x = transformer_block(x, params, f"lm.blk{b}", cfg.num_heads,
                              pad_mask=pad_mask, causal=True)
    x = nm.layer_norm(x, params["lm.ln.g"], params["lm.ln.b"])
    return nm.affine(x, params["lm.out.W"], params["lm.out.b"])


def masked_lm_loss(params: dict[str, Tensor], cfg: TinyLMConfig,
                   rec: InstructionRecord) -> Tensor:
    """Sum of -log P(token_i | tokens_<i) over positions i >= response_start."""
    if not rec.is_training:
        raise ContractViolation("masked_lm_loss on a record without a target")
    toks = rec.tokens
    logits = lm_logits(params, toks[None, :-1], cfg)          # [1, T-1, V]
    flat = nm.reshape(logits, logits.shape[1:])               # [T-1, V]
    lse = nm.logsumexp(flat, axis=-1)                         # [T-1]
    picked = nm.take_rowwise(flat, toks[1:])                  # [T-1]
    nll = nm.sub(lse, picked)
    mask = (np.arange(1, len(toks)) >= rec.response_start).astype(float)
    return nm.sum_(nm.mul(nll, Tensor(mask)))


def batch_lm_loss(params: dict[str, Tensor], cfg: TinyLMConfig,
                  recs: list[InstructionRecord], pad_id: int = 0) -> Tensor:
    """Mean over records of the per-record masked loss (records padded)."""
    if not recs:
        raise ContractViolation("empty record batch")
    T = max(len(r.tokens) for r in recs)
    ids = np.full((len(recs), T), pad_id, dtype=np.int64)
    mask = np.zeros((len(recs), T - 1))
    for i, r in enumerate(recs):
        if not r.is_training:
            raise ContractViolation("masked_lm_loss on a record without a target")
        ids[i, : len(r.tokens)] = r.tokens
        mask[i, np.arange(1, T) >= r.response_start] = 1.0
        mask[i, np.arange(1, T) >= len(r.tokens)] = 0.0
    logits = lm_logits(params, ids[:, :-1], cfg)
    lse = nm.logsumexp(logits, axis=-1)
    picked = nm.take_rowwise(nm.reshape(logits, (-1, cfg.vocab_size)),
                             ids[:, 1:].reshape(-1))
    nll = nm.sub(lse, nm.reshape(picked, lse.shape))
    total = nm.sum_(nm.mul(nll, Tensor(mask)))
    return nm.div(total, float(len(recs)))


@dataclass
class GenerationReport:
    tokens: list[int]
    substituted: int = 0
    flagged: bool = False


def generate(params: dict[str, Tensor], cfg: TinyLMConfig, rec: InstructionRecord,
             max_new: int, eos_id: int | None = None) -> list[int]:
    """Greedy decoding from the prompt (argmax, ties toward the lowest id)."""
    if rec.is_training:
        raise ContractViolation("generate expects an inference record (no target)")
    seq = [int(t) for t in rec.prompt_tokens()]
    out: list[int] = []
    tape = Tape()
    frozen = {k: Tensor(v.values) for k, v in params.items()}
    with tape.no_grad():
        for _ in range(max_new):
            window = seq[-cfg.max_len:]
            logits = lm_logits(frozen, np.asarray(window)[None], cfg)
            nxt = int(np.argmax(logits.values[0, -1]))
            if eos_id is not None and nxt == eos_id:
                break
            seq.append(nxt)
            out.append(nxt)
    return out


def validate_image_tokens(space: TokenSpace, tokens: list[int],
                          expected: int) -> GenerationReport:
    """Clamp generated ids into the image range and to the expected count.

    Substitutes the nearest valid unified id for out-of-range ones and flags
    the sample whenever any repair was needed.
    """
    lo, hi = space.offset, space.unified_size - 1
    fixed = []
    subs = 0
    for t in tokens[:expected]:
        c = min(max(int(t), lo), hi)
        if c != t:
            subs += 1
        fixed.append(c - space.offset)
    short = expected - len(fixed)
    if short > 0:
        fixed.extend([0] * short)
        subs += short
    return GenerationReport(tokens=fixed, substituted=subs, flagged=subs > 0)


# ---------------------------------------------------------------------------
# instruction dataset files and image export


def save_instruction_dataset(path: str | Path, recs: list[InstructionRecord]) -> None:
    with open(path, "w") as fh:
        for r in recs:
            fh.write(json.dumps({"template": r.template,
                                 "sections": {k: list(map(int, v))
                                              for k, v in r.sections.items()},
                                 "response_start": r.response_start,
                                 "tokens": [int(t) for t in r.tokens]}) + "\n")


def load_instruction_dataset(path: str | Path) -> list[InstructionRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(InstructionRecord(template=d["template"], tokens=d["tokens"],
                                         response_start=d["response_start"],
                                         sections=d["sections"]))
    return out


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """8-bit binary PGM export of a [H, W] (or [H, W, 1]) image in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[:, :, 0]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())
