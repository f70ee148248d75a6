"""Alignment training loop: batching, logging, checkpointing.

A training step encodes one batch of image/report pairs, computes the
bidirectional contrastive loss, and applies an SGD step. The CSV log gets
one row per step: loss, mean diagonal / off-diagonal image-to-text
similarity, and R@1 on a fixed held-out probe batch.

Data loading may prefetch batches on a worker thread (bounded queue);
ADAMATCH_THREADS=0 forces synchronous loading.
"""

from __future__ import annotations

import csv
import json
import os
import queue
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .alignment import AlignConfig, diagonal_stats, mini_batch_loss
from .config import RunConfig
from .data import SceneDataset, substream
from .encoders import (
    AlignmentModel,
    Vocabulary,
    encode_image_batch,
    encode_text_batch,
    init_image_encoder,
    init_text_encoder,
    save_checkpoint,
)
from .errors import NumericDomainError
from .numerics import AdamWState, OptimizerState, Tape, Tensor, adamw_step, sgd_step


def worker_threads() -> int:
    raw = os.environ.get("ADAMATCH_THREADS", "1")
    try:
        return max(0, int(raw))
    except ValueError:
        return 1


@dataclass
class Batch:
    ids: list[str]
    images: np.ndarray      # [b, H, W, C]
    tokens: np.ndarray      # [b, K] padded
    index: int = 0


def _pad_tokens(token_lists: list[list[int]], pad_id: int = 0) -> np.ndarray:
    K = max(len(t) for t in token_lists)
    out = np.full((len(token_lists), K), pad_id, dtype=np.int64)
    for i, t in enumerate(token_lists):
        out[i, : len(t)] = t
    return out


def make_batches(records, vocab: Vocabulary, batch_size: int,
                 rng: np.random.Generator | None = None) -> list[Batch]:
    order = np.arange(len(records))
    if rng is not None:
        rng.shuffle(order)
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        if len(chunk) < 2:
            continue  # a 1-pair batch carries no contrastive signal
        batches.append(Batch(
            ids=[r.scene_id for r in chunk],
            images=np.stack([r.load_image() for r in chunk]),
            tokens=_pad_tokens([vocab.encode(r.report) for r in chunk]),
            index=len(batches)))
    return batches


def _iter_prefetch(batch_fn, n_batches: int):
    """Yield batch_fn(i) for each i, built ahead on a worker thread."""
    if worker_threads() < 1 or n_batches <= 1:
        for i in range(n_batches):
            yield batch_fn(i)
        return
    q: queue.Queue = queue.Queue(maxsize=4)

    def run():
        for i in range(n_batches):
            q.put(batch_fn(i))
        q.put(None)

    t = threading.Thread(target=run, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is None:
            break
        yield item
    t.join()


def probe_recall_at_1(params, cfg: RunConfig, probe: Batch) -> float:
    """R@1 (image-to-text) on the probe batch, gradient-free."""
    tape = Tape(dtype=cfg.np_dtype)
    frozen = {k: Tensor(v.values) for k, v in params.items()}
    with tape.no_grad():
        images = Tensor(probe.images.astype(tape.dtype, copy=False))
        z_img, _, _ = encode_image_batch(frozen, images, cfg.stage)
        z_txt, pads = encode_text_batch(frozen, probe.tokens, cfg.stage)
        sim = _cross_similarities(z_img.values, z_txt.values, pads)
    hits = sum(1 for i in range(sim.shape[0])
               if int(np.lexsort((np.arange(sim.shape[1]), -sim[i]))[0]) == i)
    return 100.0 * hits / sim.shape[0]


def _cross_similarities(z_img: np.ndarray, z_txt: np.ndarray,
                        pads: np.ndarray) -> np.ndarray:
    def norm(v):
        return v / np.maximum(np.sqrt((v * v).sum(-1, keepdims=True)), 1e-12)

    zi, zt = norm(z_img), norm(z_txt)
    sims = np.einsum("ind,jkd->ijnk", zi, zt)
    sims = sims + np.where(pads, -1e9, 0.0)[None, :, None, :]
    return sims.max(axis=3).mean(axis=2)  # image-to-text


@dataclass
class TrainResult:
    checkpoint_dir: Path
    log_path: Path
    final_loss: float
    first_loss: float
    steps: int


def train_align(cfg: RunConfig, dataset: SceneDataset, out_dir: str | Path,
                log_every_probe: int = 1) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints" / "align"
    log_path = out_dir / "train_align.csv"

    tape = Tape(dtype=cfg.np_dtype)
    init_rng = substream(cfg.seed, "init")
    params = init_image_encoder(cfg.stage, cfg.image_hw, cfg.channels, init_rng, tape)
    params.update(init_text_encoder(cfg.stage, len(dataset.vocab),
                                    cfg.max_report_len, init_rng, tape))
    plist = [params[k] for k in sorted(params)]
    if cfg.optim.kind == "adamw":
        state = AdamWState(cfg.optim.learning_rate,
                           weight_decay=cfg.optim.weight_decay)
        step_fn = adamw_step
    else:
        state = OptimizerState(cfg.optim.learning_rate, cfg.optim.momentum,
                               cfg.optim.weight_decay)
        step_fn = sgd_step

    train_records = dataset.split("train")
    probe_records = (dataset.split("val") or train_records)[: cfg.probe_size]
    probe = make_batches(probe_records, dataset.vocab, len(probe_records))[0]

    order_rng = substream(cfg.seed, "batch-order")
    align_cfg = AlignConfig(temperature=cfg.align.temperature,
                            batch_size=cfg.batch_size,
                            paper_norm=cfg.align.paper_norm)

    steps_per_epoch = max(len(train_records) // cfg.batch_size, 1)
    total_steps = cfg.epochs * steps_per_epoch

    step = 0
    first_loss = None
    last_loss = float("nan")
    with open(log_path, "w", newline="") as fh:
        log = csv.writer(fh)
        log.writerow(["step", "loss", "mean_diag_sim", "mean_offdiag_sim",
                      "probe_r_at_1"])
        for epoch in range(cfg.epochs):
            batches = make_batches(train_records, dataset.vocab, cfg.batch_size,
                                   order_rng)
            for batch in _iter_prefetch(lambda i: batches[i], len(batches)):
                images = Tensor(batch.images.astype(tape.dtype, copy=False))
                z_img, _, _ = encode_image_batch(params, images, cfg.stage)
                z_txt, pads = encode_text_batch(params, batch.tokens, cfg.stage)
                report, sim = mini_batch_loss(z_img, z_txt, pads, align_cfg)
                loss = float(report.total.values)
                if not np.isfinite(loss):
                    _dump_diagnostics(out_dir, batch, report)
                    raise NumericDomainError(
                        f"non-finite loss at step {step}; batch dumped")
                tape.backward(report.total)
                state.learning_rate = cfg.optim.lr_at(step, total_steps)
                step_fn(state, plist)
                tape.clear()

                diag, off = diagonal_stats(sim)
                r1 = (probe_recall_at_1(params, cfg, probe)
                      if step % log_every_probe == 0 else "")
                log.writerow([step, f"{loss:.6f}", f"{diag:.6f}", f"{off:.6f}",
                              f"{r1:.2f}" if r1 != "" else ""])
                if first_loss is None:
                    first_loss = loss
                last_loss = loss
                step += 1

    save_checkpoint(ckpt_dir, params, cfg.stage, vocab=dataset.vocab,
                    extra={"seed": cfg.seed, "epochs": cfg.epochs})
    return TrainResult(checkpoint_dir=ckpt_dir, log_path=log_path,
                       final_loss=last_loss, first_loss=first_loss or last_loss,
                       steps=step)


def _dump_diagnostics(out_dir: Path, batch: Batch, report) -> None:
    diag_dir = out_dir / "diagnostics"
    diag_dir.mkdir(parents=True, exist_ok=True)
    nm.save_tensor(diag_dir / "bad_batch_images.admt", batch.images)
    np.save(diag_dir / "bad_batch_tokens.npy", batch.tokens)
    (diag_dir / "bad_batch.json").write_text(json.dumps({
        "ids": batch.ids,
        "per_item_i2t": report.per_item_i2t,
        "per_item_t2i": report.per_item_t2i}))


def load_model(out_dir: str | Path) -> AlignmentModel:
    return AlignmentModel.from_checkpoint(Path(out_dir) / "checkpoints" / "align")
