"""Training loop: synthetic pairs, AdamW, cosine schedule, validation, checkpoints.

Every mini-batch is a pure function of ``(seed, iteration)``, so a run
resumed from a checkpoint replays exactly the batches an uninterrupted run
would have seen.  Batches are produced on a background thread through a
bounded queue.
"""

from __future__ import annotations

import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, losses
from .autograd import Tape, Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, format_config
from .errors import ConfigError, NumericError
from .inference import restore
from .model import init_store, model_forward
from .optim import adamw_step, cosine_lr

VAL_STREAM = 1_000_000  # pair index offset of the validation stream
WARMUP_PATCH = 48
LOG_NAME = "metrics.log"
FINAL_CKPT = "final.ckpt"


@dataclass
class TrainResult:
    final_loss: float
    baseline_psnr: float
    val_psnr: float
    val_ssim: float
    val_pearson: float
    out_dir: Path
    history: list = field(default_factory=list)

    @property
    def gain_db(self) -> float:
        return self.val_psnr - self.baseline_psnr

    def summary_line(self) -> str:
        return (f"summary iterations={len(self.history) and self.history[-1]['iter']} "
                f"final_loss={self.final_loss!r} baseline_psnr={self.baseline_psnr:.6f} "
                f"val_psnr={self.val_psnr:.6f} val_ssim={self.val_ssim:.6f} "
                f"val_pearson={self.val_pearson:.8f} gain_db={self.gain_db:.6f}")


def load_datasets(run: RunConfig) -> tuple:
    t = run.train
    if run.data_dir:
        pairs = data.load_pair_dir(run.data_dir)
        if len(pairs) <= t.val_pairs:
            raise ConfigError(f"{run.data_dir} holds {len(pairs)} pairs; need more than val_pairs={t.val_pairs}")
        return pairs[:-t.val_pairs], pairs[-t.val_pairs:]
    cfg = data.SynthConfig(kinds=tuple(run.kinds))
    train = data.generate_pairs(t.train_pairs, t.seed, cfg)
    val = data.generate_pairs(t.val_pairs, t.seed, cfg, start=VAL_STREAM)
    return train, val


def patch_size_at(it: int, run: RunConfig) -> int:
    t = run.train
    if t.two_stage and it < t.iterations // 2:
        return min(WARMUP_PATCH, t.patch_size)
    return t.patch_size


def make_batch(it: int, pairs: list, run: RunConfig) -> tuple:
    """Mini-batch for 0-based iteration ``it``: ``(degraded, clean)`` stacks."""
    t = run.train
    rng = np.random.default_rng([t.seed, 7, it])
    size = patch_size_at(it, run)
    picks = rng.integers(0, len(pairs), size=t.batch_size)
    lq, gt = [], []
    for i in picks:
        clean, degraded = pairs[int(i)]
        pair = data.augment_flips(data.sample_patch((clean, degraded), size, rng), rng)
        gt.append(pair[0])
        lq.append(pair[1])
    return np.stack(lq).astype(np.float32), np.stack(gt).astype(np.float32)


def _producer(q: queue.Queue, start: int, stop: int, pairs, run, halt: threading.Event):
    try:
        for it in range(start, stop):
            item = (it, make_batch(it, pairs, run))
            while not halt.is_set():
                try:
                    q.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if halt.is_set():
                return
    except BaseException as exc:  # surfaced by the consumer
        q.put((None, exc))


def evaluate(pairs: list, run: RunConfig, store) -> dict:
    """Mean PSNR / SSIM / Pearson of restored validation images against clean."""
    restored = restore([d for _, d in pairs], run.model, store)
    psnr = [losses.psnr(r, c) for r, (c, _) in zip(restored, pairs)]
    ssim = [losses.ssim(r, c) for r, (c, _) in zip(restored, pairs)]
    rho = [losses.pearson(r.astype(np.float64), c.astype(np.float64)).item() for r, (c, _) in zip(restored, pairs)]
    return {"psnr": float(np.mean(psnr)), "ssim": float(np.mean(ssim)), "pearson": float(np.mean(rho))}


def baseline(pairs: list) -> float:
    return float(np.mean([losses.psnr(d, c) for c, d in pairs]))


def format_event(event: dict) -> str:
    line = f"iter={event['iter']} loss={event['loss']!r} lr={event['lr']!r}"
    if "psnr" in event:
        line += f" psnr={event['psnr']:.6f} ssim={event['ssim']:.6f}"
    return line


def parse_log(path) -> list:
    """Read ``iter=... loss=...`` lines back into dicts (summary lines skipped)."""
    events = []
    for line in Path(path).read_text().splitlines():
        if not line.startswith("iter="):
            continue
        ev = {}
        for tok in line.split():
            k, v = tok.split("=", 1)
            ev[k] = int(v) if k == "iter" else float(v)
        events.append(ev)
    return events


def parse_summary(line: str) -> dict:
    return {k: float(v) for k, v in (t.split("=", 1) for t in line.split()[1:])}


def train(run: RunConfig, resume=None, echo=print, plot: bool = True) -> TrainResult:
    """Train per ``run``; writes the metrics log, checkpoints and a curve figure to ``run.out_dir``."""
    t = run.train
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(run))
    train_pairs, val_pairs = load_datasets(run)
    if min(min(c.shape[-2:]) for c, _ in train_pairs) < t.patch_size:
        raise ConfigError(f"training images are smaller than patch_size={t.patch_size}")

    log_path = out / LOG_NAME
    history: list = []
    if resume is not None:
        ckpt_config, store = load_checkpoint(resume)
        if ckpt_config.as_dict() | {"alpha": 0} != run.model.as_dict() | {"alpha": 0}:
            raise ConfigError("checkpoint model configuration differs from the run configuration")
        start = store.step
        if start > t.iterations:
            raise ConfigError(f"checkpoint is at step {start}, past iterations={t.iterations}")
        if log_path.exists():
            history = [e for e in parse_log(log_path) if e["iter"] <= start]
    else:
        store = init_store(run.model, seed=t.seed)
        start = 0
    with open(log_path, "w") as fh:
        fh.writelines(format_event(e) + "\n" for e in history)

    base = baseline(val_pairs)
    echo(f"baseline_psnr={base:.6f} params={store.num_parameters()} start={start}")
    halt = threading.Event()
    q: queue.Queue = queue.Queue(maxsize=4)
    worker = threading.Thread(target=_producer, args=(q, start, t.iterations, train_pairs, run, halt), daemon=True)
    worker.start()
    t0 = time.perf_counter()
    loss_value = history[-1]["loss"] if history else math.nan
    metrics = None
    try:
        for _ in range(start, t.iterations):
            it, batch = q.get()
            if it is None:
                raise batch
            lq, gt = batch
            lr = cosine_lr(it, t)
            store.zero_grad()
            with Tape() as tape:
                pred = model_forward(Tensor(lq), run.model, store)
                loss = losses.total_loss(pred, Tensor(gt), t.alpha)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericError(f"non-finite loss {loss_value} at iteration {it + 1}")
            backward(tape, loss)
            adamw_step(store, lr, weight_decay=t.weight_decay)
            event = {"iter": it + 1, "loss": loss_value, "lr": lr}
            done = it + 1
            if (t.val_every and done % t.val_every == 0) or done == t.iterations:
                metrics = evaluate(val_pairs, run, store)
                event.update(psnr=metrics["psnr"], ssim=metrics["ssim"])
            history.append(event)
            line = format_event(event)
            with open(log_path, "a") as fh:
                fh.write(line + "\n")
            echo(line)
            if t.checkpoint_every and done % t.checkpoint_every == 0:
                save_checkpoint(out / f"step{done:06d}.ckpt", run.model, store)
    finally:
        halt.set()
        worker.join(timeout=5)

    if metrics is None:  # nothing left to train (resumed at the end)
        metrics = evaluate(val_pairs, run, store)
    save_checkpoint(out / FINAL_CKPT, run.model, store)
    result = TrainResult(final_loss=loss_value, baseline_psnr=base, val_psnr=metrics["psnr"],
                         val_ssim=metrics["ssim"], val_pearson=metrics["pearson"], out_dir=out,
                         history=history)
    summary = result.summary_line()
    with open(log_path, "a") as fh:
        fh.write(summary + "\n")
    echo(summary)
    echo(f"wall_s={time.perf_counter() - t0:.1f}")
    if plot and history:
        from .plotting import training_curves
        training_curves(history, out / "curve.png", baseline_psnr=base)
    return result
