"""SGD training loop with cosine learning-rate annealing."""

from __future__ import annotations

import math
import threading
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import NumericError, Tape, Tensor
from .config import ModelConfig, TrainConfig
from .data import load_dataset
from .detect import assign_targets, total_loss
from .model import Detector, build_detector


def cosine_lr(step: int, total_steps: int, lr_initial: float, lr_final: float) -> float:
    """lr(0) = lr_initial, lr(total_steps-1) = lr_final."""
    if total_steps <= 1:
        return lr_initial
    t = step / (total_steps - 1)
    return lr_final + 0.5 * (lr_initial - lr_final) * (1.0 + math.cos(math.pi * t))


class SGD:
    """SGD with momentum and decoupled-into-gradient weight decay."""

    def __init__(self, params, momentum: float, weight_decay: float):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def clip_grad_norm(self, max_norm: float) -> float:
        """Scale all gradients so their global L2 norm is at most max_norm."""
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = math.sqrt(total)
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / norm
            for p in self.params:
                if p.grad is not None:
                    p.grad = p.grad * scale
        return norm


def _mini_batches(n: int, batch_size: int):
    """Deterministic round-robin batching over sample indices."""
    order = np.arange(n)
    pos = 0
    while True:
        idx = [(pos + k) % n for k in range(min(batch_size, n))]
        yield order[idx]
        pos = (pos + batch_size) % n


def _grid_shapes(cfg: ModelConfig):
    return [(cfg.input_size // s, cfg.input_size // s) for s in cfg.level_strides]


def compute_batch_loss(model: Detector, rgb, ir, labels, cfg: ModelConfig,
                       tc: TrainConfig):
    preds = model(Tensor(rgb), Tensor(ir))
    grids = [(p[0].shape[2], p[0].shape[3]) for p in preds]
    assignments = [assign_targets(lab, grids, cfg.level_strides, cfg.input_size)
                   for lab in labels]
    return total_loss(preds, assignments, labels, cfg,
                      tc.lambda_cls, tc.lambda_box, tc.lambda_dfl)


def train(cfg: ModelConfig, tc: TrainConfig, data_dir, ckpt_path,
          log=print, model: Detector | None = None) -> Detector:
    """Run the SGD loop; logs ``step total cls box dfl lr`` per step and
    writes the final checkpoint."""
    ids, rgbs, irs, labels = load_dataset(data_dir)
    if not ids:
        raise IOError(f"dataset at {data_dir} is empty")
    if model is None:
        model = build_detector(cfg, seed=tc.seed)
    opt = SGD(model.parameters(), tc.momentum, tc.weight_decay)
    batches = _mini_batches(len(ids), tc.batch_size)
    for step in range(tc.steps):
        idx = next(batches)
        lr = cosine_lr(step, tc.steps, tc.lr_initial, tc.lr_final)
        opt.zero_grad()
        with Tape() as tape:
            if tc.threads > 1:
                loss, comps = _sharded_loss(model, rgbs, irs, labels, idx, cfg, tc)
            else:
                loss, comps = compute_batch_loss(
                    model, rgbs[idx], irs[idx], [labels[i] for i in idx], cfg, tc)
                if not math.isfinite(comps["total"]):
                    raise NumericError(f"non-finite loss at step {step}")
                ad.backward(tape, loss)
        if tc.grad_clip > 0:
            opt.clip_grad_norm(tc.grad_clip)
        opt.step(lr)
        log(f"{step} {comps['total']:.6f} {comps['cls']:.6f} "
            f"{comps['box']:.6f} {comps['dfl']:.6f} {lr:.6f}")
    if ckpt_path is not None:
        checkpoint.save(ckpt_path, model.state_dict())
    return model


def _sharded_loss(model, rgbs, irs, labels, idx, cfg, tc):
    """Opt-in data-parallel forward: shards run on threads with private
    tapes; backward sweeps happen afterwards in fixed shard order."""
    shards = [s for s in np.array_split(idx, tc.threads) if len(s)]
    n = len(idx)
    results: list = [None] * len(shards)

    def run(si, s):
        with Tape() as tape:
            loss, comps = compute_batch_loss(
                model, rgbs[s], irs[s], [labels[i] for i in s], cfg, tc)
            scaled = ad.mul(loss, Tensor(len(s) / n))
        results[si] = (tape, scaled, comps, len(s))

    threads = [threading.Thread(target=run, args=(si, s)) for si, s in enumerate(shards)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    comps = {k: sum(r[2][k] * r[3] for r in results) / n for k in results[0][2]}
    if not math.isfinite(comps["total"]):
        raise NumericError("non-finite loss in sharded step")
    # fixed shard order keeps the gradient reduction deterministic
    for tape, scaled, _, _ in results:
        ad.backward(tape, scaled)
    return Tensor(comps["total"]), comps
