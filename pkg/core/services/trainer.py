"""
Pre-training loop for the aggregation transformer

Batches come from a deterministic stream: the batch for global step s is drawn
from default_rng([seed, s]), so a resumed run sees exactly the batches the
uninterrupted run would have seen.
"""
import os
import math
import time
import queue
import logging
import threading
from dataclasses import dataclass
from typing import Iterator, List, Optional

import numpy as np
import torch
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from core.schemas.schemas import PriorConfig, TrainRunConfig
from core.services.pfn_model import (
    PosteriorHistogram,
    PosteriorModel,
    RiemannSupport,
    build_riemann_support,
    cross_entropy_loss,
    histogram_stats,
    init_model,
    load_checkpoint,
    restore_optimizer,
    save_checkpoint,
    softmax,
)
from core.services.prior_sampler import TrainingBatch, generate_training_batch, sample_prior_targets
from helpers.errors import NonFiniteLoss
from helpers.persistence import write_csv

logger = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "step", "mean_loss", "heldout_nll", "lr", "wall_ms"]
CHECKPOINT_NAME = "checkpoint.fomemo"
METRICS_NAME = "metrics.csv"
HELDOUT_STREAM = 2 ** 31 - 1
SUPPORT_STREAM = 2 ** 31 - 2


@dataclass
class CalibrationReport:
    """Held-out quality of a model on fresh prior tasks"""
    nll: float
    coverage_50: float
    coverage_90: float
    baseline_nll: float
    n_targets: int


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    steps: int
    final_loss: Optional[float]


def lr_schedule(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """
    Linear warmup to peak_lr, then cosine annealing to 0 at total_steps

    Args:
        step: Global step, 0 <= step <= total_steps
        total_steps: Steps of the whole run
        warmup_steps: Steps of the linear ramp
        peak_lr: Learning rate at the end of the ramp

    Returns:
        The learning rate for this step
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside 0..{total_steps}")
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    decay_steps = total_steps - warmup_steps
    if decay_steps <= 0:
        return peak_lr
    progress = (step - warmup_steps) / decay_steps
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def batch_for_step(seed: int, step: int, prior: PriorConfig, batch_size: int, K_x: int, K_y: int) -> TrainingBatch:
    """The training batch of global step `step`"""
    rng = np.random.default_rng([seed, step])
    return generate_training_batch(rng, prior, batch_size, pad_features=K_x, pad_objectives=K_y)


class BatchStream:
    """
    Producer thread that prepares batches ahead of the optimizer

    With prefetch = 0 batches are generated inline on the consumer's thread.
    """

    def __init__(self, config: TrainRunConfig, start_step: int, end_step: int):
        self.config = config
        self.start_step = start_step
        self.end_step = end_step
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(config.train.prefetch, 1))
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def _make(self, step: int) -> TrainingBatch:
        t = self.config.train
        return batch_for_step(t.seed, step, t.prior, t.batch_size, self.config.model.max_features, self.config.model.max_objectives)

    def _produce(self) -> None:
        try:
            for step in range(self.start_step, self.end_step):
                if self._stop.is_set():
                    return
                batch = self._make(step)
                while not self._stop.is_set():
                    try:
                        self._queue.put((step, batch), timeout=0.1)
                        break
                    except queue.Full:
                        continue
        except Exception as e:
            self._queue.put((None, e))

    def __iter__(self) -> Iterator[TrainingBatch]:
        if self.config.train.prefetch == 0:
            for step in range(self.start_step, self.end_step):
                yield self._make(step)
            return
        self._thread = threading.Thread(target=self._produce, name="batch-producer", daemon=True)
        self._thread.start()
        for _ in range(self.start_step, self.end_step):
            step, item = self._queue.get()
            if step is None:
                raise item
            yield item

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)


def batch_tensors(batch: TrainingBatch, dtype: torch.dtype = torch.float32, device: str = "cpu"):
    """Model inputs and targets of a TrainingBatch as tensors"""
    def t(a, kind=dtype):
        return torch.as_tensor(np.asarray(a), dtype=kind, device=device)
    return (
        t(batch.x), t(batch.y), t(batch.preference),
        t(batch.n, torch.long), t(batch.d, torch.long), t(batch.m, torch.long),
        t(batch.target), torch.as_tensor(~batch.traj_mask, device=device),
    )


def batch_loss(model: PosteriorModel, batch: TrainingBatch) -> torch.Tensor:
    """Mean query-position negative log-likelihood of one batch"""
    dtype = next(model.network.parameters()).dtype
    x, y, pref, n, d, m, target, query_mask = batch_tensors(batch, dtype, model.device)
    logits = model.network(x, y, pref, n, d, m)
    return cross_entropy_loss(logits, target, model.support, mask=query_mask)


def heldout_batches(seed: int, prior: PriorConfig, n_tasks: int, batch_size: int, K_x: int, K_y: int) -> List[TrainingBatch]:
    """Seed-pinned held-out tasks, identical at every evaluation"""
    rng = np.random.default_rng([seed, HELDOUT_STREAM])
    batches = []
    remaining = n_tasks
    while remaining > 0:
        size = min(batch_size, remaining)
        batches.append(generate_training_batch(rng, prior, size, pad_features=K_x, pad_objectives=K_y))
        remaining -= size
    return batches


def prior_baseline_nll(support: RiemannSupport, targets) -> float:
    """NLL of the bin-frequency baseline: every equal-mass bin gets probability 1 / B"""
    targets = torch.as_tensor(np.asarray(targets, dtype=float))
    logits = torch.zeros(targets.shape + (support.n_bins,), dtype=targets.dtype)
    return float(cross_entropy_loss(logits, targets, support))


def evaluate_batches(model: PosteriorModel, batches: List[TrainingBatch]) -> CalibrationReport:
    """NLL and central-interval coverage of the model on prepared batches"""
    dtype = next(model.network.parameters()).dtype
    nll_sum = 0.0
    count = 0
    cdf_values = []
    targets = []
    model.network.eval()
    with torch.no_grad():
        for batch in batches:
            x, y, pref, n, d, m, target, query_mask = batch_tensors(batch, dtype, model.device)
            logits = model.network(x, y, pref, n, d, m)
            k = int(query_mask.sum())
            nll_sum += float(cross_entropy_loss(logits, target, model.support, mask=query_mask)) * k
            count += k
            q_logits = logits[query_mask].double().cpu().numpy()
            q_target = target[query_mask].double().cpu().numpy()
            hist = PosteriorHistogram(model.support, softmax(q_logits))
            cdf_values.append(histogram_stats(hist).cdf(q_target))
            targets.append(q_target)
    cdf_all = np.concatenate(cdf_values)
    target_all = np.concatenate(targets)
    return CalibrationReport(
        nll=nll_sum / count,
        coverage_50=float(np.mean((cdf_all >= 0.25) & (cdf_all <= 0.75))),
        coverage_90=float(np.mean((cdf_all >= 0.05) & (cdf_all <= 0.95))),
        baseline_nll=prior_baseline_nll(model.support, target_all),
        n_targets=count,
    )


def eval_calibration(
    model: PosteriorModel,
    n_tasks: int,
    rng: np.random.Generator,
    prior: Optional[PriorConfig] = None,
    batch_size: int = 64,
) -> CalibrationReport:
    """
    Held-out NLL and empirical coverage of the central 50% / 90% intervals

    Args:
        model: Model to evaluate
        n_tasks: Fresh prior tasks to draw
        rng: Generator for the tasks
        prior: Synthetic prior; defaults to PriorConfig()
        batch_size: Tasks per forward pass

    Returns:
        CalibrationReport, including the bin-frequency baseline NLL on the same targets
    """
    prior = prior or PriorConfig()
    cfg = model.config
    batches = []
    remaining = n_tasks
    while remaining > 0:
        size = min(batch_size, remaining)
        batches.append(generate_training_batch(rng, prior, size, pad_features=cfg.max_features, pad_objectives=cfg.max_objectives))
        remaining -= size
    return evaluate_batches(model, batches)


def build_support_for(config: TrainRunConfig) -> RiemannSupport:
    t = config.train
    rng = np.random.default_rng([t.seed, SUPPORT_STREAM])
    logger.info(f"Sampling {t.support_samples} prior targets for the Riemann support")
    targets = sample_prior_targets(rng, t.prior, t.support_samples, batch_size=t.batch_size)
    return build_riemann_support(targets, config.model.n_bins)


def make_optimizer(model: PosteriorModel) -> torch.optim.Adam:
    return torch.optim.Adam(model.network.parameters(), lr=0.0, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)


def _optimizer_step(model: PosteriorModel, optimizer: torch.optim.Optimizer, batch: TrainingBatch, lr: float, grad_clip: float) -> float:
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.network.train()
    optimizer.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch)
    value = float(loss)
    if not math.isfinite(value):
        logger.error(f"Non-finite training loss {value}")
        raise NonFiniteLoss(f"training loss became {value}")
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.network.parameters(), grad_clip)
    optimizer.step()
    return value


def dry_run(config: TrainRunConfig, device: str = "cpu") -> float:
    """Build the model on a small support and take one optimizer step"""
    t = config.train
    rng = np.random.default_rng([t.seed, SUPPORT_STREAM])
    targets = sample_prior_targets(rng, t.prior, 1000, batch_size=t.batch_size)
    model = init_model(config.model, build_riemann_support(targets, config.model.n_bins), seed=t.seed, device=device)
    optimizer = make_optimizer(model)
    batch = batch_for_step(t.seed, 0, t.prior, t.batch_size, config.model.max_features, config.model.max_objectives)
    loss = _optimizer_step(model, optimizer, batch, t.peak_lr, t.grad_clip)
    logger.info(f"Dry run finished, loss {loss:.4f}")
    return loss


def train(
    config: TrainRunConfig,
    out_dir: str,
    resume_from: Optional[str] = None,
    device: str = "cpu",
    progress: bool = True,
) -> TrainResult:
    """
    Pre-train the aggregation transformer on the synthetic prior

    Runs epochs x steps_per_epoch Adam steps with warmup + cosine learning rate,
    gradient clipping and a per-epoch CSV row; checkpoints every eval_interval
    epochs and at the end.

    Args:
        config: Validated training configuration
        out_dir: Directory for the checkpoint and metrics CSV
        resume_from: Checkpoint written by an earlier, interrupted call
        device: Torch device
        progress: Show a tqdm progress bar

    Returns:
        TrainResult with the artifact paths

    Raises:
        NonFiniteLoss: If a step produces NaN or Inf
        CheckpointIOError: If a checkpoint cannot be written
    """
    t = config.train
    os.makedirs(out_dir, exist_ok=True)
    checkpoint_path = os.path.join(out_dir, CHECKPOINT_NAME)
    metrics_path = os.path.join(out_dir, METRICS_NAME)
    total_steps = t.epochs * t.steps_per_epoch
    warmup_steps = t.warmup_epochs * t.steps_per_epoch

    if resume_from:
        loaded = load_checkpoint(resume_from, device=device)
        model = loaded.model
        optimizer = make_optimizer(model)
        restore_optimizer(optimizer, model, loaded)
        start_step = int(loaded.header.get("step", 0))
        logger.info(f"Resuming training from {resume_from} at step {start_step}")
    else:
        model = init_model(config.model, build_support_for(config), seed=t.seed, device=device)
        optimizer = make_optimizer(model)
        start_step = 0
        if os.path.exists(metrics_path):
            os.remove(metrics_path)

    heldout = heldout_batches(t.seed, t.prior, t.heldout_tasks, t.batch_size, config.model.max_features, config.model.max_objectives)
    header = {"schema": 1, "train_config": config.model_dump(mode="json", by_alias=True)}

    def checkpoint(step: int, epoch: int) -> None:
        save_checkpoint(checkpoint_path, model, header={**header, "step": step, "epoch": epoch}, optimizer=optimizer)

    logger.info(f"Training for {total_steps} steps ({t.epochs} epochs x {t.steps_per_epoch}) from step {start_step}")
    stream = BatchStream(config, start_step, total_steps)
    batches = iter(stream)
    step = start_step
    last_loss: Optional[float] = None
    start_epoch = start_step // t.steps_per_epoch if t.steps_per_epoch else 0
    try:
        with logging_redirect_tqdm():
            bar = tqdm(total=total_steps, initial=start_step, disable=not progress, desc="train", unit="step")
            for epoch in range(start_epoch, t.epochs):
                epoch_start = time.perf_counter()
                losses = []
                epoch_end = (epoch + 1) * t.steps_per_epoch
                while step < epoch_end:
                    batch = next(batches)
                    lr = lr_schedule(step, total_steps, warmup_steps, t.peak_lr)
                    losses.append(_optimizer_step(model, optimizer, batch, lr, t.grad_clip))
                    step += 1
                    bar.update(1)
                    bar.set_postfix(loss=f"{losses[-1]:.4f}")
                    logger.debug(f"step {step} loss {losses[-1]:.5f} lr {lr:.3e}")

                report = evaluate_batches(model, heldout)
                mean_loss = float(np.mean(losses)) if losses else None
                last_loss = mean_loss if mean_loss is not None else last_loss
                wall_ms = int((time.perf_counter() - epoch_start) * 1000)
                lr_now = lr_schedule(min(step, total_steps), total_steps, warmup_steps, t.peak_lr)
                write_csv(metrics_path, METRICS_HEADER,
                          [[epoch + 1, step, "" if mean_loss is None else f"{mean_loss:.6f}", f"{report.nll:.6f}", f"{lr_now:.6e}", wall_ms]],
                          append=True)
                logger.info(f"Epoch {epoch + 1}/{t.epochs}: loss {mean_loss}, held-out NLL {report.nll:.4f} (baseline {report.baseline_nll:.4f})")
                if (epoch + 1) % t.eval_interval == 0 and epoch + 1 < t.epochs:
                    checkpoint(step, epoch + 1)
            bar.close()
    finally:
        stream.close()

    checkpoint(step, t.epochs)
    return TrainResult(checkpoint_path=checkpoint_path, metrics_path=metrics_path, steps=step, final_loss=last_loss)
