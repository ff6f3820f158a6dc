"""Adam optimization, warmup schedule, and the training loop.

Every per-step random stream (batch sampling, dropout) is derived from
(seed, stream id, step), so a resumed run replays exactly the stream an
uninterrupted run would have seen and trajectories match bit for bit.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .checkpoint import Checkpoint, average_checkpoints, list_checkpoints, load_checkpoint, save_checkpoint
from .model import Seq2SeqModel, config_digest
from .nn import label_smoothed_ce
from .tasks import EOS, SyntheticTask, generate_task, make_batch, sample_batch
from .tensor import NumericalError, Tape, Tensor

_DATA_STREAM, _DROPOUT_STREAM = 101, 202

__all__ = [
    "AdamState",
    "TrainingSpec",
    "TrainResult",
    "adam_init",
    "adam_step",
    "average_checkpoints",
    "lr_schedule",
    "token_accuracy",
    "train",
]


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: Dict[str, Tensor], beta1=0.9, beta2=0.98, eps=1e-9) -> AdamState:
    state = AdamState(beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(state: AdamState, params: Dict[str, Tensor], lr: float) -> None:
    """One bias-corrected Adam update in place; missing grads count as zero."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p.data = p.data - update.astype(p.data.dtype)


def lr_schedule(step: int, d_model: int, warmup: int) -> float:
    """Inverse-sqrt schedule with linear warmup; continuous at the knee."""
    if step < 1 or warmup < 1:
        raise ValueError("lr_schedule needs step >= 1 and warmup >= 1")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def token_accuracy(logits: np.ndarray, targets: np.ndarray, pad_id: int) -> float:
    nonpad = targets != pad_id
    if not nonpad.any():
        return 0.0
    pred = logits.argmax(axis=-1)
    return float((pred == targets)[nonpad].mean())


@dataclass
class TrainingSpec:
    steps: int = 1000
    batch_tokens: int = 1024
    warmup: int = 400
    lr_factor: float = 1.0
    label_smoothing: float = 0.1
    checkpoint_every: int = 500
    log_every: int = 1

    def validate(self) -> None:
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_tokens < 4:
            raise ValueError(f"batch_tokens must be >= 4, got {self.batch_tokens}")
        if self.warmup < 1:
            raise ValueError(f"warmup must be >= 1, got {self.warmup}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.log_every < 1:
            raise ValueError(f"log_every must be >= 1, got {self.log_every}")


@dataclass
class TrainResult:
    final_step: int
    checkpoints: List[Path]
    metrics_path: Path
    final_loss: Optional[float]


def _step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, stream, step)))


def _checkpoint_path(ckpt_dir: Path, step: int) -> Path:
    return ckpt_dir / f"step_{step:06d}.ckpt"


def _optim_path(ckpt_dir: Path, step: int) -> Path:
    return ckpt_dir / f"step_{step:06d}.optim"


def _save_state(ckpt_dir: Path, model: Seq2SeqModel, state: AdamState, step: int, digest: bytes) -> Path:
    path = _checkpoint_path(ckpt_dir, step)
    save_checkpoint(path, Checkpoint(params=model.state_dict(), step=step, config_digest=digest))
    moments = {}
    for name in state.m:
        moments[f"m.{name}"] = state.m[name]
        moments[f"v.{name}"] = state.v[name]
    save_checkpoint(_optim_path(ckpt_dir, step), Checkpoint(params=moments, step=step, config_digest=digest))
    return path


def train(model: Seq2SeqModel, task: SyntheticTask, spec: TrainingSpec, out_dir,
          seed: int = 0, resume: bool = False) -> TrainResult:
    """Train ``model`` on the task's train split, emitting run artifacts.

    Writes ``metrics.jsonl`` (one JSON object per logged step) and periodic
    checkpoints under ``checkpoints/``.  On loss divergence the run aborts
    with the last good checkpoint intact.
    """
    spec.validate()
    task.validate()
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    digest = config_digest(model.config)
    params = model.parameters()

    start_step = 0
    if resume:
        existing = list_checkpoints(ckpt_dir)
        if not existing:
            raise FileNotFoundError(f"no checkpoints to resume from in {ckpt_dir}")
        ckpt = load_checkpoint(existing[-1])
        if ckpt.config_digest != digest:
            raise NumericalError("checkpoint was produced by a different configuration")
        model.load_state(ckpt.params)
        optim = load_checkpoint(_optim_path(ckpt_dir, ckpt.step))
        state = adam_init(params)
        state.step = ckpt.step
        for name in params:
            state.m[name] = optim.params[f"m.{name}"].astype(model.dtype)
            state.v[name] = optim.params[f"v.{name}"].astype(model.dtype)
        start_step = ckpt.step
        log_mode = "a"
    else:
        state = adam_init(params)
        _save_state(ckpt_dir, model, state, 0, digest)
        log_mode = "w"

    eps_ls = spec.label_smoothing
    final_loss = None
    with open(metrics_path, log_mode) as log:
        for step in range(start_step + 1, spec.steps + 1):
            t0 = time.perf_counter()
            batch = sample_batch(task, "train", spec.batch_tokens, _step_rng(seed, _DATA_STREAM, step))
            drop_rng = _step_rng(seed, _DROPOUT_STREAM, step)
            with Tape() as tape:
                logits = model.forward_train(batch, rng=drop_rng)
                loss = label_smoothed_ce(logits, batch.tgt_out, eps_ls, batch.pad_id)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericalError(
                    f"training diverged at step {step}; last good checkpoint is preserved"
                )
            tape.backward(loss)
            lr = spec.lr_factor * lr_schedule(step, model.config.d_model, spec.warmup)
            adam_step(state, params, lr)
            model.zero_grad()
            final_loss = loss_value
            if step % spec.log_every == 0 or step == spec.steps:
                wall_ms = (time.perf_counter() - t0) * 1000.0
                log.write(json.dumps({
                    "step": step,
                    "loss": loss_value,
                    "token_accuracy": token_accuracy(logits.data, batch.tgt_out, batch.pad_id),
                    "lr": lr,
                    "wall_ms": round(wall_ms, 3),
                }) + "\n")
            if step % spec.checkpoint_every == 0 or step == spec.steps:
                _save_state(ckpt_dir, model, state, step, digest)

    return TrainResult(
        final_step=spec.steps,
        checkpoints=[Path(p) for p in list_checkpoints(ckpt_dir)],
        metrics_path=metrics_path,
        final_loss=final_loss,
    )


def evaluate_model(model: Seq2SeqModel, task: SyntheticTask, n_examples: int = 32,
                   beam_size: int = 4, alpha: float = 0.6, split: str = "valid",
                   label_smoothing: float = 0.1, seed: int = 0) -> Dict[str, float]:
    """Held-out loss, token accuracy, BLEU, and exact-sequence accuracy."""
    from .decoding import beam_search
    from .metrics import bleu, exact_match

    pairs = generate_task(task, split, n_examples, seed=seed)
    batch = make_batch(pairs)
    logits = model.forward_train(batch)
    loss = label_smoothed_ce(logits, batch.tgt_out, label_smoothing, batch.pad_id)
    max_len = min(model.config.max_len, task.max_len + 2)
    decoded = [
        beam_search(model, np.array(src + (EOS,)), beam_size=beam_size, alpha=alpha,
                    max_len=max_len).tokens
        for src, _ in pairs
    ]
    references = [list(tgt) for _, tgt in pairs]
    return {
        "loss": loss.item(),
        "token_accuracy": token_accuracy(logits.data, batch.tgt_out, batch.pad_id),
        "bleu": bleu(decoded, references),
        "exact_match": exact_match(decoded, references),
    }


def averaged_model_checkpoint(run_dir, k: int, strict: bool = True) -> Checkpoint:
    """Average the last ``k`` checkpoints of a run directory.

    With ``strict=False`` and fewer than k checkpoints available, averages
    what is there instead of failing.
    """
    paths = list_checkpoints(Path(run_dir) / "checkpoints")
    if not paths:
        raise FileNotFoundError(f"no checkpoints in {run_dir}")
    if len(paths) < k:
        if strict:
            raise ValueError(f"requested last {k} checkpoints but only {len(paths)} exist")
        k = len(paths)
    return average_checkpoints([load_checkpoint(p) for p in paths[-k:]])
