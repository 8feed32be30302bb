"""Adam + cross-entropy training with validation early stopping."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from darnet.model import Darnet, EvaluationError

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 3e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    decoupled_weight_decay: bool = False

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive and weight_decay non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.patience > self.max_epochs:
            raise ValueError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    wall_seconds: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def epochs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
        for i, row in enumerate(zip(self.train_loss, self.val_loss, self.val_accuracy), start=1):
            w.writerow([i, *(f"{v:.8f}" for v in row)])
        return buf.getvalue()


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor | int) -> torch.Tensor:
    """Mean ``-log softmax(logits)[label]``, stabilized by max subtraction.

    Accepts a single logit vector with an int label, or a batch.
    """
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    shifted = logits - logits.max(dim=1, keepdim=True).values
    log_z = torch.log(torch.exp(shifted).sum(dim=1))
    picked = shifted.gather(1, labels[:, None]).squeeze(1)
    return (log_z - picked).mean()


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    config: TrainConfig,
) -> AdamState:
    """One in-place Adam update with bias-corrected moments.

    Weight decay is classic L2 added to the gradient unless
    ``config.decoupled_weight_decay`` is set.
    """
    if set(grads) - set(params):
        raise ValueError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))}")
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        if config.weight_decay and not config.decoupled_weight_decay:
            g = g + config.weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        if config.weight_decay and config.decoupled_weight_decay:
            p.mul_(1 - config.learning_rate * config.weight_decay)
        denom = (v / c2).sqrt_().add_(config.adam_eps)
        p.addcdiv_(m, denom, value=-config.learning_rate / c1)
    return state


def evaluate_loss(model: Darnet, x: torch.Tensor, y: torch.Tensor, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy (ties go to class 0)."""
    total, correct = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(y), batch_size):
            logits = model(x[i : i + batch_size])
            yb = y[i : i + batch_size]
            total += float(cross_entropy(logits, yb)) * len(yb)
            pred = (logits[:, 1] > logits[:, 0]).long()
            correct += int((pred == yb).sum())
    return total / len(y), correct / len(y)


def should_stop(val_losses: list[float], patience: int) -> bool:
    """True once ``patience`` epochs in a row failed to strictly beat the earlier best."""
    if len(val_losses) <= patience:
        return False
    best_before = min(val_losses[:-patience])
    return all(v >= best_before for v in val_losses[-patience:])


ValEvaluator = Callable[[Darnet, int], tuple[float, float]]


def train(
    model: Darnet,
    train_x: np.ndarray | torch.Tensor,
    train_y: np.ndarray | torch.Tensor,
    val_x: np.ndarray | torch.Tensor,
    val_y: np.ndarray | torch.Tensor,
    config: TrainConfig,
    val_evaluator: ValEvaluator | None = None,
) -> tuple[Darnet, TrainReport]:
    """Train ``model`` in place; return a copy holding the best-validation-loss weights.

    ``val_evaluator(model, epoch)`` replaces the built-in validation pass when
    given (used to drive early stopping from a scripted loss sequence).
    """
    dtype = next(model.parameters()).dtype
    tx = torch.as_tensor(np.asarray(train_x), dtype=dtype)
    ty = torch.as_tensor(np.asarray(train_y), dtype=torch.long)
    vx = torch.as_tensor(np.asarray(val_x), dtype=dtype)
    vy = torch.as_tensor(np.asarray(val_y), dtype=torch.long)
    if len(ty) == 0 or len(vy) == 0:
        raise ValueError("training and validation sets must be non-empty")

    rng = np.random.default_rng(config.seed)
    params = dict(model.named_parameters())
    state = AdamState()
    report = TrainReport()
    best_loss = math.inf
    best_state = copy.deepcopy(model.state_dict())
    start = time.perf_counter()

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = torch.from_numpy(rng.permutation(len(ty)))
        running, seen = 0.0, 0
        for b, i in enumerate(range(0, len(ty), config.batch_size), start=1):
            idx = order[i : i + config.batch_size]
            for p in params.values():
                p.grad = None
            try:
                loss = cross_entropy(model(tx[idx]), ty[idx])
            except (EvaluationError, ValueError) as exc:
                raise TrainingDivergedError(epoch, b, float("nan")) from exc
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, b, float(loss))
            loss.backward()
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            adam_step(params, grads, state, config)
            running += loss.item() * len(idx)
            seen += len(idx)
        model.eval()
        if val_evaluator is not None:
            v_loss, v_acc = val_evaluator(model, epoch)
        else:
            v_loss, v_acc = evaluate_loss(model, vx, vy)
        if not math.isfinite(v_loss):
            raise TrainingDivergedError(epoch, 0, v_loss)
        report.train_loss.append(running / seen)
        report.val_loss.append(v_loss)
        report.val_accuracy.append(v_acc)
        report.stopped_epoch = epoch
        if v_loss < best_loss:
            best_loss = v_loss
            report.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        log.debug("epoch %d train %.4f val %.4f acc %.3f", epoch, report.train_loss[-1], v_loss, v_acc)
        if should_stop(report.val_loss, config.patience):
            log.info("early stop at epoch %d (best %d)", epoch, report.best_epoch)
            break

    report.wall_seconds = time.perf_counter() - start
    best = copy.deepcopy(model)
    best.load_state_dict(best_state)
    best.eval()
    return best, report
