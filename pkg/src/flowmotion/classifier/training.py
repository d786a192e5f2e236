"""Seeded mini-batch training loop, batched inference and history export."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .. import metrics
from ..errors import NumericError
from ..labeling import MotionLabel
from .network import ModelParams, NetConfig, forward, init_params, loss_and_grads
from .optim import TrainConfig, lr_at_epoch, sgd_step

log = logging.getLogger(__name__)

DECISION_THRESHOLD = 0.5
HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "eval_precision", "eval_recall", "eval_f1")


@dataclass
class TrainResult:
    params: ModelParams
    momentum: Dict[str, np.ndarray]
    history: List[dict] = field(default_factory=list)


def flip_batch(batch: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Horizontally flip the selected ``(N, 2, H, W)`` samples, negating ``u``."""
    out = batch.copy()
    sel = out[mask]
    sel = sel[..., ::-1]
    sel[:, 0] = -sel[:, 0]
    out[mask] = sel
    return out


def predict_proba(params: ModelParams, rois: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-mode probabilities for an ``(N, 2, S, S)`` array."""
    chunks = [forward(params, rois[i:i + batch_size]) for i in range(0, len(rois), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros(0)


def decide(prob: float, threshold: float = DECISION_THRESHOLD) -> MotionLabel:
    return MotionLabel.MOVING if prob > threshold else MotionLabel.STILL


def predict(params: ModelParams, roi: np.ndarray, threshold: float = DECISION_THRESHOLD) -> Tuple[MotionLabel, float]:
    """Classify one ``(2, S, S)`` ROI; Moving only when probability exceeds 0.5."""
    prob = float(forward(params, np.asarray(roi)[None])[0])
    return decide(prob, threshold), prob


def evaluate(params: ModelParams, rois: np.ndarray, labels: Sequence[int]) -> dict:
    probs = predict_proba(params, rois)
    preds = [decide(p) for p in probs]
    truths = [MotionLabel.from_int(int(y)) for y in labels]
    return metrics.report(metrics.confusion(preds, truths))


def train(
    train_set: Tuple[np.ndarray, np.ndarray],
    eval_set: Optional[Tuple[np.ndarray, np.ndarray]],
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
) -> TrainResult:
    """Train from scratch.

    ``train_set``/``eval_set`` are ``(rois, labels)`` with rois shaped
    ``(N, 2, S, S)`` and labels in {0, 1}. One generator seeded by
    ``train_cfg.seed`` drives initialization, shuffling and flip
    augmentation, so identical inputs give bit-identical results.
    """
    x_train, y_train = train_set
    if len(x_train) == 0:
        raise ValueError("training set is empty")
    x_train = np.asarray(x_train, dtype=np.float32)
    y_train = np.asarray(y_train, dtype=np.float64)
    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(net_cfg, rng)
    momentum: Dict[str, np.ndarray] = {}
    history: List[dict] = []
    n = len(x_train)
    for epoch in range(train_cfg.epochs):
        lr = lr_at_epoch(train_cfg, epoch)
        order = rng.permutation(n)
        flips = rng.random(n) < train_cfg.flip_probability
        total, seen = 0.0, 0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            batch = flip_batch(x_train[idx], flips[idx])
            loss, grads, buffers, _ = loss_and_grads(params, batch, y_train[idx])
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            weights, momentum = sgd_step(params.weights, grads, momentum, train_cfg, lr)
            params = ModelParams(net_cfg, weights, buffers)
            total += loss * len(idx)
            seen += len(idx)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / seen}
        if eval_set is not None and len(eval_set[0]):
            rep = evaluate(params, np.asarray(eval_set[0], dtype=np.float32), eval_set[1])
            row.update(
                eval_precision=rep["precision_pct"],
                eval_recall=rep["recall_pct"],
                eval_f1=rep["f1_pct"],
            )
        log.info("epoch %d lr=%g loss=%.6f f1=%s", epoch, lr, row["train_loss"], row.get("eval_f1"))
        history.append(row)
    return TrainResult(params, momentum, history)


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value)) if isinstance(value, float) else str(value)


def write_history_csv(history: Sequence[dict], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([_fmt(row.get(col)) for col in HISTORY_COLUMNS])


def read_history_csv(path: Union[str, Path]) -> List[dict]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append({k: (None if v == "" else (int(v) if k == "epoch" else float(v))) for k, v in rec.items()})
    return rows
