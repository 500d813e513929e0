"""End-to-end training loop, evaluation, and the leave-one-out
cross-validation harness."""

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import network as net_mod
from . import ops
from .data import (AugmentationConfig, LabelCoding, MfishSample,
                   batch_iterator, augment, sample_rng)
from .metrics import CcrReport, average_last_k, compute_ccr, confusion
from .network import Network, NetworkConfig, build_network, forward, predict_labels
from .ops import AdamState


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    eval_last_k: int = 5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    seed: int = 0
    # overfit runs may stop once training CCR reaches this level
    stop_at_train_ccr: Optional[float] = None

    def __post_init__(self):
        if self.eval_last_k > self.epochs and self.epochs > 0:
            raise ValueError("eval_last_k must not exceed epochs")


@dataclass
class LogRow:
    epoch: int
    mean_loss: float
    test_ccr: Optional[float] = None
    train_ccr: Optional[float] = None


@dataclass
class FoldResult:
    test_id: str
    per_epoch_ccr: List[Tuple[int, float]]
    final_ccr: float
    checkpoint_path: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps({"test_id": self.test_id,
                           "per_epoch_ccr": self.per_epoch_ccr,
                           "final_ccr": self.final_ccr,
                           "checkpoint_path": self.checkpoint_path})

    @classmethod
    def from_json(cls, text: str) -> "FoldResult":
        doc = json.loads(text)
        return cls(test_id=doc["test_id"],
                   per_epoch_ccr=[tuple(x) for x in doc["per_epoch_ccr"]],
                   final_ccr=doc["final_ccr"],
                   checkpoint_path=doc.get("checkpoint_path"))


def _make_adam(config: TrainConfig) -> AdamState:
    return AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                     epsilon=config.adam_epsilon)


def train_model(samples: Sequence[MfishSample], config: TrainConfig,
                net_config: Optional[NetworkConfig] = None,
                coding: Optional[LabelCoding] = None,
                eval_samples: Optional[Sequence[MfishSample]] = None,
                ) -> Tuple[Network, List[LogRow]]:
    """Train the network: per epoch, augment on the fly, batch, forward,
    masked cross entropy over softmax probabilities, backprop and Adam.

    When ``eval_samples`` is given, held-out CCR is recorded for each of
    the last ``eval_last_k`` epochs.
    """
    if not samples:
        raise ValueError("need at least one training sample")
    coding = coding or LabelCoding()
    net_config = net_config or NetworkConfig()
    torch.manual_seed(config.seed)
    net = build_network(net_config, seed=config.seed)
    adam = _make_adam(config)
    log: List[LogRow] = []
    if config.epochs == 0:
        return net, log
    params = net.named_parameters()
    eval_from = config.epochs - config.eval_last_k
    for epoch in range(config.epochs):
        net.train()
        augmented = [augment(s, config.augmentation,
                             sample_rng(config.seed, s.id, epoch), coding)
                     for s in samples]
        epoch_rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, epoch]))
        losses = []
        for inputs, targets, masks in batch_iterator(
                augmented, config.batch_size, epoch_rng, coding):
            if masks.sum() == 0:
                continue
            logits = forward(net, inputs)
            probs = ops.softmax_channels(logits)
            loss = ops.masked_cross_entropy(probs, targets, masks)
            if not math.isfinite(loss.item()):
                raise RuntimeError(f"training diverged at epoch {epoch}: "
                                   f"loss {loss.item()}")
            for p in params.values():
                if p.grad is not None:
                    p.grad = None
            loss.backward()
            grads = {name: p.grad for name, p in params.items()
                     if p.grad is not None}
            ops.adam_step(params, grads, adam)
            losses.append(loss.item())
        row = LogRow(epoch=epoch, mean_loss=float(np.mean(losses)))
        if eval_samples is not None and epoch >= eval_from:
            report, _ = evaluate_model(net, eval_samples, coding)
            row.test_ccr = report.ccr
        if config.stop_at_train_ccr is not None:
            report, _ = evaluate_model(net, samples, coding)
            row.train_ccr = report.ccr
            log.append(row)
            if report.ccr >= config.stop_at_train_ccr:
                break
        else:
            log.append(row)
    net.adam = adam
    return net, log


def evaluate_model(net: Network, test_samples: Sequence[MfishSample],
                   coding: Optional[LabelCoding] = None
                   ) -> Tuple[CcrReport, np.ndarray]:
    """Micro-averaged CCR and pooled confusion matrix over the test set."""
    if not test_samples:
        raise ValueError("empty test set")
    coding = coding or LabelCoding()
    report: Optional[CcrReport] = None
    conf: Optional[np.ndarray] = None
    for sample in test_samples:
        if not np.isin(sample.labels, coding.chromosome_codes).any():
            warnings.warn(f"sample {sample.id} has no chromosome pixels; skipped")
            continue
        pred = predict_labels(net, sample, coding)
        r = compute_ccr(pred, sample.labels, coding)
        c = confusion(pred, sample.labels, coding)
        report = r if report is None else report.merge(r)
        conf = c if conf is None else conf + c
    if report is None:
        raise ValueError("no test sample contained chromosome pixels")
    return report, conf


def _write_log_csv(path: Path, fold: str, log: Sequence[LogRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "epoch", "mean_loss", "test_ccr"])
        for row in log:
            writer.writerow([fold, row.epoch, repr(row.mean_loss),
                             "" if row.test_ccr is None else repr(row.test_ccr)])


def run_fold(samples: Sequence[MfishSample], test_index: int,
             config: TrainConfig, net_config: Optional[NetworkConfig] = None,
             coding: Optional[LabelCoding] = None,
             out_dir: Optional[Path] = None) -> FoldResult:
    """Train on all samples but one, evaluating the held-out sample during
    the last ``eval_last_k`` epochs."""
    test_sample = samples[test_index]
    train_samples = [s for i, s in enumerate(samples) if i != test_index]
    assert all(s.id != test_sample.id for s in train_samples), \
        f"fold {test_sample.id} leaked its test sample into training"
    net, log = train_model(train_samples, config, net_config, coding,
                           eval_samples=[test_sample])
    per_epoch = [(row.epoch, row.test_ccr) for row in log
                 if row.test_ccr is not None]
    final = average_last_k([c for _, c in per_epoch], config.eval_last_k)
    checkpoint_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = str(out_dir / "checkpoint.npz")
        net_mod.save_checkpoint(checkpoint_path, net,
                                getattr(net, "adam", None))
        _write_log_csv(out_dir / "log.csv", test_sample.id, log)
    result = FoldResult(test_id=test_sample.id, per_epoch_ccr=per_epoch,
                        final_ccr=final, checkpoint_path=checkpoint_path)
    if out_dir is not None:
        (out_dir / "result.json").write_text(result.to_json())
    return result


def run_loocv(samples: Sequence[MfishSample], config: TrainConfig,
              net_config: Optional[NetworkConfig] = None,
              coding: Optional[LabelCoding] = None,
              out_dir=None, resume: bool = False, workers: int = 1
              ) -> Tuple[List[FoldResult], Dict]:
    """Leave-one-out cross validation: one fold per sample, each trained on
    all the others. Folds write independent artifacts, can be resumed, and
    may run in parallel worker processes."""
    if len(samples) < 2:
        raise ValueError("LOOCV needs at least two samples")
    out_dir = Path(out_dir) if out_dir is not None else None
    pending = []
    done: Dict[int, FoldResult] = {}
    for i, sample in enumerate(samples):
        fold_dir = out_dir / f"fold_{sample.id}" if out_dir is not None else None
        if (resume and fold_dir is not None
                and (fold_dir / "result.json").exists()):
            done[i] = FoldResult.from_json((fold_dir / "result.json").read_text())
        else:
            pending.append((i, fold_dir))
    if workers > 1 and len(pending) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_fold, list(samples), i, config,
                                   net_config, coding, fold_dir): i
                       for i, fold_dir in pending}
            for fut, i in futures.items():
                try:
                    done[i] = fut.result()
                except Exception as exc:
                    raise RuntimeError(f"fold {samples[i].id} failed: {exc}") from exc
    else:
        for i, fold_dir in pending:
            try:
                done[i] = run_fold(samples, i, config, net_config, coding,
                                   fold_dir)
            except Exception as exc:
                raise RuntimeError(f"fold {samples[i].id} failed: {exc}") from exc
    results = [done[i] for i in range(len(samples))]
    summary = {
        "n_folds": len(results),
        "mean_ccr": float(np.mean([r.final_ccr for r in results])),
        "per_fold": {r.test_id: r.final_ccr for r in results},
        "eval_last_k": config.eval_last_k,
        "epochs": config.epochs,
        "seed": config.seed,
    }
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return results, summary
