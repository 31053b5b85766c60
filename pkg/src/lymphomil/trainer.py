"""Training: AdamW with decoupled weight decay, early stopping on
validation loss, and a stratified three-way cross-validation harness.

Determinism contract: everything downstream of (manifest, TrainConfig)
is reproducible to the byte. Per-epoch shuffles and per-step dropout
seeds are derived from (seed, fold, epoch) seed sequences, so results
do not depend on dict ordering or wall clock.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics as metrics_mod
from .datamodel import Manifest, SlideBag, SubtypeLabel
from .errors import NumericError, ValidationError
from .milnet import (
    MilConfig,
    MilGrads,
    MilParams,
    backward,
    forward,
    init_params,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout: float = 0.1
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValidationError("betas must be in [0, 1)")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be non-negative")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be >= 1")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValidationError("patience must satisfy 1 <= patience <= max_epochs")


@dataclass(frozen=True)
class FoldPlan:
    fold_index: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        sets = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        total = sum(len(s) for s in sets)
        if len(sets[0] | sets[1] | sets[2]) != total:
            raise ValidationError(f"fold {self.fold_index}: subsets overlap")


def _round_half_down(x: float) -> int:
    return math.ceil(x - 0.5)


def make_folds(
    manifest: Manifest,
    n_folds: int = 3,
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> list[FoldPlan]:
    """Stratified fold plans with pairwise-disjoint test sets.

    Per class, ids are shuffled once; fold f takes the f-th consecutive
    block as its test set (so test sets cannot collide across folds),
    the next ids as validation, and the remainder as train. Subset
    quotas are round-half-down of count * ratio, remainders to train.
    """
    if n_folds < 1:
        raise ValidationError("n_folds must be >= 1")
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValidationError(f"ratios must be non-negative and sum to 1, got {ratios}")
    by_class: dict[SubtypeLabel, list[str]] = {label: [] for label in SubtypeLabel}
    for row in manifest:
        by_class[row.label].append(row.slide_id)

    rng = np.random.default_rng(seed)
    shuffled: dict[SubtypeLabel, list[str]] = {}
    quotas: dict[SubtypeLabel, tuple[int, int]] = {}  # (val, test) per class
    for label in sorted(by_class, key=lambda c: c.value):
        ids = sorted(by_class[label])
        if len(ids) < n_folds:
            raise ValidationError(
                f"class {label.name} has {len(ids)} slides, need at least {n_folds}"
            )
        perm = rng.permutation(len(ids))
        shuffled[label] = [ids[i] for i in perm]
        q_val = _round_half_down(len(ids) * ratios[1])
        q_test = _round_half_down(len(ids) * ratios[2])
        if n_folds * q_test > len(ids):
            raise ValidationError(
                f"class {label.name}: {n_folds} disjoint test sets of {q_test} slides "
                f"do not fit in {len(ids)}"
            )
        quotas[label] = (q_val, q_test)

    plans = []
    for f in range(n_folds):
        train: list[str] = []
        val: list[str] = []
        test: list[str] = []
        for label in sorted(shuffled, key=lambda c: c.value):
            ids = shuffled[label]
            q_val, q_test = quotas[label]
            block = ids[f * q_test : (f + 1) * q_test]
            rest = [i for i in ids if i not in set(block)]
            test.extend(block)
            val.extend(rest[:q_val])
            train.extend(rest[q_val:])
        plans.append(
            FoldPlan(
                fold_index=f,
                train_ids=tuple(sorted(train)),
                val_ids=tuple(sorted(val)),
                test_ids=tuple(sorted(test)),
            )
        )
    return plans


@dataclass
class AdamWState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params: MilParams) -> "AdamWState":
        return cls(
            m=[np.zeros_like(t) for t in params.tensors()],
            v=[np.zeros_like(t) for t in params.tensors()],
        )


def adamw_step(
    params: MilParams, grads: MilGrads, state: AdamWState, cfg: TrainConfig
) -> tuple[MilParams, AdamWState]:
    """One decoupled-weight-decay Adam update; returns fresh values.

    Decay multiplies the parameter directly (not through the moment
    estimates), so a zero-gradient trajectory is exactly geometric.
    """
    t = state.step_count + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_tensors = []
    new_m = []
    new_v = []
    for name, p, g, m, v in zip(
        ("W1", "b1", "Ua", "Va", "Wa", "Wc", "bc"),
        params.tensors(),
        grads.tensors(),
        state.m,
        state.v,
    ):
        if not np.isfinite(g).all():
            raise NumericError(
                f"non-finite gradient for {name} at step {t}; training aborted"
            )
        m2 = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v2 = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        m_hat = m2 / bc1
        v_hat = v2 / bc2
        p2 = p - cfg.learning_rate * (m_hat / (np.sqrt(v_hat) + cfg.epsilon) + cfg.weight_decay * p)
        new_tensors.append(p2)
        new_m.append(m2)
        new_v.append(v2)
    return MilParams(*new_tensors), AdamWState(m=new_m, v=new_v, step_count=t)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: Optional[float]


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0


def _positive_indicator(label: SubtypeLabel) -> int:
    # ABC is the positive class for every score-based metric.
    return 1 if label == SubtypeLabel.ABC else 0


def score_bags(
    params: MilParams, bags: Sequence[SlideBag], mil_cfg: MilConfig
) -> tuple[np.ndarray, np.ndarray, float]:
    """Eval-mode pass over labeled bags.

    Returns (ABC probabilities, positive indicators, mean cross-entropy).
    """
    scores = np.empty(len(bags))
    ys = np.empty(len(bags), dtype=np.int64)
    losses = np.empty(len(bags))
    for i, bag in enumerate(bags):
        if bag.label is None:
            raise ValidationError(f"bag {bag.slide_id!r} has no label")
        probs = forward(bag, params, mil_cfg).probs
        scores[i] = probs[SubtypeLabel.ABC.value]
        ys[i] = _positive_indicator(bag.label)
        losses[i] = -np.log(probs[int(bag.label)])
    return scores, ys, float(losses.mean())


def validation_pass(
    params: MilParams, val_bags: Sequence[SlideBag], mil_cfg: MilConfig
) -> tuple[float, Optional[float]]:
    """Mean validation loss plus AUC when both classes are present."""
    scores, ys, loss = score_bags(params, val_bags, mil_cfg)
    try:
        auc = metrics_mod.roc_auc(scores, ys)
    except Exception:
        auc = None
    return loss, auc


def _resolve(ids: Sequence[str], bags: dict[str, SlideBag]) -> list[SlideBag]:
    out = []
    for sid in ids:
        if sid not in bags:
            raise ValidationError(f"fold references unknown slide {sid!r}")
        out.append(bags[sid])
    return out


def train_fold(
    fold: FoldPlan,
    bags: dict[str, SlideBag],
    cfg: TrainConfig,
    mil_cfg: MilConfig = MilConfig(),
) -> tuple[MilParams, TrainLog]:
    """Train one fold to early stop; returns the best-validation params.

    One optimizer step per slide, slides reshuffled every epoch. The
    validation loss is checked after each epoch; training stops once it
    has not improved for `patience` consecutive epochs.
    """
    train_bags = _resolve(fold.train_ids, bags)
    val_bags = _resolve(fold.val_ids, bags)
    if not train_bags or not val_bags:
        raise ValidationError(f"fold {fold.fold_index} has an empty train or validation set")
    dims = {b.dim for b in train_bags + val_bags}
    if len(dims) != 1:
        raise ValidationError(f"fold {fold.fold_index} mixes embedding widths {sorted(dims)}")
    for b in train_bags + val_bags:
        if b.label is None:
            raise ValidationError(f"bag {b.slide_id!r} has no label")

    mil_cfg = replace(mil_cfg, dropout=cfg.dropout)
    init_seed = int(np.random.SeedSequence([cfg.seed, fold.fold_index]).generate_state(1)[0])
    params = init_params(dims.pop(), init_seed, mil_cfg)
    state = AdamWState.zeros_like(params)

    log = TrainLog()
    best_loss = math.inf
    best_params = params.copy()
    epochs_since_improve = 0

    for epoch in range(1, cfg.max_epochs + 1):
        words = np.random.SeedSequence([cfg.seed, fold.fold_index, epoch]).generate_state(
            len(train_bags) + 1
        )
        order = np.random.default_rng(int(words[0])).permutation(len(train_bags))
        step_losses = np.empty(len(train_bags))
        for step, bag_index in enumerate(order):
            bag = train_bags[bag_index]
            trace = forward(bag, params, mil_cfg, dropout_seed=int(words[step + 1]))
            loss, grads = backward(trace, params, int(bag.label), mil_cfg)
            params, state = adamw_step(params, grads, state, cfg)
            step_losses[step] = loss

        val_loss, val_auc = validation_pass(params, val_bags, mil_cfg)
        log.epochs.append(
            EpochRecord(
                epoch=epoch,
                train_loss=float(step_losses.mean()),
                val_loss=val_loss,
                val_auc=val_auc,
            )
        )
        if val_loss < best_loss:
            best_loss = val_loss
            best_params = params.copy()
            log.best_epoch = epoch
            epochs_since_improve = 0
        else:
            epochs_since_improve += 1
        log.stopped_epoch = epoch
        if epochs_since_improve >= cfg.patience:
            break

    return best_params, log


def write_train_log_csv(path: str | Path, log: TrainLog) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "val_auc"])
        for rec in log.epochs:
            writer.writerow(
                [
                    rec.epoch,
                    repr(rec.train_loss),
                    repr(rec.val_loss),
                    "" if rec.val_auc is None else repr(rec.val_auc),
                ]
            )


@dataclass
class CvReport:
    seed: int
    n_folds: int
    folds: list[dict]
    summary: dict[str, dict[str, Optional[float]]]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_folds": self.n_folds,
            "folds": self.folds,
            "summary": self.summary,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def summarize_folds(folds: Sequence[dict]) -> dict[str, dict[str, Optional[float]]]:
    """Mean, population std, and max per metric across fold entries."""
    return {
        key: metrics_mod.aggregate_metric([f[key] for f in folds], name=key)
        for key in ("auc", "acc", "ppv", "npv")
    }


def evaluate_fold(
    params: MilParams, test_bags: Sequence[SlideBag], mil_cfg: MilConfig
) -> dict:
    """Test-set metrics for one fold; undefined metrics become None."""
    if not test_bags:
        raise ValidationError("cannot evaluate an empty test set")
    scores, ys, _ = score_bags(params, test_bags, mil_cfg)
    conf = metrics_mod.confusion_at_threshold(scores, ys)
    ppv, npv = metrics_mod.ppv_npv(conf)
    try:
        auc: Optional[float] = metrics_mod.roc_auc(scores, ys)
    except Exception:
        auc = None
    return {
        "auc": auc,
        "acc": conf.accuracy,
        "ppv": ppv,
        "npv": npv,
        "tp": conf.tp,
        "fp": conf.fp,
        "tn": conf.tn,
        "fn": conf.fn,
    }


def run_cross_validation(
    manifest: Manifest,
    bags: dict[str, SlideBag],
    cfg: TrainConfig,
    mil_cfg: MilConfig = MilConfig(),
    n_folds: int = 3,
    out_dir: Optional[Path] = None,
) -> CvReport:
    """Train and evaluate every fold; optionally write artifacts.

    Artifacts per fold: checkpoint + sidecar and the epoch log CSV;
    plus one metrics CSV over all folds. The report itself is returned
    and serialized by the caller.
    """
    from .milnet import save_checkpoint  # local to avoid import cycle at module load

    folds = make_folds(manifest, n_folds=n_folds, seed=cfg.seed)
    fold_entries = []
    metric_rows = []
    for plan in folds:
        best_params, log = train_fold(plan, bags, cfg, mil_cfg)
        entry = evaluate_fold(best_params, _resolve(plan.test_ids, bags), replace(mil_cfg, dropout=cfg.dropout))
        entry = {"fold": plan.fold_index, "best_epoch": log.best_epoch, "stopped_epoch": log.stopped_epoch, **entry}
        fold_entries.append(entry)
        logger.info(
            "fold %d: best epoch %d, stopped %d, test auc %s",
            plan.fold_index, log.best_epoch, log.stopped_epoch, entry["auc"],
        )
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(out_dir / f"fold_{plan.fold_index}.milp", best_params, replace(mil_cfg, dropout=cfg.dropout))
            write_train_log_csv(out_dir / f"train_log_fold_{plan.fold_index}.csv", log)
            conf = metrics_mod.Confusion(tp=entry["tp"], fp=entry["fp"], tn=entry["tn"], fn=entry["fn"])
            if entry["auc"] is not None:
                metric_rows.append(
                    (
                        plan.fold_index,
                        metrics_mod.EvalResult(
                            auc=entry["auc"], acc=entry["acc"], ppv=entry["ppv"],
                            npv=entry["npv"], confusion=conf,
                        ),
                    )
                )
    summary_keys = ("auc", "acc", "ppv", "npv")
    summary = {
        key: metrics_mod.aggregate_metric([f[key] for f in fold_entries], name=key)
        for key in summary_keys
    }
    report = CvReport(seed=cfg.seed, n_folds=n_folds, folds=fold_entries, summary=summary)
    if out_dir is not None and metric_rows:
        metrics_mod.write_metric_csv(out_dir / "fold_metrics.csv", metric_rows)
    return report
