"""Training loop, experiment protocols and result files."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import augment as aug
from . import data as datamod
from .config import ConfigError, RunConfig
from .metrics import FeatureTable, MetricsReport, feature_report, split_accuracy
from .network import SGD, Model, lr_at, save_checkpoint
from .numerics import NumericError, Rng, Tape, Tensor, no_grad, softmax

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "lambda_used", "lr", "test_acc")


class TrainingDiverged(NumericError):
    def __init__(self, epoch: int, batch: int, cause: Exception):
        super().__init__(f"non-finite values at epoch {epoch}, batch {batch}: {cause}")
        self.epoch, self.batch = epoch, batch


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    lambda_used: float | None
    lr: float
    test_acc: float | None


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    data: datamod.Splits


@dataclass
class RunResult:
    report: MetricsReport
    history: list[EpochRecord]
    model: Model
    extra: dict = field(default_factory=dict)


# ----------------------------------------------------------------------------
# data


def load_data(cfg: RunConfig) -> datamod.Splits:
    d = cfg.data
    if d.source == "gaussian":
        splits = datamod.gaussian_toy(d.classes, d.per_class_n, d.dim, d.spread, d.seed)
    elif d.source == "patterns":
        splits = datamod.pattern_images(d.classes, d.per_class_n, d.image_size, 3, d.noise, d.seed)
    else:
        train = _read_dataset(d.train_path)
        test = _read_dataset(d.test_path) if d.test_path else train
        splits = datamod.Splits(train, test)
    if d.imb_factor > 1:
        lt = datamod.longtail_subsample(splits.train, datamod.ImbalanceSpec(d.imb_factor), seed=d.seed)
        splits = datamod.Splits(lt, splits.test)
    return splits


def _read_dataset(path: str) -> datamod.LabeledDataset:
    if path.endswith(".csv"):
        return datamod.load_csv(path)
    return datamod.load(path)


def split_thresholds(cfg: RunConfig, train_counts: Sequence[int]) -> tuple[float, float]:
    if cfg.data.split_thresholds:
        return tuple(cfg.data.split_thresholds)
    # image long-tail cut points (1000 and 200 out of n_max 5000), rescaled to n_max
    n_max = max(train_counts)
    return (0.2 * n_max, 0.04 * n_max)


# ----------------------------------------------------------------------------
# training


def _batches(n: int, batch_size: int, perm: np.ndarray, min_size: int):
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if len(idx) >= min_size:
            yield idx


def evaluate(model: Model, ds: datamod.LabeledDataset, chunk: int = 4096):
    """Features, logits of ``ds`` without recording gradients."""
    feats, logits = [], []
    with no_grad(), np.errstate(over="ignore", invalid="ignore"):
        for start in range(0, len(ds), chunk):
            z = model.forward_features(Tensor(ds.samples[start:start + chunk]))
            feats.append(z.values)
            logits.append(model.forward_logits(z).values)
    if not feats:
        return np.zeros((0, model.spec.feature_dim)), np.zeros((0, model.spec.num_classes))
    return np.concatenate(feats), np.concatenate(logits)


def accuracy(model: Model, ds: datamod.LabeledDataset) -> float:
    _, logits = evaluate(model, ds)
    return float((logits.argmax(axis=1) == ds.labels).mean())


def build_model(cfg: RunConfig, splits: datamod.Splits) -> Model:
    spec = cfg.model_spec(splits.train.num_classes, splits.train.sample_shape)
    return Model(spec, Rng(cfg.run.seed).spawn(1))


def train(cfg: RunConfig, splits: datamod.Splits | None = None, model: Model | None = None,
          trainable: Sequence[Tensor] | None = None, strategy: aug.AugmentStrategy | None = None) -> TrainResult:
    """Train ``model`` (freshly initialised from the run seed if omitted).

    ``trainable`` restricts the optimizer to a subset of parameters; the
    others still run forward but receive no update.
    """
    splits = splits if splits is not None else load_data(cfg)
    model = model if model is not None else build_model(cfg, splits)
    strategy = strategy if strategy is not None else cfg.augment_strategy()
    params = list(trainable) if trainable is not None else model.params
    train_ds, test_ds = splits
    root = Rng(cfg.run.seed)
    shuffle_rng, aug_rng = root.spawn(2), root.spawn(3)
    schedule = cfg.schedule()
    opt = SGD(lr=schedule.initial_lr, momentum=cfg.optim.momentum, weight_decay=cfg.optim.weight_decay)
    min_batch = 1 if isinstance(strategy, aug.NoAugment) else 2
    is_am = isinstance(strategy, aug.AMMixup)
    v_acc = 0.0
    history = []
    n = len(train_ds)
    for epoch in range(cfg.run.epochs):
        opt.lr = lr_at(schedule, epoch)
        lam_am = aug.am_lambda(v_acc, strategy.beta) if is_am else 1.0
        perm = shuffle_rng.permutation(n)
        loss_sum, correct, seen, lams = 0.0, 0, 0, []
        for b, idx in enumerate(_batches(n, cfg.run.batch_size, perm, min_batch)):
            x = Tensor(train_ds.samples[idx])
            y = train_ds.labels[idx]
            for p in params:
                p.grad = None
            try:
                # overflow surfaces as NumericError from the finiteness checks
                with np.errstate(over="ignore", invalid="ignore"), Tape() as tape:
                    out = aug.compute_batch_loss(model, strategy, x, y, aug_rng, lam_am)
                    tape.backward(out.loss)
                    opt.step(params)
            except NumericError as e:
                raise TrainingDiverged(epoch, b, e) from e
            loss_sum += out.loss.item() * len(idx)
            correct += int((out.clean_logits.argmax(axis=1) == y).sum())
            seen += len(idx)
            if out.lambda_used is not None:
                lams.append(out.lambda_used)
        train_acc = correct / seen if seen else 0.0
        if is_am and strategy.rate_mode == aug.SCHEDULED:
            lam_rec = lam_am
        else:
            lam_rec = float(np.mean(lams)) if lams else None
        test_acc = accuracy(model, test_ds) if len(test_ds) else None
        rec = EpochRecord(epoch + 1, loss_sum / seen if seen else 0.0, train_acc, lam_rec, opt.lr, test_acc)
        history.append(rec)
        log.debug("epoch %d loss %.4f train_acc %.4f test_acc %s", rec.epoch, rec.train_loss,
                  rec.train_acc, rec.test_acc)
        v_acc = train_acc
    return TrainResult(model, history, splits)


# ----------------------------------------------------------------------------
# protocols


def metric_split(cfg: RunConfig, splits: datamod.Splits) -> datamod.LabeledDataset:
    return splits.test if cfg.run.metrics_split == "test" else splits.train


def run_imbalanced(cfg: RunConfig, splits: datamod.Splits | None = None,
                   strategy: aug.AugmentStrategy | None = None) -> RunResult:
    """Train on the (long-tailed) train split; report A, U, U_k and split accuracies."""
    res = train(cfg, splits, strategy=strategy)
    splits = res.data
    ds = metric_split(cfg, splits)
    feats, _ = evaluate(res.model, ds)
    report = feature_report(FeatureTable(feats, ds.labels, tuple(range(ds.num_classes))), cfg.run.uniformity_k)
    _, logits = evaluate(res.model, splits.test)
    counts = splits.train.class_counts
    acc = split_accuracy(logits.argmax(axis=1), splits.test.labels, counts, split_thresholds(cfg, counts))
    report.acc_all, report.acc_many = acc["all"], acc["many"]
    report.acc_median, report.acc_few = acc["median"], acc["few"]
    return RunResult(report, res.history, res.model, {"train_counts": counts})


def run_coarse_to_fine(pretrain: RunConfig, finetune: RunConfig,
                       splits: datamod.Splits | None = None) -> RunResult:
    """Coarse pretraining, then a fresh fine classifier on the frozen encoder.

    The report carries the alignment of coarse-stage test features (grouped
    by coarse label) and the fine test accuracy in ``acc_all``.
    """
    fine = splits if splits is not None else load_data(pretrain)
    mapping = pretrain.data.coarse_map or tuple(datamod.threshold_coarse_map(fine.train.num_classes,
                                                                           fine.train.num_classes // 2))
    if len(mapping) != fine.train.num_classes:
        raise ConfigError("data.coarse_map", f"maps {len(mapping)} classes, data has {fine.train.num_classes}")
    coarse = datamod.Splits(datamod.apply_coarse(fine.train, mapping), datamod.apply_coarse(fine.test, mapping))
    stage1 = train(pretrain, coarse)
    model = stage1.model
    ds = metric_split(pretrain, coarse)
    feats, logits = evaluate(model, ds)
    report = feature_report(FeatureTable(feats, ds.labels, tuple(range(ds.num_classes))),
                            [k for k in pretrain.run.uniformity_k if k < ds.num_classes])
    coarse_acc = float((evaluate(model, coarse.test)[1].argmax(axis=1) == coarse.test.labels).mean())

    digest_before = model.encoder_digest()
    model.reset_classifier(fine.train.num_classes, Rng(finetune.run.seed).spawn(4))
    model.set_encoder_trainable(False)
    stage2 = train(finetune, fine, model=model, trainable=model.classifier_params, strategy=aug.NoAugment())
    model.set_encoder_trainable(True)
    if model.encoder_digest() != digest_before:
        raise AssertionError("encoder changed during frozen fine-tuning")
    fine_acc = accuracy(model, fine.test)
    report.acc_all = fine_acc
    report.extra["coarse_test_acc"] = coarse_acc
    return RunResult(report, stage1.history + stage2.history, model,
                     {"pretrain_history": stage1.history, "finetune_history": stage2.history,
                      "encoder_digest": digest_before})


ABLATION_GRID = (
    ("am", False, False),
    ("am", False, True),
    ("am", True, False),
    ("beta", True, True),
    ("fixed", True, True),
    ("am", True, True),
)


def ablation_strategy(rate: str, one_sided: bool, last_layer_only: bool, beta: float = 0.34,
                      alpha: float = 1.0, fixed_value: float = 0.51) -> aug.AMMixup:
    mode = {"am": aug.SCHEDULED, "beta": aug.FIXED_BETA, "fixed": aug.FIXED}[rate]
    return aug.AMMixup(beta, mode, alpha, fixed_value, one_sided, last_layer_only)


def run_ablation(cfg: RunConfig, seeds: Sequence[int], grid=ABLATION_GRID,
                 splits: datamod.Splits | None = None) -> list[dict]:
    """One imbalanced run per (cell, seed); rows ordered by cell then seed."""
    rows = []
    s = cfg.strategy
    for rate, ol, ll in grid:
        strat = ablation_strategy(rate, ol, ll, s.beta, s.alpha, s.fixed_value)
        for seed in seeds:
            run_cfg = cfg.with_overrides(run={"seed": seed})
            res = run_imbalanced(run_cfg, splits, strategy=strat)
            rows.append({"rate": rate, "one_sided": ol, "last_layer_only": ll, "seed": seed,
                         **res.report.to_dict()})
    return rows


# ----------------------------------------------------------------------------
# outputs


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_history(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_FIELDS)
        for r in history:
            w.writerow([_fmt(getattr(r, k)) for k in HISTORY_FIELDS])


def write_metrics(report: MetricsReport, path) -> None:
    Path(path).write_text(report.to_json() + "\n")


def write_rows(rows: Sequence[dict], path) -> None:
    keys = list(rows[0]) if rows else []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in keys])


def save_run(out_dir, result: RunResult, cfg: RunConfig | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_history(result.history, out / "history.csv")
    write_metrics(result.report, out / "metrics.json")
    save_checkpoint(result.model, out / "checkpoint.bin")
    if cfg is not None:
        (out / "config.txt").write_text(cfg.to_text())
    return out


def dump_features(model: Model, ds: datamod.LabeledDataset, path, grid_resolution: int = 0,
                  grid_path=None) -> None:
    """Per-sample features, predicted class and max confidence as CSV.

    With ``grid_resolution > 0`` and 2-D features, also writes the classifier
    confidence over a ``resolution x resolution`` grid spanning the feature
    bounding box padded by 1 on each side.
    """
    feats, logits = evaluate(model, ds)
    probs = softmax(logits) if len(logits) else logits
    d = feats.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "class"] + [f"f{i}" for i in range(d)] + ["predicted_class", "confidence"])
        for sid, lab, z, p in zip(ds.ids, ds.labels, feats, probs):
            w.writerow([int(sid), int(lab)] + [repr(float(v)) for v in z] + [int(p.argmax()), repr(float(p.max()))])
    if grid_resolution and d == 2:
        grid_path = grid_path or Path(path).with_name("grid.csv")
        lo, hi = feats.min(axis=0) - 1.0, feats.max(axis=0) + 1.0
        gx = np.linspace(lo[0], hi[0], grid_resolution)
        gy = np.linspace(lo[1], hi[1], grid_resolution)
        pts = np.array([(x, y) for y in gy for x in gx])
        with no_grad():
            gp = softmax(model.forward_logits(Tensor(pts)).values)
        with open(grid_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["f0", "f1", "predicted_class", "confidence"])
            for (x, y), p in zip(pts, gp):
                w.writerow([repr(float(x)), repr(float(y)), int(p.argmax()), repr(float(p.max()))])

