"""Training, evaluation, cross-validation and ablation harness.

Everything here is deterministic for a fixed seed: batch order comes from a
seeded generator, Adam is plain numpy, and metrics rows contain no wall-clock
fields, so repeated runs produce byte-identical artifacts.

Examples are (sample, expert) pairs assembled on the fly from a dataset file:
frames are masked down to the target expert, cropped and normalized per the
preprocessing contract. Splits are made at the sample level so the two
experts of one sample (who share frames) can never straddle a fold boundary.
"""

from __future__ import annotations

import json
import time
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import world as gworld
from .errors import ConfigError, GridsightError, NumericError
from .io import DatasetReader
from .model import (AblationConfig, InputGeometry, LabelSpace, Model, NetInput,
                    build_model, loss_from_logits)
from .preproc import CropConfig, assemble_sample
from .tensor import Tensor, backward, no_grad


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.1
    patience: int = 10
    min_head_accuracy: float | None = None
    head_weights: dict | None = None
    examples_per_sample: str = "alternate"  # or "all"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("betas must be in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.min_head_accuracy is not None and not 0.0 < self.min_head_accuracy <= 1.0:
            raise ConfigError("min_head_accuracy must be in (0, 1]")
        if self.examples_per_sample not in ("alternate", "all"):
            raise ConfigError("examples_per_sample must be 'alternate' or 'all'")


class Adam:
    """Standard Adam with bias correction, one slot pair per parameter."""

    def __init__(self, model: Model, cfg: TrainConfig):
        self.model = model
        self.lr = cfg.learning_rate
        self.b1, self.b2, self.eps = cfg.beta1, cfg.beta2, cfg.eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in model.params.named_tensors()}
        self.v = {n: np.zeros_like(p.data) for n, p in model.params.named_tensors()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.model.params.named_tensors():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SampleSource:
    """Turns dataset records into ready network inputs.

    With perturbation=None examples come from the stored pixels; otherwise
    frames are re-rendered from the stored poses and vantage under the given
    perturbation (seeded per sample), which is how robustness evaluation
    reuses a clean dataset.
    """

    def __init__(self, reader: DatasetReader, crop_cfg: CropConfig | None = None,
                 ablation: AblationConfig | None = None, detector: str = "oracle",
                 perturbation=None, render_seed: int = 0):
        self.reader = reader
        self.world_cfg = gworld.WorldConfig.from_dict(json.loads(reader.world_json))
        self.crop_cfg = crop_cfg or CropConfig()
        self.ablation = ablation
        self.detector = detector
        self.perturbation = perturbation
        self.render_seed = render_seed
        self.color_keys = {i: tuple(self.world_cfg.expert_colors[i])
                           for i in range(reader.n_experts)}
        self.depth_range = self.world_cfg.depth_range_m

    @property
    def n_samples(self) -> int:
        return self.reader.n_samples

    @property
    def n_experts(self) -> int:
        return self.reader.n_experts

    @property
    def space(self) -> LabelSpace:
        return self.reader.space

    def geometry(self) -> InputGeometry:
        return InputGeometry(frame_h=self.reader.frame_h,
                             frame_w=self.reader.frame_w,
                             crop_h=self.crop_cfg.out_h,
                             crop_w=self.crop_cfg.out_w)

    def _frames(self, i: int) -> tuple:
        if self.perturbation is None:
            return self.reader.frames(i)
        poses = self.reader.poses(i)
        steps = [[gworld.ExpertPose(*(int(v) for v in poses[t, e]))
                  for e in range(self.n_experts)] for t in range(3)]
        vantage = tuple(float(v) for v in self.reader.vantage(i))
        seed = int(np.random.SeedSequence((self.render_seed, i)).generate_state(1)[0])
        return gworld.render_sample(self.world_cfg, steps, vantage,
                                    self.perturbation, seed=seed)

    def example(self, i: int, expert: int):
        """(full, crops, label) float32/int64 arrays, or None on a miss."""
        frames = self._frames(i)
        boxes = tuple(list(f.oracle_boxes) for f in frames)
        bg = gworld.capture_background(
            self.world_cfg, tuple(float(v) for v in self.reader.vantage(i)))
        out = assemble_sample(frames, boxes, expert, self.crop_cfg,
                              self.depth_range, ablation=self.ablation,
                              background=bg, detector=self.detector,
                              color_keys=self.color_keys)
        if out is None:
            return None
        return out[0], out[1], self.reader.labels(i)[expert]


def expand_examples(sample_ids, n_experts: int, mode: str = "all") -> list:
    """(sample, expert) pairs for a set of samples. 'alternate' picks one
    expert per sample (round-robin) to halve the epoch cost."""
    if mode == "all":
        return [(int(i), e) for i in sample_ids for e in range(n_experts)]
    return [(int(i), int(i) % n_experts) for i in sample_ids]


def _collect_batch(source: SampleSource, ids) -> tuple:
    fulls, crops, labels, kept = [], [], [], []
    misses = 0
    for i, e in ids:
        ex = source.example(i, e)
        if ex is None:
            misses += 1
            continue
        fulls.append(ex[0])
        crops.append(ex[1])
        labels.append(ex[2])
        kept.append((i, e))
    if not fulls:
        return None, None, misses, kept
    inp = NetInput(full_frame=Tensor(np.stack(fulls)),
                   crops=Tensor(np.stack(crops)))
    return inp, np.stack(labels), misses, kept


# ---------------------------------------------------------------------------
# train / evaluate


def _argmax_logits(model: Model, logits: dict) -> np.ndarray:
    """[B, 8] predicted classes in canonical head order; absent delta heads
    predict class 0."""
    from .model import HEAD_ORDER
    b = next(iter(logits.values())).shape[0]
    out = np.zeros((b, 8), dtype=np.int64)
    for h, head in enumerate(HEAD_ORDER):
        if head in logits:
            out[:, h] = np.argmax(logits[head].data, axis=1)
    return out


def train(model: Model, source: SampleSource, train_samples, cfg: TrainConfig,
          val_samples=None, metrics_path: str | None = None) -> dict:
    """Adam-train the model on a sample id list; returns the run history.

    Per epoch: one pass over shuffled (sample, expert) examples, then a
    validation pass. Early stopping: patience on validation action accuracy,
    plus an optional min_head_accuracy target that stops as soon as every
    head clears it. A non-finite loss aborts with the batch named.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model, cfg)
    examples = expand_examples(train_samples, source.n_experts,
                               cfg.examples_per_sample)
    if not examples:
        raise ConfigError("no training samples")
    val_ids = (expand_examples(val_samples, source.n_experts, "all")
               if val_samples is not None else None)
    heads = model.head_names()
    history = []
    best_action, since_best = -1.0, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        total_loss, n_batches = 0.0, 0
        correct = np.zeros(8, dtype=np.int64)
        seen = 0
        for bi in range(0, len(order), cfg.batch_size):
            ids = [examples[j] for j in order[bi:bi + cfg.batch_size]]
            inp, labels, misses, _ = _collect_batch(source, ids)
            if inp is None:
                continue
            try:
                logits = model.forward_logits(inp)
                loss = loss_from_logits(model, logits, labels,
                                        weights=cfg.head_weights)
            except NumericError as err:
                raise NumericError(
                    f"{err} (epoch {epoch}, batch {bi // cfg.batch_size})") from err
            if not np.isfinite(loss.data):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, "
                    f"batch {bi // cfg.batch_size}")
            model.params.zero_grad()
            backward(loss)
            opt.step()
            total_loss += float(loss.data)
            n_batches += 1
            preds = _argmax_logits(model, logits)
            correct += (preds == labels).sum(axis=0)
            seen += labels.shape[0]
            del logits, loss, inp
        row = {
            "epoch": epoch,
            "train_loss": total_loss / max(n_batches, 1),
            "train_accuracy": {h: float(correct[i] / max(seen, 1))
                               for i, h in enumerate(
                                   ("x", "y", "z", "theta", "action",
                                    "dx", "dy", "dz")) if h in heads},
        }
        if val_ids:
            report = evaluate(model, source, val_ids,
                              batch_size=cfg.batch_size)
            row["val_accuracy"] = report["accuracy"]
            acc = report["accuracy"]
            if acc["action"] > best_action + 1e-12:
                best_action, since_best = acc["action"], 0
            else:
                since_best += 1
        history.append(row)
        if val_ids:
            if (cfg.min_head_accuracy is not None
                    and min(row["val_accuracy"].values()) >= cfg.min_head_accuracy):
                break
            if since_best >= cfg.patience:
                break
    result = {"epochs_run": len(history), "history": history,
              "final": history[-1]}
    if metrics_path is not None:
        with open(metrics_path, "w", encoding="utf-8") as f:
            for row in history:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    return result


def evaluate(model: Model, source: SampleSource, example_ids,
             batch_size: int = 64, confusion: bool = False) -> dict:
    """Per-head accuracy over (sample, expert) pairs.

    A detection miss counts as wrong on every head; the report carries the
    miss count so callers can see how much of the error is detection.
    """
    if not example_ids:
        raise ConfigError("evaluate needs a non-empty example list")
    heads = model.head_names()
    head_idx = {h: i for i, h in enumerate(
        ("x", "y", "z", "theta", "action", "dx", "dy", "dz"))}
    correct = {h: 0 for h in heads}
    conf = {h: np.zeros((source.space.head_width(h),) * 2, dtype=np.int64)
            for h in heads} if confusion else None
    misses = 0
    total = len(example_ids)
    with no_grad():
        for bi in range(0, total, batch_size):
            ids = example_ids[bi:bi + batch_size]
            inp, labels, batch_misses, _ = _collect_batch(source, ids)
            misses += batch_misses
            if inp is None:
                continue
            logits = model.forward_logits(inp)
            preds = _argmax_logits(model, logits)
            for h in heads:
                c = head_idx[h]
                correct[h] += int((preds[:, c] == labels[:, c]).sum())
                if confusion:
                    np.add.at(conf[h], (labels[:, c], preds[:, c]), 1)
    report = {
        "n": total,
        "misses": misses,
        "accuracy": {h: correct[h] / total for h in heads},
    }
    if confusion:
        report["confusion"] = {h: conf[h].tolist() for h in heads}
    return report


def predict_with_latency(model: Model, source: SampleSource, example_ids) -> tuple:
    """Single-example forward passes with per-example wall time.

    Returns (predictions, seconds): predictions[i] is the [8] class vector or
    None on a detection miss (still timed; assembly is part of the latency).
    """
    preds, times = [], []
    with no_grad():
        for i, e in example_ids:
            t0 = time.perf_counter()
            ex = source.example(i, e)
            if ex is None:
                times.append(time.perf_counter() - t0)
                preds.append(None)
                continue
            inp = NetInput(full_frame=Tensor(ex[0][None]),
                           crops=Tensor(ex[1][None]))
            logits = model.forward_logits(inp)
            p = _argmax_logits(model, logits)[0]
            times.append(time.perf_counter() - t0)
            preds.append(p)
    return preds, times


# ---------------------------------------------------------------------------
# cross-validation


def stratified_kfold(keys, k: int, seed: int = 0, min_count: int | None = None) -> list:
    """Deterministic stratified k-fold over arbitrary hashable keys.

    Items of each key group are dealt round-robin to folds after a seeded
    shuffle, so fold sizes differ by at most one. If any key has fewer than
    min_count (default k) members the caller should fall back to a coarser
    key; see kfold_plan.
    """
    n = len(keys)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k > n:
        raise ConfigError(f"cannot make {k} folds from {n} samples")
    counts = Counter(keys)
    if min_count is not None and min(counts.values()) < min_count:
        raise ConfigError(
            f"stratification infeasible: rarest key has "
            f"{min(counts.values())} < {min_count} members")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    groups: dict = {}
    for idx in order:
        groups.setdefault(keys[idx], []).append(int(idx))
    folds = [[] for _ in range(k)]
    slot = 0
    for key in sorted(groups, key=repr):
        for idx in groups[key]:
            folds[slot % k].append(idx)
            slot += 1
    out = []
    for f in range(k):
        test = sorted(folds[f])
        train_ids = sorted(i for g in range(k) if g != f for i in folds[g])
        out.append((train_ids, test))
    return out


def kfold_plan(reader: DatasetReader, k: int, seed: int = 0) -> list:
    """Sample-level stratified folds for a dataset.

    Stratifies on the concatenated per-expert joint (X, Y, Z, theta, A)
    labels when every combination has at least k members; otherwise falls
    back to the per-expert action labels with a warning.
    """
    labels = [reader.labels(i) for i in range(reader.n_samples)]
    joint = [tuple(l[:, :5].reshape(-1)) for l in labels]
    counts = Counter(joint)
    if min(counts.values()) >= k:
        keys = joint
    else:
        warnings.warn(
            f"joint-label stratification infeasible (rarest combination has "
            f"{min(counts.values())} < {k} samples); falling back to action "
            "labels", stacklevel=2)
        keys = [tuple(l[:, 4]) for l in labels]
    return stratified_kfold(keys, k, seed=seed)


def cross_validate(dataset_path: str, k: int = 5, cfg: TrainConfig | None = None,
                   crop_cfg: CropConfig | None = None,
                   ablation: AblationConfig | None = None,
                   detector: str = "oracle", verbose: bool = False) -> dict:
    """Train and test across k stratified folds; returns per-fold reports
    plus the per-head mean accuracy."""
    cfg = cfg or TrainConfig()
    with DatasetReader(dataset_path) as reader:
        source = SampleSource(reader, crop_cfg=crop_cfg, ablation=ablation,
                              detector=detector)
        folds = kfold_plan(reader, k, seed=cfg.seed)
        fold_reports = []
        for fi, (train_ids, test_ids) in enumerate(folds):
            rng = np.random.default_rng((cfg.seed, fi))
            train_ids = list(train_ids)
            n_val = max(1, int(round(len(train_ids) * cfg.val_fraction)))
            val_pick = rng.permutation(len(train_ids))[:n_val]
            val_mask = np.zeros(len(train_ids), dtype=bool)
            val_mask[val_pick] = True
            val_ids = [s for s, m in zip(train_ids, val_mask) if m]
            fit_ids = [s for s, m in zip(train_ids, val_mask) if not m]
            model = build_model(source.space, source.geometry(),
                                ablation=ablation, seed=cfg.seed + fi)
            run = train(model, source, fit_ids, cfg, val_samples=val_ids)
            test_examples = expand_examples(test_ids, source.n_experts, "all")
            report = evaluate(model, source, test_examples,
                              batch_size=cfg.batch_size)
            fold_reports.append({"fold": fi, "epochs_run": run["epochs_run"],
                                 "test": report})
            if verbose:
                acc = " ".join(f"{h}={v:.3f}"
                               for h, v in report["accuracy"].items())
                print(f"fold {fi}: epochs={run['epochs_run']} {acc}",
                      flush=True)
        heads = fold_reports[0]["test"]["accuracy"].keys()
        mean_acc = {h: float(np.mean([fr["test"]["accuracy"][h]
                                      for fr in fold_reports])) for h in heads}
    return {"k": k, "folds": fold_reports, "mean_accuracy": mean_acc}


# ---------------------------------------------------------------------------
# ablation suite

ABLATION_VARIANTS = (
    ("full", AblationConfig()),
    ("no_relative", AblationConfig(no_relative=True)),
    ("no_temporal", AblationConfig(no_temporal=True)),
    ("no_depth", AblationConfig(no_depth=True)),
    ("no_crop", AblationConfig(no_crop=True)),
)


def holdout_split(reader: DatasetReader, test_fraction: float = 0.2,
                  seed: int = 0) -> tuple:
    """One stratified train/test split (fold 0 of a 1/test_fraction-fold
    plan), shared across ablation variants for a fair comparison."""
    k = max(2, int(round(1.0 / test_fraction)))
    return kfold_plan(reader, k, seed=seed)[0]


def run_ablation_suite(dataset_path: str, seeds=(0, 1, 2),
                       cfg: TrainConfig | None = None,
                       crop_cfg: CropConfig | None = None,
                       variants=ABLATION_VARIANTS,
                       verbose: bool = False) -> dict:
    """Train every ablation variant with every seed on a shared split.

    One failed cell does not stop the suite; the error string lands in the
    report. The result mirrors the shape of a per-variant accuracy table:
    variant -> head -> mean accuracy over seeds (plus per-seed raw values).
    """
    base = cfg or TrainConfig()
    report: dict = {"dataset": dataset_path, "seeds": list(seeds),
                    "variants": {}}
    with DatasetReader(dataset_path) as reader:
        train_ids, test_ids = holdout_split(reader, seed=base.seed)
        for name, ablation in variants:
            cells = []
            for seed in seeds:
                run_cfg = TrainConfig(**{**base.__dict__, "seed": int(seed)})
                try:
                    source = SampleSource(reader, crop_cfg=crop_cfg,
                                          ablation=ablation)
                    rng = np.random.default_rng((int(seed), 1))
                    n_val = max(1, int(round(len(train_ids)
                                             * run_cfg.val_fraction)))
                    pick = rng.permutation(len(train_ids))
                    val_ids = [train_ids[j] for j in pick[:n_val]]
                    fit_ids = [train_ids[j] for j in pick[n_val:]]
                    model = build_model(source.space, source.geometry(),
                                        ablation=ablation, seed=int(seed))
                    train(model, source, fit_ids, run_cfg, val_samples=val_ids)
                    ev = evaluate(model, source,
                                  expand_examples(test_ids, source.n_experts,
                                                  "all"),
                                  batch_size=run_cfg.batch_size)
                    cells.append({"seed": int(seed),
                                  "accuracy": ev["accuracy"],
                                  "misses": ev["misses"]})
                    if verbose:
                        acc = " ".join(f"{h}={v:.3f}"
                                       for h, v in ev["accuracy"].items())
                        print(f"{name} seed {seed}: {acc}", flush=True)
                except GridsightError as err:
                    cells.append({"seed": int(seed), "error": str(err)})
                    if verbose:
                        print(f"{name} seed {seed}: ERROR {err}", flush=True)
            ok = [c for c in cells if "accuracy" in c]
            mean = {}
            if ok:
                for head in ok[0]["accuracy"]:
                    mean[head] = float(np.mean([c["accuracy"][head]
                                                for c in ok]))
            report["variants"][name] = {"cells": cells, "mean_accuracy": mean}
    return report
