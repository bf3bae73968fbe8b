"""Optimizer, learning-rate schedules, and the per-fold training loop.

Two schedules are supported. ``transfer`` starts from pretrained backbone
weights: a short warm phase trains the heads alone at a high rate while the
backbone stays frozen (bit-identical, running stats included), then the whole
network thaws at a reduced rate, then drops to a low rate for the remainder.
``scratch`` trains everything from the first step at a low rate with two
tenfold drops late in the run.

Every epoch ends with a validation pass; the epoch with the best mean
quadratic kappa across heads wins, later epochs winning ties. The winner's
full state is kept as the fold snapshot.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import epoch_indices
from .errors import ConfigurationError, MetricUndefinedError, TrainingError
from .metrics import balanced_accuracy, cohen_kappa
from .model import TASK_CLASSES, backbone_checksum, build_model, \
    save_backbone_weights, set_backbone_trainable
from .preprocess import AugmentConfig, augment
from .serialize import load_tensors, save_tensors
from .tensor import Tensor

SCHEDULES = ("transfer", "scratch")
AUX_HEAD = "aux"
AUX_CLASSES = 4
OARSI_TASKS = tuple(n for n in TASK_CLASSES if n != "KL")


@dataclass(frozen=True)
class TrainConfig:
    schedule: str = "transfer"
    epochs: int = 20
    batch_size: int = 32
    # transfer stages: heads-only, thawed, late
    lr_heads: float = 1e-2
    lr_thaw: float = 1e-3
    lr_late: float = 1e-4
    head_epochs: int = 2
    thaw_epochs: int = 1
    # scratch stage
    lr_scratch: float = 1e-4
    scratch_drops: tuple = (10, 15)
    drop_factor: float = 10.0
    # Adam
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    # data handling
    sampler: str = "kl_balanced"
    augment: bool = True
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    task_weights: tuple = ()   # (head_name, weight) pairs; unlisted heads get 1.0

    def validate(self):
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.schedule == "transfer" and self.epochs < self.head_epochs + self.thaw_epochs:
            raise ConfigurationError(
                "transfer schedule needs at least "
                f"{self.head_epochs + self.thaw_epochs} epochs to reach the thaw stage")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        for name in ("lr_heads", "lr_thaw", "lr_late", "lr_scratch"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigurationError("Adam betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.augment:
            self.aug.validate()
        for name, w in self.task_weights:
            if w < 0:
                raise ConfigurationError(f"task weight for {name!r} must be >= 0")
        return self

    def weight_for(self, head_name):
        for name, w in self.task_weights:
            if name == head_name:
                return float(w)
        return 1.0


def schedule_lr(cfg, epoch):
    """Learning rate and backbone trainability for a 1-based epoch number."""
    if epoch < 1 or epoch > cfg.epochs:
        raise ConfigurationError(f"epoch {epoch} outside [1, {cfg.epochs}]")
    if cfg.schedule == "transfer":
        if epoch <= cfg.head_epochs:
            return cfg.lr_heads, False
        if epoch <= cfg.head_epochs + cfg.thaw_epochs:
            return cfg.lr_thaw, True
        return cfg.lr_late, True
    drops = sum(epoch > d for d in cfg.scratch_drops)
    return cfg.lr_scratch / cfg.drop_factor ** drops, True


# ---------------------------------------------------------------------------
# optimizer


def adam_update(theta, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam step; returns (new_theta, new_m, new_v) without mutation.

    With fresh state (t=1, m=v=0) the step size is lr * g / (|g| + eps), so
    the very first update moves each coordinate by almost exactly lr.
    """
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam(object):
    """Adam with coupled L2 decay (decay added into the gradient).

    Bias-correction steps are counted per parameter, so a tensor that thaws
    mid-run takes a clean full-size first step. Frozen parameters are skipped
    entirely: no update and no state advance.
    """

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.named = list(named_params)
        seen = set()
        for name, _ in self.named:
            if name in seen:
                raise ConfigurationError(f"duplicate parameter name {name!r}")
            seen.add(name)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.state = {}

    def step(self):
        for name, p in self.named:
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in {name}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            st = self.state.get(name)
            if st is None:
                st = [np.zeros_like(p.data), np.zeros_like(p.data), 0]
                self.state[name] = st
            st[2] += 1
            new_theta, st[0], st[1] = adam_update(
                p.data, g, st[0], st[1], st[2],
                self.lr, self.beta1, self.beta2, self.eps)
            p.data[...] = new_theta.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# losses and targets


def multi_task_loss(logits, targets, weights=None):
    """Weighted sum of per-head cross entropies (scalar Tensor).

    With all-equal logits and unit weights this evaluates to
    sum(log(n_classes)) over the heads, which is the natural "knows nothing"
    anchor when reading training curves.
    """
    if len(logits) != len(targets):
        raise ConfigurationError(
            f"{len(logits)} heads but {len(targets)} target arrays")
    if not logits:
        raise ConfigurationError("loss over zero heads")
    total = None
    for i, (lg, tg) in enumerate(zip(logits, targets)):
        term = T.cross_entropy(lg, tg)
        w = 1.0 if weights is None else float(weights[i])
        if w != 1.0:
            term = T.scale(term, w)
        total = term if total is None else T.add(total, term)
    return total


def severity_bucket(exam):
    """Pretraining label: the six compartment grades summed, then bucketed.

    0 -> 0, 1..3 -> 1, 4..8 -> 2, 9+ -> 3.
    """
    total = sum(exam.grade(name) for name in OARSI_TASKS)
    if total == 0:
        return 0
    if total <= 3:
        return 1
    if total <= 8:
        return 2
    return 3


def head_classes(name):
    return TASK_CLASSES.get(name, AUX_CLASSES)


def targets_for(exams, head_names):
    """Per-head int label arrays aligned with ``exams``."""
    out = []
    for name in head_names:
        if name == AUX_HEAD:
            out.append(np.array([severity_bucket(e) for e in exams], dtype=np.int64))
        else:
            out.append(np.array([e.grade(name) for e in exams], dtype=np.int64))
    return out


# ---------------------------------------------------------------------------
# batching and evaluation


def batch_images(images, exams, idxs, rng=None, aug_cfg=None):
    planes = []
    for i in idxs:
        norm = images[exams[i].exam_id]
        if aug_cfg is not None:
            norm = augment(norm, rng, aug_cfg)
        planes.append(norm.values)
    return np.stack(planes)[:, None, :, :]


def predict_grades(model, exams, images, batch_size=32):
    """Argmax grade per head over ``exams``; model is left in eval mode."""
    model.eval()
    chunks = {name: [] for name in model.head_names}
    for start in range(0, len(exams), batch_size):
        idxs = range(start, min(start + batch_size, len(exams)))
        x = Tensor(batch_images(images, exams, idxs))
        for name, lg in zip(model.head_names, model(x)):
            chunks[name].append(np.argmax(lg.data, axis=1))
    return {name: np.concatenate(parts) for name, parts in chunks.items()}


def validation_metrics(model, exams, images, batch_size=32):
    """Quadratic kappa and balanced accuracy per head, plus their kappa mean.

    A head whose metric is undefined on this sample (validation folds can be
    tiny) scores 0.0 rather than aborting the run.
    """
    preds = predict_grades(model, exams, images, batch_size)
    truths = targets_for(exams, model.head_names)
    out = {}
    kappas = []
    for name, y_true in zip(model.head_names, truths):
        k = head_classes(name)
        y_pred = preds[name]
        try:
            kap = cohen_kappa(y_true, y_pred, k, "quadratic")
        except MetricUndefinedError:
            kap = 0.0
        try:
            ba = balanced_accuracy(y_true, y_pred, k)
        except MetricUndefinedError:
            ba = 0.0
        out[f"kappa_{name}"] = kap
        out[f"ba_{name}"] = ba
        kappas.append(kap)
    out["mean_kappa"] = float(np.mean(kappas))
    return out


def select_snapshot(mean_kappas):
    """Index of the winning epoch: highest value, ties going to the later one."""
    if not mean_kappas:
        raise ConfigurationError("no epochs to select from")
    best = 0
    for i, v in enumerate(mean_kappas):
        if v >= mean_kappas[best]:
            best = i
    return best


# ---------------------------------------------------------------------------
# snapshots


@dataclass
class Snapshot:
    """One trained fold: full model state plus the context to rebuild it."""
    weights: dict
    meta: dict

    def save(self, path):
        path = str(path)
        save_tensors(path, self.weights)
        with open(path + ".meta.json", "w") as fh:
            json.dump(self.meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path):
        path = str(path)
        weights = load_tensors(path)
        with open(path + ".meta.json") as fh:
            meta = json.load(fh)
        return cls(weights=weights, meta=meta)


def snapshot_model(snapshot, dtype=np.float32):
    """Rebuild the trained model a snapshot was taken from."""
    from .model import ModelConfig
    cfg = ModelConfig.from_dict(snapshot.meta["model_config"])
    heads = [tuple(h) for h in snapshot.meta["heads"]]
    model = build_model(cfg, int(snapshot.meta["seed"]), dtype=dtype,
                        heads_override=heads)
    model.load_state_arrays(snapshot.weights)
    return model


# ---------------------------------------------------------------------------
# training loops


@dataclass
class FoldResult:
    snapshot: Snapshot
    history: list
    lr_by_epoch: list
    backbone_checksums: list
    log_path: str


def _epoch_rngs(seed, fold, epoch, stream=5):
    sampler = np.random.default_rng(np.random.SeedSequence([seed, stream, fold, epoch, 0]))
    aug = np.random.default_rng(np.random.SeedSequence([seed, stream, fold, epoch, 1]))
    return sampler, aug


def _train_one_epoch(model, opt, exams, images, targets, cfg, rng_sampler, rng_aug):
    model.train()
    idxs = epoch_indices(exams, cfg.sampler, rng_sampler)
    aug_cfg = cfg.aug if cfg.augment else None
    weights = [cfg.weight_for(name) for name in model.head_names]
    total = 0.0
    seen = 0
    for start in range(0, len(idxs), cfg.batch_size):
        batch = idxs[start:start + cfg.batch_size]
        x = Tensor(batch_images(images, exams, batch, rng_aug, aug_cfg))
        batch_targets = [t[batch] for t in targets]
        logits = model(x)
        loss = multi_task_loss(logits, batch_targets, weights)
        model.zero_grad()
        T.backward(loss)
        opt.step()
        total += float(loss.data) * len(batch)
        seen += len(batch)
    return total / seen


def _log_rows_to_csv(path, head_names, history):
    cols = ["epoch", "lr", "train_loss"]
    cols += [f"kappa_{n}" for n in head_names]
    cols += [f"ba_{n}" for n in head_names]
    cols += ["mean_kappa"]
    lines = [",".join(cols)]
    for row in history:
        cells = [str(row["epoch"]), repr(row["lr"])]
        cells += [f"{row[c]:.6f}" for c in cols[2:]]
        lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def run_fold(model, train_exams, val_exams, images, cfg, seed, fold=0,
             out_dir=None, meta=None, log=None):
    """Train one fold end to end and return its best-epoch snapshot.

    ``images`` maps exam_id to a preprocessed NormalizedImage covering both
    exam lists. ``meta`` entries (config hash, model config doc, ...) are
    carried into the snapshot sidecar. ``log`` is an optional callable taking
    one line of text per epoch.
    """
    cfg.validate()
    if not train_exams or not val_exams:
        raise ConfigurationError("run_fold needs non-empty train and val sets")
    missing = [e.exam_id for e in list(train_exams) + list(val_exams)
               if e.exam_id not in images]
    if missing:
        raise ConfigurationError(
            f"{len(missing)} exams lack preprocessed images, first: {missing[0]}")
    seed = int(seed)
    model.reseed_dropout(
        int(np.random.SeedSequence([seed, 4, fold]).generate_state(1)[0]))
    opt = Adam(model.named_parameters(), lr=cfg.lr_late, beta1=cfg.beta1,
               beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)
    train_targets = targets_for(train_exams, model.head_names)

    history = []
    lr_by_epoch = []
    checksums = []
    best_idx = -1
    best_weights = None
    for epoch in range(1, cfg.epochs + 1):
        lr, trainable = schedule_lr(cfg, epoch)
        if cfg.schedule == "transfer":
            set_backbone_trainable(model, trainable)
        opt.lr = lr
        rng_sampler, rng_aug = _epoch_rngs(seed, fold, epoch)
        train_loss = _train_one_epoch(model, opt, train_exams, images,
                                      train_targets, cfg, rng_sampler, rng_aug)
        metrics = validation_metrics(model, val_exams, images, cfg.batch_size)
        row = {"epoch": epoch, "lr": lr, "train_loss": train_loss}
        row.update(metrics)
        history.append(row)
        lr_by_epoch.append(lr)
        checksums.append(backbone_checksum(model))
        if select_snapshot([r["mean_kappa"] for r in history]) == epoch - 1:
            best_idx = epoch - 1
            best_weights = {k: v.copy() for k, v in model.state_arrays().items()}
        if log is not None:
            log(f"fold {fold} epoch {epoch}/{cfg.epochs} lr={lr:g} "
                f"loss={train_loss:.4f} mean_kappa={metrics['mean_kappa']:.4f}")

    best = history[best_idx]
    snap_meta = {
        "fold": fold,
        "epoch": best["epoch"],
        "seed": seed,
        "schedule": cfg.schedule,
        "model_config": model.config.to_dict(),
        "heads": [list(spec) for spec in model.head_specs()],
        "metrics": {k: v for k, v in best.items() if k not in ("epoch", "lr")},
    }
    if meta:
        snap_meta.update(meta)
    snapshot = Snapshot(weights=best_weights, meta=snap_meta)

    log_path = ""
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, f"train_log_fold{fold}.csv")
        _log_rows_to_csv(log_path, model.head_names, history)
        snapshot.save(os.path.join(out_dir, f"snapshot_fold{fold}.kgw"))
    return FoldResult(snapshot=snapshot, history=history,
                      lr_by_epoch=lr_by_epoch, backbone_checksums=checksums,
                      log_path=log_path)


def pretrain_backbone(exams, images, model_config, cfg, seed, out_path,
                      log=None):
    """Train the auxiliary single-head task and save the backbone weights.

    The head predicts the severity bucket (see severity_bucket) so the
    backbone learns joint-space and margin texture before the real heads
    exist. Always runs the scratch schedule.
    """
    cfg.validate()
    if cfg.schedule != "scratch":
        raise ConfigurationError("pretraining uses the scratch schedule")
    if not exams:
        raise ConfigurationError("pretraining needs a non-empty exam list")
    seed = int(seed)
    model = build_model(model_config, seed, heads_override=[(AUX_HEAD, AUX_CLASSES)])
    opt = Adam(model.named_parameters(), lr=cfg.lr_scratch, beta1=cfg.beta1,
               beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)
    targets = targets_for(exams, model.head_names)
    for epoch in range(1, cfg.epochs + 1):
        opt.lr, _ = schedule_lr(cfg, epoch)
        rng_sampler, rng_aug = _epoch_rngs(seed, 0, epoch, stream=6)
        loss = _train_one_epoch(model, opt, exams, images, targets, cfg,
                                rng_sampler, rng_aug)
        if log is not None:
            log(f"pretrain epoch {epoch}/{cfg.epochs} lr={opt.lr:g} loss={loss:.4f}")
    save_backbone_weights(model, out_path)
    return model
