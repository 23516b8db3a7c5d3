"""Cross-validation planning, training loops, and experiment orchestration.

Training is subject-dependent: every subject gets a stratified k-fold plan
whose training splits hold out a stratified validation fraction for early
stopping. Two regimes are provided: single-stage cross-entropy training of
encoder plus classifier, and the two-stage contrastive protocol (encoder
plus projection head under the supervised contrastive loss, then a linear
classifier trained on the frozen encoder's outputs).
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import models
from .losses import cross_entropy, supcon_loss
from .models import (
    HEAD_CLASSIFIER,
    ModelConfig,
    Network,
    attach_classifier_head,
    attach_projection_head,
    build_encoder,
    discard_head,
    save_checkpoint,
)
from .network import adam_init, adam_step, run_backward, run_forward
from .report import RunReport
from .signals import TrialSet

logger = logging.getLogger(__name__)

LOSS_CE = "ce"
LOSS_SCL = "scl"
LOSS_MODES = (LOSS_CE, LOSS_SCL)


@dataclass
class TrainConfig:
    arch: str = models.ARCH_EEGNET
    loss_mode: str = LOSS_CE
    feature_kind: str = "preprocessed_eeg"
    batch_size: int = 32
    patience: int = 20
    max_epochs: int = 200
    tau: float = 0.07
    lr: float = 1e-3
    val_fraction: float = 0.125
    folds: int = 5
    seed: int = 0
    num_classes: int = 26
    dropout_p: float = 0.5
    proj_dim: int = 128

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.loss_mode == LOSS_SCL and self.batch_size < 2:
            raise ValueError("contrastive training needs batch_size >= 2")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.folds < 2:
            raise ValueError("batch_size, max_epochs >= 1 and folds >= 2 required")
        if not (0 < self.val_fraction < 1):
            raise ValueError("val_fraction must be in (0, 1)")

    def model_config(self, ts: TrialSet) -> ModelConfig:
        return ModelConfig(
            arch=self.arch,
            input_channels=ts.n_channels,
            input_samples=ts.n_samples,
            num_classes=self.num_classes,
            dropout_p=self.dropout_p,
            proj_dim=self.proj_dim,
        )


@dataclass
class CvPlan:
    """Stratified fold assignment plus per-fold validation holdouts."""

    subject: str
    n_folds: int
    fold_of: np.ndarray
    val_ids: list[np.ndarray]

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def val_indices(self, fold: int) -> np.ndarray:
        return self.val_ids[fold]

    def train_indices(self, fold: int) -> np.ndarray:
        mask = self.fold_of != fold
        mask[self.val_ids[fold]] = False
        return np.flatnonzero(mask)


def plan_cv(
    ts: TrialSet, folds: int = 5, val_fraction: float = 0.125, seed: int = 0
) -> CvPlan:
    """Assign trials of one subject to mutually exclusive stratified folds.

    Within each fold's training split, val_fraction is held out per class
    for early stopping, so train, validation, and test are disjoint and
    exhaustive for every fold.
    """
    subjects = ts.subjects
    if len(subjects) != 1:
        raise ValueError(f"plan_cv expects a single-subject trial set, got {subjects}")
    labels = ts.labels()
    rng = np.random.default_rng(seed)
    fold_of = np.full(len(labels), -1, dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < folds:
            raise ValueError(
                f"class {cls} has {idx.size} trials, fewer than {folds} folds"
            )
        rng.shuffle(idx)
        fold_of[idx] = np.arange(idx.size) % folds
    val_ids = []
    for fold in range(folds):
        held = []
        train_mask = fold_of != fold
        for cls in np.unique(labels):
            idx = np.flatnonzero(train_mask & (labels == cls))
            rng.shuffle(idx)
            n_val = max(1, int(round(idx.size * val_fraction)))
            held.append(idx[:n_val])
        val_ids.append(np.sort(np.concatenate(held)))
    return CvPlan(
        subject=subjects[0], n_folds=folds, fold_of=fold_of, val_ids=val_ids
    )


def _stack(ts: TrialSet, indices: np.ndarray, dtype=np.float32):
    x = np.stack([ts.trials[i].data for i in indices]).astype(dtype)
    x = x[:, np.newaxis, :, :]
    y = np.array([ts.trials[i].label for i in indices], dtype=np.int64)
    return x, y


def _assert_no_leakage(plan: CvPlan, fold: int) -> None:
    train = set(plan.train_indices(fold).tolist())
    val = set(plan.val_indices(fold).tolist())
    test = set(plan.test_indices(fold).tolist())
    if (train | val) & test:
        raise AssertionError("train/validation indices leak into the test fold")
    if train & val:
        raise AssertionError("train and validation indices overlap")


def _batches(rng: np.random.Generator, n: int, batch_size: int, merge_singleton: bool):
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if merge_singleton and len(batches) > 1 and batches[-1].size == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def predict(net: Network, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    outputs = []
    for i in range(0, x.shape[0], batch_size):
        probs = net.forward(x[i : i + batch_size], train=False)
        outputs.append(np.argmax(probs, axis=1))
    return np.concatenate(outputs)


def evaluate(net: Network, trials, batch_size: int = 128) -> float:
    """Fraction of correct argmax predictions; deterministic in eval mode."""
    if isinstance(trials, TrialSet):
        if not trials.trials:
            raise ValueError("cannot evaluate an empty trial set")
        x, y = _stack(trials, np.arange(len(trials)), dtype=net.dtype)
    else:
        x, y = trials
        if x.shape[0] == 0:
            raise ValueError("cannot evaluate an empty batch")
    return float((predict(net, x, batch_size) == y).mean())


@dataclass
class TrainResult:
    net: Network
    accuracy: float
    best_val: float
    history: list[dict] = field(default_factory=list)
    stage1_history: list[dict] = field(default_factory=list)
    subject: str = ""
    fold: int = 0


class _EarlyStopper:
    """Track the best validation metric and say when to stop."""

    def __init__(self, patience: int, mode: str):
        self.patience = patience
        self.sign = 1.0 if mode == "max" else -1.0
        self.best = -np.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, value: float, epoch: int) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        score = self.sign * value
        if score > self.best:
            self.best = score
            self.best_epoch = epoch
            self.stale = 0
            return True, False
        self.stale += 1
        return False, self.stale >= self.patience

    @property
    def best_value(self) -> float:
        return self.sign * self.best


def _train_classifier_epochs(
    net: Network,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[list[dict], float]:
    """CE loop over the full network with early stopping on val accuracy."""
    params, names = net.trainable_params()
    opt = adam_init(params, lr=cfg.lr)
    stopper = _EarlyStopper(cfg.patience, "max")
    best_state = net.state_arrays()
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        losses, counts = [], []
        for batch in _batches(rng, x_train.shape[0], cfg.batch_size, False):
            probs = net.forward(x_train[batch], train=True)
            loss = cross_entropy(probs, y_train[batch])
            net.backward(loss.grad.astype(net.dtype), from_logits=True)
            adam_step(opt, params, net.gradients_for(names))
            net.step_count += 1
            losses.append(loss.value * batch.size)
            counts.append(batch.size)
        train_loss = float(np.sum(losses) / np.sum(counts))
        val_acc = evaluate(net, (x_val, y_val))
        history.append({"epoch": epoch, "train_loss": train_loss, "val_metric": val_acc})
        improved, stop = stopper.update(val_acc, epoch)
        if improved:
            best_state = net.state_arrays()
        logger.info(
            "epoch %3d  train_loss %.4f  val_acc %.4f%s",
            epoch, train_loss, val_acc, "  *" if improved else "",
        )
        if stop:
            break
    net.load_state_arrays(best_state)
    return history, stopper.best_value


def train_ce(ts: TrialSet, plan: CvPlan, fold: int, cfg: TrainConfig) -> TrainResult:
    """Jointly train encoder and classifier with cross-entropy."""
    if cfg.loss_mode != LOSS_CE:
        raise ValueError(f"train_ce called with loss_mode {cfg.loss_mode!r}")
    _assert_no_leakage(plan, fold)
    train_idx = plan.train_indices(fold)
    val_idx = plan.val_indices(fold)
    test_idx = plan.test_indices(fold)
    if train_idx.size == 0 or val_idx.size == 0 or test_idx.size == 0:
        raise ValueError(f"fold {fold} has an empty split")
    x_train, y_train = _stack(ts, train_idx)
    x_val, y_val = _stack(ts, val_idx)
    x_test, y_test = _stack(ts, test_idx)

    net = build_encoder(cfg.model_config(ts), seed=cfg.seed)
    attach_classifier_head(net, freeze_encoder=False)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(fold, 1)))
    history, best_val = _train_classifier_epochs(
        net, x_train, y_train, x_val, y_val, cfg, rng
    )
    accuracy = evaluate(net, (x_test, y_test))
    return TrainResult(
        net=net,
        accuracy=accuracy,
        best_val=best_val,
        history=history,
        subject=plan.subject,
        fold=fold,
    )


def _supcon_epoch_metric(values: list[float], anchors: list[int]) -> float:
    total_anchors = max(int(np.sum(anchors)), 1)
    return float(np.sum(values) / total_anchors)


def _embed(net: Network, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    outputs = [
        net.forward(x[i : i + batch_size], train=False)
        for i in range(0, x.shape[0], batch_size)
    ]
    return np.concatenate(outputs)


def _encode(net: Network, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    outputs = [
        net.forward_encoder(x[i : i + batch_size], train=False)
        for i in range(0, x.shape[0], batch_size)
    ]
    return np.concatenate(outputs)


def train_scl(ts: TrialSet, plan: CvPlan, fold: int, cfg: TrainConfig) -> TrainResult:
    """Two-stage protocol: contrastive representation, then a frozen-encoder
    linear classifier.

    Stage 1 stops early on the validation contrastive loss (mean per
    anchor); stage 2 trains only the classifier head on cached eval-mode
    encoder outputs, so the encoder bytes are untouched, and stops on
    validation accuracy. The returned network has the same inference layer
    sequence as a cross-entropy model.
    """
    if cfg.loss_mode != LOSS_SCL:
        raise ValueError(f"train_scl called with loss_mode {cfg.loss_mode!r}")
    _assert_no_leakage(plan, fold)
    train_idx = plan.train_indices(fold)
    val_idx = plan.val_indices(fold)
    test_idx = plan.test_indices(fold)
    if train_idx.size == 0 or val_idx.size == 0 or test_idx.size == 0:
        raise ValueError(f"fold {fold} has an empty split")
    x_train, y_train = _stack(ts, train_idx)
    x_val, y_val = _stack(ts, val_idx)
    x_test, y_test = _stack(ts, test_idx)

    net = build_encoder(cfg.model_config(ts), seed=cfg.seed)
    attach_projection_head(net)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(fold, 2)))

    params, names = net.trainable_params()
    opt = adam_init(params, lr=cfg.lr)
    stopper = _EarlyStopper(cfg.patience, "min")
    best_state = net.state_arrays()
    stage1_history = []
    for epoch in range(1, cfg.max_epochs + 1):
        values, anchors = [], []
        for batch in _batches(rng, x_train.shape[0], cfg.batch_size, True):
            z = net.forward(x_train[batch], train=True)
            loss = supcon_loss(z, y_train[batch], tau=cfg.tau)
            net.backward(loss.grad.astype(net.dtype))
            adam_step(opt, params, net.gradients_for(names))
            net.step_count += 1
            values.append(loss.value)
            anchors.append(loss.anchors_used)
        train_loss = _supcon_epoch_metric(values, anchors)
        val_values, val_anchors = [], []
        for i in range(0, x_val.shape[0], cfg.batch_size):
            zv = net.forward(x_val[i : i + cfg.batch_size], train=False)
            if zv.shape[0] < 2:
                continue
            out = supcon_loss(zv, y_val[i : i + cfg.batch_size], tau=cfg.tau)
            val_values.append(out.value)
            val_anchors.append(out.anchors_used)
        val_loss = _supcon_epoch_metric(val_values, val_anchors)
        stage1_history.append(
            {"epoch": epoch, "train_loss": train_loss, "val_metric": val_loss}
        )
        improved, stop = stopper.update(val_loss, epoch)
        if improved:
            best_state = net.state_arrays()
        logger.info(
            "stage1 epoch %3d  train_scl %.4f  val_scl %.4f%s",
            epoch, train_loss, val_loss, "  *" if improved else "",
        )
        if stop:
            break
    net.load_state_arrays(best_state)

    # Stage 2: frozen encoder, fresh classifier head on cached features.
    discard_head(net)
    attach_classifier_head(net, freeze_encoder=True)
    f_train = _encode(net, x_train)
    f_val = _encode(net, x_val)
    head = net.head
    head_params = [layer.params[name] for layer in head for name in layer.params]
    head_names = [(layer, name) for layer in head for name in layer.params]
    opt2 = adam_init(head_params, lr=cfg.lr)
    stopper2 = _EarlyStopper(cfg.patience, "max")
    best_head = net.state_arrays()
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        losses, counts = [], []
        for batch in _batches(rng, f_train.shape[0], cfg.batch_size, False):
            probs = run_forward(head, f_train[batch], train=True)
            loss = cross_entropy(probs, y_train[batch])
            run_backward(head[:-1], loss.grad.astype(net.dtype))
            grads = [layer.grads[name] for layer, name in head_names]
            adam_step(opt2, head_params, grads)
            net.step_count += 1
            losses.append(loss.value * batch.size)
            counts.append(batch.size)
        train_loss = float(np.sum(losses) / np.sum(counts))
        val_probs = run_forward(head, f_val, train=False)
        val_acc = float((np.argmax(val_probs, axis=1) == y_val).mean())
        history.append({"epoch": epoch, "train_loss": train_loss, "val_metric": val_acc})
        improved, stop = stopper2.update(val_acc, epoch)
        if improved:
            best_head = net.state_arrays()
        logger.info(
            "stage2 epoch %3d  train_ce %.4f  val_acc %.4f%s",
            epoch, train_loss, val_acc, "  *" if improved else "",
        )
        if stop:
            break
    net.load_state_arrays(best_head)
    accuracy = evaluate(net, (x_test, y_test))
    return TrainResult(
        net=net,
        accuracy=accuracy,
        best_val=stopper2.best_value,
        history=history,
        stage1_history=stage1_history,
        subject=plan.subject,
        fold=fold,
    )


def train_fold(ts: TrialSet, plan: CvPlan, fold: int, cfg: TrainConfig) -> TrainResult:
    if cfg.loss_mode == LOSS_CE:
        return train_ce(ts, plan, fold, cfg)
    return train_scl(ts, plan, fold, cfg)


def _unit_seed(base_seed: int, subject_index: int, fold: int) -> int:
    return int(
        np.random.SeedSequence(
            entropy=base_seed, spawn_key=(subject_index, fold)
        ).generate_state(1)[0]
    )


def _run_unit(args) -> tuple[str, int, float, list[dict], list[dict]]:
    ts, plan, fold, cfg = args
    result = train_fold(ts, plan, fold, cfg)
    return result.subject, fold, result.accuracy, result.history, result.stage1_history


def _write_history_csv(path: Path, history: list[dict]) -> None:
    lines = ["epoch,train_loss,val_metric"]
    lines += [
        f"{row['epoch']},{row['train_loss']:.6f},{row['val_metric']:.6f}"
        for row in history
    ]
    path.write_text("\n".join(lines) + "\n")


def run_experiment(
    ts: TrialSet,
    cfg: TrainConfig,
    out_dir: str | Path,
    subjects: list[str] | None = None,
    jobs: int = 1,
    save_checkpoints: bool = True,
) -> RunReport:
    """Full cross-validation for one (arch, loss, feature) cell.

    Writes the effective config, per-epoch CSV logs, per-fold checkpoints,
    a resumable state marker, and report.json / report.txt into out_dir.
    Completed (subject, fold) units recorded in the state marker are
    skipped on rerun with an identical config.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_dict = asdict(cfg)
    state_path = out_dir / "state.json"
    state = {"config": cfg_dict, "completed": {}}
    if state_path.exists():
        previous = json.loads(state_path.read_text())
        if previous.get("config") == cfg_dict:
            state = previous
            logger.info("resuming run in %s", out_dir)
        else:
            logger.warning("existing state in %s has a different config; restarting", out_dir)
    (out_dir / "config.json").write_text(
        json.dumps(cfg_dict, indent=2, sort_keys=True) + "\n"
    )

    wanted = subjects if subjects is not None else ts.subjects
    missing = [s for s in wanted if s not in ts.subjects]
    if missing:
        raise ValueError(f"subjects not present in the trial set: {missing}")

    units = []
    for s_idx, subject in enumerate(wanted):
        sub_ts = ts.for_subject(subject)
        plan = plan_cv(
            sub_ts, folds=cfg.folds, val_fraction=cfg.val_fraction,
            seed=_unit_seed(cfg.seed, s_idx, cfg.folds),
        )
        for fold in range(cfg.folds):
            done = state["completed"].get(subject, {})
            if str(fold) in done:
                continue
            unit_cfg = TrainConfig(**{**cfg_dict, "seed": _unit_seed(cfg.seed, s_idx, fold)})
            units.append((subject, fold, sub_ts, plan, unit_cfg))

    def record(subject, fold, accuracy, history, stage1_history):
        state["completed"].setdefault(subject, {})[str(fold)] = accuracy
        state_path.write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")
        _write_history_csv(out_dir / f"metrics_{subject}_fold{fold}.csv", history)
        if stage1_history:
            _write_history_csv(
                out_dir / f"metrics_{subject}_fold{fold}_stage1.csv", stage1_history
            )

    if jobs > 1 and units:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for (subject, fold, *_), out in zip(
                units, pool.map(_run_unit, [(u[2], u[3], u[1], u[4]) for u in units])
            ):
                record(out[0], out[1], out[2], out[3], out[4])
    else:
        for subject, fold, sub_ts, plan, unit_cfg in units:
            logger.info("training subject %s fold %d (%s/%s)",
                        subject, fold, cfg.arch, cfg.loss_mode)
            result = train_fold(sub_ts, plan, fold, unit_cfg)
            if save_checkpoints:
                save_checkpoint(result.net, out_dir / f"model_{subject}_fold{fold}")
            record(subject, fold, result.accuracy, result.history, result.stage1_history)

    report = RunReport(n_folds=cfg.folds)
    for subject in wanted:
        for fold_str, acc in state["completed"].get(subject, {}).items():
            report.add_result(
                cfg.feature_kind, cfg.arch, cfg.loss_mode, subject, int(fold_str), acc
            )
    report.save_json(out_dir / "report.json")
    (out_dir / "report.txt").write_text(report.render_text())
    return report


def embedding_margin(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    """Mean same-class minus mean cross-class cosine similarity of encoder
    outputs, a geometry score for learned representations."""
    feats = _encode(net, x).astype(np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = feats / np.maximum(norms, 1e-12)
    sim = feats @ feats.T
    same = y[:, None] == y[None, :]
    off = ~np.eye(len(y), dtype=bool)
    same_mean = sim[same & off].mean()
    diff_mean = sim[~same].mean()
    return float(same_mean - diff_mean)
