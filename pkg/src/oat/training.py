"""Teacher-forced training with per-step cross-entropy, seeded splits and best-validation checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import atomic_write_text
from .model import OATConfig, OATModel, PreparedTrials, prepare_trials
from .optim import AdamState, TrainingError, adam_step
from .positional import PEConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 20
    lr: float = 1e-4
    split: tuple[float, float, float] = (8.0, 1.0, 1.0)
    epochs: int = 50
    patience: int = 10
    seed: int = 0
    use_dpe: bool = True
    use_oa: bool = True
    pe_kind: str = "dpe"
    alpha_auto: bool = False
    augment: bool = False

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("train.lr must be > 0")
        if len(self.split) != 3 or any(r <= 0 for r in self.split):
            raise ConfigError(f"train.split needs three positive ratios, got {self.split}")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.pe_kind not in ("dpe", "sinusoidal", "e2e"):
            raise ConfigError(f"train.pe_kind must be dpe, sinusoidal or e2e, got {self.pe_kind!r}")

    @property
    def effective_pe_kind(self) -> str:
        return self.pe_kind if self.use_dpe else "e2e"

    def apply_ablations(self, cfg: OATConfig) -> OATConfig:
        d = cfg.to_dict()
        d.update(pe_kind=self.effective_pe_kind, use_oa=self.use_oa)
        return OATConfig.from_dict(d)


@dataclass
class TrainingExample:
    """One ground-truth scanpath of one trial; the decoder target is the sequence followed by EOS."""

    trial_index: int
    sequence: list[int]

    def targets(self) -> list[int]:
        return list(self.sequence) + [0]


def split_indices(n: int, ratios, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded shuffle of ``range(n)`` cut into train/val/test parts proportional to ``ratios``."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios <= 0):
        raise ConfigError(f"split ratios must be three positive numbers, got {ratios.tolist()}")
    ratios = ratios / ratios.sum()
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    n_train = n - n_val - n_test
    parts = perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]
    for name, part in zip(("train", "val", "test"), parts):
        if len(part) == 0:
            raise ConfigError(f"{name} split is empty for {n} trials with ratios {ratios.round(3).tolist()}")
    return tuple(np.sort(p) for p in parts)


def examples_for(trials, indices) -> list[TrainingExample]:
    out = []
    for i in indices:
        for path in trials[i].scanpaths:
            if path:
                out.append(TrainingExample(int(i), list(path)))
    return out


def make_batch(examples: list[TrainingExample], prepared: PreparedTrials):
    """Pad a list of examples into decoder histories, targets and per-position loss weights.

    Weights are ``1 / (len + 1)`` on each real position so every sequence
    contributes its mean step loss.
    """
    trial_rows = sorted({e.trial_index for e in examples})
    remap = {t: i for i, t in enumerate(trial_rows)}
    sub = prepared.subset(trial_rows)
    width = max(len(e.sequence) for e in examples)
    histories = np.ones((len(examples), width), dtype=np.int64)
    targets = np.zeros((len(examples), width + 1), dtype=np.int64)
    weights = np.zeros((len(examples), width + 1))
    for b, e in enumerate(examples):
        n = len(e.sequence)
        histories[b, :n] = e.sequence
        targets[b, : n + 1] = e.targets()
        weights[b, : n + 1] = 1.0 / (n + 1)
    trial_index = np.array([remap[e.trial_index] for e in examples], dtype=np.int64)
    return sub, trial_index, histories, targets, weights


def batch_loss(model: OATModel, prepared: PreparedTrials, examples: list[TrainingExample], rng=None) -> T.Tensor:
    """Mean over sequences of the mean per-step cross-entropy."""
    sub, trial_index, histories, targets, weights = make_batch(examples, prepared)
    logits = model.forward(sub, trial_index, histories, rng)
    ce = T.cross_entropy(logits, targets)
    loss = T.scale(T.sum_(T.mul(ce, weights.astype(model.dtype))), 1.0 / len(examples))
    if not np.isfinite(loss.data):
        raise TrainingError("non-finite training loss")
    return loss


def sequence_loss(model: OATModel, trial, sequence, prepared: PreparedTrials | None = None) -> T.Tensor:
    """Loss of one scanpath of one trial (dropout off)."""
    prepared = prepared or prepare_trials([trial], model.cfg.patch_size)
    return batch_loss(model, prepared, [TrainingExample(0, list(sequence))])


def evaluate_loss(model: OATModel, prepared: PreparedTrials, examples, batch_size: int = 64) -> float:
    if not examples:
        return float("nan")
    total = 0.0
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            total += batch_loss(model, prepared, chunk).item() * len(chunk)
    return total / len(examples)


def epoch_batches(examples: list[TrainingExample], batch_size: int, rng: np.random.Generator) -> list[list[TrainingExample]]:
    """Shuffle trials, then each trial's scanpaths, and cut the concatenation into batches.

    Keeping a trial's scanpaths adjacent lets one encoder pass serve several
    sequences in a batch.
    """
    by_trial: dict[int, list[TrainingExample]] = {}
    for e in examples:
        by_trial.setdefault(e.trial_index, []).append(e)
    order = []
    for t in rng.permutation(sorted(by_trial)):
        group = by_trial[int(t)]
        order.extend(group[i] for i in rng.permutation(len(group)))
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def grid_symmetries(rows: int, cols: int) -> list[np.ndarray]:
    """Cell permutations of the grid's mirror symmetries (8 for a square grid, 4 otherwise).

    Entry ``c`` of each permutation is the cell that cell ``c`` moves to;
    the identity comes first.
    """
    x, y = np.arange(rows * cols) % cols, np.arange(rows * cols) // cols
    maps = [(x, y), (cols - 1 - x, y), (x, rows - 1 - y), (cols - 1 - x, rows - 1 - y)]
    if rows == cols:
        maps += [(b, a) for a, b in maps]
    return [(my * cols + mx).astype(np.int64) for mx, my in maps]


def augment_prepared(prepared: PreparedTrials, rows: int, cols: int) -> tuple[PreparedTrials, list[np.ndarray], np.ndarray]:
    """Append every mirrored copy of every trial.

    Returns the enlarged bank, the cell permutations and a ``(T, G)``
    table giving the row of trial ``t`` under symmetry ``g``.
    """
    perms = grid_symmetries(rows, cols)
    n_t = len(prepared.trial_ids)
    tokens, xy, ids = [prepared.token_idx], [prepared.target_xy], list(prepared.trial_ids)
    for g, perm in enumerate(perms[1:], start=1):
        moved = prepared.token_idx.copy()
        moved[:, 1 + perm] = prepared.token_idx[:, 1:]
        cell = perm[prepared.target_xy[:, 1] * cols + prepared.target_xy[:, 0]]
        tokens.append(moved)
        xy.append(np.stack([cell % cols, cell // cols], axis=1))
        ids += [f"{t}~{g}" for t in prepared.trial_ids]
    rows_of = np.arange(n_t)[:, None] + n_t * np.arange(len(perms))[None, :]
    return PreparedTrials(prepared.bank, np.concatenate(tokens), np.concatenate(xy), ids), perms, rows_of


def mirrored_examples(examples, perms, rows_of, rng: np.random.Generator) -> list[TrainingExample]:
    """Each trial's scanpaths under one symmetry drawn for that trial."""
    pick = {}
    out = []
    for e in examples:
        g = pick.setdefault(e.trial_index, int(rng.integers(len(perms))))
        out.append(TrainingExample(int(rows_of[e.trial_index, g]), [int(perms[g][s - 1]) + 1 for s in e.sequence]))
    return out


@dataclass
class TrainResult:
    model: OATModel
    log: list[dict] = field(default_factory=list)
    split: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
    best_epoch: int = 0
    best_val: float = float("inf")

    def log_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for row in self.log:
            writer.writerow([row["epoch"], f"{row['train_loss']:.6f}", f"{row['val_loss']:.6f}"])
        return buf.getvalue()


def train(
    trials,
    train_cfg: TrainConfig | None = None,
    model_cfg: OATConfig | None = None,
    pe_cfg: PEConfig | None = None,
    out_dir=None,
    prepared: PreparedTrials | None = None,
    split=None,
) -> TrainResult:
    """Train a model on ``trials`` and return it with the best validation weights loaded.

    The split is over trials (images), so held-out scanpaths belong to
    unseen shelves. Writes ``model.ckpt`` and ``loss.csv`` to ``out_dir``
    when given.
    """
    train_cfg = train_cfg or TrainConfig()
    train_cfg.validate()
    if not trials:
        raise ConfigError("dataset is empty")
    layout = trials[0].layout
    model_cfg = model_cfg or OATConfig(rows=layout.rows, cols=layout.cols)
    if (model_cfg.rows, model_cfg.cols) != (layout.rows, layout.cols):
        model_cfg = OATConfig.from_dict({**model_cfg.to_dict(), "rows": layout.rows, "cols": layout.cols})
    model_cfg = train_cfg.apply_ablations(model_cfg)
    model = OATModel(model_cfg, pe_cfg, seed=train_cfg.seed)
    prepared = prepared or prepare_trials(trials, model_cfg.patch_size)
    if split is None:
        split = split_indices(len(trials), train_cfg.split, train_cfg.seed)
    train_idx, val_idx, _ = split
    train_ex = examples_for(trials, train_idx)
    val_ex = examples_for(trials, val_idx)
    if not train_ex:
        raise ConfigError("training split holds no scanpaths")
    if train_cfg.alpha_auto:
        model.calibrate_alpha(prepared.subset(train_idx))

    rng = np.random.default_rng(train_cfg.seed + 1)
    train_bank = prepared
    if train_cfg.augment:
        train_bank, perms, rows_of = augment_prepared(prepared, model_cfg.rows, model_cfg.cols)
    state = AdamState()
    result = TrainResult(model, split=split)
    best = model.copy_arrays()
    stale = 0
    params = model.parameters()
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.time()
        total, count = 0.0, 0
        epoch_ex = mirrored_examples(train_ex, perms, rows_of, rng) if train_cfg.augment else train_ex
        for batch in epoch_batches(epoch_ex, train_cfg.batch_size, rng):
            model.zero_grad()
            loss = batch_loss(model, train_bank, batch, rng)
            loss.backward()
            adam_step(params, state=state, lr=train_cfg.lr)
            total += loss.item() * len(batch)
            count += len(batch)
        train_loss = total / count
        val_loss = evaluate_loss(model, prepared, val_ex) if val_ex else train_loss
        result.log.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.info("epoch %d train %.4f val %.4f (%.1fs)", epoch, train_loss, val_loss, time.time() - t0)
        if val_loss < result.best_val - 1e-9:
            result.best_val, result.best_epoch = val_loss, epoch
            best = model.copy_arrays()
            stale = 0
        else:
            stale += 1
            if train_cfg.patience and stale >= train_cfg.patience:
                break
    model.load_arrays(best)
    if out_dir is not None:
        out = Path(out_dir)
        model.save(out / "model.ckpt", {"train": asdict(train_cfg), "best_epoch": result.best_epoch})
        atomic_write_text(out / "loss.csv", result.log_csv())
    return result
