"""Autoregressive scanpath generation, heatmaps and the history-swap probe."""

from __future__ import annotations

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import atomic_write_bytes, atomic_write_text
from .model import OATModel, PreparedTrials, prepare_trials
from .object_attention import EOS

log = logging.getLogger(__name__)

MODES = ("greedy", "sample")


@dataclass
class ScanpathRecord:
    trial_id: str
    object_ids: list[int]
    terminated_by: str  # "EOS" or "max_len"
    seed: int = 0
    mode: str = "sample"

    def to_line(self) -> str:
        ids = ",".join(str(o) for o in self.object_ids)
        return f"{self.trial_id}\t{self.seed}\t{self.mode}\t{ids}\t{self.terminated_by}"

    @classmethod
    def from_line(cls, line: str) -> "ScanpathRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 5:
            raise ValueError(f"expected 5 tab-separated fields, got {len(parts)}: {line!r}")
        trial_id, seed, mode, ids, term = parts
        return cls(trial_id, [int(o) for o in ids.split(",") if o], term, int(seed), mode)


def write_records(path, records) -> None:
    atomic_write_text(path, "".join(r.to_line() + "\n" for r in records))


def read_records(path) -> list[ScanpathRecord]:
    with open(path) as fh:
        return [ScanpathRecord.from_line(line) for line in fh if line.strip()]


def replicate_rng(seed: int, trial_id: str, replicate: int) -> np.random.Generator:
    """Independent stream per (seed, trial, replicate) so batches are reproducible in any order."""
    return np.random.default_rng([seed, zlib.crc32(trial_id.encode()), replicate])


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def sample_index(p: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from a probability vector."""
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(p) - 1))


class _TrialContext:
    """Encoder states of one trial, reused across every decoding step."""

    def __init__(self, model: OATModel, prepared: PreparedTrials):
        if prepared.token_idx.shape[0] != 1:
            raise ValueError("context holds exactly one trial")
        self.model = model
        with T.no_grad():
            self.F_e = model.encoder_input(prepared)
            self.H_e = model.encode(self.F_e)

    def distributions(self, histories: np.ndarray) -> np.ndarray:
        """Next-step distributions ``(B, m+1)`` after each history row (all rows the same length)."""
        histories = np.asarray(histories, dtype=np.int64)
        zeros = np.zeros(len(histories), dtype=np.int64)
        with T.no_grad():
            F_d = self.model.decoder_input(self.F_e, zeros, histories)
            H_d = self.model.decode(F_d, self.H_e, zeros)
            last = T.take(H_d, (slice(None), slice(H_d.shape[1] - 1, None)))
            logits = self.model.head_logits(self.H_e, last, zeros).data[:, 0]
        return _softmax64(logits)

    def all_distributions(self, history) -> np.ndarray:
        """Distributions at every position of one teacher-forced history, ``(len + 1, m+1)``."""
        zeros = np.zeros(1, dtype=np.int64)
        hist = np.asarray(history, dtype=np.int64).reshape(1, -1)
        with T.no_grad():
            F_d = self.model.decoder_input(self.F_e, zeros, hist)
            H_d = self.model.decode(F_d, self.H_e, zeros)
            logits = self.model.head_logits(self.H_e, H_d, zeros).data[0]
        return _softmax64(logits)


def _check_grid(model: OATModel, trial) -> None:
    if trial.layout.m != model.cfg.m:
        raise ValueError(f"trial {trial.trial_id} has {trial.layout.m} objects; model grid holds {model.cfg.m}")


def generate_many(model: OATModel, trial, n: int, mode: str = "sample", seed: int = 0, max_len: int | None = None,
                  prepared: PreparedTrials | None = None, first_replicate: int = 0) -> list[ScanpathRecord]:
    """Generate ``n`` scanpaths for one trial, decoding all replicates as one batch.

    Replicate ``r`` draws from its own stream ``(seed, trial_id, r)``, so the
    result for a replicate does not depend on ``n`` or batch composition.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be greedy or sample, got {mode!r}")
    _check_grid(model, trial)
    max_len = model.cfg.max_len if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ctx = _TrialContext(model, prepared or prepare_trials([trial], model.cfg.patch_size))
    rngs = [replicate_rng(seed, trial.trial_id, first_replicate + r) for r in range(n)]
    paths: list[list[int]] = [[] for _ in range(n)]
    ended = ["max_len"] * n
    active = list(range(n))
    for _ in range(max_len):
        if not active:
            break
        hist = np.array([paths[r] for r in active], dtype=np.int64).reshape(len(active), -1)
        probs = ctx.distributions(hist)
        still = []
        for row, r in enumerate(active):
            p = probs[row]
            choice = int(np.argmax(p)) if mode == "greedy" else sample_index(p, rngs[r])
            if choice == EOS:
                ended[r] = "EOS"
            else:
                paths[r].append(choice)
                still.append(r)
        active = still
    return [ScanpathRecord(trial.trial_id, paths[r], ended[r], seed, mode) for r in range(n)]


def generate(model: OATModel, trial, mode: str = "sample", seed: int = 0, max_len: int | None = None) -> ScanpathRecord:
    return generate_many(model, trial, 1, mode, seed, max_len)[0]


def generate_dataset(model: OATModel, trials, n: int, mode: str = "sample", seed: int = 0, max_len: int | None = None,
                     threads: int = 1) -> list[ScanpathRecord]:
    """Scanpaths for every trial (one per trial in greedy mode), in trial order.

    Trials may run on ``threads`` workers; per-replicate streams keep the
    output identical to a single-threaded run.
    """
    count = 1 if mode == "greedy" else n

    def one(trial):
        return generate_many(model, trial, count, mode, seed, max_len)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            chunks = list(pool.map(one, trials))
    else:
        chunks = [one(t) for t in trials]
    return [r for chunk in chunks for r in chunk]


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------


def heatmap(scanpaths, layout) -> np.ndarray:
    """Fraction of all fixations landing on each object, as a ``(rows, cols)`` grid."""
    counts = np.zeros(layout.m)
    for s in scanpaths:
        ids = s.object_ids if isinstance(s, ScanpathRecord) else s
        for o in ids:
            counts[layout.check_id(o) - 1] += 1
    total = counts.sum()
    grid = counts / total if total else counts
    return grid.reshape(layout.rows, layout.cols)


def heatmap_csv(grid: np.ndarray) -> str:
    return "".join(",".join(f"{v:.6f}" for v in row) + "\n" for row in grid)


def write_heatmap(path, grid: np.ndarray, cell: int = 16) -> None:
    """Write ``<path>.csv`` and a binary greyscale ``<path>.pgm`` (brightest = most viewed)."""
    path = Path(path)
    atomic_write_text(path.with_suffix(".csv"), heatmap_csv(grid))
    peak = grid.max()
    img = np.zeros_like(grid) if peak <= 0 else grid / peak
    img = np.kron((img * 255).round().astype(np.uint8), np.ones((cell, cell), dtype=np.uint8))
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    atomic_write_bytes(path.with_suffix(".pgm"), header + img.tobytes())


# ---------------------------------------------------------------------------
# history-swap probe
# ---------------------------------------------------------------------------


def history_swap_probe(model: OATModel, trial, base_history, swap_step: int, replacement_id: int, probe_steps,
                       prepared: PreparedTrials | None = None) -> dict[int, float]:
    """Relative change in the probability of re-fixating the swapped-out object.

    The object at ``base_history[swap_step]`` is replaced by
    ``replacement_id``; for each probe step ``s`` (the decoder position
    predicting fixation ``s``, after ``swap_step``) the result holds
    ``(p_swapped - p_base) / p_base`` of the original object.
    """
    _check_grid(model, trial)
    base = [int(o) for o in base_history]
    if not 0 <= swap_step < len(base):
        raise IndexError(f"swap_step {swap_step} outside history of length {len(base)}")
    steps = [int(s) for s in probe_steps]
    for s in steps:
        if not swap_step < s <= len(base):
            raise IndexError(f"probe step {s} must lie in ({swap_step}, {len(base)}]")
    trial.layout.check_id(replacement_id)
    original = base[swap_step]
    swapped = list(base)
    swapped[swap_step] = int(replacement_id)
    ctx = _TrialContext(model, prepared or prepare_trials([trial], model.cfg.patch_size))
    p_base = ctx.all_distributions(base)
    p_swap = ctx.all_distributions(swapped)
    return {s: float((p_swap[s, original] - p_base[s, original]) / p_base[s, original]) for s in steps}
