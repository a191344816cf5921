"""Random, Center and object-level winner-take-all comparison scanpaths."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .generation import ScanpathRecord, replicate_rng, sample_index

KINDS = ("random", "center", "wta")


@dataclass
class BaselineConfig:
    kind: str = "random"
    mean_length: float = 8.0
    center_sigma: float | None = None  # cells; None means min(rows, cols) / 3
    seed: int = 0
    max_len: int = 1000

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"baseline.kind must be one of {KINDS}, got {self.kind!r}")
        if not self.mean_length > 1:
            raise ValueError(f"baseline.mean_length must be > 1, got {self.mean_length}")
        if self.center_sigma is not None and not self.center_sigma > 0:
            raise ValueError(f"baseline.center_sigma must be > 0, got {self.center_sigma}")

    def sigma_for(self, layout) -> float:
        return self.center_sigma if self.center_sigma is not None else min(layout.rows, layout.cols) / 3.0


def mean_training_length(trials) -> float:
    lengths = [len(s) for t in trials for s in t.scanpaths]
    if not lengths:
        raise ValueError("no scanpaths to measure the mean length from")
    return float(np.mean(lengths))


def center_distribution(layout, sigma: float) -> np.ndarray:
    """``exp(-d^2 / (2 sigma^2))`` over objects, ``d`` in cells from the grid centre."""
    ids = np.arange(layout.m)
    cx, cy = (layout.cols - 1) / 2.0, (layout.rows - 1) / 2.0
    d2 = (ids % layout.cols - cx) ** 2 + (ids // layout.cols - cy) ** 2
    logits = -d2 / (2.0 * sigma**2)
    p = np.exp(logits - logits.max())
    return p / p.sum()


def _iid_scanpath(p: np.ndarray, cfg: BaselineConfig, rng: np.random.Generator) -> tuple[list[int], str]:
    stop = 1.0 / cfg.mean_length
    path = []
    while len(path) < cfg.max_len:
        path.append(sample_index(p, rng) + 1)
        if rng.random() < stop:
            return path, "EOS"
    return path, "max_len"


def random_scanpath(layout, cfg: BaselineConfig, rng=None, trial_id: str = "") -> ScanpathRecord:
    """IID uniform fixations with geometric stopping at rate ``1 / mean_length``."""
    cfg.validate()
    rng = rng or replicate_rng(cfg.seed, trial_id, 0)
    path, end = _iid_scanpath(np.full(layout.m, 1.0 / layout.m), cfg, rng)
    return ScanpathRecord(trial_id, path, end, cfg.seed, "random")


def center_scanpath(layout, cfg: BaselineConfig, rng=None, trial_id: str = "") -> ScanpathRecord:
    """IID fixations from a Gaussian centred on the grid, geometric stopping as for Random."""
    cfg.validate()
    rng = rng or replicate_rng(cfg.seed, trial_id, 0)
    path, end = _iid_scanpath(center_distribution(layout, cfg.sigma_for(layout)), cfg, rng)
    return ScanpathRecord(trial_id, path, end, cfg.seed, "center")


def patch_features(patches) -> np.ndarray:
    """Mean and standard deviation of each colour channel, one row per object."""
    rows = []
    for p in patches:
        px = np.asarray(p, dtype=np.float64).reshape(-1, np.asarray(p).shape[-1])
        rows.append(np.concatenate([px.mean(axis=0), px.std(axis=0)]))
    return np.array(rows)


def saliency(descriptors: np.ndarray) -> np.ndarray:
    v = np.asarray(descriptors, dtype=np.float64)
    return np.linalg.norm(v - v.mean(axis=0), axis=1)


def wta_scanpath(layout, descriptors: np.ndarray, cfg: BaselineConfig, trial_id: str = "") -> ScanpathRecord:
    """Fixate the most salient object, suppress it and its 4-neighbours, repeat.

    The fixated object's saliency drops to zero and each grid neighbour's
    is halved. Ties (including an all-zero map) go to the lowest id.
    Always returns ``round(mean_length)`` fixations.
    """
    cfg.validate()
    desc = np.asarray(descriptors, dtype=np.float64)
    if len(desc) != layout.m:
        raise ValueError(f"need descriptors for all {layout.m} objects, got {len(desc)}")
    sal = saliency(desc)
    fixated = np.zeros(layout.m, bool)
    n = int(round(cfg.mean_length))
    path = []
    for _ in range(n):
        if fixated.all():
            # every object seen once: start a fresh sweep over the original map
            sal = saliency(desc)
            fixated[:] = False
        cur = int(np.argmax(np.where(fixated, -np.inf, sal)))
        path.append(cur + 1)
        fixated[cur] = True
        sal[cur] = 0.0
        c, r = cur % layout.cols, cur // layout.cols
        for dc, dr in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            if 0 <= c + dc < layout.cols and 0 <= r + dr < layout.rows:
                sal[(r + dr) * layout.cols + c + dc] *= 0.5
    return ScanpathRecord(trial_id, path, "max_len", cfg.seed, "wta")


def baseline_scanpaths(trials, cfg: BaselineConfig, n: int) -> list[ScanpathRecord]:
    """``n`` scanpaths per trial (one for the deterministic WTA)."""
    cfg.validate()
    out = []
    for trial in trials:
        if cfg.kind == "wta":
            feats = patch_features(trial.patches()[1:])
            out.append(wta_scanpath(trial.layout, feats, cfg, trial.trial_id))
            continue
        fn = random_scanpath if cfg.kind == "random" else center_scanpath
        for r in range(n):
            out.append(fn(trial.layout, cfg, replicate_rng(cfg.seed, trial.trial_id, r), trial.trial_id))
    return out
