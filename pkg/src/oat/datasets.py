"""Grid layouts, trials, fixation ingestion and a synthetic shelf generator with an oracle searcher."""

from __future__ import annotations

import csv
import colorsys
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes, atomic_write_text
from .embedding import IngestionError, LayoutError

DATA_TAG = "oat-data-v1"


@dataclass
class GridLayout:
    """A rows x cols shelf. Object ids run 1..m in row-major order; boxes are (left, top, width, height)."""

    rows: int
    cols: int
    boxes: np.ndarray
    image_size: tuple[int, int]  # (width, height) in pixels

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        self.validate()

    @classmethod
    def regular(cls, rows: int, cols: int, cell: int = 32, gutter: int = 4) -> "GridLayout":
        boxes = []
        for r in range(rows):
            for c in range(cols):
                boxes.append((gutter + c * (cell + gutter), gutter + r * (cell + gutter), cell, cell))
        size = (gutter + cols * (cell + gutter), gutter + rows * (cell + gutter))
        return cls(rows, cols, np.array(boxes), size)

    @property
    def m(self) -> int:
        return self.rows * self.cols

    @property
    def diag(self) -> float:
        return math.hypot(*self.image_size)

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise LayoutError(f"grid must have positive extents, got {self.rows} x {self.cols}")
        if len(self.boxes) != self.m:
            raise LayoutError(f"{len(self.boxes)} boxes for a {self.rows} x {self.cols} grid")
        w, h = self.image_size
        b = self.boxes
        if np.any(b[:, 2] <= 0) or np.any(b[:, 3] <= 0):
            raise LayoutError("boxes must have positive size")
        if np.any(b[:, 0] < 0) or np.any(b[:, 1] < 0) or np.any(b[:, 0] + b[:, 2] > w) or np.any(b[:, 1] + b[:, 3] > h):
            raise LayoutError("box outside image bounds")
        for i in range(self.m):
            left, top, bw, bh = b[i]
            ov_x = np.minimum(left + bw, b[i + 1 :, 0] + b[i + 1 :, 2]) - np.maximum(left, b[i + 1 :, 0])
            ov_y = np.minimum(top + bh, b[i + 1 :, 1] + b[i + 1 :, 3]) - np.maximum(top, b[i + 1 :, 1])
            if np.any((ov_x > 0) & (ov_y > 0)):
                raise LayoutError(f"box of object {i + 1} overlaps another box")

    def check_id(self, obj: int) -> int:
        if not 1 <= obj <= self.m:
            raise IndexError(f"object id {obj} outside 1..{self.m}")
        return obj

    def grid_pos(self, obj: int) -> tuple[int, int]:
        """(column, row) of an object."""
        self.check_id(obj)
        return (obj - 1) % self.cols, (obj - 1) // self.cols

    def object_id(self, x: int, y: int) -> int:
        return y * self.cols + x + 1

    def center(self, obj: int) -> tuple[float, float]:
        left, top, w, h = self.boxes[self.check_id(obj) - 1]
        return left + w / 2.0, top + h / 2.0

    def centers(self) -> np.ndarray:
        return self.boxes[:, :2] + self.boxes[:, 2:] / 2.0

    def object_at(self, x_px: float, y_px: float) -> int | None:
        b = self.boxes
        inside = (x_px >= b[:, 0]) & (x_px < b[:, 0] + b[:, 2]) & (y_px >= b[:, 1]) & (y_px < b[:, 1] + b[:, 3])
        hits = np.nonzero(inside)[0]
        return int(hits[0]) + 1 if hits.size else None

    def manhattan(self) -> np.ndarray:
        """(m, m) grid-cell Manhattan distances between objects."""
        ids = np.arange(self.m)
        x, y = ids % self.cols, ids // self.cols
        return np.abs(x[:, None] - x[None, :]) + np.abs(y[:, None] - y[None, :])

    def crop(self, image: np.ndarray, obj: int) -> np.ndarray:
        left, top, w, h = np.round(self.boxes[self.check_id(obj) - 1]).astype(int)
        return image[top : top + h, left : left + w]

    def to_dict(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "image_size": list(self.image_size), "boxes": self.boxes.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GridLayout":
        return cls(int(d["rows"]), int(d["cols"]), np.array(d["boxes"]), tuple(d["image_size"]))


@dataclass
class Trial:
    trial_id: str
    layout: GridLayout
    target: int
    scanpaths: list[list[int]] = field(default_factory=list)
    image: np.ndarray | None = None  # (H, W, 3) uint8
    image_path: str | None = None
    items: list[int] | None = None  # item id per cell (synthetic data only)
    n_items: int | None = None
    target_image: np.ndarray | None = None

    def validate(self) -> None:
        self.layout.check_id(self.target)
        if self.items is not None:
            if len(self.items) != self.layout.m:
                raise LayoutError(f"trial {self.trial_id}: {len(self.items)} items for {self.layout.m} cells")
            target_item = self.items[self.target - 1]
            if self.items.count(target_item) != 1:
                raise LayoutError(f"trial {self.trial_id}: target item appears {self.items.count(target_item)} times")
        for path in self.scanpaths:
            for obj in path:
                self.layout.check_id(obj)

    def load_image(self) -> np.ndarray:
        if self.image is None:
            if self.image_path is None:
                raise IngestionError(f"trial {self.trial_id} has no image")
            self.image = read_image(self.image_path)
        return self.image

    def patches(self) -> list[np.ndarray]:
        """Raw RGB crops: the target first, then objects 1..m."""
        img = self.load_image()
        grid = [self.layout.crop(img, k) for k in range(1, self.layout.m + 1)]
        target = self.target_image if self.target_image is not None else grid[self.target - 1]
        return [target] + grid


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.size == 0:
        raise IngestionError(f"{path}: not an RGB image")
    return arr


def write_png(path, image: np.ndarray) -> None:
    import io

    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


# ---------------------------------------------------------------------------
# fixation ingestion
# ---------------------------------------------------------------------------


def map_fixations(pixel_fixations, layout: GridLayout) -> list[int]:
    """Object id under each fixation; fixations in gutters are dropped, repeats are kept."""
    out = []
    for x_px, y_px in pixel_fixations:
        obj = layout.object_at(float(x_px), float(y_px))
        if obj is not None:
            out.append(obj)
    return out


def center_fixations(sequence, layout: GridLayout) -> list[tuple[float, float]]:
    return [layout.center(obj) for obj in sequence]


def read_fixation_csv(path) -> dict[str, dict[str, list[tuple[float, float]]]]:
    """Group ``trial_id,subject,timestamp_ms,x_px,y_px`` rows by trial then subject, time-ordered."""
    rows = defaultdict(lambda: defaultdict(list))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"trial_id", "subject", "timestamp_ms", "x_px", "y_px"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise IngestionError(f"{path}: header must contain {sorted(required)}")
        for rec in reader:
            rows[rec["trial_id"]][rec["subject"]].append((float(rec["timestamp_ms"]), float(rec["x_px"]), float(rec["y_px"])))
    out = {}
    for trial_id, subjects in rows.items():
        out[trial_id] = {s: [(x, y) for _, x, y in sorted(fix)] for s, fix in sorted(subjects.items())}
    return out


def ingest(fixations_csv, layout_file, out_dir) -> list[Trial]:
    """Convert pixel fixations into object-level trials and write them as a dataset directory.

    The layout file holds ``rows``, ``cols``, ``boxes``, ``image_size`` and
    a ``trials`` list of ``{"trial_id", "image", "target"}`` entries.
    """
    doc = json.loads(Path(layout_file).read_text(encoding="utf-8"))
    layout = GridLayout.from_dict(doc)
    fixations = read_fixation_csv(fixations_csv)
    base = Path(layout_file).parent
    trials = []
    for entry in doc.get("trials", []):
        tid = str(entry["trial_id"])
        image_path = entry.get("image")
        if image_path is not None and not Path(image_path).is_absolute():
            image_path = str((base / image_path).resolve())
        paths = [map_fixations(fx, layout) for fx in fixations.get(tid, {}).values()]
        trial = Trial(tid, layout, int(entry["target"]), [p for p in paths if p], image_path=image_path)
        trial.validate()
        trials.append(trial)
    save_dataset(out_dir, trials, copy_images=False)
    return trials


# ---------------------------------------------------------------------------
# dataset directory format
# ---------------------------------------------------------------------------


def save_dataset(out_dir, trials: list[Trial], copy_images: bool = True, meta: dict | None = None) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for t in trials:
        rec = {"trial_id": t.trial_id, "target": t.target, "layout": t.layout.to_dict(), "scanpaths": t.scanpaths}
        if t.items is not None:
            rec["items"] = list(map(int, t.items))
            rec["n_items"] = t.n_items
        if copy_images and t.image is not None:
            name = f"images/{t.trial_id}.png"
            write_png(out / name, t.image)
            rec["image"] = name
        elif t.image_path is not None:
            rec["image"] = str(t.image_path)
        records.append(rec)
    doc = {"format": DATA_TAG, "meta": meta or {}, "trials": records}
    atomic_write_text(out / "trials.json", json.dumps(doc, indent=1))


def load_dataset(data_dir) -> list[Trial]:
    base = Path(data_dir)
    doc = json.loads((base / "trials.json").read_text(encoding="utf-8"))
    if doc.get("format") != DATA_TAG:
        raise IngestionError(f"{base}: expected format {DATA_TAG!r}")
    trials = []
    for rec in doc["trials"]:
        image = rec.get("image")
        if image is not None and not Path(image).is_absolute():
            image = str(base / image)
        t = Trial(
            str(rec["trial_id"]),
            GridLayout.from_dict(rec["layout"]),
            int(rec["target"]),
            [list(map(int, p)) for p in rec.get("scanpaths", [])],
            image_path=image,
            items=rec.get("items"),
            n_items=rec.get("n_items"),
        )
        t.validate()
        trials.append(t)
    return trials


def dataset_meta(data_dir) -> dict:
    return json.loads((Path(data_dir) / "trials.json").read_text(encoding="utf-8")).get("meta", {})


# ---------------------------------------------------------------------------
# synthetic shelves
# ---------------------------------------------------------------------------

N_PATTERNS = 4


def item_template(item: int, n_items: int) -> tuple[int, int]:
    """(colour index, pattern index) of an item."""
    return item % n_colours(n_items), item // n_colours(n_items)


def n_colours(n_items: int) -> int:
    return max(1, math.ceil(n_items / N_PATTERNS))


def palette(n: int) -> np.ndarray:
    cols = [colorsys.hsv_to_rgb(k / n, 0.85, 0.9) for k in range(n)]
    return np.round(np.array(cols) * 255).astype(np.uint8)


def render_item(item: int, n_items: int, cell: int) -> np.ndarray:
    """Procedural cell: a colour from the palette drawn with one of four patterns."""
    colour, pattern = item_template(item, n_items)
    rgb = palette(n_colours(n_items))[colour]
    yy, xx = np.mgrid[0:cell, 0:cell]
    band = max(2, cell // 8)
    if pattern == 0:
        mask = np.ones((cell, cell), bool)
    elif pattern == 1:
        mask = (yy // band) % 2 == 0
    elif pattern == 2:
        mask = (xx // band) % 2 == 0
    else:
        c = (cell - 1) / 2.0
        mask = (np.abs(yy - c) + np.abs(xx - c)) <= cell * 0.42
    img = np.full((cell, cell, 3), 235, np.uint8)
    img[mask] = rgb
    img[0, :] = img[-1, :] = img[:, 0] = img[:, -1] = 40
    return img


def item_similarity(a: int, b: int, n_items: int) -> float:
    """Template-level similarity used by the oracle: 1 for the same item, partial credit for shared colour/pattern."""
    if a == b:
        return 1.0
    ca, pa = item_template(a, n_items)
    cb, pb = item_template(b, n_items)
    return 0.5 * (ca == cb) + 0.25 * (pa == pb)


def render_shelf(layout: GridLayout, items, n_items: int) -> np.ndarray:
    w, h = layout.image_size
    img = np.full((h, w, 3), 200, np.uint8)
    for k, item in enumerate(items):
        left, top, bw, bh = np.round(layout.boxes[k]).astype(int)
        img[top : top + bh, left : left + bw] = render_item(int(item), n_items, bw)
    return img


@dataclass
class OraclePolicy:
    """Stochastic searcher: feature-guided, distance-penalised sampling with decaying inhibition of return."""

    w_feature: float = 3.0
    w_distance: float = 1.0
    w_ior: float = 4.0
    memory_span: int = 4
    ior_decay: float = 0.6
    refix_prob: float = 0.12
    confirm_prob: float = 0.6
    max_len: int = 30
    seed: int = 0

    def validate(self) -> None:
        for name in ("w_feature", "w_distance", "w_ior", "ior_decay", "refix_prob", "confirm_prob"):
            value = getattr(self, name)
            if math.isnan(value) or value < 0:
                raise ValueError(f"oracle.{name} must be a non-negative number, got {value}")
        if not 0 <= self.refix_prob < 1 or not 0 <= self.confirm_prob <= 1:
            raise ValueError("oracle probabilities must lie in [0, 1)")
        if self.max_len < 1:
            raise ValueError("oracle.max_len must be >= 1")


def _sample_logits(logits: np.ndarray, rng: np.random.Generator) -> int:
    top = logits.max()
    w = np.exp(logits - top)
    return int(rng.choice(len(logits), p=w / w.sum()))


def oracle_scanpaths(trial: Trial, policy: OraclePolicy, n_paths: int, rng: np.random.Generator | None = None) -> list[list[int]]:
    """Sample human-like object sequences for one trial.

    Each saccade targets object ``o`` with probability proportional to
    ``exp(w_feature * sim(o, target) - w_distance * manhattan(current, o) - ior(o))``,
    where ``ior`` decays geometrically with the number of fixations since
    ``o`` was last seen and vanishes after ``memory_span``. The current
    object is refixated with probability ``refix_prob``. The path stops
    on the target, optionally after one confirming refixation.

    Infinite weights act as hard constraints, applied in the order
    inhibition, distance, feature similarity.
    """
    policy.validate()
    if trial.items is None or trial.n_items is None:
        raise ValueError("oracle scanpaths need item templates (synthetic trials)")
    rng = rng or np.random.default_rng(policy.seed)
    layout = trial.layout
    target_item = trial.items[trial.target - 1]
    sims = np.array([item_similarity(it, target_item, trial.n_items) for it in trial.items])
    dist = layout.manhattan().astype(np.float64)
    ids = np.arange(layout.m)
    cx, cy = (layout.cols - 1) / 2.0, (layout.rows - 1) / 2.0
    start_dist = np.abs(ids % layout.cols - cx) + np.abs(ids // layout.cols - cy)
    hard_ior = math.isinf(policy.w_ior)
    hard_dist = math.isinf(policy.w_distance)
    hard_feat = math.isinf(policy.w_feature)
    base_feat = np.zeros(layout.m) if hard_feat else policy.w_feature * sims
    paths = []
    for _ in range(n_paths):
        path: list[int] = []
        last_seen: dict[int, int] = {}
        cur = None
        while len(path) < policy.max_len:
            if cur is not None and cur == trial.target - 1:
                if rng.random() < policy.confirm_prob:
                    path.append(cur + 1)
                break
            if cur is not None and rng.random() < policy.refix_prob:
                path.append(cur + 1)
                last_seen[cur] = len(path) - 1
                continue
            d = start_dist if cur is None else dist[cur]
            logits = base_feat - (0.0 if hard_dist else policy.w_distance * d)
            allowed = np.ones(layout.m, bool)
            t = len(path)
            for obj, when in last_seen.items():
                age = t - 1 - when
                if age < policy.memory_span:
                    if hard_ior:
                        allowed[obj] = False
                    else:
                        logits[obj] -= policy.w_ior * policy.ior_decay**age
            if cur is not None:
                allowed[cur] = False
            if not allowed.any():
                allowed[:] = True
                if cur is not None:
                    allowed[cur] = False
            if hard_dist:
                allowed &= d == d[allowed].min()
            if hard_feat:
                allowed &= sims == sims[allowed].max()
            cur = _sample_logits(np.where(allowed, logits, -np.inf), rng)
            path.append(cur + 1)
            last_seen[cur] = len(path) - 1
        paths.append(path)
    return paths


def synth_dataset(
    rows: int,
    cols: int,
    n_items: int,
    n_trials: int,
    seed: int,
    paths_per_trial: int = 8,
    cell: int = 32,
    gutter: int = 4,
    policy: OraclePolicy | None = None,
) -> list[Trial]:
    """Render ``n_trials`` shuffled shelves with one target each and attach oracle scanpaths.

    The target item occupies exactly one cell; the other cells hold the
    remaining items, each used once before any repeats. Deterministic in
    ``seed``.
    """
    if n_items < 2:
        raise ValueError("need at least two item templates (a target and a distractor)")
    rng = np.random.default_rng(seed)
    layout = GridLayout.regular(rows, cols, cell, gutter)
    policy = policy or OraclePolicy()
    m = layout.m
    trials = []
    for t in range(n_trials):
        target_item = int(rng.integers(n_items))
        others = np.array([i for i in range(n_items) if i != target_item])
        fill = list(rng.permutation(others)[: m - 1])
        if m - 1 > len(fill):
            fill += list(rng.choice(others, size=m - 1 - len(fill)))
        cells = [int(i) for i in fill] + [target_item]
        cells = [cells[k] for k in rng.permutation(m)]
        trial = Trial(
            f"t{t:04d}",
            layout,
            cells.index(target_item) + 1,
            image=render_shelf(layout, cells, n_items),
            items=cells,
            n_items=n_items,
        )
        trial.scanpaths = oracle_scanpaths(trial, policy, paths_per_trial, rng)
        trial.validate()
        trials.append(trial)
    return trials
