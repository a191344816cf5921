"""Distance-based positional encodings and their sinusoidal / end-to-end alternatives.

A 1-D encoding is a table ``P`` of shape ``(L, d_axis)``. The distance-based
variant is fitted so that the cosine similarity between rows ``i`` and ``j``
follows a Gaussian bump in ``|i - j|`` while every row keeps unit norm.
Grid positions are encoded by concatenating one row per axis (column,
row, target flag) and scaling the result by ``alpha``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class PEConfig:
    L: int = 11
    d_axis: int = 42
    sigma: float = 2.0
    mean: float = 0.0
    lam: float = 1.0
    alpha: float = 1.0
    lr: float = 0.01
    iters: int = 10000
    optimizer: str = "sgd"

    def validate(self) -> None:
        if self.L < 2:
            raise ValueError(f"pe.L must be >= 2, got {self.L}")
        if self.d_axis < 1:
            raise ValueError(f"pe.d_axis must be positive, got {self.d_axis}")
        if not self.sigma > 0:
            raise ValueError(f"pe.sigma must be > 0, got {self.sigma}")
        if self.lam < 0:
            raise ValueError(f"pe.lam must be >= 0, got {self.lam}")
        if self.iters < 1:
            raise ValueError(f"pe.iters must be >= 1, got {self.iters}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"pe.optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass
class PEMatrix:
    """A learned or fixed 1-D positional table (one row per index)."""

    P: Tensor
    kind: str = "dpe"

    @property
    def L(self) -> int:
        return self.P.shape[0]

    @property
    def d_axis(self) -> int:
        return self.P.shape[1]

    def row_norms(self) -> np.ndarray:
        return np.linalg.norm(self.P.data.astype(np.float64), axis=1)

    def cosine_matrix(self) -> np.ndarray:
        P = self.P.data.astype(np.float64)
        U = P / np.linalg.norm(P, axis=1, keepdims=True)
        return U @ U.T

    def half_width(self, level: float = 0.5) -> int | None:
        """Smallest k with cos(P_0, P_k) < level, or None if never reached."""
        row = self.cosine_matrix()[0]
        below = np.nonzero(row < level)[0]
        return int(below[0]) if below.size else None


def gaussian_target(i, j, sigma: float, mean: float = 0.0):
    """Target similarity between indices ``i`` and ``j``: a Gaussian in their distance."""
    d = np.abs(np.asarray(i, dtype=np.float64) - np.asarray(j, dtype=np.float64))
    out = np.exp(-0.5 * ((d - mean) / sigma) ** 2)
    return float(out) if out.ndim == 0 else out


def target_matrix(L: int, sigma: float, mean: float = 0.0) -> np.ndarray:
    idx = np.arange(L)
    return gaussian_target(idx[:, None], idx[None, :], sigma, mean)


def pe_loss(P: Tensor, cfg: PEConfig) -> Tensor:
    """Squared deviation of pairwise cosines from the Gaussian target plus a unit-norm penalty.

    ``(2 / (L (L-1))) * sum_{i<j} (cos(P_i, P_j) - f(i, j))^2 + lam * sum_i (|P_i| - 1)^2``
    """
    L = P.shape[0]
    if P.ndim != 2 or L != cfg.L:
        raise ValueError(f"PE table shape {P.shape} does not match L={cfg.L}")
    sq = T.sum_(T.square(P), axis=1)
    if np.any(sq.data <= 0):
        raise FloatingPointError("zero row in PE table: cosine similarity undefined")
    norms = T.sqrt(sq)
    unit_t = T.div(T.transpose(P), norms)  # (d, L), columns are unit rows of P
    cos = T.matmul(T.transpose(unit_t), unit_t)
    target = target_matrix(L, cfg.sigma, cfg.mean).astype(P.dtype)
    upper = np.triu(np.ones((L, L), dtype=P.dtype), k=1)
    resid = T.mul(T.sub(cos, target), upper)
    fit = T.scale(T.sum_(T.square(resid)), 2.0 / (L * (L - 1)))
    reg = T.scale(T.sum_(T.square(T.sub(norms, 1.0))), cfg.lam)
    return T.add(fit, reg)


def init_table(L: int, d_axis: int, seed: int, dtype=np.float64) -> np.ndarray:
    rng = np.random.default_rng(seed)
    P = rng.uniform(-0.1, 0.1, size=(L, d_axis))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    return P.astype(dtype)


def train_pe(cfg: PEConfig, seed: int = 0, log_every: int = 0) -> PEMatrix:
    """Fit a distance-based table by minimising :func:`pe_loss` from a seeded random start."""
    cfg.validate()
    with T.default_dtype(np.float64):
        P = Tensor(init_table(cfg.L, cfg.d_axis, seed), requires_grad=True)
        m = np.zeros_like(P.data)
        v = np.zeros_like(P.data)
        b1, b2, eps = 0.9, 0.999, 1e-8
        for it in range(1, cfg.iters + 1):
            P.grad = None
            loss = pe_loss(P, cfg)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite PE loss at iteration {it}")
            loss.backward()
            g = P.grad
            if cfg.optimizer == "sgd":
                P.data -= cfg.lr * g
            else:
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                P.data -= cfg.lr * (m / (1 - b1**it)) / (np.sqrt(v / (1 - b2**it)) + eps)
            if log_every and it % log_every == 0:
                log.info("pe iter %d: loss %.6f", it, float(loss.data))
    return PEMatrix(Tensor(P.data, dtype=np.float64), kind="dpe")


def fit_rmse(pe: PEMatrix, sigma: float, mean: float = 0.0) -> float:
    """RMSE between achieved cosines and the Gaussian target over pairs i < j."""
    cos = pe.cosine_matrix()
    target = target_matrix(pe.L, sigma, mean)
    iu = np.triu_indices(pe.L, k=1)
    return float(np.sqrt(np.mean((cos[iu] - target[iu]) ** 2)))


def sinusoidal_pe(L: int, d_axis: int) -> PEMatrix:
    """Fixed table with interleaved sin/cos columns at geometric frequencies."""
    if d_axis % 2:
        raise ValueError(f"sinusoidal encoding needs an even width, got {d_axis}")
    pos = np.arange(L, dtype=np.float64)[:, None]
    freq = 1.0 / (10000.0 ** (np.arange(0, d_axis, 2, dtype=np.float64) / d_axis))
    table = np.zeros((L, d_axis))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return PEMatrix(Tensor(table, dtype=np.float64), kind="sinusoidal")


def sinusoidal_table(L: int, width: int) -> np.ndarray:
    """Sinusoidal rows of any width (odd widths drop the last cosine column)."""
    return sinusoidal_pe(L, width + width % 2).P.data[:, :width]


def e2e_pe(L: int, d_axis: int, seed: int = 0, dtype=None) -> PEMatrix:
    """Trainable table initialised uniformly in [-0.1, 0.1]."""
    rng = np.random.default_rng(seed)
    return PEMatrix(Tensor(rng.uniform(-0.1, 0.1, size=(L, d_axis)), requires_grad=True, dtype=dtype), kind="e2e")


def encode_position(x: int, y: int, z: int, pe_x: PEMatrix, pe_y: PEMatrix, pe_z: PEMatrix, alpha: float = 1.0) -> Tensor:
    """``alpha * (P_x[x] ++ P_y[y] ++ P_z[z])`` for one grid cell."""
    for name, idx, pe in (("x", x, pe_x), ("y", y, pe_y), ("z", z, pe_z)):
        if not 0 <= idx < pe.L:
            raise IndexError(f"{name}={idx} outside encoding table of length {pe.L}")
    code = T.concat([pe_x.P[x], pe_y.P[y], pe_z.P[z]], axis=0)
    return T.scale(code, alpha)


def encode_positions(xs, ys, zs, pe_x: PEMatrix, pe_y: PEMatrix, pe_z: PEMatrix, alpha: float = 1.0) -> Tensor:
    """Vectorised :func:`encode_position` returning one code per row."""
    xs, ys, zs = (np.asarray(a, dtype=np.int64) for a in (xs, ys, zs))
    parts = [
        T.embedding_lookup(pe_x.P, xs),
        T.embedding_lookup(pe_y.P, ys),
        T.embedding_lookup(pe_z.P, zs),
    ]
    return T.scale(T.concat(parts, axis=-1), alpha)


def save_pe(path, tables: dict[str, PEMatrix], meta: dict | None = None) -> None:
    arrays = {f"pe.{axis}": pe.P.data for axis, pe in tables.items()}
    kinds = {axis: pe.kind for axis, pe in tables.items()}
    checkpoint.save(path, arrays, {"kinds": kinds, **(meta or {})}, tag=checkpoint.PE_TAG)


def load_pe(path) -> dict[str, PEMatrix]:
    arrays, meta = checkpoint.load(path, tag=checkpoint.PE_TAG)
    kinds = meta.get("kinds", {})
    out = {}
    for name, arr in arrays.items():
        axis = name.split(".", 1)[1]
        out[axis] = PEMatrix(Tensor(arr, dtype=arr.dtype), kind=kinds.get(axis, "dpe"))
    return out


def axis_widths(p: int) -> tuple[int, int, int]:
    """Split ``p`` into (x, y, z) widths, front-loading the remainder: 128 -> (43, 43, 42)."""
    base = p // 3
    rem = p - 3 * base
    widths = [base + (1 if i < rem else 0) for i in range(3)]
    return widths[0], widths[1], widths[2]


def half_width_of_target(sigma: float, level: float = 0.5) -> float:
    """Distance at which the Gaussian target crosses ``level``."""
    return sigma * math.sqrt(-2.0 * math.log(level))
