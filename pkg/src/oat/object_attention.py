"""Object-attention head: bilinear scores between encoder tokens and decoder states.

Logit ``i`` of a decoder step belongs to encoder token ``i``. Token 0 is the
target token and its slot doubles as the end-of-sequence outcome, so the
distribution has ``m + 1`` entries: EOS followed by objects ``1..m``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .transformer import dense, init_linear

EOS = 0


def init_oa(rng, h: int, k: int, n_blocks: int, dtype) -> dict[str, Tensor]:
    params = {}
    for b in range(n_blocks):
        for side in ("enc", "dec"):
            params.update(init_linear(rng, h, k, f"oa.{b}.{side}.1", dtype))
            params.update(init_linear(rng, k, k, f"oa.{b}.{side}.2", dtype))
    return params


def _embed(x: Tensor, params, prefix: str) -> Tensor:
    return dense(T.relu(dense(x, params, f"{prefix}.1")), params, f"{prefix}.2")


def oa_logits(H_e: Tensor, H_d: Tensor, params, n_blocks: int, trial_index=None) -> Tensor:
    """Average over blocks of ``A_d A_e^T / sqrt(h)``.

    ``H_e`` is ``(T, m+1, h)``, ``H_d`` is ``(B, l, h)``; the result is
    ``(B, l, m+1)``. ``trial_index`` maps each decoder sequence to its
    trial (defaults to the identity when ``T == B``).
    """
    h = H_e.shape[-1]
    if H_d.shape[-1] != h:
        raise ValueError(f"decoder width {H_d.shape[-1]} != encoder width {h}")
    if trial_index is None:
        trial_index = np.arange(H_d.shape[0])
    trial_index = np.asarray(trial_index, dtype=np.int64)
    total = None
    for b in range(n_blocks):
        A_e = T.take(_embed(H_e, params, f"oa.{b}.enc"), trial_index)  # (B, m+1, k)
        A_d = _embed(H_d, params, f"oa.{b}.dec")  # (B, l, k)
        O = T.matmul(A_d, T.transpose(A_e, (0, 2, 1)))
        total = O if total is None else T.add(total, O)
    return T.scale(total, 1.0 / (n_blocks * np.sqrt(h)))


def next_distribution(H_e: Tensor, H_d: Tensor, params, n_blocks: int, step: int, trial_index=None) -> np.ndarray:
    """Softmax over EOS and objects after decoder row ``step`` (``(B, m+1)``)."""
    if not 0 <= step < H_d.shape[1]:
        raise IndexError(f"step {step} outside decoder length {H_d.shape[1]}")
    logits = oa_logits(H_e, T.take(H_d, (slice(None), slice(step, step + 1))), params, n_blocks, trial_index)
    return T.softmax(logits, axis=-1).data[:, 0]


def init_linear_head(rng, h: int, n_outcomes: int, dtype) -> dict[str, Tensor]:
    """Replacement head for the no-OA ablation: one linear map to ``m + 1`` logits."""
    return init_linear(rng, h, n_outcomes, "head", dtype)


def linear_head_logits(H_d: Tensor, params) -> Tensor:
    return dense(H_d, params, "head")
