"""Pre-norm transformer encoder and decoder stacks over batched token sequences.

Parameters live in a flat ``name -> Tensor`` dict (``enc.{i}.*``,
``dec.{i}.*``). All inputs carry a leading batch axis: encoder inputs are
``(T, n, h)`` per trial, decoder inputs ``(B, l, h)`` per sequence, and
``trial_index`` (length ``B``) says which trial each sequence attends to.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class NumericError(FloatingPointError):
    pass


def init_linear(rng, d_in: int, d_out: int, prefix: str, dtype, bias: bool = True) -> dict[str, Tensor]:
    limit = np.sqrt(6.0 / (d_in + d_out))
    out = {f"{prefix}.w": Tensor(rng.uniform(-limit, limit, size=(d_in, d_out)), True, dtype, f"{prefix}.w")}
    if bias:
        out[f"{prefix}.b"] = Tensor(np.zeros(d_out), True, dtype, f"{prefix}.b")
    return out


def init_norm(h: int, prefix: str, dtype) -> dict[str, Tensor]:
    return {
        f"{prefix}.g": Tensor(np.ones(h), True, dtype, f"{prefix}.g"),
        f"{prefix}.b": Tensor(np.zeros(h), True, dtype, f"{prefix}.b"),
    }


def init_attention(rng, h: int, prefix: str, dtype) -> dict[str, Tensor]:
    params = {}
    for name in ("q", "k", "v", "o"):
        params.update(init_linear(rng, h, h, f"{prefix}.{name}", dtype))
    return params


def init_ff(rng, h: int, inner: int, prefix: str, dtype) -> dict[str, Tensor]:
    params = init_linear(rng, h, inner, f"{prefix}.1", dtype)
    params.update(init_linear(rng, inner, h, f"{prefix}.2", dtype))
    return params


def init_encoder(rng, h: int, n_blocks: int, ff_inner: int, dtype) -> dict[str, Tensor]:
    params = {}
    for i in range(n_blocks):
        p = f"enc.{i}"
        params.update(init_norm(h, f"{p}.ln1", dtype))
        params.update(init_attention(rng, h, f"{p}.attn", dtype))
        params.update(init_norm(h, f"{p}.ln2", dtype))
        params.update(init_ff(rng, h, ff_inner, f"{p}.ff", dtype))
    params.update(init_norm(h, "enc.ln", dtype))
    return params


def init_decoder(rng, h: int, n_blocks: int, ff_inner: int, dtype) -> dict[str, Tensor]:
    params = {}
    for i in range(n_blocks):
        p = f"dec.{i}"
        params.update(init_norm(h, f"{p}.ln1", dtype))
        params.update(init_attention(rng, h, f"{p}.self", dtype))
        params.update(init_norm(h, f"{p}.ln2", dtype))
        params.update(init_attention(rng, h, f"{p}.cross", dtype))
        params.update(init_norm(h, f"{p}.ln3", dtype))
        params.update(init_ff(rng, h, ff_inner, f"{p}.ff", dtype))
    params.update(init_norm(h, "dec.ln", dtype))
    return params


def norm(x: Tensor, params, prefix: str) -> Tensor:
    return T.add(T.mul(T.layer_norm(x), params[f"{prefix}.g"]), params[f"{prefix}.b"])


def dense(x: Tensor, params, prefix: str) -> Tensor:
    return T.linear(x, params[f"{prefix}.w"], params.get(f"{prefix}.b"))


def feed_forward(x: Tensor, params, prefix: str, rate: float = 0.0, rng=None) -> Tensor:
    hidden = T.dropout(T.relu(dense(x, params, f"{prefix}.1")), rate, rng)
    return dense(hidden, params, f"{prefix}.2")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, h = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, h // heads)), (0, 2, 1, 3))


def causal_mask(length: int, dtype=np.float32) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, a large negative value above."""
    return np.triu(np.full((length, length), -1e9, dtype=dtype), k=1)


def attention(
    x_q: Tensor,
    params,
    prefix: str,
    heads: int,
    x_kv: Tensor | None = None,
    kv_index: np.ndarray | None = None,
    mask: np.ndarray | None = None,
    rate: float = 0.0,
    rng=None,
) -> Tensor:
    """Multi-head scaled dot-product attention.

    Self-attention when ``x_kv`` is None. For cross-attention, keys and
    values are projected once per row of ``x_kv`` and then gathered by
    ``kv_index`` so that query batch ``b`` attends to ``x_kv[kv_index[b]]``.
    """
    b, lq, h = x_q.shape
    dh = h // heads
    source = x_q if x_kv is None else x_kv
    q = _split_heads(dense(x_q, params, f"{prefix}.q"), heads)
    k = dense(source, params, f"{prefix}.k")
    v = dense(source, params, f"{prefix}.v")
    if kv_index is not None:
        k = T.take(k, kv_index)
        v = T.take(v, kv_index)
    k = _split_heads(k, heads)
    v = _split_heads(v, heads)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = T.add(scores, mask.astype(scores.dtype))
    weights = T.dropout(T.softmax(scores, axis=-1), rate, rng)
    ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, lq, h))
    return dense(ctx, params, f"{prefix}.o")


def _check_finite(x: Tensor, where: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"non-finite activation in {where}")


def encode(F_e: Tensor, params, n_blocks: int, heads: int, rate: float = 0.0, rng=None) -> Tensor:
    """Run the encoder stack on ``(T, n, h)`` inputs and return ``H_e`` of the same shape."""
    if F_e.ndim != 3:
        raise ValueError(f"encoder input must be (T, n, h), got {F_e.shape}")
    if f"enc.0.ln1.g" in params and F_e.shape[-1] != params["enc.0.ln1.g"].shape[0]:
        raise ValueError(f"encoder input width {F_e.shape[-1]} != hidden width {params['enc.0.ln1.g'].shape[0]}")
    x = F_e
    for i in range(n_blocks):
        p = f"enc.{i}"
        x = T.add(x, T.dropout(attention(norm(x, params, f"{p}.ln1"), params, f"{p}.attn", heads, rate=rate, rng=rng), rate, rng))
        x = T.add(x, T.dropout(feed_forward(norm(x, params, f"{p}.ln2"), params, f"{p}.ff", rate, rng), rate, rng))
        _check_finite(x, f"encoder block {i}")
    return norm(x, params, "enc.ln")


def decode(
    F_d: Tensor, H_e: Tensor, trial_index, params, n_blocks: int, heads: int, rate: float = 0.0, rng=None
) -> Tensor:
    """Run the decoder stack on ``(B, l, h)`` with causal self-attention and cross-attention to ``H_e``."""
    if F_d.ndim != 3:
        raise ValueError(f"decoder input must be (B, l, h), got {F_d.shape}")
    trial_index = np.asarray(trial_index, dtype=np.int64)
    mask = causal_mask(F_d.shape[1])
    x = F_d
    for i in range(n_blocks):
        p = f"dec.{i}"
        sa = attention(norm(x, params, f"{p}.ln1"), params, f"{p}.self", heads, mask=mask, rate=rate, rng=rng)
        x = T.add(x, T.dropout(sa, rate, rng))
        ca = attention(norm(x, params, f"{p}.ln2"), params, f"{p}.cross", heads, x_kv=H_e, kv_index=trial_index, rate=rate, rng=rng)
        x = T.add(x, T.dropout(ca, rate, rng))
        x = T.add(x, T.dropout(feed_forward(norm(x, params, f"{p}.ln3"), params, f"{p}.ff", rate, rng), rate, rng))
        _check_finite(x, f"decoder block {i}")
    return norm(x, params, "dec.ln")


def temporal_encoding(length: int, width: int) -> np.ndarray:
    """Fixed sinusoidal code for fixation index 0..length-1."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    half = (width + 1) // 2
    freq = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) * 2 / width))
    table = np.zeros((length, 2 * half))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table[:, :width]
