"""Visual descriptors for object patches and assembly of the encoder input sequence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .positional import PEMatrix, encode_positions
from .tensor import Tensor


class IngestionError(ValueError):
    """Malformed image or patch data."""


class LayoutError(ValueError):
    """Inconsistent grid layout."""


@dataclass
class ObjectPatch:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    grid_pos: tuple[int, int]  # (x: column, y: row)
    object_id: int


def check_patch(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise IngestionError(f"patch must be H x W x 3 (RGB), got shape {pixels.shape}")
    if pixels.shape[0] == 0 or pixels.shape[1] == 0:
        raise IngestionError("empty patch")
    return pixels


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Resize an (H, W, C) image to (size, size, C) with half-pixel-centred bilinear sampling."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img.copy()

    def coords(n_in: int):
        pos = (np.arange(size) + 0.5) * (n_in / size) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h)
    x0, x1, fx = coords(w)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def prepare_patch(pixels: np.ndarray, size: int) -> np.ndarray:
    """Validate, scale to [0, 1] if needed and resize one patch."""
    pixels = check_patch(pixels)
    if pixels.dtype == np.uint8:
        pixels = pixels.astype(np.float64) / 255.0
    return resize_bilinear(pixels, size)


def init_cnn(rng: np.random.Generator, p: int, channels=(16, 32, 64), dtype=np.float32) -> dict[str, Tensor]:
    params = {}
    c_in = 3
    for i, c_out in enumerate(channels):
        fan_in = c_in * 9
        params[f"embed.conv{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3))
        params[f"embed.conv{i}.b"] = np.zeros(c_out)
        c_in = c_out
    limit = np.sqrt(6.0 / (c_in + p))
    params["embed.fc.w"] = rng.uniform(-limit, limit, size=(c_in, p))
    params["embed.fc.b"] = np.zeros(p)
    return {k: Tensor(v, requires_grad=True, dtype=dtype, name=k) for k, v in params.items()}


def visual_descriptor(patches, params: dict[str, Tensor]) -> Tensor:
    """Map resized patches ``(N, S, S, 3)`` (or one ``(S, S, 3)`` patch) to descriptors ``(N, p)``.

    Three stride-2 3x3 convolutions with ReLU, global average pooling and
    one linear layer.
    """
    arr = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise IngestionError(f"patches must be (N, S, S, 3), got shape {arr.shape}")
    dtype = params["embed.fc.w"].dtype
    x = Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=dtype)
    i = 0
    while f"embed.conv{i}.w" in params:
        x = T.relu(T.conv2d(x, params[f"embed.conv{i}.w"], params[f"embed.conv{i}.b"], stride=2, pad=1))
        i += 1
    pooled = T.mean(x, axis=(2, 3))
    out = T.linear(pooled, params["embed.fc.w"], params["embed.fc.b"])
    return T.reshape(out, (out.shape[1],)) if single else out


def grid_coordinates(rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    """Column and row index of objects 1..m in row-major order."""
    ids = np.arange(rows * cols)
    return ids % cols, ids // cols


def build_encoder_input(
    target: ObjectPatch,
    objects: list[ObjectPatch],
    pe: dict[str, PEMatrix],
    alpha: float,
    params: dict[str, Tensor],
    patch_size: int | None = None,
    target_xy: tuple[int, int] | None = None,
) -> Tensor:
    """Assemble ``F_e`` of shape ``(m + 1, 2p)``: the target token followed by objects in row-major order.

    Each row is the visual descriptor concatenated with the scaled
    positional code. The target token carries ``z = 1`` and the grid
    coordinates ``target_xy`` (default ``(0, 0)``).
    """
    if not objects:
        raise LayoutError("at least one object is required")
    positions = [o.grid_pos for o in objects]
    if len(set(positions)) != len(positions):
        raise LayoutError("duplicate grid position among objects")
    order = sorted(range(len(objects)), key=lambda k: (objects[k].grid_pos[1], objects[k].grid_pos[0]))
    objects = [objects[k] for k in order]
    size = patch_size or objects[0].pixels.shape[0]
    stack = np.stack([prepare_patch(o.pixels, size) for o in [target] + objects])
    desc = visual_descriptor(stack, params)
    tx, ty = target_xy if target_xy is not None else (0, 0)
    xs = [tx] + [o.grid_pos[0] for o in objects]
    ys = [ty] + [o.grid_pos[1] for o in objects]
    zs = [1] + [0] * len(objects)
    codes = encode_positions(xs, ys, zs, pe["x"], pe["y"], pe["z"], alpha)
    codes = Tensor(codes.data, dtype=desc.dtype) if not codes.requires_grad and codes.dtype != desc.dtype else codes
    return T.concat([desc, codes], axis=-1)
