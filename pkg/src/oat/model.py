"""The full object-level scanpath model: embedding, encoder, decoder and output head."""

from __future__ import annotations

import functools
import hashlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import checkpoint
from . import tensor as T
from .embedding import init_cnn, prepare_patch, visual_descriptor
from .object_attention import init_linear_head, init_oa, linear_head_logits, oa_logits
from .positional import PEConfig, PEMatrix, axis_widths, e2e_pe, sinusoidal_table, train_pe
from .tensor import Tensor
from .transformer import decode, encode, init_decoder, init_encoder, temporal_encoding

PE_KINDS = ("dpe", "sinusoidal", "e2e")


@dataclass
class OATConfig:
    p: int = 128
    h: int = 256
    n_e: int = 4
    n_d: int = 4
    n_c: int = 2
    heads: int = 4
    k: int = 64
    max_len: int = 30
    dropout: float = 0.1
    ff_mult: int = 4
    patch_size: int = 64
    cnn_channels: tuple[int, ...] = (16, 32, 64)
    rows: int = 6
    cols: int = 6
    pe_kind: str = "dpe"
    use_oa: bool = True
    alpha: float = 1.0
    target_pos: str = "origin"
    temporal_scale: float = 1.0

    def validate(self) -> None:
        if self.h != 2 * self.p:
            raise ValueError(f"model.h must equal 2 * model.p (got h={self.h}, p={self.p})")
        if self.h % self.heads:
            raise ValueError(f"model.h={self.h} not divisible by model.heads={self.heads}")
        for name in ("n_e", "n_d", "n_c", "heads", "k", "max_len", "patch_size", "rows", "cols"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"model.dropout must lie in [0, 1), got {self.dropout}")
        if self.pe_kind not in PE_KINDS:
            raise ValueError(f"model.pe_kind must be one of {PE_KINDS}, got {self.pe_kind!r}")
        if self.target_pos not in ("origin", "true"):
            raise ValueError(f"model.target_pos must be 'origin' or 'true', got {self.target_pos!r}")
        if self.p < 3:
            raise ValueError("model.p must be >= 3 to split across three axes")

    @property
    def m(self) -> int:
        return self.rows * self.cols

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OATConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if "cnn_channels" in d:
            d["cnn_channels"] = tuple(d["cnn_channels"])
        return cls(**d)


@functools.lru_cache(maxsize=32)
def _cached_dpe(L: int, d_axis: int, sigma: float, lam: float, lr: float, iters: int, optimizer: str, seed: int) -> np.ndarray:
    cfg = PEConfig(L=L, d_axis=d_axis, sigma=sigma, lam=lam, lr=lr, iters=iters, optimizer=optimizer)
    return train_pe(cfg, seed).P.data.copy()


def build_pe_tables(cfg: OATConfig, pe_cfg: PEConfig, seed: int, dtype) -> dict[str, PEMatrix]:
    """x/y tables of length ``pe_cfg.L`` and a 2-row z (target flag) table, widths from :func:`axis_widths`."""
    L = max(pe_cfg.L, cfg.rows, cfg.cols)
    lengths = {"x": L, "y": L, "z": 2}
    tables = {}
    for k, (axis, width) in enumerate(zip("xyz", axis_widths(cfg.p))):
        n = lengths[axis]
        if cfg.pe_kind == "dpe":
            arr = _cached_dpe(n, width, pe_cfg.sigma, pe_cfg.lam, pe_cfg.lr, pe_cfg.iters, pe_cfg.optimizer, seed + k)
            tables[axis] = PEMatrix(Tensor(arr, dtype=dtype), "dpe")
        elif cfg.pe_kind == "sinusoidal":
            tables[axis] = PEMatrix(Tensor(sinusoidal_table(n, width), dtype=dtype), "sinusoidal")
        else:
            tables[axis] = e2e_pe(n, width, seed + k, dtype=dtype)
    return tables


@dataclass
class PreparedTrials:
    """Resized, de-duplicated patches and the per-trial token bookkeeping."""

    bank: np.ndarray  # (U, S, S, 3)
    token_idx: np.ndarray  # (T, m+1) rows of ``bank``; column 0 is the target
    target_xy: np.ndarray  # (T, 2) grid (column, row) of the target
    trial_ids: list[str] = field(default_factory=list)

    def subset(self, rows) -> "PreparedTrials":
        rows = np.asarray(rows, dtype=np.int64)
        used, inverse = np.unique(self.token_idx[rows], return_inverse=True)
        return PreparedTrials(
            self.bank[used],
            inverse.reshape(len(rows), -1),
            self.target_xy[rows],
            [self.trial_ids[r] for r in rows],
        )


def prepare_trials(trials, patch_size: int) -> PreparedTrials:
    bank: list[np.ndarray] = []
    index: dict[bytes, int] = {}
    token_idx, target_xy, ids = [], [], []
    for trial in trials:
        row = []
        for raw in trial.patches():
            key = hashlib.sha1(np.ascontiguousarray(raw).tobytes() + str(raw.shape).encode()).digest()
            if key not in index:
                index[key] = len(bank)
                bank.append(prepare_patch(raw, patch_size))
            row.append(index[key])
        token_idx.append(row)
        target_xy.append(trial.layout.grid_pos(trial.target))
        ids.append(trial.trial_id)
    return PreparedTrials(np.stack(bank), np.array(token_idx, dtype=np.int64), np.array(target_xy, dtype=np.int64), ids)


class OATModel:
    """Parameters plus the forward pieces; all methods take batched inputs."""

    def __init__(self, cfg: OATConfig, pe_cfg: PEConfig | None = None, seed: int = 0, dtype=None, init: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.pe_cfg = pe_cfg or PEConfig()
        self.seed = seed
        self.dtype = np.dtype(dtype or T.get_default_dtype()).type
        self.alpha = float(cfg.alpha)
        self.params: dict[str, Tensor] = {}
        self.pe: dict[str, PEMatrix] = {}
        if init:
            self._init_params(seed)

    def _init_params(self, seed: int) -> None:
        cfg, dt = self.cfg, self.dtype
        rng = np.random.default_rng(seed)
        params = init_cnn(rng, cfg.p, cfg.cnn_channels, dt)
        params["bos"] = Tensor(rng.normal(0.0, 0.02, size=cfg.h), True, dt, "bos")
        params.update(init_encoder(rng, cfg.h, cfg.n_e, cfg.ff_mult * cfg.h, dt))
        params.update(init_decoder(rng, cfg.h, cfg.n_d, cfg.ff_mult * cfg.h, dt))
        if cfg.use_oa:
            params.update(init_oa(rng, cfg.h, cfg.k, cfg.n_c, dt))
        else:
            params.update(init_linear_head(rng, cfg.h, cfg.m + 1, dt))
        self.params = params
        self.pe = build_pe_tables(cfg, self.pe_cfg, seed, dt)

    # -- parameter access ------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors (PE tables only when learned end to end)."""
        out = dict(self.params)
        for axis, table in self.pe.items():
            if table.P.requires_grad:
                out[f"pe.{axis}"] = table.P
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: t.data for name, t in self.params.items()}
        arrays.update({f"pe.{axis}": table.P.data for axis, table in self.pe.items()})
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint lacks parameter {name!r}")
            if arrays[name].shape != t.shape:
                raise ValueError(f"parameter {name!r}: checkpoint shape {arrays[name].shape} != {t.shape}")
            t.data = arrays[name].astype(self.dtype).copy()
        for axis, table in self.pe.items():
            table.P.data = arrays[f"pe.{axis}"].astype(self.dtype).copy()

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "model": self.cfg.to_dict(),
            "pe": asdict(self.pe_cfg),
            "seed": self.seed,
            "alpha": self.alpha,
            "pe_kinds": {a: t.kind for a, t in self.pe.items()},
            **(extra_meta or {}),
        }
        checkpoint.save(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> "OATModel":
        arrays, meta = checkpoint.load(path)
        cfg = OATConfig.from_dict(meta["model"])
        pe_cfg = PEConfig(**meta.get("pe", {}))
        dtype = arrays["embed.fc.w"].dtype
        model = cls(cfg, pe_cfg, meta.get("seed", 0), dtype=dtype, init=False)
        model.params = {
            name: Tensor(arr, requires_grad=True, dtype=dtype, name=name)
            for name, arr in arrays.items()
            if not name.startswith("pe.")
        }
        kinds = meta.get("pe_kinds", {})
        model.pe = {
            axis: PEMatrix(Tensor(arrays[f"pe.{axis}"], requires_grad=kinds.get(axis) == "e2e", dtype=dtype), kinds.get(axis, "dpe"))
            for axis in "xyz"
        }
        model.alpha = float(meta.get("alpha", cfg.alpha))
        return model

    # -- forward pieces --------------------------------------------------
    def descriptors(self, bank: np.ndarray) -> Tensor:
        return visual_descriptor(bank, self.params)

    def position_codes(self, target_xy: np.ndarray) -> Tensor:
        """Scaled positional codes ``(T, m+1, p)``; token 0 is the target (z = 1)."""
        cfg = self.cfg
        n_t = len(target_xy)
        ids = np.arange(cfg.m)
        xs = np.tile(np.concatenate([[0], ids % cfg.cols]), (n_t, 1))
        ys = np.tile(np.concatenate([[0], ids // cfg.cols]), (n_t, 1))
        if cfg.target_pos == "true":
            xs[:, 0] = target_xy[:, 0]
            ys[:, 0] = target_xy[:, 1]
        zs = np.zeros_like(xs)
        zs[:, 0] = 1
        parts = [
            T.embedding_lookup(self.pe["x"].P, xs),
            T.embedding_lookup(self.pe["y"].P, ys),
            T.embedding_lookup(self.pe["z"].P, zs),
        ]
        return T.scale(T.concat(parts, axis=-1), self.alpha)

    def encoder_input(self, prepared: PreparedTrials) -> Tensor:
        """``F_e`` of shape ``(T, m+1, 2p)`` for every trial in ``prepared``."""
        m = prepared.token_idx.shape[1] - 1
        if m != self.cfg.m:
            raise ValueError(f"trial has {m} objects but the model grid holds {self.cfg.m}")
        desc = T.embedding_lookup(self.descriptors(prepared.bank), prepared.token_idx)
        return T.concat([desc, self.position_codes(prepared.target_xy)], axis=-1)

    def encode(self, F_e: Tensor, rng=None) -> Tensor:
        rate = self.cfg.dropout if rng is not None else 0.0
        return encode(F_e, self.params, self.cfg.n_e, self.cfg.heads, rate, rng)

    def decoder_input(self, F_e: Tensor, trial_index, histories: np.ndarray) -> Tensor:
        """BOS followed by the ``F_e`` rows of fixated objects, plus a temporal code per position.

        ``histories`` is ``(B, n)`` with object ids in ``1..m`` (entries past
        a sequence's end may hold any valid id; they are masked downstream).
        """
        histories = np.asarray(histories, dtype=np.int64).reshape(len(trial_index), -1)
        n_t, n_tok, h = F_e.shape
        if histories.size and (histories.min() < 1 or histories.max() >= n_tok):
            raise IndexError(f"object id outside 1..{n_tok - 1} in decoder history")
        trial_index = np.asarray(trial_index, dtype=np.int64)
        table = T.concat([T.reshape(self.params["bos"], (1, h)), T.reshape(F_e, (n_t * n_tok, h))], axis=0)
        idx = np.zeros((len(trial_index), histories.shape[1] + 1), dtype=np.int64)
        idx[:, 1:] = 1 + trial_index[:, None] * n_tok + histories
        tokens = T.embedding_lookup(table, idx)
        temporal = temporal_encoding(idx.shape[1], h) * self.cfg.temporal_scale
        return T.add(tokens, temporal.astype(self.dtype))

    def decode(self, F_d: Tensor, H_e: Tensor, trial_index, rng=None) -> Tensor:
        rate = self.cfg.dropout if rng is not None else 0.0
        return decode(F_d, H_e, trial_index, self.params, self.cfg.n_d, self.cfg.heads, rate, rng)

    def head_logits(self, H_e: Tensor, H_d: Tensor, trial_index) -> Tensor:
        """Logits ``(B, l, m+1)``: slot 0 is EOS, slot ``i`` is object ``i``."""
        if self.cfg.use_oa:
            return oa_logits(H_e, H_d, self.params, self.cfg.n_c, trial_index)
        return linear_head_logits(H_d, self.params)

    def forward(self, prepared: PreparedTrials, trial_index, histories, rng=None) -> Tensor:
        """Teacher-forced logits for every decoder position."""
        F_e = self.encoder_input(prepared)
        H_e = self.encode(F_e, rng)
        F_d = self.decoder_input(F_e, trial_index, histories)
        H_d = self.decode(F_d, H_e, trial_index, rng)
        return self.head_logits(H_e, H_d, trial_index)

    def calibrate_alpha(self, prepared: PreparedTrials) -> float:
        """Set ``alpha`` so positional codes match the RMS of the visual descriptors."""
        with T.no_grad():
            desc = self.descriptors(prepared.bank).data
        saved = self.alpha
        self.alpha = 1.0
        with T.no_grad():
            codes = self.position_codes(prepared.target_xy[:1]).data
        self.alpha = saved
        rms_desc = float(np.sqrt(np.mean(desc.astype(np.float64) ** 2)))
        rms_code = float(np.sqrt(np.mean(codes.astype(np.float64) ** 2)))
        self.alpha = rms_desc / rms_code if rms_code > 0 else 1.0
        return self.alpha
