"""Shared model plumbing: parameter dicts, linear/MLP layers, and masked
transformer blocks with rotary positions, built on the numerics engine.

Parameters live in a flat ``dict[str, Tensor]`` keyed by slash-separated
names so a whole model round-trips through the checkpoint container
unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass
class TransformerConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must divide evenly into heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary pairs")


# ---------------------------------------------------------------------------
# Parameter initialization helpers
# ---------------------------------------------------------------------------


def init_linear(params: dict, name: str, rng: np.random.Generator, d_in: int, d_out: int, std: float = 0.02) -> None:
    params[f"{name}/w"] = nx.randn((d_in, d_out), rng, std=std, requires_grad=True)
    params[f"{name}/b"] = nx.zeros((d_out,), requires_grad=True)


def linear(params: dict, name: str, x: Tensor) -> Tensor:
    return nx.matmul(x, params[f"{name}/w"]) + params[f"{name}/b"]


def init_ln(params: dict, name: str, d: int) -> None:
    params[f"{name}/g"] = nx.ones((d,), requires_grad=True)
    params[f"{name}/b"] = nx.zeros((d,), requires_grad=True)


def ln(params: dict, name: str, x: Tensor) -> Tensor:
    return nx.layer_norm(x, params[f"{name}/g"], params[f"{name}/b"])


def init_embedding(params: dict, name: str, rng: np.random.Generator, rows: int, d: int, std: float = 0.02) -> None:
    params[name] = nx.randn((rows, d), rng, std=std, requires_grad=True)


def init_mlp(params: dict, prefix: str, rng: np.random.Generator, dims: list[int], std: float = 0.02) -> None:
    for i in range(len(dims) - 1):
        init_linear(params, f"{prefix}/fc{i}", rng, dims[i], dims[i + 1], std=std)


def mlp(params: dict, prefix: str, x: Tensor, n_layers: int) -> Tensor:
    """Stack of linear layers with GELU between them (none after the last)."""
    for i in range(n_layers):
        x = linear(params, f"{prefix}/fc{i}", x)
        if i < n_layers - 1:
            x = nx.gelu(x)
    return x


def init_block(params: dict, prefix: str, rng: np.random.Generator, cfg: TransformerConfig) -> None:
    d = cfg.d_model
    init_ln(params, f"{prefix}/ln1", d)
    init_linear(params, f"{prefix}/wq", rng, d, d)
    init_linear(params, f"{prefix}/wk", rng, d, d)
    init_linear(params, f"{prefix}/wv", rng, d, d)
    init_linear(params, f"{prefix}/wo", rng, d, d)
    init_ln(params, f"{prefix}/ln2", d)
    init_linear(params, f"{prefix}/ff1", rng, d, cfg.d_ff)
    init_linear(params, f"{prefix}/ff2", rng, cfg.d_ff, d)


def init_stack(params: dict, prefix: str, rng: np.random.Generator, cfg: TransformerConfig) -> None:
    for i in range(cfg.n_layers):
        init_block(params, f"{prefix}/layer{i}", rng, cfg)
    init_ln(params, f"{prefix}/ln_out", cfg.d_model)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def attention(
    params: dict,
    prefix: str,
    x: Tensor,
    mask: np.ndarray,
    cfg: TransformerConfig,
    positions: np.ndarray,
) -> Tensor:
    q = linear(params, f"{prefix}/wq", x)
    k = linear(params, f"{prefix}/wk", x)
    v = linear(params, f"{prefix}/wv", x)
    hd = cfg.d_model // cfg.n_heads
    outs = []
    for h in range(cfg.n_heads):
        lo, hi = h * hd, (h + 1) * hd
        qh = nx.rope(nx.slice_cols(q, lo, hi), positions, cfg.rope_base)
        kh = nx.rope(nx.slice_cols(k, lo, hi), positions, cfg.rope_base)
        vh = nx.slice_cols(v, lo, hi)
        scores = nx.scale(nx.matmul(qh, nx.transpose2d(kh)), 1.0 / np.sqrt(hd))
        w = nx.softmax_masked(scores, mask)
        outs.append(nx.matmul(w, vh))
    return linear(params, f"{prefix}/wo", nx.concat(outs, axis=1))


def block(
    params: dict,
    prefix: str,
    x: Tensor,
    mask: np.ndarray,
    cfg: TransformerConfig,
    positions: np.ndarray,
) -> Tensor:
    x = x + attention(params, prefix, ln(params, f"{prefix}/ln1", x), mask, cfg, positions)
    h = linear(params, f"{prefix}/ff1", ln(params, f"{prefix}/ln2", x))
    return x + linear(params, f"{prefix}/ff2", nx.gelu(h))


def stack(
    params: dict,
    prefix: str,
    x: Tensor,
    mask: np.ndarray,
    cfg: TransformerConfig,
    positions: np.ndarray | None = None,
) -> Tensor:
    """Run the full transformer stack under one shared attention mask."""
    T = x.shape[0]
    if mask.shape != (T, T):
        raise ValueError(f"mask shape {mask.shape} does not match sequence length {T}")
    if positions is None:
        positions = np.arange(T)
    for i in range(cfg.n_layers):
        x = block(params, f"{prefix}/layer{i}", x, mask, cfg, positions)
    return ln(params, f"{prefix}/ln_out", x)


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def full_mask(T: int) -> np.ndarray:
    return np.ones((T, T), dtype=bool)


# ---------------------------------------------------------------------------
# Incremental decoding with per-layer key/value caches
# ---------------------------------------------------------------------------


class StackCache:
    """Per-layer key/value cache for incremental decoding.

    Keys and values are stored as plain arrays together with their absolute
    positions, so rotary phases and windowed eviction stay exact.
    """

    def __init__(self, cfg: TransformerConfig):
        self.cfg = cfg
        self.keys = [np.zeros((0, cfg.d_model)) for _ in range(cfg.n_layers)]
        self.values = [np.zeros((0, cfg.d_model)) for _ in range(cfg.n_layers)]
        self.positions = np.zeros((0,), dtype=np.int64)

    def evict_upto(self, position: int) -> None:
        """Drop all cached entries with absolute position <= ``position``."""
        keep = self.positions > position
        self.keys = [k[keep] for k in self.keys]
        self.values = [v[keep] for v in self.values]
        self.positions = self.positions[keep]

    def __len__(self) -> int:
        return int(self.positions.size)


def stack_step(
    params: dict,
    prefix: str,
    x_new: Tensor,
    new_positions: np.ndarray,
    cache: StackCache,
    cfg: TransformerConfig,
    attend_from: int = -1,
) -> Tensor:
    """Append ``x_new`` rows to the cache and return their outputs.

    Each new row attends to every cached entry plus all new rows whose
    position satisfies ``attend_from < position <= own position`` is not
    enforced here; new rows attend to cache + all new rows (non-causal
    within the chunk), with columns restricted to positions > ``attend_from``.
    """
    with nx.no_grad():
        n_new = x_new.shape[0]
        hd = cfg.d_model // cfg.n_heads
        x = x_new
        for i in range(cfg.n_layers):
            pfx = f"{prefix}/layer{i}"
            xin = ln(params, f"{pfx}/ln1", x)
            q = linear(params, f"{pfx}/wq", xin)
            k = linear(params, f"{pfx}/wk", xin)
            v = linear(params, f"{pfx}/wv", xin)
            all_k = np.concatenate([cache.keys[i], k.data], axis=0)
            all_v = np.concatenate([cache.values[i], v.data], axis=0)
            all_pos = np.concatenate([cache.positions, new_positions])
            cache.keys[i] = all_k
            cache.values[i] = all_v
            col_ok = all_pos > attend_from
            heads = []
            for h in range(cfg.n_heads):
                lo, hi = h * hd, (h + 1) * hd
                qh = nx.rope(nx.slice_cols(q, lo, hi), new_positions, cfg.rope_base)
                kh = nx.rope(Tensor(all_k[:, lo:hi]), all_pos, cfg.rope_base)
                scores = nx.scale(nx.matmul(qh, nx.transpose2d(kh)), 1.0 / np.sqrt(hd))
                mask = np.broadcast_to(col_ok, (n_new, all_pos.size)).copy()
                w = nx.softmax_masked(scores, mask)
                heads.append(nx.matmul(w, Tensor(all_v[:, lo:hi])))
            attn = linear(params, f"{pfx}/wo", nx.concat(heads, axis=1))
            x = x + attn
            h2 = linear(params, f"{pfx}/ff1", ln(params, f"{pfx}/ln2", x))
            x = x + linear(params, f"{pfx}/ff2", nx.gelu(h2))
        cache.positions = np.concatenate([cache.positions, new_positions])
        return ln(params, f"{prefix}/ln_out", x)


def num_params(params: dict) -> int:
    return sum(p.size for p in params.values())


def save_params(path, params: dict, extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = {k: p.data for k, p in params.items()}
    if extra:
        arrays.update(extra)
    nx.save_arrays(path, arrays)


def load_params(arrays: dict[str, np.ndarray], requires_grad: bool = False, dtype=None) -> dict:
    return {
        k: nx.tensor(v, requires_grad=requires_grad, dtype=dtype) for k, v in arrays.items()
    }
