"""A small seeded multi-modal transformer decoder with full attention capture.

The model is randomly initialised from ``ModelConfig.rng_seed`` and never
trained.  Weights are read-only after :func:`init_model`, so one model can be
shared by any number of concurrent forward passes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .attention import (
    MaskSpec,
    ReallocationConfig,
    build_masks,
    key_norms,
    masked_softmax_tempered,
    reallocate_rows,
)
from .errors import ConfigError, ParameterError, ValidationError
from .tokens import TokenSequence, TokenType

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 12
    heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 256
    vocab_size: int = 512
    grid_side: int = 8
    n_colors: int = 6
    n_shapes: int = 4
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("depth", "heads", "model_dim", "ffn_dim", "vocab_size", "grid_side"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_colors < 2 or self.n_shapes < 2:
            raise ConfigError("need at least two colours and two shapes")
        if self.depth % 3:
            raise ConfigError(f"depth {self.depth} does not split into three equal bands")
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def n_attrs(self) -> int:
        # colour and shape per grid cell
        return 2


def layer_bands(depth: int) -> dict[str, tuple[int, int]]:
    """Equal-thirds split into inclusive shallow/middle/deep layer ranges."""
    if depth < 3 or depth % 3:
        raise ConfigError(f"depth {depth} does not split into three equal bands")
    third = depth // 3
    return {
        "shallow": (0, third - 1),
        "middle": (third, 2 * third - 1),
        "deep": (2 * third, depth - 1),
    }


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    weights: Mapping[str, np.ndarray] = field(repr=False)

    def checksum(self) -> str:
        """Hex SHA-256 over all weights in sorted-name order."""
        h = hashlib.sha256()
        for name in sorted(self.weights):
            w = self.weights[name]
            h.update(name.encode())
            h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        return h.hexdigest()

    @property
    def bands(self) -> dict[str, tuple[int, int]]:
        return layer_bands(self.config.depth)


def init_model(config: ModelConfig) -> Model:
    """Gaussian initialisation, std ``1/sqrt(fan_in)``, drawn in a fixed order."""
    rng = np.random.default_rng(config.rng_seed)
    d, f = config.model_dim, config.ffn_dim

    def normal(shape, fan_in):
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    w: dict[str, np.ndarray] = {
        "tok_emb": rng.standard_normal((config.vocab_size, d)),
        "color_emb": rng.standard_normal((config.n_colors, d)),
        "shape_emb": rng.standard_normal((config.n_shapes, d)),
    }
    for layer in range(config.depth):
        p = f"l{layer}."
        w[p + "wq"] = normal((d, d), d)
        w[p + "wk"] = normal((d, d), d)
        w[p + "wv"] = normal((d, d), d)
        w[p + "wo"] = normal((d, d), d)
        w[p + "w1"] = normal((d, f), d)
        w[p + "w2"] = normal((f, d), f)
    w["unembed"] = normal((d, config.vocab_size), d)
    w["readout_w"] = normal((d, config.n_attrs), d)
    w["readout_b"] = 0.1 * rng.standard_normal(config.n_attrs)
    for arr in w.values():
        arr.setflags(write=False)
    return Model(config=config, weights=w)


# ----------------------------------------------------------------- embedding


def embed_tokens(model: Model, token_ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise ValidationError("token id outside vocabulary")
    return model.weights["tok_emb"][ids].reshape(len(ids), model.config.model_dim)


def encode_patches(model: Model, colors: np.ndarray, shapes: np.ndarray) -> np.ndarray:
    """Stand-in vision encoder: one embedding per grid cell, row-major."""
    c = np.asarray(colors, dtype=np.int64).ravel()
    s = np.asarray(shapes, dtype=np.int64).ravel()
    return model.weights["color_emb"][c] + model.weights["shape_emb"][s]


def sinusoidal(positions: np.ndarray, dim: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    pe = np.empty((pos.shape[0], dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x * x * x)))


# ----------------------------------------------------------- interventions


@dataclass(frozen=True)
class Reallocation:
    """A reallocation config bound to concrete per-band masks."""

    config: ReallocationConfig
    middle: MaskSpec
    deep: MaskSpec

    @classmethod
    def from_inactive(
        cls, config: ReallocationConfig, tags: Sequence[TokenType], inactive: Iterable[int]
    ) -> "Reallocation":
        inactive = list(inactive)
        return cls(
            config=config,
            middle=build_masks(tags, inactive, "middle"),
            deep=build_masks(tags, inactive, "deep"),
        )


@dataclass(frozen=True)
class DropSpec:
    """Zero the hidden states of ``token_indices`` after each layer in ``layer_range``."""

    layer_range: tuple[int, int]
    token_indices: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "token_indices", frozenset(int(i) for i in self.token_indices))
        lo, hi = self.layer_range
        if lo > hi or lo < 0:
            raise ValidationError(f"invalid layer range {self.layer_range}")

    def check(self, depth: int, length: int) -> None:
        if self.layer_range[1] >= depth:
            raise ValidationError(f"drop layers {self.layer_range} exceed depth {depth}")
        for i in self.token_indices:
            if not 0 <= i < length:
                raise ValidationError(f"drop index {i} outside sequence of length {length}")


@dataclass(frozen=True)
class AttentionRecord:
    layer: int
    heads: np.ndarray  # (H, T, T)
    mean: np.ndarray  # (T, T), head average
    key_norms: np.ndarray  # (T,)


@dataclass(frozen=True)
class ForwardResult:
    logits: np.ndarray  # (T, vocab)
    records: list[AttentionRecord]
    hidden: np.ndarray  # (depth + 1, T, d); index 0 is the embedded input


def forward(
    model: Model,
    seq: TokenSequence,
    realloc: Reallocation | None = None,
    drop: DropSpec | None = None,
) -> ForwardResult:
    """Causal forward pass with optional reallocation and hidden-state zeroing.

    With ``realloc``, middle-band layers use the tempered softmax and both
    middle and deep bands reallocate each head's attention after the
    softmax.  With ``drop``, the listed positions are zeroed after the
    residual additions of each layer in range.  Records are captured after
    any intervention.
    """
    cfg = model.config
    w = model.weights
    T = len(seq)
    if seq.dim != cfg.model_dim:
        raise ValidationError(f"sequence dim {seq.dim} != model dim {cfg.model_dim}")
    if realloc is not None:
        realloc.config.check_depth(cfg.depth)
        realloc.middle.check_width(T)
        realloc.deep.check_width(T)
    drop_idx = None
    if drop is not None:
        drop.check(cfg.depth, T)
        drop_idx = np.array(sorted(drop.token_indices), dtype=np.int64)

    H, dh = cfg.heads, cfg.head_dim
    causal = np.tril(np.ones((T, T), dtype=bool))
    x = seq.embeddings + sinusoidal(seq.positions, cfg.model_dim)
    hidden = np.empty((cfg.depth + 1, T, cfg.model_dim))
    hidden[0] = x
    records = []
    for layer in range(cfg.depth):
        p = f"l{layer}."
        h = _layer_norm(x)
        q = (h @ w[p + "wq"]).reshape(T, H, dh).transpose(1, 0, 2)
        k_flat = h @ w[p + "wk"]
        k = k_flat.reshape(T, H, dh).transpose(1, 0, 2)
        v = (h @ w[p + "wv"]).reshape(T, H, dh).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh)

        band = realloc.config.band_of(layer) if realloc is not None else None
        tau = realloc.config.tau if band == "middle" else 1.0
        attn = masked_softmax_tempered(scores, causal, tau)
        if band == "middle":
            attn = reallocate_rows(attn, realloc.middle, realloc.config.alpha_middle, causal)
        elif band == "deep":
            attn = reallocate_rows(attn, realloc.deep, realloc.config.alpha_deep, causal)

        ctx = (attn @ v).transpose(1, 0, 2).reshape(T, cfg.model_dim)
        x = x + ctx @ w[p + "wo"]
        x = x + _gelu(_layer_norm(x) @ w[p + "w1"]) @ w[p + "w2"]
        if drop is not None and drop.layer_range[0] <= layer <= drop.layer_range[1]:
            x = x.copy()
            x[drop_idx] = 0.0
        hidden[layer + 1] = x
        records.append(
            AttentionRecord(layer=layer, heads=attn, mean=attn.mean(axis=0), key_norms=key_norms(k_flat))
        )
    logits = _layer_norm(x) @ w["unembed"]
    return ForwardResult(logits=logits, records=records, hidden=hidden)


# ---------------------------------------------------------------- decoding


@dataclass(frozen=True)
class GenerationResult:
    token_ids: list[int]
    step_records: list[list[AttentionRecord]]
    sequence: TokenSequence


def generate(
    model: Model,
    seq: TokenSequence,
    max_steps: int,
    decode_temperature: float = 0.0,
    seed: int | Sequence[int] = 0,
    realloc_config: ReallocationConfig | None = None,
    inactive: Iterable[int] = (),
) -> GenerationResult:
    """Append ``max_steps`` Output tokens, greedy at temperature 0.

    When ``realloc_config`` is given, masks are rebuilt for the growing
    sequence at every step from the fixed ``inactive`` vision set.
    """
    if max_steps < 1:
        raise ParameterError("max_steps must be >= 1")
    if decode_temperature < 0:
        raise ParameterError("decode_temperature must be >= 0")
    inactive = list(inactive)
    rng = np.random.default_rng(seed)
    ids: list[int] = []
    steps = []
    for _ in range(max_steps):
        realloc = (
            Reallocation.from_inactive(realloc_config, seq.tags, inactive)
            if realloc_config is not None
            else None
        )
        res = forward(model, seq, realloc=realloc)
        last = res.logits[-1]
        if decode_temperature == 0:
            tok = int(np.argmax(last))
        else:
            z = last / decode_temperature
            probs = np.exp(z - z.max())
            probs /= probs.sum()
            tok = int(rng.choice(len(probs), p=probs))
        ids.append(tok)
        steps.append(res.records)
        seq = seq.append(model.weights["tok_emb"][tok], TokenType.OUTPUT, tok)
    return GenerationResult(token_ids=ids, step_records=steps, sequence=seq)


# ----------------------------------------------------------------- readout


def readout_report(model: Model, hidden: np.ndarray, seq: TokenSequence) -> np.ndarray:
    """Per-cell attribute estimates in [0, 1] from final-layer hidden states.

    ``hidden`` is the ``(T, d)`` final-layer state.  Vision and relay states
    sharing a grid cell are averaged; cells with no state read the bias.
    Output is row-major over cells, ``n_attrs`` values per cell.
    """
    cfg = model.config
    h = np.asarray(hidden, dtype=np.float64)
    if h.shape != (len(seq), cfg.model_dim):
        raise ValidationError(f"hidden shape {h.shape} does not match sequence")
    g = cfg.grid_side
    pooled = np.zeros((g * g, cfg.model_dim))
    counts = np.zeros(g * g)
    for i, t in enumerate(seq.tags):
        if t in (TokenType.VISION, TokenType.RELAY):
            r, c = seq.grid[i]
            pooled[r * g + c] += h[i]
            counts[r * g + c] += 1
    pooled /= np.maximum(counts, 1)[:, None]
    z = pooled @ model.weights["readout_w"] + model.weights["readout_b"]
    return (1.0 / (1.0 + np.exp(-z))).ravel()


# ------------------------------------------------------------ binary dumps

# Layout, little-endian: uint32 layer count, uint32 heads, uint32 seq length,
# then for each layer and head the (T, T) matrix as row-major float32.
_DUMP_HEADER = struct.Struct("<III")


def dump_attention(records: Sequence[AttentionRecord], path: str | Path) -> None:
    if not records:
        raise ValidationError("no records to dump")
    H, T, _ = records[0].heads.shape
    with open(path, "wb") as fh:
        fh.write(_DUMP_HEADER.pack(len(records), H, T))
        for rec in records:
            fh.write(np.ascontiguousarray(rec.heads, dtype="<f4").tobytes())


def load_attention(path: str | Path) -> np.ndarray:
    """Inverse of :func:`dump_attention`; returns ``(layers, heads, T, T)`` float32."""
    raw = Path(path).read_bytes()
    n_layers, H, T = _DUMP_HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f4", offset=_DUMP_HEADER.size)
    return body.reshape(n_layers, H, T, T)
