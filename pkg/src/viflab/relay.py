"""Visual flow: contextualise relay tokens and inject them into the next agent."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ValidationError
from .model import _gelu, _layer_norm
from .tokens import TokenSequence, TokenType


@dataclass(frozen=True)
class RelayMessage:
    """Relay tokens travelling between agents.

    ``source_positions`` and ``grid`` are those of the originating vision
    tokens.  ``source_agent`` is -1 for a merge of several agents.
    """

    embeddings: np.ndarray
    source_positions: np.ndarray
    grid: np.ndarray
    source_agent: int

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise ValidationError("relay embeddings must be a matrix")
        n = emb.shape[0]
        pos = np.asarray(self.source_positions, dtype=np.int64).reshape(n)
        grid = np.asarray(self.grid, dtype=np.int64).reshape(n, 2)
        if not np.all(np.isfinite(emb)):
            raise ValidationError("relay embeddings must be finite")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "source_positions", pos)
        object.__setattr__(self, "grid", grid)

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def empty(cls, dim: int, source_agent: int = -1) -> "RelayMessage":
        return cls(np.zeros((0, dim)), np.zeros(0, np.int64), np.zeros((0, 2), np.int64), source_agent)

    # Frame, little-endian: int32 source agent, uint32 n, uint32 dim,
    # n*dim float32 embeddings (row-major), n int32 source positions,
    # n*2 int32 grid (row, col).
    _HEADER = struct.Struct("<iII")

    def to_bytes(self) -> bytes:
        parts = [
            self._HEADER.pack(self.source_agent, self.n, self.dim),
            np.ascontiguousarray(self.embeddings, dtype="<f4").tobytes(),
            np.ascontiguousarray(self.source_positions, dtype="<i4").tobytes(),
            np.ascontiguousarray(self.grid, dtype="<i4").tobytes(),
        ]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RelayMessage":
        if len(raw) < cls._HEADER.size:
            raise ValidationError("relay frame shorter than its header")
        agent, n, dim = cls._HEADER.unpack_from(raw)
        off = cls._HEADER.size
        if len(raw) != off + 4 * n * dim + 12 * n:
            raise ValidationError("trailing or missing bytes in relay frame")
        emb = np.frombuffer(raw, "<f4", n * dim, off).reshape(n, dim)
        off += 4 * n * dim
        pos = np.frombuffer(raw, "<i4", n, off)
        off += 4 * n
        grid = np.frombuffer(raw, "<i4", 2 * n, off).reshape(n, 2)
        return cls(emb.astype(np.float64), pos, grid, agent)


@dataclass(frozen=True)
class RelayBlockConfig:
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    rng_seed: int = 0

    def __post_init__(self):
        if self.model_dim <= 0 or self.heads <= 0 or self.model_dim % self.heads:
            raise ConfigError("relay block dims invalid")


@dataclass(frozen=True)
class RelayBlock:
    """One bidirectional pre-LN transformer block, frozen after init."""

    config: RelayBlockConfig
    weights: dict = field(repr=False)

    @classmethod
    def init(cls, config: RelayBlockConfig) -> "RelayBlock":
        rng = np.random.default_rng(config.rng_seed)
        d, f = config.model_dim, config.ffn_dim
        w = {
            name: rng.standard_normal(shape) / np.sqrt(shape[0])
            for name, shape in [
                ("wq", (d, d)), ("wk", (d, d)), ("wv", (d, d)), ("wo", (d, d)),
                ("w1", (d, f)), ("w2", (f, d)),
            ]
        }
        for arr in w.values():
            arr.setflags(write=False)
        return cls(config, w)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        cfg, w = self.config, self.weights
        T = x.shape[0]
        H = cfg.heads
        dh = cfg.model_dim // H
        h = _layer_norm(x)
        q = (h @ w["wq"]).reshape(T, H, dh).transpose(1, 0, 2)
        k = (h @ w["wk"]).reshape(T, H, dh).transpose(1, 0, 2)
        v = (h @ w["wv"]).reshape(T, H, dh).transpose(1, 0, 2)
        s = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
        s = s - s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        x = x + (a @ v).transpose(1, 0, 2).reshape(T, cfg.model_dim) @ w["wo"]
        return x + _gelu(_layer_norm(x) @ w["w1"]) @ w["w2"]


def contextualize(
    relay_tokens: np.ndarray,
    instruction_tokens: np.ndarray,
    block: RelayBlock,
    source_positions: Sequence[int] | None = None,
    grid: np.ndarray | None = None,
    source_agent: int = -1,
) -> RelayMessage:
    """Run ``block`` over relay-then-instruction rows and keep the first ``n``."""
    d = block.config.model_dim
    r = np.asarray(relay_tokens, dtype=np.float64)
    if r.size == 0:
        r = r.reshape(0, d)
    ins = np.asarray(instruction_tokens, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != d or ins.ndim != 2 or ins.shape[1] != d:
        raise ValidationError(f"relay {r.shape} / instruction {ins.shape} do not match dim {d}")
    n = r.shape[0]
    pos = np.zeros(n, np.int64) if source_positions is None else np.asarray(source_positions)
    g = np.zeros((n, 2), np.int64) if grid is None else np.asarray(grid)
    if n == 0:
        return RelayMessage(np.zeros((0, d)), pos, g, source_agent)
    out = block(np.vstack([r, ins]))[:n]
    return RelayMessage(out, pos, g, source_agent)


def inject_relay(seq: TokenSequence, msg: RelayMessage) -> TokenSequence:
    """Insert relay tokens between the last vision and first instruction token.

    Relay tokens keep their source position ids; everything else keeps the
    positions it already had.
    """
    if msg.n == 0:
        return seq
    if msg.dim != seq.dim:
        raise ValidationError(f"message dim {msg.dim} != sequence dim {seq.dim}")
    tags = seq.tags
    if TokenType.RELAY in tags:
        raise ValidationError("sequence already carries relay tokens")
    vis = seq.indices(TokenType.VISION)
    if vis.size == 0:
        raise ValidationError("sequence has no vision tokens")
    cut = int(vis[-1]) + 1
    n = msg.n
    return TokenSequence(
        embeddings=np.vstack([seq.embeddings[:cut], msg.embeddings, seq.embeddings[cut:]]),
        tags=tags[:cut] + (TokenType.RELAY,) * n + tags[cut:],
        positions=np.concatenate([seq.positions[:cut], msg.source_positions, seq.positions[cut:]]),
        grid=np.vstack([seq.grid[:cut], msg.grid, seq.grid[cut:]]),
        token_ids=np.concatenate([seq.token_ids[:cut], np.full(n, -1), seq.token_ids[cut:]]),
    )


def merge_messages(messages: Sequence[RelayMessage], cap: int) -> RelayMessage:
    """Concatenate messages by ascending source agent, round-robin trimmed to ``cap``."""
    if cap < 0:
        raise ValidationError("cap must be >= 0")
    if not messages:
        raise ValidationError("no messages to merge")
    dims = {m.dim for m in messages}
    if len(dims) != 1:
        raise ValidationError(f"inconsistent message dims {sorted(dims)}")
    dim = dims.pop()
    if len(messages) == 1 and messages[0].n <= cap:
        return messages[0]
    ordered = sorted(messages, key=lambda m: m.source_agent)
    keep = [0] * len(ordered)
    budget = min(cap, sum(m.n for m in ordered))
    rank = 0
    while budget:
        for i, m in enumerate(ordered):
            if budget and rank < m.n:
                keep[i] += 1
                budget -= 1
        rank += 1
    parts = [(m, k) for m, k in zip(ordered, keep) if k]
    agents = {m.source_agent for m, _ in parts}
    agent = agents.pop() if len(agents) == 1 else -1
    if not parts:
        return RelayMessage.empty(dim, agent)
    return RelayMessage(
        np.vstack([m.embeddings[:k] for m, k in parts]),
        np.concatenate([m.source_positions[:k] for m, k in parts]),
        np.vstack([m.grid[:k] for m, k in parts]),
        agent,
    )
