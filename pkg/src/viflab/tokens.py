"""Token taxonomy and the typed token stream fed to the toy model."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


class TokenType(enum.Enum):
    SYSTEM = "system"
    VISION = "vision"
    RELAY = "relay"
    INSTRUCTION = "instruction"
    OUTPUT = "output"

    @property
    def letter(self) -> str:
        return _LETTERS[self]


_LETTERS = {
    TokenType.SYSTEM: "S",
    TokenType.VISION: "V",
    TokenType.RELAY: "R",
    TokenType.INSTRUCTION: "I",
    TokenType.OUTPUT: "O",
}

# System -> Vision -> [Relay] -> Instruction -> Output
CANONICAL_PATTERN = re.compile(r"S+V+R*I+O*")

ALL_TYPES = tuple(TokenType)
BASELINE_TYPES = tuple(t for t in TokenType if t is not TokenType.RELAY)


def tag_string(tags) -> str:
    return "".join(t.letter for t in tags)


def is_canonical(tags) -> bool:
    return CANONICAL_PATTERN.fullmatch(tag_string(tags)) is not None


@dataclass(frozen=True)
class TokenSequence:
    """A typed token stream.

    ``embeddings`` are raw input embeddings without positional encoding; the
    model adds sinusoidal encodings of ``positions`` at its input.  ``grid``
    holds ``(row, col)`` for vision and relay tokens and ``(-1, -1)``
    elsewhere.  ``token_ids`` is ``-1`` for tokens that have no vocabulary id
    (vision patches, relay tokens).

    Relay tokens reuse the position ids their source tokens held in the
    previous agent, so only the non-relay positions are required to be
    strictly increasing.
    """

    embeddings: np.ndarray
    tags: tuple[TokenType, ...]
    positions: np.ndarray
    grid: np.ndarray
    token_ids: np.ndarray
    _tag_str: str = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.tags)
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != n:
            raise ValidationError(f"embeddings must be ({n}, d), got {emb.shape}")
        if n == 0:
            raise ValidationError("token sequence must be non-empty")
        if not np.all(np.isfinite(emb)):
            raise ValidationError("embeddings must be finite")
        positions = np.asarray(self.positions, dtype=np.int64)
        grid = np.asarray(self.grid, dtype=np.int64).reshape(n, 2)
        token_ids = np.asarray(self.token_ids, dtype=np.int64)
        if positions.shape != (n,) or token_ids.shape != (n,):
            raise ValidationError("positions and token_ids must have one entry per token")
        tag_str = tag_string(self.tags)
        if CANONICAL_PATTERN.fullmatch(tag_str) is None:
            raise ValidationError(f"tags not in canonical order: {tag_str}")
        non_relay = positions[np.array([t is not TokenType.RELAY for t in self.tags])]
        if np.any(np.diff(non_relay) <= 0):
            raise ValidationError("non-relay positions must be strictly increasing")
        for i, t in enumerate(self.tags):
            if t in (TokenType.VISION, TokenType.RELAY) and np.any(grid[i] < 0):
                raise ValidationError(f"token {i} ({t.value}) lacks grid coordinates")
        for arr in (emb, positions, grid, token_ids):
            arr.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "token_ids", token_ids)
        object.__setattr__(self, "tags", tuple(self.tags))
        object.__setattr__(self, "_tag_str", tag_str)

    def __len__(self) -> int:
        return len(self.tags)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def tag_str(self) -> str:
        return self._tag_str

    def indices(self, *types: TokenType) -> np.ndarray:
        wanted = set(types)
        return np.array([i for i, t in enumerate(self.tags) if t in wanted], dtype=np.int64)

    def count(self, token_type: TokenType) -> int:
        return self._tag_str.count(token_type.letter)

    def append(self, embedding: np.ndarray, tag: TokenType, token_id: int = -1) -> "TokenSequence":
        """Return a new sequence with one token appended at the next fresh position."""
        non_relay = self.positions[[t is not TokenType.RELAY for t in self.tags]]
        next_pos = int(non_relay[-1]) + 1
        return TokenSequence(
            embeddings=np.vstack([self.embeddings, np.asarray(embedding)[None, :]]),
            tags=self.tags + (tag,),
            positions=np.append(self.positions, next_pos),
            grid=np.vstack([self.grid, [[-1, -1]]]),
            token_ids=np.append(self.token_ids, token_id),
        )
