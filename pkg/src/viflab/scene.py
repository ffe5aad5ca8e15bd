"""Synthetic scenes: a seeded grid of coloured shapes plus a question."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import Model, embed_tokens, encode_patches
from .tokens import TokenSequence, TokenType


@dataclass(frozen=True)
class Scene:
    colors: np.ndarray  # (g, g) ints in [0, n_colors)
    shapes: np.ndarray  # (g, g) ints in [0, n_shapes)
    question_ids: tuple[int, ...]
    n_colors: int
    n_shapes: int

    @property
    def grid_side(self) -> int:
        return self.colors.shape[0]

    def facts(self) -> np.ndarray:
        """Ground truth, row-major over cells: (colour, shape) scaled to [0, 1]."""
        c = self.colors.ravel() / (self.n_colors - 1)
        s = self.shapes.ravel() / (self.n_shapes - 1)
        return np.stack([c, s], axis=1).ravel()


def make_scene(
    grid_side: int = 8,
    n_colors: int = 6,
    n_shapes: int = 4,
    vocab_size: int = 512,
    seed: int = 0,
    question_len: int = 8,
) -> Scene:
    if grid_side <= 0 or question_len <= 0:
        raise ConfigError("grid_side and question_len must be positive")
    rng = np.random.default_rng([seed, 0x5CE7E])
    colors = rng.integers(0, n_colors, (grid_side, grid_side))
    shapes = rng.integers(0, n_shapes, (grid_side, grid_side))
    question = tuple(int(t) for t in rng.integers(0, vocab_size, question_len))
    colors.setflags(write=False)
    shapes.setflags(write=False)
    return Scene(colors, shapes, question, n_colors, n_shapes)


def system_ids(model: Model, length: int = 4) -> tuple[int, ...]:
    """Fixed system preamble for a model (derived from its seed)."""
    rng = np.random.default_rng([model.config.rng_seed, 0x5757])
    return tuple(int(t) for t in rng.integers(0, model.config.vocab_size, length))


def build_prompt(
    model: Model,
    scene: Scene,
    instruction_ids,
    system: tuple[int, ...] | None = None,
) -> TokenSequence:
    """System -> Vision -> Instruction sequence with fresh positions 0..T-1."""
    cfg = model.config
    if scene.grid_side != cfg.grid_side:
        raise ConfigError(f"scene grid {scene.grid_side} != model grid {cfg.grid_side}")
    if scene.n_colors != cfg.n_colors or scene.n_shapes != cfg.n_shapes:
        raise ConfigError("scene attribute counts do not match the model's patch encoder")
    system = system_ids(model) if system is None else tuple(system)
    instruction_ids = tuple(int(t) for t in instruction_ids)
    g = cfg.grid_side
    n_s, n_v, n_i = len(system), g * g, len(instruction_ids)
    emb = np.vstack([
        embed_tokens(model, system),
        encode_patches(model, scene.colors, scene.shapes),
        embed_tokens(model, instruction_ids),
    ])
    cells = np.arange(n_v)
    grid = np.full((n_s + n_v + n_i, 2), -1)
    grid[n_s : n_s + n_v] = np.stack([cells // g, cells % g], axis=1)
    tags = (TokenType.SYSTEM,) * n_s + (TokenType.VISION,) * n_v + (TokenType.INSTRUCTION,) * n_i
    ids = np.array(system + (-1,) * n_v + instruction_ids)
    return TokenSequence(emb, tags, np.arange(len(tags)), grid, ids)
