"""Synthetic "patch-query" visual QA task.

An image is a G x G grid of colour ids. Its visual features are one row per
cell: a fixed colour embedding plus fixed row and column embeddings plus
Gaussian noise. Two query kinds exist:

* ``lookup``    "colour at (r, c)?"              -> colour id
* ``count-mod`` "how many cells have colour c, mod M?" -> count % M

Token layout (shared by both modes)::

    0 EOA   1 Q_LOOKUP   2 Q_COUNT   3 SEP   4.. NUM(0), NUM(1), ...

Queries are always three tokens; answers are one NUM token. Train and eval
splits are disjoint: every (grid, query) pair hashes to exactly one split.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from . import numerics as nx

EOA, Q_LOOKUP, Q_COUNT, SEP = 0, 1, 2, 3
NUM0 = 4
QUERY_LEN = 3
MODES = ("lookup", "count-mod")
EVAL_FRACTION = 0.2


@dataclass(frozen=True)
class TaskSpec:
    mode: str = "count-mod"
    grid: int = 3
    n_colors: int = 4
    modulus: int = 4
    d_feat: int = 16
    noise: float = 0.1
    feature_seed: int = 1234

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.grid < 1 or self.n_colors < 2 or self.modulus < 2 or self.d_feat < 1 or self.noise < 0:
            raise ValueError("task spec out of bounds")

    @property
    def n_cells(self) -> int:
        return self.grid * self.grid

    @property
    def n_numbers(self) -> int:
        return max(self.grid, self.n_colors, self.modulus)

    @property
    def vocab_size(self) -> int:
        return NUM0 + self.n_numbers

    @property
    def prompt_len(self) -> int:
        return self.n_cells + QUERY_LEN + 1

    def model_kwargs(self) -> dict:
        """ModelConfig fields implied by the task (answer + EOA fit after the prompt)."""
        return dict(
            vocab_size=self.vocab_size,
            n_visual_tokens=self.n_cells,
            d_feat=self.d_feat,
            max_seq_len=self.prompt_len + 2,
        )

    def tables(self) -> tuple[np.ndarray, np.ndarray]:
        rng = nx.Rng(self.feature_seed)
        colors = rng.normal((self.n_colors, self.d_feat))
        rows = rng.normal((self.grid, self.d_feat))
        cols = rng.normal((self.grid, self.d_feat))
        cells = (rows[:, None, :] + cols[None, :, :]).reshape(self.n_cells, self.d_feat)
        return colors, cells

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainingSample:
    features: np.ndarray  # (n_cells, d_feat) float32
    query: tuple[int, ...]
    answer: tuple[int, ...]
    grid: tuple[int, ...]


def num(i: int) -> int:
    return NUM0 + int(i)


def _split_of(grid: np.ndarray, query: tuple[int, ...]) -> str:
    h = hashlib.blake2b(bytes(grid.astype(np.uint8)) + bytes(query), digest_size=8).digest()
    return "eval" if int.from_bytes(h, "little") % 1000 < EVAL_FRACTION * 1000 else "train"


def make_synthetic_dataset(spec: TaskSpec, n: int, seed: int, split: str = "train") -> list[TrainingSample]:
    if split not in ("train", "eval"):
        raise ValueError("split must be 'train' or 'eval'")
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = nx.Rng(seed)
    colors, cells = spec.tables()
    out: list[TrainingSample] = []
    while len(out) < n:
        grid = rng.integers(0, spec.n_colors, spec.n_cells)
        if spec.mode == "lookup":
            r, c = (int(v) for v in rng.integers(0, spec.grid, 2))
            query = (Q_LOOKUP, num(r), num(c))
            answer = (num(grid[r * spec.grid + c]),)
        else:
            color = int(rng.integers(0, spec.n_colors))
            query = (Q_COUNT, num(color), SEP)
            answer = (num(int((grid == color).sum()) % spec.modulus),)
        noise = rng.normal((spec.n_cells, spec.d_feat), spec.noise) if spec.noise > 0 else 0.0
        if _split_of(grid, query) != split:
            continue
        feats = (colors[grid] + cells + noise).astype(np.float32)
        out.append(TrainingSample(feats, query, answer, tuple(int(g) for g in grid)))
    return out


@dataclass
class Batch:
    features: torch.Tensor  # (B, n_cells, d_feat)
    query: torch.Tensor  # (B, QUERY_LEN)
    answer: torch.Tensor  # (B, A) gold answer followed by EOA

    def __len__(self) -> int:
        return self.query.shape[0]


def collate(samples: Sequence[TrainingSample]) -> Batch:
    feats = nx.tensor(np.stack([s.features for s in samples]))
    query = torch.tensor([s.query for s in samples], dtype=torch.long)
    answer = torch.tensor([s.answer + (EOA,) for s in samples], dtype=torch.long)
    return Batch(feats, query, answer)
