"""Iterative mask-token decoding and the left-to-right attention mask.

Appending generated tokens must never disturb the representations of earlier
slots, so input rows attend only to input rows, and each appended row attends
to the input plus the already-generated rows up to itself. Generation then
re-encodes input + prefix + [MASK] each step and reads the next token at the
mask slot. No key/value cache: recomputation keeps each step's logits exactly
equal to an independent single call on the same prefix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import model as md
from . import numerics as nm
from .multimodal import AssembledInput


@dataclass
class AttentionMask:
    """Boolean allow-matrix over an input block followed by target rows."""

    allow: np.ndarray
    n_input: int

    @property
    def size(self) -> int:
        return self.allow.shape[0]


@dataclass
class GenerationConfig:
    max_length: int = 24
    eos_id: int = 5
    mask_id: int = 4
    strategy: str = "greedy"

    def __post_init__(self):
        if self.max_length < 1:
            raise ValueError("max_length must be >= 1")
        if self.strategy != "greedy":
            raise ValueError(f"unsupported decode strategy {self.strategy!r}")


@dataclass
class GenerationOutput:
    """Generated tokens (end-of-sequence excluded) and per-step decision logits."""

    tokens: list[int]
    step_logits: Optional[list[np.ndarray]] = None
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.tokens)


def build_left_to_right_mask(n_input: int, n_target: int) -> AttentionMask:
    """Input rows see only the input block; target row t sees input + targets <= t."""
    if n_input < 1:
        raise ValueError("n_input must be >= 1")
    if n_target < 0:
        raise ValueError("n_target must be >= 0")
    s = n_input + n_target
    allow = np.zeros((s, s), dtype=bool)
    allow[:, :n_input] = True
    for i in range(n_input, s):
        allow[i, n_input : i + 1] = True
    allow[:n_input, n_input:] = False
    return AttentionMask(allow=allow, n_input=n_input)


def next_token(
    params: md.Parameters,
    input: AssembledInput,
    prefix: list[int],
    *,
    mask_id: int,
) -> tuple[int, np.ndarray]:
    """Encode input + prefix + [MASK] and read the argmax token at the mask slot.

    Ties in the logits resolve to the lowest token id.
    """
    n_input = len(input)
    total = n_input + len(prefix) + 1
    if total > params.config.max_positions:
        raise nm.ShapeError(
            f"sequence of {total} slots exceeds max_positions {params.config.max_positions}"
        )
    extra = list(prefix) + [mask_id]
    extra_positions = list(range(n_input, n_input + len(extra)))
    embedded = md.embed_extended(input, extra, extra_positions, params)
    mask = build_left_to_right_mask(n_input, len(extra))
    states = md.encode(embedded, mask, params)
    mask_row = nm.take_rows(states[-1], np.array([total - 1]))
    logits = md.decode_logits(mask_row, params).data[0]
    return int(np.argmax(logits)), logits


def generate(
    params: md.Parameters,
    input: AssembledInput,
    cfg: GenerationConfig,
    *,
    keep_logits: bool = False,
) -> GenerationOutput:
    """Greedy decode until [EOS] or max_length; deterministic given params/input."""
    tokens: list[int] = []
    logits_log: list[np.ndarray] = [] if keep_logits else None
    truncated = False
    for _ in range(cfg.max_length):
        tok, logits = next_token(params, input, tokens, mask_id=cfg.mask_id)
        if keep_logits:
            logits_log.append(logits)
        if tok == cfg.eos_id:
            break
        tokens.append(tok)
    else:
        truncated = True
    return GenerationOutput(tokens=tokens, step_logits=logits_log, truncated=truncated)
