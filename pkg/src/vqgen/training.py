"""Staged training: caption-only, image-only over a frozen backbone, then
joint fine-tuning, plus the unfreeze and from-scratch ablations.

Teacher forcing runs in a single forward pass per example. The sequence is
laid out as [input block | target rows y_1..y_T | prediction rows m_1..m_T+1]
where prediction row m_t holds the mask token at the same position id as y_t
and attends exactly what the generation loop's appended mask slot attends:
the input, the strictly-prior targets, and itself. Its logits are therefore
bit-equal to those of a step-by-step decode on the same prefix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import data as dt
from . import model as md
from . import multimodal as mm
from . import numerics as nm
from .numerics import OptimizerState, Tensor

STAGE1 = "stage1_caption_only"
STAGE2 = "stage2_image_only"
STAGE2_UNFREEZE = "stage2_unfreeze"
STAGE3 = "stage3_joint"
STAGE3_SCRATCH = "stage3_from_scratch"

STAGES = (STAGE1, STAGE2, STAGE2_UNFREEZE, STAGE3, STAGE3_SCRATCH)

STAGE_MODES = {
    STAGE1: mm.CAPTION_ONLY,
    STAGE2: mm.IMAGE_ONLY,
    STAGE2_UNFREEZE: mm.IMAGE_ONLY,
    STAGE3: mm.IMAGE_PLUS_CAPTION,
    STAGE3_SCRATCH: mm.IMAGE_PLUS_CAPTION,
}

IGNORE_ID = -1


class PrerequisiteError(RuntimeError):
    """A stage was started without the checkpoints its initialization needs."""


class NumericFailure(RuntimeError):
    """Training hit a non-finite loss; carries step diagnostics."""


@dataclass
class TrainingExample:
    input: mm.AssembledInput
    target: list[int]


@dataclass
class Batch:
    examples: list[TrainingExample]

    def __len__(self) -> int:
        return len(self.examples)


@dataclass
class StagePlan:
    stage: str
    epochs: int = 5
    batch_size: int = 32  # paper-scale runs use 128
    base_lr: float = 1e-3  # 2e-5 only makes sense on top of pretrained weights
    warmup_fraction: float = 0.1
    seed: int = 0
    dropout: float = 0.1
    grad_clip: float = 1.0
    init_stage1: Union[str, Path, md.Parameters, None] = None
    init_stage2: Union[str, Path, md.Parameters, None] = None
    max_steps: Optional[int] = None
    dtype: str = "float64"  # float32 roughly halves step time at toy scale

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.stage in (STAGE2, STAGE2_UNFREEZE) and self.init_stage1 is None:
            raise PrerequisiteError(f"{self.stage} requires a stage-1 checkpoint")
        if self.stage == STAGE3:
            if self.init_stage1 is None or self.init_stage2 is None:
                raise PrerequisiteError("stage3_joint requires stage-1 and stage-2 checkpoints")
        if self.stage == STAGE3_SCRATCH and (self.init_stage1 or self.init_stage2):
            raise PrerequisiteError("stage3_from_scratch must not receive init checkpoints")


@dataclass
class LogRecord:
    step: int
    stage: str
    lr: float
    loss: float

    def to_line(self) -> str:
        return f"step={self.step}\tstage={self.stage}\tlr={self.lr:.8f}\tloss={self.loss:.8f}"


@dataclass
class StageResult:
    stage: str
    config: md.ModelConfig
    params: md.Parameters
    history: list[LogRecord] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1].loss if self.history else float("nan")


# ---------------------------------------------------------------------------
# examples and batches
# ---------------------------------------------------------------------------


def build_examples(corpus: dt.LoadedSplit, mode: str) -> list[TrainingExample]:
    """One example per (item, ground-truth question) pair."""
    special = corpus.vocab.special
    out: list[TrainingExample] = []
    for item in corpus.items:
        caption_ids = dt.encode_text(item.caption, corpus.vocab) if mode != mm.IMAGE_ONLY else None
        visual = corpus.visual(item) if mode != mm.CAPTION_ONLY else None
        inp = mm.assemble_input(
            mode, visual=visual, caption=caption_ids, cls_id=special.cls, sep_id=special.sep
        )
        for question in item.questions:
            out.append(TrainingExample(input=inp, target=dt.encode_text(question, corpus.vocab)))
    return out


def make_batches(corpus: dt.LoadedSplit, mode: str, batch_size: int, seed) -> list[Batch]:
    """Deterministically shuffled batches over the expanded example list."""
    if not corpus.items:
        raise dt.FormatError("empty corpus")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    examples = build_examples(corpus, mode)
    order = np.random.default_rng(seed).permutation(len(examples))
    shuffled = [examples[i] for i in order]
    return [Batch(shuffled[i : i + batch_size]) for i in range(0, len(shuffled), batch_size)]


# ---------------------------------------------------------------------------
# teacher forcing
# ---------------------------------------------------------------------------


def teacher_forcing_mask(n_input: int, n_target: int) -> np.ndarray:
    """Allow-matrix over [input | y_1..y_T | m_1..m_T+1] rows (see module doc)."""
    r = n_input + 2 * n_target + 1
    allow = np.zeros((r, r), dtype=bool)
    allow[:n_input, :n_input] = True
    for t in range(1, n_target + 1):
        i = n_input + t - 1
        allow[i, :n_input] = True
        allow[i, n_input : i + 1] = True
    for t in range(1, n_target + 2):
        i = n_input + n_target + t - 1
        allow[i, :n_input] = True
        allow[i, n_input : n_input + t - 1] = True
        allow[i, i] = True
    return allow


def _example_rows(example: TrainingExample, special: md.SpecialTokens):
    """(extra_tokens, extra_positions, prediction_row_indices, labels)."""
    n = len(example.input)
    t_len = len(example.target)
    extra_tokens = list(example.target) + [special.mask] * (t_len + 1)
    extra_positions = list(range(n, n + t_len)) + list(range(n, n + t_len + 1))
    pred_rows = [n + t_len + t for t in range(t_len + 1)]
    labels = list(example.target) + [special.eos]
    return extra_tokens, extra_positions, pred_rows, labels


def teacher_forced_logits(
    params: md.Parameters,
    example: TrainingExample,
    special: md.SpecialTokens = md.SpecialTokens(),
    *,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Per-step next-token logits, shape (T+1, V); row t predicts y_t (last row EOS)."""
    n = len(example.input)
    extra_tokens, extra_positions, pred_rows, _ = _example_rows(example, special)
    embedded = md.embed_extended(example.input, extra_tokens, extra_positions, params)
    allow = teacher_forcing_mask(n, len(example.target))
    states = md.encode(embedded, allow, params, dropout=dropout, rng=rng)
    rows = nm.take_rows(states[-1], np.asarray(pred_rows))
    return md.decode_logits(rows, params)


def sequence_log_prob(
    params: md.Parameters,
    example: TrainingExample,
    special: md.SpecialTokens = md.SpecialTokens(),
) -> float:
    """Sum over steps of log P(y_t | input, y_<t), end token included."""
    logits = teacher_forced_logits(params, example, special)
    probs = nm.softmax_rows(logits).data
    labels = list(example.target) + [special.eos]
    return float(sum(math.log(probs[t, y]) for t, y in enumerate(labels)))


def _embed_batch(
    params: md.Parameters,
    batch: Batch,
    special: md.SpecialTokens,
    r_max: int,
) -> Tensor:
    """Batched (B, R, d) embedding of teacher-forcing rows.

    Region slots occupy the same rows in every example of an image-mode batch
    (the assembled layout is uniform), so one projection affine covers them.
    """
    config = params.config
    b_size = len(batch.examples)
    ids = np.full((b_size, r_max), special.pad, dtype=np.int64)
    positions = np.zeros((b_size, r_max), dtype=np.int64)
    first = batch.examples[0].input
    v0, v1 = first.visual_span
    regions = None
    if v1 > v0:
        regions = np.zeros((b_size, v1 - v0, config.object_dim))
    for b, ex in enumerate(batch.examples):
        if ex.input.visual_span != (v0, v1):
            raise ValueError("mixed input layouts inside one batch")
        extra_tokens, extra_positions, _, _ = _example_rows(ex, special)
        row = 0
        for slot in ex.input.slots:
            if isinstance(slot, (int, np.integer)):
                ids[b, row] = int(slot)
            else:
                regions[b, row - v0] = slot
            row += 1
        ids[b, row : row + len(extra_tokens)] = extra_tokens
        positions[b, : len(ex.input.positions)] = ex.input.positions
        positions[b, row : row + len(extra_positions)] = extra_positions
    if positions.max() >= config.max_positions:
        raise nm.ShapeError(
            f"position {int(positions.max())} exceeds max_positions {config.max_positions}"
        )
    content = nm.take_rows(params["embeddings.token"].value, ids)
    if regions is not None:
        vis = nm.affine(
            regions.astype(params.dtype),
            params["projection.weight"].value,
            params["projection.bias"].value,
        )
        content = nm.concat(
            [
                nm.narrow(content, 1, 0, v0),
                vis,
                nm.narrow(content, 1, v1, r_max - v1),
            ],
            axis=1,
        )
    out = nm.add(content, nm.take_rows(params["embeddings.position"].value, positions))
    if config.use_type_embeddings:
        types = np.ones((b_size, r_max), dtype=np.int64)
        types[:, v0:v1] = 0
        out = nm.add(out, nm.take_rows(params["embeddings.type"].value, types))
    return out


def stage_loss(
    params: md.Parameters,
    batch: Batch,
    special: md.SpecialTokens = md.SpecialTokens(),
    *,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Mean next-token cross-entropy over every prediction slot in the batch."""
    if not batch.examples:
        raise ValueError("empty batch")
    d = params.config.model_dim
    rows_per_example = [
        len(ex.input) + 2 * len(ex.target) + 1 for ex in batch.examples
    ]
    r_max = max(rows_per_example)

    allow = np.zeros((len(batch.examples), r_max, r_max), dtype=bool)
    flat_pred_rows: list[int] = []
    labels: list[int] = []
    for b, ex in enumerate(batch.examples):
        r = rows_per_example[b]
        allow[b, :r, :r] = teacher_forcing_mask(len(ex.input), len(ex.target))
        allow[b, r:, 0] = True  # pad rows watch the first slot; loss ignores them
        _, _, pred_rows, ex_labels = _example_rows(ex, special)
        flat_pred_rows.extend(b * r_max + i for i in pred_rows)
        labels.extend(ex_labels)

    x = _embed_batch(params, batch, special, r_max)
    states, _ = md.encode_states(x, allow, params, dropout=dropout, rng=rng)
    flat = nm.reshape(states[-1], (len(batch.examples) * r_max, d))
    pred_states = nm.take_rows(flat, np.asarray(flat_pred_rows))
    logits = md.decode_logits(pred_states, params)
    return nm.cross_entropy(logits, np.asarray(labels), ignore_id=IGNORE_ID)


def next_token_accuracy(
    params: md.Parameters,
    examples: Sequence[TrainingExample],
    special: md.SpecialTokens = md.SpecialTokens(),
) -> float:
    """Fraction of teacher-forced steps whose argmax equals the ground truth."""
    hits = total = 0
    for ex in examples:
        logits = teacher_forced_logits(params, ex, special).data
        labels = list(ex.target) + [special.eos]
        hits += int(np.sum(np.argmax(logits, axis=1) == np.asarray(labels)))
        total += len(labels)
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# stage runner
# ---------------------------------------------------------------------------


def _resolve_init(ref, expected_config: md.ModelConfig) -> md.Parameters:
    if isinstance(ref, md.Parameters):
        return ref
    config, params, _ = md.load_checkpoint(ref)
    if config != expected_config:
        raise md.ConfigError("init checkpoint config differs from the requested config")
    return params


def initialize_stage(plan: StagePlan, config: md.ModelConfig) -> md.Parameters:
    """Fresh weights plus per-stage copying and freezing."""
    params = md.init_parameters(config, plan.seed)
    theta_names = [n for n in params.names() if n not in ("projection.weight", "projection.bias")]
    if plan.stage in (STAGE2, STAGE2_UNFREEZE, STAGE3):
        stage1 = _resolve_init(plan.init_stage1, config)
        params.copy_values_from(stage1, theta_names)
    if plan.stage == STAGE3:
        stage2 = _resolve_init(plan.init_stage2, config)
        params.copy_values_from(stage2, ["projection.weight", "projection.bias"])

    params.set_trainable(value=True)
    if plan.stage == STAGE1:
        params.set_trainable(["projection.weight", "projection.bias"], value=False)
    elif plan.stage == STAGE2:
        params.set_trainable(theta_names, value=False)
    return params


def run_stage(plan: StagePlan, corpus: dt.LoadedSplit, config: md.ModelConfig) -> StageResult:
    """Train one stage over the corpus; deterministic for a fixed seed."""
    mode = STAGE_MODES[plan.stage]
    params = initialize_stage(plan, config)
    if plan.dtype == "float32":
        params.astype(np.float32)
    special = corpus.vocab.special
    if len(corpus.vocab) != config.vocab_size:
        raise md.ConfigError(
            f"vocabulary size {len(corpus.vocab)} differs from config {config.vocab_size}"
        )

    n_examples = sum(len(item.questions) for item in corpus.items)
    steps_per_epoch = math.ceil(n_examples / plan.batch_size)
    total_steps = plan.epochs * steps_per_epoch
    if plan.max_steps is not None:
        total_steps = min(total_steps, plan.max_steps)
    optimizer = OptimizerState(
        base_lr=plan.base_lr, total_steps=total_steps, warmup_fraction=plan.warmup_fraction
    )
    dropout_rng = np.random.default_rng([plan.seed, 515151])

    history: list[LogRecord] = []
    step = 0
    all_params = params.all()
    for epoch in range(plan.epochs):
        if step >= total_steps:
            break
        for batch in make_batches(corpus, mode, plan.batch_size, [plan.seed, 1000 + epoch]):
            if step >= total_steps:
                break
            loss = stage_loss(params, batch, special, dropout=plan.dropout, rng=dropout_rng)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericFailure(
                    f"non-finite loss at stage={plan.stage} step={step} "
                    f"lr={nm.lr_schedule(optimizer, step + 1):.3e}"
                )
            nm.backward_gradients(loss, all_params)
            if plan.grad_clip > 0:
                nm.clip_gradients(all_params, plan.grad_clip)
            nm.adam_step(all_params, optimizer)
            step += 1
            history.append(
                LogRecord(
                    step=step,
                    stage=plan.stage,
                    lr=nm.lr_schedule(optimizer, step),
                    loss=loss_value,
                )
            )
    return StageResult(stage=plan.stage, config=config, params=params, history=history)


def write_training_log(path, result: StageResult, meta: Optional[dict] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if meta:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        for rec in result.history:
            fh.write(rec.to_line() + "\n")
