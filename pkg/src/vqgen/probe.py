"""Cross-modal alignment probe: per-layer cosine between the [CLS] states of
an image-only encoding and the matching caption-only encoding, plus a summary
of which input slots the generated tokens attend to in the last layer."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import model as md
from . import multimodal as mm
from .generation import build_left_to_right_mask

RANDOM_BASELINE_SEED = 424242


class ProbeError(ValueError):
    """Probe called on an empty or unusable input."""


@dataclass
class ProbeReport:
    model_label: str
    xsim: list[float]  # one value per encoder layer, layer 1 first
    items: int

    def to_table(self) -> str:
        lines = ["layer_index\tmodel_label\txsim"]
        for i, value in enumerate(self.xsim, start=1):
            lines.append(f"{i}\t{self.model_label}\t{value:.6f}")
        return "\n".join(lines) + "\n"


@dataclass
class AttentionSummary:
    input_weights: np.ndarray  # mean last-layer attention received per input slot
    argmax_slot: int


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def xsim_per_layer(
    params: md.Parameters,
    paired_set: Sequence[tuple[mm.VisualSequence, Sequence[int]]],
    *,
    label: str = "model",
) -> ProbeReport:
    """Encode each pair's image and caption separately; cosine of [CLS] rows.

    Averages over pairs at every layer 1..num_layers.
    """
    if not paired_set:
        raise ProbeError("empty paired set")
    config = params.config
    special = md.SpecialTokens()
    sums = np.zeros(config.num_layers)
    for visual, caption in paired_set:
        image_input = mm.assemble_input(
            mm.IMAGE_ONLY, visual=visual, cls_id=special.cls, sep_id=special.sep
        )
        caption_input = mm.assemble_input(
            mm.CAPTION_ONLY, caption=caption, cls_id=special.cls, sep_id=special.sep
        )
        per_layer = []
        for inp in (image_input, caption_input):
            mask = build_left_to_right_mask(len(inp), 0)
            states = md.encode(md.embed_sequence(inp, params), mask, params)
            per_layer.append([s.data[0] for s in states[1:]])
        for layer in range(config.num_layers):
            sums[layer] += cosine(per_layer[0][layer], per_layer[1][layer])
    values = sums / len(paired_set)
    return ProbeReport(model_label=label, xsim=[float(v) for v in values], items=len(paired_set))


def attention_summary(
    params: md.Parameters,
    input: mm.AssembledInput,
    generated: Sequence[int],
) -> AttentionSummary:
    """Mean last-layer attention from the generated rows onto each input slot.

    Head-averaged; the remainder of each softmax row falls on the generated
    slots themselves, so the reported weights sum to at most one.
    """
    if not generated:
        raise ProbeError("no generated tokens to summarize")
    n = len(input)
    extra = [int(t) for t in generated]
    positions = list(range(n, n + len(extra)))
    embedded = md.embed_extended(input, extra, positions, params)
    mask = build_left_to_right_mask(n, len(extra))
    _, attentions = md.encode(embedded, mask, params, collect_attention=True)
    last = attentions[-1]  # (heads, S, S)
    rows = last[:, n : n + len(extra), :]
    weights = rows.mean(axis=(0, 1))[:n]
    return AttentionSummary(input_weights=weights, argmax_slot=int(np.argmax(weights)))


def random_baseline(config: md.ModelConfig) -> md.Parameters:
    """The random-weights reference model used alongside trained checkpoints."""
    return md.init_parameters(config, RANDOM_BASELINE_SEED)


def write_probe_table(path, reports: Sequence[ProbeReport], meta: Optional[dict] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if meta:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        fh.write("layer_index\tmodel_label\txsim\n")
        for report in reports:
            for i, value in enumerate(report.xsim, start=1):
                fh.write(f"{i}\t{report.model_label}\t{value:.6f}\n")
