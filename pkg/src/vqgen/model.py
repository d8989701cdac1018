"""Transformer encoder with tied-embedding decoding head and checkpoint I/O.

The encoder is a stack of post-norm blocks (masked multi-head self-attention,
then a gelu feed-forward, each with residual + layer norm). The decoding head
is a feed-forward layer, a layer norm, and a matmul against the transposed
token-embedding table -- no separate output matrix exists.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import numerics as nm
from .multimodal import AssembledInput, CrossModalProjection
from .numerics import Parameter, Tensor

LAYER_NORM_EPS = 1e-12
MASKED_LOGIT = -1e9

CHECKPOINT_MAGIC = b"MGCK"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Invalid architecture configuration."""


class CheckpointError(ValueError):
    """Malformed or mismatched checkpoint file."""


@dataclass(frozen=True)
class SpecialTokens:
    pad: int = 0
    unk: int = 1
    cls: int = 2
    sep: int = 3
    mask: int = 4
    eos: int = 5

    def all_ids(self) -> tuple[int, ...]:
        return (self.pad, self.unk, self.cls, self.sep, self.mask, self.eos)

    def validate(self, vocab_size: int) -> None:
        ids = self.all_ids()
        if len(set(ids)) != len(ids):
            raise ConfigError("special token ids must be distinct")
        if any(i < 0 or i >= vocab_size for i in ids):
            raise ConfigError("special token ids must be < vocab_size")


@dataclass
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    model_dim: int = 128
    ffn_dim: int = 512
    vocab_size: int = 1000
    max_positions: int = 64
    feature_dim: int = 32
    boxes_dim: int = 4
    num_regions: int = 8
    use_type_embeddings: bool = False

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by {self.num_heads} heads")
        if self.boxes_dim != 4:
            raise ConfigError("boxes_dim is fixed at 4")
        if min(self.num_layers, self.model_dim, self.ffn_dim, self.vocab_size,
               self.max_positions, self.feature_dim, self.num_regions) < 1:
            raise ConfigError("all size fields must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def object_dim(self) -> int:
        return self.feature_dim + self.boxes_dim

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for f in fields(cls):
            if f.name in d:
                raw = d[f.name]
                kwargs[f.name] = (raw in ("true", "True", True, 1, "1")) if f.type == "bool" else int(raw)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**kwargs)


_PROJECTION_NAMES = ("projection.weight", "projection.bias")


class Parameters:
    """All learnable weights, keyed by stable names in registration order."""

    def __init__(self, config: ModelConfig, store: dict[str, Parameter]):
        self.config = config
        self._store = store

    def __getitem__(self, name: str) -> Parameter:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def all(self) -> list[Parameter]:
        return list(self._store.values())

    def names(self) -> list[str]:
        return list(self._store.keys())

    def theta(self) -> list[Parameter]:
        """Every backbone parameter, i.e. everything except the projection."""
        return [p for n, p in self._store.items() if n not in _PROJECTION_NAMES]

    def projection_params(self) -> list[Parameter]:
        return [self._store[n] for n in _PROJECTION_NAMES]

    @property
    def projection(self) -> CrossModalProjection:
        return CrossModalProjection(
            weight=self._store["projection.weight"], bias=self._store["projection.bias"]
        )

    def set_trainable(self, names: Sequence[str] | None = None, *, value: bool = True) -> None:
        targets = self._store.keys() if names is None else names
        for n in targets:
            self._store[n].trainable = value

    def checksum(self, names: Optional[Sequence[str]] = None) -> str:
        """Hex digest over the raw bytes of the named tensors (all by default)."""
        h = hashlib.sha256()
        for n in names if names is not None else self._store.keys():
            h.update(n.encode())
            h.update(self._store[n].value.data.tobytes())
        return h.hexdigest()

    def copy_values_from(self, other: "Parameters", names: Sequence[str]) -> None:
        for n in names:
            src = other[n].value.data
            dst = self._store[n].value.data
            if src.shape != dst.shape:
                raise ConfigError(f"shape mismatch for {n}: {src.shape} vs {dst.shape}")
            dst[...] = src

    def astype(self, dtype) -> None:
        """Convert every tensor (and gradient buffer) to the given float dtype."""
        if dtype not in (np.float64, np.float32):
            raise ConfigError(f"unsupported parameter dtype {dtype}")
        for p in self._store.values():
            p.value.data = p.value.data.astype(dtype)
            p.gradient = p.gradient.astype(dtype)

    @property
    def dtype(self):
        return self._store["embeddings.token"].value.data.dtype


def _parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, kind) in registration order; kind picks the initializer."""
    d, ffn, v = config.model_dim, config.ffn_dim, config.vocab_size
    out: list[tuple[str, tuple[int, ...], str]] = [
        ("embeddings.token", (v, d), "weight"),
        ("embeddings.position", (config.max_positions, d), "weight"),
    ]
    if config.use_type_embeddings:
        out.append(("embeddings.type", (2, d), "weight"))
    for i in range(config.num_layers):
        pre = f"layer{i}"
        out += [
            (f"{pre}.attn.wq", (d, d), "weight"),
            (f"{pre}.attn.bq", (d,), "bias"),
            (f"{pre}.attn.wk", (d, d), "weight"),
            (f"{pre}.attn.bk", (d,), "bias"),
            (f"{pre}.attn.wv", (d, d), "weight"),
            (f"{pre}.attn.bv", (d,), "bias"),
            (f"{pre}.attn.wo", (d, d), "weight"),
            (f"{pre}.attn.bo", (d,), "bias"),
            (f"{pre}.attn_norm.gain", (d,), "gain"),
            (f"{pre}.attn_norm.bias", (d,), "bias"),
            (f"{pre}.ffn.w1", (d, ffn), "weight"),
            (f"{pre}.ffn.b1", (ffn,), "bias"),
            (f"{pre}.ffn.w2", (ffn, d), "weight"),
            (f"{pre}.ffn.b2", (d,), "bias"),
            (f"{pre}.ffn_norm.gain", (d,), "gain"),
            (f"{pre}.ffn_norm.bias", (d,), "bias"),
        ]
    out += [
        ("head.dense_w", (d, d), "weight"),
        ("head.dense_b", (d,), "bias"),
        ("head.norm.gain", (d,), "gain"),
        ("head.norm.bias", (d,), "bias"),
        ("head.output_bias", (v,), "bias"),
        ("projection.weight", (config.object_dim, d), "weight"),
        ("projection.bias", (d,), "bias"),
    ]
    return out


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) with resampling outside two standard deviations."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


INIT_STD = 0.02


def init_parameters(config: ModelConfig, seed: int) -> Parameters:
    """Fresh weights: truncated normal(0, 0.02), norms at identity, zero biases."""
    rng = np.random.default_rng(seed)
    store: dict[str, Parameter] = {}
    for name, shape, kind in _parameter_shapes(config):
        if kind == "weight":
            data = _truncated_normal(rng, shape, INIT_STD)
        elif kind == "gain":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        store[name] = Parameter(name, data.astype(nm.DEFAULT_DTYPE))
    return Parameters(config, store)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def embed_extended(
    input: AssembledInput,
    extra_tokens: Sequence[int],
    extra_positions: Sequence[int],
    params: Parameters,
) -> Tensor:
    """Embed an assembled input plus appended text tokens, one row per slot.

    Token slots become token-embedding + position rows; region slots are
    projected through the cross-modal linear layer and then get the same
    position rows. Nothing else marks which modality a row came from.
    """
    config = params.config
    positions = np.concatenate([input.positions, np.asarray(extra_positions, dtype=np.int64)])
    if positions.size and positions.max() >= config.max_positions:
        raise nm.ShapeError(
            f"position {int(positions.max())} exceeds max_positions {config.max_positions}"
        )

    blocks: list[Tensor] = []
    run_tokens: list[int] = []

    def flush_tokens():
        if run_tokens:
            ids = np.asarray(run_tokens, dtype=np.int64)
            if ids.min() < 0 or ids.max() >= config.vocab_size:
                raise nm.ShapeError("token id outside vocabulary")
            blocks.append(nm.take_rows(params["embeddings.token"].value, ids))
            run_tokens.clear()

    run_regions: list[np.ndarray] = []

    def flush_regions():
        if run_regions:
            stacked = np.stack(run_regions).astype(params.dtype)
            if stacked.shape[1] != config.object_dim:
                raise nm.ShapeError(
                    f"object embedding dim {stacked.shape[1]} != {config.object_dim}"
                )
            blocks.append(
                nm.affine(stacked, params["projection.weight"].value, params["projection.bias"].value)
            )
            run_regions.clear()

    for slot in list(input.slots) + [int(t) for t in extra_tokens]:
        if isinstance(slot, (int, np.integer)):
            flush_regions()
            run_tokens.append(int(slot))
        else:
            flush_tokens()
            run_regions.append(np.asarray(slot, dtype=np.float64))
    flush_tokens()
    flush_regions()

    content = blocks[0] if len(blocks) == 1 else nm.concat(blocks, axis=0)
    out = nm.add(content, nm.take_rows(params["embeddings.position"].value, positions))
    if config.use_type_embeddings:
        types = np.ones(len(positions), dtype=np.int64)
        v0, v1 = input.visual_span
        types[v0:v1] = 0
        out = nm.add(out, nm.take_rows(params["embeddings.type"].value, types))
    return out


def embed_sequence(input: AssembledInput, params: Parameters) -> Tensor:
    """Embed an assembled input; shape (S, model_dim)."""
    return embed_extended(input, [], [], params)


def additive_mask(allow: np.ndarray) -> np.ndarray:
    """Boolean allow-matrix to additive logit mask (0 where allowed, -1e9 where not)."""
    return np.where(allow, 0.0, MASKED_LOGIT)


def _dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0:
        return x
    if rng is None:
        raise nm.StateError("dropout requires a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return nm.mul(x, keep)


def encode_states(
    x: Tensor,
    allow: np.ndarray,
    params: Parameters,
    *,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    collect_attention: bool = False,
):
    """Run the encoder stack on (B, S, d) input under a boolean allow mask.

    Returns (states, attentions): states is a list of num_layers+1 tensors
    (index 0 is the embedding input); attentions has one (B, H, S, S) array
    per layer when requested, else None.
    """
    config = params.config
    b, s, d = x.shape
    if allow.ndim == 2:
        allow = allow[None, :, :]
    if allow.shape != (b, s, s) and allow.shape != (1, s, s):
        raise nm.ShapeError(f"mask shape {allow.shape} incompatible with input {(b, s)}")
    mask_add = Tensor(additive_mask(allow)[:, None, :, :].astype(x.data.dtype))

    h_count, dh = config.num_heads, config.head_dim
    scale = 1.0 / math.sqrt(dh)
    states = [x]
    attentions = [] if collect_attention else None

    for i in range(config.num_layers):
        pre = f"layer{i}"
        q = nm.affine(x, params[f"{pre}.attn.wq"].value, params[f"{pre}.attn.bq"].value)
        k = nm.affine(x, params[f"{pre}.attn.wk"].value, params[f"{pre}.attn.bk"].value)
        v = nm.affine(x, params[f"{pre}.attn.wv"].value, params[f"{pre}.attn.bv"].value)
        q = nm.swapaxes(nm.reshape(q, (b, s, h_count, dh)), 1, 2)
        k = nm.swapaxes(nm.reshape(k, (b, s, h_count, dh)), 1, 2)
        v = nm.swapaxes(nm.reshape(v, (b, s, h_count, dh)), 1, 2)
        scores = nm.add(nm.mul(nm.matmul(q, nm.transpose(k)), scale), mask_add)
        att = nm.softmax_rows(scores)
        if collect_attention:
            attentions.append(np.array(att.data, copy=True))
        ctx = nm.reshape(nm.swapaxes(nm.matmul(att, v), 1, 2), (b, s, d))
        ctx = nm.affine(ctx, params[f"{pre}.attn.wo"].value, params[f"{pre}.attn.bo"].value)
        ctx = _dropout(ctx, dropout, rng)
        x = nm.layer_norm(
            nm.add(x, ctx),
            params[f"{pre}.attn_norm.gain"].value,
            params[f"{pre}.attn_norm.bias"].value,
            eps=LAYER_NORM_EPS,
        )
        ff = nm.affine(x, params[f"{pre}.ffn.w1"].value, params[f"{pre}.ffn.b1"].value)
        ff = nm.gelu(ff)
        ff = nm.affine(ff, params[f"{pre}.ffn.w2"].value, params[f"{pre}.ffn.b2"].value)
        ff = _dropout(ff, dropout, rng)
        x = nm.layer_norm(
            nm.add(x, ff),
            params[f"{pre}.ffn_norm.gain"].value,
            params[f"{pre}.ffn_norm.bias"].value,
            eps=LAYER_NORM_EPS,
        )
        states.append(x)
    return states, attentions


def encode(
    embedded: Tensor,
    mask,
    params: Parameters,
    *,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    collect_attention: bool = False,
):
    """Encode one (S, d) sequence; returns the num_layers+1 per-layer outputs.

    `mask` is an AttentionMask or a plain (S, S) boolean allow-matrix. With
    collect_attention=True also returns the per-layer attention weights.
    """
    allow = np.asarray(getattr(mask, "allow", mask), dtype=bool)
    s, d = embedded.shape
    if allow.shape != (s, s):
        raise nm.ShapeError(f"mask is {allow.shape}, expected ({s}, {s})")
    x = nm.reshape(embedded, (1, s, d))
    states, attentions = encode_states(
        x, allow, params, dropout=dropout, rng=rng, collect_attention=collect_attention
    )
    flat = [nm.reshape(st, (s, d)) for st in states]
    if collect_attention:
        return flat, [a[0] for a in attentions]
    return flat


def decode_logits(hidden: Tensor, params: Parameters) -> Tensor:
    """Head over final-layer state(s): feed-forward, norm, tied-embedding matmul."""
    single = hidden.ndim == 1
    h = nm.reshape(hidden, (1, hidden.shape[0])) if single else hidden
    h = nm.gelu(nm.affine(h, params["head.dense_w"].value, params["head.dense_b"].value))
    h = nm.layer_norm(
        h, params["head.norm.gain"].value, params["head.norm.bias"].value, eps=LAYER_NORM_EPS
    )
    logits = nm.add(
        nm.matmul(h, nm.transpose(params["embeddings.token"].value)),
        params["head.output_bias"].value,
    )
    if single:
        return nm.reshape(logits, (params.config.vocab_size,))
    return logits


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _encode_kv(d: dict) -> bytes:
    lines = [f"{k}={v}" for k, v in d.items()]
    return "\n".join(lines).encode("utf-8")


def _decode_kv(raw: bytes) -> dict:
    out: dict[str, str] = {}
    text = raw.decode("utf-8")
    if not text:
        return out
    for line in text.split("\n"):
        if "=" not in line:
            raise CheckpointError(f"malformed config line: {line!r}")
        k, v = line.split("=", 1)
        out[k] = v
    return out


def save_checkpoint(path, config: ModelConfig, params: Parameters, extras: Optional[dict] = None):
    """Write the versioned binary checkpoint; tensors stored as little-endian f32."""
    meta = {str(k): str(v) for k, v in (extras or {}).items()}
    cfg = {k: ("true" if v is True else "false" if v is False else v) for k, v in config.to_dict().items()}
    cfg.update({f"x.{k}": v for k, v in meta.items()})
    blob = _encode_kv(cfg)
    names = params.names()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = params[name].value.data
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint file")
    return raw


def load_checkpoint(path):
    """Read a checkpoint; returns (config, Parameters, extras dict)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        kv = _decode_kv(_read_exact(fh, cfg_len))
        extras = {k[2:]: v for k, v in kv.items() if k.startswith("x.")}
        config = ModelConfig.from_dict({k: v for k, v in kv.items() if not k.startswith("x.")})
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        expected = _parameter_shapes(config)
        if count != len(expected):
            raise CheckpointError(f"{count} tensors in file, config implies {len(expected)}")
        store: dict[str, Parameter] = {}
        for exp_name, exp_shape, _ in expected:
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            if name != exp_name:
                raise CheckpointError(f"tensor {name!r} out of order, expected {exp_name!r}")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
            if shape != exp_shape:
                raise CheckpointError(f"tensor {name!r} has shape {shape}, expected {exp_shape}")
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 4 * n_items), dtype="<f4")
            store[name] = Parameter(name, data.astype(nm.DEFAULT_DTYPE).reshape(shape))
    return config, Parameters(config, store), extras
