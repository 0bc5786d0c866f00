"""Small pre-norm transformer encoder returning every layer's token representations."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import TokenSequence
from .numerics import InvalidArgumentError, Tensor, parameter

Params = dict[str, Tensor]

INIT_STD = 0.02
CHECKPOINT_MAGIC = b"QUIPCKPT"
CHECKPOINT_VERSION = 1
_MASK_VALUE = -1e9


class ConfigurationError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_width: int = 256
    max_positions: int = 512
    dropout_rate: float = 0.1

    def validate(self) -> None:
        if self.d <= 0 or self.n_heads <= 0 or self.d % self.n_heads:
            raise ConfigurationError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1 or self.ffn_width < 1 or self.vocab_size < 1:
            raise ConfigurationError("n_layers, ffn_width and vocab_size must be positive")
        if self.max_positions < 456 + 50 + 2:
            raise ConfigurationError("max_positions must fit a 456-token passage plus a 50-token question")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads


def parameter_count(config: EncoderConfig) -> int:
    d, f = config.d, config.ffn_width
    per_layer = 4 * d * d + 2 * d * f + 8 * d + f
    return (config.vocab_size + config.max_positions) * d + config.n_layers * per_layer + 2 * d


def init_params(config: EncoderConfig, seed: int) -> Params:
    """Normal(0, 0.02) weights, zero biases, unit layer-norm gains; deterministic in ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    d, f = config.d, config.ffn_width

    def normal(*shape):
        return parameter(rng.normal(0.0, INIT_STD, size=shape))

    params: Params = {
        "tok_emb": normal(config.vocab_size, d),
        "pos_emb": normal(config.max_positions, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        params[p + "ln1.g"] = parameter(np.ones(d))
        params[p + "ln1.b"] = parameter(np.zeros(d))
        for name in ("q", "k", "v", "o"):
            params[p + f"attn.w{name}"] = normal(d, d)
            if name != "k":
                params[p + f"attn.b{name}"] = parameter(np.zeros(d))
        params[p + "ln2.g"] = parameter(np.ones(d))
        params[p + "ln2.b"] = parameter(np.zeros(d))
        params[p + "ffn.w1"] = normal(d, f)
        params[p + "ffn.b1"] = parameter(np.zeros(f))
        params[p + "ffn.w2"] = normal(f, d)
        params[p + "ffn.b2"] = parameter(np.zeros(d))
    params["ln_f.g"] = parameter(np.ones(d))
    params["ln_f.b"] = parameter(np.zeros(d))
    return params


def encoder_names(params: Mapping[str, Tensor]) -> list[str]:
    return [n for n in params if n in ("tok_emb", "pos_emb") or n.startswith(("layers.", "ln_f."))]


def pad_batch(sequences: Sequence[TokenSequence | Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences with [PAD] (id 0); returns ids (B, L) and lengths (B,)."""
    rows = [s.ids if isinstance(s, TokenSequence) else tuple(s) for s in sequences]
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    ids = np.zeros((len(rows), int(lengths.max())), dtype=np.int64)
    for b, r in enumerate(rows):
        ids[b, : len(r)] = r
    return ids, lengths


class _Dropout:
    def __init__(self, rate: float, rng: np.random.Generator | None):
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if self.rng is None or self.rate == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * keep


def _layer_norm(x: Tensor, g: Tensor, b: Tensor, hook, tag: str) -> Tensor:
    return x.normalize(hook=None if hook is None else (lambda y: hook(tag, y))) * g + b


def forward(params: Params, config: EncoderConfig, ids: np.ndarray, lengths: np.ndarray | None = None,
            train: bool = False, rng: np.random.Generator | None = None,
            hook: Callable[[str, np.ndarray], None] | None = None) -> list[Tensor]:
    """Differentiable encoder pass over a padded batch.

    Returns ``n_layers + 1`` tensors of shape (B, L, d): the embedding layer
    followed by each block's output (the last one after the final layer norm).
    Padded key positions are masked out of attention.
    """
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    batch, length = ids.shape
    if length > config.max_positions:
        raise InvalidArgumentError(f"sequence length {length} exceeds max_positions {config.max_positions}")
    if lengths is None:
        lengths = np.full(batch, length)
    drop = _Dropout(config.dropout_rate, rng if train else None)
    h, dh = config.n_heads, config.head_dim

    x = params["tok_emb"][ids] + params["pos_emb"][np.arange(length)]
    layers = [x]
    x = drop(x)
    pad_mask = np.where(np.arange(length)[None, :] < lengths[:, None], 0.0, _MASK_VALUE)
    pad_mask = pad_mask[:, None, None, :]
    scale = 1.0 / math.sqrt(dh)

    def heads(t: Tensor) -> Tensor:
        return t.reshape(batch, length, h, dh).transpose(0, 2, 1, 3)

    for i in range(config.n_layers):
        p = f"layers.{i}."
        a = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"], hook, f"{p}ln1")
        q = heads(a @ params[p + "attn.wq"] + params[p + "attn.bq"])
        # no key bias: it shifts every score of a query equally, so softmax ignores it
        k = heads(a @ params[p + "attn.wk"])
        v = heads(a @ params[p + "attn.wv"] + params[p + "attn.bv"])
        attn = ((q @ k.swapaxes(-1, -2)) * scale + pad_mask).softmax(axis=-1)
        ctx = (drop(attn) @ v).transpose(0, 2, 1, 3).reshape(batch, length, config.d)
        x = x + drop(ctx @ params[p + "attn.wo"] + params[p + "attn.bo"])
        m = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"], hook, f"{p}ln2")
        ff = (m @ params[p + "ffn.w1"] + params[p + "ffn.b1"]).gelu()
        x = x + drop(ff @ params[p + "ffn.w2"] + params[p + "ffn.b2"])
        layers.append(x)
    layers[-1] = _layer_norm(x, params["ln_f.g"], params["ln_f.b"], hook, "ln_f")
    return layers


@dataclass
class LayerRepresentations:
    """Per-layer (L, d) matrices for one sequence; index 0 is the embedding layer."""

    layers: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.layers[layer]

    @property
    def final(self) -> np.ndarray:
        return self.layers[-1]


def encode(params: Params, config: EncoderConfig, tokens: TokenSequence | Sequence[int], mode: str = "eval",
           seed: int | None = None, hook=None) -> LayerRepresentations:
    """Representations of one sequence at every layer (no gradient tape)."""
    if mode not in ("train", "eval"):
        raise InvalidArgumentError(f"mode must be 'train' or 'eval', got {mode!r}")
    ids, lengths = pad_batch([tokens])
    frozen = {n: Tensor(t.data) for n, t in params.items()}
    rng = np.random.default_rng(seed) if mode == "train" else None
    out = forward(frozen, config, ids, lengths, train=mode == "train", rng=rng, hook=hook)
    return LayerRepresentations([t.data[0] for t in out])


def encode_many(params: Params, config: EncoderConfig, sequences: Sequence[TokenSequence],
                batch_size: int = 32) -> list[LayerRepresentations]:
    """Eval-mode encoding of many sequences, batched by similar length."""
    frozen = {n: Tensor(t.data) for n, t in params.items()}
    order = sorted(range(len(sequences)), key=lambda i: len(sequences[i]))
    result: list[LayerRepresentations | None] = [None] * len(sequences)
    for lo in range(0, len(order), batch_size):
        chunk = order[lo: lo + batch_size]
        ids, lengths = pad_batch([sequences[i] for i in chunk])
        out = forward(frozen, config, ids, lengths)
        for b, i in enumerate(chunk):
            n = lengths[b]
            result[i] = LayerRepresentations([t.data[b, :n] for t in out])
    return result


# -- heads ------------------------------------------------------------------------


def init_mlp(params: Params, prefix: str, d_in: int, d_hidden: int, d_out: int,
             rng: np.random.Generator, out_bias: bool = True) -> None:
    params[prefix + "w1"] = parameter(rng.normal(0.0, INIT_STD, size=(d_in, d_hidden)))
    params[prefix + "b1"] = parameter(np.zeros(d_hidden))
    params[prefix + "w2"] = parameter(rng.normal(0.0, INIT_STD, size=(d_hidden, d_out)))
    if out_bias:
        params[prefix + "b2"] = parameter(np.zeros(d_out))


def mlp(params: Params, prefix: str, x: Tensor, activation: str = "gelu") -> Tensor:
    hidden = x @ params[prefix + "w1"] + params[prefix + "b1"]
    if activation == "gelu":
        hidden = hidden.gelu()
    elif activation != "identity":
        raise ConfigurationError(f"unknown activation {activation!r}")
    out = hidden @ params[prefix + "w2"]
    return out + params[prefix + "b2"] if prefix + "b2" in params else out


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(params: Mapping[str, Tensor], config: EncoderConfig, path, meta: dict | None = None) -> str:
    """Write params + config; returns the SHA-256 of the file contents.

    Layout: magic, u32 version, u32 header length, JSON header (config, meta,
    tensor names/shapes), little-endian float64 tensor data in header order,
    then a 32-byte SHA-256 of everything before it.
    """
    names = sorted(params)
    header = {
        "config": asdict(config),
        "meta": meta or {},
        "tensors": [[n, list(params[n].shape)] for n in names],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray(CHECKPOINT_MAGIC)
    body += struct.pack("<II", CHECKPOINT_VERSION, len(head))
    body += head
    for n in names:
        body += np.ascontiguousarray(params[n].data, dtype="<f8").tobytes()
    digest = hashlib.sha256(body).digest()
    blob = bytes(body) + digest
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path, vocab_size: int | None = None) -> tuple[Params, EncoderConfig, dict]:
    """Read a checkpoint; raises CheckpointError on corruption, ConfigurationError on vocab mismatch."""
    blob = Path(path).read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 + 32 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch (file truncated or corrupted)")
    offset = len(CHECKPOINT_MAGIC)
    version, head_len = struct.unpack_from("<II", body, offset)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset += 8
    header = json.loads(body[offset: offset + head_len].decode("utf-8"))
    offset += head_len
    config = EncoderConfig(**header["config"])
    if vocab_size is not None and config.vocab_size != vocab_size:
        raise ConfigurationError(f"checkpoint vocab_size {config.vocab_size} != runtime vocabulary {vocab_size}")
    params: Params = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(body):
            raise CheckpointError(f"tensor {name} runs past end of file")
        params[name] = parameter(np.frombuffer(body[offset:end], dtype="<f8").reshape(shape))
        offset = end
    if offset != len(body):
        raise CheckpointError("trailing bytes after tensor data")
    expected = expected_shapes(config)
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"missing encoder tensors: {sorted(missing)[:3]}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(f"tensor {name} has shape {params[name].shape}, config implies {shape}")
    return params, config, header["meta"]


def expected_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every encoder tensor for ``config``."""
    d, f = config.d, config.ffn_width
    shapes = {"tok_emb": (config.vocab_size, d), "pos_emb": (config.max_positions, d),
              "ln_f.g": (d,), "ln_f.b": (d,)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        for s in ("ln1.g", "ln1.b", "ln2.g", "ln2.b", "ffn.b2"):
            shapes[p + s] = (d,)
        shapes[p + "ffn.w1"], shapes[p + "ffn.b1"], shapes[p + "ffn.w2"] = (d, f), (f,), (f, d)
        for n in "qkvo":
            shapes[p + f"attn.w{n}"] = (d, d)
            if n != "k":
                shapes[p + f"attn.b{n}"] = (d,)
    return shapes


def params_checksum(params: Mapping[str, Tensor]) -> str:
    h = hashlib.sha256()
    for n in sorted(params):
        h.update(n.encode())
        h.update(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())
    return h.hexdigest()
