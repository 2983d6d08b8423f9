"""Unimodal encoders, the multi-head cross-modal encoder with attention
tracing, momentum shadows of the unimodal weights, and checkpoint files.

The encoders are deliberately small: linear patch/token embeddings plus
standard post-norm self-attention blocks. The cross-modal encoder runs
self-attention over the text rows, cross-attention with text queries against
image keys/values, then a feed-forward, per layer; one layer's per-head
attention matrices and projected values can be captured as a trace. The same
cross-modal parameters serve the image-text and image-phrase streams.
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor, Rng
from .textproc import CLS_ID, UNK_ID

CHECKPOINT_VERSION = 1
_CKPT_MAGIC = b"PACKPT01"

INIT_STD = 0.02
INIT_TEMPERATURE = 0.07


@dataclasses.dataclass
class ModelConfig:
    d: int = 32                   # representation width
    heads: int = 4                # d must divide evenly; head width d' = d/heads
    n_self_layers: int = 1
    n_cross_layers: int = 6
    bidiratt_layer: int = 3       # 1-based cross layer whose attention is traced
    proj_dim: int = 16            # width of the coarse-similarity embeddings
    patch_rows: int = 8
    patch_cols: int = 8
    patch_pixels: int = 48
    max_text_len: int = 50
    vocab_size: int = 0           # filled from the text pipeline
    ffn_mult: int = 2
    biatt_row: str = "mask"       # "mask" or "cls": row read for forward attention
    biatt_phrase: str = "masked"  # "masked" or "clean": phrase fed to the local stream
    mpm_positions: str = "masked"  # "masked" or "all": positions scored by the MPM loss
    separate_phrase_projection: bool = False
    tie_score_head: bool = False

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def n_patches(self) -> int:
        return self.patch_rows * self.patch_cols

    def validate(self) -> None:
        if self.d % self.heads != 0:
            raise ValueError(f"width {self.d} not divisible by {self.heads} heads")
        if not 1 <= self.bidiratt_layer <= self.n_cross_layers:
            raise ValueError(f"bidiratt_layer {self.bidiratt_layer} outside "
                             f"1..{self.n_cross_layers}")
        if self.patch_pixels % 3 != 0:
            raise ValueError("patch_pixels must hold whole RGB triples")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must include the reserved tokens")
        for field, allowed in (("biatt_row", ("mask", "cls")),
                               ("biatt_phrase", ("masked", "clean")),
                               ("mpm_positions", ("masked", "all"))):
            if getattr(self, field) not in allowed:
                raise ValueError(f"{field} must be one of {allowed}")


class Params:
    """Named parameter tensors in a fixed creation order."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, op=f"param:{name}")
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def named(self):
        return self._tensors.items()

    def tensors(self):
        return self._tensors.values()

    def zero_grads(self) -> None:
        nx.zero_grads(self._tensors.values())


# momentum shadows mirror the unimodal encoders and the coarse projections
_MOMENTUM_PREFIXES = ("embed.", "img_self", "txt_self", "proj.")


def is_momentum_mirrored(name: str) -> bool:
    return name.startswith(_MOMENTUM_PREFIXES)


@dataclasses.dataclass
class MomentumState:
    shadow: dict
    alpha: float

    @classmethod
    def from_params(cls, params: Params, alpha: float) -> "MomentumState":
        if not 0.0 <= alpha < 1.0:
            raise ValueError(f"momentum coefficient {alpha} outside [0, 1)")
        shadow = {name: Tensor(t.data.copy(), op=f"momentum:{name}")
                  for name, t in params.named() if is_momentum_mirrored(name)}
        return cls(shadow=shadow, alpha=alpha)


def momentum_update(live: Params, state: MomentumState) -> None:
    """shadow <- alpha * shadow + (1 - alpha) * live, elementwise."""
    a = state.alpha
    for name, shadow in state.shadow.items():
        src = live[name]
        if src.data.shape != shadow.data.shape:
            raise ValueError(f"momentum shape drift on {name}: "
                             f"{shadow.data.shape} vs {src.data.shape}")
        shadow.data *= a
        shadow.data += (1.0 - a) * src.data


# ---------------------------------------------------------------------------
# initialization


def init_params(cfg: ModelConfig, rng: Rng) -> Params:
    """Truncated-normal weights (std 0.02), zero biases, temperature 0.07."""
    cfg.validate()
    p = Params()
    d, dh, v = cfg.d, cfg.head_dim, cfg.vocab_size

    def w(name, *shape):
        p.add(name, rng.truncated_normal(shape, INIT_STD))

    def zeros(name, *shape):
        p.add(name, np.zeros(shape))

    def ones(name, *shape):
        p.add(name, np.ones(shape))

    w("embed.patch.w", cfg.patch_pixels, d)
    zeros("embed.patch.b", d)
    w("embed.token", v, d)
    w("embed.pos_img", cfg.n_patches + 1, d)
    w("embed.pos_txt", cfg.max_text_len + 1, d)
    w("embed.cls_img", 1, d)

    def attention_block(prefix):
        for h in range(cfg.heads):
            w(f"{prefix}.h{h}.wq", d, dh)
            w(f"{prefix}.h{h}.wk", d, dh)
            w(f"{prefix}.h{h}.wv", d, dh)
        w(f"{prefix}.out.w", d, d)
        zeros(f"{prefix}.out.b", d)

    def ffn_block(prefix):
        w(f"{prefix}.w1", d, cfg.ffn_mult * d)
        zeros(f"{prefix}.b1", cfg.ffn_mult * d)
        w(f"{prefix}.w2", cfg.ffn_mult * d, d)
        zeros(f"{prefix}.b2", d)

    def ln(prefix):
        ones(f"{prefix}.g", d)
        zeros(f"{prefix}.b", d)

    for stream in ("img_self", "txt_self"):
        for layer in range(cfg.n_self_layers):
            attention_block(f"{stream}{layer}.attn")
            ln(f"{stream}{layer}.ln1")
            ffn_block(f"{stream}{layer}.ffn")
            ln(f"{stream}{layer}.ln2")

    for layer in range(cfg.n_cross_layers):
        attention_block(f"cross{layer}.self")
        ln(f"cross{layer}.ln1")
        attention_block(f"cross{layer}.cross")
        ln(f"cross{layer}.ln2")
        ffn_block(f"cross{layer}.ffn")
        ln(f"cross{layer}.ln3")

    w("score.w", dh, 1)
    w("itm.w", d, 1)
    w("proj.img.w", d, cfg.proj_dim)
    w("proj.txt.w", d, cfg.proj_dim)
    if cfg.separate_phrase_projection:
        w("proj.phrase.w", d, cfg.proj_dim)
    w("mpm.w1", d, d)
    zeros("mpm.b1", d)
    w("mpm.w2", d, v)
    zeros("mpm.b2", v)
    p.add("temp.log_tau", np.log(INIT_TEMPERATURE))
    return p


def phrase_projection(params: Params, cfg: ModelConfig) -> Tensor:
    return params["proj.phrase.w" if cfg.separate_phrase_projection else "proj.txt.w"]


# ---------------------------------------------------------------------------
# outputs and traces


@dataclasses.dataclass
class EncoderOutput:
    reps: Tensor  # (sequence_length + 1, d); row 0 is the global [CLS] row

    @property
    def cls(self) -> Tensor:
        return nx.take_row(self.reps, 0)


@dataclasses.dataclass
class AttentionTrace:
    """Per-head attention state of one cross-attention layer."""

    layer: int                  # 1-based
    attn: list                  # per head: (L_text+1, L_img+1), rows sum to 1
    values: list                # per head: (L_img+1, head_dim)
    queries: list               # per head: (L_text+1, head_dim)


@dataclasses.dataclass
class FusionOutput:
    reps: Tensor
    trace: AttentionTrace | None = None

    @property
    def cls(self) -> Tensor:
        return nx.take_row(self.reps, 0)


# optional collector: every cross-attention softmax row computed while a
# collector is installed reports its worst row-sum deviation to it
_row_sum_collector: list | None = None


@contextlib.contextmanager
def collect_attention_row_sums(into: list):
    global _row_sum_collector
    prev = _row_sum_collector
    _row_sum_collector = into
    try:
        yield into
    finally:
        _row_sum_collector = prev


def _note_attention_rows(a: Tensor) -> None:
    if _row_sum_collector is not None:
        dev = float(np.abs(a.data.sum(axis=1) - 1.0).max())
        _row_sum_collector.append(dev)


# ---------------------------------------------------------------------------
# blocks


def _multi_head_attention(queries_from: Tensor, keys_values_from: Tensor,
                          params: Params, prefix: str, cfg: ModelConfig,
                          capture: bool = False):
    """Scaled dot-product attention; per-head projections as in the traced
    layer's contract. Returns (output rows, trace parts or None)."""
    scale = 1.0 / np.sqrt(cfg.head_dim)
    head_outs = []
    trace = ([], [], []) if capture else None
    for h in range(cfg.heads):
        q = nx.matmul(queries_from, params[f"{prefix}.h{h}.wq"])
        k = nx.matmul(keys_values_from, params[f"{prefix}.h{h}.wk"])
        v = nx.matmul(keys_values_from, params[f"{prefix}.h{h}.wv"])
        a = nx.row_softmax(nx.mul(nx.matmul(q, nx.transpose(k)), scale))
        _note_attention_rows(a)
        head_outs.append(nx.matmul(a, v))
        if capture:
            trace[0].append(a)
            trace[1].append(v)
            trace[2].append(q)
    out = head_outs[0]
    for ho in head_outs[1:]:
        out = nx.concat_cols(out, ho)
    out = nx.add(nx.matmul(out, params[f"{prefix}.out.w"]), params[f"{prefix}.out.b"])
    return out, trace


def _ffn(x: Tensor, params: Params, prefix: str) -> Tensor:
    h = nx.tanh(nx.add(nx.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return nx.add(nx.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _post_norm(x: Tensor, delta: Tensor, params: Params, prefix: str) -> Tensor:
    return nx.layer_norm_rows(nx.add(x, delta), params[f"{prefix}.g"],
                              params[f"{prefix}.b"])


def _self_block(x: Tensor, params: Params, prefix: str, cfg: ModelConfig) -> Tensor:
    attn, _ = _multi_head_attention(x, x, params, f"{prefix}.attn", cfg)
    x = _post_norm(x, attn, params, f"{prefix}.ln1")
    x = _post_norm(x, _ffn(x, params, f"{prefix}.ffn"), params, f"{prefix}.ln2")
    return x


# ---------------------------------------------------------------------------
# encoders


def encode_image(patches, params: Params, cfg: ModelConfig,
                 mode: str = "train") -> EncoderOutput:
    """Linear patch embedding + positions + [CLS] + self-attention layers."""
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    if patches.shape != (cfg.n_patches, cfg.patch_pixels):
        raise nx.ShapeError(
            f"expected {cfg.n_patches} patches of {cfg.patch_pixels} pixels, "
            f"got shape {patches.shape}")
    ctx = nx.no_grad() if mode == "infer" else contextlib.nullcontext()
    with ctx:
        x = nx.add(nx.matmul(patches, params["embed.patch.w"]), params["embed.patch.b"])
        x = nx.concat_rows(params["embed.cls_img"], x)
        x = nx.add(x, params["embed.pos_img"])
        for layer in range(cfg.n_self_layers):
            x = _self_block(x, params, f"img_self{layer}", cfg)
        return EncoderOutput(x)


def encode_text(token_ids, params: Params, cfg: ModelConfig,
                mode: str = "train") -> EncoderOutput:
    """Token embedding + positions + [CLS] + self-attention layers.

    Unknown ids fall back to the [UNK] row. Phrases reuse the text positional
    rows from position 0."""
    ids = [i if 0 <= i < cfg.vocab_size else UNK_ID for i in token_ids]
    if len(ids) > cfg.max_text_len:
        raise nx.ShapeError(f"text length {len(ids)} exceeds {cfg.max_text_len}")
    ctx = nx.no_grad() if mode == "infer" else contextlib.nullcontext()
    with ctx:
        x = nx.gather_rows(params["embed.token"], [CLS_ID] + ids)
        x = nx.add(x, nx.slice_rows(params["embed.pos_txt"], 0, len(ids) + 1))
        for layer in range(cfg.n_self_layers):
            x = _self_block(x, params, f"txt_self{layer}", cfg)
        return EncoderOutput(x)


def cross_encode(text_out: EncoderOutput, img_out: EncoderOutput, params: Params,
                 cfg: ModelConfig, trace_layer: int | None = None,
                 mode: str = "train") -> FusionOutput:
    """Per layer: self-attention over text rows, cross-attention with text
    queries against image keys/values, feed-forward. ``trace_layer`` (1-based)
    captures that layer's attention trace."""
    if trace_layer is not None and not 1 <= trace_layer <= cfg.n_cross_layers:
        raise ValueError(f"trace_layer {trace_layer} outside 1..{cfg.n_cross_layers}")
    ctx = nx.no_grad() if mode == "infer" else contextlib.nullcontext()
    with ctx:
        x = text_out.reps
        trace = None
        for layer in range(cfg.n_cross_layers):
            prefix = f"cross{layer}"
            attn, _ = _multi_head_attention(x, x, params, f"{prefix}.self", cfg)
            x = _post_norm(x, attn, params, f"{prefix}.ln1")
            capture = trace_layer is not None and layer + 1 == trace_layer
            cross, parts = _multi_head_attention(
                x, img_out.reps, params, f"{prefix}.cross", cfg, capture=capture)
            if capture:
                trace = AttentionTrace(layer + 1, parts[0], parts[1], parts[2])
            x = _post_norm(x, cross, params, f"{prefix}.ln2")
            x = _post_norm(x, _ffn(x, params, f"{prefix}.ffn"), params, f"{prefix}.ln3")
        return FusionOutput(x, trace)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, named_tensors: dict) -> None:
    """Write a checkpoint directory: ``manifest.json`` + ``tensors.bin``.

    tensors.bin layout: 8-byte magic, then each tensor's values as
    little-endian float64 in manifest order; the manifest records the name,
    shape, and byte offset of every tensor plus a mandatory version field.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = len(_CKPT_MAGIC)
    with open(path / "tensors.bin", "wb") as fh:
        fh.write(_CKPT_MAGIC)
        for name, tensor in named_tensors.items():
            arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
            raw = arr.astype("<f8").tobytes(order="C")
            entries.append({"name": name, "shape": list(arr.shape),
                            "offset": offset, "bytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    manifest = {"format_version": CHECKPOINT_VERSION, "tensors": entries}
    (path / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"unreadable checkpoint manifest: {e}") from e
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version "
                         f"{manifest.get('format_version')!r}")
    blob = (path / "tensors.bin").read_bytes()
    if blob[:len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError("bad magic bytes in tensors.bin")
    out = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["bytes"]
        if start + nbytes > len(blob):
            raise ValueError(f"tensors.bin truncated at offset {start}")
        arr = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=start)
        out[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return out


def params_state(params: Params, momentum: MomentumState | None = None) -> dict:
    state = dict(params.named())
    if momentum is not None:
        for name, tensor in momentum.shadow.items():
            state[f"momentum/{name}"] = tensor
    return state


def load_params_state(params: Params, momentum: MomentumState | None,
                      state: dict) -> None:
    for name, _ in params.named():
        params[name].data[...] = state[name]
    if momentum is not None:
        for name in momentum.shadow:
            momentum.shadow[name].data[...] = state[f"momentum/{name}"]
