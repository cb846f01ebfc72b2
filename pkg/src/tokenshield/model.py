"""Minimal vision-transformer inference runtime.

Plain pre-norm ViT: non-overlapping patch embedding, learned positional
encodings, a CLS token, L encoder blocks of multi-head self-attention and
an MLP (both with residuals), final LayerNorm, and a linear head on the
CLS row. Weights are float32; matmuls run in float32 and LayerNorm
statistics accumulate in float64.

Weights load from the STRV container (see strv.py). The container's
metadata embeds the architecture config and an optional export manifest
with per-tensor crc32 checksums and reference logits, both verified here.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import strv
from .errors import FormatError, NumericError, ValidationError
from .rng import PURPOSE_INPUT, Stream, derive_key

CHANNELS = 3

_CONFIG_FIELDS = (
    "image_size",
    "patch_size",
    "embed_dim",
    "num_heads",
    "num_layers",
    "mlp_hidden_dim",
    "num_classes",
)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int
    patch_size: int
    embed_dim: int
    num_heads: int
    num_layers: int
    mlp_hidden_dim: int
    num_classes: int
    layernorm_epsilon: float = 1e-6
    gelu: str = "erf"

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    def validate(self) -> None:
        for f in _CONFIG_FIELDS:
            v = getattr(self, f)
            if not isinstance(v, int) or v <= 0:
                raise ValidationError(f"config.{f} must be a positive integer, got {v!r}")
        if self.image_size % self.patch_size:
            raise ValidationError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValidationError("embed_dim must be divisible by num_heads")
        if self.gelu not in ("erf", "tanh"):
            raise ValidationError(f"unknown gelu variant {self.gelu!r}")
        if not (isinstance(self.layernorm_epsilon, float) and 0 < self.layernorm_epsilon < 1):
            raise ValidationError("layernorm_epsilon must be in (0, 1)")


@dataclass(frozen=True)
class TokenSequence:
    """Patch tokens at a given layer; CLS is carried separately."""

    tokens: np.ndarray  # (N, d) float32
    cls: np.ndarray  # (d,) float32
    layer_index: int


@dataclass(frozen=True)
class Prediction:
    top1: int
    top5: tuple[int, ...]
    probabilities: np.ndarray
    logits: np.ndarray


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Tensor name -> shape map implied by the config."""
    d, m, c = config.embed_dim, config.mlp_hidden_dim, config.num_classes
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, CHANNELS * config.patch_size**2),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (config.num_tokens + 1, d),
        "final_ln.weight": (d,),
        "final_ln.bias": (d,),
        "head.weight": (c, d),
        "head.bias": (c,),
    }
    for i in range(config.num_layers):
        p = f"blocks.{i}."
        shapes[p + "ln1.weight"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for proj in ("q", "k", "v", "out"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "ln2.weight"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "mlp.fc1.weight"] = (m, d)
        shapes[p + "mlp.fc1.bias"] = (m,)
        shapes[p + "mlp.fc2.weight"] = (d, m)
        shapes[p + "mlp.fc2.bias"] = (d,)
    return shapes


class ModelWeights:
    """Immutable bundle of config plus shape-validated float32 tensors."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray], manifest: dict | None = None):
        config.validate()
        shapes = expected_shapes(config)
        missing = sorted(set(shapes) - set(tensors))
        if missing:
            raise ValidationError(f"missing tensors: {', '.join(missing)}")
        checked = {}
        for name, shape in shapes.items():
            arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
            if arr.shape != shape:
                raise ValidationError(f"tensor {name}: shape {arr.shape} != expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"tensor {name}: non-finite values")
            arr.flags.writeable = False
            checked[name] = arr
        self.config = config
        self.tensors = checked
        self.manifest = dict(manifest or {})
        self._fingerprint: int | None = None

    def t(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def fingerprint(self) -> int:
        """crc32 over all tensors (name + raw bytes, sorted by name)."""
        if self._fingerprint is None:
            crc = 0
            for name in sorted(self.tensors):
                crc = zlib.crc32(name.encode(), crc)
                crc = zlib.crc32(self.tensors[name].tobytes(), crc)
            self._fingerprint = crc & 0xFFFFFFFF
        return self._fingerprint


def config_from_metadata(meta: dict) -> ModelConfig:
    try:
        cfg = meta["config"]
        return ModelConfig(
            image_size=int(cfg["image_size"]),
            patch_size=int(cfg["patch_size"]),
            embed_dim=int(cfg["embed_dim"]),
            num_heads=int(cfg["num_heads"]),
            num_layers=int(cfg["num_layers"]),
            mlp_hidden_dim=int(cfg["mlp_hidden_dim"]),
            num_classes=int(cfg["num_classes"]),
            layernorm_epsilon=float(cfg.get("layernorm_epsilon", 1e-6)),
            gelu=str(cfg.get("gelu", "erf")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"weight container metadata lacks a valid config: {exc}") from exc


def config_to_metadata(config: ModelConfig) -> dict:
    return {
        "image_size": config.image_size,
        "patch_size": config.patch_size,
        "embed_dim": config.embed_dim,
        "num_heads": config.num_heads,
        "num_layers": config.num_layers,
        "mlp_hidden_dim": config.mlp_hidden_dim,
        "num_classes": config.num_classes,
        "layernorm_epsilon": config.layernorm_epsilon,
        "gelu": config.gelu,
    }


def load_model(path) -> ModelWeights:
    """Load and validate a weight container.

    Shape validation is against the embedded config; when the manifest
    carries per-tensor checksums they are verified too.
    """
    tensors, meta = strv.read(path)
    config = config_from_metadata(meta)
    model = ModelWeights(config, tensors, manifest=meta.get("manifest"))
    checksums = model.manifest.get("checksums") or {}
    for name, expect in checksums.items():
        if name not in model.tensors:
            raise ValidationError(f"manifest checksum for unknown tensor {name}")
        actual = strv.tensor_crc32(model.tensors[name])
        if actual != int(expect):
            raise ValidationError(f"tensor {name}: checksum {actual} != manifest {int(expect)}")
    return model


def save_model(path, model: ModelWeights, extra_metadata: dict | None = None) -> None:
    meta = dict(extra_metadata or {})
    meta["config"] = config_to_metadata(model.config)
    if model.manifest:
        meta["manifest"] = model.manifest
    strv.write(path, dict(model.tensors), meta)


def random_weights(config: ModelConfig, seed: int, scale: float = 0.02) -> ModelWeights:
    """Gaussian-initialized weights; LN gains 1, biases 0. Test/demo helper."""
    stream = Stream(derive_key(seed, 0xC0FE))
    tensors = {}
    for name, shape in expected_shapes(config).items():
        n = int(np.prod(shape))
        if name.endswith("ln1.weight") or name.endswith("ln2.weight") or name == "final_ln.weight":
            arr = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            arr = (stream.normals(n, std=scale)).astype(np.float32).reshape(shape)
        tensors[name] = arr
    return ModelWeights(config, tensors)


def check_image(image, config: ModelConfig) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    if img.shape != (CHANNELS, config.image_size, config.image_size):
        raise ValidationError(
            f"image shape {img.shape} != expected {(CHANNELS, config.image_size, config.image_size)}"
        )
    if not np.all(np.isfinite(img)):
        raise ValidationError("image has non-finite pixels")
    if img.min() < -1e-6 or img.max() > 1.0 + 1e-6:
        raise ValidationError("image pixels must lie in [0, 1]")
    return np.clip(img, 0.0, 1.0)


def tokenize(image, model: ModelWeights) -> TokenSequence:
    """Embed non-overlapping patches and add positional encodings.

    Patch t (row-major over the grid) is image[:, r:r+P, c:c+P] flattened in
    C order, projected by patch_embed, then shifted by pos_embed[t+1]. The
    CLS token (plus pos_embed[0]) is kept separate at layer 0.
    """
    cfg = model.config
    img = check_image(image, cfg)
    p, g = cfg.patch_size, cfg.grid
    # (g, g, C*P*P) patch matrix without copying per patch
    patches = (
        img.reshape(CHANNELS, g, p, g, p)
        .transpose(1, 3, 0, 2, 4)
        .reshape(g * g, CHANNELS * p * p)
    )
    w, b = model.t("patch_embed.weight"), model.t("patch_embed.bias")
    tokens = patches @ w.T + b
    tokens += model.t("pos_embed")[1:]
    cls = model.t("cls_token") + model.t("pos_embed")[0]
    return TokenSequence(tokens=tokens.astype(np.float32), cls=cls.astype(np.float32), layer_index=0)


def _layernorm(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = np.square(x64 - mean).mean(axis=-1, keepdims=True)
    normed = (x64 - mean) / np.sqrt(var + eps)
    return (normed.astype(np.float32) * weight) + bias


def _gelu(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "erf":
        return (0.5 * x * (1.0 + erf(x / np.float32(math.sqrt(2.0))))).astype(np.float32)
    # tanh approximation
    c = np.float32(math.sqrt(2.0 / math.pi))
    return (0.5 * x * (1.0 + np.tanh(c * (x + np.float32(0.044715) * x**3)))).astype(np.float32)


def _softmax_f32_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _attention(x: np.ndarray, model: ModelWeights, block: int, attn_sink: list | None) -> np.ndarray:
    cfg = model.config
    n, d = x.shape
    h = cfg.num_heads
    hd = d // h
    pre = f"blocks.{block}.attn."
    q = x @ model.t(pre + "q.weight").T + model.t(pre + "q.bias")
    k = x @ model.t(pre + "k.weight").T + model.t(pre + "k.bias")
    v = x @ model.t(pre + "v.weight").T + model.t(pre + "v.bias")
    q = q.reshape(n, h, hd).transpose(1, 0, 2)
    k = k.reshape(n, h, hd).transpose(1, 0, 2)
    v = v.reshape(n, h, hd).transpose(1, 0, 2)
    scores = (q @ k.transpose(0, 2, 1)) / np.float32(math.sqrt(hd))
    attn = _softmax_f32_rows(scores)
    if attn_sink is not None:
        attn_sink.append(attn.copy())
    mixed = (attn @ v).transpose(1, 0, 2).reshape(n, d)
    return mixed @ model.t(pre + "out.weight").T + model.t(pre + "out.bias")


def _encoder_block(x: np.ndarray, model: ModelWeights, block: int, attn_sink: list | None) -> np.ndarray:
    cfg = model.config
    eps = cfg.layernorm_epsilon
    pre = f"blocks.{block}."
    # overflow surfaces as the explicit NumericError below, not a warning
    with np.errstate(over="ignore", invalid="ignore"):
        normed = _layernorm(x, model.t(pre + "ln1.weight"), model.t(pre + "ln1.bias"), eps)
        x = x + _attention(normed, model, block, attn_sink)
        normed = _layernorm(x, model.t(pre + "ln2.weight"), model.t(pre + "ln2.bias"), eps)
        hidden = _gelu(normed @ model.t(pre + "mlp.fc1.weight").T + model.t(pre + "mlp.fc1.bias"), cfg.gelu)
        x = x + (hidden @ model.t(pre + "mlp.fc2.weight").T + model.t(pre + "mlp.fc2.bias"))
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite activation leaving block {block}")
    return x.astype(np.float32)


def advance_tokens(seq: TokenSequence, model: ModelWeights, to_layer: int) -> TokenSequence:
    """Run encoder blocks until the sequence sits at layer `to_layer`.

    Layer l means "after l blocks"; layer 0 is the tokenize output. CLS
    rides along at row 0 and is re-split afterwards.
    """
    cfg = model.config
    if not (0 <= to_layer <= cfg.num_layers):
        raise ValidationError(f"layer must be in [0, {cfg.num_layers}], got {to_layer}")
    if seq.layer_index > to_layer:
        raise ValidationError("sequence is already past the requested layer")
    if seq.layer_index == to_layer:
        return seq
    x = np.vstack([seq.cls[np.newaxis, :], seq.tokens]).astype(np.float32)
    for block in range(seq.layer_index, to_layer):
        x = _encoder_block(x, model, block, None)
    return TokenSequence(tokens=x[1:], cls=x[0], layer_index=to_layer)


def forward_from_tokens(seq: TokenSequence, model: ModelWeights, collect_attention: bool = False):
    """Finish the forward pass from the sequence's layer: remaining encoder
    blocks, final LayerNorm, and the head applied to the CLS row.

    Returns logits, or (logits, attention maps per remaining block) when
    collect_attention is set.
    """
    cfg = model.config
    if seq.tokens.shape != (cfg.num_tokens, cfg.embed_dim):
        raise ValidationError(
            f"token matrix shape {seq.tokens.shape} != expected {(cfg.num_tokens, cfg.embed_dim)}"
        )
    attn_sink: list | None = [] if collect_attention else None
    x = np.vstack([seq.cls[np.newaxis, :], seq.tokens]).astype(np.float32)
    for block in range(seq.layer_index, cfg.num_layers):
        x = _encoder_block(x, model, block, attn_sink)
    cls = _layernorm(x[0:1], model.t("final_ln.weight"), model.t("final_ln.bias"), cfg.layernorm_epsilon)
    logits = (cls @ model.t("head.weight").T + model.t("head.bias"))[0]
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits leaving the head")
    if collect_attention:
        return logits, attn_sink
    return logits


def prediction_from_logits(logits: np.ndarray, num_classes: int) -> Prediction:
    """Deterministic top-1/top-k with ties broken toward the lower index."""
    logits64 = np.asarray(logits, dtype=np.float64)
    shifted = logits64 - logits64.max()
    e = np.exp(shifted)
    probs = e / e.sum()
    order = np.argsort(-logits64, kind="stable")
    k = min(5, num_classes)
    return Prediction(
        top1=int(order[0]),
        top5=tuple(int(i) for i in order[:k]),
        probabilities=probs,
        logits=logits64,
    )


def predict(image, model: ModelWeights) -> Prediction:
    """Undefended classification of one image."""
    logits = forward_from_tokens(tokenize(image, model), model)
    return prediction_from_logits(logits, model.config.num_classes)


def reference_input(config: ModelConfig, input_seed: int) -> np.ndarray:
    """Deterministic pseudo-random image tied to a manifest input seed.

    Pixels are uniform in [0, 1], filled in C-order from the splitmix64
    stream keyed by (input_seed, PURPOSE_INPUT). Exporters generate the
    same image when recording reference logits.
    """
    stream = Stream(derive_key(int(input_seed), PURPOSE_INPUT))
    n = CHANNELS * config.image_size * config.image_size
    return (
        stream.uniforms(n)
        .astype(np.float32)
        .reshape(CHANNELS, config.image_size, config.image_size)
    )


def manifest_reference_gap(model: ModelWeights) -> float:
    """Max |runtime logits - manifest reference logits| on the seed input.

    Raises ValidationError when the manifest records no reference.
    """
    ref = model.manifest.get("reference")
    if not ref:
        raise ValidationError("weight container manifest has no reference record")
    image = reference_input(model.config, int(ref["input_seed"]))
    logits = forward_from_tokens(tokenize(image, model), model)
    recorded = np.asarray(ref["logits"], dtype=np.float64)
    if recorded.shape != logits.shape:
        raise ValidationError("manifest reference logits length mismatch")
    return float(np.max(np.abs(logits - recorded)))
