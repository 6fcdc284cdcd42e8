"""Encoder-only transformer for fixed-length sensor sequences.

Two post-norm self-attention layers at hidden size 128 with two heads, no
tokenizer or input projection (inputs are already 128-dim feature vectors),
fixed sinusoidal position encodings, a per-token affine reconstruction head
for pre-training, and a detachable MLP classifier head per downstream task.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, StateError, ValidationError
from .io import MAGIC_CHECKPOINT, load_container, save_container
from .seeding import rng_from

CLASSIFIER_HIDDENS = (512, 128)


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    hidden: int = 128
    heads: int = 2
    ffn: int = 512
    seq_len: int = 15

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValidationError("hidden size must be divisible by the head count")


RECON_TENSORS = ("recon.w", "recon.b")


def tensor_shapes(config: EncoderConfig, with_recon: bool = True) -> dict[str, tuple[int, ...]]:
    """Named parameter tensors and their shapes, in a fixed documented order."""
    h, f = config.hidden, config.ffn
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(config.layers):
        for role in ("wq", "wk", "wv", "wo"):
            shapes[f"layer{i}.attn.{role}"] = (h, h)
            shapes[f"layer{i}.attn.b{role[1]}"] = (h,)
        shapes[f"layer{i}.ln1.gain"] = (h,)
        shapes[f"layer{i}.ln1.bias"] = (h,)
        shapes[f"layer{i}.ffn.w1"] = (h, f)
        shapes[f"layer{i}.ffn.b1"] = (f,)
        shapes[f"layer{i}.ffn.w2"] = (f, h)
        shapes[f"layer{i}.ffn.b2"] = (h,)
        shapes[f"layer{i}.ln2.gain"] = (h,)
        shapes[f"layer{i}.ln2.bias"] = (h,)
    if with_recon:
        shapes["recon.w"] = (h, h)
        shapes["recon.b"] = (h,)
    return shapes


def attention_targets(config: EncoderConfig) -> list[str]:
    """The weight matrices eligible for low-rank adaptation (all attention
    projections in every layer)."""
    return [f"layer{i}.attn.{r}" for i in range(config.layers) for r in ("wq", "wk", "wv", "wo")]


def sinusoidal_positions(seq_len: int, hidden: int) -> np.ndarray:
    """Fixed sine/cosine position table; a constant, not a trained parameter."""
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    idx = np.arange(hidden, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / hidden)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table


@dataclass
class EncoderWeights:
    """Named parameter arrays of the foundation encoder."""

    config: EncoderConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = tensor_shapes(self.config, with_recon=self.has_recon_head)
        for name, shape in expected.items():
            arr = self.tensors.get(name)
            if arr is None or arr.shape != shape:
                got = None if arr is None else arr.shape
                raise ValidationError(f"encoder tensor {name!r}: expected shape {shape}, got {got}")
            if not np.isfinite(arr).all():
                raise ValidationError(f"encoder tensor {name!r} contains non-finite values")

    @property
    def has_recon_head(self) -> bool:
        return "recon.w" in self.tensors

    def param_count(self, include_recon: bool = False) -> int:
        return sum(
            a.size
            for n, a in self.tensors.items()
            if include_recon or n not in RECON_TENSORS
        )

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def without_recon(self) -> "EncoderWeights":
        return EncoderWeights(
            self.config, {k: v.copy() for k, v in self.tensors.items() if k not in RECON_TENSORS}
        )


def init_encoder_weights(
    config: EncoderConfig,
    seed: int = 0,
    scheme: str = "scaled_normal",
    init_std: float = 0.02,
    with_recon: bool = True,
) -> EncoderWeights:
    """Seeded init: matrices from the chosen scheme, zero biases, unit layer
    norm gains. `scheme` is "scaled_normal" (N(0, 0.02^2)) or "xavier"."""
    rng = rng_from(seed, "encoder-init")
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(config, with_recon=with_recon).items():
        if name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        elif scheme == "xavier":
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
        else:
            tensors[name] = rng.normal(0.0, init_std, size=shape)
    return EncoderWeights(config=config, tensors=tensors)


def encoder_param_count(config: EncoderConfig, include_recon: bool = False) -> int:
    shapes = tensor_shapes(config, with_recon=include_recon)
    return sum(int(np.prod(s)) for s in shapes.values())


# -- forward pass --------------------------------------------------------------

WeightEntry = Tensor | Callable[[Tensor], Tensor]


def _linear(entry: WeightEntry, x: Tensor) -> Tensor:
    if callable(entry):
        return entry(x)
    return ad.matmul(x, entry)


def embed(config: EncoderConfig, x: Tensor) -> Tensor:
    """Add the fixed position table to the raw feature tokens."""
    return ad.add(x, Tensor(sinusoidal_positions(config.seq_len, config.hidden)))


def forward_tokens(wt: Mapping[str, WeightEntry], config: EncoderConfig, x: Tensor) -> Tensor:
    """Run the layer stack on embedded tokens of shape (n, seq_len, hidden).

    `wt` maps tensor names to either plain weight Tensors or callables
    implementing the (possibly adapter-composed) linear map for that target.
    """
    n, t, h = x.shape
    heads = config.heads
    hd = h // heads
    scale = 1.0 / math.sqrt(hd)
    for i in range(config.layers):
        p = f"layer{i}"
        q = ad.add(_linear(wt[f"{p}.attn.wq"], x), wt[f"{p}.attn.bq"])
        k = ad.add(_linear(wt[f"{p}.attn.wk"], x), wt[f"{p}.attn.bk"])
        v = ad.add(_linear(wt[f"{p}.attn.wv"], x), wt[f"{p}.attn.bv"])
        q = ad.swapaxes(ad.reshape(q, (n, t, heads, hd)), 1, 2)
        k = ad.swapaxes(ad.reshape(k, (n, t, heads, hd)), 1, 2)
        v = ad.swapaxes(ad.reshape(v, (n, t, heads, hd)), 1, 2)
        scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), scale)
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.swapaxes(ad.matmul(attn, v), 1, 2), (n, t, h))
        attn_out = ad.add(_linear(wt[f"{p}.attn.wo"], ctx), wt[f"{p}.attn.bo"])
        x = ad.layer_norm(ad.add(x, attn_out), wt[f"{p}.ln1.gain"], wt[f"{p}.ln1.bias"])
        inner = ad.relu(ad.add(_linear(wt[f"{p}.ffn.w1"], x), wt[f"{p}.ffn.b1"]))
        ffn_out = ad.add(_linear(wt[f"{p}.ffn.w2"], inner), wt[f"{p}.ffn.b2"])
        x = ad.layer_norm(ad.add(x, ffn_out), wt[f"{p}.ln2.gain"], wt[f"{p}.ln2.bias"])
    return x


def weight_tensor_map(weights: EncoderWeights) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in weights.tensors.items()}


def _as_batch(tokens: np.ndarray, hidden: int) -> tuple[np.ndarray, bool]:
    tokens = np.asarray(tokens, dtype=np.float64)
    single = tokens.ndim == 2
    if single:
        tokens = tokens[None]
    if tokens.ndim != 3 or tokens.shape[2] != hidden:
        raise DimensionError(
            f"expected tokens with feature dim {hidden}, got shape {tokens.shape}"
        )
    return tokens, single


def encoder_forward(weights: EncoderWeights, tokens: np.ndarray, bundle=None, merged: bool = False) -> np.ndarray:
    """Token embeddings for one sequence (15, H) or a batch (n, 15, H).

    With `bundle`, every adapted projection is replaced by its effective
    weight; `merged=True` materializes the effective matrices up front instead
    of composing the low-rank factors on the fly.
    """
    batch, single = _as_batch(tokens, weights.config.hidden)
    wt: Mapping[str, WeightEntry] = weight_tensor_map(weights)
    if bundle is not None:
        from . import peft

        wt = peft.adapted_weight_map(wt, weights, bundle, merged=merged)
    out = forward_tokens(wt, weights.config, embed(weights.config, Tensor(batch))).data
    return out[0] if single else out


def pool(embeddings: np.ndarray) -> np.ndarray:
    """Mean over the 15 token embeddings."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    return embeddings.mean(axis=-2)


def pool_t(embeddings: Tensor) -> Tensor:
    return ad.tensor_mean(embeddings, axis=-2)


def reconstruct(weights: EncoderWeights, embeddings: np.ndarray) -> np.ndarray:
    """Per-token affine map through the reconstruction head."""
    if not weights.has_recon_head:
        raise StateError("weights carry no reconstruction head")
    return np.asarray(embeddings, dtype=np.float64) @ weights.tensors["recon.w"] + weights.tensors["recon.b"]


# -- per-task classifier --------------------------------------------------------


def classifier_shapes(
    hidden: int, classes: int, hiddens: tuple[int, int] = CLASSIFIER_HIDDENS
) -> dict[str, tuple[int, ...]]:
    h1, h2 = hiddens
    return {
        "w1": (hidden, h1),
        "b1": (h1,),
        "w2": (h1, h2),
        "b2": (h2,),
        "w3": (h2, classes),
        "b3": (classes,),
    }


def init_classifier(
    hidden: int,
    classes: int,
    seed: int = 0,
    hiddens: tuple[int, int] = CLASSIFIER_HIDDENS,
    scheme: str = "scaled_normal",
    init_std: float = 0.02,
) -> dict[str, np.ndarray]:
    if classes < 2:
        raise ValidationError("a classifier needs at least 2 classes")
    rng = rng_from(seed, "classifier-init")
    tensors: dict[str, np.ndarray] = {}
    for name, shape in classifier_shapes(hidden, classes, hiddens).items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape)
        elif scheme == "xavier":
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
        else:
            tensors[name] = rng.normal(0.0, init_std, size=shape)
    return tensors


def classifier_param_count(
    hidden: int, classes: int, hiddens: tuple[int, int] = CLASSIFIER_HIDDENS
) -> int:
    return sum(int(np.prod(s)) for s in classifier_shapes(hidden, classes, hiddens).values())


def classifier_logits_t(ct: Mapping[str, Tensor], pooled: Tensor) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(pooled, ct["w1"]), ct["b1"]))
    h = ad.relu(ad.add(ad.matmul(h, ct["w2"]), ct["b2"]))
    return ad.add(ad.matmul(h, ct["w3"]), ct["b3"])


def classify(classifier: Mapping[str, np.ndarray], pooled: np.ndarray) -> np.ndarray:
    """Class probabilities for pooled embeddings (vector or batch)."""
    pooled = np.asarray(pooled, dtype=np.float64)
    single = pooled.ndim == 1
    if single:
        pooled = pooled[None]
    ct = {k: Tensor(v) for k, v in classifier.items()}
    probs = ad.softmax(classifier_logits_t(ct, Tensor(pooled)), axis=-1).data
    return probs[0] if single else probs


def classifier_classes(classifier: Mapping[str, np.ndarray]) -> int:
    return classifier["b3"].shape[0]


# -- checkpoints ----------------------------------------------------------------


def save_weights(path, weights: EncoderWeights) -> None:
    meta = {"config": asdict(weights.config), "kind": "encoder-weights"}
    save_container(path, MAGIC_CHECKPOINT, meta, weights.tensors)


def load_weights(path) -> EncoderWeights:
    meta, tensors = load_container(path, MAGIC_CHECKPOINT)
    config = EncoderConfig(**meta["config"])
    return EncoderWeights(config=config, tensors={k: v.astype(np.float64) for k, v in tensors.items()})
