"""Low-rank adapter algebra: LoRA, DoRA, and CoLA.

For a frozen base matrix W0 (d x k) the adapted forward passes are

    lora:  x (W0 + (a/r) B A)                         B: d x r, A: r x k
    dora:  x (m * (W0 + (a/r) B A) / colnorm(...))    m: k-vector of column magnitudes
    cola:  x (W0 + (a/r) sum_j B_j A_j)               a chain of stages, trained one at a time

A factors start Gaussian, B factors start at zero, so a fresh adapter leaves
the base model's behavior unchanged. A bundle carries the per-target factors
plus the task's dedicated classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .autodiff import Tensor
from .errors import NumericError, StateError, ValidationError
from .numerics import column_norms
from .seeding import rng_from

METHODS = ("lora", "dora", "cola", "full")
PEFT_METHODS = ("lora", "dora", "cola")
ADAPTER_INIT_STD = 0.02
DORA_NORM_GUARD = 1e-12


@dataclass
class AdapterBundle:
    """Per-task adaptation payload stored in the library.

    `payload` keys are "<target>:B", "<target>:A", "<target>:m" and, for cola,
    "<target>:s<j>:B" / "<target>:s<j>:A" per stage j (1-based). For method
    "full" the payload holds "delta:<tensor>" weight differences instead.
    """

    task_id: str
    method: str
    rank: int
    alpha: float
    targets: list[str]
    payload: dict[str, np.ndarray]
    classifier: dict[str, np.ndarray]
    chain_length: int = 1
    active_stage: int = 1
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown adapter method {self.method!r}")
        if self.method in PEFT_METHODS and self.rank < 1:
            raise ValidationError("rank must be >= 1")
        if self.method == "cola":
            if not 1 <= self.active_stage <= self.chain_length:
                raise ValidationError("active stage outside the chain")

    @property
    def classes(self) -> int:
        return enc.classifier_classes(self.classifier)

    def initialized_stages(self, target: str) -> list[int]:
        out = []
        for j in range(1, self.chain_length + 1):
            if f"{target}:s{j}:B" in self.payload:
                out.append(j)
        return out

    def payload_param_count(self) -> int:
        return sum(a.size for a in self.payload.values())

    def classifier_param_count(self) -> int:
        return sum(a.size for a in self.classifier.values())


def scale_factor(alpha: float, rank: int) -> float:
    return float(alpha) / float(rank)


def _init_factors(d: int, k: int, rank: int, rng) -> tuple[np.ndarray, np.ndarray]:
    b = np.zeros((d, rank))
    a = rng.normal(0.0, ADAPTER_INIT_STD, size=(rank, k))
    return b, a


def adapter_init(
    method: str,
    targets: list[str],
    w0: enc.EncoderWeights,
    rank: int = 8,
    alpha: float = 8.0,
    seed: int = 0,
    classes: int | None = None,
    chain_length: int = 3,
    task_id: str = "task",
) -> AdapterBundle:
    """Fresh adapter for the given targets: B zero, A Gaussian, and for dora
    the magnitude vector set to the base weight's column norms."""
    if method not in PEFT_METHODS:
        raise ValidationError(f"adapter_init supports {PEFT_METHODS}, got {method!r}")
    if not targets:
        raise ValidationError("no adaptation targets given")
    for t in targets:
        if t not in w0.tensors:
            raise ValidationError(f"unknown adaptation target {t!r}")
        if w0.tensors[t].ndim != 2:
            raise ValidationError(f"target {t!r} is not a weight matrix")

    payload: dict[str, np.ndarray] = {}
    for t in targets:
        d, k = w0.tensors[t].shape
        if method == "cola":
            rng = rng_from(seed, "cola-stage", 1, t)
            b, a = _init_factors(d, k, rank, rng)
            payload[f"{t}:s1:B"] = b
            payload[f"{t}:s1:A"] = a
        else:
            rng = rng_from(seed, "adapter", t)
            b, a = _init_factors(d, k, rank, rng)
            payload[f"{t}:B"] = b
            payload[f"{t}:A"] = a
            if method == "dora":
                payload[f"{t}:m"] = column_norms(w0.tensors[t])

    classifier = (
        enc.init_classifier(w0.config.hidden, classes, seed=seed) if classes is not None else {}
    )
    return AdapterBundle(
        task_id=task_id,
        method=method,
        rank=rank,
        alpha=float(alpha),
        targets=list(targets),
        payload=payload,
        classifier=classifier,
        chain_length=chain_length if method == "cola" else 1,
        active_stage=1,
        seed=seed,
    )


def full_delta_bundle(
    task_id: str,
    w0: enc.EncoderWeights,
    final: enc.EncoderWeights,
    classifier: dict[str, np.ndarray],
    seed: int = 0,
) -> AdapterBundle:
    """Bundle a full fine-tune as weight differences against the base model."""
    payload = {
        f"delta:{name}": final.tensors[name] - w0.tensors[name]
        for name in w0.tensors
        if name not in enc.RECON_TENSORS
    }
    return AdapterBundle(
        task_id=task_id,
        method="full",
        rank=0,
        alpha=0.0,
        targets=sorted(n for n in w0.tensors if n not in enc.RECON_TENSORS),
        payload=payload,
        classifier=classifier,
        seed=seed,
    )


def effective_weight(w0_matrix: np.ndarray, bundle: AdapterBundle, target: str) -> np.ndarray:
    """Materialize the adapted matrix for one target."""
    w0_matrix = np.asarray(w0_matrix, dtype=np.float64)
    if bundle.method == "full":
        return w0_matrix + bundle.payload[f"delta:{target}"]
    s = scale_factor(bundle.alpha, bundle.rank)
    if bundle.method == "cola":
        acc = w0_matrix
        for j in bundle.initialized_stages(target):
            acc = acc + s * (bundle.payload[f"{target}:s{j}:B"] @ bundle.payload[f"{target}:s{j}:A"])
        return acc
    base = w0_matrix + s * (bundle.payload[f"{target}:B"] @ bundle.payload[f"{target}:A"])
    if bundle.method == "lora":
        return base
    norms = column_norms(base)
    if (norms < DORA_NORM_GUARD).any():
        raise NumericError(f"dora column norm underflow on target {target!r}")
    return base * (bundle.payload[f"{target}:m"] / norms)[None, :]


def trainable_params(bundle: AdapterBundle) -> list[str]:
    """Parameter names receiving gradients; the base weights never appear.

    Classifier parameters are reported with a "clf:" prefix to keep them
    distinct from payload keys.
    """
    names: list[str] = []
    if bundle.method == "cola":
        j = bundle.active_stage
        for t in bundle.targets:
            names += [f"{t}:s{j}:B", f"{t}:s{j}:A"]
    elif bundle.method == "full":
        names += sorted(bundle.payload)
    else:
        for t in bundle.targets:
            names += [f"{t}:B", f"{t}:A"]
            if bundle.method == "dora":
                names.append(f"{t}:m")
    names += [f"clf:{k}" for k in sorted(bundle.classifier)]
    return names


def cola_advance_stage(bundle: AdapterBundle) -> AdapterBundle:
    """Freeze the active chain stage and initialize the next one (B zero, so
    the effective weight is unchanged at the transition)."""
    if bundle.method != "cola":
        raise StateError("stage advancement only applies to cola bundles")
    if bundle.active_stage >= bundle.chain_length:
        raise StateError(f"chain already at its final stage {bundle.chain_length}")
    nxt = bundle.active_stage + 1
    for t in bundle.targets:
        d, k = bundle.payload[f"{t}:s1:B"].shape[0], bundle.payload[f"{t}:s1:A"].shape[1]
        rng = rng_from(bundle.seed, "cola-stage", nxt, t)
        b, a = _init_factors(d, k, bundle.rank, rng)
        bundle.payload[f"{t}:s{nxt}:B"] = b
        bundle.payload[f"{t}:s{nxt}:A"] = a
    bundle.active_stage = nxt
    return bundle


# -- forward composition ---------------------------------------------------------


def _compose_target(
    w0_t: Tensor, bundle: AdapterBundle, target: str, params: Mapping[str, Tensor]
):
    """Callable computing x @ W_eff without materializing W_eff (except for
    the dora column norms, which need the summed matrix)."""
    if bundle.method == "full":
        delta = params[f"delta:{target}"]

        def run_full(x: Tensor) -> Tensor:
            return ad.add(ad.matmul(x, w0_t), ad.matmul(x, delta))

        return run_full

    s = scale_factor(bundle.alpha, bundle.rank)
    if bundle.method == "cola":
        stages = [
            (params[f"{target}:s{j}:B"], params[f"{target}:s{j}:A"])
            for j in bundle.initialized_stages(target)
        ]

        def run_cola(x: Tensor) -> Tensor:
            out = ad.matmul(x, w0_t)
            for b, a in stages:
                out = ad.add(out, ad.mul(ad.matmul(ad.matmul(x, b), a), s))
            return out

        return run_cola

    b, a = params[f"{target}:B"], params[f"{target}:A"]
    if bundle.method == "lora":

        def run_lora(x: Tensor) -> Tensor:
            return ad.add(ad.matmul(x, w0_t), ad.mul(ad.matmul(ad.matmul(x, b), a), s))

        return run_lora

    m = params[f"{target}:m"]

    def run_dora(x: Tensor) -> Tensor:
        base = ad.add(w0_t, ad.mul(ad.matmul(b, a), s))
        norms = ad.sqrt(ad.tensor_sum(ad.square(base), axis=0))
        if (norms.data < DORA_NORM_GUARD).any():
            raise NumericError(f"dora column norm underflow on target {target!r}")
        factor = ad.div(m, norms)
        return ad.mul(ad.add(ad.matmul(x, w0_t), ad.mul(ad.matmul(ad.matmul(x, b), a), s)), factor)

    return run_dora


def adapted_weight_map(
    wt: Mapping[str, enc.WeightEntry],
    weights: enc.EncoderWeights,
    bundle: AdapterBundle,
    merged: bool = False,
    params: Mapping[str, Tensor] | None = None,
) -> dict[str, enc.WeightEntry]:
    """Weight map for the encoder forward with the bundle applied.

    `params` supplies payload tensors when training (so gradients flow to
    them); otherwise constants are built from the bundle. `merged=True`
    materializes every effective matrix as a plain numpy weight instead of
    composing factors inside the forward pass.
    """
    out = dict(wt)
    targets = bundle.targets if bundle.method != "full" else [
        t for t in bundle.targets if weights.tensors[t].ndim == 2
    ]
    if merged:
        if params is not None:
            raise ValidationError("merged forward does not support trainable payload tensors")
        for t in targets:
            out[t] = Tensor(effective_weight(weights.tensors[t], bundle, t))
        if bundle.method == "full":
            for name in bundle.targets:
                if weights.tensors[name].ndim == 1:
                    out[name] = Tensor(weights.tensors[name] + bundle.payload[f"delta:{name}"])
        return out
    if params is None:
        params = {k: Tensor(v) for k, v in bundle.payload.items()}
    for t in targets:
        out[t] = _compose_target(out[t], bundle, t, params)
    if bundle.method == "full":
        for name in bundle.targets:
            if weights.tensors[name].ndim == 1:
                out[name] = ad.add(out[name], params[f"delta:{name}"])
    return out
