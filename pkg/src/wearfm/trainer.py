"""Training loops and evaluation.

Pre-training minimizes MSE over masked positions of healthy-wearer sequences;
fine-tuning trains cross-entropy on a task's classifier with the base weights
frozen (lora/dora/cola), as weight deltas (full), or from a fresh Xavier init
(scratch). All loops are deterministic given (seed, config, dataset).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import peft
from .autodiff import Tensor
from .datapipe import SensorSequence, SplitDataset, stack_sequences
from .encoder import EncoderConfig, EncoderWeights
from .errors import NumericError, ValidationError
from .numerics import AdamState, adam_update
from .seeding import as_rng, rng_from

FINETUNE_METHODS = ("full", "lora", "dora", "cola", "scratch")


@dataclass
class TrainConfig:
    lr: float = 0.005
    batch: int = 128
    pretrain_epochs: int = 1000
    stop_loss: float = 0.001
    finetune_epochs: int = 300
    seed: int = 0
    fraction: float = 1.0
    mask_windows: int = 5
    mask_fraction: float = 0.15
    loss_scope: str = "masked"  # "masked": MSE over masked cells only; "full": whole sequence

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValidationError("data fraction must lie in (0, 1]")
        if self.loss_scope not in ("masked", "full"):
            raise ValidationError(f"unknown loss scope {self.loss_scope!r}")
        if min(self.lr, self.batch, self.pretrain_epochs, self.finetune_epochs) <= 0:
            raise ValidationError("lr, batch and epoch counts must be positive")


@dataclass
class MaskSpec:
    """Which cells of a sequence were masked and what replaced them."""

    windows: np.ndarray  # (mask_windows,) token indices
    features: np.ndarray  # (mask_windows, per_window) feature indices
    values: np.ndarray  # (mask_windows, per_window) replacement draws

    @property
    def masked_count(self) -> int:
        return self.features.size


def mdm_mask(tokens: np.ndarray, seed_or_rng, windows: int = 5, fraction: float = 0.15):
    """Mask a sequence: `windows` distinct tokens, floor(fraction * D) feature
    cells each (at least one), replaced by standard normal draws."""
    tokens = np.asarray(tokens, dtype=np.float64)
    t, d = tokens.shape
    rng = as_rng(seed_or_rng)
    per_window = max(1, int(fraction * d))
    win = rng.choice(t, size=windows, replace=False)
    feats = np.stack([rng.choice(d, size=per_window, replace=False) for _ in range(windows)])
    vals = rng.standard_normal((windows, per_window))
    masked = tokens.copy()
    masked[win[:, None], feats] = vals
    return masked, MaskSpec(windows=win, features=feats, values=vals)


def mask_batch(x: np.ndarray, rng, windows: int = 5, fraction: float = 0.15):
    masked = np.empty_like(x)
    mask = np.zeros(x.shape, dtype=bool)
    for i in range(x.shape[0]):
        masked[i], spec = mdm_mask(x[i], rng, windows=windows, fraction=fraction)
        mask[i][spec.windows[:, None], spec.features] = True
    return masked, mask


def make_mdm_loss(config: EncoderConfig, x_masked: np.ndarray, target: np.ndarray, mask: np.ndarray, scope: str = "masked"):
    """Loss-and-gradient closure over the full encoder parameter dict."""
    if scope == "masked":
        weight = mask.astype(np.float64)
    else:
        weight = np.ones_like(target)
    denom = float(weight.sum())

    def loss_and_grad(params: dict[str, np.ndarray]):
        wt = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        emb = enc.forward_tokens(wt, config, enc.embed(config, Tensor(x_masked)))
        pred = ad.add(ad.matmul(emb, wt["recon.w"]), wt["recon.b"])
        diff = ad.mul(ad.add(pred, ad.mul(Tensor(target), -1.0)), Tensor(weight))
        loss = ad.mul(ad.tensor_sum(ad.square(diff)), 1.0 / denom)
        loss.backward()
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in wt.items()}
        return loss.item(), grads

    return loss_and_grad


@dataclass
class PretrainResult:
    weights: EncoderWeights
    losses: list[float]


def _log_line(log, epoch, split, loss=None, accuracy=None):
    if log is None:
        return
    loss_s = "" if loss is None else f"{loss:.8f}"
    acc_s = "" if accuracy is None else f"{accuracy:.6f}"
    log.write(f"{epoch}\t{split}\t{loss_s}\t{acc_s}\n")


def pretrain(
    corpus: list[SensorSequence],
    config: TrainConfig | None = None,
    encoder_config: EncoderConfig | None = None,
    log=None,
) -> PretrainResult:
    """Masked-data-modeling pre-training on a healthy-wearer corpus.

    Stops when the epoch-mean loss drops below `stop_loss` or after
    `pretrain_epochs`. Returns the full weight set including the
    reconstruction head.
    """
    config = config or TrainConfig()
    encoder_config = encoder_config or EncoderConfig()
    x, _ = stack_sequences(corpus)
    if x.shape[2] != encoder_config.hidden:
        raise ValidationError(
            f"corpus feature dim {x.shape[2]} must equal the hidden size {encoder_config.hidden}"
        )
    n = x.shape[0]
    weights = enc.init_encoder_weights(encoder_config, seed=config.seed, with_recon=True)
    params = {k: v.copy() for k, v in weights.tensors.items()}
    state = AdamState.init(params)
    losses: list[float] = []
    for epoch in range(config.pretrain_epochs):
        order = rng_from(config.seed, "pretrain-shuffle", epoch).permutation(n)
        mask_rng = rng_from(config.seed, "pretrain-mask", epoch)
        total, seen = 0.0, 0
        for lo in range(0, n, config.batch):
            idx = order[lo : lo + config.batch]
            xb = x[idx]
            masked, mask = mask_batch(xb, mask_rng, config.mask_windows, config.mask_fraction)
            loss, grads = make_mdm_loss(encoder_config, masked, xb, mask, config.loss_scope)(params)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite pre-training loss at epoch {epoch}")
            params, state = adam_update(params, grads, state, lr=config.lr)
            total += loss * len(idx)
            seen += len(idx)
        epoch_loss = total / seen
        losses.append(epoch_loss)
        _log_line(log, epoch, "pretrain", epoch_loss, None)
        if epoch_loss < config.stop_loss:
            break
    return PretrainResult(weights=EncoderWeights(encoder_config, params), losses=losses)


def masked_mse(weights: EncoderWeights, corpus: list[SensorSequence], config: TrainConfig | None = None, seed_key: int = 0) -> float:
    """Masked reconstruction MSE of a weight set on a corpus, with seeded masks."""
    config = config or TrainConfig()
    x, _ = stack_sequences(corpus)
    rng = rng_from(config.seed, "mdm-eval", seed_key)
    masked, mask = mask_batch(x, rng, config.mask_windows, config.mask_fraction)
    emb = enc.encoder_forward(weights, masked)
    pred = enc.reconstruct(weights, emb)
    return float((((pred - x) * mask) ** 2).sum() / mask.sum())


# -- fine-tuning -----------------------------------------------------------------


def make_classification_loss(
    config: EncoderConfig,
    x: np.ndarray,
    onehot: np.ndarray,
    method: str,
    w0: EncoderWeights | None = None,
    bundle: peft.AdapterBundle | None = None,
    frozen_payload: dict[str, np.ndarray] | None = None,
):
    """Cross-entropy closure. `params` holds the trainable tensors: payload
    keys and "clf:*" for adapter methods, encoder tensor names and "clf:*"
    for scratch. Base-weight names may also be passed in `params`; they stay
    frozen and report zero gradients."""
    frozen_payload = frozen_payload or {}

    def loss_and_grad(params: dict[str, np.ndarray]):
        tensors: dict[str, Tensor] = {}
        clf_t: dict[str, Tensor] = {}
        payload_t: dict[str, Tensor] = {k: Tensor(v) for k, v in frozen_payload.items()}
        base_override: dict[str, Tensor] = {}
        for k, v in params.items():
            if k.startswith("clf:"):
                clf_t[k[4:]] = tensors[k] = Tensor(v, requires_grad=True)
            elif method == "scratch":
                tensors[k] = Tensor(v, requires_grad=True)
            elif w0 is not None and k in w0.tensors:
                base_override[k] = tensors[k] = Tensor(v)  # frozen base weights
            else:
                payload_t[k] = tensors[k] = Tensor(v, requires_grad=True)

        if method == "scratch":
            wt = {k: t for k, t in tensors.items() if not k.startswith("clf:")}
        else:
            wt = {k: Tensor(v) for k, v in w0.tensors.items() if k not in enc.RECON_TENSORS}
            wt.update(base_override)
            wt = peft.adapted_weight_map(wt, w0, bundle, params=payload_t)
        emb = enc.forward_tokens(wt, config, enc.embed(config, Tensor(x)))
        logits = enc.classifier_logits_t(clf_t, enc.pool_t(emb))
        ls = ad.log_softmax(logits, axis=-1)
        loss = ad.mul(ad.tensor_sum(ad.mul(ls, Tensor(onehot))), -1.0 / x.shape[0])
        loss.backward()
        grads = {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()
        }
        return loss.item(), grads

    return loss_and_grad


def _structural_full_bundle(w0: EncoderWeights, task_id: str, seed: int) -> peft.AdapterBundle:
    names = sorted(n for n in w0.tensors if n not in enc.RECON_TENSORS)
    payload = {f"delta:{n}": np.zeros_like(w0.tensors[n]) for n in names}
    return peft.AdapterBundle(
        task_id=task_id, method="full", rank=0, alpha=0.0, targets=names,
        payload=payload, classifier={}, seed=seed,
    )


def _predict_arrays(
    w0: EncoderWeights | None,
    method: str,
    config: EncoderConfig,
    payload_state: dict[str, np.ndarray],
    clf_state: dict[str, np.ndarray],
    bundle_struct: peft.AdapterBundle | None,
    x: np.ndarray,
) -> np.ndarray:
    if method == "scratch":
        wt = {k: Tensor(v) for k, v in payload_state.items()}
    else:
        wt = {k: Tensor(v) for k, v in w0.tensors.items() if k not in enc.RECON_TENSORS}
        wt = peft.adapted_weight_map(
            wt, w0, bundle_struct, params={k: Tensor(v) for k, v in payload_state.items()}
        )
    emb = enc.forward_tokens(wt, config, enc.embed(config, Tensor(x)))
    ct = {k: Tensor(v) for k, v in clf_state.items()}
    return ad.softmax(enc.classifier_logits_t(ct, enc.pool_t(emb)), axis=-1).data


def fraction_prefix(train: list[SensorSequence], fraction: float) -> list[SensorSequence]:
    """Earliest `fraction` of each subject's sequences (chronological prefix)."""
    if fraction >= 1.0:
        return list(train)
    counts: dict[str, int] = {}
    budget: dict[str, int] = {}
    for s in train:
        counts[s.subject_id] = counts.get(s.subject_id, 0) + 1
    for subj, n in counts.items():
        budget[subj] = int(fraction * n)
    taken: dict[str, int] = {k: 0 for k in counts}
    out = []
    for s in train:
        if taken[s.subject_id] < budget[s.subject_id]:
            out.append(s)
            taken[s.subject_id] += 1
    if not out:
        raise ValidationError(f"fraction {fraction} leaves no training sequences")
    return out


@dataclass
class FinetuneOutcome:
    method: str
    bundle: peft.AdapterBundle | None
    weights: EncoderWeights | None
    classifier: dict[str, np.ndarray]
    history: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = 0.0

    def model(self):
        """The deployable model: an adapter bundle or a (weights, classifier) pair."""
        if self.bundle is not None and self.method != "scratch":
            return self.bundle
        return (self.weights, self.classifier)


def _infer_classes(dataset: SplitDataset) -> int:
    labels = [s.label for split in dataset.splits().values() for s in split]
    if any(l is None for l in labels) or not labels:
        raise ValidationError("fine-tuning needs labeled sequences in every split")
    return int(max(labels)) + 1


def finetune(
    w0: EncoderWeights | None,
    dataset: SplitDataset,
    method: str,
    config: TrainConfig | None = None,
    rank: int = 8,
    alpha: float = 8.0,
    chain: int = 3,
    task_id: str = "task",
    classes: int | None = None,
    log=None,
) -> FinetuneOutcome:
    """Train a task model for `method` in {lora, dora, cola, full, scratch}.

    The base weights stay frozen for the adapter methods; "full" trains weight
    deltas against the base (so W0 + delta is the result by construction);
    "scratch" ignores the base entirely. The best epoch by validation accuracy
    is returned.
    """
    config = config or TrainConfig()
    if method not in FINETUNE_METHODS:
        raise ValidationError(f"unknown fine-tune method {method!r}")
    if method != "scratch" and w0 is None:
        raise ValidationError(f"method {method!r} needs pre-trained base weights")

    inferred = _infer_classes(dataset)
    if classes is None:
        classes = inferred
    elif inferred > classes:
        raise ValidationError(f"labels exceed the declared class count {classes}")

    train = fraction_prefix(dataset.train, config.fraction)
    x_tr, y_tr = stack_sequences(train)
    onehot_all = np.eye(classes)[y_tr]
    x_val, y_val = (None, None)
    if dataset.validation:
        x_val, y_val = stack_sequences(dataset.validation)

    encoder_config = w0.config if w0 is not None else EncoderConfig(hidden=x_tr.shape[2])
    if x_tr.shape[2] != encoder_config.hidden:
        raise ValidationError("task feature dim must equal the encoder hidden size")

    bundle_struct: peft.AdapterBundle | None = None
    payload_state: dict[str, np.ndarray] = {}
    frozen_payload: dict[str, np.ndarray] = {}
    if method in peft.PEFT_METHODS:
        bundle_struct = peft.adapter_init(
            method,
            enc.attention_targets(encoder_config),
            w0,
            rank=rank,
            alpha=alpha,
            seed=config.seed,
            classes=classes,
            chain_length=chain,
            task_id=task_id,
        )
        payload_state = {k: v.copy() for k, v in bundle_struct.payload.items()}
        clf_state = {k: v.copy() for k, v in bundle_struct.classifier.items()}
    elif method == "full":
        bundle_struct = _structural_full_bundle(w0, task_id, config.seed)
        payload_state = {k: v.copy() for k, v in bundle_struct.payload.items()}
        clf_state = enc.init_classifier(encoder_config.hidden, classes, seed=config.seed)
    else:  # scratch
        scratch = enc.init_encoder_weights(
            encoder_config, seed=config.seed, scheme="xavier", with_recon=False
        )
        payload_state = {k: v.copy() for k, v in scratch.tensors.items()}
        clf_state = enc.init_classifier(encoder_config.hidden, classes, seed=config.seed, scheme="xavier")

    w0_before = None
    if w0 is not None:
        w0_before = {k: v.copy() for k, v in w0.tensors.items()}

    def trainable_keys() -> list[str]:
        if bundle_struct is not None and method in peft.PEFT_METHODS:
            return peft.trainable_params(bundle_struct)
        return sorted(payload_state) + [f"clf:{k}" for k in sorted(clf_state)]

    def gather_params(keys) -> dict[str, np.ndarray]:
        out = {}
        for k in keys:
            out[k] = clf_state[k[4:]] if k.startswith("clf:") else payload_state[k]
        return out

    def scatter_params(params: dict[str, np.ndarray]) -> None:
        for k, v in params.items():
            if k.startswith("clf:"):
                clf_state[k[4:]] = v
            else:
                payload_state[k] = v

    def val_accuracy() -> float:
        xs, ys = (x_val, y_val) if x_val is not None else (x_tr, y_tr)
        probs = _predict_arrays(w0, method, encoder_config, payload_state, clf_state, bundle_struct, xs)
        return float((probs.argmax(axis=1) == ys).mean())

    n = x_tr.shape[0]
    keys = trainable_keys()
    state = AdamState.init(gather_params(keys))
    if method == "cola":
        per_stage = max(1, config.finetune_epochs // chain)
        boundaries = {per_stage * j for j in range(1, chain)}
    else:
        boundaries = set()

    history: list[tuple[int, float, float]] = []
    best_acc, best_epoch = -1.0, -1
    best_payload, best_clf = None, None
    for epoch in range(config.finetune_epochs):
        if epoch in boundaries and bundle_struct.active_stage < chain:
            for k in peft.trainable_params(bundle_struct):
                if not k.startswith("clf:"):
                    frozen_payload[k] = payload_state[k]
            bundle_struct.payload.update(payload_state)
            peft.cola_advance_stage(bundle_struct)
            for k, v in bundle_struct.payload.items():
                if k not in payload_state:
                    payload_state[k] = v.copy()
            keys = trainable_keys()
            state = AdamState.init(gather_params(keys))
        order = rng_from(config.seed, "finetune-shuffle", epoch).permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch):
            idx = order[lo : lo + config.batch]
            loss_fn = make_classification_loss(
                encoder_config, x_tr[idx], onehot_all[idx], method,
                w0=w0, bundle=bundle_struct, frozen_payload=frozen_payload,
            )
            params = gather_params(keys)
            loss, grads = loss_fn(params)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite fine-tuning loss at epoch {epoch}")
            params, state = adam_update(params, grads, state, lr=config.lr)
            scatter_params(params)
            total += loss * len(idx)
        acc = val_accuracy()
        history.append((epoch, total / n, acc))
        _log_line(log, epoch, "train", total / n)
        _log_line(log, epoch, "validation", accuracy=acc)
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best_payload = {k: v.copy() for k, v in payload_state.items()}
            best_clf = {k: v.copy() for k, v in clf_state.items()}

    payload_state, clf_state = best_payload, best_clf

    if w0 is not None:
        for k, v in w0.tensors.items():
            if not np.array_equal(v, w0_before[k]):
                raise NumericError(f"base weights changed during fine-tuning: {k}")

    if method in peft.PEFT_METHODS:
        bundle_struct.payload = dict(payload_state)
        bundle_struct.classifier = dict(clf_state)
        if method == "cola":
            bundle_struct.active_stage = max(
                max(bundle_struct.initialized_stages(t)) for t in bundle_struct.targets
                if bundle_struct.initialized_stages(t)
            )
        bundle_struct.metadata.update(
            {"task_id": task_id, "classes": classes, "best_epoch": best_epoch, "val_accuracy": best_acc}
        )
        return FinetuneOutcome(method, bundle_struct, None, clf_state, history, best_epoch, best_acc)
    if method == "full":
        final = EncoderWeights(
            encoder_config,
            {
                k: v + payload_state[f"delta:{k}"]
                for k, v in w0.tensors.items()
                if k not in enc.RECON_TENSORS
            },
        )
        bundle = peft.AdapterBundle(
            task_id=task_id, method="full", rank=0, alpha=0.0,
            targets=sorted(n_ for n_ in w0.tensors if n_ not in enc.RECON_TENSORS),
            payload=dict(payload_state), classifier=dict(clf_state), seed=config.seed,
            metadata={"classes": classes, "best_epoch": best_epoch, "val_accuracy": best_acc},
        )
        return FinetuneOutcome(method, bundle, final, clf_state, history, best_epoch, best_acc)
    scratch_weights = EncoderWeights(encoder_config, dict(payload_state))
    return FinetuneOutcome(method, None, scratch_weights, clf_state, history, best_epoch, best_acc)


# -- inference and metrics ---------------------------------------------------------


def predict(w0: EncoderWeights | None, model, tokens: np.ndarray):
    """Predicted labels and probabilities for (n, 15, H) sequences.

    `model` is an AdapterBundle (applied to `w0`) or a
    (EncoderWeights, classifier) pair.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if isinstance(model, peft.AdapterBundle):
        if w0 is None:
            raise ValidationError("adapter bundles need the base weights")
        emb = enc.encoder_forward(w0, tokens, bundle=model)
        probs = enc.classify(model.classifier, enc.pool(emb))
    else:
        weights, classifier = model
        emb = enc.encoder_forward(weights, tokens)
        probs = enc.classify(classifier, enc.pool(emb))
    return probs.argmax(axis=-1), probs


@dataclass
class Metrics:
    """Multiclass accuracy plus disease-positive binary F1."""

    accuracy: float
    f1: float | None
    tp: int
    fp: int
    fn: int
    tn: int
    n: int


def evaluate(
    w0: EncoderWeights | None,
    model,
    test: list[SensorSequence],
    healthy_class: int = 0,
) -> Metrics:
    """Exact-match accuracy and binary F1 after collapsing every non-healthy
    class into a single positive class (cross-disease confusion still counts
    as a true positive)."""
    if not test:
        raise ValidationError("cannot evaluate on an empty test split")
    x, y = stack_sequences(test)
    if y is None:
        raise ValidationError("test sequences must be labeled")
    pred, _ = predict(w0, model, x)
    accuracy = float((pred == y).mean())
    pos, pred_pos = y != healthy_class, pred != healthy_class
    tp = int((pos & pred_pos).sum())
    fn = int((pos & ~pred_pos).sum())
    fp = int((~pos & pred_pos).sum())
    tn = int((~pos & ~pred_pos).sum())
    f1 = 2.0 * tp / (2.0 * tp + fp + fn) if pos.any() else None
    return Metrics(accuracy=accuracy, f1=f1, tp=tp, fp=fp, fn=fn, tn=tn, n=len(test))
