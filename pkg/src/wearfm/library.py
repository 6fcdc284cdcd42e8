"""Persistent adapter catalog with byte-level memory accounting.

One bundle file per task plus an index manifest; round trips are bitwise
lossless. The memory report compares three deployment strategies for N tasks:
(a) one scratch model per task, (b) one shared base plus a full weight delta
per task, and (c) the shared base plus this library's low-rank bundles.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from .errors import NotFoundError, ValidationError
from .io import MAGIC_BUNDLE, load_container, save_container
from .peft import AdapterBundle

BYTES_PER_PARAM = 4  # weights are stored as 32-bit floats
KIB = 1024.0


def _kb(params: int) -> float:
    return params * BYTES_PER_PARAM / KIB


def bundle_save(bundle: AdapterBundle, path) -> None:
    """Serialize a bundle; the container stores tensors as float32."""
    meta = {
        "kind": "adapter-bundle",
        "task_id": bundle.task_id,
        "method": bundle.method,
        "rank": bundle.rank,
        "alpha": bundle.alpha,
        "targets": bundle.targets,
        "chain_length": bundle.chain_length,
        "active_stage": bundle.active_stage,
        "seed": bundle.seed,
        "metadata": bundle.metadata,
        "payload_keys": sorted(bundle.payload),
        "classifier_keys": sorted(bundle.classifier),
    }
    tensors: dict[str, np.ndarray] = {}
    for k, v in bundle.payload.items():
        tensors[f"payload/{k}"] = v
    for k, v in bundle.classifier.items():
        tensors[f"classifier/{k}"] = v
    save_container(path, MAGIC_BUNDLE, meta, tensors)


def bundle_load(path) -> AdapterBundle:
    meta, tensors = load_container(path, MAGIC_BUNDLE)
    payload = {
        k[len("payload/") :]: v.astype(np.float64)
        for k, v in tensors.items()
        if k.startswith("payload/")
    }
    classifier = {
        k[len("classifier/") :]: v.astype(np.float64)
        for k, v in tensors.items()
        if k.startswith("classifier/")
    }
    return AdapterBundle(
        task_id=meta["task_id"],
        method=meta["method"],
        rank=meta["rank"],
        alpha=meta["alpha"],
        targets=list(meta["targets"]),
        payload=payload,
        classifier=classifier,
        chain_length=meta["chain_length"],
        active_stage=meta["active_stage"],
        seed=meta["seed"],
        metadata=meta.get("metadata", {}),
    )


class AdapterLibrary:
    """Directory-backed task catalog: one bundle file per task + index.json."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._index_path = self.directory / "index.json"

    def _read_index(self) -> dict:
        if not self._index_path.exists():
            return {}
        return json.loads(self._index_path.read_text())

    def _write_index(self, index: dict) -> None:
        tmp = self.directory / ".index.json.tmp"
        tmp.write_text(json.dumps(index, indent=2, sort_keys=True))
        tmp.replace(self._index_path)

    def add(self, bundle: AdapterBundle, overwrite: bool = False) -> Path:
        index = self._read_index()
        if bundle.task_id in index and not overwrite:
            raise ValidationError(
                f"task {bundle.task_id!r} already in the library (pass overwrite)"
            )
        fname = f"{bundle.task_id}.cmfb"
        bundle_save(bundle, self.directory / fname)
        index[bundle.task_id] = {
            "file": fname,
            "method": bundle.method,
            "rank": bundle.rank,
            "classes": bundle.classes if bundle.classifier else None,
            "added": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        self._write_index(index)
        return self.directory / fname

    def get(self, task_id: str) -> AdapterBundle:
        index = self._read_index()
        if task_id not in index:
            raise NotFoundError(f"task {task_id!r} not in the library")
        return bundle_load(self.directory / index[task_id]["file"])

    def list(self) -> list[dict]:
        index = self._read_index()
        return [{"task_id": tid, **entry} for tid, entry in sorted(index.items())]

    def remove(self, task_id: str) -> None:
        index = self._read_index()
        if task_id not in index:
            raise NotFoundError(f"task {task_id!r} not in the library")
        path = self.directory / index.pop(task_id)["file"]
        self._write_index(index)
        if path.exists():
            path.unlink()

    def bundles(self) -> list[AdapterBundle]:
        return [self.get(e["task_id"]) for e in self.list()]


# -- memory accounting -------------------------------------------------------------


@dataclass
class MemoryItem:
    name: str
    params: int

    @property
    def kb(self) -> float:
        return _kb(self.params)


@dataclass
class MemoryReport:
    """Parameter and KiB totals per deployment strategy (1 KB = 1024 bytes,
    4 bytes per parameter; only tensor payloads count)."""

    items: list[MemoryItem]
    scratch_total: MemoryItem
    full_finetune_total: MemoryItem
    library_total: MemoryItem
    savings_vs_scratch_pct: float
    savings_vs_full_pct: float
    projection: list[dict] = field(default_factory=list)

    def rows(self) -> list[tuple[str, int, float]]:
        return [(i.name, i.params, round(i.kb, 1)) for i in self.items]


def memory_report(
    config: enc.EncoderConfig,
    bundles: list[AdapterBundle],
    projected_tasks: int = 0,
    include_recon_head: bool = False,
) -> MemoryReport:
    """Account the deployed bytes for the three strategies.

    The base encoder is counted without the pre-training reconstruction head
    by default (it is dropped at fine-tune time). Projections extrapolate
    with the mean bundle and mean classifier size over the known bundles.
    """
    if not bundles and projected_tasks == 0:
        raise ValidationError("memory report needs at least one bundle or a projection")
    w0_params = enc.encoder_param_count(config, include_recon=include_recon_head)
    items = [MemoryItem("W0", w0_params)]

    bundle_sizes: list[int] = []
    model_sizes: list[int] = []  # encoder + that task's classifier
    for b in bundles:
        size = b.payload_param_count() + b.classifier_param_count()
        bundle_sizes.append(size)
        clf = b.classifier_param_count()
        if clf == 0:
            clf = enc.classifier_param_count(config.hidden, 3)
        model_sizes.append(enc.encoder_param_count(config, include_recon=False) + clf)
        items.append(MemoryItem(f"{b.task_id} [{b.method}]", size))

    n_known = len(bundles)
    scratch = sum(model_sizes)
    full = w0_params + sum(model_sizes)  # each delta is sized like encoder + classifier
    library = w0_params + sum(bundle_sizes)
    sav_scratch = 100.0 * (1.0 - library / scratch) if scratch else 0.0
    sav_full = 100.0 * (1.0 - library / full) if full else 0.0

    projection: list[dict] = []
    if projected_tasks:
        mean_bundle = float(np.mean(bundle_sizes)) if bundle_sizes else 0.0
        mean_model = (
            float(np.mean(model_sizes))
            if model_sizes
            else float(enc.encoder_param_count(config) + enc.classifier_param_count(config.hidden, 3))
        )
        if not bundle_sizes:
            raise ValidationError("projection needs at least one known bundle as the unit size")
        run_scratch, run_full, run_lib = 0.0, float(w0_params), float(w0_params)
        for n in range(1, projected_tasks + 1):
            if n <= n_known:
                run_scratch += model_sizes[n - 1]
                run_full += model_sizes[n - 1]
                run_lib += bundle_sizes[n - 1]
            else:
                run_scratch += mean_model
                run_full += mean_model
                run_lib += mean_bundle
            projection.append(
                {
                    "tasks": n,
                    "scratch_kb": _kb(int(round(run_scratch))),
                    "full_finetune_kb": _kb(int(round(run_full))),
                    "library_kb": _kb(int(round(run_lib))),
                }
            )

    return MemoryReport(
        items=items,
        scratch_total=MemoryItem("scratch models", scratch),
        full_finetune_total=MemoryItem("base + full deltas", full),
        library_total=MemoryItem("base + library", library),
        savings_vs_scratch_pct=sav_scratch,
        savings_vs_full_pct=sav_full,
        projection=projection,
    )
