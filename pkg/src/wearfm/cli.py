"""Command-line surface: preprocess, synthesize, pre-train, fine-tune, detect,
inspect the library, report memory, and run the two ablation sweeps.

Exit codes: 0 ok, 1 usage, 2 data/format error, 3 numeric failure. Reports are
plain text / TSV; every artifact-producing command writes a run manifest next
to its output so the run can be reproduced from the manifest alone.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import datapipe, encoder as enc, library as lib, peft, synth, trainer
from .errors import NumericError, ValidationError, WearfmError
from .io import atomic_write, file_fingerprint, load_tensor_blob, save_tensor_blob

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1 for usage
        self.exit(EXIT_USAGE, f"error: usage: {message}\n")


def _write_run_manifest(out_path: Path, args: argparse.Namespace, started: float,
                        inputs: list[str], outputs: list[str]) -> None:
    manifest = {
        "command": sys.argv[1:] if sys.argv[0].endswith(("wearfm", "cli.py")) else sys.argv,
        "config": {k: v for k, v in vars(args).items() if k != "func" and v is not None},
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "wall_clock_s": round(time.time() - started, 3),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    target = out_path / "run_manifest.json" if out_path.is_dir() else out_path.with_suffix(
        out_path.suffix + ".manifest.json"
    )
    with atomic_write(target) as fh:
        fh.write(json.dumps(manifest, indent=2, sort_keys=True, default=str).encode())


def _parse_values(text: str, kind) -> list:
    """Comma list ("1,2,4") or inclusive range ("0.1..1.0" with step 0.1,
    "a..b:step" for a custom step)."""
    if ".." in text:
        span, _, step_s = text.partition(":")
        lo_s, _, hi_s = span.partition("..")
        lo, hi = float(lo_s), float(hi_s)
        step = float(step_s) if step_s else 0.1
        vals, v = [], lo
        while v <= hi + 1e-9:
            vals.append(round(v, 10))
            v += step
        return [kind(v) for v in vals]
    return [kind(v) for v in text.split(",")]


# -- subcommands --------------------------------------------------------------


def cmd_preprocess(args) -> int:
    started = time.time()
    recordings = datapipe.load_raw_manifest(args.infile)
    if not recordings:
        raise ValidationError("raw manifest lists no recordings")
    channel_order = list(recordings[0].streams)
    sequences = []
    for rec in recordings:
        sequences.extend(datapipe.align_and_window(rec, expected_channels=channel_order))
    if not sequences:
        raise ValidationError("no full 15 s windows in the input recordings")
    ds = datapipe.chronological_split(sequences)

    scaler = datapipe.minmax_fit(ds.train)
    ds = datapipe.SplitDataset(
        train=datapipe.minmax_apply(scaler, ds.train),
        validation=datapipe.minmax_apply(scaler, ds.validation),
        test=datapipe.minmax_apply(scaler, ds.test),
        provenance=ds.provenance,
    )
    pca = datapipe.pca_fit(ds.train, k=args.pca_dim)
    ds = datapipe.SplitDataset(
        train=datapipe.pca_apply(pca, ds.train),
        validation=datapipe.pca_apply(pca, ds.validation),
        test=datapipe.pca_apply(pca, ds.test),
        provenance=ds.provenance,
    )
    cleaning = {}
    if not args.no_clean:
        cleaned = {}
        for name, split in ds.splits().items():
            if not split:
                cleaned[name] = split
                continue
            res = datapipe.ctrl_clean(split, seed=args.seed)
            cleaned[name] = res.clean
            cleaning[name] = {
                "before": len(split),
                "after": len(res.clean),
                "rejected": res.rejected_indices,
                "degenerate": res.warning,
            }
        ds = datapipe.SplitDataset(
            train=cleaned["train"], validation=cleaned["validation"], test=cleaned["test"],
            provenance=ds.provenance,
        )
    ds.provenance.update(
        {
            "channel_order": channel_order,
            "minmax": "fitted on train",
            "pca": {"k": pca.k, "explained_variance_ratio": pca.explained_variance_ratio},
            "cleaning": cleaning or "skipped",
            "seed": args.seed,
        }
    )
    raw = json.loads(Path(args.infile).read_text())
    label_map = {int(k): v for k, v in (raw.get("label_map") or {}).items()} or None
    transforms = {
        "minmax.min": scaler.minimum,
        "minmax.max": scaler.maximum,
        "pca.mean": pca.mean,
        "pca.std": pca.std,
        "pca.projection": pca.projection,
    }
    out = Path(args.out)
    datapipe.save_dataset(
        out, raw.get("name", "dataset"), ds, label_map=label_map,
        transforms=transforms, transform_meta={"pca_k": pca.k},
    )
    for name, split in ds.splits().items():
        print(f"{name}\t{len(split)} sequences")
    print(f"feature_dim\t{pca.k}")
    print(f"explained_variance\t{pca.explained_variance_ratio:.6f}")
    _write_run_manifest(out, args, started, [str(args.infile)], [str(out)])
    return EXIT_OK


def cmd_synth_corpus(args) -> int:
    started = time.time()
    model = synth.default_healthy_model(dim=args.dim, components=args.components, seed=args.seed)
    corpus = synth.make_corpus(args.n, model=model, seed=args.seed)
    ds = datapipe.SplitDataset(train=corpus, validation=[], test=[],
                               provenance={"synthetic_corpus": {"instances": args.n, "seed": args.seed,
                                                                "components": args.components}})
    out = Path(args.out)
    datapipe.save_dataset(out, "healthy-corpus", ds, label_map={0: "healthy"})
    print(f"train\t{len(corpus)} sequences\t({args.n} instances requested)")
    _write_run_manifest(out, args, started, [], [str(out)])
    return EXIT_OK


def cmd_synth_task(args) -> int:
    started = time.time()
    base = synth.default_healthy_model(dim=args.dim, components=args.components, seed=args.base_seed)
    spec = synth.separated_task_spec(
        args.task, classes=args.classes, separation=args.sep,
        sequences_per_class=args.per_class, dim=args.dim, seed=args.seed, base_model=base,
    )
    ds = synth.make_synthetic_task(spec)
    label_map = {0: "healthy"}
    label_map.update({c: f"condition-{c}" for c in range(1, args.classes)})
    out = Path(args.out)
    datapipe.save_dataset(out, args.task, ds, label_map=label_map, task_id=args.task)
    for name, split in ds.splits().items():
        print(f"{name}\t{len(split)} sequences")
    print(f"nominal_bayes_accuracy\t{spec.nominal_bayes_accuracy:.6f}")
    _write_run_manifest(out, args, started, [], [str(out)])
    return EXIT_OK


def _load_corpus(data_dir) -> list[datapipe.SensorSequence]:
    ds, _ = datapipe.load_dataset(data_dir)
    corpus = ds.train + ds.validation + ds.test
    if not corpus:
        raise ValidationError(f"dataset {data_dir} holds no sequences")
    return corpus


def cmd_pretrain(args) -> int:
    started = time.time()
    corpus = _load_corpus(args.data)
    config = trainer.TrainConfig(
        lr=args.lr, batch=args.batch, pretrain_epochs=args.epochs,
        stop_loss=args.stop_loss, seed=args.seed, loss_scope=args.loss_scope,
    )
    encoder_config = enc.EncoderConfig(hidden=corpus[0].dim)
    log_path = Path(args.out).with_suffix(".log")
    with open(log_path, "w") as log:
        result = trainer.pretrain(corpus, config, encoder_config=encoder_config, log=log)
    enc.save_weights(args.out, result.weights)
    print(f"epochs\t{len(result.losses)}")
    print(f"final_loss\t{result.losses[-1]:.6f}")
    print(f"params\t{result.weights.param_count(include_recon=True)}")
    _write_run_manifest(Path(args.out), args, started, [str(args.data)], [str(args.out), str(log_path)])
    return EXIT_OK


def cmd_finetune(args) -> int:
    started = time.time()
    w0 = enc.load_weights(args.w0)
    ds, manifest = datapipe.load_dataset(args.data)
    config = trainer.TrainConfig(
        lr=args.lr, batch=args.batch, finetune_epochs=args.epochs,
        seed=args.seed, fraction=args.fraction,
    )
    outcome = trainer.finetune(
        w0, ds, args.method, config, rank=args.rank, alpha=args.alpha,
        chain=args.chain, task_id=args.task,
    )
    metrics = trainer.evaluate(w0, outcome.model(), ds.test, healthy_class=args.healthy_class)
    catalog = lib.AdapterLibrary(args.lib)
    outputs = []
    if outcome.bundle is not None:
        outcome.bundle.metadata["dataset_fingerprint"] = file_fingerprint(
            Path(args.data) / "manifest.json"
        )
        outcome.bundle.metadata["label_map"] = manifest.get("label_map")
        path = catalog.add(outcome.bundle, overwrite=args.overwrite)
        outputs.append(str(path))
    else:
        path = Path(args.lib) / f"{args.task}.scratch.cmfc"
        tensors = dict(outcome.weights.tensors)
        tensors.update({f"clf/{k}": v for k, v in outcome.classifier.items()})
        from .io import MAGIC_CHECKPOINT, save_container

        save_container(path, MAGIC_CHECKPOINT, {"kind": "scratch-model", "task": args.task}, tensors)
        outputs.append(str(path))
    print(f"method\t{args.method}")
    print(f"best_epoch\t{outcome.best_epoch}")
    print(f"val_accuracy\t{outcome.best_val_accuracy:.6f}")
    print(f"test_accuracy\t{metrics.accuracy:.6f}")
    print(f"test_f1\t{'' if metrics.f1 is None else f'{metrics.f1:.6f}'}")
    _write_run_manifest(Path(args.lib), args, started, [str(args.w0), str(args.data)], outputs)
    return EXIT_OK


def cmd_detect(args) -> int:
    started = time.time()
    w0 = enc.load_weights(args.w0)
    bundle = lib.AdapterLibrary(args.lib).get(args.task)
    x = load_tensor_blob(args.infile).astype(np.float64)
    if x.ndim != 3:
        raise ValidationError(f"expected a rank-3 sequence tensor, got rank {x.ndim}")
    labels, probs = trainer.predict(w0, bundle, x)
    out = Path(args.out)
    with atomic_write(out) as fh:
        header = "index\tpredicted_class\t" + "\t".join(
            f"p{c}" for c in range(probs.shape[1])
        )
        lines = [header]
        for i, (lbl, p) in enumerate(zip(labels, probs)):
            lines.append(f"{i}\t{int(lbl)}\t" + "\t".join(f"{v:.9f}" for v in p))
        fh.write(("\n".join(lines) + "\n").encode())
    print(f"sequences\t{x.shape[0]}")
    print(f"out\t{out}")
    _write_run_manifest(out, args, started, [str(args.w0), str(args.infile)], [str(out)])
    return EXIT_OK


def cmd_library(args) -> int:
    catalog = lib.AdapterLibrary(args.lib)
    if args.action == "list":
        rows = catalog.list()
        print("task_id\tmethod\trank\tclasses\tfile")
        for r in rows:
            print(f"{r['task_id']}\t{r['method']}\t{r['rank']}\t{r['classes']}\t{r['file']}")
        return EXIT_OK
    if not args.task:
        raise ValidationError("library remove needs --task")
    catalog.remove(args.task)
    print(f"removed\t{args.task}")
    return EXIT_OK


def cmd_report_memory(args) -> int:
    w0 = enc.load_weights(args.w0)
    bundles = lib.AdapterLibrary(args.lib).bundles()
    report = lib.memory_report(w0.config, bundles, projected_tasks=args.project)
    print("item\tparams\tKB")
    for name, params, kb in report.rows():
        print(f"{name}\t{params}\t{kb}")
    print(f"total: scratch models\t{report.scratch_total.params}\t{report.scratch_total.kb:.1f}")
    print(
        f"total: base + full deltas\t{report.full_finetune_total.params}\t{report.full_finetune_total.kb:.1f}"
    )
    print(f"total: base + library\t{report.library_total.params}\t{report.library_total.kb:.1f}")
    print(f"savings_vs_scratch_pct\t{report.savings_vs_scratch_pct:.1f}")
    print(f"savings_vs_full_pct\t{report.savings_vs_full_pct:.1f}")
    if report.projection:
        print("tasks\tscratch_kb\tfull_finetune_kb\tlibrary_kb")
        for row in report.projection:
            print(
                f"{row['tasks']}\t{row['scratch_kb']:.1f}\t{row['full_finetune_kb']:.1f}"
                f"\t{row['library_kb']:.1f}"
            )
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.time()
    w0 = enc.load_weights(args.w0)
    ds, _ = datapipe.load_dataset(args.data)
    rows = []
    if args.axis == "rank":
        values = _parse_values(args.values, int)
        for rank in values:
            config = trainer.TrainConfig(finetune_epochs=args.epochs, seed=args.seed)
            outcome = trainer.finetune(w0, ds, args.method, config, rank=rank, alpha=args.alpha,
                                       chain=args.chain, task_id=f"sweep-r{rank}")
            metrics = trainer.evaluate(w0, outcome.model(), ds.test, healthy_class=args.healthy_class)
            rows.append((rank, outcome.best_val_accuracy, metrics.accuracy, metrics.f1))
        header = "rank\tval_accuracy\ttest_accuracy\ttest_f1"
    else:
        values = _parse_values(args.values, float)
        for frac in values:
            config = trainer.TrainConfig(finetune_epochs=args.epochs, seed=args.seed, fraction=frac)
            outcome = trainer.finetune(w0, ds, args.method, config, rank=args.rank, alpha=args.alpha,
                                       chain=args.chain, task_id=f"sweep-f{frac}")
            metrics = trainer.evaluate(w0, outcome.model(), ds.test, healthy_class=args.healthy_class)
            rows.append((frac, outcome.best_val_accuracy, metrics.accuracy, metrics.f1))
        header = "fraction\tval_accuracy\ttest_accuracy\ttest_f1"
    lines = [header]
    for v, va, ta, f1 in rows:
        lines.append(f"{v}\t{va:.6f}\t{ta:.6f}\t{'' if f1 is None else f'{f1:.6f}'}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        with atomic_write(args.out) as fh:
            fh.write((text + "\n").encode())
        _write_run_manifest(Path(args.out), args, started, [str(args.w0), str(args.data)], [str(args.out)])
    return EXIT_OK


# -- argument wiring ------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="wearfm", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("preprocess", help="raw recordings -> windowed, split, scaled, reduced, cleaned dataset")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--pca-dim", type=int, default=128)
    sp.add_argument("--no-clean", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_preprocess)

    sy = sub.add_parser("synth", help="generate synthetic corpora and tasks")
    sysub = sy.add_subparsers(dest="what", required=True)
    sc = sysub.add_parser("corpus")
    sc.add_argument("--n", type=int, default=100_000)
    sc.add_argument("--out", required=True)
    sc.add_argument("--dim", type=int, default=128)
    sc.add_argument("--components", type=int, default=8)
    sc.add_argument("--seed", type=int, default=0)
    sc.set_defaults(func=cmd_synth_corpus)
    st = sysub.add_parser("task")
    st.add_argument("--classes", type=int, required=True)
    st.add_argument("--sep", type=float, required=True)
    st.add_argument("--per-class", dest="per_class", type=int, required=True)
    st.add_argument("--out", required=True)
    st.add_argument("--task", default="task")
    st.add_argument("--dim", type=int, default=128)
    st.add_argument("--components", type=int, default=8)
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--base-seed", dest="base_seed", type=int, default=7)
    st.set_defaults(func=cmd_synth_task)

    pt = sub.add_parser("pretrain", help="masked-data-modeling pre-training")
    pt.add_argument("--data", required=True)
    pt.add_argument("--out", required=True)
    pt.add_argument("--epochs", type=int, default=1000)
    pt.add_argument("--stop-loss", dest="stop_loss", type=float, default=0.001)
    pt.add_argument("--batch", type=int, default=128)
    pt.add_argument("--lr", type=float, default=0.005)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--loss-scope", dest="loss_scope", choices=("masked", "full"), default="masked")
    pt.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", help="adapter or baseline fine-tuning for one task")
    ft.add_argument("--w0", required=True)
    ft.add_argument("--data", required=True)
    ft.add_argument("--method", required=True, choices=trainer.FINETUNE_METHODS)
    ft.add_argument("--rank", type=int, default=8)
    ft.add_argument("--alpha", type=float, default=8.0)
    ft.add_argument("--chain", type=int, default=3)
    ft.add_argument("--fraction", type=float, default=1.0)
    ft.add_argument("--lib", required=True)
    ft.add_argument("--task", required=True)
    ft.add_argument("--epochs", type=int, default=300)
    ft.add_argument("--batch", type=int, default=128)
    ft.add_argument("--lr", type=float, default=0.005)
    ft.add_argument("--seed", type=int, default=0)
    ft.add_argument("--healthy-class", dest="healthy_class", type=int, default=0)
    ft.add_argument("--overwrite", action="store_true")
    ft.set_defaults(func=cmd_finetune)

    dt = sub.add_parser("detect", help="per-sequence predictions with a library task")
    dt.add_argument("--w0", required=True)
    dt.add_argument("--lib", required=True)
    dt.add_argument("--task", required=True)
    dt.add_argument("--in", dest="infile", required=True)
    dt.add_argument("--out", required=True)
    dt.set_defaults(func=cmd_detect)

    lb = sub.add_parser("library", help="inspect or edit the adapter library")
    lb.add_argument("action", choices=("list", "remove"))
    lb.add_argument("--lib", required=True)
    lb.add_argument("--task")
    lb.set_defaults(func=cmd_library)

    rm = sub.add_parser("report-memory", help="memory breakdown and projection")
    rm.add_argument("--w0", required=True)
    rm.add_argument("--lib", required=True)
    rm.add_argument("--project", type=int, default=0)
    rm.set_defaults(func=cmd_report_memory)

    sw = sub.add_parser("sweep", help="rank or data-fraction ablation table")
    sw.add_argument("axis", choices=("rank", "fraction"))
    sw.add_argument("--values", required=True)
    sw.add_argument("--w0", required=True)
    sw.add_argument("--data", required=True)
    sw.add_argument("--method", default="lora", choices=trainer.FINETUNE_METHODS)
    sw.add_argument("--rank", type=int, default=8)
    sw.add_argument("--alpha", type=float, default=8.0)
    sw.add_argument("--chain", type=int, default=3)
    sw.add_argument("--epochs", type=int, default=300)
    sw.add_argument("--seed", type=int, default=0)
    sw.add_argument("--healthy-class", dest="healthy_class", type=int, default=0)
    sw.add_argument("--out")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"error: numeric: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except WearfmError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"error: missing-file: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
