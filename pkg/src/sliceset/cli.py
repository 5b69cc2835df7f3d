"""Command-line entry points: synth, train, eval, export-weights,
import-weights, check.

Configs are JSON documents with strict schemas (unknown keys are rejected);
command-line flags override config-file values and the fully resolved config
is echoed into the output directory for provenance.  Training writes
nothing outside its output directory and guards it with a lock file.

Set ``SLICESET_THREADS`` to cap the numeric libraries' worker threads; it is
applied before numpy loads.
"""

from __future__ import annotations

import os


def _cap_threads():
    cap = os.environ.get("SLICESET_THREADS")
    if cap:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


_cap_threads()

import argparse  # noqa: E402
import contextlib  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, dataclass, field, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .checks import SUITES, run_suite  # noqa: E402
from .data import (  # noqa: E402
    SyntheticSpec,
    generate_synthetic,
    load_manifest_volumes,
    manifest_task,
    read_manifest,
    write_manifest,
)
from .encoders import ENCODER_KINDS, EncoderConfig  # noqa: E402
from .model import (  # noqa: E402
    AXES,
    AggregatorConfig,
    ModelConfig,
    SliceSetModel,
    build_dataclass,
    model_config_from_dict,
    model_config_to_dict,
    slice_count_for,
)
from .nifti import save_nifti  # noqa: E402
from .train import (  # noqa: E402
    OptimizerConfig,
    TrainConfig,
    evaluate,
    he_init,
    train,
)
from .weights import (  # noqa: E402
    WeightArchive,
    export_weights,
    import_encoder,
    import_strict,
)

LOCK_NAME = ".sliceset.lock"
CHECKPOINT_METADATA_KIND = "slice-set-checkpoint"


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything a training run needs, JSON-serializable.

    ``task`` may be "auto", in which case it is inferred from the training
    manifest's target types (integer 0/1 targets → classification, floats →
    regression).
    """

    task: str = "auto"
    axis: str = "sagittal"
    positional_enabled: bool = False
    normalize: bool = True
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train_manifest: str | None = None
    val_manifest: str | None = None
    test_manifest: str | None = None
    output_dir: str = "runs/latest"

    def __post_init__(self):
        if self.task not in ("auto", "regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.axis not in AXES:
            raise ValueError(f"unknown axis {self.axis!r}; choose from {AXES}")

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, task: str) -> ModelConfig:
        return ModelConfig(task=task, axis=self.axis, encoder=self.encoder,
                           aggregator=self.aggregator,
                           positional_enabled=self.positional_enabled)


_NESTED = {"encoder": EncoderConfig, "aggregator": AggregatorConfig,
           "train": TrainConfig, "optimizer": OptimizerConfig}


def run_config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    kwargs = {}
    for key, cls in _NESTED.items():
        if key in data:
            kwargs[key] = build_dataclass(cls, data.pop(key), key)
    base = build_dataclass(RunConfig, data, "run config")
    return replace(base, **kwargs) if kwargs else base


def load_run_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must be a JSON object")
    return run_config_from_dict(data)


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    """Fold non-None command-line flags over the config file values."""
    top = {}
    for name in ("task", "axis", "normalize", "positional_enabled",
                 "train_manifest", "val_manifest", "test_manifest", "output_dir"):
        value = getattr(args, name, None)
        if value is not None:
            top[name] = value
    enc = {k: v for k, v in (("kind", getattr(args, "encoder", None)),
                             ("width_multiplier", getattr(args, "width_multiplier", None)),
                             ("min_input", getattr(args, "min_input", None)),
                             ("input_channels", getattr(args, "input_channels", None)))
           if v is not None}
    agg = {k: v for k, v in (("kind", getattr(args, "aggregator", None)),) if v is not None}
    tr = {k: v for k, v in (("epochs", getattr(args, "epochs", None)),
                            ("batch_size", getattr(args, "batch_size", None)),
                            ("loss", getattr(args, "loss", None)),
                            ("seed", getattr(args, "seed", None))) if v is not None}
    opt = {k: v for k, v in (("kind", getattr(args, "optimizer", None)),
                             ("learning_rate", getattr(args, "learning_rate", None)),
                             ("momentum", getattr(args, "momentum", None))) if v is not None}
    if enc:
        top["encoder"] = replace(config.encoder, **enc)
    if agg:
        top["aggregator"] = replace(config.aggregator, **agg)
    if tr:
        top["train"] = replace(config.train, **tr)
    if opt:
        top["optimizer"] = replace(config.optimizer, **opt)
    return replace(config, **top) if top else config


@contextlib.contextmanager
def output_lock(directory: Path):
    """Exclusive claim on an output directory via an O_EXCL lock file."""
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ValueError(
            f"output directory {directory} is locked by another run "
            f"(delete {lock} if that run is no longer alive)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


def _common_extents(volumes, context: str) -> tuple[int, int, int]:
    extents = {v.extents for v in volumes}
    if len(extents) != 1:
        raise ValueError(f"{context}: volumes disagree on extents: {sorted(extents)}")
    return next(iter(extents))


def _aggregate(reports) -> dict:
    """Mean and population standard deviation of every metric across seeds."""
    keys = [k for k in reports[0].to_dict() if k not in ("task", "n")]
    per_seed = [r.to_dict() for r in reports]
    mean = {k: float(np.mean([r[k] for r in per_seed])) for k in keys}
    std = {k: float(np.std([r[k] for r in per_seed])) for k in keys}
    return {"per_seed": per_seed, "mean": mean, "std": std}


def _print_aggregate(agg: dict):
    for key, m in agg["mean"].items():
        print(f"{key}: {m:.4f} ± {agg['std'][key]:.4f} ({len(agg['per_seed'])} seeds)")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    extents = tuple(int(x) for x in args.extents.split(","))
    if len(extents) != 3:
        raise ValueError(f"--extents wants three comma-separated integers, got {args.extents!r}")
    spec = SyntheticSpec(extents=extents, task=args.task, noise_std=args.noise_std,
                         count=args.count, seed=args.seed, blob_radius=args.blob_radius,
                         blob_amplitude=args.blob_amplitude, signal_axis=args.signal_axis)
    volumes = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    suffix = ".nii.gz" if args.gzip else ".nii"
    for volume in volumes:
        name = volume.subject_id + suffix
        save_nifti(out / name, volume)
        entries.append({"path": name, "subject_id": volume.subject_id,
                        "target": volume.target})
    write_manifest(out / "manifest.json", entries)
    low, high = spec.position_range
    detail = (f"targets in [{low}, {high}] along {spec.signal_axis}"
              if spec.task == "regression" else "labels blob=1 / noise=0")
    print(f"wrote {len(volumes)} volumes + manifest.json to {out} ({detail})")
    return 0


def _load_split(path, normalize, context):
    if path is None:
        raise ValueError(f"no {context} manifest configured (flag --{context}-manifest "
                         f"or config key {context}_manifest)")
    volumes = load_manifest_volumes(path, normalize_volumes=normalize)
    if not volumes:
        raise ValueError(f"{context} manifest {path} is empty")
    return volumes


def cmd_train(args) -> int:
    config = load_run_config(args.config) if args.config else RunConfig()
    config = _apply_overrides(config, args)

    train_entries = read_manifest(config.train_manifest) if config.train_manifest else None
    if train_entries is None:
        raise ValueError("no training manifest configured")
    inferred = manifest_task(train_entries)
    task = inferred if config.task == "auto" else config.task
    if task != inferred:
        raise ValueError(f"config task {task!r} but training manifest targets look like "
                         f"{inferred!r}")
    config = replace(config, task=task)

    train_vols = _load_split(config.train_manifest, config.normalize, "train")
    val_vols = _load_split(config.val_manifest, config.normalize, "val")
    test_vols = _load_split(config.test_manifest, config.normalize, "test")
    extents = _common_extents(train_vols + val_vols + test_vols, "dataset")
    slice_count = slice_count_for(extents, config.axis)
    model_config = config.model_config(task)

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with output_lock(out):
        resolved = config.to_dict()
        (out / "config.json").write_text(json.dumps(resolved, indent=2) + "\n")
        print("resolved config:")
        print(json.dumps(resolved, indent=2))
        print(f"volumes: {len(train_vols)} train / {len(val_vols)} val / {len(test_vols)} test; "
              f"extents {extents}; K={slice_count} along {config.axis}")

        base_seed = config.train.seed
        seeds = [base_seed + i for i in range(args.seeds)] if args.seeds else [base_seed]
        reports = []
        for seed in seeds:
            model = SliceSetModel(model_config, slice_count)
            he_init(model, seed=seed)
            if args.pretrained:
                archive = WeightArchive.load(args.pretrained)
                model, report = import_encoder(
                    model, archive, freeze_batchnorm_stats=args.freeze_bn_stats)
                print(f"pretrained import from {args.pretrained}:")
                print(report.summary())
            train_cfg = replace(config.train, seed=seed)
            log_path = out / f"epochs_seed{seed}.jsonl"

            def show(rec, total=train_cfg.epochs):
                print(f"epoch {rec['epoch']}/{total}  train_loss={rec['train_loss']:.5f}  "
                      f"val_metric={rec['val_metric']:.5f}", flush=True)

            result = train(model, train_vols, val_vols, train_cfg, config.optimizer,
                           log_path=log_path, progress=show)
            result.best.restore(model)
            metadata = {
                "kind": CHECKPOINT_METADATA_KIND,
                "model_config": json.dumps(model_config_to_dict(model_config), sort_keys=True),
                "slice_count": str(slice_count),
                "extents": ",".join(str(e) for e in extents),
                "normalize": "true" if config.normalize else "false",
                "task": task,
                "epoch": str(result.best.epoch),
                "val_metric": repr(result.best.val_metric),
                "seed": str(seed),
            }
            ckpt_path = out / f"checkpoint_seed{seed}.ssnw"
            export_weights(model, metadata).save(ckpt_path)
            report = evaluate(model, test_vols)
            (out / f"eval_seed{seed}.json").write_text(report.to_json() + "\n")
            print(f"seed {seed}: best epoch {result.best.epoch} "
                  f"(val {result.best.val_metric:.5f}) -> {ckpt_path.name}")
            print(f"seed {seed} test: {report.summary()}")
            reports.append(report)

        if len(reports) > 1:
            agg = _aggregate(reports)
            (out / "summary.json").write_text(json.dumps(agg, indent=2) + "\n")
            _print_aggregate(agg)
    return 0


def _model_from_checkpoint(archive: WeightArchive) -> tuple[SliceSetModel, dict]:
    meta = archive.metadata
    if meta.get("kind") != CHECKPOINT_METADATA_KIND:
        raise ValueError("archive is not a training checkpoint "
                         f"(metadata kind {meta.get('kind')!r})")
    model_config = model_config_from_dict(json.loads(meta["model_config"]))
    model = SliceSetModel(model_config, int(meta["slice_count"]))
    import_strict(model, archive)
    return model, meta


def cmd_eval(args) -> int:
    entries = read_manifest(args.manifest)
    m_task = manifest_task(entries)
    reports = []
    for ckpt in args.checkpoint:
        archive = WeightArchive.load(ckpt)
        model, meta = _model_from_checkpoint(archive)
        if model.config.task != m_task:
            raise ValueError(f"checkpoint {ckpt} is a {model.config.task} model but manifest "
                             f"{args.manifest} holds {m_task} targets")
        volumes = load_manifest_volumes(args.manifest,
                                        normalize_volumes=meta.get("normalize") == "true")
        report = evaluate(model, volumes)
        print(f"{ckpt}: {report.summary()}")
        print(report.to_json())
        reports.append(report)
    payload = reports[0].to_dict() if len(reports) == 1 else _aggregate(reports)
    if len(reports) > 1:
        _print_aggregate(payload)
    if args.output:
        Path(args.output).write_text(json.dumps(payload, indent=2) + "\n")
    return 0


def cmd_export_weights(args) -> int:
    archive = WeightArchive.load(args.checkpoint)
    if args.encoder_only:
        entries = {k: v for k, v in archive.entries.items() if k.startswith("encoder.")}
        if not entries:
            raise ValueError(f"{args.checkpoint} holds no encoder.* entries")
        metadata = dict(archive.metadata)
        metadata["kind"] = "encoder-export"
        archive = WeightArchive(entries=entries, metadata=metadata)
    archive.save(args.out)
    print(f"wrote {len(archive.entries)} tensors to {args.out}")
    return 0


def cmd_import_weights(args) -> int:
    config = load_run_config(args.config) if args.config else RunConfig()
    config = _apply_overrides(config, args)
    if config.task == "auto":
        raise ValueError("import-weights needs an explicit task (flag --task)")
    extents = tuple(int(x) for x in args.extents.split(","))
    if len(extents) != 3:
        raise ValueError(f"--extents wants three comma-separated integers, got {args.extents!r}")
    slice_count = slice_count_for(extents, config.axis)
    model_config = config.model_config(config.task)
    model = SliceSetModel(model_config, slice_count)
    he_init(model, seed=args.seed if args.seed is not None else 0)

    archive = WeightArchive.load(args.archive)
    if args.strict:
        import_strict(model, archive)
        print(f"strict import: loaded all {len(archive.entries)} tensors")
    else:
        model, report = import_encoder(model, archive,
                                       freeze_batchnorm_stats=args.freeze_bn_stats)
        print(report.summary())

    metadata = {
        "kind": CHECKPOINT_METADATA_KIND,
        "model_config": json.dumps(model_config_to_dict(model_config), sort_keys=True),
        "slice_count": str(slice_count),
        "extents": ",".join(str(e) for e in extents),
        "normalize": "true" if config.normalize else "false",
        "task": config.task,
        "epoch": "0",
        "val_metric": "nan",
        "seed": str(args.seed if args.seed is not None else 0),
    }
    export_weights(model, metadata).save(args.out)
    print(f"wrote initialized model to {args.out}")
    return 0


def cmd_check(args) -> int:
    names = sorted(SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in names:
        report = run_suite(name, seed=args.seed)
        print(report.summary())
        ok = ok and report.passed
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--task", choices=("regression", "classification"))
    p.add_argument("--axis", choices=AXES)
    p.add_argument("--encoder", choices=ENCODER_KINDS)
    p.add_argument("--aggregator", choices=("mean", "attention"))
    p.add_argument("--width-multiplier", type=float, dest="width_multiplier")
    p.add_argument("--min-input", type=int, dest="min_input")
    p.add_argument("--input-channels", type=int, dest="input_channels")
    pos = p.add_mutually_exclusive_group()
    pos.add_argument("--positional", dest="positional_enabled", action="store_const",
                     const=True, help="enable the trainable positional table")
    pos.add_argument("--no-positional", dest="positional_enabled", action="store_const",
                     const=False)
    norm = p.add_mutually_exclusive_group()
    norm.add_argument("--normalize", dest="normalize", action="store_const", const=True)
    norm.add_argument("--no-normalize", dest="normalize", action="store_const", const=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sliceset",
        description="Slice-set networks over 3D volumes: synth, train, eval, "
                    "weight transfer, verification checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blob dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--task", choices=("regression", "classification"), default="regression")
    p.add_argument("--extents", default="16,20,16")
    p.add_argument("--noise-std", type=float, default=0.1, dest="noise_std")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blob-radius", type=int, default=3, dest="blob_radius")
    p.add_argument("--blob-amplitude", type=float, default=2.0, dest="blob_amplitude")
    p.add_argument("--signal-axis", choices=AXES, default="sagittal", dest="signal_axis")
    p.add_argument("--gzip", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a slice-set model from a config + manifests")
    p.add_argument("--config", help="JSON run config (flags override its values)")
    _add_model_flags(p)
    p.add_argument("--train-manifest", dest="train_manifest")
    p.add_argument("--val-manifest", dest="val_manifest")
    p.add_argument("--test-manifest", dest="test_manifest")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--loss", choices=("l1", "mse", "cross_entropy"))
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--momentum", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int,
                   help="run N seeds (base seed, base+1, ...) and report mean ± std")
    p.add_argument("--pretrained", help="weight archive to import into the encoder")
    p.add_argument("--freeze-bn-stats", action="store_true", dest="freeze_bn_stats",
                   help="keep imported batch-norm statistics fixed during finetuning")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoint(s) on a manifest")
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", help="write the (aggregated) report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-weights", help="re-export a checkpoint, optionally encoder-only")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--encoder-only", action="store_true", dest="encoder_only")
    p.set_defaults(func=cmd_export_weights)

    p = sub.add_parser("import-weights",
                       help="build a model, import an archive into it, save a checkpoint")
    p.add_argument("--config", help="JSON run config for the target model")
    _add_model_flags(p)
    p.add_argument("--extents", required=True, help="volume extents a,b,c for the slice count")
    p.add_argument("--archive", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--strict", action="store_true",
                   help="require the archive to cover the model exactly")
    p.add_argument("--freeze-bn-stats", action="store_true", dest="freeze_bn_stats")
    p.set_defaults(func=cmd_import_weights)

    p = sub.add_parser("check", help="run a verification suite")
    p.add_argument("suite", choices=sorted(SUITES) + ["all"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check)

    return parser


def main(argv=None) -> int:
    _cap_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        message = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
        print(f"error: {message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
