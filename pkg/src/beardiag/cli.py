"""Command-line operator surface.

Subcommands: gen-data (synthetic dataset + reference store), train
(classifier pre-training), eval (metrics, leave-source-out holdouts,
channel ablations, feature dumps), diagnose (single recording to class,
confidence, and a template text response), align-init (alignment layer
from a checkpoint plus fault descriptions), and inspect (retained-energy
and parameter sweeps over candidate spectrum lengths).

Exit codes: 0 ok, 2 configuration, 3 I/O or file format, 4 unusable
training data, 5 missing fault-free reference.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import alignment as al
from . import evaluation as ev
from . import fcn
from . import synth_data as sd
from .errors import (
    BeardiagError,
    ConfigError,
    DataError,
    FormatError,
    MissingReferenceError,
    PersistenceError,
)
from .reference_store import load as load_store
from .signal_core import (
    DcnConfig,
    FrequencyRep,
    SignalSegment,
    dcn,
    read_vseg,
    unify,
)
from .synth_data import DATASET_CFG_FILE, MANIFEST_FILE, STORE_DIR

TASKS = ("A", "B", "C", "D")
PARAM_TARGET_24K = 0.9747e6  # design anchor for the default architecture

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_NO_REFERENCE = 5


# ---------------------------------------------------------------------------
# flat key=value config files


def parse_kv_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno + 1}: expected key=value, got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def parse_rigs_file(path) -> list[sd.RigSpec]:
    """Blank-line separated blocks of key=value lines, one block per rig."""
    blocks: list[dict[str, str]] = [{}]
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        line = raw.strip()
        if not line:
            if blocks[-1]:
                blocks.append({})
            continue
        if line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno + 1}: expected key=value, got {raw!r}")
        blocks[-1][key.strip()] = value.strip()
    rigs = []
    for block in blocks:
        if not block:
            continue
        try:
            rigs.append(
                sd.RigSpec(
                    source_tag=block["source_tag"],
                    sample_rate_hz=int(block["sample_rate_hz"]),
                    shaft_rate_hz=float(block["shaft_rate_hz"]),
                    resonance_hz=float(block["resonance_hz"]),
                    resonance_decay=float(block["resonance_decay"]),
                    load_scale=float(block.get("load_scale", "1.0")),
                    sensor_gain=float(block.get("sensor_gain", "1.0")),
                    noise_sigma=float(block.get("noise_sigma", "0.05")),
                )
            )
        except KeyError as exc:
            raise ConfigError(f"{path}: rig block is missing key {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"{path}: bad rig value ({exc})") from exc
    if not rigs:
        raise ConfigError(f"{path}: no rig blocks found")
    return rigs


_MODEL_KEYS = {
    "stem_kernel": int, "stem_stride": int, "stem_channels": int,
    "cam_reduction": int, "pool_width": int, "head_pool_width": int,
    "hidden_units": int, "n_classes": int,
    "batchnorm": lambda v: v.lower() in ("1", "true", "yes"),
    "branch_kernels": lambda v: tuple(int(x) for x in v.split(",")),
    "block_widths": lambda v: tuple(int(x) for x in v.split(",")),
}

_TRAIN_KEYS = {
    "epochs": int, "batch_size": int, "lr": float, "weight_decay": float,
    "patience": int, "lr_factor": float, "lr_floor": float,
    "stop_at_val_accuracy": float,
}


def split_settings(kv: dict[str, str]) -> tuple[dict, dict]:
    """Partition a flat config into model kwargs and training kwargs."""
    model_kwargs, train_kwargs = {}, {}
    for key, value in kv.items():
        if key in _MODEL_KEYS:
            model_kwargs[key] = _MODEL_KEYS[key](value)
        elif key in _TRAIN_KEYS:
            train_kwargs[key] = _TRAIN_KEYS[key](value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return model_kwargs, train_kwargs


# ---------------------------------------------------------------------------
# response templates


@dataclass
class ResponseTemplateSet:
    """Per-task prompt templates plus the per-class fault descriptions."""

    templates: dict[str, str]
    descriptions: list[str]

    def __post_init__(self) -> None:
        for task in TASKS:
            if task not in self.templates:
                raise ConfigError(f"missing template for task {task}")
        for task, text in self.templates.items():
            if text.count("#placeholder#") != 1:
                raise ConfigError(
                    f"template {task} must contain exactly one #placeholder#"
                )
        if len(self.descriptions) != fcn.N_CLASSES:
            raise ConfigError(
                f"{len(self.descriptions)} descriptions for {fcn.N_CLASSES} classes"
            )

    def render(self, task: str, label: int) -> str:
        if task not in self.templates:
            raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
        return self.templates[task].replace("#placeholder#", self.descriptions[label])

    @staticmethod
    def anomaly_answer(label: int) -> str:
        return "no" if label == 0 else "yes"


def _asset_path(name: str):
    return resources.files("beardiag").joinpath("assets", name)


def load_templates(template_path=None, descriptions_path=None) -> ResponseTemplateSet:
    tpath = template_path or _asset_path("response_templates.tsv")
    dpath = descriptions_path or _asset_path("fault_descriptions.txt")
    templates = {}
    for line in Path(tpath).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        task, sep, text = line.partition("\t")
        if not sep:
            raise ConfigError(f"{tpath}: template lines must be task<TAB>text")
        templates[task.strip()] = text
    return ResponseTemplateSet(templates, al.load_fault_descriptions(dpath))


# ---------------------------------------------------------------------------
# shared loading helpers


def _load_dataset(data_dir):
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} not found")
    entries = sd.load_manifest(root / MANIFEST_FILE)
    dcn_cfg, seed = sd.read_dataset_cfg(root / DATASET_CFG_FILE)
    store, registry = load_store(root / STORE_DIR)
    return root, entries, dcn_cfg, seed, store, registry


def _print_eval(result: ev.EvalResult, heading: str) -> None:
    print(f"{heading} accuracy: {result.accuracy:.4f}")
    print(f"false alarm rate: {result.alarm_rates.false_alarm:.4f}")
    print(f"missed alarm rate: {result.alarm_rates.missed_alarm:.4f}")
    for tag, acc in result.per_source.items():
        print(f"  source {tag}: accuracy {acc:.4f}")
    if result.n_skipped:
        print(f"warning: {result.n_skipped} samples skipped (missing reference)")


def _write_confusion(result: ev.EvalResult, path) -> None:
    lines = ["\t".join(str(v) for v in row) + "\n" for row in result.confusion]
    Path(path).write_text("".join(lines), encoding="utf-8")
    print(f"confusion matrix written to {path}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    rigs = parse_rigs_file(args.rigs) if args.rigs else sd.default_rigs()
    dcn_cfg = DcnConfig(n_f=args.n_f, beta=args.beta)
    entries, registry, store = sd.build_dataset(
        rigs, sd.default_faults(), args.segments, args.seed, args.out, dcn_cfg=dcn_cfg
    )
    by_split = {s: sum(e.split == s for e in entries) for s in ("train", "val", "test")}
    n_refs = sum(store.count(cid) for cid in store.condition_ids())
    print(f"dataset written to {args.out}")
    print(f"conditions: {len(registry)}")
    print(f"labels: {len({e.label for e in entries})}")
    print(
        f"segments: {len(entries)} "
        f"(train {by_split['train']} / val {by_split['val']} / test {by_split['test']})"
    )
    print(f"fault-free references stored: {n_refs}")
    print(f"aligned spectrum length: {dcn_cfg.n_f} (seed {args.seed})")
    return EXIT_OK


def cmd_train(args) -> int:
    root, entries, dcn_cfg, _, store, _ = _load_dataset(args.data)
    model_kwargs, train_kwargs = ({}, {})
    if args.config:
        model_kwargs, train_kwargs = split_settings(parse_kv_file(args.config))
    config = fcn.FcnConfig(n_f=dcn_cfg.n_f, in_channels=3, **model_kwargs)

    train_entries = [e for e in entries if e.split == "train"]
    val_entries = [e for e in entries if e.split == "val"]
    if not train_entries or not val_entries:
        raise DataError("dataset has an empty train or val split")
    x_train, y_train, _, _ = ev.materialize(
        train_entries, root, store, dcn_cfg, seed=args.seed, variant="full"
    )
    x_val, y_val, _, _ = ev.materialize(
        val_entries, root, store, dcn_cfg, seed=args.seed + 1, variant="full"
    )

    model = fcn.FcnModel(config, seed=args.seed)
    print(f"training classifier: {model.parameter_count()} parameters, "
          f"{len(x_train)} train / {len(x_val)} val samples")
    log = fcn.pretrain(
        model, (x_train, y_train), (x_val, y_val),
        seed=args.seed, log_path=str(args.out) + ".log.tsv", **train_kwargs,
    )
    fcn.save_model(args.out, model, {"dcn_beta": dcn_cfg.beta})
    print(f"checkpoint written to {args.out} ({log.stop_reason}, "
          f"{len(log.epochs)} epochs)")
    print(f"best validation accuracy: {log.best_val_accuracy:.4f} "
          f"(epoch {log.best_epoch})")
    return EXIT_OK


def cmd_eval(args) -> int:
    root, entries, dcn_cfg, _, store, _ = _load_dataset(args.data)
    holdout = [t for t in (args.holdout.split(",") if args.holdout else []) if t]

    if args.ablation or (holdout and not args.ckpt):
        variant = args.ablation or "full"
        model_kwargs, train_kwargs = ({}, {})
        if args.config:
            model_kwargs, train_kwargs = split_settings(parse_kv_file(args.config))
        stop = train_kwargs.pop("stop_at_val_accuracy", None)
        result = ev.ablation_run(
            entries, root, store, dcn_cfg, variant=variant,
            model_config=fcn.FcnConfig(n_f=dcn_cfg.n_f, **model_kwargs),
            holdout_tags=holdout, seed=args.seed,
            stop_at_val_accuracy=stop, **train_kwargs,
        )
        label = f"{variant}" + (f" (holdout {','.join(holdout)})" if holdout else "")
        print(f"variant {label}: best val accuracy "
              f"{result.training.best_val_accuracy:.4f}")
        _print_eval(result.evaluation, "test")
        _write_confusion(result.evaluation, args.confusion_out)
        return EXIT_OK

    if not args.ckpt:
        raise ConfigError("--ckpt is required unless --ablation or --holdout is used")
    model, extras = fcn.load_model(args.ckpt)
    if model.config.n_f != dcn_cfg.n_f:
        raise ConfigError(
            f"checkpoint n_f {model.config.n_f} != dataset n_f {dcn_cfg.n_f}"
        )
    worklist = sd.holdout_subset(entries, holdout) if holdout else entries
    result = ev.evaluate(
        model, worklist, root, store, dcn_cfg, split="test", seed=args.seed
    )
    heading = f"zero-shot ({','.join(holdout)})" if holdout else "test"
    _print_eval(result, heading)
    _write_confusion(result, args.confusion_out)
    if args.dump_features:
        n = ev.dump_features(
            model, worklist, root, store, dcn_cfg, args.dump_features,
            split="test", seed=args.seed,
        )
        print(f"{n} feature rows written to {args.dump_features}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    if args.task not in TASKS:
        raise ConfigError(f"unknown task {args.task!r}; expected one of {TASKS}")
    model, extras = fcn.load_model(args.ckpt)
    store, _ = load_store(args.store)
    dcn_cfg = DcnConfig(n_f=model.config.n_f, beta=extras.get("dcn_beta", 0.01))

    samples, rate = read_vseg(args.signal)
    if samples.size < rate:
        raise FormatError(f"{args.signal}: shorter than one second at {rate} Hz")
    segment = SignalSegment(samples[:rate], rate, condition_id=args.condition)
    query = dcn(segment, dcn_cfg)
    reference = store.lookup(args.condition, seed=args.seed)
    unified = unify(query, FrequencyRep(reference, dcn_cfg.n_f))

    logits = model.classify(unified.channels[None, :, :], train=False)[0]
    shifted = np.exp(logits - logits.max())
    confidence = float(shifted.max() / shifted.sum())
    label = int(logits.argmax())

    templates = load_templates(args.templates, args.descriptions)
    print(f"predicted class: {label} ({templates.descriptions[label]})")
    print(f"confidence: {confidence:.4f}")
    if args.task == "A":
        print(f"answer: {templates.anomaly_answer(label)}")
    print(f"response: {templates.render(args.task, label)}")
    return EXIT_OK


def cmd_align_init(args) -> int:
    model, _ = fcn.load_model(args.ckpt)
    descriptions = (
        al.load_fault_descriptions(args.descriptions)
        if args.descriptions
        else al.load_fault_descriptions(_asset_path("fault_descriptions.txt"))
    )
    vocab = sorted({word for text in descriptions for word in text.lower().split()})
    provider = al.toy_provider(args.hidden, vocab, seed=args.seed)
    layer = al.build_alignment(model, provider, args.tau, descriptions)

    reference = al.init_l3(descriptions, provider, args.tau)
    identity_ok = all(
        np.array_equal(
            layer.project(np.eye(layer.n_classes)[k]).reshape(-1), reference[k]
        )
        for k in range(layer.n_classes)
    )
    al.save_alignment(args.out, layer)
    print(f"alignment layer written to {args.out} "
          f"(classes {layer.n_classes}, tokens {args.tau}, hidden {args.hidden})")
    print(f"one-hot identity: {'PASS' if identity_ok else 'FAIL'}")
    return EXIT_OK if identity_ok else EXIT_CONFIG


def cmd_inspect(args) -> int:
    root, entries, dcn_cfg, _, _, _ = _load_dataset(args.data)
    n_f_values = sorted({int(v) for v in args.nf_sweep.split(",") if v})
    if not n_f_values:
        raise ConfigError("--nf-sweep needs at least one value")

    step = max(1, len(entries) // args.max_segments)
    segments = []
    for entry in entries[::step][: args.max_segments]:
        samples, rate = read_vseg(root / entry.path)
        segments.append(SignalSegment(samples[:rate], rate, condition_id=entry.condition_id))
    curve = ev.energy_fraction_curve(segments, n_f_values)

    print(f"{'n_f':>8}  {'energy fraction':>16}  {'parameters':>12}")
    for n_f, fraction in curve:
        try:
            params = str(fcn.FcnConfig(n_f=n_f).parameter_count())
        except ConfigError:
            params = "-"  # default architecture collapses at this length
        print(f"{n_f:>8}  {fraction:>16.6f}  {params:>12}")
    if 24000 in n_f_values:
        params_24k = fcn.FcnConfig(n_f=24000).parameter_count()
        print(f"design target at n_f=24000: {PARAM_TARGET_24K / 1e6:.4f}M "
              f"(this build: {params_24k / 1e6:.4f}M)")
    print(f"(energy fractions averaged over {len(segments)} segments)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="beardiag",
        description="Bearing fault diagnosis: aligned spectra, reference "
                    "residuals, and a channel-attention classifier.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="build a synthetic dataset and reference store")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--rigs", help="rig definition file (default: built-in grid)")
    p.add_argument("--segments", type=int, default=60, help="segments per (rig, class) cell")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-f", dest="n_f", type=int, default=6000,
                   help="aligned spectrum length")
    p.add_argument("--beta", type=float, default=0.01, help="amplitude scale")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pre-train the fault classifier")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--config", help="flat key=value training/model config file")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, holdout, or ablation")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="checkpoint to evaluate")
    p.add_argument("--holdout", help="comma-separated source tags for leave-source-out")
    p.add_argument("--ablation", choices=ev.VARIANTS,
                   help="train and evaluate a representation variant")
    p.add_argument("--dump-features", help="write encoder features TSV here")
    p.add_argument("--confusion-out", default="confusion.tsv")
    p.add_argument("--config", help="training config for --ablation/--holdout runs")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="diagnose one recording and render a response")
    p.add_argument("--signal", required=True, help="VSEG recording")
    p.add_argument("--condition", type=int, required=True, help="working condition id")
    p.add_argument("--store", required=True, help="reference store directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True, help="A=anomaly, B=diagnosis, "
                   "C=maintenance, D=risk")
    p.add_argument("--templates", help="override response template file")
    p.add_argument("--descriptions", help="override fault description file")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("align-init", help="initialize the alignment layer from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--descriptions", help="fault description file (default asset)")
    p.add_argument("--tau", type=int, default=8, help="token length")
    p.add_argument("--hidden", type=int, default=64, help="embedding width")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="alignment checkpoint output path")
    p.set_defaults(func=cmd_align_init)

    p = sub.add_parser("inspect", help="energy-fraction and parameter sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--nf-sweep", default="6000,12000,24000,48000")
    p.add_argument("--max-segments", type=int, default=48,
                   help="segments sampled for the energy sweep")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MissingReferenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_REFERENCE
    except (FormatError, PersistenceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BeardiagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
