"""Command-line surface: config-driven generation, training, evaluation,
probing, and plotting with reproducible run directories.

Config files are TOML with sections [generation], [model], [loss], [train],
[eval], and [run]; unknown sections or keys are rejected so typos fail loudly.
Flags override file values, and every command echoes its fully resolved
configuration into the output directory.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime/NaN abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np

from . import dataio, synthgen, trainer
from . import eval as evaluation
from .errors import ConfigError, DataError, TrainingAbort
from .objective import LossWeights
from .synthgen import GenerationSpec
from .trainer import ExperimentConfig

# ---------------------------------------------------------------------------
# Config schema and strict parsing
# ---------------------------------------------------------------------------

_GENERATION_KEYS = {f.name for f in dataclass_fields(GenerationSpec)} | {"split_fraction"}
_MODEL_KEYS = {
    "shared_dim",
    "specific_dim",
    "conv_channels",
    "rnn_units",
    "prior_hidden",
    "decoder_hidden",
    "classifier_hidden",
    "fusion",
}
_LOSS_KEYS = {f.name for f in dataclass_fields(LossWeights)} | {"orthogonality_baseline"}
_TRAIN_KEYS = {
    "lr_max",
    "lr_min",
    "weight_decay",
    "clip_norm",
    "batch_size",
    "epochs",
    "seed",
    "mc_samples",
    "use_task_loss",
}
_EVAL_KEYS = {"metrics", "knn_k", "mcc_method", "ratios", "tsne_perplexity", "seed"}
_RUN_KEYS = {"command", "data", "train_data", "out", "ablate", "kind"}

SCHEMA = {
    "generation": _GENERATION_KEYS,
    "model": _MODEL_KEYS,
    "loss": _LOSS_KEYS,
    "train": _TRAIN_KEYS,
    "eval": _EVAL_KEYS,
    "run": _RUN_KEYS,
}

ABLATION_FLAGS = {
    "mate-p": "drop_private_kl",
    "mate-s": "drop_shared_kl",
    "mate-r": "drop_reconstruction",
    "mate-c": "drop_alignment",
}


def load_config_file(path: str | Path | None) -> dict:
    """Parse and strictly validate a TOML config file."""
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}")
    validate_config(doc)
    return doc


def validate_config(doc: dict) -> None:
    for section, content in doc.items():
        if section not in SCHEMA:
            raise ConfigError(
                f"unknown config section [{section}]; valid sections: {sorted(SCHEMA)}"
            )
        if not isinstance(content, dict):
            raise ConfigError(f"section [{section}] must be a table")
        unknown = set(content) - SCHEMA[section]
        if unknown:
            raise ConfigError(
                f"unknown config key(s) in [{section}]: {sorted(unknown)}; "
                f"valid keys: {sorted(SCHEMA[section])}"
            )


def _parse_override_value(text: str):
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if "," in text:
        return [_parse_override_value(v.strip()) for v in text.split(",")]
    return text


def apply_overrides(doc: dict, overrides: list[str] | None) -> dict:
    """Apply repeatable --set section.key=value flags."""
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        doc.setdefault(section, {})[key] = _parse_override_value(value)
    validate_config(doc)
    return doc


def _toml_literal(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_literal(v) for v in value) + "]"
    return json.dumps(str(value))


def write_resolved_config(doc: dict, path: Path) -> None:
    lines = []
    for section in sorted(doc):
        content = {k: v for k, v in doc[section].items() if v is not None}
        if not content:
            continue
        lines.append(f"[{section}]")
        for key in sorted(content):
            lines.append(f"{key} = {_toml_literal(content[key])}")
        lines.append("")
    path.write_text("\n".join(lines))


# ---------------------------------------------------------------------------
# Config assembly
# ---------------------------------------------------------------------------


def build_generation_spec(doc: dict, seed: int | None) -> tuple[GenerationSpec, float | None]:
    section = dict(doc.get("generation", {}))
    split_fraction = section.pop("split_fraction", 0.8)
    if "obs_dims" in section:
        section["obs_dims"] = tuple(int(v) for v in section["obs_dims"])
    if seed is not None:
        section["seed"] = seed
    try:
        spec = GenerationSpec(**section)
    except TypeError as exc:
        raise ConfigError(f"bad [generation] value: {exc}")
    spec.validate()
    return spec, split_fraction


def build_experiment_config(
    doc: dict,
    dataset: dataio.MultiModalDataset,
    seed: int | None,
    ablations: list[str] | None,
) -> ExperimentConfig:
    loss_section = dict(doc.get("loss", {}))
    ortho = bool(loss_section.pop("orthogonality_baseline", False))
    try:
        weights = LossWeights(**loss_section)
    except TypeError as exc:
        raise ConfigError(f"bad [loss] value: {exc}")
    for name in ablations or []:
        if name not in ABLATION_FLAGS:
            raise ConfigError(
                f"unknown ablation {name!r}; valid: {sorted(ABLATION_FLAGS)}"
            )
        setattr(weights, ABLATION_FLAGS[name], True)

    model_section = dict(doc.get("model", {}))
    for key in ("prior_hidden", "decoder_hidden"):
        if key in model_section:
            model_section[key] = tuple(int(v) for v in model_section[key])
    train_section = dict(doc.get("train", {}))
    if seed is not None:
        train_section["seed"] = seed
    try:
        config = ExperimentConfig(
            obs_dims=dataset.obs_dims,
            num_classes=dataset.num_classes,
            window_length=dataset.window_length,
            weights=weights,
            orthogonality_baseline=ortho,
            **model_section,
            **train_section,
        )
    except TypeError as exc:
        raise ConfigError(f"bad [model]/[train] value: {exc}")
    config.validate()
    return config


def resolve_manifest(data_path: str | Path, prefer: str = "train") -> Path:
    """Accept a manifest file or a dataset directory."""
    path = Path(data_path)
    if path.is_file():
        return path
    if path.is_dir():
        for candidate in (f"{prefer}_manifest.json", "manifest.json"):
            if (path / candidate).exists():
                return path / candidate
        raise DataError(
            f"no manifest found in {path}; looked for {prefer}_manifest.json and manifest.json"
        )
    raise DataError(f"dataset path does not exist: {path}")


def prepare_out_dir(out: str | Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    doc = apply_overrides(load_config_file(args.config), args.set)
    spec, split_fraction = build_generation_spec(doc, args.seed)
    out = prepare_out_dir(args.out, args.force)

    batch, trajectory, _ = synthgen.generate_dataset(spec)
    synthgen.write_dataset(out, batch, trajectory, spec)

    if split_fraction and 0.0 < split_fraction < 1.0:
        _write_split_manifests(out, batch, trajectory, spec, split_fraction)

    doc.setdefault("generation", {}).update(
        {f.name: getattr(spec, f.name) for f in dataclass_fields(GenerationSpec)}
    )
    doc["generation"]["obs_dims"] = list(spec.obs_dims)
    doc["generation"]["split_fraction"] = split_fraction
    doc.setdefault("run", {}).update({"command": "generate", "out": str(out)})
    write_resolved_config(doc, out / "resolved_config.toml")
    print(f"dataset written to {out}")
    return 0


def _write_split_manifests(out, batch, trajectory, spec, split_fraction):
    rng = np.random.default_rng((spec.seed, 4))
    n = spec.num_windows
    perm = rng.permutation(n)
    cut = int(round(split_fraction * n))
    for name, idx in (("train", perm[:cut]), ("test", perm[cut:])):
        idx = np.sort(idx)
        sub_batch = synthgen.MultiModalBatch(
            modalities=[arr[idx] for arr in batch.modalities], labels=batch.labels[idx]
        )
        sub_traj = synthgen.LatentTrajectory(
            z_c=trajectory.z_c[idx],
            z_s=[z[idx] for z in trajectory.z_s],
            eps_c=trajectory.eps_c[idx],
            eps_s=[e[idx] for e in trajectory.eps_s],
        )
        sub_dir = Path(out) / name
        sub_dir.mkdir(exist_ok=True)
        manifest = synthgen.write_dataset(sub_dir, sub_batch, sub_traj, spec, name=name)
        # surface the split at the dataset root for resolve_manifest
        (Path(out) / f"{name}_manifest.json").write_text(
            json.dumps(_relocated_manifest(manifest, name), indent=2, sort_keys=True) + "\n"
        )


def _relocated_manifest(manifest_path: Path, subdir: str) -> dict:
    doc = json.loads(manifest_path.read_text())
    for entry in doc["modalities"]:
        entry["file"] = f"{subdir}/{entry['file']}"
    doc["labels_file"] = f"{subdir}/{doc['labels_file']}"
    if "latents" in doc:
        doc["latents"] = {k: f"{subdir}/{v}" for k, v in doc["latents"].items()}
    return doc


def cmd_train(args) -> int:
    doc = apply_overrides(load_config_file(args.config), args.set)
    manifest = resolve_manifest(args.data, prefer="train")
    dataset = dataio.load_dataset(manifest)
    config = build_experiment_config(doc, dataset, args.seed, args.ablate)
    out = prepare_out_dir(args.out, args.force)

    doc.setdefault("train", {})["seed"] = config.seed
    doc.setdefault("run", {}).update(
        {"command": "train", "data": str(manifest), "out": str(out)}
    )
    if args.ablate:
        doc["run"]["ablate"] = list(args.ablate)
    write_resolved_config(doc, out / "resolved_config.toml")

    report = trainer.train(config, dataset, out_dir=out)
    final = report.final_metrics.get("total")
    print(f"run complete: {len(report.steps)} steps, final total {final}")
    print(f"checkpoint: {report.checkpoint_path}")
    return 0


_VALID_METRICS = ("mcc", "r2", "cls", "knn")


def _load_run_model(run_dir: str | Path):
    ckpt = Path(run_dir) / "checkpoint.npz" if Path(run_dir).is_dir() else Path(run_dir)
    if not ckpt.exists():
        raise DataError(f"no checkpoint found at {ckpt}")
    return trainer.load_model(ckpt)


def _ground_truth_latents(dataset):
    if "latent_c" not in dataset.latents:
        return None, None
    true_c = dataset.latents["latent_c"]
    true_s = []
    for m in range(len(dataset.modalities)):
        key = f"latent_s_{m}"
        if key not in dataset.latents:
            return None, None
        true_s.append(dataset.latents[key])
    return true_c, true_s


def cmd_eval(args) -> int:
    doc = apply_overrides(load_config_file(args.config), args.set)
    eval_section = doc.get("eval", {})
    metrics = args.metrics.split(",") if args.metrics else eval_section.get(
        "metrics", list(_VALID_METRICS)
    )
    bad = [m for m in metrics if m not in _VALID_METRICS]
    if bad:
        raise ConfigError(f"unknown metrics {bad}; valid: {list(_VALID_METRICS)}")

    model, _ = _load_run_model(args.run)
    dataset = dataio.load_dataset(resolve_manifest(args.data, prefer="test"))
    z_c, z_s = trainer.extract_latents(model, dataset)

    report: dict = {}
    skipped: list[str] = []

    if "mcc" in metrics or "r2" in metrics:
        true_c, true_s = _ground_truth_latents(dataset)
        if true_c is None:
            skipped.extend(m for m in ("mcc", "r2") if m in metrics)
            print("ground-truth latents absent; skipping mcc/r2", file=sys.stderr)
        else:
            method = eval_section.get("mcc_method", "spearman")
            ident = evaluation.identifiability_report(
                z_c, true_c, z_s, true_s, method=method, seed=eval_section.get("seed", 0)
            )
            if "mcc" in metrics:
                report["mcc_shared"] = ident.mcc_shared
                for m, v in enumerate(ident.mcc_specific):
                    report[f"mcc_specific.{m}"] = v
            if "r2" in metrics:
                report["r2_shared"] = ident.r2_shared_subspace

    if "cls" in metrics:
        preds = trainer.predict_labels(model, dataset)
        acc, f1 = evaluation.classification_metrics(preds, dataset.labels)
        report["accuracy"] = acc
        report["macro_f1"] = f1

    if "knn" in metrics:
        feats = evaluation.pooled_features(z_c, z_s)
        if args.train_data:
            train_ds = dataio.load_dataset(resolve_manifest(args.train_data, prefer="train"))
            tr_c, tr_s = trainer.extract_latents(model, train_ds)
            train_feats, train_labels = evaluation.pooled_features(tr_c, tr_s), train_ds.labels
            test_feats, test_labels = feats, dataset.labels
        else:
            half = feats.shape[0] // 2
            train_feats, train_labels = feats[:half], dataset.labels[:half]
            test_feats, test_labels = feats[half:], dataset.labels[half:]
        k = int(eval_section.get("knn_k", 5))
        acc, f1 = evaluation.knn_eval(train_feats, train_labels, test_feats, test_labels, k=k)
        report["knn_accuracy"] = acc
        report["knn_macro_f1"] = f1

    if skipped:
        report["skipped"] = skipped

    out_path = Path(args.out) if args.out else Path(args.run) / "eval_report.json"
    dataio.write_report(report, out_path)
    print(f"report written to {out_path}")
    return 0


def cmd_probe(args) -> int:
    doc = apply_overrides(load_config_file(args.config), args.set)
    eval_section = doc.get("eval", {})
    if args.ratios:
        ratios = tuple(float(r) for r in args.ratios.split(","))
    else:
        ratios = tuple(eval_section.get("ratios", evaluation.DEFAULT_PROBE_RATIOS))

    model, _ = _load_run_model(args.run)
    test_ds = dataio.load_dataset(resolve_manifest(args.data, prefer="test"))
    z_c, z_s = trainer.extract_latents(model, test_ds)
    test_feats = evaluation.pooled_features(z_c, z_s)

    if args.train_data:
        train_ds = dataio.load_dataset(resolve_manifest(args.train_data, prefer="train"))
        tr_c, tr_s = trainer.extract_latents(model, train_ds)
        train_feats, train_labels = evaluation.pooled_features(tr_c, tr_s), train_ds.labels
        test_x, test_y = test_feats, test_ds.labels
    else:
        half = test_feats.shape[0] // 2
        train_feats, train_labels = test_feats[:half], test_ds.labels[:half]
        test_x, test_y = test_feats[half:], test_ds.labels[half:]

    probe = evaluation.linear_probe(
        train_feats,
        train_labels,
        test_x,
        test_y,
        ratios=ratios,
        seed=int(eval_section.get("seed", 0)),
    )
    for note in probe.warnings:
        print(f"warning: {note}", file=sys.stderr)

    out_path = Path(args.out) if args.out else Path(args.run) / "probe_report.json"
    dataio.write_report(probe.to_json_dict(), out_path)
    print(f"report written to {out_path}")
    return 0


def cmd_plot(args) -> int:
    doc = apply_overrides(load_config_file(args.config), args.set)
    if args.kind != "tsne":
        raise ConfigError(f"unknown plot kind {args.kind!r}; valid kinds: tsne")
    eval_section = doc.get("eval", {})

    model, _ = _load_run_model(args.run)
    dataset = dataio.load_dataset(resolve_manifest(args.data, prefer="test"))
    z_c, _ = trainer.extract_latents(model, dataset)
    feats = z_c.mean(axis=1)

    out_path = Path(args.out) if args.out else Path(args.run) / "tsne.png"
    seed = args.seed if args.seed is not None else int(eval_section.get("seed", 0))
    evaluation.emit_tsne_plot(
        feats,
        dataset.labels,
        out_path,
        seed=seed,
        perplexity=float(eval_section.get("tsne_perplexity", 30.0)),
    )
    print(f"plot written to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mate",
        description="Multi-modal temporal disentanglement: generate, train, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument(
            "--set",
            action="append",
            metavar="SECTION.KEY=VALUE",
            help="override one config value (repeatable)",
        )

    p = sub.add_parser("generate", help="generate a synthetic dataset with ground truth")
    add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a dataset manifest")
    add_common(p)
    p.add_argument("--data", required=True, help="manifest file or dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument(
        "--ablate",
        action="append",
        choices=sorted(ABLATION_FLAGS),
        help="apply a loss-term ablation (repeatable)",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    add_common(p)
    p.add_argument("--run", required=True, help="run directory or checkpoint file")
    p.add_argument("--data", required=True)
    p.add_argument("--train-data", dest="train_data", help="features for KNN fitting")
    p.add_argument("--metrics", help="comma list from: mcc,r2,cls,knn")
    p.add_argument("--out", help="report path (default: <run>/eval_report.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="linear probing at several label ratios")
    add_common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--train-data", dest="train_data")
    p.add_argument("--ratios", help="comma list, default 1.0,0.1,0.05,0.01")
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("plot", help="emit visualization plots")
    add_common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", default="tsne")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
