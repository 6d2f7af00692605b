"""End-to-end optimization loop with deterministic seeding, cosine LR
annealing, NaN aborts, and bit-exact checkpoint round trips.

The composite model couples per-modality encoders and decoders with one
shared flow prior, one private flow prior per modality, and a classifier
head. Training minimizes the weighted total from :mod:`mate.objective` with
AdamW, logging one loss-breakdown row per step to a metrics CSV.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import objective
from .dataio import MultiModalDataset
from .errors import CheckpointError, ConfigError, TrainingAbort
from .nets import (
    Classifier,
    ModalityDecoder,
    ModalityEncoder,
    PosteriorParams,
    fuse_shared,
    reparameterize,
)
from .objective import LossBreakdown, LossWeights
from .priors import FlowPrior, private_prior_log_density, shared_prior_log_density


@dataclass
class ExperimentConfig:
    """Full declarative description of one training run."""

    obs_dims: tuple[int, ...] = (16, 16)
    num_classes: int = 4
    window_length: int = 64
    shared_dim: int = 4
    specific_dim: int = 4
    conv_channels: int = 150
    rnn_units: int = 300
    prior_hidden: tuple[int, ...] = (128, 128, 128)
    decoder_hidden: tuple[int, ...] = ()
    classifier_hidden: int = 128
    fusion: str = "first"
    weights: LossWeights = field(default_factory=LossWeights)
    use_task_loss: bool = True
    orthogonality_baseline: bool = False
    mc_samples: int = 1
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 0.05
    clip_norm: float = 5.0
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    dataset_path: str | None = None

    def validate(self) -> None:
        if self.lr_min > self.lr_max:
            raise ConfigError(f"lr_min {self.lr_min} > lr_max {self.lr_max}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.fusion not in ("first", "mean"):
            raise ConfigError(f"unknown fusion strategy {self.fusion!r}")
        self.weights.validate()

    def to_json_dict(self) -> dict:
        doc = asdict(self)
        doc["obs_dims"] = list(self.obs_dims)
        doc["prior_hidden"] = list(self.prior_hidden)
        doc["decoder_hidden"] = list(self.decoder_hidden)
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        doc["obs_dims"] = tuple(doc["obs_dims"])
        doc["prior_hidden"] = tuple(doc["prior_hidden"])
        doc["decoder_hidden"] = tuple(doc["decoder_hidden"])
        doc["weights"] = LossWeights(**doc["weights"])
        return cls(**doc)


@dataclass
class ForwardOutput:
    encoder_outputs: list
    shared_samples: list[Tensor]  # per-modality z^{c_m} draws
    z_c: Tensor  # fused shared sample
    z_s: list[Tensor]
    reconstructions: list[Tensor]
    logits: Tensor | None


class MateModel(nn.Module):
    """Encoders, decoders, flow priors, and the classifier for M modalities."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        config.validate()
        self.config = config
        n_c, n_s = config.shared_dim, config.specific_dim
        self.encoders = nn.ModuleList(
            ModalityEncoder(c, n_c, n_s, config.conv_channels, config.rnn_units)
            for c in config.obs_dims
        )
        self.decoders = nn.ModuleList(
            ModalityDecoder(n_c, n_s, c, config.decoder_hidden) for c in config.obs_dims
        )
        self.shared_prior = FlowPrior(n_c, context_dim=n_c, hidden=config.prior_hidden)
        self.private_priors = nn.ModuleList(
            FlowPrior(n_s, context_dim=n_s + n_c, hidden=config.prior_hidden)
            for _ in config.obs_dims
        )
        self.classifier = Classifier(
            n_c + n_s * len(config.obs_dims), config.num_classes, config.classifier_hidden
        )

    @property
    def num_modalities(self) -> int:
        return len(self.encoders)

    def forward(
        self, xs: Sequence[Tensor], generator: torch.Generator | None = None
    ) -> ForwardOutput:
        enc = [encoder(x) for encoder, x in zip(self.encoders, xs)]
        shared_samples = []
        z_s = []
        for out in enc:
            noise = torch.randn(out.shared.mean.shape, generator=generator)
            shared_samples.append(reparameterize(out.shared, noise))
            noise = torch.randn(out.specific.mean.shape, generator=generator)
            z_s.append(reparameterize(out.specific, noise))
        z_c = fuse_shared(shared_samples, self.config.fusion)
        recons = [dec(z_c, z) for dec, z in zip(self.decoders, z_s)]
        logits = self.classifier(z_c, z_s) if self.config.use_task_loss else None
        return ForwardOutput(enc, shared_samples, z_c, z_s, recons, logits)

    def fused_shared_posterior(self, enc_outputs) -> PosteriorParams:
        if self.config.fusion == "first":
            return enc_outputs[0].shared
        mean = torch.stack([o.shared.mean for o in enc_outputs]).mean(dim=0)
        log_var = torch.stack([o.shared.log_var for o in enc_outputs]).mean(dim=0)
        return PosteriorParams(mean, log_var)

    def compute_losses(
        self,
        xs: Sequence[Tensor],
        labels: Tensor | None,
        generator: torch.Generator | None = None,
        create_graph: bool = True,
    ) -> LossBreakdown:
        cfg = self.config
        out = self(xs, generator)

        recon = objective.reconstruction_loss(list(xs), out.reconstructions)
        align = objective.shared_alignment_loss(out.shared_samples, cfg.weights.temperature)

        shared_post = self.fused_shared_posterior(out.encoder_outputs)
        if cfg.weights.drop_shared_kl:
            shared_kl = torch.zeros(())
        else:
            shared_kl = objective.kl_divergence_mc(
                shared_post,
                lambda z: shared_prior_log_density(self.shared_prior, z, create_graph).total,
                num_samples=cfg.mc_samples,
                generator=generator,
            )

        private_kls = []
        drop_private = cfg.weights.drop_private_kl or cfg.orthogonality_baseline
        for m, enc_out in enumerate(out.encoder_outputs):
            if drop_private:
                private_kls.append(torch.zeros(()))
                continue
            prior = self.private_priors[m]
            private_kls.append(
                objective.kl_divergence_mc(
                    enc_out.specific,
                    lambda z, p=prior: private_prior_log_density(p, z, out.z_c, create_graph).total,
                    num_samples=cfg.mc_samples,
                    generator=generator,
                )
            )

        task = None
        if cfg.use_task_loss and labels is not None and out.logits is not None:
            task = objective.task_loss(out.logits, labels)

        ortho = None
        if cfg.orthogonality_baseline:
            ortho = objective.orthogonality_penalty(out.z_c, out.z_s)

        weights = cfg.weights
        if cfg.orthogonality_baseline and not weights.drop_private_kl:
            weights = replace(weights, drop_private_kl=True)
        return objective.total_loss(
            recon, shared_kl, private_kls, align, task, weights, ortho=ortho
        )


@dataclass
class TrainReport:
    steps: list[dict]
    checkpoint_path: Path | None
    wall_seconds: float
    final_metrics: dict
    metrics_path: Path | None = None


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Half-period cosine from lr_max at step 0 to lr_min at the final step."""
    if total_steps <= 1:
        return lr_max
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


def _dataset_tensors(dataset: MultiModalDataset) -> tuple[list[Tensor], Tensor]:
    xs = [torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)) for arr in dataset.modalities]
    labels = torch.from_numpy(np.ascontiguousarray(dataset.labels, dtype=np.int64))
    return xs, labels


def _check_compat(config: ExperimentConfig, dataset: MultiModalDataset) -> None:
    if dataset.obs_dims != tuple(config.obs_dims):
        raise ConfigError(
            f"dataset channels {dataset.obs_dims} != configured obs_dims {tuple(config.obs_dims)}"
        )
    if dataset.window_length != config.window_length:
        raise ConfigError(
            f"dataset window {dataset.window_length} != configured {config.window_length}"
        )
    if dataset.num_classes != config.num_classes and config.use_task_loss:
        raise ConfigError(
            f"dataset has {dataset.num_classes} classes, config expects {config.num_classes}"
        )


def _write_metrics_csv(rows: list[dict], path: Path) -> None:
    if not rows:
        path.write_text("")
        return
    fieldnames = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


class _RunState:
    """Mutable training state threaded through train/resume."""

    def __init__(self, model: MateModel, config: ExperimentConfig):
        self.model = model
        self.config = config
        self.optimizer = torch.optim.AdamW(
            model.parameters(),
            lr=config.lr_max,
            betas=(0.9, 0.999),
            eps=1e-8,
            weight_decay=config.weight_decay,
        )
        self.torch_gen = torch.Generator()
        self.np_rng = np.random.default_rng()
        self.global_step = 0
        self.epoch = 0


def _fresh_state(config: ExperimentConfig) -> _RunState:
    torch.manual_seed(config.seed)
    model = MateModel(config)
    state = _RunState(model, config)
    state.torch_gen.manual_seed(config.seed + 0x5EED)
    state.np_rng = np.random.default_rng((config.seed, 3))
    return state


def _run_loop(
    state: _RunState,
    dataset: MultiModalDataset,
    out_dir: Path | None,
    stop_epoch: int | None = None,
) -> TrainReport:
    config = state.config
    _check_compat(config, dataset)
    xs_all, labels_all = _dataset_tensors(dataset)
    n = dataset.num_windows
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    last_epoch = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)

    model = state.model
    model.train()
    rows: list[dict] = []
    start = time.monotonic()

    for epoch in range(state.epoch, last_epoch):
        order = state.np_rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = torch.from_numpy(order[b * config.batch_size : (b + 1) * config.batch_size])
            xs = [x[idx] for x in xs_all]
            labels = labels_all[idx]

            lr = cosine_lr(state.global_step, total_steps, config.lr_max, config.lr_min)
            for group in state.optimizer.param_groups:
                group["lr"] = lr

            breakdown = model.compute_losses(xs, labels, generator=state.torch_gen)
            if not torch.isfinite(breakdown.total):
                raise TrainingAbort(
                    f"non-finite total loss at epoch {epoch} batch {b} "
                    f"(global step {state.global_step}): {breakdown.to_row()}",
                    batch_index=b,
                    components=breakdown.to_row(),
                )

            state.optimizer.zero_grad(set_to_none=True)
            breakdown.total.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
            state.optimizer.step()

            rows.append({"step": state.global_step, **breakdown.to_row()})
            state.global_step += 1
        state.epoch = epoch + 1

    wall = time.monotonic() - start
    model.eval()

    checkpoint_path = None
    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = out_dir / "checkpoint.npz"
        save_checkpoint(checkpoint_path, state)
        metrics_path = out_dir / "metrics.csv"
        _write_metrics_csv(rows, metrics_path)

    final = rows[-1] if rows else {}
    return TrainReport(
        steps=rows,
        checkpoint_path=checkpoint_path,
        wall_seconds=wall,
        final_metrics=dict(final),
        metrics_path=metrics_path,
    )


def train(
    config: ExperimentConfig,
    dataset: MultiModalDataset,
    out_dir: str | Path | None = None,
    stop_epoch: int | None = None,
) -> TrainReport:
    """Optimize the model on a dataset per the configuration.

    Seeds every random source (weight init, batch order, reparameterization
    noise) from ``config.seed``; identical config and dataset give identical
    metrics. Writes ``checkpoint.npz`` and ``metrics.csv`` when ``out_dir``
    is given. ``stop_epoch`` halts early (for later resume) while keeping the
    LR schedule anchored to ``config.epochs``.
    """
    config.validate()
    state = _fresh_state(config)
    return _run_loop(state, dataset, Path(out_dir) if out_dir is not None else None, stop_epoch)


def train_model(
    config: ExperimentConfig, dataset: MultiModalDataset, out_dir: str | Path | None = None
) -> tuple[MateModel, TrainReport]:
    """Like :func:`train` but also hands back the trained model."""
    config.validate()
    state = _fresh_state(config)
    report = _run_loop(state, dataset, Path(out_dir) if out_dir is not None else None)
    return state.model, report


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, state: _RunState) -> None:
    arrays: dict[str, np.ndarray] = {}
    arrays["config/json"] = np.frombuffer(
        json.dumps(state.config.to_json_dict()).encode(), dtype=np.uint8
    )
    for name, tensor in state.model.state_dict().items():
        arrays[f"model/{name}"] = tensor.detach().cpu().numpy()

    opt_state = state.optimizer.state_dict()["state"]
    # AdamW state indexes parameters in construction order; a single param
    # group over model.parameters() matches named_parameters order.
    trainable = [n for n, _ in state.model.named_parameters()]
    for i, name in enumerate(trainable):
        if i in opt_state:
            entry = opt_state[i]
            arrays[f"optim/{name}/exp_avg"] = entry["exp_avg"].cpu().numpy()
            arrays[f"optim/{name}/exp_avg_sq"] = entry["exp_avg_sq"].cpu().numpy()
            step = entry["step"]
            arrays[f"optim/{name}/step"] = np.asarray(
                float(step.item() if isinstance(step, Tensor) else step)
            )
    arrays["rng/torch"] = state.torch_gen.get_state().numpy()
    arrays["rng/numpy"] = np.frombuffer(
        json.dumps(state.np_rng.bit_generator.state).encode(), dtype=np.uint8
    )
    arrays["meta/global_step"] = np.asarray(state.global_step, dtype=np.int64)
    arrays["meta/epoch"] = np.asarray(state.epoch, dtype=np.int64)
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> dict:
    """Raw checkpoint contents: config dict plus named arrays."""
    try:
        with np.load(path) as archive:
            arrays = {k: archive[k] for k in archive.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "config/json" not in arrays:
        raise CheckpointError(f"{path}: missing config entry")
    config = json.loads(bytes(arrays.pop("config/json")).decode())
    return {"config": config, "arrays": arrays}


def load_model(path: str | Path) -> tuple[MateModel, ExperimentConfig]:
    """Rebuild a model from a checkpoint for evaluation."""
    raw = load_checkpoint(path)
    config = ExperimentConfig.from_json_dict(raw["config"])
    model = MateModel(config)
    state_dict = {
        k.removeprefix("model/"): torch.from_numpy(v)
        for k, v in raw["arrays"].items()
        if k.startswith("model/")
    }
    try:
        model.load_state_dict(state_dict)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint incompatible with config: {exc}") from exc
    model.eval()
    return model, config


_RESUMABLE_OVERRIDES = {
    "batch_size",
    "epochs",
    "lr_max",
    "lr_min",
    "weight_decay",
    "clip_norm",
    "mc_samples",
    "dataset_path",
}


def resume(
    checkpoint_path: str | Path,
    dataset: MultiModalDataset,
    overrides: dict | None = None,
    out_dir: str | Path | None = None,
) -> TrainReport:
    """Continue a run from a checkpoint, restoring optimizer and RNG state.

    Only optimization-schedule fields may be overridden; structural changes
    (dims, modalities) raise :class:`CheckpointError`.
    """
    raw = load_checkpoint(checkpoint_path)
    config = ExperimentConfig.from_json_dict(raw["config"])
    if overrides:
        bad = set(overrides) - _RESUMABLE_OVERRIDES
        if bad:
            raise CheckpointError(f"cannot override structural fields on resume: {sorted(bad)}")
        config = replace(config, **overrides)
    config.validate()

    model = MateModel(config)
    arrays = raw["arrays"]
    state_dict = {
        k.removeprefix("model/"): torch.from_numpy(arrays[k])
        for k in arrays
        if k.startswith("model/")
    }
    try:
        model.load_state_dict(state_dict)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint incompatible: {exc}") from exc

    state = _RunState(model, config)
    opt_state = state.optimizer.state_dict()
    trainable = [n for n, _ in model.named_parameters()]
    for i, name in enumerate(trainable):
        key = f"optim/{name}/exp_avg"
        if key in arrays:
            opt_state["state"][i] = {
                "step": torch.tensor(float(arrays[f"optim/{name}/step"])),
                "exp_avg": torch.from_numpy(arrays[key].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"optim/{name}/exp_avg_sq"].copy()),
            }
    state.optimizer.load_state_dict(opt_state)
    state.torch_gen.set_state(torch.from_numpy(arrays["rng/torch"].copy()))
    state.np_rng = np.random.default_rng()
    state.np_rng.bit_generator.state = json.loads(bytes(arrays["rng/numpy"]).decode())
    state.global_step = int(arrays["meta/global_step"])
    state.epoch = int(arrays["meta/epoch"])
    return _run_loop(state, dataset, Path(out_dir) if out_dir is not None else None)


# ---------------------------------------------------------------------------
# Evaluation-side helpers
# ---------------------------------------------------------------------------


@torch.no_grad()
def extract_latents(
    model: MateModel, dataset: MultiModalDataset, batch_size: int = 256
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Posterior means for the whole dataset: fused z^c and each z^{s_m}.

    Means (not samples) are the evaluation features, removing sampling noise.
    """
    model.eval()
    xs_all, _ = _dataset_tensors(dataset)
    n = dataset.num_windows
    z_c_parts, z_s_parts = [], [[] for _ in range(model.num_modalities)]
    for start in range(0, n, batch_size):
        xs = [x[start : start + batch_size] for x in xs_all]
        enc = [encoder(x) for encoder, x in zip(model.encoders, xs)]
        fused = model.fused_shared_posterior(enc)
        z_c_parts.append(fused.mean.numpy())
        for m, out in enumerate(enc):
            z_s_parts[m].append(out.specific.mean.numpy())
    z_c = np.concatenate(z_c_parts)
    z_s = [np.concatenate(parts) for parts in z_s_parts]
    return z_c, z_s


@torch.no_grad()
def predict_labels(
    model: MateModel, dataset: MultiModalDataset, batch_size: int = 256
) -> np.ndarray:
    """Classifier predictions from posterior means."""
    model.eval()
    xs_all, _ = _dataset_tensors(dataset)
    n = dataset.num_windows
    preds = []
    for start in range(0, n, batch_size):
        xs = [x[start : start + batch_size] for x in xs_all]
        enc = [encoder(x) for encoder, x in zip(model.encoders, xs)]
        fused = model.fused_shared_posterior(enc)
        z_s = [out.specific.mean for out in enc]
        logits = model.classifier(fused.mean, z_s)
        preds.append(logits.argmax(dim=1).numpy())
    return np.concatenate(preds)
