"""Dependent-latent synthetic data generation with stored ground truth.

A shared latent sequence drives per-modality specific latent sequences
(current shared state feeds each specific transition, scaled by
``dependency_strength``), and each modality observes an invertible nonlinear
mix of (shared, specific) latents. Everything is a pure function of
(spec, seed), so repeated calls are bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataio
from .errors import ConfigError

LEAKY_SLOPE = 0.2


def _leaky(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def _inv_leaky(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, x, x / slope)


@dataclass(frozen=True)
class GenerationSpec:
    """Declarative description of one synthetic dataset."""

    num_modalities: int = 2
    shared_dim: int = 4
    specific_dim: int = 4
    seq_len: int = 64
    num_windows: int = 256
    obs_dims: tuple[int, ...] = (16, 16)
    lag: int = 1
    transition_kind: str = "nonlinear-mlp"  # or "linear"
    dependency_strength: float = 1.0
    noise_scale: float = 1.0
    noise_kind: str = "gaussian"  # or "uniform"
    num_classes: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.num_modalities < 2:
            raise ConfigError("num_modalities must be >= 2")
        if min(self.shared_dim, self.specific_dim, self.seq_len, self.num_windows) < 1:
            raise ConfigError("latent dims, seq_len and num_windows must be positive")
        if self.lag != 1:
            raise ConfigError("only lag 1 transitions are supported")
        if self.transition_kind not in ("linear", "nonlinear-mlp"):
            raise ConfigError(f"unknown transition_kind {self.transition_kind!r}")
        if self.noise_kind not in ("gaussian", "uniform"):
            raise ConfigError(f"unknown noise_kind {self.noise_kind!r}")
        if self.dependency_strength < 0:
            raise ConfigError("dependency_strength must be >= 0")
        if self.noise_scale <= 0:
            raise ConfigError("noise_scale must be positive")
        if len(self.obs_dims) != self.num_modalities:
            raise ConfigError(
                f"obs_dims has {len(self.obs_dims)} entries for {self.num_modalities} modalities"
            )
        latent = self.shared_dim + self.specific_dim
        for m, d in enumerate(self.obs_dims):
            if d < latent:
                raise ConfigError(
                    f"obs_dims[{m}]={d} < shared_dim + specific_dim = {latent}; "
                    "mixing must be injective on latents"
                )
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")


@dataclass
class LatentTrajectory:
    """Ground-truth latent sequences and the noises that drove them."""

    z_c: np.ndarray  # [N, T, n_c]
    z_s: list[np.ndarray]  # per modality [N, T, n_s]
    eps_c: np.ndarray  # [N, T, n_c], unit-scale draws
    eps_s: list[np.ndarray]


@dataclass
class MultiModalBatch:
    """Observed windows per modality plus integer labels."""

    modalities: list[np.ndarray]  # each [N, T, C_m]
    labels: np.ndarray  # [N]


# ---------------------------------------------------------------------------
# Transitions
# ---------------------------------------------------------------------------


@dataclass
class LinearMap:
    weight: np.ndarray  # [in, out]

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return u @ self.weight


@dataclass
class MlpMap:
    """Bias-free two-layer map with LeakyReLU, contractive by construction."""

    w1: np.ndarray
    w2: np.ndarray

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return _leaky(u @ self.w1) @ self.w2


@dataclass
class LatentTransition:
    """Sampled transition maps: shared is n_c -> n_c, each specific is
    (n_s + n_c) -> n_s with the shared block scaled by dependency_strength."""

    shared: LinearMap | MlpMap
    specific: list[LinearMap | MlpMap]


def _scaled_matrix(rng: np.random.Generator, d_in: int, d_out: int, gain: float) -> np.ndarray:
    w = rng.standard_normal((d_in, d_out))
    spectral = np.linalg.norm(w, 2)
    return w * (gain / spectral)


def sample_transition(spec: GenerationSpec, rng: np.random.Generator) -> LatentTransition:
    """Draw transition parameters; the map is a contraction in the previous
    state so the latent chain stays stable over long horizons."""
    n_c, n_s = spec.shared_dim, spec.specific_dim
    if spec.transition_kind == "linear":
        shared = LinearMap(_scaled_matrix(rng, n_c, n_c, gain=0.7))
        specific = [
            LinearMap(
                np.concatenate(
                    [
                        _scaled_matrix(rng, n_s, n_s, gain=0.7),
                        _scaled_matrix(rng, n_c, n_s, gain=0.8),
                    ]
                )
            )
            for _ in range(spec.num_modalities)
        ]
        return LatentTransition(shared, specific)

    hidden = 32

    def mlp(d_in: int, d_out: int, gain: float) -> MlpMap:
        w1 = _scaled_matrix(rng, d_in, hidden, gain=1.0)
        w2 = _scaled_matrix(rng, hidden, d_out, gain=gain)
        return MlpMap(w1, w2)

    shared = mlp(n_c, n_c, gain=0.9)
    specific = [mlp(n_s + n_c, n_s, gain=0.9) for _ in range(spec.num_modalities)]
    return LatentTransition(shared, specific)


def _draw_noise(rng: np.random.Generator, shape: tuple, kind: str) -> np.ndarray:
    if kind == "gaussian":
        return rng.standard_normal(shape)
    # unit-variance uniform
    return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=shape)


def sample_latent_process(
    spec: GenerationSpec, transition: LatentTransition | None = None
) -> LatentTrajectory:
    """Roll out the shared and specific latent sequences.

    z_c[t] = f_c(z_c[t-1]) + noise_scale * eps_c[t]
    z_s[t] = f_m(concat(z_s[t-1], dependency_strength * z_c[t])) + noise_scale * eps_s[t]

    with z_1 standard normal and eps stored at unit scale.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if transition is None:
        transition = sample_transition(spec, rng)

    n, t_len = spec.num_windows, spec.seq_len
    n_c, n_s = spec.shared_dim, spec.specific_dim

    eps_c = _draw_noise(rng, (n, t_len, n_c), spec.noise_kind)
    eps_s = [_draw_noise(rng, (n, t_len, n_s), spec.noise_kind) for _ in range(spec.num_modalities)]

    z_c = np.empty((n, t_len, n_c))
    z_s = [np.empty((n, t_len, n_s)) for _ in range(spec.num_modalities)]

    z_c[:, 0] = rng.standard_normal((n, n_c))
    for m in range(spec.num_modalities):
        z_s[m][:, 0] = rng.standard_normal((n, n_s))

    dep = spec.dependency_strength
    for t in range(1, t_len):
        z_c[:, t] = transition.shared(z_c[:, t - 1]) + spec.noise_scale * eps_c[:, t]
        for m in range(spec.num_modalities):
            ctx = np.concatenate([z_s[m][:, t - 1], dep * z_c[:, t]], axis=1)
            z_s[m][:, t] = transition.specific[m](ctx) + spec.noise_scale * eps_s[m][:, t]

    return LatentTrajectory(z_c=z_c, z_s=z_s, eps_c=eps_c, eps_s=eps_s)


# ---------------------------------------------------------------------------
# Mixing functions
# ---------------------------------------------------------------------------


@dataclass
class MixingFunction:
    """Injective map from R^{n_c+n_s} to R^{obs_dim}.

    Layer matrices are [d_in, d_out]; the first matrix has a well-conditioned
    square leading block so the linear part has full column rank, later
    matrices are well-conditioned squares, and LeakyReLU sits between layers.
    """

    kind: str  # 'identity' | 'linear' | 'mlp'
    weights: list[np.ndarray] = field(default_factory=list)

    @property
    def latent_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def obs_dim(self) -> int:
        return self.weights[-1].shape[1]

    def apply(self, latents: np.ndarray) -> np.ndarray:
        out = latents @ self.weights[0]
        for w in self.weights[1:]:
            out = _leaky(out) @ w
        return out

    def inverse(self, obs: np.ndarray) -> np.ndarray:
        """Exact inverse on the image of ``apply``."""
        h = obs
        for w in self.weights[:0:-1]:
            h = _inv_leaky(np.linalg.solve(w.T, h.T).T)
        sol, *_ = np.linalg.lstsq(self.weights[0].T, h.T, rcond=None)
        return sol.T

    def jacobian(self, latent_point: np.ndarray) -> np.ndarray:
        """Analytic Jacobian [obs_dim, latent_dim] at one latent point."""
        jac = self.weights[0].T.copy()
        h = latent_point @ self.weights[0]
        for w in self.weights[1:]:
            slope = np.where(h > 0, 1.0, LEAKY_SLOPE)
            jac = w.T @ (slope[:, None] * jac)
            h = _leaky(h) @ w
        return jac


def _well_conditioned_square(rng: np.random.Generator, dim: int) -> np.ndarray:
    u, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    v, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    singulars = rng.uniform(0.5, 2.0, size=dim)
    return u @ np.diag(singulars) @ v.T


def identity_mixing(latent_dim: int, obs_dim: int) -> MixingFunction:
    """g = identity on the square leading block, zero padding beyond it."""
    w = np.zeros((latent_dim, obs_dim))
    w[:, :latent_dim] = np.eye(latent_dim)
    return MixingFunction(kind="identity", weights=[w])


def sample_mixing(
    latent_dim: int,
    obs_dim: int,
    rng: np.random.Generator,
    kind: str = "mlp",
    depth: int = 2,
) -> MixingFunction:
    if obs_dim < latent_dim:
        raise ConfigError(f"obs_dim {obs_dim} < latent_dim {latent_dim}")
    first = np.empty((latent_dim, obs_dim))
    first[:, :latent_dim] = _well_conditioned_square(rng, latent_dim)
    if obs_dim > latent_dim:
        first[:, latent_dim:] = rng.standard_normal((latent_dim, obs_dim - latent_dim)) * (
            0.5 / np.sqrt(latent_dim)
        )
    if kind == "linear":
        return MixingFunction(kind="linear", weights=[first])
    if kind != "mlp":
        raise ConfigError(f"unknown mixing kind {kind!r}")
    weights = [first]
    for _ in range(depth - 1):
        weights.append(_well_conditioned_square(rng, obs_dim))
    return MixingFunction(kind="mlp", weights=weights)


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


def synthetic_labels(z_c: np.ndarray, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Integer labels from a fixed random linear readout of mean-pooled z_c."""
    pooled = z_c.mean(axis=1)
    readout = rng.standard_normal((pooled.shape[1], num_classes))
    return np.argmax(pooled @ readout, axis=1).astype(np.int64)


def generate_dataset(
    spec: GenerationSpec,
    transition: LatentTransition | None = None,
    mixings: Sequence[MixingFunction] | None = None,
) -> tuple[MultiModalBatch, LatentTrajectory, list[MixingFunction]]:
    """Sample latents, mix each modality, and derive synthetic labels.

    x^m[i, t] = g_m(z_c[i, t], z_s^m[i, t]) exactly; ground truth rides along.
    """
    spec.validate()
    trajectory = sample_latent_process(spec, transition)
    # independent stream so mixing draws do not perturb the latent stream
    mix_rng = np.random.default_rng((spec.seed, 1))
    latent_dim = spec.shared_dim + spec.specific_dim
    if mixings is None:
        mixings = [
            sample_mixing(latent_dim, spec.obs_dims[m], mix_rng) for m in range(spec.num_modalities)
        ]
    else:
        mixings = list(mixings)
        if len(mixings) != spec.num_modalities:
            raise ConfigError(f"{len(mixings)} mixing functions for {spec.num_modalities} modalities")

    observed = []
    for m, g in enumerate(mixings):
        joint = np.concatenate([trajectory.z_c, trajectory.z_s[m]], axis=2)
        flat = joint.reshape(-1, latent_dim)
        observed.append(g.apply(flat).reshape(spec.num_windows, spec.seq_len, -1))

    label_rng = np.random.default_rng((spec.seed, 2))
    labels = synthetic_labels(trajectory.z_c, spec.num_classes, label_rng)
    return MultiModalBatch(modalities=observed, labels=labels), trajectory, mixings


def write_dataset(
    out_dir: str | Path,
    batch: MultiModalBatch,
    trajectory: LatentTrajectory,
    spec: GenerationSpec,
    name: str = "synthetic",
) -> Path:
    """Persist observations, labels, and ground-truth latents as MMTS + manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    modality_entries = []
    for m, arr in enumerate(batch.modalities):
        fname = f"modality_{m}.mmts"
        dataio.write_mmts(arr, out_dir / fname)
        modality_entries.append({"name": f"modality_{m}", "file": fname})
    labels_file = "labels.txt"
    with open(out_dir / labels_file, "w") as fh:
        fh.write("\n".join(str(int(v)) for v in batch.labels))
        fh.write("\n")
    latents = {"latent_c": "latent_c.mmts"}
    dataio.write_mmts(trajectory.z_c, out_dir / "latent_c.mmts")
    for m, z in enumerate(trajectory.z_s):
        fname = f"latent_s_{m}.mmts"
        dataio.write_mmts(z, out_dir / fname)
        latents[f"latent_s_{m}"] = fname
    manifest = dataio.DatasetManifest(
        name=name,
        modalities=modality_entries,
        labels_file=labels_file,
        num_classes=spec.num_classes,
        window_length=spec.seq_len,
        latents=latents,
        root=out_dir,
    )
    manifest_path = out_dir / "manifest.json"
    dataio.write_manifest(manifest, manifest_path)
    return manifest_path


def as_multimodal_dataset(
    batch: MultiModalBatch, trajectory: LatentTrajectory, spec: GenerationSpec, name: str = "synthetic"
) -> dataio.MultiModalDataset:
    """View generated arrays as an in-memory dataset without touching disk."""
    latents = {"latent_c": trajectory.z_c.astype(np.float32)}
    for m, z in enumerate(trajectory.z_s):
        latents[f"latent_s_{m}"] = z.astype(np.float32)
    return dataio.MultiModalDataset(
        name=name,
        modality_names=[f"modality_{m}" for m in range(spec.num_modalities)],
        modalities=[arr.astype(np.float32) for arr in batch.modalities],
        labels=batch.labels,
        num_classes=spec.num_classes,
        latents=latents,
    )


# ---------------------------------------------------------------------------
# Assumption verification
# ---------------------------------------------------------------------------


@dataclass
class AssumptionReport:
    """Empirical check of the generative assumptions on one dataset."""

    min_singular_values: list[float]
    dependency_margins: list[float]
    dependency_null_means: list[float]
    dependency_null_stds: list[float]
    dependency_zscores: list[float]
    max_abs_offdiag_eps_corr: float
    eps_corr_bound: float


def _numeric_jacobian(g: MixingFunction, point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    dim = point.shape[0]
    cols = []
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = h
        cols.append((g.apply(point + e) - g.apply(point - e)) / (2 * h))
    return np.stack(cols, axis=1)


def _regression_mse(features: np.ndarray, target: np.ndarray) -> float:
    design = np.concatenate([features, np.ones((features.shape[0], 1))], axis=1)
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ coef
    return float(np.mean(resid**2))


def verify_assumptions(
    trajectory: LatentTrajectory,
    mixings: Sequence[MixingFunction],
    num_jacobian_points: int = 100,
    num_permutations: int = 20,
    seed: int = 0,
) -> AssumptionReport:
    """Report-only checks: mixing Jacobian conditioning, the shared-to-specific
    dependency margin with a permutation null, and noise independence."""
    rng = np.random.default_rng(seed)
    n, t_len, _ = trajectory.z_c.shape

    min_svs = []
    for m, g in enumerate(mixings):
        joint = np.concatenate([trajectory.z_c, trajectory.z_s[m]], axis=2).reshape(
            -1, g.latent_dim
        )
        idx = rng.choice(joint.shape[0], size=min(num_jacobian_points, joint.shape[0]), replace=False)
        sv_min = np.inf
        for i in idx:
            jac = _numeric_jacobian(g, joint[i])
            sv_min = min(sv_min, float(np.linalg.svd(jac, compute_uv=False)[-1]))
        min_svs.append(sv_min)

    margins, null_means, null_stds, zscores = [], [], [], []
    for m in range(len(trajectory.z_s)):
        prev = trajectory.z_s[m][:, :-1].reshape(-1, trajectory.z_s[m].shape[2])
        cur = trajectory.z_s[m][:, 1:].reshape(-1, trajectory.z_s[m].shape[2])
        shared_blocks = trajectory.z_c[:, 1:]  # [N, T-1, n_c]
        shared = shared_blocks.reshape(-1, trajectory.z_c.shape[2])
        mse_base = _regression_mse(prev, cur)
        margin = mse_base - _regression_mse(np.concatenate([prev, shared], axis=1), cur)
        # null permutes whole windows so within-window autocorrelation survives
        null = []
        for _ in range(num_permutations):
            perm = rng.permutation(n)
            permuted = shared_blocks[perm].reshape(-1, trajectory.z_c.shape[2])
            null.append(
                mse_base - _regression_mse(np.concatenate([prev, permuted], axis=1), cur)
            )
        null_mean = float(np.mean(null))
        null_std = float(np.std(null, ddof=1)) if num_permutations > 1 else float("nan")
        margins.append(float(margin))
        null_means.append(null_mean)
        null_stds.append(null_std)
        zscores.append((margin - null_mean) / null_std if null_std > 0 else float("inf"))

    eps_all = [trajectory.eps_c.reshape(n * t_len, -1)]
    eps_all.extend(e.reshape(n * t_len, -1) for e in trajectory.eps_s)
    flat = np.concatenate(eps_all, axis=1)
    corr = np.corrcoef(flat.T)
    off = corr - np.diag(np.diag(corr))
    return AssumptionReport(
        min_singular_values=min_svs,
        dependency_margins=margins,
        dependency_null_means=null_means,
        dependency_null_stds=null_stds,
        dependency_zscores=zscores,
        max_abs_offdiag_eps_corr=float(np.max(np.abs(off))),
        eps_corr_bound=4.0 / np.sqrt(n * t_len),
    )
