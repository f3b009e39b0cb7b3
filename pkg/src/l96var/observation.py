"""Observation generation: random projector, heteroscedastic noise, datasets.

An observation of a trajectory is the pair (y, r_inv), both shaped
``(T+1, n_space)``. ``r_inv`` is the diagonal observation precision 1/sigma^2;
a zero entry encodes an unobserved point (infinite variance), and the stored
y is fixed to 0 there so files are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import DynamicsConfig, integrate

# Precision assigned to (near-)noiseless observations instead of infinity.
PRECISION_CAP = 1e12


@dataclass(frozen=True)
class ObservationConfig:
    """Observation-process parameters.

    Each grid point is dropped independently with probability p_drop; kept
    points get Gaussian noise with sigma ~ U(sigma_low, sigma_high).
    """

    p_drop: float = 0.5
    sigma_low: float = 0.25
    sigma_high: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must be in [0, 1]")
        if not 0.0 <= self.sigma_low <= self.sigma_high:
            raise ValueError("need 0 <= sigma_low <= sigma_high")


@dataclass
class ObservationSet:
    y: np.ndarray  # (T+1, n_space), 0 at unobserved points
    r_inv: np.ndarray  # (T+1, n_space), 0 encodes unobserved

    @property
    def n_steps(self):
        return self.y.shape[0] - 1


@dataclass
class Dataset:
    """N i.i.d. (truth trajectory, observation) pairs with split metadata."""

    truth: np.ndarray  # (N, T+1, n_space)
    y: np.ndarray  # (N, T+1, n_space)
    r_inv: np.ndarray  # (N, T+1, n_space)
    splits: dict  # name -> sorted index array
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return self.truth.shape[0]

    @property
    def clim_mean(self):
        return float(self.meta["clim_mean"])

    def obs(self, i):
        return ObservationSet(y=self.y[i], r_inv=self.r_inv[i])

    def indices(self, split):
        return np.asarray(self.splits[split], dtype=np.int64)


def sample_rng(seed, index):
    """Counter-based per-sample RNG; bit-identical across platforms."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def make_mask(shape, p_drop, rng):
    """Independent Bernoulli keep/drop field; 1 = observed with prob 1-p_drop."""
    return (rng.random(shape) >= p_drop).astype(np.float64)


def observe(truth, cfg, rng):
    """Apply the random projector and heteroscedastic Gaussian noise to truth.

    Per kept point: sigma ~ U(sigma_low, sigma_high), y = x + sigma*N(0,1),
    r_inv = min(1/sigma^2, PRECISION_CAP). Per dropped point: y = 0, r_inv = 0.
    """
    truth = np.asarray(truth, dtype=np.float64)
    mask = make_mask(truth.shape, cfg.p_drop, rng)
    sigma = rng.uniform(cfg.sigma_low, cfg.sigma_high, size=truth.shape)
    noise = sigma * rng.standard_normal(truth.shape)
    with np.errstate(divide="ignore"):
        prec = np.minimum(1.0 / np.square(sigma), PRECISION_CAP)
    return ObservationSet(y=mask * (truth + noise), r_inv=mask * prec)


def generate_dataset(
    dyn_cfg: DynamicsConfig,
    obs_cfg: ObservationConfig,
    n_samples,
    T,
    spin_up_steps,
    split_sizes=(250, 50, 250),
    seed=0,
):
    """Generate a twin-experiment dataset of independent assimilation windows.

    Each sample starts from fresh white noise, is spun up onto the attractor,
    then integrated T further steps and observed. Sample i uses the stream
    derived from (seed, i), so generation is order-independent.
    """
    if sum(split_sizes) != n_samples:
        raise ValueError(
            f"split sizes {tuple(split_sizes)} do not sum to n_samples={n_samples}"
        )
    n = dyn_cfg.n_space
    truth = np.empty((n_samples, T + 1, n))
    y = np.empty_like(truth)
    r_inv = np.empty_like(truth)
    for i in range(n_samples):
        rng = sample_rng(seed, i)
        x = rng.standard_normal(n)
        x0 = integrate(x, dyn_cfg, spin_up_steps)[-1]
        truth[i] = integrate(x0, dyn_cfg, T)
        obs = observe(truth[i], obs_cfg, rng)
        y[i] = obs.y
        r_inv[i] = obs.r_inv

    bounds = np.cumsum([0, *split_sizes])
    order = np.arange(n_samples)
    splits = {
        name: order[bounds[k] : bounds[k + 1]]
        for k, name in enumerate(("train", "val", "test"))
    }
    meta = {
        "seed": int(seed),
        "n_samples": int(n_samples),
        "T": int(T),
        "spin_up_steps": int(spin_up_steps),
        "dynamics": {"n_space": n, "dt": dyn_cfg.dt, "forcing": dyn_cfg.forcing},
        "observation": {
            "p_drop": obs_cfg.p_drop,
            "sigma_low": obs_cfg.sigma_low,
            "sigma_high": obs_cfg.sigma_high,
        },
        "clim_mean": float(np.mean(truth[splits["train"]])),
    }
    return Dataset(truth=truth, y=y, r_inv=r_inv, splits=splits, meta=meta)


def save_dataset(ds: Dataset, out_dir):
    """Persist a dataset: manifest.json + truth.bin / y.bin / rinv.bin.

    Arrays are row-major [sample][time][space] little-endian float64.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        **ds.meta,
        "dtype": "f64le",
        "shape": list(ds.truth.shape),
        "splits": {k: np.asarray(v).tolist() for k, v in ds.splits.items()},
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    for name, arr in (("truth", ds.truth), ("y", ds.y), ("rinv", ds.r_inv)):
        (out_dir / f"{name}.bin").write_bytes(
            np.ascontiguousarray(arr, dtype="<f8").tobytes()
        )


def load_dataset(in_dir):
    in_dir = Path(in_dir)
    with open(in_dir / "manifest.json") as f:
        manifest = json.load(f)
    shape = tuple(manifest["shape"])
    if manifest.get("dtype") != "f64le":
        raise ValueError(f"unsupported dtype tag {manifest.get('dtype')!r}")

    def read(name):
        data = np.frombuffer((in_dir / f"{name}.bin").read_bytes(), dtype="<f8")
        return data.reshape(shape).astype(np.float64)

    splits = {k: np.asarray(v, dtype=np.int64) for k, v in manifest.pop("splits").items()}
    meta = {k: v for k, v in manifest.items() if k not in ("dtype", "shape")}
    return Dataset(truth=read("truth"), y=read("y"), r_inv=read("rinv"), splits=splits, meta=meta)


def dynamics_config_from_meta(meta) -> DynamicsConfig:
    d = meta["dynamics"]
    return DynamicsConfig(n_space=int(d["n_space"]), dt=float(d["dt"]), forcing=float(d["forcing"]))
