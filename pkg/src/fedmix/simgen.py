"""Synthetic multi-site data generation and the site-file exchange format.

Each site draws its class-1 proportion from U(0.5 - a, 0.5 + a) and then
samples observations from the two-component Gaussian mixture with shared
isotropic covariance sigma^2 I.  Randomness is split with counter-based
seed sequences keyed on (replication, site), so every site and every
replication owns a disjoint stream and any subset can be regenerated
independently and bit-identically.

Export format: one CSV per site (header x1..xd, one observation per row,
shortest round-trip decimal floats) plus a ``study.json`` sidecar carrying
the configuration and the true parameters.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, ParseError
from .model import Covariance, ModelParams, SiteDataset


@dataclass(frozen=True)
class StudyConfig:
    """One simulation cell: sites, sample size, dimension, heterogeneity, noise."""

    n_sites: int = 10
    site_size: int = 1000
    dim: int = 5
    heterogeneity: float = 0.1      # half-width a of the uniform proportion draw
    noise_variance: float = 2.5     # sigma^2 of the shared isotropic covariance
    mean1: tuple = None             # defaults to (5, ..., 5)
    mean0: tuple = None             # defaults to (4, ..., 4)
    seed: int = 0
    replications: int = 200

    def __post_init__(self):
        if self.n_sites < 1 or self.site_size < 1 or self.dim < 1:
            raise ContractViolation("n_sites, site_size and dim must be positive")
        if not (0.0 <= self.heterogeneity < 0.5):
            raise ContractViolation("heterogeneity must lie in [0, 0.5)")
        if self.noise_variance <= 0.0:
            raise ContractViolation("noise_variance must be positive")
        if self.replications < 1:
            raise ContractViolation("replications must be >= 1")
        mean1 = self.mean1 if self.mean1 is not None else (5.0,) * self.dim
        mean0 = self.mean0 if self.mean0 is not None else (4.0,) * self.dim
        mean1 = tuple(float(v) for v in np.atleast_1d(mean1))
        mean0 = tuple(float(v) for v in np.atleast_1d(mean0))
        if len(mean1) != self.dim or len(mean0) != self.dim:
            raise ContractViolation("mean1/mean0 must have length dim")
        object.__setattr__(self, "mean1", mean1)
        object.__setattr__(self, "mean0", mean0)

    def covariance(self) -> Covariance:
        return Covariance.isotropic(self.noise_variance, self.dim, self.n_sites)

    def sigma(self):
        return self.noise_variance * np.eye(self.dim)


def _site_rng(cfg: StudyConfig, replication: int, site: int) -> np.random.Generator:
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(replication, site))
    return np.random.default_rng(ss)


def aux_rng(cfg: StudyConfig, replication: int, stream: int = 0) -> np.random.Generator:
    """Auxiliary stream (e.g. initializer seeding), disjoint from the data streams."""
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(replication, cfg.n_sites + 1 + stream))
    return np.random.default_rng(ss)


def generate_study(cfg: StudyConfig, replication: int = 0):
    """Draw one replication: per-site datasets plus the true parameters.

    Per site: the class-1 proportion is the first uniform draw of the
    (replication, site) stream, then class labels are Bernoulli and
    observations Gaussian around the class centroid.
    """
    if not (0 <= replication):
        raise ContractViolation("replication index must be >= 0")
    mean_stack = np.vstack([cfg.mean1, cfg.mean0])
    sd = float(np.sqrt(cfg.noise_variance))
    datasets = []
    lams = np.empty(cfg.n_sites)
    for j in range(cfg.n_sites):
        rng = _site_rng(cfg, replication, j)
        lam = rng.uniform(0.5 - cfg.heterogeneity, 0.5 + cfg.heterogeneity)
        lams[j] = lam
        class1 = rng.random(cfg.site_size) < lam
        component = np.where(class1, 0, 1)  # row 0 of the stack is the class-1 mean
        noise = rng.standard_normal((cfg.site_size, cfg.dim))
        obs = mean_stack[component] + sd * noise
        datasets.append(SiteDataset(j, obs))
    truth = ModelParams.two_component(cfg.mean1, cfg.mean0, lams)
    return datasets, truth


# ---------------------------------------------------------------------------
# Export / load
# ---------------------------------------------------------------------------


def site_file_name(site_id: int) -> str:
    return f"site_{site_id:03d}.csv"


def export_study(datasets, truth: ModelParams, cfg: StudyConfig, replication: int,
                 out_dir) -> Path:
    """Write one file per site plus the study sidecar; returns the directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for data in datasets:
        path = out / site_file_name(data.site_id)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i + 1}" for i in range(data.dim)])
            for row in data.observations:
                writer.writerow([repr(float(v)) for v in row])
    meta = {
        "config": asdict(cfg),
        "replication": replication,
        "true_means": [list(map(float, row)) for row in truth.means],
        "true_lam": [float(v) for v in truth.lam],
    }
    with open(out / "study.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def load_site_file(path, site_id: int | None = None) -> SiteDataset:
    """Parse one exported site file; raises ParseError with the line number."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", path=str(path), line=1) from None
        expected = [f"x{i + 1}" for i in range(len(header))]
        if header != expected:
            raise ParseError(
                f"{path}:1: bad header {header!r}, expected {expected!r}",
                path=str(path),
                line=1,
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(
                    f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}",
                    path=str(path),
                    line=lineno,
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ParseError(
                    f"{path}:{lineno}: non-numeric value in {row!r}",
                    path=str(path),
                    line=lineno,
                ) from None
    if site_id is None:
        stem = path.stem
        try:
            site_id = int(stem.split("_")[-1])
        except ValueError:
            raise ParseError(
                f"{path}: cannot infer site id from file name", path=str(path)
            ) from None
    return SiteDataset(site_id, np.array(rows))


def load_study(directory):
    """Load every site file in an exported study directory plus its sidecar."""
    directory = Path(directory)
    meta_path = directory / "study.json"
    if not meta_path.exists():
        raise ParseError(f"{meta_path} not found", path=str(meta_path))
    with open(meta_path) as fh:
        meta = json.load(fh)
    cfg = StudyConfig(**meta["config"])
    datasets = [
        load_site_file(directory / site_file_name(j), j) for j in range(cfg.n_sites)
    ]
    truth = ModelParams.two_component(
        meta["true_means"][0], meta["true_means"][1], meta["true_lam"]
    )
    return datasets, truth, cfg, meta.get("replication", 0)
