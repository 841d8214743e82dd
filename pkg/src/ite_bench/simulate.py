"""Semi-synthetic data generation for treatment effect benchmarks.

Covariates are unit-norm user vectors (fresh Gaussian draws or rows read
from an embedding file). k+1 centroids z_1..z_{k+1} are picked from the
covariates; the first k double as the treatment feature vectors and the
last acts as a shared population taste vector. Potential outcomes are

    y_i^t = c * ytilde_i^t * (x_i . z_t + x_i . z_{k+1}),

with ytilde_i^t ~ N(mu_t, sigma_t^2), mu_t ~ N(0.45, 0.15^2) and
sigma_t ~ N(0.1, 0.05^2) clamped below at 1e-3. Expected outcomes replace
ytilde with mu_t. Observed treatments are drawn from a per-user softmax
over kappa_t * y_i^t, so larger kappa skews assignment toward treatments
with larger sampled outcomes.

Datasets round-trip through a directory of CSV files plus a JSON manifest.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    InsufficientDataError,
    NumericError,
    ShapeError,
)

DATASET_SCHEMA_VERSION = "1"
SPLIT_NAMES = ("train", "val", "test")
SPLIT_FRACTIONS = (0.7, 0.15)  # train, val; test takes the remainder
SIGMA_FLOOR = 1e-3

_DATASET_FILES = {
    "covariates": "covariates.csv",
    "centroids": "centroids.csv",
    "treatment_embeddings": "treatment_embeddings.csv",
    "mu_sigma": "mu_sigma.csv",
    "y_sampled": "y_sampled.csv",
    "y_expected": "y_expected.csv",
    "assignments": "assignments.csv",
}


@dataclass(frozen=True)
class SimConfig:
    """Knobs of the simulation. Treatments are indexed 0..k-1 throughout."""

    n: int = 2000
    d: int = 32
    k: int = 4
    centroid_method: str = "random"  # "random" | "kmeans"
    kmeans_iters: int = 50
    kmeans_tol: float = 1e-6
    c: float = 5.0
    kappa: float | tuple[float, ...] = 10.0
    mu_mean: float = 0.45
    mu_sd: float = 0.15
    sigma_mean: float = 0.10
    sigma_sd: float = 0.05
    covariate_source: str = "gaussian"  # "gaussian" | "file"
    embedding_file: str | None = None
    seed: int = 0

    def kappa_vector(self) -> np.ndarray:
        if np.isscalar(self.kappa):
            return np.full(self.k, float(self.kappa))
        kap = np.asarray(self.kappa, dtype=np.float64)
        if kap.shape != (self.k,):
            raise ConfigError(f"kappa must be a scalar or length-{self.k} vector")
        return kap

    def validate(self) -> "SimConfig":
        if self.k < 2:
            raise ConfigError("k must be >= 2 (at least two treatments)")
        if self.n < self.k + 1:
            raise ConfigError("n must be >= k + 1 so that k+1 centroids exist")
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if self.centroid_method not in ("random", "kmeans"):
            raise ConfigError(
                f"centroid_method must be 'random' or 'kmeans', got {self.centroid_method!r}"
            )
        if self.kmeans_iters < 1:
            raise ConfigError("kmeans_iters must be >= 1")
        if self.kmeans_tol < 0.0:
            raise ConfigError("kmeans_tol must be >= 0")
        if not self.c > 0.0:
            raise ConfigError("outcome scale c must be positive")
        if not np.all(self.kappa_vector() > 0.0):
            raise ConfigError("kappa entries must be positive")
        if self.mu_sd < 0.0 or self.sigma_sd < 0.0:
            raise ConfigError("prior standard deviations must be >= 0")
        if self.covariate_source not in ("gaussian", "file"):
            raise ConfigError(
                f"covariate_source must be 'gaussian' or 'file', got {self.covariate_source!r}"
            )
        if self.covariate_source == "file" and not self.embedding_file:
            raise ConfigError("covariate_source 'file' requires embedding_file")
        return self

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        if not np.isscalar(self.kappa):
            doc["kappa"] = [float(v) for v in self.kappa]
        return doc

    @staticmethod
    def from_dict(doc: dict, path: str = "sim") -> "SimConfig":
        known = {f.name for f in dataclasses.fields(SimConfig)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"{path}: unknown fields {sorted(extra)}")
        kwargs = dict(doc)
        if isinstance(kwargs.get("kappa"), list):
            kwargs["kappa"] = tuple(float(v) for v in kwargs["kappa"])
        try:
            return SimConfig(**kwargs).validate()
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


@dataclass(eq=False)
class Dataset:
    """A fully materialized simulation with fixed train/val/test splits.

    truth_reads counts accesses to ground-truth outcome matrices per split;
    model-selection code uses it to prove it never touched test-set truth.
    """

    X: np.ndarray  # (n, d) unit-norm covariates
    Z: np.ndarray  # (k+1, d) centroids
    T_emb: np.ndarray  # (k, d) treatment feature vectors
    mu: np.ndarray  # (k,)
    sigma: np.ndarray  # (k,)
    Y_sampled: np.ndarray  # (n, k)
    Y_expected: np.ndarray  # (n, k)
    t_obs: np.ndarray  # (n,) ints in 0..k-1
    y_factual: np.ndarray  # (n,)
    splits: dict[str, np.ndarray]
    config: SimConfig | None = None
    truth_reads: dict[str, int] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def k(self) -> int:
        return self.T_emb.shape[0]

    def split_indices(self, split: str) -> np.ndarray:
        if split not in self.splits:
            raise ConfigError(f"unknown split {split!r}; expected one of {SPLIT_NAMES}")
        return self.splits[split]

    def covariates(self, split: str) -> np.ndarray:
        return self.X[self.split_indices(split)]

    def observed(self, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = self.split_indices(split)
        return self.X[idx], self.t_obs[idx], self.y_factual[idx]

    def expected_outcomes(self, split: str) -> np.ndarray:
        """Ground-truth expected potential outcomes; access is audited."""
        idx = self.split_indices(split)
        self.truth_reads[split] = self.truth_reads.get(split, 0) + 1
        return self.Y_expected[idx]

    def without_treatment_in_fit(self, z: int) -> "Dataset":
        """Copy with treatment z's samples dropped from train and val splits.

        Test rows are untouched, so held-out evaluation still covers all
        treatments including z.
        """
        if not 0 <= z < self.k:
            raise ConfigError(f"treatment index {z} out of range 0..{self.k - 1}")
        n_excluded = int(
            (self.t_obs[self.splits["train"]] == z).sum()
            + (self.t_obs[self.splits["val"]] == z).sum()
        )
        if n_excluded == 0:
            raise DataError(
                f"treatment {z} has no fitted samples to exclude; nothing is held out"
            )
        new_splits = dict(self.splits)
        for name in ("train", "val"):
            idx = self.splits[name]
            new_splits[name] = idx[self.t_obs[idx] != z]
        if new_splits["train"].size == 0:
            raise DataError(f"excluding treatment {z} empties the training split")
        return dataclasses.replace(self, splits=new_splits, truth_reads={})

    def validate(self) -> "Dataset":
        n, d, k = self.n, self.d, self.k
        if self.Z.shape != (k + 1, d):
            raise ShapeError(f"Z must be (k+1, d) = {(k + 1, d)}, got {self.Z.shape}")
        if self.T_emb.shape != (k, d):
            raise ShapeError(f"T_emb must be {(k, d)}, got {self.T_emb.shape}")
        for name, arr, shape in (
            ("mu", self.mu, (k,)),
            ("sigma", self.sigma, (k,)),
            ("Y_sampled", self.Y_sampled, (n, k)),
            ("Y_expected", self.Y_expected, (n, k)),
            ("t_obs", self.t_obs, (n,)),
            ("y_factual", self.y_factual, (n,)),
        ):
            if arr.shape != shape:
                raise ShapeError(f"{name} must have shape {shape}, got {arr.shape}")
        for name, arr in (
            ("X", self.X),
            ("Z", self.Z),
            ("mu", self.mu),
            ("sigma", self.sigma),
            ("Y_sampled", self.Y_sampled),
            ("Y_expected", self.Y_expected),
            ("y_factual", self.y_factual),
        ):
            if not np.isfinite(arr).all():
                raise NumericError(f"non-finite values in {name}")
        if self.t_obs.min() < 0 or self.t_obs.max() >= k:
            raise DataError("t_obs entries must lie in 0..k-1")
        if not np.array_equal(
            self.y_factual, self.Y_sampled[np.arange(n), self.t_obs]
        ):
            raise DataError("y_factual does not match Y_sampled at observed treatments")
        if self.config is not None:
            d_all = self.X @ (self.Z[:-1] + self.Z[-1]).T
            if not np.allclose(
                self.Y_expected, self.config.c * self.mu * d_all, rtol=0.0, atol=1e-10
            ):
                raise DataError("Y_expected is inconsistent with centroids and mu")
        combined = np.concatenate([self.splits[name] for name in SPLIT_NAMES])
        if combined.size != n or not np.array_equal(np.sort(combined), np.arange(n)):
            raise DataError("splits must partition 0..n-1")
        return self


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective_history: list[float]
    n_iter: int


def _closest_sq(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        + np.sum(centers * centers, axis=1)[None, :]
        - 2.0 * (x @ centers.T)
    )
    return np.maximum(d2, 0.0)


def kmeans(
    x: np.ndarray,
    n_clusters: int,
    iters: int = 50,
    tol: float = 1e-6,
    *,
    rng: np.random.Generator | int | None = None,
) -> KMeansResult:
    """Lloyd's algorithm with kmeans++ seeding.

    An empty cluster is re-seeded to the point currently farthest from its
    assigned centroid, which keeps the within-cluster sum of squares
    non-increasing across iterations.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("kmeans expects a matrix of sample rows")
    n = x.shape[0]
    if n_clusters < 1:
        raise ConfigError("n_clusters must be >= 1")
    if n < n_clusters:
        raise InsufficientDataError(
            f"kmeans needs at least {n_clusters} rows, got {n}"
        )
    gen = np.random.default_rng(rng)

    centers = np.empty((n_clusters, x.shape[1]))
    centers[0] = x[gen.integers(n)]
    closest = _closest_sq(x, centers[:1])[:, 0]
    for j in range(1, n_clusters):
        total = closest.sum()
        if total > 0.0:
            idx = gen.choice(n, p=closest / total)
        else:
            idx = gen.integers(n)
        centers[j] = x[idx]
        closest = np.minimum(closest, _closest_sq(x, centers[j : j + 1])[:, 0])

    history: list[float] = []
    labels = np.zeros(n, dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, iters + 1):
        d2 = _closest_sq(x, centers)
        labels = d2.argmin(axis=1)
        assigned = d2[np.arange(n), labels]
        history.append(float(assigned.sum()))
        new_centers = centers.copy()
        empty = []
        for j in range(n_clusters):
            members = labels == j
            if members.any():
                new_centers[j] = x[members].mean(axis=0)
            else:
                empty.append(j)
        if empty:
            far_order = np.argsort(-assigned)
            for pos, j in enumerate(empty):
                new_centers[j] = x[far_order[pos]]
        movement = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if movement < tol:
            break
    d2 = _closest_sq(x, centers)
    labels = d2.argmin(axis=1)
    history.append(float(d2[np.arange(n), labels].sum()))
    return KMeansResult(centers, labels, history, n_iter)


def generate_covariates(
    cfg: SimConfig, rng: np.random.Generator | int | None = None
) -> np.ndarray:
    """Unit-norm covariate rows, drawn or loaded per cfg.covariate_source."""
    cfg.validate()
    if cfg.covariate_source == "file":
        assert cfg.embedding_file is not None
        if not os.path.exists(cfg.embedding_file):
            raise DataError(f"embedding file not found: {cfg.embedding_file}")
        try:
            rows = np.loadtxt(cfg.embedding_file, delimiter=",", ndmin=2, dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"malformed embedding file {cfg.embedding_file}: {exc}") from exc
        if rows.shape[1] != cfg.d:
            raise DataError(
                f"embedding file has width {rows.shape[1]}, config expects d={cfg.d}"
            )
        if rows.shape[0] < cfg.n:
            raise DataError(
                f"embedding file has {rows.shape[0]} rows, config expects n={cfg.n}"
            )
        x = rows[: cfg.n].copy()
        if not np.isfinite(x).all():
            raise NumericError("non-finite values in embedding file")
    else:
        gen = np.random.default_rng(rng)
        x = gen.standard_normal((cfg.n, cfg.d))
        # a zero row has measure zero but would break normalization
        while True:
            bad = np.flatnonzero((x == 0.0).all(axis=1))
            if bad.size == 0:
                break
            x[bad] = gen.standard_normal((bad.size, cfg.d))
    norms = np.linalg.norm(x, axis=1)
    if (norms == 0.0).any():
        raise DataError("covariate rows must have nonzero norm")
    return x / norms[:, None]


def select_centroids(
    x: np.ndarray,
    k: int,
    method: str = "random",
    *,
    rng: np.random.Generator | int | None = None,
    kmeans_iters: int = 50,
    kmeans_tol: float = 1e-6,
) -> np.ndarray:
    """Pick k+1 centroids: distinct covariate rows or kmeans cluster means."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < k + 1:
        raise InsufficientDataError(f"need at least k+1={k + 1} rows, got {n}")
    gen = np.random.default_rng(rng)
    if method == "random":
        idx = gen.choice(n, size=k + 1, replace=False)
        return x[idx].copy()
    if method == "kmeans":
        return kmeans(x, k + 1, iters=kmeans_iters, tol=kmeans_tol, rng=gen).centroids
    raise ConfigError(f"centroid_method must be 'random' or 'kmeans', got {method!r}")


def sample_outcome_params(
    cfg: SimConfig, rng: np.random.Generator | int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Draw per-treatment (mu, sigma); sigma is clamped below at 1e-3."""
    gen = np.random.default_rng(cfg.seed if rng is None else rng)
    mu = gen.normal(cfg.mu_mean, cfg.mu_sd, size=cfg.k)
    sigma = np.maximum(gen.normal(cfg.sigma_mean, cfg.sigma_sd, size=cfg.k), SIGMA_FLOOR)
    return mu, sigma


def potential_outcomes(
    x: np.ndarray,
    z: np.ndarray,
    mu: np.ndarray,
    sigma: np.ndarray,
    c: float,
    rng: np.random.Generator | int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sampled and expected outcome matrices, both (n, k)."""
    if not c > 0.0:
        raise ConfigError("outcome scale c must be positive")
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    k = z.shape[0] - 1
    if k < 1 or mu.shape != (k,) or sigma.shape != (k,):
        raise ShapeError("z must stack k treatment centroids plus one shared centroid")
    if z.shape[1] != x.shape[1]:
        raise ShapeError("centroid dimension does not match covariates")
    gen = np.random.default_rng(rng)
    d_all = x @ (z[:-1] + z[-1]).T  # (n, k): x.z_t + x.z_{k+1}
    ytilde = mu[None, :] + sigma[None, :] * gen.standard_normal((x.shape[0], k))
    y_sampled = c * ytilde * d_all
    y_expected = c * mu[None, :] * d_all
    if not (np.isfinite(y_sampled).all() and np.isfinite(y_expected).all()):
        raise NumericError("non-finite potential outcomes")
    return y_sampled, y_expected


def assignment_probabilities(y_sampled: np.ndarray, kappa: np.ndarray) -> np.ndarray:
    """Rowwise softmax over kappa_t * y_i^t with max subtraction for stability."""
    y = np.asarray(y_sampled, dtype=np.float64)
    kap = np.asarray(kappa, dtype=np.float64)
    if y.ndim != 2 or kap.shape != (y.shape[1],):
        raise ShapeError("kappa must have one entry per treatment column")
    if not np.all(kap > 0.0):
        raise ConfigError("kappa entries must be positive")
    if not np.isfinite(y).all():
        raise NumericError("non-finite outcomes in assignment")
    logits = y * kap[None, :]
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def assign_treatments(
    y_sampled: np.ndarray,
    kappa: np.ndarray,
    rng: np.random.Generator | int | None = None,
) -> np.ndarray:
    """Draw one observed treatment per user from the softmax probabilities."""
    p = assignment_probabilities(y_sampled, kappa)
    gen = np.random.default_rng(rng)
    cum = np.cumsum(p, axis=1)
    u = gen.random(p.shape[0])
    t_obs = (cum < u[:, None]).sum(axis=1)
    return np.minimum(t_obs, p.shape[1] - 1).astype(np.int64)


def _draw_splits(n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    order = rng.permutation(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return {
        "train": order[:n_train],
        "val": order[n_train : n_train + n_val],
        "test": order[n_train + n_val :],
    }


def simulate_dataset(cfg: SimConfig) -> Dataset:
    """Run the full generative recipe; deterministic given cfg (incl. seed)."""
    cfg.validate()
    ss = np.random.SeedSequence(cfg.seed)
    s_cov, s_cent, s_prior, s_noise, s_assign, s_split = ss.spawn(6)

    x = generate_covariates(cfg, np.random.default_rng(s_cov))
    z = select_centroids(
        x,
        cfg.k,
        cfg.centroid_method,
        rng=np.random.default_rng(s_cent),
        kmeans_iters=cfg.kmeans_iters,
        kmeans_tol=cfg.kmeans_tol,
    )
    mu, sigma = sample_outcome_params(cfg, np.random.default_rng(s_prior))
    y_sampled, y_expected = potential_outcomes(
        x, z, mu, sigma, cfg.c, np.random.default_rng(s_noise)
    )
    t_obs = assign_treatments(y_sampled, cfg.kappa_vector(), np.random.default_rng(s_assign))
    y_factual = y_sampled[np.arange(cfg.n), t_obs]
    splits = _draw_splits(cfg.n, np.random.default_rng(s_split))
    ds = Dataset(
        X=x,
        Z=z,
        T_emb=z[: cfg.k].copy(),
        mu=mu,
        sigma=sigma,
        Y_sampled=y_sampled,
        Y_expected=y_expected,
        t_obs=t_obs,
        y_factual=y_factual,
        splits=splits,
        config=cfg,
    )
    return ds.validate()


def save_dataset(ds: Dataset, out_dir, force: bool = False) -> None:
    """Write the dataset directory: manifest.json plus CSV matrices.

    Floats are written with 17 significant digits, which round-trips
    float64 exactly.
    """
    os.makedirs(out_dir, exist_ok=True)
    existing = set(os.listdir(out_dir))
    if existing and not force:
        raise DataError(
            f"output directory {out_dir} is not empty; pass force=True/--force to overwrite"
        )
    fmt = "%.17g"

    def path(name):
        return os.path.join(out_dir, _DATASET_FILES[name])

    np.savetxt(path("covariates"), ds.X, delimiter=",", fmt=fmt)
    np.savetxt(path("centroids"), ds.Z, delimiter=",", fmt=fmt)
    np.savetxt(path("treatment_embeddings"), ds.T_emb, delimiter=",", fmt=fmt)
    np.savetxt(
        path("mu_sigma"), np.column_stack([ds.mu, ds.sigma]), delimiter=",", fmt=fmt
    )
    np.savetxt(path("y_sampled"), ds.Y_sampled, delimiter=",", fmt=fmt)
    np.savetxt(path("y_expected"), ds.Y_expected, delimiter=",", fmt=fmt)
    np.savetxt(
        os.path.join(out_dir, _DATASET_FILES["assignments"]),
        np.column_stack(
            [np.arange(ds.n).astype(np.float64), ds.t_obs.astype(np.float64), ds.y_factual]
        ),
        delimiter=",",
        fmt=["%d", "%d", fmt],
    )
    manifest = {
        "schema_version": DATASET_SCHEMA_VERSION,
        "n": ds.n,
        "d": ds.d,
        "k": ds.k,
        "config": ds.config.to_dict() if ds.config else None,
        "splits": {name: ds.splits[name].tolist() for name in SPLIT_NAMES},
        "files": dict(_DATASET_FILES),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_dataset(dataset_dir) -> Dataset:
    manifest_path = os.path.join(dataset_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"not a dataset directory (no manifest.json): {dataset_dir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != DATASET_SCHEMA_VERSION:
        raise DataError(
            f"unsupported dataset schema_version {manifest.get('schema_version')!r}"
        )

    def load(name, **kw):
        fpath = os.path.join(dataset_dir, _DATASET_FILES[name])
        if not os.path.exists(fpath):
            raise DataError(f"dataset file missing: {fpath}")
        try:
            return np.loadtxt(fpath, delimiter=",", ndmin=2, dtype=np.float64, **kw)
        except ValueError as exc:
            raise DataError(f"malformed dataset file {fpath}: {exc}") from exc

    x = load("covariates")
    z = load("centroids")
    t_emb = load("treatment_embeddings")
    mu_sigma = load("mu_sigma")
    y_sampled = load("y_sampled")
    y_expected = load("y_expected")
    assignments = load("assignments")
    cfg = (
        SimConfig.from_dict(manifest["config"], path="manifest.config")
        if manifest.get("config")
        else None
    )
    try:
        splits = {
            name: np.asarray(manifest["splits"][name], dtype=np.int64)
            for name in SPLIT_NAMES
        }
    except KeyError as exc:
        raise DataError(f"manifest is missing split {exc}") from exc
    ds = Dataset(
        X=x,
        Z=z,
        T_emb=t_emb,
        mu=mu_sigma[:, 0].copy(),
        sigma=mu_sigma[:, 1].copy(),
        Y_sampled=y_sampled,
        Y_expected=y_expected,
        t_obs=assignments[:, 1].astype(np.int64),
        y_factual=assignments[:, 2].copy(),
        splits=splits,
        config=cfg,
    )
    return ds.validate()
