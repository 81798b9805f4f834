"""Agent clustering: a small VAE over agent features, then a GMM on latents.

The VAE is a 1-hidden-layer tanh encoder producing (mu, log_var) and a
mirrored decoder. Its loss per agent is half the squared reconstruction error
(unit-variance Gaussian likelihood, constants dropped) plus the KL divergence
to a standard normal prior; the batch loss is the mean over agents.
Gradients are derived by hand and applied with Adam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError, NumericalError
from .seeding import derive_seed, rng as make_rng

HIDDEN = 16
COV_FLOOR = 1e-6
FEATURE_NAMES = ("log_wealth", "income", "owns_house", "log_cash_to_price")
_LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# features
# --------------------------------------------------------------------------


@dataclass(eq=False)
class FeatureMatrix:
    """Standardized per-agent features plus the transform that made them."""

    values: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    names: tuple[str, ...] = FEATURE_NAMES

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def destandardize(self) -> np.ndarray:
        return self.values * self.stds + self.means


def standardize(raw, names: tuple[str, ...] | None = None) -> FeatureMatrix:
    """Column-wise z-scores; constant columns keep std 1."""
    x = np.asarray(raw, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DomainError("feature matrix must be non-empty and 2-D")
    if not np.all(np.isfinite(x)):
        raise DomainError("feature matrix contains non-finite entries")
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    stds = np.where(stds > 0, stds, 1.0)
    names = tuple(names) if names is not None else tuple(f"f{i}" for i in range(x.shape[1]))
    return FeatureMatrix((x - means) / stds, means, stds, names)


def agent_features(population, initial_price: float) -> FeatureMatrix:
    """Features from an agent snapshot.

    Wealth and the cash-to-price ratio enter on a log scale because wealth is
    log-normal; on the raw scale a few rich agents dominate the embedding.
    """
    w = population.wealth
    raw = np.column_stack([
        np.log(w),
        population.income,
        population.owns_house.astype(np.float64),
        np.log(w / initial_price),
    ])
    return standardize(raw, FEATURE_NAMES)


# --------------------------------------------------------------------------
# VAE
# --------------------------------------------------------------------------

_PARAM_NAMES = ("W1", "b1", "Wmu", "bmu", "Wlv", "blv", "W3", "b3", "W4", "b4")


@dataclass(eq=False)
class VaeModel:
    W1: np.ndarray
    b1: np.ndarray
    Wmu: np.ndarray
    bmu: np.ndarray
    Wlv: np.ndarray
    blv: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    W4: np.ndarray
    b4: np.ndarray
    loss_trace: list = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.Wmu.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in _PARAM_NAMES}

    def validate(self) -> None:
        d, h, l = self.input_dim, self.W1.shape[1], self.latent_dim
        shapes = {"W1": (d, h), "b1": (h,), "Wmu": (h, l), "bmu": (l,), "Wlv": (h, l), "blv": (l,),
                  "W3": (l, h), "b3": (h,), "W4": (h, d), "b4": (d,)}
        for k, s in shapes.items():
            a = getattr(self, k)
            if a.shape != s:
                raise ConfigurationError(k, f"shape {a.shape} != {s}")
            if not np.all(np.isfinite(a)):
                raise NumericalError(f"non-finite weights in {k}")

    @classmethod
    def init(cls, input_dim: int, latent_dim: int, seed: int, hidden: int = HIDDEN) -> "VaeModel":
        g = make_rng(seed, "vae-init")

        def glorot(n_in, n_out):
            lim = math.sqrt(6.0 / (n_in + n_out))
            return g.uniform(-lim, lim, (n_in, n_out))

        return cls(
            glorot(input_dim, hidden), np.zeros(hidden),
            glorot(hidden, latent_dim), np.zeros(latent_dim),
            glorot(hidden, latent_dim), np.zeros(latent_dim),
            glorot(latent_dim, hidden), np.zeros(hidden),
            glorot(hidden, input_dim), np.zeros(input_dim),
        )

    def to_json(self) -> dict:
        d = {k: v for k, v in self.params().items()}
        d["loss_trace"] = list(self.loss_trace)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "VaeModel":
        m = cls(*(np.asarray(d[k], dtype=np.float64) for k in _PARAM_NAMES))
        m.loss_trace = list(d.get("loss_trace", []))
        return m


def kl_term(mu, log_var) -> np.ndarray:
    """Per-row KL(N(mu, exp(log_var)) || N(0, I))."""
    mu = np.atleast_2d(mu)
    log_var = np.atleast_2d(log_var)
    return 0.5 * np.sum(mu ** 2 + np.exp(log_var) - 1.0 - log_var, axis=1)


@dataclass
class LossParts:
    total: float
    reconstruction: float
    kl: float


def vae_loss_and_grads(model: VaeModel, x: np.ndarray, eps: np.ndarray,
                       need_grads: bool = True) -> tuple[LossParts, dict[str, np.ndarray] | None]:
    """Batch-mean negative ELBO for fixed noise ``eps`` and its gradients."""
    n = x.shape[0]
    a1 = x @ model.W1 + model.b1
    h1 = np.tanh(a1)
    mu = h1 @ model.Wmu + model.bmu
    lv = h1 @ model.Wlv + model.blv
    sd = np.exp(0.5 * lv)
    z = mu + sd * eps
    h2 = np.tanh(z @ model.W3 + model.b3)
    xhat = h2 @ model.W4 + model.b4
    diff = xhat - x
    rec = 0.5 * np.sum(diff ** 2, axis=1)
    kl = kl_term(mu, lv)
    parts = LossParts(float(np.mean(rec + kl)), float(np.mean(rec)), float(np.mean(kl)))
    if not need_grads:
        return parts, None

    d_xhat = diff / n
    g = {"W4": h2.T @ d_xhat, "b4": d_xhat.sum(axis=0)}
    d_a2 = (d_xhat @ model.W4.T) * (1.0 - h2 ** 2)
    g["W3"] = z.T @ d_a2
    g["b3"] = d_a2.sum(axis=0)
    d_z = d_a2 @ model.W3.T
    d_mu = d_z + mu / n
    d_lv = d_z * eps * 0.5 * sd + 0.5 * (np.exp(lv) - 1.0) / n
    g["Wmu"] = h1.T @ d_mu
    g["bmu"] = d_mu.sum(axis=0)
    g["Wlv"] = h1.T @ d_lv
    g["blv"] = d_lv.sum(axis=0)
    d_a1 = (d_mu @ model.Wmu.T + d_lv @ model.Wlv.T) * (1.0 - h1 ** 2)
    g["W1"] = x.T @ d_a1
    g["b1"] = d_a1.sum(axis=0)
    return parts, g


def train_vae(features: FeatureMatrix, latent_dim: int = 2, epochs: int = 200, learning_rate: float = 1e-2,
              batch_size: int | None = None, seed: int = 0) -> VaeModel:
    """Fit the VAE with reparameterized gradients and Adam.

    ``batch_size=None`` uses the full dataset per step. ``loss_trace`` holds
    one (total, reconstruction, kl) triple per step.
    """
    x = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DomainError("features must be a non-empty matrix")
    if latent_dim < 1:
        raise ConfigurationError("latent_dim", "must be at least 1")
    if not learning_rate > 0:
        raise ConfigurationError("learning_rate", "must be positive")
    if epochs < 0:
        raise ConfigurationError("epochs", "must be non-negative")
    n = x.shape[0]
    bs = n if batch_size is None else int(batch_size)
    if bs < 1:
        raise ConfigurationError("batch_size", "must be positive")
    model = VaeModel.init(x.shape[1], latent_dim, seed)
    g = make_rng(seed, "vae-train")
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    m = {k: np.zeros_like(v) for k, v in model.params().items()}
    v = {k: np.zeros_like(v) for k, v in model.params().items()}
    step = 0
    for epoch in range(epochs):
        order = g.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            eps = g.standard_normal((idx.size, latent_dim))
            with np.errstate(over="ignore", invalid="ignore"):
                parts, grads = vae_loss_and_grads(model, x[idx], eps)
            if not math.isfinite(parts.total):
                raise NumericalError(f"VAE loss became non-finite at epoch {epoch}")
            model.loss_trace.append((parts.total, parts.reconstruction, parts.kl))
            step += 1
            for k, gk in grads.items():
                m[k] = b1 * m[k] + (1 - b1) * gk
                v[k] = b2 * v[k] + (1 - b2) * gk * gk
                mh = m[k] / (1 - b1 ** step)
                vh = v[k] / (1 - b2 ** step)
                setattr(model, k, getattr(model, k) - learning_rate * mh / (np.sqrt(vh) + adam_eps))
    return model


def encode(model: VaeModel, features) -> np.ndarray:
    """Posterior means of the latent code, one row per agent."""
    x = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DomainError(f"expected {model.input_dim} feature columns, got shape {x.shape}")
    return np.tanh(x @ model.W1 + model.b1) @ model.Wmu + model.bmu


# --------------------------------------------------------------------------
# GMM
# --------------------------------------------------------------------------


@dataclass(eq=False)
class GmmModel:
    mixing_weights: np.ndarray
    component_means: np.ndarray
    component_covariances: np.ndarray  # (K, L) diagonal variances
    trace: list = field(default_factory=list)

    def __post_init__(self):
        self.mixing_weights = np.asarray(self.mixing_weights, dtype=np.float64)
        self.component_means = np.atleast_2d(np.asarray(self.component_means, dtype=np.float64))
        self.component_covariances = np.atleast_2d(np.asarray(self.component_covariances, dtype=np.float64))

    @property
    def n_components(self) -> int:
        return self.mixing_weights.size

    @property
    def dim(self) -> int:
        return self.component_means.shape[1]

    @property
    def n_free_parameters(self) -> int:
        k, d = self.n_components, self.dim
        return (k - 1) + 2 * k * d

    def permuted(self, perm) -> "GmmModel":
        p = np.asarray(perm)
        return GmmModel(self.mixing_weights[p], self.component_means[p], self.component_covariances[p])

    def to_json(self) -> dict:
        return {"mixing_weights": self.mixing_weights, "component_means": self.component_means,
                "component_covariances": self.component_covariances, "trace": list(self.trace)}

    @classmethod
    def from_json(cls, d: dict) -> "GmmModel":
        return cls(d["mixing_weights"], d["component_means"], d["component_covariances"], list(d.get("trace", [])))


def _component_log_densities(model: GmmModel, x: np.ndarray) -> np.ndarray:
    var = model.component_covariances
    diff = x[:, None, :] - model.component_means[None, :, :]
    return (np.log(model.mixing_weights)[None, :]
            - 0.5 * np.sum(_LOG_2PI + np.log(var)[None] + diff ** 2 / var[None], axis=2))


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def gmm_log_likelihood(model: GmmModel, latents) -> float:
    x = _check_latents(latents, model.dim)
    return float(_logsumexp_rows(_component_log_densities(model, x)).sum())


def _check_latents(latents, dim: int | None = None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    if dim is not None and x.shape[1] != dim:
        raise DomainError(f"latent width {x.shape[1]} != model dimension {dim}")
    if not np.all(np.isfinite(x)):
        raise DomainError("latents contain non-finite entries")
    return x


def _kmeans_pp(x: np.ndarray, k: int, g: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[g.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(g.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), g.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def fit_gmm(latents, n_components: int, max_iter: int = 200, tol: float = 1e-8, seed: int = 0,
            cov_floor: float = COV_FLOOR) -> GmmModel:
    """Diagonal-covariance GMM by EM from k-means++ seeded means."""
    x = _check_latents(latents)
    n, d = x.shape
    if n_components < 1:
        raise ConfigurationError("n_components", "must be at least 1")
    if n < n_components:
        raise DomainError(f"{n} points cannot support {n_components} components")
    g = make_rng(seed, "gmm-init", n_components)
    means = _kmeans_pp(x, n_components, g)
    var0 = np.maximum(x.var(axis=0), cov_floor)
    model = GmmModel(np.full(n_components, 1.0 / n_components), means, np.tile(var0, (n_components, 1)))
    prev = -math.inf
    trace = []
    for _ in range(max_iter):
        logd = _component_log_densities(model, x)
        lse = _logsumexp_rows(logd)
        ll = float(lse.sum())
        trace.append(ll)
        if ll - prev < tol:
            break
        prev = ll
        resp = np.exp(logd - lse[:, None])
        nk = resp.sum(axis=0)
        empty = nk < 1e-12
        nk_safe = np.where(empty, 1.0, nk)
        new_means = (resp.T @ x) / nk_safe[:, None]
        new_var = (resp.T @ (x ** 2)) / nk_safe[:, None] - new_means ** 2
        new_means[empty] = model.component_means[empty]
        new_var[empty] = model.component_covariances[empty]
        weights = np.maximum(nk / n, 1e-300)
        model = GmmModel(weights / weights.sum(), new_means, np.maximum(new_var, cov_floor))
    model.trace = trace
    return model


@dataclass(eq=False)
class ClusterAssignment:
    labels: np.ndarray
    responsibilities: np.ndarray

    @property
    def n_clusters(self) -> int:
        return self.responsibilities.shape[1]


def assign_clusters(model: GmmModel, latents) -> ClusterAssignment:
    """Bayes-rule responsibilities and argmax labels (lowest index on ties)."""
    x = _check_latents(latents, model.dim)
    logd = _component_log_densities(model, x)
    resp = np.exp(logd - _logsumexp_rows(logd)[:, None])
    resp /= resp.sum(axis=1, keepdims=True)
    return ClusterAssignment(np.argmax(resp, axis=1).astype(np.int64), resp)


def gmm_bic(model: GmmModel, latents) -> float:
    x = _check_latents(latents, model.dim)
    return -2.0 * gmm_log_likelihood(model, x) + model.n_free_parameters * math.log(x.shape[0])


def select_k(latents, k_range=range(1, 5), seed: int = 0, max_iter: int = 200) -> tuple[int, dict[int, float]]:
    """Component count with the lowest BIC; returns (k, {k: BIC})."""
    x = _check_latents(latents)
    ks = list(k_range)
    if not ks:
        raise ConfigurationError("k_range", "must be non-empty")
    table = {}
    for k in ks:
        if k > x.shape[0]:
            raise DomainError(f"k={k} exceeds the number of points")
        table[int(k)] = gmm_bic(fit_gmm(x, k, max_iter=max_iter, seed=derive_seed(seed, "select-k", k)), x)
    best = min(table, key=lambda k: (table[k], k))
    return best, table


def canonical_cluster_order(assignment: ClusterAssignment, model: GmmModel, features: FeatureMatrix
                            ) -> tuple[ClusterAssignment, GmmModel]:
    """Relabel clusters by ascending mean of the first feature column.

    Makes cluster indices reproducible in meaning (cluster 0 is the poorest),
    which keeps reports readable.
    """
    k = model.n_components
    col = features.values[:, 0]
    keys = [col[assignment.labels == j].mean() if np.any(assignment.labels == j) else math.inf for j in range(k)]
    perm = np.array(sorted(range(k), key=lambda j: (keys[j], j)))
    inv = np.empty(k, dtype=np.int64)
    inv[perm] = np.arange(k)
    resp = assignment.responsibilities[:, perm]
    return ClusterAssignment(inv[assignment.labels], resp), model.permuted(perm)


@dataclass(eq=False)
class ClusterResult:
    features: FeatureMatrix
    vae: VaeModel
    latents: np.ndarray
    gmm: GmmModel
    assignment: ClusterAssignment
    bic_table: dict


def cluster_agents(population, initial_price: float, n_clusters: int | None = None, k_range=range(1, 5),
                   seed: int = 0, latent_dim: int = 2, epochs: int = 200, learning_rate: float = 1e-2,
                   batch_size: int | None = None) -> ClusterResult:
    """Full pipeline: features, VAE, encode, GMM (BIC-selected unless pinned), assign."""
    feats = agent_features(population, initial_price)
    vae = train_vae(feats, latent_dim, epochs, learning_rate, batch_size, seed=derive_seed(seed, "vae"))
    z = encode(vae, feats)
    table: dict[int, float] = {}
    if n_clusters is None:
        n_clusters, table = select_k(z, k_range, seed=derive_seed(seed, "gmm"))
    gmm = fit_gmm(z, n_clusters, seed=derive_seed(derive_seed(seed, "gmm"), "select-k", n_clusters))
    assignment, gmm = canonical_cluster_order(assign_clusters(gmm, z), gmm, feats)
    return ClusterResult(feats, vae, z, gmm, assignment, table)
