"""Second-order weight statistics by sampling and by Laplace approximation.

A layer's weight perturbation U (same shape as the folded weight matrix)
has a full correlation matrix R over vec(U), plus column and row
correlation matrices from U^T U and U U^T. The sampling estimator draws
loss-constrained weight perturbations around a trained network; the
Laplace estimator inverts the Kronecker factors of the expected
softmax-CE Hessian. Both report the same summary: eigenvalue extremes of
R, square-rooted spectral norms of the normalized column/row
correlations, a determinant lower bound, and the squared Frobenius norm.

The module also hosts two Monte-Carlo studies: the correlation-matrix
norm trade-off (Frobenius norm against the spectral-norm proxy and the
determinant bound) and the spectral-norm bound for iid Gaussian
perturbation matrices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.stats

from .data import Dataset, batches
from .decorr import Unsupported, hessian_kron_factors
from .linalg import (
    TOL_PSD,
    det_lower_bound,
    equicorrelation,
    frobenius_sq,
    inverse_psd,
    logdet_psd,
    normalize_to_correlation,
    random_correlation,
    spectral_norm,
)
from .network import Network, backward, cross_entropy, cross_entropy_grad, forward

MAX_MATERIALIZED_DIM = 4096

SOURCES = ("sampling", "laplace")
DATA_TAGS = ("clean", "adversarial")
STUDY_FAMILIES = ("random", "equicorrelation")


class DegenerateVariance(ValueError):
    """A weight coordinate shows zero variance across the samples."""


class SamplingStalled(RuntimeError):
    """The loss-constrained sampler's acceptance rate collapsed."""


@dataclass
class LayerCorrStats:
    """Per-layer second-order weight statistics from one estimator.

    `dim` is the length of the vectorized layer weight; `r` is only
    materialized when dim <= 4096. `logdet` is -inf when the estimate is
    rank deficient (then `det_lb` degenerates to the trivial bound 0).
    """

    layer: int
    dim: int
    rc: np.ndarray
    rr: np.ndarray
    lam_max: float
    lam_min: float
    lamc_max: float
    lamr_max: float
    det_lb: float
    logdet: float
    frob_sq: float
    source: str
    data: str
    sample_count: int
    r: np.ndarray | None = None

    def validate(self):
        for name, mat in (("rc", self.rc), ("rr", self.rr)):
            if np.abs(mat - mat.T).max() > 1e-10:
                raise ValueError(f"{name} is not symmetric")
            if np.abs(np.diag(mat) - 1.0).max() > 1e-8:
                raise ValueError(f"{name} does not have a unit diagonal")
            if np.linalg.eigvalsh(mat).min() < -TOL_PSD:
                raise ValueError(f"{name} is not PSD within tolerance")
            if np.abs(mat).max() > 1.0 + 1e-12:
                raise ValueError(f"{name} has off-diagonal magnitude above 1")
        if self.lam_min > 1.0 + 1e-8 or self.lam_max < 1.0 - 1e-8:
            raise ValueError("eigenvalue extremes must bracket 1 for unit-trace scaling")
        if self.logdet > -np.inf and self.det_lb > np.exp(self.logdet) * (1 + 1e-9):
            raise ValueError("determinant lower bound exceeds the determinant")
        return self

    CSV_FIELDS = (
        "layer", "dim", "source", "data", "sample_count",
        "lam_max", "lam_min", "lamc_max", "lamr_max", "det_lb", "logdet", "frob_sq",
    )

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(self.CSV_FIELDS)
            w.writerow([_csv_cell(getattr(self, name)) for name in self.CSV_FIELDS])

    @classmethod
    def read_csv(cls, path) -> "LayerCorrStats":
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        if len(rows) != 1:
            raise ValueError(f"{path}: expected exactly one stats row")
        row = rows[0]
        ints = {"layer", "dim", "sample_count"}
        kw = {k: (int(row[k]) if k in ints else row[k] if k in ("source", "data") else float(row[k]))
              for k in cls.CSV_FIELDS}
        dim_c = dim_r = 1  # matrices are not round-tripped through CSV
        return cls(rc=np.eye(dim_c), rr=np.eye(dim_r), **kw)


def _csv_cell(value):
    if isinstance(value, float):
        return f"{value:.17g}"
    return value


# ---------------------------------------------------------------------------
# sampling estimator


@dataclass(frozen=True)
class SamplingConfig:
    """Loss-constrained Gaussian weight sampling.

    A draw w+u is valid when |L(w+u) - L(w)| <= loss_tolerance, where L is
    the mean cross-entropy over the provided dataset; draws that fail are
    refined by plain SGD (refine_epochs at refine_lr) and re-checked.
    noise_sigma = None scales the noise per layer to 0.01 * RMS(weights).
    `layers` restricts both the perturbation and the refinement to a
    subset of layers (1-based); None perturbs the whole network.
    """

    num_samples: int = 100
    loss_tolerance: float = 0.05
    refine_epochs: int = 50
    refine_lr: float = 1e-4
    refine_batch_size: int = 64
    noise_sigma: float | None = None
    layers: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 2:
            raise ValueError("num_samples must be >= 2")
        if self.loss_tolerance <= 0 or self.refine_epochs < 0 or self.refine_lr <= 0:
            raise ValueError("loss_tolerance, refine_epochs, refine_lr must be positive")


def _dataset_loss(net: Network, ds: Dataset) -> float:
    return cross_entropy(forward(net, ds.inputs).logits, ds.labels)


def _active_mask(net: Network, cfg: SamplingConfig) -> list[bool]:
    if cfg.layers is None:
        return [True] * len(net.layers)
    if not all(1 <= l <= len(net.layers) for l in cfg.layers):
        raise ValueError(f"layers {cfg.layers} out of range")
    return [(i + 1) in cfg.layers for i in range(len(net.layers))]


def _layer_sigmas(net: Network, cfg: SamplingConfig) -> list[float]:
    if cfg.noise_sigma is not None:
        return [cfg.noise_sigma] * len(net.layers)
    return [0.01 * float(np.sqrt(np.mean(w * w))) for w in net.weights]


def _refine(net: Network, ds: Dataset, cfg: SamplingConfig, active: list[bool], draw: int) -> Network:
    for epoch in range(cfg.refine_epochs):
        for xb, yb in batches(ds, cfg.refine_batch_size, epoch_seed_from(cfg.seed, draw, epoch)):
            tape = forward(net, xb)
            grads = backward(net, tape, cross_entropy_grad(tape.logits, yb))
            net = net.with_weights(
                [w - cfg.refine_lr * g if on else w
                 for w, g, on in zip(net.weights, grads, active)]
            )
    return net


def epoch_seed_from(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def sample_weight_perturbations(
    net: Network, ds: Dataset, cfg: SamplingConfig
) -> list[list[np.ndarray]]:
    """Accepted weight deltas u (one list of per-layer arrays per sample).

    Raises SamplingStalled when 100 * num_samples draws are exhausted
    before num_samples acceptances.
    """
    base_loss = _dataset_loss(net, ds)
    sigmas = _layer_sigmas(net, cfg)
    active = _active_mask(net, cfg)
    accepted: list[list[np.ndarray]] = []
    max_draws = 100 * cfg.num_samples
    for draw in range(max_draws):
        if len(accepted) == cfg.num_samples:
            break
        rng = np.random.default_rng([cfg.seed, draw])
        noise = [
            sigma * rng.standard_normal(w.shape) if on else np.zeros_like(w)
            for w, sigma, on in zip(net.weights, sigmas, active)
        ]
        candidate = net.with_weights([w + u for w, u in zip(net.weights, noise)])
        if abs(_dataset_loss(candidate, ds) - base_loss) <= cfg.loss_tolerance:
            accepted.append(noise)
            continue
        refined = _refine(candidate, ds, cfg, active, draw)
        if abs(_dataset_loss(refined, ds) - base_loss) <= cfg.loss_tolerance:
            accepted.append([rw - w for rw, w in zip(refined.weights, net.weights)])
    if len(accepted) < cfg.num_samples:
        raise SamplingStalled(
            f"accepted {len(accepted)}/{cfg.num_samples} after {max_draws} draws"
        )
    return accepted


def corr_from_samples(deltas: list[list[np.ndarray]], layer: int) -> LayerCorrStats:
    """Empirical correlation statistics of one layer's weight deltas.

    Second moments are normalized by the scalar per-entry variance, which
    gives the full correlation matrix trace equal to its dimension. The
    full matrix is materialized only up to dim 4096; above that the
    nonzero spectrum comes from the sample Gram matrix.
    """
    if len(deltas) < 2:
        raise ValueError("need at least 2 weight samples")
    mats = [d[layer - 1] for d in deltas]
    count = len(mats)
    flat = np.stack([m.reshape(-1) for m in mats])  # (samples, dim)
    dim = flat.shape[1]
    sigma_sq = float(np.mean(flat * flat))
    if sigma_sq <= 0.0:
        raise DegenerateVariance("all-zero weight samples")

    rc_raw = sum(m.T @ m for m in mats) / count
    rr_raw = sum(m @ m.T for m in mats) / count
    if min(np.diag(rc_raw).min(), np.diag(rr_raw).min()) <= 0.0:
        raise DegenerateVariance("a weight coordinate never varies across samples")
    rc = normalize_to_correlation(rc_raw)
    rr = normalize_to_correlation(rr_raw)

    if dim <= MAX_MATERIALIZED_DIM:
        r = flat.T @ flat / (count * sigma_sq)
        eig = np.linalg.eigvalsh(r)
        lam_max = float(eig[-1])
        lam_min = float(max(eig[0], 0.0))
        frob = frobenius_sq(r)
    else:
        gram = flat @ flat.T / (count * sigma_sq)
        eig = np.linalg.eigvalsh(gram)
        lam_max = float(eig[-1])
        lam_min = 0.0  # fewer samples than dimensions: rank deficient
        frob = float(np.sum(eig * eig))
        r = None

    if lam_min > TOL_PSD:
        logdet = float(np.sum(np.log(np.maximum(eig, 1e-300))))
        det_lb = det_lower_bound(min(lam_min, 1.0), max(lam_max, 1.0), dim)
    else:
        logdet = -np.inf
        det_lb = 0.0  # trivial bound: the estimate is singular

    return LayerCorrStats(
        layer=layer,
        dim=dim,
        rc=rc,
        rr=rr,
        lam_max=lam_max,
        lam_min=lam_min,
        lamc_max=float(np.sqrt(spectral_norm(rc))),
        lamr_max=float(np.sqrt(spectral_norm(rr))),
        det_lb=det_lb,
        logdet=logdet,
        frob_sq=frob,
        source="sampling",
        data="clean",
        sample_count=count,
        r=r,
    ).validate()


# ---------------------------------------------------------------------------
# Laplace estimator


def laplace_stats_from_factors(
    a_hat: np.ndarray, h_hat: np.ndarray, damping: float, layer: int, sample_count: int
) -> LayerCorrStats:
    """Statistics of the Kronecker-structured correlation P (x) Q.

    P and Q are the unit-diagonal normalizations of the damped factor
    inverses; eigenvalues of the product structure are products of the
    factor eigenvalues, so the extremes, determinant, and Frobenius norm
    all come from the small factors.
    """
    ridge_a = damping * float(np.trace(a_hat)) / a_hat.shape[0]
    ridge_h = damping * float(np.trace(h_hat)) / h_hat.shape[0]
    rc = normalize_to_correlation(inverse_psd(a_hat + ridge_a * np.eye(a_hat.shape[0])))
    rr = normalize_to_correlation(inverse_psd(h_hat + ridge_h * np.eye(h_hat.shape[0])))

    eig_c = np.linalg.eigvalsh(rc)
    eig_r = np.linalg.eigvalsh(rr)
    lam_max = float(eig_c[-1] * eig_r[-1])
    lam_min = float(max(eig_c[0], 0.0) * max(eig_r[0], 0.0))
    dim = rc.shape[0] * rr.shape[0]
    logdet = rr.shape[0] * logdet_psd(rc) + rc.shape[0] * logdet_psd(rr)
    det_lb = det_lower_bound(min(lam_min, 1.0), max(lam_max, 1.0), dim)

    return LayerCorrStats(
        layer=layer,
        dim=dim,
        rc=rc,
        rr=rr,
        lam_max=lam_max,
        lam_min=lam_min,
        lamc_max=float(np.sqrt(spectral_norm(rc))),
        lamr_max=float(np.sqrt(spectral_norm(rr))),
        det_lb=det_lb,
        logdet=logdet,
        frob_sq=frobenius_sq(rc) * frobenius_sq(rr),
        source="laplace",
        data="clean",
        sample_count=sample_count,
        r=None,
    ).validate()


def corr_from_laplace(
    net: Network, ds: Dataset, layer: int, damping: float = 1e-3, chunk: int = 2048
) -> LayerCorrStats:
    """Laplace-approximation statistics for the output layer.

    The expected Hessian factorizes over the layer input second moment and
    the softmax curvature; the weight-posterior covariance is the damped
    inverse of each factor.
    """
    if layer != len(net.layers):
        raise Unsupported("the Laplace estimator covers the softmax output layer only")
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    a_dim = net.layers[-1].in_dim + 1
    a_hat = np.zeros((a_dim, a_dim))
    h_hat = np.zeros((net.output_dim, net.output_dim))
    for start in range(0, len(ds), chunk):
        xb = ds.inputs[start : start + chunk]
        yb = ds.labels[start : start + chunk]
        tape = forward(net, xb)
        a_part, h_part = hessian_kron_factors(tape, yb, layer)
        a_hat += a_part * len(xb)
        h_hat += h_part * len(xb)
    a_hat /= len(ds)
    h_hat /= len(ds)
    return laplace_stats_from_factors(a_hat, h_hat, damping, layer, sample_count=len(ds))


# ---------------------------------------------------------------------------
# correlation-matrix norm study


@dataclass
class CorrelationStudy:
    """Rows of (frob_sq, lam_proxy, det_lb) plus Spearman summaries.

    lam_proxy = sqrt(dim * lam_max) matches the closed form
    sqrt(d*(1 + (d-1)r)) of the equicorrelation family's column matrix.
    """

    family: str
    dim: int
    rows: np.ndarray  # (n, 3)
    rho_frob_lam: float
    rho_frob_det: float
    seed: int | None = None
    r_values: np.ndarray | None = None

    HEADER = ("frob_sq", "lam_proxy", "det_lb")

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(self.HEADER)
            for row in self.rows:
                w.writerow([f"{v:.17g}" for v in row])


def equicorrelation_row(dim: int, r: float) -> tuple[float, float, float]:
    """Closed-form (frob_sq, lam_proxy, det_lb) for the equicorrelation family."""
    frob = dim + dim * (dim - 1) * r * r
    if r >= 0:
        lam_max, lam_min = 1.0 + (dim - 1) * r, 1.0 - r
    else:
        lam_max, lam_min = 1.0 - r, 1.0 + (dim - 1) * r
    proxy = float(np.sqrt(dim * lam_max))
    det_lb = det_lower_bound(min(lam_min, 1.0), max(lam_max, 1.0), dim)
    return float(frob), proxy, det_lb


def simulate_correlation_study(
    dim: int = 9,
    n_samples: int = 10_000,
    family: str = "random",
    seed: int = 0,
    r_range: tuple[float, float] = (0.0, 0.9),
) -> CorrelationStudy:
    """Sample correlation matrices and tabulate the norm trade-off.

    The "random" family draws normalized-Wishart matrices; the
    "equicorrelation" family sweeps the constant off-diagonal r over
    r_range and uses the exact closed forms.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if family not in STUDY_FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    rows = np.empty((n_samples, 3))
    r_values = None
    if family == "random":
        rng = np.random.default_rng(seed)
        for i in range(n_samples):
            corr = random_correlation(dim, rng)
            eig = np.linalg.eigvalsh(corr)
            lam_min = float(max(eig[0], 1e-12))
            lam_max = float(eig[-1])
            rows[i] = (
                frobenius_sq(corr),
                float(np.sqrt(dim * lam_max)),
                det_lower_bound(min(lam_min, 1.0), max(lam_max, 1.0), dim),
            )
    else:
        lo, hi = r_range
        if not (-1.0 / (dim - 1) < lo <= hi < 1.0):
            raise ValueError(f"r_range {r_range} outside the PSD range")
        r_values = np.linspace(lo, hi, n_samples)
        for i, r in enumerate(r_values):
            rows[i] = equicorrelation_row(dim, float(r))
    rho_lam = scipy.stats.spearmanr(rows[:, 0], rows[:, 1]).statistic
    rho_det = scipy.stats.spearmanr(rows[:, 0], rows[:, 2]).statistic
    return CorrelationStudy(
        family=family,
        dim=dim,
        rows=rows,
        rho_frob_lam=float(rho_lam),
        rho_frob_det=float(rho_det),
        seed=seed,
        r_values=r_values,
    )


# ---------------------------------------------------------------------------
# perturbation-norm check


@dataclass
class PerturbationReport:
    """Distribution of ||U||_2 / (2 sqrt(h) sigma) for iid Gaussian U.

    For an iid Gaussian h x h matrix both the column and row correlation
    matrices are h * I, so the reference scale (sqrt of each spectral
    norm, summed) is 2 sqrt(h) in units of sigma; the ratios calibrate the
    constant left unstated by the probabilistic bound.
    """

    h: int
    sigma: float
    trials: int
    ratios: np.ndarray
    median: float
    p95: float

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(("trial", "ratio"))
            for i, ratio in enumerate(self.ratios):
                w.writerow((i, f"{ratio:.17g}"))


def check_perturbation_bound(
    h: int, sigma: float, trials: int, seed: int = 0
) -> PerturbationReport:
    if trials < 30:
        raise ValueError("need at least 30 trials")
    scale = 2.0 * np.sqrt(h) * sigma
    ratios = np.empty(trials)
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        u = sigma * rng.standard_normal((h, h))
        ratios[t] = spectral_norm(u) / scale
    return PerturbationReport(
        h=h,
        sigma=sigma,
        trials=trials,
        ratios=ratios,
        median=float(np.median(ratios)),
        p95=float(np.percentile(ratios, 95)),
    )
