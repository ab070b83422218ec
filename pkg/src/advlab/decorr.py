"""Weight-decorrelation penalty for adversarial training.

The penalty for a layer is the squared Frobenius norm of the unit-diagonal
normalization of the inverse (ridge-damped) covariance of the activations
feeding that layer, accumulated over a clean and an adversarial minibatch.
Minimizing it pushes the normalized precision toward the identity, i.e.
decorrelates the layer's input statistics and, through the Laplace view of
the weight posterior, the weights themselves.

The gradient is exact: the chain batch covariance -> ridge -> matrix
inverse (dM = -M dS M) -> unit-diagonal normalization -> squared Frobenius
norm is differentiated in closed form and then backpropagated through the
network to every upstream weight. Adversarial inputs are treated as
constants (no differentiation through the attack).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import frobenius_sq, inverse_psd, normalize_to_correlation
from .network import (
    ForwardTape,
    Network,
    StaleTape,
    _augment,
    backward_from_activation,
    softmax,
)

LAYER_POLICIES = ("last", "all")


class EmptyBatch(ValueError):
    """Covariance of an empty batch is undefined."""


class Unsupported(ValueError):
    """Requested a Hessian factorization outside the supported case."""


@dataclass(frozen=True)
class DecorrConfig:
    """Penalty weight, ridge, and which layers to penalize.

    damping_mode "scaled" uses ridge = damping * trace(cov)/h, which keeps
    the ridge meaningful across activation scales; "absolute" uses the raw
    damping value. Minibatches smaller than the layer width make the
    covariance singular routinely, so some ridge is always required.
    """

    alpha: float = 0.3
    damping: float = 1e-3
    damping_mode: str = "scaled"
    layer_policy: str = "last"

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha >= 0.0):
            raise ValueError("alpha must be finite and >= 0")
        if not self.damping >= 1e-8:
            raise ValueError("damping must be >= 1e-8")
        if self.damping_mode not in ("scaled", "absolute"):
            raise ValueError(f"unknown damping_mode {self.damping_mode!r}")
        if self.layer_policy not in LAYER_POLICIES:
            raise ValueError(f"unknown layer_policy {self.layer_policy!r}")


def penalized_layer_indices(net: Network, cfg: DecorrConfig) -> list[int]:
    n = len(net.layers)
    return [n] if cfg.layer_policy == "last" else list(range(1, n + 1))


def activation_covariance(tape: ForwardTape, layer: int) -> np.ndarray:
    """Second moment (1/B) sum a a^T of the activations feeding `layer`."""
    if not 1 <= layer <= len(tape.net.layers):
        raise ValueError(f"layer {layer} out of range")
    a = tape.activations[layer - 1]
    if a.shape[0] == 0:
        raise EmptyBatch("cannot form a covariance from an empty batch")
    return a.T @ a / a.shape[0]


def resolve_ridge(cov: np.ndarray, cfg: DecorrConfig) -> float:
    if cfg.damping_mode == "absolute":
        return cfg.damping
    scale = float(np.trace(cov)) / cov.shape[0]
    if scale <= 1e-300:
        return cfg.damping  # dead layer: fall back to the absolute ridge
    return cfg.damping * scale


def normalized_precision(cov: np.ndarray, damping: float) -> np.ndarray:
    """Unit-diagonal normalization of (cov + damping*I)^-1."""
    ridged = cov + damping * np.eye(cov.shape[0])
    return normalize_to_correlation(inverse_psd(ridged))


def activation_penalty(activations: np.ndarray, cfg: DecorrConfig) -> float:
    """Penalty contribution of one activation matrix (rows = samples)."""
    if activations.shape[0] == 0:
        raise EmptyBatch("cannot form a covariance from an empty batch")
    cov = activations.T @ activations / activations.shape[0]
    return frobenius_sq(normalized_precision(cov, resolve_ridge(cov, cfg)))


def decorr_penalty(tape_clean: ForwardTape, tape_adv: ForwardTape, cfg: DecorrConfig) -> float:
    """Total penalty over the configured layers and both minibatches.

    Unit diagonals alone contribute the layer width per tape, so the value
    is always >= 2h for each configured layer.
    """
    if tape_clean.net is not tape_adv.net:
        raise StaleTape("clean and adversarial tapes come from different networks")
    total = 0.0
    for layer in penalized_layer_indices(tape_clean.net, cfg):
        for tape in (tape_clean, tape_adv):
            total += activation_penalty(tape.activations[layer - 1], cfg)
    return total


def _penalty_cov_gradient(cov: np.ndarray, cfg: DecorrConfig) -> np.ndarray:
    """d ||normalized_precision||_F^2 / d cov, including the ridge path."""
    ridge = resolve_ridge(cov, cfg)
    m = inverse_psd(cov + ridge * np.eye(cov.shape[0]))
    corr = normalize_to_correlation(m)
    diag = np.diag(m)
    scale = np.outer(np.sqrt(diag), np.sqrt(diag))
    # dP/dM: off-diagonal from the direct entries, diagonal from the
    # normalization denominators (the unit diagonal itself is constant)
    g = 2.0 * corr / scale
    off_row_sq = (corr * corr).sum(axis=1) - 1.0
    np.fill_diagonal(g, -2.0 * off_row_sq / diag)
    k = -(m @ g @ m)
    if cfg.damping_mode == "scaled" and float(np.trace(cov)) / cov.shape[0] > 1e-300:
        # ridge = damping*tr(cov)/h feeds back into the damped matrix
        k += (cfg.damping / cov.shape[0]) * np.trace(k) * np.eye(cov.shape[0])
    return 0.5 * (k + k.T)


def decorr_gradient(
    net: Network, tape_clean: ForwardTape, tape_adv: ForwardTape, cfg: DecorrConfig
) -> list[np.ndarray]:
    """alpha-scaled exact gradient of the penalty w.r.t. every weight.

    Weights downstream of a penalized layer's input activations receive an
    exactly zero block.
    """
    if tape_clean.net is not net or tape_adv.net is not net:
        raise StaleTape("tapes were recorded on a different network")
    grads = [np.zeros_like(w) for w in net.weights]
    for layer in penalized_layer_indices(net, cfg):
        if layer == 1:
            continue  # the input covariance does not depend on the weights
        for tape in (tape_clean, tape_adv):
            a = tape.activations[layer - 1]
            if a.shape[0] == 0:
                raise EmptyBatch("cannot form a covariance from an empty batch")
            cov = a.T @ a / a.shape[0]
            k = _penalty_cov_gradient(cov, cfg)
            d_act = (2.0 / a.shape[0]) * a @ k
            for i, g in enumerate(backward_from_activation(net, tape, layer - 1, d_act)):
                grads[i] += g
    return [cfg.alpha * g for g in grads]


def hessian_kron_factors(tape: ForwardTape, labels, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Kronecker factors of the softmax-CE Hessian for the output layer.

    Returns (A_hat, H_hat): A_hat is the batch second moment of the
    layer's input including the folded bias coordinate, H_hat the batch
    mean of diag(p) - p p^T over the softmax probabilities. For a
    single-sample batch their Kronecker product (column-major weight
    vectorization) equals the exact Hessian w.r.t. the layer's weights;
    for larger batches it is the standard factorized approximation.
    Softmax-CE only: its pre-activation Hessian has this closed form and
    does not involve the labels.
    """
    net = tape.net
    if layer != len(net.layers):
        raise Unsupported("Hessian factorization is available for the output layer only")
    a = _augment(tape.activations[layer - 1])
    if a.shape[0] == 0:
        raise EmptyBatch("cannot form Hessian factors from an empty batch")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (a.shape[0],):
        raise ValueError("labels must match the batch")
    a_hat = a.T @ a / a.shape[0]
    p = softmax(tape.logits)
    h_hat = np.zeros((net.output_dim, net.output_dim))
    for row in p:
        h_hat += np.diag(row) - np.outer(row, row)
    h_hat /= a.shape[0]
    return a_hat, 0.5 * (h_hat + h_hat.T)
