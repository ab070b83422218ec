"""Numerical evaluation of spectral PAC-Bayesian complexity terms.

Four bound structures are evaluated: the classical spectral generalization
bound over clean data ("neyshabur"), its robust counterpart with the
attack radius folded into the input-norm bound ("xiao"), and two
correlation-aware robust bounds that add the weight-correlation factor to
the capacity product and a negative log-determinant term — using the true
per-layer log-determinant ("corr") or the trace-constrained determinant
lower bound built from eigenvalue extremes over clean and adversarial
statistics ("corr_mixed").

Every kind reports the plain argument of the square root: these are
relative complexity measures up to the universal constants the theory
leaves unspecified, not certified error bounds. The placeholder constant
is an input and is always recorded.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .linalg import frobenius_sq, logdet_lower_bound, spectral_norm
from .network import Network
from .weight_stats import LayerCorrStats

BOUND_KINDS = ("neyshabur", "xiao", "corr", "corr_mixed")


class DegenerateLayer(ValueError):
    """A layer has zero spectral norm; the capacity product is undefined."""


class IncompleteStats(ValueError):
    """Correlation statistics do not cover every layer."""


class InvalidMargin(ValueError):
    """The margin must be strictly positive."""


@dataclass(frozen=True)
class BoundInputs:
    """Scalar inputs shared by every bound kind.

    input_bound is the l2 norm bound B on the inputs; epsilon the attack
    radius (0 reduces the robust kinds toward the clean structure);
    constant the placeholder for the theory's unspecified universal
    constant, reported verbatim in every output.
    """

    gamma: float
    delta: float
    m: int
    input_bound: float
    epsilon: float = 0.0
    constant: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise InvalidMargin("gamma must be > 0")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.m < 1 or self.input_bound <= 0 or self.epsilon < 0 or self.constant <= 0:
            raise ValueError("m, input_bound, constant must be positive; epsilon >= 0")


@dataclass
class BoundReport:
    kind: str
    phi: float
    phi_term: float
    logdet_term: float
    log_term: float
    kl_proxy: float
    numerator: float
    complexity_term: float
    n_layers: int
    width: int
    inputs: BoundInputs
    per_layer: list[dict]

    def to_json_text(self) -> str:
        doc = {
            "kind": self.kind,
            "phi": self.phi,
            "phi_term": self.phi_term,
            "logdet_term": self.logdet_term,
            "log_term": self.log_term,
            "kl_proxy": self.kl_proxy,
            "numerator": self.numerator,
            "complexity_term": self.complexity_term,
            "n_layers": self.n_layers,
            "width": self.width,
            "inputs": {
                "gamma": self.inputs.gamma,
                "delta": self.inputs.delta,
                "m": self.inputs.m,
                "input_bound": self.inputs.input_bound,
                "epsilon": self.inputs.epsilon,
                "constant": self.inputs.constant,
            },
            "per_layer": self.per_layer,
        }
        return json.dumps(doc, indent=1) + "\n"

    CSV_FIELDS = (
        "kind", "phi", "phi_term", "logdet_term", "log_term", "kl_proxy",
        "numerator", "complexity_term", "n_layers", "width",
        "gamma", "delta", "m", "input_bound", "epsilon", "constant",
    )

    def write_csv(self, path):
        row = [
            self.kind, self.phi, self.phi_term, self.logdet_term, self.log_term,
            self.kl_proxy, self.numerator, self.complexity_term, self.n_layers,
            self.width, self.inputs.gamma, self.inputs.delta, self.inputs.m,
            self.inputs.input_bound, self.inputs.epsilon, self.inputs.constant,
        ]
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(self.CSV_FIELDS)
            w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])


def phi_standard(net: Network) -> float:
    """Capacity product prod ||W||_2^2 * sum ||W||_F^2 / ||W||_2^2.

    Norms are taken on the folded weight matrices (bias column included).
    Invariant under per-layer rescalings that preserve the product of
    spectral norms.
    """
    spectral_sq = []
    for layer in net.layers:
        s = spectral_norm(layer.weight)
        if s == 0.0:
            raise DegenerateLayer("a layer has zero spectral norm")
        spectral_sq.append(s * s)
    product = float(np.prod(spectral_sq))
    ratio_sum = sum(frobenius_sq(layer.weight) / s2 for layer, s2 in zip(net.layers, spectral_sq))
    return product * ratio_sum


def _lam_by_layer(net: Network, stats: list[LayerCorrStats]) -> dict[int, dict[str, float]]:
    """Aggregate per-layer extremes over however many entries cover a layer."""
    table: dict[int, dict[str, float]] = {}
    for s in stats:
        entry = table.setdefault(
            s.layer,
            {"lamc": -np.inf, "lamr": -np.inf, "lam_max": -np.inf, "lam_min": np.inf,
             "logdet": np.inf, "det_lb": np.inf, "dim": s.dim, "frob_sq": s.frob_sq},
        )
        if s.dim != entry["dim"]:
            raise IncompleteStats(f"layer {s.layer} has entries of mismatched dimension")
        entry["lamc"] = max(entry["lamc"], s.lamc_max)
        entry["lamr"] = max(entry["lamr"], s.lamr_max)
        entry["lam_max"] = max(entry["lam_max"], s.lam_max)
        entry["lam_min"] = min(entry["lam_min"], s.lam_min)
        entry["logdet"] = min(entry["logdet"], s.logdet)
        entry["det_lb"] = min(entry["det_lb"], s.det_lb)
        entry["frob_sq"] = max(entry["frob_sq"], s.frob_sq)
    missing = set(range(1, len(net.layers) + 1)) - set(table)
    if missing:
        raise IncompleteStats(f"no statistics for layers {sorted(missing)}")
    return table


def phi_correlated(net: Network, stats: list[LayerCorrStats]) -> float:
    """phi_standard inflated by the squared sum of correlation norms.

    The factor is (sum_l (lamc_l + lamr_l))^2 with per-layer maxima taken
    over the provided (clean and/or adversarial) statistics.
    """
    table = _lam_by_layer(net, stats)
    lam_sum = sum(entry["lamc"] + entry["lamr"] for entry in table.values())
    return phi_standard(net) * lam_sum**2


def evaluate_bound(
    net: Network, inputs: BoundInputs, kind: str, stats: list[LayerCorrStats] | None = None
) -> BoundReport:
    """Evaluate one bound kind; complexity_term = sqrt(numerator/(gamma^2 m)).

    The "corr" kind uses each layer's measured log-determinant (the most
    pessimistic entry when a layer has several); "corr_mixed" instead
    lower-bounds each determinant from the eigenvalue extremes across the
    layer's entries, so its numerator can only be larger.
    """
    if kind not in BOUND_KINDS:
        raise ValueError(f"unknown bound kind {kind!r}")
    n = len(net.layers)
    width = max(layer.out_dim for layer in net.layers)
    log_term = float(np.log(n * inputs.m / inputs.delta))
    per_layer = [
        {"layer": i + 1, "spectral_norm": spectral_norm(l.weight), "frob_sq": frobenius_sq(l.weight)}
        for i, l in enumerate(net.layers)
    ]

    if kind in ("neyshabur", "xiao"):
        phi = phi_standard(net)
        radius = inputs.input_bound if kind == "neyshabur" else inputs.input_bound + inputs.epsilon
        phi_term = radius**2 * n**2 * width * np.log(n * width) * phi
        logdet_term = 0.0
    else:
        if stats is None:
            raise IncompleteStats("correlation bound kinds need layer statistics")
        table = _lam_by_layer(net, stats)
        phi = phi_correlated(net, stats)
        radius = inputs.input_bound + inputs.epsilon
        phi_term = radius**2 * inputs.constant**2 * phi
        logdet_term = 0.0
        for layer_idx in sorted(table):
            entry = table[layer_idx]
            if kind == "corr":
                if not np.isfinite(entry["logdet"]):
                    raise IncompleteStats(
                        f"layer {layer_idx} lacks a finite log-determinant (rank-deficient stats)"
                    )
                logdet_term -= entry["logdet"]
            else:
                lo = min(entry["lam_min"], 1.0)
                hi = max(entry["lam_max"], 1.0)
                if lo <= 0.0:
                    raise IncompleteStats(
                        f"layer {layer_idx} has a vanishing determinant lower bound"
                    )
                # log space: the bound itself underflows at realistic dims
                logdet_term -= logdet_lower_bound(lo, hi, entry["dim"])
        for layer_idx in sorted(table):
            entry = table[layer_idx]
            per_layer[layer_idx - 1].update(
                lamc=entry["lamc"], lamr=entry["lamr"], det_lb=entry["det_lb"]
            )

    phi_term = float(phi_term)
    numerator = phi_term + logdet_term + log_term
    complexity = float(np.sqrt(numerator / (inputs.gamma**2 * inputs.m)))
    return BoundReport(
        kind=kind,
        phi=float(phi),
        phi_term=phi_term,
        logdet_term=float(logdet_term),
        log_term=log_term,
        kl_proxy=phi_term + float(logdet_term),
        numerator=float(numerator),
        complexity_term=complexity,
        n_layers=n,
        width=width,
        inputs=inputs,
        per_layer=per_layer,
    )
