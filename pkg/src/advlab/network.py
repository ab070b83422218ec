"""Feed-forward ReLU networks with exact reverse-mode gradients.

Layers are affine maps with the bias folded into the weight matrix as an
extra column acting on a constant-1 input coordinate, so a layer mapping
h_in units to h_out units stores an (h_out, h_in + 1) weight. The final
layer is always the identity (logit output). Forward passes record every
intermediate on a tape; backward passes consume the tape and never mutate
the network, so evaluation is safe to share across threads.

All arithmetic is float64. The ReLU subgradient at exactly 0 is 0, which
keeps gradients of dead units exactly zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .linalg import InvalidShape, as_matrix

ACTIVATIONS = ("relu", "identity")

CHECKPOINT_SCHEMA_VERSION = 1


class InvalidLabel(ValueError):
    """A class label falls outside [0, num_classes)."""


class StaleTape(ValueError):
    """A tape is replayed against a network it was not recorded on."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or inconsistent."""


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (h_out, h_in + 1), bias folded into the last column
    activation: str = "relu"

    def __post_init__(self):
        as_matrix(self.weight, "layer weight")
        if self.activation not in ACTIVATIONS:
            raise InvalidShape(f"unknown activation {self.activation!r}")

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1] - 1


class Network:
    """An ordered stack of affine(+ReLU) layers ending in identity logits."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise InvalidShape("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.in_dim != prev.out_dim:
                raise InvalidShape(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        if layers[-1].activation != "identity":
            raise InvalidShape("final layer must use the identity activation")
        self.layers = list(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def weights(self) -> list[np.ndarray]:
        return [layer.weight for layer in self.layers]

    def with_weights(self, weights: list[np.ndarray]) -> "Network":
        if len(weights) != len(self.layers):
            raise InvalidShape("weight count does not match layer count")
        return Network(
            [Layer(w, layer.activation) for w, layer in zip(weights, self.layers)]
        )

    @classmethod
    def he_init(cls, dims: list[int], seed: int) -> "Network":
        """Build a ReLU net for unit counts `dims` (input, hidden..., output).

        Weights are drawn N(0, 2/h_in) from a seeded generator; bias
        columns start at zero.
        """
        if len(dims) < 2:
            raise InvalidShape("need at least input and output dims")
        rng = np.random.default_rng(seed)
        layers = []
        for i, (h_in, h_out) in enumerate(zip(dims, dims[1:])):
            w = np.zeros((h_out, h_in + 1))
            w[:, :-1] = rng.standard_normal((h_out, h_in)) * np.sqrt(2.0 / h_in)
            act = "identity" if i == len(dims) - 2 else "relu"
            layers.append(Layer(w, act))
        return cls(layers)


@dataclass
class ForwardTape:
    """Per-layer intermediates for one minibatch.

    activations[0] is the raw input batch; activations[l] is the
    post-activation output of layer l; pre_activations[l-1] is layer l's
    affine output before the nonlinearity. Logits are the last
    pre-activation (the final layer is identity).
    """

    net: Network
    activations: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)

    @property
    def logits(self) -> np.ndarray:
        return self.activations[-1]

    @property
    def batch_size(self) -> int:
        return self.activations[0].shape[0]


def _augment(a: np.ndarray) -> np.ndarray:
    return np.hstack([a, np.ones((a.shape[0], 1))])


def forward(net: Network, batch) -> ForwardTape:
    """Run the network on a batch (rows = samples), recording a tape."""
    x = as_matrix(batch, "batch")
    if x.shape[1] != net.input_dim:
        raise InvalidShape(
            f"batch has {x.shape[1]} features, network expects {net.input_dim}"
        )
    tape = ForwardTape(net=net, activations=[x])
    a = x
    for layer in net.layers:
        z = _augment(a) @ layer.weight.T
        tape.pre_activations.append(z)
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        tape.activations.append(a)
    if not np.all(np.isfinite(tape.logits)):
        raise FloatingPointError("non-finite logits")
    return tape


def _check_tape(net: Network, tape: ForwardTape):
    if tape.net is not net:
        raise StaleTape("tape was recorded on a different network")


def backward(net: Network, tape: ForwardTape, dlogits: np.ndarray) -> list[np.ndarray]:
    """Exact gradients of a scalar loss w.r.t. every layer weight.

    `dlogits` is the loss gradient w.r.t. the logits for the batch on the
    tape (already including any 1/batch factor).
    """
    _check_tape(net, tape)
    grads, _ = _backprop(net, tape, dlogits, len(net.layers))
    return grads


def backward_to_input(net: Network, tape: ForwardTape, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. the input batch."""
    _check_tape(net, tape)
    _, dx = _backprop(net, tape, dlogits, len(net.layers))
    return dx


def backward_from_activation(
    net: Network, tape: ForwardTape, act_index: int, dact: np.ndarray
) -> list[np.ndarray]:
    """Gradients of a scalar that depends on activations[act_index].

    Layers above act_index do not influence that activation; their
    gradient blocks are exactly zero.
    """
    _check_tape(net, tape)
    if not 1 <= act_index <= len(net.layers):
        raise InvalidShape(f"activation index {act_index} out of range")
    grads, _ = _backprop(net, tape, dact, act_index, seed_is_post=True)
    for layer in net.layers[act_index:]:
        grads.append(np.zeros_like(layer.weight))
    return grads


def _backprop(net, tape, seed_grad, top_layer, seed_is_post=False):
    """Shared reverse pass from layer `top_layer` down to the input.

    The seed gradient is w.r.t. layer `top_layer`'s pre-activation, or its
    post-activation when seed_is_post (in which case it is first pulled
    through that layer's nonlinearity).
    """
    da = np.asarray(seed_grad, dtype=np.float64)
    grads: list[np.ndarray] = []
    start = top_layer - 1
    if seed_is_post and net.layers[start].activation == "relu":
        dz = da * (tape.pre_activations[start] > 0.0)
    else:
        dz = da
    for idx in range(start, -1, -1):
        layer = net.layers[idx]
        a_in = _augment(tape.activations[idx])
        grads.append(dz.T @ a_in)
        da_in = dz @ layer.weight
        da = da_in[:, :-1]
        if idx > 0:
            if net.layers[idx - 1].activation == "relu":
                dz = da * (tape.pre_activations[idx - 1] > 0.0)
            else:
                dz = da
    grads.reverse()
    return grads, da


# ---------------------------------------------------------------------------
# losses


def _check_labels(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1:
        raise InvalidLabel("labels must be a flat integer list")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise InvalidLabel(f"labels must lie in [0, {num_classes})")
    return y


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits, labels) -> float:
    """Mean softmax cross-entropy."""
    z = as_matrix(logits, "logits")
    y = _check_labels(labels, z.shape[1])
    logp = log_softmax(z)
    return float(-logp[np.arange(len(y)), y].mean())


def cross_entropy_grad(logits, labels) -> np.ndarray:
    """Gradient of mean cross-entropy w.r.t. the logits: (softmax - onehot)/B."""
    z = as_matrix(logits, "logits")
    y = _check_labels(labels, z.shape[1])
    g = softmax(z)
    g[np.arange(len(y)), y] -= 1.0
    return g / len(y)


def margin_loss(logits, labels, gamma: float = 0.0) -> float:
    """Fraction of rows whose true-class logit beats the rest by at most gamma.

    gamma = 0 gives the plain classification error.
    """
    z = as_matrix(logits, "logits")
    y = _check_labels(labels, z.shape[1])
    rows = np.arange(len(y))
    true = z[rows, y]
    masked = z.copy()
    masked[rows, y] = -np.inf
    runner_up = masked.max(axis=1)
    return float(np.mean(true <= gamma + runner_up))


def accuracy(logits, labels) -> float:
    return 1.0 - margin_loss(logits, labels, 0.0)


def kl_softmax(logits_p, logits_q) -> float:
    """Mean rowwise KL divergence between softmax(logits_p) and softmax(logits_q)."""
    zp = as_matrix(logits_p, "logits_p")
    zq = as_matrix(logits_q, "logits_q")
    if zp.shape != zq.shape:
        raise InvalidShape("logit shapes differ")
    logp, logq = log_softmax(zp), log_softmax(zq)
    return float((np.exp(logp) * (logp - logq)).sum(axis=1).mean())


def kl_softmax_grad_q(logits_p, logits_q) -> np.ndarray:
    """Gradient of the mean KL w.r.t. logits_q: (softmax(q) - softmax(p))/B."""
    zp = as_matrix(logits_p, "logits_p")
    zq = as_matrix(logits_q, "logits_q")
    return (softmax(zq) - softmax(zp)) / zp.shape[0]


def kl_softmax_grad_p(logits_p, logits_q) -> np.ndarray:
    """Gradient of the mean KL w.r.t. logits_p."""
    zp = as_matrix(logits_p, "logits_p")
    zq = as_matrix(logits_q, "logits_q")
    logp, logq = log_softmax(zp), log_softmax(zq)
    p = np.exp(logp)
    diff = logp - logq
    row_kl = (p * diff).sum(axis=1, keepdims=True)
    return p * (diff - row_kl) / zp.shape[0]


def cw_margin(logits, labels) -> float:
    """Mean logit margin max_{j != y} z_j - z_y (positive = misclassified)."""
    z = as_matrix(logits, "logits")
    y = _check_labels(labels, z.shape[1])
    rows = np.arange(len(y))
    masked = z.copy()
    masked[rows, y] = -np.inf
    return float((masked.max(axis=1) - z[rows, y]).mean())


def cw_margin_grad(logits, labels) -> np.ndarray:
    """Gradient of the mean logit margin w.r.t. the logits."""
    z = as_matrix(logits, "logits")
    y = _check_labels(labels, z.shape[1])
    rows = np.arange(len(y))
    masked = z.copy()
    masked[rows, y] = -np.inf
    best_other = masked.argmax(axis=1)
    g = np.zeros_like(z)
    g[rows, best_other] += 1.0
    g[rows, y] -= 1.0
    return g / len(y)


LOSS_KINDS = ("cross_entropy", "cw_margin", "kl")


def loss_value(kind: str, logits, labels=None, ref_logits=None) -> float:
    if kind == "cross_entropy":
        return cross_entropy(logits, labels)
    if kind == "cw_margin":
        return cw_margin(logits, labels)
    if kind == "kl":
        return kl_softmax(ref_logits, logits)
    raise InvalidShape(f"unknown loss kind {kind!r}")


def loss_logit_grad(kind: str, logits, labels=None, ref_logits=None) -> np.ndarray:
    if kind == "cross_entropy":
        return cross_entropy_grad(logits, labels)
    if kind == "cw_margin":
        return cw_margin_grad(logits, labels)
    if kind == "kl":
        return kl_softmax_grad_q(ref_logits, logits)
    raise InvalidShape(f"unknown loss kind {kind!r}")


def input_gradient(net: Network, batch, kind: str, labels=None, ref_logits=None) -> np.ndarray:
    """Gradient of the chosen loss w.r.t. the input batch entries."""
    tape = forward(net, batch)
    dlogits = loss_logit_grad(kind, tape.logits, labels, ref_logits)
    return backward_to_input(net, tape, dlogits)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_text(net: Network) -> str:
    """Serialize a network as a JSON document with a fixed key order."""
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "layer_dims": [[layer.out_dim, layer.in_dim + 1] for layer in net.layers],
        "activations": [layer.activation for layer in net.layers],
        "weights": [layer.weight.reshape(-1).tolist() for layer in net.layers],
    }
    return json.dumps(doc, indent=1) + "\n"


def save_checkpoint(net: Network, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(checkpoint_text(net))


def load_checkpoint(path) -> Network:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if doc["schema_version"] != CHECKPOINT_SCHEMA_VERSION:
            raise CheckpointError(f"unsupported schema {doc['schema_version']}")
        layers = []
        for dims, act, flat in zip(doc["layer_dims"], doc["activations"], doc["weights"]):
            rows, cols = dims
            w = np.asarray(flat, dtype=np.float64).reshape(rows, cols)
            layers.append(Layer(w, act))
        return Network(layers)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
