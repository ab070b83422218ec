import numpy as np

from advlab.network import forward


def fd_weight_gradients(loss_fn, net, step=1e-5):
    """Central finite differences of a scalar loss over every weight entry.

    `loss_fn` maps a Network to a float; the oracle never touches the
    analytic backward path.
    """
    grads = []
    for li in range(len(net.layers)):
        g = np.zeros_like(net.layers[li].weight)
        for idx in np.ndindex(g.shape):
            plus = [w.copy() for w in net.weights]
            minus = [w.copy() for w in net.weights]
            plus[li][idx] += step
            minus[li][idx] -= step
            g[idx] = (loss_fn(net.with_weights(plus)) - loss_fn(net.with_weights(minus))) / (
                2.0 * step
            )
        grads.append(g)
    return grads


def fd_input_gradient(loss_fn, batch, step=1e-5):
    """Central finite differences of a scalar loss over every input entry."""
    g = np.zeros_like(batch)
    for idx in np.ndindex(batch.shape):
        plus, minus = batch.copy(), batch.copy()
        plus[idx] += step
        minus[idx] -= step
        g[idx] = (loss_fn(plus) - loss_fn(minus)) / (2.0 * step)
    return g


def max_rel_error(analytic, oracle):
    """Worst per-coordinate relative disagreement between two gradient stacks."""
    worst = 0.0
    for a, f in zip(analytic, oracle):
        denom = np.maximum(np.abs(a) + np.abs(f), 1e-6)
        worst = max(worst, float((np.abs(a - f) / denom).max()))
    return worst


def away_from_relu_kinks(net, batch, margin=1e-3):
    """True when no pre-activation sits within `margin` of a ReLU kink.

    Finite differences are meaningless across a kink, so gradient-check
    fixtures are seeded to keep clear of them; this guards the fixture.
    """
    tape = forward(net, batch)
    for z, layer in zip(tape.pre_activations, net.layers):
        if layer.activation == "relu" and np.abs(z).min() < margin:
            return False
    return True
