"""Training and evaluation harness.

Five training methods: plain cross-entropy ("standard"), adversarial
training on attacked minibatches ("at"), the clean+KL trade-off objective
("trades"), and each of the last two augmented with the weight-
decorrelation penalty ("at_decorr", "trades_decorr").

All randomness flows from one master seed through named sub-streams
(init / shuffle / attack / eval), so a rerun with the same config is
bit-identical, including every emitted CSV/JSON byte. Wall-clock numbers
are written to a separate timing file that is explicitly outside the
determinism contract.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackSpec, pgd
from .data import Dataset, batches, load_idx, split_blobs
from .decorr import DecorrConfig, activation_penalty, decorr_gradient
from .linalg import DegenerateDiagonal, NotPositiveDefinite
from .network import (
    Network,
    accuracy,
    backward,
    cross_entropy,
    cross_entropy_grad,
    forward,
    kl_softmax,
    kl_softmax_grad_p,
    kl_softmax_grad_q,
    save_checkpoint,
)
from .weight_stats import epoch_seed_from

TRAIN_METHODS = ("standard", "at", "trades", "at_decorr", "trades_decorr")

# named sub-streams of the master seed
_INIT, _SHUFFLE, _ATTACK, _EVAL = 0, 1, 2, 3

METRICS_HEADER = ("epoch", "train_loss", "clean_train", "clean_test", "pgd_train", "pgd_test", "penalty")


class ConfigError(ValueError):
    """A run configuration is inconsistent or malformed."""


class DivergedTraining(RuntimeError):
    """Training hit a non-finite loss; the last good checkpoint was kept."""


def _attack_from_dict(doc: dict, what: str) -> AttackSpec:
    try:
        return AttackSpec(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}") from exc


def _penalty_from_dict(doc: dict) -> DecorrConfig:
    try:
        return DecorrConfig(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"penalty: {exc}") from exc


def dataset_from_spec(spec: dict, split: str) -> Dataset:
    """Build the train or test split from a dataset spec.

    kind "synthetic": seeded Gaussian blobs, separate per_class/seed for
    the test split. kind "idx": IDX image/label file pairs.
    """
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("dataset spec needs a 'kind'")
    kind = spec["kind"]
    if kind == "synthetic":
        try:
            train_ds, test_ds = split_blobs(
                spec["num_classes"], spec["per_class"],
                spec.get("test_per_class", spec["per_class"]),
                spec["dim"], spec["spread"], spec["seed"],
            )
            return train_ds if split == "train" else test_ds
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"synthetic dataset spec: {exc}") from exc
    if kind == "idx":
        try:
            if split == "train":
                return load_idx(spec["train_images"], spec["train_labels"])
            return load_idx(spec["test_images"], spec["test_labels"])
        except KeyError as exc:
            raise ConfigError(f"idx dataset spec lacks {exc}") from exc
    raise ConfigError(f"unknown dataset kind {kind!r}")


@dataclass(frozen=True)
class RunConfig:
    dataset: dict
    hidden: tuple[int, ...] = (256, 256)
    method: str = "at"
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    attack_train: AttackSpec | None = None
    attack_eval: AttackSpec | None = None
    penalty: DecorrConfig = field(default_factory=DecorrConfig)
    trades_lambda: float = 1.0 / 6.0
    eval_subset: int = 1024

    def __post_init__(self):
        if self.method not in TRAIN_METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0, batch_size >= 1, lr > 0")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("momentum in [0,1), weight_decay >= 0")
        if self.method != "standard" and self.attack_train is None:
            raise ConfigError(f"method {self.method!r} needs attack_train")
        if self.method.startswith("trades") and self.trades_lambda <= 0:
            raise ConfigError("trades methods need trades_lambda > 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        """Parse and validate an external (CLI) configuration.

        External configs additionally require a positive penalty weight
        for the decorr methods; the in-process constructor allows
        alpha = 0, where the decorr methods reduce to their base method
        bit for bit.
        """
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        kw = dict(doc)
        try:
            if "hidden" in kw:
                kw["hidden"] = tuple(int(h) for h in kw["hidden"])
            if kw.get("attack_train") is not None:
                kw["attack_train"] = _attack_from_dict(kw["attack_train"], "attack_train")
            if kw.get("attack_eval") is not None:
                kw["attack_eval"] = _attack_from_dict(kw["attack_eval"], "attack_eval")
            if "penalty" in kw:
                kw["penalty"] = _penalty_from_dict(kw["penalty"])
            config = cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if config.method.endswith("_decorr") and config.penalty.alpha <= 0:
            raise ConfigError("decorr methods need penalty.alpha > 0")
        return config

    def to_dict(self) -> dict:
        doc = {
            "dataset": self.dataset,
            "hidden": list(self.hidden),
            "method": self.method,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "attack_train": None if self.attack_train is None else vars(self.attack_train).copy(),
            "attack_eval": None if self.attack_eval is None else vars(self.attack_eval).copy(),
            "penalty": vars(self.penalty).copy(),
            "trades_lambda": self.trades_lambda,
            "eval_subset": self.eval_subset,
        }
        return doc


@dataclass
class RunRecord:
    config: dict
    metrics: list[dict]
    checkpoint_path: str
    wall_train_s: list[float]
    wall_eval_s: list[float]
    diverged: bool = False

    @property
    def final(self) -> dict:
        return self.metrics[-1] if self.metrics else {}


def _lr_at(config: RunConfig, epoch: int) -> float:
    """Piecewise-constant schedule: /10 at 50% and again at 75% of epochs."""
    lr = config.lr
    if epoch >= config.epochs // 2:
        lr /= 10.0
    if epoch >= (3 * config.epochs) // 4:
        lr /= 10.0
    return lr


def _step_gradients(net, xb, yb, config: RunConfig, attack_seed: int):
    """Loss value and weight gradients for one minibatch under the method."""
    method = config.method
    if method == "standard":
        tape = forward(net, xb)
        loss = cross_entropy(tape.logits, yb)
        return loss, backward(net, tape, cross_entropy_grad(tape.logits, yb))

    spec = config.attack_train.replace(seed=attack_seed)
    if method.startswith("at"):
        x_adv = pgd(net, xb, yb, spec)
        tape_adv = forward(net, x_adv)
        loss = cross_entropy(tape_adv.logits, yb)
        grads = backward(net, tape_adv, cross_entropy_grad(tape_adv.logits, yb))
        if method == "at_decorr" and config.penalty.alpha > 0:
            tape_clean = forward(net, xb)
            extra = decorr_gradient(net, tape_clean, tape_adv, config.penalty)
            grads = [g + e for g, e in zip(grads, extra)]
        return loss, grads

    # trades family: clean CE plus KL to the attacked input, both sides live
    tape_clean = forward(net, xb)
    kl_spec = spec.replace(loss="kl", random_start=True)  # KL gradient vanishes at x
    x_adv = pgd(net, xb, None, kl_spec, ref_logits=tape_clean.logits)
    loss, grads = trades_gradients(net, xb, yb, x_adv, config.trades_lambda)
    if method == "trades_decorr" and config.penalty.alpha > 0:
        tape_adv = forward(net, x_adv)
        extra = decorr_gradient(net, tape_clean, tape_adv, config.penalty)
        grads = [g + e for g, e in zip(grads, extra)]
    return loss, grads


def trades_gradients(net, xb, yb, x_adv, trades_lambda: float):
    """Value and exact weight gradients of the clean+KL objective.

    The adversarial inputs are fixed; the gradient flows through both the
    clean and the adversarial forward passes.
    """
    tape_clean = forward(net, xb)
    tape_adv = forward(net, x_adv)
    ref_logits = tape_clean.logits
    inv_lambda = 1.0 / trades_lambda
    loss = cross_entropy(ref_logits, yb) + inv_lambda * kl_softmax(ref_logits, tape_adv.logits)
    d_clean = cross_entropy_grad(ref_logits, yb) + inv_lambda * kl_softmax_grad_p(
        ref_logits, tape_adv.logits
    )
    d_adv = inv_lambda * kl_softmax_grad_q(ref_logits, tape_adv.logits)
    grads = [
        g1 + g2
        for g1, g2 in zip(backward(net, tape_clean, d_clean), backward(net, tape_adv, d_adv))
    ]
    return loss, grads


def _eval_indices(n: int, cap: int, seed: int) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    return np.random.default_rng(seed).choice(n, size=cap, replace=False)


def _epoch_metrics(net, train, test, idx_train, idx_test, config: RunConfig, master: int):
    rows = {}
    eval_seed = epoch_seed_from(master, _EVAL, 1)
    for tag, ds, idx in (("train", train, idx_train), ("test", test, idx_test)):
        x, y = ds.inputs[idx], ds.labels[idx]
        logits = forward(net, x).logits
        rows[f"clean_{tag}"] = accuracy(logits, y)
        if config.attack_eval is not None:
            adv = pgd(net, x, y, config.attack_eval.replace(seed=eval_seed))
            rows[f"pgd_{tag}"] = accuracy(forward(net, adv).logits, y)
        else:
            rows[f"pgd_{tag}"] = rows[f"clean_{tag}"]
    # clean-side penalty of the last layer, comparable across methods
    tape = forward(net, train.inputs[idx_train])
    try:
        rows["penalty"] = activation_penalty(tape.activations[-2], config.penalty)
    except (NotPositiveDefinite, DegenerateDiagonal):
        rows["penalty"] = float("nan")  # degenerate activations: metric undefined
    return rows


def train(config: RunConfig, out_dir) -> RunRecord:
    """Run one training job and write its artifacts into out_dir.

    Writes metrics.csv, checkpoint.json, run.json (all deterministic given
    the config) and timing.csv (wall-clock, not deterministic). On a
    non-finite loss the last epoch-end checkpoint is kept and
    DivergedTraining is raised after artifacts are flushed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    master = config.seed
    train_ds = dataset_from_spec(config.dataset, "train")
    test_ds = dataset_from_spec(config.dataset, "test")
    dims = [train_ds.dim, *config.hidden, train_ds.num_classes]
    net = Network.he_init(dims, seed=epoch_seed_from(master, _INIT))
    velocity = [np.zeros_like(w) for w in net.weights]

    idx_train = _eval_indices(len(train_ds), config.eval_subset, epoch_seed_from(master, _EVAL, 0))
    idx_test = _eval_indices(len(test_ds), config.eval_subset, epoch_seed_from(master, _EVAL, 0))

    metrics: list[dict] = []
    wall_train: list[float] = []
    wall_eval: list[float] = []
    checkpoint_path = out / "checkpoint.json"
    diverged = False

    def flush(record_net):
        save_checkpoint(record_net, checkpoint_path)
        _write_metrics_csv(out / "metrics.csv", metrics)
        _write_run_json(out / "run.json", config, metrics)
        _write_timing_csv(out / "timing.csv", wall_train, wall_eval)

    if config.epochs == 0:
        t0 = time.perf_counter()
        row = {"epoch": 0, "train_loss": float("nan")}
        row.update(_epoch_metrics(net, train_ds, test_ds, idx_train, idx_test, config, master))
        metrics.append(row)
        wall_train.append(0.0)
        wall_eval.append(time.perf_counter() - t0)
        flush(net)
        return RunRecord(config.to_dict(), metrics, str(checkpoint_path), wall_train, wall_eval)

    good_net = net
    for epoch in range(config.epochs):
        lr = _lr_at(config, epoch)
        losses = []
        t0 = time.perf_counter()
        for step, (xb, yb) in enumerate(
            batches(train_ds, config.batch_size, epoch_seed_from(master, _SHUFFLE, epoch))
        ):
            try:
                loss, grads = _step_gradients(
                    net, xb, yb, config, epoch_seed_from(master, _ATTACK, epoch, step)
                )
            except FloatingPointError:
                diverged = True
                break
            if not np.isfinite(loss):
                diverged = True
                break
            losses.append(loss)
            new_weights = []
            for w, g, v in zip(net.weights, grads, velocity):
                v[...] = config.momentum * v + g + config.weight_decay * w
                new_weights.append(w - lr * v)
            net = net.with_weights(new_weights)
        wall_train.append(time.perf_counter() - t0)
        if diverged:
            break

        t1 = time.perf_counter()
        try:
            row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
            row.update(_epoch_metrics(net, train_ds, test_ds, idx_train, idx_test, config, master))
        except FloatingPointError:
            diverged = True  # weights blew up on the very last step of the epoch
            wall_eval.append(time.perf_counter() - t1)
            break
        metrics.append(row)
        wall_eval.append(time.perf_counter() - t1)
        good_net = net

    flush(good_net)
    if diverged:
        raise DivergedTraining(
            f"non-finite loss; last good checkpoint kept at {checkpoint_path}"
        )
    return RunRecord(config.to_dict(), metrics, str(checkpoint_path), wall_train, wall_eval)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _write_metrics_csv(path, metrics):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        for row in metrics:
            w.writerow([_fmt(row[k]) for k in METRICS_HEADER])


def _write_run_json(path, config: RunConfig, metrics):
    doc = {
        "config": config.to_dict(),
        "epochs_completed": len(metrics),
        "final_metrics": metrics[-1] if metrics else None,
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(doc, indent=1) + "\n")


def _write_timing_csv(path, wall_train, wall_eval):
    # wall-clock is environment noise: kept out of the deterministic set
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(("epoch", "wall_train_s", "wall_eval_s"))
        for i, (a, b) in enumerate(zip(wall_train, wall_eval)):
            w.writerow((i + 1, f"{a:.6f}", f"{b:.6f}"))


def evaluate(net: Network, ds: Dataset, attacks: list[AttackSpec], seed: int = 0) -> list[dict]:
    """Clean accuracy plus robust accuracy under each attack spec."""
    rows = [{
        "attack": "clean", "norm": "", "epsilon": 0.0, "steps": 0, "step_size": 0.0,
        "loss": "", "accuracy": accuracy(forward(net, ds.inputs).logits, ds.labels),
    }]
    for spec in attacks:
        eval_spec = spec.replace(seed=epoch_seed_from(seed, _EVAL))
        adv = pgd(net, ds.inputs, ds.labels, eval_spec)
        rows.append({
            "attack": "pgd" if spec.loss == "cross_entropy" else spec.loss,
            "norm": spec.norm, "epsilon": spec.epsilon, "steps": spec.steps,
            "step_size": spec.step_size, "loss": spec.loss,
            "accuracy": accuracy(forward(net, adv).logits, ds.labels),
        })
    return rows


EVALUATE_HEADER = ("attack", "norm", "epsilon", "steps", "step_size", "loss", "accuracy")


def write_evaluation_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(EVALUATE_HEADER)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in EVALUATE_HEADER])
