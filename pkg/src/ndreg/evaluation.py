"""Accuracy, super-class accuracy and FGSM robustness of a trained classifier."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .tensor_nn import cross_entropy_loss

EVAL_BATCH = 500


@dataclass
class EvalReport:
    exact_acc: float
    super_acc: float
    confusion: np.ndarray  # [K, K] counts, rows = true class
    robustness: dict = field(default_factory=dict)  # epsilon -> accuracy

    def to_json(self):
        return json.dumps({
            "exact_acc": self.exact_acc,
            "super_acc": self.super_acc,
            "confusion": self.confusion.tolist(),
            "robustness": {str(k): v for k, v in self.robustness.items()},
        })


class _eval_mode:
    def __init__(self, net):
        self.net = net

    def __enter__(self):
        self.prev = self.net.mode
        self.net.eval()
        return self.net

    def __exit__(self, *exc):
        self.net.mode = self.prev


def predict(net, images, batch=EVAL_BATCH):
    """Arg-max class per image with the network in eval mode."""
    out = []
    with _eval_mode(net):
        for start in range(0, len(images), batch):
            out.append(net.forward(images[start:start + batch]).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def score(pred, fine, coarse, fine_to_coarse, num_classes):
    pred, fine = np.asarray(pred), np.asarray(fine)
    exact = float(np.mean(pred == fine))
    sup = float(np.mean(np.asarray(fine_to_coarse)[pred] == np.asarray(coarse)))
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (fine, pred), 1)
    return EvalReport(exact, sup, confusion)


def evaluate(net, test, fine_to_coarse=None, batch=EVAL_BATCH) -> EvalReport:
    """Exact-class and super-class accuracy of ``net`` on a :class:`LabeledSet`."""
    table = test.fine_to_coarse if fine_to_coarse is None else fine_to_coarse
    pred = predict(net, test.images, batch)
    return score(pred, test.fine_labels, test.coarse_labels, table, net.output_shape[0])


def input_gradient(net, images, labels):
    """d(mean CE)/d(images) in eval mode."""
    with _eval_mode(net):
        logits = net.forward(images)
        _, g = cross_entropy_loss(logits, labels)
        _, gin = net.backward(g)
    return gin


def fgsm_attack(net, images, labels, epsilon, batch=EVAL_BATCH):
    """x' = clip(x + eps * sign(dCE/dx), 0, 1), with sign(0) = 0."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    images = np.asarray(images, dtype=np.float64)
    if epsilon == 0:
        return images.copy()
    out = np.empty_like(images)
    for start in range(0, len(images), batch):
        sl = slice(start, start + batch)
        g = input_gradient(net, images[sl], labels[sl])
        out[sl] = np.clip(_bounded_step(images[sl], epsilon * np.sign(g), epsilon), 0.0, 1.0)
    return out


def _bounded_step(x, step, epsilon):
    """x + step, nudged by ulps where rounding would make |result - x| exceed epsilon."""
    y = x + step
    over = np.abs(y - x) > epsilon
    while np.any(over):
        y[over] = np.nextafter(y[over], x[over])
        over = np.abs(y - x) > epsilon
    return y


def robustness_sweep(net, test, strengths, batch=EVAL_BATCH):
    """Exact-class accuracy under FGSM for each strength, as ``[(eps, acc), ...]``."""
    strengths = [float(e) for e in strengths]
    if strengths != sorted(strengths) or (strengths and strengths[0] < 0):
        raise ValueError("strengths must be non-negative and sorted ascending")
    curve = []
    for eps in strengths:
        attacked = fgsm_attack(net, test.images, test.fine_labels, eps, batch)
        curve.append((eps, float(np.mean(predict(net, attacked, batch) == test.fine_labels))))
    return curve


def write_curves_csv(path, curves_by_seed):
    """Write ``epsilon,accuracy,stderr`` rows from ``{seed: [(eps, acc), ...]}``."""
    curves = list(curves_by_seed.values())
    eps = [e for e, _ in curves[0]]
    accs = np.array([[a for _, a in c] for c in curves])
    stderr = accs.std(axis=0, ddof=1) / np.sqrt(len(curves)) if len(curves) > 1 else np.zeros(len(eps))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "accuracy", "stderr"])
        for e, a, s in zip(eps, accs.mean(axis=0), stderr):
            w.writerow([e, a, s])
