"""Openmax open-set head: Weibull tail models on AV-to-MAV distances.

The unknown pseudo-class is the last entry (index K) of every probability
vector; ``UNKNOWN`` is the label returned when it wins.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Network, softmax_probs
from .targets import MavSet, correct_activations, mean_of_correct

UNKNOWN = -1
OPENMAX_FORMAT = "lotsbench-openmax"
OPENMAX_VERSION = 1
SHIFT_FACTOR = 1.0 - 1e-6


class WeibullFitError(ValueError):
    pass


@dataclass(frozen=True)
class WeibullModel:
    shape: float
    scale: float
    shift: float = 0.0
    tail_size: int = 0

    def cdf(self, d):
        d = np.asarray(d, dtype=np.float64)
        z = np.maximum(d - self.shift, 0.0) / self.scale
        return -np.expm1(-(z ** self.shape))


def _profile_score(k, log_x, x_scaled_pow):
    """Profile-likelihood equation for the shape and its derivative.

    g(k) = sum(x^k ln x) / sum(x^k) - 1/k - mean(ln x)
    """
    w = x_scaled_pow
    s0 = w.sum()
    s1 = (w * log_x).sum()
    s2 = (w * log_x * log_x).sum()
    g = s1 / s0 - 1.0 / k - log_x.mean()
    dg = s2 / s0 - (s1 / s0) ** 2 + 1.0 / (k * k)
    return g, dg


def weibull_mle(x, tol=1e-10, max_iter=200):
    """Two-parameter Weibull MLE for positive samples; returns ``(shape, scale)``.

    Newton iteration on the shape's profile equation, falling back to
    bisection on a bracket whenever a Newton step leaves it.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise WeibullFitError("Weibull MLE needs finite positive samples")
    # rescale so x**k stays representable for large k
    ref = x.max()
    log_x = np.log(x / ref)
    if np.ptp(log_x) < 1e-12:
        raise WeibullFitError("degenerate tail: all samples are equal")

    def score(k):
        return _profile_score(k, log_x, np.exp(k * log_x))

    # g is increasing in k, -inf at 0+ and positive for large k
    lo, hi = 1e-3, 1.0
    while score(hi)[0] < 0:
        lo, hi = hi, hi * 2
        if hi > 1e8:
            raise WeibullFitError("shape estimate diverged")
    k = 0.5 * (lo + hi) if hi > 1.0 else 1.0
    for _ in range(max_iter):
        g, dg = score(k)
        if g > 0:
            hi = k
        else:
            lo = k
        step = g / dg
        k_new = k - step
        if not (lo < k_new < hi):
            k_new = 0.5 * (lo + hi)
        if abs(k_new - k) < tol * max(1.0, k):
            k = k_new
            break
        k = k_new
    scale = ref * np.mean(np.exp(k * log_x)) ** (1.0 / k)
    return float(k), float(scale)


def fit_weibull(distances, tail_size, translate=True) -> WeibullModel:
    """Fit a Weibull to the ``tail_size`` largest distances.

    With ``translate`` the tail is shifted to start just above zero
    (shift = (1 - 1e-6) * smallest tail value); otherwise the shift is 0.
    """
    d = np.asarray(distances, dtype=np.float64).ravel()
    tail_size = int(tail_size)
    if tail_size < 2:
        raise WeibullFitError("tail_size must be at least 2")
    if len(d) < tail_size:
        raise WeibullFitError(f"need at least {tail_size} distances, got {len(d)}")
    if np.any(d < 0):
        raise WeibullFitError("distances must be nonnegative")
    tail = np.sort(d)[-tail_size:]
    if tail[0] == tail[-1]:
        raise WeibullFitError("degenerate tail: all tail distances are equal")
    shift = SHIFT_FACTOR * tail[0] if translate else 0.0
    shape, scale = weibull_mle(tail - shift)
    return WeibullModel(shape, scale, float(shift), tail_size)


@dataclass
class OpenSetPrediction:
    probabilities: np.ndarray  # length K + 1, unknown last
    predicted: int  # class index or UNKNOWN
    certainty: float


@dataclass
class OpenmaxModel:
    mavs: MavSet
    weibulls: dict  # class -> WeibullModel
    alpha: int
    tail_size: int

    def __post_init__(self):
        k = self.mavs.num_classes
        if not 1 <= self.alpha <= k:
            raise ValueError(f"alpha must lie in [1, {k}], got {self.alpha}")
        missing = set(self.mavs.classes()) - set(self.weibulls)
        if missing:
            raise ValueError(f"classes {sorted(missing)} have a MAV but no Weibull model")

    @property
    def num_classes(self):
        return self.mavs.num_classes

    def to_dict(self):
        return {
            "format": OPENMAX_FORMAT,
            "version": OPENMAX_VERSION,
            "alpha": self.alpha,
            "tail_size": self.tail_size,
            "num_classes": self.num_classes,
            "classes": [
                {"class": c, "support": self.mavs.support[c], "mav": [float(v) for v in self.mavs.means[c]],
                 "shape": w.shape, "scale": w.scale, "shift": w.shift, "tail_size": w.tail_size}
                for c, w in sorted(self.weibulls.items())
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "OpenmaxModel":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != OPENMAX_FORMAT:
            raise ValueError(f"{path}: not an Openmax model file")
        if doc.get("version") != OPENMAX_VERSION:
            raise ValueError(f"{path}: unsupported Openmax model version {doc.get('version')}")
        entries = doc["classes"]
        mavs = MavSet({int(e["class"]): np.array(e["mav"], dtype=np.float64) for e in entries},
                      {int(e["class"]): int(e["support"]) for e in entries}, int(doc["num_classes"]))
        weibulls = {int(e["class"]): WeibullModel(float(e["shape"]), float(e["scale"]), float(e["shift"]),
                                                  int(e["tail_size"])) for e in entries}
        return cls(mavs, weibulls, int(doc["alpha"]), int(doc["tail_size"]))


def class_distances(avs, labels, correct, mavs: MavSet) -> dict:
    """Euclidean distances of each class's correct AVs to that class's MAV."""
    labels = np.asarray(labels)
    return {c: np.linalg.norm(avs[(labels == c) & correct] - mavs.means[c], axis=1) for c in mavs.classes()}


def build_openmax(net: Network, mavs: MavSet | None, images, labels, tail_size=20, alpha=None) -> OpenmaxModel:
    avs, correct = correct_activations(net, images, labels)
    if mavs is None:
        mavs = mean_of_correct(avs, labels, correct, net.num_classes)
    alpha = min(10, net.num_classes) if alpha is None else int(alpha)
    weibulls = {}
    for c, dist in class_distances(avs, labels, correct, mavs).items():
        if len(dist) < tail_size:
            raise WeibullFitError(f"class {c} has {len(dist)} correctly classified training images, "
                                  f"fewer than tail_size={tail_size}")
        weibulls[c] = fit_weibull(dist, tail_size)
    return OpenmaxModel(mavs, weibulls, alpha, int(tail_size))


def revision_weights(model: OpenmaxModel, av) -> np.ndarray:
    """Per-class activation weights w_j; 1 outside the top ``alpha`` ranks."""
    av = np.asarray(av, dtype=np.float64)
    weights = np.ones(len(av))
    ranked = np.argsort(-av, kind="stable")[:model.alpha]
    for r, j in enumerate(ranked, start=1):
        j = int(j)
        if j not in model.weibulls:
            continue
        dist = np.linalg.norm(av - model.mavs.means[j])
        cdf = float(model.weibulls[j].cdf(dist))
        weights[j] = 1.0 - (model.alpha - r + 1) / model.alpha * cdf
    return weights


def openmax_probabilities(model: OpenmaxModel, av) -> OpenSetPrediction:
    av = np.asarray(av, dtype=np.float64)
    if av.shape != (model.num_classes,):
        raise ValueError(f"activation vector must have length {model.num_classes}, got shape {av.shape}")
    w = revision_weights(model, av)
    revised = np.append(av * w, np.sum(av * (1.0 - w)))
    probs = softmax_probs(revised)
    # np.argmax picks the first maximum: ties go to the lowest index, unknown (last) loses
    idx = int(np.argmax(probs))
    predicted = UNKNOWN if idx == model.num_classes else idx
    return OpenSetPrediction(probs, predicted, float(probs[idx]))


class SoftmaxHead:
    name = "softmax"

    def __init__(self, net: Network):
        self.net = net

    @property
    def labels(self):
        return set(range(self.net.num_classes))

    def predict_av(self, av):
        p = softmax_probs(av)
        idx = int(np.argmax(p))
        return idx, float(p[idx])

    def __call__(self, image):
        return self.predict_av(self.net.logits(image))


class OpenmaxHead:
    name = "openmax"

    def __init__(self, net: Network, model: OpenmaxModel):
        if model.num_classes != net.num_classes:
            raise ValueError("Openmax model and network disagree on the number of classes")
        self.net = net
        self.model = model

    @property
    def labels(self):
        return set(self.model.weibulls)

    def predict_av(self, av):
        pred = openmax_probabilities(self.model, av)
        return pred.predicted, pred.certainty

    def __call__(self, image):
        return self.predict_av(self.net.logits(image))


def classify(head, image):
    """``(label, certainty)`` of ``image`` under a softmax or Openmax head."""
    return head(image)
