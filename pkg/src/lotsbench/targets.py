"""Logits-space attack targets: class aiming vectors and mean activation vectors."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Network

CAV_MAGNITUDE = 100.0
MAVSET_FORMAT = "lotsbench-mavset"
MAVSET_VERSION = 1


@dataclass(frozen=True)
class TargetVector:
    values: np.ndarray
    kind: str  # "CAV" or "MAV"
    target_class: int

    def __post_init__(self):
        if self.kind not in ("CAV", "MAV"):
            raise ValueError(f"target kind must be CAV or MAV, got {self.kind!r}")
        if not 0 <= self.target_class < len(self.values):
            raise ValueError(f"target class {self.target_class} outside [0, {len(self.values)})")


@dataclass
class MavSet:
    """Per-class mean activation vectors with the number of AVs behind each."""

    means: dict  # class -> (K,) array
    support: dict  # class -> int
    num_classes: int

    def __contains__(self, cls):
        return cls in self.means

    def classes(self):
        return sorted(self.means)

    def save(self, path) -> None:
        doc = {
            "format": MAVSET_FORMAT,
            "version": MAVSET_VERSION,
            "num_classes": self.num_classes,
            "classes": [{"class": c, "support": self.support[c], "mav": [float(v) for v in self.means[c]]}
                        for c in self.classes()],
        }
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path) -> "MavSet":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def from_dict(cls, doc) -> "MavSet":
        if doc.get("format") != MAVSET_FORMAT:
            raise ValueError("not a MAV set file")
        if doc.get("version") != MAVSET_VERSION:
            raise ValueError(f"unsupported MAV set version {doc.get('version')}")
        means = {int(e["class"]): np.array(e["mav"], dtype=np.float64) for e in doc["classes"]}
        support = {int(e["class"]): int(e["support"]) for e in doc["classes"]}
        return cls(means, support, int(doc["num_classes"]))


def correct_activations(net: Network, images, labels, batch_size=512):
    """Logits of every image plus a mask of those the softmax head gets right."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    avs = np.concatenate([net.logits(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]) \
        if len(images) else np.zeros((0, net.num_classes))
    return avs, avs.argmax(axis=1) == labels


def mean_of_correct(avs, labels, correct, num_classes) -> MavSet:
    """Class means of the correctly classified AVs.

    ``math.fsum`` per coordinate makes the mean independent of sample order.
    """
    labels = np.asarray(labels)
    means, support = {}, {}
    for c in np.unique(labels):
        sel = avs[(labels == c) & correct]
        if len(sel) == 0:
            raise ValueError(f"class {int(c)} has no correctly classified training images; "
                             "cannot form its MAV")
        means[int(c)] = np.array([math.fsum(col) / len(sel) for col in sel.T])
        support[int(c)] = len(sel)
    return MavSet(means, support, avs.shape[1])


def compute_mavs(net: Network, images, labels) -> MavSet:
    avs, correct = correct_activations(net, images, labels)
    return mean_of_correct(avs, labels, correct, net.num_classes)


def make_cav(target_class: int, num_classes: int, magnitude: float = CAV_MAGNITUDE) -> TargetVector:
    if not 0 <= target_class < num_classes:
        raise ValueError(f"target class {target_class} outside [0, {num_classes})")
    values = np.full(num_classes, -float(magnitude))
    values[target_class] = magnitude
    return TargetVector(values, "CAV", int(target_class))


def mav_target(mavs: MavSet, target_class: int) -> TargetVector:
    if target_class not in mavs:
        raise KeyError(f"no MAV for class {target_class}")
    return TargetVector(mavs.means[target_class], "MAV", int(target_class))
