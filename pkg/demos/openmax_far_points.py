"""How Openmax treats activation vectors far from every class mean.

Draws AVs in uniformly random directions, ten times the largest training
distance away from every MAV, and counts how many Openmax rejects as unknown
for several values of alpha.  With alpha equal to the number of classes the
bottom-ranked, strongly negative logits also feed the unknown activation, so
an AV whose mass is mostly negative can stay on a known class.

    python3 demos/openmax_far_points.py
"""
import numpy as np

from lotsbench import data, nn
from lotsbench.openmax import UNKNOWN, OpenmaxModel, build_openmax, class_distances, openmax_probabilities, \
    revision_weights
from lotsbench.targets import compute_mavs, correct_activations

ds = data.make_synthetic(seed=0)
net = nn.train(nn.default_architecture(ds.train.image_shape, ds.num_classes), ds.train.images, ds.train.labels)
mavs = compute_mavs(net, ds.train.images, ds.train.labels)
model = build_openmax(net, mavs, ds.train.images, ds.train.labels)

avs, correct = correct_activations(net, ds.train.images, ds.train.labels)
d_max = max(d.max() for d in class_distances(avs, ds.train.labels, correct, mavs).values())
means = np.stack([mavs.means[c] for c in mavs.classes()])
centre = means.mean(axis=0)
radius = 10 * d_max + np.linalg.norm(means - centre, axis=1).max()
u = np.random.default_rng(7).normal(size=(200, len(centre)))
far = centre + radius * u / np.linalg.norm(u, axis=1, keepdims=True)
print(f"largest training distance {d_max:.1f}; far points sit at radius {radius:.1f}")

for alpha in (1, 2, 5, model.num_classes):
    m = OpenmaxModel(mavs, model.weibulls, alpha, model.tail_size)
    unknown = sum(openmax_probabilities(m, av).predicted == UNKNOWN for av in far)
    print(f"alpha {alpha:2d}: {unknown}/200 unknown")

kept = [av for av in far if openmax_probabilities(model, av).predicted != UNKNOWN]
for av in kept[:5]:
    w = revision_weights(model, av)
    print(f"kept known: AV sum {av.sum():7.1f}, unknown activation {np.sum(av * (1 - w)):7.1f}, "
          f"best revised known {np.max(av * w):5.1f}")
