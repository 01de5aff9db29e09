"""The full experiment: both heads, both target kinds, known probes and canvases.

Eight correctly classified test images plus two patterned and two noise
canvases are attacked towards every other class.  Per-attempt rows, summaries,
paired t-tests and a markdown table are written to ``demo_out/matrix``.  Takes
about two minutes on one core.

    python3 demos/desk_matrix.py
"""
from pathlib import Path

from lotsbench import data, experiment, nn
from lotsbench.openmax import OpenmaxHead, SoftmaxHead, build_openmax
from lotsbench.targets import compute_mavs

ds = data.make_synthetic(seed=0)
net = nn.train(nn.default_architecture(ds.train.image_shape, ds.num_classes), ds.train.images, ds.train.labels)
mavs = compute_mavs(net, ds.train.images, ds.train.labels)
model = build_openmax(net, mavs, ds.train.images, ds.train.labels)

probes = experiment.select_probes(ds.test, [SoftmaxHead(net), OpenmaxHead(net, model)], 8)
probes += experiment.default_canvases(ds.train.image_shape)
report = experiment.run_matrix(net, model, probes, out_dir=Path("demo_out/matrix"))

print(experiment.markdown_table(report))
for kind, res in report.ttests.items():
    print(f"{kind}: softmax vs openmax PASS, t = {res.t:.2f}, p = {res.p:.3g} over {res.n} pairs")
