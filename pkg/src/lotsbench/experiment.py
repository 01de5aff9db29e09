"""The four-way attack matrix: {softmax, openmax} heads x {CAV, MAV} targets.

Every probe image is attacked towards every known class other than the one
the head already assigns to it, under both heads and both target kinds.  A
correctly classified probe therefore gets K - 1 attempts per cell, and a
canvas the Openmax head calls ``unknown`` gets K.  When the heads are paired
by target class for the t-tests, a target that is one head's original label
has no attack on that side and contributes PASS = 1.

Files written to the output directory:

``attempts.csv``
    one row per attempt, columns ``ATTEMPT_FIELDS``
``summary.csv``
    one row per (probe, head, kind) plus ``ALL`` rows pooled over probes,
    columns ``SUMMARY_FIELDS``
``ttests.csv``
    paired t-tests of PASS between the heads, one row per target kind
``report.md``
    the summary laid out as a table, one column group per head and kind
``images/<probe>_<head>_<kind>_<target>.png``
    the perturbed image of each attempt
"""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as datamod
from .lots import AttackConfig, iterative_lots
from .openmax import UNKNOWN, OpenmaxHead, OpenmaxModel, SoftmaxHead
from .pass_metric import pass_score
from .stats import CellStats, attempt_pass, compute_stats, paired_ttest
from .targets import make_cav, mav_target

log = logging.getLogger(__name__)

HEADS = ("softmax", "openmax")
KINDS = ("CAV", "MAV")
ALL = "ALL"

ATTEMPT_FIELDS = ["probe", "probe_kind", "head", "kind", "target", "original_label", "success", "reason",
                  "steps", "achieved", "certainty", "pass", "pass_aligned", "image"]
SUMMARY_FIELDS = ["probe", "head", "kind", "n_attempts", "n_success", "success_rate", "pass_mean", "pass_std",
                  "fail_max_steps", "fail_stall"]
TTEST_FIELDS = ["kind", "a", "b", "n", "t", "p", "df", "degenerate"]


@dataclass
class Probe:
    name: str
    image: np.ndarray
    kind: str  # "known", "regular" or "irregular"
    label: int | None = None


@dataclass
class Attempt:
    probe: str
    probe_kind: str
    head: str
    kind: str
    target: int
    original_label: int
    success: bool
    reason: str
    steps: int
    achieved: int
    certainty: float
    pass_value: float  # nan unless a target was reached
    pass_aligned: bool
    image: str = ""

    @property
    def stat_pass(self):
        return attempt_pass(self.success, self.reason, self.pass_value)


@dataclass
class ExperimentReport:
    attempts: list
    cells: dict = field(default_factory=dict)  # (probe, head, kind) -> CellStats
    failures: dict = field(default_factory=dict)  # (probe, head, kind) -> Counter of reasons
    ttests: dict = field(default_factory=dict)  # kind -> TTestResult

    @classmethod
    def from_attempts(cls, attempts) -> "ExperimentReport":
        attempts = sorted(attempts, key=_attempt_key)
        groups = defaultdict(list)
        for a in attempts:
            groups[(a.probe, a.head, a.kind)].append(a)
            groups[(ALL, a.head, a.kind)].append(a)
        cells, failures = {}, {}
        for key, rows in groups.items():
            cells[key] = compute_stats((r.success, r.reason, r.pass_value) for r in rows)
            failures[key] = Counter(r.reason for r in rows if not r.success)
        ttests = {}
        for kind in KINDS:
            pairs = _paired_pass(attempts, kind)
            if len(pairs) >= 2:
                a, b = zip(*pairs)
                ttests[kind] = paired_ttest(a, b)
        return cls(attempts, cells, failures, ttests)

    def probes(self):
        seen = []
        for a in self.attempts:
            if a.probe not in seen:
                seen.append(a.probe)
        return seen

    def cell(self, probe, head, kind) -> CellStats | None:
        return self.cells.get((probe, head, kind))


def _attempt_key(a: Attempt):
    return (a.probe, HEADS.index(a.head) if a.head in HEADS else 99, a.kind, a.target)


def _paired_pass(attempts, kind):
    """PASS pairs (softmax, openmax) over the union of attempted (probe, target) pairs."""
    by_head = {h: {(a.probe, a.target): a.stat_pass for a in attempts if a.head == h and a.kind == kind}
               for h in HEADS}
    original = {(a.head, a.probe): a.original_label for a in attempts if a.kind == kind}

    def value(head, key):
        if key in by_head[head]:
            return by_head[head][key]
        if original.get((head, key[0])) == key[1]:
            return attempt_pass(True, "original", 1.0)
        return None

    pairs = []
    for key in sorted(set(by_head["softmax"]) | set(by_head["openmax"])):
        a, b = value("softmax", key), value("openmax", key)
        if a is not None and b is not None:
            pairs.append((a, b))
    return pairs


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


def select_probes(test: datamod.LabeledImages, heads, n_probes=8, probe_ids=None) -> list:
    """Test images classified correctly by every head, one class after another.

    Explicit ``probe_ids`` are checked the same way; misclassified ones are
    skipped with a warning.
    """
    def ok(i):
        label = int(test.labels[i])
        return all(head(test.images[i])[0] == label for head in heads)

    probes = []
    if probe_ids is not None:
        for i in probe_ids:
            if ok(i):
                probes.append(Probe(f"test{i}", test.images[i], "known", int(test.labels[i])))
            else:
                log.warning("probe test%d is misclassified by a head; excluded", i)
        return probes
    per_class = {c: list(np.flatnonzero(test.labels == c)) for c in range(test.num_classes)}
    cls_cycle = [c for c in range(test.num_classes) if per_class[c]]
    while len(probes) < n_probes and any(per_class[c] for c in cls_cycle):
        for c in cls_cycle:
            if len(probes) >= n_probes:
                break
            while per_class[c]:
                i = int(per_class[c].pop(0))
                if ok(i):
                    probes.append(Probe(f"test{i}", test.images[i], "known", c))
                    break
    return probes


def default_canvases(shape, seed=0) -> list:
    """Two patterned and two uniform-noise canvases."""
    h, w, c = shape
    return [
        Probe("regular1", datamod.generate_regular(seed + 1, "stripes", h, w, c), "regular"),
        Probe("regular2", datamod.generate_regular(seed + 2, "checker", h, w, c), "regular"),
        Probe("irregular1", datamod.generate_irregular(seed + 3, h, w, c), "irregular"),
        Probe("irregular2", datamod.generate_irregular(seed + 4, h, w, c), "irregular"),
    ]


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

_WORKER = {}


def _init_worker(net, model, config):
    _WORKER.update(net=net, model=model, config=config,
                   heads={"softmax": SoftmaxHead(net), "openmax": OpenmaxHead(net, model)})


def _run_cell(probe: Probe, head_name: str, kind: str):
    net, model, config = _WORKER["net"], _WORKER["model"], _WORKER["config"]
    head = _WORKER["heads"][head_name]
    original, _ = head(probe.image)
    results = []
    for target in sorted(head.labels - {original}):
        t = make_cav(target, net.num_classes) if kind == "CAV" else mav_target(model.mavs, target)
        res = iterative_lots(net, head, probe.image, t, config)
        pass_value, aligned = math.nan, False
        if res.success:
            if res.steps_used == 0:
                pass_value, aligned = 1.0, True
            else:
                score = pass_score(res.perturbed, probe.image)
                pass_value, aligned = score.value, score.aligned
        results.append((Attempt(probe.name, probe.kind, head_name, kind, target, original, res.success,
                                res.reason, res.steps_used, res.achieved_class, res.certainty,
                                pass_value, aligned), res.perturbed))
    return results


def run_matrix(net, model: OpenmaxModel, probes, attack_config: AttackConfig | None = None,
               out_dir=None, workers=1) -> ExperimentReport:
    """Attack every probe under both heads and both target kinds.

    With ``out_dir`` the perturbed images and all report files are written
    there.  ``workers > 1`` spreads cells over processes; output order does not
    depend on scheduling.
    """
    attack_config = attack_config or AttackConfig()
    heads = [SoftmaxHead(net), OpenmaxHead(net, model)]
    kept = []
    for p in probes:
        if p.kind == "known" and any(h(p.image)[0] != p.label for h in heads):
            log.warning("probe %s is misclassified by a head; excluded", p.name)
            continue
        kept.append(p)
    jobs = [(p, h, k) for p in kept for h in HEADS for k in KINDS]
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(net, model, attack_config)) as ex:
            outputs = list(ex.map(_run_cell, *zip(*jobs)))
    else:
        _init_worker(net, model, attack_config)
        outputs = [_run_cell(*job) for job in jobs]
    attempts = []
    img_dir = Path(out_dir) / "images" if out_dir is not None else None
    if img_dir is not None:
        img_dir.mkdir(parents=True, exist_ok=True)
    for cell in outputs:
        for attempt, image in cell:
            if img_dir is not None:
                attempt.image = f"images/{attempt.probe}_{attempt.head}_{attempt.kind}_{attempt.target}.png"
                datamod.write_png(Path(out_dir) / attempt.image, image)
            attempts.append(attempt)
    report = ExperimentReport.from_attempts(attempts)
    if out_dir is not None:
        emit_report(report, out_dir)
    return report


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def _label(v):
    return "unknown" if v == UNKNOWN else str(v)


def _parse_label(s):
    return UNKNOWN if s == "unknown" else int(s)


def _fmt(x):
    return repr(float(x))


def write_attempts_csv(attempts, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ATTEMPT_FIELDS)
        for a in sorted(attempts, key=_attempt_key):
            w.writerow([a.probe, a.probe_kind, a.head, a.kind, a.target, _label(a.original_label),
                        int(a.success), a.reason, a.steps, _label(a.achieved), _fmt(a.certainty),
                        _fmt(a.pass_value), int(a.pass_aligned), a.image])


def read_attempts_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(Attempt(row["probe"], row["probe_kind"], row["head"], row["kind"], int(row["target"]),
                               _parse_label(row["original_label"]), row["success"] == "1", row["reason"],
                               int(row["steps"]), _parse_label(row["achieved"]), float(row["certainty"]),
                               float(row["pass"]), row["pass_aligned"] == "1", row["image"]))
    return out


def summary_rows(report: ExperimentReport):
    probes = report.probes() + [ALL]
    for probe in probes:
        for head in HEADS:
            for kind in KINDS:
                st = report.cell(probe, head, kind)
                if st is None:
                    continue
                fails = report.failures.get((probe, head, kind), Counter())
                yield {"probe": probe, "head": head, "kind": kind, "n_attempts": st.n_attempts,
                       "n_success": st.n_success, "success_rate": st.success_rate, "pass_mean": st.pass_mean,
                       "pass_std": st.pass_std, "fail_max_steps": fails.get("max_steps", 0),
                       "fail_stall": fails.get("stall", 0)}


def write_summary_csv(report: ExperimentReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_FIELDS)
        w.writeheader()
        for row in summary_rows(report):
            w.writerow({k: _fmt(v) if isinstance(v, float) else v for k, v in row.items()})


def read_summary_csv(path) -> dict:
    """``(probe, head, kind) -> CellStats`` from a summary file."""
    cells = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cells[(row["probe"], row["head"], row["kind"])] = CellStats(
                int(row["n_attempts"]), int(row["n_success"]), float(row["success_rate"]),
                float(row["pass_mean"]), float(row["pass_std"]))
    return cells


def write_ttests_csv(report: ExperimentReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TTEST_FIELDS)
        for kind, tt in sorted(report.ttests.items()):
            w.writerow([kind, "softmax", "openmax", tt.n, _fmt(tt.t), _fmt(tt.p), tt.df, int(tt.degenerate)])


def markdown_table(report: ExperimentReport) -> str:
    groups = [(h, k) for h in HEADS for k in KINDS]
    head = "| Probe | " + " | ".join(f"{h.capitalize()} {k}" for h, k in groups) + " |"
    lines = [head, "|" + "---|" * (len(groups) + 1)]
    probes = report.probes()
    for probe in probes + ([ALL] if probes else []):
        cells = []
        for h, k in groups:
            st = report.cell(probe, h, k)
            cells.append("n/a" if st is None else
                         f"{st.pass_mean:.3f} ± {st.pass_std:.3f} ({st.success_rate:.1f}%)")
        lines.append(f"| {probe} | " + " | ".join(cells) + " |")
    text = "\n".join(lines) + "\n"
    if report.ttests:
        text += "\nPaired two-sided t-tests of PASS, softmax vs openmax:\n\n"
        for kind, tt in sorted(report.ttests.items()):
            flag = " (degenerate)" if tt.degenerate else ""
            text += f"- {kind}: t = {tt.t:.4f}, df = {tt.df}, p = {tt.p:.3g}{flag}\n"
    return text


def emit_report(report: ExperimentReport, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"attempts": out / "attempts.csv", "summary": out / "summary.csv",
             "ttests": out / "ttests.csv", "markdown": out / "report.md"}
    write_attempts_csv(report.attempts, paths["attempts"])
    write_summary_csv(report, paths["summary"])
    write_ttests_csv(report, paths["ttests"])
    paths["markdown"].write_text("# Attack matrix\n\n" + markdown_table(report))
    return paths
