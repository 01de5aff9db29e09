import numpy as np
import pytest

from lotsbench import data, nn
from lotsbench.openmax import OpenmaxHead, SoftmaxHead, build_openmax
from lotsbench.targets import compute_mavs

DESK_SEED = 0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk():
    """Synthetic texture set, trained network and Openmax model, built once per session."""
    ds = data.make_synthetic(seed=DESK_SEED)
    net = nn.train(nn.default_architecture(ds.train.image_shape, ds.num_classes, seed=DESK_SEED),
                   ds.train.images, ds.train.labels, nn.TrainConfig(seed=DESK_SEED))
    mavs = compute_mavs(net, ds.train.images, ds.train.labels)
    model = build_openmax(net, mavs, ds.train.images, ds.train.labels)
    return {"data": ds, "net": net, "mavs": mavs, "model": model,
            "heads": [SoftmaxHead(net), OpenmaxHead(net, model)]}


# ---------------------------------------------------------------------------
# acceptance criteria: one summary line each, whatever the outcome
# ---------------------------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")


@pytest.fixture
def record(request):
    """Attach a measured value to the acceptance summary line of the running test."""
    details = []
    request.node.user_properties.append(("details", details))
    return details.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    details = dict(item.user_properties).get("details", [])
    _CRITERIA[number] = ("PASS" if rep.passed else "FAIL", title, "; ".join(details))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}" + (f"  [{detail}]" if detail else ""))
