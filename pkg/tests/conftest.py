import numpy as np
import pytest

from fedlt import nn

from fedlt import nn


def random_params(gen, in_dim, hidden, rep_dim, n_classes, aux=True, bias=False, scale=1.0):
    p = nn.init_params([in_dim, *hidden, rep_dim], n_classes, gen, gen if aux else None, bias)
    # nonzero encoder biases so every code path carries signal
    return p.map(lambda t: t * scale + 0.1 * gen.normal(size=t.shape))


def random_loss_kind(gen, n_classes, which):
    if which == "ce":
        return nn.CrossEntropy()
    if which == "focal":
        return nn.Focal(float(gen.uniform(0.0, 3.0)))
    return nn.Ratio(float(gen.uniform(0.5, 1.5)), float(gen.uniform(0.0, 0.5)),
                    tuple(gen.uniform(0.0, 10.0, size=n_classes)))


def mean_loss_by_forward(params, x, y, kind):
    """Independent loss path: per-sample forward + scalar loss, then mean."""
    return float(np.mean([nn.loss(nn.forward(params, xi)[1], int(yi), kind) for xi, yi in zip(x, y)]))


def finite_difference_grads(params, x, y, kind, step=1e-5):
    tensors = params.tensors()
    out = []
    for i, t in enumerate(tensors):
        g = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            vals = []
            for sign in (1.0, -1.0):
                pert = [u.copy() for u in tensors]
                pert[i][idx] += sign * step
                vals.append(mean_loss_by_forward(params.with_tensors(pert), x, y, kind))
            g[idx] = (vals[0] - vals[1]) / (2 * step)
        out.append(g)
    return out


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / den)))
    return worst


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


@pytest.fixture
def small_world():
    """Tiny long-tailed federation: 4 classes, 3 clients, 1 hidden layer."""
    from fedlt import data, rng

    counts = data.longtail_counts(60, 10, 4)
    ds = data.synth_gaussian_mixture(4, 5, counts, seed=11, sigma=0.5)
    shards = data.dirichlet_partition(ds, 3, 1.0, seed=11)
    params = nn.init_params([5, 6, 3], 4, rng.stream(11, rng.INIT, 0), rng.stream(11, rng.INIT, 1))
    return ds, shards, params


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    entry = _CRITERIA.setdefault(props["criterion"], {"title": props["title"], "ok": True, "detail": []})
    entry["ok"] = entry["ok"] and report.outcome == "passed"
    entry["detail"] += [v for k, v in report.user_properties if k == "detail"]


def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        item.user_properties += [("criterion", mark.args[0]), ("title", mark.args[1])]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        detail = "; ".join(e["detail"])
        line = f"criterion {n:>2} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def detail(request):
    """Attach a one-line measurement to the acceptance summary."""
    def put(text: str) -> None:
        request.node.user_properties.append(("detail", text))
    return put
