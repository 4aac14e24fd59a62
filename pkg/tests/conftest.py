import numpy as np
import pytest

from mmlatch import tensor as T
from mmlatch.data import Batch
from mmlatch.model import MMLatchModel, ModelConfig

TINY_DIMS = {"A": 5, "T": 4, "V": 3}


def random_batch(batch=2, length=3, dims=TINY_DIMS, seed=0) -> Batch:
    rng = np.random.default_rng(seed)
    features = {k: rng.normal(size=(batch, length, d)) for k, d in dims.items()}
    labels = rng.uniform(-3, 3, size=(batch, 1))
    return Batch(features, labels)


def tiny_model(feedback="lstm", init="xavier", seed=0, dropout=0.0, dims=TINY_DIMS) -> MMLatchModel:
    return MMLatchModel(ModelConfig(dims=dict(dims), hidden=4, dropout=dropout, feedback=feedback,
                                    feedback_init=init, seed=seed))


def weighted_sum(out: T.Tensor, seed=99) -> T.Tensor:
    w = np.random.default_rng(seed).normal(size=out.shape)
    return T.sum_(T.mul(out, T.Tensor(w)))


def max_grad_error(f, params, step=1e-4) -> float:
    return max(T.gradient_check(f, params, step).values())


@pytest.fixture
def batch():
    return random_batch()


# Acceptance bookkeeping: tests marked ``criterion(name)`` report into one line per criterion.
CRITERIA = (
    "gradient suite",
    "mask identity",
    "stage-I isolation",
    "shape contracts",
    "mask range",
    "metric oracles",
    "overfit",
    "ablation direction",
    "training protocol",
)
_outcomes: dict[str, list[tuple[str, bool, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None and (report.when == "call" or report.failed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _outcomes.setdefault(marker.args[0], []).append((item.name, report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name in CRITERIA:
        runs = _outcomes.get(name)
        if not runs:
            terminalreporter.write_line(f"NOT RUN  {name}")
            continue
        ok = all(passed for _, passed, _ in runs)
        details = " | ".join(d for _, _, d in runs if d)
        failed = [test for test, passed, _ in runs if not passed]
        line = f"{'PASS' if ok else 'FAIL'}  {name}"
        if details:
            line += f": {details}"
        if failed:
            line += f" (failed: {', '.join(failed)})"
        terminalreporter.write_line(line)
