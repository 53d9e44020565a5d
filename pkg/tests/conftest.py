import numpy as np
import pytest

from srl import autodiff as ad


def grad_check(build, inputs, h=1e-5):
    """Max relative error between backward and central differences over all inputs.

    ``build`` maps a list of Tensors to a scalar Tensor; ``inputs`` are arrays.
    """
    leaves = [ad.parameter(x) for x in inputs]
    ad.backward(build(leaves))
    worst = 0.0
    for k, leaf in enumerate(leaves):

        def f(x, k=k):
            args = [ad.Tensor(v) for v in inputs]
            args[k] = ad.Tensor(x)
            return build(args).data

        fd = ad.finite_diff_grad(f, inputs[k], h)
        worst = max(worst, ad.rel_error(leaf.grad, fd))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_REPORT: list[str] = []


@pytest.fixture(scope="session")
def report():
    """Record one acceptance verdict line; all lines are echoed in the terminal summary."""

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _REPORT.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)
