"""Shared helpers: central finite-difference gradient checks."""

import numpy as np
import pytest

from ccgan import autodiff as ad
from ccgan import nn

FD_STEP = 1e-6
FD_RTOL = 1e-5


def relative_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    # below the central-difference noise floor a relative error is meaningless
    if scale < 1e-7:
        return float(np.linalg.norm(analytic - numeric))
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(f, arrays, index, h=FD_STEP):
    """Central differences of scalar ``f()`` w.r.t. ``arrays[index]``, perturbed in place."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def check_op_gradients(build, inputs, h=FD_STEP):
    """``build(tape, nodes) -> 1x1 node``.  Returns the worst relative error."""
    inputs = [np.array(x, dtype=np.float64) for x in inputs]

    def value():
        tape = ad.Tape()
        return build(tape, [tape.constant(x) for x in inputs]).item()

    tape = ad.Tape()
    nodes = [tape.variable(x) for x in inputs]
    root = build(tape, nodes)
    ad.backward(root)
    worst = 0.0
    for k, node in enumerate(nodes):
        analytic = np.zeros_like(inputs[k]) if node.grad is None else node.grad
        worst = max(worst, relative_error(analytic, numeric_gradient(value, inputs, k, h)))
    return worst


def check_param_gradients(params_list, build, h=FD_STEP):
    """Gradient check over the flat buffers of several ``MlpParams``.

    ``build(tape, bound_list) -> 1x1 node`` where each entry of
    ``bound_list`` is a trainable ``BoundMlp``.
    """

    def value():
        tape = ad.Tape()
        return build(tape, [p.bind(tape, trainable=False) for p in params_list]).item()

    tape = ad.Tape()
    bound = [p.bind(tape) for p in params_list]
    ad.backward(build(tape, bound))
    worst = 0.0
    for p, b in zip(params_list, bound):
        analytic = nn.flatten_grads(p, b.grads())
        numeric = numeric_gradient(value, [p.flat], 0, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_REPORT = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_REPORT):
        terminalreporter.write_line(ACCEPTANCE_REPORT[key])
