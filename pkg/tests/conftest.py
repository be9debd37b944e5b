import numpy as np
import pytest

from sedetect.model import MaxPool, ReLU, SEBlock

FD_STEP = 1e-3


def numerical_gradient(f, x: np.ndarray, region=None):
    """Central differences of scalar ``f()`` w.r.t. ``x`` (mutated in place and restored).

    Step per element is 1e-3 * (1 + |x|). With ``region`` (a callable that
    fingerprints the piecewise-linear region of the last ``f()`` call) a
    stencil that lands in a different region straddles a kink, where the
    difference quotient says nothing about the derivative. Such coordinates
    retry with the step divided by 10, up to four times, and are reported in
    the returned ``reduced`` mask.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    reduced = np.zeros(x.shape, bool)
    if region is not None:
        f()
        base = region()
    for idx in np.ndindex(x.shape):
        old = x[idx]
        h = FD_STEP * (1 + abs(old))
        for attempt in range(5 if region is not None else 1):
            x[idx] = old + h
            fp = f()
            same = region is None or region() == base
            x[idx] = old - h
            fm = f()
            same = same and (region is None or region() == base)
            x[idx] = old
            if same:
                break
            h /= 10
            reduced[idx] = True
        grad[idx] = (fp - fm) / (2 * h if same else 20 * h)
    return grad if region is None else (grad, reduced)


def model_region(model):
    """Fingerprint of every ReLU mask (SE hidden layers included) and max-pool argmax."""
    def region():
        parts = []
        for layer in model.layers:
            if isinstance(layer, ReLU):
                parts.append(np.packbits(layer.cache.peek("mask")).tobytes())
            elif isinstance(layer, MaxPool):
                parts.append(layer.cache.peek("argmax").tobytes())
            elif isinstance(layer, SEBlock):
                parts.append(np.packbits(layer.cache.peek("pre") > 0).tobytes())
        return tuple(parts)
    return region


def rel_error(analytic, numeric) -> float:
    """Norm-wise relative error, with a 1e-8 floor for all-zero gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / scale)


def check_model_gradients(model, x, y, loss_fn):
    """Compare backprop against central differences on every trainable tensor.

    Returns ``{name: (rel_error, coordinates_needing_a_smaller_step, size)}``.
    """
    def loss():
        return loss_fn(model.forward(x, "train"), y)

    grads = model.backprop(model.forward(x, "train"), y)
    region = model_region(model)
    out = {}
    for name, param in model.parameters().items():
        numeric, reduced = numerical_gradient(loss, param, region)
        out[name] = (rel_error(grads[name], numeric), int(reduced.sum()), param.size)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion
# --------------------------------------------------------------------------

_criteria: dict[int, tuple[str, bool, list[str], list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    details = [str(v) for k, v in item.user_properties if k == "detail"]
    blocks = [str(v) for k, v in item.user_properties if k == "report"]
    _criteria[number] = (title, report.passed, details, blocks)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, passed, details, _ = _criteria[number]
        suffix = f" [{'; '.join(details)}]" if details else ""
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} {title}{suffix}")
    for number in sorted(_criteria):
        for block in _criteria[number][3]:
            terminalreporter.write_line("")
            terminalreporter.write_line(block)
