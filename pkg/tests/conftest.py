import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    from textspotter.config import ModelConfig

    return ModelConfig(dim=16, heads=2, points=2, ffn_dim=32, encoder_layers=1, decoder_layers=2,
                       num_queries=8, max_len=5, backbone_channels=[8, 8, 16, 16], stem_channels=8)


# acceptance reporting: one line per criterion, status taken from the test outcome
ACCEPTANCE_CRITERIA = range(1, 11)
_details: dict[int, str] = {}
_status: dict[int, bool] = {}


def _criterion_number(item):
    marker = item.get_closest_marker("criterion")
    return None if marker is None else marker.args[0]


@pytest.fixture
def report(request):
    n = _criterion_number(request.node)

    def record(detail: str) -> None:
        _details[n] = detail

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    n = _criterion_number(item)
    if n is None or rep.when != "call":
        return
    _status[n] = _status.get(n, True) and rep.passed
    if rep.failed and n not in _details:
        _details[n] = str(call.excinfo.value).splitlines()[0] if call.excinfo else "failed"


def pytest_terminal_summary(terminalreporter):
    if not _status:
        return
    terminalreporter.section("acceptance criteria")
    for n in ACCEPTANCE_CRITERIA:
        if n not in _status:
            terminalreporter.write_line(f"criterion {n}: FAIL - not run")
            continue
        word = "PASS" if _status[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {word} - {_details.get(n, '')}")
