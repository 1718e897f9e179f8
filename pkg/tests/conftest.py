import pytest

from mtprover.models import LinearMTPModel, Stage, TrainStageConfig, cyclic_corpus, train_recipe
from mtprover.mtp import MTPConfig

TOY_VOCAB = 8
TOY_HIDDEN = 16
TOY_BRANCHES = 5
TOY_WINDOW = 2
TOY_LR = 2.0
TOY_ALIGN_STEPS = 100
TOY_CALIB_STEPS = 300


def train_toy(seed=0, branches=TOY_BRANCHES):
    data = cyclic_corpus(TOY_VOCAB, 24)
    mtp = MTPConfig(branches, 0.9)
    model = LinearMTPModel.random(TOY_VOCAB, TOY_HIDDEN, branches, seed, TOY_WINDOW)
    align = TrainStageConfig(Stage.FROZEN_BRANCH_ALIGNMENT, TOY_ALIGN_STEPS, seed, TOY_LR)
    calib = TrainStageConfig(Stage.JOINT_CALIBRATION, TOY_CALIB_STEPS, seed, TOY_LR)
    trained, results = train_recipe(model, data, mtp, align, calib, init_seed=seed + 1)
    return trained, results


@pytest.fixture(scope="session")
def trained_toy():
    return train_toy()[0]


# -- acceptance reporting: one line per criterion in the terminal summary ----

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        prev = _criteria.get(number, (title, "PASS"))[1]
        status = "PASS" if report.outcome == "passed" and prev == "PASS" else "FAIL"
        _criteria[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {title}")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
