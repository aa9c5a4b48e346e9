import numpy as np
import pytest

from apgan.attributes import AttrNetConfig, train_attribute_predictor
from apgan.data import make_corpus, stack

# separate corpus for the attribute predictor, one image per subject
ATTR_CORPUS = dict(num_subjects=500, per_subject=1, size=32, seed=101)


@pytest.fixture(scope="session")
def attr_corpus():
    return make_corpus(**ATTR_CORPUS)


@pytest.fixture(scope="session")
def attr_net(attr_corpus):
    images = stack(attr_corpus.samples)
    labels = np.stack([s.attributes for s in attr_corpus.samples])
    return train_attribute_predictor(images, labels, AttrNetConfig(), seed=0)


@pytest.fixture(scope="session")
def holdout_corpus():
    return make_corpus(40, 4, 32, seed=202)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict = {}


def record_criterion(key: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {key}: {detail}"
    ACCEPTANCE_LINES[key] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
