import pytest

from buildmem import features, predictor, synthetic, trace


@pytest.fixture(scope="session")
def sample():
    return synthetic.sample_dataset()


@pytest.fixture(scope="session")
def sample_split(sample):
    return trace.split(sample)


@pytest.fixture(scope="session")
def small():
    return synthetic.sample_dataset(n=800, seed=3)


@pytest.fixture(scope="session")
def small_split(small):
    return trace.split(small)


@pytest.fixture(scope="session")
def small_ensemble(small_split):
    from dataclasses import replace

    train, _ = small_split
    matrix, enc, rows = features.featurize(train, "ensemble_table1")
    pa = replace(predictor.DEFAULT_PARAMS_A, n_trees=20, min_samples_leaf=20)
    pb = replace(predictor.DEFAULT_PARAMS_B, n_trees=20, min_samples_leaf=20)
    return predictor.train_ensemble(matrix, pa, pb, enc, smoke_row=rows[-1])


@pytest.fixture(scope="session")
def small_classifier(small_split):
    train, _ = small_split
    matrix, enc, rows = features.featurize(train, "classifier_table1")
    return predictor.train_classifier(matrix, enc, smoke_row=rows[-1])


@pytest.fixture(scope="session")
def sample_ensemble(sample_split):
    train, _ = sample_split
    matrix, enc, rows = features.featurize(train, "ensemble_table1")
    return predictor.train_ensemble(matrix, encoder=enc, smoke_row=rows[-1]), matrix, rows


# one PASS/FAIL line per acceptance criterion at the end of the run
_acceptance: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    prev = _acceptance.get(n, (title, True))
    _acceptance[n] = (title, prev[1] and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        title, ok = _acceptance[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}")
