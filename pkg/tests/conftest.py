import numpy as np
import pytest

from malpipe import dataset, pipeline, synth
from malpipe.gbdt import TrainParams

TOY_PARAMS = TrainParams(iterations=20, min_samples_leaf=5, max_leaves=15)


def toy_config(**kw) -> pipeline.PipelineConfig:
    base = dict(
        params={s: TOY_PARAMS for s in pipeline.STAGES},
        family_top_k=10,
        min_stage_samples=50,
        quarantine_floor=50,
    )
    base.update(kw)
    return pipeline.PipelineConfig(**base)


@pytest.fixture(scope="session")
def toy_corpus():
    return synth.generate(synth.SynthConfig(samples=3000, seed=1, tail_families=10))


@pytest.fixture(scope="session")
def toy_samples(toy_corpus):
    return list(dataset.attach_taxonomy(toy_corpus.records, toy_corpus.taxonomy))


@pytest.fixture(scope="session")
def toy_pipeline(toy_samples):
    return pipeline.train_pipeline(toy_samples, toy_config())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ----------------------------------------------------------

_criteria: dict[int, tuple[str, str, float]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        _criteria[number] = (title, status, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, seconds = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title} ({seconds:.1f} s)")
