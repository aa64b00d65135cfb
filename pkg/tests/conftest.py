import time

import pytest

from clipfree import data, train, zoo

SESSION_START = time.perf_counter()
ACCEPTANCE_LINES = {}

# desk-scale experiment shared by the RI fixtures and the acceptance gate
EXPERIMENT = dict(arch="abpn_tiny", model_seed=7, corpus_seed=1, corpus_n=64, corpus_size=64,
                  test_seed=2, test_n=8, test_size=96, train_seed=3)


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_collection_modifyitems(config, items):
    # the acceptance gate runs last so its suite-time check sees everything else
    items.sort(key=lambda it: it.nodeid.startswith("tests/test_acceptance.py"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def experiment():
    """Trained no-clip model, candidate corpus and test set (about 20 s)."""
    e = EXPERIMENT
    t0 = time.perf_counter()
    corpus = data.synth_corpus(e["corpus_seed"], e["corpus_n"], e["corpus_size"])
    testset = data.synth_corpus(e["test_seed"], e["test_n"], e["test_size"], name="test")
    m = zoo.build_model(e["arch"], clipped=False, seed=e["model_seed"])
    m = train.train(m, train.TrainConfig(seed=e["train_seed"]), corpus.tensors())
    return {"model": m, "corpus": corpus, "testset": testset, "train_seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def cfqp_sweep(experiment):
    from clipfree.cli import sweep_records

    t0 = time.perf_counter()
    recs = sweep_records(experiment["model"], experiment["corpus"], experiment["testset"],
                         mode="cfqp", timing=False)
    return {"records": recs, "seconds": time.perf_counter() - t0}
