import pytest

from sessionrank.datamodel import SyntheticConfig, prepare_dataset, sessionize, simulate

TINY_SIE = dict(embedding_dim=8, mlp_widths=(16, 8, 6), eta=0.2, batch_size=8, epochs=2, seed=0)
TINY_RANK = dict(proj_widths=(6, 6), eta=1.0, epochs=2, k=2, seed=0)


@pytest.fixture(scope="session")
def small_config():
    return SyntheticConfig(n_users=30, sessions_per_user=2, n_items=40, n_categories=4,
                           list_length=8)


@pytest.fixture(scope="session")
def small_corpus(small_config):
    return simulate(small_config, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_corpus):
    return prepare_dataset(sessionize(small_corpus.events))


@pytest.fixture(scope="session")
def tiny_models(small_dataset):
    from sessionrank.listnet import train_listrank
    from sessionrank.sie import train_sie

    sie = train_sie(small_dataset, **TINY_SIE)
    rank = train_listrank(small_dataset, sie, **TINY_RANK)
    return sie, rank


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
