import io

import numpy as np
import pytest

from tkedit.model import ModelConfig, new_model
from tkedit.questions import AliasTable, builtin_pack
from tkedit.temporal_kb import TemporalFact, build_chains, parse_facts

US = "United_States"
HOG = "head_of_government"

PRESIDENCY_TSV = (
    f"{US}\t{HOG}\tBarack_Obama\t2009\t2017\n"
    f"{US}\t{HOG}\tDonald_Trump\t2017\t2021\n"
    f"{US}\t{HOG}\tJoseph_Biden\t2021\t2022\n"
)


@pytest.fixture
def presidency_facts():
    return parse_facts(io.StringIO(PRESIDENCY_TSV)).facts


@pytest.fixture
def presidency_chain(presidency_facts):
    chains, _ = build_chains(presidency_facts)
    assert len(chains) == 1
    return chains[0]


@pytest.fixture(scope="session")
def pack():
    return builtin_pack("default")


@pytest.fixture(scope="session")
def synthetic_pack():
    return builtin_pack("synthetic")


@pytest.fixture
def full_name_aliases():
    table = AliasTable()
    for entity, name in [
        ("Barack_Obama", "Barack Obama"),
        ("Barack_Obama", "Obama"),
        ("Donald_Trump", "Donald Trump"),
        ("Donald_Trump", "Trump"),
        ("Joseph_Biden", "Joseph Biden"),
        ("Joseph_Biden", "Joe Biden"),
        ("Joseph_Biden", "Biden"),
    ]:
        table.add(entity, name)
    return table


@pytest.fixture
def presidency_model():
    entities = [US, "Barack_Obama", "Donald_Trump", "Joseph_Biden", "George_Bush"]
    return new_model(ModelConfig(d=256, seed=0), entities, [HOG], (2000, 2030))


def fact(o, ts, te=None, s="s", r="r"):
    return TemporalFact(s, r, o, ts, te)


def random_spd(rng: np.random.Generator, d: int) -> np.ndarray:
    A = rng.normal(size=(d, d))
    return A @ A.T / d + np.eye(d)


# ---------------------------------------------------------------- acceptance report

_VERDICTS: dict[int, tuple[str, bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    n, title = marker.args
    if rep.when == "call" or rep.failed:
        # a criterion spread over several tests passes only if all of them do
        prev = _VERDICTS.get(n, (title, True))[1]
        _VERDICTS[n] = (title, prev and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        title, ok = _VERDICTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {title}")
