import pytest

from cddod.docgen import DOMAINS, generate_dataset

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []
    config.addinivalue_line("markers", "slow: long-running training experiment")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns the ok flag."""

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        print(line)
        return ok

    return record


@pytest.fixture(scope="session")
def datasets(tmp_path_factory):
    """Tiny A and B datasets: 4 train + 2 test pages each."""
    root = tmp_path_factory.mktemp("data")
    for name, seed in (("A", 11), ("B", 22)):
        generate_dataset(DOMAINS[name](), 6, seed, root / name, test_fraction=1 / 3)
    return root
