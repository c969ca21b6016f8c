import pytest

from kspace_bo.density import GeneratorBox, build_basis, random_generators


@pytest.fixture(scope="session")
def default_family():
    """Default generator family: 10^4 densities on 64x64, L = 20."""
    gens = random_generators(10_000, GeneratorBox(), resolution=64, seed=0)
    return build_basis(gens, 20, resolution=64, seed=0)


_ACCEPTANCE: list = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one ``(criterion, passed, detail)`` line per acceptance check."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
