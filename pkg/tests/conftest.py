from __future__ import annotations

import numpy as np
import pytest

from amlm.vocab import BYTE_TOKENS, SPECIAL_TOKENS, build_vocab

RESERVED = list(SPECIAL_TOKENS) + list(BYTE_TOKENS)

_ACCEPTANCE: list[tuple[str, bool, str]] = []


def make_vocab(extra):
    return build_vocab(RESERVED + list(extra))


@pytest.fixture
def vocab_factory():
    return make_vocab


@pytest.fixture
def criterion():
    """Record one acceptance criterion's verdict for the end-of-run summary."""

    def report(name: str, ok: bool, detail: str = "") -> None:
        _ACCEPTANCE.append((name, bool(ok), detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {name} {detail}")

    return report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
