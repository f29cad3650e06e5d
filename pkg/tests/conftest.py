from pathlib import Path

import pytest

from reporag.ingest import CodeFile, Language


def write_tree(root: Path, files: dict[str, str]) -> Path:
    for rel, text in files.items():
        p = root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
    return root


def py(rel: str, text: str, repo: str = "r") -> CodeFile:
    return CodeFile(repo, rel, Language.PYTHON, text)


@pytest.fixture
def tree(tmp_path):
    def make(files: dict[str, str], name: str = "repo") -> Path:
        return write_tree(tmp_path / name, files)

    return make


# (criterion number, title, passed, seconds, detail) rows filled by test_acceptance.py
ACCEPTANCE: list[tuple[int, str, bool, float, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, secs, detail in sorted(ACCEPTANCE):
        line = f"{'PASS' if ok else 'FAIL'}  [{num}] {title} ({secs:.1f}s)"
        terminalreporter.write_line(line + (f"  {detail}" if detail else ""))
