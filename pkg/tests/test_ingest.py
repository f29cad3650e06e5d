import random

import pytest
from hypothesis import given, settings, strategies as st

from reporag.errors import IngestError
from reporag.ingest import (
    CodeFile,
    DependencyGraph,
    Language,
    build_dependency_graph,
    cluster_and_sort,
    scan_repository,
    write_clusters,
)

from conftest import py


def test_scan_sorted_and_filtered(tree):
    root = tree({"b.py": "x = 1\n", "a.py": "y = 2\n", "a.txt": "nope\n", "pkg/c.py": ""})
    files = scan_repository(root, Language.PYTHON)
    assert [f.rel_path for f in files] == ["a.py", "b.py", "pkg/c.py"]
    assert files[0].repo_id == "repo"
    assert files[0].line_count == 1


def test_scan_skips_oversized(tree):
    root = tree({"big.py": "x" * (2 << 20), "small.py": "pass\n"})
    files = scan_repository(root, "python", max_bytes=1 << 20)
    assert [f.rel_path for f in files] == ["small.py"]


def test_scan_replaces_invalid_utf8(tmp_path):
    (tmp_path / "a.py").write_bytes(b"x = '\xff'\n")
    (f,) = scan_repository(tmp_path, "python")
    assert "�" in f.text


def test_scan_java_extension(tree):
    root = tree({"A.java": "class A {}\n", "b.py": ""})
    assert [f.rel_path for f in scan_repository(root, "java")] == ["A.java"]


def test_scan_unreadable_root(tmp_path):
    with pytest.raises(IngestError) as exc:
        scan_repository(tmp_path / "missing", "python")
    assert exc.value.reason == "Unreadable"


def test_scan_empty_repo(tree):
    assert scan_repository(tree({"README": "hi"}), "python") == []


def test_line_count():
    assert py("a.py", "a\nb\n").line_count == 2
    assert py("a.py", "a\nb").line_count == 2
    assert py("a.py", "").line_count == 0


def test_import_edge_direction():
    g = build_dependency_graph([py("main.py", "import utils\n"), py("utils.py", "X = 1\n")])
    assert g.edges == {("utils.py", "main.py")}


def test_stdlib_import_ignored():
    g = build_dependency_graph([py("main.py", "import os\n"), py("other.py", "")])
    assert g.edges == set()


def test_from_import_package_member():
    files = [py("a/__init__.py", ""), py("a/b.py", "from a import c\n"), py("a/c.py", "")]
    g = build_dependency_graph(files)
    assert ("a/c.py", "a/b.py") in g.edges


def test_relative_imports():
    files = [
        py("pkg/__init__.py", ""),
        py("pkg/x.py", "from . import y\nfrom .sub.z import thing\n"),
        py("pkg/y.py", ""),
        py("pkg/sub/z.py", "from ..y import f\n"),
    ]
    g = build_dependency_graph(files)
    assert ("pkg/y.py", "pkg/x.py") in g.edges
    assert ("pkg/sub/z.py", "pkg/x.py") in g.edges
    assert ("pkg/y.py", "pkg/sub/z.py") in g.edges


def test_dotted_import_and_package_init():
    files = [py("main.py", "import a.b, lib\n"), py("a/b.py", ""), py("lib/__init__.py", "")]
    g = build_dependency_graph(files)
    assert ("a/b.py", "main.py") in g.edges
    assert ("lib/__init__.py", "main.py") in g.edges


def test_five_file_fixture_against_hand_resolution():
    files = [
        py("app/__init__.py", ""),
        py("app/main.py", "from app import models, views\nimport app.util as u\n"),
        py("app/models.py", "from .util import slug\n"),
        py("app/views.py", "from app.models import Thing\nimport json\n"),
        py("app/util.py", "import re\n"),
    ]
    g = build_dependency_graph(files)
    assert g.edges == {
        ("app/__init__.py", "app/main.py"),
        ("app/models.py", "app/main.py"),
        ("app/views.py", "app/main.py"),
        ("app/util.py", "app/main.py"),
        ("app/util.py", "app/models.py"),
        ("app/models.py", "app/views.py"),
    }
    assert g.nodes == {f.rel_path for f in files}


def test_java_imports():
    files = [
        CodeFile("r", "src/com/acme/App.java", Language.JAVA, "import com.acme.util.Strings;\nimport java.util.List;\n"),
        CodeFile("r", "src/com/acme/util/Strings.java", Language.JAVA, "package com.acme.util;\n"),
        CodeFile("r", "src/com/acme/model/User.java", Language.JAVA, "import com.acme.util.*;\n"),
    ]
    g = build_dependency_graph(files)
    assert ("src/com/acme/util/Strings.java", "src/com/acme/App.java") in g.edges
    assert ("src/com/acme/util/Strings.java", "src/com/acme/model/User.java") in g.edges


def test_no_self_edges():
    g = build_dependency_graph([py("a.py", "import a\n")])
    assert g.edges == set()


def test_cluster_single_edge():
    g = DependencyGraph()
    g.add_edge("utils.py", "main.py")
    (c,) = cluster_and_sort(g)
    assert c.ordered_files == ("utils.py", "main.py")
    assert not c.cyclic


def test_singletons_dropped():
    g = DependencyGraph(nodes={"a"})
    assert cluster_and_sort(g) == []


def test_cycle_fallback_order():
    g = DependencyGraph()
    for a, b in [("a", "b"), ("b", "a"), ("a", "c")]:
        g.add_edge(a, b)
    (c,) = cluster_and_sort(g)
    assert c.cyclic
    assert c.ordered_files == ("a", "b", "c")


def test_lexicographic_tie_break():
    g = DependencyGraph()
    g.add_edge("root", "z")
    g.add_edge("root", "b")
    g.add_edge("root", "m")
    (c,) = cluster_and_sort(g)
    assert c.ordered_files == ("root", "b", "m", "z")


def random_dag(rng: random.Random, n: int, p: float) -> DependencyGraph:
    names = [f"n{i:02d}" for i in range(n)]
    perm = names[:]
    rng.shuffle(perm)
    g = DependencyGraph(nodes=set(names))
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                g.add_edge(perm[i], perm[j])
    return g


def check_topological(g: DependencyGraph) -> None:
    clusters = cluster_and_sort(g)
    seen: list[str] = []
    for c in clusters:
        assert len(c.ordered_files) >= 2
        assert not c.cyclic
        pos = {f: i for i, f in enumerate(c.ordered_files)}
        for a, b in g.edges:
            if a in pos or b in pos:
                assert a in pos and b in pos
                assert pos[a] < pos[b]
        seen.extend(c.ordered_files)
    assert len(seen) == len(set(seen))
    in_edges = {x for e in g.edges for x in e}
    assert set(seen) == in_edges


def test_topological_order_on_random_dags():
    rng = random.Random(1234)
    for _ in range(200):
        check_topological(random_dag(rng, rng.randint(1, 50), rng.choice([0.02, 0.05, 0.1, 0.3])))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 30))
def test_topological_property(seed, n):
    check_topological(random_dag(random.Random(seed), n, 0.1))


def test_clusters_serialization_deterministic(tmp_path):
    files = [py("main.py", "import utils\nimport b\n"), py("utils.py", ""), py("b.py", "import utils\n")]
    out = []
    for name in ("one", "two"):
        g = build_dependency_graph(list(reversed(files)) if name == "two" else files)
        path = tmp_path / f"{name}.jsonl"
        write_clusters(path, cluster_and_sort(g, "r"))
        out.append(path.read_bytes())
    assert out[0] == out[1]
    assert out[0] == b'{"repo": "r", "files": ["utils.py", "b.py", "main.py"], "cyclic": false}\n'
