"""Workspace isolation, snapshot round-trips, and diff fidelity."""

from __future__ import annotations

import random

import pytest

import oracles
from repeton.errors import (
    DirtyTarget,
    ForeignSnapshot,
    LocationUnavailable,
    RevisionNotFound,
)
from repeton.workspace import (
    RESERVED_TEST_DIR,
    WORK_DIR_ENV,
    compute_diff,
    open_workspace,
    restore_snapshot,
    take_snapshot,
    tracked_files,
)


def test_open_workspace_clones_into_isolated_root(calc_repo, tmp_path):
    ws = open_workspace(
        str(calc_repo), "HEAD", "demo-1", work_root=str(tmp_path)
    )
    assert ws.root == tmp_path / "demo-1" / "repo"
    assert ws.root.is_dir()
    assert (ws.root / "calc.py").read_text().startswith('"""Tiny calculator')
    assert tracked_files(ws) == ["README.md", "calc.py", "util.py"]


def test_open_workspace_resolves_named_revision(calc_repo, tmp_path):
    ws = open_workspace(
        str(calc_repo), "master", "demo-rev", work_root=str(tmp_path)
    )
    assert (ws.root / "calc.py").exists()


def test_open_workspace_missing_location(tmp_path):
    with pytest.raises(LocationUnavailable):
        open_workspace(
            str(tmp_path / "no-such-repo"), "HEAD", "x", work_root=str(tmp_path)
        )


def test_open_workspace_unknown_revision(calc_repo, tmp_path):
    with pytest.raises(RevisionNotFound):
        open_workspace(
            str(calc_repo), "no-such-rev", "x", work_root=str(tmp_path)
        )


def test_open_workspace_refuses_occupied_directory(calc_repo, tmp_path):
    target = tmp_path / "busy" / "repo"
    target.mkdir(parents=True)
    (target / "stale.txt").write_text("left over\n")
    with pytest.raises(DirtyTarget):
        open_workspace(str(calc_repo), "HEAD", "busy", work_root=str(tmp_path))


def test_open_workspace_work_dir_env_fallback(calc_repo, tmp_path, monkeypatch):
    monkeypatch.setenv(WORK_DIR_ENV, str(tmp_path / "from-env"))
    ws = open_workspace(str(calc_repo), "HEAD", "env-pick")
    assert ws.root == tmp_path / "from-env" / "env-pick" / "repo"


def test_tracked_files_skips_ignored_entries(calc_ws):
    (calc_ws.root / "__pycache__").mkdir()
    (calc_ws.root / "__pycache__" / "calc.cpython-310.pyc").write_bytes(b"\x00")
    (calc_ws.root / "calc.pyc").write_bytes(b"\x00")
    (calc_ws.root / RESERVED_TEST_DIR).mkdir()
    (calc_ws.root / RESERVED_TEST_DIR / "test_x.py").write_text("assert True\n")
    assert tracked_files(calc_ws) == ["README.md", "calc.py", "util.py"]


def test_snapshot_restore_round_trip(calc_ws):
    before = oracles.tree_bytes(calc_ws.root)
    snap = take_snapshot(calc_ws, "base")

    (calc_ws.root / "calc.py").write_text("print('rewritten')\n")
    (calc_ws.root / "util.py").unlink()
    (calc_ws.root / "pkg").mkdir()
    (calc_ws.root / "pkg" / "fresh.py").write_text("VALUE = 3\n")

    restore_snapshot(calc_ws, snap)
    assert oracles.tree_bytes(calc_ws.root) == before
    assert compute_diff(calc_ws, snap).is_empty


def test_restore_rejects_foreign_snapshot(calc_repo, tmp_path):
    ws_a = open_workspace(str(calc_repo), "HEAD", "a", work_root=str(tmp_path))
    ws_b = open_workspace(str(calc_repo), "HEAD", "b", work_root=str(tmp_path))
    snap = take_snapshot(ws_a, "base")
    with pytest.raises(ForeignSnapshot):
        restore_snapshot(ws_b, snap)


def test_restore_leaves_reserved_test_dir_alone(calc_ws):
    snap = take_snapshot(calc_ws, "base")
    test_file = calc_ws.root / RESERVED_TEST_DIR / "test_keep.py"
    test_file.parent.mkdir()
    test_file.write_text("assert True\n")
    restore_snapshot(calc_ws, snap)
    assert test_file.read_text() == "assert True\n"


def test_diff_matches_external_oracle(calc_ws, tmp_path):
    pristine = tmp_path / "pristine"
    pristine.mkdir()
    for rel, data in oracles.tree_bytes(calc_ws.root).items():
        target = pristine / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)

    snap = take_snapshot(calc_ws, "base")
    calc_text = (calc_ws.root / "calc.py").read_text()
    (calc_ws.root / "calc.py").write_text(
        calc_text.replace("a + b + 1", "a + b")
    )
    (calc_ws.root / "util.py").unlink()
    (calc_ws.root / "extra.py").write_text("FLAG = True\n")

    diff = compute_diff(calc_ws, snap)
    reference = oracles.external_diff(pristine, calc_ws.root)
    assert diff.files_touched == oracles.external_files_touched(reference)
    assert diff.hunk_count == oracles.external_hunk_count(reference)
    assert "-    return a + b + 1" in diff.text
    assert "+    return a + b" in diff.text


def test_diff_round_trips_through_patch_utility(calc_ws, tmp_path):
    pristine = tmp_path / "pristine"
    pristine.mkdir()
    for rel, data in oracles.tree_bytes(calc_ws.root).items():
        target = pristine / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)

    snap = take_snapshot(calc_ws, "base")
    calc_text = (calc_ws.root / "calc.py").read_text()
    (calc_ws.root / "calc.py").write_text(
        calc_text.replace("a + b + 1", "a + b")
    )
    (calc_ws.root / "README.md").unlink()
    (calc_ws.root / "notes.txt").write_text("n1\nn2\n")

    diff = compute_diff(calc_ws, snap)
    patched = oracles.apply_patch(pristine, diff.text, tmp_path / "scratch")
    assert oracles.tree_bytes(patched) == oracles.tree_bytes(calc_ws.root)


def test_diff_marks_missing_trailing_newline(calc_ws, tmp_path):
    (calc_ws.root / "tail.txt").write_text("one\ntwo")
    snap = take_snapshot(calc_ws, "base")
    (calc_ws.root / "tail.txt").write_text("one\nthree")

    diff = compute_diff(calc_ws, snap)
    assert "\\ No newline at end of file" in diff.text

    pristine = tmp_path / "pristine"
    pristine.mkdir()
    (pristine / "tail.txt").write_text("one\ntwo")
    patched = oracles.apply_patch(pristine, diff.text, tmp_path / "scratch")
    assert (patched / "tail.txt").read_bytes() == b"one\nthree"


def test_diff_reports_creation_and_deletion_headers(calc_ws):
    snap = take_snapshot(calc_ws, "base")
    (calc_ws.root / "born.py").write_text("x = 1\n")
    (calc_ws.root / "util.py").unlink()
    diff = compute_diff(calc_ws, snap)
    assert "--- /dev/null\n+++ b/born.py" in diff.text
    assert "--- a/util.py\n+++ /dev/null" in diff.text
    assert diff.files_touched == 2


def test_diff_ignores_reserved_test_dir(calc_ws):
    snap = take_snapshot(calc_ws, "base")
    test_file = calc_ws.root / RESERVED_TEST_DIR / "test_new.py"
    test_file.parent.mkdir()
    test_file.write_text("assert True\n")
    assert compute_diff(calc_ws, snap).is_empty


def _random_mutation(rng: random.Random, root, step: int) -> None:
    files = sorted(p for p in root.rglob("*.py") if p.is_file())
    move = rng.choice(("edit", "create", "delete", "append"))
    if move == "create" or not files:
        fresh = root / f"gen_{step}.py"
        fresh.write_text(f"VALUE_{step} = {rng.randrange(100)}\n")
    elif move == "delete":
        rng.choice(files).unlink()
    elif move == "append":
        target = rng.choice(files)
        with target.open("a") as handle:
            handle.write(f"TAIL_{step} = {rng.randrange(100)}\n")
    else:
        rng.choice(files).write_text(f"BODY_{step} = {rng.randrange(100)}\n")


def test_random_mutation_sequences_restore_exactly(calc_ws):
    rng = random.Random(20260816)
    for case in range(40):
        snap = take_snapshot(calc_ws, f"case-{case}")
        frozen = oracles.tree_bytes(calc_ws.root)
        for step in range(rng.randrange(1, 6)):
            _random_mutation(rng, calc_ws.root, case * 10 + step)
        restore_snapshot(calc_ws, snap)
        assert oracles.tree_bytes(calc_ws.root) == frozen
        assert compute_diff(calc_ws, snap).is_empty
