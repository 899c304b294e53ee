"""Shared fixtures: the calc repo, open workspaces, and backend doubles."""

from __future__ import annotations

import pytest

import calcfix
from repeton.workspace import open_workspace


@pytest.fixture(scope="session")
def calc_repo(tmp_path_factory):
    """One buggy calculator git repo shared by the whole session.

    Runs clone it into their own work roots, so sharing is safe.
    """
    return calcfix.build_calc_repo(tmp_path_factory.mktemp("calc"))


@pytest.fixture
def calc_ws(calc_repo, tmp_path):
    """A fresh workspace holding a clone of the calc repo."""
    return open_workspace(
        str(calc_repo), "HEAD", "calc", work_root=str(tmp_path / "work")
    )


@pytest.fixture
def work_root(tmp_path):
    return tmp_path / "work"
