"""Reproduction test materialization, execution and classification.

Harness-authored tests live under the reserved ``.repeton_tests/``
directory inside the workspace, which snapshots and diffs never see, so
a patch can never smuggle its own test along. Tests run as subprocesses
in their own session with ``REPETON=1`` exported and are killed as a
whole process tree on timeout.

Classification is rule-ordered and deterministic; an optional judge
callback breaks ties for logs the rules cannot read, and may never
declare a test passing.
"""

from __future__ import annotations

import logging
import os
import signal
import subprocess
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable

from .errors import IoFailure, JudgeUnavailable, SpawnFailure
from .workspace import RESERVED_TEST_DIR, Workspace

logger = logging.getLogger(__name__)

RUN_ENV_FLAG = "REPETON"
DEFAULT_TIMEOUT_S = 120.0
OUTPUT_CAP_BYTES = 8 * 1024
EXCERPT_CAP_CHARS = 4 * 1024
CERTIFICATION_RUNS = 2

# A marker only counts when the reserved directory shows up in the same
# stderr, i.e. the failure originates from the test file itself.
DEFAULT_INVALID_MARKERS = ("ImportError", "ModuleNotFoundError", "SyntaxError")


class TestVerdict(Enum):
    Pass = "Pass"
    FailBugPresent = "FailBugPresent"
    FailInvalidTest = "FailInvalidTest"
    Inconclusive = "Inconclusive"


@dataclass(frozen=True)
class TestArtifact:
    """One versioned reproduction test."""

    file_name: str
    source_text: str
    invocation: tuple[str, ...]
    expected_signature: str = ""
    version: int = 1

    def __post_init__(self) -> None:
        # Raw segments, not PurePosixPath parts: the latter silently
        # normalizes "." and doubled slashes away.
        parts = self.file_name.split("/")
        if (
            len(parts) < 2
            or parts[0] != RESERVED_TEST_DIR
            or any(part in ("", "..", ".") for part in parts)
            or "\\" in self.file_name
        ):
            raise ValueError(
                f"test file must sit under {RESERVED_TEST_DIR}/: {self.file_name!r}"
            )
        if not self.invocation:
            raise ValueError("invocation must not be empty")
        if self.version < 1:
            raise ValueError(f"version must be >= 1, got {self.version}")


@dataclass(frozen=True)
class TestLimits:
    timeout_s: float = DEFAULT_TIMEOUT_S
    output_cap: int = OUTPUT_CAP_BYTES


@dataclass(frozen=True)
class ExecutionResult:
    exit_code: int
    stdout_tail: str
    stderr_tail: str
    duration_s: float
    timed_out: bool


@dataclass(frozen=True)
class DiagnosticReport:
    verdict: TestVerdict
    log_excerpt: str
    suggestion: str


def materialize_test(ws: Workspace, artifact: TestArtifact) -> None:
    """Write the test file into the reserved directory."""
    target = ws.root / artifact.file_name
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(artifact.source_text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot materialize {artifact.file_name}: {exc}") from exc
    logger.info("materialized %s (version %d)", artifact.file_name, artifact.version)


def run_test(
    ws: Workspace, artifact: TestArtifact, limits: TestLimits = TestLimits()
) -> ExecutionResult:
    """Execute the test at the workspace root with bounded output."""
    env = {**os.environ, RUN_ENV_FLAG: "1"}
    start = time.monotonic()
    try:
        proc = subprocess.Popen(
            list(artifact.invocation),
            cwd=ws.root,
            env=env,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            start_new_session=True,
        )
    except OSError as exc:
        raise SpawnFailure(f"cannot start {artifact.invocation[0]!r}: {exc}") from exc

    timed_out = False
    try:
        stdout, stderr = proc.communicate(timeout=limits.timeout_s)
    except subprocess.TimeoutExpired:
        timed_out = True
        try:
            os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
        except ProcessLookupError:
            pass
        stdout, stderr = proc.communicate()

    duration = time.monotonic() - start
    return ExecutionResult(
        exit_code=proc.returncode,
        stdout_tail=stdout[-limits.output_cap:].decode("utf-8", errors="replace"),
        stderr_tail=stderr[-limits.output_cap:].decode("utf-8", errors="replace"),
        duration_s=duration,
        timed_out=timed_out,
    )


def _has_invalid_marker(stderr_tail: str, markers: tuple[str, ...]) -> bool:
    if RESERVED_TEST_DIR not in stderr_tail:
        return False
    return any(marker in stderr_tail for marker in markers)


def _excerpt(result: ExecutionResult) -> str:
    combined = f"stdout:\n{result.stdout_tail}\nstderr:\n{result.stderr_tail}"
    return combined[-EXCERPT_CAP_CHARS:]


_JUDGE_LABELS = {
    "failbugpresent": TestVerdict.FailBugPresent,
    "bug": TestVerdict.FailBugPresent,
    "failinvalidtest": TestVerdict.FailInvalidTest,
    "invalid": TestVerdict.FailInvalidTest,
}


def classify_result(
    result: ExecutionResult,
    expected_signature: str = "",
    judge: Callable[[str], str] | None = None,
    markers: tuple[str, ...] = DEFAULT_INVALID_MARKERS,
) -> tuple[TestVerdict, DiagnosticReport | None]:
    """Apply the verdict rules in order; non-Pass verdicts carry a report.

    Rule order: clean exit wins, then timeout, then import/collection
    markers, then the expected failure signature, then the judge. The
    judge may only confirm a bug or condemn the test, never pass it.
    """
    if result.exit_code == 0 and not result.timed_out:
        return TestVerdict.Pass, None

    if result.timed_out:
        verdict = TestVerdict.FailInvalidTest
        suggestion = "test timed out; make it terminate quickly"
    elif _has_invalid_marker(result.stderr_tail, markers):
        verdict = TestVerdict.FailInvalidTest
        suggestion = "test failed during import or collection; fix the test file"
    elif expected_signature and expected_signature in result.stderr_tail:
        verdict = TestVerdict.FailBugPresent
        suggestion = "failure signature matched; the bug is reproduced"
    else:
        verdict = TestVerdict.Inconclusive
        suggestion = "failure does not match the expected signature; inspect the log"
        if judge is not None:
            try:
                label = judge(_excerpt(result))
            except JudgeUnavailable:
                raise
            except Exception as exc:
                raise JudgeUnavailable(f"judge callback failed: {exc}") from exc
            verdict = _JUDGE_LABELS.get(label.strip().lower(), TestVerdict.Inconclusive)
            if verdict is not TestVerdict.Inconclusive:
                suggestion = f"judge classified the failure as {verdict.value}"

    return verdict, DiagnosticReport(
        verdict=verdict, log_excerpt=_excerpt(result), suggestion=suggestion
    )


def certify_failure(
    ws: Workspace,
    artifact: TestArtifact,
    limits: TestLimits = TestLimits(),
    runs: int = CERTIFICATION_RUNS,
    judge: Callable[[str], str] | None = None,
) -> tuple[bool, list[TestVerdict]]:
    """Run the test ``runs`` times; certified only if every run reproduces
    the bug. Stops early at the first run that does not."""
    verdicts: list[TestVerdict] = []
    for _ in range(runs):
        result = run_test(ws, artifact, limits)
        verdict, _report = classify_result(
            result, artifact.expected_signature, judge=judge
        )
        verdicts.append(verdict)
        if verdict is not TestVerdict.FailBugPresent:
            return False, verdicts
    return True, verdicts
