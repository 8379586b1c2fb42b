import contextlib
import os
from pathlib import Path

ACCEPTANCE_LINES = []
NOTES = []


def note(text):
    """Informative result shown in the terminal summary (not a pass/fail criterion)."""
    NOTES.append(text)
    print(text)


@contextlib.contextmanager
def criterion(number, title):
    """Record one PASS/FAIL line for an acceptance criterion around the checked block.

    The block may set ``detail["text"]`` to add measured values to the line.
    """
    detail = {"text": ""}
    try:
        yield detail
    except BaseException as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        _record(number, "FAIL", title, f"{detail['text']} {msg}".strip())
        raise
    _record(number, "PASS", title, detail["text"])


def skip_criterion(number, title, reason):
    _record(number, "SKIP", title, reason)


def _record(number, status, title, text):
    line = f"criterion {number:>2} {status}: {title}" + (f" ({text})" if text else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def cifar_dir():
    """cifar-100-binary directory from $CIFAR100_DIR or $NDREG_DATA_ROOT, if present."""
    candidates = [os.environ.get("CIFAR100_DIR")]
    if os.environ.get("NDREG_DATA_ROOT"):
        candidates.append(str(Path(os.environ["NDREG_DATA_ROOT"]) / "cifar-100-binary"))
    for c in candidates:
        if c and (Path(c) / "train.bin").exists() and (Path(c) / "test.bin").exists():
            return Path(c)
    return None


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
    if NOTES:
        terminalreporter.write_sep("-", "notes")
        for line in NOTES:
            terminalreporter.write_line(line)
