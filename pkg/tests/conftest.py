"""Shared hooks: acceptance verdicts are gathered and printed once per criterion."""

VERDICTS: dict[int, list[tuple[bool, str]]] = {}


def record_verdict(criterion: int, ok: bool, detail: str) -> None:
    VERDICTS.setdefault(criterion, []).append((bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(VERDICTS):
        parts = VERDICTS[criterion]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{d} [{'ok' if ok else 'fail'}]" for ok, d in parts)
        terminalreporter.write_line(f"criterion {criterion}: {status} ({detail})")
