"""Collects one verdict per acceptance criterion so the run can print a PASS/FAIL table."""

RESULTS: dict[int, tuple[str, str]] = {}


def record(number: int, title: str, passed: bool) -> str:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}"
    RESULTS[number] = (title, line)
    print(line)
    return line


def summary_lines() -> list[str]:
    return [RESULTS[n][1] for n in sorted(RESULTS)]
