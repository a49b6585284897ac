"""Collects one status line per acceptance criterion for the end-of-run summary."""

LINES: list = []


def record(number: int, title: str, passed: bool, detail: str) -> str:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    LINES.append(line)
    print(line, flush=True)
    return line
