"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

LINES: list[str] = []


def record(number, title: str, ok: bool, detail: str, status: str | None = None) -> bool:
    tag = status or ("PASS" if ok else "FAIL")
    line = f"[{tag}] criterion {number}: {title} | {detail}"
    LINES.append(line)
    print(line, flush=True)
    return ok
