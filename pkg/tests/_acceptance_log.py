"""Shared record of acceptance outcomes, printed once at the end of the session."""

RESULTS: dict[int, tuple[bool, str]] = {}


def record(number: int, ok: bool, detail: str) -> None:
    RESULTS[number] = (bool(ok), detail)


def lines(expected=range(1, 9)) -> list[str]:
    out = []
    for n in expected:
        if n in RESULTS:
            ok, detail = RESULTS[n]
            out.append(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            out.append(f"ACCEPTANCE {n}: NOT RUN")
    return out
