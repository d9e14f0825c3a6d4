"""Prints one pass/fail line per acceptance criterion at session end."""

CRITERIA = {
    "test_c1": "1 gradient fidelity (all modes, 64-bit, <1e-4)",
    "test_c2": "2 retrieval oracle equivalence (exact + exhaustive clustered)",
    "test_c3": "3 quantized recall@8 on the pinned instance",
    "test_c4": "4 distribution laws + worked-retrieval aggregation",
    "test_c5": "5 collapse identities (gate tau=0, lambda=0 decode)",
    "test_c6": "6 desk-scale directional experiment",
    "test_c7": "7 edge-case conformance (floors and fallbacks)",
    "test_c8": "8 serialization round-trips and corruption handling",
}


def pytest_terminal_summary(terminalreporter):
    verdicts: dict[str, bool] = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            if "test_acceptance.py" not in str(getattr(report, "nodeid", "")):
                continue
            key = report.nodeid.split("::")[-1].split("[")[0]
            if key in CRITERIA:
                verdicts[key] = verdicts.get(key, True) and status == "passed"
    if verdicts:
        terminalreporter.write_sep("=", "acceptance criteria")
        for key in sorted(verdicts, key=lambda k: CRITERIA[k]):
            terminalreporter.write_line(
                f"criterion {CRITERIA[key]}: {'PASS' if verdicts[key] else 'FAIL'}")
