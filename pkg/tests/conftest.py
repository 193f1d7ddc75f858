import numpy as np
import pytest

from mcam.data import synth_generate


def naive_conv2d(x, w, groups=1):
    """Loop oracle: valid grouped cross-correlation."""
    B, C, H, W = x.shape
    O, CPG, KH, KW = w.shape
    opg = O // groups
    out = np.zeros((B, O, H - KH + 1, W - KW + 1))
    for b in range(B):
        for o in range(O):
            g = o // opg
            for c in range(CPG):
                for i in range(KH):
                    for j in range(KW):
                        out[b, o] += w[o, c, i, j] * x[b, g * CPG + c, i:i + H - KH + 1, j:j + W - KW + 1]
    return out


@pytest.fixture(scope="session")
def small_dataset():
    """One synthetic subject, 8 trials (2 per class)."""
    return synth_generate({"subjects": 1, "trials_per_class": 2}, seed=3)


def pytest_terminal_summary(terminalreporter):
    rows = []
    for status in ("passed", "failed"):
        for rep in terminalreporter.stats.get(status, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and rep.when == "call":
                rows.append((props["criterion"], status.upper(), props.get("detail", "")))
    if rows:
        terminalreporter.section("acceptance criteria")
        for crit, status, detail in sorted(rows):
            terminalreporter.write_line(f"criterion {crit}: {'PASS' if status == 'PASSED' else 'FAIL'}  {detail}")
