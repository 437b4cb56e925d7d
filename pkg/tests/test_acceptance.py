"""Acceptance checks at full tolerance; each prints one PASS/FAIL line."""
import json

import pytest

from kinhilbert.presets import CRITERIA

RESULTS = {}


def _summary(rep):
    parts = []
    for name, c in rep["checks"].items():
        v = c["value"]
        v = f"{v:.3g}" if isinstance(v, float) else json.dumps(v)
        parts.append(f"{name}={v}{'' if c['ok'] else ' (bound ' + json.dumps(c['bound']) + ')'}")
    return ", ".join(parts)


@pytest.mark.acceptance
@pytest.mark.parametrize("name", list(CRITERIA))
def test_criterion(name):
    rep = CRITERIA[name]()
    line = f"{name}: {'PASS' if rep['passed'] else 'FAIL'} | {_summary(rep)}"
    RESULTS[name] = line
    print(line)
    assert rep["passed"], line
