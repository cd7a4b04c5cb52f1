import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from poolsim.catalog import scenario_from_dict  # noqa: E402


def make(model="llama-3.1-70b", hardware="h20", *, dp=2, tp=2, mode="replicated",
         requests=4, prompt=128, output=8, seed=0, policy=None, ablation=None, **layout):
    doc = {
        "name": f"{model}-{mode}-tp{tp}dp{dp}",
        "model": model,
        "hardware": hardware,
        "layout": {"dp": dp, "tp": tp, "weight_mode": mode, **layout},
        "workload": {"num_requests": requests, "prompt_len": prompt, "output_len": output,
                     "seed": seed},
    }
    if policy:
        doc["policy"] = policy
    if ablation is not None:
        doc["ablation"] = ablation
    return scenario_from_dict(doc)


@pytest.fixture
def scenario_factory():
    return make


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import VERDICTS, line
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(VERDICTS):
        terminalreporter.write_line(line(criterion))
