import sys
from pathlib import Path

import pytest

# Make the shared reference oracles importable from every test module.
sys.path.insert(0, str(Path(__file__).parent))


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    """Print one pass/fail line per tagged acceptance criterion."""
    rep = yield
    if rep.when == "call":
        label = getattr(item.function, "_criterion", None)
        if label is not None:
            status = "PASS" if rep.passed else "FAIL"
            capman = item.config.pluginmanager.getplugin("capturemanager")
            if capman is not None:
                with capman.global_and_fixture_disabled():
                    print(f"[{status}] {label}", flush=True)
            else:
                print(f"[{status}] {label}", flush=True)
    return rep
