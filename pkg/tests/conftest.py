from __future__ import annotations

import numpy as np
import pytest

from dmk.labels import DatasetManifest, ManifestEntry


def make_manifest(counts: dict[str, int]) -> DatasetManifest:
    entries = []
    for name, n in counts.items():
        stem = name.lower().replace(" ", "-")
        for i in range(n):
            sid = f"{stem}_{i:05d}"
            entries.append(
                ManifestEntry(sid, name, f"images/{sid}_pre.png", f"images/{sid}_post.png", f"labels/{sid}.json")
            )
    return DatasetManifest(tuple(entries))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
