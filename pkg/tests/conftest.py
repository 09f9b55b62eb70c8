import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))


@pytest.fixture
def runs_root(monkeypatch, tmp_path) -> Path:
    """Redirect every run directory lookup into a temporary root."""
    import fslora.artifacts as artifacts

    root = tmp_path / "runs"
    root.mkdir()
    monkeypatch.setattr(artifacts, "RUNS_DIR", root)
    monkeypatch.setenv("FSL_OUTPUT_DIR", str(root))
    return root
