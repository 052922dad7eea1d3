"""Small helpers shared by the demo scripts."""

from pathlib import Path

import numpy as np

RAMP = " .:-=+*#%@"


def output_dir(name: str) -> Path:
    """demo_output/<name>/ next to the repository root, created on demand."""
    root = Path(__file__).resolve().parent.parent
    out = root / "demo_output" / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def ascii_map(values, width: int = 2) -> str:
    """Render a 2-D array in [0, 1] as an ASCII intensity ramp."""
    values = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    idx = np.minimum((values * len(RAMP)).astype(int), len(RAMP) - 1)
    rows = ("".join(RAMP[i] * width for i in row) for row in idx)
    return "\n".join(rows)
