from __future__ import annotations

import numpy as np


def circle_distance(points) -> tuple[float, np.ndarray]:
    """Distance of each point to the unit circle, and its batch mean."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    d = np.abs(np.hypot(p[:, 0], p[:, 1]) - 1.0)
    return float(d.mean()) if d.size else float("nan"), d
