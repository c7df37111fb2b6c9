"""Shared helpers for the experiment scripts."""

import logging
import warnings

import numpy as np


def quiet() -> None:
    logging.getLogger("sail_lab").setLevel(logging.ERROR)
    warnings.filterwarnings("ignore", category=RuntimeWarning)


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


def table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[f"{v:.4g}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells)
