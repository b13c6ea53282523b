# metrics.py
"""
Forecast error measures.

The relative family divides each error by the actual value A_t:
    MSE_rel  = mean(((A - F) / A)^2)
    MAE_rel  = mean(|A - F| / |A|)
    RMSE_rel = sqrt(MSE_rel)
Samples with |A_t| < epsilon are skipped (and counted) for the relative
family only. The absolute family uses A - F directly over all samples.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import DataError

DEFAULT_BINS = 40
DEFAULT_BANDS = (0.002, 0.005, 0.010)

METRIC_NAMES = ("mse_rel", "mae_rel", "rmse_rel", "mape", "mse_abs", "mae_abs", "rmse_abs")


@dataclass
class EvalReport:
    horizon: int
    mse_rel: float
    mae_rel: float
    rmse_rel: float
    mape: float
    mse_abs: float
    mae_abs: float
    rmse_abs: float
    n_samples: int
    n_skipped: int
    edges: np.ndarray
    counts: np.ndarray
    band_shares: Dict[float, float] = field(default_factory=dict)
    label: str = ""

    def metrics(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_keyvalue(self) -> str:
        """One ``key=value`` line per field, stable order, for diffing."""
        lines = [f"label={self.label}", f"horizon={self.horizon}"]
        lines += [f"{k}={v!r}" for k, v in self.metrics().items()]
        lines += [f"n_samples={self.n_samples}", f"n_skipped={self.n_skipped}"]
        lines += [f"band_share[{b!r}]={s!r}" for b, s in sorted(self.band_shares.items())]
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        rows = [("model", self.label or "-"), ("horizon (h)", str(self.horizon))]
        rows += [(k.upper(), f"{v:.6g}") for k, v in self.metrics().items()]
        rows += [("samples", str(self.n_samples)), ("skipped (|A|<eps)", str(self.n_skipped))]
        rows += [(f"|error| <= {b:g}", f"{100 * s:.1f}%") for b, s in sorted(self.band_shares.items())]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"

    def histogram_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"lower": self.edges[:-1], "upper": self.edges[1:], "count": self.counts})


def histogram(errors: Sequence[float], bins: int = DEFAULT_BINS) -> Tuple[np.ndarray, np.ndarray]:
    """
    Uniform bins over [min, max]. A value on an interior edge falls in the
    lower bin; the global minimum lands in the first bin and the maximum in
    the last.
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise DataError("histogram of an empty error sequence")
    if bins < 1:
        raise DataError(f"bins must be >= 1, got {bins}")
    lo, hi = float(e.min()), float(e.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    index = np.clip(np.searchsorted(edges, e, side="left") - 1, 0, bins - 1)
    counts = np.bincount(index, minlength=bins)
    return edges, counts


def error_band_share(errors: Sequence[float], low: float, high: float) -> float:
    """Fraction of errors inside the closed band [low, high]."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise DataError("error_band_share of an empty error sequence")
    return float(np.mean((e >= low) & (e <= high)))


def evaluate(
    actual: Sequence[float],
    predicted: Sequence[float],
    epsilon: float = 1e-8,
    horizon: int = 1,
    bins: int = DEFAULT_BINS,
    bands: Sequence[float] = DEFAULT_BANDS,
    label: str = "",
) -> EvalReport:
    a = np.asarray(actual, dtype=np.float64)
    f = np.asarray(predicted, dtype=np.float64)
    if a.size == 0:
        raise DataError("evaluate needs at least one sample")
    if a.shape != f.shape:
        raise DataError(f"actual and predicted lengths differ: {a.shape} vs {f.shape}")

    errors = a - f
    keep = np.abs(a) >= epsilon
    if keep.any():
        rel = errors[keep] / a[keep]
        mse_rel = float(np.mean(rel * rel))
        mae_rel = float(np.mean(np.abs(rel)))
    else:
        mse_rel = mae_rel = 0.0
    mse_abs = float(np.mean(errors * errors))
    edges, counts = histogram(errors, bins)
    return EvalReport(
        horizon=horizon,
        mse_rel=mse_rel,
        mae_rel=mae_rel,
        rmse_rel=math.sqrt(mse_rel),
        mape=100.0 * mae_rel,
        mse_abs=mse_abs,
        mae_abs=float(np.mean(np.abs(errors))),
        rmse_abs=math.sqrt(mse_abs),
        n_samples=int(a.size),
        n_skipped=int((~keep).sum()),
        edges=edges,
        counts=counts,
        band_shares={b: error_band_share(errors, -b, b) for b in bands},
        label=label,
    )
