# wavelet.py
"""
Orthogonal discrete wavelet analysis / synthesis (Mallat pyramid).

Two boundary extensions are supported:

- ``symmetric``: half-sample reflection, ``(n + F - 1) // 2`` coefficients
  per level. Redundant near the edges but perfectly reconstructing.
- ``periodic``: circular wrap (odd lengths padded with their last sample),
  ``ceil(n / 2)`` coefficients per level. Strictly orthogonal, so signal
  energy equals coefficient energy.

Detail lists are ordered finest first: ``details[0]`` is level 1.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .config import WaveletConfig
from .errors import ConfigError, DataError

logger = logging.getLogger("stemcast.wavelet")

MAD_TO_SIGMA = 0.6745


@dataclass(frozen=True)
class WaveletFilterBank:
    name: str
    analysis_lowpass: np.ndarray
    analysis_highpass: np.ndarray
    synthesis_lowpass: np.ndarray
    synthesis_highpass: np.ndarray

    @property
    def length(self) -> int:
        return len(self.analysis_lowpass)

    @classmethod
    def from_scaling_filter(cls, name: str, h) -> "WaveletFilterBank":
        """Build the four filters from the scaling (synthesis lowpass) filter."""
        h = np.asarray(h, dtype=np.float64)
        signs = np.array([(-1.0) ** (k + 1) for k in range(len(h))])
        analysis_highpass = signs * h
        return cls(
            name=name,
            analysis_lowpass=h[::-1].copy(),
            analysis_highpass=analysis_highpass,
            synthesis_lowpass=h.copy(),
            synthesis_highpass=analysis_highpass[::-1].copy(),
        )


def check_filter_bank(bank: WaveletFilterBank, tol: float = 1e-12) -> None:
    """Raise ConfigError unless the orthogonal filter-bank identities hold."""
    lo, hi = bank.analysis_lowpass, bank.analysis_highpass
    if abs(lo.sum() - math.sqrt(2.0)) > tol:
        raise ConfigError(f"{bank.name}: lowpass sums to {lo.sum()!r}, expected sqrt(2)")
    if abs(hi.sum()) > tol:
        raise ConfigError(f"{bank.name}: highpass sums to {hi.sum()!r}, expected 0")
    if abs(np.dot(lo, lo) - 1.0) > tol:
        raise ConfigError(f"{bank.name}: lowpass is not unit norm")
    for shift in range(2, bank.length, 2):
        overlap = float(np.dot(lo[:-shift], lo[shift:]))
        if abs(overlap) > tol:
            raise ConfigError(f"{bank.name}: lowpass not orthogonal to its shift by {shift} ({overlap!r})")
    mirror = np.array([(-1.0) ** (k + 1) for k in range(bank.length)]) * bank.synthesis_lowpass
    if np.max(np.abs(mirror - hi)) > tol:
        raise ConfigError(f"{bank.name}: highpass is not the quadrature mirror of the lowpass")


_SQRT2 = math.sqrt(2.0)
_SQRT3 = math.sqrt(3.0)

FILTER_BANKS: Dict[str, WaveletFilterBank] = {
    "db1": WaveletFilterBank.from_scaling_filter("db1", [1 / _SQRT2, 1 / _SQRT2]),
    "db2": WaveletFilterBank.from_scaling_filter(
        "db2",
        [
            (1 + _SQRT3) / (4 * _SQRT2),
            (3 + _SQRT3) / (4 * _SQRT2),
            (3 - _SQRT3) / (4 * _SQRT2),
            (1 - _SQRT3) / (4 * _SQRT2),
        ],
    ),
}
FILTER_BANKS["haar"] = FILTER_BANKS["db1"]


def get_filter_bank(name: str) -> WaveletFilterBank:
    key = name.lower()
    if key.startswith(("coif", "sym")):
        raise ConfigError(f"Wavelet family '{name}' is not available; use one of {sorted(FILTER_BANKS)}")
    if key not in FILTER_BANKS:
        raise ConfigError(f"Unknown wavelet '{name}'. Choose from {sorted(FILTER_BANKS)}")
    bank = FILTER_BANKS[key]
    check_filter_bank(bank)
    return bank


@dataclass
class DecompositionResult:
    approximation: np.ndarray
    details: List[np.ndarray]
    levels: int
    original_length: int
    extension_mode: str
    lengths: List[int] = field(default_factory=list)

    def coefficients(self) -> List[np.ndarray]:
        """Pyramid in coarse-to-fine order: S_J, D_J, ..., D_1."""
        return [self.approximation] + list(reversed(self.details))


def coefficient_count(n: int, filter_length: int, mode: str) -> int:
    if mode == "periodic":
        return (n + 1) // 2
    return (n + filter_length - 1) // 2


def _symmetric_index(idx: np.ndarray, n: int) -> np.ndarray:
    m = np.mod(idx, 2 * n)
    return np.where(m >= n, 2 * n - 1 - m, m)


def _check_mode(mode: str) -> None:
    if mode not in ("symmetric", "periodic"):
        raise ConfigError(f"Unknown extension mode '{mode}'")


def _tap_index(n: int, F: int, mode: str) -> np.ndarray:
    """(coefficients, F) signal positions read by each analysis coefficient."""
    if mode == "periodic":
        size = n + n % 2
        k = np.arange(size // 2)
        idx = np.mod(2 * k[:, None] + 1 - np.arange(F)[None, :], size)
        # odd lengths are padded with a copy of the last sample
        return np.minimum(idx, n - 1)
    k = np.arange(coefficient_count(n, F, mode))
    return _symmetric_index(2 * k[:, None] + 1 - np.arange(F)[None, :], n)


def finest_detail_operator(n: int, bank: WaveletFilterBank, mode: str = "symmetric") -> np.ndarray:
    """Matrix D with ``D @ x == dwt_level(x)[1]`` for signals of length ``n``."""
    _check_mode(mode)
    idx = _tap_index(n, bank.length, mode)
    op = np.zeros((len(idx), n))
    np.add.at(op, (np.arange(len(idx))[:, None], idx), bank.analysis_highpass[None, :])
    return op


def dwt_level(signal, bank: WaveletFilterBank, mode: str = "symmetric"):
    """One analysis step: filter with the analysis pair and keep every second sample."""
    _check_mode(mode)
    x = np.asarray(signal, dtype=np.float64)
    n, F = len(x), bank.length
    if n < F:
        raise DataError(f"Signal of length {n} is shorter than the {bank.name} filter ({F} taps)")

    taps = x[_tap_index(n, F, mode)]
    return taps @ bank.analysis_lowpass, taps @ bank.analysis_highpass


def idwt_level(approx, detail, bank: WaveletFilterBank, target_length: int, mode: str = "symmetric") -> np.ndarray:
    """One synthesis step: upsample by 2, filter with the synthesis pair, sum, crop."""
    _check_mode(mode)
    a = np.asarray(approx, dtype=np.float64)
    d = np.asarray(detail, dtype=np.float64)
    F = bank.length
    expected = coefficient_count(target_length, F, mode)
    if len(a) != len(d) or len(a) != expected:
        raise DataError(
            f"Coefficient lengths ({len(a)}, {len(d)}) do not match a {mode} "
            f"level of length {target_length} (expected {expected})"
        )

    if mode == "periodic":
        size = 2 * len(a)
        k = np.arange(len(a))
        idx = np.mod(2 * k[:, None] + 1 - np.arange(F)[None, :], size)
        out = np.zeros(size)
        np.add.at(out, idx, a[:, None] * bank.analysis_lowpass[None, :] + d[:, None] * bank.analysis_highpass[None, :])
        return out[:target_length]

    up_a = np.zeros(2 * len(a))
    up_d = np.zeros(2 * len(d))
    up_a[::2] = a
    up_d[::2] = d
    full = np.convolve(up_a, bank.synthesis_lowpass) + np.convolve(up_d, bank.synthesis_highpass)
    return full[F - 2 : F - 2 + target_length]


def max_levels(n: int, bank: WaveletFilterBank, mode: str = "symmetric") -> int:
    levels = 0
    while n >= bank.length:
        n = coefficient_count(n, bank.length, mode)
        levels += 1
    return levels


def decompose(signal, bank: WaveletFilterBank, levels: int = 2, mode: str = "symmetric") -> DecompositionResult:
    x = np.asarray(signal, dtype=np.float64)
    if levels < 1:
        raise ConfigError(f"levels must be >= 1, got {levels}")
    if levels > max_levels(len(x), bank, mode):
        raise DataError(f"{len(x)} samples are too few for {levels} {bank.name} levels")

    lengths, details = [], []
    approx = x
    for _ in range(levels):
        lengths.append(len(approx))
        approx, detail = dwt_level(approx, bank, mode)
        details.append(detail)
    return DecompositionResult(
        approximation=approx,
        details=details,
        levels=levels,
        original_length=len(x),
        extension_mode=mode,
        lengths=lengths,
    )


def reconstruct(dec: DecompositionResult, bank: WaveletFilterBank) -> np.ndarray:
    if len(dec.details) != dec.levels or len(dec.lengths) != dec.levels:
        raise DataError(f"Decomposition claims {dec.levels} levels but holds {len(dec.details)} detail sets")
    if dec.levels and dec.lengths[0] != dec.original_length:
        raise DataError("Decomposition level lengths are corrupted")
    approx = dec.approximation
    for level in reversed(range(dec.levels)):
        approx = idwt_level(approx, dec.details[level], bank, dec.lengths[level], dec.extension_mode)
    return approx


# ---------------------------------------------------------
# Shrinkage
# ---------------------------------------------------------
def universal_threshold(finest_detail, n: int) -> float:
    sigma = np.median(np.abs(finest_detail)) / MAD_TO_SIGMA
    return float(sigma * math.sqrt(2.0 * math.log(n)))


def soft_threshold(values, threshold: float) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - threshold, 0.0)


def hard_threshold(values, threshold: float) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.where(np.abs(v) > threshold, v, 0.0)


def denoise(
    signal,
    bank: WaveletFilterBank,
    levels: int = 2,
    rule: str = "soft_universal",
    mode: str = "symmetric",
) -> np.ndarray:
    """Suppress high-frequency detail and resynthesize a signal of the same length."""
    x = np.asarray(signal, dtype=np.float64)
    if len(x) < 2 * bank.length:
        raise DataError(f"denoise needs at least {2 * bank.length} samples, got {len(x)}")
    if np.ptp(x) == 0:
        return x.copy()

    dec = decompose(x, bank, levels, mode)
    if rule == "zero_finest":
        # orthogonal projection onto signals with no finest detail, so a second pass is a no-op
        op = finest_detail_operator(len(x), bank, mode)
        return x - np.linalg.lstsq(op, op @ x, rcond=None)[0]
    if rule in ("soft_universal", "hard_universal"):
        t = universal_threshold(dec.details[0], len(x))
        shrink = soft_threshold if rule == "soft_universal" else hard_threshold
        dec.details = [shrink(d, t) for d in dec.details]
        logger.debug("universal threshold %.6g over %d samples", t, len(x))
    else:
        raise ConfigError(f"Unknown denoise rule '{rule}'")
    return reconstruct(dec, bank)


def denoise_with(signal, config: WaveletConfig) -> np.ndarray:
    return denoise(signal, get_filter_bank(config.family), config.levels, config.rule, config.extension)
