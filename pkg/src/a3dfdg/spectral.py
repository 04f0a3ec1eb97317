"""3D Fourier amplitude/phase analysis and low-frequency style mixing.

Spectra are kept in the centre-shifted layout, DC at ``(H//2, W//2, D//2)``.
A style is the amplitude of the centred low-frequency block whose half-width
along an axis of length ``n`` is ``floor(beta * n)``; phase never leaves the
client.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .volume import SubVolume, air_mask

Beta = Tuple[float, float, float]

DEFAULT_BETA: Beta = (0.01, 0.01, 0.05)

# absorbs float32 rounding of beta (0.01 -> 0.0099999998) before flooring
_BETA_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class Spectrum3D:
    amplitude: np.ndarray
    phase: np.ndarray

    @property
    def shape(self):
        return self.amplitude.shape


@dataclass(frozen=True, eq=False)
class StyleSpectrum:
    block: np.ndarray
    beta: Beta
    source_shape: Tuple[int, int, int]
    # slice score of the crop the style came from (kept for bin audits)
    slice_score: Optional[float] = None
    source: str = ""

    def __eq__(self, other):
        if not isinstance(other, StyleSpectrum):
            return NotImplemented
        return (
            self.beta == other.beta
            and self.source_shape == other.source_shape
            and self.slice_score == other.slice_score
            and self.block.shape == other.block.shape
            and self.block.dtype == other.block.dtype
            and np.array_equal(self.block, other.block)
        )


def half_widths(beta: Beta, shape) -> Tuple[int, int, int]:
    if len(beta) != 3 or any(b <= 0 for b in beta):
        raise ValueError(f"beta must be three positive fractions, got {beta}")
    return tuple(int(math.floor(b * n + _BETA_EPS)) for b, n in zip(beta, shape))


def block_shape(beta: Beta, shape) -> Tuple[int, int, int]:
    return tuple(2 * r + 1 for r in half_widths(beta, shape))


def band_slices(beta: Beta, shape) -> Tuple[slice, slice, slice]:
    """Index of the centred low-frequency block inside a shifted spectrum."""
    out = []
    for r, n in zip(half_widths(beta, shape), shape):
        c = n // 2
        if c - r < 0 or c + r + 1 > n:
            raise ValueError(f"beta={beta} gives a band wider than spectrum shape {tuple(shape)}")
        out.append(slice(c - r, c + r + 1))
    return tuple(out)


@dataclass(frozen=True)
class BandMask:
    beta: Beta
    shape: Tuple[int, int, int]

    def array(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=np.float32)
        mask[band_slices(self.beta, self.shape)] = 1.0
        return mask


def fft3(sv) -> Spectrum3D:
    """Centre-shifted amplitude and phase of the 3D DFT of a (sub-)volume."""
    data = np.asarray(sv) if isinstance(sv, np.ndarray) else np.asarray(getattr(sv, "data", sv))
    f = np.fft.fftshift(np.fft.fftn(data.astype(np.float64)))
    return Spectrum3D(np.abs(f), np.angle(f))


def ifft3(spec: Spectrum3D) -> np.ndarray:
    """Real part of the inverse transform of ``amplitude * exp(i * phase)``."""
    if spec.amplitude.shape != spec.phase.shape:
        raise ValueError(f"amplitude shape {spec.amplitude.shape} != phase shape {spec.phase.shape}")
    f = spec.amplitude * np.exp(1j * spec.phase)
    return np.real(np.fft.ifftn(np.fft.ifftshift(f))).astype(np.float32)


def extract_style(spec: Spectrum3D, beta: Beta = DEFAULT_BETA) -> StyleSpectrum:
    beta = tuple(float(b) for b in beta)
    block = spec.amplitude[band_slices(beta, spec.shape)].astype(np.float32)
    return StyleSpectrum(block, beta, tuple(spec.shape))


def mix_styles(source: StyleSpectrum, target: StyleSpectrum, alpha: float) -> StyleSpectrum:
    """``alpha * source + (1 - alpha) * target``, element-wise."""
    if source.block.shape != target.block.shape:
        raise ValueError(f"style block shapes differ: {source.block.shape} vs {target.block.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    src = source.block.astype(np.float64)
    tgt = target.block.astype(np.float64)
    return replace(source, block=alpha * src + (1.0 - alpha) * tgt)


def _betas_match(a: Beta, b: Beta) -> bool:
    return all(math.isclose(x, y, rel_tol=1e-6, abs_tol=1e-9) for x, y in zip(a, b))


def apply_style(
    sv: SubVolume,
    target: StyleSpectrum,
    alpha: float,
    beta: Beta = DEFAULT_BETA,
    tau_air: Optional[float] = -200.0,
) -> SubVolume:
    """Re-render ``sv`` with its low-frequency amplitude mixed toward ``target``.

    Amplitude outside the band and the full phase are kept.  Voxels that were
    below ``tau_air`` in the input get their original value back after the
    inverse transform; pass ``tau_air=None`` to skip that refinement.
    """
    if tuple(target.source_shape) != tuple(sv.shape):
        raise ValueError(f"style was extracted from shape {target.source_shape}, sub-volume is {sv.shape}")
    if not _betas_match(target.beta, beta):
        raise ValueError(f"style beta {target.beta} does not match requested beta {beta}")
    band = band_slices(beta, sv.shape)
    expected = tuple(s.stop - s.start for s in band)
    if target.block.shape != expected:
        raise ValueError(f"style block shape {target.block.shape} does not match band {expected}")
    spec = fft3(sv)
    # source block stays float64; only banked styles are float32
    source = StyleSpectrum(spec.amplitude[band], target.beta, tuple(sv.shape))
    mixed = mix_styles(source, target, alpha)
    amplitude = spec.amplitude.copy()
    amplitude[band] = mixed.block
    out = ifft3(Spectrum3D(amplitude, spec.phase))
    if tau_air is not None:
        air = air_mask(sv, tau_air)
        out[air] = sv.data[air]
    return replace(sv, data=out)
