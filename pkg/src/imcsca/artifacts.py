"""Measurement degradation: oscilloscope downsampling and probe noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .powersim import PowerTrace


class ResampleError(ValueError):
    pass


@dataclass
class ArtifactSpec:
    noise_std: float = 0.0        # W
    target_rate: float = None     # Sa/s, None keeps the source rate
    rng_seed: int = 0
    noise_after_resample: bool = True  # scope digitizes a noisy analog signal

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def add_gaussian_noise(trace: PowerTrace, noise_std, seed) -> PowerTrace:
    """Sample-wise i.i.d. Gaussian noise; negative results are kept (signed probe)."""
    if noise_std == 0:
        return PowerTrace(trace.tile_id, trace.sample_rate, trace.samples.copy())
    rng = np.random.default_rng(seed)
    noisy = trace.samples + rng.normal(0.0, noise_std, trace.samples.size)
    return PowerTrace(trace.tile_id, trace.sample_rate, noisy)


def resample(trace: PowerTrace, target_rate) -> PowerTrace:
    """Bin-mean decimation to an evenly dividing lower rate.

    Models a bandwidth-limited scope; the trailing partial bin is zero-padded
    so total energy (sum/rate) is preserved exactly up to rounding.
    """
    src = trace.sample_rate
    if target_rate == src:
        return PowerTrace(trace.tile_id, src, trace.samples.copy())
    if target_rate <= 0 or src % target_rate != 0:
        divisors = [src / k for k in (1, 2, 5, 10, 20, 50, 100) if src % (src / k) == 0]
        raise ResampleError(
            f"target rate {target_rate:g} does not divide source {src:g}; "
            f"valid examples: {', '.join('%g' % d for d in divisors)}")
    f = int(src // target_rate)
    x = trace.samples
    n_out = -(-x.size // f)
    pad = n_out * f - x.size
    if pad:
        x = np.concatenate([x, np.zeros(pad)])
    out = x.reshape(n_out, f).mean(axis=1)
    return PowerTrace(trace.tile_id, float(target_rate), out)


def apply_artifacts(trace: PowerTrace, spec: ArtifactSpec) -> PowerTrace:
    """Degrade one trace; the noise seed is mixed with the tile id so tiles
    get independent noise while the whole run stays deterministic."""
    rng_seed = np.random.SeedSequence([spec.rng_seed, trace.tile_id])
    out = trace
    if spec.noise_after_resample:
        if spec.target_rate:
            out = resample(out, spec.target_rate)
        out = add_gaussian_noise(out, spec.noise_std, rng_seed)
    else:
        out = add_gaussian_noise(out, spec.noise_std, rng_seed)
        if spec.target_rate:
            out = resample(out, spec.target_rate)
    return out
