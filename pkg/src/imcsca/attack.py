"""Architecture extraction from per-tile power traces.

The adversary sees nothing but the trace files and the public tile hardware
parameters. Extraction runs in stages:

  1. per-tile analog-read windows (spike + stable plateau) and the timing
     features derived from them: start time, VMM count, conversions per ADC,
     mean stable-read power;
  2. grouping tiles into layers by start time and typing them by VMM count;
  3. column usage -> output channel/feature size (ADC conversion counts);
  4. row usage -> kernel size / fc input size (stable-power ratios);
  5. pooling between layers from shape consistency plus the digital delay it
     causes.

Window detection has two tiers. The direct tier thresholds a lightly
smoothed trace and fits the surviving runs to a periodic grid. When noise or
a coarse sample rate buries individual windows, conv-layer tiles are rescued
through their repetition: activity bounds from a mean-corrected cumulative
sum, the event period from autocorrelation snapped to the hardware timing
grid, and power from the folded profile. FC tiles execute once per
inference, offer no repetition to average over, and are the first to fail.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np


class AttackError(RuntimeError):
    """Extraction cannot proceed (the Fail outcome)."""


class FeatureExtractionError(AttackError):
    pass


class AmbiguityError(AttackError):
    pass


@dataclass
class HwKnowledge:
    """Public tile hardware parameters plus detector knobs.

    Mirrors only what a datasheet-level adversary holds: array geometry, ADC
    configuration and clocking. No mapping, no weights.
    """
    array_rows: int = 128
    array_cols: int = 128
    adc_count: int = 4
    adc_bits: int = 8
    cells_per_weight: int = 2
    serial_clock_hz: float = 50e6
    digital_clock_hz: float = 500e6
    adc_step_time: float = 2e-9
    settle_time: float = 4e-9
    input_bits: int = 8
    input_width: int = 32            # public: the dataset is known
    kernel_candidates: tuple = (1, 3, 5, 7)
    # detector knobs
    threshold_sigma: float = 4.0
    threshold_floor_frac: float = 0.45
    min_plateau_samples: int = 2
    min_rescue_periods: int = 24

    @property
    def max_pairs_per_adc(self):
        return self.array_cols // (2 * self.adc_count)

    @property
    def conversion_time(self):
        return self.adc_bits * self.adc_step_time


@dataclass
class TileFeatures:
    tile_id: int
    start_time: float            # s
    vmm_count: int
    adc_exec_count: int          # conversions per ADC per input bit
    mean_analog_power: float     # W over stable-read windows; nan if unresolvable
    n_windows: int
    period: float                # s between analog reads
    rescued: bool = False
    notes: list = field(default_factory=list)


@dataclass
class LayerGroup:
    kind: str                    # "conv" | "fc"
    tiles: list                  # TileFeatures, tile-id order
    start_time: float
    end_time: float


@dataclass
class ExtractedLayer:
    kind: str
    out_size: int = None         # channels (conv) / features (fc)
    kernel: int = None
    stride: int = None
    padding: int = None
    in_features: int = None      # fc only, when row structure resolves it
    vmm_count: int = None
    n_tiles: int = 0
    provenance: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)


@dataclass
class ExtractedPooling:
    after_index: int             # index into ExtractedArchitecture.layers
    size: int
    candidates: list = field(default_factory=list)   # (pad, stride, in_size, pool)
    delay_corroborated: bool = False
    provenance: str = "alg4"


@dataclass
class ExtractedArchitecture:
    layers: list = field(default_factory=list)       # ExtractedLayer
    pools: list = field(default_factory=list)        # ExtractedPooling
    notes: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# stage 1: windows and per-tile features
# ---------------------------------------------------------------------------

def _moving_mean(x, k):
    if k <= 1:
        return x
    c = np.concatenate([[0.0], np.cumsum(x)])
    return (c[k:] - c[:-k]) / k


def _runs(mask):
    """(start, length) pairs of True runs."""
    if not mask.any():
        return np.empty((0, 2), dtype=np.int64)
    d = np.diff(mask.astype(np.int8))
    starts = np.flatnonzero(d == 1) + 1
    ends = np.flatnonzero(d == -1) + 1
    if mask[0]:
        starts = np.concatenate([[0], starts])
    if mask[-1]:
        ends = np.concatenate([ends, [mask.size]])
    return np.stack([starts, ends - starts], axis=1)


class _Analysis:
    """Everything the detector learned about one trace."""

    def __init__(self):
        self.windows = []        # (start, end) sample indices of stable reads
        self.t0 = None           # first window start, samples
        self.period = None       # samples, float
        self.n_total = None
        self.adc_slots = None
        self.mean_power = math.nan
        self.rescued = False
        self.plateau_candidates = 0
        self.notes = []


def _idle_stats(x, rate):
    n = max(16, min(int(1e-6 * rate), x.size // 4))
    seg = x[:n]
    return float(seg.mean()), float(seg.std()), n


def _grid_fit(starts, hw, rate):
    """Fit candidate window starts to a periodic grid.

    Returns (t0, period, n_total, kept_starts) or None when inconsistent.
    """
    if len(starts) < 2:
        return None
    diffs = np.diff(starts)
    t_est = float(np.median(diffs))
    if t_est <= 0:
        return None
    tol = max(2.0, 0.1 * t_est)
    ref = starts[len(starts) // 2]
    k = np.round((starts - ref) / t_est).astype(np.int64)
    resid = starts - (ref + k * t_est)
    keep = np.abs(resid) <= tol
    if keep.sum() < max(2, int(0.5 * len(starts))):
        return None
    ks, ss = k[keep], starts[keep]
    # refine period by least squares over the kept grid indices
    if ks.max() > ks.min():
        t_ref = float(np.polyfit(ks, ss, 1)[0])
    else:
        return None
    k2 = np.round((starts - ss[0]) / t_ref).astype(np.int64)
    resid2 = starts - (ss[0] + k2 * t_ref)
    keep2 = np.abs(resid2) <= tol
    ks2 = k2[keep2]
    t0 = float(ss[0] + ks2.min() * t_ref)
    n_total = int(ks2.max() - ks2.min() + 1)
    return t0, t_ref, n_total, starts[keep2]


def _snap_bits(n, bits):
    m = max(1, int(round(n / bits)))
    return m * bits


def _slots_from_period(period_s, hw, rate):
    n = (period_s - hw.settle_time) / hw.conversion_time
    slots = int(round(n))
    if not 1 <= slots <= hw.max_pairs_per_adc:
        return None
    if abs(period_s - hw.settle_time - slots * hw.conversion_time) > \
            max(0.15 * hw.conversion_time, 2.0 / rate):
        return None
    return slots


def _folded_profile(x, t0, period, n):
    """Average profile over n periods starting at t0 (period may be float)."""
    p = int(round(period))
    if p < 1:
        return None
    starts = np.round(t0 + period * np.arange(n)).astype(np.int64)
    starts = starts[(starts >= 0) & (starts + p < x.size)]
    if starts.size == 0:
        return None
    prof = x[starts[:, None] + np.arange(p)[None, :]].mean(axis=0)
    return prof


def _plateau_phase(profile, w):
    """Start of the best sustained-high region (rolling-min matched to width)."""
    if profile is None or profile.size < w + 1:
        return None
    roll = np.lib.stride_tricks.sliding_window_view(profile, w).min(axis=1)
    return int(np.argmax(roll))


def _plateau_power(x, t0, period, n, settle_bins):
    w = max(2, int(round(0.8 * settle_bins)))
    prof = _folded_profile(x, t0, period, n)
    ph = _plateau_phase(prof, w)
    if ph is None:
        return math.nan
    pad = max(0, w // 4)
    seg = prof[ph + pad: ph + w - pad]
    if seg.size == 0:
        seg = prof[ph: ph + w]
    return float(seg.mean())


def _autocorr(seg):
    n = seg.size
    f = np.fft.rfft(seg - seg.mean(), n=2 * n)
    return np.fft.irfft(f * np.conj(f))[:n]


def _activity_bounds(x):
    """Changepoints of the mean-shift via global-mean-corrected cumulative sum."""
    c = np.cumsum(x - x.mean())
    a = int(np.argmin(c))
    b = int(np.argmax(c))
    if b <= a:
        return None
    return a, b


def _rescue(x, hw, rate, an: _Analysis):
    """Periodicity-based recovery for tiles with many repeated reads."""
    bounds = _activity_bounds(x)
    if bounds is None:
        raise FeatureExtractionError("no activity found")
    a, b = bounds
    settle_bins = hw.settle_time * rate
    t_min = (hw.settle_time + hw.conversion_time) * rate * 0.8
    t_max = (hw.settle_time + hw.max_pairs_per_adc * hw.conversion_time) * rate * 1.25
    if (b - a) < hw.min_rescue_periods * t_min:
        raise FeatureExtractionError("activity too short for periodicity analysis")
    seg = x[a:b]
    ac = _autocorr(seg)
    lag_lo, lag_hi = int(t_min), min(int(t_max) + 1, ac.size - 1)
    if lag_hi <= lag_lo + 2:
        raise FeatureExtractionError("trace too short for period search")
    window = ac[lag_lo:lag_hi]
    noise_level = float(np.median(np.abs(window - np.median(window))))
    best = None
    for slots in range(1, hw.max_pairs_per_adc + 1):
        lag_c = (hw.settle_time + slots * hw.conversion_time) * rate
        w0 = max(lag_lo, int(lag_c - 0.4 * hw.conversion_time * rate))
        w1 = min(lag_hi, int(lag_c + 0.4 * hw.conversion_time * rate) + 1)
        if w1 <= w0:
            continue
        i = w0 + int(np.argmax(ac[w0:w1]))
        score = ac[i]
        if best is None or score > best[0]:
            best = (score, slots, i)
    if best is None or (noise_level <= 0 and best[0] <= 0):
        raise FeatureExtractionError("no periodic structure")
    score, slots, lag = best
    if noise_level > 0 and score < 6 * noise_level:
        raise FeatureExtractionError("periodic structure below noise floor")
    period = _parabolic_peak(ac, lag)
    # harmonic refinement: a peak m periods out pins the period m times harder
    m = min(16, int((b - a) / period / 4))
    if m >= 2:
        lag_m = int(round(m * period))
        if lag_m + 2 < ac.size:
            w = int(0.5 * hw.conversion_time * rate) + 2
            w0, w1 = max(1, lag_m - w), min(ac.size - 1, lag_m + w + 1)
            j = w0 + int(np.argmax(ac[w0:w1]))
            period = _parabolic_peak(ac, j) / m
    slots = _slots_from_period(period / rate, hw, rate)
    if slots is None:
        raise FeatureExtractionError(
            "periodic structure does not sit on the conversion timing grid")
    if (b - a) / period < hw.min_rescue_periods:
        raise FeatureExtractionError("too few repetitions for the periodic grid")
    n_total = _snap_bits((b - a) / period, hw.input_bits)
    if n_total < hw.input_bits:
        raise FeatureExtractionError("fewer than one input of analog reads")
    # align the window grid on the folded plateau
    prof = _folded_profile(x, a, period, min(n_total, int((b - a) / period)))
    w = max(2, int(round(0.8 * settle_bins))) if settle_bins >= hw.min_plateau_samples \
        else max(2, int(round(period / 8)))
    ph = _plateau_phase(prof, w)
    if ph is None:
        raise FeatureExtractionError("folded profile has no stable region")
    an.rescued = True
    an.notes.append("recovered from repetition (autocorrelation grid)")
    return _finalize(an, x, a + ph, period, n_total, slots, settle_bins, hw)


def _parabolic_peak(ac, i):
    if 1 <= i < ac.size - 1:
        y0, y1, y2 = ac[i - 1], ac[i], ac[i + 1]
        denom = y0 - 2 * y1 + y2
        if denom != 0:
            return i + 0.5 * (y0 - y2) / denom
    return float(i)


def _finalize(an: _Analysis, x, t0, period, n_total, slots, settle_bins, hw):
    an.t0, an.period = float(t0), float(period)
    an.n_total, an.adc_slots = int(n_total), slots
    if settle_bins >= hw.min_plateau_samples:
        an.mean_power = _plateau_power(x, t0, period, n_total, settle_bins)
    else:
        an.mean_power = math.nan
        an.notes.append("stable window shorter than one sample; power unresolved")
    sb = max(1, int(round(settle_bins)))
    starts = np.round(t0 + period * np.arange(n_total)).astype(np.int64)
    an.windows = [(int(s), int(s + sb)) for s in starts]
    return an


def _period_maxes(x, t0, period, n):
    starts = np.round(t0 + period * np.arange(n + 1)).astype(np.int64)
    out = np.zeros(n)
    for j in range(n):
        a, b = max(0, starts[j]), min(x.size, starts[j + 1])
        if b > a:
            out[j] = x[a:b].max()
    return out


def _extend_grid(x, t0, period, n):
    """Grow the event grid over adjacent periods that still show read activity.

    Analog reads whose input bits happen to be all zero have no stable-read
    plateau, but their conversion combs still spike; boundary events lost to
    the plateau detector are recovered from that evidence. The peak criterion
    keeps the low flat interlayer logic windows from being swallowed.
    """
    med = float(np.median(_period_maxes(x, t0, period, n))) if n else 0.0
    if med <= 0:
        return t0, n
    limit = max(8, n)
    grown = 0
    while grown < limit and t0 - period >= 0:
        seg = x[int(round(t0 - period)):int(round(t0))]
        if seg.size == 0 or seg.max() < 0.3 * med:
            break
        t0 -= period
        n += 1
        grown += 1
    grown = 0
    while grown < limit:
        a = int(round(t0 + n * period))
        b = int(round(t0 + (n + 1) * period))
        if b > x.size or a >= b:
            break
        if x[a:b].max() < 0.3 * med:
            break
        n += 1
        grown += 1
    return t0, n


_THETA_LADDER = (0.45, 0.2, 0.08, 0.03, 0.012, 0.005)


def _direct_grid(x, rate, hw, an, n_idle):
    """Tier 1: plateau runs over a descending threshold ladder + grid fit."""
    settle_bins = hw.settle_time * rate
    step_bins = hw.adc_step_time * rate
    k = max(1, min(int(round(settle_bins)), int(step_bins) // 2))
    y = _moving_mean(x, k)
    idle_y = y[:max(8, n_idle - k)]
    idle_m = float(idle_y.mean())
    theta_sig = idle_m + hw.threshold_sigma * float(idle_y.std())
    act = y[y > theta_sig + 1e-30]
    if act.size == 0:
        an.notes.append("no activity above the idle threshold")
        return None
    p_hi = float(np.percentile(act, 99))
    lo = max(hw.min_plateau_samples, min(int(round(0.3 * settle_bins)) + 1, k + 2,
                                         int(round(settle_bins))))
    hi = int(round(2.2 * settle_bins + 2 * k + 2))
    for frac in _THETA_LADDER:
        theta = max(theta_sig, idle_m + frac * (p_hi - idle_m))
        if theta <= 0:
            continue
        cand = _runs(y > theta)
        cand = cand[(cand[:, 1] >= lo) & (cand[:, 1] <= hi)]
        an.plateau_candidates = max(an.plateau_candidates, len(cand))
        if len(cand) < 2:
            continue
        fit = _grid_fit(cand[:, 0], hw, rate)
        if fit is None:
            continue
        t0, period, n_raw, kept = fit
        slots = _slots_from_period(period / rate, hw, rate)
        if slots is None:
            continue
        t0, n_ext = _extend_grid(x, t0, period, n_raw)
        n_total = _snap_bits(n_ext, hw.input_bits)
        if abs(n_ext - n_total) > max(1, 0.02 * n_total):
            continue
        if len(kept) < 0.25 * n_total:
            continue
        return _finalize(an, x, t0, period, n_total, slots, settle_bins, hw)
    return None


def _fc_hypothesis(x, rate, hw, an):
    """Tier 3: one input, merged events — duration pins the conversion count."""
    bounds = _activity_bounds(x)
    if bounds is None:
        return None
    a, b = bounds
    d = float(b - a)
    bits = hw.input_bits
    best = None
    for slots in range(1, hw.max_pairs_per_adc + 1):
        t_n = (hw.settle_time + slots * hw.conversion_time) * rate
        err = abs(d - bits * t_n)
        if best is None or err < best[0]:
            best = (err, slots, t_n)
    err, slots, t_n = best
    if err > 0.2 * hw.conversion_time * rate * bits:
        return None
    if an.plateau_candidates > bits:
        return None
    settle_bins = hw.settle_time * rate
    an.rescued = True  # start estimate carries changepoint uncertainty
    an.notes.append("single merged execution; conversion count from duration")
    return _finalize(an, x, a, d / bits, bits, slots, settle_bins, hw)


def _analyze(trace, hw: HwKnowledge) -> _Analysis:
    x = np.asarray(trace.samples, dtype=np.float64)
    rate = trace.sample_rate
    if x.size == 0:
        raise FeatureExtractionError("empty trace")
    an = _Analysis()
    if not np.any(x > 0):
        an.notes.append("all-idle trace")
        return an
    settle_bins = hw.settle_time * rate
    _, _, n_idle = _idle_stats(x, rate)

    if settle_bins >= hw.min_plateau_samples:
        out = _direct_grid(x, rate, hw, an, n_idle)
        if out is not None:
            return out
    # repetition rescue for long activities, then the one-shot fc reading
    try:
        return _rescue(x, hw, rate, an)
    except FeatureExtractionError as rescue_err:
        out = _fc_hypothesis(x, rate, hw, an)
        if out is not None:
            return out
        raise rescue_err


def detect_analog_ops(trace, hw: HwKnowledge):
    """Stable-read windows [(start, end) sample indices] in time order."""
    an = _analyze(trace, hw)
    return an.windows


def extract_features(trace, hw: HwKnowledge) -> TileFeatures:
    """Per-tile timing/power features; raises FeatureExtractionError on failure."""
    an = _analyze(trace, hw)
    if not an.windows:
        raise FeatureExtractionError(f"tile {trace.tile_id}: no analog-read windows found")
    if an.n_total % hw.input_bits != 0:
        raise FeatureExtractionError(
            f"tile {trace.tile_id}: {an.n_total} windows is not a whole number of "
            f"{hw.input_bits}-bit inputs")
    vmm = an.n_total // hw.input_bits
    if an.adc_slots is None:
        raise FeatureExtractionError(
            f"tile {trace.tile_id}: conversion count unresolved")
    rate = trace.sample_rate
    return TileFeatures(
        tile_id=trace.tile_id,
        start_time=an.t0 / rate,
        vmm_count=vmm,
        adc_exec_count=an.adc_slots,
        mean_analog_power=an.mean_power,
        n_windows=an.n_total,
        period=an.period / rate,
        rescued=an.rescued,
        notes=an.notes)


# ---------------------------------------------------------------------------
# stage 2: layer grouping and typing
# ---------------------------------------------------------------------------

def layer_property_extraction(features, hw: HwKnowledge):
    """Group tiles into layers by start time, type them by VMM count."""
    if not features:
        raise AttackError("no tile features")
    feats = sorted(features, key=lambda f: f.start_time)
    base_tol = 1.0 / hw.serial_clock_hz
    groups = [[feats[0]]]
    for prev, cur in zip(feats, feats[1:]):
        tol = base_tol
        if prev.rescued or cur.rescued:
            tol = max(tol, 3 * max(prev.period, cur.period))
        if cur.start_time - prev.start_time > tol:
            groups.append([cur])
        else:
            groups[-1].append(cur)
    out = []
    for g in groups:
        kinds = {("fc" if f.vmm_count == 1 else "conv") for f in g}
        if len(kinds) != 1:
            raise AmbiguityError(
                "tiles with equal start times disagree on layer type: "
                + ", ".join(f"tile {f.tile_id}: vmm={f.vmm_count}" for f in g))
        vmms = {f.vmm_count for f in g}
        if len(vmms) != 1:
            raise AmbiguityError(
                "tiles grouped into one layer executed different VMM counts: "
                + ", ".join(f"tile {f.tile_id}: {f.vmm_count}" for f in g))
        end = max(f.start_time + f.n_windows * f.period for f in g)
        out.append(LayerGroup(kind=kinds.pop(), tiles=sorted(g, key=lambda f: f.tile_id),
                              start_time=min(f.start_time for f in g), end_time=end))
    out.sort(key=lambda g: g.start_time)
    return out


# ---------------------------------------------------------------------------
# stage 3: column usage -> output sizes
# ---------------------------------------------------------------------------

def output_size_extraction(group: LayerGroup, hw: HwKnowledge):
    """Output channel/feature size from ADC conversion counts.

    Returns (out_size, note_or_None).
    """
    max_exec = hw.max_pairs_per_adc
    cols_per_weight = 2 * hw.cells_per_weight
    partials = [f for f in group.tiles if f.adc_exec_count < max_exec]
    n = len(group.tiles)
    if not partials:
        # every tile fully used: the grid split is invisible, assume one row
        out = n * hw.array_cols // cols_per_weight
        return out, "no partially mapped tile: exact multiple of %d assumed" % (
            hw.array_cols // cols_per_weight)
    counts = {f.adc_exec_count for f in partials}
    if len(counts) != 1:
        raise AmbiguityError(
            "partially mapped tiles disagree on conversion count: "
            + ", ".join(f"tile {f.tile_id}: {f.adc_exec_count}" for f in partials))
    if n % len(partials) != 0:
        raise AmbiguityError(
            f"{n} tiles cannot form a grid with {len(partials)} column-partial tiles")
    partial_cols = counts.pop() * 2 * hw.adc_count
    full_col_tiles = n // len(partials) - 1
    total_cols = full_col_tiles * hw.array_cols + partial_cols
    if total_cols % cols_per_weight != 0:
        raise AmbiguityError(f"mapped column count {total_cols} is not a whole "
                             f"number of {cols_per_weight}-column weights")
    return total_cols // cols_per_weight, None


# ---------------------------------------------------------------------------
# stage 4: row usage -> kernel size / fc input size
# ---------------------------------------------------------------------------

@dataclass
class RowStructure:
    grid_rows: int
    grid_cols: int
    total_rows: float = None     # estimated mapped rows, None when single-row
    ratio: float = None          # last-row power relative to a full row


def row_structure(group: LayerGroup, hw: HwKnowledge) -> RowStructure:
    """Grid layout and mapped-row estimate from per-tile power ratios."""
    max_exec = hw.max_pairs_per_adc
    partials = [f for f in group.tiles if f.adc_exec_count < max_exec]
    n = len(group.tiles)
    g_rows = len(partials) if partials else 1
    if n % g_rows != 0:
        raise AmbiguityError(f"{n} tiles do not divide into {g_rows} grid rows")
    g_cols = n // g_rows
    rs = RowStructure(grid_rows=g_rows, grid_cols=g_cols)
    if g_rows < 2:
        return rs
    powers = np.array([f.mean_analog_power for f in group.tiles])
    if np.any(~np.isfinite(powers)) or np.any(powers <= 0):
        raise FeatureExtractionError(
            "stable-read power unavailable for some tiles; row analysis impossible")
    cols = np.array([f.adc_exec_count * 2 * hw.adc_count for f in group.tiles])
    norm = powers / cols
    order = np.argsort(norm)[::-1]
    full_idx = order[:(g_rows - 1) * g_cols]
    last_idx = order[(g_rows - 1) * g_cols:]
    ref = powers[full_idx].sum() / (g_rows - 1)
    last = powers[last_idx].sum()
    if ref <= 0:
        raise FeatureExtractionError("reference row power vanishes")
    rs.ratio = float(last / ref)
    rs.total_rows = (g_rows - 1 + rs.ratio) * hw.array_rows
    return rs


def kernel_size_extraction(group: LayerGroup, c_in, hw: HwKnowledge):
    """Kernel size of a multi-tile-row conv layer from power ratios.

    Returns (K, warning_or_None). Scale-invariant: only power ratios enter.
    """
    rs = row_structure(group, hw)
    if rs.grid_rows < 2:
        raise AttackError("single tile row: use the first-layer shape search")
    r = rs.total_rows / c_in
    cands = np.array([k * k for k in hw.kernel_candidates], dtype=float)
    k = hw.kernel_candidates[int(np.argmin(np.abs(cands - r)))]
    raw = math.sqrt(max(r, 0.0))
    warn = None
    if abs(round(raw) ** 2 - r) < 1e-9 and round(raw) not in hw.kernel_candidates:
        warn = (f"estimated row count {rs.total_rows:.1f} suggests K={round(raw)}, "
                f"snapped to nearest candidate {k}")
    return k, warn


def kernel_size_extraction_first_layer(vmm_count, input_width, hw: HwKnowledge):
    """First-conv kernel via the output-shape relation, padding-free first.

    Returns (K, P, S, candidates). Candidates are (K, P, S) triples consistent
    with W_out = (W_in - K + 2P)/S + 1.
    """
    w_out = int(round(math.sqrt(vmm_count)))
    if abs(w_out * w_out - vmm_count) > max(1, 0.02 * vmm_count):
        raise AmbiguityError(
            f"VMM count {vmm_count} is not a square output feature map")
    cands = []
    for k in hw.kernel_candidates:
        for p in range(0, k):
            for s in range(1, 4):
                num = input_width - k + 2 * p
                if num >= 0 and num % s == 0 and num // s + 1 == w_out:
                    cands.append((k, p, s))
    pool = [c for c in cands if c[1] == 0] or cands
    kinds = {c[0] for c in pool}
    if len(kinds) != 1:
        raise AmbiguityError(
            f"kernel size ambiguous for output {w_out}x{w_out}: candidates "
            + ", ".join(f"K={k} P={p} S={s}" for k, p, s in cands))
    if not pool:
        raise AmbiguityError(f"no kernel size reproduces output {w_out}x{w_out}")
    k, p, s = pool[0]
    return k, p, s, cands


# ---------------------------------------------------------------------------
# stage 5: pooling
# ---------------------------------------------------------------------------

@dataclass
class _PrevConv:
    w_out: int
    c_out: int
    end_time: float


def pooling_detection(prev: _PrevConv, next_kind, hw: HwKnowledge,
                      next_start=None, next_kernel=None, next_w_out=None,
                      fc_in_features=None):
    """Pooling size between a conv layer and its successor.

    Conv successor: invert the shape relation over (P, S) candidates and keep
    integer pooling factors, preferring the one corroborated by the start-time
    delay that the digital pooling pass causes. FC successor: the input
    feature count has the form N^2 * C_out.
    """
    delay = None
    if next_start is not None:
        delay = next_start - prev.end_time
    delayed = delay is not None and delay > 3.0 / hw.serial_clock_hz

    if next_kind == "fc":
        if fc_in_features is None:
            # row count unknown: enumerate pool sizes consistent with the array
            cands = []
            for pool in range(1, prev.w_out + 1):
                if prev.w_out % pool:
                    continue
                n = prev.w_out // pool
                feats = n * n * prev.c_out
                if feats <= hw.array_rows:
                    cands.append((None, None, n, pool))
            if not cands:
                raise AmbiguityError("no pooling size fits the fc row budget")
            chosen = _prefer_by_delay(cands, delayed)
            return ExtractedPooling(after_index=-1, size=chosen[3],
                                    candidates=cands, delay_corroborated=delayed,
                                    provenance="alg4-fc (row count unresolved)")
        ratio = fc_in_features / prev.c_out
        n = math.sqrt(ratio)
        if n <= 0:
            raise AmbiguityError("fc input feature count inconsistent with conv output")
        pool = prev.w_out / n
        pool_i = max(1, int(round(pool)))
        if abs(pool - pool_i) > 0.2 or prev.w_out % pool_i:
            raise AmbiguityError(
                f"no integer pooling maps {prev.w_out}x{prev.w_out} onto "
                f"{fc_in_features} = N^2 x {prev.c_out} fc inputs")
        return ExtractedPooling(after_index=-1, size=pool_i,
                                candidates=[(None, None, prev.w_out // pool_i, pool_i)],
                                delay_corroborated=delayed, provenance="alg4-fc")

    # conv successor
    cands = []
    for p in range(0, 5):
        for s in range(1, 4):
            in_size = (next_w_out - 1) * s + next_kernel - 2 * p
            if in_size < next_kernel - 2 * p or in_size < 1:
                continue
            if prev.w_out % in_size == 0:
                cands.append((p, s, in_size, prev.w_out // in_size))
    if not cands:
        raise AmbiguityError(
            f"no (padding, stride, pooling) reconciles {prev.w_out} -> "
            f"{next_w_out} with K={next_kernel}")
    chosen = _prefer_by_delay(cands, delayed)
    return ExtractedPooling(after_index=-1, size=chosen[3], candidates=cands,
                            delay_corroborated=delayed, provenance="alg4-conv")


def _prefer_by_delay(cands, delayed):
    pooled = [c for c in cands if c[3] > 1]
    unpooled = [c for c in cands if c[3] == 1]
    if delayed and pooled:
        return sorted(pooled, key=lambda c: (c[3], c[0] or 0, c[1] or 0))[0]
    if not delayed and unpooled:
        return unpooled[0]
    return sorted(cands, key=lambda c: (c[0] or 0, c[1] or 0))[0]


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def reconstruct_architecture(features, hw: HwKnowledge) -> ExtractedArchitecture:
    """Ordered layer list with sizes, kernels and pooling insertions."""
    groups = layer_property_extraction(features, hw)
    arch = ExtractedArchitecture()
    prev_conv = None
    prev_channels = None
    for gi, g in enumerate(groups):
        layer = ExtractedLayer(kind=g.kind, n_tiles=len(g.tiles),
                               vmm_count=g.tiles[0].vmm_count)
        layer.provenance["type"] = "alg1"
        out, note = output_size_extraction(g, hw)
        layer.out_size = out
        layer.provenance["out"] = "alg2"
        if note:
            layer.notes.append(note)

        if g.kind == "conv":
            w_out = int(round(math.sqrt(layer.vmm_count)))
            if gi == 0:
                k, p, s, cands = kernel_size_extraction_first_layer(
                    layer.vmm_count, hw.input_width, hw)
                layer.kernel, layer.padding, layer.stride = k, p, s
                layer.provenance["kernel"] = "eq2-search"
                if len(cands) > 1:
                    layer.notes.append(
                        "shape search candidates: "
                        + "; ".join(f"K={a} P={b} S={c}" for a, b, c in cands))
            else:
                try:
                    k, warn = kernel_size_extraction(g, prev_channels, hw)
                    layer.kernel = k
                    layer.provenance["kernel"] = "alg3"
                    if warn:
                        layer.notes.append(warn)
                except AttackError as e:
                    layer.notes.append(f"kernel unresolved: {e}")
            if prev_conv is not None:
                pool = pooling_detection(
                    prev_conv, "conv", hw, next_start=g.start_time,
                    next_kernel=layer.kernel, next_w_out=w_out)
                pool.after_index = len(arch.layers) - 1
                arch.pools.append(pool)
            prev_conv = _PrevConv(w_out=w_out, c_out=out, end_time=g.end_time)
            prev_channels = out
        else:
            rs = row_structure(group=g, hw=hw)
            row_est = rs.total_rows
            if prev_conv is not None:
                pool = pooling_detection(
                    prev_conv, "fc", hw, next_start=g.start_time,
                    fc_in_features=row_est)
                pool.after_index = len(arch.layers) - 1
                arch.pools.append(pool)
                # the flattened fc input has the form N^2 * C_out; the noisy
                # row-power estimate only had to pick the pooling divider
                n = prev_conv.w_out // pool.size
                layer.in_features = n * n * prev_conv.c_out
                layer.provenance["in"] = "n2cout"
                if row_est is not None:
                    layer.notes.append(
                        f"row-power estimate {row_est:.0f} mapped rows")
                prev_conv = None
            elif row_est is not None:
                layer.in_features = int(round(row_est))
                layer.provenance["in"] = "alg3-rows"
            prev_channels = None
        arch.layers.append(layer)
    # drop no-op pooling entries but keep their evidence as notes
    kept = []
    for p in arch.pools:
        if p.size and p.size > 1:
            kept.append(p)
        else:
            arch.notes.append(
                f"no pooling detected after layer {p.after_index + 1} "
                f"(candidates: {p.candidates})")
    arch.pools = kept
    return arch


def run_attack(traces, hw: HwKnowledge) -> ExtractedArchitecture:
    """Trace set -> architecture. Raises AttackError when extraction fails."""
    failures = []
    features = []
    for t in traces:
        try:
            features.append(extract_features(t, hw))
        except FeatureExtractionError as e:
            failures.append((t.tile_id, str(e)))
    if failures:
        raise FeatureExtractionError(
            "feature extraction failed on %d tile(s): %s" % (
                len(failures), "; ".join(msg for _, msg in failures)))
    return reconstruct_architecture(features, hw)


# ---------------------------------------------------------------------------
# comparison against ground truth
# ---------------------------------------------------------------------------

@dataclass
class ComparisonReport:
    matches: list = field(default_factory=list)
    mismatches: list = field(default_factory=list)   # (field_name, truth, extracted)

    @property
    def ok(self):
        return not self.mismatches


def compare(extracted: ExtractedArchitecture, truth) -> ComparisonReport:
    """Field-by-field comparison; missing fields count as mismatches."""
    rep = ComparisonReport()
    # flatten extracted into the truth's layer sequence (pools interleaved)
    ext_seq = []
    pool_after = {p.after_index: p for p in extracted.pools}
    for i, l in enumerate(extracted.layers):
        ext_seq.append(("conv" if l.kind == "conv" else "fc", l))
        if i in pool_after:
            ext_seq.append(("pool", pool_after[i]))
    counters = {"conv": 0, "pool": 0, "fc": 0}
    truth_seq = [(l.kind, l) for l in truth.layers]
    for i in range(max(len(truth_seq), len(ext_seq))):
        if i >= len(truth_seq):
            kind = ext_seq[i][0]
            rep.mismatches.append((f"extra.{kind}[{i}]", None, kind))
            continue
        kind, tl = truth_seq[i]
        counters[kind] += 1
        name = f"{kind}{counters[kind]}"
        if i >= len(ext_seq):
            rep.mismatches.append((f"{name}.missing", kind, None))
            continue
        ekind, el = ext_seq[i]
        if ekind != kind:
            rep.mismatches.append((f"{name}.kind", kind, ekind))
            continue
        if kind == "conv":
            _cmp(rep, f"{name}.out_channels", tl.out_channels, el.out_size)
            _cmp(rep, f"{name}.kernel", tl.kernel, el.kernel)
        elif kind == "fc":
            _cmp(rep, f"{name}.out_features", tl.out_features, el.out_size)
        else:
            _cmp(rep, f"{name}.size", tl.pool_size, el.size)
    return rep


def _cmp(rep, name, truth_val, ext_val):
    if truth_val == ext_val:
        rep.matches.append((name, truth_val))
    else:
        rep.mismatches.append((name, truth_val, ext_val))


# ---------------------------------------------------------------------------
# report file: one layer per line with provenance of every number
# ---------------------------------------------------------------------------

def format_report(arch: ExtractedArchitecture) -> str:
    lines = ["imc-extract v1"]
    pool_after = {p.after_index: p for p in arch.pools}
    for i, l in enumerate(arch.layers):
        parts = [f"layer {l.kind}"]
        if l.out_size is not None:
            parts.append(f"out={l.out_size} [{l.provenance.get('out', '?')}]")
        if l.kernel is not None:
            parts.append(f"kernel={l.kernel} [{l.provenance.get('kernel', '?')}]")
        if l.stride is not None:
            parts.append(f"stride={l.stride} [eq2-search]")
        if l.padding is not None:
            parts.append(f"pad={l.padding} [eq2-search]")
        if l.in_features is not None:
            parts.append(f"in={l.in_features} [{l.provenance.get('in', '?')}]")
        parts.append(f"vmm={l.vmm_count} [alg1]")
        parts.append(f"tiles={l.n_tiles}")
        lines.append(" ".join(parts))
        for n in l.notes:
            lines.append(f"# note: {n}")
        if i in pool_after:
            p = pool_after[i]
            flag = " delay-corroborated" if p.delay_corroborated else ""
            lines.append(f"pool size={p.size} [{p.provenance}{flag}]")
    for n in arch.notes:
        lines.append(f"# note: {n}")
    return "\n".join(lines) + "\n"


_LAYER_RE = re.compile(r"^layer (conv|fc)\b")
_POOL_RE = re.compile(r"^pool size=(\d+)")
_FIELD_RE = re.compile(r"(\w+)=(\d+)(?:\s*\[([^\]]*)\])?")


def parse_report(text: str) -> ExtractedArchitecture:
    arch = ExtractedArchitecture()
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith("imc-extract"):
            continue
        m = _POOL_RE.match(line)
        if m:
            arch.pools.append(ExtractedPooling(
                after_index=len(arch.layers) - 1, size=int(m.group(1)),
                delay_corroborated="delay-corroborated" in line))
            continue
        m = _LAYER_RE.match(line)
        if not m:
            raise ValueError(f"unrecognized report line: {line!r}")
        layer = ExtractedLayer(kind=m.group(1))
        for key, val, prov in _FIELD_RE.findall(line):
            val = int(val)
            if key == "out":
                layer.out_size = val
            elif key == "kernel":
                layer.kernel = val
            elif key == "stride":
                layer.stride = val
            elif key == "pad":
                layer.padding = val
            elif key == "in":
                layer.in_features = val
            elif key == "vmm":
                layer.vmm_count = val
            elif key == "tiles":
                layer.n_tiles = val
            if prov and key in ("out", "kernel", "in"):
                layer.provenance[key] = prov
        arch.layers.append(layer)
    return arch
