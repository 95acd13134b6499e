"""Event-driven dynamic power simulation of a tiled RRAM inference.

Every 8-bit input vector element is applied bit-serially, MSB first. One
input bit on one tile is a three-phase event:

  A  transient bitline charging spike (one native sample)
  B  stable read window of settle_time, static power = v_read * sum of
     column currents
  C  ADC phase: the tile's ADCs run in parallel, each converting its share
     of output pairs sequentially (8 steps of adc_step_time each); switching
     energies land as impulses on the first sample of each step, and the
     shift-add / register energy of each conversion lands at its latch.

A tile starts its next bit event only after phase C completes; the next
layer starts when every tile of the previous layer has finished (halted
pipeline). Functional outputs are computed through the exact integer
shift-add/recombination dataflow, so they match the fixed-point reference
bit for bit; the ADC voltage clipping and quantization affect the power
trace only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adc, mapper, netspec


class SimulationError(RuntimeError):
    pass


def default_digital_lut():
    # per-transition energies, 28 nm-class ballpark; fully configurable
    return {
        ("shift_add", "rise"): 1.5e-15, ("shift_add", "fall"): 1.2e-15,
        ("register", "rise"): 1.0e-15, ("register", "fall"): 0.8e-15,
        ("relu", "rise"): 0.8e-15, ("relu", "fall"): 0.6e-15,
        ("maxpool", "rise"): 1.2e-15, ("maxpool", "fall"): 1.0e-15,
        ("router", "rise"): 2.0e-15, ("router", "fall"): 1.6e-15,
    }


@dataclass
class TechnologyModel:
    v_read: float = 0.2             # V, read pulse amplitude
    v_dd: float = 0.9               # V
    v_ref: float = 0.9              # V, ADC reference
    c_unit: float = 1e-15           # F, DAC unit capacitor
    c_sample: float = 256e-15       # F, sample/hold = total DAC capacitance
    c_bitline: float = 1e-16        # F per row, parasitic
    serial_clock_hz: float = 50e6
    digital_clock_hz: float = 500e6
    adc_step_time: float = 2e-9     # s, one digital clock
    settle_time: float = 4e-9       # s, stable-read window
    adc_bits: int = 8
    digital_energy_lut: dict = field(default_factory=default_digital_lut)

    def __post_init__(self):
        for name in ("v_read", "v_dd", "v_ref", "c_unit", "c_sample", "c_bitline",
                     "serial_clock_hz", "digital_clock_hz", "adc_step_time",
                     "settle_time"):
            if getattr(self, name) < 0:
                raise SimulationError(f"{name} must be non-negative")
        if abs(self.c_sample - self.c_unit * 2 ** self.adc_bits) > 1e-21:
            raise SimulationError("c_sample must equal 2^adc_bits unit capacitors")


@dataclass
class PowerTrace:
    tile_id: int
    sample_rate: float       # Sa/s
    samples: np.ndarray      # instantaneous power, W


@dataclass
class SimulationOptions:
    halt_pipeline: bool = True
    scramble_timing: bool = False
    scramble_max_delay: float = 0.0   # s, per-tile random start delay bound
    pad_adc: bool = False
    rng_seed: int = 0
    trace_rate: float = 1e10          # native Sa/s
    compute_traces: bool = True
    lead_in: float = 2e-6             # idle before the first layer
    inter_image_gap: float = 10e-6


def digital_power(kind, rising, falling, tech: TechnologyModel):
    """Energy of a batch of bit transitions on one component type."""
    lut = tech.digital_energy_lut
    if (kind, "rise") not in lut:
        raise SimulationError(f"unknown digital component {kind!r}")
    return rising * lut[(kind, "rise")] + falling * lut[(kind, "fall")]


def subtract_and_sample(i_pos, i_neg, tech: TechnologyModel):
    """Current-mirror subtractor into the sample/hold precharged to VDD/2."""
    dv = (np.asarray(i_pos, dtype=np.float64) - np.asarray(i_neg, dtype=np.float64)) \
        * tech.settle_time / tech.c_sample
    return np.clip(tech.v_dd / 2 + dv, 0.0, tech.v_dd)


def array_read_event(tile: mapper.TileMapping, input_bits, tech: TechnologyModel,
                     prev_state=None):
    """One analog read: per-pair currents, transient energy, static power.

    `prev_state` is the column-conduction state (bool per column) left by the
    previous event, all-off if omitted. Returns (i_pos, i_neg, transient_energy,
    static_power, duration, state).
    """
    bits = np.asarray(input_bits, dtype=np.float64)
    if bits.shape != (tile.used_rows,):
        raise SimulationError(
            f"tile {tile.tile_id}: expected {tile.used_rows} input bits, got {bits.shape}")
    i_cols = tech.v_read * (bits @ tile.conductance[:tile.used_rows, :])
    state = i_cols > 0
    if prev_state is None:
        prev_state = np.zeros_like(state)
    n_switch = int(np.count_nonzero(state ^ prev_state))
    transient = 0.5 * tech.c_bitline * tile.used_rows * tech.v_read ** 2 * n_switch
    static = tech.v_read * float(i_cols.sum())
    i_pos = i_cols[:tile.used_cols:2][: tile.used_pairs]
    i_neg = i_cols[1:tile.used_cols:2][: tile.used_pairs]
    return i_pos, i_neg, transient, static, tech.settle_time, state


@dataclass
class TileEvents:
    """Ground-truth annotation of one tile's activity (test oracle only)."""
    tile_id: int
    layer_id: int
    image: int
    start_sample: int
    n_events: int
    event_len: int       # samples
    settle_samples: int
    adc_slots: int       # sequential conversions per ADC per bit
    energy: float        # delivered energy, J
    static_power: np.ndarray = None  # per event, W
    kind: str = "vmm"    # "vmm" analog events | "interlayer" digital impulse


def _popcount(a):
    return np.bitwise_count(a.astype(np.uint32, copy=False)).astype(np.int64)


def _transition_counts(new, old):
    rise = _popcount(new & ~old)
    fall = _popcount(old & ~new)
    return rise, fall


class _Timing:
    def __init__(self, tech, options):
        self.rate = options.trace_rate
        self.dt = 1.0 / self.rate
        self.settle_n = max(1, round(tech.settle_time * self.rate))
        self.step_n = max(1, round(tech.adc_step_time * self.rate))
        self.conv_n = tech.adc_bits * self.step_n

    def event_len(self, slots):
        return 1 + self.settle_n + slots * self.conv_n


def _simulate_tile_layer(tile, w_tile, x_bits, tech, cfg, tm, options):
    """Vectorized power/energy computation of one tile over one layer's inputs.

    x_bits: (8, n_vec, used_rows) uint8 bit planes, MSB first; w_tile holds
    the tile's signed nibble columns in pair order. Returns (activity samples,
    delivered energy, static power per event, slots).
    """
    n_bits, n_vec, _ = x_bits.shape
    n_events = n_vec * n_bits
    pairs = tile.used_pairs
    slots = -(-pairs // cfg.adc_count)
    if options.pad_adc:
        slots = cfg.max_pairs_per_adc
    g = tile.conductance[:tile.used_rows, :]

    # column currents per bit plane: (8, n_vec, array_cols)
    i_cols = tech.v_read * (x_bits.astype(np.float64) @ g)
    static = tech.v_read * i_cols.sum(axis=2)                    # (8, n_vec)
    static_ev = static.T.reshape(-1)                             # event order: vec-major

    state = (i_cols > 0).transpose(1, 0, 2).reshape(n_events, -1)
    prev = np.vstack([np.zeros((1, state.shape[1]), dtype=bool), state[:-1]])
    n_switch = (state ^ prev).sum(axis=1)
    transient_ev = 0.5 * tech.c_bitline * tile.used_rows * tech.v_read ** 2 * n_switch

    # differential pairs -> held voltages -> codes and step energies
    di = i_cols[:, :, :tile.used_cols:2][:, :, :pairs] - \
        i_cols[:, :, 1:tile.used_cols:2][:, :, :pairs]           # (8, n_vec, pairs)
    v_ev = subtract_and_sample(di, np.zeros_like(di), tech) \
        .transpose(1, 0, 2).reshape(n_events, pairs)

    # conversion grid (event, slot, adc); padding fills with dummy V_dd/2 inputs
    n_conv = slots * cfg.adc_count
    v_grid = np.full((n_events, n_conv), tech.v_dd / 2)
    v_grid[:, :pairs] = v_ev
    active = np.zeros(n_conv, dtype=bool)
    active[:pairs if not options.pad_adc else n_conv] = True
    codes, step_e = adc.sar_convert_batch(v_grid.reshape(-1), tech)
    codes = codes.reshape(n_events, n_conv)
    step_e = step_e.reshape(n_events, n_conv, tech.adc_bits)
    step_e *= active[None, :, None]

    # output-register transitions: each ADC's bus goes from its previous code
    prev_codes = np.zeros_like(codes)
    prev_codes[:, cfg.adc_count:] = codes[:, :-cfg.adc_count]
    prev_codes[1:, :cfg.adc_count] = codes[:-1, -cfg.adc_count:]
    rise, fall = _transition_counts(codes.astype(np.uint32), prev_codes.astype(np.uint32))
    e_conv = digital_power("register", rise * active, fall * active, tech)

    # shift-add accumulator transitions (exact integer dataflow, 32-bit bus)
    s_exact = np.einsum("bvr,rp->bvp", x_bits.astype(np.int64), w_tile)
    acc = np.zeros((n_vec, pairs), dtype=np.int64)
    e_shift = np.zeros((n_bits, n_vec, pairs))
    for b in range(n_bits):
        new = (acc << 1) + s_exact[b]
        r2, f2 = _transition_counts((new & 0xFFFFFFFF).astype(np.uint32),
                                    (acc & 0xFFFFFFFF).astype(np.uint32))
        e_shift[b] = digital_power("shift_add", r2, f2, tech)
        acc = new
    e_conv[:, :pairs] += e_shift.transpose(1, 0, 2).reshape(n_events, pairs)
    e_dig_slot = e_conv.reshape(n_events, slots, cfg.adc_count).sum(axis=2)
    step_e_slot = step_e.reshape(n_events, slots, cfg.adc_count, -1).sum(axis=2)

    activity = None
    if options.compute_traces:
        ev = np.zeros((n_events, tm.event_len(slots)))
        ev[:, 0] = transient_ev / tm.dt
        ev[:, 1:1 + tm.settle_n] = static_ev[:, None]
        base = 1 + tm.settle_n
        tick = (base + np.arange(slots)[:, None] * tm.conv_n
                + np.arange(tech.adc_bits)[None, :] * tm.step_n).reshape(-1)
        ev[:, tick] += np.maximum(step_e_slot, 0).reshape(n_events, -1) / tm.dt
        # shift-add/register energy lands on the final-step edge of its conversion
        latch = base + np.arange(slots) * tm.conv_n + (tech.adc_bits - 1) * tm.step_n
        ev[:, latch] += e_dig_slot / tm.dt
        activity = ev.reshape(-1)

    delivered = (float(np.maximum(step_e_slot, 0).sum()) + float(e_dig_slot.sum())
                 + float(transient_ev.sum())
                 + float(static_ev.sum()) * tm.settle_n * tm.dt)
    return activity, delivered, static_ev, slots


def _relu_energy(acc, act_q, tech):
    neg = int(np.count_nonzero(acc < 0))
    rise = int(_popcount(act_q.astype(np.uint32)).sum())
    return digital_power("relu", rise, neg, tech)


def _pool_energy_and_delay(act, size, tech):
    # one comparator tree per channel; spatial windows stream serially
    c, h, w = act.shape
    n_out = c * (h // size) * (w // size)
    compares = n_out * (size * size - 1)
    energy = digital_power("maxpool", compares, compares, tech)
    delay = (h // size) * (w // size) * size * size / tech.digital_clock_hz
    return energy, delay


def _router_energy(act_q, tech):
    bits = int(_popcount(act_q.astype(np.uint32)).sum())
    return digital_power("router", bits, bits // 2, tech)


def simulate_inference(mappings, net, qw, images, tech: TechnologyModel,
                       options: SimulationOptions, cfg: mapper.TileConfig = None):
    """Full halted-pipeline inference: (traces, outputs, event_log).

    `images` is (n, C, H, W) uint8 or one image. Outputs hold the integer
    logits per image, bit-exact against infer_reference.
    """
    if not options.halt_pipeline:
        raise SimulationError("pipelined inference is not supported; halt_pipeline must stay on")
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.shape[0] == 0:
        raise SimulationError("no input images")
    if images.dtype != np.uint8 or images.shape[1:] != tuple(net.input_shape):
        raise SimulationError(f"images must be uint8 with shape {net.input_shape}")

    cfg = cfg or mapper.TileConfig()
    if mappings and mappings[0].conductance.shape != (cfg.array_rows, cfg.array_cols):
        raise SimulationError("tile config does not match the mapped arrays")
    tm = _Timing(tech, options)
    rng = np.random.default_rng(options.rng_seed)
    by_layer = {}
    for m in mappings:
        by_layer.setdefault(m.layer_id, []).append(m)
    vmms = netspec.vmm_layers(net)
    weights = {li: mapper._logical_matrix(qw.tensors[i]) for i, li in enumerate(vmms)}

    delays = {m.tile_id: 0 for m in mappings}
    if options.scramble_timing:
        max_d = max(0, int(round(options.scramble_max_delay * tm.rate)))
        delays = {m.tile_id: int(rng.integers(0, max_d + 1)) for m in mappings}

    placements = {m.tile_id: [] for m in mappings}   # (offset, activity array)
    impulses = {m.tile_id: [] for m in mappings}     # (sample, power)
    event_log = []
    outputs = []

    t = int(round(options.lead_in * tm.rate))
    gap = int(round(options.inter_image_gap * tm.rate))
    for img_i, image in enumerate(images):
        x = image
        last_vmm = vmms[-1]
        for li, layer in enumerate(net.layers):
            if layer.kind == "pool":
                energy, delay = _pool_energy_and_delay(x, layer.pool_size, tech)
                span = max(1, int(round(delay * tm.rate)))
                prev_tiles = by_layer.get(_prev_vmm(net, li), [])
                for m in prev_tiles:
                    e = energy / len(prev_tiles)
                    impulses[m.tile_id].append((t, span, e / (span * tm.dt)))
                    event_log.append(TileEvents(
                        tile_id=m.tile_id, layer_id=li, image=img_i, start_sample=t,
                        n_events=0, event_len=span, settle_samples=tm.settle_n,
                        adc_slots=0, energy=e, kind="interlayer"))
                t += span
                x = netspec._maxpool_int(x, layer.pool_size)
                continue

            if layer.kind == "conv":
                xm = mapper.im2col_inputs(x, layer.kernel, layer.stride, layer.padding)
            else:
                xm = x.reshape(1, -1)
            x_bits = np.stack([(xm >> (7 - b)) & 1 for b in range(8)]).astype(np.uint8)
            w_layer = weights[li]
            acc_full = xm.astype(np.int64) @ w_layer

            layer_end = t
            for m in by_layer.get(li, []):
                w_tile = _tile_block(w_layer, m)
                xb = x_bits[:, :, m.row_offset:m.row_offset + m.used_rows]
                activity, energy, static_ev, slots = _simulate_tile_layer(
                    m, _signed_nibble_block(w_tile), xb, tech, cfg, tm, options)
                start = t + delays[m.tile_id]
                n_events = xm.shape[0] * 8
                ev_len = tm.event_len(slots)
                if activity is not None:
                    placements[m.tile_id].append((start, activity))
                event_log.append(TileEvents(
                    tile_id=m.tile_id, layer_id=li, image=img_i,
                    start_sample=start, n_events=n_events, event_len=ev_len,
                    settle_samples=tm.settle_n, adc_slots=slots, energy=energy,
                    static_power=static_ev))
                layer_end = max(layer_end, start + n_events * ev_len)
            t = layer_end

            if li == last_vmm:
                logits = acc_full.reshape(-1) if layer.kind == "fc" else acc_full
                outputs.append(logits.copy())
                x = logits
            else:
                relu = np.maximum(acc_full, 0)
                act = netspec.requantize_activations(relu)
                if layer.kind == "conv":
                    c_out, h, w = _conv_out_shape(net, li)
                    act = act.T.reshape(c_out, h, w)
                    relu_src = acc_full.T.reshape(c_out, h, w)
                else:
                    act = act.reshape(-1)
                    relu_src = acc_full.reshape(-1)
                e = _relu_energy(relu_src, act, tech) + _router_energy(act, tech)
                # activation/routing logic streams the outputs over a burst of
                # digital cycles; it does not stall the next layer
                span = max(1, int(round(256 / tech.digital_clock_hz * tm.rate)))
                for m in by_layer.get(li, []):
                    ei = e / len(by_layer[li])
                    impulses[m.tile_id].append((t, span, ei / (span * tm.dt)))
                    event_log.append(TileEvents(
                        tile_id=m.tile_id, layer_id=li, image=img_i, start_sample=t,
                        n_events=0, event_len=span, settle_samples=tm.settle_n,
                        adc_slots=0, energy=ei, kind="interlayer"))
                x = act
        t += gap

    traces = []
    if options.compute_traces:
        tail = 200
        for m in mappings:
            end = 0
            for off, act in placements[m.tile_id]:
                end = max(end, off + len(act))
            for s, span, _ in impulses[m.tile_id]:
                end = max(end, s + span)
            arr = np.zeros(end + tail)
            for off, act in placements[m.tile_id]:
                arr[off:off + len(act)] += act
            for s, span, p in impulses[m.tile_id]:
                arr[s:s + span] += p
            traces.append(PowerTrace(m.tile_id, tm.rate, arr))
    return traces, outputs, event_log


def _prev_vmm(net, pool_index):
    for i in range(pool_index - 1, -1, -1):
        if net.layers[i].kind in ("conv", "fc"):
            return i
    raise SimulationError("pool layer with no preceding VMM layer")


def _conv_out_shape(net, li):
    shapes = netspec.propagate_shapes(net)
    return shapes[li]


def _tile_block(w_layer, m):
    o0 = m.col_offset // mapper.COLS_PER_WEIGHT
    o1 = (m.col_offset + m.used_cols) // mapper.COLS_PER_WEIGHT
    return w_layer[m.row_offset:m.row_offset + m.used_rows, o0:o1]


def _signed_nibble_block(w_tile):
    """Weights -> signed nibble columns matching the pair order (msb, lsb)."""
    mag = np.minimum(np.abs(w_tile), netspec.QMAX)
    sign = np.sign(w_tile)
    h = (mag >> 4) * sign
    l = (mag & 0xF) * sign
    rows, outs = w_tile.shape
    s = np.empty((rows, 2 * outs), dtype=np.int64)
    s[:, 0::2] = h
    s[:, 1::2] = l
    return s
