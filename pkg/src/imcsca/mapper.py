"""Mapping of quantized weights onto tiled RRAM crossbars.

Each 8-bit weight occupies four adjacent columns in its row: positive and
negative polarity, each split into a 4-bit MSB cell and a 4-bit LSB cell.
Layers larger than one 128x128 array are partitioned into a grid of tiles,
filled row-major. Tile ids run in layer order, then grid order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import netspec

COLS_PER_WEIGHT = 4  # pos/neg x MSB/LSB


class MappingError(ValueError):
    pass


@dataclass(frozen=True)
class TileConfig:
    array_rows: int = 128
    array_cols: int = 128
    adc_count: int = 4          # per tile
    adc_bits: int = 8
    cell_bits: int = 4
    cells_per_weight: int = 2
    g_min: float = 1e-6         # S, erased state
    g_max: float = 100e-6       # S
    conductance_levels: int = 16

    def __post_init__(self):
        if self.cell_bits * self.cells_per_weight != netspec.WEIGHT_BITS:
            raise MappingError("cell_bits * cells_per_weight must equal the weight bit width")
        if self.conductance_levels != 2 ** self.cell_bits:
            raise MappingError("conductance_levels must be 2^cell_bits")
        if self.array_cols % (2 * self.adc_count) != 0:
            raise MappingError("array_cols must divide evenly across the ADCs")
        if not (0 < self.g_min < self.g_max):
            raise MappingError("need 0 < g_min < g_max")

    @property
    def g_step(self):
        return (self.g_max - self.g_min) / (self.conductance_levels - 1)

    def level_to_g(self, level):
        return self.g_min + np.asarray(level, dtype=np.float64) * self.g_step

    def g_to_level(self, g):
        return np.rint((np.asarray(g, dtype=np.float64) - self.g_min) / self.g_step).astype(int)

    @property
    def max_pairs_per_adc(self):
        return self.array_cols // (2 * self.adc_count)


@dataclass
class TileMapping:
    tile_id: int
    layer_id: int               # index into net.layers
    grid_pos: tuple             # (tile_row, tile_col) within the layer grid
    used_rows: int
    used_cols: int
    conductance: np.ndarray     # (array_rows, array_cols) in siemens
    row_offset: int = 0         # first logical row of the layer matrix in this tile
    col_offset: int = 0         # first logical column
    dummy_cols: bool = field(default=False)  # countermeasure marker

    @property
    def used_pairs(self):
        return self.used_cols // 2


def weight_to_conductances(q, cfg: TileConfig):
    """Four conductances (g_pos_msb, g_pos_lsb, g_neg_msb, g_neg_lsb) for one weight.

    |q| is split into high/low nibbles; the polarity that is not used stays at
    the erased state g_min.
    """
    q = int(q)
    if q < -128 or q > 127:
        raise MappingError(f"weight {q} outside int8 range")
    mag = min(abs(q), netspec.QMAX)  # quantizer already clamps -128
    h, l = mag >> 4, mag & 0xF
    gh, gl = float(cfg.level_to_g(h)), float(cfg.level_to_g(l))
    if q >= 0:
        return (gh, gl, cfg.g_min, cfg.g_min)
    return (cfg.g_min, cfg.g_min, gh, gl)


def conductances_to_weight(g4, cfg: TileConfig):
    """Inverse of weight_to_conductances (round-trip check helper)."""
    levels = cfg.g_to_level(np.asarray(g4))
    pos = 16 * levels[0] + levels[1]
    neg = 16 * levels[2] + levels[3]
    if pos and neg:
        raise MappingError("both polarities programmed")
    return int(pos - neg)


def _logical_matrix(q_tensor):
    """Weight tensor -> (rows, COLS_PER_WEIGHT*out) conductance-level layout.

    Conv kernels flatten in (channel, ky, kx) row-major order; fc tensors map
    directly. Returns the signed int weight matrix (rows x outs).
    """
    q = np.asarray(q_tensor)
    if q.ndim == 4:  # conv: (out, in, K, K)
        out = q.shape[0]
        w = q.reshape(out, -1).T  # (K*K*C_in ... careful: order below)
        # reshape(out, -1) flattens (in, ky, kx) row-major, matching im2col
        return w.astype(np.int64)
    if q.ndim == 2:  # fc: (out, in)
        return q.T.astype(np.int64)
    raise MappingError(f"unsupported weight tensor ndim {q.ndim}")


def _weights_to_cell_levels(w, cfg):
    """Signed weights (rows x outs) -> nibble levels (rows x 4*outs).

    Column order per weight is (pos_msb, neg_msb, pos_lsb, neg_lsb): the
    positive/negative columns of one cell are adjacent so the analog
    subtraction stays tile-local, and even/odd column pairs carry the
    MSB/LSB cells.
    """
    mag = np.minimum(np.abs(w), netspec.QMAX)
    h, l = mag >> 4, mag & 0xF
    pos = w >= 0
    rows, outs = w.shape
    lv = np.zeros((rows, COLS_PER_WEIGHT * outs), dtype=np.int64)
    lv[:, 0::4] = np.where(pos, h, 0)
    lv[:, 1::4] = np.where(pos, 0, h)
    lv[:, 2::4] = np.where(pos, l, 0)
    lv[:, 3::4] = np.where(pos, 0, l)
    return lv


def map_network(net, qw, cfg: TileConfig):
    """All TileMappings for a network, in tile-id order."""
    mappings = []
    tile_id = 0
    wi = 0
    for li, layer in enumerate(net.layers):
        if layer.kind == "pool":
            continue
        w = _logical_matrix(qw.tensors[wi])
        wi += 1
        rows, outs = w.shape
        cols = COLS_PER_WEIGHT * outs
        if rows < 1 or cols < 1:
            raise MappingError(f"layer {li}: degenerate weight matrix {rows}x{cols}")
        levels = _weights_to_cell_levels(w, cfg)
        g_full = cfg.level_to_g(levels)
        n_tr = -(-rows // cfg.array_rows)
        n_tc = -(-cols // cfg.array_cols)
        for tr in range(n_tr):
            r0 = tr * cfg.array_rows
            r1 = min(r0 + cfg.array_rows, rows)
            for tc in range(n_tc):
                c0 = tc * cfg.array_cols
                c1 = min(c0 + cfg.array_cols, cols)
                g = np.full((cfg.array_rows, cfg.array_cols), cfg.g_min)
                g[:r1 - r0, :c1 - c0] = g_full[r0:r1, c0:c1]
                mappings.append(TileMapping(
                    tile_id=tile_id, layer_id=li, grid_pos=(tr, tc),
                    used_rows=r1 - r0, used_cols=c1 - c0,
                    conductance=g, row_offset=r0, col_offset=c0))
                tile_id += 1
    return mappings


def tile_weight_block(mapping: TileMapping, qw, net):
    """Signed integer weight sub-matrix held by one tile (exact digital path)."""
    wi = netspec.vmm_layers(net).index(mapping.layer_id)
    w = _logical_matrix(qw.tensors[wi])
    r0, c0 = mapping.row_offset, mapping.col_offset
    o0, o1 = c0 // COLS_PER_WEIGHT, (c0 + mapping.used_cols) // COLS_PER_WEIGHT
    return w[r0:r0 + mapping.used_rows, o0:o1]


def im2col_inputs(activation, kernel, stride=1, padding=0):
    """Flattened input vectors, one per output pixel in raster order.

    Element order matches the kernel flattening used by map_network:
    (channel, ky, kx) row-major.
    """
    x = np.asarray(activation)
    c, h, w = x.shape
    if padding:
        xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, padding:padding + h, padding:padding + w] = x
        x = xp
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(1, 2))
    win = win[:, ::stride, ::stride]            # (c, H_out, W_out, k, k)
    c_, ho, wo, _, _ = win.shape
    # -> (H_out*W_out, c*k*k) with (c, ky, kx) fastest-last ordering
    return win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * kernel * kernel)


def apply_dummy_conductance(mappings, rng_seed, cfg: TileConfig = None):
    """Countermeasure: fill unused columns with random conductances.

    Every device in a column at or beyond used_cols gets a value drawn
    uniformly from [g_min, g_max]; the used region is untouched. Deterministic
    for a given seed.
    """
    cfg = cfg or TileConfig()
    rng = np.random.default_rng(rng_seed)
    out = []
    for m in mappings:
        g = m.conductance.copy()
        n_unused = g.shape[1] - m.used_cols
        if n_unused > 0:
            g[:, m.used_cols:] = rng.uniform(cfg.g_min, cfg.g_max,
                                             size=(g.shape[0], n_unused))
        out.append(TileMapping(m.tile_id, m.layer_id, m.grid_pos, m.used_rows,
                               m.used_cols, g, m.row_offset, m.col_offset,
                               dummy_cols=n_unused > 0))
    return out


def mapping_manifest(mappings):
    """Debug dump (never fed to the attack): per-tile geometry."""
    return [{"tile_id": m.tile_id, "layer_id": m.layer_id,
             "grid_pos": list(m.grid_pos), "used_rows": m.used_rows,
             "used_cols": m.used_cols} for m in mappings]
