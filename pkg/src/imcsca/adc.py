"""8-bit charge-redistribution SAR ADC: binary search plus per-step energies.

The capacitor array is binary weighted, C_i = 2^(bits-i) unit capacitors for
step i (C_1 the MSB), with one terminating unit capacitor; the total equals
the sample capacitance. Step n switches C_n's bottom plate to the reference
and simultaneously releases the previous capacitor if its bit was rejected,
so the comparator-node change per step is

    dVx_n = Vref * (C_n - (1 - D_{n-1}) * C_{n-1}) / C_tot

and the energy drawn from the reference during the step is

    E_1 = -C_1 * Vref * (dVx - Vref)
    E_n = -Vref * (dVx * sum_{i<n} C_i D_i + C_n * (dVx - Vref))

Individual steps can return energy to the reference (negative E); a recorded
power trace floors them at zero while the signed values stay available for
bookkeeping checks.
"""

from __future__ import annotations

import numpy as np


def cap_values(tech):
    """C_1..C_bits in farads (binary weighted, MSB first)."""
    n = tech.adc_bits
    return tech.c_unit * (2.0 ** np.arange(n - 1, -1, -1))


def total_cap(tech):
    # binary-weighted array plus the terminating unit capacitor
    return tech.c_unit * (2 ** tech.adc_bits)


def sar_step_energy(n, delta_vx, codes, tech):
    """Signed energy of conversion step n (1-based) from the step's node swing.

    `codes` holds the already-decided bits D_1..D_{n-1}.
    """
    if not 1 <= n <= tech.adc_bits:
        raise ValueError(f"step {n} outside 1..{tech.adc_bits}")
    caps = cap_values(tech)
    vref = tech.v_ref
    if n == 1:
        return -caps[0] * vref * (delta_vx - vref)
    kept = sum(c * d for c, d in zip(caps[:n - 1], codes[:n - 1]))
    return -vref * (delta_vx * kept + caps[n - 1] * (delta_vx - vref))


def sar_convert(v_in, tech):
    """Successive approximation of one voltage.

    Returns (code, step_energies, duration). The input is clamped into
    [0, v_ref]; code = floor(v_in / v_ref * 2^bits) clamped to full scale.
    """
    code, energies = sar_convert_batch(np.asarray([v_in], dtype=np.float64), tech)
    return int(code[0]), energies[0], tech.adc_bits * tech.adc_step_time


def sar_convert_batch(v_in, tech):
    """Vectorized conversion: (codes uint8 array, step energies (n, bits))."""
    v = np.clip(np.asarray(v_in, dtype=np.float64), 0.0, tech.v_ref)
    bits = tech.adc_bits
    caps = cap_values(tech)
    ctot = total_cap(tech)
    vref = tech.v_ref
    n = v.shape[0]
    d = np.zeros((n, bits), dtype=np.int8)
    energies = np.zeros((n, bits))
    # comparator node, sampled as -v_in then raised step by step
    vx = -v.copy()
    kept_sum = np.zeros(n)  # sum C_i * D_i over decided steps
    prev_rejected_cap = np.zeros(n)
    for s in range(bits):
        dvx = vref * (caps[s] - prev_rejected_cap) / ctot
        if s == 0:
            energies[:, 0] = -caps[0] * vref * (dvx - vref)
        else:
            energies[:, s] = -vref * (dvx * kept_sum + caps[s] * (dvx - vref))
        vx = vx + dvx
        keep = vx <= 0
        if vref == 0:
            # degenerate reference: node never moves, all bits resolve low
            keep = np.zeros(n, dtype=bool)
        d[:, s] = keep
        kept_sum = kept_sum + np.where(keep, caps[s], 0.0)
        prev_rejected_cap = np.where(keep, 0.0, caps[s])
    weights = 2 ** np.arange(bits - 1, -1, -1)
    codes = (d.astype(np.int64) * weights).sum(axis=1).astype(np.uint16)
    return codes, energies


def conversion_energy_by_code(tech):
    """Total conversion energy for each output code, mid-bin inputs.

    Returns (codes 0..2^bits-1, energies in joules). Used by the CLI energy
    sweep and the shape check against the decreasing conventional-switching
    envelope.
    """
    levels = 2 ** tech.adc_bits
    if tech.v_ref == 0:
        return np.arange(levels), np.zeros(levels)
    v = (np.arange(levels) + 0.5) * tech.v_ref / levels
    codes, energies = sar_convert_batch(v, tech)
    if not np.array_equal(codes, np.arange(levels)):
        raise AssertionError("mid-bin sweep did not produce the identity ramp")
    return np.arange(levels), energies.sum(axis=1)
