"""Command-line pipeline: simulate, inject, attack, compare, adc-energy, matrix.

Configuration is a flat ``key = value`` text file with dotted sections
(``tile.array_rows = 128``); every key can also be overridden on the command
line with ``--set section.key=value``. Exit codes: 0 success/match, 1 usage
error, 2 simulation error, 3 attack failure, 4 comparison mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import adc, artifacts, attack, mapper, netspec, powersim, tracefile

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_SIM = 2
EXIT_ATTACK = 3
EXIT_MISMATCH = 4


class UsageError(ValueError):
    pass


_DEFAULTS = {
    "paths.network": "",
    "paths.weights": "",
    "paths.traces": "traces",
    "paths.meta": "meta",
    "paths.report": "report.txt",
    "sim.seed": 0,
    "sim.images": 1,
    "sim.image_source": "synthetic",   # synthetic | cifar
    "sim.cifar_batch": "",
    "sim.halt_pipeline": True,
    "sim.scramble_timing": False,
    "sim.scramble_max_delay": 0.0,
    "sim.pad_adc": False,
    "sim.dummy_conductance": False,
    "sim.trace_rate": 1e10,
    "sim.binary_traces": False,
    "artifact.noise_std": 0.0,
    "artifact.target_rate": 0.0,       # 0 keeps the source rate
    "artifact.seed": 0,
    "artifact.noise_after_resample": True,
    "matrix.rates": "1e10,1e9,5e8,2e8",
    "matrix.noise": "0,0.001,0.002,0.003",
}
for _f in dataclasses.fields(mapper.TileConfig):
    _DEFAULTS[f"tile.{_f.name}"] = getattr(mapper.TileConfig(), _f.name)
for _f in dataclasses.fields(powersim.TechnologyModel):
    if _f.name != "digital_energy_lut":
        _DEFAULTS[f"tech.{_f.name}"] = getattr(powersim.TechnologyModel(), _f.name)
for _f in dataclasses.fields(attack.HwKnowledge):
    if _f.name != "kernel_candidates":
        _DEFAULTS[f"hw.{_f.name}"] = getattr(attack.HwKnowledge(), _f.name)


class RunConfig:
    def __init__(self):
        self.values = dict(_DEFAULTS)
        self.lut = powersim.default_digital_lut()

    def set(self, key, raw):
        if key.startswith("tech.lut."):
            parts = key.split(".")
            if len(parts) != 4 or parts[3] not in ("rise", "fall"):
                raise UsageError(f"bad LUT key {key!r} (tech.lut.<kind>.<rise|fall>)")
            self.lut[(parts[2], parts[3])] = float(raw)
            return
        if key not in self.values:
            raise UsageError(f"unknown config key {key!r}")
        default = _DEFAULTS[key]
        try:
            if isinstance(default, bool):
                if str(raw).lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError("expected a boolean")
                self.values[key] = str(raw).lower() in ("true", "1", "yes")
            elif isinstance(default, int):
                self.values[key] = int(str(raw), 0)
            elif isinstance(default, float):
                self.values[key] = float(raw)
            else:
                self.values[key] = str(raw)
        except ValueError as e:
            raise UsageError(f"bad value for {key}: {raw!r} ({e})") from e

    def __getitem__(self, key):
        return self.values[key]

    def load_file(self, path):
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, _, val = line.partition("=")
            self.set(key.strip(), val.strip())

    def tile_config(self):
        kw = {f.name: self.values[f"tile.{f.name}"]
              for f in dataclasses.fields(mapper.TileConfig)}
        return mapper.TileConfig(**kw)

    def tech(self):
        kw = {f.name: self.values[f"tech.{f.name}"]
              for f in dataclasses.fields(powersim.TechnologyModel)
              if f.name != "digital_energy_lut"}
        return powersim.TechnologyModel(digital_energy_lut=dict(self.lut), **kw)

    def sim_options(self, seed=None):
        return powersim.SimulationOptions(
            halt_pipeline=self["sim.halt_pipeline"],
            scramble_timing=self["sim.scramble_timing"],
            scramble_max_delay=self["sim.scramble_max_delay"],
            pad_adc=self["sim.pad_adc"],
            rng_seed=self["sim.seed"] if seed is None else seed,
            trace_rate=self["sim.trace_rate"])

    def hw(self):
        kw = {f.name: self.values[f"hw.{f.name}"]
              for f in dataclasses.fields(attack.HwKnowledge)
              if f.name != "kernel_candidates"}
        return attack.HwKnowledge(**kw)

    def artifact_spec(self, seed=None):
        rate = self["artifact.target_rate"]
        return artifacts.ArtifactSpec(
            noise_std=self["artifact.noise_std"],
            target_rate=rate if rate else None,
            rng_seed=self["artifact.seed"] if seed is None else seed,
            noise_after_resample=self["artifact.noise_after_resample"])


def _load_network(cfg) -> netspec.NetworkSpec:
    path = cfg["paths.network"]
    return netspec.load_network(path) if path else netspec.lenet()


def _seed_child(seed, stream):
    return int(np.random.SeedSequence([int(seed), stream]).generate_state(1)[0])


def _images(cfg, net, seed):
    n = cfg["sim.images"]
    if n < 1:
        raise UsageError("sim.images must be >= 1")
    if cfg["sim.image_source"] == "cifar":
        if not cfg["sim.cifar_batch"]:
            raise UsageError("sim.image_source=cifar needs sim.cifar_batch")
        imgs = netspec.load_cifar_batch(cfg["sim.cifar_batch"], count=n)
        if imgs.shape[1:] != tuple(net.input_shape):
            raise UsageError("CIFAR batch does not match the network input shape")
        return imgs
    rng = np.random.default_rng(_seed_child(seed, 2))
    return rng.integers(0, 256, (n, *net.input_shape), dtype=np.uint8)


def _build(cfg, seed):
    """Network, quantized weights and tile mappings from a run config."""
    net = _load_network(cfg)
    if cfg["paths.weights"]:
        qw = netspec.load_weights(cfg["paths.weights"])
    else:
        qw = netspec.quantize_weights(
            netspec.random_weights(net, _seed_child(seed, 1)))
    tile_cfg = cfg.tile_config()
    mappings = mapper.map_network(net, qw, tile_cfg)
    if cfg["sim.dummy_conductance"]:
        mappings = mapper.apply_dummy_conductance(
            mappings, _seed_child(seed, 4), tile_cfg)
    return net, qw, mappings, tile_cfg


def simulate_pipeline(cfg, seed, compute_traces=True):
    """Shared by cmd_simulate and cmd_matrix: one simulated inference run."""
    net, qw, mappings, tile_cfg = _build(cfg, seed)
    images = _images(cfg, net, seed)
    opts = cfg.sim_options(seed=_seed_child(seed, 3))
    opts.compute_traces = compute_traces
    traces, outputs, log = powersim.simulate_inference(
        mappings, net, qw, images, cfg.tech(), opts, tile_cfg)
    return net, qw, mappings, traces, outputs, log


def cmd_simulate(cfg, args):
    seed = cfg["sim.seed"]
    net, qw, mappings, traces, outputs, log = simulate_pipeline(cfg, seed)
    tdir = Path(args.traces or cfg["paths.traces"])
    if tdir.exists():
        shutil.rmtree(tdir)
    tracefile.write_traces(tdir, traces, binary=cfg["sim.binary_traces"])
    meta = Path(cfg["paths.meta"])
    meta.mkdir(parents=True, exist_ok=True)
    netspec.save_network(net, meta / "ground_truth.txt")
    (meta / "mapping.json").write_text(
        json.dumps(mapper.mapping_manifest(mappings), indent=1))
    (meta / "events.json").write_text(json.dumps([
        {"tile": e.tile_id, "layer": e.layer_id, "image": e.image,
         "start_sample": e.start_sample, "n_events": e.n_events,
         "event_len": e.event_len, "settle_samples": e.settle_samples,
         "adc_slots": e.adc_slots, "energy": e.energy, "kind": e.kind}
        for e in log], indent=1))
    print(f"wrote {len(traces)} traces to {tdir} (ground truth under {meta})")
    return EXIT_OK


def cmd_inject(cfg, args):
    if not args.traces:
        raise UsageError("inject needs --traces <dir>")
    if not args.out:
        raise UsageError("inject needs --out <dir>")
    spec = cfg.artifact_spec()
    traces = tracefile.read_traces(args.traces)
    degraded = [artifacts.apply_artifacts(t, spec) for t in traces]
    tracefile.write_traces(args.out, degraded)
    print(f"degraded {len(traces)} traces -> {args.out} "
          f"(noise_std={spec.noise_std:g} W, rate={'kept' if not spec.target_rate else '%g' % spec.target_rate})")
    return EXIT_OK


def cmd_attack(cfg, args):
    if not args.traces:
        raise UsageError("attack needs --traces <dir>")
    traces = tracefile.read_traces(args.traces)
    arch = attack.run_attack(traces, cfg.hw())
    report = attack.format_report(arch)
    out = Path(args.out or cfg["paths.report"])
    out.write_text(report)
    print(report, end="")
    print(f"report written to {out}")
    return EXIT_OK


def cmd_compare(cfg, args):
    if not args.report or not args.network:
        raise UsageError("compare needs <report> <network>")
    arch = attack.parse_report(Path(args.report).read_text())
    truth = netspec.load_network(args.network)
    rep = attack.compare(arch, truth)
    for name, val in rep.matches:
        print(f"match    {name} = {val}")
    for name, tv, ev in rep.mismatches:
        print(f"MISMATCH {name}: ground truth {tv}, extracted {ev}")
    print(f"{len(rep.matches)} matching fields, {len(rep.mismatches)} mismatches")
    return EXIT_OK if rep.ok else EXIT_MISMATCH


def cmd_adc_energy(cfg, args):
    tech = cfg.tech()
    codes, energies = adc.conversion_energy_by_code(tech)
    lines = ["code,energy_j"]
    lines += [f"{c},{e:.12g}" for c, e in zip(codes, energies)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(codes)} rows to {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def _matrix_axes(cfg):
    rates = [float(r) for r in str(cfg["matrix.rates"]).split(",") if r.strip()]
    noises = [float(s) for s in str(cfg["matrix.noise"]).split(",") if s.strip()]
    if not rates or not noises:
        raise UsageError("matrix needs non-empty matrix.rates and matrix.noise")
    return rates, noises


def evaluate_cell(traces, net, mappings, hw, rate, noise, seed):
    """Outcome of Algorithms 2 and 3 on one degradation cell.

    Returns (alg2, alg3) strings: Success / Fail at FC / Fail / '-'.
    Failure attribution uses the ground-truth tile->layer map, like the
    published robustness tables; the attack itself never sees it.
    """
    spec = artifacts.ArtifactSpec(noise_std=noise, target_rate=rate, rng_seed=seed)
    degraded = [artifacts.apply_artifacts(t, spec) for t in traces]
    tile_layer = {m.tile_id: m.layer_id for m in mappings}
    layer_kind = {i: l.kind for i, l in enumerate(net.layers)}
    shapes = netspec.propagate_shapes(net)

    failed_layers = set()
    feats = []
    for t in degraded:
        try:
            feats.append(attack.extract_features(t, hw))
        except attack.FeatureExtractionError:
            failed_layers.add(tile_layer[t.tile_id])
    truth_sizes = {}
    for i, l in enumerate(net.layers):
        if l.kind == "conv":
            truth_sizes[i] = l.out_channels
        elif l.kind == "fc":
            truth_sizes[i] = l.out_features

    def classify(bad_layers):
        if not bad_layers:
            return "Success"
        if all(layer_kind[i] == "fc" for i in bad_layers):
            return "Fail at FC"
        return "Fail"

    bad = set(failed_layers)
    alg2_result = None
    if not bad:
        try:
            groups = attack.layer_property_extraction(feats, hw)
            vmm_order = [i for i, l in enumerate(net.layers) if l.kind in ("conv", "fc")]
            if len(groups) != len(vmm_order):
                alg2_result = "Fail"
            else:
                for g, li in zip(groups, vmm_order):
                    try:
                        out, _ = attack.output_size_extraction(g, hw)
                        if out != truth_sizes[li] or g.kind != layer_kind[li]:
                            bad.add(li)
                    except attack.AttackError:
                        bad.add(li)
        except attack.AttackError:
            alg2_result = "Fail"
    if alg2_result is None:
        alg2_result = classify(bad)

    # Alg 3: kernel of every conv layer spanning >= 2 tile rows
    conv_fail = any(layer_kind[i] == "conv" for i in bad) or \
        (alg2_result == "Fail" and not bad)
    if conv_fail:
        return alg2_result, "-"
    alg3_result = "Success"
    try:
        groups = attack.layer_property_extraction(
            [f for f in feats if layer_kind[tile_layer[f.tile_id]] == "conv"], hw)
        gi = 0
        c_in = net.input_shape[0]
        for li, l in enumerate(net.layers):
            if l.kind != "conv":
                continue
            g = groups[gi]
            gi += 1
            rs = attack.row_structure(g, hw)
            if rs.grid_rows >= 2:
                k, _ = attack.kernel_size_extraction(g, c_in, hw)
                if k != l.kernel:
                    alg3_result = "Fail"
            c_in = l.out_channels
    except attack.AttackError:
        alg3_result = "Fail"
    return alg2_result, alg3_result


def run_matrix(cfg, seed=None):
    """Degradation grid -> {(rate, noise): (alg2, alg3)} plus the base run."""
    seed = cfg["sim.seed"] if seed is None else seed
    net, qw, mappings, traces, outputs, log = simulate_pipeline(cfg, seed)
    rates, noises = _matrix_axes(cfg)
    hw = cfg.hw()
    results = {}
    for rate in rates:
        for noise in noises:
            cell_seed = _seed_child(cfg["artifact.seed"], int(rate) % (2**31) + int(noise * 1e6))
            results[(rate, noise)] = evaluate_cell(
                traces, net, mappings, hw, rate, noise, cell_seed)
    return results, rates, noises


def format_matrix(results, rates, noises):
    def rate_label(r):
        return "%g GSa/s" % (r / 1e9) if r >= 1e9 else "%g MSa/s" % (r / 1e6)

    def noise_label(s):
        return "0" if s == 0 else "%g mW" % (s * 1e3)

    col_w = 22
    lines = ["Algorithm 2 / Algorithm 3 outcomes (rows: sample rate; columns: noise std)"]
    header = " " * 12 + "".join(noise_label(s).ljust(col_w) for s in noises)
    lines.append(header)
    for r in rates:
        cells = []
        for s in noises:
            a2, a3 = results[(r, s)]
            cells.append(f"{a2} / {a3}".ljust(col_w))
        lines.append(rate_label(r).ljust(12) + "".join(cells))
    return "\n".join(lines) + "\n"


def cmd_matrix(cfg, args):
    results, rates, noises = run_matrix(cfg)
    text = format_matrix(results, rates, noises)
    print(text, end="")
    if args.out:
        csv = ["rate_sa_s,noise_std_w,alg2,alg3"]
        csv += [f"{r:g},{s:g},{results[(r, s)][0]},{results[(r, s)][1]}"
                for r in rates for s in noises]
        Path(args.out).write_text("\n".join(csv) + "\n" + text)
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(
        prog="imcsca",
        description="RRAM in-memory-computing power simulator and "
                    "architecture-extraction side-channel toolkit")
    ap.add_argument("--config", help="run configuration file (key = value lines)")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config key (repeatable)")
    ap.add_argument("--seed", type=int, help="override sim.seed and artifact.seed")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, needs in [
            ("simulate", ("traces",)),
            ("inject", ("traces", "out")),
            ("attack", ("traces", "out")),
            ("adc-energy", ("out",)),
            ("matrix", ("out",))]:
        p = sub.add_parser(name)
        if "traces" in needs:
            p.add_argument("--traces", help="trace directory")
        if "out" in needs:
            p.add_argument("--out", help="output path")
    pc = sub.add_parser("compare")
    pc.add_argument("report", nargs="?")
    pc.add_argument("network", nargs="?")
    return ap


_COMMANDS = {
    "simulate": cmd_simulate,
    "inject": cmd_inject,
    "attack": cmd_attack,
    "compare": cmd_compare,
    "adc-energy": cmd_adc_energy,
    "matrix": cmd_matrix,
}


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    cfg = RunConfig()
    try:
        if args.config:
            if not Path(args.config).is_file():
                raise UsageError(f"config file {args.config!r} not found")
            cfg.load_file(args.config)
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            key, _, val = item.partition("=")
            cfg.set(key.strip(), val.strip())
        if args.seed is not None:
            cfg.set("sim.seed", str(args.seed))
            cfg.set("artifact.seed", str(args.seed))
        for key in ("paths.network", "paths.weights", "sim.cifar_batch"):
            if cfg[key] and not Path(cfg[key]).is_file():
                raise UsageError(f"{key} = {cfg[key]!r}: file not found")
        return _COMMANDS[args.command](cfg, args)
    except (UsageError, netspec.NetworkFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (powersim.SimulationError, mapper.MappingError, netspec.ShapeError,
            artifacts.ResampleError, tracefile.TraceFormatError) as e:
        print(f"simulation error: {e}", file=sys.stderr)
        return EXIT_SIM
    except attack.AttackError as e:
        print(f"attack failed: {e}", file=sys.stderr)
        return EXIT_ATTACK


if __name__ == "__main__":
    sys.exit(main())
