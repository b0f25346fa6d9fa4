"""Command-line entry point: synth, compose, verify, simulate, bench."""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .certsynth import (ConditioningError, InfeasibleError, StorageCertificate, SynthSettings,
                        dissipation_variable_count, expand_groups, monolithic_variable_count, synthesize_network)
from .composer import (CompositionRefused, RetriesExhausted, RetryConfig, assemble_cbc, check_composition,
                       load_network, retry_policy, save_network)
from .datagen import DivergenceError, NoiseSpec, RankConditionError
from .models import BENCHMARKS, Topology, build_benchmark, make_topology, representative_subsystem
from .verify import (FIXTURE_IDS, GridSpec, fixture_network, load_fixture, sample_initial_states,
                     simulate_network_closed_loop, verify_csc)

log = logging.getLogger("barrierforge")

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_INFEASIBLE = 2
EXIT_RETRIES = 3
EXIT_COMPOSITION = 4
EXIT_MISSING = 5


class MissingArtifact(FileNotFoundError):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: str | None = None
    seed: int | None = None
    started: str = field(default_factory=_now)
    finished: str | None = None
    stages: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    defaults: dict = field(default_factory=dict)
    exit_code: int | None = None
    notes: list = field(default_factory=list)

    def stage(self, name: str, seconds: float):
        self.stages[name] = round(self.stages.get(name, 0.0) + seconds, 6)

    def add(self, path) -> Path:
        p = Path(path)
        if str(p) not in self.artifacts:
            self.artifacts.append(str(p))
        return p

    def write(self, out_dir: Path, code: int) -> Path:
        self.exit_code = code
        self.finished = _now()
        path = Path(out_dir) / "manifest.json"
        if str(path) not in self.artifacts:
            self.artifacts.append(str(path))
        path.write_text(json.dumps(self.__dict__, indent=1, sort_keys=True, default=str))
        return path


def worker_count(config_value=None) -> int:
    env = os.environ.get("BARRIERFORGE_WORKERS")
    if env:
        return max(1, int(env))
    if config_value:
        return max(1, int(config_value))
    return os.cpu_count() or 1


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise MissingArtifact(f"missing file: {p}")
    return json.loads(p.read_text())


# ---------------------------------------------------------------------------
# synth

SYNTH_DEFAULTS = {"lambda": 0.99, "pi": 1.0, "tau": 0.01, "seed": 0, "noise": "uniform_ball", "compose": True}


def _synth_settings(cfg: dict) -> SynthSettings:
    st = SynthSettings.from_json(cfg.get("settings", {}))
    st.lam = float(cfg["lambda"])
    st.pi = float(cfg["pi"])
    return st


def run_synth(cfg: dict, out_dir: Path, manifest: RunManifest) -> int:
    for k, v in SYNTH_DEFAULTS.items():
        if k not in cfg:
            cfg[k] = v
            manifest.defaults[k] = v
    name = cfg["benchmark"]
    spec = BENCHMARKS[name]
    for k in ("T", "phi_bar"):
        if k not in cfg:
            cfg[k] = spec[k]
            manifest.defaults[k] = spec[k]
    N = int(cfg.get("N", 7))
    manifest.seed = int(cfg["seed"])
    net = build_benchmark(name, N, cfg.get("params"))
    st = _synth_settings(cfg)
    noise = NoiseSpec(float(cfg["phi_bar"]), cfg["noise"])
    workers = worker_count(cfg.get("workers"))
    retry_cfg = RetryConfig(**cfg.get("retry", {}))
    T, seed = int(cfg["T"]), int(cfg["seed"])
    attempts: list = []
    out_dir.mkdir(parents=True, exist_ok=True)
    while True:
        t0 = time.perf_counter()
        groups = synthesize_network(net, T, float(cfg["tau"]), noise, seed, st, workers)
        manifest.stage("synthesis", time.perf_counter() - t0)
        certs = expand_groups(groups, N)
        refs = []
        for g, gr in enumerate(groups):
            gr.cert.provenance.setdefault("members", gr.members)
            p = manifest.add(gr.cert.save(out_dir / f"cert_{g}.json"))
            refs.append(p.name)
            if cfg.get("save_data", False):
                for q in gr.record.save_csv(out_dir / f"data_{g}.csv"):
                    manifest.add(q)
        index = {"benchmark": name, "N": N, "params": cfg.get("params"),
                 "certificates": [refs[next(g for g, gr in enumerate(groups) if i in gr.members)] for i in range(N)]}
        manifest.add(out_dir / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
        manifest.notes.append(f"{len(groups)} unique certificate(s) for N = {N}")
        if not cfg["compose"]:
            return EXIT_OK
        t0 = time.perf_counter()
        check = check_composition(net.topology, certs)
        manifest.stage("composition", time.perf_counter() - t0)
        if check.passes:
            cbc = assemble_cbc(certs, check, net.topology)
            _save_network_file(cbc, out_dir / "network.json", index, manifest)
            return EXIT_OK
        try:
            nxt = retry_policy({"T": T, "seed": seed, "attempts": attempts,
                                "reason": f"lambda_max = {check.lambda_max:.3e}, level_ok = {check.level_ok}"}, retry_cfg)
        except RetriesExhausted as exc:
            (out_dir / "retries.json").write_text(json.dumps(exc.attempts, indent=1))
            manifest.add(out_dir / "retries.json")
            log.error("%s", exc)
            return EXIT_RETRIES
        attempts = nxt["attempts"]
        T, seed = nxt["T"], nxt["seed"]
        manifest.notes.append(f"retry {nxt['retry']}: T = {T}, seed = {seed}")


def _save_network_file(cbc, path: Path, index: dict, manifest: RunManifest):
    save_network(cbc, path, index["certificates"])
    data = json.loads(path.read_text())
    data["benchmark"] = index.get("benchmark")
    data["params"] = index.get("params")
    path.write_text(json.dumps(data, indent=1, sort_keys=True))
    manifest.add(path)


# ---------------------------------------------------------------------------
# compose


def _load_topology(path) -> Topology:
    data = _read_json(path)
    if "edges" in data:
        return Topology.from_json(data)
    return make_topology(data["kind"], int(data["N"]), int(data["n"]), float(data.get("weight", 1.0)))


def run_compose(cert_dir: Path, topology_path, out: Path | None, manifest: RunManifest, psd_tol: float) -> int:
    index = _read_json(cert_dir / "index.json")
    cache: dict = {}
    certs = []
    for ref in index["certificates"]:
        p = cert_dir / ref
        if not p.is_file():
            raise MissingArtifact(f"missing certificate: {p}")
        if ref not in cache:
            cache[ref] = StorageCertificate.load(p)
        certs.append(cache[ref])
    top = _load_topology(topology_path) if topology_path else make_topology(
        BENCHMARKS[index["benchmark"]]["topology"], len(certs), certs[0].n)
    if top.N != len(certs) and len(cache) == 1:
        # one shared certificate serves any network size
        certs = [certs[0]] * top.N
        index = dict(index, N=top.N, certificates=[index["certificates"][0]] * top.N)
        manifest.notes.append(f"shared certificate replicated to N = {top.N}")
    t0 = time.perf_counter()
    check = check_composition(top, certs, psd_tol=psd_tol)
    manifest.stage("composition", time.perf_counter() - t0)
    print(json.dumps(check.to_json()))
    if not check.passes:
        return EXIT_COMPOSITION
    cbc = assemble_cbc(certs, check, top)
    _save_network_file(cbc, out or cert_dir / "network.json", index, manifest)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def run_verify(target: str, benchmark: str, cert_dir: Path | None, grid: int, out_dir: Path,
               manifest: RunManifest) -> int:
    reports = []
    t0 = time.perf_counter()
    grids = GridSpec(x_per_axis=grid)
    if target == "fixture":
        names = FIXTURE_IDS if benchmark == "all" else (benchmark,)
        for name in names:
            model = representative_subsystem(build_benchmark(name, 3))
            for r in verify_csc(load_fixture(name), model, grids):
                reports.append({"benchmark": name, **r.to_json()})
    else:
        if cert_dir is None:
            raise MissingArtifact("--certs is required for --target synth")
        index = _read_json(cert_dir / "index.json")
        net = build_benchmark(index["benchmark"], int(index["N"]), index.get("params"))
        seen = {}
        for i, ref in enumerate(index["certificates"]):
            if ref in seen:
                continue
            p = cert_dir / ref
            if not p.is_file():
                raise MissingArtifact(f"missing certificate: {p}")
            cert = StorageCertificate.load(p)
            members = [j for j, r in enumerate(index["certificates"]) if r == ref]
            # the widest internal-input box among members covers the others
            model = max((net.subsystems[j] for j in members),
                        key=lambda s: float(np.prod(np.subtract(s.W.hull().upper, s.W.hull().lower))))
            seen[ref] = True
            for r in verify_csc(cert, model, grids):
                reports.append({"certificate": ref, **r.to_json()})
    manifest.stage("verify", time.perf_counter() - t0)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = manifest.add(out_dir / "verification.json")
    path.write_text(json.dumps(reports, indent=1))
    for r in reports:
        tag = r.get("benchmark", r.get("certificate"))
        print(f"{tag} {r['condition']} {r['verdict']} worst_margin={r['worst_margin']:.6g}")
    return EXIT_OK if all(r["verdict"] == "pass" for r in reports) else EXIT_VERIFY_FAILED


# ---------------------------------------------------------------------------
# simulate


def write_svg_lines(path, series: list[tuple[np.ndarray, np.ndarray]], width: int = 640, height: int = 400,
                    title: str = "") -> Path:
    """Static line plot; each series is (t, y)."""
    allx = np.concatenate([s[0] for s in series])
    ally = np.concatenate([s[1] for s in series])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    pad = 40
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{pad}" y="20" font-size="14">{title}</text>',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" fill="none" stroke="black"/>']
    for k, (t, y) in enumerate(series):
        px = pad + (np.asarray(t) - x0) / (x1 - x0) * (width - 2 * pad)
        py = height - pad - (np.asarray(y) - y0) / (y1 - y0) * (height - 2 * pad)
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(px, py))
        parts.append(f'<polyline fill="none" stroke="{colors[k % len(colors)]}" stroke-width="1" points="{pts}"/>')
    parts.append(f'<text x="{pad}" y="{height - 10}" font-size="11">t in [{x0:g}, {x1:g}], '
                 f'value in [{y0:.4g}, {y1:.4g}]</text>')
    parts.append("</svg>")
    p = Path(path)
    p.write_text("\n".join(parts))
    return p


def run_simulate(args, manifest: RunManifest) -> int:
    if args.network:
        npath = Path(args.network)
        if not npath.is_file():
            raise MissingArtifact(f"missing network certificate: {npath}")
        data = json.loads(npath.read_text())
        cbc = load_network(npath)
        net = build_benchmark(data["benchmark"], cbc.N, data.get("params"))
    elif args.fixture:
        fx = load_fixture(args.fixture)
        N = args.N or 5
        cbc = fixture_network(fx, N)
        net = build_benchmark(args.fixture, N)
    else:
        raise MissingArtifact("give --network or --fixture")
    manifest.seed = args.seed
    x0 = sample_initial_states(net, args.samples, args.seed)
    t0 = time.perf_counter()
    every = max(1, int(round(args.dump_interval / args.dt)))
    rep = simulate_network_closed_loop(net, cbc, x0, args.horizon, args.dt, open_loop=args.open_loop,
                                       dump_every=every, dump_samples=range(min(args.dump_samples, args.samples)),
                                       on_divergence="mark" if args.open_loop else "raise")
    manifest.stage("simulate", time.perf_counter() - t0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.add(rep.to_csv(out / "safety.csv"))
    manifest.add(rep.dump_csv(out / "trajectories.csv"))
    summary = rep.summary()
    manifest.add(out / "safety_summary.json").write_text(json.dumps(summary, indent=1))
    if args.svg and rep.dump is not None:
        d = rep.dump
        series = [(d[d[:, 1] == s][:, 0][d[d[:, 1] == s][:, 2] == 0], d[(d[:, 1] == s) & (d[:, 2] == 0)][:, -1])
                  for s in np.unique(d[:, 1])]
        manifest.add(write_svg_lines(out / "barrier.svg", series, title="B(x(t)), subsystem 1 trajectories"))
    print(json.dumps(summary))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def _r_squared(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(resid @ resid) / ss if ss > 0 else 1.0


def run_bench(sweep: list[int], cfg: dict, out_dir: Path, manifest: RunManifest, repeats: int = 5) -> dict:
    name = cfg.get("benchmark", "duffing_binary")
    spec = BENCHMARKS[name]
    T = int(cfg.get("T", spec["T"]))
    seed = int(cfg.get("seed", 0))
    manifest.seed = seed
    st = SynthSettings.from_json(cfg.get("settings", {}))
    net_small = build_benchmark(name, 3)
    rep = representative_subsystem(net_small)
    t0 = time.perf_counter()
    groups = synthesize_network(net_small, T, float(cfg.get("tau", 0.01)),
                                NoiseSpec(float(cfg.get("phi_bar", spec["phi_bar"]))), seed, st, 1)
    cert = groups[0].cert
    manifest.stage("synthesis", time.perf_counter() - t0)
    hdeg = rep.theta.degree + st.h_extra_degree
    md = int(cert.provenance.get("attempts", [{}])[-1].get("degrees", {}).get("dissipation",
                                                                             st.dissipation_multiplier_degree))
    per = dissipation_variable_count(rep.n, T, hdeg, md)
    rows = []
    for N in sweep:
        top = make_topology(spec["topology"], N, rep.n)
        times = []
        for _ in range(repeats):
            t1 = time.perf_counter()
            chk = check_composition(top, [cert] * N)
            times.append(time.perf_counter() - t1)
        rows.append({"N": N, "compositional_vars": N * per,
                     "monolithic_vars": monolithic_variable_count(N, rep.n, rep.dictionary.M, T, hdeg, md),
                     "check_seconds": statistics.median(times), "lambda_max": chk.lambda_max, "passes": chk.passes})
    Ns = [r["N"] for r in rows]
    result = {
        "benchmark": name, "per_subsystem_vars": per, "rows": rows,
        "compositional_r2": _r_squared(Ns, [r["compositional_vars"] for r in rows]),
        "monolithic_N3": monolithic_variable_count(3, rep.n, rep.dictionary.M, T, hdeg, md),
        "compositional_N3": 3 * per,
    }
    result["monolithic_factor_N3"] = result["monolithic_N3"] / result["compositional_N3"]
    if len(rows) > 1:
        r0, r1 = rows[0], rows[-1]
        result["time_growth"] = r1["check_seconds"] / r0["check_seconds"]
        result["size_growth"] = r1["N"] / r0["N"]
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest.add(out_dir / "bench.json").write_text(json.dumps(result, indent=1))
    with manifest.add(out_dir / "bench.csv").open("w") as fh:
        fh.write("N,compositional_vars,monolithic_vars,check_seconds,lambda_max,passes\n")
        for r in rows:
            fh.write(f"{r['N']},{r['compositional_vars']},{r['monolithic_vars']},{r['check_seconds']!r},"
                     f"{r['lambda_max']!r},{int(r['passes'])}\n")
    return result


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="barrierforge")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="collect data and synthesize subsystem certificates")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None)

    c = sub.add_parser("compose", help="check compositionality and emit the network certificate")
    c.add_argument("--certs", required=True)
    c.add_argument("--topology", default=None)
    c.add_argument("--out", default=None)
    c.add_argument("--psd-tol", type=float, default=1e-8)

    v = sub.add_parser("verify", help="grid verification against the true models")
    v.add_argument("--target", choices=("fixture", "synth"), required=True)
    v.add_argument("--benchmark", default="all")
    v.add_argument("--certs", default=None)
    v.add_argument("--grid", type=int, default=50)
    v.add_argument("--out", default="verify_out")

    m = sub.add_parser("simulate", help="closed-loop network simulation")
    m.add_argument("--network", default=None)
    m.add_argument("--fixture", default=None)
    m.add_argument("--N", type=int, default=None)
    m.add_argument("--samples", type=int, default=120)
    m.add_argument("--horizon", type=float, default=20.0)
    m.add_argument("--dt", type=float, default=1e-3)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--open-loop", action="store_true")
    m.add_argument("--dump-interval", type=float, default=0.05)
    m.add_argument("--dump-samples", type=int, default=5)
    m.add_argument("--svg", action="store_true")
    m.add_argument("--out", default="simulate_out")

    b = sub.add_parser("bench", help="problem-size and composition-time sweep")
    b.add_argument("--sweep", default="7,63,255,1023")
    b.add_argument("--config", default=None)
    b.add_argument("--out", default="bench_out")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    manifest = RunManifest(command=args.command, config=getattr(args, "config", None))
    out_dir = Path(getattr(args, "out", None) or ".")
    try:
        if args.command == "synth":
            cfg = _read_json(args.config)
            out_dir = Path(args.out or cfg.get("out", "synth_out"))
            code = run_synth(cfg, out_dir, manifest)
        elif args.command == "compose":
            cert_dir = Path(args.certs)
            if not cert_dir.is_dir():
                raise MissingArtifact(f"missing certificate directory: {cert_dir}")
            out = Path(args.out) if args.out else None
            out_dir = out.parent if out else cert_dir
            code = run_compose(cert_dir, args.topology, out, manifest, args.psd_tol)
        elif args.command == "verify":
            code = run_verify(args.target, args.benchmark, Path(args.certs) if args.certs else None, args.grid,
                              out_dir, manifest)
        elif args.command == "simulate":
            code = run_simulate(args, manifest)
        else:
            cfg = _read_json(args.config) if args.config else {}
            res = run_bench([int(v) for v in args.sweep.split(",")], cfg, out_dir, manifest)
            print(json.dumps({k: v for k, v in res.items() if k != "rows"}))
            code = EXIT_OK
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (InfeasibleError, RankConditionError, ConditioningError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_INFEASIBLE
    except CompositionRefused as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_COMPOSITION
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_INFEASIBLE if args.command == "synth" else EXIT_VERIFY_FAILED
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest.write(out_dir, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
