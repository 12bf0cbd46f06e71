"""Command-line front end.

    lagconsensus certify       --config run.cfg
    lagconsensus simulate      --preset example1 --seed 3 --out runs/a
    lagconsensus montecarlo    --preset example2_strong --trials 20
    lagconsensus reproduce     example1
    lagconsensus dump-matrices --config run.cfg

Config files are flat ``key = value`` text (``#`` starts a comment). Command
line flags and ``--set key=value`` override the file, which overrides the
preset, which overrides the defaults.

Exit codes: 0 ok / certified, 1 config error, 2 certificate fails,
3 certificate inapplicable, 4 simulation diverged.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import analysis, graph as gr, schedule as sch
from .dynamics import get_dynamics
from .errorsys import CouplingGains, NoiseIntensities
from .simulate import (MODES, Problem, ScheduleSpec, SimConfig, SimulationDivergence,
                       fit_decay_rate, monte_carlo, msq_csv, simulate, trajectory_csvs)

log = logging.getLogger("lagconsensus")

EXIT_OK, EXIT_CONFIG, EXIT_FAIL, EXIT_INAPPLICABLE, EXIT_DIVERGED = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    graph: str = "example1"          # example1 | smallworld | path to a matrix file
    graph_n: int = 50
    graph_k: int = 4
    graph_p: float = 0.1
    graph_seed: int = 2024
    graph_weight: float = 1.0
    kappa: str = "1:6,2:6"           # full list "k1,k2,..." or 1-based "agent:gain" pairs
    sigma: str = "adjacency"         # adjacency | zero | path to a matrix file
    c1: float = 0.2
    c2: float = 0.2
    beta1: float = 0.2
    beta2: float = 0.2
    dynamics: str = "chua"
    dim: int | None = None           # state dimension, only used by "zero"
    rho1: float | None = None
    rho2: float | None = None
    schedule: str = "random"         # random | always
    theta: float = 0.3
    delta: float = 1.0
    fresh_schedule: bool = True
    dt: float = 1e-3
    horizon: float = 15.0
    tau: float = 1.0
    trials: int = 50
    seed: int = 0
    init_low: float = 0.0
    init_high: float = 1.0
    mode: str = "closed_loop"
    every: int = 10                  # CSV downsampling factor

    def canonical(self) -> str:
        return "".join(f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _render(v) -> str:
    if v is None:
        return "default"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


PRESETS: dict[str, dict[str, str]] = {
    "example1": dict(graph="example1", kappa="1:6,2:6", c1="0.2", c2="0.2", beta1="0.2",
                     beta2="0.2", dynamics="chua", tau="1", theta="0.3", delta="1.0",
                     horizon="15", trials="50", dt="1e-3"),
    "example2_weak": dict(graph="smallworld", graph_n="50", graph_k="4", graph_p="0.1",
                          graph_seed="2024", kappa="1:1.7", c1="1", c2="1", beta1="0.9",
                          beta2="0.9", dynamics="pendulum", tau="2", theta="0.3",
                          delta="1.0", horizon="30", trials="20", dt="1e-3"),
}
PRESETS["example2_strong"] = dict(PRESETS["example2_weak"], kappa="1:5.5")


def _parse_value(name: str, raw: str, typ):
    raw = raw.strip()
    if "None" in str(typ) and raw.lower() in ("", "default", "none"):
        return None
    try:
        if "bool" in str(typ):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if "int" in str(typ):
            return int(raw)
        if "float" in str(typ):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def parse_kv(text: str, origin: str = "config") -> dict[str, str]:
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{no}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(*layers: dict[str, str]) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    vals = {}
    for layer in layers:
        for k, v in layer.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            vals[k] = _parse_value(k, v, types[k])
    cfg = RunConfig(**vals)
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if cfg.schedule not in ("random", "always"):
        raise ConfigError("schedule must be 'random' or 'always'")
    return cfg


# --------------------------------------------------------------------------- assembly


def make_graph(cfg: RunConfig) -> gr.WeightedDigraph:
    if cfg.graph == "example1":
        return gr.example1_graph()
    if cfg.graph == "smallworld":
        return gr.small_world_digraph(cfg.graph_n, cfg.graph_k, cfg.graph_p, cfg.graph_seed,
                                      cfg.graph_weight)
    path = Path(cfg.graph)
    if not path.is_file():
        raise ConfigError(f"graph file {path} not found")
    return gr.load_graph(path)


def parse_kappa(spec: str, n: int) -> np.ndarray:
    spec = spec.strip()
    kap = np.zeros(n)
    if not spec or spec.lower() == "none":
        return kap
    items = [s.strip() for s in spec.split(",") if s.strip()]
    try:
        if all(":" in s for s in items):
            for s in items:
                i, v = s.split(":")
                i = int(i)
                if not 1 <= i <= n:
                    raise ConfigError(f"kappa: agent {i} outside 1..{n}")
                kap[i - 1] = float(v)
            return kap
        vals = np.array([float(s) for s in items])
    except ValueError:
        raise ConfigError(f"kappa: cannot parse {spec!r}") from None
    if vals.size != n:
        raise ConfigError(f"kappa lists {vals.size} gains for {n} agents")
    return vals


def make_sigma(cfg: RunConfig, g: gr.WeightedDigraph) -> gr.NoiseTopology:
    if cfg.sigma == "adjacency":
        return gr.NoiseTopology.from_adjacency(g)
    if cfg.sigma == "zero":
        return gr.NoiseTopology(np.zeros_like(g.a))
    path = Path(cfg.sigma)
    if not path.is_file():
        raise ConfigError(f"sigma file {path} not found")
    t = gr.NoiseTopology(gr.load_matrix(path))
    t.check_support(g)
    return t


def make_problem(cfg: RunConfig) -> Problem:
    g = make_graph(cfg)
    pin = gr.PinningConfig(parse_kappa(cfg.kappa, g.n))
    sigma = make_sigma(cfg, g)
    dyn = get_dynamics(cfg.dynamics, cfg.dim, rho1=cfg.rho1, rho2=cfg.rho2)
    prob = Problem(g, pin, CouplingGains(cfg.c1, cfg.c2), NoiseIntensities(cfg.beta1, cfg.beta2),
                   dyn, sigma)
    prob.laplacians  # validate shapes early
    if not gr.has_leader_spanning_tree(g, pin):
        log.warning("no directed spanning tree rooted at the leader; lag consensus cannot hold")
    return prob


def sim_config(cfg: RunConfig) -> SimConfig:
    return SimConfig(dt=cfg.dt, horizon=cfg.horizon, tau=cfg.tau, trials=cfg.trials, seed=cfg.seed,
                     init_box=(cfg.init_low, cfg.init_high), mode=cfg.mode,
                     fresh_schedule=cfg.fresh_schedule)


def schedule_spec(cfg: RunConfig) -> ScheduleSpec:
    return ScheduleSpec(cfg.schedule, cfg.theta, cfg.delta)


def schedule_bounds(cfg: RunConfig) -> tuple[float, float]:
    # an always-active schedule has no failure: theta = delta
    return (cfg.horizon, cfg.horizon) if cfg.schedule == "always" else (cfg.theta, cfg.delta)


# --------------------------------------------------------------------------- commands


class Output:
    """Collects written files and finishes every run with ``manifest.txt``."""

    def __init__(self, out: Path, cfg: RunConfig):
        self.dir = out
        self.cfg = cfg
        self.files: list[Path] = []
        out.mkdir(parents=True, exist_ok=True)

    def text(self, name: str, body: str) -> Path:
        p = self.dir / name
        p.write_text(body)
        self.files.append(p)
        return p

    def add(self, *paths) -> None:
        self.files.extend(Path(p) for p in paths)

    def manifest(self) -> Path:
        self.text("config.txt", self.cfg.canonical())
        lines = [f"config_sha256 {self.cfg.hash()}", f"seed {self.cfg.seed}", "files"]
        for p in sorted(set(self.files), key=lambda q: q.name):
            lines.append(f"  {p.name} {hashlib.sha256(p.read_bytes()).hexdigest()}")
        path = self.dir / "manifest.txt"
        path.write_text("\n".join(lines) + "\n")
        return path


def _certificate(cfg: RunConfig, prob: Problem):
    theta, delta = schedule_bounds(cfg)
    d = prob.dynamics
    return analysis.certify(prob.laplacians, prob.gains, prob.noise, d.rho1, d.rho2, theta, delta)


def _cert_exit(cert) -> int:
    return {"certified": EXIT_OK, "failed": EXIT_FAIL, "inapplicable": EXIT_INAPPLICABLE}[cert.verdict]


def cmd_certify(cfg: RunConfig, out: Output) -> int:
    prob = make_problem(cfg)
    cert = _certificate(cfg, prob)
    out.text("certificate.txt", cert.report())
    out.text("certificate.csv", cert.csv_row())
    print(f"certificate: {cert.verdict} (gamma={cert.gamma:.6g}, margin={cert.margin_ii:.6g})")
    return _cert_exit(cert)


def cmd_simulate(cfg: RunConfig, out: Output) -> int:
    prob = make_problem(cfg)
    tr = simulate(prob, schedule_spec(cfg), sim_config(cfg), cfg.seed)
    out.add(*trajectory_csvs(tr, out.dir, cfg.every))
    final = tr.xi_norm()[-1]
    lines = [f"mode = {tr.mode}", f"final_xi_norm = {final:.12e}", f"diverged = {tr.diverged}"]
    if tr.diverged:
        lines.append(f"divergence_time = {tr.divergence_time:.12e}")
    out.text("report.txt", "\n".join(lines) + "\n")
    print(f"simulate: |xi(T)| = {final:.6g}" + (" (diverged)" if tr.diverged else ""))
    return EXIT_DIVERGED if tr.diverged else EXIT_OK


def _mc_lines(mc) -> list[str]:
    lines = [f"trials = {mc.trials}", f"used = {mc.used}", f"divergent = {mc.divergent}"]
    if mc.used:
        fit = fit_decay_rate(mc)
        lines += [f"msq_xi_initial = {mc.msq_xi[0]:.12e}", f"msq_xi_final = {mc.msq_xi[-1]:.12e}",
                  f"msq_pos_final = {mc.msq_pos[-1]:.12e}", f"msq_vel_final = {mc.msq_vel[-1]:.12e}",
                  f"decay_ratio = {mc.decay_ratio:.12e}", f"decay_rate = {fit.rate:.12e}",
                  f"decay_fit_r2 = {fit.r2:.12e}"]
    lines += [f"divergence_time = {t:.12e}" for t in mc.divergence_times]
    return lines


def cmd_montecarlo(cfg: RunConfig, out: Output) -> int:
    prob = make_problem(cfg)
    mc = monte_carlo(prob, schedule_spec(cfg), sim_config(cfg))
    out.add(msq_csv(mc, out.dir / "msq.csv", cfg.every))
    out.text("report.txt", "\n".join(_mc_lines(mc)) + "\n")
    print(f"montecarlo: ratio {mc.decay_ratio:.4g}, divergent {mc.divergent}/{mc.trials}")
    return EXIT_DIVERGED if mc.divergent else EXIT_OK


def cmd_reproduce(cfg: RunConfig, out: Output) -> int:
    """Certificate plus Monte Carlo. The exit code reflects the simulation only."""
    prob = make_problem(cfg)
    cert = _certificate(cfg, prob)
    out.text("certificate.txt", cert.report())
    out.text("certificate.csv", cert.csv_row())
    mc = monte_carlo(prob, schedule_spec(cfg), sim_config(cfg))
    out.add(msq_csv(mc, out.dir / "msq.csv", cfg.every))
    out.text("report.txt", "\n".join([f"certificate = {cert.verdict}"] + _mc_lines(mc)) + "\n")
    print(f"reproduce: certificate {cert.verdict}; ratio {mc.decay_ratio:.4g}, "
          f"divergent {mc.divergent}/{mc.trials}")
    return EXIT_DIVERGED if mc.divergent else EXIT_OK


def cmd_dump(cfg: RunConfig, out: Output) -> int:
    prob = make_problem(cfg)
    s = prob.system
    for name, m in (("H1", s.H1), ("H2", s.H2), ("U", s.U), ("D", s.D), ("Ltilde", s.Ltilde)):
        p = out.dir / f"{name}.txt"
        gr.save_matrix(p, m)
        out.add(p)
    print(f"dump-matrices: wrote {len(out.files)} matrices to {out.dir}")
    return EXIT_OK


COMMANDS = {"certify": cmd_certify, "simulate": cmd_simulate, "montecarlo": cmd_montecarlo,
            "reproduce": cmd_reproduce, "dump-matrices": cmd_dump}


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lagconsensus", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("name", nargs="?", help="preset name (reproduce only)")
    ap.add_argument("--config", type=Path)
    ap.add_argument("--preset", choices=sorted(PRESETS))
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", type=Path)
    ap.add_argument("--trials", type=int)
    ap.add_argument("--dt", type=float)
    ap.add_argument("--mode", choices=MODES)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve(args) -> RunConfig:
    layers = []
    preset = args.preset
    if args.command == "reproduce":
        if args.name is None:
            raise ConfigError(f"reproduce needs a preset name: {sorted(PRESETS)}")
        preset = args.name
    elif args.name is not None:
        raise ConfigError(f"unexpected argument {args.name!r}")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        layers.append(PRESETS[preset])
    if args.config is not None:
        try:
            layers.append(parse_kv(args.config.read_text(), str(args.config)))
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
    layers.append(parse_kv("\n".join(args.set), "--set"))
    flags = {k: str(getattr(args, k)) for k in ("seed", "trials", "dt", "mode")
             if getattr(args, k) is not None}
    layers.append(flags)
    return build_config(*layers)


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = Output(args.out or Path("runs") / (args.name or args.preset or args.command), cfg)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        code = COMMANDS[args.command](cfg, out)
    except (ConfigError, gr.GraphError, sch.ScheduleError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationDivergence as e:
        print(f"diverged: {e}", file=sys.stderr)
        code = EXIT_DIVERGED
    except ValueError as e:
        # domain checks of the owning modules (gains, dt vs theta, unknown dynamics, ...)
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out.manifest()
    return code


if __name__ == "__main__":
    sys.exit(main())
