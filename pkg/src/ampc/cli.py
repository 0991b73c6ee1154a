"""Command-line front end: synthesize value functions, simulate, compare, bench.

Exit codes: 0 success, 2 config error, 3 solver budget exhausted, 4 numeric
failure.  ``AMPC_THREADS`` caps sampling parallelism.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time

import numpy as np
import yaml

from . import converters
from .dynamics import AffineMode, GuardedMode, StageCost, SwitchedModel, SwitchingCost
from .errors import AmpcError, BudgetError, ConfigError, ModelError, NumericError
from .fitting import (
    EnergyPrior,
    QuadraticValueFunction,
    SampleBox,
    draw_samples,
    fit_quadratic,
    load_vf,
    sample_values,
    save_vf,
)
from .policy import AmpcPolicy, FcsMpcPolicy, PolicyConfig, closed_loop, greedy_policy

_SCHEMA = {
    "model": {
        "kind": None,
        "boost": {"V_dc", "L", "R_L", "C", "R_load", "v_des", "timestep_s", "topology"},
        "inverter": {"V_dc", "L1", "L2", "C", "V_load", "I_des", "omega", "timestep_s"},
        "custom": {"A", "b", "cost", "energy_prior", "timestep_s", "state_names"},
    },
    "cost": {"terminal"},
    "sampling": {"lower", "upper", "count", "seed", "remaining_horizon", "rel_gap"},
    "fit": {"lam", "psd", "alpha_nonneg", "pd_floor"},
    "policy": {"tau", "switching_cost", "u_init"},
    "simulation": {"x0", "steps"},
    "solver": {"enum_budget", "node_budget", "rel_gap"},
}

_CUSTOM_COST_KEYS = {"kind", "weights", "Q", "x_des", "C_des", "d_des"}


def load_config(path) -> dict:
    """Parse and validate a YAML run configuration; unknown keys rejected."""
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    for section, content in cfg.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        allowed = _SCHEMA[section]
        if not isinstance(content, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        for key, val in content.items():
            if key not in allowed:
                raise ConfigError(f"unknown key {section}.{key}")
            sub = allowed[key] if isinstance(allowed, dict) else None
            if isinstance(sub, set) and isinstance(val, dict):
                extra = set(val) - sub
                if extra:
                    raise ConfigError(
                        f"unknown key {section}.{key}.{sorted(extra)[0]}"
                    )
    if "model" not in cfg or "kind" not in cfg["model"]:
        raise ConfigError("config needs model.kind")
    kind = cfg["model"]["kind"]
    if kind not in ("boost", "inverter", "custom"):
        raise ConfigError(f"unknown model.kind {kind!r}")
    if kind == "custom":
        cost = cfg["model"].get("custom", {}).get("cost", {})
        extra = set(cost) - _CUSTOM_COST_KEYS
        if extra:
            raise ConfigError(f"unknown key model.custom.cost.{sorted(extra)[0]}")


def dump_config(cfg: dict) -> str:
    """Canonical serialization; parse(dump(parse(x))) is a fixed point."""
    return yaml.safe_dump(cfg, sort_keys=True)


class BuiltModel:
    """Everything the commands need about the configured plant."""

    def __init__(self, model, stage, terminal, C_des, d_des, prior, state_names, timestep_s):
        self.model = model
        self.stage = stage
        self.terminal = terminal
        self.C_des = C_des
        self.d_des = d_des
        self.prior = prior
        self.state_names = state_names
        self.timestep_s = timestep_s


def build_from_config(cfg: dict) -> BuiltModel:
    kind = cfg["model"]["kind"]
    terminal_key = cfg.get("cost", {}).get("terminal", "stage")
    if terminal_key != "stage":
        raise ConfigError("cost.terminal supports only 'stage' (terminal = stage cost)")
    if kind == "boost":
        params = converters.BoostParams(**cfg["model"].get("boost", {}))
        built = converters.build_boost(params)
        prior = converters.build_energy_prior("boost", params)
        C = np.zeros((2, 2))
        return BuiltModel(built.model, built.stage, built.stage, C, built.x_des,
                          prior, converters.boost_state_names(), params.timestep_s)
    if kind == "inverter":
        params = converters.InverterParams(**cfg["model"].get("inverter", {}))
        built = converters.build_inverter(params)
        prior = converters.build_energy_prior("inverter", params)
        return BuiltModel(built.model, built.stage, built.stage, built.C_des,
                          built.d_des, prior, built.state_names, params.timestep_s)
    return _build_custom(cfg["model"].get("custom", {}))


def _build_custom(spec: dict) -> BuiltModel:
    try:
        A_list = [np.asarray(a, dtype=float) for a in spec["A"]]
        b_list = [np.asarray(b, dtype=float) for b in spec["b"]]
        cost_spec = spec["cost"]
    except KeyError as exc:
        raise ConfigError(f"custom model needs key {exc}")
    if len(A_list) != len(b_list) or not A_list:
        raise ConfigError("custom model needs matching A and b lists")
    model = SwitchedModel(tuple(AffineMode(A, b) for A, b in zip(A_list, b_list)))
    n = model.n
    kw = {}
    for key in ("x_des", "C_des", "d_des"):
        if key in cost_spec:
            kw[key] = np.asarray(cost_spec[key], dtype=float)
    kind = cost_spec.get("kind", "l1")
    if kind == "l1":
        stage = StageCost.weighted_l1(np.asarray(cost_spec["weights"], dtype=float), **kw)
    elif kind == "quadratic":
        stage = StageCost.quadratic(np.asarray(cost_spec["Q"], dtype=float), **kw)
    else:
        raise ConfigError(f"unknown cost kind {kind!r}")
    prior_mat = np.asarray(spec.get("energy_prior", np.zeros((n, n))), dtype=float)
    names = tuple(spec.get("state_names", [f"x{i}" for i in range(n)]))
    if len(names) != n:
        raise ConfigError("state_names length does not match model dimension")
    return BuiltModel(model, stage, stage, stage.C_des, stage.d_des,
                      EnergyPrior(prior_mat), names, float(spec.get("timestep_s", 1.0)))


def _switching_from_config(cfg: dict, K: int):
    pol = cfg.get("policy", {})
    val = pol.get("switching_cost", 0.0)
    u_init = int(pol.get("u_init", 1))
    if isinstance(val, (int, float)):
        if val == 0:
            return None
        return SwitchingCost.constant(K, float(val), u_init)
    return SwitchingCost(np.asarray(val, dtype=float), u_init)


def _sample_box(cfg: dict, n: int, seed_override=None) -> SampleBox:
    s = cfg.get("sampling")
    if not s:
        raise ConfigError("sampling section required")
    seed = seed_override if seed_override is not None else s.get("seed", 0)
    box = SampleBox(
        lower=np.asarray(s["lower"], dtype=float),
        upper=np.asarray(s["upper"], dtype=float),
        count=int(s["count"]),
        seed=int(seed),
    )
    if box.n != n:
        raise ConfigError(f"sampling box dimension {box.n} does not match model {n}")
    return box


def cmd_synth(cfg: dict, out, seed_override=None, report_stream=sys.stdout) -> str:
    built = build_from_config(cfg)
    s = cfg.get("sampling", {})
    fit_cfg = cfg.get("fit", {})
    box = _sample_box(cfg, built.model.n, seed_override)
    rel_gap = float(s.get("rel_gap", 0.01))
    horizon = int(s.get("remaining_horizon", 14))
    solver_cfg = cfg.get("solver", {})
    points = draw_samples(box)
    t0 = time.perf_counter()
    samples = sample_values(
        points, built.model, built.stage, built.terminal, horizon, rel_gap,
        enum_budget=int(solver_cfg.get("enum_budget", 10_000_000)),
        node_budget=int(solver_cfg.get("node_budget", 2_000_000)),
    )
    sample_time = time.perf_counter() - t0
    n_bad = sum(1 for smp in samples if not smp.certified)
    if n_bad:
        report_stream.write(
            f"synthesis refused: {n_bad}/{len(samples)} value solves exhausted the "
            f"node budget (worst achieved gap "
            f"{max(smp.gap for smp in samples if not smp.certified):.3g}); "
            "raise solver.node_budget or lower sampling.remaining_horizon\n"
        )
        raise BudgetError(f"{n_bad} uncertified value samples")
    lam = float(fit_cfg.get("lam", 100.0))
    vf, rep = fit_quadratic(
        samples, built.prior, lam,
        psd_constrained=bool(fit_cfg.get("psd", False)),
        C_des=built.C_des, d_des=built.d_des,
        alpha_nonneg=bool(fit_cfg.get("alpha_nonneg", False)),
        pd_floor=float(fit_cfg.get("pd_floor", 0.0)),
    )
    out = out or "vf.json"
    save_vf(out, vf, lam=lam, seed=box.seed, sample_count=box.count, fit_mse=rep.mse)
    gaps = [smp.gap for smp in samples]
    eigs = np.linalg.eigvalsh(vf.P)
    report_stream.write(
        f"samples: {len(samples)} (horizon {horizon}, rel_gap {rel_gap}, "
        f"{sample_time:.1f} s)\n"
        f"gaps: min {min(gaps):.3g} mean {sum(gaps)/len(gaps):.3g} max {max(gaps):.3g}\n"
        f"fit: lambda {lam}, mse {rep.mse:.6g}, alpha {vf.alpha:.6g}, "
        f"iterations {rep.iterations}\n"
        f"P eigenvalues: {' '.join(format(e, '.6g') for e in eigs)}\n"
        f"artifact: {out}\n"
    )
    return out


def _load_vf_checked(vf_path, built: BuiltModel) -> QuadraticValueFunction:
    if vf_path is None:
        raise ConfigError("--vf <artifact> is required for this command")
    vf, _ = load_vf(vf_path)
    if vf.n != built.model.n:
        raise ConfigError(
            f"value function dimension {vf.n} does not match model {built.model.n}"
        )
    return vf


def make_policy(kind: str, built: BuiltModel, cfg: dict, vf):
    pol_cfg = cfg.get("policy", {})
    tau = int(pol_cfg.get("tau", 1))
    switching = _switching_from_config(cfg, built.model.K)
    solver_cfg = cfg.get("solver", {})
    if kind == "ampc":
        pc = PolicyConfig(tau=tau, vf=vf, stage=built.stage, switching=switching)
        return AmpcPolicy(built.model, pc)
    if kind == "greedy":
        return greedy_policy(built.model, built.stage, tau=tau, switching=switching)
    if kind.startswith("fcs-mpc:"):
        horizon = int(kind.split(":", 1)[1])
        return FcsMpcPolicy(
            built.model, built.stage, built.terminal, horizon, switching=switching,
            rel_gap=float(solver_cfg.get("rel_gap", 0.01)),
            enum_budget=int(solver_cfg.get("enum_budget", 10_000_000)),
            node_budget=int(solver_cfg.get("node_budget", 2_000_000)),
        )
    raise ConfigError(f"unknown policy kind {kind!r} (ampc | greedy | fcs-mpc:T)")


def _run_closed_loop(built: BuiltModel, policy, cfg: dict):
    sim = cfg.get("simulation", {})
    if "x0" not in sim or "steps" not in sim:
        raise ConfigError("simulation section needs x0 and steps")
    switching = _switching_from_config(cfg, built.model.K)
    u_init = int(cfg.get("policy", {}).get("u_init", 1))
    return closed_loop(
        built.model, policy, np.asarray(sim["x0"], dtype=float),
        int(sim["steps"]), u_init=u_init, stage=built.stage, switching=switching,
    )


def write_trajectory_csv(path, built: BuiltModel, result) -> None:
    steps = len(result.inputs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["t_index", "time_s"] + list(built.state_names)
            + ["input", "stage_cost", "switching_cost", "decision_latency_us"]
        )
        for t in range(steps + 1):
            row = [t, repr(t * built.timestep_s)]
            row += [repr(float(v)) for v in result.states[t]]
            if t < steps:
                row += [
                    int(result.inputs[t]),
                    repr(float(result.stage_costs[t])),
                    repr(float(result.switching_costs[t])),
                    repr(float(result.latencies_us[t])),
                ]
            else:
                row += ["", "", "", ""]
            w.writerow(row)


def cmd_simulate(cfg: dict, vf_path, policy_kind: str, out) -> str:
    built = build_from_config(cfg)
    vf = None
    if policy_kind == "ampc":
        vf = _load_vf_checked(vf_path, built)
    policy = make_policy(policy_kind, built, cfg, vf)
    result = _run_closed_loop(built, policy, cfg)
    out = out or "trajectory.csv"
    write_trajectory_csv(out, built, result)
    return out


def cmd_eval(cfg: dict, vf_path, policy_kinds, out) -> str:
    built = build_from_config(cfg)
    rows = []
    for kind in policy_kinds:
        vf = _load_vf_checked(vf_path, built) if kind == "ampc" else None
        policy = make_policy(kind, built, cfg, vf)
        result = _run_closed_loop(built, policy, cfg)
        rows.append((kind, result.avg_stage_cost, result.avg_switching_cost))
    out = out or "comparison.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy", "avg_stage_cost", "avg_switching_cost"])
        for kind, g_avg, sw_avg in rows:
            w.writerow([kind, repr(g_avg), repr(sw_avg)])
    return out


def _quadraticized(built: BuiltModel):
    """Unguarded, quadratic-cost stand-in used only to time the fast paths."""
    modes = tuple(
        m.mode_if_ge if isinstance(m, GuardedMode) else m for m in built.model.modes
    )
    model = SwitchedModel(modes)
    stage = built.stage
    if stage.kind != "quadratic":
        stage = StageCost.quadratic(
            np.diag(stage.weights), C_des=stage.C_des, d_des=stage.d_des
        )
    return model, stage


def _time_decisions(policy, states, u_init=1):
    out = np.empty(len(states))
    for i, z in enumerate(states):
        t0 = time.perf_counter()
        policy.decide(z, u_init)
        out[i] = (time.perf_counter() - t0) * 1e6
    return out


def cmd_bench(cfg: dict, vf_path, out, n_eval: int = 10_000, repeats: int = 3,
              seed: int = 0) -> str:
    built = build_from_config(cfg)
    vf = _load_vf_checked(vf_path, built)
    rng = np.random.default_rng(seed)
    scale = np.maximum(np.abs(built.d_des), 1.0)
    states = rng.uniform(-1.0, 1.0, (n_eval, built.model.n)) * scale
    switching = _switching_from_config(cfg, built.model.K)
    tau = int(cfg.get("policy", {}).get("tau", 1))

    paths = {}
    pc = PolicyConfig(tau=tau, vf=vf, stage=built.stage, switching=switching)
    paths["general"] = AmpcPolicy(built.model, pc, path="general")
    qmodel, qstage = _quadraticized(built)
    qc = PolicyConfig(tau=tau, vf=vf, stage=qstage, switching=switching)
    paths["precomputed"] = AmpcPolicy(qmodel, qc, path="precomputed")
    if qmodel.has_common_A and tau == 1:
        paths["one-step"] = AmpcPolicy(qmodel, qc, path="one-step")

    lines = [f"decision latency over {n_eval} random states, {repeats} repeats"]
    if qmodel is not built.model or qstage is not built.stage:
        lines.append(
            "note: precomputed/one-step paths are timed on the unguarded "
            "quadratic-cost variant of the configured model"
        )
    for name, policy in paths.items():
        medians, p99s = [], []
        for _ in range(repeats):
            lat = _time_decisions(policy, states)
            medians.append(float(np.median(lat)))
            p99s.append(float(np.percentile(lat, 99)))
        spread = statistics.pstdev(medians)
        lines.append(
            f"{name}: median {min(medians):.3f} us (repeat spread {spread:.3f}), "
            f"p99 {min(p99s):.3f} us"
        )
    report = "\n".join(lines) + "\n"
    out = out or "bench.txt"
    with open(out, "w") as fh:
        fh.write(report)
    sys.stdout.write(report)
    return out


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ampc",
        description="Approximate-MPC synthesis and closed-loop simulation "
        "for switched-mode power converters.",
    )
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("synth", "sample the value function and fit the quadratic surrogate"),
        ("simulate", "run one closed-loop simulation, write a trajectory CSV"),
        ("eval", "compare policies, write an average-cost table"),
        ("bench", "measure decision latency per policy path"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--vf", help="value-function artifact path")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="override the sampling/bench seed")
        if name in ("simulate", "eval"):
            p.add_argument(
                "--policy", action="append", default=None,
                help="policy kind: ampc | greedy | fcs-mpc:T (repeatable for eval)",
            )
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "synth":
            cmd_synth(cfg, args.out, seed_override=args.seed)
        elif args.command == "simulate":
            kinds = args.policy or ["ampc"]
            if len(kinds) != 1:
                raise ConfigError("simulate takes exactly one --policy")
            cmd_simulate(cfg, args.vf, kinds[0], args.out)
        elif args.command == "eval":
            cmd_eval(cfg, args.vf, args.policy or ["ampc"], args.out)
        elif args.command == "bench":
            cmd_bench(cfg, args.vf, args.out, seed=args.seed or 0)
    except (ConfigError, ModelError) as exc:
        print(f"ampc: config error: {exc}", file=sys.stderr)
        return 2
    except BudgetError as exc:
        print(f"ampc: solver budget: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"ampc: numeric failure: {exc}", file=sys.stderr)
        return 4
    except AmpcError as exc:
        print(f"ampc: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
