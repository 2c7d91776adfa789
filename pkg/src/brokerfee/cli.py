"""Batch front-end: config parsing, mode dispatch, artifact persistence.

Configs are flat ``key = value`` text files with dotted prefixes for
sections (model.*, family.*, run.*). Every run writes a manifest listing
each output file with a SHA-256 content hash, the echoed config, and the
master seed, plus a human-readable summary. All randomness flows from the
single master seed through the documented splitting function, so a rerun
with the same config reproduces bit-identical outputs.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import agent, contracts, oracle, principal, simulate
from .model import (FeedbackPolicy, ModelParams, params_from_config,
                    params_to_config)
from .rng import split_seed

__all__ = ["ExperimentConfig", "parse_config", "run", "main"]

MODES = ("simulate", "agent", "oracle", "optimize", "verify", "report")

_FAMILY_KEYS = ("class", "cap", "degree", "operator", "gamma",
                "holder_const", "p_nodes", "z_nodes", "coefficients")
_RUN_KEYS = ("mode", "budget", "out", "trials", "depth", "branching",
             "lam", "mc_count")


@dataclass(frozen=True)
class ExperimentConfig:
    params: ModelParams
    family: dict
    run: dict

    def __post_init__(self):
        if self.run.get("mode") not in MODES:
            raise ValueError(f"run.mode must be one of {MODES}")

    def echo(self) -> dict:
        out = params_to_config(self.params)
        out.update({f"family.{k}": v for k, v in self.family.items()})
        out.update({f"run.{k}": v for k, v in self.run.items()})
        return out


def _parse_list(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def parse_config(path) -> ExperimentConfig:
    """Parse a flat dotted key-value config; errors cite line and key."""
    model_items, family, run = {}, {}, {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value, "
                                 f"got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                if key.startswith("model."):
                    model_items[key] = value
                elif key.startswith("family."):
                    name = key[len("family."):]
                    if name not in _FAMILY_KEYS:
                        raise ValueError(f"unknown family key: {name}")
                    family[name] = value
                elif key.startswith("run."):
                    name = key[len("run."):]
                    if name not in _RUN_KEYS:
                        raise ValueError(f"unknown run key: {name}")
                    run[name] = value
                else:
                    raise ValueError(f"unknown config section for key: {key}")
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    params = params_from_config(model_items) if model_items else ModelParams()
    return ExperimentConfig(params, family, run)


def _family_from_config(config: ExperimentConfig) -> principal.ContractFamily:
    fam = config.family
    kind = fam.get("class", "constant")
    kwargs = {"kind": kind, "cap": float(fam.get("cap", 1.0))}
    if "degree" in fam:
        kwargs["degree"] = int(fam["degree"])
    if "operator" in fam:
        kwargs["operator"] = fam["operator"]
    if "gamma" in fam:
        kwargs["gamma"] = float(fam["gamma"])
    if "holder_const" in fam:
        kwargs["holder_const"] = float(fam["holder_const"])
    if "p_nodes" in fam:
        kwargs["p_nodes"] = np.array(_parse_list(fam["p_nodes"]))
    if "z_nodes" in fam:
        kwargs["z_nodes"] = np.array(_parse_list(fam["z_nodes"]))
    return principal.ContractFamily(**kwargs)


def _contract_from_config(config: ExperimentConfig):
    family = _family_from_config(config)
    coeffs = np.array(_parse_list(config.family.get("coefficients", "0")))
    theta = np.zeros(family.dimension)
    theta[:len(coeffs)] = coeffs[:family.dimension]
    return family.make(theta)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in row])


def _fmt(value):
    return repr(float(value))


def _mode_simulate(config, out_dir, seed, lines):
    """Reference-measure batch, density normalization, entropy identity."""
    params = config.params
    rows = []
    for label, rate in (("lower", params.rate_lower), ("zero", 0.0),
                        ("upper", params.rate_upper)):
        policy = FeedbackPolicy.constant(rate, params)
        batch = simulate.simulate_reference(params, params.n_paths,
                                            split_seed(seed, f"sim-{label}"))
        weighted = simulate.girsanov_weights(batch, policy, params)
        mean, se = simulate._mean_se(weighted.m)
        report = simulate.entropy_report(weighted, params)
        rows.append([label, _fmt(rate), _fmt(mean), _fmt(se),
                     _fmt(report.lhs), _fmt(report.lhs_se),
                     _fmt(report.rhs), _fmt(report.rhs_se)])
        lines.append(f"policy {label}: E[m] = {mean:.6f} (se {se:.2g}), "
                     f"entropy gap {report.gap:.3g}")
    _write_csv(os.path.join(out_dir, "girsanov.csv"),
               ["policy", "rate", "mean_density", "se",
                "entropy_lhs", "entropy_lhs_se", "entropy_rhs",
                "entropy_rhs_se"], rows)
    return ["girsanov.csv"]


def _mode_agent(config, out_dir, seed, lines):
    params = config.params
    contract = _contract_from_config(config)
    response = agent.best_response(contract, params, seed=seed)
    mc_value, mc_se = agent.estimate_agent_value(
        contract, response.policy, params, params.n_paths,
        split_seed(seed, "agent-mc"))
    value_path = os.path.join(out_dir, "value.csv")
    policy_path = os.path.join(out_dir, "policy.csv")
    outputs = ["agent.csv"]
    if response.grid is not None:
        response.grid.to_csv(value_path)
        outputs.append("value.csv")
    agent.policy_to_csv(response.policy, policy_path)
    outputs.append("policy.csv")
    _write_csv(os.path.join(out_dir, "agent.csv"),
               ["quantity", "value"],
               [["value", _fmt(response.value)],
                ["value_se", _fmt(response.value_se)],
                ["mc_value", _fmt(mc_value)],
                ["mc_se", _fmt(mc_se)],
                ["converged", int(response.converged)]])
    lines.append(f"agent value {response.value:.6f}, "
                 f"Monte Carlo check {mc_value:.6f} (se {mc_se:.2g})")
    return outputs


def _mode_oracle(config, out_dir, seed, lines):
    params = config.params
    depth = int(config.run.get("depth", 2))
    branching = int(config.run.get("branching", 2))
    lam = float(config.run.get("lam",
                               2 * params.epsilon**2 * params.phi_a))
    trials = int(config.run.get("trials", 100))
    tree = oracle.build_tree(depth, branching, params)
    contract = _contract_from_config(config)
    u = oracle.atom_utility_from_contract(tree, contract, params)
    constraints = oracle.node_constraint_set(tree, params.rate_lower,
                                             params.rate_upper)
    strong = oracle.solve_strong_discrete(tree, u, lam, constraints)
    grid = oracle.default_density_grid(strong.density)
    relaxed_value, control = oracle.solve_relaxed_discrete(
        tree, u, lam, grid, constraints)
    collapse = oracle.verify_collapse(tree, u, lam, trials,
                                      split_seed(seed, "collapse"),
                                      constraints)
    extraction = oracle.extract_strong_control(
        tree, control, params.rate_lower, params.rate_upper)
    rows = [
        ["strong_value", _fmt(strong.value)],
        ["relaxed_value", _fmt(relaxed_value)],
        ["value_gap", _fmt(abs(relaxed_value - strong.value))],
        ["kkt_residual", _fmt(strong.kkt_residual)],
        ["collapse_counterexamples", len(collapse.counterexamples)],
        ["min_jensen_gap", _fmt(collapse.min_jensen_gap)],
        ["relaxed_is_dirac", int(collapse.relaxed_is_dirac)],
        ["max_constraint_violation", _fmt(extraction.max_violation)],
        ["reconstruction_error", _fmt(extraction.reconstruction_error)],
    ]
    _write_csv(os.path.join(out_dir, "oracle.csv"), ["quantity", "value"],
               rows)
    lines.append(f"tree depth {depth} branching {branching}: strong "
                 f"{strong.value:.8f}, relaxed {relaxed_value:.8f}, "
                 f"gap {abs(relaxed_value - strong.value):.2e}")
    return ["oracle.csv"]


def _mode_optimize(config, out_dir, seed, lines):
    params = config.params
    family = _family_from_config(config)
    budget = int(config.run.get("budget", 200))
    mc_count = config.run.get("mc_count")
    best, sequence = principal.optimize(
        family, params, budget,
        mc_count=int(mc_count) if mc_count else None, seed=seed)
    sequence.to_csv(os.path.join(out_dir, "sequence.csv"))
    sequence.to_json(os.path.join(out_dir, "sequence.json"))
    contracts.save_contract(os.path.join(out_dir, "best_contract.json"), best)
    report = principal.convergence_report(sequence)
    _write_csv(os.path.join(out_dir, "convergence.csv"),
               ["quantity", "value"],
               [["n_updates", report.n_updates],
                ["cauchy_tail", _fmt(report.cauchy_tail)],
                ["limit_value", _fmt(report.limit_value)]]
               + [[f"limit_coef_{k}", _fmt(v)]
                  for k, v in enumerate(report.limit_point)])
    lines.append(f"optimize: {len(sequence)} evaluations, "
                 + report.summary())
    return ["sequence.csv", "sequence.json", "best_contract.json",
            "convergence.csv"]


def _mode_verify(config, out_dir, seed, lines):
    """Invariant battery: density normalization, entropy identity,
    constraint moments, and the discrete oracle equalities."""
    params = config.params
    checks = []

    policy = FeedbackPolicy.constant(0.5 * (params.rate_lower
                                            + params.rate_upper), params)
    batch = simulate.girsanov_weights(
        simulate.simulate_reference(params, params.n_paths,
                                    split_seed(seed, "verify-sim")),
        policy, params)
    mean, se = simulate._mean_se(batch.m)
    checks.append(("girsanov_normalization", abs(mean - 1.0) <= 3 * se,
                   f"|E[m]-1| = {abs(mean - 1.0):.2e}, 3se = {3 * se:.2e}"))

    report = simulate.entropy_report(batch, params)
    checks.append(("entropy_identity",
                   abs(report.gap) <= 3 * report.combined_se,
                   f"gap = {report.gap:.2e}, "
                   f"3se = {3 * report.combined_se:.2e}"))

    from .model import ConstraintSpec
    spec = ConstraintSpec.from_params(params)
    worst = -np.inf
    for eta in simulate.eta_family(params.horizon):
        moments = simulate.constraint_moments(batch, eta, spec)
        worst = max(worst, float(np.max(moments.estimates
                                        - 3 * moments.ses)))
    checks.append(("constraint_moments", worst <= 0.0,
                   f"max (estimate - 3se) = {worst:.2e}"))

    tree = oracle.build_tree(2, 2, params)
    contract = _contract_from_config(config)
    u = oracle.atom_utility_from_contract(tree, contract, params)
    lam = 2 * params.epsilon**2 * params.phi_a
    strong = oracle.solve_strong_discrete(tree, u, lam)
    grid = oracle.default_density_grid(strong.density)
    relaxed_value, control = oracle.solve_relaxed_discrete(tree, u, lam, grid)
    gap = abs(relaxed_value - strong.value)
    checks.append(("oracle_value_equality", gap <= 1e-8,
                   f"|relaxed - strong| = {gap:.2e}"))
    checks.append(("oracle_collapse", control.is_dirac(1e-6),
                   f"max secondary weight = "
                   f"{control.max_secondary_weight():.2e}"))

    rows = []
    for name, passed, detail in checks:
        rows.append([name, "pass" if passed else "FAIL", detail])
        lines.append(f"{name}: {'pass' if passed else 'FAIL'} ({detail})")
    _write_csv(os.path.join(out_dir, "verify.csv"),
               ["check", "status", "detail"], rows)
    return ["verify.csv"]


def _mode_report(config, out_dir, seed, lines):
    """Closed-form reference table for the configured parameters."""
    params = config.params
    t4 = params.horizon**4
    rows = [
        ["agent_value_zero_fee", _fmt(t4 / (48 * params.phi_a))],
        ["expected_rate_energy", _fmt(t4 / (48 * params.phi_a**2))],
        ["binding_constant_fee",
         _fmt(t4 / (48 * params.phi_a) - params.reservation)],
        ["principal_value",
         _fmt(t4 / (48 * params.phi_a) - params.reservation
              - params.phi_p * t4 / (48 * params.phi_a**2))],
    ]
    _write_csv(os.path.join(out_dir, "report.csv"), ["quantity", "value"],
               rows)
    lines.append("closed-form reference table written "
                 "(valid when the rate bounds are non-binding)")
    return ["report.csv"]


_MODE_RUNNERS = {
    "simulate": _mode_simulate,
    "agent": _mode_agent,
    "oracle": _mode_oracle,
    "optimize": _mode_optimize,
    "verify": _mode_verify,
    "report": _mode_report,
}


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def run(config_path, threads: int = 1, seed=None, out_dir=None) -> int:
    """Execute one configured run; returns a process exit status."""
    try:
        config = parse_config(config_path)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    mode = config.run["mode"]
    if seed is not None:
        from dataclasses import replace
        config = ExperimentConfig(replace(config.params, seed=int(seed)),
                                  config.family, config.run)
    master_seed = config.params.seed
    out_dir = out_dir or config.run.get("out", "results")
    os.makedirs(out_dir, exist_ok=True)

    lines = [f"mode: {mode}", f"seed: {master_seed}", f"threads: {threads}"]
    try:
        outputs = _MODE_RUNNERS[mode](config, out_dir, master_seed, lines)
    except Exception as exc:
        print(f"{mode} failed: {exc}", file=sys.stderr)
        return 1

    summary_path = os.path.join(out_dir, "summary.txt")
    with open(summary_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    outputs.append("summary.txt")

    manifest = {
        "mode": mode,
        "seed": master_seed,
        "threads": threads,
        "config": {k: str(v) for k, v in config.echo().items()},
        "outputs": {name: _sha256(os.path.join(out_dir, name))
                    for name in sorted(outputs)},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    print("\n".join(lines))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="brokerfee",
        description="Brokerage-fee contract solver and verification suite")
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", required=True)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)

    # the positional mode overrides whatever the config file says
    try:
        config = parse_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if config.run.get("mode") != args.mode:
        import tempfile
        items = config.echo()
        items["run.mode"] = args.mode
        with tempfile.NamedTemporaryFile(
                "w", suffix=".cfg", delete=False) as fh:
            for key, value in items.items():
                fh.write(f"{key} = {value}\n")
            tmp_path = fh.name
        status = run(tmp_path, args.threads, args.seed, args.out)
        os.unlink(tmp_path)
        return status
    return run(args.config, args.threads, args.seed, args.out)


if __name__ == "__main__":
    sys.exit(main())
