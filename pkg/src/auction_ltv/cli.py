"""Command line entry point: ``auction-ltv {verify,train,ab,sweep}``.

Every subcommand exits with status 1 when an invariant check fails and 2 on
invalid input.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dp_oracle as dp
from . import experiment as ex
from .auction import TableScoring
from .env import TabularMDP
from .sarsa import save_checkpoint, write_curve


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    overrides = {}
    if getattr(args, "seeds", None) is not None:
        overrides["n_seeds"] = args.seeds
    if getattr(args, "seed", None) is not None:
        overrides["base_seed"] = args.seed
    if getattr(args, "periods", None) is not None:
        overrides["n_periods"] = args.periods
    if getattr(args, "alpha", None) is not None:
        overrides["policy"] = {"kind": "modified", "alpha": args.alpha}
    if overrides:
        raw = cfg.to_dict()
        raw.update(overrides)
        cfg = ex.ExperimentConfig.from_dict(raw)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_verify(args) -> int:
    if args.mdp:
        mdp = TabularMDP.from_csv(args.mdp, args.rewards, args.gamma)
        f = TableScoring.from_csv(args.scores, mdp.n_states, mdp.n_actions - 1).table()
        rep = dp.verify_improvement(mdp, f, args.alpha, tol=args.tol)
        rep.to_csv(_out(args) / "margins.csv")
        print(f"alpha={args.alpha} changed_states={int(rep.changed.sum())} violations={len(rep.violations)}")
        return 0 if rep.ok else 1

    failed = False
    suite = dp.improvement_suite(args.instances, (0.25, 0.5, 0.96), seed=args.seed)
    line = f"improvement: {suite.n_checks} checks, {suite.n_changed_states} changed states, " \
           f"{len(suite.violations)} violations"
    print(("PASS " if suite.ok else "FAIL ") + line)
    failed |= not suite.ok

    bad = dp.endpoint_suite(args.instances, seed=args.seed)
    print(("PASS " if not bad else "FAIL ") + f"endpoints: {len(bad)} mismatches")
    failed |= bool(bad)

    gap = dp.evaluation_suite(50, seed=args.seed)
    print(("PASS " if gap <= 1e-8 else "FAIL ") + f"evaluation: max |iterative - linear| = {gap:.3e}")
    failed |= gap > 1e-8

    ops = dp.operator_suite(1000, seed=args.seed)
    ok = ops["contraction_failures"] == 0 and ops["monotonicity_failures"] == 0
    print(("PASS " if ok else "FAIL ") + f"operators: {json.dumps(ops)}")
    failed |= not ok

    if args.out:
        with open(_out(args) / "verify.json", "w") as fh:
            json.dump({"improvement_violations": suite.violations, "endpoint_mismatches": bad,
                       "evaluation_gap": gap, "operators": ops}, fh, indent=2)
    return 1 if failed else 0


def cmd_train(args) -> int:
    cfg = _config(args)
    q, curve = ex.train_online(cfg, cfg.base_seed, periods=args.periods_total, eval_every=args.eval_every)
    out = _out(args)
    save_checkpoint(q, out / "q_checkpoint.npz")
    write_curve(curve, out / "training_curve.csv")
    if curve:
        step, loss, err = curve[-1]
        print(f"step={step} loss={loss:.4f} eval_error={err:.4f}")
    finite = all(np.isfinite(p).all() for p in q.params())
    return 0 if finite else 1


def _check_table(result: ex.ABResult) -> list:
    problems = []
    for r in result.daily + result.weekly:
        if not 0.0 <= r.conversion_rate <= 1.0:
            problems.append(("rate-range", r))
        if r.impressions and abs(r.conversion_rate - r.conversions / r.impressions) > 1e-12:
            problems.append(("rate-consistency", r))
    return problems


def cmd_ab(args) -> int:
    cfg = _config(args)
    result = ex.run_ab(cfg, workers=args.workers)
    ex.report(result, _out(args))
    for metric in ("conversions", "rate", "impressions"):
        s = result.summary(metric)
        print(f"lift_{metric}: mean={s['mean']:+.4f} 95% CI=[{s['ci_low']:+.4f}, {s['ci_high']:+.4f}] n={s['n']}")
    print(f"mean contribution fraction: {result.mean_contribution:.4f} (cap {ex.CONTRIBUTION_CAP})")
    problems = _check_table(result)
    for kind, row in problems[:10]:
        print(f"FAIL {kind}: {row}", file=sys.stderr)
    return 1 if problems else 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    alphas = [float(a) for a in args.alphas.split(",")]
    rows = ex.sweep_alpha(cfg, alphas, workers=args.workers)
    ex.write_sweep(rows, _out(args) / "sweep.csv")
    for r in rows:
        print(f"alpha={r.alpha:.2f} lift={r.mean_lift_conversions:+.4f} "
              f"CI=[{r.ci_low:+.4f}, {r.ci_high:+.4f}] contribution={r.mean_contribution:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="auction-ltv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="exact DP checks of the policy improvement guarantee")
    v.add_argument("--instances", type=int, default=200)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default=None)
    v.add_argument("--mdp", help="transitions CSV (s,a,s_next,prob) of a single instance")
    v.add_argument("--rewards", help="rewards CSV (s,a,r_bar)")
    v.add_argument("--scores", help="scoring CSV (state_id,item_id,bid,ecvr)")
    v.add_argument("--gamma", type=float, default=0.8)
    v.add_argument("--alpha", type=float, default=0.96)
    v.add_argument("--tol", type=float, default=1e-9)
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", help="fit Q-hat with SARSA on simulated base-policy traffic")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--periods-total", type=int, default=None)
    t.add_argument("--eval-every", type=int, default=100)
    t.add_argument("--out", default="out/train")
    t.set_defaults(func=cmd_train)

    for name, func, hlp in (("ab", cmd_ab, "seeded A/B simulation"), ("sweep", cmd_sweep, "A/B runs over alphas")):
        a = sub.add_parser(name, help=hlp)
        a.add_argument("--config")
        a.add_argument("--seed", type=int, help="first seed")
        a.add_argument("--seeds", type=int, help="number of seeds")
        a.add_argument("--periods", type=int)
        a.add_argument("--workers", type=int, default=1)
        a.add_argument("--out", default=f"out/{name}")
        if name == "ab":
            a.add_argument("--alpha", type=float)
        else:
            a.add_argument("--alphas", default="0,0.5,0.9,0.96,1")
        a.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
