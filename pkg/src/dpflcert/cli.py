"""Command-line entry point: ``dpflcert <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .attacks import AttackSpec, poison_federation
from .data import partition_iid
from .errors import DPFLError
from .fedsim import ALGORITHMS, CLIPPING, accountant_report, accuracy, train
from .models import build_model, save_checkpoint

# flag name -> (field, type)
_FED_FLAGS = {
    "users": ("n_users", int), "user_rate": ("user_rate", float), "rounds": ("rounds", int),
    "local_epochs": ("local_epochs", int), "local_steps": ("local_steps", int), "lr": ("lr", float),
    "batch_fraction": ("batch_fraction", float), "clip": ("clip", float), "noise": ("noise", float),
    "delta": ("delta", float), "clipping": ("clipping", str), "algorithm": ("algorithm", str),
    "momentum": ("momentum", float), "weight_decay": ("weight_decay", float),
}
_PLAN_FLAGS = {
    "repetitions": ("repetitions", int), "cost_repetitions": ("cost_repetitions", int),
    "psi": ("psi", float), "seed": ("base_seed", int), "c_bar": ("c_bar", float),
    "pattern": ("pattern", str),
}
_LIST_FLAGS = {"sigmas": float, "cost_sigmas": float, "kinds": str, "ks": int, "gammas": float,
               "fractions": float, "taus": float, "k_list": int}


def _csv_list(kind):
    return lambda text: [kind(t) for t in text.split(",") if t.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON plan file; flags override its fields")
    p.add_argument("--out", default="runs", help="output root (default: %(default)s)")
    g = p.add_argument_group("federation")
    g.add_argument("--users", type=int)
    g.add_argument("--user-rate", type=float)
    g.add_argument("--rounds", type=int)
    g.add_argument("--local-epochs", type=int)
    g.add_argument("--local-steps", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-fraction", type=float)
    g.add_argument("--clip", type=float)
    g.add_argument("--noise", type=float)
    g.add_argument("--delta", type=float)
    g.add_argument("--clipping", choices=CLIPPING)
    g.add_argument("--algorithm", choices=ALGORITHMS)
    g.add_argument("--momentum", type=float)
    g.add_argument("--weight-decay", type=float)
    g = p.add_argument_group("plan")
    g.add_argument("--repetitions", type=int, help="ensemble size O")
    g.add_argument("--cost-repetitions", type=int)
    g.add_argument("--psi", type=float)
    g.add_argument("--seed", type=int, help="base seed")
    g.add_argument("--c-bar", type=float)
    g.add_argument("--pattern", help="trigger as 'index:value,...'")
    for name, kind in _LIST_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), type=_csv_list(kind))
    g = p.add_argument_group("data")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--separation", type=float)
    g.add_argument("--data-seed", type=int)
    g.add_argument("--workers", type=int, help=f"parallel runs (default: ${harness.WORKERS_ENV} or 1)")


def _add_attack(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("attack")
    g.add_argument("--attack", choices=("LF", "BKD", "DBA"))
    g.add_argument("--k", type=int, default=0)
    g.add_argument("--scale", type=float, default=1.0)
    g.add_argument("--poison-fraction", type=float, default=1.0)
    g.add_argument("--target-label", type=int, default=0)
    g.add_argument("--source-class", type=int, default=1)


def build_plan(args: argparse.Namespace) -> harness.ExperimentPlan:
    raw = harness.load_plan_file(args.config) if args.config else {}
    fed = dict(raw.pop("federation", {}))
    data = dict(raw.pop("data", {}))
    fed.setdefault("n_users", 20)
    for flag, (name, _) in _FED_FLAGS.items():
        if getattr(args, flag, None) is not None:
            fed[name] = getattr(args, flag)
    for flag, (name, _) in _PLAN_FLAGS.items():
        if getattr(args, flag, None) is not None:
            raw[name] = getattr(args, flag)
    for name in _LIST_FLAGS:
        if getattr(args, name, None) is not None:
            raw[name] = getattr(args, name)
    for flag, name in (("n_train", "n_train"), ("n_test", "n_test"), ("dim", "dim"),
                       ("separation", "separation"), ("data_seed", "seed")):
        if getattr(args, flag, None) is not None:
            data[name] = getattr(args, flag)
    if "sigmas" not in raw and "noise" in fed:
        raw["sigmas"] = [fed["noise"]]
    return harness.ExperimentPlan.from_dict({"federation": fed, "data": data, **raw})


def _attack(args, plan: harness.ExperimentPlan) -> AttackSpec | None:
    if not getattr(args, "attack", None) or args.k == 0:
        return None
    return AttackSpec(args.attack, args.k, args.poison_fraction, args.scale, plan.trigger(),
                      args.target_label, args.source_class)


def _spec(args, plan: harness.ExperimentPlan, repetitions: int) -> harness.EnsembleSpec:
    spec = harness._specs(plan, plan.federation.noise, repetitions)
    return replace(spec, attack=_attack(args, plan))


def cmd_data(args) -> int:
    plan = build_plan(args)
    tr, te = plan.data.load()
    out = Path(args.out) / "data"
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in (("train", tr), ("test", te)):
        np.savez(out / f"{name}.npz", features=ds.features, labels=ds.labels,
                 num_classes=ds.num_classes)
    part = partition_iid(tr, plan.federation.n_users, plan.data.seed)
    (out / "partition.json").write_text(json.dumps(
        {"strategy": part.strategy, "users": [idx.tolist() for idx in part.user_indices]}))
    print(f"train {len(tr)} test {len(te)} users {part.n_users} -> {out}")
    return 0


def cmd_train(args) -> int:
    plan = build_plan(args)
    tr, te = plan.data.load()
    model = build_model(plan.model_config(tr.dim, tr.num_classes))
    view = poison_federation(tr, partition_iid(tr, plan.federation.n_users, plan.data.seed),
                             _attack(args, plan))
    config = plan.federation.replace(seed=harness.child_seed(plan.base_seed, 0))
    result = train(config, view, model)
    out = Path(args.out) / "train"
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", result.params, model)
    record = {**result.metadata(), "test_accuracy": accuracy(model, result.params, te)}
    (out / "record.json").write_text(json.dumps(record, indent=1, default=float))
    print(f"test accuracy {record['test_accuracy']:.4f}  epsilon {result.report.epsilon:.6g}")
    return 0


def cmd_ensemble(args) -> int:
    plan = build_plan(args)
    ens = harness.run_ensemble(args.out, _spec(args, plan, plan.repetitions), args.workers)
    print(f"{ens.directory}: {ens.repetitions} runs ({ens.trained} trained, "
          f"{ens.repetitions - ens.trained} resumed)")
    return 0


def cmd_accountant(args) -> int:
    plan = build_plan(args)
    rep = accountant_report(plan.federation, user_subsampling=not args.no_user_subsampling)
    if args.json:
        print(json.dumps(rep.to_dict(), sort_keys=True))
    else:
        print(f"epsilon {rep.epsilon:.6g} at delta {rep.delta:g} ({rep.level}-level, "
              f"{rep.rounds} rounds, order {rep.optimal_order})")
    return 0


def cmd_certify_pred(args) -> int:
    plan = build_plan(args)
    spec = _spec(args, plan, plan.repetitions)
    ens = harness.load_ensemble(args.out, spec) if args.no_train else harness.run_ensemble(
        args.out, spec, args.workers)
    table = harness.certify_prediction(ens, plan.k_list, plan.psi)
    paths = harness.write_prediction_table(table, ens.directory / "tables", "prediction")
    for k, a in table.accuracy_rows:
        print(f"k={k}\tcertified accuracy {a:.4f}")
    print("wrote", *paths)
    return 0


def cmd_certify_cost(args) -> int:
    plan = build_plan(args)
    spec = _spec(args, plan, plan.cost_repetitions)
    clean = harness.run_ensemble(args.out, replace(spec, attack=None), args.workers)
    pred = harness.certify_prediction(clean, plan.k_list, plan.psi)
    rows = harness.certify_cost(args.out, clean, harness.cells_for(plan), plan, pred, args.workers)
    path = harness.write_csv(clean.directory / "tables" / "cost.csv", harness.cost_header(plan.taus), rows)
    print("wrote", path)
    return 0


def cmd_sweep(args) -> int:
    plan = build_plan(args)
    result = harness.sweep(args.out, plan, args.workers, with_cost=not args.no_cost)
    for sigma, eps, acc, k in result.tradeoff:
        print(f"sigma {sigma:g}\tepsilon {eps:.4g}\tclean acc {acc:.4f}\tlargest certified k {k}")
    if args.report:
        harness.report(args.out)
    return 0


def cmd_report(args) -> int:
    for path in harness.report(args.out):
        print("wrote", path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpflcert", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data", help="materialize the dataset and its user partition")
    _add_common(p)
    p.set_defaults(func=cmd_data)

    p = sub.add_parser("train", help="train one model")
    _add_common(p)
    _add_attack(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ensemble", help="train (or resume) an ensemble of O models")
    _add_common(p)
    _add_attack(p)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("accountant", help="privacy loss without training")
    _add_common(p)
    p.add_argument("--no-user-subsampling", action="store_true",
                   help="instance level: ignore amplification from user sampling")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_accountant)

    p = sub.add_parser("certify-pred", help="certified prediction for an ensemble")
    _add_common(p)
    _add_attack(p)
    p.add_argument("--no-train", action="store_true", help="fail instead of training missing runs")
    p.set_defaults(func=cmd_certify_pred)

    p = sub.add_parser("certify-cost", help="certified attack cost over the attack grid")
    _add_common(p)
    p.set_defaults(func=cmd_certify_cost)

    p = sub.add_parser("sweep", help="sigma sweep with prediction and cost certificates")
    _add_common(p)
    p.add_argument("--no-cost", action="store_true", help="skip the attack grid")
    p.add_argument("--report", action="store_true", help="render figures afterwards")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="merge sweep tables into plot data and figures")
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DPFLError as exc:
        print(f"dpflcert: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
