"""Command-line front-end: ``jtransnet <command> [options]``.

Exit codes: 0 success, 1 invalid spec or arguments, 2 numeric failure, 3 I/O.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .auction import InstanceError
from .autodiff import AutodiffError
from .baselines import VcgMechanism
from .evaluator import evaluate
from .experiment import (
    ExperimentSpec, append_rows, generate_dataset, load_checkpoint, load_spec, read_jsonl, read_rows,
    result_row, run, save_checkpoint, train_model, write_jsonl, SpecError,
)
from .feasibility import SAMPLERS, infeasibility_survey
from .model import JTransNetMechanism
from .trainer import TrainingError

EXIT_OK, EXIT_SPEC, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("jtransnet")


def _spec(args) -> ExperimentSpec:
    spec = load_spec(args.spec) if args.spec else ExperimentSpec.from_dict({"setting": "A"})
    if getattr(args, "seed", None) is not None:
        spec = spec.with_seed(args.seed)
    if getattr(args, "tau", None) is not None:
        spec.train = replace(spec.train, tau=args.tau)
    return spec


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(spec: ExperimentSpec, out: Path, split: str):
    path = out / f"{split}.jsonl"
    return read_jsonl(path) if path.exists() else generate_dataset(spec, split)


def cmd_gen(args) -> int:
    spec, out = _spec(args), _out(args)
    for split in ("train", "test"):
        write_jsonl(generate_dataset(spec, split), out / f"{split}.jsonl")
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2))
    print(f"wrote {spec.train_size} train and {spec.test_size} test profiles to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    spec, out = _spec(args), _out(args)
    data = _dataset(spec, out, "train")
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.jtnc"
    with open(out / "train_log.jsonl", "w") as fh:
        def record(entry):
            fh.write(json.dumps(entry.as_dict()) + "\n")
            if spec.train.log_every and entry.t % spec.train.log_every == 0:
                fh.flush()
        trainer = train_model(spec, data, record)
    st = trainer.state
    save_checkpoint(st.params, ckpt, spec.config, {"iteration": st.t, "seed": spec.train.seed},
                    st.lambda_brand, st.lambda_store)
    print(f"trained {st.t} iterations; checkpoint at {ckpt}")
    return EXIT_OK


def _report(spec, out, method, mechanism, args) -> int:
    test = _dataset(spec, out, "test")
    rep = evaluate(mechanism, test.brand, test.store, spec.test_grid)
    append_rows(out / "results.csv", [result_row(spec.name, method, rep)])
    print(json.dumps(rep.row(), indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    spec, out = _spec(args), _out(args)
    if not args.checkpoint:
        raise SpecError("eval needs --checkpoint")
    ck = load_checkpoint(args.checkpoint, spec.config)
    params = ck.params
    if args.tau is not None:
        params = replace(params, tau=args.tau)
    name = "JTransNet" if args.mode == "hard" else "JTransNet-soft"
    return _report(spec, out, name, JTransNetMechanism(params, spec.config, args.mode), args)


def cmd_vcg(args) -> int:
    spec, out = _spec(args), _out(args)
    return _report(spec, out, "VCG", VcgMechanism(spec.config), args)


def cmd_run(args) -> int:
    spec, out = _spec(args), _out(args)
    res = run(spec, out, train=not args.baseline_only)
    _print_table(res.rows)
    return EXIT_OK


def cmd_feas_survey(args) -> int:
    frac = infeasibility_survey(args.C, args.K, args.samples, args.sampler, args.seed)
    row = {"C": args.C, "K": args.K, "samples": args.samples, "infeasible_fraction": frac}
    fields = list(row)
    if args.out:
        path = Path(args.out)
        if path.suffix != ".csv":
            path.mkdir(parents=True, exist_ok=True)
            path = path / "feasibility.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            if new:
                w.writeheader()
            w.writerow(row)
    w = csv.DictWriter(sys.stdout, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerow(row)
    return EXIT_OK


def _fmt(v) -> str:
    try:
        return f"{float(v):.4f}" if v not in ("", None) else "-"
    except ValueError:
        return str(v)


def _print_table(rows) -> None:
    cols = ["setting", "method", "rev", "sw", "rgt", "p_value"]
    print("| " + " | ".join(cols) + " |")
    print("|" + "---|" * len(cols))
    for r in rows:
        rgt = "-" if r["method"] == "VCG" else _fmt(r["rgt"])
        p = r.get("p_value", "")
        p = "-" if p in ("", None) else f"{float(p):.3g}"
        print(f"| {r['setting']} | {r['method']} | {_fmt(r['rev'])} | {_fmt(r['sw'])} | {rgt} | {p} |")


def cmd_report(args) -> int:
    path = Path(args.out) / "results.csv"
    _print_table(read_rows(path))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jtransnet", description="Joint auction mechanism learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False, mode=False, tau=False):
        sp.add_argument("--spec", help="experiment spec (JSON); defaults to Setting A")
        sp.add_argument("--seed", type=int, help="override the spec seed")
        sp.add_argument("--out", default="runs", help="output directory")
        if checkpoint:
            sp.add_argument("--checkpoint", help="checkpoint file")
        if mode:
            sp.add_argument("--mode", choices=("soft", "hard"), default="hard")
        if tau:
            sp.add_argument("--tau", type=float, help="sort-relaxation temperature")

    common(sub.add_parser("gen", help="generate train/test value profiles"))
    common(sub.add_parser("train", help="train JTransNet and save a checkpoint"), checkpoint=True, tau=True)
    common(sub.add_parser("eval", help="evaluate a checkpoint on the test set"), checkpoint=True, mode=True, tau=True)
    common(sub.add_parser("vcg", help="evaluate the VCG baseline on the test set"))
    r = sub.add_parser("run", help="VCG, training and evaluation end to end")
    common(r, tau=True)
    r.add_argument("--baseline-only", action="store_true", help="skip training; VCG row only")

    f = sub.add_parser("feas-survey", help="fraction of sampled allocation matrices without a lottery")
    f.add_argument("--C", type=int, default=3, help="number of bundles")
    f.add_argument("--K", type=int, default=2, help="number of slots")
    f.add_argument("--samples", type=int, default=1000)
    f.add_argument("--sampler", choices=sorted(SAMPLERS), default="uniform")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", help="CSV file or directory to append to")

    rp = sub.add_parser("report", help="print the results table")
    rp.add_argument("--out", default="runs", help="directory holding results.csv")
    return p


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "vcg": cmd_vcg, "run": cmd_run,
    "feas-survey": cmd_feas_survey, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_SPEC
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (TrainingError, AutodiffError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SpecError, InstanceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
