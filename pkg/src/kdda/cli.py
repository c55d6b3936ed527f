"""Command line entry point: gen-data, run, matrix, report."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace

from . import evalharness as eh
from . import pipelines as pl
from .models import save_checkpoint
from .synthdata import clinic_by_name, default_clinics, generate_domain, load_dataset, save_dataset

log = logging.getLogger("kdda")

SCENARIOS = {
    "lbound": eh.L_BOUND,
    "ubound": eh.U_BOUND,
    "ada": eh.ADA,
    "kd": eh.KD,
    "kd-on-ada": eh.KD_ON_ADA,
    "fly-kd": eh.FLY_KD,
    "fly-ada": eh.FLY_ADA,
}
# keys read by the harness itself; everything else goes to TrainConfig
HARNESS_KEYS = ("methods", "workers", "n_subjects", "all_pairs")


def parse_seeds(text: str) -> list[int]:
    """'1..5' or '1,3,7' or a mix such as '1..3,9'."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = (int(v) for v in part.split(".."))
            if hi < lo:
                raise ValueError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


def parse_method(name: str) -> str:
    name = name.strip()
    if name in SCENARIOS:
        return SCENARIOS[name]
    if name in eh.METHODS:
        return name
    raise ValueError(f"unknown method {name!r}")


def load_config(path: str | None) -> tuple[pl.TrainConfig, dict]:
    """(training config, harness options) from a key=value file."""
    opts = {"methods": list(eh.DEFAULT_METHODS), "workers": 1,
            "n_subjects": eh.SUBJECTS_PER_CLINIC, "all_pairs": False}
    if path is None:
        return pl.desk_config(), opts
    with open(path) as f:
        text = f.read()
    rest = []
    for line in text.splitlines():
        key = line.split("#", 1)[0].split("=", 1)[0].strip()
        if key in HARNESS_KEYS:
            value = line.split("#", 1)[0].split("=", 1)[1].strip()
            if key == "methods":
                opts[key] = [parse_method(m) for m in value.split(",")]
            elif key == "all_pairs":
                opts[key] = value.lower() in ("1", "true", "yes", "on")
            else:
                opts[key] = int(value)
        else:
            rest.append(line)
    return pl.parse_config("\n".join(rest), pl.desk_config()), opts


def cmd_gen_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    for spec in default_clinics():
        ds = generate_domain(spec, args.n, args.seed)
        path = os.path.join(args.out, f"{spec.domain_id}.sdda")
        save_dataset(ds, path)
        print(f"wrote {path} ({len(ds)} subjects, checksum {ds.checksum()[:12]})")
    return 0


def _dump_model(out: str, name: str, model: pl.TrainedModel) -> None:
    save_checkpoint(model.params, os.path.join(out, f"{name}.ckpt"), extra={"provenance": model.provenance})
    with open(os.path.join(out, f"{name}.json"), "w") as f:
        json.dump({"provenance": model.provenance, "loss_curve": model.loss_curve,
                   "checksum": model.params.checksum()}, f, indent=2, sort_keys=True)


def cmd_run(args) -> int:
    cfg, opts = load_config(args.config)
    train, test = clinic_by_name(args.train_clinic), clinic_by_name(args.test_clinic)
    if train.domain_id == test.domain_id:
        raise ValueError("train and test clinic must differ")
    method = SCENARIOS[args.scenario]
    data = None
    if args.data:
        data = (load_dataset(os.path.join(args.data, f"{train.domain_id}.sdda")),
                load_dataset(os.path.join(args.data, f"{test.domain_id}.sdda")))
    rows, audit, models = eh.run_cell(train, test, args.seed, (method,), cfg,
                                      opts["n_subjects"], keep_models=True, data=data)
    run = eh.aggregate(rows, config={"train": replace(cfg, seed=args.seed).as_dict(),
                                     "scenario": method}, audit=[audit])
    eh.write_outputs(run, args.out)
    for key, model in sorted(models.items(), key=lambda kv: str(kv[0])):
        _, _, _, fold, name = key
        tag = name if fold is None else f"{name}-fold{fold}"
        _dump_model(args.out, tag, model)
    for r in run.results:
        print(f"{r.train_clinic}->{r.test_clinic} {r.method}: mean dice {r.mean:.4f} (var {r.variance:.4f})")
    return 0


def cmd_matrix(args) -> int:
    cfg, opts = load_config(args.config)
    workers = args.workers or opts["workers"]
    start = time.perf_counter()
    run = eh.run_matrix(default_clinics(), opts["methods"], parse_seeds(args.seeds), cfg,
                        workers=workers, n_subjects=opts["n_subjects"], all_pairs=opts["all_pairs"])
    csv_path, json_path = eh.write_outputs(run, args.out)
    print(f"wrote {csv_path} and {json_path} in {time.perf_counter() - start:.1f}s")
    for f in run.review_flags():
        print(f"warning: U-bound below L-bound on {f['train']}->{f['test']}; review seed sensitivity",
              file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    with open(os.path.join(args.inp, "results.csv")) as f:
        run = eh.aggregate(eh.rows_from_csv(f.read()), all_pairs=args.all_pairs)
    if args.format == "json":
        summary = run.summary()
        del summary["config"], summary["audit"]
        json.dump(summary, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
        return 0
    print("train,test,method,n,mean,variance")
    for r in run.results:
        print(f"{r.train_clinic},{r.test_clinic},{r.method},{len(r.per_subject_dice)},{r.mean:.6f},{r.variance:.6f}")
    for t in run.tests:
        print(f"# {t.train}->{t.test} {t.method_a} vs {t.method_b}: t={t.t_statistic:.4f} p={t.p_value:.3g}")
    for f in run.review_flags():
        print(f"# review {f['train']}->{f['test']}: U-bound {f['u_bound']:.4f} < L-bound {f['l_bound']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdda", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write one dataset file per clinic")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n", type=int, default=eh.SUBJECTS_PER_CLINIC)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="one scenario on one clinic pair")
    r.add_argument("--scenario", choices=sorted(SCENARIOS), required=True)
    r.add_argument("--train-clinic", required=True)
    r.add_argument("--test-clinic", required=True)
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--config")
    r.add_argument("--data", help="directory written by gen-data (default: generate from --seed)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("matrix", help="every method on every ordered clinic pair")
    m.add_argument("--config")
    m.add_argument("--seeds", default="1..5")
    m.add_argument("--workers", type=int, default=0, help="parallel cells (default: config or 1)")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_matrix)

    rep = sub.add_parser("report", help="summarise a results.csv")
    rep.add_argument("--in", dest="inp", required=True)
    rep.add_argument("--format", choices=("csv", "json"), default="csv")
    rep.add_argument("--all-pairs", action="store_true")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # report any failure as a diagnostic and nonzero exit
        print(f"kdda {args.command}: error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
