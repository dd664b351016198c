"""Command-line entry point.

Subcommands: gen-synthetic, train, eval, ablate, export. Exit codes are a
stable contract: 0 success, 1 I/O or file-format problems, 2 usage errors,
3 numeric divergence. All randomness funnels through --seed; every run
echoes its fully resolved configuration into the output JSON.
"""

import argparse
import csv
import dataclasses
import hashlib
import json
import sys

import numpy as np

from .bank import SyntheticSpec, gen_synthetic, load_bank, sample_episode, save_bank
from .errors import ConfigError, DivergenceError, GraphteachError, SamplingError
from .losses import LossWeights
from .student import identity_model, load_student, save_student
from .trainer import (
    ABLATION_ARMS,
    TrainConfig,
    run_ablation,
    train,
)

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

LOSS_FIELDS = {"alpha", "delta", "lam", "gamma_focal", "tau"}


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _add_train_flags(p):
    p.add_argument("--profile", choices=["desk", "paper"], default="desk",
                   help="architecture preset: small desk-scale teacher or the "
                        "full-size one (3+3 layers, 16 heads)")
    p.add_argument("--config", help="JSON file with TrainConfig fields; "
                                    "explicit flags override it")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--cache-beta", dest="cache_beta", type=float)
    p.add_argument("--keep-frac", dest="keep_frac", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--enc-layers", dest="enc_layers", type=int)
    p.add_argument("--enc-heads", dest="enc_heads", type=int)
    p.add_argument("--mgt-layers", dest="mgt_layers", type=int)
    p.add_argument("--mgt-heads", dest="mgt_heads", type=int)
    p.add_argument("--jitter", type=float)
    p.add_argument("--grid-mode", dest="grid_mode",
                   choices=["multiscale", "grid2x2", "grid3x3", "global_only"])
    p.add_argument("--alpha", type=float, help="cache branch weight")
    p.add_argument("--delta", type=float, help="teacher branch weight")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="focal teacher-forcing weight")
    p.add_argument("--gamma-focal", dest="gamma_focal", type=float)
    p.add_argument("--tau", type=float, help="logit temperature")
    p.add_argument("--no-mgt", action="store_true")
    p.add_argument("--no-text-edges", action="store_true")
    p.add_argument("--no-filter", action="store_true")
    p.add_argument("--no-validation-select", action="store_true")
    p.add_argument("--no-teacher-select", action="store_true",
                   help="skip the validation-based choice between the "
                        "graph-supervised student and its reduction")
    p.add_argument("--no-diagnostics", action="store_true")


def _resolve_config(args, seed):
    data = (TrainConfig.desk() if args.profile == "desk"
            else TrainConfig()).to_dict()
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        loss = data.pop("loss")
        loss.update(file_cfg.pop("loss", {}))
        data.update(file_cfg)
        data["loss"] = loss
    for name in ("lr", "epochs", "weight_decay", "cache_beta", "keep_frac",
                 "hidden", "enc_layers", "enc_heads", "mgt_layers", "mgt_heads",
                 "jitter", "grid_mode"):
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    for name in LOSS_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            data["loss"][name] = value
    if args.no_mgt:
        data["use_mgt"] = False
    if args.no_text_edges:
        data["use_text_edges"] = False
    if args.no_filter:
        data["use_filter"] = False
    if args.no_validation_select:
        data["select_on_validation"] = False
    if args.no_teacher_select:
        data["select_teacher_on_validation"] = False
    if args.no_diagnostics:
        data["diagnostics"] = False
    data["seed"] = seed
    cfg = TrainConfig.from_dict(data)
    cfg.validate()
    return cfg


def cmd_gen_synthetic(args):
    spec = SyntheticSpec(
        num_classes=args.classes, dim=args.dim, patches_per_image=args.patches,
        foreground_count=args.foreground, sigma_fg=args.sigma_f,
        sigma_bg=args.sigma_b, sigma_text=args.sigma_t,
        images_per_class=args.images_per_class, seed=args.seed)
    bank = gen_synthetic(spec)
    save_bank(bank, args.out)
    print(f"wrote {args.out}: {bank.num_images} images, C={bank.num_classes}, "
          f"D={bank.dim}, M={bank.patches_per_image}")
    print(f"sha256 {_sha256(args.out)}")
    return EXIT_OK


def cmd_train(args):
    bank = load_bank(args.bank)
    config = _resolve_config(args, args.seed)
    episode = sample_episode(bank, args.shots, seed=args.seed)
    model, _, metrics = train(bank, episode, config)
    save_student(model, args.out)
    if args.metrics_csv:
        metrics.write_csv(args.metrics_csv)
    json_path = args.metrics_json or (args.out + ".json")
    summary = metrics.summary()
    summary["shots"] = args.shots
    summary["student_file"] = args.out
    summary["student_sha256"] = _sha256(args.out)
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.out} ({summary['student_sha256'][:12]}...) "
          f"query accuracy {metrics.query_accuracy:.4f} mode {metrics.mode}")
    return EXIT_OK


def cmd_eval(args):
    model = load_student(args.model)
    if args.alpha is not None or args.beta is not None or args.tau is not None:
        model = dataclasses.replace(
            model,
            alpha=model.alpha if args.alpha is None else args.alpha,
            beta=model.beta if args.beta is None else args.beta,
            tau=model.tau if args.tau is None else args.tau)
    bank = load_bank(args.bank)
    from .bank import SPLIT_QUERY
    from .trainer import evaluate_logits

    query_ids = bank.ids_for(SPLIT_QUERY)
    logits = evaluate_logits(model, bank, query_ids)
    acc = float((logits.argmax(axis=1) == bank.labels[query_ids]).mean())
    print(f"accuracy {acc!r}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"accuracy": acc, "model": args.model, "bank": args.bank,
                       "alpha": model.alpha, "beta": model.beta,
                       "tau": model.tau}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def cmd_ablate(args):
    bank = load_bank(args.bank)
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    shots = [int(s) for s in args.shots.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    base = _resolve_config(args, seeds[0])
    cells, table = run_ablation(bank, shots, arms, seeds, base=base,
                                jobs=args.jobs)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shots"] + arms)
        for k in shots:
            writer.writerow([k] + [repr(table[(arm, k)]) for arm in arms])
    cells_path = args.cells_out or (args.out + ".cells.json")
    with open(cells_path, "w") as fh:
        json.dump([dataclasses.asdict(c) for c in cells], fh, indent=2,
                  sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.out} and {cells_path} "
          f"({len(cells)} runs over {len(arms)} arms x {len(shots)} shot levels)")
    return EXIT_OK


def cmd_export(args):
    bank = load_bank(args.bank)
    episode = sample_episode(bank, args.shots, seed=args.seed)
    model = identity_model(bank, episode, alpha=args.alpha, beta=args.beta,
                           tau=args.tau)
    save_student(model, args.out)
    print(f"wrote training-free student {args.out} "
          f"(N={model.num_supports}, sha256 {_sha256(args.out)[:12]}...)")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="graphteach",
        description="Train key-value cache adapters for few-shot prototype "
                    "classification under a training-only graph teacher.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic",
                       help="write a deterministic synthetic TOGB bank")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--patches", type=int, default=18)
    p.add_argument("--foreground", type=int, default=4)
    p.add_argument("--images-per-class", dest="images_per_class", type=int,
                   default=40)
    p.add_argument("--sigma-f", type=float, default=0.4)
    p.add_argument("--sigma-b", type=float, default=0.6)
    p.add_argument("--sigma-t", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train on one k-shot episode and export "
                                     "the standalone student")
    p.add_argument("--bank", required=True)
    p.add_argument("--shots", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="student .togs path")
    p.add_argument("--metrics-csv", dest="metrics_csv")
    p.add_argument("--metrics-json", dest="metrics_json")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate an exported student on a bank's "
                                    "query split (loads only the student file)")
    p.add_argument("--model", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--json", help="optional JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an (arms x shots x seeds) ablation "
                                      "grid and write the seed-mean CSV")
    p.add_argument("--bank", required=True)
    p.add_argument("--arms", required=True,
                   help=f"comma list from: {', '.join(sorted(ABLATION_ARMS))}")
    p.add_argument("--shots", default="1")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True)
    p.add_argument("--cells-out", dest="cells_out",
                   help="per-run JSON (default <out>.cells.json)")
    p.add_argument("--jobs", type=int, default=1)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="export a training-free student "
                                      "(identity adapter) from a bank episode")
    p.add_argument("--bank", required=True)
    p.add_argument("--shots", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=5.5)
    p.add_argument("--tau", type=float, default=100.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, SamplingError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphteachError, OSError, EOFError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
