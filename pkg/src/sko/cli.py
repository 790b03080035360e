"""Command-line entry point: one executable, eight subcommands.

    train        fit a model, writing metrics.csv + checkpoints
    eval         validation loss of a checkpoint
    generate     sample text from a checkpoint
    compare      train two mechanisms on the same config, side by side
    bench        wall-clock scaling fits and retained-memory probes
    kernel-dump  tabulate one head's kernel profile phi(x)
    gradcheck    finite-difference audit of every gradient
    selftest     the named invariant suites

Exit codes: 0 success, 1 failed checks or unexpected errors, 2 usage or
config problems, 3 numeric abort while training.  Every run that produces
files also writes the fully resolved config next to them, and that file
fed back via --config reproduces the run.
"""

import argparse
import os
import sys

import numpy as np

from .config import (ConfigError, apply_overrides, build_model_config,
                     build_train_config, load_config, resolve_dataset,
                     write_resolved)
from .trainer import NumericAbort

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

GRADCHECK_TOL = 1e-5

# measured on the full-scale setup; desk runs do not reproduce these
REFERENCE_NOTE = (
    "reference (documentation only): at full scale the reported validation "
    "losses after 5000 steps\nare 5.7364 (kernel attention) vs 5.9608 "
    "(softmax); desk-scale absolute numbers will differ.")


def _add_config_args(p, out_default):
    p.add_argument("--config", default=None, metavar="FILE",
                   help="key=value config file")
    p.add_argument("--out-dir", default=out_default, metavar="DIR")
    p.add_argument("overrides", nargs="*", metavar="key=value",
                   help="config overrides applied after the file")


def cmd_train(args):
    cfg = load_config(args.config, args.overrides)
    write_resolved(cfg, args.out_dir)
    summary = run_training_for(cfg, args.out_dir, resume=args.resume)
    if summary["final_val_loss"] is not None:
        print("done: final val_loss %.6f  (%s)"
              % (summary["final_val_loss"], summary["csv"]))
    else:
        print("done: wrote %s" % summary["final_checkpoint"])
    return EXIT_OK


def run_training_for(cfg, out_dir, resume=None):
    from .trainer import run_training
    return run_training(build_model_config(cfg), build_train_config(cfg),
                        out_dir, flat_cfg=cfg, resume=resume, log=print)


def cmd_eval(args):
    from .trainer import (BatchSampler, evaluate, load_model_from_checkpoint,
                          split_tokens, tokenize_corpus)
    model, cfg, _ = load_model_from_checkpoint(args.checkpoint)
    apply_overrides(cfg, args.overrides)
    data = resolve_dataset(cfg["dataset"])
    if not os.path.exists(data):
        raise FileNotFoundError(f"corpus not found: {data}")
    tokens = tokenize_corpus(data, cfg["scheme"], cfg["vocab_file"],
                             cfg["merges_file"])
    _, val_toks = split_tokens(tokens, cfg["val_fraction"])
    # same validation stream the trainer used (third spawned child)
    kids = np.random.SeedSequence(cfg["seed"]).spawn(4)
    sampler = BatchSampler(val_toks, model.cfg.N, cfg["batch_size"],
                           np.random.default_rng(kids[2]))
    batches = [sampler.draw() for _ in range(cfg["eval_batches"])]
    loss = evaluate(model, batches)
    print("val_loss %.6f  val_ppl %.4f  (%d batches x %d seqs)"
          % (loss, np.exp(loss), len(batches), cfg["batch_size"]))
    return EXIT_OK


def cmd_generate(args):
    from .trainer import BpeTokenizer, load_model_from_checkpoint
    model, cfg, _ = load_model_from_checkpoint(args.checkpoint)
    tok = None
    if cfg["scheme"] == "byte":
        ids = np.frombuffer(args.prompt.encode("utf-8"),
                            dtype=np.uint8).astype(np.int64)
    elif cfg["scheme"] == "vocab-file":
        tok = BpeTokenizer(cfg["vocab_file"], cfg["merges_file"])
        ids = np.asarray(tok.encode(args.prompt), dtype=np.int64)
    else:
        raise ConfigError(f"unknown tokenizer scheme {cfg['scheme']!r}")
    if ids.size == 0:
        raise ConfigError("prompt encodes to zero tokens")
    seed = cfg["seed"] if args.seed is None else args.seed
    out = model.generate(ids, args.steps, temperature=args.temperature,
                         rng=np.random.default_rng(seed))
    if tok is None:
        text = bytes(int(t) for t in out if t < 256).decode(
            "utf-8", errors="replace")
    else:
        text = tok.decode(out)
    print(text)
    return EXIT_OK


def _read_metrics(csv_path):
    rows = []
    with open(csv_path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            cells = line.strip().split(",")
            rows.append((int(cells[0]), float(cells[2]), float(cells[3])))
    return rows  # (step, val_loss, val_ppl)


def cmd_compare(args):
    cfg = load_config(args.config, args.overrides)
    os.makedirs(args.out_dir, exist_ok=True)
    write_resolved(cfg, args.out_dir)

    metrics = []
    names = (args.mech_a, args.mech_b)
    for tag, mech in zip(("a", "b"), names):
        sub = dict(cfg)
        sub["mechanism"] = mech
        sub_dir = os.path.join(args.out_dir, f"{tag}-{mech}")
        write_resolved(sub, sub_dir)
        print(f"--- training {mech} ---")
        summary = run_training_for(sub, sub_dir)
        metrics.append(_read_metrics(summary["csv"]))

    rows_a, rows_b = metrics
    if [r[0] for r in rows_a] != [r[0] for r in rows_b]:
        raise RuntimeError(
            "step grids differ between the two runs; cannot merge")

    col_a, col_b = names
    if col_a == col_b:
        col_a, col_b = col_a + "_a", col_b + "_b"
    csv_path = os.path.join(args.out_dir, "comparison.csv")
    dat_path = os.path.join(args.out_dir, "comparison.dat")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("step,%s_val_loss,%s_val_ppl,%s_val_loss,%s_val_ppl,delta\n"
                 % (col_a, col_a, col_b, col_b))
        for (s, la, pa), (_, lb, pb) in zip(rows_a, rows_b):
            fh.write("%d,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                     % (s, la, pa, lb, pb, la - lb))
    with open(dat_path, "w", encoding="utf-8") as fh:
        fh.write("# step %s_val_loss %s_val_loss delta\n" % (col_a, col_b))
        for (s, la, _), (_, lb, _) in zip(rows_a, rows_b):
            fh.write("%d %.10g %.10g %.10g\n" % (s, la, lb, la - lb))

    last = rows_a[-1][0]
    print("final val_loss: %s %.6f, %s %.6f (delta %+.6f)"
          % (col_a, rows_a[-1][1], col_b, rows_b[-1][1],
             rows_a[-1][1] - rows_b[-1][1]))
    ref_step = 1000 if any(s == 1000 for s, _, _ in rows_b) else last
    ref = next(l for s, l, _ in rows_b if s == ref_step)
    hit = next((s for s, l, _ in rows_a if l <= ref), None)
    if hit is None:
        print("%s never reaches %s's step-%d val loss %.6f in this run"
              % (col_a, col_b, ref_step, ref))
    else:
        print("%s first beats %s's step-%d val loss (%.6f) at step %d"
              % (col_a, col_b, ref_step, ref, hit))
    print("wrote %s and %s" % (csv_path, dat_path))
    print(REFERENCE_NOTE)
    return EXIT_OK


def cmd_bench(args):
    from . import bench
    cfg = load_config(args.config, args.overrides)
    os.makedirs(args.out_dir, exist_ok=True)
    write_resolved(cfg, args.out_dir)
    pinned = False if args.no_pin else bench.pin_single_cpu()
    seed = cfg["seed"]

    sweeps = ("N", "D", "n_max") if args.sweep == "all" else (args.sweep,)
    mechs = (("sko", "baseline") if args.mechanism == "both"
             else (args.mechanism,))
    reports = []
    for mech in mechs:
        for sweep in sweeps:
            if sweep == "n_max" and mech != "sko":
                continue
            reports.append(bench.time_scaling(mech, sweep, reps=args.reps,
                                              seed=seed))
    ratio = bench.throughput_ratio(reps=args.reps, seed=seed)
    backends = bench.backend_compare(reps=args.reps, seed=seed)

    csv_path = os.path.join(args.out_dir, "bench.csv")
    bench.write_reports_csv(reports, csv_path)
    with open(csv_path, "a", encoding="utf-8") as fh:
        for rep in reports:
            fh.write("# fit mechanism=%s sweep=%s slope=%s r2=%s\n"
                     % (rep.mechanism, rep.sweep,
                        "" if rep.slope is None else "%.6f" % rep.slope,
                        "" if rep.r2 is None else "%.6f" % rep.r2))

    print(bench.format_summary(reports, ratio=ratio, backends=backends))
    buf = 32 * 32 * 8
    print("retained square buffers: training n_max=5 -> %d, n_max=10 -> %d; "
          "inference any n_max -> %d"
          % (bench.memory_probe("sko", 32, True, n_max=5.0) // buf,
             bench.memory_probe("sko", 32, True, n_max=10.0) // buf,
             bench.memory_probe("sko", 32, False, n_max=10.0) // buf))
    print("cpu pinning: %s" % ("active" if pinned else "unavailable/off"))
    print("wrote %s" % csv_path)
    return EXIT_OK


def cmd_kernel_dump(args):
    from .ultraspherical import KernelParams, kernel_profile
    cfg = load_config(args.config, args.overrides)
    os.makedirs(args.out_dir, exist_ok=True)
    write_resolved(cfg, args.out_dir)
    if args.checkpoint is not None:
        from .trainer import load_model_from_checkpoint
        model, flat, _ = load_model_from_checkpoint(args.checkpoint)
        if flat["mechanism"] != "sko":
            raise ConfigError("checkpoint holds no kernel (mechanism=%s)"
                              % flat["mechanism"])
        if not 0 <= args.layer < len(model.blocks):
            raise ConfigError("layer %d out of range [0, %d)"
                              % (args.layer, len(model.blocks)))
        params = model.blocks[args.layer].attn.kernel
    else:
        params = KernelParams(cfg["q"], cfg["degrees"])
    rows = kernel_profile(params, args.head, args.grid)
    path = os.path.join(args.out_dir, "kernel.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,phi\n")
        for x, phi in rows:
            fh.write("%.17g,%.17g\n" % (x, phi))
    print("wrote %s (%d points, head %d)" % (path, len(rows), args.head))
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_all
    rows = run_all(args.scale)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "gradcheck.txt")
    lines = ["%-40s %.3e %s" % (name, err, "ok" if err < GRADCHECK_TOL
                                else "FAIL") for name, err in rows]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    worst = max(rows, key=lambda r: r[1])
    bad = sum(1 for _, e in rows if not e < GRADCHECK_TOL)
    print("worst: %s %.3e  (threshold %g, %d checks)"
          % (worst[0], worst[1], GRADCHECK_TOL, len(rows)))
    if bad:
        print("%d gradient checks FAILED" % bad, file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import run_selftest
    return run_selftest(inject_fault=args.inject_fault)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sko",
        description="kernel-attention language model: training, comparison "
                    "and verification tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_config_args(p, "runs/train")
    p.add_argument("--resume", default=None, metavar="CKPT",
                   help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="validation loss of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("overrides", nargs="*", metavar="key=value",
                   help="config overrides (e.g. dataset=path)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="sample text from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default="\n")
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=None,
                   help="sampling seed (default: config seed)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("compare",
                       help="train two mechanisms on one config")
    _add_config_args(p, "runs/compare")
    p.add_argument("--mech-a", default="sko",
                   choices=("sko", "baseline"))
    p.add_argument("--mech-b", default="baseline",
                   choices=("sko", "baseline"))
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", help="scaling fits and memory probes")
    _add_config_args(p, "runs/bench")
    p.add_argument("--sweep", default="all",
                   choices=("N", "D", "n_max", "all"))
    p.add_argument("--mechanism", default="both",
                   choices=("sko", "baseline", "both"))
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--no-pin", action="store_true",
                   help="skip pinning the process to one cpu")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("kernel-dump",
                       help="tabulate phi(x) for one attention head")
    _add_config_args(p, "runs/kernel-dump")
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--grid", type=int, default=512)
    p.add_argument("--checkpoint", default=None,
                   help="dump a trained kernel instead of the initial one")
    p.add_argument("--layer", type=int, default=0)
    p.set_defaults(func=cmd_kernel_dump)

    p = sub.add_parser("gradcheck",
                       help="finite-difference audit of all gradients")
    p.add_argument("--scale", default="quick", choices=("quick", "full"))
    p.add_argument("--out-dir", default="runs/gradcheck")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="run the invariant suites")
    p.add_argument("--inject-fault", action="store_true",
                   help="flip the c2 recurrence sign to prove the oracles "
                        "catch it")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FileNotFoundError, ValueError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
