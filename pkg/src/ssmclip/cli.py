"""Command-line entry point: ``ssmclip <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

USAGE_EPILOG = """\
acceptance criteria, one invocation each:
  1 scan equivalence        ssmclip gradcheck --property scan-equivalence
  2 gradient integrity      ssmclip gradcheck --all
  3 decay bias              ssmclip gradcheck --property decay
  4 causality               ssmclip gradcheck --property causality
  5 complexity contrast     ssmclip bench-cost --arch ssm --arch attn --lengths 64,256,1024,4096 --timing
  6 resolution flexibility  ssmclip sweep-resolution --ckpt desk.clmp --resolutions 32,64,128 --with-attention
  7 contrastive training    ssmclip train --seed 7 --out desk.clmp
  8 shuffle inductive bias  ssmclip shuffle-exp --seeds 0,1,2
  9 geometry golden values  ssmclip gradcheck --property geometry
 10 dense text              ssmclip gradcheck --property dense-text
 11 determinism/persistence ssmclip gradcheck --property determinism
"""

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """Reports usage problems with exit status 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


class Reporter:
    """Prints ``metric=... value=...`` records and optionally collects them for CSV."""

    def __init__(self, csv_path: str | None):
        from .metrics import ReportRow
        self.row_type = ReportRow
        self.csv_path = csv_path
        self.rows = []

    def __call__(self, metric, value, resolution=None, arch=None, **extra):
        row = self.row_type(metric, float(value), resolution, arch)
        self.rows.append(row)
        tail = "".join(f" {k}={v}" for k, v in extra.items())
        print(f"{row}{tail}", flush=True)

    def close(self):
        if self.csv_path:
            from .metrics import write_csv
            write_csv(self.csv_path, self.rows)


def build_parser() -> Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override the configuration seed")
    common.add_argument("--config", help="training configuration file (key = value lines)")
    common.add_argument("--out", help="output path")
    common.add_argument("--threads", type=_positive, default=1,
                        help="BLAS threads; 1 gives bit-identical results (default 1)")
    common.add_argument("--emit-csv", metavar="PATH", help="also write report rows as CSV")

    p = Parser(prog="ssmclip", description="State-space contrastive image-text toolkit.",
               epilog=USAGE_EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic images and captions")
    g.add_argument("--n", type=_positive, default=64)
    g.add_argument("--resolution", type=_positive)

    t = sub.add_parser("train", parents=[common], help="contrastive training")
    t.add_argument("--steps", type=_positive, help="override the configured step count")
    t.add_argument("--until", type=_positive, help="stop after this step (schedule unchanged)")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    t.add_argument("--metrics", metavar="PATH", help="write the per-step stream here instead of stdout")
    t.add_argument("--no-eval", action="store_true", help="skip the held-out evaluation")

    e = sub.add_parser("eval", parents=[common], help="held-out retrieval, zero-shot and geometry")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--resolution", type=_positive)
    e.add_argument("--n", type=_positive)

    s = sub.add_parser("sweep-resolution", parents=[common], help="evaluate one checkpoint at several resolutions")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--resolutions", type=_int_list, default=[32, 64, 128])
    s.add_argument("--n", type=_positive)
    s.add_argument("--with-attention", action="store_true",
                   help="also run an attention tower sized for the training resolution")

    x = sub.add_parser("shuffle-exp", parents=[common], help="regular vs shuffled patch order study")
    x.add_argument("--seeds", type=_int_list)
    x.add_argument("--steps", type=_positive)
    x.add_argument("--identity", action="store_true", help="use the identity permutation (control)")

    b = sub.add_parser("bench-cost", parents=[common], help="analytic FLOPs and memory")
    b.add_argument("--arch", action="append", choices=["ssm", "attn", "text", "ssm-block", "attn-block"])
    b.add_argument("--lengths", type=_int_list, default=[64, 256, 1024])
    b.add_argument("--timing", action="store_true",
                   help="also time single blocks at the base and the largest length")
    b.add_argument("--timing-base", type=_positive, default=256, help="base length for --timing (default 256)")

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference and property checks")
    what = c.add_mutually_exclusive_group(required=True)
    what.add_argument("--all", action="store_true", help="every registered gradient suite")
    what.add_argument("--op", action="append", help="one named gradient suite (repeatable)")
    what.add_argument("--property", choices=["scan-equivalence", "decay", "causality", "geometry",
                                             "dense-text", "determinism"])
    what.add_argument("--list", action="store_true", help="list gradient suites")

    i = sub.add_parser("inspect-ckpt", parents=[common], help="print checkpoint contents")
    i.add_argument("ckpt")
    return p


def _load_config(args):
    from .train import TrainConfig
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_gen_data(args, report) -> int:
    from .data import gen_synthetic
    from .vision import write_ppm
    cfg = _load_config(args)
    res = args.resolution or cfg.resolution
    out = Path(args.out or "synthetic")
    out.mkdir(parents=True, exist_ok=True)
    samples = gen_synthetic(cfg.seed, args.n, res)
    with open(out / "captions.tsv", "w", encoding="utf-8") as fh:
        for i, s in enumerate(samples):
            name = f"{i:05d}.ppm"
            write_ppm(out / name, s.image)
            fh.write(f"{name}\t{s.caption}\n")
    report("samples", len(samples), resolution=res)
    report("distinct_tuples", len({s.attributes.key for s in samples}), resolution=res)
    return EXIT_OK


def _report_geometry(report, geo, resolution=None, arch=None):
    for name, value in geo.rows():
        report(name, value, resolution, arch)


def cmd_train(args, report) -> int:
    import math
    from .checkpoint import Checkpoint
    from .experiments import evaluate
    from .train import format_metrics, train_loop
    cfg = _load_config(args)
    if args.steps:
        cfg = cfg.replace(steps=args.steps, warmup_steps=min(cfg.warmup_steps, args.steps - 1))
    resume = Checkpoint.load(args.resume) if args.resume else None
    stream = open(args.metrics, "w", encoding="utf-8") if args.metrics else sys.stdout
    try:
        result = train_loop(cfg, stream, resume=resume, until=args.until)
    finally:
        if stream is not sys.stdout:
            stream.close()
    out = Path(args.out or "model.clmp")
    result.checkpoint().save(out)
    if result.history:
        report("initial_loss", result.history[0]["loss"], arch="ssm", step=result.history[0]["step"])
        report("initial_loss_over_ln_batch", result.history[0]["loss"] / math.log(cfg.batch_size), arch="ssm")
        window = [h["loss"] for h in result.history[-50:]]
        report("final_loss", float(np.mean(window)), arch="ssm", step=result.history[-1]["step"])
    report("checkpoint_step", result.step, path=str(out), sha256=_sha(out)[:16])
    if not args.no_eval and result.step == cfg.steps:
        geo = evaluate(result.model, cfg)
        _report_geometry(report, geo, cfg.resolution, "ssm")
        report("chance_r1", 1.0 / cfg.eval_size, cfg.resolution, "ssm")
    return EXIT_OK


def cmd_eval(args, report) -> int:
    from . import tensor as T
    from .checkpoint import Checkpoint
    from .data import N_CLASSES, class_captions
    from .experiments import evaluate
    from .metrics import zero_shot_classify
    from .text import TokenBatch
    from .train import TrainData, embed_dataset, eval_seed, model_from_checkpoint
    model, cfg = model_from_checkpoint(Checkpoint.load(args.ckpt))
    res = args.resolution or cfg.resolution
    _report_geometry(report, evaluate(model, cfg, res, args.n), res, "ssm")
    data = TrainData.synthetic(eval_seed(cfg.seed), args.n or 512, res, model.vocab, cfg.np_dtype)
    img, _ = embed_dataset(model, data.images, data.tokens)
    with T.no_grad():
        prompts = model.text(TokenBatch.from_texts(class_captions(), model.vocab)).data.astype(np.float64)
    zs = zero_shot_classify(img, prompts, data.classes)
    report("zero_shot_acc1", zs.acc1, res, "ssm")
    if zs.acc5 is not None:
        report("zero_shot_acc5", zs.acc5, res, "ssm")
    report("zero_shot_chance", 1.0 / N_CLASSES, res, "ssm")
    return EXIT_OK


def cmd_sweep(args, report) -> int:
    from .attention import AttnConfig
    from .checkpoint import Checkpoint
    from .experiments import resolution_sweep
    from .train import TrainConfig
    raw = Path(args.ckpt).read_bytes()
    before = hashlib.sha256(raw).hexdigest()
    ckpt = Checkpoint.from_bytes(raw)
    cfg = TrainConfig.from_text(ckpt.config_text)
    attn = None
    if args.with_attention:
        attn = AttnConfig(patch_size=cfg.patch_size, max_tokens=(cfg.resolution // cfg.patch_size) ** 2)
    entries = resolution_sweep(ckpt, args.resolutions, args.n, attn)
    ok = True
    for e in entries:
        if e.report is not None:
            _report_geometry(report, e.report, e.resolution, e.arch)
            report("n_params", e.n_params, e.resolution, e.arch)
        elif e.error:
            report("token_overflow", 1, e.resolution, e.arch)
        else:
            report("token_overflow", 0, e.resolution, e.arch)
    after = _sha(args.ckpt)
    report("checkpoint_unchanged", float(before == after), sha256=before[:16])
    n = args.n or cfg.eval_size
    # the pass condition at twice the training resolution: both retrieval
    # directions reach three times chance and the attention arm overflows
    for e in entries:
        if e.resolution != 2 * cfg.resolution:
            continue
        if e.arch == "ssm":
            for key in ("TR@1", "IR@1"):
                passed = e.report.recall[key] >= 3.0 / n
                ok &= passed
                report("r1_over_chance", e.report.recall[key] * n, e.resolution, e.arch, direction=key,
                       result="pass" if passed else "fail")
        else:
            ok &= e.error is not None
    return EXIT_OK if ok and before == after else EXIT_RUNTIME


def cmd_shuffle(args, report) -> int:
    from .experiments import ShuffleConfig, shuffle_experiment
    cfg = ShuffleConfig()
    if args.seeds:
        cfg.seeds = tuple(args.seeds)
    elif args.seed is not None:
        cfg.seeds = (args.seed,)
    if args.steps:
        cfg.steps = args.steps
    cfg.identity_permutation = args.identity

    def progress(arm):
        tag = "shuffled" if arm.shuffled else "regular"
        report(f"final_loss_{tag}", arm.final_loss, arch=arm.arch, seed=arm.seed)
        report(f"accuracy_{tag}", arm.accuracy, arch=arm.arch, seed=arm.seed)

    table = shuffle_experiment(cfg, progress)
    for arch, n in table.params.items():
        report("n_params", n, arch=arch)
    all_ok = True
    for seed in table.seeds():
        for arch in ("ssm", "attn"):
            report("shuffle_degradation", table.degradation(arch, seed), arch=arch, seed=seed)
        ok = table.sign_pattern(seed)
        all_ok &= ok
        report("sign_pattern", float(ok), seed=seed)
    if cfg.identity_permutation:
        return EXIT_OK
    return EXIT_OK if all_ok else EXIT_RUNTIME


# wall-clock growth allowed over the ideal ratio r for the linear block, and the
# fraction of r**2 the attention block must still reach
LINEAR_SLACK = 1.5
QUADRATIC_FLOOR = 100 / 256


def cmd_bench(args, report) -> int:
    from .cost import BlockSpec, flops_memory, time_block
    archs = args.arch or ["ssm", "attn"]
    for arch in archs:
        for L in args.lengths:
            try:
                r = flops_memory(arch, L)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            report("flops", r.flops, arch=arch, tokens=L, linear=r.flops_by_order[1],
                   quadratic=r.flops_by_order[2], param_bytes=r.param_bytes,
                   activation_bytes=r.activation_bytes, resolution_specific_bytes=r.resolution_specific_bytes)
    ok = True
    if args.timing:
        lo, hi = args.timing_base, max(args.lengths)
        if hi <= lo:
            raise UsageError(f"--timing needs a length above the base {lo}")
        r = hi / lo
        spec = BlockSpec(width=32, heads=1)
        for block in dict.fromkeys("attn-block" if a.startswith("attn") else "ssm-block" for a in archs):
            t_lo, t_hi = time_block(block, lo, spec, repeats=5), time_block(block, hi, spec, repeats=5)
            growth = t_hi / t_lo
            if block == "ssm-block":
                bound, passed = f"<={LINEAR_SLACK * r:g}", growth <= LINEAR_SLACK * r
            else:
                bound, passed = f">={QUADRATIC_FLOOR * r * r:g}", growth >= QUADRATIC_FLOOR * r * r
            ok &= passed
            report("time_growth", growth, arch=block, lengths=f"{lo}->{hi}", bound=bound,
                   result="pass" if passed else "fail", seconds_lo=f"{t_lo:.4g}", seconds_hi=f"{t_hi:.4g}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_gradcheck(args, report) -> int:
    from .checks import SUITES, TOLERANCE, run_all
    if args.list:
        for name in SUITES:
            print(name)
        return EXIT_OK
    if args.property:
        from .properties import PROPERTIES
        fn = PROPERTIES[args.property]
        if args.property == "determinism" and args.config:
            res = fn(_load_config(args))
        else:
            res = fn()
        for line in res.details:
            print(f"  {line}")
        print(res.line(), flush=True)
        return EXIT_OK if res.passed else EXIT_RUNTIME
    names = None if args.all else args.op
    unknown = [n for n in names or [] if n not in SUITES]
    if unknown:
        raise UsageError(f"unknown gradcheck suite(s): {', '.join(unknown)}")
    results = run_all(names, report=lambda n, e: report("max_rel_err", e, op=n))
    worst = max(results.values())
    report("worst_rel_err", worst, suites=len(results), tolerance=TOLERANCE)
    return EXIT_OK if worst <= TOLERANCE else EXIT_RUNTIME


def cmd_inspect(args, report) -> int:
    from .checkpoint import FORMAT_VERSION, Checkpoint
    raw = Path(args.ckpt).read_bytes()
    ck = Checkpoint.from_bytes(raw)
    print(f"format_version={FORMAT_VERSION} step={ck.step} temperature={ck.temperature!r} "
          f"tensors={len(ck.tensors)} bytes={len(raw)}")
    print("config:")
    for line in ck.config_text.splitlines():
        print(f"  {line}")
    for name, arr in ck.tensors.items():
        print(f"  {name} shape={tuple(arr.shape)} dtype={arr.dtype}")
    if args.out:
        Path(args.out).write_bytes(ck.to_bytes())
        report("roundtrip_identical", float(Path(args.out).read_bytes() == raw))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep-resolution": cmd_sweep,
            "shuffle-exp": cmd_shuffle, "bench-cost": cmd_bench, "gradcheck": cmd_gradcheck,
            "inspect-ckpt": cmd_inspect}


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    from .attention import TokenOverflowError
    from .experiments import BudgetMismatchError
    from .train import ConfigError
    from .vision import ResolutionError

    parser = build_parser()
    args = parser.parse_args(argv)
    report = Reporter(args.emit_csv)
    try:
        with threadpool_limits(limits=args.threads):
            code = COMMANDS[args.command](args, report)
    except (UsageError, ConfigError, ResolutionError, BudgetMismatchError, TokenOverflowError) as exc:
        print(f"ssmclip {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"ssmclip {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BrokenPipeError:
        # reader closed early (e.g. ``| head``); silence the flush at exit
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"ssmclip {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        report.close()
    return code


if __name__ == "__main__":
    sys.exit(main())
