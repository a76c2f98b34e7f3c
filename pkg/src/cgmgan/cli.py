"""Command-line entry point: ``cgmgan <subcommand> [flags]``.

Subcommands: gen-env, gen-dataset, train, infer, eval, slice.  Every
subcommand prints its fully resolved configuration as JSON before running
and writes the same document next to its output.  Values come from flags,
then from ``--config FILE`` (JSON keyed by option dest), then defaults.

Exit codes: 0 success, 2 usage, 3 I/O, 4 validation, 5 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_DIVERGED = 2, 3, 4, 5


def _triple(text: str, cast=float, sep="x"):
    parts = text.lower().split(sep)
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three values separated by {sep!r}, got {text!r}")
    try:
        return tuple(cast(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _size(text):
    return _triple(text, float, "x")


def _cells(text):
    return _triple(text, int, "x")


def _coord(text):
    return _triple(text, float, ",")


def _mix(text):
    return _triple(text, float, ",")


def _int_list(text):
    if not text:
        return []
    return [int(v) for v in text.split(",")]


def _k_range(text):
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return _int_list(text)


def _channel_overrides(pairs):
    out = {}
    for pair in pairs or []:
        key, _, value = pair.partition("=")
        if not _:
            raise ValueError(f"--channel expects KEY=VALUE, got {pair!r}")
        out[key.strip()] = float(value)
    return out


def _channel_params(base: dict | None, args):
    from .radiosim import ChannelParams

    merged = dict(base or {})
    if getattr(args, "channel_file", None):
        merged.update(json.loads(Path(args.channel_file).read_text()))
    merged.update(_channel_overrides(getattr(args, "channel", None)))
    return ChannelParams.from_dict(merged)


def _write_config(path: Path, config: dict) -> None:
    path.write_text(json.dumps(config, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_env(args, config):
    from .envfile import save_environment
    from .grid import RegionSpec
    from .urbangen import UrbanParams, generate_environment

    spec = RegionSpec.from_cells(args.size, args.cells)
    params = UrbanParams(alpha=args.alpha, beta=args.beta, gamma_h=args.gamma_h,
                         building_count=args.count, seed=args.seed,
                         min_side=args.min_side, max_side=args.max_side)
    env = generate_environment(spec, params)
    channel = _channel_params(None, args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = save_environment(out, env, channel)
    _write_config(out.with_name(out.name + ".config.json"), config)
    print(f"wrote {out}: {len(env.buildings)} buildings, footprint ratio "
          f"{env.footprint_ratio:.3f}, {int(env.mask.sum())} building cells, env {digest.hex()[:16]}")


def cmd_gen_dataset(args, config):
    from .dataset import build_dataset, sample_bs_locations, split_dataset, write_manifest
    from .envfile import load_environment

    env, channel_block = load_environment(args.env)
    channel = _channel_params(channel_block, args)
    locations = sample_bs_locations(env, args.count, args.mix, args.seed)
    out = Path(args.out)
    ds = build_dataset(env, channel, locations, out, meta={"seed": args.seed, "mix": list(args.mix)})
    ds = split_dataset(ds, len(ds) - args.test_count, args.seed, test_count=args.test_count)
    write_manifest(ds)
    _write_config(out / "config.json", config)
    print(f"wrote {len(ds)} CGMs to {out} ({len(ds.train)} train / {len(ds.test)} test)")


def _hyper_from_args(args):
    from .cgan import Hyper

    return Hyper(lr=args.lr, beta1=args.beta1, beta2=args.beta2, lambda_re=args.lambda_re,
                 batch_size=args.batch, epochs=args.epochs, seed=args.seed, width=args.width,
                 decay_start=args.decay_start)


def _normalizer_for(ds):
    from .cgan import Normalizer
    from .envfile import load_environment

    env, channel_block = load_environment(ds.root / "environment.json")
    from .radiosim import ChannelParams

    channel = ChannelParams.from_dict(channel_block)
    return env, Normalizer(channel.gamma_min_db, channel.gamma_clip_db, env.spec.extents)


def cmd_train(args, config):
    from .cgan import GanModel, save_checkpoint, train
    from .dataset import open_dataset, split_dataset

    ds = open_dataset(args.dataset)
    pool = len(ds) - len(ds.test)
    count = pool if args.train_count is None else args.train_count
    ds = split_dataset(ds, count, args.seed)
    env, norm = _normalizer_for(ds)
    side = env.spec.nx
    if env.spec.shape != (side, side, side):
        raise ValueError(f"GAN needs a cubic grid, got {env.spec.shape}")
    hyper = _hyper_from_args(args)
    model = GanModel.create(side, norm, hyper, env_ref=ds.env_ref)

    def log(stats):
        if args.verbose or stats.epoch == hyper.epochs - 1:
            print(f"epoch {stats.epoch:4d}  d {stats.d_loss:.5f}  g {stats.g_loss:.5f}  "
                  f"recon {stats.recon:.6f}", flush=True)

    trained, trace = train(model, ds.coords(ds.train), ds.stack(ds.train), hyper, log=log)
    trained.meta["train_indices_seed"] = args.seed
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, trained)
    trace_doc = [vars(s) for s in trace]
    (out.with_name(out.name + ".trace.json")).write_text(json.dumps(trace_doc, indent=1) + "\n")
    _write_config(out.with_name(out.name + ".config.json"), config)
    print(f"wrote {out} (best epoch {trained.meta['best_epoch']}, "
          f"recon {trained.meta['best_recon']:.6f})")


def cmd_infer(args, config):
    from .dataset import open_dataset, save_cgm

    if args.method == "gan":
        from .cgan import infer, load_checkpoint

        if not args.ckpt:
            raise UsageError("infer --method gan requires --ckpt")
        cgm = infer(load_checkpoint(args.ckpt), args.coord)
    else:
        from .baseline import idw_infer

        if not args.dataset:
            raise UsageError("infer --method idw requires --dataset")
        cgm = idw_infer(open_dataset(args.dataset), args.coord, args.k, args.p)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cgm(out, cgm)
    _write_config(out.with_name(out.name + ".config.json"), config)
    print(f"wrote {out}: gains in [{cgm.gains_db.min():.2f}, {cgm.gains_db.max():.2f}] dB")


def cmd_eval(args, config):
    from .cgan import load_checkpoint
    from .dataset import open_dataset
    from .evaluate import build_report, gan_test_amse, k_sweep, size_sweep, write_csv, write_report

    ds = open_dataset(args.dataset)
    env, norm = _normalizer_for(ds)
    free = ~env.mask
    model = load_checkpoint(args.ckpt)
    if model.env_ref != ds.env_ref:
        raise ValueError("checkpoint was trained on a different environment than the dataset")
    pool = len(ds) - len(ds.test)
    train_count = model.meta.get("train_count", pool)
    from .dataset import split_dataset

    ds = split_dataset(ds, train_count, model.meta.get("train_indices_seed", model.hyper.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation = {"gan": gan_test_amse(model, ds, free)}
    if args.k_sweep:
        rows = k_sweep(ds, args.k_sweep, args.p, free)
        write_csv(rows, out / "k_sweep.csv")
        evaluation["k_sweep"] = rows
        best = min(rows, key=lambda r: (r["amse"], r["k"]))
        evaluation["idw_best"] = best
        print(f"GAN AMSE {evaluation['gan']['amse']:.3f} dB^2, best IDW (K={best['k']}) "
              f"{best['amse']:.3f} dB^2")
    if args.size_sweep:
        rows, _ = size_sweep(ds, model.side, model.normalizer, model.hyper, args.size_sweep,
                             args.seed, args.k_sweep or range(1, 13), args.p, free,
                             log=lambda r: print(json.dumps(r), flush=True))
        write_csv(rows, out / "size_sweep.csv")
        evaluation["size_sweep"] = rows
    (out / "evaluation.json").write_text(json.dumps(evaluation, sort_keys=True, indent=2) + "\n")
    _write_config(out / "config.json", config)
    trace = Path(str(args.ckpt) + ".trace.json")
    report = build_report(ds.root, args.ckpt, out / "evaluation.json",
                          trace if trace.exists() else None, out / "config.json")
    write_report(out / "report.json", report)
    print(f"wrote {out / 'report.json'}")


def cmd_slice(args, config):
    from .dataset import load_cgm
    from .evaluate import export_slices
    from .grid import RegionSpec

    cgm = load_cgm(args.cgm)
    if args.env:
        from .envfile import load_environment

        spec = load_environment(args.env)[0].spec
    else:
        spec = RegionSpec.from_cells(args.size, cgm.gains_db.shape)
    if spec.shape != cgm.gains_db.shape:
        raise ValueError(f"CGM shape {cgm.gains_db.shape} does not match grid {spec.shape}")
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    info = export_slices(cgm, spec, args.axis, args.pos, prefix, args.lo, args.hi)
    _write_config(prefix.with_name(prefix.name + ".config.json"), config)
    print(f"wrote {info['ppm']} and {info['csv']} (layer {info['layer']} along {args.axis})")


# ---------------------------------------------------------------------------
# Parser


class UsageError(Exception):
    pass


def _add_channel_flags(p):
    p.add_argument("--channel", action="append", metavar="KEY=VALUE",
                   help="override one channel parameter (repeatable)")
    p.add_argument("--channel-file", help="JSON file of channel parameters")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgmgan", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of default option values")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True

    p = sub.add_parser("gen-env", help="generate an urban environment file")
    p.add_argument("--size", type=_size, default=(256.0, 256.0, 128.0), metavar="LxWxH")
    p.add_argument("--cells", type=_cells, default=(32, 32, 32), metavar="NXxNYxNZ")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=300.0)
    p.add_argument("--gamma-h", type=float, default=50.0)
    p.add_argument("--count", type=int, default=None, help="exact building count (overrides alpha)")
    p.add_argument("--min-side", type=int, default=2, help="min footprint side in cells (count mode)")
    p.add_argument("--max-side", type=int, default=6, help="max footprint side in cells (count mode)")
    p.add_argument("--seed", type=int, default=0)
    _add_channel_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("gen-dataset", help="simulate CGMs for sampled base stations")
    p.add_argument("--env", required=True)
    p.add_argument("--count", type=int, default=950)
    p.add_argument("--mix", type=_mix, default=(0.4, 0.3, 0.3), metavar="G,S,A")
    p.add_argument("--test-count", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    _add_channel_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train the 3D conditional GAN")
    p.add_argument("--dataset", required=True)
    p.add_argument("--train-count", type=int, default=None)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--beta1", type=float, default=0.5)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--lambda-re", type=float, default=100.0)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--width", type=int, default=64, help="channels of the widest-resolution block")
    p.add_argument("--decay-start", type=float, default=None,
                   help="fraction of epochs after which lr decays linearly to zero")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="infer the CGM of a base station")
    p.add_argument("--method", choices=("gan", "idw"), default="gan")
    p.add_argument("--ckpt")
    p.add_argument("--dataset")
    p.add_argument("--coord", type=_coord, required=True, metavar="X,Y,Z")
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="AMSE, K sweep, training-size sweep and report")
    p.add_argument("--dataset", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--k-sweep", type=_k_range, default=list(range(1, 13)), metavar="LO..HI")
    p.add_argument("--size-sweep", type=_int_list, default=[], metavar="N1,N2,...")
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("slice", help="export one plane of a CGM as PPM + CSV")
    p.add_argument("--cgm", required=True)
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--pos", type=float, required=True)
    p.add_argument("--env", help="environment file giving the grid geometry")
    p.add_argument("--size", type=_size, default=(256.0, 256.0, 128.0), metavar="LxWxH",
                   help="region size when --env is not given")
    p.add_argument("--lo", type=float, default=-250.0)
    p.add_argument("--hi", type=float, default=-70.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_slice)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = json.loads(Path(known.config).read_text(encoding="utf-8"))
    for action in parser._subparsers._group_actions:
        for sub in action.choices.values():
            dests = {a.dest for a in sub._actions}
            sub.set_defaults(**{k: v for k, v in values.items() if k in dests})
            # a config value satisfies a required flag
            for a in sub._actions:
                if a.dest in values and a.required:
                    a.required = False


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, range):
        return list(value)
    return value


def _thread_limit():
    n = os.environ.get("CGMGAN_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cgmgan: error: cannot read config file: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    config = {k: _jsonable(v) for k, v in vars(args).items() if k != "func"}
    print(json.dumps(config, sort_keys=True))

    from .cgan import TrainingDivergedError
    from .dataset import CgmFileError
    from .nncore import CheckpointError

    try:
        with _thread_limit():
            args.func(args, config)
    except UsageError as exc:
        print(f"cgmgan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"cgmgan: error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CgmFileError, CheckpointError) as exc:
        print(f"cgmgan: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, RuntimeError) as exc:
        print(f"cgmgan: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return 0


if __name__ == "__main__":
    sys.exit(main())
