"""``ddsam2`` command line: gen, train, eval, ablate, profile, baseline, check-csv.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor

from . import checkpoint
from .efficiency import adapter_params_closed_form, adapter_params_enumerated, model_macs
from .errors import ConfigError, DDSAM2Error, NumericError, ParseError, UsageError
from .model import EncoderConfig, init_state, track_video
from .reporting import (check_schema, evaluate_tracker, video_rows, worker_count,
                        write_rows)
from .rigid import RigidConfig, copy_track, rigid_track
from .synthdata import (GenConfig, by_split, gen_dataset, gen_video, read_dataset,
                        read_manifest, write_dataset)
from .trainer import TrainConfig, train_run

log = logging.getLogger("ddsam2")

DILATION_SWEEP = ((1, 2), (1, 3), (1, 4), (1, 2, 3), (1, 2, 3, 4))


class CLIError(Exception):
    def __init__(self, message, code=2):
        super().__init__(message)
        self.code = code


def _rates(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dilation list {text!r}") from None


def config_string(cfg):
    rates = ",".join(map(str, cfg.dilation_rates)) if cfg.adapter_variant == "dd" else "-"
    return f"variant={cfg.adapter_variant};m={cfg.n_adapters};rates={rates}"


def _load_data(directory, splits=None):
    try:
        return read_dataset(directory, splits)
    except ParseError as exc:
        raise CLIError(f"bad dataset: {exc}") from None


def _data_size(directory):
    manifest = read_manifest(directory)
    gen = manifest.get("gen_config") or {}
    return gen.get("size")


# ---------------------------------------------------------------- gen


def cmd_gen(args):
    cfg = GenConfig(num_videos=args.videos, frames=args.frames, size=args.size, seed=args.seed,
                    amplitude=args.amplitude, radius_min=args.radius_min,
                    radius_max=args.radius_max, deform=args.deform, noise=args.noise,
                    fractions=tuple(args.fractions))
    samples = gen_dataset(cfg)
    try:
        write_dataset(samples, args.out, cfg)
    except OSError as exc:
        raise CLIError(f"cannot write dataset to {args.out}: {exc.strerror}") from None
    counts = {s: len(by_split(samples, s)) for s in ("train", "val", "test")}
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


# ---------------------------------------------------------------- train


def model_config(args, image_size):
    variant = args.variant
    m = args.adapters
    if m is None:
        m = 0 if variant == "none" else 6
    return EncoderConfig(image_size=image_size, patch_size=args.patch_size,
                         embed_dim=args.embed_dim, heads=args.heads, blocks=args.blocks,
                         adapter_count=m, adapter_variant=variant, reduction=args.reduction,
                         kernel=args.kernel, dilation_rates=args.dilations)


def train_config(args, seed=None):
    return TrainConfig(epochs=args.epochs, lr_adapter=args.lr_adapter, lr_decoder=args.lr_decoder,
                       lr_halve_epoch=args.lr_halve_epoch, weight_decay=args.weight_decay,
                       videos_per_step=args.videos_per_step, subseq_len=args.subseq_len,
                       steps_per_epoch=args.steps_per_epoch, clip_norm=args.clip_norm,
                       capacity=args.capacity, policy=args.policy,
                       seed=args.seed if seed is None else seed)


def _train(data, mcfg, tcfg):
    train, val = by_split(data, "train"), by_split(data, "val")
    if not train:
        raise CLIError("bad dataset: training split is empty")
    try:
        return train_run(train, val, mcfg, tcfg)
    except NumericError as exc:
        raise CLIError(str(exc), code=3) from None


def write_epoch_log(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_dice", "lr"])
        for e in history:
            w.writerow([e.epoch, f"{e.train_loss:.6f}", f"{e.val_dice:.6f}", f"{e.lr:.3e}"])


def cmd_train(args):
    data = _load_data(args.data, {"train", "val"})
    if not data:
        raise CLIError("bad dataset: no train/val videos")
    mcfg = model_config(args, data[0].frames.shape[-1])
    tcfg = train_config(args)
    state, history = _train(data, mcfg, tcfg)
    checkpoint.save(state, args.out)
    write_epoch_log(history, args.log or str(args.out) + ".log.csv")
    print(f"saved {args.out}: {state.count()} params, {state.count(True)} trainable")
    return 0


# ---------------------------------------------------------------- eval


def _check_compatible(state, directory):
    size = _data_size(directory)
    if size is not None and size != state.config.image_size:
        raise CLIError(f"config mismatch: checkpoint image_size={state.config.image_size} "
                       f"but dataset size={size}")


def _load_ckpt(path):
    try:
        return checkpoint.load(path)
    except ParseError as exc:
        raise CLIError(f"cannot load checkpoint: {exc}") from None


def evaluate_state(state, samples, tau, capacity, method, oracle=False):
    def predict(s):
        if oracle:
            return list(s.masks)
        return track_video(s.frames, s.masks[0], state, capacity=capacity)

    results = evaluate_tracker(samples, predict, tau)
    return video_rows(method, config_string(state.config), results,
                      state.count(True), state.count())


def cmd_eval(args):
    state = _load_ckpt(args.ckpt)
    _check_compatible(state, args.data)
    samples = _load_data(args.data, {args.split})
    if not samples:
        raise CLIError(f"split {args.split!r} is empty")
    if samples[0].frames.shape[-1] != state.config.image_size:
        raise CLIError(f"config mismatch: image_size={state.config.image_size} vs frames "
                       f"{samples[0].frames.shape[-1]}")
    rows = evaluate_state(state, samples, args.tau, args.capacity, args.method, args.oracle_masks)
    write_rows(rows, args.report)
    agg = rows[-1]
    print(f"{args.method} dice={agg.dice_mean:.4f}±{agg.dice_std:.4f} nsd={agg.nsd_mean:.4f} "
          f"hd95={agg.hd95_mean:.4f} asd={agg.asd_mean:.4f}")
    return 0


# ---------------------------------------------------------------- ablate


def ablation_cells(args):
    if args.sweep == "adapters":
        return [dict(variant="dd", adapters=m, dilations=args.dilations) for m in range(1, args.blocks + 1)]
    return [dict(variant="dd", adapters=args.adapters if args.adapters is not None else 6,
                 dilations=rates) for rates in DILATION_SWEEP]


def cmd_ablate(args):
    data = _load_data(args.data)
    test = by_split(data, args.split)
    if not test:
        raise CLIError(f"split {args.split!r} is empty")
    size = data[0].frames.shape[-1]
    tcfg = train_config(args)

    def run(cell):
        ns = argparse.Namespace(**{**vars(args), **cell})
        mcfg = model_config(ns, size)
        state, _ = _train(data, mcfg, tcfg)
        results = evaluate_tracker(test, lambda s: track_video(s.frames, s.masks[0], state,
                                                               capacity=args.capacity), args.tau, 1)
        return video_rows("dd-sam2-mini", config_string(mcfg), results,
                          state.count(True), state.count())[-1]

    cells = ablation_cells(args)
    workers = worker_count()
    if workers == 1:
        rows = [run(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, cells))
    write_rows(rows, args.report)
    print(f"{args.sweep} sweep: {len(rows)} rows -> {args.report}")
    return 0


# ---------------------------------------------------------------- profile


def profile_state(state, frames=8, capacity=4, seed=0):
    cfg = state.config
    none_cfg = EncoderConfig(**{**cfg.to_dict(), "adapter_variant": "none", "adapter_count": 0,
                                "dilation_rates": cfg.dilation_rates})
    none_total = init_state(none_cfg, 0).count()
    gen = GenConfig(num_videos=1, frames=frames, size=cfg.image_size, seed=seed,
                    radius_max=min(14.0, cfg.image_size / 3 / 1.15 - 0.5),
                    radius_min=min(6.0, cfg.image_size / 3 / 1.15 - 0.5))
    video = gen_video(gen, seed)
    start = time.perf_counter()
    track_video(video.frames, video.masks[0], state, capacity=capacity)
    elapsed = time.perf_counter() - start
    macs = model_macs(cfg, capacity)
    return {
        "params_total": state.count(),
        "params_trainable": state.count(True),
        "adapter_params_closed_form": adapter_params_closed_form(cfg),
        "adapter_params_enumerated": adapter_params_enumerated(state),
        "adapter_delta_vs_none": state.count() - none_total,
        "macs_per_frame": macs["total"],
        "macs_per_frame_no_adapters": model_macs(none_cfg, capacity)["total"],
        "fps": frames / elapsed if elapsed > 0 else float("inf"),
    }


def cmd_profile(args):
    state = _load_ckpt(args.ckpt)
    info = profile_state(state, args.frames, args.capacity, args.seed)
    if info["adapter_params_closed_form"] != info["adapter_params_enumerated"]:
        raise CLIError("adapter parameter closed form disagrees with enumeration", code=3)
    width = max(map(len, info))
    for k, v in info.items():
        print(f"{k:<{width}}  {v:.2f}" if isinstance(v, float) else f"{k:<{width}}  {v}")
    return 0


# ---------------------------------------------------------------- baseline


def cmd_baseline(args):
    samples = _load_data(args.data, {args.split})
    if not samples:
        raise CLIError(f"split {args.split!r} is empty")
    if args.method == "rigid":
        rcfg = RigidConfig(radius=args.radius)
        predict = lambda s: rigid_track(s.frames, s.masks[0], rcfg)  # noqa: E731
        config = f"radius={args.radius}"
    else:
        predict = lambda s: copy_track(s.frames, s.masks[0])  # noqa: E731
        config = "first-mask"
    rows = video_rows(args.method, config, evaluate_tracker(samples, predict, args.tau))
    write_rows(rows, args.report)
    print(f"{args.method} dice={rows[-1].dice_mean:.4f}")
    return 0


def cmd_check_csv(args):
    for path in args.reports:
        try:
            check_schema(path)
        except (ParseError, OSError) as exc:
            raise CLIError(str(exc)) from None
    print("ok")
    return 0


# ---------------------------------------------------------------- parser


def _train_flags(p):
    p.add_argument("--variant", choices=("dd", "mlp", "none"), default="dd")
    p.add_argument("--adapters", type=int, default=None, help="adapter count m (default 6, 0 for none)")
    p.add_argument("--dilations", type=_rates, default=(1, 3))
    p.add_argument("--reduction", type=int, default=4)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--blocks", type=int, default=8)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr-adapter", type=float, default=1e-4)
    p.add_argument("--lr-decoder", type=float, default=1e-5)
    p.add_argument("--lr-halve-epoch", type=int, default=None)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--videos-per-step", type=int, default=2)
    p.add_argument("--subseq-len", type=int, default=8)
    p.add_argument("--steps-per-epoch", type=int, default=None)
    p.add_argument("--clip-norm", type=float, default=1.0)
    p.add_argument("--capacity", type=int, default=4, help="memory bank size K")
    p.add_argument("--policy", choices=("paper", "all", "none"), default="paper")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="ddsam2", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic video dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=50)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--amplitude", type=float, default=1.5)
    p.add_argument("--radius-min", type=float, default=6.0)
    p.add_argument("--radius-max", type=float, default=14.0)
    p.add_argument("--deform", type=float, default=0.15)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--fractions", type=float, nargs=3, default=(0.7, 0.1, 0.2))
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="fine-tune adapters and mask decoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="per-epoch CSV (default CKPT.log.csv)")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="track and score a split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--tau", type=float, default=2.0)
    p.add_argument("--capacity", type=int, default=4)
    p.add_argument("--report", required=True)
    p.add_argument("--method", default="dd-sam2-mini")
    p.add_argument("--oracle-masks", action="store_true", help="debug: predictions = ground truth")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="adapter-count or dilation-rate sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--sweep", choices=("adapters", "dilations"), required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--tau", type=float, default=2.0)
    _train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("profile", help="parameter, MAC and FPS summary of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--capacity", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("baseline", help="rigid-registration or copy-mask tracker")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("rigid", "copy"), required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--tau", type=float, default=2.0)
    p.add_argument("--radius", type=int, default=8)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("check-csv", help="validate report CSV headers")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_check_csv)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CLIError as exc:
        log.error("%s", exc)
        return exc.code
    except NumericError as exc:
        log.error("%s", exc)
        return 3
    except (ConfigError, UsageError, DDSAM2Error) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
