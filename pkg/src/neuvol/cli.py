"""Command-line entry point.

Subcommands: train, eval, dwt, idwt, checkerboard, phantoms, preprocess.
All commands honor --seed and are run-to-run deterministic (single worker).
A --config file holds key=value lines (keys are flag names with dashes
replaced by underscores); explicit command-line flags win over the file.

Exit codes: 0 success, 2 argument error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .autograd import NumericError, Tape, backward, kaiming_conv_weights, poly_lr, sgd_step
from .losses import dice_metric, hd95, total_loss_nodes
from .network import NetConfig, SegNetwork, load_checkpoint, save_checkpoint
from .ops import ConvKernel, SubpixelParams, checkerboard_metric, subpixel_block, transposed_conv3d
from .preprocess import (
    SegSample,
    fingerprint,
    load_fingerprint,
    make_phantoms,
    mirror_augment,
    preprocess_case,
    sample_patch,
    save_fingerprint,
    target_spacing,
)
from .volume import LabelVolume, Volume4, load_label, load_volume, save_label, save_volume
from .wavelet import SubbandSet, dwt3d, idwt3d

FG_PATCH_PROB = 1.0 / 3.0


def _triple(text: str) -> tuple[int, int, int]:
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return tuple(parts)


def _flags(text: str) -> tuple[bool, bool, bool]:
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 3 or any(v not in (0, 1) for v in parts):
        raise argparse.ArgumentTypeError(f"expected three 0/1 flags, got {text!r}")
    return tuple(bool(v) for v in parts)


def _strides(text: str) -> tuple[tuple[int, int, int], ...]:
    return tuple(_triple(part) for part in text.split(";"))


def _format_strides(schedule) -> str:
    return ";".join(",".join(str(v) for v in t) for t in schedule)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuvol",
                                     description="volumetric segmentation toolkit")
    subs = parser.add_subparsers(dest="command", required=True)

    def common(sub):
        sub.add_argument("--seed", type=int, default=0)
        sub.add_argument("--config", default=None,
                         help="key=value file; command-line flags override it")

    p = subs.add_parser("train", help="train a model on a preprocessed dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset root (cases/ + fingerprint.json)")
    p.add_argument("--out", required=True, help="run directory for checkpoints and the log")
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.99)
    p.add_argument("--weight-decay", type=float, default=3e-5)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--patch", type=_triple, default=(32, 32, 32))
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--channel-cap", type=int, default=320)
    p.add_argument("--strides", type=_strides, default=((2, 2, 2),) * 5,
                   help="semicolon-separated stride triples, e.g. 1,2,2;2,2,2;...")
    p.add_argument("--no-wavelet", action="store_true",
                   help="replace the wavelet branch output with zeros (ablation)")
    p.add_argument("--val-every", type=int, default=10)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")

    p = subs.add_parser("eval", help="evaluate a checkpoint, writing a metrics CSV")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--patch", type=_triple, default=None,
                   help="defaults to the patch the checkpoint was trained with")
    p.add_argument("--split", choices=("all", "train", "val"), default="all")
    p.add_argument("--val-fraction", type=float, default=0.2)

    p = subs.add_parser("dwt", help="decompose a .vol into wavelet band files")
    common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--axes", type=_flags, default=(True, True, True),
                   help="which axes to transform, e.g. 0,1,1")
    p.add_argument("--levels", type=int, default=1)

    p = subs.add_parser("idwt", help="reassemble a .vol from wavelet band files")
    common(p)
    p.add_argument("--in-dir", required=True)
    p.add_argument("--stem", required=True, help="band file prefix (input name without .vol)")
    p.add_argument("--out", required=True)
    p.add_argument("--axes", type=_flags, default=(True, True, True))
    p.add_argument("--levels", type=int, default=1)

    p = subs.add_parser("checkerboard",
                        help="phase imbalance: transposed conv vs sub-pixel block")
    common(p)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--seeds", type=int, default=50)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--channels", type=int, default=32, help="output channels per method")
    p.add_argument("--size", type=int, default=12, help="constant input side length")

    p = subs.add_parser("phantoms", help="generate a synthetic raw dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--shape", type=_triple, default=(32, 32, 32))
    p.add_argument("--spacing", type=lambda s: tuple(float(v) for v in s.split(",")),
                   default=(1.0, 1.0, 1.0))

    p = subs.add_parser("preprocess",
                        help="fingerprint, resample, and normalise a raw dataset")
    common(p)
    p.add_argument("--in", dest="input", required=True, help="raw dataset root")
    p.add_argument("--out", required=True, help="processed dataset root")
    p.add_argument("--modality", choices=("CT", "MRI"), default="CT")

    return parser


def _read_config(path: str, parser: argparse.ArgumentParser, command: str) -> dict:
    """Parse a key=value file into typed defaults for one subcommand."""
    sub = None
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            sub = action.choices[command]
    actions = {a.dest: a for a in sub._actions}
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, eq, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not eq or not key:
                raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
            action = actions.get(key)
            if action is None:
                raise ValueError(f"{path}:{ln}: unknown config key {key!r} for {command}")
            if action.nargs == 0:  # store_true flags
                out[key] = value.lower() in ("1", "true", "yes")
            elif action.type is not None:
                out[key] = action.type(value)
            else:
                out[key] = value
    return out


# --------------------------------------------------------------- dataset

def load_dataset(root: str):
    cases_dir = os.path.join(root, "cases")
    if not os.path.isdir(cases_dir):
        raise FileNotFoundError(f"dataset cases directory not found: {cases_dir}")
    samples = []
    for name in sorted(os.listdir(cases_dir)):
        if not name.endswith(".img.vol"):
            continue
        cid = name[: -len(".img.vol")]
        img = load_volume(os.path.join(cases_dir, name))
        lbl_path = os.path.join(cases_dir, cid + ".lbl.vol")
        lbl = load_label(lbl_path) if os.path.exists(lbl_path) else None
        samples.append(SegSample(cid, img, lbl))
    if not samples:
        raise FileNotFoundError(f"no *.img.vol cases under {cases_dir}")
    fp_path = os.path.join(root, "fingerprint.json")
    fp = load_fingerprint(fp_path) if os.path.exists(fp_path) else None
    return samples, fp


def split_train_val(samples, val_fraction: float):
    """Deterministic split: sorted case ids, the trailing fraction validates."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val fraction must be in [0, 1), got {val_fraction}")
    n_val = int(round(val_fraction * len(samples)))
    if n_val >= len(samples):
        raise ValueError("validation split leaves no training cases")
    return samples[: len(samples) - n_val], samples[len(samples) - n_val:]


def _require_labels(samples):
    for s in samples:
        if s.label is None:
            raise FileNotFoundError(f"case {s.case_id} has no label file")
        if s.label.data.shape != s.image.spatial_shape:
            raise ValueError(f"case {s.case_id}: image/label shape mismatch")


# ---------------------------------------------------------------- train

def _validate(net: SegNetwork, samples, patch, num_classes: int):
    """Per-foreground-class mean dice over cases, plus the class mean."""
    per_class = {c: [] for c in range(1, num_classes)}
    for s in samples:
        pred = net.infer(s.image, patch)
        for c in per_class:
            per_class[c].append(dice_metric(pred.data, s.label.data, c))
    means = [float(np.mean(per_class[c])) for c in sorted(per_class)]
    return means, float(np.mean(means))


def _train_one_epoch(net, samples, rng, args, lr, num_classes):
    params = net.parameters()
    losses = []
    for _ in range(len(samples)):
        grad_sum: dict[str, np.ndarray] = {}
        batch_loss = 0.0
        for _ in range(args.batch):
            s = samples[int(rng.integers(len(samples)))]
            force = rng.random() < FG_PATCH_PROB
            img, lab = sample_patch(s.image.data, s.label.data, args.patch, rng, force)
            img, lab = mirror_augment(img, lab, rng)
            tape = Tape()
            heads = net.forward_nodes(tape, Volume4(img, s.spacing))
            loss = total_loss_nodes(tape, heads,
                                    LabelVolume(lab, s.spacing, num_classes), num_classes)
            if not np.isfinite(loss.value):
                raise NumericError(f"non-finite training loss in case {s.case_id}")
            backward(tape, loss)
            batch_loss += float(loss.value)
            for p in params:
                g = tape.grad_of(p)
                if g is not None:
                    grad_sum[p.name] = g if p.name not in grad_sum else grad_sum[p.name] + g
        grads = {k: v / args.batch for k, v in grad_sum.items()}
        sgd_step(params, grads, lr, args.momentum, args.weight_decay)
        losses.append(batch_loss / args.batch)
    return float(np.mean(losses))


def _net_extras(args, config: NetConfig) -> dict[str, str]:
    return {
        "num_classes": str(config.num_classes),
        "input_channels": str(config.input_channels),
        "base_channels": str(config.base_channels),
        "channel_cap": str(config.channel_cap),
        "strides": _format_strides(config.stride_schedule),
        "use_wavelet": "1" if config.use_wavelet else "0",
        "patch": ",".join(str(v) for v in args.patch),
    }


def _config_from_extras(extras: dict[str, str]) -> NetConfig:
    return NetConfig(
        num_classes=int(extras["num_classes"]),
        input_channels=int(extras["input_channels"]),
        base_channels=int(extras["base_channels"]),
        channel_cap=int(extras["channel_cap"]),
        stride_schedule=_strides(extras["strides"]),
        use_wavelet=extras["use_wavelet"] == "1",
    )


def cmd_train(args) -> int:
    if args.epochs < 1:
        raise ValueError("epochs must be at least 1")
    if args.lr <= 0:
        raise ValueError("lr must be positive")
    samples, fp = load_dataset(args.data)
    if fp is None:
        raise FileNotFoundError(f"fingerprint.json not found in {args.data}; "
                                "run the preprocess command first")
    _require_labels(samples)
    train_samples, val_samples = split_train_val(samples, args.val_fraction)
    num_classes = fp.num_classes

    config = NetConfig(
        num_classes=num_classes,
        input_channels=samples[0].image.channels,
        base_channels=args.base_channels,
        channel_cap=args.channel_cap,
        stride_schedule=args.strides,
        use_wavelet=not args.no_wavelet,
    )
    net = SegNetwork(config, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    start_epoch = 0
    best = -1.0
    if args.resume:
        extras = load_checkpoint(args.resume, net)
        start_epoch = int(extras["epoch"])
        best = float(extras["best"])
        rng.bit_generator.state = json.loads(extras["rng"])

    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "training_log.csv")
    dice_cols = [f"dice_class{c}" for c in range(1, num_classes)]
    mode = "a" if args.resume and os.path.exists(log_path) else "w"
    with open(log_path, mode, newline="") as log:
        writer = csv.writer(log)
        if mode == "w":
            writer.writerow(["epoch", "lr", "loss"] + dice_cols)
        for epoch in range(start_epoch, args.epochs):
            lr = poly_lr(args.lr, epoch, args.epochs)
            mean_loss = _train_one_epoch(net, train_samples, rng, args, lr, num_classes)
            row = [epoch, f"{lr:.10g}", f"{mean_loss:.10g}"]
            is_val = val_samples and ((epoch + 1) % args.val_every == 0
                                      or epoch == args.epochs - 1)
            if is_val:
                class_dice, mean_dice = _validate(net, val_samples, args.patch, num_classes)
                row += [f"{d:.10g}" for d in class_dice]
                print(f"epoch {epoch + 1}/{args.epochs} lr {lr:.5f} "
                      f"loss {mean_loss:.4f} val dice {mean_dice:.4f}")
                if mean_dice >= best:
                    best = mean_dice
                    save_checkpoint(os.path.join(args.out, "best.nvckpt"), net,
                                    {**_net_extras(args, config),
                                     "epoch": str(epoch + 1), "best": f"{best:.10g}",
                                     "rng": json.dumps(rng.bit_generator.state)})
            else:
                row += [""] * len(dice_cols)
                print(f"epoch {epoch + 1}/{args.epochs} lr {lr:.5f} loss {mean_loss:.4f}")
            writer.writerow(row)
            log.flush()
            save_checkpoint(os.path.join(args.out, "last.nvckpt"), net,
                            {**_net_extras(args, config),
                             "epoch": str(epoch + 1), "best": f"{best:.10g}",
                             "rng": json.dumps(rng.bit_generator.state)})
    return 0


# ----------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    samples, fp = load_dataset(args.data)
    _require_labels(samples)
    if args.split != "all":
        train_samples, val_samples = split_train_val(samples, args.val_fraction)
        samples = train_samples if args.split == "train" else val_samples

    extras = _peek_extras(args.checkpoint)
    config = _config_from_extras(extras)
    net = SegNetwork(config, seed=args.seed)
    load_checkpoint(args.checkpoint, net)
    patch = args.patch or _triple(extras["patch"])

    rows = []
    for s in samples:
        pred = net.infer(s.image, patch)
        for c in range(1, config.num_classes):
            d = dice_metric(pred.data, s.label.data, c)
            h = hd95(pred.data == c, s.label.data == c, s.spacing)
            rows.append([s.case_id, c, f"{d:.10g}", "NA" if h is None else f"{h:.10g}"])
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "class", "dice", "hd95_mm"])
        writer.writerows(rows)
    mean_dice = float(np.mean([float(r[2]) for r in rows])) if rows else 0.0
    print(f"evaluated {len(samples)} cases, mean dice {mean_dice:.4f}")
    return 0


def _peek_extras(path: str) -> dict[str, str]:
    manifest = os.path.join(path, "manifest.txt")
    extras = {}
    with open(manifest) as fh:
        for line in fh:
            key, _, value = line.rstrip("\n").partition("=")
            if key.startswith("extra."):
                extras[key[len("extra."):]] = value
    return extras


# ------------------------------------------------------------- wavelets

def cmd_dwt(args) -> int:
    vol = load_volume(args.input)
    os.makedirs(args.out_dir, exist_ok=True)
    stem = os.path.basename(args.input)
    stem = stem[:-4] if stem.endswith(".vol") else stem
    if args.levels < 1:
        raise ValueError("levels must be at least 1")
    prefix = stem
    current = vol
    for level in range(args.levels):
        sub = dwt3d(current, args.axes)
        last = level == args.levels - 1
        for i, band in enumerate(sub.bands):
            if i == 0 and not last:
                continue  # the approximation recurses instead
            save_volume(os.path.join(args.out_dir, f"{prefix}.band{i}.vol"), band)
        current = sub.bands[0]
        prefix = f"{prefix}.band0"
    print(f"wrote {args.levels}-level decomposition of {args.input} to {args.out_dir}")
    return 0


def cmd_idwt(args) -> int:
    if args.levels < 1:
        raise ValueError("levels must be at least 1")
    n_bands = 2 ** sum(args.axes)
    prefix = args.stem + ".band0" * (args.levels - 1)
    current = None
    for level in range(args.levels - 1, -1, -1):
        bands = []
        for i in range(n_bands):
            if i == 0 and current is not None:
                bands.append(current)
                continue
            path = os.path.join(args.in_dir, f"{prefix}.band{i}.vol")
            bands.append(load_volume(path))
        current = idwt3d(SubbandSet(bands, tuple(args.axes)))
        prefix = prefix[: -len(".band0")] if level else prefix
    save_volume(args.out, current)
    print(f"reassembled {args.out} from {args.in_dir}")
    return 0


# ----------------------------------------------------------- demo + data

def cmd_checkerboard(args) -> int:
    if args.kernel < args.stride:
        raise ValueError("kernel must be at least the stride")
    n = args.size
    factors = (args.stride,) * 3
    rows = []
    for seed in range(args.seeds):
        rng = np.random.default_rng(seed)
        const = Volume4(np.ones((n, n, n, 1), np.float32))

        tk = ConvKernel(
            kaiming_conv_weights(rng, 1, args.channels, (args.kernel,) * 3),
            None, stride=factors, padding=(0, 0, 0))
        t_out = transposed_conv3d(const, tk)
        m = t_out.spatial_shape[0] - t_out.spatial_shape[0] % args.stride
        t_crop = Volume4(t_out.data[:m, :m, :m], t_out.spacing)
        t_imb = checkerboard_metric(t_crop, factors)

        r = args.stride ** 3
        sp = SubpixelParams(
            ConvKernel(kaiming_conv_weights(rng, 2, 1, (5, 5, 5)), np.zeros(2, np.float32)),
            ConvKernel(kaiming_conv_weights(rng, r * args.channels, 2, (3, 3, 3)),
                       np.zeros(r * args.channels, np.float32)),
            factors)
        s_out = subpixel_block(const, sp)
        s_imb = checkerboard_metric(s_out, factors)

        rows.append([seed, "transposed", f"{t_imb:.10g}"])
        rows.append([seed, "subpixel", f"{s_imb:.10g}"])
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "method", "phase_imbalance"])
        writer.writerows(rows)
    t_med = float(np.median([float(r[2]) for r in rows if r[1] == "transposed"]))
    s_med = float(np.median([float(r[2]) for r in rows if r[1] == "subpixel"]))
    print(f"median phase imbalance: transposed {t_med:.4f}, subpixel {s_med:.4f}")
    return 0


def cmd_phantoms(args) -> int:
    cases = make_phantoms(args.cases, args.classes, args.shape, args.spacing, args.seed)
    cases_dir = os.path.join(args.out, "cases")
    os.makedirs(cases_dir, exist_ok=True)
    for i, (vol, lab) in enumerate(cases):
        cid = f"case_{i:04d}"
        save_volume(os.path.join(cases_dir, f"{cid}.img.vol"), vol)
        save_label(os.path.join(cases_dir, f"{cid}.lbl.vol"), lab)
    print(f"wrote {args.cases} phantom cases to {cases_dir}")
    return 0


def cmd_preprocess(args) -> int:
    samples, _ = load_dataset(args.input)
    _require_labels(samples)
    fp = fingerprint(((s.image, s.label) for s in samples), args.modality)
    spacing = target_spacing(fp)
    cases_dir = os.path.join(args.out, "cases")
    os.makedirs(cases_dir, exist_ok=True)
    for s in samples:
        vol, lab = preprocess_case(s.image, s.label, fp, spacing)
        save_volume(os.path.join(cases_dir, f"{s.case_id}.img.vol"), vol)
        save_label(os.path.join(cases_dir, f"{s.case_id}.lbl.vol"), lab)
    save_fingerprint(os.path.join(args.out, "fingerprint.json"), fp)
    print(f"preprocessed {len(samples)} cases to {args.out} "
          f"(target spacing {spacing})")
    return 0


# ----------------------------------------------------------------- main

COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "dwt": cmd_dwt,
    "idwt": cmd_idwt,
    "checkerboard": cmd_checkerboard,
    "phantoms": cmd_phantoms,
    "preprocess": cmd_preprocess,
}


def _peek_config(argv) -> tuple[str | None, str | None]:
    """Find the subcommand and --config path without a full parse, so the
    config file can satisfy flags argparse would otherwise require."""
    command = argv[0] if argv and not argv[0].startswith("-") else None
    path = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif tok.startswith("--config="):
            path = tok.split("=", 1)[1]
    return command, path


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        command, config_path = _peek_config(argv)
        if command in COMMANDS and config_path:
            defaults = _read_config(config_path, parser, command)
            for action in parser._actions:
                if isinstance(action, argparse._SubParsersAction):
                    sub = action.choices[command]
                    sub.set_defaults(**defaults)
                    for sub_action in sub._actions:
                        if sub_action.dest in defaults:
                            sub_action.required = False
        args = parser.parse_args(argv)
        return int(COMMANDS[args.command](args) or 0)
    except SystemExit as exc:
        return int(exc.code or 0)
    except argparse.ArgumentTypeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
