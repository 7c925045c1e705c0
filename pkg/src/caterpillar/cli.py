"""Command-line surface: accounting, gradient checks, benchmarks, training,
evaluation and feature-map dumps.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
CSV schemas are versioned by their leading comment line; wall-clock fields
are the only nondeterministic outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from .blocks import COMBINE_STRATEGIES, LOCAL_MIXERS, BlockConfig, MixerBlock
from .data import LabeledImages, load_cifar10_binary, load_idx, load_raw_blob, synth_blobs
from .errors import CaterpillarError
from .layers import (
    FFN,
    GELU,
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    DWConv2d,
    LayerNorm,
    Linear,
    MaxPool2d,
    ReLU,
    finite_diff_check,
)
from .models import (
    ModelSpec,
    ResnetSpec,
    build_model,
    caterpillar_param_formula,
    count_params,
    estimate_flops,
    load_checkpoint,
    local_mixer_param_count,
    parse_model_spec,
    save_checkpoint,
)
from .smlp import Smlp
from .spc import DIRECTION_PRESETS, MIXING_WAYS, PADDING_MODES, Spc, SpcConfig
from .tensor import Rng
from .train import TrainConfig, evaluate, train_loop

HISTORY_SCHEMA = "# history-v1"
HISTORY_HEADER = "step,lr,loss,acc"
BENCH_SCHEMA = "# bench-v1"
BENCH_HEADER = "operator,config,input_shape,direction,wall_time_s,images_per_s,analytic_macs"


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spec-file", help="model spec file (key=value sections)")
    p.add_argument("--preset", choices=["Mi", "Tx", "T", "S", "B"], help="pyramid preset")
    p.add_argument("--family", choices=["caterpillar", "resnet18"], default="caterpillar")
    p.add_argument("--n-c", type=int, default=64, help="resnet18 first-stage width")
    p.add_argument("--resolution", type=int, help="square input resolution")
    p.add_argument("--input", help="input as H,W,C")
    p.add_argument("--classes", type=int, help="classifier outputs")
    p.add_argument("--patch-size", type=int, help="pyramid patch size")
    p.add_argument("--ffn-ratio", type=int, help="FFN expansion ratio")
    p.add_argument("--base-width", type=int, help="custom pyramid stage-1 width")
    p.add_argument("--depths", help="custom pyramid depths d1,d2,d3,d4")
    p.add_argument("--channel-schedule", help="explicit stage widths c1,c2,c3,c4")
    p.add_argument(
        "--local-mixer",
        help="caterpillar: spc|dwconv|identity;  resnet18: conv3x3|spc",
    )
    p.add_argument("--combine", choices=COMBINE_STRATEGIES, help="token-mixing strategy")
    p.add_argument("--spc-config", help="e.g. 'directions=4;steps=1;padding=zero;mixing=...'")


def _spec_from_args(args) -> "ModelSpec | ResnetSpec":
    if args.spec_file:
        with open(args.spec_file, "r", encoding="utf-8") as f:
            spec = parse_model_spec(f.read())
    elif args.family == "resnet18":
        spec = ResnetSpec(n_c=args.n_c, local_mixer=args.local_mixer or "conv3x3")
    elif args.preset:
        spec = ModelSpec.preset(args.preset)
    elif args.base_width and args.depths:
        spec = ModelSpec(
            variant="custom",
            base_width=args.base_width,
            depths=tuple(int(d) for d in args.depths.split(",")),
        )
    else:
        raise CaterpillarError("no model given: use --spec-file, --preset, or --base-width/--depths")

    over = {}
    if args.resolution:
        over["input"] = (args.resolution, args.resolution, spec.input[2])
    if args.input:
        over["input"] = tuple(int(v) for v in args.input.split(","))
    if args.classes:
        over["num_classes"] = args.classes
    if isinstance(spec, ResnetSpec):
        if args.local_mixer and not args.spec_file:
            over["local_mixer"] = args.local_mixer
        if args.spc_config:
            over["spc"] = SpcConfig.parse(args.spc_config, base=spec.spc)
        return dataclasses.replace(spec, **over)
    if args.patch_size:
        over["patch_size"] = args.patch_size
    if args.channel_schedule:
        over["channel_schedule"] = tuple(int(v) for v in args.channel_schedule.split(","))
    blk = {}
    if args.ffn_ratio:
        blk["ffn_ratio"] = args.ffn_ratio
    if args.local_mixer:
        blk["local_mixer"] = args.local_mixer
    if args.combine:
        blk["combine"] = args.combine
    if args.spc_config:
        blk["spc"] = SpcConfig.parse(args.spc_config, base=spec.block.spc)
    if blk:
        over["block"] = dataclasses.replace(spec.block, **blk)
    return dataclasses.replace(spec, **over)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-synth", help="seed,N,H,W,C,K synthetic blobs")
    p.add_argument("--data-cifar", help="comma-separated CIFAR-10 binary batch files")
    p.add_argument("--data-idx", help="images_file,labels_file in IDX format")
    p.add_argument("--data-raw", help="raw-blob dataset file")


def _data_from_args(args) -> LabeledImages:
    if args.data_synth:
        seed, n, h, w, c, k = (int(v) for v in args.data_synth.split(","))
        return synth_blobs(seed, n, h, w, c, k)
    if args.data_cifar:
        return load_cifar10_binary(args.data_cifar.split(","))
    if args.data_idx:
        img, lab = args.data_idx.split(",")
        return load_idx(img, lab)
    if args.data_raw:
        return load_raw_blob(args.data_raw)
    raise CaterpillarError("no dataset given: use --data-synth/--data-cifar/--data-idx/--data-raw")


def _check_compat(model, data: LabeledImages) -> None:
    h, w, c = model.spec.input
    if data.images.shape[1:] != (h, w, c):
        raise CaterpillarError(
            f"dataset {data.images.shape[1:]} incompatible with model input {(h, w, c)}"
        )


def cmd_paramcount(args) -> int:
    spec = _spec_from_args(args)
    model = build_model(spec)
    total, rows = count_params(model)
    h, w, c = spec.input
    macs, macs_rows = estimate_flops(model, (1, h, w, c))
    mac_by_name = dict(macs_rows)
    print(f"model: {spec.serialize().splitlines()[1]} input {h}x{w}x{c}")
    print(f"total params: {total}  ({total / 1e6:.2f}M)")
    print(f"total MACs:   {macs}  ({macs / 1e9:.3f}G at batch 1; 1 MAC = 1 weight application)")
    if isinstance(spec, ModelSpec):
        closed = caterpillar_param_formula(spec)
        print(f"closed-form params: {closed}  (match: {'yes' if closed == total else 'NO'})")
        widths = spec.widths
        print("local-mixer closed forms per stage width d (biasless):")
        for d in widths:
            conv = local_mixer_param_count(d, d, "conv", 3)
            spc_n = local_mixer_param_count(d, d, "spc")
            dw = local_mixer_param_count(d, d, "dwconv", 3)
            print(
                f"  d={d}: conv3x3 9d^2={conv}  spc 2d^2={spc_n}  ratio {conv / spc_n:.2f}"
                f"  dwconv 9d={dw}"
            )
    if args.compare_local:
        if not isinstance(spec, ModelSpec):
            raise CaterpillarError("--compare-local applies to the pyramid family only")
        other = dataclasses.replace(
            spec, block=dataclasses.replace(spec.block, local_mixer=args.compare_local)
        )
        other_total, _ = count_params(build_model(other))
        print(
            f"delta vs local_mixer={args.compare_local}: {total - other_total} "
            f"({(total - other_total) / 1e6:.2f}M)"
        )
    if args.csv:
        def layer_macs(param_name: str):
            hits = [k for k in mac_by_name if param_name.startswith(k + ".")]
            return mac_by_name[max(hits, key=len)] if hits else ""

        with open(args.csv, "w", encoding="utf-8") as f:
            f.write("# paramcount-v1\n")
            f.write("name,shape,params,macs\n")
            for name, shape, nparams in rows:
                shape_s = "x".join(str(d) for d in shape) if shape else "scalar"
                f.write(f"{name},{shape_s},{nparams},{layer_macs(name)}\n")
        print(f"per-parameter table written to {args.csv}")
    return 0


def _gradcheck_cases(target: str, spc_override: str | None, seed: int):
    """Yield (name, config_text, module_factory, input_shape, tolerance)."""
    shape44 = (1, 4, 4, 8)
    if target in ("all", "linear"):
        yield "linear", "8->5", lambda r: Linear(8, 5, rng=r), shape44, 1e-8
    if target in ("all", "batchnorm"):
        yield "batchnorm", "c=8", lambda r: BatchNorm2d(8), shape44, 1e-4
    if target in ("all", "layernorm"):
        yield "layernorm", "c=8", lambda r: LayerNorm(8), shape44, 1e-4
    if target in ("all", "gelu"):
        yield "gelu", "", lambda r: GELU(), shape44, 1e-4
    if target in ("all", "relu"):
        yield "relu", "", lambda r: ReLU(), shape44, 1e-4
    if target in ("all", "ffn"):
        yield "ffn", "ratio=2", lambda r: FFN(8, 2, rng=r), shape44, 1e-4
    if target in ("all", "conv"):
        yield "conv", "k=3 s=1", lambda r: Conv2d(3, 8, 6, rng=r), shape44, 1e-8
        yield "conv", "k=3 s=2", lambda r: Conv2d(3, 8, 6, stride=2, rng=r), shape44, 1e-8
    if target in ("all", "dwconv"):
        yield "dwconv", "k=3", lambda r: DWConv2d(3, 8, rng=r), shape44, 1e-8
    if target in ("all", "avgpool"):
        yield "avgpool", "k=2", lambda r: AvgPool2d(2), shape44, 1e-8
    if target in ("all", "maxpool"):
        yield "maxpool", "k=3 s=2", lambda r: MaxPool2d(3, 2, 1), shape44, 1e-4
    if target in ("all", "smlp"):
        yield "smlp", "4x4x8", lambda r: Smlp(4, 4, 8, rng=r), shape44, 1e-6
    if target in ("all", "spc"):
        if spc_override is not None:
            cfgs = [SpcConfig.parse(spc_override)]
        else:
            cfgs = [
                SpcConfig.preset(nd, steps=s, padding=pad, mixing=mix)
                for nd in sorted(DIRECTION_PRESETS)
                for s in (0, 1, 2)
                for pad in PADDING_MODES
                for mix in MIXING_WAYS
            ]
        for cfg in cfgs:
            c = 8
            if cfg.reduces_channels and c % cfg.n_directions:
                c = {5: 10, 9: 9}[cfg.n_directions]
            yield (
                "spc",
                cfg.serialize(),
                lambda r, cfg=cfg, c=c: Spc(c, cfg=cfg, rng=r),
                (1, 5, 5, c),
                1e-6,
            )
    if target in ("all", "block"):
        combos = [("spc", combine) for combine in COMBINE_STRATEGIES]
        combos += [("dwconv", "LG"), ("identity", "LG")]
        for mixer, combine in combos:
            cfg = BlockConfig(local_mixer=mixer, combine=combine, ffn_ratio=2)
            yield (
                "block",
                f"local={mixer} combine={combine}",
                lambda r, cfg=cfg: MixerBlock(4, 4, 8, cfg, rng=r),
                shape44,
                1e-4,
            )


def run_gradcheck(target: str = "all", spc_override: str | None = None, trials: int = 1, seed: int = 0):
    """Run the finite-difference suite; returns (all_passed, rows)."""
    rows = []
    ok = True
    for name, cfg_text, factory, shape, tol in _gradcheck_cases(target, spc_override, seed):
        worst = 0.0
        for trial in range(trials):
            module = factory(Rng(seed + 13 * trial + 1))
            x = Rng(seed + 977 * trial).normal(int(np.prod(shape))).reshape(shape)
            worst = max(worst, finite_diff_check(module, x, seed=seed + trial))
        passed = worst < tol
        ok = ok and passed
        rows.append((name, cfg_text, worst, tol, passed))
    return ok, rows


def cmd_gradcheck(args) -> int:
    ok, rows = run_gradcheck(args.target, args.config, args.trials, args.seed)
    width = max(len(r[1]) for r in rows) if rows else 10
    for name, cfg_text, worst, tol, passed in rows:
        status = "pass" if passed else "FAIL"
        print(f"{status}  {name:<10} {cfg_text:<{width}}  max_rel_err={worst:.3e}  tol={tol:g}")
    print(f"{sum(1 for r in rows if r[4])}/{len(rows)} checks passed")
    if not ok:
        offenders = [f"{n} [{c}]" for n, c, _, _, p in rows if not p]
        print("failures: " + "; ".join(offenders), file=sys.stderr)
        return 1
    return 0


def _bench_target(op: str, channels: int, rng: Rng):
    if op == "spc":
        return Spc(channels, cfg=SpcConfig(), rng=rng)
    if op == "conv3x3":
        return Conv2d(3, channels, channels, rng=rng)
    if op == "dwconv3x3":
        return DWConv2d(3, channels, rng=rng)
    raise CaterpillarError(f"unknown bench op {op!r}")


def cmd_bench(args) -> int:
    ops = ["spc", "conv3x3", "dwconv3x3"] if args.op == "all" else [args.op]
    dtype = np.float64 if args.dtype == "f64" else np.float32
    shape = (args.batch, args.hw, args.hw, args.channels)
    lines = [
        BENCH_SCHEMA,
        f"# dtype={args.dtype}",
        f"# threads={os.environ.get('OMP_NUM_THREADS', os.cpu_count())}",
        f"# timestamp={time.strftime('%Y-%m-%dT%H:%M:%S')}",
        BENCH_HEADER,
    ]
    directions = ("fwd", "fwd+bwd") if args.direction == "both" else (args.direction,)
    mac_values = {}
    for op in ops:
        layer = _bench_target(op, args.channels, Rng(args.seed)).astype(dtype)
        x = Rng(args.seed + 1).normal(int(np.prod(shape))).reshape(shape).astype(dtype)
        macs = layer.macs(shape)
        mac_values[op] = macs
        cfg_text = layer.cfg.serialize() if op == "spc" else f"k=3;c={args.channels}"
        for direction in directions:
            def body():
                y = layer.forward(x, training=True)
                if direction == "fwd+bwd":
                    layer.zero_grad()
                    layer.backward(y)
            for _ in range(args.warmup):
                body()
            t0 = time.perf_counter()
            for _ in range(args.reps):
                body()
            wall = time.perf_counter() - t0
            ips = args.batch * args.reps / wall if wall > 0 else float("inf")
            lines.append(
                f"{op},{cfg_text},{'x'.join(str(d) for d in shape)},{direction},"
                f"{wall:.6f},{ips:.2f},{macs}"
            )
    if "spc" in mac_values and "conv3x3" in mac_values:
        ratio = mac_values["conv3x3"] / mac_values["spc"]
        print(f"analytic MACs/map at d={args.channels}: conv3x3/spc = {ratio:.2f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    return 0


def _write_history(path: str, history) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(HISTORY_SCHEMA + "\n")
        f.write(HISTORY_HEADER + "\n")
        for step, lr, loss, acc in history:
            f.write(f"{step},{lr:.17g},{loss:.17g},{acc:.17g}\n")


def cmd_train(args) -> int:
    spec = _spec_from_args(args)
    data = _data_from_args(args)
    cfg = TrainConfig(
        lr_peak=args.lr,
        lr_min=args.lr_min,
        warmup_steps=args.warmup_steps,
        warmup_lr=args.warmup_lr,
        total_steps=args.steps,
        weight_decay=args.weight_decay,
        label_smoothing=args.label_smoothing,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    dtype = np.float64 if args.dtype == "f64" else np.float32
    model = build_model(spec, seed=args.seed).astype(dtype)
    _check_compat(model, data)
    images = data.images.astype(dtype)
    history = train_loop(model, images, data.labels, cfg)
    if args.history:
        _write_history(args.history, history)
        print(f"history written to {args.history}")
    final_acc = evaluate(model, images, data.labels)
    print(f"final_train_batch_acc={history[-1][3]:.6f}")
    print(f"final_eval_acc={final_acc:.6f}")
    if args.checkpoint:
        save_checkpoint(args.checkpoint, model)
        print(f"checkpoint written to {args.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data = _data_from_args(args)
    _check_compat(model, data)
    dtype = next(model.parameters()).value.dtype
    acc = evaluate(model, data.images.astype(dtype), data.labels)
    print(f"top1={acc:.6f}")
    return 0


def write_pgm(path: str, image: np.ndarray) -> tuple[float, float]:
    """Min-max scale a 2-D map to bytes and write binary PGM (P5)."""
    lo, hi = float(image.min()), float(image.max())
    if hi > lo:
        scaled = np.round((image - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.zeros_like(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(scaled.tobytes())
    return lo, hi


def cmd_dump_features(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data = _data_from_args(args)
    _check_compat(model, data)
    x = data.images[args.image_index : args.image_index + 1].astype(np.float32)
    feats = model.stage_features(x)
    if args.stage != "all":
        k = int(args.stage)
        if not 1 <= k <= len(feats):
            raise CaterpillarError(f"stage {k} out of range 1..{len(feats)}")
        feats = {k: feats[k - 1]}
    else:
        feats = dict(enumerate(feats, start=1))
    os.makedirs(args.out_dir, exist_ok=True)
    for k, fmap in feats.items():
        if args.reduce == "mean":
            image = fmap[0].mean(axis=2)
            tag = "mean"
        elif args.reduce.startswith("channel:"):
            ch = int(args.reduce.split(":", 1)[1])
            if not 0 <= ch < fmap.shape[3]:
                raise CaterpillarError(f"channel {ch} out of range for stage {k}")
            image = fmap[0, :, :, ch]
            tag = f"channel{ch}"
        else:
            raise CaterpillarError(f"unknown reduce {args.reduce!r}")
        path = os.path.join(args.out_dir, f"stage{k}_{tag}.pgm")
        lo, hi = write_pgm(path, image)
        print(f"{path}: {fmap.shape[1]}x{fmap.shape[2]} scaled from [{lo:.6g}, {hi:.6g}]")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caterpillar",
        description="shift-mixer models: accounting, verification, training, benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("paramcount", help="parameter and MAC accounting")
    _add_model_args(p)
    p.add_argument("--compare-local", choices=("dwconv", "identity", "spc"))
    p.add_argument("--csv", help="write the per-parameter table here")
    p.set_defaults(fn=cmd_paramcount)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--target", default="all")
    p.add_argument("--config", help="spc config override, e.g. 'padding=reflect'")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="operator throughput microbenchmark")
    p.add_argument("--op", default="all", choices=("all", "spc", "conv3x3", "dwconv3x3"))
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--hw", type=int, default=32)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--direction", choices=("fwd", "fwd+bwd", "both"), default="both")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("train", help="toy deterministic training run")
    _add_model_args(p)
    _add_data_args(p)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-min", type=float, default=1e-5)
    p.add_argument("--warmup-steps", type=int, default=0)
    p.add_argument("--warmup-lr", type=float, default=1e-6)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--history", help="history CSV output path")
    p.add_argument("--checkpoint", help="checkpoint output path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("dump-features", help="write stage feature maps as PGM files")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p)
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--stage", default="all", help="stage number or 'all'")
    p.add_argument("--reduce", default="mean", help="mean or channel:<i>")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(fn=cmd_dump_features)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CaterpillarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
