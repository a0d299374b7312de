"""``dtnet`` command line.

Exit codes: 0 success, 2 usage error, 3 validation or assertion failure,
4 I/O error. Every command that takes ``--out`` writes ``run.txt`` there,
holding the fully resolved argument list, so ``dtnet replay`` can rerun it
and compare outputs byte for byte.
"""

from __future__ import annotations

import argparse
import logging
import shlex
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from dtnet import __version__, dataio, metrics, model as model_mod, ops
from dtnet.mdic import ThresholdSpec

log = logging.getLogger("dtnet")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO = 0, 2, 3, 4
DEFAULT_FILTERS = "24,48,96,192,192"
RUN_MANIFEST = "run.txt"
SWEEP_OFF = ("off", "none", "0", "0.0")


class UsageError(Exception):
    pass


class ValidationFailure(Exception):
    pass


class IOFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# flag parsing helpers


def _int_list(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{what} must be a comma-separated list of integers, got {text!r}") from None


def _positive(value, what: str):
    if value <= 0:
        raise UsageError(f"{what} must be positive, got {value}")
    return value


def _variant(text: str) -> str:
    return {"eps": "epsilon", "epsilon": "epsilon", "hard": "hard"}[text]


def _add_model_flags(p, classes_default: int | None = 5) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--filters", default=DEFAULT_FILTERS, help="five encoder filter counts, multiples of 4")
    g.add_argument("--kernels", default="1,3,5,7", help="odd kernel sizes of the four parts")
    g.add_argument("--global-kernel", type=int, default=3)
    g.add_argument("--classes", type=int, default=classes_default)
    g.add_argument("--single-scale", action="store_true", help="one kernel size per part instead of all four")
    g.add_argument("--threshold", type=float, default=0.1)
    g.add_argument("--variant", choices=("hard", "eps"), default="eps")
    g.add_argument("--epsilon", type=float, default=1e-10)
    g.add_argument("--no-mdic", action="store_true", help="plain convolutions instead of directional parts")
    g.add_argument("--no-threshold", action="store_true")
    g.add_argument("--no-skip", action="store_true", help="zero the encoder features fed to the decoder")


def _add_train_flags(p, epochs_default: int) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--data", required=True, help="dataset manifest or directory")
    g.add_argument("--test-data", help="held-out dataset; without it --data is split 3:2")
    g.add_argument("--epochs", type=int, default=epochs_default)
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", "--size-from-data", dest="size", type=int, help="expected image size")
    g.add_argument("--channels", type=int, help="expected image channels")
    g.add_argument("--out", required=True)


def _config(args, size: int, channels: int) -> model_mod.DtNetConfig:
    try:
        threshold = ThresholdSpec(args.threshold, _variant(args.variant), args.epsilon)
        return model_mod.DtNetConfig(
            encoder_filters=_int_list(args.filters, "--filters"),
            num_classes=args.classes,
            input_channels=channels,
            input_size=size,
            part_kernels=_int_list(args.kernels, "--kernels"),
            global_kernel=args.global_kernel,
            multiscale=not args.single_scale,
            threshold=threshold,
            disable_mdic=args.no_mdic,
            disable_threshold=args.no_threshold,
            disable_skip=args.no_skip,
        )
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _check_train_flags(args) -> None:
    _positive(args.epochs, "--epochs")
    _positive(args.batch, "--batch")
    _positive(args.lr, "--lr")
    if args.size is not None and (args.size < 32 or args.size % 32):
        raise UsageError(f"--size must be a multiple of 32, got {args.size}")
    # flag-level validation of the model before any file is read
    _config(args, args.size or 32, args.channels or 1)


def _load(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        return dataio.load_dataset(path)
    except (OSError, ValueError) as exc:
        raise IOFailure(f"cannot load dataset {path}: {exc}") from None


def _load_split(args):
    images, masks = _load(args.data)
    if args.test_data:
        test = _load(args.test_data)
        train = (images, masks)
    else:
        cut = (len(images) * 3) // 5
        if cut < 1 or cut >= len(images):
            raise ValidationFailure("--data too small to split 3:2; pass --test-data")
        train, test = (images[:cut], masks[:cut]), (images[cut:], masks[cut:])
    size, channels = train[0].shape[2], train[0].shape[1]
    if args.size is not None and args.size != size:
        raise ValidationFailure(f"--size {args.size} but data is {size}x{size}")
    if args.channels is not None and args.channels != channels:
        raise ValidationFailure(f"--channels {args.channels} but data has {channels}")
    if test[0].shape[1:] != train[0].shape[1:]:
        raise ValidationFailure("train and test images differ in shape")
    top = int(max(train[1].max(), test[1].max()))
    if top >= args.classes:
        raise ValidationFailure(f"masks contain label {top} but --classes is {args.classes}")
    return train, test, _config(args, size, channels)


def _resolved_argv(parser: argparse.ArgumentParser, command: str, args) -> list[str]:
    """Every flag of ``command`` spelled out with its resolved value."""
    out = [command]
    for action in parser._actions:  # noqa: SLF001 - argparse exposes no public listing
        if not action.option_strings or action.dest in ("help",):
            continue
        value = getattr(args, action.dest, None)
        flag = action.option_strings[0]
        if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
            if value:
                out.append(flag)
        elif value is not None:
            if action.dest in ("data", "test_data", "model", "image", "out"):
                value = str(Path(value).resolve())
            out += [flag, str(value)]
    return out


def _write_manifest(out: Path, args, extra=()) -> None:
    from dtnet.train import write_kv

    pairs = [
        ("command", args.command),
        ("version", __version__),
        ("argv", shlex.join(args.resolved_argv)),
    ]
    pairs += [(k, v) for k, v in sorted(vars(args).items()) if k not in ("func", "resolved_argv", "command")]
    pairs += list(extra)
    write_kv(out / RUN_MANIFEST, pairs)


def _prepare_out(path) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise IOFailure(f"{out} exists and is not a directory")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {out}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    try:
        spec = dataio.SynthSpec(args.n, args.size, args.classes, args.seed, args.channels, noise=args.noise)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _prepare_out(args.out)
    result = dataio.synth_generate(spec, out)
    _write_manifest(out, args, [("digest", result.digest)])
    print(f"wrote {result.n_images} pairs to {out}")
    print(f"digest {result.digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    from dtnet import plotting, train as tr

    _check_train_flags(args)
    if args.checkpoint_every < 0:
        raise UsageError("--checkpoint-every must be >= 0")
    train_set, test_set, cfg = _load_split(args)
    out = _prepare_out(args.out)
    model = model_mod.build(cfg, args.seed)
    run = tr.train(
        model, train_set, test_set, args.epochs, args.batch, args.seed, args.lr,
        out_dir=out, checkpoint_every=args.checkpoint_every,
    )
    tr.write_curves(run, out / "curves.csv")
    model_mod.save(model, out / "model")
    final = run.records[-1]
    metrics.write_report(final.test_summary, out / "metrics.csv")
    plotting.plot_training_curves({"run": tr.read_curves(out / "curves.csv")}, out / "curves.png")
    _write_manifest(out, args, [*tr.run_manifest_pairs(run), ("final_test_dice", f"{final.test_dice:.6f}")])
    print(f"final test loss {final.test_loss:.4f} mean foreground dice {final.test_dice:.4f}")
    print(f"wall time {run.wall_time:.1f}s; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from dtnet.train import evaluate

    try:
        regions = metrics.parse_regions(args.regions) if args.regions else []
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.predictions < 0:
        raise UsageError("--predictions must be >= 0")
    try:
        model = model_mod.load(args.model)
    except (OSError, ValueError) as exc:
        raise IOFailure(f"cannot load model {args.model}: {exc}") from None
    data = _load(args.data)
    try:
        result = evaluate(model, data, regions=regions)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None
    out = _prepare_out(args.out)
    metrics.write_report(result.summary, out / "metrics.csv", args.scheme, regions)
    if args.predictions:
        (out / "predictions").mkdir(exist_ok=True)
        for i, pred in enumerate(result.predictions[: args.predictions]):
            dataio.export_ppm(pred, out / "predictions" / f"{i:05d}.ppm")
    _write_manifest(
        out, args,
        [("data_digest", dataio.dataset_digest(*data)), ("params_digest", model.store.digest()),
         ("loss", f"{result.loss:.8f}")],
    )
    print(f"loss {result.loss:.4f} mean foreground dice ({args.scheme}) "
          f"{result.summary.mean_foreground('dice', args.scheme):.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from dtnet.gradsuite import run_suite

    if not 1e-6 <= args.eps <= 1e-4:
        raise UsageError("--eps must lie in [1e-6, 1e-4]")
    _positive(args.tol, "--tol")
    out = _prepare_out(args.out) if args.out else None
    start = time.perf_counter()
    results = run_suite(args.scope, args.eps, args.tol, args.seed)
    rows = [["op", "scope", "max_rel_error", "max_abs_error", "checked", "skipped", "seconds", "status"]]
    for r in results:
        rep = r.report
        rows.append([r.name, r.scope, f"{rep.max_rel_error:.3e}", f"{rep.max_abs_error:.3e}",
                     str(rep.n_checked), str(rep.n_skipped), f"{r.seconds:.2f}",
                     "pass" if rep.passed else "FAIL"])
    text = "\n".join(",".join(row) for row in rows) + "\n"
    sys.stdout.write(text)
    failed = [r.name for r in results if not r.report.passed]
    elapsed = time.perf_counter() - start
    print(f"{len(results) - len(failed)}/{len(results)} passed in {elapsed:.1f}s")
    if out is not None:
        (out / "gradcheck.csv").write_text(text, encoding="utf-8")
        _write_manifest(out, args, [("failed", ",".join(failed) or "-")])
    return EXIT_VALIDATION if failed else EXIT_OK


def cmd_count_params(args) -> int:
    _positive(args.channels, "--channels")
    cfg = _config(args, 256, args.channels)
    count = model_mod.count_config_params(cfg)
    no_mdic = model_mod.count_config_params(replace(cfg, disable_mdic=True))
    ref, ref_no = model_mod.PAPER_TOTAL_PARAMS, model_mod.PAPER_NO_MDIC_PARAMS
    lines = ["module,params"]
    lines += [f"{name},{n}" for name, n in count.breakdown.items()]
    lines.append(f"total,{count.total}")
    lines.append(f"reference_total,{ref}")
    lines.append(f"delta,{count.delta(ref)}")
    lines.append(f"delta_percent,{100 * count.delta(ref) / ref:.2f}")
    lines.append(f"no_mdic_total,{no_mdic.total}")
    lines.append(f"reference_no_mdic_total,{ref_no}")
    lines.append(f"no_mdic_delta,{no_mdic.total - ref_no}")
    lines.append(f"running_statistics,{count.non_trainable}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = _prepare_out(args.out)
        (out / "params.csv").write_text(text, encoding="utf-8")
        _write_manifest(out, args, [("config_digest", cfg.digest())])
    return EXIT_OK


def _parse_thresholds(text: str) -> list[float | None]:
    values: list[float | None] = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if tok in SWEEP_OFF:
            values.append(None)
            continue
        try:
            t = float(tok)
        except ValueError:
            raise UsageError(f"bad threshold {tok!r}") from None
        if t < 0:
            raise UsageError(f"thresholds must be >= 0, got {t}")
        values.append(t)
    return values


def _harness_outputs(out: Path, entries, name: str) -> None:
    from dtnet import plotting
    from dtnet.train import read_curves

    curves = {e.label: read_curves(out / f"curves_{e.label}.csv") for e in entries}
    plotting.plot_training_curves(curves, out / f"{name}.png")
    plotting.plot_ablation_bars(
        [e.label for e in entries], [e.final.test_dice for e in entries], [e.params for e in entries],
        out / f"{name}_dice.png",
    )
    for e in entries:
        print(f"{e.label:16s} params {e.params:>10,d}  test dice {e.final.test_dice:.4f}  "
              f"test loss {e.final.test_loss:.4f}")


def cmd_threshold_sweep(args) -> int:
    from dtnet.train import threshold_sweep

    thresholds = _parse_thresholds(args.thresholds)
    variants = [_variant(v) for v in _split_choices(args.variants, ("hard", "eps", "epsilon"), "--variants")]
    _check_train_flags(args)
    train_set, test_set, cfg = _load_split(args)
    out = _prepare_out(args.out)
    entries = threshold_sweep(
        cfg, thresholds, train_set, test_set, args.epochs, args.batch, args.seed, args.lr, variants, out,
    )
    _harness_outputs(out, entries, "sweep")
    _write_manifest(out, args, [("config_digest", cfg.digest())])
    return EXIT_OK


def _split_choices(text: str, allowed, flag: str) -> list[str]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in items if t not in allowed]
    if bad or not items:
        raise UsageError(f"{flag}: unknown entries {bad}; allowed {', '.join(allowed)}")
    return items


def cmd_ablate(args) -> int:
    from dtnet.train import ABLATIONS, ablation_suite

    names = _split_choices(args.variants, tuple(ABLATIONS), "--variants")
    _check_train_flags(args)
    train_set, test_set, cfg = _load_split(args)
    out = _prepare_out(args.out)
    entries = ablation_suite(cfg, train_set, test_set, args.epochs, args.batch, args.seed, args.lr, names, out)
    _harness_outputs(out, entries, "ablation")
    _write_manifest(out, args, [("config_digest", cfg.digest())])
    return EXIT_OK


def cmd_dump_features(args) -> int:
    from dtnet import plotting

    module = int(args.module[3:])
    channels = _int_list(args.channels, "--channels") if args.channels else None
    try:
        model = model_mod.load(args.model)
    except (OSError, ValueError) as exc:
        raise IOFailure(f"cannot load model {args.model}: {exc}") from None
    path = Path(args.image)
    try:
        if path.suffix == ".dtt":
            image = dataio.dtt_read(path)
        else:
            image = _load(path)[0][args.index]
    except (OSError, ValueError, IndexError) as exc:
        raise IOFailure(f"cannot read image {path}: {exc}") from None
    cfg = model.config
    if image.shape != (cfg.input_channels, cfg.input_size, cfg.input_size):
        raise ValidationFailure(f"image shape {image.shape} does not match the model input")
    capture: dict = {}
    model.forward(image[None].astype(model.dtype), "infer", capture=capture)
    local = capture[f"enc{module}"]["local"]
    maps = [ops.maxpool2(t).data[0] for t in local]  # per part: (F/4, h, w) at module output extent
    n_ch = maps[0].shape[0]
    channels = list(range(n_ch)) if channels is None else list(channels)
    if any(not 0 <= c < n_ch for c in channels):
        raise UsageError(f"--channels must lie in [0, {n_ch})")
    out = _prepare_out(args.out)
    kinds = ops.PART_FLIPS if not cfg.disable_mdic else (ops.FlipKind.IDENTITY,) * 4
    part = args.part - 1
    stem = f"{args.module}_part{args.part}_{kinds[part].name.lower()}"
    for c in channels:
        dataio.export_pgm(maps[part][c], out / f"{stem}_ch{c:02d}.pgm")
    dataio.dtt_write(local[part].data[0], out / f"{stem}_full.dtt")
    shown = channels[:8]
    grid = np.stack([m[shown] for m in maps])
    labels = [f"part{i + 1} {k.name.lower()}" for i, k in enumerate(kinds)]
    plotting.plot_feature_grid(grid, out / f"{args.module}_parts.png", labels)
    h = maps[part].shape[-1]
    _write_manifest(out, args, [("resolution", f"{h}x{h}"), ("params_digest", model.store.digest())])
    print(f"wrote {len(channels)} maps at {h}x{h} to {out}")
    return EXIT_OK


def _compare_dirs(original: Path, replayed: Path, skip=(RUN_MANIFEST,)) -> list[str]:
    problems = []
    for f in sorted(original.rglob("*")):
        rel = f.relative_to(original)
        if not f.is_file() or rel.name in skip or f.suffix == ".png" or rel.parts[0] == "checkpoints":
            continue
        other = replayed / rel
        if not other.exists():
            problems.append(f"missing {rel}")
        elif other.read_bytes() != f.read_bytes():
            problems.append(f"differs {rel}")
    return problems


def cmd_replay(args) -> int:
    from dtnet.train import read_curves, read_kv

    try:
        manifest = read_kv(args.manifest)
        argv = shlex.split(manifest["argv"])
    except (OSError, KeyError) as exc:
        raise IOFailure(f"cannot read manifest {args.manifest}: {exc}") from None
    original = Path(args.manifest).parent
    command = argv[0]
    if command == "replay":
        raise UsageError("cannot replay a replay")
    try:
        i = argv.index("--out")
        argv[i + 1] = str(Path(args.out).resolve())
    except ValueError:
        argv += ["--out", str(Path(args.out).resolve())]
    prefix = None
    if args.epochs is not None:
        if command != "train":
            raise UsageError("--epochs only applies to replaying train")
        full = int(manifest["epochs"])
        if not 1 <= args.epochs <= full:
            raise UsageError(f"--epochs must lie in [1, {full}]")
        argv[argv.index("--epochs") + 1] = str(args.epochs)
        prefix = args.epochs
    log.info("replaying: %s", shlex.join(argv))
    code = main(argv)
    if code != EXIT_OK:
        return code
    replayed = Path(args.out)
    new_manifest = read_kv(replayed / RUN_MANIFEST)
    problems = []
    for key in ("train_digest", "test_digest", "digest", "data_digest"):
        if key in manifest and manifest[key] != new_manifest.get(key):
            problems.append(f"{key} differs: dataset is not the one recorded")
    if prefix is not None and prefix < int(manifest["epochs"]):
        ckpt = original / "checkpoints" / f"epoch_{prefix:03d}"
        if not ckpt.exists():
            raise IOFailure(f"no checkpoint at {ckpt} to compare a {prefix}-epoch replay against")
        if model_mod.load(ckpt).store.digest() != new_manifest["params_digest"]:
            problems.append(f"parameters after epoch {prefix} differ from {ckpt}")
        old_rows = [r for r in read_curves(original / "curves.csv") if r["epoch"] <= prefix]
        if old_rows != read_curves(replayed / "curves.csv"):
            problems.append("curve rows differ")
    else:
        if "params_digest" in manifest and manifest["params_digest"] != new_manifest.get("params_digest"):
            problems.append("final parameters differ")
        problems += _compare_dirs(original, replayed)
    for p in problems:
        print(f"replay mismatch: {p}")
    if problems:
        return EXIT_VALIDATION
    print("replay: outputs identical")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dtnet", description="Directional-convolution segmentation network toolkit.")
    parser.add_argument("--version", action="version", version=f"dtnet {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate the seeded synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model and write curves, metrics and checkpoints")
    _add_train_flags(p, epochs_default=300)
    _add_model_flags(p)
    p.add_argument("--checkpoint-every", type=int, default=0, help="archive every N epochs (0: final only)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a saved model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", choices=("macro", "micro"), default="macro")
    p.add_argument("--regions", help='label groups for Dice+/Sens+/Spec+, e.g. "WT=1,2,3;ET=3"')
    p.add_argument("--predictions", type=int, default=4, help="number of predicted label maps to export")
    p.set_defaults(func=cmd_eval)

    from dtnet.gradsuite import SCOPES

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--scope", choices=SCOPES, default="all")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("count-params", help="parameter totals and per-module breakdown")
    _add_model_flags(p)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("threshold-sweep", help="one seeded run per threshold value")
    _add_train_flags(p, epochs_default=300)
    _add_model_flags(p)
    p.add_argument("--thresholds", default="off,0.1,0.3,0.5", help="comma list; 0 or off disables the layer")
    p.add_argument("--variants", default="eps", help="comma list of hard,eps")
    p.set_defaults(func=cmd_threshold_sweep)

    from dtnet.train import ABLATIONS

    p = sub.add_parser("ablate", help="train the strategy ablation variants")
    _add_train_flags(p, epochs_default=300)
    _add_model_flags(p)
    p.add_argument("--variants", default=",".join(ABLATIONS))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-features", help="export the local maps of one encoder part")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="a .dtt image [C,S,S] or a dataset manifest")
    p.add_argument("--index", type=int, default=0, help="image index when --image is a dataset")
    p.add_argument("--module", choices=[f"enc{i}" for i in range(1, 6)], default="enc1")
    p.add_argument("--part", type=int, choices=(1, 2, 3, 4), default=1)
    p.add_argument("--channels", help="comma list of channel indices (default all)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_features)

    p = sub.add_parser("replay", help="rerun a command from its manifest and compare outputs")
    p.add_argument("--manifest", required=True, help="run.txt of an earlier command")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, help="for train: replay only this many epochs")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    args.resolved_argv = _resolved_argv(sub, args.command, args)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IOFailure, OSError, dataio.DttError, model_mod.ArchiveError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationFailure, ValueError, AssertionError, FloatingPointError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
