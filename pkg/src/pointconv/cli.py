"""Command-line interface: train/eval workflows and verification commands.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
Every command honors --seed; reporting commands write CSV tables and
rendered figures into --out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from pointconv import __version__


class UsageError(ValueError):
    pass


def _set_threads(n: int) -> None:
    # best effort: caps BLAS pools spawned after this point; runs with the
    # same setting are reproducible either way
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n)
    except ImportError:
        pass


def _parse_dims(text, n_expected, what):
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != n_expected:
        raise UsageError(f"{what} needs {n_expected} comma-separated integers, got {text!r}")
    dims = [int(p) for p in parts]
    if any(d < 1 for d in dims):
        raise UsageError(f"{what} must be positive, got {text!r}")
    return dims


def _apply_overrides(doc: dict, pairs):
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        doc[key.strip()] = value
    return doc


def _load_config(args, default_factory):
    from pointconv import network as N

    if getattr(args, "config", None):
        with open(args.config) as fh:
            doc = json.load(fh)
    else:
        doc = default_factory().to_dict()
    _apply_overrides(doc, getattr(args, "set", None))
    return N.NetworkConfig.from_dict(doc)


def _synthetic_sets(args, task):
    from pointconv import data as D

    if task == "classify":
        return D.classification_dataset(args.n_train, args.n_test, n_points=args.points,
                                        seed=args.data_seed)
    return D.segmentation_dataset(args.n_train, args.n_test, n_points=args.points,
                                  seed=args.data_seed)


def _load_sets(args, task):
    from pointconv import data as D

    if args.data:
        train, _ = D.load_manifest(args.data)
        test, _ = D.load_manifest(args.test_data) if args.test_data else ([], None)
        return train, test, None
    return _synthetic_sets(args, task)


# -- commands -------------------------------------------------------------------


def cmd_train(args):
    from pointconv import network as N
    from pointconv import report as R
    from pointconv import train as TR

    task = args.task
    if task == "classify":
        factory = lambda: N.default_classify_config(seed=args.seed)
    else:
        factory = lambda: N.default_segment_config(seed=args.seed)
    config = _load_config(args, factory)
    train, test, _ = _load_sets(args, task)
    net = N.PointConvNet(config)
    print(f"training {task}: {len(train)} train / {len(test)} test clouds, "
          f"{net.parameter_count()} parameters")

    out = R.ensure_dir(args.out)
    log_path = os.path.join(out, "log.csv")
    ckpt_path = os.path.join(out, "best.ckpt")
    with open(log_path, "w") as log_file:
        history = TR.fit(
            net, train, test, epochs=args.epochs, seed=args.seed, lr=args.lr,
            batch_size=args.batch_size, augment_train=not args.no_augment,
            log_fn=lambda line: print(line, file=log_file),
            checkpoint_path=ckpt_path,
        )
    R.training_curves(history, os.path.join(out, "curves.png"))
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    last = history[-1]
    best = max(h["eval_miou"] if h["eval_miou"] is not None else h["eval_accuracy"] for h in history)
    print(f"final epoch {last['epoch']}: train loss {last['train_loss']:.4f}, "
          f"eval accuracy {last['eval_accuracy']:.4f}"
          + (f", eval mIoU {last['eval_miou']:.4f}" if last["eval_miou"] is not None else ""))
    print(f"best eval metric {best:.4f}; checkpoint {ckpt_path}, log {log_path}")
    return 0


def cmd_eval(args):
    from pointconv import network as N
    from pointconv import train as TR

    net = N.load_params(args.checkpoint)
    if args.data:
        from pointconv import data as D

        clouds, _ = D.load_manifest(args.data)
    else:
        args.n_train = max(args.n_train, 4)  # test split is what gets evaluated
        _, clouds, _ = _synthetic_sets(args, net.config.task)
    metrics = TR.evaluate(net, clouds)
    print(f"clouds: {len(clouds)}")
    print(f"accuracy: {metrics.accuracy:.4f}")
    if metrics.miou is not None:
        print(f"mIoU: {metrics.miou:.4f}")
        print("per-class IoU: " + ", ".join(f"{v:.4f}" for v in metrics.per_class_iou))
    return 0


def cmd_gradcheck(args):
    from pointconv import checks
    from pointconv import tensor as T

    seeds = tuple(int(s) for s in args.seeds.split(","))
    with T.precision("float64"):
        results = checks.gradcheck_suite(seeds=seeds)
    failed = False
    for name, err in results.items():
        ok = err < 1e-4
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:<16} max rel err {err:.3e} (< 1e-4)")
    return 1 if failed else 0


def cmd_equivalence(args):
    from pointconv import checks

    dims = _parse_dims(args.dims, 6, "--dims")
    result = checks.equivalence_suite(args.trials, dims, args.seed)
    print(f"dims B,N,K,Cin,Cmid,Cout = {tuple(dims)}; trials = {result['trials']}")
    print(f"max forward rel err  {result['max_forward_rel_err']:.3e}")
    print(f"max gradient rel err {result['max_grad_rel_err']:.3e}")
    verdict = "PASS" if result["passed"] else "FAIL"
    print(f"{verdict} max_rel_err < {result['tolerance']:.0e}")
    return 0 if result["passed"] else 1


def cmd_bench_memory(args):
    from pointconv import checks
    from pointconv import report as R

    b, n, k, c_in, c_out = _parse_dims(args.dims, 5, "--dims")
    rep = checks.memory_report(b, n, k, c_in, c_out, args.cmid)
    meas = rep["measured"]
    gib = 2.0**30
    print(f"analytic reference filter bytes : {rep['analytic_naive_bytes']:>14,d}"
          f" ({rep['analytic_naive_bytes'] / gib:.4f} GiB)")
    print(f"analytic factored buffer bytes  : {rep['analytic_efficient_bytes']:>14,d}"
          f" ({rep['analytic_efficient_bytes'] / gib:.4f} GiB)")
    print(f"analytic ratio c_mid/(k*c_out)  : {rep['analytic_ratio']:.6f} (1/{1 / rep['analytic_ratio']:.6g})")
    print(f"measured at dims {meas['dims']}:")
    print(f"  reference filter elements : {meas['naive_filter_elements']:,d}")
    print(f"  factored m / fbar / product elements: {meas['efficient_m_elements']:,d}"
          f" / {meas['efficient_fbar_elements']:,d} / {meas['efficient_product_elements']:,d}")
    print(f"  factored peak transient elements    : {meas['efficient_peak_elements']:,d}")
    print(f"  dominant-buffer ratio               : {meas['dominant_ratio']:.6f}")
    if args.out:
        out = R.ensure_dir(args.out)
        R.write_csv(os.path.join(out, "memory.csv"),
                    ["quantity", "value"],
                    [["analytic_naive_bytes", rep["analytic_naive_bytes"]],
                     ["analytic_efficient_bytes", rep["analytic_efficient_bytes"]],
                     ["analytic_ratio", rep["analytic_ratio"]],
                     ["measured_naive_elements", meas["naive_filter_elements"]],
                     ["measured_peak_elements", meas["efficient_peak_elements"]],
                     ["measured_dominant_ratio", meas["dominant_ratio"]]])
        R.memory_figure(rep, os.path.join(out, "memory.png"))
        print(f"wrote {out}/memory.csv and {out}/memory.png")
    return 0


def cmd_grid_equiv(args):
    from pointconv import checks

    if args.side < args.kernel + 2:
        raise UsageError(f"--side must be >= kernel+2 = {args.kernel + 2}")
    result = checks.grid_reduction_check(args.side, args.kernel, args.seed)
    print(f"side {result['side']}, kernel {result['kernel']}, seed {result['seed']}: "
          f"{result['interior_points']} interior points")
    print(f"max rel err vs sliding-window oracle: {result['max_rel_err']:.3e}")
    print(f"interior weight spread: {result['interior_weight_spread']:.3e}")
    print("PASS" if result["passed"] else "FAIL", "max_rel_err < 1e-5")
    return 0 if result["passed"] else 1


def cmd_ablate_density(args):
    from pointconv import network as N
    from pointconv import report as R
    from pointconv import train as TR

    train, test, _ = _synthetic_sets(args, "segment")
    rows = []
    for mode in ("mlp", "disabled", "raw"):
        config = N.default_segment_config(seed=args.seed, density_mode=mode)
        net = N.PointConvNet(config)
        history = TR.fit(net, train, test, epochs=args.epochs, seed=args.seed,
                         batch_size=args.batch_size, lr=args.lr)
        miou = max(h["eval_miou"] for h in history)
        rows.append([mode, miou])
        print(f"density={mode:<9} best test mIoU {miou:.4f}")
    print(f"{'variant':<12} {'mIoU':>8}")
    for mode, miou in rows:
        print(f"{mode:<12} {miou:>8.4f}")
    if args.out:
        out = R.ensure_dir(args.out)
        R.write_csv(os.path.join(out, "ablate_density.csv"), ["density_mode", "miou"], rows)
        R.ablation_figure(rows, os.path.join(out, "ablate_density.png"))
        print(f"wrote {out}/ablate_density.csv and {out}/ablate_density.png")
    return 0


def cmd_sweep_cmid(args):
    from pointconv import network as N
    from pointconv import report as R
    from pointconv import train as TR

    values = [int(v) for v in args.cmid_values.split(",")]
    train, test, _ = _synthetic_sets(args, "classify")
    rows = []
    for c_mid in values:
        accs = []
        for trial in range(args.trials):
            # compact stack sized for the sweep's small clouds
            config = N.NetworkConfig(
                task="classify", input_dim=3, input_channels=3, num_classes=4,
                encoders=[
                    N.EncodingSpec(n_out=64, k=16, c_mid=c_mid, c_out=32, mlp_channels=(16,)),
                    N.EncodingSpec(n_out=16, k=16, c_mid=c_mid, c_out=64),
                ],
                head_widths=(64,), head_dropout=0.4, seed=args.seed + trial,
            ).validate()
            net = N.PointConvNet(config)
            history = TR.fit(net, train, test, epochs=args.epochs, seed=args.seed + trial,
                             batch_size=args.batch_size, lr=args.lr)
            accs.append(max(h["eval_accuracy"] for h in history))
        mean, sd = float(np.mean(accs)), float(np.std(accs))
        rows.append([c_mid, mean, sd])
        print(f"c_mid={c_mid:<4d} accuracy {mean:.4f} +/- {sd:.4f}  ({args.trials} trials)")
    if args.out:
        out = R.ensure_dir(args.out)
        R.write_csv(os.path.join(out, "sweep_cmid.csv"), ["c_mid", "mean_accuracy", "sd"], rows)
        R.sweep_figure(rows, os.path.join(out, "sweep_cmid.png"))
        print(f"wrote {out}/sweep_cmid.csv and {out}/sweep_cmid.png")
    return 0


def cmd_viz_filters(args):
    from pointconv import conv as C
    from pointconv import network as N
    from pointconv import report as R

    net = N.load_params(args.checkpoint)
    layers = [enc.conv for enc in net.encoders] + [p.conv for p in net.propagators]
    if not 0 <= args.layer < len(layers):
        raise UsageError(f"--layer must be in [0, {len(layers)}), got {args.layer}")
    layer = layers[args.layer]
    images = C.sample_weight_function(layer, plane_axis=args.plane_axis,
                                      plane_offset=args.plane_offset,
                                      side=args.side, extent=args.extent)
    out = R.ensure_dir(args.out)
    count = 0
    limit = args.max_filters if args.max_filters > 0 else layer.c_in * layer.c_out
    for ci in range(layer.c_in):
        for co in range(layer.c_out):
            if count >= limit:
                break
            name = f"wfn_{args.layer}_{ci}_{co}.{args.format}"
            path = os.path.join(out, name)
            if args.format == "pgm":
                C.write_pgm(path, images[:, :, ci, co])
            else:
                C.write_filter_csv(path, images[:, :, ci, co])
            count += 1
    R.filter_montage(images, os.path.join(out, f"wfn_{args.layer}_montage.png"))
    print(f"wrote {count} {args.format} images ({args.side}x{args.side}) and montage to {out}")
    return 0


def cmd_gen_data(args):
    from pointconv import data as D
    from pointconv import report as R

    out = R.ensure_dir(args.out)
    if args.kind == "shapes":
        train, test, names = D.classification_dataset(args.n_train, args.n_test,
                                                      n_points=args.points, seed=args.data_seed)
        task = "classify"
    elif args.kind == "parts":
        train, test, names = D.segmentation_dataset(args.n_train, args.n_test,
                                                    n_points=args.points, seed=args.data_seed)
        task = "segment"
    else:
        train, test, names = D.image_dataset(args.n_train, args.n_test, seed=args.data_seed)
        task = "classify"
    for split, clouds in (("train", train), ("test", test)):
        entries = []
        for i, cloud in enumerate(clouds):
            name = f"{split}_{i:05d}.pcb"
            D.save_cloud(cloud, os.path.join(out, name))
            label = cloud.labels if np.isscalar(cloud.labels) else None
            entries.append({"path": name, "label": label, "has_normals": cloud.has_normals})
        D.write_manifest(os.path.join(out, f"{split}_manifest.json"), entries,
                         class_names=names, task=task)
    print(f"wrote {len(train)} train / {len(test)} test clouds and manifests to {out}")
    return 0


def cmd_img2cloud(args):
    from pointconv import data as D

    path = args.input
    if path.endswith(".npy"):
        img = np.load(path)
    else:
        import matplotlib.image as mpimg

        img = mpimg.imread(path)
    cloud = D.image_to_pointcloud(img)
    D.save_cloud(cloud, args.output)
    print(f"wrote {cloud.n} points ({cloud.features.shape[1]} channels) to {args.output}")
    return 0


# -- parser ---------------------------------------------------------------------


def _add_common(p, out_default=None):
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--threads", type=int, default=1, help="thread cap (default 1)")
    p.add_argument("--precision", type=int, choices=(32, 64), default=32)
    if out_default is not None:
        p.add_argument("--out", default=out_default, help="output directory")


def _add_training_data(p, n_train, n_test, points):
    p.add_argument("--n-train", type=int, default=n_train)
    p.add_argument("--n-test", type=int, default=n_test)
    p.add_argument("--points", type=int, default=points)
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pointconv",
        description="Point-cloud convolution with learned weight functions: "
                    "training, evaluation and verification workflows.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on synthetic or manifest data")
    p.add_argument("--task", choices=("classify", "segment"), default="classify")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--config", help="network config JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry (value parsed as JSON)")
    p.add_argument("--data", help="training manifest JSON (default: synthetic)")
    p.add_argument("--test-data", help="test manifest JSON")
    p.add_argument("--no-augment", action="store_true")
    _add_training_data(p, n_train=400, n_test=100, points=512)
    _add_common(p, out_default="runs/train")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="manifest JSON (default: synthetic test split)")
    _add_training_data(p, n_train=0, n_test=100, points=512)
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks for every component")
    p.add_argument("--seeds", default="1,2,3")
    _add_common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("equivalence", help="factored vs reference operator comparison")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--dims", default="2,64,8,4,4,8", metavar="B,N,K,CIN,CMID,COUT")
    _add_common(p)
    p.set_defaults(fn=cmd_equivalence)

    p = sub.add_parser("bench-memory", help="filter-memory accounting, analytic and measured")
    p.add_argument("--dims", default="32,512,32,64,64", metavar="B,N,K,CIN,COUT")
    p.add_argument("--cmid", type=int, default=32)
    _add_common(p, out_default=None)
    p.add_argument("--out", default=None, help="write CSV and figure here")
    p.set_defaults(fn=cmd_bench_memory)

    p = sub.add_parser("grid-equiv", help="regular-grid reduction to discrete convolution")
    p.add_argument("--side", type=int, default=8)
    p.add_argument("--kernel", type=int, default=3)
    _add_common(p)
    p.set_defaults(fn=cmd_grid_equiv)

    p = sub.add_parser("ablate-density", help="train the density-handling variants")
    p.add_argument("--epochs", type=int, default=8)
    _add_training_data(p, n_train=48, n_test=16, points=512)
    _add_common(p, out_default="runs/ablate")
    p.set_defaults(fn=cmd_ablate_density)

    p = sub.add_parser("sweep-cmid", help="accuracy across WeightNet middle widths")
    p.add_argument("--cmid-values", default="4,8,16,32")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--epochs", type=int, default=6)
    _add_training_data(p, n_train=64, n_test=32, points=128)
    _add_common(p, out_default="runs/sweep")
    p.set_defaults(fn=cmd_sweep_cmid)

    p = sub.add_parser("viz-filters", help="sample learned filters over a plane")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--extent", type=float, default=1.0)
    p.add_argument("--plane-axis", type=int, default=2)
    p.add_argument("--plane-offset", type=float, default=0.0)
    p.add_argument("--format", choices=("pgm", "csv"), default="pgm")
    p.add_argument("--max-filters", type=int, default=0, help="0 = all c_in*c_out")
    _add_common(p, out_default="runs/filters")
    p.set_defaults(fn=cmd_viz_filters)

    p = sub.add_parser("gen-data", help="write synthetic datasets as .pcb + manifest")
    p.add_argument("--kind", choices=("shapes", "parts", "images"), default="shapes")
    _add_training_data(p, n_train=400, n_test=100, points=512)
    _add_common(p, out_default="runs/data")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("img2cloud", help="convert an image (.png/.npy) to a .pcb cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_img2cloud)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_threads(args.threads)
    from pointconv import tensor as T

    try:
        if getattr(args, "precision", 32) == 64:
            with T.precision("float64"):
                return args.fn(args)
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # structured domain errors
        from pointconv import data as D
        from pointconv import network as N
        from pointconv import pointops as P
        from pointconv import train as TR

        if isinstance(exc, (D.DataError, N.CheckpointError)):
            print(f"i/o error: {exc}", file=sys.stderr)
            return 3
        if isinstance(exc, (N.ConfigError, P.GeometryError, UsageError)):
            print(f"error: {exc}", file=sys.stderr)
            return 2
        if isinstance(exc, TR.TrainingError):
            print(f"training aborted: {exc}", file=sys.stderr)
            return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
