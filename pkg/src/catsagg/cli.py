"""``catsagg`` command line: synth, train, eval, gradcheck, viz.

Every command writes into a staging directory next to ``--out`` and moves the
files into place only on success, so a failed run leaves nothing behind.
Exit status is 0 on success and 1 with a one-line reason otherwise.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from catsagg.config import RunConfig
from catsagg.errors import CatsError, UsageError

log = logging.getLogger("catsagg")

MANIFEST = "manifest.txt"


@contextlib.contextmanager
def staged_output(out: str | Path):
    """Yield a scratch directory whose files land in ``out`` only on success."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    for item in sorted(stage.iterdir()):
        os.replace(item, out / item.name)
    stage.rmdir()


def thread_limit():
    """Cap BLAS threads at ``CATS_THREADS`` (default 1, the deterministic mode)."""
    from threadpoolctl import threadpool_limits

    raw = os.environ.get("CATS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CATS_THREADS must be an integer, got {raw!r}") from None
    return threadpool_limits(limits=max(n, 1))


# ---------------------------------------------------------------- pair files


def pair_paths(stem: str | Path) -> dict[str, Path]:
    stem = str(stem)
    return {
        "src": Path(stem + "_src.catf"),
        "tgt": Path(stem + "_tgt.catf"),
        "kps": Path(stem + "_kps.csv"),
        "flow": Path(stem + "_flow.txt"),
    }


def write_pair(stem: Path, pair) -> None:
    from catsagg.fileio import save_features, save_keypoints
    from catsagg.flow import save_flow_text

    paths = pair_paths(stem)
    save_features(paths["src"], pair.d_s)
    save_features(paths["tgt"], pair.d_t)
    save_keypoints(paths["kps"], pair.kps)
    save_flow_text(paths["flow"], pair.gt_flow)


def read_pair(stem: str | Path):
    from catsagg.fileio import load_features, load_keypoints
    from catsagg.flow import load_flow_text
    from catsagg.synthetic import SyntheticPair

    paths = pair_paths(stem)
    for kind, path in paths.items():
        if not path.exists():
            raise UsageError(f"missing {kind} file {path}")
    d_s, d_t = load_features(paths["src"]), load_features(paths["tgt"])
    return SyntheticPair(
        d_s=d_s,
        d_t=d_t,
        gt_flow=load_flow_text(paths["flow"], d_s.grid),
        kps=load_keypoints(paths["kps"]),
        warp=None,
        noise_sigma=float("nan"),
        seed=Path(stem).name,
    )


def read_dataset(data_dir: str | Path) -> list:
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST
    if not manifest.exists():
        raise UsageError(f"no {MANIFEST} in {data_dir}")
    stems = [line.split(",")[0] for line in manifest.read_text().splitlines() if line.strip()]
    return [read_pair(data_dir / s) for s in stems]


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    from catsagg.synthetic import generate_pair

    cfg = RunConfig.from_file(args.config)
    synth = cfg.synth_config()
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    with staged_output(args.out) as stage:
        lines = []
        for i in range(args.count):
            seed = synth.seed + i
            stem = f"pair_{i:04d}"
            write_pair(stage / stem, generate_pair(synth, seed=seed))
            lines.append(f"{stem},{seed}")
        (stage / MANIFEST).write_text("".join(line + "\n" for line in lines))
        (stage / "config.ini").write_text(cfg.to_ini())
    print(f"wrote {args.count} pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    from catsagg.plotting import plot_training_curves
    from catsagg.synthetic import generate_pairs
    from catsagg.trainer import Checkpoint, train, write_metric_log

    cfg = RunConfig.from_file(args.config)
    synth, model_cfg, train_cfg = cfg.synth_config(), cfg.model_config(), cfg.train_config()
    if synth.channels != model_cfg.channels:
        raise UsageError("model and data channel lists differ")
    pairs = generate_pairs(synth, cfg.values["data"]["train_pairs"])
    ev = cfg.values["eval"]
    eval_pairs = generate_pairs(synth, ev["pairs"], first_seed=ev["seed"]) if ev["pairs"] > 0 else None
    resume = Checkpoint.load(args.resume) if args.resume else None
    with staged_output(args.out) as stage:
        (stage / "config.ini").write_text(cfg.to_ini())

        def report(row):
            if "pck10" in row:
                log.info("step %d loss %.4f eval aepe %.4f pck@0.1 %.3f", row["step"], row["loss"], row["aepe"], row["pck10"])

        ck, rows = train(pairs, train_cfg, model_cfg, eval_pairs=eval_pairs, resume=resume, on_log=report)
        ck.save(stage / "checkpoint.cats")
        write_metric_log(stage / "metrics.csv", rows)
        if rows:
            plot_training_curves(rows, stage / "training.png")
    print(f"trained to step {ck.step}; checkpoint at {Path(args.out) / 'checkpoint.cats'}")
    return 0


def cmd_eval(args) -> int:
    from catsagg.plotting import plot_pck_bars
    from catsagg.trainer import Checkpoint, evaluate, wta_metrics

    ck = Checkpoint.load(args.checkpoint)
    pairs = read_dataset(args.data)
    if not pairs:
        raise UsageError(f"{args.data} holds no pairs")
    metrics = evaluate(ck, pairs)
    baseline = wta_metrics(pairs, (ck.model_config.h, ck.model_config.w), ck.train_config.tau)
    report = [f"pairs={len(pairs)}", f"step={ck.step}"]
    report += [f"{k}={v!r}" for k, v in metrics.items()]
    report += [f"wta_{k}={v!r}" for k, v in baseline.items()]
    text = "\n".join(report) + "\n"
    if args.out:
        with staged_output(args.out) as stage:
            (stage / "report.txt").write_text(text)
            plot_pck_bars({"model": metrics, "WTA": baseline}, stage / "pck.png")
    sys.stdout.write(text)
    return 0


TOY_CONFIG = """
[data]
h = 4
w = 4
channels = 3,3
lattice_spacing = 2,3
[model]
embed_dim = 4
heads = 2
depth = 1
mlp_ratio = 1
"""


def cmd_gradcheck(args) -> int:
    from catsagg.gradsuite import full_model_gradcheck

    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.from_string(TOY_CONFIG, "<toy>")
    worst, per_tensor = full_model_gradcheck(cfg.model_config(), cfg.synth_config(), tau=cfg.values["train"]["tau"])
    for name, err in per_tensor.items():
        print(f"{name}={err:.3e}")
    print(f"max_rel_err={worst:.3e} tol={args.tol:.0e}")
    if worst > args.tol:
        print("gradcheck FAILED", file=sys.stderr)
        return 1
    return 0


def cmd_viz(args) -> int:
    from catsagg.aggregator import cats_forward, collapse_levels
    from catsagg.flow import save_flow_text
    from catsagg.plotting import plot_flow
    from catsagg.trainer import Checkpoint, collate, prepare_pair
    from catsagg.viz import write_pgm
    from catsagg.flow import soft_argmax

    ck = Checkpoint.load(args.checkpoint)
    cfg = ck.model_config
    pair = read_pair(args.pair)
    item = prepare_pair(pair, (cfg.h, cfg.w))
    hw = cfg.hw
    if args.what in ("raw_corr", "refined_corr") and not 0 <= args.row < hw:
        raise UsageError(f"row {args.row} out of range for {hw} positions")
    batch = collate([item])
    trace: dict[str, np.ndarray] = {}
    refined = cats_forward(batch.corr, batch.d_s, batch.d_t, ck.params, cfg, trace=trace)
    final = collapse_levels(refined).data[0]
    with staged_output(args.out) as stage:
        if args.what == "raw_corr":
            # rows_source view so row indices mean the same as in refined_corr
            raw = np.swapaxes(item.corr, -1, -2)
            for l in range(raw.shape[0]):
                write_pgm(stage / f"raw_corr_l{l}_row{args.row}.pgm", raw[l, args.row].reshape(cfg.h, cfg.w))
        elif args.what == "refined_corr":
            write_pgm(stage / f"refined_corr_row{args.row}.pgm", final[args.row].reshape(cfg.h, cfg.w))
        elif args.what == "attention":
            for key, attn in sorted(trace.items()):
                a = attn[0]
                for idx in np.ndindex(a.shape[:-2]):
                    suffix = "_".join(str(i) for i in idx)
                    write_pgm(stage / f"attn_{key}_{suffix}.pgm", a[idx])
        else:
            flow = soft_argmax(final, (cfg.h, cfg.w), ck.train_config.tau)
            save_flow_text(stage / "flow.txt", flow)
            plot_flow(flow.numpy(), stage / "flow.png", item.gt_flow, item.gt_valid)
    print(f"wrote {args.what} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="catsagg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic feature/keypoint pairs")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on generated pairs")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a synth directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for report.txt and pck.png")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--config", help="defaults to a built-in toy configuration")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("viz", help="dump correlation rows, attention maps or flow")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pair", required=True, help="pair stem, e.g. data/pair_0003")
    p.add_argument("--what", choices=["raw_corr", "refined_corr", "attention", "flow"], required=True)
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except (CatsError, OSError) as exc:
        print(f"catsagg {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
