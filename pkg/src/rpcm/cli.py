"""Command line: synth | train | infer | eval | ablate | verify.

Exit codes: 0 success, 1 validation or verification failure, 2 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import verify
from .checkpoint import encode_records, load_params, save_params
from .config import RunConfig, load_config, resolve_threads
from .data import Sequence, load_dataset, load_sequence, read_pgm, save_dataset, write_pgm
from .errors import ConfigError, FormatError, RPCMError
from .experiment import build_suite, infer_split, parallel_map, score_split
from .metrics import MetricsReport, evaluate
from .model import check_params
from .modulation import SCHEMES, parse_scheme
from .train import train, write_loss_csv

EXIT_OK, EXIT_FAIL, EXIT_IO = 0, 1, 2


def scheme_dirname(scheme: str) -> str:
    return scheme.replace("&", "_and_")


def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    pairs = []
    i = 0
    while i < len(extra):
        key = extra[i]
        if not key.startswith("--") or i + 1 >= len(extra):
            raise ConfigError(f"overrides must be '--key value' pairs, got {' '.join(extra[i:])!r}")
        pairs.append((key[2:], extra[i + 1]))
        i += 2
    return pairs


def _load_split(root: Path, split: str) -> list[Sequence]:
    path = root / split
    return load_dataset(path if path.is_dir() else root)


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig, out: Path, threads: int, log=print) -> int:
    d = cfg.data
    train_seqs, eval_seqs = build_suite(d.num_train, d.num_eval, d.frames, d.seed_offset, threads)
    if out.exists() and not out.is_dir():
        raise NotADirectoryError(f"{out} exists and is not a directory")
    save_dataset(train_seqs, out / "train")
    save_dataset(eval_seqs, out / "eval")
    (out / "config.json").write_text(cfg.to_json())
    log(f"wrote {len(train_seqs) + len(eval_seqs)} sequences to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, data: Path, out: Path, threads: int, log=print) -> int:
    seqs = _load_split(data, "train")
    result = train(seqs, cfg.train_config(threads=threads), log_every=max(1, cfg.train.steps // 20), log=log)
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / "model.ckpt", result.params)
    write_loss_csv(out / "loss.csv", result.losses)
    (out / "config.json").write_text(cfg.to_json())
    log(f"final/initial loss ratio {result.loss_ratio():.3f}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_infer(cfg: RunConfig, checkpoint: Path, data: Path, split: str, out: Path, threads: int,
              reliability: bool = False, embeddings: bool = False, pool_json: bool = False, log=print) -> int:
    params = load_params(checkpoint)
    check_params(params, cfg.scheme)
    seqs = _load_split(data, split)
    results = infer_split(seqs, cfg.scheme, params, cfg.inference_settings(), threads,
                          record_embeddings=embeddings, keep_states=pool_json)
    for seq, (outs, states) in zip(seqs, results):
        d = out / seq.name
        (d / "masks").mkdir(parents=True, exist_ok=True)
        for i, o in enumerate(outs):
            write_pgm(d / "masks" / f"{i:05d}.pgm", o.mask)
        if reliability:
            (d / "reliability").mkdir(exist_ok=True)
            for i, o in enumerate(outs):
                write_pgm(d / "reliability" / f"{i:05d}.pgm", (o.reliability > 0).astype(np.uint8) * 255)
        if embeddings:
            (d / "embeddings").mkdir(exist_ok=True)
            for i, o in enumerate(outs[1:], start=1):
                arrays = {}
                for obj, (e_t, e_mod) in sorted(o.embeddings.items()):
                    arrays[f"obj{obj}.e_t"] = e_t
                    arrays[f"obj{obj}.modulated"] = e_mod
                (d / "embeddings" / f"{i:05d}.bin").write_bytes(encode_records(arrays))
        if pool_json:
            frames = [
                {"frame": i, "objects": {str(o.object_id): o.pool.summary() for o in st.objects}}
                for i, st in enumerate(states)
            ]
            (d / "pool.json").write_text(json.dumps({"frames": frames}, indent=1, sort_keys=True) + "\n")
        meta = {"num_objects": seq.num_objects, "frames": len(outs), "scheme": cfg.scheme}
        (d / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    log(f"wrote predictions for {len(seqs)} sequences to {out}")
    return EXIT_OK


def evaluate_dirs(pred: Path, gt: Path, threads: int = 1) -> MetricsReport:
    gt_root = gt if any(gt.glob("seq_*")) else gt / "eval"
    gt_dirs = sorted(p for p in gt_root.iterdir() if p.is_dir() and p.name.startswith("seq_"))
    if not gt_dirs:
        raise FormatError(f"{gt}: no ground-truth sequences")

    def one(gdir: Path) -> MetricsReport:
        seq = load_sequence(gdir)
        pdir = pred / gdir.name / "masks"
        if not pdir.is_dir():
            raise FormatError(f"{pdir}: missing predictions")
        masks = [read_pgm(pdir / f"{i:05d}.pgm") for i in range(len(seq.masks))]
        return evaluate(masks, seq.masks, seq.num_objects, gdir.name)

    report = MetricsReport()
    for r in parallel_map(one, gt_dirs, threads):
        report.extend(r)
    return report


def cmd_eval(pred: Path, gt: Path, out: Path, threads: int, log=print) -> int:
    report = evaluate_dirs(pred, gt, threads)
    report.write(out)
    s = report.summary()
    log(f"J {s['J']:.4f}  F {s['F']:.4f}  J&F {s['JF']:.4f}  decay slope {s['decay_slope']:+.4f}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, data: Path, out: Path, threads: int, schemes=SCHEMES, log=print) -> int:
    train_seqs = _load_split(data, "train")
    eval_seqs = _load_split(data, "eval")
    settings = cfg.inference_settings()
    rows = []
    for scheme in schemes:
        scores = []
        for seed in cfg.ablate.seeds:
            ck = out / scheme_dirname(scheme) / f"seed_{seed}" / "model.ckpt"
            if ck.is_file():
                params = load_params(ck)
                check_params(params, scheme)
            else:
                tc = cfg.train_config(scheme=scheme, seed=seed, steps=cfg.ablate.steps, threads=threads)
                result = train(train_seqs, tc)
                ck.parent.mkdir(parents=True, exist_ok=True)
                save_params(ck, result.params)
                write_loss_csv(ck.parent / "loss.csv", result.losses)
                params = result.params
            report = score_split(eval_seqs, scheme, params, settings, threads).report
            scores.append((report.jf, report.mean_j, report.mean_f, report.decay_slope()))
            log(f"{scheme} seed {seed}: J&F {report.jf:.4f}")
        rows.append((scheme, *np.mean(np.array(scores), axis=0)))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "JF", "J", "F", "decay_slope"])
        for scheme, jf, j, f, slope in rows:
            w.writerow([scheme, f"{jf:.6f}", f"{j:.6f}", f"{f:.6f}", f"{slope:.6f}"])
    log(f"wrote {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_verify(log=print, quick: bool = False) -> int:
    ok = verify.run_all(log, grad_seeds=range(1) if quick else range(3))
    log("verify: all checks passed" if ok else "verify: FAILED")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rpcm", description="Video object segmentation toy workbench.")
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--threads", type=int, help="worker threads (falls back to $RPCM_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic benchmark suite")
    s.add_argument("--out", type=Path)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", type=Path)
    s.add_argument("--out", type=Path)

    s = sub.add_parser("infer", help="segment a split with a trained checkpoint")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--data", type=Path)
    s.add_argument("--split", default="eval")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--reliability", action="store_true", help="also write reliability maps")
    s.add_argument("--embeddings", action="store_true", help="also dump per-frame embeddings")
    s.add_argument("--pool-json", action="store_true", help="also write per-frame pool summaries")

    s = sub.add_parser("eval", help="score predicted masks against ground truth")
    s.add_argument("--pred", type=Path, required=True)
    s.add_argument("--gt", type=Path, required=True)
    s.add_argument("--out", type=Path)

    s = sub.add_parser("ablate", help="train and score every assembly scheme")
    s.add_argument("--data", type=Path)
    s.add_argument("--out", type=Path)
    s.add_argument("--schemes", help="comma-separated subset (default: all, in table order)")

    s = sub.add_parser("verify", help="run gradient, pool and metric self-checks")
    s.add_argument("--quick", action="store_true", help="one gradient seed instead of three")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = load_config(args.config, _split_overrides(extra))
        threads = resolve_threads(args.threads, cfg)
        data_dir = Path(cfg.paths.data_dir)
        out_dir = Path(cfg.paths.out_dir)
        with threadpool_limits(1):
            if args.command == "synth":
                return cmd_synth(cfg, args.out or data_dir, threads)
            if args.command == "train":
                return cmd_train(cfg, args.data or data_dir, args.out or out_dir, threads)
            if args.command == "infer":
                return cmd_infer(cfg, args.checkpoint, args.data or data_dir, args.split, args.out, threads,
                                 args.reliability, args.embeddings, args.pool_json)
            if args.command == "eval":
                return cmd_eval(args.pred, args.gt, args.out or args.pred, threads)
            if args.command == "ablate":
                schemes = SCHEMES
                if args.schemes:
                    schemes = tuple(parse_scheme(s) for s in args.schemes.split(","))
                return cmd_ablate(cfg, args.data or data_dir, args.out or out_dir, threads, schemes)
            if args.command == "verify":
                return cmd_verify(quick=args.quick)
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (RPCMError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
