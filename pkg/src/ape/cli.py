"""Command-line surface.

Exit codes: 0 success, 1 config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import evals
from .checkpoint import load_checkpoint
from .config import apply_overrides, config_from_dict, dumps_config, load_config
from .errors import ConfigError, DataError, NumericError
from .heads import count_params
from .store.shards import inspect_shard, read_header, read_shard, write_shard
from .store.synthetic import SyntheticSpec, gen_synthetic
from .trainer import TrainConfig, head_config_for, resume, train


def _add_train_overrides(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int)
    p.add_argument("--total-steps", type=int, dest="total_steps")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--accum", type=int)
    p.add_argument("--peak-lr", type=float, dest="peak_lr")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--ckpt-every", type=int, dest="ckpt_every")
    p.add_argument("--strict", action="store_true", default=None)


_OVERRIDE_KEYS = (
    "seed", "total_steps", "batch_size", "accum", "peak_lr", "weight_decay",
    "warmup_steps", "eval_every", "ckpt_every", "strict",
)


def _resolved_config(args) -> tuple[TrainConfig, dict]:
    if args.config:
        config, sweep = load_config(args.config)
    else:
        config, sweep = config_from_dict({}), {}
    overrides = {k: getattr(args, k, None) for k in _OVERRIDE_KEYS}
    return apply_overrides(config, overrides), sweep


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(
        latent_dim=args.latent,
        d_img=args.d_img,
        d_tok=args.d_tok,
        max_seq=args.seq,
        n_train=args.n,
        n_test=args.n_test,
        noise=args.sigma,
        nonlinear=args.nonlinear,
        seed=args.seed,
    )
    train_data, test_data = gen_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    paths = {}
    for name, data in (("train", train_data), ("test", test_data)):
        path = os.path.join(args.out, f"{name}.apes")
        write_shard(path, data.records(), data.dims)
        paths[name] = inspect_shard(path)
    manifest = {"spec": asdict(spec), "vocab_size": spec.vocab_size, "shards": paths}
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {paths['train']['records']} train / {paths['test']['records']} test samples to {args.out}")
    return 0


def cmd_inspect_shard(args) -> int:
    for path in args.paths:
        info = inspect_shard(path)
        for key, value in info.items():
            print(f"{key}: {value}")
        print("OK")
    return 0


def cmd_train(args) -> int:
    config, _ = _resolved_config(args)
    summary = train(config, args.out)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_resume(args) -> int:
    if args.config:
        config, _ = load_config(args.config)
    else:
        echo = os.path.join(args.run, "config.toml")
        if not os.path.exists(echo):
            raise ConfigError(f"no --config given and no config echo at {echo}")
        config, _ = load_config(echo)
    overrides = {k: getattr(args, k, None) for k in _OVERRIDE_KEYS}
    config = apply_overrides(config, overrides)
    summary = resume(config, args.run, checkpoint_path=args.ckpt)
    print(json.dumps(summary, indent=2))
    return 0


def _append_eval_metrics(path, step, payload_key, payload):
    record = {
        "step": step,
        "wall_time_s": 0.0,
        "train_loss": None,
        "temperature": None,
        "lr": None,
        "zero_shot": {},
        "recall_at": {},
    }
    record[payload_key] = payload
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def cmd_eval_zeroshot(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    head = ckpt.build_head()
    eval_set = read_shard(args.set)
    templates = read_shard(args.templates)
    label_map = evals.read_label_map(args.labels) if args.labels else None
    classifier = evals.build_classifier(head, templates)
    acc = evals.zero_shot_accuracy(classifier, eval_set, head, label_map)
    name = args.name or os.path.splitext(os.path.basename(args.set))[0]
    print(f"zero-shot accuracy [{name}]: {acc:.4f}")
    if args.metrics:
        _append_eval_metrics(args.metrics, ckpt.step, "zero_shot", {name: acc})
    return 0


def cmd_eval_recall(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    head = ckpt.build_head()
    data = read_shard(args.set)
    txt = evals.embed_text_set(head, data)
    img = evals.embed_image_set(head, data.images[:, 0])
    ks = [int(k) for k in args.k.split(",")]
    result = {str(k): evals.recall_at_k(img, txt, k, direction=args.direction) for k in ks}
    for k, value in result.items():
        print(f"recall@{k}: {value:.4f}")
    if args.metrics:
        _append_eval_metrics(args.metrics, ckpt.step, "recall_at", result)
    return 0


def cmd_count_params(args) -> int:
    config, _ = _resolved_config(args)
    if args.d_tok and args.d_img:
        dims_dtok, dims_dimg = args.d_tok, args.d_img
    elif config.train_shards:
        dims, _ = read_header(config.train_shards[0])
        dims_dtok, dims_dimg = dims.d_tok, dims.d_img
    elif config.mixture:
        dims, _ = read_header(config.mixture[0]["shards"][0])
        dims_dtok, dims_dimg = dims.d_tok, dims.d_img
    else:
        raise ConfigError("need --d-tok/--d-img or a config with data to size the head")

    class _Dims:
        d_tok = dims_dtok
        d_img = dims_dimg

    vocab = config.vocab_size or args.vocab or 0
    if config.head == "lookup" and vocab == 0:
        raise ConfigError("lookup head needs vocab_size (config) or --vocab")
    head_cfg = head_config_for(config, _Dims, vocab)
    counts = count_params(head_cfg, text_tower_params=config.text_tower_params)
    for key, value in counts.items():
        print(f"{key}: {value}")
    return 0


def cmd_export_csv(args) -> int:
    records = []
    with open(args.metrics, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise DataError(f"no metrics records in {args.metrics}")
    fixed = ["step", "wall_time_s", "train_loss"]
    extra: list[str] = []
    for rec in records:
        for key, value in rec.items():
            if key in fixed:
                continue
            if isinstance(value, dict):
                for sub in value:
                    col = f"{key}.{sub}"
                    if col not in extra:
                        extra.append(col)
            elif key not in extra:
                extra.append(key)
    columns = fixed + extra
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for rec in records:
            row = []
            for col in columns:
                if "." in col and col not in rec:
                    key, sub = col.split(".", 1)
                    row.append(rec.get(key, {}).get(sub, ""))
                else:
                    row.append(rec.get(col, ""))
            writer.writerow(row)
    print(f"wrote {len(records)} rows to {args.out}")
    return 0


def _sweep_trial(payload):
    trial_dir, config_dict = payload
    config = config_from_dict(config_dict)
    summary = train(config, trial_dir)
    return trial_dir, summary


def cmd_sweep(args) -> int:
    from .optim import SWEEP_PEAK_LR, SWEEP_WARMUP_FRAC, SWEEP_WEIGHT_DECAY

    config, sweep = _resolved_config(args)
    lrs = sweep.get("peak_lr", list(SWEEP_PEAK_LR))
    wds = sweep.get("weight_decay", list(SWEEP_WEIGHT_DECAY))
    warmups = sweep.get("warmup_frac", list(SWEEP_WARMUP_FRAC))
    trials = []
    for lr in lrs:
        for wd in wds:
            for wf in warmups:
                cfg = asdict(config)
                cfg["peak_lr"] = float(lr)
                cfg["weight_decay"] = float(wd)
                cfg["warmup_steps"] = max(1, int(round(float(wf) * config.total_steps)))
                name = f"lr{lr}_wd{wd}_wf{wf}"
                trials.append((os.path.join(args.out, name), cfg))
    os.makedirs(args.out, exist_ok=True)
    results = []
    if args.jobs > 1:
        import concurrent.futures

        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_trial, trials))
    else:
        results = [_sweep_trial(t) for t in trials]
    ranked = sorted(results, key=lambda r: -(r[1]["best_recall1"] or 0.0))
    summary = {
        "trials": [{"dir": d, **s} for d, s in results],
        "winner": {"dir": ranked[0][0], **ranked[0][1]},
    }
    with open(os.path.join(args.out, "sweep_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"winner: {ranked[0][0]} (recall@1 = {ranked[0][1]['best_recall1']})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ape", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic paired-embedding dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--latent", type=int, default=16)
    p.add_argument("--d-img", type=int, default=64, dest="d_img")
    p.add_argument("--d-tok", type=int, default=64, dest="d_tok")
    p.add_argument("--seq", type=int, default=8)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--nonlinear", action="store_true")
    p.add_argument("--n-test", type=int, default=512, dest="n_test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("inspect-shard", help="validate shards and print stats")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_inspect_shard)

    p = sub.add_parser("train", help="run a training job")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("resume", help="continue a run from its checkpoint")
    p.add_argument("--run", required=True)
    p.add_argument("--config")
    p.add_argument("--ckpt")
    _add_train_overrides(p)
    p.set_defaults(func=cmd_resume)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    evsub = ev.add_subparsers(dest="eval_command", required=True)

    p = evsub.add_parser("zeroshot")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--set", required=True)
    p.add_argument("--templates", required=True)
    p.add_argument("--labels")
    p.add_argument("--name")
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_eval_zeroshot)

    p = evsub.add_parser("recall")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--set", required=True)
    p.add_argument("--k", default="1,5,10")
    p.add_argument("--direction", default="image_to_text",
                   choices=["image_to_text", "text_to_image"])
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_eval_recall)

    p = sub.add_parser("count-params", help="parameter counts and tower ratio")
    p.add_argument("--config")
    p.add_argument("--d-tok", type=int, dest="d_tok")
    p.add_argument("--d-img", type=int, dest="d_img")
    p.add_argument("--vocab", type=int)
    _add_train_overrides(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("export-csv", help="flatten metrics.jsonl for plotting")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_csv)

    p = sub.add_parser("sweep", help="hyperparameter grid by validation recall")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    _add_train_overrides(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
