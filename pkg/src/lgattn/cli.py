"""Command-line entry points: gendata | train | eval | analyze.

Every command takes its settings from a JSON config file (unknown keys are
rejected) plus a few targeted overrides, writes all artifacts under
--out-dir, and echoes the resolved config next to them. Exit codes:
0 ok, 2 config/usage error, 3 runtime failure.
"""

import argparse
import json
import math
import os
import sys
from dataclasses import asdict

import numpy as np

from . import analysis, metrics
from .data import (DataFormatError, SynthConfig, batch_and_pad,
                   generate_synthetic, read_records, write_records)
from .masks import parse_mask_spec, toeplitz_mask
from .model import (EncoderConfig, Model, TrainConfig, TrainingDiverged,
                    load_model, save_checkpoint, train)
from .tensor import Tensor


class ConfigError(ValueError):
    pass


DATA_KEYS = {"num_videos", "num_classes", "d_visual", "d_audio", "t_min",
             "t_max", "motif_len", "motifs_min", "motifs_max", "noise_scale",
             "template_scale", "seed"}
MODEL_KEYS = {"max_frames", "heads", "variant", "mask", "ff_mult",
              "hidden_dim", "depth"}
TRAIN_KEYS = {"lr", "batch_size", "eval_every", "early_stop_patience",
              "lr_factor", "lr_patience", "max_iters", "seed", "val_fraction"}


def load_config(path):
    try:
        with open(path) as f:
            cfg = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {"data": DATA_KEYS, "model": MODEL_KEYS, "train": TRAIN_KEYS}
    for section, body in cfg.items():
        if section not in allowed:
            raise ConfigError(f"unknown config section {section!r}")
        for key in body:
            if key not in allowed[section]:
                raise ConfigError(f"unknown config field {section}.{key}")
    return cfg


def resolved(cfg):
    data = SynthConfig(**cfg.get("data", {}))
    m = dict(cfg.get("model", {}))
    train_d = dict(cfg.get("train", {}))
    val_fraction = train_d.pop("val_fraction", 0.1)
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("train.val_fraction must be in (0, 1)")
    enc = EncoderConfig(max_frames=m.get("max_frames", 32),
                        d_visual=data.d_visual, d_audio=data.d_audio,
                        heads=m.get("heads", 4),
                        variant=m.get("variant", "baseline"),
                        mask_spec=m.get("mask"),
                        ff_mult=m.get("ff_mult", 4),
                        hidden_dim=m.get("hidden_dim"),
                        num_classes=data.num_classes,
                        depth=m.get("depth", 1))
    tc = TrainConfig(**train_d)
    return data, enc, tc, val_fraction


def echo_config(out_dir, payload):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def cmd_gendata(args):
    cfg = load_config(args.config)
    data_cfg, _, _, _ = resolved(cfg)
    if args.seed is not None:
        data_cfg.seed = args.seed
    records = generate_synthetic(data_cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    write_records(records, args.out_dir)
    echo_config(args.out_dir, {"data": asdict(data_cfg)})
    print(f"wrote {len(records)} records to {args.out_dir}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    data_cfg, enc, tc, val_fraction = resolved(cfg)
    if args.seed is not None:
        tc.seed = args.seed
    if args.variant is not None:
        enc.variant = args.variant
    if args.mask is not None:
        enc.mask_spec = args.mask
    if enc.mask_spec is not None:
        parse_mask_spec(enc.mask_spec, enc.max_frames)  # fail fast on grammar

    records = read_records(args.data_dir)
    n_val = max(1, int(round(val_fraction * len(records))))
    val, train_recs = records[:n_val], records[n_val:]
    if not train_recs:
        raise ConfigError("dataset too small for the requested validation split")

    model = Model(enc, seed=tc.seed)
    log, best = train(model, train_recs, val, tc)

    os.makedirs(args.out_dir, exist_ok=True)
    ckpt = os.path.join(args.out_dir, "best.ckpt")
    save_checkpoint(ckpt, enc, best)
    with open(os.path.join(args.out_dir, "train_log.jsonl"), "w") as f:
        for rec in log:
            f.write(json.dumps(rec) + "\n")
    echo_config(args.out_dir, {"data": asdict(data_cfg), "model": asdict(enc),
                               "train": {**asdict(tc), "val_fraction": val_fraction}})
    print(f"best val GAP {max(r['val_gap'] for r in log):.4f}; "
          f"checkpoint at {ckpt}")
    return 0


def _load_model_or_die(path):
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    return load_model(path)


def cmd_eval(args):
    model = _load_model_or_die(args.checkpoint)
    records = read_records(args.data_dir)
    t = model.cfg.max_frames
    preds = [(model.scores(it.visual, it.audio, it.valid_len), it.labels)
             for it in batch_and_pad(records, t, len(records))[0]]
    report = metrics.evaluate(preds)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "report.json"), "w") as f:
        f.write(report.to_json() + "\n")
    echo_config(args.out_dir, {"model": asdict(model.cfg)})
    print(f"GAP {report.gap:.4f}  MAP {report.map:.4f}  "
          f"PERR {report.perr:.4f}  Hit@1 {report.hit1:.4f}")
    return 0


def cmd_analyze(args):
    model = _load_model_or_die(args.checkpoint)
    records = read_records(args.data_dir)[:args.sample]
    if not records:
        raise ConfigError("no records to analyze")
    t = model.cfg.max_frames
    modality = args.modality
    os.makedirs(args.out_dir, exist_ok=True)

    block = model.towers[modality][0]
    if block.cfg.mode == "share_att":
        local_masks = block.cfg.local_masks
    elif block.cfg.mask is not None:
        local_masks = [block.cfg.mask]
    else:
        local_masks = []
    for mk in local_masks:
        analysis.write_mask_pgm(os.path.join(args.out_dir, f"mask_{mk.label()}.pgm"), mk)

    if args.neighborhood_w is not None:
        n_w = args.neighborhood_w
    elif local_masks:
        n_w = local_masks[0].window
    else:
        n_w = math.ceil(t / 10)
    hood = toeplitz_mask(t, n_w)
    hoods = [set(np.flatnonzero(hood.keep[i]).tolist()) for i in range(t)]

    profile_rows, s_rows = [], []
    items = batch_and_pad(records, t, len(records))[0]
    for item in items:
        feats = item.visual if modality == "visual" else item.audio
        _, all_maps = model.encode_modality(Tensor(feats), item.valid_len,
                                            modality, collect_maps=True)
        prof = analysis.attention_profile(all_maps[0]["final"])
        profile_rows.append([item.id] + [f"{v:.12g}" for v in prof])

        sim = analysis.cosine_similarity_matrix(feats[:item.valid_len])
        analysis.write_pgm(os.path.join(args.out_dir, f"sim_{item.id}.pgm"), sim)

        gm = analysis.gradient_matrix(
            lambda xt: model.encode_modality(xt, item.valid_len, modality), feats)
        analysis.write_pgm(os.path.join(args.out_dir, f"grad_{item.id}.pgm"), gm.g)
        s = analysis.locality_statistic(gm, hoods)
        s_rows.append([item.id] + [f"{v:.12g}" for v in s])

    analysis.write_csv(os.path.join(args.out_dir, "attention_profiles.csv"),
                       profile_rows, header=["id"] + [f"frame_{j}" for j in range(t)])
    analysis.write_csv(os.path.join(args.out_dir, "locality_statistic.csv"),
                       s_rows, header=["id"] + [f"frame_{j}" for j in range(t)])
    echo_config(args.out_dir, {"model": asdict(model.cfg),
                               "analyze": {"modality": modality,
                                           "sample": len(items),
                                           "neighborhood_w": n_w}})
    print(f"analysis artifacts for {len(items)} videos in {args.out_dir}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="lgattn",
                                description="local/global gated attention experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gendata", help="generate a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_gendata)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data-dir", required=True)
    tr.add_argument("--out-dir", required=True)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--variant", choices=["baseline", "local", "share_att", "gate_att", "gate_op"])
    tr.add_argument("--mask", help="mask spec, e.g. bd:10, tp:30 or td:60:4 "
                                   "(| separates per-head masks for share_att)")
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data-dir", required=True)
    ev.add_argument("--out-dir", required=True)
    ev.set_defaults(fn=cmd_eval)

    an = sub.add_parser("analyze", help="attention / gradient diagnostics")
    an.add_argument("--checkpoint", required=True)
    an.add_argument("--data-dir", required=True)
    an.add_argument("--out-dir", required=True)
    an.add_argument("--modality", choices=["visual", "audio"], default="visual")
    an.add_argument("--sample", type=int, default=50)
    an.add_argument("--neighborhood-w", type=int)
    an.set_defaults(fn=cmd_analyze)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DataFormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingDiverged, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
