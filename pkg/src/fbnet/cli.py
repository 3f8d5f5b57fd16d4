"""Command-line harness: data generation, training, evaluation, ablation, export.

Exit codes (documented in the README): 0 success, 1 unexpected failure,
2 usage error or missing input file, 3 config/schema violation, 4 dataset or
file-format error, 5 numerical abort (non-finite loss/gradient).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .attention import export_attention_maps
from .data import class_histogram, generate_synthetic, load_dataset, save_dataset
from .errors import ConfigError, DataError, FbnetError, NumericError
from .io import load_tensor
from .model import FBNet, count_parameters, load_model
from .train import ablation_run, evaluate, train_loop, write_metrics_csv

EXIT_CODES = {
    "ok": 0,
    "error": 1,
    "missing_file": 2,
    "config": 3,
    "data": 4,
    "numeric": 5,
}


def _model_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 7]))


def _load_samples(cfg: C.RunConfig):
    if cfg.dataset_dir:
        return load_dataset(cfg.dataset_dir)
    return generate_synthetic(cfg.synthetic, cfg.n_samples)


def cmd_gen_data(args) -> int:
    spec = C.load_gen_spec(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = generate_synthetic(spec, args.n)
    save_dataset(out, samples)
    hist = class_histogram(samples, spec.num_classes)
    for k in range(spec.num_classes):
        print(f"class {k}: {hist[k]}")
    print(f"total pixels: {int(hist[:spec.num_classes].sum())}")
    print(f"wrote {len(samples)} sample pairs to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = C.load_run_config(args.config)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.txt").write_text(C.resolved_text(cfg.resolved))
    samples = _load_samples(cfg)
    model = FBNet(cfg.model, _model_rng(cfg.seed))
    (out / "run_meta.json").write_text(C.run_metadata(cfg, model.has_aux))

    records, best = train_loop(model, samples, cfg.optim, cfg.data, cfg.seed,
                               checkpoint_path=out / "best.fbck", log=print)
    write_metrics_csv(out / "metrics.csv", records)

    from .train import split_train_val
    _, val = split_train_val(samples, cfg.data.val_fraction)
    save_dataset(out / "val", val)
    print(f"best_epoch={best['epoch']} miou_class={best['miou_class']:.6f} "
          f"miou_sample={best['miou_sample']:.6f} pix_acc={best['pix_acc']:.6f}")
    print(f"checkpoint: {out / 'best.fbck'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(str(ckpt))
    model, flat = load_model(ckpt)
    samples = load_dataset(args.data)
    base = int(flat.get("eval_base", "72"))
    stats = evaluate(model, samples, base)
    print(f"samples={len(samples)}")
    print(f"miou_class={stats['miou_class']:.9f}")
    print(f"miou_sample={stats['miou_sample']:.9f}")
    print(f"pix_acc={stats['pix_acc']:.9f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = C.load_run_config(args.config)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.txt").write_text(C.resolved_text(cfg.resolved))
    (out / "run_meta.json").write_text(C.run_metadata(cfg, cfg.model.aux_enabled))
    samples = _load_samples(cfg)
    rows = ablation_run(samples, cfg.model, cfg.optim, cfg.data, cfg.seed, out, log=print)
    for r in rows:
        print(f"{r['strategy']:22s} miou={r['miou']:.2f} acc={r['accuracy']:.2f} "
              f"epochs={r['epochs']} params={r['params']}")
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def cmd_export_attn(args) -> int:
    ckpt = Path(args.checkpoint)
    sample_path = Path(args.sample)
    for p in (ckpt, sample_path):
        if not p.is_file():
            raise FileNotFoundError(str(p))
    model, _ = load_model(ckpt)
    image = load_tensor(sample_path)
    written = export_attention_maps(model, image, args.out,
                                    cam_channels=args.cam_channels,
                                    sam_rows=args.sam_rows)
    print(f"cam_maps={len(written['cam'])} sam_maps={len(written['sam'])} out={args.out}")
    return 0


def cmd_params(args) -> int:
    cfg = C.load_run_config(args.config)
    sc = cfg.model.backbone.stage_channels
    for i, c in enumerate(sc, 1):
        print(f"channels.stage{i}={c}")
    print(f"channels.c_mid={cfg.model.c_mid}")
    print(f"channels.c_sam={cfg.model.c_sam}")
    print(f"channels.fused={cfg.model.fused_channels}")
    model = FBNet(cfg.model, _model_rng(cfg.seed))
    counts = count_parameters(model)
    for name, n in counts.items():
        print(f"params.{name}={n}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbnet",
                                description="feature-boosting segmentation network harness")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True, help="key=value synthetic spec file")
    g.add_argument("--out", required=True, help="output directory for FBT1 pairs")
    g.add_argument("--n", required=True, type=int, help="number of samples")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train all six strategies and emit the summary CSV")
    a.add_argument("--config", required=True)
    a.set_defaults(fn=cmd_ablate)

    x = sub.add_parser("export-attn", help="write attention maps of one sample as PGM files")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--sample", required=True, help="an .img.fbt tensor file")
    x.add_argument("--out", required=True)
    x.add_argument("--cam-channels", type=int, default=8)
    x.add_argument("--sam-rows", type=int, default=8)
    x.set_defaults(fn=cmd_export_attn)

    pr = sub.add_parser("params", help="print the channel ledger and parameter counts")
    pr.add_argument("--config", required=True)
    pr.set_defaults(fn=cmd_params)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"error=MissingFile: {e}", file=sys.stderr)
        return EXIT_CODES["missing_file"]
    except ConfigError as e:
        print(f"error=ConfigError: {e}", file=sys.stderr)
        return EXIT_CODES["config"]
    except DataError as e:
        print(f"error=DataError: {e}", file=sys.stderr)
        return EXIT_CODES["data"]
    except NumericError as e:
        print(f"error=NumericError: {e}", file=sys.stderr)
        return EXIT_CODES["numeric"]
    except FbnetError as e:
        print(f"error={type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CODES["error"]


if __name__ == "__main__":
    sys.exit(main())
