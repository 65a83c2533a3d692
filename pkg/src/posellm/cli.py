"""Command-line entry point: ``posellm {generate,train,eval,predict,ablate}``.

Exit codes: 0 success, 2 validation error, 3 runtime abort, 4 IO error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import prompt_codec
from .ablation import ablation_table, expressivity_probe
from .checkpoint import (CheckpointError, checkpoint_config, load_checkpoint, save_checkpoint,
                         write_loss_curve)
from .config import ConfigValidationError, RunConfig, load_config
from .metrics import evaluate, format_table, ground_truth_predictions, write_predictions
from .model import predict_keypoints
from .pipeline import evaluate_model, load_split, new_model, predict_dataset, run_ablation, train_model, write_splits
from .synth_data import DatasetError
from .trainer import TrainingAborted

log = logging.getLogger("posellm")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4


def _overrides(args) -> Dict[str, str]:
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigValidationError([f"--set expects key=value, got {item!r}"])
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        out[args.seed_key] = str(args.seed)
    if getattr(args, "connector", None):
        out["connector.mode"] = args.connector
    for flag, key in (("count", "data.count"), ("split_ratio", "data.split")):
        if getattr(args, flag, None) is not None:
            out[key] = str(getattr(args, flag))
    return out


def _config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def cmd_generate(args) -> int:
    cfg = _config(args)
    counts = write_splits(cfg, args.out)
    print(f"wrote {counts['train']} train / {counts['val']} val samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    if args.resume:
        model, cfg, state = load_checkpoint(args.resume)
        over = _overrides(args)
        if over:
            cfg = cfg.override(over).validate()
    else:
        cfg = _config(args)
        model, state = new_model(cfg), None
    samples = load_split(args.data, "train")

    def progress(step, loss):
        if step % 10 == 0:
            log.info("step %d loss %.4f", step, loss)

    model, state = train_model(cfg, samples, model=model, state=state,
                               max_steps=args.max_steps, on_step=progress)
    save_checkpoint(out, model, cfg, state)
    write_loss_curve(out / "loss.txt", state.losses)
    if state.losses:
        print(f"trained {state.step} steps; loss {state.losses[0]:.4f} -> {state.losses[-1]:.4f}; checkpoint {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    expected = _config(args) if args.config else None
    model, cfg, _ = load_checkpoint(args.checkpoint, expected)
    samples = load_split(args.data, args.split)
    limit = args.limit if args.limit is not None else cfg.metrics.eval_samples
    if limit > 0:
        samples = samples[:limit]
    if args.ground_truth_predictions:
        preds, failures, queries = ground_truth_predictions(samples), 0, len(samples) * prompt_codec.NUM_KEYPOINTS
    else:
        preds, failures, queries = predict_dataset(model, samples)
    report = evaluate(preds, samples, cfg.metrics.oks_params(), failures, queries)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(preds, out / "predictions.jsonl")
    table = report.table(f"{cfg.connector.mode} connector")
    (out / "report.txt").write_text(table)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(table, end="")
    print(f"parse failures: {failures}/{queries}")
    return EXIT_OK


def _read_image(path: str) -> np.ndarray:
    if path.endswith(".npy"):
        return np.load(path).astype(np.float64)
    from PIL import Image

    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def cmd_predict(args) -> int:
    try:
        k = prompt_codec.keypoint_index(args.keypoint)
    except KeyError as e:
        print(e.args[0], file=sys.stderr)
        return EXIT_VALIDATION
    model, cfg, _ = load_checkpoint(args.checkpoint)
    img = _read_image(args.image)
    size = cfg.encoder.image_size
    if img.shape != (size, size):
        print(f"image must be {size}x{size} grayscale, got {img.shape}", file=sys.stderr)
        return EXIT_VALIDATION
    import torch

    res = predict_keypoints(model, torch.as_tensor(img[None], dtype=model.dtype), [k])[0][0]
    if res.coords is None:
        print(f"{args.keypoint}: parse failure ({res.text!r})")
    else:
        print(f"{args.keypoint}: x={res.coords[0]:.3f} y={res.coords[1]:.3f}")
        if args.marker_out:
            _write_marker(img, res.coords, args.marker_out)
    return EXIT_OK


def _write_marker(img: np.ndarray, coords, path: str) -> None:
    from PIL import Image

    rgb = np.repeat((img * 255).astype(np.uint8)[..., None], 3, axis=2)
    h, w = img.shape
    cx, cy = int(coords[0] * w), int(coords[1] * h)
    for d in range(-3, 4):
        for x, y in ((cx + d, cy), (cx, cy + d)):
            if 0 <= x < w and 0 <= y < h:
                rgb[y, x] = (255, 0, 0)
    Image.fromarray(rgb).save(path)


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seeds = list(range(cfg.train.seed, cfg.train.seed + args.seeds))
    probe = expressivity_probe(seed=cfg.train.seed)
    rows = run_ablation(cfg, seeds, args.split)
    table = ablation_table(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(table)
    detail = {
        "expressivity": {"linear_mse": probe.linear_mse, "mlp_mse": probe.mlp_mse, "ratio": probe.ratio},
        "runs": [{"mode": r.mode, "seed": r.seed, **r.report.to_dict()} for r in rows],
    }
    (out / "ablation.json").write_text(json.dumps(detail, indent=2) + "\n")
    print(f"expressivity probe: linear MSE {probe.linear_mse:.4f}, MLP MSE {probe.mlp_mse:.4f} "
          f"(ratio {probe.ratio:.1f}x)")
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posellm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_key):
        sp.add_argument("--config", help="config file, or preset:desk / preset:paper / preset:ablate")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
        sp.add_argument("--seed", type=int)
        sp.set_defaults(seed_key=seed_key)

    g = sub.add_parser("generate", help="write train/val synthetic splits")
    common(g, "data.seed")
    g.add_argument("--count", type=int)
    g.add_argument("--split", dest="split_ratio", type=float, help="train fraction")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    common(t, "train.seed")
    t.add_argument("--data", required=True, help="dataset directory or .jsonl file")
    t.add_argument("--connector", choices=("mlp", "linear"))
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-steps", type=int, help="stop after this many further optimizer steps")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="decode every keypoint and write predictions + report")
    common(e, "train.seed")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="train")
    e.add_argument("--limit", type=int, help="evaluate the first N samples (0 = all)")
    e.add_argument("--connector", choices=("mlp", "linear"))
    e.add_argument("--ground-truth-predictions", action="store_true", help=argparse.SUPPRESS)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="locate one keypoint in one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True, help="grayscale PNG or .npy array")
    pr.add_argument("--keypoint", required=True)
    pr.add_argument("--marker-out", help="write the image with a cross at the prediction")
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", help="MLP vs linear connector over several seeds")
    common(a, "train.seed")
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--split", default="train", choices=("train", "val"))
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingAborted as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CheckpointError, DatasetError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
