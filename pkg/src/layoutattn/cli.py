"""Command-line entry point: ``layoutattn {gen-data,train,generate,eval}``.

Exit codes: 0 success, 2 bad user input (flags, files, parse or
contradiction errors), 3 layout training diverged, 4 weight optimisation
produced a non-finite loss (or every evaluation item failed).

Every command is deterministic given its flags and ``--seed``.  Each output
file records the resolved configuration and the package version, either
inline or in a ``*.meta.json`` sidecar for formats that cannot carry it.
The ``LAYOUTATTN_THREADS`` environment variable caps worker processes and
torch threads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .attention import SoftRegionConfig
from .errors import (
    ConfigError,
    ContradictionError,
    DivergenceError,
    LayoutAttnError,
    NonFiniteLossError,
    ParseError,
)
from .generator import GeneratorConfig, crop_region, write_ppm, write_scene_json
from .layout.gmm import DEFAULT_RADIUS, ExplicitMask, Layout, SampleMode, region_mask
from .optimizer import OptimizerConfig, Variant, optimize
from .scene_dsl import DEFAULT_CELL_COUNTS, generate_dataset, parse_counts, parse_description, read_jsonl, write_jsonl
from .scorer import ScoreConfig, local_score, outside_score

EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_OPTIMIZATION = 4


class UsageError(Exception):
    """Bad flags or files; reported with exit code 2."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def thread_cap() -> int:
    raw = os.environ.get("LAYOUTATTN_THREADS")
    cpus = os.cpu_count() or 1
    if raw is None or raw == "":
        return cpus
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LAYOUTATTN_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"LAYOUTATTN_THREADS must be a positive integer, got {raw!r}")
    return min(n, cpus)


def provenance(command: str, config: dict) -> dict:
    return {"command": command, "version": __version__, "config": config}


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def require_file(path: Optional[str], what: str) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def prepare_out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    return out


def _build(cls, overrides: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise UsageError(f"unknown key(s) in config section {section!r}: {', '.join(unknown)}")
    try:
        return cls(**overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {section} config: {exc}") from None


def load_run_config(args) -> tuple[GeneratorConfig, OptimizerConfig, ScoreConfig]:
    """Merge ``--config`` JSON sections with the dedicated command-line flags (flags win)."""
    sections = {"generator": {}, "optimizer": {}, "score": {}}
    if getattr(args, "config", None):
        path = require_file(args.config, "config file")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise UsageError(f"{path}: top level must be an object")
        unknown = sorted(set(doc) - set(sections))
        if unknown:
            raise UsageError(f"{path}: unknown section(s) {', '.join(unknown)}")
        for key, value in doc.items():
            if not isinstance(value, dict):
                raise UsageError(f"{path}: section {key!r} must be an object")
            sections[key] = dict(value)
    if args.steps is not None:
        sections["generator"]["steps"] = args.steps
    if args.iterations is not None:
        sections["optimizer"]["iterations"] = args.iterations
    if "clamp" in sections["optimizer"]:
        sections["optimizer"]["clamp"] = tuple(sections["optimizer"]["clamp"])
    return (
        _build(GeneratorConfig, sections["generator"], "generator"),
        _build(OptimizerConfig, sections["optimizer"], "optimizer"),
        _build(ScoreConfig, sections["score"], "score"),
    )


def optimizer_json(cfg: OptimizerConfig) -> dict:
    d = asdict(cfg)
    d["variant"] = cfg.variant.value
    d["gradient_mode"] = cfg.gradient_mode.value
    return d


def set_torch_threads(n: int) -> None:
    import torch

    torch.set_num_threads(n)


def load_model(path: Path):
    from .layout.io import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(path)
    except (CheckpointError, OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    counts = parse_counts(args.counts) if args.counts else dict(DEFAULT_CELL_COUNTS)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        raise UsageError(f"output directory does not exist: {out.parent}")
    items = generate_dataset(counts, seed=args.seed, with_layout=not args.no_layout)
    write_jsonl(items, out)
    config = {
        "counts": {f"{n}:{m}": c for (n, m), c in sorted(counts.items())},
        "seed": args.seed,
        "with_layout": not args.no_layout,
    }
    meta = provenance("gen-data", config)
    meta["items"] = len(items)
    meta["sha256"] = file_digest(out)
    write_json(out.with_name(out.name + ".meta.json"), meta)
    print(f"{'N':>3}{'M':>3}{'items':>8}")
    for (n, m), c in sorted(counts.items()):
        print(f"{n:>3}{m:>3}{c:>8}")
    print(f"total {len(items)} -> {out}")
    return 0


def cmd_train(args) -> int:
    from .layout.io import save_checkpoint
    from .layout.model import LossConfig, TrainConfig, relation_satisfaction, train
    from .plotting import plot_loss_curves

    data_path = require_file(args.data, "dataset")
    out = Path(args.out)
    if not out.parent.exists():
        raise UsageError(f"output directory does not exist: {out.parent}")
    if not 0.0 <= args.holdout < 1.0:
        raise UsageError("--holdout must lie in [0, 1)")
    try:
        loss_cfg = LossConfig(delta=args.delta, xi=args.xi)
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, head_lr=args.lr, loss=loss_cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.epochs < 1:
        raise UsageError("--epochs must be at least 1")
    items = read_jsonl(data_path)
    if any(it.layout is None for it in items):
        raise UsageError(f"{data_path}: every training item needs a layout")
    order = np.random.default_rng(args.seed).permutation(len(items))
    n_hold = int(round(args.holdout * len(items)))
    held = [items[i] for i in order[:n_hold]]
    fit = [items[i] for i in order[n_hold:]] if n_hold else items
    if not fit:
        raise UsageError("no training items left after the hold-out split")
    set_torch_threads(thread_cap())

    def progress(epoch, loss):
        if args.verbose:
            print(f"epoch {epoch + 1:4d}  loss {loss:.5f}", file=sys.stderr)

    result = train(fit, cfg, seed=args.seed, progress=progress)
    config = {
        "data": str(data_path),
        "data_sha256": file_digest(data_path),
        "seed": args.seed,
        "holdout": args.holdout,
        "train": asdict(cfg),
    }
    summary = {
        "initial_loss": result.initial_loss,
        "final_loss": result.loss_curve[-1],
        "train_items": len(fit),
        "train_relation_satisfaction": relation_satisfaction(result.model, fit),
    }
    if held:
        summary["holdout_items"] = len(held)
        summary["holdout_relation_satisfaction"] = relation_satisfaction(result.model, held)
    save_checkpoint(result.model, out, extra={**provenance("train", config), "summary": summary})
    curve_path = out.with_name(out.name + ".loss.json")
    write_json(curve_path, {**provenance("train", config), "loss_curve": result.loss_curve, **summary})
    plot_loss_curves({"train": result.loss_curve}, out.with_name(out.name + ".loss.png"), xlabel="epoch",
                     ylabel="mean loss", title=f"layout predictor (xi={args.xi:g})")
    for k, v in summary.items():
        print(f"{k:32s} {v:.5f}" if isinstance(v, float) else f"{k:32s} {v}")
    print(f"checkpoint -> {out}")
    return 0


def _read_text(args) -> str:
    if args.text is not None:
        return args.text
    path = require_file(args.desc_file, "description file")
    return path.read_text(encoding="utf-8").strip()


def cmd_generate(args) -> int:
    from .layout.io import read_layout, write_layout
    from .layout.model import predict_gmm
    from .layout.gmm import sample_layout
    from .plotting import plot_lambda_heatmap, plot_layout_overlay, plot_loss_curves
    from .evaluation import detect_objects, match_objects

    gen_cfg, opt_cfg, score_cfg = load_run_config(args)
    opt_cfg = replace(opt_cfg, variant=Variant(args.variant))
    if not 0.0 < args.radius <= 0.5:
        raise UsageError(f"--radius must lie in (0, 0.5], got {args.radius}")
    soft = None
    if args.soft_sigma is not None:
        try:
            soft = SoftRegionConfig(args.soft_sigma)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    text = _read_text(args)
    ckpt = require_file(args.ckpt, "checkpoint")
    layout_file = require_file(args.layout_file, "layout file")
    out = prepare_out_dir(args.out)
    desc = parse_description(text)

    layout_source: dict
    if layout_file is not None:
        layout = read_layout(layout_file, desc.n_objects)
        region_mask(layout, gen_cfg.shape)  # raises ShapeError on a grid mismatch
        layout_source = {"layout_file": str(layout_file), "layout_sha256": file_digest(layout_file)}
    else:
        set_torch_threads(thread_cap())
        model, header = load_model(ckpt)
        gmms = predict_gmm(desc, model)
        layout = sample_layout(gmms, args.radius, seed=args.seed, mode=args.layout_mode, edge_clamp=args.edge_clamp)
        layout_source = {
            "ckpt": str(ckpt),
            "ckpt_sha256": file_digest(ckpt),
            "layout_mode": SampleMode(args.layout_mode).value,
            "radius": args.radius,
            "edge_clamp": args.edge_clamp,
        }

    result = optimize(desc, layout, gen_cfg, score_cfg, opt_cfg, seed=args.seed, soft=soft, keep_lam_trace=args.trace)
    config = {
        "text": desc.global_text,
        "seed": args.seed,
        "variant": opt_cfg.variant.value,
        "soft_sigma": args.soft_sigma,
        "generator": asdict(gen_cfg),
        "optimizer": optimizer_json(opt_cfg),
        "score": asdict(score_cfg),
        **layout_source,
    }
    prov = provenance("generate", config)

    scene = result.scene
    write_ppm(scene, out / "scene.ppm")
    write_layout(layout, out / "layout.json")
    layout_doc = json.loads((out / "layout.json").read_text(encoding="utf-8"))
    write_json(out / "layout.json", {**layout_doc, "provenance": prov})
    lam_doc = {"provenance": prov, "lambda": result.lam.tolist(), "loss_trace": result.loss_trace}
    if args.trace:
        lam_doc["lambda_trace"] = [lam.tolist() for lam in result.lam_trace]
    write_json(out / "lambda.json", lam_doc)
    if args.scene_json:
        write_scene_json(scene, out / "scene.json")

    detections = detect_objects(scene)
    matched = match_objects(detections, desc)
    masks = region_mask(layout, gen_cfg.shape).astype(bool)
    objects = []
    for i, obj in enumerate(desc.objects):
        entry = {
            "id": obj.id,
            "noun": obj.noun,
            "color": obj.color,
            "center": list(layout.regions[i].center),
            "detected": matched[i] is not None,
            "detected_centroid": list(matched[i].centroid) if matched[i] is not None else None,
        }
        if isinstance(layout.regions[i], ExplicitMask):
            entry["mask_report"] = {
                "mask_pixels": int(masks[i].sum()),
                "local_score_inside": local_score(crop_region(scene, layout.regions[i]), obj),
                "signature_outside": outside_score(scene, obj, masks[i]),
            }
        objects.append(entry)
    lam = result.lam
    metadata = {
        "provenance": prov,
        "n_objects": desc.n_objects,
        "relations": [{"sub": r.subject_id, "obj": r.object_id, "kind": r.kind.value} for r in desc.relations],
        "objects": objects,
        "initial_loss": result.initial_loss,
        "best_loss": result.best_loss,
        "lambda": lam.tolist(),
        "lambda_mean_per_object": lam.mean(axis=1).tolist(),
        "detections": [
            {"noun": d.noun, "color": d.color, "box": list(d.box), "centroid": list(d.centroid), "area": d.area}
            for d in detections
        ],
        "files": ["scene.ppm", "layout.json", "lambda.json", "overlay.png", "loss.png", "lambda.png"]
        + (["scene.json"] if args.scene_json else []),
    }
    write_json(out / "metadata.json", metadata)
    plot_layout_overlay(scene, layout, desc, out / "overlay.png", detections=detections)
    plot_loss_curves({"attend loss": result.loss_trace}, out / "loss.png", title=opt_cfg.variant.value)
    plot_lambda_heatmap(lam, out / "lambda.png", labels=[f"{o.id}:{o.noun}" for o in desc.objects])
    print(f"loss {result.initial_loss:.4f} -> {result.best_loss:.4f}; "
          f"detected {sum(m is not None for m in matched)}/{desc.n_objects} objects; outputs in {out}")
    return 0


def parse_variants(spec: str) -> list[Variant]:
    out = []
    for name in spec.split(","):
        name = name.strip()
        if not name:
            continue
        try:
            out.append(Variant(name))
        except ValueError:
            valid = ", ".join(v.value for v in Variant)
            raise UsageError(f"unknown variant {name!r}; choose from {valid}") from None
    if not out:
        raise UsageError("no variants given")
    return out


def cmd_eval(args) -> int:
    from .evaluation import SuiteConfig, run_suite, write_report
    from .plotting import plot_ablation_bars

    gen_cfg, opt_cfg, score_cfg = load_run_config(args)
    variants = parse_variants(args.variants)
    data_path = require_file(args.data, "dataset")
    ckpt = require_file(args.ckpt, "checkpoint")
    if not 0.0 < args.radius <= 0.5:
        raise UsageError(f"--radius must lie in (0, 0.5], got {args.radius}")
    out = prepare_out_dir(args.out)
    items = read_jsonl(data_path)
    if args.limit is not None:
        items = items[: args.limit]
    if not items:
        raise UsageError(f"{data_path}: no items to evaluate")
    workers = thread_cap()
    model = None
    if ckpt is not None:
        set_torch_threads(workers)
        model, _ = load_model(ckpt)
    cfg = SuiteConfig(
        generator=gen_cfg,
        score=score_cfg,
        optimizer=opt_cfg,
        radius=args.radius,
        layout_mode=SampleMode(args.layout_mode),
        edge_clamp=args.edge_clamp,
        ground_truth_row=args.ground_truth_layout,
        workers=workers,
    )
    report = run_suite(items, variants, cfg, seed=args.seed, model=model)
    suite_cfg = cfg.to_json()
    suite_cfg.pop("workers")  # does not affect results
    report.config = provenance(
        "eval",
        {
            "data": str(data_path),
            "data_sha256": file_digest(data_path),
            "ckpt": str(ckpt) if ckpt else None,
            "ckpt_sha256": file_digest(ckpt) if ckpt else None,
            "seed": args.seed,
            "variants": [v.value for v in variants],
            "limit": args.limit,
            "suite": suite_cfg,
        },
    )
    write_report(report, out / "report.json", out / "report.csv")
    write_json(out / "report.csv.meta.json", report.config)
    plot_ablation_bars(report.rows, out / "ablation.png")
    print(report.summary())
    print(f"items {len(items)}, failed runs {report.failures}; report in {out}")
    if report.records and all(r.get("error") for r in report.records):
        print("error: every evaluation item failed", file=sys.stderr)
        return EXIT_OPTIMIZATION
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with optional 'generator', 'optimizer' and 'score' sections")
    p.add_argument("--steps", type=int, help="denoising steps T (default 50)")
    p.add_argument("--iterations", type=int, help="weight-optimisation iterations (default 50)")
    p.add_argument("--radius", type=float, default=DEFAULT_RADIUS, help="circle radius of predicted regions")
    p.add_argument("--layout-mode", choices=[m.value for m in SampleMode], default=SampleMode.SAMPLE.value,
                   help="draw centres from the mixture or take the heaviest component's mean")
    p.add_argument("--edge-clamp", action="store_true", help="keep predicted centres r/2 away from the borders")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="layoutattn", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic description dataset (JSON Lines)")
    p.add_argument("--out", required=True, help="output .jsonl path")
    p.add_argument("--counts", help="cells as N:M=COUNT[,N:M=COUNT...]; default is the 500-item table")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-layout", action="store_true", help="omit ground-truth centres")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the mixture layout predictor")
    p.add_argument("--data", required=True, help="training dataset (.jsonl with layouts)")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--xi", type=float, default=20.0, help="weight of the relative-position loss (0 disables it)")
    p.add_argument("--delta", type=float, default=0.05, help="hinge margin of the relative-position loss")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--holdout", type=float, default=0.0, help="fraction held out for relation satisfaction")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true", help="print the loss of every epoch to stderr")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="layout, weight optimisation and toy generation for one description")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text", help="description text")
    src.add_argument("--desc-file", help="file holding the description text")
    lay = p.add_mutually_exclusive_group(required=True)
    lay.add_argument("--ckpt", help="layout predictor checkpoint")
    lay.add_argument("--layout-file", help="JSON layout with circles or PGM masks")
    p.add_argument("--variant", choices=[v.value for v in Variant], default=Variant.FULL.value)
    p.add_argument("--soft-sigma", type=float, help="use Gaussian soft regions with this width")
    p.add_argument("--trace", action="store_true", help="also dump the weights of every iteration")
    p.add_argument("--scene-json", action="store_true", help="write raw channel activations to scene.json")
    p.add_argument("--out", required=True, help="output directory")
    _add_run_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="run the evaluation / ablation suite over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="predictor checkpoint; without it the dataset layouts are used")
    p.add_argument("--variants", default=",".join(v.value for v in Variant), help="comma-separated variants")
    p.add_argument("--ground-truth-layout", action="store_true", help="add a full-variant row on dataset layouts")
    p.add_argument("--limit", type=int, help="evaluate only the first LIMIT items")
    p.add_argument("--out", required=True, help="output directory")
    _add_run_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ParseError, ContradictionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NonFiniteLossError as exc:
        print(f"error: optimisation failed: {exc}", file=sys.stderr)
        return EXIT_OPTIMIZATION
    except LayoutAttnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
