"""Command-line entry point: generate, maskgen, train, eval, infer, ablate, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .compute import Tensor
from .detector import CLASS_NAMES
from .docgen import DOMAINS, generate_dataset, load_manifest, load_page
from .maskpipe import MorphParams, build_mask, load_mask, save_mask
from .training import (
    ABLATION_ROWS,
    TrainConfig,
    TrainingAborted,
    ablate,
    downscale,
    evaluate,
    format_table,
    load_model,
    prepare_page,
    read_kv,
    save_model,
    train,
)

log = logging.getLogger("cddod")


class CommandError(Exception):
    """A user-facing failure: printed without a traceback, exit code 2."""


# -- helpers ---------------------------------------------------------------------------


def make_run_dir(runs_dir, seed: int, tag: str = "") -> Path:
    """``<runs_dir>/<YYYYmmdd-HHMMSS>-seed<k>[-tag]``, suffixed if the name is taken."""
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(runs_dir) / f"{stamp}-seed{seed}{'-' + tag if tag else ''}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}.{k}")
        k += 1
    try:
        path.mkdir(parents=True)
    except OSError as exc:
        raise CommandError(f"cannot create run directory {path}: {exc}") from exc
    return path


def load_config(path, overrides) -> TrainConfig:
    values = read_kv(path) if path else {}
    for item in overrides or ():
        if "=" not in item:
            raise CommandError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    try:
        return TrainConfig.from_mapping(values)
    except (ValueError, TypeError) as exc:
        raise CommandError(f"bad config: {exc}") from exc


def write_config(path: Path, cfg: TrainConfig) -> None:
    lines = []
    for k, v in cfg.to_json().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k} = {v}")
    path.write_text("\n".join(lines) + "\n")


def manifest_pages(path, split: str, limit: int = 0):
    try:
        manifest = load_manifest(path)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read manifest {path}: {exc}") from exc
    entries = [e for e in manifest["pages"] if split == "all" or e["split"] == split]
    if limit:
        entries = entries[:limit]
    return manifest, [load_page(manifest, e) for e in entries]


def training_inputs(manifest_path, cfg: TrainConfig, with_mask: bool):
    """Prepared train pages; masks written by ``maskgen`` are reused when present."""
    manifest, pages = manifest_pages(manifest_path, "train", cfg.max_pages)
    root = Path(manifest["root"])
    out = []
    for page in pages:
        mask_path = root / f"{page.page_id}.mask.png"
        full = load_mask(mask_path) if with_mask and mask_path.exists() else None
        out.append(prepare_page(page, cfg.input_scale, with_mask, full))
    return out


def parse_classes(text: str | None) -> tuple[str, ...]:
    return tuple(c.strip() for c in text.split(",")) if text else CLASS_NAMES


# -- commands --------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.domain not in DOMAINS:
        raise CommandError(f"unknown domain {args.domain!r}; choose from {sorted(DOMAINS)}")
    if args.pages < 0:
        raise CommandError("--pages must be non-negative")
    try:
        manifest = generate_dataset(DOMAINS[args.domain](), args.pages, args.seed, args.out, args.test_fraction)
    except OSError as exc:
        raise CommandError(str(exc)) from exc
    n_test = sum(p["split"] == "test" for p in manifest["pages"])
    print(f"wrote {len(manifest['pages'])} pages ({n_test} test) to {args.out}")
    return 0


def cmd_maskgen(args) -> int:
    manifest, pages = manifest_pages(args.manifest, "all")
    out = Path(args.out) if args.out else Path(manifest["root"])
    out.mkdir(parents=True, exist_ok=True)
    params = MorphParams(args.threshold, args.dilate, 1, args.close)
    for page in pages:
        save_mask(build_mask(page.layers, params, page.page_id), out)
    print(f"wrote {len(pages)} masks to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    if not cfg.source_manifest:
        raise CommandError("config needs source_manifest")
    if cfg.adapted and not cfg.target_manifest:
        raise CommandError("alignment is enabled but target_manifest is not set")
    if args.log_every < 1:
        raise CommandError("--log-every must be positive")
    run = make_run_dir(args.runs_dir, cfg.seed)
    write_config(run / "config.txt", cfg)
    source = training_inputs(cfg.source_manifest, cfg, cfg.enable_rla)
    target = training_inputs(cfg.target_manifest, cfg, cfg.enable_rla) if cfg.adapted else []
    log.info("run %s: %d source, %d target pages", run, len(source), len(target))

    def progress(rec):
        if rec["step"] % args.log_every == 0:
            log.info("step %d epoch %d total %.4f det %.4f", rec["step"], rec["epoch"], rec["total"], rec["l_det"])

    try:
        res = train(cfg, source, target, run / "train_log.jsonl", run / "checkpoints", progress)
    except TrainingAborted as exc:
        raise CommandError(f"training aborted at {exc}") from exc
    save_model(run / "model.ckpt", res.model.detector, cfg, cfg.epochs)
    summary = {"run": str(run), "steps": len(res.log), "seconds": res.seconds, "final_total": res.log[-1]["total"]}
    (run / "train_summary.json").write_text(json.dumps(summary, indent=1))
    print(run)
    return 0


def cmd_eval(args) -> int:
    classes = parse_classes(args.classes)
    try:
        det, meta = load_model(args.checkpoint, classes)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    _, pages = manifest_pages(args.manifest, args.split)
    scale = int(meta.get("config", {}).get("input_scale", 2))
    ckpt = Path(args.checkpoint)
    run = ckpt.parent.parent if ckpt.parent.name == "checkpoints" else ckpt.parent
    mp = Path(args.manifest)
    name = mp.parent.name if mp.is_file() else mp.name
    out = Path(args.out) if args.out else run / f"eval_{name}_{args.split}.json"
    overlays = out.with_suffix("").with_name(out.stem + "_overlays") if args.overlays else None
    report = evaluate(det, pages, scale, overlays)
    report.save(out)
    for flag in report.flags:
        log.warning(flag)
    print(json.dumps({"map": report.map, "report": str(out)}))
    return 0


def cmd_infer(args) -> int:
    try:
        det, meta = load_model(args.checkpoint, parse_classes(args.classes))
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    scale = int(meta.get("config", {}).get("input_scale", 2))
    lines = []
    for path in args.images:
        try:
            img = np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
        except OSError as exc:
            raise CommandError(f"cannot read image {path}: {exc}") from exc
        h, w = img.shape
        if h % (32 * scale) or w % (32 * scale):
            raise CommandError(f"{path}: size {w}x{h} must be a multiple of {32 * scale}")
        x = 1.0 - downscale(img, scale) / 255.0
        for d in det.infer(Tensor(x[None, None]), scale=float(scale)):
            lines.append(json.dumps(d.to_json(Path(path).stem)))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    if not (cfg.source_manifest and cfg.target_manifest):
        raise CommandError("ablation needs source_manifest and target_manifest")
    seeds = [int(s) for s in args.seeds.split(",")]
    run = make_run_dir(args.runs_dir, seeds[0], "ablate")
    write_config(run / "config.txt", cfg)
    source = training_inputs(cfg.source_manifest, cfg, True)
    target = training_inputs(cfg.target_manifest, cfg, True)
    _, test = manifest_pages(cfg.target_manifest, "test")
    rows = ablate(cfg, source, target, test, seeds, ABLATION_ROWS, log.info)
    table = format_table(rows)
    (run / "ablation.txt").write_text(table + "\n")
    (run / "ablation.json").write_text(
        json.dumps({"seeds": seeds, "rows": [{"label": r.label, "maps": r.maps, "median": r.median} for r in rows]}, indent=1)
    )
    print(table)
    return 0


def cmd_report(args) -> int:
    """Markdown summary of a run directory: config, loss trace, evaluations, ablation."""
    run = Path(args.run)
    if not run.is_dir():
        raise CommandError(f"no run directory {run}")
    parts = [f"# Run {run.name}", ""]
    if (run / "config.txt").exists():
        parts += ["## Config", "", "```", (run / "config.txt").read_text().strip(), "```", ""]
    log_path = run / "train_log.jsonl"
    if log_path.exists():
        recs = [json.loads(l) for l in log_path.read_text().splitlines() if l.strip()]
        if recs:
            parts += ["## Training", "", "| epoch | steps | mean total | mean L_det | mean L_p | mean L_r | mean L_s |", "|---|---|---|---|---|---|---|"]
            for e in sorted({r["epoch"] for r in recs}):
                rs = [r for r in recs if r["epoch"] == e]
                m = lambda k: np.mean([r[k] for r in rs])
                parts.append(
                    f"| {e + 1} | {len(rs)} | {m('total'):.4f} | {m('l_det'):.4f} | {m('l_p'):.4f} | {m('l_r'):.4f} | {m('l_s'):.4f} |"
                )
            parts.append("")
    for ev in sorted(run.glob("eval_*.json")):
        rep = json.loads(ev.read_text())
        parts += [f"## {ev.stem}", "", f"mAP@{rep['iou_threshold']}: {100 * rep['map']:.2f} ({rep['n_images']} images)", ""]
        parts += ["| class | AP | GT | det |", "|---|---|---|---|"]
        for name, ap in rep["per_class_ap"].items():
            c = rep["counts"][name]
            parts.append(f"| {name} | {'n/a' if ap is None else f'{100 * ap:.2f}'} | {c['gt']} | {c['det']} |")
        parts += [""] + [f"- {f}" for f in rep["flags"]] + [""]
    if (run / "ablation.txt").exists():
        parts += ["## Ablation (target test mAP)", "", "```", (run / "ablation.txt").read_text().strip(), "```", ""]
    text = "\n".join(parts)
    (run / "report.md").write_text(text)
    print(text)
    return 0


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cddod", description="Cross-domain document object detection at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset and its manifest")
    g.add_argument("--domain", required=True)
    g.add_argument("--pages", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--test-fraction", type=float, default=0.25)
    g.set_defaults(func=cmd_generate)

    m = sub.add_parser("maskgen", help="build rendering-layer masks for every page of a dataset")
    m.add_argument("--manifest", required=True)
    m.add_argument("--out")
    m.add_argument("--threshold", type=int, default=250)
    m.add_argument("--dilate", type=int, default=5)
    m.add_argument("--close", type=int, default=9)
    m.set_defaults(func=cmd_maskgen)

    for name, func, helptext in (("train", cmd_train, "train one model"), ("ablate", cmd_ablate, "run the four-row module ablation")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--config", help="flat key = value file")
        t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        t.add_argument("--runs-dir", default="runs")
        if name == "train":
            t.add_argument("--log-every", type=int, default=50)
        else:
            t.add_argument("--seeds", default="0,1,2")
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="mAP@0.5 of a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=["train", "test", "all"])
    e.add_argument("--out")
    e.add_argument("--overlays", action="store_true")
    e.add_argument("--classes", help="comma-separated class names the checkpoint must match")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="detections for page images as JSON lines")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("images", nargs="+")
    i.add_argument("--out")
    i.add_argument("--classes")
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("report", help="markdown summary of a run directory")
    r.add_argument("--run", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
