"""Command-line entry point: ``splatprune <command> ...``.

Failures print one line ``error: <category>: <message>`` to stderr and exit
with a category-specific code (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import encoder as enc
from . import images
from . import metrics
from . import refiner as ref
from . import training
from .config import ConfigError, from_kv, parse_kv, split_sections
from .gaussians import PlyError, read_ply, write_ply
from .pruner import PruneConfig, prune, score, select_top_k
from .rasterizer import rasterize, read_cameras, write_cameras
from .synthscene import SceneSpec, generate

EXIT_CODES = {
    "usage": 2,
    "missing-file": 3,
    "config": 4,
    "load": 5,
    "divergence": 6,
    "runtime": 1,
}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message.replace("\n", " "))


def _need(path) -> str:
    if not os.path.exists(path):
        raise CliError("missing-file", f"no such file or directory: {path}")
    return path


def _read_config(path) -> dict[str, str]:
    with open(_need(path)) as fh:
        return parse_kv(fh.read(), source=path)


def _load_ply(path):
    return read_ply(_need(path))


def _write_text(path, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def view_name(i: int) -> str:
    return f"view_{i:03d}"


# ---- commands -------------------------------------------------------------

def cmd_synth(args) -> None:
    values = _read_config(args.spec) if args.spec else {}
    values["seed"] = str(args.seed)
    spec = from_kv(SceneSpec, values)
    scene = generate(spec)
    os.makedirs(os.path.join(args.out, "targets"), exist_ok=True)
    write_ply(scene.cloud, os.path.join(args.out, "scene.ply"))
    write_cameras(os.path.join(args.out, "cameras.txt"), scene.cameras, scene.splits)
    for i, cam in enumerate(scene.cameras):
        rgb = rasterize(scene.cloud, cam).rgb
        images.write_float_dump(os.path.join(args.out, "targets", view_name(i) + ".fd"), rgb)
        images.write_png(os.path.join(args.out, "targets", view_name(i) + ".png"), rgb)


def _prune_config(args) -> PruneConfig:
    keep_fraction = args.keep_fraction
    if keep_fraction is None and args.keep_count is None:
        keep_fraction = 0.5
    return PruneConfig(lambda_alpha=args.lambda_alpha, keep_fraction=keep_fraction,
                       keep_count=args.keep_count, volume_space=args.volume_space)


def cmd_prune(args) -> None:
    cloud = _load_ply(args.input)
    try:
        cfg = _prune_config(args)
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    out, report = prune(cloud, cfg)
    write_ply(out, args.out)
    if args.report:
        _write_text(args.report, report.to_csv())
    if args.summary:
        _write_text(args.summary, report.to_text())


def cmd_render(args) -> None:
    cloud = _load_ply(args.input)
    cams, splits = read_cameras(_need(args.cameras))
    os.makedirs(args.out, exist_ok=True)
    for i, (cam, split) in enumerate(zip(cams, splits)):
        if args.split != "all" and split != args.split:
            continue
        rgb = rasterize(cloud, cam).rgb
        base = os.path.join(args.out, view_name(i))
        images.write_png(base + ".png", rgb)
        if args.float_dump:
            images.write_float_dump(base + ".fd", rgb)


def cmd_eval(args) -> None:
    renders = images.list_images(_need(args.renders))
    targets = images.list_images(_need(args.targets))
    if not renders:
        raise CliError("load", f"no images in {args.renders}")
    missing = sorted(set(renders) - set(targets))
    if missing:
        raise CliError("missing-file", f"no target image for views {missing}")
    report = metrics.evaluate({k: images.read_image(p) for k, p in renders.items()},
                              {k: images.read_image(targets[k]) for k in renders},
                              meta={"views": str(len(renders))})
    text = report.to_text()
    if args.report:
        _write_text(args.report, text)
    else:
        sys.stdout.write(text)


def _selected_from_csv(path, n: int) -> np.ndarray:
    with open(_need(path)) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CliError("load", f"{path}: empty selection file")
    header = lines[0].split(",")
    if "index" not in header or "selected" not in header:
        raise CliError("load", f"{path}: expected 'index' and 'selected' columns")
    ii, si = header.index("index"), header.index("selected")
    sel = []
    for line in lines[1:]:
        cols = line.split(",")
        if cols[si].strip() in ("1", "true", "True"):
            sel.append(int(cols[ii]))
    sel = np.asarray(sel, dtype=np.int64)
    if sel.size and sel.max() >= n:
        raise CliError("load", f"{path}: index {sel.max()} out of range for {n} Gaussians")
    return sel


def cmd_stats(args) -> None:
    cloud = _load_ply(args.input)
    if args.selected:
        sel = _selected_from_csv(args.selected, len(cloud))
    else:
        try:
            cfg = _prune_config(args)
        except ValueError as exc:
            raise CliError("config", str(exc)) from None
        sel, _ = select_top_k(score(cloud, cfg), cfg.resolve_k(len(cloud)))
    stats = metrics.distribution_stats(cloud, sel, bins=args.bins)
    if args.out:
        _write_text(args.out, stats.to_csv())
    text = stats.to_text()
    if args.summary:
        _write_text(args.summary, text)
    else:
        sys.stdout.write(text)


def load_train_config(values: dict[str, str]):
    sections = split_sections(values)
    unknown = sorted(set(sections) - {"prune", "encoder", "refiner", "train"})
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}")
    prune_values = dict(sections.get("prune", {}))
    if "keep_fraction" not in prune_values and "keep_count" not in prune_values:
        prune_values["keep_fraction"] = "0.5"
    return (from_kv(PruneConfig, prune_values),
            from_kv(enc.EncoderConfig, sections.get("encoder", {})),
            from_kv(ref.RefinerConfig, sections.get("refiner", {})),
            from_kv(training.TrainConfig, sections.get("train", {})))


def load_scene_dir(path) -> training.TrainScene:
    cloud = _load_ply(os.path.join(_need(path), "scene.ply"))
    cams, splits = read_cameras(_need(os.path.join(path, "cameras.txt")))
    found = images.list_images(_need(os.path.join(path, "targets")))
    targets = []
    for i in range(len(cams)):
        if view_name(i) not in found:
            raise CliError("missing-file", f"{path}: no target image for {view_name(i)}")
        targets.append(images.read_image(found[view_name(i)]))
    train_views = [i for i, s in enumerate(splits) if s == "train"]
    return training.TrainScene(cloud=cloud, cameras=cams, targets=targets, train_views=train_views)


def cmd_train(args) -> None:
    values = _read_config(args.config) if args.config else {}
    values["train.seed"] = str(args.seed)
    prune_cfg, enc_cfg, ref_cfg, train_cfg = load_train_config(values)
    scenes = [load_scene_dir(d) for d in args.scenes]
    params = training.init_params(enc_cfg, ref_cfg, train_cfg.seed)
    result = training.train(scenes, prune_cfg, enc_cfg, ref_cfg, train_cfg, init=params)
    manifest = ckpt.manifest_text({"prune": prune_cfg, "encoder": enc_cfg, "refiner": ref_cfg, "train": train_cfg})
    ckpt.save_checkpoint(args.checkpoint, result.params, manifest)
    if args.log:
        _write_text(args.log, result.log_text())


def cmd_refine(args) -> None:
    cloud = _load_ply(args.input)
    params, manifest = ckpt.load_checkpoint(_need(args.checkpoint))
    enc_cfg = ckpt.section_config(manifest, "encoder", enc.EncoderConfig)
    ref_cfg = ckpt.section_config(manifest, "refiner", ref.RefinerConfig)
    write_ply(training.refine_cloud(cloud, params, enc_cfg, ref_cfg), args.out)


def _report_row(run: str, label: str, rep: metrics.MetricReport) -> str:
    return f"| {run} | {label} | {rep.psnr:.2f} | {rep.ssim:.4f} |"


def cmd_report(args) -> None:
    runs = sorted(d for d in os.listdir(_need(args.runs)) if os.path.isdir(os.path.join(args.runs, d)))
    rows = ["| Run | Method | PSNR | SSIM |", "|---|---|---|---|"]
    collected = {"Pruned*": [], "Refined": []}
    for run in runs:
        for label, fname in (("Pruned*", "eval_pruned.txt"), ("Refined", "eval_refined.txt")):
            path = os.path.join(args.runs, run, fname)
            if not os.path.exists(path):
                continue
            with open(path) as fh:
                rep = metrics.MetricReport.from_text(fh.read())
            collected[label].append(rep)
            rows.append(_report_row(run, label, rep))
    if not any(collected.values()):
        raise CliError("missing-file", f"no eval_pruned.txt / eval_refined.txt under {args.runs}")
    for label, reps in collected.items():
        if reps:
            mean = metrics.MetricReport(psnr=float(np.mean([r.psnr for r in reps])),
                                        ssim=float(np.mean([r.ssim for r in reps])))
            rows.append(_report_row("mean", label, mean))
    text = "\n".join(rows) + "\n"
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)


# ---- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatprune", description="Prune and refine Gaussian splatting models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
        sp.set_defaults(func=fn)
        return sp

    sp = command("synth", cmd_synth, "generate a synthetic scene, cameras and target renders")
    sp.add_argument("--spec", help="key=value scene spec file (defaults if omitted)")
    sp.add_argument("--out", required=True)

    def prune_flags(sp):
        sp.add_argument("--lambda-alpha", type=float, default=0.3)
        sp.add_argument("--keep-fraction", type=float)
        sp.add_argument("--keep-count", type=int)
        sp.add_argument("--volume-space", choices=("raw", "log"), default="raw")

    sp = command("prune", cmd_prune, "keep the top-K Gaussians by opacity/volume score")
    sp.add_argument("--in", dest="input", required=True)
    prune_flags(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", help="per-Gaussian CSV")
    sp.add_argument("--summary", help="key=value summary")

    sp = command("render", cmd_render, "render a PLY from a camera file")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--cameras", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--float-dump", action="store_true", help="also write raw float32 images (.fd)")
    sp.add_argument("--split", choices=("all", "train", "test"), default="all")

    sp = command("eval", cmd_eval, "PSNR/SSIM of renders against targets")
    sp.add_argument("--renders", required=True)
    sp.add_argument("--targets", required=True)
    sp.add_argument("--report")

    sp = command("stats", cmd_stats, "opacity / log-volume histograms of selected vs rejected Gaussians")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--selected", help="CSV from 'prune --report'; otherwise select with the prune flags")
    prune_flags(sp)
    sp.add_argument("--bins", type=int, default=50)
    sp.add_argument("--out", help="histogram CSV")
    sp.add_argument("--summary", help="medians as key=value")

    sp = command("train", cmd_train, "train the encoder/refiner on synth scene directories")
    sp.add_argument("--scenes", nargs="+", required=True)
    sp.add_argument("--config", help="key=value file with prune./encoder./refiner./train. keys")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--log", help="loss curve output")

    sp = command("refine", cmd_refine, "apply a trained checkpoint to a pruned PLY")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)

    sp = command("report", cmd_report, "markdown table of pruned vs refined eval reports")
    sp.add_argument("--runs", required=True)
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except CliError as exc:
        return _fail(exc.category, str(exc))
    except FileNotFoundError as exc:
        return _fail("missing-file", str(exc))
    except (ConfigError, ckpt.CheckpointError) as exc:
        return _fail("config" if isinstance(exc, ConfigError) else "load", str(exc))
    except PlyError as exc:
        return _fail("load", str(exc))
    except training.TrainingDiverged as exc:
        return _fail("divergence", str(exc))
    except ValueError as exc:
        return _fail("load", str(exc))
    return 0


def _fail(category: str, message: str) -> int:
    print(f"error: {category}: {' '.join(message.split())}", file=sys.stderr)
    return EXIT_CODES[category]
