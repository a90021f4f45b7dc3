"""Command-line entry point: ``lfstego <command> [options]``."""
from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import fields
from pathlib import Path

import torch

from . import __version__, evaluation, imaging, metrics, spectral, synth
from .attacks import ORDER, AttackConfig, AttackPlan, AttackStep, replay, sample_params
from .errors import ConfigError, ContractError, StegoError
from .models import load_checkpoint
from .plots import line_plot
from .training import PRESETS, TrainConfig, train

log = logging.getLogger("lfstego")

OUT_ENV = "LFSTEGO_OUT"
SUMMARY_COLUMNS = ["protocol", "group", "n", "mean_psnr", "mean_ssim", "mean_ncc", "sr"]
SWEEP_COLUMNS = ["filter", "d", "mean_ncc", "sr"]
ABLATION_COLUMNS = ["variant", "container_psnr", "container_sr", "clean_mean_ncc", "clean_sr", "out_of_band"]
KNOCKOUTS = {"attack_layer": "use_attack_layer", "freq_loss": "use_freq_loss", "clean_loss": "use_clean_loss"}
TABLE4_D = (1.0, 20.0, 40.0, 60.0, 80.0)


# ---------------------------------------------------------------- plumbing

def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@contextlib.contextmanager
def staged_output(out: Path):
    """Write into a hidden sibling directory and move it into place on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.parent / f".{out.name}.partial-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if not out.exists():
        os.replace(tmp, out)
        return
    for item in tmp.iterdir():
        dest = out / item.name
        if dest.is_dir():
            shutil.rmtree(dest)
        os.replace(item, dest)
    tmp.rmdir()


def write_manifest(out: Path, args: argparse.Namespace, config: dict | None) -> None:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "version": __version__,
        "seed": args.seed,
        "config": config,
        "config_sha256": _digest(config) if config is not None else None,
        "torch": torch.__version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def write_table(rows: list[dict], columns: list[str], stem: Path, fmt: str) -> Path:
    if fmt == "json":
        path = stem.with_suffix(".json")
        path.write_text(json.dumps(rows, indent=2, allow_nan=True) + "\n")
        return path
    path = stem.with_suffix(".csv")
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        wr.writeheader()
        for row in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"no such config file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _train_config(args) -> TrainConfig:
    data = dict(PRESETS[args.preset])
    data.update(_load_json(args.config))
    if args.seed is not None:
        data["seed"] = args.seed
    for key in ("epochs", "steps_per_epoch"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    return TrainConfig.from_dict(data)


def _eval_params(args) -> evaluation.EvalAttackParams:
    data = _load_json(args.config)
    known = {f.name for f in fields(evaluation.EvalAttackParams)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown evaluation attack keys: {sorted(unknown)}")
    for name in known:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    return evaluation.EvalAttackParams(**data)


def _train_split(data: Path) -> Path:
    data = Path(data)
    if not data.is_dir():
        raise ConfigError(f"dataset directory not found: {data}")
    return data / "train" if (data / "train").is_dir() else data


def _load_dir(directory, side: int | None) -> tuple[list[Path], torch.Tensor]:
    paths = imaging.list_images(directory)
    if not paths:
        raise ContractError(f"no images in {directory}")
    return paths, imaging.load_stack(paths, side) if side else torch.stack([imaging.load_image(p) for p in paths])


def _eval_images(args, side: int) -> tuple[torch.Tensor, torch.Tensor]:
    _, images = _load_dir(args.eval_dir, side)
    if len(images) < 2:
        raise ContractError("evaluation needs at least two images")
    return evaluation.make_pairs(images, args.seed or 0)


def _parse_param(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"--param expects key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


# ---------------------------------------------------------------- commands

def cmd_make_dataset(args, out: Path) -> dict:
    synth.write_dataset(out, args.n_train, args.n_eval, args.side, args.seed or 0)
    return {"n_train": args.n_train, "n_eval": args.n_eval, "side": args.side}


def cmd_train(args, out: Path) -> dict:
    cfg = _train_config(args)
    _, images = _load_dir(_train_split(args.data), cfg.side)
    cfg.save(out / "config.json")
    train(cfg, images, out)
    return cfg.to_dict()


def cmd_embed(args, out: Path) -> dict:
    model, _ = load_checkpoint(args.checkpoint)
    side = model.embedder_spec.side
    cover = imaging.load_image(args.cover, side)
    secret = imaging.load_image(args.secret, side)
    with torch.no_grad():
        q = model.embed(secret[None])[0]
    container = imaging.quantize((cover + q).clamp(0, 1))
    imaging.save_image(container, out / "container.png")
    torch.save(q, out / "feature_map.pt")
    imaging.save_image((0.5 + q / (2 * model.strength)).clamp(0, 1), out / "feature_map.png")
    spectral.write_spectra_csv(out / "container_spectrum.csv",
                               {"cover": spectral.azimuthal_integral(cover),
                                "container": spectral.azimuthal_integral(container)}, reference="cover")
    row = {"psnr_db": metrics.psnr(cover, container), "ssim": metrics.ssim(cover, container),
           "out_of_band": float(spectral.out_of_band_fraction(q, spectral.scaled_cutoff(args.d, side)))}
    write_table([row], list(row), out / "report", args.format)
    return {"checkpoint": str(args.checkpoint), "d": args.d}


def cmd_extract(args, out: Path) -> dict:
    model, _ = load_checkpoint(args.checkpoint)
    side = model.embedder_spec.side
    image = imaging.load_image(args.image, side)
    with torch.no_grad():
        recovered = model.retrieve(image[None])[0]
    imaging.save_image(recovered, out / "recovered.png")
    row = {"mean_intensity": float(recovered.mean())}
    if args.reference:
        ref = imaging.load_image(args.reference, side)
        row["ncc"] = evaluation._safe_ncc(ref, recovered)
        row["valid"] = int(row["ncc"] > metrics.NCC_THRESHOLD)
        print(f"ncc={row['ncc']:.4f} valid={bool(row['valid'])}")
    print(f"mean_intensity={row['mean_intensity']:.4f}")
    write_table([row], list(row), out / "report", args.format)
    return {"checkpoint": str(args.checkpoint)}


def cmd_attack(args, out: Path) -> dict:
    image = imaging.load_image(args.image, args.side)
    if args.plan:
        plan = AttackPlan.from_json(Path(args.plan).read_text().splitlines()[0])
    else:
        given = dict(_parse_param(p) for p in args.param)
        params = {}
        if args.type in ORDER:
            cfg = AttackConfig(include_geometric_in_training=True)
            gen = imaging.seeded_generator(args.seed or 0, 21)
            params = sample_params(args.type, cfg, image.shape[-1], gen)
        elif args.type == "poisson":
            params = {"seed": args.seed or 0}
        params.update(given)
        plan = AttackPlan([AttackStep(args.type, True, params)])
    try:
        attacked = imaging.quantize(replay(image, plan, args.mode))
    except KeyError as exc:
        raise ConfigError(f"attack {args.type!r} needs parameter {exc}") from exc
    imaging.save_image(attacked, out / "attacked.png")
    (out / "plan.jsonl").write_text(plan.to_json() + "\n")
    return {"plan": json.loads(plan.to_json()), "mode": args.mode}


def cmd_evaluate(args, out: Path) -> dict:
    model, _ = load_checkpoint(args.checkpoint)
    params = _eval_params(args)
    covers, secrets = _eval_images(args, model.embedder_spec.side)
    protocols = ("fidelity", "robustness", "specificity") if args.protocol == "all" else (args.protocol,)
    reports = {}
    for name in protocols:
        if name == "fidelity":
            reports[name] = evaluation.fidelity(model, covers, secrets)
        elif name == "robustness":
            reports[name] = evaluation.robustness(model, covers, secrets, params, args.seed or 0)
        else:
            reports[name] = evaluation.specificity(model, covers, secrets, seed=args.seed or 0)
    summary = []
    for name, groups in reports.items():
        for group, rep in groups.items():
            summary.append({"protocol": name, "group": group, "n": len(rep.rows), **rep.aggregate()})
            if args.format == "csv":
                rep.to_csv(out / f"{name}_{group}.csv")
    if args.format == "json":
        full = {"attack_params": params.to_dict(),
                "protocols": {n: {g: r.to_dict() for g, r in gs.items()} for n, gs in reports.items()}}
        (out / "report.json").write_text(json.dumps(full, indent=2, allow_nan=True) + "\n")
    else:
        write_table(summary, SUMMARY_COLUMNS, out / "summary", "csv")
    if args.save_images:
        containers, _ = evaluation.embed_all(model, covers, secrets)
        for i, (c, x) in enumerate(zip(covers, containers)):
            imaging.save_image(c, out / "covers" / f"{i:05d}.png")
            imaging.save_image(x, out / "containers" / f"{i:05d}.png")
    for row in summary:
        print(f"{row['protocol']:>11} {row['group']:<14} ncc={row['mean_ncc']:.4f} sr={row['sr']:.3f} "
              f"psnr={row['mean_psnr']:.2f}")
    return {"checkpoint": str(args.checkpoint), "protocol": args.protocol, "attack_params": params.to_dict()}


def cmd_freq_analysis(args, out: Path) -> dict:
    spectra = {}
    for directory in args.dirs:
        name = Path(directory).name or str(directory)
        if name in spectra:
            raise ConfigError(f"duplicate directory name {name!r}")
        _, images = _load_dir(directory, args.side)
        spectra[name] = spectral.average_spectrum(images, args.normalize)
    if len({len(s.values) for s in spectra.values()}) != 1:
        raise ContractError("all directories must hold images of one size (use --side)")
    names = list(spectra)
    reference = names[0] if len(names) > 1 else None
    if len(names) == 1:
        spectra[names[0]].to_csv(out / "spectrum.csv")
    else:
        spectral.write_spectra_csv(out / "spectrum.csv", spectra, reference)
    line_plot({k: (list(v.radii), list(v.values)) for k, v in spectra.items()}, out / "spectrum.svg",
              title="Azimuthal integral", xlabel="radius", ylabel="energy", logy=True)
    result = {"reference": reference}
    if reference is not None:
        result["band_deviation"] = {k: spectral.band_deviation(spectra[k], spectra[reference], args.band)
                                    for k in names[1:]}
        for k, v in result["band_deviation"].items():
            print(f"{k}: top band deviation {v:.4f}")
        (out / "band_deviation.json").write_text(json.dumps(result, indent=2) + "\n")
    return {"dirs": [str(d) for d in args.dirs], "band": args.band}


def cmd_sweep_filters(args, out: Path) -> dict:
    model, _ = load_checkpoint(args.checkpoint)
    side = model.embedder_spec.side
    covers, secrets = _eval_images(args, side)
    if args.d_frac:
        d_list = [f * spectral.r_max(side) for f in args.d_frac]
    elif args.d:
        d_list = list(args.d)
    else:
        d_list = [spectral.scaled_cutoff(d, side) for d in TABLE4_D]
    rows = evaluation.sweep_filters(model, covers, secrets, d_list)
    write_table(rows, SWEEP_COLUMNS, out / "sweep", args.format)
    series = {}
    for kind in ("lowpass", "highpass"):
        sel = [r for r in rows if r["filter"] == kind]
        series[kind] = ([r["d"] for r in sel], [r["sr"] for r in sel])
    line_plot(series, out / "sweep.svg", title="Filter attacks", xlabel="cutoff radius d", ylabel="SR")
    for r in rows:
        print(f"{r['filter']:>8} d={r['d']:7.2f} ncc={r['mean_ncc']:.4f} sr={r['sr']:.3f}")
    return {"checkpoint": str(args.checkpoint), "d": d_list}


def cmd_residue(args, out: Path) -> dict:
    a = imaging.load_image(args.a)
    b = imaging.load_image(args.b)
    if a.shape != b.shape:
        raise ContractError(f"images differ in size: {tuple(a.shape)} vs {tuple(b.shape)}")
    imaging.save_image(metrics.residue(a, b, args.gain), out / "residue.png")
    return {"gain": args.gain}


def _ablation_row(name, model, covers, secrets, cutoff) -> dict:
    reports = evaluation.fidelity(model, covers, secrets)
    fid, rec = reports["container"].aggregate(), reports["secret"].aggregate()
    clean = evaluation.compare(secrets, evaluation.retrieve_all(model, covers)).aggregate()
    return {"variant": name, "container_psnr": fid["mean_psnr"], "container_sr": rec["sr"],
            "clean_mean_ncc": clean["mean_ncc"], "clean_sr": clean["sr"],
            "out_of_band": evaluation.feature_band_fraction(model, secrets, cutoff)}


def cmd_ablate(args, out: Path) -> dict:
    cfg = _train_config(args)
    _, images = _load_dir(_train_split(args.data), cfg.side)
    if args.knockout is None:
        cfg.save(out / "config.json")
        train(cfg, images, out)
        return cfg.to_dict()
    eval_dir = args.eval_dir or Path(args.data) / "eval"
    args.eval_dir = eval_dir
    covers, secrets = _eval_images(args, cfg.side)
    if args.baseline:
        full, _ = load_checkpoint(args.baseline)
    else:
        full, _ = train(cfg, images, out / "full")
    knocked = TrainConfig.from_dict({**cfg.to_dict(), KNOCKOUTS[args.knockout]: False})
    variant, _ = train(knocked, images, out / f"no_{args.knockout}")
    rows = [_ablation_row("full", full, covers, secrets, cfg.cutoff),
            _ablation_row(f"no_{args.knockout}", variant, covers, secrets, cfg.cutoff)]
    write_table(rows, ABLATION_COLUMNS, out / "ablation", args.format)
    for r in rows:
        print(f"{r['variant']:>18} psnr={r['container_psnr']:.2f} sr={r['container_sr']:.3f} "
              f"clean_ncc={r['clean_mean_ncc']:.4f} oob={r['out_of_band']:.4f}")
    return {**cfg.to_dict(), "knockout": args.knockout}


COMMANDS = {
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "embed": cmd_embed,
    "extract": cmd_extract,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "freq-analysis": cmd_freq_analysis,
    "sweep-filters": cmd_sweep_filters,
    "residue": cmd_residue,
    "ablate": cmd_ablate,
}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="report format")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lfstego", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", parents=[common], help="write a synthetic image dataset")
    p.add_argument("--n-train", type=int, default=400)
    p.add_argument("--n-eval", type=int, default=100)
    p.add_argument("--side", type=int, default=64)

    def train_flags(p):
        p.add_argument("--data", required=True, type=Path, help="image directory (uses <data>/train if present)")
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        p.add_argument("--epochs", type=int)
        p.add_argument("--steps-per-epoch", type=int)

    p = sub.add_parser("train", parents=[common], help="train embedder and retriever jointly")
    train_flags(p)

    p = sub.add_parser("embed", parents=[common], help="hide a secret image in a cover")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--cover", required=True, type=Path)
    p.add_argument("--secret", required=True, type=Path)
    p.add_argument("--d", type=float, default=50.0, help="cutoff at 256 px for the out-of-band figure")

    p = sub.add_parser("extract", parents=[common], help="recover a secret from an image")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--reference", type=Path, help="original secret for NCC")

    p = sub.add_parser("attack", parents=[common], help="apply one attack or replay a logged plan")
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--type", choices=ORDER + ("highpass", "poisson"), default="jpeg")
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="attack parameter; unspecified ones are sampled from the training ranges")
    p.add_argument("--plan", type=Path, help="replay the first plan of a JSON-lines log")
    p.add_argument("--mode", choices=("exact", "differentiable"), default="exact")
    p.add_argument("--side", type=int)

    def eval_flags(p):
        p.add_argument("--checkpoint", required=True, type=Path)
        p.add_argument("--eval-dir", required=True, type=Path)

    p = sub.add_parser("evaluate", parents=[common], help="fidelity, robustness and specificity reports")
    eval_flags(p)
    p.add_argument("--protocol", choices=("fidelity", "robustness", "specificity", "all"), default="all")
    p.add_argument("--save-images", action="store_true", help="also write covers/ and containers/")
    p.add_argument("--jpeg-quality", dest="jpeg_quality", type=int)
    p.add_argument("--blur-sigma", dest="blur_sigma", type=float)
    p.add_argument("--blur-kernel", dest="blur_kernel", type=int)
    p.add_argument("--lowpass-frac", dest="lowpass_frac", type=float)
    p.add_argument("--jitter", dest="brightness", type=float, help="brightness strength")
    p.add_argument("--contrast", type=float)
    p.add_argument("--saturation", type=float)
    p.add_argument("--hue", type=float)
    p.add_argument("--crop-scale", dest="crop_scale", type=float)

    p = sub.add_parser("freq-analysis", parents=[common], help="averaged azimuthal spectra of image folders")
    p.add_argument("dirs", nargs="+", type=Path, help="image folders; the first is the reference")
    p.add_argument("--side", type=int)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--band", type=float, default=0.75, help="lower edge of the compared band as a fraction of radius")

    p = sub.add_parser("sweep-filters", parents=[common], help="SR under ideal high- and low-pass filters")
    eval_flags(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--d", type=float, nargs="+", help="cutoff radii in pixels")
    g.add_argument("--d-frac", type=float, nargs="+", help="cutoff radii as fractions of r_max")

    p = sub.add_parser("residue", parents=[common], help="amplified absolute difference of two images")
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    p.add_argument("--gain", type=float, default=10.0)

    p = sub.add_parser("ablate", parents=[common], help="train with one component knocked out and compare")
    train_flags(p)
    p.add_argument("--knockout", choices=sorted(KNOCKOUTS))
    p.add_argument("--eval-dir", type=Path, help="default <data>/eval")
    p.add_argument("--baseline", type=Path, help="checkpoint of an already trained full model")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out or Path(os.environ.get(OUT_ENV, "runs")) / args.command
    start = time.time()
    try:
        with staged_output(out) as tmp:
            config = COMMANDS[args.command](args, tmp)
            write_manifest(tmp, args, config)
    except StegoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    log.info("%s finished in %.1fs, output in %s", args.command, time.time() - start, out)
    print(f"output: {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
