"""Command line: gen-data, extract, train, assemble-mc, eval, gradcheck.

Every command writes only under ``--out`` and leaves a ``manifest.json`` plus
the resolved ``config.txt`` there; ``--config <out>/config.txt`` reruns it.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, parse_overrides, resolve
from .ctm import window_histograms, write_ctm
from .data import ReidDataset, SyntheticSpec, generate_synthetic, load_directory, load_image
from .evaluate import TrialResult, cmc_from_scores, gnuplot_script, mean_curve, model_scorer, run_trials
from .gradcheck import layer_checks, variant_check
from .model import PPMN, Views, assemble_mc, assemble_mc_from_checkpoints
from .params import CheckpointError, load_checkpoint, save_checkpoint
from .pyramid import dump_maps
from .train import TrainResult, TrainingDiverged, train

GRAD_TOLERANCE = 1e-4


class CliError(Exception):
    pass


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(f.relative_to(path)).encode())
            h.update(f.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _within(out: Path, target: Path) -> Path:
    target = target if target.is_absolute() else out / target
    try:
        target.resolve().relative_to(out.resolve())
    except ValueError:
        raise CliError(f"path {target} is outside the output directory {out}") from None
    return target


def _write_run_files(out: Path, command: str, cfg: RunConfig, inputs: dict[str, Path],
                     outputs: list[Path]) -> None:
    (out / "config.txt").write_text(cfg.to_text())
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.train.seed,
        "config": cfg.to_text().splitlines(),
        "inputs": {k: {"path": str(v), "sha256": _digest(v)} for k, v in inputs.items()},
        "outputs": {str(p.relative_to(out)): _digest(p) for p in outputs},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _dataset(cfg: RunConfig) -> tuple[ReidDataset, dict[str, Path]]:
    if cfg.data.data:
        root = Path(cfg.data.data)
        return load_directory(root), {"data": root}
    spec = SyntheticSpec(n_identities=cfg.data.n_identities, seed=cfg.data.data_seed)
    return generate_synthetic(spec), {}


def _train_variant(cfg: RunConfig, train_set: ReidDataset, seed: int) -> tuple[PPMN, list]:
    """Train the configured variant; MC trains both channels first, then the fused head."""
    tcfg = cfg.train
    if cfg.model.variant != "mc":
        model = PPMN(cfg.model, seed=seed)
        return model, train(model, train_set, tcfg).trace
    sc = PPMN(dataclasses.replace(cfg.model, variant="sc"), seed=seed)
    train(sc, train_set, tcfg)
    ctm = PPMN(dataclasses.replace(cfg.model, variant="ctm"), seed=seed)
    train(ctm, train_set, tcfg)
    mc = assemble_mc(sc, ctm, seed=seed)
    return mc, train(mc, train_set, tcfg).trace


def cmd_gen_data(args, cfg: RunConfig, out: Path) -> int:
    spec = SyntheticSpec(n_identities=cfg.data.n_identities, seed=cfg.data.data_seed)
    ds = generate_synthetic(spec)
    written = ds.save(out / "images")
    _write_run_files(out, "gen-data", cfg, {}, written)
    print(f"wrote {len(written)} images for {len(ds.identities)} identities to {out / 'images'}")
    return 0


def cmd_extract(args, cfg: RunConfig, out: Path) -> int:
    written = []
    inputs = {}
    for k, name in enumerate(args.images):
        src = Path(name)
        ctm = window_histograms(load_image(src))
        dst = out / f"{src.stem}.ctm"
        write_ctm(dst, ctm)
        written.append(dst)
        inputs[f"image{k}"] = src
    _write_run_files(out, "extract", cfg, inputs, written)
    for p in written:
        print(p)
    return 0


def _save_model(out: Path, model: PPMN, trace, cfg: RunConfig) -> list[Path]:
    ckpt = out / "model.ckpt"
    save_checkpoint(model.store, ckpt)
    trace_path = out / "loss.csv"
    TrainResult(list(trace)).write_trace(trace_path)
    return [ckpt, trace_path]


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    ds, inputs = _dataset(cfg)
    train_set, _ = ds.split(cfg.data.n_train_ids, cfg.data.split_seed)
    model, trace = _train_variant(cfg, train_set, cfg.train.seed)
    written = _save_model(out, model, trace, cfg)
    _write_run_files(out, "train", cfg, inputs, written)
    last = trace[-1][2] if trace else float("nan")
    print(f"trained {cfg.model.variant} for {len(trace)} iterations, final loss {last:.6g}")
    return 0


def cmd_assemble_mc(args, cfg: RunConfig, out: Path) -> int:
    cfg = RunConfig(dataclasses.replace(cfg.model, variant="mc"), cfg.train, cfg.data)
    mc = assemble_mc_from_checkpoints(cfg.model, args.sc_checkpoint, args.ctm_checkpoint, seed=cfg.train.seed)
    inputs = {"sc_checkpoint": Path(args.sc_checkpoint), "ctm_checkpoint": Path(args.ctm_checkpoint)}
    trace = []
    if cfg.train.max_iter > 0 or (cfg.train.hnm and cfg.train.hnm_iters > 0):
        ds, data_inputs = _dataset(cfg)
        inputs.update(data_inputs)
        train_set, _ = ds.split(cfg.data.n_train_ids, cfg.data.split_seed)
        trace = train(mc, train_set, cfg.train).trace
    written = _save_model(out, mc, trace, cfg)
    _write_run_files(out, "assemble-mc", cfg, inputs, written)
    print(f"assembled MC-PPMN, head trained for {len(trace)} iterations")
    return 0


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    ds, inputs = _dataset(cfg)
    trials = args.trials if args.trials is not None else cfg.data.trials
    if trials < 1:
        raise CliError("--trials must be at least 1")
    written = []
    if args.checkpoint:
        model = PPMN(cfg.model, seed=cfg.train.seed)
        load_checkpoint(model.store, args.checkpoint)
        inputs["checkpoint"] = Path(args.checkpoint)
        _, test_set = ds.split(cfg.data.n_train_ids, cfg.data.split_seed)
        ids, probes, gallery = test_set.probe_gallery()
        scores = model.score_matrix(Views.from_images(probes, model.channels),
                                    Views.from_images(gallery, model.channels))
        size = cfg.data.gallery_size or len(ids)
        if not 1 <= size <= len(ids):
            raise CliError(f"gallery_size {size} exceeds the {len(ids)} test identities")
        curves = []
        for t in range(trials):
            pick = np.sort(np.random.default_rng(cfg.data.split_seed + t).permutation(len(ids))[:size])
            sub = [ids[k] for k in pick]
            curves.append(cmc_from_scores(scores[np.ix_(pick, pick)], sub, sub))
        result = TrialResult(mean_curve(curves), curves)
        if args.dump_maps:
            target = _within(out, Path(args.dump_maps))
            fwd = model.forward(Views.from_images(probes[:1], model.channels),
                                Views.from_images(gallery[:1], model.channels))
            for ch, maps in fwd.maps.items():
                written += dump_maps(maps, target, f"{ch}_probe{ids[0]}_gallery{ids[0]}")
    else:
        def factory(train_set, trial_seed):
            model, _ = _train_variant(cfg, train_set, cfg.train.seed + trial_seed)
            return model_scorer(model)
        result = run_trials(factory, ds, cfg.data.n_train_ids, trials, cfg.data.split_seed)
    written += result.write(out / "cmc")
    script = out / "cmc" / "plot.gp"
    script.write_text(gnuplot_script([p.name for p in written if p.suffix == ".csv"]))
    written.append(script)
    _write_run_files(out, "eval", cfg, inputs, written)
    m = result.mean
    ks = [k for k in (1, 5, 10) if k <= len(m.rates)]
    print(" ".join(f"rank-{k}={m.rank(k):.4f}" for k in ks) + f" trials={len(result.curves)}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig, out: Path) -> int:
    rows = [(name, err) for name, err in layer_checks(cfg.train.seed).items()]
    for variant in ("sc", "ctm", "mc"):
        rows.append((f"{variant}_ppmn_pinned", variant_check(variant, cfg.model, seed=cfg.train.seed, pinned=True)))
    if args.raw:
        for variant in ("sc", "ctm", "mc"):
            rows.append((f"{variant}_ppmn_raw", variant_check(variant, cfg.model, seed=cfg.train.seed)))
    report = out / "gradcheck.csv"
    with open(report, "w") as fh:
        fh.write("check,max_rel_error,ok\n")
        for name, err in rows:
            ok = err <= GRAD_TOLERANCE
            fh.write(f"{name},{err!r},{int(ok)}\n")
            print(f"{name:28s} {err:.3e} {'ok' if ok else 'FAIL'}")
    _write_run_files(out, "gradcheck", cfg, {}, [report])
    return 0 if all(err <= GRAD_TOLERANCE for _, err in rows) else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "extract": cmd_extract,
    "train": cmd_train,
    "assemble-mc": cmd_assemble_mc,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="random seed (overrides PPMN_SEED)")
    common.add_argument("--out", required=True, help="output directory; all artifacts land here")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    parser = argparse.ArgumentParser(prog="ppmn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic two-view dataset")
    p = sub.add_parser("extract", parents=[common], help="dump CTM stacks for images")
    p.add_argument("images", nargs="+")
    sub.add_parser("train", parents=[common], help="train the configured variant")
    p = sub.add_parser("assemble-mc", parents=[common], help="build MC-PPMN from channel checkpoints and train its head")
    p.add_argument("--sc-checkpoint", required=True)
    p.add_argument("--ctm-checkpoint", required=True)
    p = sub.add_parser("eval", parents=[common], help="single-shot CMC evaluation")
    p.add_argument("--checkpoint", help="score with this checkpoint instead of retraining per trial")
    p.add_argument("--trials", type=int)
    p.add_argument("--dump-maps", metavar="DIR", help="write correspondence heatmaps (PGM) under --out")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient self-check")
    p.add_argument("--raw", action="store_true",
                   help="also run unpinned full-model checks (expected to hit activation kinks)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args.config, parse_overrides(args.set), seed=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out)
    except (ConfigError, CheckpointError, CliError, TrainingDiverged, ValueError,
            FileNotFoundError, KeyError) as exc:
        kind = type(exc).__name__
        msg = str(exc).replace("\n", " ")
        print(f"error: {args.command}: {kind}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
