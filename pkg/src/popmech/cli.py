"""Command-line front end: ``popmech {gen-sde,gen-boids,train,rollout,eval,report}``.

Exit codes: 0 success, 2 configuration error, 3 data/artifact error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .archive import ArchiveError
from .autodiff import ShapeError
from .config import ConfigError
from .datagen import (DatasetError, SnapshotDataset, estimate_v0, gen_boids, gen_sde, load_dataset, save_dataset,
                      subsample)
from .energy import NonFiniteError
from .evaluation import EvalReport, accel_fn, aggregate_reports, forecast_eval, interpolate_eval, report_emit
from .integrator import IntegratorConfig, MechState, rollout
from .trainer import TrainingError, load_checkpoint, train

log = logging.getLogger("popmech")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.pmk"
LOG_NAME = "train_log.jsonl"


# --- helpers ------------------------------------------------------------------------------------


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _write_provenance(out: Path, command: str, doc: dict, seed: int, inputs: dict | None = None):
    record = {"tool": "popmech", "version": __version__, "command": command, "config_hash": cfgmod.config_hash(doc),
              "seed": seed, "config": doc, "inputs": inputs or {}}
    out.mkdir(parents=True, exist_ok=True)
    (out / "provenance.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _overrides(args, mapping: dict[str, str]) -> dict:
    """Typed overrides from flags that were actually given (``None`` means not given)."""
    out = {}
    for attr, dotted in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            out[dotted] = v
    return out


def _load_config(args, mapping: dict[str, str]) -> dict:
    return cfgmod.load(args.config, _overrides(args, mapping), args.set or [])


def _seed_list(args, doc) -> list[int]:
    if getattr(args, "seeds", None):
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds: expected comma-separated integers, got {args.seeds!r}") from None
    return [doc["seed"]]


def _fan_out(fn, jobs: list[tuple]):
    """Run ``fn(*job)`` for each job, on up to POPMECH_THREADS worker processes."""
    cap = int(os.environ.get("POPMECH_THREADS", os.cpu_count() or 1))
    workers = max(1, min(cap, len(jobs)))
    if workers == 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


def _out_dirs(out: Path, seeds: list[int]) -> list[Path]:
    return [out] if len(seeds) == 1 else [out / f"seed_{s}" for s in seeds]


def _load_bundle(path) -> SnapshotDataset:
    if path is None:
        raise DatasetError("--data is required")
    return load_dataset(path)


# --- generation ---------------------------------------------------------------------------------


def _gen_one(kind: str, doc: dict, seed: int, out: Path) -> str:
    spec = cfgmod.build(doc, kind, seed=seed)
    ds = gen_sde(spec) if kind == "sde" else gen_boids(spec)
    save_dataset(out, ds)
    _write_provenance(out, f"gen-{kind}", doc, seed)
    return str(out)


def cmd_gen(args, kind: str) -> int:
    mapping = {"potential": "sde.potential", "N": f"{kind}.N", "paired": "sde.paired", "seed": "seed",
               "frames": "boids.frames", "forecast_frames": "boids.forecast_frames"}
    doc = _load_config(args, mapping)
    seeds = _seed_list(args, doc)
    out = Path(args.out or Path(doc["output_dir"]) / "data")
    dirs = _out_dirs(out, seeds)
    for d in _fan_out(_gen_one, [(kind, doc, s, d) for s, d in zip(seeds, dirs)]):
        print(d)
    return EXIT_OK


# --- training -----------------------------------------------------------------------------------


def _prepare_data(doc: dict, data_path) -> tuple[SnapshotDataset, np.ndarray]:
    ds = _load_bundle(data_path)
    dsec = cfgmod.build(doc, "data")
    if dsec.subsample:
        ds = subsample(ds, dsec.subsample, seed=0)
    return ds, estimate_v0(ds, dsec.v0_mode)


def _train_one(doc: dict, seed: int, data_path: str, out: Path, resume: bool) -> dict:
    ds, v0 = _prepare_data(doc, data_path)
    energy_cfg = cfgmod.build(doc, "energy", dim=ds.dim)
    train_cfg = cfgmod.build(doc, "train", seed=seed)
    isec = cfgmod.build(doc, "integrator")
    integ = IntegratorConfig(isec.scheme, 1.0, train_cfg.substeps_train)
    out.mkdir(parents=True, exist_ok=True)
    ck = out / CHECKPOINT_NAME
    logp = out / LOG_NAME
    state = None
    if resume:
        state = load_checkpoint(ck)
        log.info("resuming from epoch %d", state.epoch)
    elif logp.exists():
        logp.unlink()
    state = train(ds, v0, energy_cfg, train_cfg, integ, state=state, log_path=logp, checkpoint_path=ck,
                  checkpoint_every=max(1, min(500, train_cfg.epochs // 10 or 1)), progress_every=100)
    _write_provenance(out, "train", doc, seed, {"data": str(data_path),
                                                "data_manifest": _file_digest(Path(data_path) / "manifest.json")})
    summary = {"epochs": state.epoch, "gamma": state.gamma, "blur": state.blur,
               "final_loss": state.loss_history[-1]["loss"] if state.loss_history else None,
               "num_params": state.params.num_params()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def cmd_train(args) -> int:
    doc = _load_config(args, {"epochs": "train.epochs", "seed": "seed"})
    seeds = _seed_list(args, doc)
    out = Path(args.out or doc["output_dir"])
    dirs = _out_dirs(out, seeds)
    if args.data is None:
        raise DatasetError("--data is required")
    for d, summary in zip(dirs, _fan_out(_train_one, [(doc, s, args.data, d, args.resume)
                                                      for s, d in zip(seeds, dirs)])):
        print(f"{d}: epochs={summary['epochs']} gamma={summary['gamma']:.6g} final_loss={summary['final_loss']}")
    return EXIT_OK


# --- rollout / eval -----------------------------------------------------------------------------


def _load_model(path, weights: str):
    path = Path(path)
    if not path.is_file():
        raise ArchiveError(f"{path}: checkpoint not found (expected the {CHECKPOINT_NAME} written by 'train')")
    state = load_checkpoint(path)
    params = state.ema_params if weights == "ema" else state.params
    return params.model(), state.gamma


def _check_dims(model, ds: SnapshotDataset, ck):
    if model.config.dim != ds.dim:
        raise DatasetError(f"checkpoint {ck} was trained on dim {model.config.dim} but the dataset has dim {ds.dim}")


def cmd_rollout(args) -> int:
    doc = _load_config(args, {"substeps": "integrator.substeps", "v0_mode": "data.v0_mode", "weights": "eval.weights"})
    ds, v0 = _prepare_data(doc, args.data)
    esec, isec = cfgmod.build(doc, "eval"), cfgmod.build(doc, "integrator")
    model, gamma = _load_model(args.checkpoint, esec.weights)
    _check_dims(model, ds, args.checkpoint)
    traj = rollout(MechState(ds.snapshots[0], v0, float(ds.times[0])), accel_fn(model), gamma,
                   num_intervals=len(ds) - 1, substeps=isec.substeps, scheme=isec.scheme, times=ds.times)
    pred = SnapshotDataset(ds.dim, ds.times, [s.X.data for s in traj], [s.V.data for s in traj], True, ds.num_train,
                           {"generator": "rollout", "gamma": gamma, "substeps": isec.substeps})
    out = Path(args.out or Path(doc["output_dir"]) / "rollout")
    save_dataset(out, pred)
    _write_provenance(out, "rollout", doc, doc["seed"], {"checkpoint": _file_digest(Path(args.checkpoint))})
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    mapping = {"protocol": "eval.protocol", "v_mode": "eval.v_mode", "v0_mode": "data.v0_mode",
               "substeps": "integrator.substeps", "weights": "eval.weights"}
    doc = _load_config(args, mapping)
    if args.heldout:
        doc = cfgmod.validate(cfgmod.set_path(doc, "eval.heldout", [int(h) for h in args.heldout.split(",")]))
    if args.formats:
        doc = cfgmod.validate(cfgmod.set_path(doc, "eval.formats", args.formats.split(",")))
    ds, v0 = _prepare_data(doc, args.data)
    esec, isec = cfgmod.build(doc, "eval"), cfgmod.build(doc, "integrator")
    model, gamma = _load_model(args.checkpoint, esec.weights)
    _check_dims(model, ds, args.checkpoint)
    integ = IntegratorConfig(isec.scheme, 1.0, isec.substeps)
    out = Path(args.out or Path(doc["output_dir"]) / "eval")
    written = []
    if esec.protocol in ("forecast", "both"):
        train_ds, test_ds = ds.split()
        rep = forecast_eval(model, train_ds, test_ds, v0, integ, gamma, resample=esec.resample, seed=doc["seed"])
        rep.meta["weights"] = esec.weights
        written += report_emit(rep, out, esec.formats)
        print(json.dumps({"protocol": "forecast", **rep.summary()}))
    if esec.protocol in ("interpolate", "both"):
        train_ds, _ = ds.split()
        held = esec.heldout or list(range(1, len(train_ds) - 1))
        reps = [interpolate_eval(model, train_ds, h, esec.v_mode, integ, gamma, v0=v0) for h in held]
        merged = EvalReport("interpolate", [], [], [], [], esec.v_mode,
                            meta={"heldout": held, "gamma": gamma, "weights": esec.weights})
        for r in reps:
            merged.times += r.times
            merged.labels += r.labels
            merged.w1 += r.w1
            merged.exact += r.exact
            merged.predicted += r.predicted
            merged.observed += r.observed
        written += report_emit(merged, out, esec.formats)
        print(json.dumps({"protocol": "interpolate", "v_mode": esec.v_mode, **merged.summary()}))
    _write_provenance(out, "eval", doc, doc["seed"], {"checkpoint": _file_digest(Path(args.checkpoint)),
                                                      "data_manifest": _file_digest(Path(args.data) / "manifest.json")})
    return EXIT_OK


def _report_from_json(path: Path) -> EvalReport:
    d = json.loads(path.read_text(encoding="utf-8"))
    e = d["entries"]
    return EvalReport(d["protocol"], [x["time"] for x in e], [x["label"] for x in e], [x["w1"] for x in e],
                      [x["exact"] for x in e], d.get("v_mode"), d["flags"]["divergence_nonconverged"], d.get("meta", {}))


def cmd_report(args) -> int:
    by_protocol: dict[str, list[EvalReport]] = {}
    for root in args.runs:
        root = Path(root)
        files = sorted(root.rglob("*_summary.json")) if root.is_dir() else [root]
        if not files:
            raise DatasetError(f"{root}: no *_summary.json eval reports found")
        for f in files:
            rep = _report_from_json(f)
            by_protocol.setdefault(rep.protocol, []).append(rep)
    result = {p: aggregate_reports(reps) for p, reps in by_protocol.items()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "aggregate.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    lines = ["protocol,label,mean_of_means,stderr,pooled_mean,num_seeds"]
    for p, labs in result.items():
        for lab, agg in labs.items():
            lines.append(f"{p},{lab},{agg['mean_of_means']!r},{agg['stderr']!r},{agg['pooled_mean']!r},{agg['num_seeds']}")
    (out / "aggregate.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


# --- parser -------------------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, seeds: bool = False):
    p.add_argument("--config", help="YAML experiment config (defaults apply to missing keys)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config field; VALUE is read as YAML")
    p.add_argument("--out", help="output directory (default: derived from output_dir in the config)")
    p.add_argument("--seed", type=int, help="random seed (config /seed, default 0)")
    if seeds:
        p.add_argument("--seeds", help="comma-separated seeds run as independent jobs in seed_<n>/ subdirectories")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="popmech", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"popmech {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-sde", help="simulate a gradient-flow SDE snapshot dataset", formatter_class=fmt)
    _common(p, seeds=True)
    p.add_argument("--potential", choices=["bohachevsky", "oakley-ohagan", "quadratic", "styblinski-tang",
                                           "wavy-plateau"], help="potential (config default: quadratic)")
    p.add_argument("--N", type=int, help="particles per snapshot (config default: 1000)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--paired", dest="paired", action="store_const", const=True,
                   help="track the same particles at every time (config default)")
    g.add_argument("--unpaired", dest="paired", action="store_const", const=False,
                   help="independent samples per time")

    p = sub.add_parser("gen-boids", help="simulate a Boids flock snapshot dataset", formatter_class=fmt)
    _common(p, seeds=True)
    p.add_argument("--N", type=int, help="agents (config default: 1000)")
    p.add_argument("--frames", type=int, help="training frames (config default: 50)")
    p.add_argument("--forecast-frames", dest="forecast_frames", type=int,
                   help="held-out frames after the training ones (config default: 50)")

    p = sub.add_parser("train", help="fit an energy model to a snapshot dataset", formatter_class=fmt)
    _common(p, seeds=True)
    p.add_argument("--data", help="dataset bundle directory")
    p.add_argument("--epochs", type=int, help="total epochs (config default: 1000)")
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.pmk")

    for name, text in (("rollout", "roll a trained model forward and write the trajectory as a bundle"),
                       ("eval", "score a trained model with the forecast and/or interpolation protocol")):
        p = sub.add_parser(name, help=text, formatter_class=fmt)
        _common(p)
        p.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")
        p.add_argument("--data", required=True, help="dataset bundle directory")
        p.add_argument("--substeps", type=int, help="integrator substeps per interval (config default: 5)")
        p.add_argument("--v0-mode", dest="v0_mode", choices=["provided", "zero", "paired-finite-difference"],
                       help="initial velocity source (config default: provided)")
        p.add_argument("--weights", choices=["ema", "live"], help="which weights to use (config default: ema)")
        if name == "eval":
            p.add_argument("--protocol", choices=["forecast", "interpolate", "both"],
                           help="evaluation protocol (config default: forecast)")
            p.add_argument("--heldout", help="comma-separated interior time indices for interpolation "
                                             "(default: every interior training index)")
            p.add_argument("--v-mode", dest="v_mode", choices=["provided", "zero", "carried"],
                           help="velocity at the time before a held-out one (config default: carried)")
            p.add_argument("--formats", help="comma-separated subset of csv,json,svg (config default: csv,json)")

    p = sub.add_parser("report", help="aggregate eval reports over seeds", formatter_class=fmt)
    p.add_argument("runs", nargs="+", help="eval output directories or *_summary.json files")
    p.add_argument("--out", required=True, help="directory for aggregate.json / aggregate.csv")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"gen-sde": lambda a: cmd_gen(a, "sde"), "gen-boids": lambda a: cmd_gen(a, "boids"),
                "train": cmd_train, "rollout": cmd_rollout, "eval": cmd_eval, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, ArchiveError, FileNotFoundError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
