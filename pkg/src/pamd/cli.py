"""Command-line entry point: ``pamd <command> [options]``.

Every command writes into a run directory (``--out``) holding its outputs,
the fully resolved config and a manifest with output checksums. Exit codes:
0 ok, 1 check failure, 2 input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .gradtape import Divergence, fault_injection, op_gradcheck_suite
from .motion import SchemaError, SynthConfig, load_conditioning, load_motion, save_conditioning, save_motion, synth_dance

log = logging.getLogger("pamd")

OK, CHECK_FAILED, INPUT_ERROR, NUMERIC_ERROR = 0, 1, 2, 3
GRAD_TOL = 1e-4

class InputError(Exception):
    pass

# ---------------------------------------------------------------------------
# config handling

def _defaults(*classes, skip=()) -> dict:
    out = {}
    for cls in classes:
        for f in dataclasses.fields(cls):
            if f.name in skip or not isinstance(f.default, (int, float, str, bool, type(None))):
                continue
            out.setdefault(f.name, f.default)
    return out

def _command_defaults(command: str) -> dict:
    from .dancenet import DenoiserConfig
    from .diffusion import LossWeights, TrainConfig
    from .posefield import ManifoldConfig, NdfConfig, NdfTrainConfig

    if command == "gradcheck":
        return {"seed": 0, "eps": 1e-5, "max_entries": 3}
    if command == "synth-data":
        return {"seed": 0, "count": 16, "seconds": 5.0, "fps": 30.0, "n_beats": 0, "feature_dim": 32}
    if command == "train-ndf":
        d = _defaults(ManifoldConfig, NdfTrainConfig, NdfConfig, skip=("time_budget",))
        d.update(eval_samples=400)
        return d
    if command == "train":
        return _defaults(TrainConfig, LossWeights, DenoiserConfig, skip=("feature_dim",))
    if command == "generate":
        return {"seed": 0, "w": 2.0}
    if command == "generate-long":
        return {"seed": 0, "w": 2.0, "slice_len": 150}
    return {"seed": 0}

def resolve_config(command: str, path: str | None, overrides: dict) -> dict:
    cfg = _command_defaults(command)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
        if not isinstance(user, dict):
            raise InputError(f"{path}: config must be a JSON object")
        unknown = sorted(set(user) - set(cfg))
        if unknown:
            raise InputError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(user)
    for k, v in overrides.items():
        if v is not None:
            if k not in cfg:
                raise InputError(f"option --{k.replace('_', '-')} does not apply to {command}")
            cfg[k] = v
    return cfg

def _pick(cfg: dict, cls, **extra):
    names = {f.name for f in dataclasses.fields(cls)}
    return cls(**{k: v for k, v in cfg.items() if k in names and k not in extra}, **extra)

# ---------------------------------------------------------------------------
# run directory

class Run:
    def __init__(self, out: Path, command: str, cfg: dict, inputs: dict):
        self.out, self.command, self.cfg, self.inputs = out, command, cfg, inputs
        self.files: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def write_json(self, name: str, doc) -> None:
        self.path(name).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def finish(self) -> None:
        self.write_json("config.json", self.cfg)
        digests = {n: hashlib.sha256((self.out / n).read_bytes()).hexdigest() for n in sorted(set(self.files))}
        manifest = {"command": self.command, "version": __version__, "inputs": self.inputs, "outputs": digests}
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

def _clip_pairs(directory: str):
    root = Path(directory)
    if not root.is_dir():
        raise InputError(f"not a directory: {directory}")
    motions = sorted(root.glob("*.motion.json"))
    if not motions:
        raise InputError(f"no *.motion.json files in {directory}")
    pairs = []
    for m in motions:
        c = m.with_name(m.name[:-len(".motion.json")] + ".cond.json")
        pairs.append((load_motion(m), load_conditioning(c) if c.exists() else None))
    return pairs

def _require(path: str) -> str:
    if not Path(path).exists():
        raise InputError(f"file not found: {path}")
    return path

# ---------------------------------------------------------------------------
# commands

def cmd_gradcheck(args, cfg) -> int:
    from .diffusion import denoiser_gradcheck

    if args.inject_fault:
        with fault_injection(args.inject_fault, 1.5):
            report = op_gradcheck_suite(cfg["seed"], cfg["eps"])
            report["denoiser"] = denoiser_gradcheck(cfg["seed"], cfg["max_entries"], cfg["eps"])
    else:
        report = op_gradcheck_suite(cfg["seed"], cfg["eps"])
        report["denoiser"] = denoiser_gradcheck(cfg["seed"], cfg["max_entries"], cfg["eps"])
    for kind, err in report.items():
        print(f"{kind:16s} {err:.3e}")
    worst = max(report, key=report.get)
    passed = report[worst] < GRAD_TOL
    print(f"worst: {worst} {report[worst]:.3e} ({'ok' if passed else 'FAIL'})")
    run = Run(Path(args.out), "gradcheck", cfg, {"inject_fault": args.inject_fault})
    run.write_json("gradcheck.json", {"errors": report, "tolerance": GRAD_TOL, "passed": passed,
                                      "worst": worst})
    run.finish()
    return OK if passed else CHECK_FAILED

def cmd_synth_data(args, cfg) -> int:
    run = Run(Path(args.out), "synth-data", cfg, {})
    for i in range(int(cfg["count"])):
        # 0 means a varied tempo: about two beats per second, +-2
        n_beats = int(cfg["n_beats"]) or max(1, round(2 * cfg["seconds"]) - 2 + i % 5)
        sc = SynthConfig(seconds=cfg["seconds"], fps=cfg["fps"], n_beats=n_beats, seed=cfg["seed"] + i,
                         feature_dim=cfg["feature_dim"])
        seq, cond = synth_dance(sc)
        save_motion(seq, run.path(f"clip_{i:03d}.motion.json"))
        save_conditioning(cond, run.path(f"clip_{i:03d}.cond.json"))
    run.finish()
    print(f"wrote {cfg['count']} clips to {args.out}")
    return OK

def cmd_train_ndf(args, cfg) -> int:
    from .posefield import ManifoldConfig, NdfConfig, NdfTrainConfig, build_manifold, evaluate_ndf, train_ndf

    manifold = build_manifold(_pick(cfg, ManifoldConfig))
    model, trace = train_ndf(manifold, _pick(cfg, NdfTrainConfig), _pick(cfg, NdfConfig), log=log.info)
    quality = evaluate_ndf(model, manifold, n=cfg["eval_samples"], seed=cfg["seed"] + 1)
    run = Run(Path(args.out), "train-ndf", cfg, {})
    model.save(run.path("ndf.json"))
    run.path("ndf_loss.csv").write_text("step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(trace)))
    run.write_json("ndf_eval.json", quality)
    run.finish()
    print(json.dumps(quality, sort_keys=True))
    return OK

def cmd_train(args, cfg) -> int:
    from .dancenet import DenoiserConfig
    from .diffusion import LossWeights, TrainConfig, trace_csv, train_denoiser
    from .posefield import NdfModel

    clips = [(m, c) for m, c in _clip_pairs(args.data) if c is not None]
    if not clips:
        raise InputError(f"no motion/conditioning pairs in {args.data}")
    ndf = NdfModel.load(_require(args.ndf)) if args.ndf else None
    if ndf is None and cfg["lambda_pmc"] > 0:
        log.warning("no NDF checkpoint given; the plausibility term is disabled")
    tc = _pick(cfg, TrainConfig, weights=_pick(cfg, LossWeights),
               model=_pick(cfg, DenoiserConfig, feature_dim=clips[0][1].dim))
    model, trace = train_denoiser(clips, tc, ndf, log=log.info)
    run = Run(Path(args.out), "train", cfg, {"data": args.data, "ndf": args.ndf})
    model.save(run.path("denoiser.json"))
    run.path("loss.csv").write_text(trace_csv(trace))
    run.finish()
    print(f"final loss {trace[-1]['total']:.4f} (step 10: {trace[min(10, len(trace) - 1)]['total']:.4f})")
    return OK

def _load_denoiser(path):
    from .dancenet import DenoiserModel
    from .diffusion import make_schedule

    model = DenoiserModel.load(_require(path))
    sched = make_schedule(int(model.extra.get("T", 50)), model.extra.get("schedule", "cosine"))
    return model, sched

def cmd_generate(args, cfg) -> int:
    from .diffusion import sample

    model, sched = _load_denoiser(args.checkpoint)
    cond = load_conditioning(_require(args.conditioning))
    seq = sample(model, cond, sched, float(cfg["w"]), int(cfg["seed"]))
    run = Run(Path(args.out), "generate", cfg, {"checkpoint": args.checkpoint, "conditioning": args.conditioning})
    save_motion(seq, run.path("sample.motion.json"))
    save_conditioning(cond, run.path("sample.cond.json"))
    run.finish()
    print(f"generated {len(seq)} frames")
    return OK

def cmd_generate_long(args, cfg) -> int:
    from .longgen import generate_long

    model, sched = _load_denoiser(args.checkpoint)
    cond = load_conditioning(_require(args.conditioning))
    seq, report = generate_long(model, cond, sched, float(cfg["w"]), int(cfg["seed"]), int(cfg["slice_len"]))
    run = Run(Path(args.out), "generate-long", cfg,
              {"checkpoint": args.checkpoint, "conditioning": args.conditioning})
    save_motion(seq, run.path("long.motion.json"))
    save_conditioning(cond, run.path("long.cond.json"))
    run.write_json("report.json", report)
    run.finish()
    print(json.dumps(report, sort_keys=True))
    return OK

def cmd_evaluate(args, cfg) -> int:
    from .metrics import evaluate_sets
    from .rotor import default_skeleton

    gen = _clip_pairs(args.generated)
    ref = _clip_pairs(args.reference)
    report, notes = evaluate_sets([m for m, _ in gen], [m for m, _ in ref], default_skeleton(),
                                  [c for _, c in gen])
    run = Run(Path(args.out), "evaluate", cfg, {"generated": args.generated, "reference": args.reference})
    run.write_json("metrics.json", {"metrics": report.to_dict(), "notes": notes})
    run.finish()
    print(json.dumps(report.to_dict(), sort_keys=True))
    return OK

def cmd_score_pose(args, cfg) -> int:
    from .posefield import NdfModel
    from .rotor import frame_to_posequat

    model = NdfModel.load(_require(args.ndf))
    seq = load_motion(_require(args.motion))
    dist = model.distances(frame_to_posequat(seq.frames))
    run = Run(Path(args.out), "score-pose", cfg, {"ndf": args.ndf, "motion": args.motion})
    run.path("distances.csv").write_text("frame,distance\n" + "".join(f"{i},{d!r}\n" for i, d in enumerate(dist)))
    run.finish()
    print(f"mean NDF distance {dist.mean():.4f} over {len(dist)} frames")
    return OK

COMMANDS = {
    "gradcheck": cmd_gradcheck, "synth-data": cmd_synth_data, "train-ndf": cmd_train_ndf, "train": cmd_train,
    "generate": cmd_generate, "generate-long": cmd_generate_long, "evaluate": cmd_evaluate,
    "score-pose": cmd_score_pose,
}

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pamd", description="Plausibility-aware music-to-dance diffusion toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, **flags):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of flat config keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=f"runs/{name}", help="run directory (default runs/%(prog)s)")
        p.add_argument("-v", "--verbose", action="store_true")
        if flags.get("w"):
            p.add_argument("--w", type=float, help="guidance weight (default 2)")
        return p

    p = add("gradcheck", "finite-difference check of every op and the toy denoiser")
    p.add_argument("--inject-fault", nargs="?", const="matmul", metavar="OP",
                   help="corrupt one backward rule (default matmul) to prove the check can fail")
    add("synth-data", "write synthetic beat-locked dance clips")
    add("train-ndf", "train the neural distance field on the synthetic pose manifold")
    p = add("train", "train the denoiser on a directory of clips")
    p.add_argument("data", help="directory of *.motion.json / *.cond.json pairs")
    p.add_argument("--ndf", help="NDF checkpoint enabling the plausibility loss")
    p = add("generate", "sample one dance for a conditioning file", w=True)
    p.add_argument("checkpoint")
    p.add_argument("conditioning")
    p = add("generate-long", "sample a long dance from overlapping slices", w=True)
    p.add_argument("checkpoint")
    p.add_argument("conditioning")
    p.add_argument("--slice-len", type=int, help="slice length in frames (default 150)")
    p = add("evaluate", "metrics for a generated set against a reference set")
    p.add_argument("generated")
    p.add_argument("reference")
    p = add("score-pose", "per-frame NDF distances of a motion file")
    p.add_argument("ndf")
    p.add_argument("motion")
    return parser

def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    overrides = {"seed": args.seed, "w": getattr(args, "w", None), "slice_len": getattr(args, "slice_len", None)}
    try:
        cfg = resolve_config(args.command, args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except (InputError, SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INPUT_ERROR
    except (Divergence, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INPUT_ERROR

if __name__ == "__main__":
    sys.exit(main())
