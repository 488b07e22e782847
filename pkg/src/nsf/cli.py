"""``nsf`` command line: dataset synthesis, training, posing, evaluation and benchmarks.

Exit codes: 0 success, 1 user error (bad arguments, missing files, invalid
values), 2 internal error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

logger = logging.getLogger("nsf")

DEFAULT_CONFIG: Dict[str, dict] = {
    "synth": {"n_train": 60, "n_heldout": 10, "jitter": 0.002, "n_keys": 20},
    "canon": {"points_per_frame": 2000},
    "fusion": {"hidden": [128, 128, 128, 128], "n_steps": 2000, "sphere_steps": 300, "lambda_eik": 0.1,
               "lambda_normal": 1.0},
    "nsf": {"feature_dim": 64, "pose_dim": 64, "mesh_resolution": 64},
    "train": {"epochs": 30},
    "finetune": {"frame_stride": 6, "epochs": 40},
    "refine": {"steps": 20, "w_lap": 10.0, "lr": 5e-3},
}


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserError(message)


# -- configuration -----------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: Optional[str], overrides: Sequence[str] = (), seed: Optional[int] = None) -> dict:
    """Defaults, deep-merged with a JSON file, then ``a.b=value`` overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    cfg["seed"] = 0
    if path:
        if not os.path.exists(path):
            raise UserError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UserError(f"{path}: invalid JSON ({exc})") from None
        for key, val in doc.items():
            if isinstance(val, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(val)
            else:
                cfg[key] = val
    for item in overrides:
        if "=" not in item:
            raise UserError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UserError(f"--set {key}: {p} is not a section")
        node[parts[-1]] = _parse_value(text)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def _train_config(cfg: dict, **extra):
    from .train import TrainConfig

    return TrainConfig.from_dict({"seed": cfg["seed"], **cfg.get("train", {}), **extra})


# -- shared loaders -------------------------------------------------------------------------

def _rigs(dataset, subjects):
    from .surface_field import SubjectRig

    return {s: SubjectRig(dataset.subjects[s].skeleton, dataset.subjects[s].skinning) for s in subjects}


def _fusion_frames(dataset, cfg) -> Dict[str, List[int]]:
    m = dataset.manifest
    frames = {s: dataset.train_frames for s in m.get("train_subjects", m["subjects"])}
    ft = m.get("finetune_subject")
    if ft:
        frames[ft] = dataset.train_frames[::int(cfg["finetune"]["frame_stride"])]
    return frames


def _load_model(path):
    from .surface_field import NeuralSurfaceField

    if not os.path.exists(path):
        raise UserError(f"checkpoint not found: {path}")
    return NeuralSurfaceField.load(path)


def _load_dataset(path):
    from .synth import load_dataset

    if not os.path.isdir(path):
        raise UserError(f"dataset directory not found: {path}")
    return load_dataset(path)


def _subject(model, sid):
    if sid not in model.features_:
        raise UserError(f"unknown subject {sid!r}; checkpoint has {sorted(model.features_)}")
    return sid


def _mesh_at(model, subject, res):
    from .extract import extract_fusion_mesh

    if res is None or int(res) == model.mesh_resolution:
        return model.meshes_[subject]
    return extract_fusion_mesh(model.fusion_, subject, int(res))


def _prepare(dataset, subjects_frames, cfg, fusion):
    from .train import attach_projection, prepare_batches

    out = []
    for sid, frames in subjects_frames.items():
        out += prepare_batches(dataset, [sid], frames, int(cfg["canon"]["points_per_frame"]), cfg["seed"])
    return attach_projection(out, fusion) if fusion is not None else out


# -- subcommands ------------------------------------------------------------------------------

def cmd_synth(args, cfg):
    from .synth import default_subject_specs, write_dataset

    s = cfg["synth"]
    specs = default_subject_specs(s.get("subjects"))
    m = write_dataset(args.out, specs, n_train=int(s["n_train"]), n_heldout=int(s["n_heldout"]),
                      jitter=float(s["jitter"]), seed=cfg["seed"], n_keys=int(s["n_keys"]))
    print(f"wrote {len(m['subjects'])} subjects to {args.out}")


def cmd_train_fusion(args, cfg):
    from .fusion import FusionShape, fusion_state
    from .autodiff import save_tensors
    from .train import pooled_canonical

    ds = _load_dataset(args.data)
    frames = _fusion_frames(ds, cfg)
    batches = _prepare(ds, frames, cfg, None)
    params = {**cfg["fusion"], "seed": cfg["seed"]}
    params["hidden"] = tuple(params["hidden"])
    model = FusionShape(**params).fit(pooled_canonical(batches))
    save_tensors(args.out, fusion_state(model))
    print(f"fusion model for {', '.join(model.subjects_)} saved to {args.out}")


def cmd_extract(args, cfg):
    from .autodiff import load_tensors
    from .extract import extract_fusion_mesh
    from .fusion import fusion_from_state
    from .io import save_mesh

    if not os.path.exists(args.ckpt):
        raise UserError(f"checkpoint not found: {args.ckpt}")
    fusion = fusion_from_state(load_tensors(args.ckpt))
    if args.subject not in fusion.subjects_:
        raise UserError(f"unknown subject {args.subject!r}")
    mesh = extract_fusion_mesh(fusion, args.subject, args.res)
    save_mesh(args.out, mesh)
    print(f"{mesh.n_vertices} vertices, {mesh.n_faces} faces -> {args.out}")


def cmd_train_nsf(args, cfg):
    from .autodiff import load_tensors
    from .fusion import fusion_from_state
    from .surface_field import NeuralSurfaceField
    from .train import train_nsf

    ds = _load_dataset(args.data)
    if not os.path.exists(args.fusion):
        raise UserError(f"fusion checkpoint not found: {args.fusion}")
    fusion = fusion_from_state(load_tensors(args.fusion))
    subjects = args.subjects or ds.manifest.get("train_subjects", ds.manifest["subjects"])
    batches = _prepare(ds, {s: ds.train_frames for s in subjects}, cfg, fusion)
    nsf_params = {**cfg["nsf"], "seed": cfg["seed"]}
    model = NeuralSurfaceField(**nsf_params).initialize(fusion, _rigs(ds, subjects))
    tcfg = _train_config(cfg, log_path=args.log)
    train_nsf(model, batches, tcfg)
    model.save(args.out)
    print(f"model for {', '.join(subjects)} saved to {args.out}")


def cmd_finetune(args, cfg):
    from .train import finetune_subject

    ds = _load_dataset(args.data)
    model = _load_model(args.ckpt)
    sid = args.subject or ds.manifest.get("finetune_subject")
    if not sid or sid not in ds.subjects:
        raise UserError("no fine-tuning subject given")
    if sid not in model.fusion_.subjects_:
        raise UserError(f"fusion model has no shape for {sid!r}")
    frames = ds.train_frames[::int(cfg["finetune"]["frame_stride"])]
    model.add_subject(sid, _rigs(ds, [sid])[sid])
    batches = _prepare(ds, {sid: frames}, cfg, model.fusion_)
    finetune_subject(model, sid, batches, _train_config(cfg, log_path=args.log), epochs=int(cfg["finetune"]["epochs"]))
    model.save(args.out)
    print(f"fine-tuned {sid} on {len(frames)} frames -> {args.out}")


def _pose_of(args, ds, sid):
    seq = ds.subjects[sid]
    if not 0 <= args.frame < len(seq.poses):
        raise UserError(f"frame {args.frame} out of range")
    return seq.poses[args.frame]


def cmd_reconstruct(args, cfg):
    from .io import save_mesh

    ds = _load_dataset(args.data)
    model = _load_model(args.ckpt)
    sid = _subject(model, args.subject)
    mesh = model.pose_mesh(sid, _mesh_at(model, sid, args.res), _pose_of(args, ds, sid), deform=not args.no_deform)
    save_mesh(args.out, mesh)
    print(f"frame {args.frame}: {mesh.n_vertices} vertices -> {args.out}")


def cmd_animate(args, cfg):
    from .extract import EXTRACTION_COUNTER, MeshCache, extract_fusion_mesh
    from .io import save_ply
    from .skeleton import load_pose_sequence

    model = _load_model(args.ckpt)
    sid = _subject(model, args.subject)
    if not os.path.exists(args.poses):
        raise UserError(f"pose file not found: {args.poses}")
    skel, poses, _ = load_pose_sequence(args.poses)
    if skel.n_joints != model.rigs_[sid].skeleton.n_joints:
        raise UserError("pose file skeleton does not match the subject")
    os.makedirs(args.out, exist_ok=True)
    cache = MeshCache(os.path.join(args.out, "cache"))
    before = EXTRACTION_COUNTER["count"]
    canonical = extract_fusion_mesh(model.fusion_, sid, args.res, cache=cache)
    for t, pose in enumerate(poses):
        save_ply(os.path.join(args.out, f"frame_{t:04d}.ply"), model.pose_mesh(sid, canonical, pose))
    n_mc = EXTRACTION_COUNTER["count"] - before
    print(f"{len(poses)} frames at r{args.res} ({canonical.n_vertices} vertices, {n_mc} extraction(s)) -> {args.out}")


def cmd_refine(args, cfg):
    from .io import save_mesh
    from .train import inference_refine

    ds = _load_dataset(args.data)
    model = _load_model(args.ckpt)
    sid = _subject(model, args.subject)
    r = cfg["refine"]
    steps = int(r["steps"]) if args.steps is None else args.steps
    res = inference_refine(model, sid, ds.subjects[sid].cloud(args.frame), _pose_of(args, ds, sid), steps=steps,
                           w_lap=float(r["w_lap"]), lr=float(r["lr"]))
    save_mesh(args.out, res.mesh)
    print(f"objective {res.objective[0]:.6g} -> {res.objective[-1]:.6g} ({res.accepted}/{steps} steps) -> {args.out}")


def cmd_eval(args, cfg):
    from .synth import load_ground_truth
    from .train import evaluate

    ds = _load_dataset(args.data)
    model = _load_model(args.ckpt)
    sid = _subject(model, args.subject)
    frames = args.frames if args.frames else ds.heldout_frames
    seq = ds.subjects[sid]
    rows = evaluate(model, sid, {t: seq.poses[t] for t in frames},
                    {t: load_ground_truth(ds.root, sid, t) for t in frames}, out_csv=args.out,
                    deform=not args.no_deform)
    mean = rows[-1]
    print(f"{len(frames)} frames: CD {mean['cd_cm']:.4f} cm, NC {mean['nc']:.4f}, IoU {mean['iou']:.4f} -> {args.out}")


def cmd_bench(args, cfg):
    from .bench import bench_amortization, features_bench, format_feature_report

    if args.features:
        n = args.vertices
        if n is None and args.ckpt:
            model = _load_model(args.ckpt)
            n = len(model.features_[_subject(model, args.subject)])
        print(format_feature_report(features_bench(6890 if n is None else n)))
        return
    if not args.ckpt:
        raise UserError("bench needs --features or --ckpt")
    model = _load_model(args.ckpt)
    sid = _subject(model, args.subject)
    counts = sorted(set(args.frames))
    for f, r in bench_amortization(model, sid, counts, args.res, seed=cfg["seed"]).items():
        print(f"F={f:<4d} r{r.resolution}: per-frame MC {r.baseline_s:8.2f}s  one MC + posing {r.amortized_s:8.2f}s  "
              f"speedup {r.speedup:6.2f}x")


# -- argument parsing ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nsf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")
        sp.add_argument("--seed", type=int, help="global seed (default from config, else 0)")
        sp.add_argument("--threads", type=int, help="cap BLAS worker threads")
        sp.add_argument("-v", "--verbose", action="store_true")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", cmd_synth, "render the synthetic multi-subject dataset")
    sp.add_argument("--out", required=True)

    sp = add("train-fusion", cmd_train_fusion, "fit fusion shapes from canonicalised training frames")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("extract", cmd_extract, "marching cubes on one subject's fusion shape")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--subject", required=True)
    sp.add_argument("--res", type=int, default=64)
    sp.add_argument("--out", required=True)

    sp = add("train-nsf", cmd_train_nsf, "train surface features and the shared pose decoder")
    sp.add_argument("--data", required=True)
    sp.add_argument("--fusion", required=True)
    sp.add_argument("--subjects", nargs="*")
    sp.add_argument("--log", help="JSON-lines training log")
    sp.add_argument("--out", required=True)

    sp = add("finetune", cmd_finetune, "fit a new subject's features with the decoder frozen")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--subject")
    sp.add_argument("--log")
    sp.add_argument("--out", required=True)

    sp = add("reconstruct", cmd_reconstruct, "posed reconstruction of one dataset frame")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--subject", required=True)
    sp.add_argument("--frame", type=int, required=True)
    sp.add_argument("--res", type=int)
    sp.add_argument("--no-deform", action="store_true", help="fusion shape + skinning only")
    sp.add_argument("--out", required=True)

    sp = add("animate", cmd_animate, "pose one canonical mesh through a pose sequence")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--subject", required=True)
    sp.add_argument("--poses", required=True)
    sp.add_argument("--res", type=int, default=64)
    sp.add_argument("--out", required=True)

    sp = add("refine", cmd_refine, "inference-time feature refinement against one observation")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--subject", required=True)
    sp.add_argument("--frame", type=int, required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "metrics against evaluation meshes (CSV)")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--subject", required=True)
    sp.add_argument("--frames", type=int, nargs="*")
    sp.add_argument("--no-deform", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("bench", cmd_bench, "feature-count table or amortised-extraction timing")
    sp.add_argument("--features", action="store_true")
    sp.add_argument("--vertices", type=int)
    sp.add_argument("--ckpt")
    sp.add_argument("--subject", default="s0")
    sp.add_argument("--frames", type=int, nargs="+", default=[1, 10, 60])
    sp.add_argument("--res", type=int, default=128)
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UserError as exc:
        print(f"nsf: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed)
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                args.fn(args, cfg)
        else:
            args.fn(args, cfg)
    except (UserError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"nsf: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        logger.debug("internal error", exc_info=True)
        print(f"nsf: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
