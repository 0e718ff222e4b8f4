"""Command-line pipeline: data generation, training, sampling, interpolation,
completion, modality mapping, evaluation, and gradient checking.

Every run writes a run.json with the fully resolved configuration. Outputs
are deterministic for a fixed seed (run.json timestamps aside); files written
by a failing run are removed.

Seed streams are derived from the master seed with fixed spawn keys:
0 batch order, 1 model init, 2 training noise, 3 task sampling,
4 classifier init, 5 classifier split.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, gradsuite, metrics, synthjoints, tasks, training
from .errors import ContractError
from .model import ModelConfig, SAGNet
from .parallel import resolve_threads, thread_map
from .shapes import load_dataset, save_dataset
from .synthjoints import JOINT_CLASS, generate_joint, random_spec
from .tasks import CompletionProblem
from .training import TrainConfig


def _write_run_json(out_dir: Path, command: str, resolved: dict) -> None:
    payload = {
        "command": command,
        "resolved": resolved,
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _load_model(ckpt: str) -> SAGNet:
    return SAGNet.load(ckpt)


def _mask_pool(samples) -> np.ndarray:
    return np.stack([s.mask.flags for s in samples])


def _export_objs(samples, out_dir: Path, limit: int = 4) -> None:
    for i, s in enumerate(samples[:limit]):
        tasks.export_obj(s, out_dir / f"shape_{i:05d}.obj")


# ---------------------------------------------------------------------------
# Subcommand handlers (each returns the dict recorded in run.json)
# ---------------------------------------------------------------------------


def _cmd_gen_data(args, out_dir: Path) -> dict:
    if args.class_name != JOINT_CLASS:
        raise ContractError(f"only the synthetic '{JOINT_CLASS}' class can be generated")
    threads = resolve_threads(args.threads)

    def build(i: int) -> tuple:
        rng = synthjoints._index_rng(args.seed, i)
        mode = i % synthjoints.N_MODES if args.stratified else None
        spec = random_spec(rng, resolution=args.res, mode=mode)
        return generate_joint(spec), spec.mode

    built = thread_map(build, range(args.count), threads)
    samples = [s for s, _ in built]
    labels = [m for _, m in built]
    save_dataset(samples, out_dir, class_name=JOINT_CLASS)
    synthjoints.write_labels(labels, out_dir)
    return {
        "class": args.class_name, "count": args.count, "seed": args.seed,
        "res": args.res, "stratified": args.stratified, "threads": threads,
    }


def _cmd_train(args, out_dir: Path) -> dict:
    samples = load_dataset(args.data)
    if not samples:
        raise ContractError("training dataset is empty")
    model_config = ModelConfig(
        k=samples[0].k,
        resolution=samples[0].resolution,
        hidden_dim=args.hidden_dim,
        latent_dim=args.latent_dim,
        exchange_iters=args.exchange_iters,
        box_loss_weight=args.box_weight,
        seed=args.seed,
        class_name=samples[0].class_id,
    )
    train_config = TrainConfig(
        iters=args.iters,
        phase1_iters=args.phase1,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        clip_norm=args.clip_norm,
        ramp_iters=args.ramp,
        lambda_max=args.lambda_max,
        eta_max=args.eta_max,
        checkpoint_every=args.checkpoint_every,
        seed=args.seed,
    )
    model = SAGNet(model_config)
    result = training.train(samples, model, train_config, out_dir)
    first, last = result.reports[0], result.reports[-1]
    print(f"trained {args.iters} iters: l_f {first.l_f:.4f} -> {last.l_f:.4f}")
    return {
        "data": str(args.data), "model": json.loads(model_config.to_json()),
        "train": {k: v for k, v in train_config.__dict__.items()},
    }


def _cmd_sample(args, out_dir: Path) -> dict:
    model = _load_model(args.ckpt)
    policy = args.mask_policy
    if policy == "empirical":
        if not args.data:
            raise ContractError("--mask-policy empirical requires --data")
        pool = _mask_pool(load_dataset(args.data))
        samples = tasks.sample_shapes(model, args.count, args.seed, mask_policy=pool)
    else:
        samples = tasks.sample_shapes(model, args.count, args.seed, mask_policy="full")
    save_dataset(samples, out_dir, class_name=model.config.class_name)
    _export_objs(samples, out_dir)
    return {"ckpt": args.ckpt, "count": args.count, "seed": args.seed, "mask_policy": policy}


def _cmd_interpolate(args, out_dir: Path) -> dict:
    model = _load_model(args.ckpt)
    data = load_dataset(args.data)
    seq = tasks.interpolate(model, data[args.index_a], data[args.index_b], args.steps)
    save_dataset([s.binarize() for s in seq], out_dir, class_name=model.config.class_name)
    _export_objs([s.binarize() for s in seq], out_dir, limit=len(seq))
    return {
        "ckpt": args.ckpt, "data": str(args.data), "index_a": args.index_a,
        "index_b": args.index_b, "steps": args.steps,
    }


def _cmd_complete(args, out_dir: Path) -> dict:
    model = _load_model(args.ckpt)
    data = load_dataset(args.data)
    missing = {int(x) for x in args.missing.split(",") if x != ""}
    problem = CompletionProblem(
        partial=data[args.index], missing=missing, iterations=args.iterations
    )
    completed = tasks.complete(model, problem, seed=args.seed)
    save_dataset([completed], out_dir, class_name=model.config.class_name)
    _export_objs([completed], out_dir, limit=1)
    return {
        "ckpt": args.ckpt, "data": str(args.data), "index": args.index,
        "missing": sorted(missing), "iterations": args.iterations, "seed": args.seed,
    }


def _cmd_map(args, out_dir: Path) -> dict:
    model = _load_model(args.ckpt)
    data = load_dataset(args.data)
    if args.limit:
        data = data[: args.limit]
    mapped, box_errors, voxel_errors = [], [], []
    for sample in data:
        out = tasks.map_modality(model, sample, args.direction, iterations=args.iterations,
                                 seed=args.seed)
        mapped.append(out)
        present = [i for i in range(sample.k) if sample.mask.flags[i]]
        if args.direction == "g2s":
            errs = [
                float(np.linalg.norm(out.boxes[i].as_array().astype(np.float64)
                                     - sample.boxes[i].as_array().astype(np.float64)))
                for i in present
            ]
            box_errors.append(float(np.mean(errs)))
        else:
            errs = []
            for i in present:
                ca = metrics.part_point_cloud(out, i)
                cb = metrics.part_point_cloud(sample, i)
                if len(ca) and len(cb):
                    errs.append(metrics.chamfer(ca, cb))
            if errs:
                voxel_errors.append(float(np.mean(errs)))
    save_dataset(mapped, out_dir, class_name=model.config.class_name)
    report = {"direction": args.direction, "iterations": args.iterations, "count": len(mapped)}
    if args.direction == "g2s":
        report["mean_box_error"] = float(np.mean(box_errors))
    else:
        report["mean_chamfer_error"] = float(np.mean(voxel_errors))
    (out_dir / "map_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps(report))
    return report


_EVAL_METRICS = ("cavity", "mmd", "cov", "inception")


def _cmd_eval(args, out_dir: Path) -> dict:
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in wanted:
        if m not in _EVAL_METRICS:
            raise ContractError(f"unknown metric '{m}'; choose from {_EVAL_METRICS}")
    model = _load_model(args.ckpt)
    data = load_dataset(args.data)
    pool = _mask_pool(data)
    generated = tasks.sample_shapes(model, args.count, args.seed, mask_policy=pool)
    train_ref = data[: args.train_limit] if args.train_limit else data
    report: dict = {"count": args.count, "seed": args.seed}
    if "cavity" in wanted:
        cav = metrics.cavity_scores(generated)
        report["cavity"] = {
            "r_o_mean": float(np.mean([r.r_o for r in cav.records])),
            "r_e_mean": float(np.mean([r.r_e for r in cav.records])),
            "r_over": cav.r_over,
        }
        report["cavity_per_sample"] = {
            "r_o": [r.r_o for r in cav.records],
            "r_e": [r.r_e for r in cav.records],
            "r": [r.r for r in cav.records],
            "flags": [r.flags for r in cav.records],
        }
        if args.curves:
            thresholds = np.linspace(0.0, 2.0, 41)
            rows = ["threshold,percent_below"]
            r_vals = cav.r_values
            for t in thresholds:
                rows.append(f"{t:.3f},{100.0 * float((r_vals <= t).mean()):.2f}")
            (out_dir / "cavity_curve.csv").write_text("\n".join(rows) + "\n")
    if "mmd" in wanted or "cov" in wanted:
        mmd, cov = metrics.mmd_cov(generated, train_ref, ground=args.ground,
                                   threads=resolve_threads(args.threads))
        if "mmd" in wanted:
            report["mmd"] = mmd
        if "cov" in wanted:
            report["cov"] = cov
    if "inception" in wanted:
        cls_samples, cls_labels = synthjoints.generate_dataset(
            args.classifier_count, args.seed + 1, resolution=model.config.resolution
        )
        clf = metrics.train_mode_classifier(cls_samples, cls_labels, seed=args.seed)
        report["classifier_accuracy"] = clf.val_accuracy
        report["inception"] = metrics.inception_mode_score(generated, clf)
    (out_dir / "eval_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps({k: v for k, v in report.items() if not k.endswith("per_sample")}))
    return report


def _cmd_grad_check(args, out_dir: Path | None) -> dict:
    results = gradsuite.run_suite(seeds=tuple(range(args.seeds)))
    lines = []
    ok = True
    for name, rep in results:
        worst = max((e.max_rel_error for e in rep.entries), default=0.0)
        status = "PASS" if rep.passed else "FAIL"
        ok = ok and rep.passed
        lines.append(f"{status} {name}: max rel err {worst:.3e} (tol {rep.tolerance:g})")
    text = "\n".join(lines)
    print(text)
    if out_dir is not None:
        (out_dir / "grad_check.txt").write_text(text + "\n")
    if not ok:
        raise ContractError("gradient checks failed")
    return {"seeds": args.seeds, "checks": len(results)}


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


class _SubParser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("formatter_class", argparse.ArgumentDefaultsHelpFormatter)
        super().__init__(*args, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sagnet",
        description="Structure-aware generative modeling of part-based 3D shapes.",
    )
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_SubParser)

    p = sub.add_parser("gen-data", help="generate the synthetic joint dataset")
    p.add_argument("--class", dest="class_name", required=True, choices=[JOINT_CLASS])
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--res", type=int, default=32, help="voxel grid resolution (default 32)")
    p.add_argument("--stratified", action="store_true", help="one mode per sample, round robin")
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--phase1", type=int, default=None, help="phase-1 iterations (default 20%%)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--latent-dim", type=int, default=512)
    p.add_argument("--hidden-dim", type=int, default=512)
    p.add_argument("--exchange-iters", type=int, default=2)
    p.add_argument("--box-weight", type=float, default=10.0)
    p.add_argument("--ramp", type=int, default=60000)
    p.add_argument("--lambda-max", type=float, default=0.8)
    p.add_argument("--eta-max", type=float, default=0.8)
    p.add_argument("--checkpoint-every", type=int, default=1000)

    p = sub.add_parser("sample", help="sample shapes from a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="dataset for the empirical mask pool")
    p.add_argument("--mask-policy", choices=["empirical", "full"], default="full")

    p = sub.add_parser("interpolate", help="interpolate between two dataset samples")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index-a", type=int, required=True)
    p.add_argument("--index-b", type=int, required=True)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("complete", help="restore missing parts of a sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--missing", required=True, help="comma-separated part indices")
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("map", help="geometry->structure or structure->geometry mapping")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--direction", choices=["g2s", "s2g"], required=True)
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--limit", type=int, default=0, help="cap the number of samples (0 = all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", default="cavity", help=f"comma list from {_EVAL_METRICS}")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ground", choices=["cd", "emd"], default="cd")
    p.add_argument("--train-limit", type=int, default=0)
    p.add_argument("--classifier-count", type=int, default=1600)
    p.add_argument("--curves", action="store_true", help="emit threshold/percentage CSV curves")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("grad-check", help="finite-difference checks for all layers")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", default=None)

    return parser


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "interpolate": _cmd_interpolate,
    "complete": _cmd_complete,
    "map": _cmd_map,
    "eval": _cmd_eval,
    "grad-check": _cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    out_dir = None
    created_dir = False
    preexisting: set[Path] = set()
    if getattr(args, "out", None):
        out_dir = Path(args.out)
        created_dir = not out_dir.exists()
        out_dir.mkdir(parents=True, exist_ok=True)
        preexisting = set(out_dir.rglob("*"))
    try:
        resolved = _HANDLERS[args.command](args, out_dir)
        if out_dir is not None:
            _write_run_json(out_dir, args.command, resolved)
        return 0
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        if out_dir is not None:
            if created_dir:
                shutil.rmtree(out_dir, ignore_errors=True)
            else:
                for path in sorted(set(out_dir.rglob("*")) - preexisting, reverse=True):
                    if path.is_dir():
                        shutil.rmtree(path, ignore_errors=True)
                    else:
                        path.unlink(missing_ok=True)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
