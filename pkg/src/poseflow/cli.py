"""Command-line surface tying the pipeline together.

Subcommands: make-corpus, train-toy, sample, filter, score, rank, rmsd,
report.  Every failure exits nonzero with a one-line machine-readable JSON
error record on stderr: exit code 1 for usage errors, 2 for data errors,
3 for numeric failures.  Artifacts are canonical JSON written atomically,
so a replay with the same seed and config hash is byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys

import numpy as np

from .evalkit import (
    AlignmentError,
    pocket_align_base,
    pocket_align_pocketbased,
    success_rates,
    symmetry_rmsd,
)
from .filters import FilterThresholds, check_pose, retain_best
from .flowmatch import AugmentConfig, LossWeights, StageConfig
from .io_formats import (
    DataFormatError,
    PoseEntry,
    PoseSet,
    TOOL_VERSION,
    complex_from_dict,
    complex_to_dict,
    config_hash,
    filter_thresholds_from_config,
    load_json,
    load_run_config,
    poseset_from_dict,
    poseset_to_dict,
    save_json,
)
from .ligand import UnknownElementError
from .sampler import RolloutConfig, RolloutError, staged_inference
from .scorer import PoseScorer, ScorerTrainConfig, compute_pose_features, select_pose, train_scorer
from .toysuite import generate_corpus, sample_scorer_poses
from .velocity_net import (
    ToyVelocityNet,
    TrainConfig,
    TrainingDivergence,
    flatten_protein,
    load_checkpoint,
    save_checkpoint,
    train_stage,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _emit_error(command: str, code: int, message: str) -> None:
    record = {"error": True, "command": command, "code": code, "message": message}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def _atomic_write_text(path: str, text: str) -> None:
    import tempfile

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_complex(path: str):
    return complex_from_dict(load_json(path))


def _load_corpus_dir(path: str):
    if not os.path.isdir(path):
        raise CliError(f"corpus directory not found: {path}", EXIT_DATA)
    records = []
    for name in sorted(os.listdir(path)):
        if name.endswith(".json"):
            records.append(_load_complex(os.path.join(path, name)))
    if not records:
        raise CliError(f"no complex records in {path}", EXIT_DATA)
    return records


def _marker_coords(record):
    site_coords, layout = flatten_protein(record.protein)
    idx = np.concatenate([layout.core_idx, layout.tip_idx]) if len(layout.core_idx) or len(
        layout.tip_idx
    ) else np.zeros(0, dtype=int)
    return site_coords[idx] if len(idx) else None


# ------------------------------------------------------------- subcommands


def cmd_make_corpus(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    corpus = generate_corpus(args.seed, args.n)
    for rec in corpus:
        save_json(os.path.join(args.out, f"{rec.complex_id}.json"), complex_to_dict(rec))
    print(f"wrote {len(corpus)} complexes to {args.out}")
    return EXIT_OK


def _train_velocity(args, cfg, cfg_hash, corpus) -> int:
    stage = int(args.stage)
    flow = cfg["flow"]
    stage_cfg = StageConfig(
        stage=stage,
        sigma_large=flow["sigma_large"],
        sigma_medium=flow["sigma_medium"],
        sigma_small=flow["sigma_small"],
        sigma_rot=flow["sigma_rot"],
        sigma_tor=flow["sigma_tor"],
    )
    aug = AugmentConfig(**cfg["augment"])
    weights = LossWeights(**cfg["loss"])
    tc = cfg["train"]
    train_cfg = TrainConfig(
        steps=tc["steps"], batch_size=tc["batch_size"], lr=tc["lr"],
        optimizer=tc["optimizer"], weight_decay=tc["weight_decay"],
        momentum=tc["momentum"], seed=tc["seed"] + stage,
    )
    net = ToyVelocityNet(
        np.random.default_rng(train_cfg.seed),
        hidden=cfg["net"]["hidden"], n_hidden=cfg["net"]["n_hidden"],
        time_width=cfg["net"]["time_width"],
    )
    curve = train_stage(net, corpus, stage_cfg, aug, weights, train_cfg)
    save_checkpoint(args.out, net.to_state(),
                    extra={"stage": stage, "config_hash": cfg_hash, "tool": TOOL_VERSION})
    if args.curve_out:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(curve):
            writer.writerow([i, f"{loss:.6f}"])
        _atomic_write_text(args.curve_out, buf.getvalue())
    print(f"stage {stage}: {len(curve)} steps, final loss {np.mean(curve[-25:]):.4f}")
    return EXIT_OK


def _train_scorer_cmd(args, cfg, cfg_hash, corpus) -> int:
    sc = cfg["scorer"]
    rng = np.random.default_rng(sc["seed"])
    batches = []
    for rec in corpus:
        if rec.native_coords is None:
            raise CliError(f"complex {rec.complex_id} has no native coordinates", EXIT_DATA)
        prot_coords, prot_elements = rec.protein.heavy_atoms()
        markers = _marker_coords(rec)
        poses = sample_scorer_poses(rec, rng, n_poses=sc["poses_per_complex"])
        feats = np.array([
            compute_pose_features(c, rec.ligand, prot_coords, prot_elements, markers)
            for c in poses
        ])
        rmsds = np.array([
            symmetry_rmsd(c, rec.native_coords, rec.ligand).value for c in poses
        ])
        batches.append((feats, rmsds))
    split = max(1, int(0.8 * len(batches)))
    scorer, info = train_scorer(
        batches[:split], batches[split:] or None, hidden=sc["hidden"],
        config=ScorerTrainConfig(epochs=sc["epochs"], lr=sc["lr"], seed=sc["seed"]),
    )
    save_checkpoint(args.out, scorer.to_state(),
                    extra={"config_hash": cfg_hash, "tool": TOOL_VERSION})
    acc = info.get("val_accuracy", info["train_accuracy"])
    print(f"scorer: pairwise ranking accuracy {acc:.3f}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    cfg, cfg_hash = load_run_config(args.config)
    corpus = _load_corpus_dir(args.corpus)
    if args.stage == "scorer":
        return _train_scorer_cmd(args, cfg, cfg_hash, corpus)
    return _train_velocity(args, cfg, cfg_hash, corpus)


def _load_velocity_net(path: str) -> ToyVelocityNet:
    state = load_checkpoint(path)
    if state.get("kind") != "velocity":
        raise CliError(f"{path} is not a velocity checkpoint", EXIT_DATA)
    return ToyVelocityNet.from_state(state)


def cmd_sample(args) -> int:
    cfg, _ = load_run_config(args.config)
    record = _load_complex(args.complex)
    paths = args.checkpoints.split(",")
    if len(paths) != 3:
        raise CliError("--checkpoints must list three paths (use '-' to skip stage 1)", EXIT_USAGE)
    pocket_center = None
    if args.pocket_center:
        parts = args.pocket_center.split(",")
        if len(parts) != 3:
            raise CliError("--pocket-center must be x,y,z", EXIT_USAGE)
        pocket_center = np.array([float(p) for p in parts])
    nets = []
    for k, p in enumerate(paths):
        if p in ("-", "skip"):
            if k != 0 or pocket_center is None:
                raise CliError("only stage 1 may be skipped, and only with --pocket-center", EXIT_USAGE)
            nets.append(None)
        else:
            nets.append(_load_velocity_net(p))
    effective = dict(cfg)
    effective["rollout"] = {"n_steps": args.steps, "n_samples": args.n}
    eff_hash = config_hash(effective)
    rollout = RolloutConfig(
        n_steps=args.steps, n_samples=args.n, seed=args.seed,
        sigma_large=cfg["flow"]["sigma_large"],
    )
    results = staged_inference(record.ligand, record.protein, tuple(nets), rollout,
                               pocket_center=pocket_center)
    poses = [PoseEntry(coords=r.coords, transform=r.pose) for r in results]
    ps = PoseSet(
        complex_id=record.complex_id, seed=args.seed, config_hash=eff_hash, poses=poses,
        metadata={"tool": TOOL_VERSION, "mode": "pocket" if pocket_center is not None else "blind"},
    )
    save_json(args.out, poseset_to_dict(ps))
    print(f"wrote {len(poses)} poses to {args.out}")
    return EXIT_OK


def cmd_filter(args) -> int:
    ps = poseset_from_dict(load_json(args.poses))
    record = _load_complex(args.complex)
    if args.thresholds:
        tcfg, _ = load_run_config(args.thresholds)
        thresholds = filter_thresholds_from_config(tcfg)
    else:
        thresholds = FilterThresholds()
    prot_coords, prot_elements = record.protein.heavy_atoms()
    annotated = []
    for entry in ps.poses:
        rep = check_pose(entry.coords, record.ligand.elements, prot_coords, prot_elements,
                         record.ligand, thresholds)
        annotated.append(PoseEntry(entry.coords, entry.transform, rep, entry.score))
    ps.poses = annotated
    save_json(args.out, poseset_to_dict(ps))
    kept = retain_best([(p, p.report) for p in annotated])
    retained = PoseSet(
        complex_id=ps.complex_id, seed=ps.seed, config_hash=ps.config_hash,
        poses=[p for p, _ in kept],
        metadata={**ps.metadata, "retained": True},
    )
    save_json(args.retained_out, poseset_to_dict(retained))
    print("pose\tmin_dist\tmax_dist\toverlap\tclash\tpass_count\tsep_ratio\tcontact\toverlap_frac")
    for i, entry in enumerate(annotated):
        r = entry.report
        flags = "".join("+" if f else "-" for f in
                        (r.min_dist_ok, r.max_dist_ok, r.volume_overlap_ok, r.internal_clash_ok))
        print(f"{i}\t{flags[0]}\t{flags[1]}\t{flags[2]}\t{flags[3]}\t{r.pass_count}"
              f"\t{r.min_separation_ratio:.3f}\t{r.nearest_contact:.2f}\t{r.overlap_fraction:.4f}")
    counts = [p.report.pass_count for p in annotated]
    print(f"annotated {len(annotated)} poses; retained {len(kept)} at pass_count={max(counts)}")
    return EXIT_OK


def cmd_score(args) -> int:
    ps = poseset_from_dict(load_json(args.poses))
    record = _load_complex(args.complex)
    state = load_checkpoint(args.scorer)
    if state.get("kind") != "scorer":
        raise CliError(f"{args.scorer} is not a scorer checkpoint", EXIT_DATA)
    scorer = PoseScorer.from_state(state)
    prot_coords, prot_elements = record.protein.heavy_atoms()
    markers = _marker_coords(record)
    scored = []
    for entry in ps.poses:
        feats = compute_pose_features(entry.coords, record.ligand, prot_coords,
                                      prot_elements, markers)
        score = float(scorer.score(feats)[0])
        scored.append(PoseEntry(entry.coords, entry.transform, entry.report, score))
    ps.poses = scored
    save_json(args.out, poseset_to_dict(ps))
    print(f"scored {len(scored)} poses")
    return EXIT_OK


def cmd_rank(args) -> int:
    ps = poseset_from_dict(load_json(args.poses))
    if not ps.poses:
        raise CliError("pose set is empty", EXIT_DATA)
    if any(p.score is None for p in ps.poses):
        raise CliError("poses are not scored; run `score` first", EXIT_DATA)
    pool = list(enumerate(ps.poses))
    if all(p.report is not None for p in ps.poses):
        kept = retain_best([((i, p), p.report) for i, p in pool])
        pool = [item for item, _ in kept]
    local = select_pose([p.score for _, p in pool])
    index, best = pool[local]
    out = {
        "kind": "selected-pose",
        "complex_id": ps.complex_id,
        "pose_index": index,
        "score": best.score,
        "coords": best.coords.tolist(),
        "config_hash": ps.config_hash,
        "seed": ps.seed,
    }
    if best.report is not None:
        out["report"] = best.report.to_dict()
    save_json(args.out, out)
    print(f"selected pose {index} (score {best.score:.4f})")
    return EXIT_OK


def cmd_rmsd(args) -> int:
    ref = _load_complex(args.ref)
    if ref.native_coords is None:
        raise CliError("reference record has no native coordinates", EXIT_DATA)
    pred = load_json(args.pred)
    rows = []
    if pred.get("kind") == "poseset":
        ps = poseset_from_dict(pred)
        for i, entry in enumerate(ps.poses):
            rows.append((f"{ps.complex_id}#{i}", entry.coords,
                         entry.report.pass_count if entry.report else None))
    elif pred.get("kind") == "selected-pose":
        rows.append((pred["complex_id"], np.array(pred["coords"], dtype=float),
                     pred.get("report", {}).get("pass_count")))
    elif pred.get("kind") == "complex":
        rec = complex_from_dict(pred)
        if rec.native_coords is None:
            raise CliError("predicted complex carries no ligand coordinates", EXIT_DATA)
        rows.append((rec.complex_id, rec.native_coords, None))
    else:
        raise CliError("--pred must be a poseset, selected-pose, or complex record", EXIT_DATA)

    transform = None
    if args.align != "none":
        pred_protein = ref.protein
        if pred.get("kind") == "complex":
            pred_protein = complex_from_dict(pred).protein
        try:
            if args.align == "base":
                res = pocket_align_base(ref.protein, ref.native_coords, pred_protein)
            else:
                res = pocket_align_pocketbased(ref.protein, ref.native_coords, pred_protein,
                                               rows[0][1])
            transform = res
        except AlignmentError as exc:
            print(json.dumps({"warning": f"alignment failed: {exc}; RMSD set to inf"}),
                  file=sys.stderr)

    out_rows = []
    for name, coords, pass_count in rows:
        if args.align != "none" and transform is None:
            value = math.inf
        else:
            ref_lig = ref.native_coords
            lig = coords
            if transform is not None:
                if transform.direction == "ref_to_pred":
                    ref_lig = transform.transform.apply(ref_lig)
                else:
                    lig = transform.transform.apply(lig)
            try:
                value = symmetry_rmsd(lig, ref_lig, ref.ligand).value
            except ValueError as exc:
                print(json.dumps({"warning": f"{name}: {exc}; RMSD set to inf"}), file=sys.stderr)
                value = math.inf
        out_rows.append({"complex_id": name, "rmsd": value, "pass_count": pass_count})
        shown = "inf" if math.isinf(value) else f"{value:.4f}"
        print(f"{name}\t{shown}")
    if args.out:
        save_json(args.out, {"kind": "rmsd-results", "align": args.align, "rows": out_rows})
    return EXIT_OK


def cmd_report(args) -> int:
    if not os.path.isdir(args.runs):
        raise CliError(f"runs directory not found: {args.runs}", EXIT_DATA)
    rows = []
    for root, _, files in os.walk(args.runs):
        for name in sorted(files):
            if not name.endswith(".json"):
                continue
            try:
                blob = load_json(os.path.join(root, name))
            except (OSError, json.JSONDecodeError):
                continue
            if blob.get("kind") == "rmsd-results":
                rows.extend(blob["rows"])
    if not rows:
        raise CliError("no rmsd-results files found", EXIT_DATA)
    stats = success_rates(
        (r["rmsd"], r.get("pass_count")) for r in rows
    )
    table = {"kind": "success-report", "stats": stats, "rows": rows}
    save_json(args.out_prefix + ".json", table)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["complex_id", "rmsd", "pass_count", "success_2a"])
    for r in rows:
        rmsd = r["rmsd"]
        writer.writerow([
            r["complex_id"],
            "inf" if rmsd is None or math.isinf(rmsd) else f"{rmsd:.4f}",
            r.get("pass_count", ""),
            int(rmsd is not None and rmsd <= 2.0),
        ])
    writer.writerow([])
    writer.writerow(["n", stats["n"], "", ""])
    writer.writerow(["success_2a", f"{stats['success_2a']:.4f}", "", ""])
    writer.writerow(["success_2a_valid", f"{stats['success_2a_valid']:.4f}", "", ""])
    _atomic_write_text(args.out_prefix + ".csv", buf.getvalue())
    print(f"n={stats['n']} success@2A={stats['success_2a']:.3f} "
          f"valid={stats['success_2a_valid']:.3f}")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poseflow",
        description="Flow-matching pose generation, filtering, scoring, and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="generate synthetic complexes")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("train-toy", help="train a stage model or the scorer")
    p.add_argument("--stage", choices=["1", "2", "3", "scorer"], required=True)
    p.add_argument("--config", default=None, help="run config TOML")
    p.add_argument("--corpus", required=True, help="directory of complex records")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--curve-out", default=None, help="loss curve CSV")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("sample", help="staged inference for one complex")
    p.add_argument("--complex", required=True)
    p.add_argument("--checkpoints", required=True, help="s1,s2,s3 ('-' skips stage 1)")
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--pocket-center", default=None,
                   help="x,y,z (use --pocket-center=-1,2,3 for negative values)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("filter", help="validity filters + retained subset")
    p.add_argument("--poses", required=True)
    p.add_argument("--complex", required=True)
    p.add_argument("--thresholds", default=None, help="TOML with a [filters] table")
    p.add_argument("--out", required=True)
    p.add_argument("--retained-out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("score", help="score poses with a trained scorer")
    p.add_argument("--poses", required=True)
    p.add_argument("--complex", required=True)
    p.add_argument("--scorer", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("rank", help="select a single pose from a scored set")
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("rmsd", help="symmetry-corrected RMSD rows")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--align", choices=["none", "base", "pocket"], default="none")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_rmsd)

    p = sub.add_parser("report", help="aggregate rmsd-results into a table")
    p.add_argument("--runs", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("POSEFLOW_THREADS")
    if threads:
        os.environ.setdefault("OMP_NUM_THREADS", threads)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    command = args.command
    try:
        return args.func(args)
    except CliError as exc:
        _emit_error(command, exc.code, str(exc))
        return exc.code
    except (DataFormatError, UnknownElementError, FileNotFoundError, json.JSONDecodeError) as exc:
        _emit_error(command, EXIT_DATA, str(exc))
        return EXIT_DATA
    except (TrainingDivergence, RolloutError, AlignmentError, FloatingPointError) as exc:
        _emit_error(command, EXIT_NUMERIC, str(exc))
        return EXIT_NUMERIC
    except ValueError as exc:
        _emit_error(command, EXIT_DATA, str(exc))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
