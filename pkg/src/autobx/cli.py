"""``autobx`` command line: the full experiment and each pipeline stage on files."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import io as aio
from .config import ConfigError, load_config
from .detection import VolumeAccumulator, analyze_frame, cluster, voxelize_targets
from .evaluation import (
    MODES, _controller, assess_attempt, build_subject, read_clusters, read_trajectory,
    run_experiment, target_probe_pose, write_clusters, write_detections, write_executed,
    write_rms_history, write_trajectory,
)
from .geometry import RigidTransform, image_pose
from .needle import NeedleError, plan_insertion, simulate_insertion
from .planner import execute, plan_trajectory
from .registration import Correspondence3, icp_refine, initial_transform
from .ultrasound import UltrasoundFrame, blank_frame, render_frame

log = logging.getLogger("autobx")


def _config(args):
    return load_config(getattr(args, "config", None))


def cmd_run(args):
    cfg = _config(args)
    modes = MODES if args.mode == "both" else (args.mode,)
    report = run_experiment(cfg, seed=args.seed, modes=modes, out_dir=args.out)
    for mode, agg in report.aggregates().items():
        err = agg["error"]["mean"]
        t = agg["time"]["mean"]
        print(f"{mode}: {agg['successes']}/{agg['attempts']} successful, "
              f"mean error {'n/a' if err is None else f'{err:.3f} mm'}, "
              f"mean time {'n/a' if t is None else f'{t:.2f} s'}, "
              f"contact losses {agg['contact_losses']}")
    return 0


def cmd_register(args):
    cfg = _config(args)
    source = aio.read_cloud(args.source)
    target = aio.read_cloud(args.target)
    ks, kt = aio.read_keypoints(args.keypoints)
    c = Correspondence3.from_dicts(ks, kt)
    res = icp_refine(source, target, initial_transform(c), cfg.registration.icp())
    d = aio.ensure_dir(args.out)
    aio.write_transform(d / "transform.txt", res.transform)
    write_rms_history(d / "rms_history.csv", res.rms_history)
    print(f"ICP {'converged' if res.converged else 'stopped'} after {res.iterations} iterations, "
          f"RMS {res.rms_history[-1]:.4f} mm")
    return 0


def cmd_plan(args):
    cfg = _config(args)
    pc = cfg.planner
    traj = plan_trajectory(aio.read_cloud(args.roi), aio.read_cloud(args.cloud), pc.spacing,
                           pc.normal_radius, np.asarray(pc.y_global, dtype=float),
                           pc.safety_workspace, pc.snap_distance, pc.snap)
    write_trajectory(args.out, traj)
    print(f"{len(traj)} poses on a {traj.grid_shape[0]}x{traj.grid_shape[1]} grid")
    return 0


def cmd_execute(args):
    cfg = _config(args)
    _, subject, _ = build_subject(cfg, args.seed, args.rep)
    steps = execute(read_trajectory(args.trajectory), subject, _controller(cfg.controller, args.mode))
    write_executed(args.out, steps)
    lost = sum(not s.contact for s in steps)
    print(f"{len(steps)} steps, {lost} without contact, {steps[-1].elapsed:.2f} s")
    return 0


def cmd_render(args):
    """Frames along an executed trajectory (no contact: blank frame)."""
    cfg = _config(args)
    phantom, _, _ = build_subject(cfg, args.seed, args.rep)
    frames = []
    with open(args.executed, newline="") as fh:
        for k, row in enumerate(csv.DictReader(fh)):
            rot = np.array([float(row[f"r{i}{j}"]) for i in range(3) for j in range(3)]).reshape(3, 3)
            ee = RigidTransform(rot, [float(row[a]) for a in ("ax", "ay", "az")])
            t_fb = image_pose(ee)
            if row["contact"] == "1" and row["aborted"] == "0":
                rng = np.random.default_rng(np.random.SeedSequence([args.seed, args.rep, 100, k]))
                frames.append(render_frame(phantom, t_fb, cfg.imaging, cfg.ultrasound, rng,
                                           float(row["elapsed_s"])))
            else:
                frames.append(blank_frame(t_fb, cfg.imaging, float(row["elapsed_s"])))
    aio.write_frame_sequence(args.out, frames)
    print(f"{len(frames)} frames written to {args.out}")
    return 0


def cmd_detect(args):
    cfg = _config(args)
    acc = VolumeAccumulator()
    rows = []
    for idx, pixels, pose in aio.iter_frame_sequence(args.frames):
        frame = UltrasoundFrame(pixels, pose, cfg.imaging)
        if not pixels.any():
            continue
        analysis = analyze_frame(frame, cfg.detection.cir)
        rows.extend((idx, t) for t in analysis.targets)
        acc.add(voxelize_targets(analysis.targets, frame, cfg.detection.cir, analysis, idx,
                                 cfg.detection.mapping))
    clusters = cluster(acc.voxels(cfg.detection.voxel_resolution), cfg.clustering)
    d = aio.ensure_dir(args.out)
    write_detections(d / "detections.csv", rows)
    write_clusters(d / "clusters.csv", clusters)
    print(f"{sum(t.accepted for _, t in rows)} accepted detections, {len(clusters)} clusters")
    return 0


def cmd_target(args):
    cfg = _config(args)
    _, subject, _ = build_subject(cfg, args.seed, args.rep)
    pc = cfg.planner
    plans = []
    d = aio.ensure_dir(args.out)
    with open(d / "insertion_samples.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("label", "k", "x", "y", "z"))
        for label, centroid, _ in read_clusters(args.clusters):
            probe = target_probe_pose(centroid, subject, subject.cloud, pc.normal_radius,
                                      np.asarray(pc.y_global, dtype=float))
            try:
                plan = plan_insertion(centroid, subject, probe, cfg.needle.guide)
            except NeedleError as exc:
                plans.append({"label": label, "error": str(exc)})
                continue
            ins = simulate_insertion(plan, cfg.needle.misalignment_sigma,
                                     np.random.SeedSequence([args.seed, args.rep, 200, label]),
                                     cfg.needle.n_samples)
            for k, p in enumerate(ins.points):
                w.writerow((label, k, *(f"{v:.6f}" for v in p)))
            doc = plan.to_dict()
            doc.update(label=label, misalignment_deg=ins.misalignment_deg)
            plans.append(doc)
    (d / "needle_plans.json").write_text(json.dumps(plans, indent=2, sort_keys=True) + "\n")
    print(f"{sum('error' not in p for p in plans)} of {len(plans)} targets planned")
    return 0


def cmd_assess(args):
    cfg = _config(args)
    pts = {}
    with open(args.samples, newline="") as fh:
        for row in csv.DictReader(fh):
            pts.setdefault(int(row["label"]), []).append([float(row[a]) for a in "xyz"])
    if args.label not in pts:
        raise ValueError(f"label {args.label} not found in {args.samples}")

    class _Result:
        points = np.array(pts[args.label])

    err = assess_attempt(_Result, np.asarray(args.target, dtype=float), cfg.evaluation.assessments,
                         cfg.evaluation.pick_noise_sigma, np.random.SeedSequence([args.seed, args.label]))
    print(f"{err:.6f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="autobx", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, seed=True):
        sp.add_argument("--config", help="TOML run configuration (default: packaged defaults)")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = with_config(sub.add_parser("run", help="full experiment"))
    sp.add_argument("--mode", choices=("position", "impedance", "both"), default="both")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_run)

    sp = with_config(sub.add_parser("register", help="keypoint init + ICP of two clouds"), seed=False)
    sp.add_argument("source")
    sp.add_argument("target")
    sp.add_argument("keypoints", help="lines 'name sx sy sz tx ty tz'")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_register)

    sp = with_config(sub.add_parser("plan", help="scan trajectory over an ROI cloud"), seed=False)
    sp.add_argument("roi")
    sp.add_argument("cloud")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plan)

    for name, fn, hlp in (("execute", cmd_execute, "simulate a trajectory under a controller"),
                          ("render", cmd_render, "render frames along an executed trajectory")):
        sp = with_config(sub.add_parser(name, help=hlp))
        sp.add_argument("--rep", type=int, default=0, help="repetition index for the subject pose")
        sp.add_argument("--out", required=True)
        sp.set_defaults(func=fn)
    sub.choices["execute"].add_argument("trajectory")
    sub.choices["execute"].add_argument("--mode", choices=MODES, default="impedance")
    sub.choices["render"].add_argument("executed")

    sp = with_config(sub.add_parser("detect", help="detect and cluster lesions in a frame sequence"), seed=False)
    sp.add_argument("frames")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_detect)

    sp = with_config(sub.add_parser("target", help="plan and simulate needle insertions"))
    sp.add_argument("clusters")
    sp.add_argument("--rep", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_target)

    sp = with_config(sub.add_parser("assess", help="targeting error of one insertion"))
    sp.add_argument("samples")
    sp.add_argument("--label", type=int, default=0)
    sp.add_argument("--target", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
    sp.set_defaults(func=cmd_assess)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"autobx: configuration error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"autobx: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
