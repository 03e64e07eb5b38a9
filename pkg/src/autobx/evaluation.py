"""Accuracy metric, experiment orchestration and report writing."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as aio
from .detection import VolumeAccumulator, analyze_frame, cluster, voxelize_targets
from .geometry import RigidTransform, image_pose, rotation_about
from .needle import NeedleError, calibrate_guide, plan_insertion, render_guide_samples, simulate_insertion
from .phantom import build_atlas, build_phantom, detect_keypoints, pose_subject
from .planner import ControllerParams, estimate_normal, execute, local_frame, plan_trajectory
from .registration import extract_roi, register
from .ultrasound import blank_frame, render_frame

log = logging.getLogger(__name__)

MODES = ("position", "impedance")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FittedLine:
    point: np.ndarray
    direction: np.ndarray
    residual: float


def fit_line_pca(points):
    """Total least squares line: centroid plus principal covariance axis.

    The direction sign prefers a positive z component, then positive x, then y.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) < 2:
        raise EvaluationError("line fit needs at least 2 points")
    c = p.mean(axis=0)
    q = p - c
    if not np.any(np.abs(q) > 0):
        raise EvaluationError("all points identical; line undefined")
    _, _, vt = np.linalg.svd(q, full_matrices=False)
    d = vt[0] / np.linalg.norm(vt[0])
    for k in (2, 0, 1):
        if abs(d[k]) > 1e-12:
            if d[k] < 0:
                d = -d
            break
    perp = q - np.outer(q @ d, d)
    res = float(np.sqrt(np.mean(np.sum(perp**2, axis=1))))
    return FittedLine(point=c, direction=d, residual=res)


def targeting_error(line, target):
    """Distance from ``target`` to the infinite line."""
    v = np.asarray(target, dtype=float) - line.point
    return float(np.linalg.norm(v - np.dot(v, line.direction) * line.direction))


def assess_attempt(result, target, assessments=3, pick_noise_sigma=0.4, seed=None):
    """Mean targeting error over repeated noisy picks of the needle points."""
    pts = np.asarray(result.points, dtype=float)
    if len(pts) < 2:
        raise EvaluationError("insertion result needs at least 2 needle points")
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(assessments):
        picked = pts + rng.normal(0.0, pick_noise_sigma, size=pts.shape) if pick_noise_sigma > 0 else pts
        errs.append(targeting_error(fit_line_pca(picked), target))
    return float(np.mean(errs))


@dataclass(eq=False)
class AttemptRecord:
    rep: int
    target_id: int
    mode: str
    target: np.ndarray
    error: float
    time: float
    success: bool
    contact_losses: int
    scan_time: float = 0.0
    targeting_time: float = 0.0
    centroid: np.ndarray = field(default_factory=lambda: np.full(3, np.nan))
    centroid_error: float = math.nan
    misalignment: float = math.nan
    cluster_size: int = 0
    note: str = ""


CSV_COLUMNS = ("rep", "target_id", "mode", "target_x", "target_y", "target_z", "success", "error_mm",
               "time_s", "scan_time_s", "targeting_time_s", "contact_losses", "centroid_x", "centroid_y",
               "centroid_z", "centroid_error_mm", "misalignment_deg", "cluster_size", "note")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def record_row(r):
    vals = (r.rep, r.target_id, r.mode, *r.target, r.success, r.error, r.time, r.scan_time,
            r.targeting_time, r.contact_losses, *r.centroid, r.centroid_error, r.misalignment,
            r.cluster_size, r.note)
    return [_fmt(v if not isinstance(v, np.floating) else float(v)) for v in vals]


def _stats(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0, "n": int(v.size)}


@dataclass(eq=False)
class ExperimentReport:
    records: list
    false_positives: dict = field(default_factory=dict)  # mode -> count
    meta: dict = field(default_factory=dict)

    def mode_records(self, mode):
        return [r for r in self.records if r.mode == mode]

    def successes(self, mode):
        return sum(r.success for r in self.mode_records(mode))

    def attempts(self, mode):
        return len(self.mode_records(mode))

    def contact_losses(self, mode):
        # counted once per repetition (the field is repeated on each target row)
        seen = {}
        for r in self.mode_records(mode):
            seen[r.rep] = r.contact_losses
        return sum(seen.values())

    def modes(self):
        return [m for m in MODES if self.mode_records(m)]

    def aggregates(self):
        """Per-mode and per-target summary over successful attempts."""
        out = {}
        for mode in self.modes():
            recs = self.mode_records(mode)
            ok = [r for r in recs if r.success]
            per_target = {}
            for tid in sorted({r.target_id for r in recs}):
                t_ok = [r for r in ok if r.target_id == tid]
                per_target[str(tid)] = {
                    "attempts": sum(r.target_id == tid for r in recs),
                    "successes": len(t_ok),
                    "error": _stats([r.error for r in t_ok]),
                    "time": _stats([r.time for r in t_ok]),
                }
            out[mode] = {
                "attempts": len(recs),
                "successes": len(ok),
                "contact_losses": self.contact_losses(mode),
                "false_positives": int(self.false_positives.get(mode, 0)),
                "error": _stats([r.error for r in ok]),
                "time": _stats([r.time for r in ok]),
                "scan_time": _stats([r.scan_time for r in ok]),
                "targeting_time": _stats([r.targeting_time for r in ok]),
                "per_target": per_target,
            }
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.records:
                w.writerow(record_row(r))

    def write_json(self, path):
        doc = {"aggregates": self.aggregates(), "meta": self.meta}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def write(self, out_dir):
        d = aio.ensure_dir(out_dir)
        self.write_csv(d / "report.csv")
        self.write_json(d / "report.json")
        return d


def _rng(seed, rep, stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(rep), int(stream)]))


def subject_transform(cfg, rng, phantom_center):
    """Random yaw about the phantom centre and xy shift, then the placement."""
    yaw = math.radians(rng.uniform(-cfg.max_yaw, cfg.max_yaw))
    shift = np.array([rng.uniform(-cfg.max_shift, cfg.max_shift),
                      rng.uniform(-cfg.max_shift, cfg.max_shift), 0.0])
    c = np.asarray(phantom_center, dtype=float)
    r = rotation_about([0.0, 0.0, 1.0], yaw)
    t = c - r @ c + np.asarray(cfg.placement, dtype=float) + shift
    return RigidTransform(r, t)


def build_subject(cfg, seed, rep, phantom0=None, surface0=None):
    """Placed phantom, noisy subject surface and detected keypoints for one repetition."""
    if phantom0 is None or surface0 is None:
        phantom0, surface0, _ = build_phantom(cfg.phantom, seed)
    center = np.asarray(cfg.phantom.extent, dtype=float) / 2.0
    t_subj = subject_transform(cfg.subject, _rng(seed, rep, 1), center)
    subj_rng = _rng(seed, rep, 2)
    subject = pose_subject(surface0, t_subj, cfg.subject.cloud_noise, subj_rng)
    keypoints = detect_keypoints(subject, cfg.subject.keypoint_sigma, subj_rng)
    return phantom0.placed(t_subj), subject, keypoints


def greedy_match(truth, centroids, gate):
    """Pairs (truth index, centroid index) by ascending distance within ``gate``."""
    truth = np.asarray(truth, dtype=float).reshape(-1, 3)
    cents = np.asarray(centroids, dtype=float).reshape(-1, 3)
    if len(truth) == 0 or len(cents) == 0:
        return {}
    d = np.linalg.norm(truth[:, None, :] - cents[None, :, :], axis=2)
    order = np.lexsort((np.arange(d.size) % d.shape[1], np.arange(d.size) // d.shape[1], d.ravel()))
    used_t, used_c, out = set(), set(), {}
    for flat in order:
        i, j = divmod(int(flat), d.shape[1])
        if d[i, j] > gate:
            break
        if i in used_t or j in used_c:
            continue
        out[i] = j
        used_t.add(i)
        used_c.add(j)
    return out


def target_probe_pose(centroid, surface, cloud, normal_radius, y_global, tree=None):
    """Probe pose on the skin right above ``centroid`` with the surface-aligned frame."""
    x, y = float(centroid[0]), float(centroid[1])
    p = np.array([x, y, float(surface.base_z(x, y))])
    try:
        n = estimate_normal(cloud, p, normal_radius, tree)
    except ValueError:
        n = np.array([0.0, 0.0, 1.0])
    o, _ = local_frame(n, y_global)
    return RigidTransform(o, p)


def scan(steps, phantom, cfg, seed, rep, mode_index, keep_frames=False):
    """Render and analyse one frame per executed step; returns (accumulator, frames, detections)."""
    acc = VolumeAccumulator()
    frames = []
    det_rows = []
    for k, st in enumerate(steps):
        t_fb = image_pose(st.pose, None if cfg.frames is None else _probe_mount(cfg))
        if st.contact and not st.aborted:
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(rep), 100 + mode_index, k]))
            frame = render_frame(phantom, t_fb, cfg.imaging, cfg.ultrasound, rng, timestamp=st.elapsed)
        else:
            frame = blank_frame(t_fb, cfg.imaging, timestamp=st.elapsed)
        if keep_frames:
            frames.append(frame)
        if not frame.coupled or frame.off_body:
            continue
        analysis = analyze_frame(frame, cfg.detection.cir)
        for t in analysis.targets:
            det_rows.append((k, t))
        acc.add(voxelize_targets(analysis.targets, frame, cfg.detection.cir, analysis, k,
                                 cfg.detection.mapping))
    return acc, frames, det_rows


def _probe_mount(cfg):
    try:
        return cfg.frames.transform("U", "E")
    except KeyError:
        return None


def run_experiment(cfg, seed=0, modes=MODES, out_dir=None):
    """Repeat the full pipeline ``cfg.evaluation.repetitions`` times per mode.

    Registration, ROI and trajectory are shared by the modes of one
    repetition; everything downstream of execution runs per mode.
    """
    modes = tuple(modes)
    for m in modes:
        if m not in MODES:
            raise EvaluationError(f"unknown control mode {m!r}")
    ev = cfg.evaluation
    phantom0, surface0, centers0 = build_phantom(cfg.phantom, seed)
    atlas = build_atlas(cfg.atlas)
    calib = calibrate_guide(render_guide_samples(cfg.needle.guide, cfg.needle.calibration_angles, cfg.imaging))
    out = aio.ensure_dir(out_dir) if out_dir is not None else None
    records = []
    false_pos = {m: 0 for m in modes}
    for rep in range(ev.repetitions):
        phantom, subject, keypoints = build_subject(cfg, seed, rep, phantom0, surface0)
        truth = phantom.lesion_centers()
        reg = register(atlas, subject.cloud, keypoints, cfg.registration.icp())
        roi = extract_roi(subject.cloud, atlas, cfg.registration.organ, reg.transform,
                          cfg.registration.roi_mode, cfg.registration.roi_margin)
        pc = cfg.planner
        traj = plan_trajectory(roi.points, subject.cloud, pc.spacing, pc.normal_radius,
                               np.asarray(pc.y_global, dtype=float), pc.safety_workspace, pc.snap_distance,
                               pc.snap)
        rep_dir = aio.ensure_dir(out / f"rep_{rep:02d}") if out is not None else None
        if rep_dir is not None:
            _write_rep_artifacts(rep_dir, atlas, subject, keypoints, reg, roi, traj, ev.save_clouds)
        for mi, mode in enumerate(modes):
            ctrl = _controller(cfg.controller, mode)
            steps = execute(traj, subject, ctrl, seed=seed)
            losses = sum(not s.contact for s in steps)
            scan_time = steps[-1].elapsed if steps else 0.0
            acc, frames, det_rows = scan(steps, phantom, cfg, seed, rep, MODES.index(mode), ev.save_frames)
            vox = acc.voxels(cfg.detection.voxel_resolution)
            clusters = cluster(vox, cfg.clustering)
            cents = np.array([c.centroid for c in clusters]).reshape(-1, 3)
            match = greedy_match(truth, cents, ev.match_gate)
            false_pos[mode] += len(clusters) - len(match)
            n_t = max(len(truth), 1)
            prev = steps[-1].achieved if steps else traj.poses[0].position
            plans = []
            for tid, gt in enumerate(truth):
                rec = AttemptRecord(rep=rep, target_id=tid, mode=mode, target=gt, error=math.nan,
                                    time=math.nan, success=False, contact_losses=losses,
                                    scan_time=scan_time)
                if tid not in match:
                    rec.note = "no cluster"
                    records.append(rec)
                    continue
                cl = clusters[match[tid]]
                rec.centroid = cl.centroid
                rec.centroid_error = float(np.linalg.norm(cl.centroid - gt))
                rec.cluster_size = cl.size
                probe = target_probe_pose(cl.centroid, subject, subject.cloud, pc.normal_radius,
                                          np.asarray(pc.y_global, dtype=float))
                try:
                    plan = plan_insertion(cl.centroid, subject, probe, cfg.needle.guide)
                except NeedleError as exc:
                    rec.note = f"plan rejected: {exc}"
                    records.append(rec)
                    continue
                ins = simulate_insertion(plan, cfg.needle.misalignment_sigma,
                                         np.random.SeedSequence([int(seed), rep, 200 + mi, tid]),
                                         cfg.needle.n_samples)
                rec.error = assess_attempt(ins, gt, ev.assessments, ev.pick_noise_sigma,
                                           np.random.SeedSequence([int(seed), rep, 300 + mi, tid]))
                rec.misalignment = ins.misalignment_deg
                travel = float(np.linalg.norm(probe.translation - prev))
                prev = probe.translation
                g = cfg.needle.guide
                rec.targeting_time = (travel / ctrl.probe_speed + ctrl.settle_time + g.setup_time
                                      + plan.depth / g.insertion_speed)
                rec.time = scan_time / n_t + rec.targeting_time
                rec.success = True
                d = plan.to_dict()
                d.update(target_id=tid, calibration_row=float(calib.row(plan.guide_angle)))
                plans.append(d)
                records.append(rec)
            if rep_dir is not None:
                _write_mode_artifacts(rep_dir / mode, steps, clusters, plans, det_rows, frames)
    meta = {
        "seed": int(seed),
        "modes": list(modes),
        "repetitions": ev.repetitions,
        "targets": int(len(centers0)),
        "calibration": {"beta0": calib.beta0, "beta1": calib.beta1, "residual": calib.residual},
        "time_definition": "time = scan_time / n_targets + targeting_time",
    }
    report = ExperimentReport(records=records, false_positives=false_pos, meta=meta)
    if out is not None:
        report.write(out)
    return report


def _controller(base, mode):
    kw = dict(base.__dict__)
    kw["mode"] = mode
    return ControllerParams(**kw)


def _write_rep_artifacts(d, atlas, subject, keypoints, reg, roi, traj, save_clouds):
    if save_clouds:
        aio.write_cloud(d / "atlas_skin.xyz", atlas.skin)
        aio.write_cloud(d / "subject_cloud.xyz", subject.cloud)
        aio.write_cloud(d / "roi.xyz", roi.points)
    # atlas -> subject pairs, the input format of the register stage
    aio.write_keypoints(d / "keypoints.txt", atlas.keypoints, keypoints)
    aio.write_transform(d / "registration.txt", reg.transform)
    write_rms_history(d / "rms_history.csv", reg.rms_history)
    write_trajectory(d / "trajectory.csv", traj)


def _write_mode_artifacts(d, steps, clusters, plans, det_rows, frames):
    aio.ensure_dir(d)
    write_executed(d / "executed.csv", steps)
    write_clusters(d / "clusters.csv", clusters)
    write_detections(d / "detections.csv", det_rows)
    (d / "needle_plans.json").write_text(json.dumps(plans, indent=2, sort_keys=True) + "\n")
    if frames:
        aio.write_frame_sequence(d / "frames", frames)


def write_rms_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iteration", "rms_mm"))
        for i, v in enumerate(history):
            w.writerow((i, f"{v:.9f}"))


TRAJ_COLUMNS = ("i", "j", "x", "y", "z", "r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22")
EXEC_COLUMNS = TRAJ_COLUMNS + ("ax", "ay", "az", "contact", "force_n", "step_time_s", "elapsed_s", "aborted")


def _pose_cells(pose):
    return [str(pose.index[0]), str(pose.index[1])] + [f"{v:.6f}" for v in pose.position] + \
        [f"{v:.9f}" for v in pose.orientation.ravel()]


def write_trajectory(path, traj):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJ_COLUMNS)
        for p in traj:
            w.writerow(_pose_cells(p))


def read_trajectory(path):
    from .planner import ScanPose, ScanTrajectory

    poses = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or tuple(rd.fieldnames[:len(TRAJ_COLUMNS)]) != TRAJ_COLUMNS:
            raise aio.CloudFormatError(f"{path}: trajectory header must start with {','.join(TRAJ_COLUMNS)}")
        for lineno, row in enumerate(rd, start=2):
            try:
                pos = np.array([float(row[k]) for k in ("x", "y", "z")])
                rot = np.array([float(row[k]) for k in TRAJ_COLUMNS[5:]]).reshape(3, 3)
                poses.append(ScanPose(position=pos, orientation=rot, index=(int(row["i"]), int(row["j"]))))
            except (TypeError, ValueError) as exc:
                raise aio.CloudFormatError(f"{path}:{lineno}: {exc}") from exc
    if not poses:
        raise aio.CloudFormatError(f"{path}: empty trajectory")
    rows = max(p.index[0] for p in poses) + 1
    cols = max(p.index[1] for p in poses) + 1
    return ScanTrajectory(poses=poses, grid_shape=(rows, cols))


def write_executed(path, steps):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EXEC_COLUMNS)
        for s in steps:
            force = "inf" if math.isinf(s.contact_force) else f"{s.contact_force:.6f}"
            w.writerow(_pose_cells(s.commanded) + [f"{v:.6f}" for v in s.achieved] +
                       [int(s.contact), force, f"{s.step_time:.6f}", f"{s.elapsed:.6f}", int(s.aborted)])


def write_clusters(path, clusters):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("label", "x", "y", "z", "members"))
        for c in clusters:
            w.writerow((c.label, *(f"{v:.6f}" for v in c.centroid), c.size))


def read_clusters(path):
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out.append((int(row["label"]), np.array([float(row[k]) for k in "xyz"]), int(row["members"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise aio.CloudFormatError(f"{path}:{lineno}: bad cluster row ({exc})") from exc
    return out


def write_detections(path, det_rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("frame", "cx", "cy", "radius", "i_r", "i_r_delta", "i_r_2delta", "accepted"))
        for k, t in det_rows:
            w.writerow((k, f"{t.center[0]:.3f}", f"{t.center[1]:.3f}", f"{t.radius:.3f}",
                        *(f"{m:.3f}" for m in t.means), int(t.accepted)))
