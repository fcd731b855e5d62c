"""Reconstruction quality metrics and the sensor-configuration sweep.

Conventions, fixed here and documented in the README:
  * toe, wrist, and finger articulations are excluded from the angular
    and positional aggregates (their DoFs are unarticulated in much of
    the training material);
  * legsLA covers hip/knee/ankle joints, backLA covers spine, neck, and
    shoulder joints;
  * JPE is measured in the root frame, in centimeters, root excluded;
  * jitter is the mean third finite difference of world joint positions
    (raw 20 Hz, edge frames excluded), reconstructed over ground truth;
    NaN when the ground truth is perfectly still;
  * RE is the horizontal (ground-plane) distance between the root
    positions at 2/5/10 s; sequences too short for a horizon report None.
    Reconstructed paths are aligned to ground truth at frame 0 by the
    evaluation harness before metrics (the initial offset is
    unobservable from relative root displacements).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features as ft
from .datagen import MotionSequence, Trial
from .diffusion import DenoiserConfig, DiffusionSchedule
from .inference import Reconstructor, StepSpread, reconstruct_trial
from .kinematics import KinematicTree, forward_kinematics, geodesic_angle_deg, local_to_global

REPORT_FORMAT = "imufill-report"
REPORT_VERSION = 1

EXCLUDED_SEGMENTS = ("toes_l", "toes_r", "hand_l", "hand_r", "fingers_l", "fingers_r")
LEG_JOINTS = ("thigh_l", "thigh_r", "shank_l", "shank_r", "foot_l", "foot_r")
BACK_JOINTS = ("spine1", "spine2", "spine3", "neck", "upper_arm_l", "upper_arm_r")

RE_HORIZONS_S = (2.0, 5.0, 10.0)


class MetricsError(ValueError):
    pass


@dataclass
class MetricsReport:
    la_deg: float
    legs_la_deg: float
    back_la_deg: float
    ga_deg: float
    jpe_cm: float
    jitter: float
    re2_m: float | None
    re5_m: float | None
    re10_m: float | None
    trial_id: str = ""

    def as_dict(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "LA_deg": self.la_deg, "legsLA_deg": self.legs_la_deg, "backLA_deg": self.back_la_deg,
            "GA_deg": self.ga_deg, "JPE_cm": self.jpe_cm, "jitter": self.jitter,
            "RE2_m": self.re2_m, "RE5_m": self.re5_m, "RE10_m": self.re10_m,
        }

    def value(self, objective: str) -> float:
        return {
            "LA": self.la_deg, "legsLA": self.legs_la_deg, "backLA": self.back_la_deg,
            "GA": self.ga_deg, "JPE": self.jpe_cm, "jitter": self.jitter,
            "RE2": self.re2_m, "RE5": self.re5_m, "RE10": self.re10_m,
        }[objective]


def _included(tree: KinematicTree) -> np.ndarray:
    return np.array([i for i, n in enumerate(tree.names) if n not in EXCLUDED_SEGMENTS])


def _joint_set(tree: KinematicTree, names) -> np.ndarray:
    return np.array([tree.index(n) for n in names])


def align_at_start(gt: MotionSequence, rec: MotionSequence) -> MotionSequence:
    """Shift the reconstructed horizontal path so frame 0 matches ground
    truth; the absolute initial offset is unobservable from features."""
    shift = gt.root_positions[0] - rec.root_positions[0]
    shift = np.array([shift[0], 0.0, shift[2]])
    moved = rec.root_positions + shift
    return MotionSequence(rec.rate, rec.rotations, moved, rec.height, rec.mass, rec.trial_id)


def compute_metrics(gt: MotionSequence, rec: MotionSequence, tree: KinematicTree) -> MetricsReport:
    if gt.n_frames != rec.n_frames:
        raise MetricsError(f"length mismatch: gt {gt.n_frames} vs rec {rec.n_frames}")
    if gt.rate != rec.rate:
        raise MetricsError(f"rate mismatch: gt {gt.rate} vs rec {rec.rate}")
    rate = gt.rate
    scaled = tree.scaled(gt.height)
    inc = _included(tree)
    legs = _joint_set(tree, LEG_JOINTS)
    back = _joint_set(tree, BACK_JOINTS)

    la_all = geodesic_angle_deg(gt.rotations, rec.rotations)  # (T, 24) local per joint
    la = float(la_all[:, inc[inc != 0]].mean())
    legs_la = float(la_all[:, legs].mean())
    back_la = float(la_all[:, back].mean())

    g_gt = local_to_global(tree, gt.rotations)
    g_rec = local_to_global(tree, rec.rotations)
    ga = float(geodesic_angle_deg(g_gt, g_rec)[:, inc].mean())

    fk_gt = forward_kinematics(scaled, gt.rotations, gt.root_positions)
    fk_rec = forward_kinematics(scaled, rec.rotations, rec.root_positions)
    jpe = float(np.linalg.norm(
        _root_frame(fk_gt, g_gt) - _root_frame(fk_rec, g_rec), axis=-1
    )[:, inc[inc != 0]].mean() * 100.0)

    jit_gt = _jitter(fk_gt.joints[:, inc], rate)
    jit_rec = _jitter(fk_rec.joints[:, inc], rate)
    # floor absorbs float residue of constant positions; a still ground
    # truth has no meaningful jitter ratio
    jitter = float(jit_rec / jit_gt) if jit_gt > 1e-9 else float("nan")

    res = {}
    for horizon in RE_HORIZONS_S:
        idx = int(round(horizon * rate))
        if idx >= gt.n_frames:
            res[horizon] = None
        else:
            d = gt.root_positions[idx, [0, 2]] - rec.root_positions[idx, [0, 2]]
            res[horizon] = float(np.hypot(*d))

    return MetricsReport(
        la_deg=la, legs_la_deg=legs_la, back_la_deg=back_la, ga_deg=ga, jpe_cm=jpe,
        jitter=jitter, re2_m=res[2.0], re5_m=res[5.0], re10_m=res[10.0],
        trial_id=gt.trial_id,
    )


def _root_frame(fk, globals_) -> np.ndarray:
    """Joint positions expressed in the root frame: R_root^T (p - p_root)."""
    rel = fk.joints - fk.joints[:, :1]
    return np.einsum("tij,tsi->tsj", globals_[:, 0], rel)


def _jitter(joints: np.ndarray, rate: float) -> float:
    """Mean third-finite-difference magnitude of world positions, m/s^3."""
    if joints.shape[0] < 4:
        raise MetricsError("need at least 4 frames for jitter")
    jerk = (joints[3:] - 3 * joints[2:-1] + 3 * joints[1:-2] - joints[:-3]) * rate**3
    return float(np.linalg.norm(jerk, axis=-1).mean())


def sequence_jitter(motion: MotionSequence, tree: KinematicTree) -> float:
    """Absolute jitter statistic of a sequence (used for corpus baselines)."""
    fk = forward_kinematics(tree.scaled(motion.height), motion.rotations, motion.root_positions)
    return _jitter(fk.joints[:, _included(tree)], motion.rate)


def aggregate_reports(reports: list[MetricsReport]) -> dict:
    """Mean plus worst-trial value per metric (None-aware for RE)."""
    if not reports:
        raise MetricsError("no reports to aggregate")
    out: dict[str, dict] = {}
    keys = ["LA_deg", "legsLA_deg", "backLA_deg", "GA_deg", "JPE_cm", "jitter", "RE2_m", "RE5_m", "RE10_m"]
    for k in keys:
        vals = [r.as_dict()[k] for r in reports]
        vals = [v for v in vals if v is not None and np.isfinite(v)]
        out[k] = {
            "mean": float(np.mean(vals)) if vals else None,
            "worst": float(np.max(vals)) if vals else None,
            "n": len(vals),
        }
    return out


# -- configuration sweep -------------------------------------------------


@dataclass
class SweepEntry:
    config: ft.SensorConfig
    per_trial: list[MetricsReport]
    aggregate: dict
    mean_latency_ms: float


@dataclass
class SweepResult:
    entries: dict[str, SweepEntry]
    rankings: dict[str, list[str]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT, "version": REPORT_VERSION, "kind": "sweep",
            "configs": {
                label: {
                    "n_sensors": e.config.n_sensors,
                    "aggregate": e.aggregate,
                    "mean_latency_ms": e.mean_latency_ms,
                    "per_trial": [r.as_dict() for r in e.per_trial],
                }
                for label, e in self.entries.items()
            },
            "rankings": self.rankings,
        }


def rank_configs(entries: dict[str, SweepEntry], objective: str) -> list[str]:
    """Ascending by objective mean; ties break to fewer sensors, then name."""
    def key(label: str):
        agg = entries[label].aggregate[_agg_key(objective)]
        val = agg["mean"] if agg["mean"] is not None else float("inf")
        return (val, entries[label].config.n_sensors, label)

    return sorted(entries, key=key)


def _agg_key(objective: str) -> str:
    return {
        "LA": "LA_deg", "legsLA": "legsLA_deg", "backLA": "backLA_deg", "GA": "GA_deg",
        "JPE": "JPE_cm", "jitter": "jitter", "RE2": "RE2_m", "RE5": "RE5_m", "RE10": "RE10_m",
    }[objective]


def reconstruct_and_score(model_cfg: DenoiserConfig, params, schedule: DiffusionSchedule,
                          tree: KinematicTree, trial: Trial, config: ft.SensorConfig,
                          spread: StepSpread, seed: int = 0, variant: str = "renoise",
                          root_correction: bool = True) -> tuple[MetricsReport, MotionSequence, list]:
    """Full autoregressive reconstruction of one trial plus metrics."""
    recon = Reconstructor(model_cfg, params, schedule, tree, config,
                          height=trial.motion.height, spread=spread, seed=seed,
                          variant=variant, root_correction=root_correction)
    rot, root, results = reconstruct_trial(recon, trial, config)
    rec = MotionSequence(20.0, rot, root, trial.motion.height, trial.motion.mass,
                         trial.trial_id)
    rec = align_at_start(trial.motion, rec)
    report = compute_metrics(trial.motion, rec, tree)
    return report, rec, results


def sweep_configs(model_cfg: DenoiserConfig, params, schedule: DiffusionSchedule,
                  tree: KinematicTree, trials: list[Trial], configs: list[ft.SensorConfig],
                  objectives: list[str], spread: StepSpread, seed: int = 0) -> SweepResult:
    """Reconstruct every trial under every config; aggregate and rank."""
    entries: dict[str, SweepEntry] = {}
    for config in configs:
        reports = []
        latencies = []
        for trial in trials:
            rep, _, results = reconstruct_and_score(model_cfg, params, schedule, tree,
                                                    trial, config, spread, seed=seed)
            reports.append(rep)
            latencies.extend(r.latency_ms for r in results)
        entries[config.label()] = SweepEntry(
            config=config, per_trial=reports, aggregate=aggregate_reports(reports),
            mean_latency_ms=float(np.mean(latencies)),
        )
    rankings = {obj: rank_configs(entries, obj) for obj in objectives}
    return SweepResult(entries=entries, rankings=rankings)


def save_report(path: str | Path, payload: dict) -> None:
    payload = {"format": REPORT_FORMAT, "version": REPORT_VERSION, **payload}
    Path(path).write_text(json.dumps(payload, indent=1, allow_nan=True) + "\n")


def load_report(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != REPORT_FORMAT:
        raise MetricsError(f"not a report file: {doc.get('format')!r}")
    return doc
