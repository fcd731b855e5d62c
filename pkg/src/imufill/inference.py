"""Real-time autoregressive reconstruction from streaming sparse sensors.

Each 20 Hz step: write the new observation into the last frame of the
rolling 61-frame window (unobserved channels seeded from the previous
frame), run inpainting denoising over the configured step spread, take
the generated channels of the last frame alongside the measured ones,
correct the root displacement from predicted contacts, decode a pose,
and shift the emitted frame into history.

The inpainting loop follows the renoise-and-edit algorithm literally:
every iteration renoises the current estimate at the step's noise level,
predicts a clean window, and freezes observed channels back to the
input. A deterministic DDIM-style variant is available behind
`variant="ddim"`; it keeps a running latent and only edits the
prediction, matching the cited fast-sampling scheme instead.

Wire formats (JSON lines, versioned by a header record):

  input, 60 Hz  {"format": "imu-stream", "version": 1, "rate_hz": 60}
                {"t_ms": 0, "sites": {"pelvis": {"q": [w,x,y,z],
                 "a": [ax,ay,az]}, ...}, "insoles": [1,0,1,1]}
                absent sites mean per-sensor dropout for that frame;
                "insoles" is optional.

  output, 20 Hz {"format": "pose-stream", "version": 1, "rate_hz": 20,
                 "segments": [... 24 names ...]}
                {"t_ms": 0, "root": [x,y,z], "q": [[w,x,y,z] x 24],
                 "contact": [c0,c1,c2,c3], "latency_ms": 1.2}
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import features as ft
from .diffusion import DenoiserConfig, DiffusionSchedule, FastDenoiser
from .kinematics import (
    KinematicTree,
    Pose,
    decode_rot6d,
    encode_rot6d,
    global_to_local,
    quat_to_rot,
    rot_to_quat,
)
from .tensor import ContractError

STREAM_IN_FORMAT = "imu-stream"
STREAM_OUT_FORMAT = "pose-stream"
STREAM_VERSION = 1
CONTACT_THRESHOLD = 0.5


class SpreadError(ValueError):
    pass


class InferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class StepSpread:
    """Ordered denoising step indices, strictly decreasing and ending at 0."""

    steps: tuple[int, ...]

    def __post_init__(self):
        s = self.steps
        if len(s) < 1 or s[-1] != 0:
            raise SpreadError(f"spread must end at 0, got {s}")
        if any(a <= b for a, b in zip(s, s[1:])):
            raise SpreadError(f"spread must be strictly decreasing, got {s}")

    def __len__(self):
        return len(self.steps)

    @staticmethod
    def like_10d(n: int, T: int = 1000) -> "StepSpread":
        """Irregular spacing in the 10D style: a linear sweep from T down
        to T/10, then a sparse low-noise tail (T/100, T/500, 0).

        For very small T colliding entries are squeezed downward, so the
        result may be shorter than n.
        """
        if n < 2:
            raise SpreadError("need at least 2 steps")
        if n == 2:
            cand = [T, 0]
        elif n == 3:
            cand = [T, round(T * 0.01), 0]
        else:
            head = np.round(np.linspace(T, T * 0.1, n - 3)).astype(int).tolist()
            cand = head + [round(T * 0.01), round(T * 0.002), 0]
        out: list[int] = []
        for v in cand:
            v = int(v) if not out else min(int(v), out[-1] - 1)
            if v < 0:
                break
            out.append(v)
        if out[-1] != 0:
            out.append(0)
        return StepSpread(tuple(out))

    @staticmethod
    def parse(text: str, T: int = 1000) -> "StepSpread":
        """Named presets (10A/10B/10C/10D), a step count, or an explicit
        comma/slash-separated descending list."""
        text = text.strip()
        presets = {
            "10A": tuple(range(9, -1, -1)),
            "10B": tuple(range(18, -1, -2)),
            "10C": (100, 56, 32, 18, 10, 6, 3, 2, 1, 0),
            "10D": (1000, 850, 700, 550, 400, 250, 100, 10, 2, 0),
        }
        if text.upper() in presets:
            return StepSpread(presets[text.upper()])
        if text.isdigit():
            return StepSpread.like_10d(int(text), T)
        sep = "/" if "/" in text else ","
        return StepSpread(tuple(int(x) for x in text.split(sep)))


def inpaint_denoise(
    model: FastDenoiser,
    schedule: DiffusionSchedule,
    x_input: np.ndarray,
    mask: np.ndarray,
    h: float,
    spread: StepSpread,
    rng: np.random.Generator,
    variant: str = "renoise",
) -> np.ndarray:
    """Generate the unmasked channels of x_input; masked channels (mask=1)
    pass through bit-exactly."""
    x_input = np.asarray(x_input)
    if x_input.shape != (ft.WINDOW_LEN, ft.FRAME_DIM):
        raise ContractError(f"x_input shape {x_input.shape}")
    if mask.shape != x_input.shape:
        raise ContractError(f"mask shape {mask.shape} != {x_input.shape}")
    if spread.steps[0] > schedule.T:
        raise SpreadError(f"spread starts at {spread.steps[0]} > T={schedule.T}")
    keep = mask > 0.5
    dtype = model.dtype
    xin = x_input.astype(dtype)
    if variant == "renoise":
        x = xin
        for t in spread.steps:
            ab = schedule.alpha_bar[t]
            z = np.sqrt(ab, dtype=dtype) * x + np.sqrt(1.0 - ab, dtype=dtype) * rng.standard_normal(
                x.shape, dtype=dtype
            )
            x0 = model.predict(z, t, h)
            if not np.isfinite(x0).all():
                raise InferenceError(f"non-finite denoiser output at step t={t}")
            x = np.where(keep, xin, x0)
        out = x
    elif variant == "ddim":
        t0 = spread.steps[0]
        ab0 = schedule.alpha_bar[t0]
        z = np.sqrt(ab0, dtype=dtype) * xin + np.sqrt(1.0 - ab0, dtype=dtype) * rng.standard_normal(
            xin.shape, dtype=dtype
        )
        out = xin
        for i, t in enumerate(spread.steps):
            x0 = model.predict(z, t, h)
            if not np.isfinite(x0).all():
                raise InferenceError(f"non-finite denoiser output at step t={t}")
            edited = np.where(keep, xin, x0)
            if t == spread.steps[-1]:
                out = edited
                break
            ab = schedule.alpha_bar[t]
            ab_next = schedule.alpha_bar[spread.steps[i + 1]]
            eps_hat = (z - np.sqrt(ab, dtype=dtype) * edited) / np.sqrt(1.0 - ab, dtype=dtype)
            z = np.sqrt(ab_next, dtype=dtype) * edited + np.sqrt(1.0 - ab_next, dtype=dtype) * eps_hat
    else:
        raise ValueError(f"unknown variant {variant!r}")
    # the final edit froze observed channels; make the pass-through exact
    # in the input's own dtype as well
    result = x_input.copy()
    np.copyto(result, out, where=~keep)
    return result


def root_correct(
    prev_frame: np.ndarray,
    cur_frame: np.ndarray,
    tree: KinematicTree,
    threshold: float = CONTACT_THRESHOLD,
) -> np.ndarray:
    """Corrected horizontal root step for cur_frame.

    Subtracts the mean world-horizontal displacement of the contact
    points predicted to be in contact; with one such point that point
    becomes exactly static, with several only their mean does.
    """
    dp = cur_frame[ft.DP_OFF:ft.DP_OFF + 2].copy()
    b = cur_frame[ft.B_OFF:ft.B_OFF + ft.B_LEN]
    in_contact = b >= threshold
    if not in_contact.any():
        return dp
    prev_xz = _contact_xz(prev_frame, tree)
    cur_xz = _contact_xz(cur_frame, tree)
    disp = (cur_xz - prev_xz) + dp[None, :]
    return dp - disp[in_contact].mean(axis=0)


def _contact_xz(frame: np.ndarray, tree: KinematicTree) -> np.ndarray:
    """Root-relative horizontal contact-point positions for one frame."""
    from .kinematics import forward_kinematics

    g6 = frame[ft.R_OFF:ft.R_OFF + ft.R_LEN].reshape(ft.N_SEGMENTS, 6)
    globals_ = decode_rot6d(g6, strict=False)
    locals_ = global_to_local(tree, globals_)
    fk = forward_kinematics(tree, locals_, np.zeros(3))
    return fk.contacts[:, [0, 2]]


@dataclass
class StepResult:
    pose: Pose
    frame: np.ndarray        # emitted 190-channel feature frame
    contacts: np.ndarray     # (4,) predicted probabilities, clipped to [0, 1]
    latency_ms: float
    index: int


class Reconstructor:
    """Single-session autoregressive reconstruction state machine.

    Not thread-safe; one reconstruction loop per instance. Deterministic
    for a fixed seed and measurement stream.
    """

    def __init__(
        self,
        model_cfg: DenoiserConfig,
        params,
        schedule: DiffusionSchedule,
        tree: KinematicTree,
        config: ft.SensorConfig,
        height: float,
        spread: StepSpread | None = None,
        seed: int = 0,
        variant: str = "renoise",
        root_correction: bool = True,
        dtype=np.float32,
    ):
        self.cfg = model_cfg
        self.fast = params if isinstance(params, FastDenoiser) else FastDenoiser(model_cfg, params, dtype=dtype)
        self.schedule = schedule
        self.tree = tree
        self.scaled_tree = tree.scaled(height)
        self.config = config
        self.height = float(height)
        self.spread = spread or StepSpread.like_10d(30, schedule.T)
        if self.spread.steps[0] > schedule.T:
            raise SpreadError(f"spread exceeds schedule T={schedule.T}")
        self.rng = np.random.default_rng([seed, 606])
        self.variant = variant
        self.root_correction = root_correction
        self.window: np.ndarray | None = None
        self.frame_index = 0
        self.root_xz = np.zeros(2)
        self.latencies_ms: list[float] = []

    def cold_start(self, measurement: ft.Measurement | None = None) -> None:
        """Fill the window with a neutral standing frame; write the first
        observation (if any) into the last frame."""
        neutral = ft.neutral_frame(self.tree, self.height)
        self.window = np.tile(neutral, (ft.WINDOW_LEN, 1))
        if measurement is not None:
            self.window, _ = ft.apply_observation(self.window, measurement, self.tree, self.config)
        self.frame_index = 0
        self.root_xz = np.zeros(2)
        self.latencies_ms = []

    def step(self, measurement: ft.Measurement | None = None) -> StepResult:
        """Consume one 20 Hz observation (None = total signal loss)."""
        t0 = time.perf_counter()
        if measurement is None:
            measurement = ft.Measurement()
        if self.window is None:
            self.cold_start(measurement)
        shifted = np.concatenate([self.window[1:], self.window[-1:]], axis=0)
        x_input, mask = ft.apply_observation(shifted, measurement, self.tree, self.config)
        out = inpaint_denoise(self.fast, self.schedule, x_input, mask, self.height,
                              self.spread, self.rng, variant=self.variant)
        emitted = out[-1].copy()
        if self.root_correction:
            emitted[ft.DP_OFF:ft.DP_OFF + 2] = root_correct(self.window[-1], emitted, self.scaled_tree)
        pose, contacts = self._decode(emitted)
        self.window = np.concatenate([x_input[:-1], emitted[None]], axis=0)
        self.frame_index += 1
        latency = (time.perf_counter() - t0) * 1e3
        self.latencies_ms.append(latency)
        return StepResult(pose=pose, frame=emitted, contacts=contacts,
                          latency_ms=latency, index=self.frame_index - 1)

    def _decode(self, frame: np.ndarray) -> tuple[Pose, np.ndarray]:
        g6 = frame[ft.R_OFF:ft.R_OFF + ft.R_LEN].reshape(ft.N_SEGMENTS, 6)
        globals_ = decode_rot6d(g6, strict=False)
        locals_ = global_to_local(self.tree, globals_)
        self.root_xz = self.root_xz + frame[ft.DP_OFF:ft.DP_OFF + 2]
        root = np.array([self.root_xz[0], frame[ft.PY_OFF], self.root_xz[1]])
        contacts = np.clip(frame[ft.B_OFF:ft.B_OFF + ft.B_LEN], 0.0, 1.0)
        return Pose(rotations=locals_, root_position=root), contacts

    def latency_percentiles(self) -> dict[str, float]:
        if not self.latencies_ms:
            return {"p50": float("nan"), "p95": float("nan")}
        arr = np.array(self.latencies_ms)
        return {"p50": float(np.percentile(arr, 50)), "p95": float(np.percentile(arr, 95))}


# -- measurement sources -------------------------------------------------


def measurements_from_trial(trial, config: ft.SensorConfig, drop: np.ndarray | None = None):
    """Per-frame Measurements replaying a dataset trial's synthesized
    signals through a sensor config. drop: optional (T,) bool, True = all
    sensors lost that frame."""
    T = trial.motion.n_frames
    orient6d = encode_rot6d(trial.site_rotations)  # (T, 13, 6)
    site_idx = {n: i for i, n in enumerate(ALL_SITE_NAMES)}
    for k in range(T):
        if drop is not None and drop[k]:
            yield ft.Measurement()
            continue
        m = ft.Measurement(
            site_orient6d={n: orient6d[k, site_idx[n]] for n in config.imu_sites},
            site_accel={n: trial.site_accels[k, site_idx[n]] for n in config.imu_sites},
            insole_labels=trial.contacts[k].astype(np.float64) if config.insoles else None,
        )
        yield m


ALL_SITE_NAMES = ft.ALL_SITES


def reconstruct_trial(recon: Reconstructor, trial, config: ft.SensorConfig,
                      drop: np.ndarray | None = None) -> tuple["np.ndarray", "np.ndarray", list[StepResult]]:
    """Cold-start + step through a trial; returns (local rotations
    (T,24,3,3), root positions (T,3), per-step results)."""
    results = []
    recon.cold_start()
    for meas in measurements_from_trial(trial, config, drop=drop):
        results.append(recon.step(meas))
    rot = np.stack([r.pose.rotations for r in results])
    root = np.stack([r.pose.root_position for r in results])
    return rot, root, results


# -- 60 Hz stream ingestion ---------------------------------------------


@dataclass
class StreamFrame:
    t_ms: float
    sites: dict[str, tuple[np.ndarray, np.ndarray]]  # name -> (quat wxyz, accel xyz)
    insoles: np.ndarray | None = None


@dataclass
class IngestedMeasurement:
    t_ms: float
    measurement: ft.Measurement
    latency_frames: int = 5  # centered filter needs 5 future frames (~83 ms)


class StreamIngestor:
    """60 Hz sensor records -> 20 Hz Measurements.

    Accelerations get the centered 11-frame moving average (windows with
    dropped frames average over what is present); both channels are
    decimated by 3. A site absent at a decimation instant is dropped
    from that Measurement. Out-of-order timestamps are discarded with a
    warning. Output lags input by 5 raw frames.
    """

    def __init__(self, smooth_window: int = 11, decimation: int = 3):
        if smooth_window % 2 != 1:
            raise ValueError("smoothing window must be odd")
        self.half = smooth_window // 2
        self.decimation = decimation
        self.frames: list[StreamFrame] = []
        self.last_ms = -np.inf
        self.next_out = 0  # index of next decimation instant

    def push(self, frame: StreamFrame) -> list[IngestedMeasurement]:
        if frame.t_ms <= self.last_ms:
            warnings.warn(f"out-of-order stream frame at t={frame.t_ms} ms dropped")
            return []
        self.last_ms = frame.t_ms
        self.frames.append(frame)
        return self._drain(final=False)

    def finish(self) -> list[IngestedMeasurement]:
        """Flush instants still waiting for future frames (edge padding)."""
        return self._drain(final=True)

    def _drain(self, final: bool) -> list[IngestedMeasurement]:
        out = []
        n = len(self.frames)
        while self.next_out < n:
            center = self.next_out
            if not final and center + self.half >= n:
                break
            out.append(self._emit(center))
            self.next_out += self.decimation
        return out

    def _emit(self, center: int) -> IngestedMeasurement:
        frames = self.frames
        ref = frames[center]
        lo = max(center - self.half, 0)
        hi = min(center + self.half, len(frames) - 1)
        meas = ft.Measurement(site_orient6d={}, site_accel={},
                              insole_labels=None if ref.insoles is None else np.asarray(ref.insoles, float))
        for name, (quat, _acc) in ref.sites.items():
            acc_parts = [frames[i].sites[name][1] for i in range(lo, hi + 1) if name in frames[i].sites]
            # edge replication: extend with boundary values when the window
            # sticks out of the recorded range
            pad_lo = self.half - (center - lo)
            pad_hi = self.half - (hi - center)
            if acc_parts:
                first, last = acc_parts[0], acc_parts[-1]
                acc_parts = [first] * pad_lo + acc_parts + [last] * pad_hi
            acc = np.mean(acc_parts, axis=0)
            meas.site_orient6d[name] = encode_rot6d(quat_to_rot(np.asarray(quat, float)))
            meas.site_accel[name] = acc
        return IngestedMeasurement(t_ms=ref.t_ms, measurement=meas, latency_frames=self.half)


# -- JSONL wire formats ------------------------------------------------------


def parse_stream_file(path) -> list[StreamFrame]:
    frames = []
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("format") != STREAM_IN_FORMAT or header.get("version") != STREAM_VERSION:
            raise InferenceError(f"not a v{STREAM_VERSION} {STREAM_IN_FORMAT} file: {header}")
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            sites = {
                name: (np.array(v["q"], dtype=float), np.array(v["a"], dtype=float))
                for name, v in rec.get("sites", {}).items()
            }
            ins = rec.get("insoles")
            frames.append(StreamFrame(
                t_ms=float(rec["t_ms"]), sites=sites,
                insoles=None if ins is None else np.array(ins, dtype=float),
            ))
    return frames


def write_stream_file(path, frames: list[StreamFrame]) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({"format": STREAM_IN_FORMAT, "version": STREAM_VERSION, "rate_hz": 60}) + "\n")
        for fr in frames:
            rec = {
                "t_ms": fr.t_ms,
                "sites": {
                    n: {"q": np.round(q, 9).tolist(), "a": np.round(a, 9).tolist()}
                    for n, (q, a) in fr.sites.items()
                },
            }
            if fr.insoles is not None:
                rec["insoles"] = [int(x) for x in fr.insoles]
            f.write(json.dumps(rec) + "\n")


def stream_frames_from_trial(trial, config: ft.SensorConfig, tree: KinematicTree,
                             drop_ranges: list[tuple[int, int]] | None = None) -> list[StreamFrame]:
    """Simulated 60 Hz wire input for a (20 Hz) dataset trial.

    Each stored 20 Hz sample is emitted at its native instant plus two
    zero-order-hold repeats, carrying raw (unsmoothed) accelerations is
    not possible from a stored trial, so the stored smoothed values are
    used; this keeps round trips deterministic. drop_ranges are raw
    frame index intervals [a, b) with all sensors absent.
    """
    site_idx = {n: i for i, n in enumerate(ft.ALL_SITES)}
    frames = []
    T = trial.motion.n_frames
    for k in range(T):
        q = rot_to_quat(trial.site_rotations[k])
        for rep in range(3):
            idx = k * 3 + rep
            if drop_ranges and any(a <= idx < b for a, b in drop_ranges):
                frames.append(StreamFrame(t_ms=idx * 1000.0 / 60.0, sites={}))
                continue
            sites = {
                n: (q[site_idx[n]], trial.site_accels[k, site_idx[n]])
                for n in config.imu_sites
            }
            ins = trial.contacts[k].astype(float) if config.insoles else None
            frames.append(StreamFrame(t_ms=idx * 1000.0 / 60.0, sites=sites, insoles=ins))
    return frames


def write_pose_stream(path, tree: KinematicTree, results: list[StepResult],
                      rate_hz: float = 20.0) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({
            "format": STREAM_OUT_FORMAT, "version": STREAM_VERSION,
            "rate_hz": rate_hz, "segments": list(tree.names),
        }) + "\n")
        for r in results:
            quats = rot_to_quat(r.pose.rotations)
            f.write(json.dumps({
                "t_ms": round(r.index * 1000.0 / rate_hz, 3),
                "root": np.round(r.pose.root_position, 9).tolist(),
                "q": np.round(quats, 9).tolist(),
                "contact": np.round(r.contacts, 6).tolist(),
                "latency_ms": round(r.latency_ms, 3),
            }) + "\n")


def read_pose_stream(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """-> (local rotations (T,24,3,3), root positions (T,3), contacts (T,4))."""
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("format") != STREAM_OUT_FORMAT or header.get("version") != STREAM_VERSION:
            raise InferenceError(f"not a v{STREAM_VERSION} {STREAM_OUT_FORMAT} file: {header}")
        rots, roots, contacts = [], [], []
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            rots.append(quat_to_rot(np.array(rec["q"], dtype=float)))
            roots.append(np.array(rec["root"], dtype=float))
            contacts.append(np.array(rec["contact"], dtype=float))
    return np.stack(rots), np.stack(roots), np.stack(contacts)
