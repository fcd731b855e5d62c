"""Kinematic tree, rotation representations, and forward kinematics.

The default skeleton is a 24-segment rigid body in the SMPL topology with
13 instrumentable sensor sites and 4 foot contact points (heel/toe per
side), loaded from a versioned JSON file. Everything here is a pure
function over immutable trees and is batched over arbitrary leading axes:
rotations are (..., 24, 3, 3), positions (..., 3). +y is up; the ground
plane is y = 0.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

SKELETON_FORMAT = "imufill-skeleton"
SKELETON_VERSION = 1
N_SITES = 13
N_CONTACTS = 4


class SkeletonError(ValueError):
    """Skeleton file is malformed or violates tree invariants."""


class DegenerateRotationError(ValueError):
    """6-DOF rotation input is too close to singular to orthonormalize."""


@dataclass(frozen=True)
class KinematicTree:
    names: tuple[str, ...]
    parents: np.ndarray          # (S,) int, parents[root] == -1
    offsets: np.ndarray          # (S, 3) meters, parent frame
    mass_fractions: np.ndarray   # (S,), sums to 1
    site_names: tuple[str, ...]
    site_segments: np.ndarray    # (13,) int
    site_offsets: np.ndarray     # (13, 3) meters, segment frame
    contact_names: tuple[str, ...]
    contact_segments: np.ndarray  # (4,) int
    contact_offsets: np.ndarray   # (4, 3)
    reference_height: float = 1.75

    @property
    def n_segments(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def site_index(self, name: str) -> int:
        return self.site_names.index(name)

    def scaled(self, height: float) -> "KinematicTree":
        """Linearly scale all offsets to a subject of the given height."""
        s = float(height) / self.reference_height
        return replace(
            self,
            offsets=self.offsets * s,
            site_offsets=self.site_offsets * s,
            contact_offsets=self.contact_offsets * s,
            reference_height=float(height),
        )

    def masses(self, subject_mass: float) -> np.ndarray:
        return self.mass_fractions * float(subject_mass)

    def validate(self) -> None:
        p = self.parents
        if (p == -1).sum() != 1 or p[0] != -1:
            raise SkeletonError("expected exactly one root at index 0")
        if not all(p[i] < i for i in range(1, len(p))):
            raise SkeletonError("segments must be topologically ordered (parent < child)")
        if len(self.site_segments) != N_SITES:
            raise SkeletonError(f"expected {N_SITES} instrumentable sites, got {len(self.site_segments)}")
        if len(self.contact_segments) != N_CONTACTS:
            raise SkeletonError(f"expected {N_CONTACTS} contact points, got {len(self.contact_segments)}")
        if not np.isfinite(self.offsets).all() or not np.isfinite(self.site_offsets).all():
            raise SkeletonError("offsets must be finite")
        if (self.mass_fractions <= 0).any():
            raise SkeletonError("mass fractions must be positive")
        if abs(self.mass_fractions.sum() - 1.0) > 1e-6:
            raise SkeletonError(f"mass fractions sum to {self.mass_fractions.sum():.6f}, expected 1")


@dataclass(frozen=True)
class Pose:
    """Local joint rotations (index 0 = root orientation) plus root position."""

    rotations: np.ndarray      # (S, 3, 3) local; [0] is the root's world orientation
    root_position: np.ndarray  # (3,) meters, world frame


def load_skeleton(path: str | Path) -> KinematicTree:
    with open(path) as f:
        doc = json.load(f)
    return _tree_from_doc(doc)


def _tree_from_doc(doc: dict) -> KinematicTree:
    if doc.get("format") != SKELETON_FORMAT:
        raise SkeletonError(f"not a skeleton file (format={doc.get('format')!r})")
    if doc.get("version") != SKELETON_VERSION:
        raise SkeletonError(f"unsupported skeleton version {doc.get('version')!r}")
    segs = doc["segments"]
    names = tuple(s["name"] for s in segs)
    by_name = {n: i for i, n in enumerate(names)}
    if len(by_name) != len(names):
        raise SkeletonError("duplicate segment names")
    tree = KinematicTree(
        names=names,
        parents=np.array([s["parent"] for s in segs], dtype=np.int64),
        offsets=np.array([s["offset"] for s in segs], dtype=np.float64),
        mass_fractions=np.array([s["mass_fraction"] for s in segs], dtype=np.float64),
        site_names=tuple(s["name"] for s in doc["sites"]),
        site_segments=np.array([by_name[s["segment"]] for s in doc["sites"]], dtype=np.int64),
        site_offsets=np.array([s["offset"] for s in doc["sites"]], dtype=np.float64),
        contact_names=tuple(c["name"] for c in doc["contact_points"]),
        contact_segments=np.array([by_name[c["segment"]] for c in doc["contact_points"]], dtype=np.int64),
        contact_offsets=np.array([c["offset"] for c in doc["contact_points"]], dtype=np.float64),
        reference_height=float(doc["reference_height_m"]),
    )
    tree.validate()
    return tree


def default_tree(height: float | None = None) -> KinematicTree:
    with resources.files("imufill.data").joinpath("skeleton_default24.json").open() as f:
        tree = _tree_from_doc(json.load(f))
    return tree if height is None else tree.scaled(height)


def skeleton_hash(tree: KinematicTree) -> str:
    """Stable digest of the tree's geometry, used to pin checkpoints."""
    blob = json.dumps(
        {
            "names": tree.names,
            "parents": tree.parents.tolist(),
            "offsets": np.round(tree.offsets, 12).tolist(),
            "mass_fractions": np.round(tree.mass_fractions, 12).tolist(),
            "site_segments": tree.site_segments.tolist(),
            "site_offsets": np.round(tree.site_offsets, 12).tolist(),
            "contact_segments": tree.contact_segments.tolist(),
            "contact_offsets": np.round(tree.contact_offsets, 12).tolist(),
            "reference_height": round(tree.reference_height, 12),
        },
        sort_keys=True,
    ).encode()
    return hashlib.sha256(blob).hexdigest()


# -- 6-DOF rotation representation -----------------------------------------


def encode_rot6d(R: np.ndarray) -> np.ndarray:
    """First two columns of R, column-major: (..., 3, 3) -> (..., 6)."""
    R = np.asarray(R)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def decode_rot6d(r6: np.ndarray, strict: bool = True, eps: float = 1e-8) -> np.ndarray:
    """Gram-Schmidt the two encoded columns back into a rotation matrix.

    Output is orthonormal with det +1 even for non-orthonormal input.
    With strict=True, near-zero or near-parallel columns raise
    DegenerateRotationError; strict=False clamps norms at eps instead
    (used on raw network output inside losses).
    """
    r6 = np.asarray(r6, dtype=np.float64)
    a1, a2 = r6[..., :3], r6[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if strict and (n1 < eps).any():
        raise DegenerateRotationError("first 6-DOF column has near-zero norm")
    b1 = a1 / np.maximum(n1, eps)
    proj = (b1 * a2).sum(axis=-1, keepdims=True)
    u2 = a2 - proj * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if strict:
        n2full = np.linalg.norm(a2, axis=-1, keepdims=True)
        if (n2full < eps).any():
            raise DegenerateRotationError("second 6-DOF column has near-zero norm")
        cosang = np.abs(proj / np.maximum(n2full, eps))
        if (cosang > 1.0 - 1e-8).any():
            raise DegenerateRotationError("6-DOF columns are near-parallel")
    b2 = u2 / np.maximum(n2, eps)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


# -- quaternions (wxyz) ---------------------------------------------------


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (wxyz), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    Rf = R.reshape((-1, 3, 3))
    q = np.empty((Rf.shape[0], 4))
    t = np.trace(Rf, axis1=-2, axis2=-1)
    for i in range(Rf.shape[0]):  # per-element branch; fine at our sizes
        m = Rf[i]
        tr = t[i]
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            q[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q[q[:, 0] < 0] *= -1
    return q.reshape(batch + (4,))


def rotation_about(axis: str, degrees: float) -> np.ndarray:
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    raise ValueError(f"unknown axis {axis!r}")


# -- forward kinematics ------------------------------------------------------


@dataclass(frozen=True)
class FKResult:
    globals_: np.ndarray    # (..., S, 3, 3) world-frame segment orientations
    joints: np.ndarray      # (..., S, 3) world-frame joint (segment origin) positions
    sites: np.ndarray       # (..., 13, 3)
    contacts: np.ndarray    # (..., 4, 3)


def forward_kinematics(tree: KinematicTree, rotations: np.ndarray, root_position: np.ndarray) -> FKResult:
    """Propagate local rotations through the tree.

    rotations: (..., S, 3, 3) local joint rotations, [.., 0, :, :] being
    the root's world orientation; root_position: (..., 3).
    """
    rotations = np.asarray(rotations, dtype=np.float64)
    root_position = np.asarray(root_position, dtype=np.float64)
    S = tree.n_segments
    if rotations.shape[-3:] != (S, 3, 3):
        raise SkeletonError(f"pose has {rotations.shape} rotations, tree needs (..., {S}, 3, 3)")
    G = np.empty_like(rotations)
    P = np.empty(rotations.shape[:-3] + (S, 3))
    G[..., 0, :, :] = rotations[..., 0, :, :]
    P[..., 0, :] = root_position
    for i in range(1, S):
        p = tree.parents[i]
        G[..., i, :, :] = G[..., p, :, :] @ rotations[..., i, :, :]
        P[..., i, :] = P[..., p, :] + np.einsum("...ij,j->...i", G[..., p, :, :], tree.offsets[i])
    sites = P[..., tree.site_segments, :] + np.einsum(
        "...sij,sj->...si", G[..., tree.site_segments, :, :], tree.site_offsets
    )
    contacts = P[..., tree.contact_segments, :] + np.einsum(
        "...cij,cj->...ci", G[..., tree.contact_segments, :, :], tree.contact_offsets
    )
    return FKResult(globals_=G, joints=P, sites=sites, contacts=contacts)


def global_to_local(tree: KinematicTree, globals_: np.ndarray) -> np.ndarray:
    """Invert the orientation accumulation: G -> local rotations."""
    globals_ = np.asarray(globals_)
    L = np.empty_like(globals_)
    L[..., 0, :, :] = globals_[..., 0, :, :]
    for i in range(1, tree.n_segments):
        p = tree.parents[i]
        L[..., i, :, :] = np.swapaxes(globals_[..., p, :, :], -1, -2) @ globals_[..., i, :, :]
    return L


def local_to_global(tree: KinematicTree, locals_: np.ndarray) -> np.ndarray:
    locals_ = np.asarray(locals_)
    G = np.empty_like(locals_)
    G[..., 0, :, :] = locals_[..., 0, :, :]
    for i in range(1, tree.n_segments):
        p = tree.parents[i]
        G[..., i, :, :] = G[..., p, :, :] @ locals_[..., i, :, :]
    return G


def geodesic_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> np.ndarray:
    """Angle of Ra^-1 Rb in degrees, in [0, 180], trace clamped."""
    Ra, Rb = np.asarray(Ra), np.asarray(Rb)
    rel = np.swapaxes(Ra, -1, -2) @ Rb
    tr = np.clip(np.trace(rel, axis1=-2, axis2=-1), -1.0, 3.0)
    return np.degrees(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))


def identity_pose(tree: KinematicTree) -> Pose:
    """T-pose: all rotations identity, root at standing height over origin."""
    rot = np.broadcast_to(np.eye(3), (tree.n_segments, 3, 3)).copy()
    return Pose(rotations=rot, root_position=np.array([0.0, standing_root_height(tree), 0.0]))


def standing_root_height(tree: KinematicTree, clearance: float = 0.005) -> float:
    """Root height that puts the lowest contact point `clearance` above ground."""
    fk = forward_kinematics(
        tree,
        np.broadcast_to(np.eye(3), (tree.n_segments, 3, 3)).copy(),
        np.zeros(3),
    )
    return float(clearance - fk.contacts[..., 1].min())
