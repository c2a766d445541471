"""SMPL-style parametric body: blendshapes, joint regression, kinematics, skinning.

Everything downstream of ``theta``/``beta`` is built from gradcore ops, so
vertices and joints are differentiable in both. Batched inputs of shape
(N, 3K) / (N, n_beta) are supported alongside single vectors.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .gradcore import Function, Tensor

FORMAT_VERSION = 1
SMALL_ANGLE = 1e-8


class BodyModelError(ValueError):
    """Malformed body-model spec or spec file."""


@dataclass
class BodyModelSpec:
    template_vertices: np.ndarray  # (V, 3), meters
    faces: np.ndarray  # (F, 3) int
    shape_blendshapes: np.ndarray  # (V, 3, n_beta)
    pose_blendshapes: np.ndarray  # (V, 3, 9 * (K - 1))
    joint_regressor: np.ndarray  # (K, V)
    skin_weights: np.ndarray  # (V, K)
    parents: np.ndarray  # (K,), parents[0] == -1
    joint_names: list = field(default_factory=list)
    reference_joints: np.ndarray = None  # optional (K, 3) regressor output on the template

    def __post_init__(self):
        self.template_vertices = np.asarray(self.template_vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.shape_blendshapes = np.asarray(self.shape_blendshapes, dtype=np.float64)
        self.pose_blendshapes = np.asarray(self.pose_blendshapes, dtype=np.float64)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        if self.reference_joints is not None:
            self.reference_joints = np.asarray(self.reference_joints, dtype=np.float64)
        self.validate()
        self._pose_blend_active = bool(np.any(self.pose_blendshapes))

    @property
    def V(self):
        return self.template_vertices.shape[0]

    @property
    def F(self):
        return self.faces.shape[0]

    @property
    def K(self):
        return self.parents.shape[0]

    @property
    def n_beta(self):
        return self.shape_blendshapes.shape[2]

    @property
    def n_theta(self):
        return 3 * self.K

    def validate(self):
        V, K = self.template_vertices.shape[0], self.parents.shape[0]
        if self.template_vertices.ndim != 2 or self.template_vertices.shape[1] != 3:
            raise BodyModelError(f"template_vertices must be (V, 3), got {self.template_vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise BodyModelError(f"faces must be (F, 3), got {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise BodyModelError("faces reference vertex indices out of range")
        if self.shape_blendshapes.ndim != 3 or self.shape_blendshapes.shape[:2] != (V, 3):
            raise BodyModelError(f"shape_blendshapes must be (V, 3, n_beta), got {self.shape_blendshapes.shape}")
        if self.pose_blendshapes.shape != (V, 3, 9 * (K - 1)):
            raise BodyModelError(
                f"pose_blendshapes must be ({V}, 3, {9 * (K - 1)}), got {self.pose_blendshapes.shape}"
            )
        if self.joint_regressor.shape != (K, V):
            raise BodyModelError(f"joint_regressor must be ({K}, {V}), got {self.joint_regressor.shape}")
        if self.skin_weights.shape != (V, K):
            raise BodyModelError(f"skin_weights must be ({V}, {K}), got {self.skin_weights.shape}")
        if np.any(self.skin_weights < 0) or np.any(np.abs(self.skin_weights.sum(axis=1) - 1.0) > 1e-9):
            raise BodyModelError("skin_weights rows must be non-negative and sum to 1")
        if K < 1 or self.parents[0] != -1:
            raise BodyModelError("parents[0] must be -1 (root)")
        for j in range(1, K):
            if not 0 <= self.parents[j] < j:
                raise BodyModelError(f"parents must be topologically ordered; joint {j} has parent {self.parents[j]}")


@dataclass
class BodyParams:
    theta: object  # (3K,) axis-angle, root first
    beta: object  # (n_beta,)


@dataclass
class SMPLOutput:
    vertices: Tensor
    joints3d: Tensor


def _skew(w):
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -w[..., 2], w[..., 1]
    out[..., 1, 0], out[..., 1, 2] = w[..., 2], -w[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -w[..., 1], w[..., 0]
    return out


_BASIS_SKEW = _skew(np.eye(3))  # [e_i]x for i = 0, 1, 2


class Rodrigues(Function):
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3)."""

    name = "rodrigues"

    def forward(self, w):
        if w.shape[-1] != 3:
            raise gc.ShapeError(f"rodrigues expects (..., 3), got {w.shape}")
        theta = np.linalg.norm(w, axis=-1)
        small = theta < SMALL_ANGLE
        safe = np.where(small, 1.0, theta)
        Kx = _skew(w / safe[..., None])
        s, c = np.sin(theta)[..., None, None], np.cos(theta)[..., None, None]
        R = np.eye(3) + s * Kx + (1.0 - c) * (Kx @ Kx)
        if np.any(small):
            Wx = _skew(w)
            R_small = np.eye(3) + Wx + 0.5 * (Wx @ Wx)
            R = np.where(small[..., None, None], R_small, R)
        self.w, self.R, self.theta, self.small = w, R, theta, small
        return R

    def backward(self, g):
        w, R, theta, small = self.w, self.R, self.theta, self.small
        Wx = _skew(w)
        I_minus_R = np.eye(3) - R
        safe2 = np.where(small, 1.0, theta * theta)[..., None, None]
        grad = np.empty(w.shape)
        for i in range(3):
            # d R / d w_i = (w_i [w]x + [w x (I - R) e_i]x) R / |w|^2
            col = I_minus_R[..., :, i]
            big = (w[..., i, None, None] * Wx + _skew(np.cross(w, col))) @ R / safe2
            Ei = _BASIS_SKEW[i]
            tiny = Ei + 0.5 * (Ei @ Wx + Wx @ Ei)
            dR = np.where(small[..., None, None], tiny, big)
            grad[..., i] = (g * dR).sum(axis=(-2, -1))
        return (grad,)


def rodrigues(axis_angle):
    """Differentiable batch Rodrigues formula with a Taylor branch near zero."""
    return Rodrigues.apply(axis_angle)


def rodrigues_np(axis_angle):
    return Rodrigues().forward(np.asarray(axis_angle, dtype=np.float64))


def _as_batch(x, width, what):
    x = gc.as_tensor(x)
    if x.shape[-1] != width:
        raise BodyModelError(f"{what} length {x.shape[-1]} != expected {width}")
    if x.ndim == 1:
        return gc.reshape(x, (1, width)), True
    return x, False


def blend_shape(spec, beta):
    """Shape offsets sum_i beta_i * S[:, :, i]; (V, 3) or (N, V, 3)."""
    b, single = _as_batch(beta, spec.n_beta, "beta")
    basis = spec.shape_blendshapes.reshape(spec.V * 3, spec.n_beta).T
    out = gc.reshape(gc.matmul(b, basis), (b.shape[0], spec.V, 3))
    return gc.reshape(out, (spec.V, 3)) if single else out


def pose_feature(spec, rotations):
    """vec(R_j - I) over non-root joints: (N, K, 3, 3) -> (N, 9 (K - 1))."""
    n = rotations.shape[0]
    rel = gc.getitem(rotations, (slice(None), slice(1, None))) - np.eye(3)
    return gc.reshape(rel, (n, 9 * (spec.K - 1)))


def pose_blend(spec, theta):
    """Pose-corrective offsets driven by non-root joint rotations."""
    th, single = _as_batch(theta, spec.n_theta, "theta")
    n = th.shape[0]
    R = rodrigues(gc.reshape(th, (n, spec.K, 3)))
    basis = spec.pose_blendshapes.reshape(spec.V * 3, 9 * (spec.K - 1)).T
    out = gc.reshape(gc.matmul(pose_feature(spec, R), basis), (n, spec.V, 3))
    return gc.reshape(out, (spec.V, 3)) if single else out


def regress_joints(spec, vertices):
    """J_reg @ vertices for (V, 3) or (N, V, 3) vertices."""
    return gc.matmul(spec.joint_regressor, vertices)


@dataclass
class KinematicsResult:
    global_rotations: Tensor  # (N, K, 3, 3)
    posed_joints: Tensor  # (N, K, 3), translation part of each global transform
    skin_translations: Tensor  # (N, K, 3); skinning transform is [R_glob | skin_t]

    def global_transforms(self):
        """(N, K, 4, 4) arrays G_j."""
        return _homogeneous(self.global_rotations.data, self.posed_joints.data)

    def skinning_transforms(self):
        """(N, K, 4, 4) arrays G_j T(-rest_j) acting on rest-pose points."""
        return _homogeneous(self.global_rotations.data, self.skin_translations.data)


def _homogeneous(R, t):
    out = np.zeros(R.shape[:-2] + (4, 4))
    out[..., :3, :3] = R
    out[..., :3, 3] = t
    out[..., 3, 3] = 1.0
    return out


def _kinematic_chain(parents, rotations, rest_joints):
    # The recursion runs on the skinning translation u_j = t_j - R_glob_j rest_j:
    #   u_0 = rest_0 - R_0 rest_0,  u_j = u_p + R_glob_p (rest_j - R_j rest_j),
    # which is exactly zero at the rest pose, so theta = 0 skins to the identity.
    n, K = rotations.shape[0], rotations.shape[1]
    col = lambda x: gc.reshape(x, (n, 3, 1))
    flat = lambda x: gc.reshape(x, (n, 3))
    Rg, u = [None] * K, [None] * K
    for j in range(K):
        Rj = gc.getitem(rotations, (slice(None), j))
        rest_j = gc.getitem(rest_joints, (slice(None), j))
        local = rest_j - flat(gc.matmul(Rj, col(rest_j)))
        p = int(parents[j])
        if p < 0:
            Rg[j], u[j] = Rj, local
        else:
            Rg[j] = gc.matmul(Rg[p], Rj)
            u[j] = u[p] + flat(gc.matmul(Rg[p], col(local)))
    R_glob = gc.stack(Rg, axis=1)
    skin_t = gc.stack(u, axis=1)
    rotated_rest = gc.reshape(gc.matmul(R_glob, gc.reshape(rest_joints, (n, K, 3, 1))), (n, K, 3))
    return KinematicsResult(R_glob, rotated_rest + skin_t, skin_t)


def forward_kinematics(spec, theta, rest_joints):
    """Global joint transforms for pose ``theta`` about ``rest_joints``.

    G_0 = T(rest_0) R_0 and G_j = G_parent T(rest_j - rest_parent) R_j; the
    skinning transforms are G_j T(-rest_j).
    """
    th, single = _as_batch(theta, spec.n_theta, "theta")
    n = th.shape[0]
    rest = gc.as_tensor(rest_joints)
    if rest.ndim == 2:
        rest = gc.reshape(rest, (1,) + rest.shape)
    if rest.shape[0] != n:
        rest = gc.as_tensor(np.broadcast_to(rest.data, (n,) + rest.shape[1:]).copy()) if not rest.requires_grad else rest
    R = rodrigues(gc.reshape(th, (n, spec.K, 3)))
    return _kinematic_chain(spec.parents, R, rest)


def smpl_forward(spec, params, with_vertices=True):
    """Posed mesh and joints: T0 + Bs(beta) + Bp(theta), skinned by LBS.

    Returns (V, 3)/(K, 3) for single parameter vectors, (N, V, 3)/(N, K, 3)
    for batches. ``with_vertices=False`` skips skinning and leaves
    ``vertices`` as None.
    """
    th, single_t = _as_batch(params.theta, spec.n_theta, "theta")
    be, single_b = _as_batch(params.beta, spec.n_beta, "beta")
    n = th.shape[0]
    if be.shape[0] != n:
        raise BodyModelError(f"theta batch {n} != beta batch {be.shape[0]}")
    V, K = spec.V, spec.K

    shaped = spec.template_vertices + blend_shape(spec, be)
    rest_joints = regress_joints(spec, shaped)
    R = rodrigues(gc.reshape(th, (n, K, 3)))
    if spec._pose_blend_active:
        basis = spec.pose_blendshapes.reshape(V * 3, 9 * (K - 1)).T
        shaped_posed = shaped + gc.reshape(gc.matmul(pose_feature(spec, R), basis), (n, V, 3))
    else:
        shaped_posed = shaped

    kin = _kinematic_chain(spec.parents, R, rest_joints)
    if not with_vertices:
        joints = kin.posed_joints
        return SMPLOutput(None, gc.reshape(joints, (K, 3)) if single_t and single_b else joints)
    per_joint = gc.concat([gc.reshape(kin.global_rotations, (n, K, 9)), kin.skin_translations], axis=-1)
    blended = gc.matmul(spec.skin_weights, per_joint)  # (N, V, 12)
    Rv = gc.reshape(gc.getitem(blended, (Ellipsis, slice(0, 9))), (n, V, 3, 3))
    tv = gc.getitem(blended, (Ellipsis, slice(9, 12)))
    verts = gc.reshape(gc.matmul(Rv, gc.reshape(shaped_posed, (n, V, 3, 1))), (n, V, 3)) + tv
    joints = kin.posed_joints
    if single_t and single_b:
        return SMPLOutput(gc.reshape(verts, (V, 3)), gc.reshape(joints, (K, 3)))
    return SMPLOutput(verts, joints)


def smpl_forward_np(spec, theta, beta):
    """Convenience wrapper returning plain arrays, without recording a tape."""
    with gc.no_grad():
        out = smpl_forward(spec, BodyParams(np.asarray(theta, float), np.asarray(beta, float)))
    return out.vertices.data, out.joints3d.data


# --- procedural mini model ---------------------------------------------------

MINI_JOINT_NAMES = [
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
]
MINI_PARENTS = [-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14]
_RING = 8
_BLEND_ZONE = 0.2


def _mini_skeleton(rng):
    # left side is +x; the figure faces +z with y up, pelvis at the origin
    arm, leg, torso = 1.0 + 0.02 * rng.standard_normal(3) if rng is not None else (1.0, 1.0, 1.0)
    J = np.zeros((16, 3))
    J[1] = (0.0, 0.22 * torso, 0.0)
    J[2] = (0.0, 0.50 * torso, 0.0)
    J[3] = (0.0, 0.50 * torso + 0.10, 0.0)
    shoulder = np.array([0.17, 0.46 * torso, 0.0])
    J[4] = shoulder
    J[5] = shoulder + arm * np.array([0.16, -0.22, 0.0])
    J[6] = J[5] + arm * np.array([0.14, -0.20, 0.0])
    hip = np.array([0.09, -0.06, 0.0])
    J[10] = hip
    J[11] = hip + leg * np.array([0.01, -0.41, 0.0])
    J[12] = J[11] + leg * np.array([0.0, -0.39, 0.0])
    for left, right in ((4, 7), (5, 8), (6, 9), (10, 13), (11, 14), (12, 15)):
        J[right] = J[left] * np.array([-1.0, 1.0, 1.0])
    tips = {
        3: J[3] + np.array([0.0, 0.20, 0.0]),
        6: J[6] + arm * np.array([0.06, -0.09, 0.0]),
        9: None,
        12: J[12] + leg * np.array([0.0, -0.05, 0.14]),
        15: None,
    }
    tips[9] = tips[6] * np.array([-1.0, 1.0, 1.0])
    tips[15] = tips[12] * np.array([-1.0, 1.0, 1.0])
    return J, tips


# owner joint -> (child joint or None, radius, rings)
_SEGMENTS = {
    0: (1, 0.12, 5), 1: (2, 0.14, 5), 2: (3, 0.05, 3), 3: (None, 0.09, 5),
    4: (5, 0.045, 4), 5: (6, 0.038, 4), 6: (None, 0.03, 3),
    7: (8, 0.045, 4), 8: (9, 0.038, 4), 9: (None, 0.03, 3),
    10: (11, 0.065, 5), 11: (12, 0.048, 5), 12: (None, 0.035, 3),
    13: (14, 0.065, 5), 14: (15, 0.048, 5), 15: (None, 0.035, 3),
}
_LIMB_ROOT = {4: 4, 5: 4, 6: 4, 7: 7, 8: 7, 9: 7, 10: 10, 11: 10, 12: 10, 13: 13, 14: 13, 15: 13}
_UPPER_BODY = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}
_MIRROR_OF = {7: 4, 8: 5, 9: 6, 13: 10, 14: 11, 15: 12}
_MIRROR = np.array([-1.0, 1.0, 1.0])


def _frame(d):
    ref = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = ref - d * (ref @ d)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def make_mini_model(seed=0):
    """Procedural 16-joint humanoid: capsules around bones, 4 shape directions.

    Bilaterally symmetric about x = 0; pose blendshapes are zero.
    """
    rng = np.random.default_rng(seed) if seed else None
    J, tips = _mini_skeleton(rng)
    parents = np.array(MINI_PARENTS)
    K = 16
    frames = {}
    verts, faces, weights, radial, t_along, owners, reg_rows = [], [], [], [], [], [], {}
    for a in range(K):
        child, radius, n_rings = _SEGMENTS[a]
        start = J[a]
        end = J[child] if child is not None else tips[a]
        axis = end - start
        length = np.linalg.norm(axis)
        d = axis / length
        mirrored = a in _MIRROR_OF
        if mirrored:
            # reflected left-side frame: right-side rings are exact mirror images
            u, w = frames[_MIRROR_OF[a]] * _MIRROR
        else:
            u, w = _frame(d)
        frames[a] = np.array([u, w])
        ring_idx = []
        for r in range(n_rings):
            t = r / (n_rings - 1)
            centre = start + t * axis
            idx = []
            for k in range(_RING):
                phi = 2.0 * np.pi * k / _RING
                rad_dir = np.cos(phi) * u + np.sin(phi) * w
                idx.append(len(verts))
                verts.append(centre + radius * rad_dir)
                radial.append(radius * rad_dir)
                t_along.append(t)
                owners.append(a)
            ring_idx.append(idx)
        reg_rows[a] = ring_idx[0]
        for r in range(n_rings - 1):
            for k in range(_RING):
                k2 = (k + 1) % _RING
                a0, a1, b0, b1 = ring_idx[r][k], ring_idx[r][k2], ring_idx[r + 1][k], ring_idx[r + 1][k2]
                faces += [(a0, b1, a1), (a0, b0, b1)] if mirrored else [(a0, a1, b1), (a0, b1, b0)]
        for t, cap, ring, flip in ((0.0, start - 0.6 * radius * d, ring_idx[0], not mirrored),
                                   (1.0, end + 0.6 * radius * d, ring_idx[-1], mirrored)):
            ci = len(verts)
            verts.append(cap)
            radial.append(np.zeros(3))
            t_along.append(t)
            owners.append(a)
            for k in range(_RING):
                k2 = (k + 1) % _RING
                faces.append((ci, ring[k2], ring[k]) if flip else (ci, ring[k], ring[k2]))
    V = len(verts)
    T0 = np.array(verts)
    radial = np.array(radial)

    W = np.zeros((V, K))
    for v in range(V):
        a, t = owners[v], t_along[v]
        p = parents[a]
        child = _SEGMENTS[a][0]
        if t < _BLEND_ZONE and p >= 0:
            wa = 0.5 + 0.5 * t / _BLEND_ZONE
            W[v, a], W[v, p] = wa, 1.0 - wa
        elif t > 1.0 - _BLEND_ZONE and child is not None:
            wc = 0.5 * (t - (1.0 - _BLEND_ZONE)) / _BLEND_ZONE
            W[v, a], W[v, child] = 1.0 - wc, wc
        else:
            W[v, a] = 1.0

    S = np.zeros((V, 3, 4))
    for v in range(V):
        a = owners[v]
        S[v, 1, 0] = 0.08 * T0[v, 1]  # height: vertical stretch about the pelvis
        S[v, :, 1] = 0.25 * radial[v]  # girth: radial inflation
        if a in _LIMB_ROOT:  # limb length: stretch about the limb root
            S[v, :, 2] = 0.10 * (T0[v] - J[_LIMB_ROOT[a]])
        if a in _UPPER_BODY:  # torso length: lift everything above the pelvis
            if a in (0, 1):
                S[v, 1, 3] = 0.15 * np.clip(T0[v, 1], 0.0, J[2, 1])
            elif a in (2, 3):
                S[v, 1, 3] = 0.15 * J[2, 1]
            else:
                S[v, 1, 3] = 0.15 * J[4, 1]

    J_reg = np.zeros((K, V))
    for a, idx in reg_rows.items():
        J_reg[a, idx] = 1.0 / len(idx)

    spec = BodyModelSpec(
        template_vertices=T0,
        faces=np.array(faces),
        shape_blendshapes=S,
        pose_blendshapes=np.zeros((V, 3, 9 * (K - 1))),
        joint_regressor=J_reg,
        skin_weights=W,
        parents=parents,
        joint_names=list(MINI_JOINT_NAMES),
    )
    spec.reference_joints = J_reg @ T0
    return spec


# --- file formats ------------------------------------------------------------

_ARRAY_FIELDS = (
    "template_vertices", "faces", "shape_blendshapes", "pose_blendshapes",
    "joint_regressor", "skin_weights", "parents",
)


def save_body_model(path, spec, sidecar_min_size=None):
    """Write the JSON spec file.

    Arrays with at least ``sidecar_min_size`` elements go to ``<path>.bin`` as
    little-endian float64, referenced from the header by offset and shape.
    """
    header = {"version": FORMAT_VERSION, "V": spec.V, "F": spec.F, "K": spec.K, "n_beta": spec.n_beta}
    blob = bytearray()
    blob_name = os.path.basename(path) + ".bin"
    arrays = {name: getattr(spec, name) for name in _ARRAY_FIELDS}
    if spec.reference_joints is not None:
        arrays["reference_joints"] = spec.reference_joints
    for name, arr in arrays.items():
        if sidecar_min_size is not None and arr.size >= sidecar_min_size and name not in ("faces", "parents"):
            header[name] = {"blob_offset": len(blob), "shape": list(arr.shape)}
            blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
        else:
            header[name] = arr.tolist()
    header["joint_names"] = list(spec.joint_names)
    if blob:
        header["blob"] = blob_name
        with open(os.path.join(os.path.dirname(path) or ".", blob_name), "wb") as f:
            f.write(bytes(blob))
    with open(path, "w") as f:
        json.dump(header, f)


def load_body_model(path):
    try:
        with open(path) as f:
            header = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise BodyModelError(f"cannot read body model {path}: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise BodyModelError(f"unsupported body model version {header.get('version')!r}")
    blob = None
    if "blob" in header:
        with open(os.path.join(os.path.dirname(path) or ".", header["blob"]), "rb") as f:
            blob = f.read()
    arrays = {}
    for name in _ARRAY_FIELDS + ("reference_joints",):
        if name not in header:
            if name == "reference_joints":
                continue
            raise BodyModelError(f"body model missing field {name!r}")
        value = header[name]
        if isinstance(value, dict):
            if blob is None:
                raise BodyModelError(f"{name} refers to a sidecar blob but none is declared")
            shape = tuple(value["shape"])
            count = int(np.prod(shape))
            start = value["blob_offset"]
            if start + 8 * count > len(blob):
                raise BodyModelError(f"sidecar blob truncated while reading {name}")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(shape).copy()
        else:
            arrays[name] = np.array(value, dtype=np.float64)
    pose = arrays["pose_blendshapes"]
    if pose.size == 0:
        pose = pose.reshape(len(arrays["template_vertices"]), 3, 0)
    spec = BodyModelSpec(
        template_vertices=arrays["template_vertices"],
        faces=arrays["faces"].astype(np.int64),
        shape_blendshapes=arrays["shape_blendshapes"],
        pose_blendshapes=pose,
        joint_regressor=arrays["joint_regressor"],
        skin_weights=arrays["skin_weights"],
        parents=arrays["parents"].astype(np.int64),
        joint_names=header.get("joint_names", []),
        reference_joints=arrays.get("reference_joints"),
    )
    for key, actual in (("V", spec.V), ("F", spec.F), ("K", spec.K), ("n_beta", spec.n_beta)):
        if header.get(key) != actual:
            raise BodyModelError(f"header {key}={header.get(key)} disagrees with arrays ({actual})")
    return spec


def write_obj(path, vertices, faces):
    """'v x y z' lines, then 'f i j k' lines with 1-based indices."""
    vertices = np.asarray(vertices, dtype=np.float64)
    with open(path, "w") as f:
        for x, y, z in vertices.tolist():
            f.write(f"v {x!r} {y!r} {z!r}\n")
        for i, j, k in (np.asarray(faces, dtype=np.int64) + 1).tolist():
            f.write(f"f {i} {j} {k}\n")


def read_obj(path):
    verts, faces = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v" and len(parts) == 4:
                    verts.append([float(p) for p in parts[1:]])
                    continue
                if parts[0] == "f" and len(parts) == 4:
                    faces.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
                    continue
            except ValueError:
                pass
            raise BodyModelError(f"{path}:{lineno}: unsupported OBJ line {line.strip()!r}")
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)
