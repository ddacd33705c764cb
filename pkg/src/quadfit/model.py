"""Parametric articulated quadruped: shape space, limb scales, kinematics, skinning.

All geometry runs in model units where the template torso has length 1.
Every function here accepts either plain float64 arrays or autodiff Vars
for the continuous parameters (shape coefficients, scales, rotations,
translation) and is pure.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

NUM_SCALE_GROUPS = 7


class DegenerateRotationError(ValueError):
    """Raised when a 6D rotation input cannot be orthonormalized."""


@dataclass(frozen=True)
class Skeleton:
    """Kinematic tree. Joint 0 is the root; parents are topologically sorted."""

    names: tuple
    parents: np.ndarray          # (J,) int, -1 for the root
    offsets: np.ndarray          # (J, 3) rest offset from parent (root: rest position)
    leg_joint_ids: tuple         # four tuples of joint ids, one per leg
    head_bone_id: int
    torso_endpoint_vertex_ids: tuple  # (front vertex id, rear vertex id)
    scale_targets: tuple         # 7 entries of (group name, tuple of joint ids)
    abduction_axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def __post_init__(self):
        j = len(self.names)
        parents = np.asarray(self.parents)
        if parents.shape != (j,):
            raise ValueError("parents length must match joint count")
        roots = np.flatnonzero(parents < 0)
        if roots.size != 1 or roots[0] != 0:
            raise ValueError("exactly one root joint expected at index 0")
        if np.any(parents[1:] >= np.arange(1, j)):
            raise ValueError("joints must be topologically sorted (parent < child)")
        if len(self.scale_targets) != NUM_SCALE_GROUPS:
            raise ValueError(f"expected {NUM_SCALE_GROUPS} scale target groups")
        for name, ids in self.scale_targets:
            for i in ids:
                if not 0 < i < j:
                    raise ValueError(f"scale target {name!r} references invalid bone {i}")

    @property
    def num_joints(self):
        return len(self.names)

    def scale_matrix(self):
        """(J, 7) indicator: entry [j, i] = 1 if bone j belongs to scale group i."""
        m = np.zeros((self.num_joints, NUM_SCALE_GROUPS))
        for i, (_, ids) in enumerate(self.scale_targets):
            for jid in ids:
                m[jid, i] = 1.0
        return m

    def joint_index(self, name):
        return self.names.index(name)


@dataclass(frozen=True)
class TemplateMesh:
    vertices: np.ndarray     # (N, 3)
    faces: np.ndarray        # (F, 3) int
    lbs_weights: np.ndarray  # (N, J), rows sum to 1
    keypoint_map: tuple      # entries (keypoint name, "vertex"|"joint", index)

    def __post_init__(self):
        n = self.vertices.shape[0]
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ValueError("faces index out of range")
        w = self.lbs_weights
        if np.any(w < -1e-12):
            raise ValueError("negative skinning weight")
        if np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("skinning weight rows must sum to 1")


@dataclass(frozen=True)
class ShapeSpace:
    """Linear vertex-displacement basis around a mean mesh (unit torso)."""

    mean_vertices: np.ndarray  # (N, 3)
    basis: np.ndarray          # (K, 3N) orthonormal rows
    eigenvalues: np.ndarray    # (K,)
    mean_coeffs: np.ndarray    # (K,) zeros by construction
    sample_weights: np.ndarray # build-time per-mesh weights

    @property
    def num_coeffs(self):
        return self.basis.shape[0]


@dataclass
class ShapeParams:
    beta_pca: np.ndarray  # (K,)
    kappa: np.ndarray     # (7,), per-group scale is exp(kappa_i)

    def __post_init__(self):
        self.beta_pca = np.asarray(self.beta_pca, dtype=np.float64)
        self.kappa = np.asarray(self.kappa, dtype=np.float64)
        if self.kappa.shape != (NUM_SCALE_GROUPS,):
            raise ValueError(f"kappa must have length {NUM_SCALE_GROUPS}")
        if not (np.all(np.isfinite(self.beta_pca)) and np.all(np.isfinite(self.kappa))):
            raise ValueError("shape parameters must be finite")


@dataclass
class PoseState:
    root_rot6d: np.ndarray   # (6,)
    joint_rot6d: np.ndarray  # (J-1, 6) for the non-root joints
    latent: np.ndarray       # (D,) flow latent y
    translation: np.ndarray  # (3,) model-to-camera offset


# ---------------------------------------------------------------------------
# rotations

def rot6d_to_rotmat(r):
    """Gram-Schmidt two 3-vectors into a rotation matrix, (..., 6) -> (..., 3, 3)."""
    a1 = r[..., 0:3]
    a2 = r[..., 3:6]
    n1 = ad.norm(a1, axis=-1, keepdims=True)
    if np.any(ad.value_of(n1) < 1e-8):
        raise DegenerateRotationError("first 6D column is numerically zero")
    b1 = ad.div(a1, n1)
    proj = ad.sum_(ad.mul(b1, a2), axis=-1, keepdims=True)
    u2 = ad.sub(a2, ad.mul(proj, b1))
    n2 = ad.norm(u2, axis=-1, keepdims=True)
    if np.any(ad.value_of(n2) < 1e-8):
        raise DegenerateRotationError("6D columns are parallel or zero")
    b2 = ad.div(u2, n2)
    b3 = cross3(b1, b2)
    return ad.stack([b1, b2, b3], axis=-1)


def cross3(u, v):
    x = ad.sub(ad.mul(u[..., 1], v[..., 2]), ad.mul(u[..., 2], v[..., 1]))
    y = ad.sub(ad.mul(u[..., 2], v[..., 0]), ad.mul(u[..., 0], v[..., 2]))
    z = ad.sub(ad.mul(u[..., 0], v[..., 1]), ad.mul(u[..., 1], v[..., 0]))
    return ad.stack([x, y, z], axis=-1)


def axis_angle_to_rotmat(r):
    """Rodrigues formula, (..., 3) -> (..., 3, 3). Smooth through the origin."""
    theta2 = ad.sum_(ad.square(r), axis=-1, keepdims=True)
    theta = ad.sqrt(ad.add(theta2, 1e-24))
    a = ad.div(ad.sin(theta), theta)                      # sin t / t
    half = ad.mul(theta, 0.5)
    sh = ad.div(ad.sin(half), half)
    b = ad.mul(ad.square(sh), 0.5)                        # (1 - cos t) / t^2
    k = _skew(r)
    kk = ad.matmul(k, k)
    eye = np.broadcast_to(np.eye(3), ad.value_of(k).shape)
    return ad.add(eye, ad.add(ad.mul(a[..., None], k), ad.mul(b[..., None], kk)))


def _skew(r):
    zeros = ad.mul(r[..., 0], 0.0)
    rows = [
        ad.stack([zeros, ad.mul(r[..., 2], -1.0), r[..., 1]], axis=-1),
        ad.stack([r[..., 2], zeros, ad.mul(r[..., 0], -1.0)], axis=-1),
        ad.stack([ad.mul(r[..., 1], -1.0), r[..., 0], zeros], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def rotmat_to_axis_angle(mat):
    """Log map, (..., 3, 3) -> (..., 3). Valid away from angle pi."""
    w = ad.stack([
        ad.mul(ad.sub(mat[..., 2, 1], mat[..., 1, 2]), 0.5),
        ad.mul(ad.sub(mat[..., 0, 2], mat[..., 2, 0]), 0.5),
        ad.mul(ad.sub(mat[..., 1, 0], mat[..., 0, 1]), 0.5),
    ], axis=-1)
    s = ad.norm(w, axis=-1, eps=1e-24)                    # sin(theta)
    c = ad.mul(ad.sub(ad.add(ad.add(mat[..., 0, 0], mat[..., 1, 1]), mat[..., 2, 2]), 1.0), 0.5)
    theta = ad.arctan2(s, c)
    return ad.mul(w, ad.div(theta, s)[..., None])


def rotmat_to_rot6d(mat):
    """First two columns of the rotation, (..., 3, 3) -> (..., 6)."""
    mat = ad.value_of(mat)
    return np.concatenate([mat[..., :, 0], mat[..., :, 1]], axis=-1)


def axis_angle_to_rot6d(r):
    return rotmat_to_rot6d(ad.value_of(axis_angle_to_rotmat(r)))


# ---------------------------------------------------------------------------
# shape and scales

def apply_shape(space, beta_pca):
    """Mean mesh plus basis displacement, beta (..., K) -> vertices (..., N, 3)."""
    k = space.num_coeffs
    bshape = ad.value_of(beta_pca).shape
    if bshape[-1] != k:
        raise ValueError(f"expected {k} shape coefficients, got {bshape[-1]}")
    n = space.mean_vertices.shape[0]
    disp = ad.matmul(ad.reshape(beta_pca, bshape[:-1] + (1, k)), space.basis)
    disp = ad.reshape(disp, bshape[:-1] + (n, 3))
    return ad.add(space.mean_vertices, disp)


def rest_joint_positions(skeleton, offsets):
    """Accumulate offsets down the tree with identity rotations, (..., J, 3)."""
    pos = [offsets[..., 0, :]]
    for j in range(1, skeleton.num_joints):
        pos.append(ad.add(pos[skeleton.parents[j]], offsets[..., j, :]))
    return ad.stack(pos, axis=-2)


def apply_limb_scales(skeleton, rest_vertices, lbs_weights, kappa):
    """Scale targeted bone offsets by exp(kappa) and drag the surface along.

    kappa (..., 7) -> (scaled offsets (..., J, 3), displaced vertices (..., N, 3)).
    Vertex displacement is the skinning-weight blend of the joint displacements.
    """
    kshape = ad.value_of(kappa).shape
    if kshape[-1] != NUM_SCALE_GROUPS:
        raise ValueError(f"kappa must have length {NUM_SCALE_GROUPS}")
    m = skeleton.scale_matrix()                            # (J, 7)
    log_factors = ad.reshape(ad.matmul(ad.reshape(kappa, kshape[:-1] + (1, NUM_SCALE_GROUPS)),
                                       m.T), kshape[:-1] + (skeleton.num_joints,))
    factors = ad.exp(log_factors)                          # (..., J)
    scaled_offsets = ad.mul(skeleton.offsets, factors[..., None])
    base_pos = rest_joint_positions(skeleton, np.broadcast_to(skeleton.offsets,
                                                              ad.value_of(scaled_offsets).shape))
    scaled_pos = rest_joint_positions(skeleton, scaled_offsets)
    disp = ad.sub(scaled_pos, base_pos)                    # (..., J, 3)
    moved = ad.add(rest_vertices, ad.matmul(lbs_weights, disp))
    return scaled_offsets, moved


def bone_lengths(offsets):
    """Per-joint offset lengths, (..., J, 3) -> (..., J)."""
    return ad.norm(offsets, axis=-1, eps=1e-24)


# ---------------------------------------------------------------------------
# kinematics and skinning

def forward_kinematics(skeleton, offsets, root_rotmat, joint_rotmats, translation):
    """World rotations and positions for every joint.

    offsets (..., J, 3), root_rotmat (..., 3, 3), joint_rotmats (..., J-1, 3, 3),
    translation (..., 3). The root rotates about its own rest position.
    Returns (rotations (..., J, 3, 3), positions (..., J, 3)).
    """
    rots = [root_rotmat]
    pos = [ad.add(offsets[..., 0, :], translation)]
    for j in range(1, skeleton.num_joints):
        p = skeleton.parents[j]
        local = joint_rotmats[..., j - 1, :, :]
        rot = ad.matmul(rots[p], local)
        step = ad.matmul(rots[p], offsets[..., j, :][..., None])[..., 0]
        pos.append(ad.add(pos[p], step))
        rots.append(rot)
    return ad.stack(rots, axis=-3), ad.stack(pos, axis=-2)


def lbs_skin(vertices, lbs_weights, world_rot, world_pos, rest_pos):
    """Linear blend skinning.

    vertices (..., N, 3), weights (N, J), world_rot (..., J, 3, 3),
    world_pos (..., J, 3), rest_pos (..., J, 3) with identity rest rotations.
    v' = sum_j w_vj (R_j (v - rest_j) + p_j).
    """
    num_joints = lbs_weights.shape[1]
    out = None
    for j in range(num_joints):
        local = ad.sub(vertices, rest_pos[..., j, :][..., None, :])
        rotated = ad.matmul(local, ad.swapaxes(world_rot[..., j, :, :], -1, -2))
        placed = ad.add(rotated, world_pos[..., j, :][..., None, :])
        term = ad.mul(lbs_weights[:, j][:, None], placed)
        out = term if out is None else ad.add(out, term)
    return out


def pose_mesh(skeleton, template, space, beta_pca, kappa, root_rotmat,
              joint_rotmats, translation):
    """Full deformation pipeline: shape, limb scales, kinematics, skinning.

    Returns (posed vertices (..., N, 3), world rotations, world joint positions).
    """
    shaped = apply_shape(space, beta_pca)
    offsets, rest_v = apply_limb_scales(skeleton, shaped, template.lbs_weights, kappa)
    rest_pos = rest_joint_positions(skeleton, offsets)
    rot_w, pos_w = forward_kinematics(skeleton, offsets, root_rotmat,
                                      joint_rotmats, translation)
    skinned = lbs_skin(rest_v, template.lbs_weights, rot_w, pos_w, rest_pos)
    return skinned, rot_w, pos_w


def repose_tpose(shape, space, skeleton, lbs_weights):
    """Shape-only mesh with all joint rotations at identity."""
    shaped = apply_shape(space, shape.beta_pca)
    _, vertices = apply_limb_scales(skeleton, shaped, lbs_weights, shape.kappa)
    return ad.value_of(vertices)


def keypoint_matrix(template, num_joints):
    """Constant selectors (K_kp, N) and (K_kp, J) picking surface / joint keypoints."""
    n_kp = len(template.keypoint_map)
    sel_v = np.zeros((n_kp, template.vertices.shape[0]))
    sel_j = np.zeros((n_kp, num_joints))
    for row, (_, kind, idx) in enumerate(template.keypoint_map):
        if kind == "vertex":
            sel_v[row, idx] = 1.0
        elif kind == "joint":
            sel_j[row, idx] = 1.0
        else:
            raise ValueError(f"unknown keypoint kind {kind!r}")
    return sel_v, sel_j


def keypoints_3d(template, num_joints, posed_vertices, joint_positions):
    """Gather the model keypoints, (..., K_kp, 3)."""
    sel_v, sel_j = keypoint_matrix(template, num_joints)
    return ad.add(ad.matmul(sel_v, posed_vertices), ad.matmul(sel_j, joint_positions))


# ---------------------------------------------------------------------------
# shape-space construction

def torso_length(vertices, endpoint_ids):
    a, b = endpoint_ids
    return float(np.linalg.norm(np.asarray(vertices)[a] - np.asarray(vertices)[b]))


def build_shape_space(meshes, group_labels, skeleton, dog_weight_fraction=0.5, num_coeffs=None):
    """Weighted PCA over torso-normalized registered meshes.

    meshes: (M, N, 3) identical topology; group_labels: booleans, True for the
    dog group which receives dog_weight_fraction of the total weight.
    """
    meshes = np.asarray(meshes, dtype=np.float64)
    if meshes.ndim != 3 or meshes.shape[0] < 2:
        raise ValueError("need at least two registered meshes of identical topology")
    m = meshes.shape[0]
    if num_coeffs is None:
        num_coeffs = m - 1
    if num_coeffs >= m:
        raise ValueError("num_coeffs must be smaller than the number of meshes")
    labels = np.asarray(group_labels, dtype=bool)
    if labels.shape != (m,):
        raise ValueError("one group label per mesh expected")

    scaled = np.empty_like(meshes)
    for i in range(m):
        scaled[i] = meshes[i] / torso_length(meshes[i], skeleton.torso_endpoint_vertex_ids)

    weights = np.empty(m)
    n_dog = int(labels.sum())
    if n_dog in (0, m):
        weights[:] = 1.0 / m
    else:
        weights[labels] = dog_weight_fraction / n_dog
        weights[~labels] = (1.0 - dog_weight_fraction) / (m - n_dog)

    flat = scaled.reshape(m, -1)
    mean = weights @ flat

    # exact unit torso on the mean: fold any residual length drift into a
    # global rescale of the whole training set
    s = torso_length(mean.reshape(-1, 3), skeleton.torso_endpoint_vertex_ids)
    mean = mean / s
    flat = flat / s

    centered = (flat - mean) * np.sqrt(weights)[:, None]
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:num_coeffs]
    eigenvalues = svals[:num_coeffs] ** 2

    return ShapeSpace(
        mean_vertices=mean.reshape(-1, 3),
        basis=basis,
        eigenvalues=eigenvalues,
        mean_coeffs=np.zeros(num_coeffs),
        sample_weights=weights,
    )


def project_mesh(space, vertices):
    """Basis coefficients of a mesh, the inverse of apply_shape up to truncation."""
    delta = np.asarray(vertices, dtype=np.float64).reshape(-1) - space.mean_vertices.reshape(-1)
    return space.basis @ delta
