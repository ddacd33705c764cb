"""Procedurally generated toy quadruped model.

Capsule-per-bone surface over a 23-joint skeleton (root, 3 spine, neck,
head, 2 ears, 4 legs x 3, 3 tail). Canonical frame: +x toward the head,
+y left, +z up, root (pelvis) at the origin, default torso length 1.
The same topology is reused for every proportion variant, so variant
meshes are registered by construction.
"""

import numpy as np

from .losses import DEFAULT_KEYPOINT_WEIGHTS
from .model import Skeleton, TemplateMesh, build_shape_space

RINGS = 4
SIDES = 7
VERTS_PER_BONE = RINGS * SIDES + 2  # rings plus two axis poles


def default_params():
    return {
        "spine_len": 0.28,
        "body_radius": 0.08,
        "neck_len": 0.16,
        "neck_radius": 0.055,
        "head_len": 0.14,
        "head_radius": 0.065,
        "ear_len": 0.12,
        "ear_radius": 0.02,
        "hip_spread": 0.10,
        "leg_upper": 0.22,
        "leg_lower": 0.24,
        "leg_radius": 0.035,
        "tail_seg": 0.12,
        "tail_radius": 0.022,
    }


def joint_table(p):
    """(name, parent name, offset) triples in topological order."""
    up, lo = p["leg_upper"], p["leg_lower"]
    hs = p["hip_spread"]
    return [
        ("root", None, (0.0, 0.0, 0.0)),
        ("spine1", "root", (p["spine_len"], 0.0, 0.0)),
        ("spine2", "spine1", (p["spine_len"], 0.0, 0.0)),
        ("spine3", "spine2", (p["spine_len"], 0.0, 0.0)),
        ("neck", "spine3", (p["neck_len"] * 0.7, 0.0, p["neck_len"] * 0.7)),
        ("head", "neck", (p["head_len"], 0.0, p["head_len"] * 0.25)),
        ("ear_l", "head", (0.0, 0.045, p["ear_len"])),
        ("ear_r", "head", (0.0, -0.045, p["ear_len"])),
        ("hip_fl", "spine3", (0.03, hs, -0.04)),
        ("knee_fl", "hip_fl", (0.0, 0.0, -up)),
        ("ankle_fl", "knee_fl", (0.0, 0.0, -lo)),
        ("hip_fr", "spine3", (0.03, -hs, -0.04)),
        ("knee_fr", "hip_fr", (0.0, 0.0, -up)),
        ("ankle_fr", "knee_fr", (0.0, 0.0, -lo)),
        ("hip_rl", "root", (-0.02, hs, -0.04)),
        ("knee_rl", "hip_rl", (0.0, 0.0, -up)),
        ("ankle_rl", "knee_rl", (0.0, 0.0, -lo)),
        ("hip_rr", "root", (-0.02, -hs, -0.04)),
        ("knee_rr", "hip_rr", (0.0, 0.0, -up)),
        ("ankle_rr", "knee_rr", (0.0, 0.0, -lo)),
        ("tail1", "root", (-p["tail_seg"], 0.0, 0.03)),
        ("tail2", "tail1", (-p["tail_seg"], 0.0, 0.015)),
        ("tail3", "tail2", (-p["tail_seg"], 0.0, 0.0)),
    ]


def bone_radius(name, p):
    if name.startswith("spine"):
        return p["body_radius"]
    if name == "neck":
        return p["neck_radius"]
    if name == "head":
        return p["head_radius"]
    if name.startswith("ear"):
        return p["ear_radius"]
    if name.startswith("tail"):
        return p["tail_radius"]
    if name.startswith("hip"):
        return p["leg_radius"] * 1.3
    return p["leg_radius"]


def _frame(axis):
    """Deterministic orthonormal basis perpendicular to axis."""
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(ref, axis)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2


def _capsule(p0, p1, radius):
    """Ring lattice plus two poles along the segment p0 -> p1."""
    axis = p1 - p0
    length = np.linalg.norm(axis)
    u = axis / length if length > 1e-12 else np.array([1.0, 0.0, 0.0])
    e1, e2 = _frame(u)
    verts = np.empty((VERTS_PER_BONE, 3))
    phis = 2.0 * np.pi * np.arange(SIDES) / SIDES
    for i in range(RINGS):
        t = i / (RINGS - 1)
        c = p0 + t * axis
        verts[i * SIDES:(i + 1) * SIDES] = (
            c + radius * (np.cos(phis)[:, None] * e1 + np.sin(phis)[:, None] * e2)
        )
    verts[RINGS * SIDES] = p0 - radius * u       # start pole
    verts[RINGS * SIDES + 1] = p1 + radius * u   # end pole
    return verts


def _capsule_faces(base):
    faces = []
    for i in range(RINGS - 1):
        for k in range(SIDES):
            a = base + i * SIDES + k
            b = base + i * SIDES + (k + 1) % SIDES
            c = base + (i + 1) * SIDES + k
            d = base + (i + 1) * SIDES + (k + 1) % SIDES
            faces.append((a, b, c))
            faces.append((b, d, c))
    start_pole = base + RINGS * SIDES
    end_pole = start_pole + 1
    for k in range(SIDES):
        a = base + k
        b = base + (k + 1) % SIDES
        faces.append((start_pole, b, a))
        a = base + (RINGS - 1) * SIDES + k
        b = base + (RINGS - 1) * SIDES + (k + 1) % SIDES
        faces.append((end_pole, a, b))
    return faces


def build_skeleton(params=None):
    p = params or default_params()
    table = joint_table(p)
    names = tuple(e[0] for e in table)
    index = {n: i for i, n in enumerate(names)}
    parents = np.array([-1 if e[1] is None else index[e[1]] for e in table])
    offsets = np.array([e[2] for e in table], dtype=np.float64)

    legs = tuple(
        tuple(index[f"{part}_{leg}"] for part in ("hip", "knee", "ankle"))
        for leg in ("fl", "fr", "rl", "rr")
    )
    scale_targets = (
        ("front_legs", tuple(index[n] for n in ("knee_fl", "ankle_fl", "knee_fr", "ankle_fr"))),
        ("rear_legs", tuple(index[n] for n in ("knee_rl", "ankle_rl", "knee_rr", "ankle_rr"))),
        ("tail", tuple(index[n] for n in ("tail1", "tail2", "tail3"))),
        ("neck", (index["neck"],)),
        ("torso", tuple(index[n] for n in ("spine1", "spine2", "spine3"))),
        ("ears", (index["ear_l"], index["ear_r"])),
        ("head_length", (index["head"],)),
    )
    front_pole = _pole_vertex(index["spine3"], end=True)
    rear_pole = _pole_vertex(index["spine1"], end=False)
    return Skeleton(
        names=names,
        parents=parents,
        offsets=offsets,
        leg_joint_ids=legs,
        head_bone_id=index["head"],
        torso_endpoint_vertex_ids=(front_pole, rear_pole),
        scale_targets=scale_targets,
        abduction_axis=np.array([1.0, 0.0, 0.0]),
    )


def _bone_base(joint_id):
    """First vertex index of the capsule owned by non-root joint joint_id."""
    return (joint_id - 1) * VERTS_PER_BONE


def _pole_vertex(joint_id, end):
    return _bone_base(joint_id) + RINGS * SIDES + (1 if end else 0)


def _ring_vertex(joint_id, ring, side):
    return _bone_base(joint_id) + ring * SIDES + side


def build_vertices(skeleton, params):
    """Capsule surface for each bone, (N, 3)."""
    positions = np.zeros((skeleton.num_joints, 3))
    for j in range(1, skeleton.num_joints):
        positions[j] = positions[skeleton.parents[j]] + skeleton.offsets[j]
    chunks = []
    for j in range(1, skeleton.num_joints):
        r = bone_radius(skeleton.names[j], params)
        chunks.append(_capsule(positions[skeleton.parents[j]], positions[j], r))
    return np.concatenate(chunks, axis=0)


def build_faces(skeleton):
    faces = []
    for j in range(1, skeleton.num_joints):
        faces.extend(_capsule_faces(_bone_base(j)))
    return np.array(faces, dtype=np.int64)


def compute_lbs_weights(skeleton, vertices):
    """Inverse-square-distance to bone segments, split along the segment
    between the two end joints, rows normalized to 1."""
    positions = np.zeros((skeleton.num_joints, 3))
    for j in range(1, skeleton.num_joints):
        positions[j] = positions[skeleton.parents[j]] + skeleton.offsets[j]
    n = vertices.shape[0]
    w = np.zeros((n, skeleton.num_joints))
    for j in range(1, skeleton.num_joints):
        p0 = positions[skeleton.parents[j]]
        seg = positions[j] - p0
        seg_len2 = max(float(seg @ seg), 1e-12)
        t = np.clip((vertices - p0) @ seg / seg_len2, 0.0, 1.0)
        closest = p0 + t[:, None] * seg
        d2 = np.sum((vertices - closest) ** 2, axis=1)
        infl = 1.0 / (d2 + 1e-4) ** 2
        w[:, skeleton.parents[j]] += infl * (1.0 - t)
        w[:, j] += infl * t
    # keep the four strongest joints per vertex for locality
    order = np.argsort(-w, axis=1)
    keep = np.zeros_like(w)
    rows = np.arange(n)[:, None]
    keep[rows, order[:, :4]] = w[rows, order[:, :4]]
    return keep / keep.sum(axis=1, keepdims=True)


def build_keypoint_map(skeleton, vertices):
    idx = {n: i for i, n in enumerate(skeleton.names)}
    head = idx["head"]

    def ring_pick(joint, ring, direction):
        cands = [_ring_vertex(joint, ring, k) for k in range(SIDES)]
        center = vertices[cands].mean(axis=0)
        scores = [(vertices[c] - center) @ direction for c in cands]
        return cands[int(np.argmax(scores))]

    kp = []
    for side, tag in (("left", "l"), ("right", "r")):
        for end, tag2 in (("front", "f"), ("rear", "r")):
            kp.append((f"{side}_{end}_paw", "vertex", _pole_vertex(idx[f"ankle_{tag2}{tag}"], end=True)))
            kp.append((f"{side}_{end}_middle", "joint", idx[f"knee_{tag2}{tag}"]))
            kp.append((f"{side}_{end}_top", "joint", idx[f"hip_{tag2}{tag}"]))
    kp.append(("tail_start", "joint", idx["tail1"]))
    kp.append(("tail_end", "vertex", _pole_vertex(idx["tail3"], end=True)))
    kp.append(("base_left_ear", "vertex", _ring_vertex(idx["ear_l"], 1, 0)))
    kp.append(("base_right_ear", "vertex", _ring_vertex(idx["ear_r"], 1, 0)))
    kp.append(("nose", "vertex", _pole_vertex(head, end=True)))
    kp.append(("chin", "vertex", ring_pick(head, RINGS - 1, np.array([0.0, 0.0, -1.0]))))
    kp.append(("left_ear_tip", "joint", idx["ear_l"]))
    kp.append(("right_ear_tip", "joint", idx["ear_r"]))
    kp.append(("left_eye", "vertex", ring_pick(head, 2, np.array([0.0, 0.7, 0.7]))))
    kp.append(("right_eye", "vertex", ring_pick(head, 2, np.array([0.0, -0.7, 0.7]))))

    order = {name: i for i, (name, _) in enumerate(DEFAULT_KEYPOINT_WEIGHTS)}
    kp.sort(key=lambda e: order[e[0]])
    return tuple(kp)


def variant_params(rng, doglike=True):
    """Proportion sample for one shape-corpus mesh."""
    p = default_params()
    if doglike:
        jitter = {
            "spine_len": 0.12, "body_radius": 0.18, "neck_len": 0.20,
            "neck_radius": 0.15, "head_len": 0.20, "head_radius": 0.18,
            "ear_len": 0.35, "leg_upper": 0.20, "leg_lower": 0.20,
            "leg_radius": 0.20, "tail_seg": 0.30, "tail_radius": 0.2,
            "hip_spread": 0.12, "ear_radius": 0.2,
        }
        for k, rel in jitter.items():
            p[k] *= float(np.exp(rng.uniform(-rel, rel)))
    else:
        # non-dog quadrupeds: wider proportion ranges
        p["spine_len"] *= float(rng.uniform(0.8, 1.35))
        p["body_radius"] *= float(rng.uniform(0.7, 1.7))
        p["neck_len"] *= float(rng.uniform(0.6, 2.4))
        p["neck_radius"] *= float(rng.uniform(0.8, 1.6))
        p["head_len"] *= float(rng.uniform(0.7, 1.5))
        p["head_radius"] *= float(rng.uniform(0.7, 1.4))
        p["ear_len"] *= float(rng.uniform(0.4, 1.4))
        p["leg_upper"] *= float(rng.uniform(0.55, 1.5))
        p["leg_lower"] *= float(rng.uniform(0.55, 1.5))
        p["leg_radius"] *= float(rng.uniform(0.8, 1.8))
        p["tail_seg"] *= float(rng.uniform(0.3, 1.3))
    return p


def build_training_meshes(n_dogs=12, n_others=12, seed=0):
    """Registered corpus for shape-space construction. Returns (meshes, labels)."""
    rng = np.random.default_rng(seed)
    skeleton = build_skeleton()
    meshes, labels = [], []
    for _ in range(n_dogs):
        p = variant_params(rng, doglike=True)
        meshes.append(build_vertices(build_skeleton(p), p))
        labels.append(True)
    for _ in range(n_others):
        p = variant_params(rng, doglike=False)
        meshes.append(build_vertices(build_skeleton(p), p))
        labels.append(False)
    del skeleton
    return np.stack(meshes), np.array(labels)


def build_toy_model(seed=0, num_coeffs=8, n_dogs=12, n_others=12):
    """Full model: skeleton, template (mean mesh), shape space.

    The template carries the PCA mean as its surface so that zero shape
    coefficients reproduce it exactly.
    """
    skeleton = build_skeleton()
    meshes, labels = build_training_meshes(n_dogs, n_others, seed)
    space = build_shape_space(meshes, labels, skeleton, dog_weight_fraction=0.5,
                              num_coeffs=num_coeffs)
    faces = build_faces(skeleton)
    weights = compute_lbs_weights(skeleton, space.mean_vertices)
    keypoints = build_keypoint_map(skeleton, space.mean_vertices)
    template = TemplateMesh(
        vertices=space.mean_vertices,
        faces=faces,
        lbs_weights=weights,
        keypoint_map=keypoints,
    )
    return skeleton, template, space
