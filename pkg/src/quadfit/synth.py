"""Synthetic breed world and the evaluation suite.

Breeds are Gaussian islands in shape space grouped into clades; instances
sample shape around a breed prototype, pose from the flow prior, and a
camera, then render keypoints and a hard silhouette. Everything is
bit-reproducible from its seed.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import flow as flow_mod
from . import model as model_mod
from . import render
from .losses import KeypointSchema, Observation2D
from .model import ShapeParams

KAPPA_GAIN = 0.3  # converts unit-space draws into log-scale units


@dataclass
class BreedSpec:
    breed_id: str
    prototype: ShapeParams
    intra_cov: np.ndarray  # (K + 7,) diagonal, shape-parameter units
    clade: int


@dataclass
class SynthInstance:
    shape: ShapeParams
    y: np.ndarray            # flow latent
    theta: np.ndarray        # (J-1, 3) decoded pose
    root_rot6d: np.ndarray
    translation: np.ndarray
    focal: float
    observation: Observation2D
    breed: str


def gen_breeds(space, num_breeds, num_clades, intra_spread, inter_spread,
               seed=0, clade_spread=None):
    """Breed prototypes clustered into clades in (beta, kappa) space."""
    if not num_breeds >= num_clades >= 1:
        raise ValueError("need num_breeds >= num_clades >= 1")
    rng = np.random.default_rng(seed)
    k = space.num_coeffs
    dims = k + model_mod.NUM_SCALE_GROUPS
    if clade_spread is None:
        clade_spread = 2.5 * inter_spread
    centers = rng.normal(0.0, clade_spread, (num_clades, dims))
    unit_scale = np.concatenate([np.sqrt(space.eigenvalues),
                                 np.full(model_mod.NUM_SCALE_GROUPS, KAPPA_GAIN)])
    breeds = []
    for b in range(num_breeds):
        clade = b % num_clades
        u = centers[clade] + rng.normal(0.0, inter_spread, dims)
        params = u * unit_scale
        proto = ShapeParams(beta_pca=params[:k], kappa=params[k:])
        intra = (intra_spread * unit_scale) ** 2
        breeds.append(BreedSpec(breed_id=f"breed_{b:02d}", prototype=proto,
                                intra_cov=intra, clade=clade))
    return breeds


def _sample_root_rot6d(rng):
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    pitch = rng.normal(0.0, 0.12)
    roll = rng.normal(0.0, 0.08)
    cz, sz = np.cos(yaw), np.sin(yaw)
    cy, sy = np.cos(pitch), np.sin(pitch)
    cx, sx = np.cos(roll), np.sin(roll)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1.0]])
    ry = np.array([[cy, 0, sy], [0, 1.0, 0], [-sy, 0, cy]])
    rx = np.array([[1.0, 0, 0], [0, cx, -sx], [0, sx, cx]])
    # camera looks down +z with +y in the image-down direction; tip the model
    # upright first so yaw spins the dog around its vertical axis
    upright = np.array([[0.0, 0.0, -1.0], [0.0, -1.0, 0.0], [-1.0, 0.0, 0.0]]).T
    return model_mod.rotmat_to_rot6d(upright @ rx @ ry @ rz)


def gen_dataset(breeds, n_per_breed, skeleton, template, space, pose_flow,
                image_size=256, f_target=500.0, kp_noise_px=0.0, seed=0,
                val_fraction=0.2, bps_points=64, bps_seed=0, max_retries=16):
    """Instances with ground truth, keypoints (+ noise), hard mask, BPS code."""
    rng = np.random.default_rng(seed)
    schema = KeypointSchema.default()
    instances = []
    k = space.num_coeffs
    for spec in breeds:
        n_val = int(round(val_fraction * n_per_breed))
        for i in range(n_per_breed):
            split = "val" if i >= n_per_breed - n_val else "train"
            stddev = np.sqrt(spec.intra_cov)
            draw = rng.normal(0.0, 1.0, stddev.shape) * stddev
            shape = ShapeParams(beta_pca=spec.prototype.beta_pca + draw[:k],
                                kappa=spec.prototype.kappa + draw[k:])
            y = rng.standard_normal(pose_flow.dim)
            theta = ad.value_of(flow_mod.flow_inverse(pose_flow, y)).reshape(-1, 3)
            inst = None
            for _ in range(max_retries):
                root6d = _sample_root_rot6d(rng)
                focal = float(rng.uniform(0.82, 1.12) * f_target)
                camera = render.Camera.centered(focal, size=image_size)
                tz = rng.uniform(2.7, 3.9)
                jitter = rng.uniform(-0.12, 0.12, 2)
                try:
                    inst = _render_instance(shape, y, theta, root6d, tz, jitter,
                                            camera, skeleton, template, space,
                                            schema, kp_noise_px, rng,
                                            bps_points, bps_seed)
                except render.BehindCameraError:
                    continue
                break
            if inst is None:
                raise RuntimeError("could not place instance in front of the camera")
            inst.breed = spec.breed_id
            inst.observation.breed = spec.breed_id
            inst.observation.split = split
            instances.append(inst)
    return instances


def _render_instance(shape, y, theta, root6d, tz, jitter, camera, skeleton,
                     template, space, schema, kp_noise_px, rng,
                     bps_points, bps_seed):
    root_mat = model_mod.rot6d_to_rotmat(root6d)
    joint_mats = model_mod.axis_angle_to_rotmat(theta)
    verts, _, joints = model_mod.pose_mesh(
        skeleton, template, space, shape.beta_pca, shape.kappa,
        root_mat, joint_mats, np.zeros(3))
    center = 0.5 * (verts.max(axis=0) + verts.min(axis=0))
    translation = np.array([jitter[0] - center[0], jitter[1] - center[1],
                            tz - center[2]])
    kp3d = model_mod.keypoints_3d(template, skeleton.num_joints, verts, joints)
    kp2d = ad.value_of(render.project(kp3d, camera, translation))
    if kp_noise_px > 0:
        kp2d = kp2d + rng.normal(0.0, kp_noise_px, kp2d.shape)
    visible = ((kp2d[:, 0] >= 0) & (kp2d[:, 0] < camera.width)
               & (kp2d[:, 1] >= 0) & (kp2d[:, 1] < camera.height))
    v2 = ad.value_of(render.project(verts, camera, translation))
    mask = render.hard_rasterize(v2, template.faces, camera)
    bps = render.bps_encode(mask, num_points=bps_points, seed=bps_seed)
    obs = Observation2D(keypoints=kp2d, visibility=visible, mask=mask,
                        bps=bps.distances, breed="", split="train")
    return SynthInstance(shape=shape, y=y, theta=theta, root_rot6d=root6d,
                         translation=translation, focal=camera.focal,
                         observation=obs, breed="")


# ---------------------------------------------------------------------------
# metrics

def mask_bbox(mask):
    ys, xs = np.nonzero(np.asarray(mask))
    if ys.size == 0:
        raise ValueError("empty mask has no bounding box")
    return xs.min(), ys.min(), xs.max(), ys.max()


def pck(pred, gt, visibility, gt_mask, ratio=0.15):
    """Percentage of visible keypoints within ratio * sqrt(bbox area)."""
    vis = np.asarray(visibility, dtype=bool)
    if not vis.any():
        raise ValueError("pck needs at least one visible keypoint")
    x0, y0, x1, y1 = mask_bbox(gt_mask)
    thr = ratio * np.sqrt((x1 - x0 + 1.0) * (y1 - y0 + 1.0))
    d = np.linalg.norm(np.asarray(pred) - np.asarray(gt), axis=-1)
    return 100.0 * float((d[vis] <= thr).mean())


def procrustes_align(source, target, with_scale=True):
    """Least-squares similarity (or rigid) alignment via SVD.

    Returns (rotation, translation, scale, rms residual) such that
    scale * R @ s + t approximates the target. Reflections are excluded.
    """
    s = np.asarray(source, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if s.shape != t.shape or s.shape[0] < 3:
        raise ValueError("need matching point sets with at least 3 points")
    mu_s = s.mean(axis=0)
    mu_t = t.mean(axis=0)
    x = s - mu_s
    y = t - mu_t
    h = x.T @ y / s.shape[0]
    u, sing, vt = np.linalg.svd(h)
    if sing[1] < 1e-12 * max(sing[0], 1e-300):
        raise ValueError("degenerate (collinear) point configuration")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    flip = np.diag([1.0, 1.0, d])
    rot = vt.T @ flip @ u.T
    if with_scale:
        var_s = (x * x).sum() / s.shape[0]
        scale = float((sing * np.diag(flip)).sum() / var_s)
    else:
        scale = 1.0
    trans = mu_t - scale * rot @ mu_s
    aligned = scale * s @ rot.T + trans
    rms = float(np.sqrt(((aligned - t) ** 2).sum(axis=1).mean()))
    return rot, trans, scale, rms


def prototype_consistency(predictions, prototype_mesh, skeleton, space,
                          lbs_weights, with_scale=True):
    """Mean and variance of vertex-to-vertex error against a breed prototype.

    Each predicted ShapeParams is reposed to the canonical rest pose,
    Procrustes-aligned to the prototype mesh, and scored by mean vertex
    error in units of the prototype's torso length.
    """
    if not predictions:
        raise ValueError("need at least one prediction")
    proto = np.asarray(prototype_mesh, dtype=np.float64)
    torso = model_mod.torso_length(proto, skeleton.torso_endpoint_vertex_ids)
    errors = []
    for shape in predictions:
        mesh = model_mod.repose_tpose(shape, space, skeleton, lbs_weights)
        rot, trans, scale, _ = procrustes_align(mesh, proto, with_scale=with_scale)
        aligned = scale * mesh @ rot.T + trans
        errors.append(float(np.linalg.norm(aligned - proto, axis=1).mean()) / torso)
    errors = np.asarray(errors)
    return float(errors.mean()), float(errors.var())


def cluster_quality(latents, labels):
    """Mean silhouette coefficient of the latent codes under breed labels.

    Singleton classes are dropped with a warning; ties (zero spread) score 0.
    """
    z = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    singletons = uniq[counts < 2]
    if singletons.size:
        warnings.warn(f"dropping singleton classes: {list(singletons)}")
        keep = ~np.isin(labels, singletons)
        z, labels = z[keep], labels[keep]
        uniq, counts = np.unique(labels, return_counts=True)
    if uniq.size < 2:
        raise ValueError("cluster quality needs at least two multi-sample classes")
    diff = z[:, None, :] - z[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    scores = np.empty(z.shape[0])
    for i in range(z.shape[0]):
        same = labels == labels[i]
        a = dist[i, same & (np.arange(z.shape[0]) != i)].mean()
        b = min(dist[i, labels == other].mean() for other in uniq if other != labels[i])
        m = max(a, b)
        scores[i] = 0.0 if m == 0.0 else (b - a) / m
    return float(scores.mean())
