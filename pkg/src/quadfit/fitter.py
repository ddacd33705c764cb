"""Staged Adam fitting of shape, pose latent, translation and focal length
to a single 2D observation."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import flow as flow_mod
from . import losses as losses_mod
from . import model as model_mod
from . import render
from .model import PoseState, ShapeParams


class FitDivergenceError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class FitConfig:
    iterations: tuple = (120, 150, 150)
    learning_rates: tuple = (0.05, 0.02, 0.01)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sigma: float = 1e-4          # soft-rasterizer width, annealed x0.5 twice in stage 3
    sil_resolution: int = 48
    weights: losses_mod.LossWeights = field(default_factory=losses_mod.LossWeights)
    num_yaw_starts: int = 8
    init_depth: float = 3.2
    seed: int = 0

    def __post_init__(self):
        if len(self.iterations) != 3 or len(self.learning_rates) != 3:
            raise ValueError("three stages expected")
        if min(self.iterations) < 1 or min(self.learning_rates) <= 0:
            raise ValueError("iterations and learning rates must be positive")


@dataclass
class FitState:
    shape: ShapeParams
    pose: PoseState
    focal: float


@dataclass
class FitResult:
    state: FitState
    trace: list               # per-stage lists of running-best losses
    breakdown: dict
    error: str = ""


def adam_step(param, grad, m, v, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=1):
    """One bias-corrected Adam update; returns (new param, new m, new v)."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    return param - lr * mhat / (np.sqrt(vhat) + eps), m, v


_STAGE_LEAVES = (
    ("translation", "root6d", "logf"),
    ("translation", "root6d", "logf", "y"),
    ("translation", "root6d", "logf", "y", "beta", "kappa"),
)


def _upright_yaw_rot6d(yaw):
    cz, sz = np.cos(yaw), np.sin(yaw)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    upright = np.array([[0.0, 0.0, -1.0], [0.0, -1.0, 0.0], [-1.0, 0.0, 0.0]]).T
    return model_mod.rotmat_to_rot6d(upright @ rz)


def _evaluate(params, free, observation, skeleton, template, space, shape_prior,
              pose_flow, camera, weights, sigma, sil_resolution, want_sil):
    """One loss evaluation; returns (loss Var, breakdown, leaves dict)."""
    tape = ad.Tape()
    leaves = {}

    def get(name):
        if name in free:
            if name not in leaves:
                leaves[name] = tape.leaf(params[name])
            return leaves[name]
        return params[name]

    beta = get("beta")
    kappa = get("kappa")
    y = get("y")
    root6d = get("root6d")
    translation = get("translation")
    logf = get("logf")
    f = ad.exp(logf)

    theta = ad.reshape(flow_mod.flow_inverse(pose_flow, y), (skeleton.num_joints - 1, 3))
    joint_mats = model_mod.axis_angle_to_rotmat(theta)
    root_mat = model_mod.rot6d_to_rotmat(root6d)
    verts, _, joints = model_mod.pose_mesh(skeleton, template, space, beta, kappa,
                                           root_mat, joint_mats, np.zeros(3))
    kp3d = model_mod.keypoints_3d(template, skeleton.num_joints, verts, joints)
    kp2d = render.project(kp3d, camera, translation, focal=f)

    state = {
        "kp2d": _batched(kp2d, 1),
        "beta": _batched(beta, 1),
        "kappa": _batched(kappa, 1),
        "y": _batched(y, 1),
        "theta": _batched(theta, 1),
        "f": f,
    }
    if want_sil and weights.w_sil > 0:
        ratio = sil_resolution / camera.width
        sil_cam = render.Camera(focal=camera.focal * ratio, cx=camera.cx * ratio,
                                cy=camera.cy * ratio, width=sil_resolution,
                                height=sil_resolution)
        v2 = render.project(verts, camera, translation, focal=f)
        v2s = ad.mul(v2, ratio)
        state["soft_mask_fn"] = lambda i: render.soft_rasterize(
            v2s, template.faces, sil_cam, sigma=sigma)
        state["sil_gt"] = [render.downsample_mask(observation.mask,
                                                  (sil_resolution, sil_resolution))]

    total, breakdown, _ = losses_mod.total_loss(state, [observation], shape_prior,
                                                skeleton, weights, mode="fit")
    return total, breakdown, leaves


def _batched(x, b):
    shape = ad.value_of(x).shape
    return ad.reshape(x, (b,) + shape)


def _run_stage(params, free, iters, lr, config, observation, skeleton, template,
               space, shape_prior, pose_flow, camera, want_sil, stage_idx):
    m = {n: np.zeros_like(params[n]) for n in free}
    v = {n: np.zeros_like(params[n]) for n in free}
    best = None
    best_params = {n: params[n].copy() for n in params}
    trace = []
    phases = 3 if (want_sil and stage_idx == 2) else 1
    for it in range(iters):
        sigma = config.sigma * 0.5 ** min(phases - 1, it * phases // max(iters, 1))
        loss, breakdown, leaves = _evaluate(
            params, free, observation, skeleton, template, space, shape_prior,
            pose_flow, camera, config.weights, sigma, config.sil_resolution, want_sil)
        val = float(ad.value_of(loss))
        if not np.isfinite(val):
            raise FitDivergenceError(f"non-finite loss at stage {stage_idx}", trace)
        if best is None or val < best:
            best = val
            best_params = {n: params[n].copy() for n in params}
            best_breakdown = breakdown
        trace.append(best)
        grads = ad.backward(loss)
        for n in free:
            g = grads.wrt(leaves[n]) if n in leaves else np.zeros_like(params[n])
            params[n], m[n], v[n] = adam_step(params[n], g, m[n], v[n], lr,
                                              config.beta1, config.beta2,
                                              config.eps, it + 1)
    for n in params:
        params[n] = best_params[n]
    return params, trace, best_breakdown


def fit_instance(observation, skeleton, template, space, shape_prior, pose_flow,
                 camera, config=None):
    """Staged minimization: stage 1 frees camera and root, stage 2 the pose
    latent, stage 3 the shape, with the silhouette term gate-eligible."""
    config = config or FitConfig()
    if int(np.sum(observation.visibility)) < 4:
        raise ValueError("fitting needs at least 4 visible keypoints")

    params = {
        "beta": np.zeros(space.num_coeffs),
        "kappa": np.zeros(model_mod.NUM_SCALE_GROUPS),
        "y": np.zeros(pose_flow.dim),
        "translation": np.array([0.0, 0.0, config.init_depth]),
        "root6d": _upright_yaw_rot6d(0.0),
        "logf": np.array(np.log(config.weights.f_target)),
    }

    # coarse yaw sweep picks the stage-1 starting orientation
    best_yaw, best_val = 0.0, np.inf
    for k in range(max(config.num_yaw_starts, 1)):
        yaw = 2.0 * np.pi * k / max(config.num_yaw_starts, 1)
        trial = dict(params, root6d=_upright_yaw_rot6d(yaw))
        loss, _, _ = _evaluate(trial, (), observation, skeleton, template, space,
                               shape_prior, pose_flow, camera, config.weights,
                               config.sigma, config.sil_resolution, False)
        val = float(ad.value_of(loss))
        if val < best_val:
            best_yaw, best_val = yaw, val
    params["root6d"] = _upright_yaw_rot6d(best_yaw)

    stage_traces = []
    breakdown = {}
    for stage in range(3):
        want_sil = stage == 2
        params, trace, breakdown = _run_stage(
            params, _STAGE_LEAVES[stage], config.iterations[stage],
            config.learning_rates[stage], config, observation, skeleton,
            template, space, shape_prior, pose_flow, camera, want_sil, stage)
        stage_traces.append(trace)

    theta = ad.value_of(flow_mod.flow_inverse(pose_flow, params["y"])).reshape(-1, 3)
    state = FitState(
        shape=ShapeParams(beta_pca=params["beta"], kappa=params["kappa"]),
        pose=PoseState(root_rot6d=params["root6d"],
                       joint_rot6d=model_mod.axis_angle_to_rot6d(theta),
                       latent=params["y"], translation=params["translation"]),
        focal=float(np.exp(params["logf"])),
    )
    return FitResult(state=state, trace=stage_traces, breakdown=breakdown)


def fit_batch(observations, skeleton, template, space, shape_prior, pose_flow,
              camera, config=None, jobs=1):
    """Independent fits; results identical regardless of worker count."""
    def run(obs):
        try:
            return fit_instance(obs, skeleton, template, space, shape_prior,
                                pose_flow, camera, config)
        except (ValueError, FitDivergenceError, render.BehindCameraError) as e:
            return FitResult(state=None, trace=[], breakdown={}, error=str(e))

    if jobs <= 1:
        return [run(o) for o in observations]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run, observations))
