"""Analytic shape/scale/camera priors, the sideways-leg penalty, and the
synthetic gait corpus used to train the pose prior."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model
from .model import NUM_SCALE_GROUPS


@dataclass(frozen=True)
class GaussianShapePrior:
    mu: np.ndarray         # (K,)
    cov: np.ndarray        # (K, K) symmetric positive definite
    cov_inv: np.ndarray

    @staticmethod
    def from_cov(mu, cov):
        cov = np.asarray(cov, dtype=np.float64)
        eigvals = np.linalg.eigvalsh(cov)
        if eigvals.min() <= 0:
            raise ValueError("shape prior covariance must be positive definite")
        return GaussianShapePrior(mu=np.asarray(mu, dtype=np.float64), cov=cov,
                                  cov_inv=np.linalg.inv(cov))

    @staticmethod
    def from_shape_space(space):
        return GaussianShapePrior.from_cov(space.mean_coeffs, np.diag(space.eigenvalues))


def shape_prior(beta_pca, prior):
    """Mahalanobis form (b - mu)' Sigma^-1 (b - mu), batched over leading dims."""
    k = prior.mu.shape[0]
    if ad.value_of(beta_pca).shape[-1] != k:
        raise ValueError(f"expected {k} shape coefficients")
    d = ad.sub(beta_pca, prior.mu)
    return ad.sum_(ad.mul(d, _matvec(prior.cov_inv, d)), axis=-1)


def _matvec(mat, v):
    shape = ad.value_of(v).shape
    out = ad.matmul(ad.reshape(v, shape[:-1] + (1, shape[-1])), mat.T)
    return ad.reshape(out, shape)


def scale_prior(kappa):
    """Sum of squared log-scales; zero exactly at unit scales."""
    if ad.value_of(kappa).shape[-1] != NUM_SCALE_GROUPS:
        raise ValueError(f"kappa must have length {NUM_SCALE_GROUPS}")
    return ad.sum_(ad.square(kappa), axis=-1)


def camera_prior(f_pred, f_target):
    """Squared deviation from the target focal length."""
    return ad.square(ad.sub(f_pred, f_target))


def _leg_selector(skeleton):
    ids = [j for leg in skeleton.leg_joint_ids for j in leg]
    sel = np.zeros((len(ids), skeleton.num_joints - 1))
    for row, j in enumerate(ids):
        sel[row, j - 1] = 1.0
    return sel


def side_leg_penalty_rotvec(skeleton, theta):
    """Squared abduction component of each leg joint's rotation vector.

    theta: (..., J-1, 3) axis-angle for the non-root joints.
    """
    sel = _leg_selector(skeleton)
    legs = ad.matmul(sel, theta)                       # (..., n_leg, 3)
    comp = ad.sum_(ad.mul(legs, skeleton.abduction_axis), axis=-1)
    return ad.sum_(ad.square(comp), axis=-1)


def side_leg_penalty(skeleton, joint_rot6d):
    """Sideways-pose penalty from per-joint 6D rotations (root excluded)."""
    mats = model.rot6d_to_rotmat(joint_rot6d)
    theta = model.rotmat_to_axis_angle(mats)
    return side_leg_penalty_rotvec(skeleton, theta)


# ---------------------------------------------------------------------------
# synthetic pose corpus (gait-like: walking / standing / jumping, no sitting)

def sample_gait_poses(skeleton, n, seed=0):
    """Flexion-dominant pose vectors, (n, 3*(J-1)) axis-angle.

    Legs follow a sinusoidal gait with per-leg phase offsets; spine, neck
    and tail carry small correlated curvature. Abduction stays near zero.
    """
    rng = np.random.default_rng(seed)
    j = skeleton.num_joints
    theta = np.zeros((n, j - 1, 3))
    names = skeleton.names

    phase = rng.uniform(0.0, 2.0 * np.pi, n)
    amp = rng.uniform(0.05, 0.55, n)
    jump = rng.random(n) < 0.12
    leg_offsets = {"fl": 0.0, "fr": np.pi, "rl": np.pi / 2.0, "rr": 3.0 * np.pi / 2.0}
    gains = {"hip": 1.0, "knee": 0.8, "ankle": 0.5}
    lag = {"hip": 0.0, "knee": 0.7, "ankle": 1.1}

    for jid in range(1, j):
        row = jid - 1
        name = names[jid]
        if "_" in name and name.split("_")[0] in gains:
            part, leg = name.split("_")
            flex = amp * gains[part] * np.sin(phase + leg_offsets[leg] + lag[part])
            flex = np.where(jump, -0.9 * gains[part] + rng.normal(0, 0.05, n), flex)
            theta[:, row, 1] = flex
            theta[:, row, 0] = rng.normal(0.0, 0.02, n)      # abduction stays tiny
            theta[:, row, 2] = rng.normal(0.0, 0.02, n)
        elif name.startswith("spine"):
            theta[:, row, 1] = 0.08 * amp * np.sin(phase) + rng.normal(0, 0.03, n)
            theta[:, row, 2] = 0.10 * amp * np.cos(phase) + rng.normal(0, 0.03, n)
        elif name == "neck":
            theta[:, row, 1] = rng.uniform(-0.35, 0.25, n)
            theta[:, row, 2] = rng.normal(0.0, 0.08, n)
        elif name == "head":
            theta[:, row, 1] = rng.uniform(-0.25, 0.25, n)
            theta[:, row, 2] = rng.normal(0.0, 0.06, n)
        elif name.startswith("tail"):
            seg = int(name[-1])
            wag = rng.uniform(0.1, 0.5, n)
            theta[:, row, 2] = wag * np.sin(2.0 * phase + 0.8 * seg)
            theta[:, row, 1] = rng.normal(0.0, 0.55 / seg, n)
        elif name.startswith("ear"):
            theta[:, row] = rng.normal(0.0, 0.04, (n, 3))
    theta += rng.normal(0.0, 0.01, theta.shape)  # no exactly-degenerate dims
    return theta.reshape(n, -1)
