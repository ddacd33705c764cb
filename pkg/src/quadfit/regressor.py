"""Trainable regressor from 2D observations to shape, breed, pose and camera.

Shape branch: MLP on (keypoints + silhouette encoding) to a latent z, with
single affine heads from z to breed logits, shape coefficients and limb
scales. Pose branch: MLP on (keypoints + silhouette encoding + bone lengths
derived from the shape branch) to root rotation, pose latent, translation
and log focal length. The pose latent decodes through a frozen flow prior.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import flow as flow_mod
from . import losses as losses_mod
from . import model as model_mod
from . import render
from . import synth as synth_mod
from .model import ShapeParams


class TrainDivergenceError(RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass
class RegressorNet:
    params: dict            # name -> array
    z_dim: int
    num_classes: int
    shape_dim: int          # K
    flow_dim: int
    n_kp: int
    n_bps: int
    num_joints: int
    f_target: float = 500.0


@dataclass
class TrainConfig:
    epochs: int = 40
    breeds_per_batch: int = 5
    per_breed: int = 6
    lr: float = 1e-3
    weights: losses_mod.LossWeights = field(default_factory=losses_mod.LossWeights)
    sil_resolution: int = 24
    hidden: int = 256
    z_dim: int = 64
    ref_breed_count: int = 0     # breeds (by index) with a reference shape
    seed: int = 0
    val_every: int = 5

    def __post_init__(self):
        if self.breeds_per_batch < 2 and self.weights.w_triplet > 0:
            raise ValueError("triplet loss needs at least 2 breeds per batch")


def encode_observation(obs, camera):
    """Network input: visibility-masked normalized keypoints plus BPS code."""
    kp = obs.keypoints / np.array([camera.width, camera.height])
    vis = obs.visibility.astype(np.float64)
    feat = np.concatenate([(kp * vis[:, None]).reshape(-1), vis, obs.bps])
    return feat


def init_net(n_kp, n_bps, num_joints, num_classes, shape_dim, flow_dim,
             hidden=256, z_dim=64, f_target=500.0, seed=0):
    rng = np.random.default_rng(seed)
    in_shape = n_kp * 3 + n_bps
    in_pose = in_shape + (num_joints - 1)
    out_pose = 6 + flow_dim + 3 + 1

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out))

    p = {
        "sw1": dense(in_shape, hidden), "sb1": np.zeros(hidden),
        "sw2": dense(hidden, hidden), "sb2": np.zeros(hidden),
        "sw3": dense(hidden, hidden), "sb3": np.zeros(hidden),
        "zw": dense(hidden, z_dim), "zb": np.zeros(z_dim),
        # affine heads from z start neutral
        "logit_w": np.zeros((z_dim, num_classes)), "logit_b": np.zeros(num_classes),
        "beta_w": np.zeros((z_dim, shape_dim)), "beta_b": np.zeros(shape_dim),
        "kappa_w": np.zeros((z_dim, model_mod.NUM_SCALE_GROUPS)),
        "kappa_b": np.zeros(model_mod.NUM_SCALE_GROUPS),
        "pw1": dense(in_pose, hidden), "pb1": np.zeros(hidden),
        "pw2": dense(hidden, hidden), "pb2": np.zeros(hidden),
        "pw3": dense(hidden, hidden), "pb3": np.zeros(hidden),
        "ow": np.zeros((hidden, out_pose)), "ob": np.zeros(out_pose),
    }
    return RegressorNet(params=p, z_dim=z_dim, num_classes=num_classes,
                        shape_dim=shape_dim, flow_dim=flow_dim, n_kp=n_kp,
                        n_bps=n_bps, num_joints=num_joints, f_target=f_target)


_UPRIGHT6D = None


def _upright6d():
    global _UPRIGHT6D
    if _UPRIGHT6D is None:
        _UPRIGHT6D = model_mod.rotmat_to_rot6d(render.upright_rotmat())
    return _UPRIGHT6D


def _softplus(x):
    return ad.log(ad.add(ad.exp(x), 1.0))


def forward(net, features, skeleton, params=None):
    """Batched forward pass, features (B, n_in). Returns dict of outputs."""
    p = params if params is not None else net.params
    h = ad.tanh(ad.add(ad.matmul(features, p["sw1"]), p["sb1"]))
    h = ad.tanh(ad.add(ad.matmul(h, p["sw2"]), p["sb2"]))
    h = ad.tanh(ad.add(ad.matmul(h, p["sw3"]), p["sb3"]))
    z = ad.add(ad.matmul(h, p["zw"]), p["zb"])
    logits = ad.add(ad.matmul(z, p["logit_w"]), p["logit_b"])
    beta = ad.add(ad.matmul(z, p["beta_w"]), p["beta_b"])
    kappa = ad.add(ad.matmul(z, p["kappa_w"]), p["kappa_b"])

    # bone lengths after limb scaling feed the pose branch
    m = skeleton.scale_matrix()[1:]                          # (J-1, 7)
    base = np.linalg.norm(skeleton.offsets[1:], axis=1)
    lengths = ad.mul(base, ad.exp(ad.matmul(kappa, m.T)))    # (B, J-1)

    pin = ad.concat([features, lengths], axis=-1)
    g = ad.tanh(ad.add(ad.matmul(pin, p["pw1"]), p["pb1"]))
    g = ad.tanh(ad.add(ad.matmul(g, p["pw2"]), p["pb2"]))
    g = ad.tanh(ad.add(ad.matmul(g, p["pw3"]), p["pb3"]))
    raw = ad.add(ad.matmul(g, p["ow"]), p["ob"])

    d = net.flow_dim
    root6d = ad.add(raw[:, 0:6], _upright6d())
    y = raw[:, 6:6 + d]
    tx = raw[:, 6 + d]
    ty = raw[:, 7 + d]
    tz = ad.add(_softplus(ad.add(raw[:, 8 + d], 2.0851)), 1.0)   # starts at 3.2
    translation = ad.stack([tx, ty, tz], axis=-1)
    logf = ad.add(ad.mul(raw[:, 9 + d], 0.25), np.log(net.f_target))
    return {"z": z, "logits": logits, "beta": beta, "kappa": kappa,
            "root6d": root6d, "y": y, "translation": translation, "logf": logf}


def regress(net, obs, skeleton, pose_flow, camera):
    """Single-observation inference: (z, logits, ShapeParams, pose fields, focal)."""
    feat = encode_observation(obs, camera)[None, :]
    out = forward(net, feat, skeleton)
    theta = ad.value_of(flow_mod.flow_inverse(pose_flow, out["y"]))[0].reshape(-1, 3)
    return {
        "z": ad.value_of(out["z"])[0],
        "logits": ad.value_of(out["logits"])[0],
        "shape": ShapeParams(beta_pca=ad.value_of(out["beta"])[0],
                             kappa=ad.value_of(out["kappa"])[0]),
        "root_rot6d": ad.value_of(out["root6d"])[0],
        "y": ad.value_of(out["y"])[0],
        "theta": theta,
        "translation": ad.value_of(out["translation"])[0],
        "focal": float(np.exp(ad.value_of(out["logf"])[0])),
    }


def _batch_loss(net, leaves, batch_obs, features, skeleton, template, space,
                shape_prior, pose_flow, camera, weights, sil_resolution,
                breed_index, breed_refs):
    out = forward(net, features, skeleton, params=leaves)
    b = len(batch_obs)
    theta_flat = flow_mod.flow_inverse(pose_flow, out["y"])
    theta = ad.reshape(theta_flat, (b, skeleton.num_joints - 1, 3))
    joint_mats = model_mod.axis_angle_to_rotmat(theta)
    root_mat = model_mod.rot6d_to_rotmat(out["root6d"])
    verts, _, joints = model_mod.pose_mesh(
        skeleton, template, space, out["beta"], out["kappa"], root_mat,
        joint_mats, ad.value_of(out["translation"]) * 0.0)
    kp3d = model_mod.keypoints_3d(template, skeleton.num_joints, verts, joints)
    f = ad.reshape(ad.exp(out["logf"]), (b, 1))
    trans = ad.reshape(out["translation"], (b, 1, 3))
    kp2d = render.project(kp3d, camera, trans, focal=ad.reshape(f, (b, 1, 1)))

    state = {
        "kp2d": kp2d, "beta": out["beta"], "kappa": out["kappa"],
        "y": out["y"], "theta": theta, "f": ad.reshape(f, (b,)),
        "z": out["z"], "logits": out["logits"],
    }
    if weights.w_sil > 0 and sil_resolution:
        ratio = sil_resolution / camera.width
        sil_cam = render.Camera(focal=camera.focal * ratio, cx=camera.cx * ratio,
                                cy=camera.cy * ratio, width=sil_resolution,
                                height=sil_resolution)
        v2 = render.project(verts, camera, trans, focal=ad.reshape(f, (b, 1, 1)))
        v2s = ad.mul(v2, ratio)
        state["soft_mask_fn"] = lambda i: render.soft_rasterize(
            v2s[i], template.faces, sil_cam, sigma=1e-4)
        state["sil_gt"] = [render.downsample_mask(o.mask, (sil_resolution, sil_resolution))
                           for o in batch_obs]
    return losses_mod.total_loss(state, batch_obs, shape_prior, skeleton, weights,
                                 mode="train", breed_refs=breed_refs,
                                 breed_index=breed_index)


def _stratified_batches(by_breed, breeds_per_batch, per_breed, steps, rng):
    """Deterministic breed-stratified batch index lists."""
    names = sorted(by_breed)
    batches = []
    for _ in range(steps):
        chosen = rng.choice(len(names), size=min(breeds_per_batch, len(names)),
                            replace=False)
        batch = []
        for c in chosen:
            pool = by_breed[names[c]]
            take = rng.choice(len(pool), size=min(per_breed, len(pool)), replace=False)
            batch.extend(pool[i] for i in take)
        batches.append(batch)
    return batches


def evaluate_regressor(net, observations, breeds, skeleton, template, space,
                       pose_flow, camera):
    """Validation metrics: per-breed prototype consistency and latent clustering."""
    by_breed = {}
    latents, labels = [], []
    for o in observations:
        pred = regress(net, o, skeleton, pose_flow, camera)
        by_breed.setdefault(o.breed, []).append(pred["shape"])
        latents.append(pred["z"])
        labels.append(o.breed)
    per_breed = {}
    for spec in breeds:
        if spec.breed_id not in by_breed:
            continue
        proto_mesh = model_mod.repose_tpose(spec.prototype, space, skeleton,
                                            template.lbs_weights)
        mean_err, var_err = synth_mod.prototype_consistency(
            by_breed[spec.breed_id], proto_mesh, skeleton, space, template.lbs_weights)
        per_breed[spec.breed_id] = (mean_err, var_err)
    proto_mean = float(np.mean([v[0] for v in per_breed.values()]))
    cq = synth_mod.cluster_quality(np.stack(latents), np.array(labels))
    return {"proto_mean": proto_mean, "cluster_quality": cq, "per_breed": per_breed}


def train_regressor(train_obs, val_obs, breeds, skeleton, template, space,
                    shape_prior, pose_flow, camera, config=None):
    """Joint training against the reprojection, prior and breed losses.

    The flow prior stays frozen. Returns (net, history): history rows carry
    the per-term loss breakdown and periodic validation metrics.
    """
    config = config or TrainConfig()
    if not train_obs:
        raise ValueError("empty training set")
    breed_index = {b.breed_id: i for i, b in enumerate(breeds)}
    breed_refs = {}
    if config.ref_breed_count and config.weights.w_3d > 0:
        for spec in breeds[:config.ref_breed_count]:
            breed_refs[spec.breed_id] = spec.prototype

    schema_len = len(train_obs[0].keypoints)
    net = init_net(schema_len, len(train_obs[0].bps), skeleton.num_joints,
                   num_classes=len(breeds), shape_dim=space.num_coeffs,
                   flow_dim=pose_flow.dim, hidden=config.hidden,
                   z_dim=config.z_dim, f_target=config.weights.f_target,
                   seed=config.seed)

    feats = {id(o): encode_observation(o, camera) for o in train_obs}
    by_breed = {}
    for o in train_obs:
        by_breed.setdefault(o.breed, []).append(o)

    rng = np.random.default_rng(config.seed + 17)
    names = sorted(net.params)
    m_state = {n: np.zeros_like(net.params[n]) for n in names}
    v_state = {n: np.zeros_like(net.params[n]) for n in names}
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []
    batch_size = config.breeds_per_batch * config.per_breed
    steps_per_epoch = max(1, len(train_obs) // batch_size)

    for epoch in range(config.epochs):
        batches = _stratified_batches(by_breed, config.breeds_per_batch,
                                      config.per_breed, steps_per_epoch, rng)
        sums, flags_sum = {}, {"n_triplets": 0, "sil_open": 0}
        for batch in batches:
            features = np.stack([feats[id(o)] for o in batch])
            tape = ad.Tape()
            leaves = {n: tape.leaf(net.params[n]) for n in names}
            loss, breakdown, flags = _batch_loss(
                net, leaves, batch, features, skeleton, template, space,
                shape_prior, pose_flow, camera, config.weights,
                config.sil_resolution, breed_index, breed_refs)
            val = float(ad.value_of(loss))
            if not np.isfinite(val):
                raise TrainDivergenceError("non-finite training loss", history)
            grads = ad.backward(loss)
            step += 1
            for n in names:
                g = grads.wrt(leaves[n])
                m_state[n] = b1 * m_state[n] + (1 - b1) * g
                v_state[n] = b2 * v_state[n] + (1 - b2) * g * g
                mhat = m_state[n] / (1 - b1 ** step)
                vhat = v_state[n] / (1 - b2 ** step)
                net.params[n] = net.params[n] - config.lr * mhat / (np.sqrt(vhat) + eps)
            for k, v in breakdown.items():
                sums[k] = sums.get(k, 0.0) + v
            for k in flags_sum:
                flags_sum[k] += flags[k]
        row = {"epoch": epoch}
        row.update({k: v / len(batches) for k, v in sums.items()})
        row.update(flags_sum)
        last = epoch == config.epochs - 1
        if val_obs and (last or (epoch + 1) % config.val_every == 0):
            metrics = evaluate_regressor(net, val_obs, breeds, skeleton, template,
                                         space, pose_flow, camera)
            row["val_proto"] = metrics["proto_mean"]
            row["val_cluster"] = metrics["cluster_quality"]
        history.append(row)
    return net, history
