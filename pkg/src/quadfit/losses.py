"""Data terms, priors mixing, breed terms, and total-loss assembly.

Losses are written against a batch: state entries carry a leading batch
dimension and observations come as a list. Per-instance values are averaged
over the batch except the breed triplet term, which sums over mined triplets.
"""

import warnings
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import autodiff as ad
from . import priors as priors_mod

DEFAULT_KEYPOINT_WEIGHTS = (
    ("left_front_paw", 3.0), ("left_front_middle", 2.0), ("left_front_top", 2.0),
    ("left_rear_paw", 3.0), ("left_rear_middle", 2.0), ("left_rear_top", 2.0),
    ("right_front_paw", 3.0), ("right_front_middle", 2.0), ("right_front_top", 2.0),
    ("right_rear_paw", 3.0), ("right_rear_middle", 2.0), ("right_rear_top", 2.0),
    ("tail_start", 3.0), ("tail_end", 3.0),
    ("base_left_ear", 2.0), ("base_right_ear", 2.0),
    ("nose", 3.0), ("chin", 1.0),
    ("left_ear_tip", 2.0), ("right_ear_tip", 2.0),
    ("left_eye", 1.0), ("right_eye", 1.0),
)


class NoVisibleKeypointsError(ValueError):
    """An instance has no visible keypoints so the loss is undefined."""


@dataclass(frozen=True)
class KeypointSchema:
    names: tuple
    weights: np.ndarray  # (N_kp,) positive

    def __post_init__(self):
        if len(self.names) != len(self.weights):
            raise ValueError("one weight per keypoint required")
        if np.any(np.asarray(self.weights) <= 0):
            raise ValueError("keypoint weights must be positive")

    def __len__(self):
        return len(self.names)

    @staticmethod
    def default():
        names = tuple(n for n, _ in DEFAULT_KEYPOINT_WEIGHTS)
        weights = np.array([w for _, w in DEFAULT_KEYPOINT_WEIGHTS])
        return KeypointSchema(names=names, weights=weights)


@dataclass
class Observation2D:
    keypoints: np.ndarray   # (N_kp, 2) pixels
    visibility: np.ndarray  # (N_kp,) bool
    mask: np.ndarray        # (H, W) bool silhouette
    bps: np.ndarray         # (B,) basis-point distances
    breed: str = ""
    split: str = "train"


@dataclass(frozen=True)
class LossWeights:
    """Every loss weight and threshold, loadable from JSON by field name."""

    w_kp: float = 1.0
    w_sil: float = 1.0
    w_beta: float = 0.2
    w_kappa: float = 1.0
    w_nf: float = 0.2
    w_side: float = 0.5
    w_cam: float = 1e-4
    w_triplet: float = 5.0
    w_cs: float = 1.0
    w_3d: float = 1.0
    m: float = 1.0          # triplet margin
    T: float = 10.0         # mean-keypoint-error gate for the silhouette term, px
    f_target: float = 500.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name != "f_target" and value < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.T <= 0:
            raise ValueError("T must be positive")

    def updated(self, **kw):
        return replace(self, **kw)

    @staticmethod
    def from_dict(d):
        known = {f for f in LossWeights.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown loss weight fields: {sorted(bad)}")
        return LossWeights(**d)


# ---------------------------------------------------------------------------
# data terms

def keypoint_loss(pred, gt, visibility, schema):
    """Weighted mean squared pixel distance over visible keypoints, (...,)."""
    vis = np.asarray(visibility, dtype=np.float64)
    w = np.asarray(schema.weights) * vis
    den = w.sum(axis=-1)
    if np.any(den <= 0):
        raise NoVisibleKeypointsError("keypoint loss over zero visible keypoints")
    d2 = ad.sum_(ad.square(ad.sub(pred, gt)), axis=-1)
    return ad.div(ad.sum_(ad.mul(d2, w), axis=-1), den)


def mean_keypoint_error(pred, gt, visibility):
    """Unweighted mean pixel distance over visible keypoints, (...,)."""
    vis = np.asarray(visibility, dtype=np.float64)
    n = vis.sum(axis=-1)
    if np.any(n <= 0):
        raise NoVisibleKeypointsError("mean keypoint error over zero visible keypoints")
    d = ad.norm(ad.sub(pred, gt), axis=-1, eps=1e-24)
    return ad.div(ad.sum_(ad.mul(d, vis), axis=-1), n)


def silhouette_loss(pred_mask, gt_mask, kp_mean_error, threshold):
    """Summed squared pixel error, gated off unless the fit is already close.

    Returns exactly 0.0 (no gradient) when kp_mean_error >= threshold.
    """
    if float(kp_mean_error) >= threshold:
        return 0.0
    gt = np.asarray(gt_mask, dtype=np.float64)
    if ad.value_of(pred_mask).shape != gt.shape:
        raise ValueError("mask size mismatch")
    return ad.sum_(ad.square(ad.sub(pred_mask, gt)))


# ---------------------------------------------------------------------------
# breed terms

def mine_triplets(latents_value, labels):
    """Hardest-negative mining: every ordered same-breed pair as (anchor,
    positive), matched with the anchor's closest different-breed sample."""
    z = np.asarray(latents_value)
    labels = np.asarray(labels)
    n = z.shape[0]
    diff = z[:, None, :] - z[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    anchors, positives, negatives = [], [], []
    for a in range(n):
        negs = np.flatnonzero(labels != labels[a])
        if negs.size == 0:
            continue
        hardest = negs[int(np.argmin(dist[a, negs]))]
        for p in range(n):
            if p != a and labels[p] == labels[a]:
                anchors.append(a)
                positives.append(p)
                negatives.append(hardest)
    return (np.array(anchors, dtype=np.int64),
            np.array(positives, dtype=np.int64),
            np.array(negatives, dtype=np.int64))


def triplet_loss(latents, labels, margin):
    """Summed hinge over mined triplets. Returns (loss, number of triplets);
    a batch with no valid triplet contributes 0 and raises a warning."""
    a, p, n = mine_triplets(ad.value_of(latents), labels)
    if a.size == 0:
        warnings.warn("no valid triplets in batch; triplet loss is 0")
        return 0.0, 0
    b = ad.value_of(latents).shape[0]
    z1 = ad.reshape(latents, (b, 1, -1))
    z2 = ad.reshape(latents, (1, b, -1))
    dist = ad.norm(ad.sub(z1, z2), axis=-1, eps=1e-24)
    d_ap = dist[a, p]
    d_an = dist[a, n]
    hinge = ad.relu(ad.add(ad.sub(d_ap, d_an), margin))
    return ad.sum_(hinge), int(a.size)


def breed_ce_loss(logits, label, num_classes=None):
    """Cross-entropy of the breed head, -log softmax(logits)[label].

    logits (..., C); label int or (...,) ints. Returns per-instance values.
    """
    c = ad.value_of(logits).shape[-1]
    if num_classes is not None and c != num_classes:
        raise ValueError(f"expected {num_classes} classes, got {c}")
    labels = np.asarray(label)
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError("breed label out of range")
    lse = ad.logsumexp(logits, axis=-1)
    if labels.ndim == 0:
        picked = logits[..., int(labels)]
    else:
        picked = logits[np.arange(labels.shape[0]), labels]
    return ad.sub(lse, picked)


def model3d_loss(pred_beta, pred_kappa, ref_beta, ref_kappa):
    """Component-wise squared error against a breed reference shape, (...,)."""
    if ad.value_of(pred_beta).shape[-1] != np.asarray(ref_beta).shape[-1]:
        raise ValueError("shape coefficient dimension mismatch")
    b = ad.sum_(ad.square(ad.sub(pred_beta, ref_beta)), axis=-1)
    k = ad.sum_(ad.square(ad.sub(pred_kappa, ref_kappa)), axis=-1)
    return ad.add(b, k)


# ---------------------------------------------------------------------------
# total loss

_TERM_ORDER = ("kp", "sil", "beta", "kappa", "nf", "side", "cam",
               "triplet", "cs", "model3d")


def total_loss(state, observations, shape_prior, skeleton, weights,
               schema=None, mode="fit", breed_refs=None, breed_index=None):
    """Weighted sum of all enabled terms over a batch.

    state: dict with batched entries (leading dim = len(observations)):
      kp2d (B, N, 2)      predicted pixel keypoints (required)
      beta (B, K), kappa (B, 7)
      y (B, D)            flow latent, prior term 0.5 y'y
      theta (B, J-1, 3)   axis-angle pose for the side penalty
      f (), or (B,)       focal length
      z (B, Dz), logits (B, C)   train mode
      soft_mask_fn        callable(i) -> soft mask Var for instance i
      sil_gt              list of ground-truth masks matching the render size
    Breed terms run only in train mode; the reference-shape term only for
    instances whose breed is in breed_refs.

    Returns (total, breakdown dict of weighted term floats, flags dict).
    Breakdown values sum to the total exactly, in _TERM_ORDER order.
    """
    if mode not in ("fit", "train"):
        raise ValueError("mode must be 'fit' or 'train'")
    schema = schema or KeypointSchema.default()
    gt_kp = np.stack([o.keypoints for o in observations])
    vis = np.stack([o.visibility for o in observations])
    flags = {"n_triplets": 0, "sil_open": 0}
    terms = {}

    if weights.w_kp > 0:
        terms["kp"] = ad.mul(ad.mean(keypoint_loss(state["kp2d"], gt_kp, vis, schema)),
                             weights.w_kp)

    if weights.w_sil > 0 and state.get("soft_mask_fn") is not None:
        kp_err = ad.value_of(mean_keypoint_error(state["kp2d"], gt_kp, vis))
        kp_err = np.atleast_1d(kp_err)
        parts = []
        for i, o in enumerate(observations):
            gt_mask = state["sil_gt"][i] if "sil_gt" in state else o.mask
            if kp_err[i] < weights.T:
                parts.append(silhouette_loss(state["soft_mask_fn"](i), gt_mask,
                                             kp_err[i], weights.T))
                flags["sil_open"] += 1
        if parts:
            total_sil = parts[0]
            for p in parts[1:]:
                total_sil = ad.add(total_sil, p)
            terms["sil"] = ad.mul(ad.div(total_sil, float(len(observations))),
                                  weights.w_sil)

    if weights.w_beta > 0 and "beta" in state:
        terms["beta"] = ad.mul(ad.mean(priors_mod.shape_prior(state["beta"], shape_prior)),
                               weights.w_beta)
    if weights.w_kappa > 0 and "kappa" in state:
        terms["kappa"] = ad.mul(ad.mean(priors_mod.scale_prior(state["kappa"])),
                                weights.w_kappa)
    if weights.w_nf > 0 and "y" in state:
        terms["nf"] = ad.mul(ad.mean(ad.mul(ad.sum_(ad.square(state["y"]), axis=-1), 0.5)),
                             weights.w_nf)
    if weights.w_side > 0 and "theta" in state:
        terms["side"] = ad.mul(ad.mean(priors_mod.side_leg_penalty_rotvec(
            skeleton, state["theta"])), weights.w_side)
    if weights.w_cam > 0 and "f" in state:
        terms["cam"] = ad.mul(ad.mean(priors_mod.camera_prior(state["f"], weights.f_target)),
                              weights.w_cam)

    if mode == "train":
        if weights.w_triplet > 0 and "z" in state:
            labels = np.array([breed_index[o.breed] for o in observations])
            tl, n_trip = triplet_loss(state["z"], labels, weights.m)
            flags["n_triplets"] = n_trip
            if n_trip:
                terms["triplet"] = ad.mul(tl, weights.w_triplet)
        if weights.w_cs > 0 and "logits" in state:
            labels = np.array([breed_index[o.breed] for o in observations])
            terms["cs"] = ad.mul(ad.mean(breed_ce_loss(state["logits"], labels)),
                                 weights.w_cs)
        if weights.w_3d > 0 and breed_refs and "beta" in state:
            rows = [i for i, o in enumerate(observations) if o.breed in breed_refs]
            if rows:
                ref_b = np.stack([breed_refs[observations[i].breed].beta_pca for i in rows])
                ref_k = np.stack([breed_refs[observations[i].breed].kappa for i in rows])
                sel = np.array(rows)
                m3 = model3d_loss(state["beta"][sel], state["kappa"][sel], ref_b, ref_k)
                terms["model3d"] = ad.mul(ad.mean(m3), weights.w_3d)

    total = None
    breakdown = {}
    for name in _TERM_ORDER:
        if name not in terms:
            breakdown[name] = 0.0
            continue
        breakdown[name] = float(ad.value_of(terms[name]))
        total = terms[name] if total is None else ad.add(total, terms[name])
    if total is None:
        total = 0.0
    return total, breakdown, flags
