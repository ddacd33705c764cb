"""Normalizing-flow pose prior built from affine coupling blocks.

The flow maps a pose vector (concatenated per-joint axis-angle rotations,
root excluded) to a latent y with a spherical Gaussian density. Coupling
subnetworks are 2-hidden-layer tanh MLPs whose final layers start at zero,
so an untrained flow is exactly the identity.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class FlowDivergenceError(RuntimeError):
    """Training produced non-finite parameters or losses."""


_PARAM_KEYS = ("sw1", "sb1", "sw2", "sb2", "sw3", "sb3",
               "tw1", "tb1", "tw2", "tb2", "tw3", "tb3")


@dataclass
class FlowPrior:
    dim: int
    hidden: int
    masks: np.ndarray               # (L, D) of {0, 1}
    layers: list = field(default_factory=list)  # per layer: dict name -> array
    shift: np.ndarray = None        # per-dim standardization, fit from data
    scale: np.ndarray = None

    def __post_init__(self):
        if self.shift is None:
            self.shift = np.zeros(self.dim)
        if self.scale is None:
            self.scale = np.ones(self.dim)

    @property
    def num_layers(self):
        return self.masks.shape[0]


def alternating_masks(dim, num_layers):
    """Half masks that swap active halves layer by layer."""
    base = (np.arange(dim) < (dim + 1) // 2).astype(np.float64)
    return np.stack([base if i % 2 == 0 else 1.0 - base for i in range(num_layers)])


def init_flow(dim, num_layers=4, hidden=64, seed=0):
    rng = np.random.default_rng(seed)
    masks = alternating_masks(dim, num_layers)
    layers = []
    for _ in range(num_layers):
        p = {}
        for branch in ("s", "t"):
            p[branch + "w1"] = rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, hidden))
            p[branch + "b1"] = np.zeros(hidden)
            p[branch + "w2"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, hidden))
            p[branch + "b2"] = np.zeros(hidden)
            p[branch + "w3"] = np.zeros((hidden, dim))   # identity start
            p[branch + "b3"] = np.zeros(dim)
        layers.append(p)
    return FlowPrior(dim=dim, hidden=hidden, masks=masks, layers=layers)


def _subnet(x, p, branch):
    h1 = ad.tanh(ad.add(ad.matmul(x, p[branch + "w1"]), p[branch + "b1"]))
    h2 = ad.tanh(ad.add(ad.matmul(h1, p[branch + "w2"]), p[branch + "b2"]))
    return ad.add(ad.matmul(h2, p[branch + "w3"]), p[branch + "b3"])


def _coupling_forward(x, mask, p):
    xm = ad.mul(x, mask)
    s = ad.mul(ad.tanh(_subnet(xm, p, "s")), 1.0 - mask)   # bounded log-scale
    t = ad.mul(_subnet(xm, p, "t"), 1.0 - mask)
    y = ad.add(xm, ad.mul(1.0 - mask, ad.add(ad.mul(x, ad.exp(s)), t)))
    return y, ad.sum_(s, axis=-1)


def _coupling_inverse(y, mask, p):
    ym = ad.mul(y, mask)
    s = ad.mul(ad.tanh(_subnet(ym, p, "s")), 1.0 - mask)
    t = ad.mul(_subnet(ym, p, "t"), 1.0 - mask)
    x = ad.add(ym, ad.mul(1.0 - mask, ad.mul(ad.sub(y, t), ad.exp(ad.mul(s, -1.0)))))
    return x, ad.sum_(s, axis=-1)


def _check_dim(flow, vec):
    if ad.value_of(vec).shape[-1] != flow.dim:
        raise ValueError(f"pose vector dimension {ad.value_of(vec).shape[-1]} "
                         f"!= flow dimension {flow.dim}")


def flow_forward(flow, theta, params=None):
    """Pose -> (latent y, log|det J|). theta is (..., D), 1-d allowed.

    The pose is standardized per dimension first; the reported log-det is
    that of the complete map including the standardization.
    """
    _check_dim(flow, theta)
    squeeze = ad.value_of(theta).ndim == 1
    x = ad.reshape(theta, (1, flow.dim)) if squeeze else theta
    x = ad.div(ad.sub(x, flow.shift), flow.scale)
    layers = params if params is not None else flow.layers
    logdet = float(-np.log(flow.scale).sum())
    for mask, p in zip(flow.masks, layers):
        x, ld = _coupling_forward(x, mask, p)
        logdet = ad.add(logdet, ld)
    if squeeze:
        x = ad.reshape(x, (flow.dim,))
        logdet = ad.reshape(logdet, ())
    return x, logdet


def flow_inverse(flow, y, params=None):
    """Latent -> pose, the exact inverse of flow_forward."""
    _check_dim(flow, y)
    squeeze = ad.value_of(y).ndim == 1
    x = ad.reshape(y, (1, flow.dim)) if squeeze else y
    layers = params if params is not None else flow.layers
    for mask, p in zip(flow.masks[::-1], list(layers)[::-1]):
        x, _ = _coupling_inverse(x, mask, p)
    x = ad.add(ad.mul(x, flow.scale), flow.shift)
    if squeeze:
        x = ad.reshape(x, (flow.dim,))
    return x


def flow_nll(flow, theta, params=None):
    """0.5 y'y - log|det J| per pose (additive constant dropped)."""
    y, logdet = flow_forward(flow, theta, params=params)
    quad = ad.mul(ad.sum_(ad.square(y), axis=-1), 0.5)
    return ad.sub(quad, logdet)


def latent_prior_term(y):
    """0.5 y'y, the prior used when optimizing the latent directly."""
    return ad.mul(ad.sum_(ad.square(y), axis=-1), 0.5)


def sample_latents(flow, n, rng):
    return rng.standard_normal((n, flow.dim))


def sample_poses(flow, n, rng):
    return ad.value_of(flow_inverse(flow, sample_latents(flow, n, rng)))


def train_flow(dataset, num_layers=4, hidden=64, epochs=60, lr=1e-3,
               batch_size=128, seed=0):
    """Fit the flow by minimizing mean NLL with Adam.

    Returns (FlowPrior, per-epoch mean NLL history). Deterministic per seed.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("dataset must be a non-empty (n, D) array")
    n, dim = data.shape
    flow = init_flow(dim, num_layers=num_layers, hidden=hidden, seed=seed)
    flow.shift = data.mean(axis=0)
    flow.scale = np.maximum(data.std(axis=0), 1e-2)  # degenerate dims stay tame
    rng = np.random.default_rng(seed + 1)

    names = [(i, k) for i in range(num_layers) for k in _PARAM_KEYS]
    m_state = {nk: np.zeros_like(flow.layers[nk[0]][nk[1]]) for nk in names}
    v_state = {nk: np.zeros_like(flow.layers[nk[0]][nk[1]]) for nk in names}
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []

    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_nll = []
        for start in range(0, n, batch_size):
            batch = data[order[start:start + batch_size]]
            tape = ad.Tape()
            leaves = {nk: tape.leaf(flow.layers[nk[0]][nk[1]]) for nk in names}
            params = [{k: leaves[(i, k)] for k in _PARAM_KEYS} for i in range(num_layers)]
            loss = ad.mean(flow_nll(flow, batch, params=params))
            if not np.isfinite(ad.value_of(loss)):
                raise FlowDivergenceError("non-finite flow training loss")
            grads = ad.backward(loss)
            step += 1
            for nk in names:
                g = grads.wrt(leaves[nk])
                m_state[nk] = b1 * m_state[nk] + (1 - b1) * g
                v_state[nk] = b2 * v_state[nk] + (1 - b2) * g * g
                mhat = m_state[nk] / (1 - b1 ** step)
                vhat = v_state[nk] / (1 - b2 ** step)
                flow.layers[nk[0]][nk[1]] = (flow.layers[nk[0]][nk[1]]
                                             - lr * mhat / (np.sqrt(vhat) + eps))
            epoch_nll.append(float(ad.value_of(loss)))
        history.append(float(np.mean(epoch_nll)))
    for layer in flow.layers:
        for k in _PARAM_KEYS:
            if not np.all(np.isfinite(layer[k])):
                raise FlowDivergenceError("non-finite flow parameters after training")
    return flow, history
