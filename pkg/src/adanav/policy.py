"""Policy network: attention-pools the token sequence into a hidden state
and reads out gate logits plus a diagonal-Gaussian distribution over the
flattened waypoint trajectory.

Parameters live in a flat name -> array dict so differentiation, the
optimizer, and checkpointing all share one layout.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from . import obs
from .autodiff import Tensor
from .core import InvalidTrajectory, Pose, Rng, Trajectory, normalize_angle

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2PI = math.log(2.0 * math.pi)

N_TOKEN_TYPES = 5


class EmptyContext(ValueError):
    """Raised when forward runs on a zero-token context."""


class DivergedGrad(RuntimeError):
    """Raised when parameter updates receive non-finite gradients."""


@dataclass
class PolicyParams:
    """All learnable arrays plus the shape metadata needed to rebuild them."""

    arrays: dict[str, np.ndarray]
    d: int
    c: int
    hidden: int
    n_waypoints: int

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.arrays.items()}, self.d, self.c, self.hidden, self.n_waypoints)

    def as_tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def validate(self) -> None:
        for name, arr in self.arrays.items():
            if not np.isfinite(arr).all():
                raise ValueError(f"parameter {name} contains non-finite values")


def init_params(rng: Rng, d: int = 32, c: int = 16, hidden: int = 64, n_waypoints: int = 8) -> PolicyParams:
    def dense(shape, fan_in):
        return rng.normal(shape) / math.sqrt(fan_in)

    a3n = 3 * n_waypoints
    arrays = {
        "proj_w1": dense((c, d), c),
        "proj_b1": np.zeros(d),
        "proj_w2": dense((d, d), d),
        "proj_b2": np.zeros(d),
        "temporal_base": rng.normal(d),
        "type_emb": 0.1 * rng.normal((N_TOKEN_TYPES, d)),
        "attn_q": dense(d, d),
        "attn_k": dense((d, d), d),
        "attn_v": dense((d, d), d),
        "mlp_w1": dense((d, hidden), d),
        "mlp_b1": np.zeros(hidden),
        "mlp_w2": dense((hidden, d), hidden),
        "mlp_b2": np.zeros(d),
        "gate_w": dense((d, 2), d),
        "gate_b": np.zeros(2),
        "mu_w": dense((d, a3n), d),
        "mu_b": np.zeros(a3n),
        "logsig_w": dense((d, a3n), d),
        "logsig_b": np.full(a3n, -2.0),
    }
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    return PolicyParams(arrays, d, c, hidden, n_waypoints)


@dataclass
class GaussianActionDist:
    """Diagonal Gaussian over the flattened waypoint vector. Holds tensors
    during loss evaluation and plain arrays during rollout."""

    mu: Union[np.ndarray, Tensor]
    log_sigma: Union[np.ndarray, Tensor]

    def mu_array(self) -> np.ndarray:
        return self.mu.data if isinstance(self.mu, Tensor) else self.mu

    def log_sigma_array(self) -> np.ndarray:
        return self.log_sigma.data if isinstance(self.log_sigma, Tensor) else self.log_sigma


def forward_tokens(
    tensors: dict[str, Tensor], tokens: obs.TokenSequence
) -> tuple[Tensor, Tensor, GaussianActionDist]:
    """Differentiable core: token sequence -> (hidden, gate logits, dist)."""
    if len(tokens) == 0:
        raise EmptyContext("context has no tokens")
    d = tensors["attn_q"].data.shape[0]
    x = ad.add(tokens.vectors, ad.take(tensors["type_emb"], tokens.types))
    keys = ad.matmul(x, tensors["attn_k"])
    scores = ad.mul(ad.matmul(keys, tensors["attn_q"]), 1.0 / math.sqrt(d))
    attn = ad.softmax(scores)
    values = ad.matmul(x, tensors["attn_v"])
    pooled = ad.matmul(attn, values)
    h1 = ad.tanh(ad.add(ad.matmul(pooled, tensors["mlp_w1"]), tensors["mlp_b1"]))
    hidden = ad.tanh(ad.add(ad.matmul(h1, tensors["mlp_w2"]), tensors["mlp_b2"]))
    gate_logits = ad.add(ad.matmul(hidden, tensors["gate_w"]), tensors["gate_b"])
    mu = ad.add(ad.matmul(hidden, tensors["mu_w"]), tensors["mu_b"])
    log_sigma = ad.clip(
        ad.add(ad.matmul(hidden, tensors["logsig_w"]), tensors["logsig_b"]),
        LOG_STD_MIN,
        LOG_STD_MAX,
    )
    return hidden, gate_logits, GaussianActionDist(mu, log_sigma)


def forward_context(
    tensors: dict[str, Tensor], ctx: obs.ContextSpec, d: int, cap: int = 1024
) -> tuple[Tensor, Tensor, GaussianActionDist]:
    tokens = obs.assemble_context(tensors, ctx, d, cap)
    return forward_tokens(tensors, tokens)


def forward(
    params: PolicyParams, context: Union[obs.TokenSequence, obs.ContextSpec], cap: int = 1024
) -> tuple[np.ndarray, np.ndarray, GaussianActionDist]:
    """Inference forward pass (no gradient graph); pure in (params, context)."""
    with ad.no_grad():
        tensors = params.as_tensors(requires_grad=False)
        if isinstance(context, obs.ContextSpec):
            hidden, logits, dist = forward_context(tensors, context, params.d, cap)
        else:
            hidden, logits, dist = forward_tokens(tensors, context)
    return hidden.data, logits.data, GaussianActionDist(dist.mu_array(), dist.log_sigma_array())


def log_prob(dist: GaussianActionDist, action: np.ndarray) -> float:
    """Diagonal Gaussian log density of a flattened action."""
    mu, log_sig = dist.mu_array(), dist.log_sigma_array()
    sigma = np.exp(log_sig)
    z = (np.asarray(action) - mu) / sigma
    return float(np.sum(-log_sig - 0.5 * LOG_2PI - 0.5 * z * z))


def log_prob_tensor(dist: GaussianActionDist, action: np.ndarray) -> Tensor:
    """Differentiable version of log_prob (matches it to the bit)."""
    act = Tensor(np.asarray(action, dtype=np.float64))
    sigma = ad.exp(dist.log_sigma)
    z = ad.div(ad.add(act, ad.mul(dist.mu, -1.0)), sigma)
    terms = ad.add(ad.mul(dist.log_sigma, -1.0), ad.mul(ad.square(z), -0.5))
    return ad.add(ad.tsum(terms), -0.5 * LOG_2PI * act.data.shape[0])


def sample(dist: GaussianActionDist, rng: Rng) -> np.ndarray:
    """a = mu + sigma * z with z from the seeded stream's ziggurat sampler."""
    mu, log_sig = dist.mu_array(), dist.log_sigma_array()
    z = rng.normal(mu.shape[0])
    return mu + np.exp(log_sig) * z


def action_to_trajectory(action: np.ndarray, n: int, max_step_length: float) -> Trajectory:
    """Reshape a flattened (3n,) action into n ego-frame waypoints. Headings
    are normalized; displacements are projected onto the feasible step
    length so the trajectory invariant always holds."""
    pts = np.asarray(action, dtype=np.float64).reshape(n, 3)
    waypoints = []
    px, py = 0.0, 0.0
    for x, y, theta in pts:
        dx, dy = x - px, y - py
        dist = math.hypot(dx, dy)
        if dist > max_step_length:
            scale = max_step_length / dist
            x, y = px + dx * scale, py + dy * scale
        waypoints.append(Pose(x, y, normalize_angle(theta)))
        px, py = x, y
    return Trajectory(tuple(waypoints)).validate(n, max_step_length)


def act_deterministic(dist: GaussianActionDist, n: int, max_step_length: float) -> Trajectory:
    """Deterministic action: the distribution mean reshaped into waypoints."""
    return action_to_trajectory(dist.mu_array(), n, max_step_length)


def trajectory_to_action(traj: Trajectory) -> np.ndarray:
    return np.array([[p.x, p.y, p.theta] for p in traj.waypoints], dtype=np.float64).reshape(-1)


def to_world(traj_ego: Trajectory, pose: Pose) -> Trajectory:
    """Ego-frame waypoints -> world frame at `pose`."""
    cos_t, sin_t = math.cos(pose.theta), math.sin(pose.theta)
    out = []
    for wp in traj_ego.waypoints:
        wx = pose.x + cos_t * wp.x - sin_t * wp.y
        wy = pose.y + sin_t * wp.x + cos_t * wp.y
        out.append(Pose(wx, wy, normalize_angle(pose.theta + wp.theta)))
    return Trajectory(tuple(out))


def to_ego(traj_world: Trajectory, pose: Pose) -> Trajectory:
    """World-frame waypoints -> ego frame at `pose` (inverse of to_world)."""
    cos_t, sin_t = math.cos(pose.theta), math.sin(pose.theta)
    out = []
    for wp in traj_world.waypoints:
        dx, dy = wp.x - pose.x, wp.y - pose.y
        ex = cos_t * dx + sin_t * dy
        ey = -sin_t * dx + cos_t * dy
        out.append(Pose(ex, ey, normalize_angle(wp.theta - pose.theta)))
    return Trajectory(tuple(out))


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"ADNAV"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, params: PolicyParams, extra_arrays: Optional[dict] = None, meta: Optional[dict] = None) -> None:
    """Flat binary: magic + version + json manifest (name, shape, offset) +
    raw little-endian float64 payload."""
    named = dict(params.arrays)
    for k, v in (extra_arrays or {}).items():
        named[f"extra/{k}"] = np.asarray(v, dtype=np.float64)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "model": {"d": params.d, "c": params.c, "hidden": params.hidden, "n_waypoints": params.n_waypoints},
        "meta": meta or {},
        "arrays": [],
    }
    offset = 0
    blobs = []
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name], dtype="<f8")
        manifest["arrays"].append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> tuple[PolicyParams, dict, dict]:
    """Returns (params, extra_arrays, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: magic {magic!r}")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        manifest = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for item in manifest["arrays"]:
        shape = tuple(item["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = item["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(shape)
        arrays[item["name"]] = arr.astype(np.float64)
    extra = {k[len("extra/") :]: v for k, v in arrays.items() if k.startswith("extra/")}
    core = {k: v for k, v in arrays.items() if not k.startswith("extra/")}
    m = manifest["model"]
    params = PolicyParams(core, m["d"], m["c"], m["hidden"], m["n_waypoints"])
    return params, extra, manifest.get("meta", {})
