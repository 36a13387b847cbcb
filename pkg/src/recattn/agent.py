"""Recurrent attention agent: glimpse embedding, LSTM, score and location heads.

Everything is batched: a leading batch axis ``B`` runs through every call
and ``k`` regions per step are processed in parallel from the same incoming
state, then averaged.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .regions import anchor_boxes, crop_batch

MODES = ("C", "B", "A")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class AgentConfig:
    num_classes: int = 6
    in_channels: int = 32
    crop_size: int = 5
    d_embed: int = 128
    d_hidden: int = 128
    mode: str = "C"  # C: full LSTM; B: LSTM for location only; A: no LSTM
    # stop the policy gradient where the location pathway leaves the layers
    # shared with classification
    detach_location: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown agent mode {self.mode!r}; expected one of {MODES}")

    @property
    def d_glimpse(self):
        return self.in_channels * self.crop_size ** 2


@dataclass
class PolicyConfig:
    sigma: float = 0.11
    clamp: bool = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass
class AgentState:
    h: ad.Tensor
    c: ad.Tensor

    @classmethod
    def zeros(cls, batch, d_hidden):
        return cls(ad.constant(np.zeros((batch, d_hidden))), ad.constant(np.zeros((batch, d_hidden))))


@dataclass
class StepOutput:
    scores: ad.Tensor          # (B, k, C)
    mean_location: ad.Tensor   # (B, 2)
    sample: np.ndarray         # (B, 2) unclamped draw
    next_location: np.ndarray  # (B, 2) clamped to [0, 1]
    location_log_prob: ad.Tensor  # (B,)
    new_state: AgentState


def _uniform(rng, fan_in, shape):
    s = 1.0 / math.sqrt(fan_in)
    return ad.parameter(rng.uniform(-s, s, size=shape))


def init_agent(cfg, rng):
    """Parameters under stable checkpoint names."""
    d_in, d_e, d_h, n_c = cfg.d_glimpse, cfg.d_embed, cfg.d_hidden, cfg.num_classes
    cls_in = d_h if cfg.mode == "C" else d_e
    loc_in = d_h if cfg.mode in ("C", "B") else d_e
    p = {
        "embed.w": _uniform(rng, d_in, (d_in, d_e)),
        "embed.b": ad.parameter(np.zeros(d_e)),
        "cls.w": _uniform(rng, cls_in, (cls_in, n_c)),
        "cls.b": ad.parameter(np.zeros(n_c)),
        "loc.w": _uniform(rng, loc_in, (loc_in, 2)),
        "loc.b": ad.parameter(np.zeros(2)),
    }
    if cfg.mode != "A":
        p["lstm.w_ih"] = _uniform(rng, d_e, (d_e, 4 * d_h))
        p["lstm.w_hh"] = _uniform(rng, d_h, (d_h, 4 * d_h))
        p["lstm.b"] = ad.parameter(np.zeros(4 * d_h))
    return p


def lstm_cell(x, state, params):
    """Standard LSTM update with gate order (input, forget, cell, output).

    Args:
        x: (..., d_embed) input; leading axes broadcast against the state,
            so ``x`` of shape (B, k, d) with a (B, d_h) state uses the same
            state for all k inputs.
        state: AgentState with (B, d_h) tensors, or (B, 1, d_h).

    Returns:
        AgentState with h, c of the broadcast shape (..., d_h).
    """
    w_ih, w_hh, b = params["lstm.w_ih"], params["lstm.w_hh"], params["lstm.b"]
    d_h = w_hh.shape[0]
    if x.shape[-1] != w_ih.shape[0] or state.h.shape[-1] != d_h or state.c.shape[-1] != d_h:
        raise ad.ShapeError(f"lstm_cell: input {x.shape} / state {state.h.shape} do not match "
                            f"weights {w_ih.shape}, {w_hh.shape}")
    h_prev, c_prev = state.h, state.c
    if x.ndim == h_prev.ndim + 1:
        h_prev = ad.reshape(h_prev, h_prev.shape[:-1] + (1, d_h))
        c_prev = ad.reshape(c_prev, c_prev.shape[:-1] + (1, d_h))
    gates = ad.add(ad.add(ad.matmul(x, w_ih), ad.matmul(h_prev, w_hh)), b)
    i = ad.sigmoid(gates[..., 0:d_h])
    f = ad.sigmoid(gates[..., d_h:2 * d_h])
    g = ad.tanh(gates[..., 2 * d_h:3 * d_h])
    o = ad.sigmoid(gates[..., 3 * d_h:4 * d_h])
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return AgentState(h, c)


def gaussian_log_prob(sample, mean, sigma):
    """Isotropic Gaussian log-density summed over the last axis."""
    diff = ad.sub(ad.constant(sample), mean)
    quad = ad.sum(ad.mul(diff, diff), axis=-1)
    d = mean.shape[-1]
    return ad.add(ad.scale(quad, -0.5 / sigma ** 2), -d * (math.log(sigma) + 0.5 * LOG_2PI))


def agent_step(glimpses, state, params, cfg, policy, rng=None, sample=None, greedy=False):
    """One iteration of the agent over k glimpses.

    Args:
        glimpses: Tensor (B, k, C, S, S) of cropped features.
        state: incoming AgentState with (B, d_h) tensors.
        params: agent parameter dict.
        cfg: AgentConfig.
        policy: PolicyConfig.
        rng: numpy Generator for the location draw.
        sample: optional (B, 2) pre-drawn unclamped location; freezes sampling.
        greedy: use the mean location instead of drawing one.

    Returns:
        StepOutput.  ``location_log_prob`` is evaluated at the unclamped sample.
    """
    if glimpses.ndim != 5 or glimpses.shape[1] < 1:
        raise ValueError(f"agent_step: expected (B, k>=1, C, S, S) glimpses, got {glimpses.shape}")
    B, k = glimpses.shape[:2]
    if int(np.prod(glimpses.shape[2:])) != cfg.d_glimpse:
        raise ad.ShapeError(f"agent_step: glimpse shape {glimpses.shape[2:]} does not match "
                            f"d_glimpse={cfg.d_glimpse}")
    flat = ad.reshape(glimpses, (B, k, cfg.d_glimpse))
    emb = ad.tanh(ad.add(ad.matmul(flat, params["embed.w"]), params["embed.b"]))

    if cfg.mode == "A":
        new_state = state
        cls_in = emb
        loc_in = ad.mean(emb, axis=1)
    else:
        lstm_in = emb
        if cfg.detach_location and cfg.mode == "B":
            # the LSTM serves only the location head, so it still learns from the policy
            lstm_in = ad.constant(emb.data)
        region_state = lstm_cell(lstm_in, state, params)
        new_state = AgentState(ad.mean(region_state.h, axis=1), ad.mean(region_state.c, axis=1))
        cls_in = region_state.h if cfg.mode == "C" else emb
        loc_in = new_state.h

    scores = ad.add(ad.matmul(cls_in, params["cls.w"]), params["cls.b"])
    if cfg.detach_location and cfg.mode != "B":
        loc_in = ad.constant(loc_in.data)
    mu = ad.sigmoid(ad.add(ad.matmul(loc_in, params["loc.w"]), params["loc.b"]))
    if sample is None:
        if greedy:
            sample = mu.data.copy()
        else:
            sample = mu.data + policy.sigma * rng.standard_normal(mu.shape)
    sample = np.asarray(sample, dtype=np.float64)
    if sample.shape != mu.shape:
        raise ad.ShapeError(f"agent_step: sample shape {sample.shape} vs mean {mu.shape}")
    log_prob = gaussian_log_prob(sample, mu, policy.sigma)
    nxt = np.clip(sample, 0.0, 1.0) if policy.clamp else sample
    return StepOutput(scores, mu, sample, nxt, log_prob, new_state)


@dataclass
class Trajectory:
    """One batch of episodes.

    ``locations[t]`` is l_{t+1} (so ``locations[0]`` comes from the whole-image
    glimpse) and ``log_probs[t]`` its log-density.  ``boxes[t]`` and
    ``scores[t]`` belong to iteration t+1.
    """

    locations: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    means: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    states: list = field(default_factory=list)
    stochastic: bool = True

    @property
    def T(self):
        return len(self.scores)

    def all_scores(self):
        """Tensor (B, T*k, C) of retained score vectors."""
        return ad.concat(self.scores, axis=1)

    def policy_log_prob(self):
        """Sum over the T decisions that shaped the glimpses (l_1..l_T), shape (B,)."""
        if not self.stochastic:
            return None
        total = self.log_probs[0]
        for lp in self.log_probs[1:self.T]:
            total = ad.add(total, lp)
        return total


def whole_image_boxes(batch):
    return np.tile(np.array([0.5, 0.5, 1.0, 1.0]), (batch, 1, 1))


def rollout(fmap_tensor, params, cfg, policy, anchors, T, rng=None, samples=None,
            location_mode="policy"):
    """Run T+1 iterations over a batch of feature maps.

    Args:
        fmap_tensor: Tensor (B, C, H, W).
        params: agent parameters.
        cfg: AgentConfig.
        policy: PolicyConfig.
        anchors: AnchorConfig.
        T: glimpse iterations after the whole-image one.
        rng: numpy Generator (location noise, or uniform draws in random mode).
        samples: optional (B, T+1, 2) frozen unclamped location samples.
        location_mode: "policy" (sample from the Gaussian), "greedy" (use the
            mean), or "random" (uniform on the unit square, no log-probs).

    Returns:
        Trajectory with T*k retained score vectors per sample.
    """
    if T < 1:
        raise ValueError("rollout: T must be >= 1")
    if location_mode not in ("policy", "greedy", "random"):
        raise ValueError(f"rollout: unknown location mode {location_mode!r}")
    B = fmap_tensor.shape[0]
    S = anchors.crop_size
    traj = Trajectory(stochastic=location_mode == "policy")
    state = AgentState.zeros(B, cfg.d_hidden)
    boxes = whole_image_boxes(B)
    for t in range(T + 1):
        glimpses = crop_batch(fmap_tensor, boxes, S)
        if location_mode == "random":
            step_sample = rng.uniform(0.0, 1.0, size=(B, 2)) if samples is None else samples[:, t]
        else:
            step_sample = None if samples is None else samples[:, t]
        out = agent_step(glimpses, state, params, cfg, policy, rng=rng, sample=step_sample,
                         greedy=location_mode == "greedy")
        if t > 0:
            traj.boxes.append(boxes)
            traj.scores.append(out.scores)
        traj.samples.append(out.sample)
        traj.locations.append(out.next_location)
        traj.means.append(out.mean_location)
        traj.log_probs.append(out.location_log_prob)
        traj.states.append(out.new_state)
        state = out.new_state
        if t < T:
            boxes = anchor_boxes(out.next_location, anchors)
    return traj
