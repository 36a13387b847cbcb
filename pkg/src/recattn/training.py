"""Training, ten-view evaluation and checkpointing."""

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .agent import AgentConfig, PolicyConfig, init_agent, rollout
from .backbone import BackboneConfig, extract_features, init_backbone
from .data import augment
from .metrics import evaluate_predictions
from .objective import (BaselineState, batch_rewards, category_max_pool, class_probabilities,
                        classification_loss, hybrid_loss, reinforce_loss)
from .regions import AnchorConfig, single_region_config

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ABLATION_MODES = ("full", "random-location", "single-region", "no-lstm-A", "loc-lstm-only-B")
LOG_COLUMNS = ("epoch", "cls_loss", "rl_loss", "mean_reward", "mAP")


class TrainingDiverged(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    T: int = 5
    M: int = 1
    batch_size: int = 16
    epochs: int = 40
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_rl: float = 1.0
    detach_location: bool = True
    baseline_momentum: float = 0.9
    mode: str = "full"
    seed: int = 0
    sigma: float = 0.11
    num_classes: int = 6
    input_size: int = 64
    crop_margin: int = 16
    crop_size: int = 5
    d_embed: int = 128
    d_hidden: int = 128
    freeze_backbone: bool = False
    eval_scales: tuple = (64,)
    eval_every: int = 0
    eval_batch: int = 100

    def __post_init__(self):
        if self.T < 1 or self.M < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("T, M and batch_size must be >= 1 and epochs >= 0")
        if self.mode not in ABLATION_MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {ABLATION_MODES}")
        if not 0 < self.crop_margin < self.input_size:
            raise ValueError("crop_margin must lie in (0, input_size)")
        self.eval_scales = tuple(int(s) for s in self.eval_scales)

    @property
    def train_crop(self):
        return self.input_size - self.crop_margin

    def fingerprint(self):
        """Hash of every field that shapes the model or the sample stream (epochs excluded)."""
        d = dataclasses.asdict(self)
        d.pop("epochs")
        d.pop("eval_every")
        d.pop("eval_batch")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def parse_config_text(text, base=None):
    """Parse ``key=value`` lines (``#`` comments) into a TrainConfig."""
    base = base or TrainConfig()
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kw = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        kw[key] = _coerce(types[key], value, key)
    return base.replace(**kw)


def _coerce(typ, value, key):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if value.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError
            return value.lower() in ("1", "true", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        if typ == "tuple":
            return tuple(int(v) for v in value.replace(",", " ").split())
        return value
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {value!r} as {typ}") from None


def load_config(path=None, env=None):
    """Config from a key=value file, then RECATTN_SEED from the environment."""
    env = os.environ if env is None else env
    cfg = TrainConfig()
    if path:
        with open(path) as fh:
            cfg = parse_config_text(fh.read(), cfg)
    if env.get("RECATTN_SEED"):
        cfg = cfg.replace(seed=int(env["RECATTN_SEED"]))
    return cfg


def config_to_text(cfg):
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={' '.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"


class Model:
    """Backbone plus agent parameters for one ablation mode."""

    def __init__(self, cfg, params=None):
        self.cfg = cfg
        self.backbone_cfg = BackboneConfig(input_size=cfg.input_size)
        agent_mode = {"no-lstm-A": "A", "loc-lstm-only-B": "B"}.get(cfg.mode, "C")
        self.agent_cfg = AgentConfig(
            num_classes=cfg.num_classes, in_channels=self.backbone_cfg.out_channels,
            crop_size=cfg.crop_size, d_embed=cfg.d_embed, d_hidden=cfg.d_hidden, mode=agent_mode,
            detach_location=cfg.detach_location)
        anchors = AnchorConfig(crop_size=cfg.crop_size)
        self.anchors = single_region_config(anchors) if cfg.mode == "single-region" else anchors
        self.policy = PolicyConfig(sigma=cfg.sigma)
        self.location_mode = "random" if cfg.mode == "random-location" else "policy"
        if params is None:
            rng = np.random.default_rng([cfg.seed, 0])
            params = {**init_backbone(self.backbone_cfg, rng), **init_agent(self.agent_cfg, rng)}
        self.params = params
        for name, p in params.items():
            p.requires_grad = not (cfg.freeze_backbone and name.startswith("backbone."))

    def trainable(self):
        return [p for p in self.params.values() if p.requires_grad]

    def trainable_names(self):
        return [n for n, p in self.params.items() if p.requires_grad]

    def features(self, images):
        """(B, N, N, 3) uint8 or float images -> Tensor (B, C, N/8, N/8)."""
        x = np.asarray(images)
        if x.dtype == np.uint8:
            x = x.astype(np.float64) / 255.0
        return extract_features(x, self.params, self.backbone_cfg).tensor

    def run(self, fmap, rng=None, samples=None, greedy=False):
        mode = self.location_mode
        if greedy and mode == "policy":
            mode = "greedy"
        return rollout(fmap, self.params, self.agent_cfg, self.policy, self.anchors, self.cfg.T,
                       rng=rng, samples=samples, location_mode=mode)


def episode_losses(model, fmap, labels, baseline, rng=None, samples=None, update_baseline=True):
    """Hybrid loss for one batch of episodes.

    Returns:
        (total, cls, rl or None, rewards, trajectory)
    """
    cfg = model.cfg
    if cfg.M > 1:
        idx = np.repeat(np.arange(fmap.shape[0]), cfg.M)
        fmap = ad.getitem(fmap, idx)
        labels = np.repeat(labels, cfg.M, axis=0)
    traj = model.run(fmap, rng=rng, samples=samples)
    fused = category_max_pool(traj.all_scores())
    probs = class_probabilities(fused)
    cls = classification_loss(probs, labels)
    rewards = batch_rewards(fused.data, labels)
    rl = None
    lp = traj.policy_log_prob()
    if lp is not None:
        rl = reinforce_loss(lp, rewards, baseline, update=update_baseline)
    total = hybrid_loss(cls, rl, cfg.lambda_rl)
    return total, cls, rl, rewards, traj


class Trainer:
    """Stateful training loop; everything random derives from (seed, epoch, batch)."""

    def __init__(self, cfg, model=None):
        self.cfg = cfg
        self.model = model or Model(cfg)
        self.adam = ad.AdamState.for_params(self.model.trainable(), learning_rate=cfg.lr,
                                            beta1=cfg.beta1, beta2=cfg.beta2)
        self.baseline = BaselineState(momentum=cfg.baseline_momentum)
        self.epoch = 0
        self.history = []

    def batches(self, n, epoch):
        order = np.random.default_rng([self.cfg.seed, 1, epoch]).permutation(n)
        bs = self.cfg.batch_size
        return [order[i:i + bs] for i in range(0, n, bs)]

    def train_step(self, images, labels, epoch, b):
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 2, epoch, b])
        crops = np.stack([augment(img, rng, cfg.train_crop) for img in images])
        fmap = self.model.features(crops)
        total, cls, rl, rewards, _ = episode_losses(self.model, fmap, labels, self.baseline, rng=rng)
        for term, val in (("cls", cls), ("rl", rl), ("total", total)):
            if val is not None and not np.isfinite(val.item()):
                raise TrainingDiverged(f"non-finite {term} loss at epoch {epoch}, batch {b}")
        ad.backward(total)
        params = self.model.trainable()
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        ad.adam_step(params, self.adam)
        return cls.item(), (0.0 if rl is None else rl.item()), float(rewards.mean())

    def train_epoch(self, dataset, test=None):
        epoch = self.epoch
        sums = np.zeros(3)
        count = 0
        for b, idx in enumerate(self.batches(len(dataset), epoch)):
            c, r, rew = self.train_step(dataset.images[idx], dataset.labels[idx], epoch, b)
            sums += np.array([c, r, rew]) * len(idx)
            count += len(idx)
        self.epoch += 1
        m = float("nan")
        last = self.epoch == self.cfg.epochs
        if test is not None and (last or (self.cfg.eval_every and self.epoch % self.cfg.eval_every == 0)):
            m = evaluate(self.model, test).map
        row = {"epoch": self.epoch, "cls_loss": sums[0] / count, "rl_loss": sums[1] / count,
               "mean_reward": sums[2] / count, "mAP": m}
        self.history.append(row)
        log.info("epoch %d cls=%.5f rl=%.5f reward=%.4f mAP=%.4f", *[row[k] for k in LOG_COLUMNS])
        return row

    def fit(self, dataset, test=None, log_path=None, checkpoint_dir=None, stop_after=None):
        """Train up to ``cfg.epochs`` (or ``stop_after`` more epochs)."""
        if len(dataset) == 0:
            raise ValueError("train: empty dataset")
        target = self.cfg.epochs if stop_after is None else min(self.cfg.epochs, self.epoch + stop_after)
        while self.epoch < target:
            self.train_epoch(dataset, test)
            if log_path:
                write_log(log_path, self.history)
            if checkpoint_dir:
                save_checkpoint(checkpoint_dir, self)
        return self.history


def train(dataset, cfg, test=None, log_path=None, checkpoint_dir=None):
    trainer = Trainer(cfg)
    trainer.fit(dataset, test, log_path=log_path, checkpoint_dir=checkpoint_dir)
    return trainer


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in rows:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]])


def read_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


# ---------------------------------------------------------------------------
# evaluation


def view_origins(size, margin):
    """Pixel (y, x) origins of the four corner patches and the centre patch."""
    if margin <= 0 or margin >= size:
        raise ValueError(f"patch of size {size - margin} does not fit an image of size {size}")
    c = margin // 2
    return [(0, 0), (0, margin), (margin, 0), (margin, margin), (c, c)]


def _resize(images, size):
    if images.shape[1] == size:
        return images
    from scipy.ndimage import zoom
    f = size / images.shape[1]
    return zoom(images.astype(np.float64), (1, f, f, 1), order=1)


def view_features(fmap, origins, patch_cells, stride, flips=True):
    """Crop feature-space views; returns Tensor (B*V, C, p, p) ordered view-major."""
    views = []
    for oy, ox in origins:
        cy, cx = int(round(oy / stride)), int(round(ox / stride))
        crop = ad.getitem(fmap, (slice(None), slice(None), slice(cy, cy + patch_cells),
                                 slice(cx, cx + patch_cells)))
        views.append(crop)
        if flips:
            views.append(ad.getitem(crop, (Ellipsis, slice(None, None, -1))))
    return ad.concat(views, axis=0)


def ten_view_eval(model, images, views="ten", fmaps=None, seed=None):
    """Probability vectors averaged over views and scales.

    Args:
        model: Model.
        images: (B, N, N, 3) images.
        views: "ten" (corners + centre, each flipped too) or "single" (centre only).
        fmaps: optional precomputed {scale: Tensor (B, C, h, w)} feature maps,
            used instead of running the backbone.
        seed: rng seed for random-location models (defaults to cfg.seed).

    Returns:
        (B, C) probabilities.
    """
    cfg = model.cfg
    stride = model.backbone_cfg.stride_total
    images = None if images is None else np.asarray(images)
    scales = cfg.eval_scales if fmaps is None else tuple(fmaps)
    acc = None
    for size in scales:
        if fmaps is None:
            fmap = model.features(_resize(images, size))
        else:
            fmap = ad.tensor(fmaps[size])
        n_cells = fmap.shape[-1]
        if n_cells * stride != size:
            raise ValueError(f"feature map of width {n_cells} does not match scale {size}")
        patch = size - cfg.crop_margin
        origins = view_origins(size, cfg.crop_margin)
        if views == "single":
            origins, flips = origins[-1:], False
        elif views == "ten":
            flips = True
        else:
            raise ValueError(f"unknown view protocol {views!r}")
        B = fmap.shape[0]
        stacked = view_features(fmap, origins, patch // stride, stride, flips)
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 3, size])
        traj = model.run(stacked, rng=rng, greedy=True)
        probs = class_probabilities(category_max_pool(traj.all_scores())).data
        probs = probs.reshape(-1, B, cfg.num_classes).mean(axis=0)
        acc = probs if acc is None else acc + probs
    return acc / len(scales)


def predict(model, images, views="ten", batch=None):
    batch = batch or model.cfg.eval_batch
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch):
            out.append(ten_view_eval(model, images[i:i + batch], views=views,
                                     seed=model.cfg.seed * 1000003 + i))
    return np.concatenate(out, axis=0)


def evaluate(model, dataset, views="ten", report_stem=None, predictions_path=None):
    probs = predict(model, dataset.images, views=views)
    report = evaluate_predictions(probs, dataset.labels)
    if report_stem:
        report.save(report_stem)
    if predictions_path:
        from .metrics import write_predictions
        write_predictions(predictions_path, range(len(probs)), probs)
    return report


# ---------------------------------------------------------------------------
# checkpoints: <dir>/tensors.blob + <dir>/state.json


def save_checkpoint(path, trainer):
    os.makedirs(path, exist_ok=True)
    tensors = {name: p.data for name, p in trainer.model.params.items()}
    for name, m, v in zip(trainer.model.trainable_names(), trainer.adam.first_moment,
                          trainer.adam.second_moment):
        tensors[f"adam.m.{name}"] = m
        tensors[f"adam.v.{name}"] = v
    blob = os.path.join(path, "tensors.blob")
    ad.save_tensors(blob + ".tmp", tensors)
    with open(blob + ".tmp", "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    state = {
        "version": CHECKPOINT_VERSION,
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in dataclasses.asdict(trainer.cfg).items()},
        "fingerprint": trainer.cfg.fingerprint(),
        "epoch": trainer.epoch,
        "adam_step": trainer.adam.step_count,
        "baseline": trainer.baseline.value.hex() if isinstance(trainer.baseline.value, float)
        else float(trainer.baseline.value).hex(),
        # batch streams are re-derived from (seed, epoch, batch); this is the next epoch's key
        "rng": {"seed": trainer.cfg.seed, "next_epoch": trainer.epoch},
        "history": [{k: float(v).hex() if k != "epoch" else v for k, v in r.items()}
                    for r in trainer.history],
        "blob_sha256": digest,
    }
    with open(os.path.join(path, "state.json.tmp"), "w") as fh:
        json.dump(state, fh, indent=1, sort_keys=True)
    os.replace(blob + ".tmp", blob)
    os.replace(os.path.join(path, "state.json.tmp"), os.path.join(path, "state.json"))


def load_checkpoint(path, cfg=None):
    """Rebuild a Trainer from ``path``.

    If ``cfg`` is given its fingerprint must match the stored one; its
    ``epochs`` may differ so training can be extended.
    """
    try:
        with open(os.path.join(path, "state.json")) as fh:
            state = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable state.json: {exc}") from None
    if state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {state.get('version')} != {CHECKPOINT_VERSION}")
    stored = TrainConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in state["config"].items()})
    if stored.fingerprint() != state["fingerprint"]:
        raise CheckpointError(f"{path}: stored config does not match its fingerprint")
    if cfg is not None and cfg.fingerprint() != state["fingerprint"]:
        raise CheckpointError(f"{path}: config fingerprint {cfg.fingerprint()} does not match "
                              f"checkpoint {state['fingerprint']}")
    cfg = cfg or stored
    blob = os.path.join(path, "tensors.blob")
    with open(blob, "rb") as fh:
        raw = fh.read()
    if hashlib.sha256(raw).hexdigest() != state["blob_sha256"]:
        # the blob parser pinpoints the damaged entry
        ad.load_tensors(blob)
        raise CheckpointError(f"{blob}: content hash mismatch")
    tensors = ad.load_tensors(blob)
    fresh = Model(cfg)
    params = {}
    for name, p in fresh.params.items():
        if name not in tensors or tensors[name].shape != p.shape:
            raise CheckpointError(f"{blob}: missing or misshapen parameter {name!r}")
        params[name] = ad.parameter(tensors[name])
    trainer = Trainer(cfg, Model(cfg, params))
    for i, name in enumerate(trainer.model.trainable_names()):
        trainer.adam.first_moment[i] = tensors[f"adam.m.{name}"].copy()
        trainer.adam.second_moment[i] = tensors[f"adam.v.{name}"].copy()
    trainer.adam.step_count = state["adam_step"]
    trainer.baseline.value = float.fromhex(state["baseline"])
    trainer.epoch = state["epoch"]
    trainer.history = [{k: float.fromhex(v) if k != "epoch" else v for k, v in r.items()}
                       for r in state["history"]]
    return trainer


def timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


def prior_map(labels):
    """Expected mAP of a predictor that ranks every image identically at random.

    For a class with m positives among n images under a uniformly random
    ranking, E[AP] = (1/m) * sum_i E[i / rank_i]; computed exactly by
    enumerating the rank of each positive.
    """
    labels = np.asarray(labels).astype(bool)
    n = labels.shape[0]
    aps = []
    for c in range(labels.shape[1]):
        m = int(labels[:, c].sum())
        if m == 0:
            continue
        aps.append(_expected_random_ap(n, m))
    return float(np.mean(aps))


def _expected_random_ap(n, m):
    # E[AP] = (1/m) sum_{i=1..m} E[i / R_i], R_i the rank of the i-th positive,
    # P(R_i = r) = C(r-1, i-1) C(n-r, m-i) / C(n, m)
    from scipy.special import gammaln
    total = 0.0
    lc = lambda a, b: gammaln(a + 1) - gammaln(b + 1) - gammaln(a - b + 1)
    log_norm = lc(n, m)
    for i in range(1, m + 1):
        r = np.arange(i, n - m + i + 1)
        logp = lc(r - 1, i - 1) + lc(n - r, m - i) - log_norm
        total += float(np.sum(np.exp(logp) * i / r))
    return total / m
