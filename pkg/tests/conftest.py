import numpy as np
import pytest

from recattn import autodiff as ad
from recattn.objective import BaselineState
from recattn.training import Model, TrainConfig, episode_losses


def small_config(**kw):
    base = dict(d_embed=12, d_hidden=10, crop_size=3, T=2, batch_size=2, epochs=1,
                input_size=32, crop_margin=8, eval_scales=(32,))
    base.update(kw)
    return TrainConfig(**base)


def param_grad_error(model, name, loss_fn, h=1e-5, max_coords=40, seed=0):
    """Largest relative error between the autodiff gradient of ``loss_fn``
    w.r.t. parameter ``name`` and central differences on a random subset of
    its coordinates."""
    p = model.params[name]
    for q in model.params.values():
        q.grad = None
    ad.backward(loss_fn())
    analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
    for q in model.params.values():
        q.grad = None
    rng = np.random.default_rng(seed)
    coords = rng.choice(p.size, size=min(max_coords, p.size), replace=False)
    worst = 0.0
    flat = p.data.reshape(-1)
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        with ad.no_grad():
            fp = loss_fn().item()
        flat[i] = old - h
        with ad.no_grad():
            fm = loss_fn().item()
        flat[i] = old
        num = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst


def frozen_episode(model, images, labels, seed=0, cls_only=False):
    """Loss closure over one episode with locations and baseline frozen."""
    fmap = model.features(images)
    rng = np.random.default_rng(seed)
    traj = model.run(fmap, rng=rng)
    samples = np.stack(traj.samples, axis=1)
    base_value = 0.3

    def loss():
        f = model.features(images)
        total, cls, *_ = episode_losses(model, f, labels, BaselineState(value=base_value),
                                        samples=samples, update_baseline=False)
        return cls if cls_only else total

    return loss


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(11)
    images = rng.uniform(0, 1, size=(2, 24, 24, 3))
    labels = np.array([[1, 0, 1, 0, 0, 0], [0, 1, 0, 0, 0, 1]])
    return images, labels


def bandit_estimates(mu, sigma=0.11, n=100_000, seed=0, baseline=None, batch=100, target=0.7):
    """Per-sample REINFORCE gradients on a 1-D Gaussian-mean bandit.

    Reward is -(l - target)^2.  Samples are processed in batches through
    ``reinforce_loss``; the autodiff gradient of each batch surrogate is
    checked against the per-sample estimates it averages.

    Returns:
        (n,) array of d/dmu estimates.
    """
    from recattn.agent import gaussian_log_prob
    from recattn.objective import reinforce_loss

    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(n)
    out = np.empty(n)
    zero = BaselineState(value=0.0, momentum=1.0)
    for lo in range(0, n, batch):
        m = ad.parameter(np.full((min(batch, n - lo), 1), mu))
        ls = mu + sigma * eps[lo:lo + batch, None]
        R = -(ls[:, 0] - target) ** 2
        b = baseline if baseline is not None else zero
        b_now = b.value
        loss = reinforce_loss(gaussian_log_prob(ls, m, sigma), R, b)
        ad.backward(loss)
        per = (R - b_now) * (ls[:, 0] - mu) / sigma ** 2
        # surrogate is -mean(adv * log pi): its gradient wrt each sample's mu copy is -adv*score/len
        np.testing.assert_allclose(-m.grad[:, 0] * len(per), per, rtol=1e-10, atol=1e-12)
        out[lo:lo + batch] = per
    return out
