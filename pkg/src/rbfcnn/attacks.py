"""White-box, adaptive and black-box attacks on a classification pipeline.

A pipeline is any object with the methods of :class:`rbfcnn.classifier.Pipeline`:
``static_loss_grad``, ``bpda_loss_grad``, ``loss`` and ``predict_averaged``.
All attacks work on batches (N, H, W, C) and keep every adversarial inside
both the epsilon ball of its clean image and the [0, 1] box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORMS = ("inf", "2", "1")
ATTACKS = ("fgsm", "pgd", "mi_fgsm", "bpda_eot", "spsa")


def _norm_key(p):
    key = str(p).lower().replace("l", "")
    if key in ("inf", "infinity", "∞"):
        return "inf"
    if key not in NORMS:
        raise ValueError(f"unsupported norm {p!r}; use one of 1, 2, inf")
    return key


@dataclass
class AttackConfig:
    norm: str = "inf"
    epsilon: float = 0.1
    steps: int = 40
    step_size: float | None = None  # default 2.5 * epsilon / steps
    random_start: bool = True
    momentum: float = 1.0  # MI-FGSM decay
    eot_samples: int = 50
    spsa_samples: int = 128  # loss evaluations per step, antithetic pairs
    spsa_delta: float = 0.01
    spsa_lr: float = 0.01
    l1_sparsity: float = 0.01  # fraction of coordinates kept by the l1 step
    seed: int = 0

    def __post_init__(self):
        self.norm = _norm_key(self.norm)
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.eot_samples < 1:
            raise ValueError("eot_samples must be >= 1")
        if not 0 <= self.momentum <= 1:
            raise ValueError("momentum decay must lie in [0, 1]")
        if self.spsa_samples < 2 or self.spsa_samples % 2:
            raise ValueError("spsa_samples must be an even number >= 2")

    @property
    def alpha(self):
        return 2.5 * self.epsilon / self.steps if self.step_size is None else self.step_size


@dataclass
class AdversarialResult:
    adversarial: np.ndarray
    achieved_norm: np.ndarray
    success: np.ndarray
    clean_pred: np.ndarray
    adv_pred: np.ndarray
    steps: int = 0
    queries: int = 0
    loss_trace: list = field(default_factory=list)  # per-example loss at each iterate


# -- projections ---------------------------------------------------------

def _project_l1_vec(v, eps):
    if eps <= 0:
        return np.zeros_like(v)
    a = np.abs(v)
    if a.sum() <= eps:
        return v.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u) - eps
    j = np.arange(1, u.size + 1)
    hits = np.flatnonzero(u * j > css)
    rho = hits[-1] if hits.size else 0
    theta = css[rho] / (rho + 1)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def project_lp(delta, p, epsilon):
    """Euclidean projection of ``delta`` (one vector) onto the l_p epsilon ball."""
    p = _norm_key(p)
    delta = np.asarray(delta, dtype=np.float64)
    if p == "inf":
        return np.clip(delta, -epsilon, epsilon)
    flat = delta.ravel()
    if p == "2":
        n = np.linalg.norm(flat)
        return delta.copy() if n <= epsilon else delta * (epsilon / n)
    return _project_l1_vec(flat, epsilon).reshape(delta.shape)


def project_batch(delta, p, epsilon):
    p = _norm_key(p)
    if p == "inf":
        return np.clip(delta, -epsilon, epsilon)
    return np.stack([project_lp(d, p, epsilon) for d in delta])


def lp_norm(delta, p):
    """Per-example l_p norm of a batch."""
    p = _norm_key(p)
    flat = np.asarray(delta).reshape(len(delta), -1)
    if p == "inf":
        return np.abs(flat).max(axis=1)
    if p == "2":
        return np.sqrt((flat * flat).sum(axis=1))
    return np.abs(flat).sum(axis=1)


def _feasible(x0, x, p, eps):
    """Pull ``x`` into the l_p ball around ``x0`` and then into [0, 1]."""
    delta = project_batch(x - x0, p, eps)
    # clipping to the box only shrinks |delta_i|, so the ball constraint holds
    return np.clip(x0 + delta, 0.0, 1.0)


def _direction(g, p, q):
    if p == "inf":
        return np.sign(g)
    flat = g.reshape(len(g), -1)
    if p == "2":
        n = np.sqrt((flat * flat).sum(axis=1))
        out = np.divide(flat, n[:, None], out=np.zeros_like(flat), where=n[:, None] > 0)
        return out.reshape(g.shape)
    keep = max(1, int(round(q * flat.shape[1])))
    out = np.zeros_like(flat)
    for i, row in enumerate(flat):
        idx = np.argsort(-np.abs(row), kind="stable")[:keep]
        out[i, idx] = np.sign(row[idx]) / keep
    return out.reshape(g.shape)


def _random_start(shape, p, eps, rng):
    n = shape[0]
    dim = int(np.prod(shape[1:]))
    if p == "inf":
        return rng.uniform(-eps, eps, shape)
    if p == "2":
        d = rng.standard_normal((n, dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = eps * rng.random(n) ** (1.0 / dim)
        return (d * r[:, None]).reshape(shape)
    e = rng.exponential(size=(n, dim + 1))
    signs = rng.choice([-1.0, 1.0], size=(n, dim))
    return (eps * signs * e[:, :dim] / e.sum(axis=1, keepdims=True)).reshape(shape)


def _rngs(seed):
    return np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1])


def _finish(pipeline, x0, x_adv, labels, cfg, steps, queries=0, trace=None):
    # common random numbers: clean and adversarial inputs see the same reconstruction noise
    clean_pred, _ = pipeline.predict_averaged(x0, np.random.default_rng([cfg.seed, 2]))
    adv_pred, _ = pipeline.predict_averaged(x_adv, np.random.default_rng([cfg.seed, 2]))
    return AdversarialResult(x_adv, lp_norm(x_adv - x0, cfg.norm), adv_pred != labels,
                             clean_pred, adv_pred, steps, queries, trace or [])


def _batch(images, labels):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    return images, np.atleast_1d(np.asarray(labels, dtype=np.int64))


# -- attacks -------------------------------------------------------------

def fgsm(images, labels, pipeline, cfg):
    """Single signed-gradient step of size epsilon (sign(0) = 0)."""
    x0, labels = _batch(images, labels)
    if cfg.norm != "inf":
        raise ValueError("fgsm is an l_inf attack")
    _, g = pipeline.static_loss_grad(x0, labels)
    x_adv = np.clip(x0 + cfg.epsilon * np.sign(g), 0.0, 1.0)
    return _finish(pipeline, x0, x_adv, labels, cfg, steps=1)


def momentum_update(acc, g, decay):
    """``decay * acc + g / ||g||_1`` per example (zero gradients add nothing)."""
    l1 = np.abs(g).reshape(len(g), -1).sum(axis=1).reshape((-1,) + (1,) * (g.ndim - 1))
    return decay * acc + np.divide(g, l1, out=np.zeros_like(g), where=l1 > 0)


def _iterate(x0, labels, pipeline, cfg, grad_fn, momentum=None, start=True, record=False):
    start_rng, _ = _rngs(cfg.seed)
    x = x0.copy()
    if start and cfg.random_start and cfg.epsilon > 0:
        x = _feasible(x0, x0 + _random_start(x0.shape, cfg.norm, cfg.epsilon, start_rng), cfg.norm, cfg.epsilon)
    acc = np.zeros_like(x0)
    trace = []
    for _ in range(cfg.steps):
        if record:
            trace.append(pipeline.loss(x, labels))
        g = grad_fn(x)
        if momentum is not None:
            acc = momentum_update(acc, g, momentum)
            g = acc
        x = _feasible(x0, x + cfg.alpha * _direction(g, cfg.norm, cfg.l1_sparsity), cfg.norm, cfg.epsilon)
    if record:
        trace.append(pipeline.loss(x, labels))
    return x, trace, acc


def pgd(images, labels, pipeline, cfg, record=False):
    """Projected gradient ascent on the static (beta2 = 0) pipeline loss."""
    x0, labels = _batch(images, labels)
    x_adv, trace, _ = _iterate(x0, labels, pipeline, cfg, lambda x: pipeline.static_loss_grad(x, labels)[1],
                               record=record)
    return _finish(pipeline, x0, x_adv, labels, cfg, cfg.steps, trace=trace)


def mi_fgsm(images, labels, pipeline, cfg, record=False):
    """Momentum iterative FGSM: accumulate l1-normalized gradients, signed step."""
    x0, labels = _batch(images, labels)
    x_adv, trace, _ = _iterate(x0, labels, pipeline, cfg, lambda x: pipeline.static_loss_grad(x, labels)[1],
                               momentum=cfg.momentum, start=False, record=record)
    return _finish(pipeline, x0, x_adv, labels, cfg, cfg.steps, trace=trace)


def eot_gradient(pipeline, images, labels, n_samples, rng):
    """Mean BPDA gradient over ``n_samples`` stochastic forward passes."""
    total = None
    for _ in range(n_samples):
        _, g = pipeline.bpda_loss_grad(images, labels, rng)
        total = g if total is None else total + g
    return total / n_samples


def bpda_eot(images, labels, pipeline, cfg, record=False):
    """PGD whose gradient is the EoT mean of BPDA gradients."""
    x0, labels = _batch(images, labels)
    _, noise_rng = _rngs(cfg.seed)
    x_adv, trace, _ = _iterate(x0, labels, pipeline, cfg,
                               lambda x: eot_gradient(pipeline, x, labels, cfg.eot_samples, noise_rng),
                               record=record)
    return _finish(pipeline, x0, x_adv, labels, cfg, cfg.steps, trace=trace)


def spsa_gradient(loss_fn, x, n_samples, delta, rng):
    """Antithetic Rademacher SPSA estimate of the gradient of ``loss_fn`` at ``x``.

    ``loss_fn`` maps a stack of points (K, ...) to K losses.
    """
    pairs = n_samples // 2
    v = rng.choice([-1.0, 1.0], size=(pairs,) + x.shape)
    losses = loss_fn(np.concatenate([x + delta * v, x - delta * v]))
    diff = (losses[:pairs] - losses[pairs:]) / (2.0 * delta)
    return np.tensordot(diff, v, axes=1) / pairs


def spsa(images, labels, pipeline, cfg):
    """Gradient-free attack: SPSA estimates, signed/normalized ascent, projection."""
    x0, labels = _batch(images, labels)
    start_rng, noise_rng = _rngs(cfg.seed)
    stochastic = getattr(pipeline, "defended", False) and not pipeline.recon.deterministic
    x_adv = x0.copy()
    queries = 0
    if cfg.epsilon > 0:
        for i in range(len(x0)):
            xi = x0[i][None]
            yi = np.full(cfg.spsa_samples, labels[i])

            def loss_fn(batch):
                return pipeline.loss(batch, yi[:len(batch)], noise_rng, stochastic=stochastic)

            x = xi
            for _ in range(cfg.steps):
                g = spsa_gradient(loss_fn, x[0], cfg.spsa_samples, cfg.spsa_delta, start_rng)
                queries += cfg.spsa_samples
                x = _feasible(xi, x + cfg.spsa_lr * _direction(g[None], cfg.norm, cfg.l1_sparsity), cfg.norm,
                              cfg.epsilon)
            x_adv[i] = x[0]
    return _finish(pipeline, x0, x_adv, labels, cfg, cfg.steps, queries=queries)


ATTACK_FUNCS = {"fgsm": fgsm, "pgd": pgd, "mi_fgsm": mi_fgsm, "bpda_eot": bpda_eot, "spsa": spsa}


def run_attack(name, images, labels, pipeline, cfg):
    try:
        fn = ATTACK_FUNCS[name]
    except KeyError:
        raise ValueError(f"unknown attack {name!r}; valid: {', '.join(ATTACKS)}") from None
    return fn(images, labels, pipeline, cfg)


def transfer_attack(source, target, images, labels, cfg, attack="pgd"):
    """Craft adversarials on ``source`` and report ``target`` accuracy on them."""
    x0, labels = _batch(images, labels)
    crafted = run_attack(attack, x0, labels, source, cfg)
    pred, _ = target.predict_averaged(crafted.adversarial, np.random.default_rng([cfg.seed, 2]))
    return float(np.mean(pred == labels)), crafted
