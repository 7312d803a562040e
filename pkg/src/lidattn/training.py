"""LID model parameters, cross-entropy training by hand-written backprop, Adam."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionConfig,
    FeatureMap,
    ProjectionWeights,
    _multi_head_backward,
    _multi_head_forward,
)
from .dataio import make_batches, pad_batch
from .head import DEFAULT_EPSILON, ClassifierWeights, stat_pool, stat_pool_backward, softmax
from .numeric import check_mask, subseed_rng

PROJECTION_NAMES = ("Wq", "bq", "Wk", "bk", "Wv", "bv")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step, detail):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass
class LidModel:
    """All parameters of the LID block.

    ``feature_map`` (performer only) is frozen and is not part of
    :meth:`parameters`. ``dwc_kernel`` exists only for agent attention.
    """

    config: AttentionConfig
    n_classes: int
    projections: ProjectionWeights
    classifier: ClassifierWeights
    dwc_kernel: np.ndarray | None = None
    feature_map: FeatureMap | None = None
    epsilon: float = DEFAULT_EPSILON

    @classmethod
    def init(cls, config, n_classes, seed=0, epsilon=DEFAULT_EPSILON):
        rng = subseed_rng(seed, "init")
        projections = ProjectionWeights.init(rng, config.d_model, config.d_attn)
        classifier = ClassifierWeights.init(rng, 2 * config.d_attn, n_classes)
        kernel = np.zeros((config.dwc_width, config.d_attn)) if config.mechanism == "agent" else None
        fm = None
        if config.mechanism == "performer":
            fm = FeatureMap.draw(subseed_rng(seed, "omega"), config.r, config.d_head)
        return cls(config, n_classes, projections, classifier, kernel, fm, epsilon)

    def parameters(self):
        """Trainable tensors by name, in registry order. Arrays are live references."""
        p = {name: getattr(self.projections, name) for name in PROJECTION_NAMES}
        if self.dwc_kernel is not None:
            p["dwc_kernel"] = self.dwc_kernel
        p["W_out"] = self.classifier.W
        p["b_out"] = self.classifier.b
        return p

    def registry(self):
        return [(name, a.shape) for name, a in self.parameters().items()]

    def set_parameters(self, values):
        for name, a in self.parameters().items():
            if name in values:
                a[...] = values[name]

    def copy(self):
        return copy.deepcopy(self)


def count_parameters(model):
    """Trainable parameter counts per block (the frozen feature map is excluded)."""
    params = model.parameters()
    proj = sum(params[n].size for n in PROJECTION_NAMES)
    dwc = params["dwc_kernel"].size if "dwc_kernel" in params else 0
    clf = params["W_out"].size + params["b_out"].size
    return {"projections": proj, "dwc_kernel": dwc, "classifier": clf, "total": proj + dwc + clf}


def _check_finite(name, a):
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values in {name}")


def _dropout_mask(rng, shape, rate):
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _forward_one(model, x, mask, label, rate, rng):
    ctx, att_cache = _multi_head_forward(x, model.projections, model.config, mask,
                                         model.feature_map, model.dwc_kernel)
    _check_finite("context", ctx)
    drop_ctx = drop_z = None
    if rate > 0:
        drop_ctx = _dropout_mask(rng, ctx.shape, rate)
        ctx = ctx * drop_ctx
    stats = stat_pool(ctx, mask, model.epsilon)
    z = stats.concatenated
    _check_finite("pooled statistics", z)
    if rate > 0:
        drop_z = _dropout_mask(rng, z.shape, rate)
        z = z * drop_z
    logits = z @ model.classifier.W + model.classifier.b
    _check_finite("logits", logits)
    top = logits.max()
    loss = top + math.log(np.exp(logits - top).sum()) - logits[label]
    cache = (att_cache, drop_ctx, ctx, mask, stats, drop_z, z, softmax(logits), label)
    return loss, cache


def forward_loss(model, batch, train_mode=False, rng=None, dropout_rate=0.0):
    """Mean cross-entropy over ``batch`` and the cache needed by :func:`backward`.

    Dropout (inverted) is applied to each context matrix and pooled vector
    only when ``train_mode`` is true and ``dropout_rate > 0``.
    """
    rate = dropout_rate if train_mode else 0.0
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate > 0 and rng is None:
        raise ValueError("dropout needs an rng")
    labels = np.asarray(batch.labels)
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ValueError(f"labels outside [0, {model.n_classes})")
    losses, caches = [], []
    for x, mask, label in zip(batch.X, batch.mask, labels):
        loss, cache = _forward_one(model, x, mask, int(label), rate, rng)
        losses.append(loss)
        caches.append(cache)
    loss = float(np.mean(losses))
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite values in loss")
    return loss, caches


def backward(model, caches):
    """Exact gradient of the mean loss for every registered parameter."""
    scale = 1.0 / len(caches)
    W = model.classifier.W
    grads = {name: np.zeros_like(a) for name, a in model.parameters().items()}
    for att_cache, drop_ctx, ctx, mask, stats, drop_z, z, probs, label in caches:
        g_logits = probs.copy()
        g_logits[label] -= 1.0
        g_logits *= scale
        grads["W_out"] += np.outer(z, g_logits)
        grads["b_out"] += g_logits
        g_z = W @ g_logits
        if drop_z is not None:
            g_z *= drop_z
        d = stats.mu.shape[0]
        g_ctx = stat_pool_backward(g_z[:d], g_z[d:], ctx, mask, stats)
        if drop_ctx is not None:
            g_ctx *= drop_ctx
        for name, g in _multi_head_backward(g_ctx, att_cache).items():
            grads[name] += g
    return grads


def numerical_gradient(f, x, h=1e-5):
    """Central differences of the scalar ``f()`` with respect to array ``x``.

    ``x`` is perturbed in place (and restored), so ``f`` must read it.
    """
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def finite_diff_grad(model, batch, name, h=1e-5):
    """Finite-difference gradient of the eval-mode loss for one parameter."""
    param = model.parameters()[name]
    return numerical_gradient(lambda: forward_loss(model, batch)[0], param, h)


def relative_error(a, b, floor=1e-5):
    """``|a - b| / max(|a|, |b|, floor)`` in the Frobenius norm.

    The floor keeps gradients that are identically zero (e.g. the key bias
    under a row softmax, which shifts every logit of a row equally) from
    turning finite-difference round-off into a relative error of 1.
    """
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


# -- optimisation -------------------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from 0 to ``base_lr``, then linear decay to 0."""

    base_lr: float = 1e-4
    warmup_steps: int = 80_000
    decay_steps: int = 100_000

    @classmethod
    def scaled(cls, total_steps, base_lr=1e-4):
        """Keep the 80:100 warmup/decay proportion, fitted to ``total_steps``."""
        warmup = round(total_steps * 80 / 180)
        return cls(base_lr, warmup, total_steps - warmup)

    def at(self, step):
        if step < 0:
            raise ValueError("step must be >= 0")
        if step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        past = step - self.warmup_steps
        if past >= self.decay_steps:
            return 0.0
        return self.base_lr * (1.0 - past / self.decay_steps)


def lr_at_step(step, sched):
    return sched.at(step)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- loop ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    dropout_rate: float = 0.2
    batch_size: int = 16
    max_steps: int = 200
    seed: int = 0
    eval_every: int = 20
    patience: int | None = None

    def __post_init__(self):
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1, max_steps >= 0")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_step: int | None = None
    best_dev_accuracy: float | None = None

    @property
    def losses(self):
        return [r["loss"] for r in self.rows]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "loss", "dev_acc"])
            for r in self.rows:
                dev = r.get("dev_acc")
                w.writerow([r["step"], repr(r["lr"]), repr(r["loss"]), "" if dev is None else repr(dev)])


def _batch_stream(data, batch_size, rng):
    while True:
        yield from make_batches(data, batch_size, seed=int(rng.integers(2**63)), shuffle=True)


def train_loop(model, data, cfg=None, sched=None, dev_data=None, adam=None):
    """Train ``model`` in place; returns ``(model, TrainLog)``.

    With ``dev_data`` the model is evaluated every ``cfg.eval_every`` steps
    and on the last step, and the parameters with the best dev accuracy are
    restored at the end.
    """
    cfg = cfg or TrainConfig()
    sched = sched or LrSchedule.scaled(cfg.max_steps)
    if not data:
        raise ValueError("training data is empty")
    adam = adam or AdamState()
    batches = _batch_stream(data, cfg.batch_size, subseed_rng(cfg.seed, "batches"))
    dropout_rng = subseed_rng(cfg.seed, "dropout")
    log = TrainLog()
    best_params = None
    since_best = 0
    params = model.parameters()
    for step in range(1, cfg.max_steps + 1):
        batch = next(batches)
        lr = sched.at(step)
        try:
            loss, cache = forward_loss(model, batch, True, dropout_rng, cfg.dropout_rate)
        except FloatingPointError as exc:
            raise TrainingDivergedError(step, str(exc)) from exc
        adam_step(params, backward(model, cache), adam, lr)
        row = {"step": step, "lr": lr, "loss": loss, "dev_acc": None}
        if dev_data and (step % cfg.eval_every == 0 or step == cfg.max_steps):
            acc = accuracy(model, dev_data)
            row["dev_acc"] = acc
            if log.best_dev_accuracy is None or acc > log.best_dev_accuracy:
                log.best_dev_accuracy, log.best_step = acc, step
                best_params = {k: a.copy() for k, a in params.items()}
                since_best = 0
            else:
                since_best += 1
        log.rows.append(row)
        if cfg.patience is not None and since_best > cfg.patience:
            break
    if best_params is not None:
        model.set_parameters(best_params)
    return model, log


# -- inference ----------------------------------------------------------------

def _context(model, x, mask=None):
    mask = check_mask(mask, x.shape[0])
    ctx, _ = _multi_head_forward(x, model.projections, model.config, mask,
                                 model.feature_map, model.dwc_kernel)
    return ctx, mask


def embed(model, sequences):
    """Pooled ``[mu; sigma]`` descriptor for each sequence (eval mode)."""
    out = []
    for s in sequences:
        x = s.X if hasattr(s, "X") else np.asarray(s, dtype=np.float64)
        ctx, mask = _context(model, x)
        out.append(stat_pool(ctx, mask, model.epsilon).concatenated)
    return np.array(out).reshape(len(out), 2 * model.config.d_attn)


def predict_proba(model, sequences):
    z = embed(model, sequences)
    logits = z @ model.classifier.W + model.classifier.b
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def predict(model, sequences):
    return np.argmax(predict_proba(model, sequences), axis=1)


def accuracy(model, sequences):
    labels = np.array([s.label for s in sequences])
    return float(np.mean(predict(model, sequences) == labels))


def batch_of(sequences):
    """Padded batch from a list of sequences (convenience for gradient checks)."""
    return pad_batch(list(sequences))
