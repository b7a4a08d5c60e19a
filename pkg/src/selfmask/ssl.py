"""Label-free mask training with swapped cluster predictions.

Two augmented views of each datapoint are embedded; one view's soft
cluster assignment (computed by Sinkhorn-Knopp against a bank of unit-norm
prototypes, no gradient) becomes the target for the other view's softmax
prediction. The cross-entropy between them trains the mask scores of the
frozen backbone, a small projection head (discarded afterwards), and the
prototypes. No labels are consumed anywhere in this module.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .masking import MaskedModel, apply_score_step
from .nn import Layer, OptimizerState, TrainConfig, cosine_warmup_lr, make_head, sgd_step
from .rng import child_rng

log = logging.getLogger(__name__)


class PrototypeBank:
    """K learnable prototype vectors, kept unit-norm after every update."""

    def __init__(self, dim, count, rng, dtype=np.float64):
        c = rng.standard_normal((dim, count)).astype(dtype)
        self.c = c
        self.renormalize()

    @property
    def count(self):
        return self.c.shape[1]

    def renormalize(self):
        norms = np.linalg.norm(self.c, axis=0, keepdims=True)
        norms[norms == 0] = 1.0
        self.c /= norms


@dataclass
class AugmentConfig:
    """Desk-scale augmentations producing two views of a datapoint.

    Vector data: additive Gaussian noise, random coordinate dropout and a
    random global scale. Image data (when image_shape is set): random
    crop-resize, horizontal flip, then noise.
    """

    noise_sigma: float = 0.1
    dropout_prob: float = 0.0
    scale_jitter: float = 0.0  # scale drawn from [1-j, 1+j]
    image_shape: tuple | None = None
    crop: bool = False
    flip: bool = False

    def disabled(self) -> "AugmentConfig":
        return AugmentConfig(0.0, 0.0, 0.0, self.image_shape, False, False)


def _augment_once(x, cfg: AugmentConfig, rng):
    out = x.copy()
    if cfg.image_shape is not None and (cfg.crop or cfg.flip):
        h, w = cfg.image_shape
        imgs = out.reshape(-1, h, w)
        if cfg.flip:
            do = rng.random(imgs.shape[0]) < 0.5
            imgs[do] = imgs[do, :, ::-1]
        if cfg.crop:
            for i in range(imgs.shape[0]):
                ch = rng.integers(max(1, h - 2), h + 1)
                cw = rng.integers(max(1, w - 2), w + 1)
                top = rng.integers(0, h - ch + 1)
                left = rng.integers(0, w - cw + 1)
                window = imgs[i, top : top + ch, left : left + cw]
                ri = (np.arange(h) * ch // h).clip(0, ch - 1)
                rj = (np.arange(w) * cw // w).clip(0, cw - 1)
                imgs[i] = window[np.ix_(ri, rj)]
        out = imgs.reshape(out.shape)
    if cfg.scale_jitter > 0:
        s = rng.uniform(1 - cfg.scale_jitter, 1 + cfg.scale_jitter, size=(out.shape[0], 1))
        out = out * s
    if cfg.dropout_prob > 0:
        keep = rng.random(out.shape) >= cfg.dropout_prob
        out = out * keep
    if cfg.noise_sigma > 0:
        out = out + cfg.noise_sigma * rng.standard_normal(out.shape)
    return out


def make_views(x, aug_config: AugmentConfig, rng):
    """Two independent augmentation draws of a (batch, dim) matrix."""
    x = np.asarray(x)
    return _augment_once(x, aug_config, rng), _augment_once(x, aug_config, rng)


def sinkhorn_assign(scores, eps, iters):
    """Entropy-regularized assignment of B samples to K prototypes.

    ``scores`` is K x B. Starting from exp(scores/eps) normalized to total
    mass 1, rows and columns are alternately scaled to the uniform
    marginals 1/K and 1/B, ending on the column scaling so every column
    sums to exactly 1/B. The per-matrix max is subtracted before
    exponentiation to guard against overflow.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    scores = np.asarray(scores, dtype=np.float64)
    k, b = scores.shape
    q = np.exp(scores / eps - (scores / eps).max())
    q /= q.sum()
    for _ in range(iters):
        q /= q.sum(axis=1, keepdims=True)
        q /= k
        q /= q.sum(axis=0, keepdims=True)
        q /= b
    return q


def l2_normalize_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return x / norms


def swav_loss(z_t, z_s, bank: PrototypeBank, tau, eps, sinkhorn_iters=3, queue=None):
    """Symmetric swapped-prediction loss between two views.

    Targets are Sinkhorn assignments of one view (stop-gradient, each
    sample's assignment normalized to sum 1); predictions are the other
    view's temperature-softmax over prototype similarities. Returns
    (loss, prototype_grads, z_t grads, z_s grads). When a queue of past
    embeddings is given it joins the Sinkhorn batch and is dropped from
    the targets.
    """
    c = bank.c
    b = z_t.shape[0]

    def targets(z):
        zq = z if queue is None else np.vstack([z, queue])
        q = sinkhorn_assign(c.T @ zq.T, eps, sinkhorn_iters)[:, :b]
        return (q / q.sum(axis=0, keepdims=True)).T  # (B, K), rows sum to 1

    def predictions(z):
        logits = (z @ c) / tau
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        return p, logits

    q_s = targets(z_s)
    q_t = targets(z_t)
    p_t, logit_t = predictions(z_t)
    p_s, logit_s = predictions(z_s)
    logp_t = logit_t - np.log(np.exp(logit_t).sum(axis=1, keepdims=True))
    logp_s = logit_s - np.log(np.exp(logit_s).sum(axis=1, keepdims=True))
    loss_t = -(q_s * logp_t).sum(axis=1).mean()
    loss_s = -(q_t * logp_s).sum(axis=1).mean()
    loss = 0.5 * (loss_t + loss_s)
    # each side contributes (p - q)/(2B) through its own logits
    dlogit_t = (p_t - q_s) / (2.0 * b)
    dlogit_s = (p_s - q_t) / (2.0 * b)
    dz_t = dlogit_t @ c.T / tau
    dz_s = dlogit_s @ c.T / tau
    dc = (z_t.T @ dlogit_t + z_s.T @ dlogit_s) / tau
    return float(loss), dc, dz_t, dz_s


def _normalize_backward(z_raw, d_znorm):
    """Backward of row-wise L2 normalization."""
    norms = np.linalg.norm(z_raw, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    zn = z_raw / norms
    return (d_znorm - zn * (d_znorm * zn).sum(axis=1, keepdims=True)) / norms


@dataclass
class SmnResult:
    masks: list
    bank: PrototypeBank
    log: list  # per-epoch dicts: epoch, loss, lr, active_fraction
    diverged: bool = False


def train_smn(mmodel: MaskedModel, x, config: TrainConfig, aug_config=None,
              proj_dim=None, step_callback=None, progressive_target=None) -> SmnResult:
    """Learn masks for a frozen backbone without labels.

    The projection head and prototypes train with their own learning rate
    and are throwaway products; the masks are the result. If the loss goes
    non-finite the run aborts and the scores roll back to the last finite
    epoch. The queue (config.queue_size > 0) holds recent projection
    embeddings and joins the Sinkhorn batch from config.queue_start_epoch
    on.
    """
    x = np.asarray(x, dtype=mmodel.dtype)
    if aug_config is None:
        aug_config = AugmentConfig()
    rng = child_rng(config.seed, 1)
    proto_rng = child_rng(config.seed, 2)
    head_rng = child_rng(config.seed, 3)
    if proj_dim is None:
        proj_dim = mmodel.embed_dim
    proj = make_head(mmodel.embed_dim, proj_dim, head_rng, mmodel.dtype)
    bank = PrototypeBank(proj_dim, config.prototype_count, proto_rng, mmodel.dtype)

    scores = [l.scores for l in mmodel.masked_layers()]
    state = OptimizerState(scores)
    proj_state = OptimizerState([proj.weights, proj.bias])
    proto_state = OptimizerState([bank.c])

    n = x.shape[0]
    steps_per_epoch = max(1, int(np.ceil(n / config.batch_size)))
    total_steps = max(1, config.epochs * steps_per_epoch)
    queue = None
    history = []
    last_good = mmodel.get_scores()
    diverged = False

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        lr = config.lr
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            if idx.size < 2:
                continue
            if progressive_target is not None:
                from .masking import progressive_fraction

                mmodel.set_active_fraction(
                    progressive_fraction(state.step_count, total_steps, progressive_target))
            x_t, x_s = make_views(x[idx], aug_config, rng)

            def project(xi):
                emb, recs = mmodel.embed(xi)
                raw = emb @ proj.weights + proj.bias
                return emb, recs, raw, l2_normalize_rows(raw)

            emb_t, recs_t, raw_t, z_t = project(x_t)
            emb_s, recs_s, raw_s, z_s = project(x_s)

            use_queue = (config.queue_size > 0 and epoch >= config.queue_start_epoch
                         and queue is not None and queue.shape[0] > 0)
            loss, dc, dz_t, dz_s = swav_loss(z_t, z_s, bank, config.temperature,
                                             config.sinkhorn_eps, config.sinkhorn_iters,
                                             queue=queue if use_queue else None)
            if not np.isfinite(loss):
                log.warning("non-finite loss at epoch %d, rolling back", epoch)
                mmodel.set_scores(last_good)
                diverged = True
                break

            draw_t = _normalize_backward(raw_t, dz_t)
            draw_s = _normalize_backward(raw_s, dz_s)
            proj_grads = [emb_t.T @ draw_t + emb_s.T @ draw_s,
                          draw_t.sum(axis=0) + draw_s.sum(axis=0)]
            demb_t = draw_t @ proj.weights.T
            demb_s = draw_s @ proj.weights.T
            sg_t = mmodel.backward_scores(recs_t, demb_t)
            sg_s = mmodel.backward_scores(recs_s, demb_s)
            score_grads = [a + b2 for a, b2 in zip(sg_t, sg_s)]

            lr = cosine_warmup_lr(state.step_count, total_steps, config.lr,
                                  config.warmup_fraction)
            apply_score_step(mmodel, score_grads, state, lr, config.momentum,
                             config.weight_decay)
            sgd_step([proj.weights, proj.bias], proj_grads, proj_state,
                     config.head_lr, config.momentum, 0.0)
            sgd_step([bank.c], [dc], proto_state, config.prototype_lr, config.momentum, 0.0)
            bank.renormalize()

            if config.queue_size > 0:
                queue = z_s if queue is None else np.vstack([z_s, queue])
                queue = queue[: config.queue_size]
            epoch_loss += loss
            if step_callback is not None:
                step_callback(state.step_count, mmodel)
        if diverged:
            break
        last_good = mmodel.get_scores()
        rows = mmodel.sparsity_rows()
        history.append({"epoch": epoch, "loss": epoch_loss / steps_per_epoch,
                        "lr": float(lr), "active_fraction": rows[-1]["fraction"]})
    if progressive_target is not None and not diverged:
        mmodel.set_active_fraction(progressive_target)
    return SmnResult(mmodel.current_masks(), bank, history, diverged)
