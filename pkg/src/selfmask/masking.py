"""Binary-mask learning over frozen weights.

Each maskable weight carries a real-valued score. A weight is active iff
its score strictly exceeds the threshold; the surviving weights are divided
by alpha = sqrt(active/N) so the masked matrix keeps the variance of the
full one. Scores are trained by passing the gradient w.r.t. the mask
through to the score (the pass-through trick), which turns discrete mask
search into plain SGD. Inactive weights keep receiving score gradients, so
a deactivated weight can come back.

alpha is treated as a constant during backward (no gradient through the
rescale) and is recomputed from the current mask on every forward pass.
"""

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from .nn import (
    OptimizerState,
    SmallModel,
    _activate,
    _activation_grad,
    cosine_warmup_lr,
    sgd_step,
    softmax_cross_entropy,
)

log = logging.getLogger(__name__)


def threshold_mask(scores: np.ndarray, mu: float) -> np.ndarray:
    """Mask bit i is 1 iff scores[i] > mu, strictly."""
    return scores > mu


def layer_alpha(mask: np.ndarray):
    """Rescale factor sqrt(active/N) for a mask.

    Returns (alpha, active_count, degenerate). The count is exact integer
    arithmetic; only the final square root is floating point. An all-zero
    mask is degenerate: alpha is reported as 1.0 and the caller must
    produce zero output for the layer.
    """
    n = mask.size
    if n < 1:
        raise ValueError("mask must have at least one entry")
    active = int(np.count_nonzero(mask))
    if active == 0:
        return 1.0, 0, True
    return float(np.sqrt(active / n)), active, False


def topk_mask(scores: np.ndarray, active_fraction: float) -> np.ndarray:
    """Keep the ceil(fraction*N) highest-scored weights active.

    Ties broken toward the lower flat index, which keeps the result
    platform-independent.
    """
    if active_fraction <= 0:
        raise ValueError(f"active_fraction must be positive, got {active_fraction}")
    if active_fraction > 1:
        raise ValueError(f"active_fraction must be <= 1, got {active_fraction}")
    n = scores.size
    count = int(np.ceil(active_fraction * n))
    flat = scores.ravel()
    # stable sort on negated scores: equal scores keep ascending index order
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:count]] = True
    return mask.reshape(scores.shape)


def progressive_fraction(step: int, total_steps: int, target_fraction: float) -> float:
    """Linear anneal of the active fraction from 1.0 at step 0 to the target."""
    if not 0 < target_fraction <= 1:
        raise ValueError(f"target_fraction must lie in (0,1], got {target_fraction}")
    if total_steps <= 0:
        return target_fraction
    t = step / total_steps
    return 1.0 + (target_fraction - 1.0) * t


class MaskedLayer:
    """A frozen linear layer with learnable mask scores.

    mask_rule "threshold" derives the mask from scores > mu; "topk" keeps a
    fixed fraction of top-scored weights (the fraction may be annealed by
    the trainer). The freeze mask marks which scores are trainable; frozen
    scores never move, so their mask bits stay at the initial (active)
    state.
    """

    def __init__(self, weights, bias, scores, mu=0.0, mask_rule="threshold",
                 active_fraction=1.0, freeze=None):
        if scores.shape != weights.shape:
            raise ValueError("scores must be congruent with the weight matrix")
        if mask_rule not in ("threshold", "topk"):
            raise ValueError(f"unknown mask rule {mask_rule!r}")
        self.weights = weights
        self.bias = bias
        self.scores = scores
        self.mu = mu
        self.mask_rule = mask_rule
        self.active_fraction = active_fraction
        self.freeze = freeze  # bool array, True = trainable; None = all trainable
        self.degenerate = False
        self.alpha = 1.0

    def current_mask(self) -> np.ndarray:
        if self.mask_rule == "topk":
            return topk_mask(self.scores, self.active_fraction)
        return threshold_mask(self.scores, self.mu)

    def trainable_count(self) -> int:
        return self.scores.size if self.freeze is None else int(np.count_nonzero(self.freeze))


@dataclass
class MaskedLayerRecord:
    x: np.ndarray
    mask: np.ndarray
    alpha: float
    degenerate: bool
    eff_weights: np.ndarray
    token: int


def masked_forward(layer: MaskedLayer, x: np.ndarray):
    """Linear transform with effective weights (weights/alpha) * mask.

    The bias is added unmasked. A degenerate (all-inactive) layer outputs
    bias only; the event is logged and training continues, since score
    gradients still flow and weights can revive.
    """
    if x.shape[1] != layer.weights.shape[0]:
        raise ValueError(
            f"input dim {x.shape[1]} does not match layer dim {layer.weights.shape[0]}"
        )
    mask = layer.current_mask()
    alpha, active, degenerate = layer_alpha(mask)
    if degenerate:
        log.warning("degenerate mask: all %d weights inactive, emitting bias only",
                    mask.size)
    layer.alpha = alpha
    layer.degenerate = degenerate
    eff = (layer.weights / alpha) * mask
    y = x @ eff + layer.bias
    return y, MaskedLayerRecord(x, mask, alpha, degenerate, eff, id(layer))


def straight_through_backward(layer: MaskedLayer, upstream: np.ndarray,
                              record: MaskedLayerRecord):
    """Pass-through gradients: d(loss)/d(score) := d(loss)/d(mask).

    d(loss)/d(mask)_i is the effective-weight gradient times weights_i/alpha,
    with alpha held constant. The mask is not applied to the score gradient,
    so inactive weights receive gradient too. Input gradients use the
    effective weights.
    """
    if record.token != id(layer):
        raise ValueError("record does not belong to this layer")
    d_eff = record.x.T @ upstream
    score_grads = d_eff * (layer.weights / record.alpha)
    input_grads = upstream @ record.eff_weights.T
    return score_grads, input_grads


class MaskedModel:
    """A frozen backbone whose maskable layers carry score tensors.

    Non-maskable layers pass through untouched. ``forward_count`` tallies
    how many datapoints have been embedded, which lets callers assert
    forward-pass budgets.
    """

    def __init__(self, base: SmallModel, score_init=1.0, mu=0.0, mask_rule="threshold",
                 active_fraction=1.0):
        self.base = base
        self.mu = mu
        self.layers = []
        for layer in base.layers:
            if layer.maskable:
                scores = np.full_like(layer.weights, score_init)
                self.layers.append(MaskedLayer(layer.weights, layer.bias, scores, mu,
                                               mask_rule, active_fraction))
            else:
                self.layers.append(layer)
        self.activations = [l.activation for l in base.layers]
        self.forward_count = 0

    @property
    def dtype(self):
        return self.base.dtype

    @property
    def embed_dim(self):
        return self.base.embed_dim

    def masked_layers(self):
        return [l for l in self.layers if isinstance(l, MaskedLayer)]

    def set_active_fraction(self, fraction):
        for l in self.masked_layers():
            l.active_fraction = fraction

    def set_scores(self, scores_list):
        for l, s in zip(self.masked_layers(), scores_list):
            if s.shape != l.scores.shape:
                raise ValueError("score shapes do not match")
            l.scores = s.astype(l.scores.dtype).copy()

    def get_scores(self):
        return [l.scores.copy() for l in self.masked_layers()]

    def current_masks(self):
        return [l.current_mask() for l in self.masked_layers()]

    def embed(self, x):
        """Forward to the embedding; returns (embedding, per-layer records)."""
        x = np.asarray(x, dtype=self.dtype)
        self.forward_count += x.shape[0]
        records = []
        for layer, act in zip(self.layers, self.activations):
            if isinstance(layer, MaskedLayer):
                z, rec = masked_forward(layer, x)
            else:
                z = x @ layer.weights + layer.bias
                rec = x
            records.append((z, rec))
            x = _activate(z, act)
        return x, records

    def backward_scores(self, records, d_embedding):
        """Backprop d(loss)/d(embedding) to score gradients for every masked layer.

        Frozen score entries get a zero gradient. Returns the list of score
        gradients aligned with masked_layers().
        """
        d = d_embedding
        score_grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            z, rec = records[i]
            d = _activation_grad(d, z, self.activations[i])
            if isinstance(layer, MaskedLayer):
                sg, d = straight_through_backward(layer, d, rec)
                if layer.freeze is not None:
                    sg = sg * layer.freeze
                score_grads[i] = sg
            else:
                d = d @ layer.weights.T
        return [score_grads[i] for i in range(len(self.layers)) if i in score_grads]

    def sparsity_rows(self):
        rows = []
        total_n, total_active = 0, 0
        for i, layer in enumerate(self.layers):
            if not isinstance(layer, MaskedLayer):
                continue
            mask = layer.current_mask()
            n = mask.size
            active = int(np.count_nonzero(mask))
            rows.append({"layer": f"dense{i}", "id": i, "n_params": n,
                         "n_active": active, "fraction": active / n})
            total_n += n
            total_active += active
        rows.append({"layer": "overall", "id": -1, "n_params": total_n,
                     "n_active": total_active, "fraction": total_active / total_n})
        return rows


def sparsity_report(mmodel: MaskedModel) -> str:
    """Per-layer active counts as CSV (columns layer,id,n_params,n_active,fraction)."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["layer", "id", "n_params", "n_active", "fraction"])
    writer.writeheader()
    for row in mmodel.sparsity_rows():
        writer.writerow(row)
    return buf.getvalue()


def select_trainable(mmodel: MaskedModel, policy: str, value, seed=0):
    """Install freeze masks choosing which scores may train.

    policy "random": freeze each score independently with probability
    ``value``. policy "max_magnitude": per layer, train only the scores of
    the ``value`` fraction of weights with the largest magnitude. policy
    "layer_subset": ``value`` is a collection of masked-layer indices
    (0-based over the masked layers) whose scores train; all others freeze.
    """
    from .rng import child_rng

    masked = mmodel.masked_layers()
    if policy == "random":
        p = float(value)
        if not 0 <= p <= 1:
            raise ValueError(f"freeze probability must lie in [0,1], got {p}")
        rng = child_rng(seed, 91)
        for layer in masked:
            layer.freeze = rng.random(layer.scores.shape) >= p
    elif policy == "max_magnitude":
        frac = float(value)
        if not 0 < frac <= 1:
            raise ValueError(f"fraction must lie in (0,1], got {frac}")
        for layer in masked:
            layer.freeze = topk_mask(np.abs(layer.weights), frac)
    elif policy == "layer_subset":
        chosen = set(int(i) for i in value)
        for i, layer in enumerate(masked):
            layer.freeze = np.full(layer.scores.shape, i in chosen)
    else:
        raise ValueError(f"unknown policy {policy!r}")
    if sum(l.trainable_count() for l in masked) == 0:
        raise ValueError("selection left no trainable scores")
    return [l.freeze for l in masked]


def apply_score_step(mmodel: MaskedModel, score_grads, state, lr, momentum=0.9,
                     weight_decay=0.0):
    """SGD step on the score tensors that honors freeze masks completely.

    Frozen entries receive no update of any kind: without this, weight
    decay would still pull them toward zero even with a zeroed gradient.
    """
    masked = mmodel.masked_layers()
    scores = [l.scores for l in masked]
    snapshots = [l.scores[~l.freeze] if l.freeze is not None else None for l in masked]
    sgd_step(scores, score_grads, state, lr, momentum, weight_decay)
    for layer, snap, v in zip(masked, snapshots, state.velocity):
        if layer.freeze is not None:
            layer.scores[~layer.freeze] = snap
            v *= layer.freeze


def mask_train_step(mmodel: MaskedModel, head, batch_x, batch_y, state, lr,
                    momentum=0.9, weight_decay=0.0, head_lr=None,
                    head_state=None):
    """One supervised masking step: cross-entropy through the masked backbone.

    Weights stay frozen; scores move by SGD on the pass-through gradient,
    the head by ordinary SGD. Masks are recomputed from the updated scores
    on the next forward. Returns the batch loss.
    """
    emb, records = mmodel.embed(batch_x)
    logits = emb @ head.weights + head.bias
    loss, dlogits = softmax_cross_entropy(logits, batch_y)
    d_emb = dlogits @ head.weights.T
    head_grads = [emb.T @ dlogits, dlogits.sum(axis=0)]
    score_grads = mmodel.backward_scores(records, d_emb)
    apply_score_step(mmodel, score_grads, state, lr, momentum, weight_decay)
    if head_lr is not None:
        sgd_step([head.weights, head.bias], head_grads, head_state, head_lr, momentum, 0.0)
    return loss


def train_supervised_mask(mmodel: MaskedModel, head, x, y, config, rng,
                          step_callback=None, progressive_target=None):
    """Supervised mask learning loop with a cosine (optionally warmed-up) schedule.

    ``step_callback(step, mmodel)`` runs after every optimizer step, which
    paired-run instrumentation uses to record masks. With
    ``progressive_target`` set and a topk-rule model, the active fraction
    anneals linearly from 1.0 to the target over the run.
    Returns per-epoch mean losses.
    """
    x = np.asarray(x, dtype=mmodel.dtype)
    y = np.asarray(y)
    scores = [l.scores for l in mmodel.masked_layers()]
    state = OptimizerState(scores)
    head_state = OptimizerState([head.weights, head.bias])
    n = x.shape[0]
    steps_per_epoch = max(1, int(np.ceil(n / config.batch_size)))
    total_steps = config.epochs * steps_per_epoch
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            if progressive_target is not None:
                mmodel.set_active_fraction(
                    progressive_fraction(state.step_count, total_steps, progressive_target))
            lr = cosine_warmup_lr(state.step_count, total_steps, config.lr,
                                  config.warmup_fraction)
            loss = mask_train_step(mmodel, head, x[idx], y[idx], state, lr,
                                   config.momentum, config.weight_decay,
                                   head_lr=config.head_lr, head_state=head_state)
            epoch_loss += loss
            if step_callback is not None:
                step_callback(state.step_count, mmodel)
        losses.append(epoch_loss / steps_per_epoch)
    if progressive_target is not None:
        mmodel.set_active_fraction(progressive_target)
    return losses
