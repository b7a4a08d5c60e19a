"""Machine checks of the hyperparameter-equivalence claims.

Two claims are checked. Translating the score initialization and the
threshold by the same amount leaves every training mask unchanged (weight
decay must be off). Scaling the score initialization, the learning rate
and the threshold by a common positive factor (and dividing weight decay
by it) leaves every mask unchanged while scaling the whole score
trajectory by that factor.

The exact oracle runs both configurations on a tiny problem in rational
arithmetic, where the claims must hold bit-for-bit. The float lab runs
paired 64-bit trainings of a real masked MLP and measures per-step mask
agreement, which is near but not exactly 1 because rounding differs under
translated and rescaled arithmetic.
"""

import csv
import io
import json
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .masking import MaskedModel, train_supervised_mask
from .nn import SmallModel, TrainConfig, make_head
from .rng import child_rng


@dataclass
class ConfigTransform:
    """translate(a): shift score_init and threshold; requires weight_decay 0.

    scale(alpha): multiply lr, score_init and threshold by alpha, which
    reproduces the original masks with all scores scaled by alpha.
    scale_with_decay(alpha) additionally divides weight_decay by alpha.
    """

    kind: str  # translate | scale | scale_with_decay
    value: float

    def __post_init__(self):
        if self.kind not in ("translate", "scale", "scale_with_decay"):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind != "translate" and self.value <= 0:
            raise ValueError("scale factor must be positive")

    def inverse(self) -> "ConfigTransform":
        if self.kind == "translate":
            return ConfigTransform("translate", -self.value)
        return ConfigTransform(self.kind, 1.0 / self.value)


def equivalent_config(config: TrainConfig, t: ConfigTransform) -> TrainConfig:
    """The equivalent hyperparameter combination under the transform."""
    if t.kind == "translate":
        if config.weight_decay != 0:
            raise ValueError(
                "translation equivalence does not hold with weight decay enabled; "
                "set weight_decay=0 or use the counterexample runner")
        return replace(config, score_init=config.score_init + t.value,
                       threshold=config.threshold + t.value)
    if t.kind == "scale":
        a = t.value
        return replace(config, lr=config.lr * a, score_init=config.score_init * a,
                       threshold=config.threshold * a)
    a = t.value
    return replace(config, lr=config.lr * a, score_init=config.score_init * a,
                   threshold=config.threshold * a,
                   weight_decay=config.weight_decay / a)


# ---------------------------------------------------------------------------
# Exact oracle
# ---------------------------------------------------------------------------


@dataclass
class ToyProblem:
    """Masked linear regression in exact rationals, at most 32 parameters.

    The model output on input x is sum_i weights[i]*mask[i]*x[i]; the loss
    is half the squared error to the target, so the mask gradient for
    weight i is (prediction - target) * weights[i] * x[i], an exact
    rational. The variance rescale is omitted here (its square root leaves
    the rationals); the equivalence claims quantify over any deterministic
    gradient of the mask, so the oracle instantiates them faithfully.
    """

    weights: list  # Fractions
    batches: list  # list of (x: list of Fractions, target: Fraction), cycled

    def __post_init__(self):
        if len(self.weights) > 32:
            raise ValueError("toy problem limited to 32 parameters")
        self.weights = [Fraction(w) for w in self.weights]
        self.batches = [([Fraction(v) for v in x], Fraction(t)) for x, t in self.batches]


def default_toy_problem(n_params=8, seed=0) -> ToyProblem:
    """A small regression whose masks genuinely flip during training."""
    rng = child_rng(seed, 23)
    weights = [Fraction(int(rng.integers(-8, 9)) or 3, 4) for _ in range(n_params)]
    batches = []
    for _ in range(6):
        x = [Fraction(int(rng.integers(-3, 4)), 2) for _ in range(n_params)]
        target = Fraction(int(rng.integers(-6, 7)), 3)
        batches.append((x, target))
    return ToyProblem(weights, batches)


def _toy_gradient(problem: ToyProblem, mask, batch_idx):
    x, target = problem.batches[batch_idx % len(problem.batches)]
    pred = sum(w * on * xi for w, on, xi in zip(problem.weights, mask, x))
    err = pred - target
    return [err * w * xi for w, xi in zip(problem.weights, x)]


@dataclass
class ExactRunResult:
    masks_a: list
    masks_b: list
    scores_a: list
    scores_b: list
    identical: bool
    first_difference: int | None


def _exact_run(problem, lr, score_init, mu, gamma, momentum, steps):
    n = len(problem.weights)
    scores = [Fraction(score_init)] * n
    velocity = [Fraction(0)] * n
    lr, mu, gamma, momentum = Fraction(lr), Fraction(mu), Fraction(gamma), Fraction(momentum)
    mask_seq, score_seq = [], []
    for t in range(steps):
        mask = [int(s > mu) for s in scores]
        mask_seq.append(mask)
        score_seq.append(list(scores))
        grads = _toy_gradient(problem, mask, t)
        for i in range(n):
            velocity[i] = momentum * velocity[i] + grads[i] + gamma * scores[i]
            scores[i] = scores[i] - lr * velocity[i]
    mask_seq.append([int(s > mu) for s in scores])
    score_seq.append(list(scores))
    return mask_seq, score_seq


def rational_oracle(problem: ToyProblem, config_a, config_b, steps=200,
                    momentum=0) -> ExactRunResult:
    """Step-by-step exact masks under two configs; verdict is exact equality.

    Configs are mappings with keys lr, score_init, threshold, weight_decay
    (values coerced to Fraction). Momentum defaults to off, matching the
    scope of the analytical claims; passing a rational momentum probes the
    conjecture that the equivalences survive it.
    """

    def run(cfg):
        return _exact_run(problem, Fraction(cfg["lr"]), Fraction(cfg["score_init"]),
                          Fraction(cfg.get("threshold", 0)),
                          Fraction(cfg.get("weight_decay", 0)),
                          Fraction(momentum), steps)

    masks_a, scores_a = run(config_a)
    masks_b, scores_b = run(config_b)
    first_diff = None
    for t, (ma, mb) in enumerate(zip(masks_a, masks_b)):
        if ma != mb:
            first_diff = t
            break
    return ExactRunResult(masks_a, masks_b, scores_a, scores_b,
                          first_diff is None, first_diff)


def transform_config_dict(cfg: dict, t: ConfigTransform) -> dict:
    """Exact-arithmetic version of equivalent_config over Fraction dicts."""
    out = {k: Fraction(v) for k, v in cfg.items()}
    out.setdefault("threshold", Fraction(0))
    out.setdefault("weight_decay", Fraction(0))
    v = Fraction(t.value).limit_denominator(10**9)
    if t.kind == "translate":
        if out["weight_decay"] != 0:
            raise ValueError("translation equivalence requires weight_decay == 0")
        out["score_init"] += v
        out["threshold"] += v
    else:
        out["lr"] *= v
        out["score_init"] *= v
        out["threshold"] *= v
        if t.kind == "scale_with_decay":
            out["weight_decay"] /= v
    return out


# ---------------------------------------------------------------------------
# Float paired runs
# ---------------------------------------------------------------------------


@dataclass
class PairedProblem:
    """A supervised masking task both runs of a pair train on."""

    base: SmallModel  # float64 backbone
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    head_seed: int = 0


@dataclass
class PairedRunResult:
    transform: str
    agreements: np.ndarray  # per-step Hamming agreement, in [0,1]
    losses_a: list
    losses_b: list
    sparsity_a: float
    sparsity_b: float

    @property
    def min_agreement(self) -> float:
        return float(self.agreements.min())

    @property
    def first_divergence_step(self):
        below = np.flatnonzero(self.agreements < 1.0)
        return int(below[0]) if below.size else None

    def final_loss_relative_difference(self) -> float:
        la, lb = self.losses_a[-1], self.losses_b[-1]
        return abs(la - lb) / max(abs(la), abs(lb), 1e-12)

    def to_json(self) -> str:
        return json.dumps({
            "transform": self.transform,
            "steps": int(self.agreements.size),
            "min_agreement": self.min_agreement,
            "first_divergence_step": self.first_divergence_step,
            "final_loss_relative_difference": self.final_loss_relative_difference(),
            "loss_curves": {"a": self.losses_a, "b": self.losses_b},
            "final_sparsity": {"a": self.sparsity_a, "b": self.sparsity_b},
        }, indent=2)

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["epoch", "loss_a", "loss_b"])
        for i, (a, b) in enumerate(zip(self.losses_a, self.losses_b)):
            w.writerow([i, a, b])
        return buf.getvalue()


def _run_instrumented(problem: PairedProblem, config: TrainConfig):
    base = problem.base.astype(np.float64)
    mmodel = MaskedModel(base, config.score_init, config.threshold)
    head = make_head(base.embed_dim, problem.n_classes,
                     child_rng(problem.head_seed, 5), np.float64)
    step_masks = []

    def record(step, mm):
        bits = np.concatenate([m.ravel() for m in mm.current_masks()])
        step_masks.append(np.packbits(bits))

    losses = train_supervised_mask(mmodel, head, problem.x, problem.y, config,
                                   child_rng(config.seed, 11), step_callback=record)
    rows = mmodel.sparsity_rows()
    return step_masks, losses, rows[-1]["fraction"]


def run_paired(config_a: TrainConfig, config_b: TrainConfig, problem: PairedProblem,
               label="pair") -> PairedRunResult:
    """Train both configs on the identical problem, seed and data order.

    Both runs are forced to 64-bit. Reports the per-step Hamming agreement
    of the full-network mask and the per-epoch loss curves.
    """
    config_a = config_a.with_overrides(precision="f64")
    config_b = config_b.with_overrides(precision="f64",
                                       seed=config_a.seed,
                                       epochs=config_a.epochs,
                                       batch_size=config_a.batch_size)
    masks_a, losses_a, sp_a = _run_instrumented(problem, config_a)
    masks_b, losses_b, sp_b = _run_instrumented(problem, config_b)
    if len(masks_a) != len(masks_b):
        raise RuntimeError("paired runs recorded different step counts")
    total_bits = None
    agreements = np.empty(len(masks_a))
    for t, (ma, mb) in enumerate(zip(masks_a, masks_b)):
        diff = np.unpackbits(ma ^ mb)
        if total_bits is None:
            total_bits = diff.size
        agreements[t] = 1.0 - diff.sum() / total_bits
    return PairedRunResult(label, agreements, losses_a, losses_b, sp_a, sp_b)


def weight_decay_counterexample(config: TrainConfig, gamma: float, a: float,
                                problem: PairedProblem) -> PairedRunResult:
    """Paired run showing translation equivalence fail once decay is on.

    config_b is the translated config with the same gamma, constructed
    directly since equivalent_config rightly refuses to translate a
    decayed config. With a = 0 the runs coincide.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    config_a = config.with_overrides(weight_decay=gamma)
    config_b = config_a.with_overrides(score_init=config_a.score_init + a,
                                       threshold=config_a.threshold + a)
    return run_paired(config_a, config_b, problem, label=f"translate({a})+decay({gamma})")
