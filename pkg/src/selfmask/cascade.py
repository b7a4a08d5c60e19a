"""Expert cascades over a single frozen backbone.

A dispatcher mask is learned on the whole dataset; its embeddings are
clustered (PCA then a diagonal-covariance Gaussian mixture) into K groups,
and one expert mask per group is trained on that group's data, starting
from the dispatcher's scores. At inference the dispatcher embedding is
concatenated with either all expert embeddings (unconditional) or just
the routed expert's (conditional, other blocks zeroed), and the result is
reduced back to the original dimension by centered projection onto the top
singular vectors divided by the singular values, which equalizes the
feature variances for the probe.
"""

import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .masking import MaskedModel
from .maskio import pack_masks, unpack_masks
from .nn import SmallModel, TrainConfig
from .rng import child_rng
from .ssl import AugmentConfig, train_smn

log = logging.getLogger(__name__)


@dataclass
class PCAModel:
    mean: np.ndarray  # (d,)
    components: np.ndarray  # (d, F), orthonormal columns
    singular_values: np.ndarray  # (F,), descending

    @property
    def out_dim(self):
        return self.components.shape[1]

    def project(self, x):
        return (np.atleast_2d(x) - self.mean) @ self.components


def pca_fit(x, n_components) -> PCAModel:
    """PCA via SVD of the centered data matrix, components by falling singular value."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n_components > min(n - 1, d):
        raise ValueError(
            f"n_components={n_components} exceeds achievable rank {min(n - 1, d)}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(n, d) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    if rank < n_components:
        raise ValueError(
            f"data rank {rank} is below requested n_components={n_components}")
    return PCAModel(mean, vt[:n_components].T.copy(), s[:n_components].copy())


def whiten_reduce(pca: PCAModel, e_bar):
    """Center, project onto the components, divide coordinate i by singular value i.

    On the training set this gives every output feature the same variance.
    Near-zero singular values (< 1e-10) are rank-guarded: the coordinate is
    zeroed with a warning so the output dimension stays fixed.
    """
    e_bar = np.asarray(e_bar, dtype=np.float64)
    single = e_bar.ndim == 1
    proj = pca.project(e_bar)
    s = pca.singular_values.copy()
    dead = s < 1e-10
    if dead.any():
        log.warning("whitening: %d component(s) below rank guard, zeroed", int(dead.sum()))
        s[dead] = 1.0
    out = proj / s
    out[:, dead] = 0.0
    return out[0] if single else out


@dataclass
class RouterModel:
    """PCA reduction followed by a diagonal-covariance Gaussian mixture."""

    pca: PCAModel
    means: np.ndarray  # (K, p)
    variances: np.ndarray  # (K, p)
    weights: np.ndarray  # (K,)
    route_rule: str = "posterior"

    @property
    def n_components(self):
        return self.means.shape[0]


def _log_gaussian_diag(x, means, variances):
    # (n, K) log N(x | mean_k, diag var_k)
    n, p = x.shape
    out = np.empty((n, means.shape[0]))
    for k in range(means.shape[0]):
        diff = x - means[k]
        out[:, k] = -0.5 * (np.log(2 * np.pi * variances[k]).sum()
                            + (diff ** 2 / variances[k]).sum(axis=1))
    return out


def _logsumexp(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))


def _kmeanspp_init(x, k, rng):
    means = [x[rng.integers(x.shape[0])]]
    for _ in range(1, k):
        d2 = np.min([(np.square(x - m)).sum(axis=1) for m in means], axis=0)
        total = d2.sum()
        if total <= 0:
            means.append(x[rng.integers(x.shape[0])])
            continue
        means.append(x[rng.choice(x.shape[0], p=d2 / total)])
    return np.array(means)


def fit_router(embeddings, k, pca_dims=20, seed=0, max_iter=500, tol=1e-6,
               route_rule="posterior") -> RouterModel:
    """EM for a diagonal GMM on PCA-reduced embeddings, k-means++ initialized.

    Converged when the mean log-likelihood improves by less than tol. A
    component that collapses to (almost) no responsibility is reinitialized
    from the point farthest from its nearest mean, at most 3 times.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    pca_dims = min(pca_dims, embeddings.shape[1], embeddings.shape[0] - 1)
    pca = pca_fit(embeddings, pca_dims)
    x = pca.project(embeddings)
    n, p = x.shape
    rng = child_rng(seed, 7)
    means = _kmeanspp_init(x, k, rng)
    global_var = x.var(axis=0) + 1e-6
    variances = np.tile(global_var, (k, 1))
    weights = np.full(k, 1.0 / k)
    var_floor = 1e-6 * global_var
    prev_ll = -np.inf
    retries = 0
    it = 0
    while it < max_iter:
        it += 1
        logp = _log_gaussian_diag(x, means, variances) + np.log(weights)
        norm = _logsumexp(logp, axis=1)
        resp = np.exp(logp - norm)
        ll = float(norm.mean())
        nk = resp.sum(axis=0)
        if np.any(nk < 1e-8) and retries < 3:
            dead = int(np.argmin(nk))
            d2 = ((x[:, None, :] - means[None]) ** 2).sum(axis=2).min(axis=1)
            means[dead] = x[int(np.argmax(d2))]
            variances[dead] = global_var
            weights = np.full(k, 1.0 / k)
            retries += 1
            prev_ll = -np.inf
            continue
        nk = np.maximum(nk, 1e-12)
        means = (resp.T @ x) / nk[:, None]
        for j in range(k):
            diff = x - means[j]
            variances[j] = np.maximum((resp[:, j : j + 1] * diff ** 2).sum(axis=0) / nk[j],
                                      var_floor)
        weights = nk / n
        if ll - prev_ll < tol and it > 1:
            break
        prev_ll = ll
    return RouterModel(pca, means, variances, weights, route_rule)


def route(router: RouterModel, embedding):
    """Cluster index per embedding: posterior argmax (ties to the lower index).

    route_rule "euclidean" instead picks the nearest component mean in the
    reduced space, matching centroid routing when covariances are equal.
    """
    e = np.atleast_2d(np.asarray(embedding, dtype=np.float64))
    x = router.pca.project(e)
    if router.route_rule == "euclidean":
        d2 = ((x[:, None, :] - router.means[None]) ** 2).sum(axis=2)
        idx = np.argmin(d2, axis=1)
    else:
        logp = _log_gaussian_diag(x, router.means, router.variances) + np.log(router.weights)
        idx = np.argmax(logp, axis=1)
    return idx if np.asarray(embedding).ndim > 1 else int(idx[0])


def router_posteriors(router: RouterModel, embedding):
    x = router.pca.project(np.atleast_2d(np.asarray(embedding, dtype=np.float64)))
    logp = _log_gaussian_diag(x, router.means, router.variances) + np.log(router.weights)
    return np.exp(logp - _logsumexp(logp, axis=1))


def expert_epochs(dataset_size, ref_size=50000, ref_epochs=150) -> int:
    """Epoch budget keeping every expert near the reference number of steps.

    round-half-up of ref_size/dataset_size * ref_epochs.
    """
    if dataset_size < 1:
        raise ValueError(f"dataset_size must be >= 1, got {dataset_size}")
    return int(math.floor(ref_size / dataset_size * ref_epochs + 0.5))


def concat_unconditional(d, experts):
    """[dispatcher, expert_1, ..., expert_K] along the feature axis."""
    parts = [np.atleast_2d(d)] + [np.atleast_2d(e) for e in experts]
    width = parts[0].shape[1]
    for p in parts[1:]:
        if p.shape[1] != width:
            raise ValueError("all embeddings must share the dispatcher dimension")
    out = np.concatenate(parts, axis=1)
    return out[0] if np.asarray(d).ndim == 1 else out


def concat_conditional(d, expert, index, k):
    """Dispatcher block plus one expert block at its slot, other slots zero."""
    if not 0 <= index < k:
        raise ValueError(f"expert index {index} out of range for K={k}")
    d2 = np.atleast_2d(d)
    e2 = np.atleast_2d(expert)
    if e2.shape[1] != d2.shape[1]:
        raise ValueError("expert embedding dimension must match dispatcher")
    f = d2.shape[1]
    out = np.zeros((d2.shape[0], (k + 1) * f), dtype=d2.dtype)
    out[:, :f] = d2
    out[:, (index + 1) * f : (index + 2) * f] = e2
    return out[0] if np.asarray(d).ndim == 1 else out


@dataclass
class CascadeBundle:
    dispatcher_masks: list
    expert_masks: list  # K lists of masks
    router: RouterModel
    whitening: PCAModel
    mu: float

    @property
    def k(self):
        return len(self.expert_masks)

    @property
    def out_dim(self):
        return self.whitening.out_dim

    def mask_bits(self) -> int:
        per_set = sum(m.size for m in self.dispatcher_masks)
        return (self.k + 1) * per_set

    def router_param_bits(self) -> int:
        r = self.router
        params = (r.means.size + r.variances.size + r.weights.size
                  + r.pca.mean.size + r.pca.components.size + r.pca.singular_values.size)
        return 64 * params

    def whitening_param_bits(self) -> int:
        w = self.whitening
        return 64 * (w.mean.size + w.components.size + w.singular_values.size)


def _masked_with_masks(base: SmallModel, masks, mu) -> MaskedModel:
    """Inference-time masked model: scores are mask-derived (mu+1 / mu-1)."""
    mm = MaskedModel(base, score_init=mu + 1.0, mu=mu)
    for layer, mask in zip(mm.masked_layers(), masks):
        layer.scores = np.where(mask, mu + 1.0, mu - 1.0).astype(base.dtype)
    return mm


def train_cascade(base: SmallModel, x, k, config: TrainConfig, aug_config=None,
                  proj_dim=None, ref_epochs=None) -> CascadeBundle:
    """Dispatcher adaptation, routing, per-cluster experts, whitening fit.

    Stages: (1) label-free dispatcher mask on all data; (2) router fit on
    dispatcher embeddings; (3) dataset split by route, clusters smaller
    than one batch merged into the nearest surviving cluster; (4) one
    expert per cluster, scores initialized from the dispatcher's, epoch
    budget from expert_epochs with desk-scale references (ref_size = |x|,
    ref_epochs = the dispatcher's epochs); (5) whitening PCA fit on the
    unconditional concatenations of the training set.
    """
    x = np.asarray(x, dtype=base.dtype)
    if ref_epochs is None:
        ref_epochs = config.epochs
    dispatcher = MaskedModel(base, config.score_init, config.threshold)
    result = train_smn(dispatcher, x, config, aug_config, proj_dim)
    disp_scores = dispatcher.get_scores()

    emb, _ = dispatcher.embed(x)
    router = fit_router(emb, k, pca_dims=20, seed=config.seed)
    assign = route(router, emb)

    # merge clusters too small to fill a batch
    sizes = np.bincount(assign, minlength=router.n_components)
    keep = sizes >= config.batch_size
    if not keep.any():
        keep[int(np.argmax(sizes))] = True
    if not keep.all():
        dropped = np.flatnonzero(~keep)
        log.warning("merging %d undersized cluster(s) %s", dropped.size, dropped.tolist())
        router = RouterModel(router.pca, router.means[keep], router.variances[keep],
                             router.weights[keep] / router.weights[keep].sum(),
                             router.route_rule)
        assign = route(router, emb)

    expert_masks = []
    for j in range(router.n_components):
        subset = x[assign == j]
        epochs = expert_epochs(max(1, subset.shape[0]), ref_size=x.shape[0],
                               ref_epochs=ref_epochs)
        expert_cfg = config.with_overrides(epochs=epochs, seed=int(config.seed + 1000 + j))
        if config.queue_size > 0:
            expert_cfg = expert_cfg.with_overrides(queue_start_epoch=max(1, epochs // 5))
        expert = MaskedModel(base, config.score_init, config.threshold)
        expert.set_scores(disp_scores)
        train_smn(expert, subset, expert_cfg, aug_config, proj_dim)
        expert_masks.append(expert.current_masks())

    bundle_wo_whitening = CascadeBundle(dispatcher.current_masks(), expert_masks,
                                        router, None, config.threshold)
    e_bar = _cascade_concat(bundle_wo_whitening, base, x, "unconditional")
    whitening = pca_fit(e_bar, base.embed_dim)
    return CascadeBundle(bundle_wo_whitening.dispatcher_masks, expert_masks, router,
                         whitening, config.threshold)


class CascadeRunner:
    """Materialized cascade: dispatcher and expert models over one backbone.

    ``forward_count`` tallies datapoint-forwards through the backbone across
    all member models, so callers can assert the two-forwards-per-query
    budget of conditional mode.
    """

    def __init__(self, bundle: CascadeBundle, base: SmallModel):
        self.bundle = bundle
        self.base = base
        self.dispatcher = _masked_with_masks(base, bundle.dispatcher_masks, bundle.mu)
        self.experts = [_masked_with_masks(base, masks, bundle.mu)
                        for masks in bundle.expert_masks]

    @property
    def forward_count(self) -> int:
        return self.dispatcher.forward_count + sum(e.forward_count for e in self.experts)

    def reset_forward_count(self):
        self.dispatcher.forward_count = 0
        for e in self.experts:
            e.forward_count = 0

    def concat(self, x, mode):
        x = np.asarray(x, dtype=self.base.dtype)
        d_emb, _ = self.dispatcher.embed(x)
        k = self.bundle.k
        if mode == "unconditional":
            expert_embs = [e.embed(x)[0] for e in self.experts]
            return concat_unconditional(d_emb, expert_embs)
        if mode == "conditional":
            assign = route(self.bundle.router, d_emb)
            f = d_emb.shape[1]
            out = np.zeros((x.shape[0], (k + 1) * f))
            out[:, :f] = d_emb
            for j in range(k):
                rows = np.flatnonzero(assign == j)
                if rows.size == 0:
                    continue
                e_emb, _ = self.experts[j].embed(x[rows])
                out[rows, (j + 1) * f : (j + 2) * f] = e_emb
            return out
        raise ValueError(f"unknown mode {mode!r}")

    def embed(self, x, mode="unconditional"):
        e_bar = self.concat(np.atleast_2d(x), mode)
        out = whiten_reduce(self.bundle.whitening, e_bar)
        return out[0] if np.asarray(x).ndim == 1 else out


def _cascade_concat(bundle: CascadeBundle, base: SmallModel, x, mode):
    return CascadeRunner(bundle, base).concat(x, mode)


def cascade_embed(bundle: CascadeBundle, base: SmallModel, x, mode="unconditional"):
    """Embed datapoints with the cascade and whiten back to the dispatcher dim.

    Conditional mode costs exactly two backbone forwards per datapoint
    (dispatcher plus the routed expert); unconditional costs K+1.
    """
    return CascadeRunner(bundle, base).embed(x, mode)


def cluster_homogeneity(assignments, labels):
    """Cumulative class-share curves per cluster.

    Row (cluster, x, share, cumulative): after sorting the cluster's class
    shares in descending order, cumulative is the proportion its top-x
    classes cover. Labels are consumed for reporting only.
    """
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    rows = []
    for c in np.unique(assignments):
        lab = labels[assignments == c]
        _, counts = np.unique(lab, return_counts=True)
        shares = np.sort(counts)[::-1] / lab.size
        cum = np.cumsum(shares)
        for i, (s, cs) in enumerate(zip(shares, cum), start=1):
            rows.append({"cluster": int(c), "x": i, "share": float(s),
                         "cumulative": float(cs)})
    return rows


def cluster_homogeneity_csv(rows) -> str:
    import csv
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["cluster", "x", "share", "cumulative"])
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()


def save_bundle(dirpath, bundle: CascadeBundle):
    """Directory layout: dispatcher.mask, expert_<k>.mask, router.json, whitening.bin."""
    os.makedirs(dirpath, exist_ok=True)
    with open(os.path.join(dirpath, "dispatcher.mask"), "wb") as f:
        f.write(pack_masks(bundle.dispatcher_masks))
    for j, masks in enumerate(bundle.expert_masks):
        with open(os.path.join(dirpath, f"expert_{j}.mask"), "wb") as f:
            f.write(pack_masks(masks))
    r = bundle.router
    router_doc = {
        "means": r.means.tolist(),
        "covariances": r.variances.tolist(),
        "weights": r.weights.tolist(),
        "route_rule": r.route_rule,
        "pca": {"mean": r.pca.mean.tolist(),
                "components": r.pca.components.tolist(),
                "singular_values": r.pca.singular_values.tolist()},
        "mu": bundle.mu,
    }
    with open(os.path.join(dirpath, "router.json"), "w") as f:
        json.dump(router_doc, f, sort_keys=True)
    with open(os.path.join(dirpath, "whitening.bin"), "wb") as f:
        f.write(_pack_whitening(bundle.whitening))


def _pack_whitening(pca: PCAModel) -> bytes:
    import struct

    d, f_dim = pca.components.shape
    out = bytearray()
    out += struct.pack("<II", d, f_dim)
    out += pca.mean.astype("<f8").tobytes()
    out += np.ascontiguousarray(pca.components, dtype="<f8").tobytes()
    out += pca.singular_values.astype("<f8").tobytes()
    return bytes(out)


def _unpack_whitening(data: bytes) -> PCAModel:
    import struct

    d, f_dim = struct.unpack_from("<II", data, 0)
    off = 8
    mean = np.frombuffer(data, dtype="<f8", count=d, offset=off).astype(np.float64)
    off += 8 * d
    comp = np.frombuffer(data, dtype="<f8", count=d * f_dim, offset=off)
    comp = comp.reshape(d, f_dim).astype(np.float64)
    off += 8 * d * f_dim
    s = np.frombuffer(data, dtype="<f8", count=f_dim, offset=off).astype(np.float64)
    return PCAModel(mean, comp, s)


def load_bundle(dirpath) -> CascadeBundle:
    with open(os.path.join(dirpath, "dispatcher.mask"), "rb") as f:
        dispatcher = unpack_masks(f.read())
    experts = []
    j = 0
    while os.path.exists(os.path.join(dirpath, f"expert_{j}.mask")):
        with open(os.path.join(dirpath, f"expert_{j}.mask"), "rb") as f:
            experts.append(unpack_masks(f.read()))
        j += 1
    with open(os.path.join(dirpath, "router.json")) as f:
        doc = json.load(f)
    pca = PCAModel(np.array(doc["pca"]["mean"]),
                   np.array(doc["pca"]["components"]),
                   np.array(doc["pca"]["singular_values"]))
    router = RouterModel(pca, np.array(doc["means"]), np.array(doc["covariances"]),
                         np.array(doc["weights"]), doc.get("route_rule", "posterior"))
    with open(os.path.join(dirpath, "whitening.bin"), "rb") as f:
        whitening = _unpack_whitening(f.read())
    return CascadeBundle(dispatcher, experts, router, whitening, doc.get("mu", 0.0))
