"""Synthetic datasets, regenerable bit-identically from their descriptors."""

from dataclasses import dataclass, field

import numpy as np

from .rng import child_rng


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray | None
    train_idx: np.ndarray
    test_idx: np.ndarray
    descriptor: dict = field(default_factory=dict)

    @property
    def x_train(self):
        return self.x[self.train_idx]

    @property
    def x_test(self):
        return self.x[self.test_idx]

    @property
    def y_train(self):
        return None if self.y is None else self.y[self.train_idx]

    @property
    def y_test(self):
        return None if self.y is None else self.y[self.test_idx]

    @property
    def dim(self):
        return self.x.shape[1]

    @property
    def n_classes(self):
        return 0 if self.y is None else int(self.y.max()) + 1


def _split(n, test_fraction, rng):
    order = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def _blob_means(classes, dim, separation, rng, groups=None, group_separation=None):
    if groups:
        if classes % groups != 0:
            raise ValueError(f"classes={classes} must be divisible by groups={groups}")
        coarse = rng.standard_normal((groups, dim))
        coarse *= group_separation / np.maximum(np.linalg.norm(coarse, axis=1, keepdims=True), 1e-9)
        per_group = classes // groups
        means = []
        for g in range(groups):
            for _ in range(per_group):
                d = rng.standard_normal(dim)
                d *= separation / max(np.linalg.norm(d), 1e-9)
                means.append(coarse[g] + d)
        return np.array(means), np.repeat(np.arange(groups), per_group)
    means = rng.standard_normal((classes, dim))
    means *= separation / np.maximum(np.linalg.norm(means, axis=1, keepdims=True), 1e-9)
    return means, None


def _make_blobs(params, seed):
    classes = params.get("classes", 10)
    per_class = params.get("per_class", 100)
    dim = params.get("dim", 32)
    separation = params.get("separation", 8.0)
    test_fraction = params.get("test_fraction", 0.25)
    groups = params.get("groups")
    group_separation = params.get("group_separation", 3 * separation)
    rng = child_rng(seed, 31)
    means, group_of_class = _blob_means(classes, dim, separation, rng,
                                        groups, group_separation)
    x = np.vstack([means[c] + rng.standard_normal((per_class, dim))
                   for c in range(classes)])
    y = np.repeat(np.arange(classes), per_class)
    train_idx, test_idx = _split(x.shape[0], test_fraction, child_rng(seed, 32))
    desc = {"kind": "blobs", "params": dict(params), "seed": seed}
    if group_of_class is not None:
        desc["group_of_class"] = group_of_class.tolist()
    return Dataset(x, y, train_idx, test_idx, desc)


def _make_moons(params, seed):
    per_class = params.get("per_class", 200)
    noise = params.get("noise", 0.1)
    dim = params.get("dim", 2)
    test_fraction = params.get("test_fraction", 0.25)
    rng = child_rng(seed, 33)
    t = rng.uniform(0, np.pi, per_class)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    t = rng.uniform(0, np.pi, per_class)
    lower = np.stack([1 - np.cos(t), -np.sin(t) + 0.5], axis=1)
    x2 = np.vstack([upper, lower]) + noise * rng.standard_normal((2 * per_class, 2))
    if dim > 2:
        pad = 0.05 * rng.standard_normal((x2.shape[0], dim - 2))
        x2 = np.hstack([x2, pad])
    y = np.repeat([0, 1], per_class)
    train_idx, test_idx = _split(x2.shape[0], test_fraction, child_rng(seed, 34))
    return Dataset(x2, y, train_idx, test_idx,
                   {"kind": "moons", "params": dict(params), "seed": seed})


def _make_glyphs(params, seed):
    classes = params.get("classes", 6)
    per_class = params.get("per_class", 80)
    size = params.get("size", 8)
    noise = params.get("noise", 0.3)
    test_fraction = params.get("test_fraction", 0.25)
    rng = child_rng(seed, 35)
    # class prototypes: a few random strokes on the grid
    protos = np.zeros((classes, size, size))
    for c in range(classes):
        for _ in range(3):
            r, col = rng.integers(0, size, 2)
            if rng.random() < 0.5:
                protos[c, r, :] = 1.0
            else:
                protos[c, :, col] = 1.0
    x = np.vstack([
        (protos[c] + noise * rng.standard_normal((per_class, size, size))).reshape(per_class, -1)
        for c in range(classes)
    ])
    y = np.repeat(np.arange(classes), per_class)
    train_idx, test_idx = _split(x.shape[0], test_fraction, child_rng(seed, 36))
    return Dataset(x, y, train_idx, test_idx,
                   {"kind": "glyphs", "params": dict(params), "seed": seed,
                    "image_shape": [size, size]})


def _rotation_matrix(dim, angle_scale, rng):
    """Product of Givens rotations over a random pairing of coordinates."""
    r = np.eye(dim)
    pairs = rng.permutation(dim)
    for i in range(0, dim - 1, 2):
        a, b = pairs[i], pairs[i + 1]
        theta = angle_scale * rng.uniform(0.5 * np.pi, np.pi)
        g = np.eye(dim)
        g[a, a] = g[b, b] = np.cos(theta)
        g[a, b] = -np.sin(theta)
        g[b, a] = np.sin(theta)
        r = g @ r
    return r


def _make_shifted_blobs(params, seed):
    """Source/target pair with an input-space distribution shift.

    The target reuses the source class structure but rotates the inputs and
    displaces the class means proportionally to `shift`; shift 0 reproduces
    the source distribution exactly.
    """
    shift = params.get("shift", 1.0)
    source = _make_blobs(params, seed)
    classes = source.n_classes
    dim = source.dim
    per_class = params.get("target_per_class", params.get("per_class", 100))
    rng = child_rng(seed, 37)
    rot = _rotation_matrix(dim, shift, child_rng(seed, 38))
    displace = rng.standard_normal((classes, dim))
    displace *= params.get("separation", 8.0) / np.maximum(
        np.linalg.norm(displace, axis=1, keepdims=True), 1e-9)
    src_means, _ = _blob_means(classes, dim, params.get("separation", 8.0),
                               child_rng(seed, 31), params.get("groups"),
                               params.get("group_separation", 3 * params.get("separation", 8.0)))
    tgt_means = src_means @ rot.T + shift * displace
    x = np.vstack([tgt_means[c] + rng.standard_normal((per_class, dim))
                   for c in range(classes)])
    y = np.repeat(np.arange(classes), per_class)
    train_idx, test_idx = _split(x.shape[0], params.get("test_fraction", 0.25),
                                 child_rng(seed, 39))
    target = Dataset(x, y, train_idx, test_idx,
                     {"kind": "shifted-blobs-target", "params": dict(params), "seed": seed})
    return source, target


GENERATORS = {
    "blobs": _make_blobs,
    "moons": _make_moons,
    "glyphs": _make_glyphs,
    "shifted-blobs": _make_shifted_blobs,
}


def gen_dataset(kind, params=None, seed=0):
    """Deterministic dataset from (kind, params, seed).

    shifted-blobs returns a (source, target) pair; other kinds return one
    Dataset.
    """
    if kind not in GENERATORS:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from {sorted(GENERATORS)}")
    params = dict(params or {})
    if params.get("per_class", 1) < 1 or params.get("classes", 2) < 1:
        raise ValueError("per_class and classes must be positive")
    return GENERATORS[kind](params, seed)
