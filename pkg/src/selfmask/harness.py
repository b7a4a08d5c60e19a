"""End-to-end experiment drivers.

An experiment is a pure function of its config: generate data, pretrain
(or load) a frozen backbone, adapt it with the chosen method, evaluate,
and write every artifact (masks, bundles, sparsity and storage reports,
accuracy tables, a JSON summary) under one output directory. Reruns with
the same config produce byte-identical artifacts.
"""

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import cascade as cascade_mod
from .data import Dataset, gen_dataset
from .evaluation import (EmbeddingSet, accuracy_csv, default_k, knn_accuracy,
                         linear_probe, lowshot_eval)
from .masking import MaskedModel, sparsity_report, train_supervised_mask
from .maskio import compression_benchmark, pack_masks, storage_report
from .nn import (SmallModel, TrainConfig, accuracy, forward, init_model,
                 load_checkpoint, make_head, save_checkpoint, train_classifier)
from .rng import child_rng
from .ssl import AugmentConfig, train_smn

log = logging.getLogger(__name__)

METHODS = ("knn", "fft", "mask-supervised", "smn", "smn+cascade", "topk",
           "progressive-topk")


@dataclass
class ExperimentConfig:
    """Complete declarative description of one experiment."""

    method: str = "smn"
    dataset_kind: str = "shifted-blobs"
    dataset_params: dict = field(default_factory=dict)
    dataset_seed: int = 0
    backbone_dims: tuple = (32, 128, 96, 32)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=0.05, momentum=0.9, epochs=40, batch_size=64))
    train: TrainConfig = field(default_factory=TrainConfig)
    # full fine-tuning moves the weights themselves, so it runs at a weight-scale
    # learning rate rather than the much larger score rate
    fft: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=0.05, momentum=0.9, epochs=30, batch_size=64))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    topk_fraction: float = 0.5
    cascade_k: int = 5
    eval_neighbors: int = 200
    eval_temperature: float = 0.1
    lowshot_fractions: tuple = (0.01, 0.02, 0.04, 0.10)
    backbone_path: str | None = None
    out_dir: str = "out"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")

    def to_json(self) -> str:
        def enc(o):
            if dataclasses.is_dataclass(o):
                return dataclasses.asdict(o)
            if isinstance(o, tuple):
                return list(o)
            raise TypeError(f"cannot encode {type(o)}")

        return json.dumps(dataclasses.asdict(self), default=enc, indent=2, sort_keys=True)


def _set_dotted(obj, path, value):
    parts = path.split(".")
    for p in parts[:-1]:
        obj = getattr(obj, p)
    leaf = parts[-1]
    current = getattr(obj, leaf)
    if isinstance(current, bool):
        value = value in ("1", "true", "True")
    elif isinstance(current, int) and not isinstance(current, bool):
        value = int(value)
    elif isinstance(current, float):
        value = float(value)
    elif isinstance(current, (tuple, list)):
        value = type(current)(json.loads(value))
    elif isinstance(current, dict):
        value = json.loads(value)
    setattr(obj, leaf, value)


def load_experiment_config(path=None, overrides=()) -> ExperimentConfig:
    """Config from a JSON file plus dotted-path overrides like train.lr=25."""
    cfg = ExperimentConfig()
    if path is not None:
        with open(path) as f:
            doc = json.load(f)
        for key in ("pretrain", "train", "fft"):
            if key in doc:
                setattr(cfg, key, TrainConfig(**doc.pop(key)))
        if "augment" in doc:
            aug = doc.pop("augment")
            if aug.get("image_shape") is not None:
                aug["image_shape"] = tuple(aug["image_shape"])
            cfg.augment = AugmentConfig(**aug)
        for key, value in doc.items():
            if not hasattr(cfg, key):
                raise ValueError(f"unknown config key {key!r}")
            if isinstance(getattr(cfg, key), tuple):
                value = tuple(value)
            setattr(cfg, key, value)
    for ov in overrides:
        if "=" not in ov:
            raise ValueError(f"override {ov!r} must look like key=value")
        key, value = ov.split("=", 1)
        _set_dotted(cfg, key, value)
    cfg.__post_init__()
    return cfg


def pretrain_backbone(source: Dataset, dims, config: TrainConfig) -> SmallModel:
    """Supervised pretraining of the generalist backbone on labeled source data.

    The returned model keeps its classifier head; adaptation methods freeze
    the backbone and attach their own heads.
    """
    if source.y is None:
        raise ValueError("pretraining needs a labeled source dataset")
    model = init_model(dims, child_rng(config.seed, 41), config.dtype,
                       head_dim=source.n_classes, head_rng=child_rng(config.seed, 42))
    train_classifier(model, source.x_train, source.y_train, config,
                     child_rng(config.seed, 43))
    return model


def embed_dataset(model_like, ds: Dataset):
    """Frozen embeddings of the train and test splits."""
    if isinstance(model_like, MaskedModel):
        emb_train, _ = model_like.embed(ds.x_train)
        emb_test, _ = model_like.embed(ds.x_test)
    else:
        emb_train = forward(model_like, ds.x_train).embedding
        emb_test = forward(model_like, ds.x_test).embedding
    train = EmbeddingSet(emb_train, ds.y_train, "train")
    test = EmbeddingSet(emb_test, ds.y_test, "test")
    return train, test


def _eval_embeddings(train_set, test_set, cfg: ExperimentConfig):
    k = default_k(train_set.embeddings.shape[0], cfg.eval_neighbors)
    knn = knn_accuracy(train_set, test_set, k, cfg.eval_temperature)
    _, probe_train, probe_test = linear_probe(train_set, test_set)
    return {"knn": knn, "probe_train": probe_train, "probe_test": probe_test}


def _resolve_datasets(cfg: ExperimentConfig):
    made = gen_dataset(cfg.dataset_kind, cfg.dataset_params, cfg.dataset_seed)
    if isinstance(made, tuple):
        return made
    return made, made


def _write(path, content, binary=False):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "wb" if binary else "w") as f:
        f.write(content)


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run one experiment end to end, preserving partial outputs on failure."""
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    summary = {"method": cfg.method, "stages": [], "failures": {}}
    _write(os.path.join(out, "config.json"), cfg.to_json())

    def stage(name, fn):
        try:
            result = fn()
            summary["stages"].append(name)
            return result
        except Exception as exc:
            log.exception("stage %s failed", name)
            summary["failures"][name] = f"{type(exc).__name__}: {exc}"
            _write(os.path.join(out, "summary.json"),
                   json.dumps(summary, indent=2, sort_keys=True))
            raise

    source, target = stage("data", lambda: _resolve_datasets(cfg))

    def get_backbone():
        if cfg.backbone_path:
            return load_checkpoint(cfg.backbone_path)
        model = pretrain_backbone(source, cfg.backbone_dims, cfg.pretrain)
        save_checkpoint(os.path.join(out, "backbone.smnw"), model)
        return model

    backbone = stage("backbone", get_backbone)
    summary["source_train_accuracy"] = accuracy(backbone, source.x_train, source.y_train)

    frozen_train, frozen_test = embed_dataset(backbone, target)
    summary["frozen"] = _eval_embeddings(frozen_train, frozen_test, cfg)

    tc = cfg.train
    aug = cfg.augment
    if cfg.dataset_kind == "glyphs" and aug.image_shape is None:
        aug = dataclasses.replace(aug, image_shape=tuple(target.descriptor["image_shape"]))

    if cfg.method == "knn":
        pass  # frozen eval above is the whole result
    elif cfg.method == "fft":
        def run_fft():
            model = backbone.copy()
            model.head = make_head(model.embed_dim, target.n_classes,
                                   child_rng(tc.seed, 44), model.dtype)
            train_classifier(model, target.x_train, target.y_train, cfg.fft,
                             child_rng(tc.seed, 45))
            tr, te = embed_dataset(model, target)
            summary["adapted"] = _eval_embeddings(tr, te, cfg)
            summary["adapted"]["head_test"] = accuracy(model, target.x_test, target.y_test)
            summary["storage"] = json.loads(
                storage_report(backbone.maskable_param_count(), "fft").to_json())
        stage("fft", run_fft)
    elif cfg.method in ("mask-supervised", "smn", "topk", "progressive-topk"):
        def run_mask():
            rule = "topk" if cfg.method in ("topk", "progressive-topk") else "threshold"
            fraction = 1.0 if cfg.method == "progressive-topk" else cfg.topk_fraction
            mmodel = MaskedModel(backbone, tc.score_init, tc.threshold, rule, fraction)
            progressive = cfg.topk_fraction if cfg.method == "progressive-topk" else None
            if cfg.method == "mask-supervised":
                head = make_head(backbone.embed_dim, target.n_classes,
                                 child_rng(tc.seed, 46), backbone.dtype)
                train_supervised_mask(mmodel, head, target.x_train, target.y_train,
                                      tc, child_rng(tc.seed, 47))
                logits = mmodel.embed(target.x_test)[0] @ head.weights + head.bias
                summary["head_test"] = float((logits.argmax(1) == target.y_test).mean())
            else:
                result = train_smn(mmodel, target.x_train, tc, aug,
                                   progressive_target=progressive)
                _write(os.path.join(out, "training_log.jsonl"),
                       "\n".join(json.dumps(r) for r in result.log) + "\n")
            masks = mmodel.current_masks()
            _write(os.path.join(out, "adapted.mask"), pack_masks(masks), binary=True)
            _write(os.path.join(out, "sparsity.csv"), sparsity_report(mmodel))
            tr, te = embed_dataset(mmodel, target)
            summary["adapted"] = _eval_embeddings(tr, te, cfg)
            summary["found_active_fraction"] = mmodel.sparsity_rows()[-1]["fraction"]
            report = storage_report(backbone.maskable_param_count(), "mask")
            summary["storage"] = json.loads(report.to_json())
            packed = pack_masks(masks)
            summary["compression"] = json.loads(
                compression_benchmark(packed, ("deflate",), "mask").to_json())
        stage(cfg.method, run_mask)
    elif cfg.method == "smn+cascade":
        def run_cascade():
            bundle = cascade_mod.train_cascade(backbone, target.x_train, cfg.cascade_k,
                                               tc, aug)
            cascade_mod.save_bundle(os.path.join(out, "bundle"), bundle)
            disp = cascade_mod._masked_with_masks(backbone, bundle.dispatcher_masks,
                                                  bundle.mu)
            tr, te = embed_dataset(disp, target)
            summary["dispatcher"] = _eval_embeddings(tr, te, cfg)
            for mode in ("conditional", "unconditional"):
                emb_tr = cascade_mod.cascade_embed(bundle, backbone, target.x_train, mode)
                emb_te = cascade_mod.cascade_embed(bundle, backbone, target.x_test, mode)
                summary[mode] = _eval_embeddings(
                    EmbeddingSet(emb_tr, target.y_train), EmbeddingSet(emb_te, target.y_test), cfg)
            report = storage_report(backbone.maskable_param_count(), "cascade",
                                    cascade_k=bundle.k,
                                    router_bits=bundle.router_param_bits(),
                                    whitening_bits=bundle.whitening_param_bits())
            summary["storage"] = json.loads(report.to_json())
            # labels consumed for reporting only: how homogeneous each
            # cluster's class distribution turned out
            d_emb, _ = disp.embed(target.x_train)
            assign = cascade_mod.route(bundle.router, d_emb)
            rows_h = cascade_mod.cluster_homogeneity(assign, target.y_train)
            _write(os.path.join(out, "cluster_homogeneity.csv"),
                   cascade_mod.cluster_homogeneity_csv(rows_h))
        stage("cascade", run_cascade)

    rows = []
    for name in ("frozen", "adapted", "dispatcher", "conditional", "unconditional"):
        if name in summary and isinstance(summary[name], dict) and "knn" in summary[name]:
            rows.append({"method": f"{cfg.method}:{name}", "fraction": 1.0,
                         "seed": tc.seed, "accuracy": summary[name]["knn"]})
    _write(os.path.join(out, "accuracy.csv"), accuracy_csv(rows))
    _write(os.path.join(out, "summary.json"), json.dumps(summary, indent=2, sort_keys=True))
    return summary


def run_lowshot(cfg: ExperimentConfig) -> list:
    """Fig-style low-shot comparison: frozen probe vs self-adapted probe.

    The mask is trained once on all unlabeled target images; probes then
    see shrinking stratified label subsets shared across variants.
    """
    source, target = _resolve_datasets(cfg)
    backbone = (load_checkpoint(cfg.backbone_path) if cfg.backbone_path
                else pretrain_backbone(source, cfg.backbone_dims, cfg.pretrain))
    frozen_train, frozen_test = embed_dataset(backbone, target)
    mmodel = MaskedModel(backbone, cfg.train.score_init, cfg.train.threshold)
    train_smn(mmodel, target.x_train, cfg.train, cfg.augment)
    smn_train, smn_test = embed_dataset(mmodel, target)
    variants = {"probe": frozen_train, "smn+probe": smn_train}
    tests = {"probe": frozen_test, "smn+probe": smn_test}
    rows = lowshot_eval(variants, tests, cfg.lowshot_fractions, cfg.train.seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write(os.path.join(cfg.out_dir, "lowshot.csv"), accuracy_csv(rows))
    return rows
