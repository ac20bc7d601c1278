"""End-to-end runs: ingest -> preprocess -> augment -> train -> evaluate -> report.

Each stage reads the previous stages' directories inside the run directory
and writes only its own, so any stage can be rerun in isolation.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import platform
import shutil
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import __version__
from .augment import (
    BalancePlan,
    GeometricGenerator,
    GeometricParams,
    balance_by_generation,
    class_counts,
    undersample,
)
from .classifier import TrainedClassifier, prediction_dump, train_classifier
from .config import NATIVE, ExperimentConfig
from .errors import StageFailure
from .ingest import attribute_classes, ingest_celeba, ingest_lfwa, ingest_utkface, read_records, write_records
from .metrics import PredictionDump, build_report, dataset_similarity, evaluate_dump, sample_balanced_test
from .preprocess import ImageSet, SplitSpec, mean_face, preprocess_records, stratified_split
from .stargan import DOMAIN_CLASS, DOMAINS, StarganGenerator, StarganTrainConfig, train_stargan
from .vae import VaeGenerator, VaeTrainConfig, fit_class_latents, train_vae

log = logging.getLogger(__name__)

STAGES = ("ingest", "preprocess", "augment", "train", "evaluate", "report")
STAGE_DIRS = {s: f"{i + 1:02d}_{s}" for i, s in enumerate(STAGES)}
ENGINE_VERSIONS = {"baseline": "1", "undersample": "1", "geometric": "1", "vae": "1", "stargan": "1"}


def stage_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([seed, STAGES.index(stage)]).generate_state(1)[0])


def set_deterministic(seed: int) -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


class Run:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.root = config.path(config.output_dir)

    def dir(self, stage: str, fresh: bool = False) -> Path:
        d = self.root / STAGE_DIRS[stage]
        if fresh and d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True, exist_ok=True)
        return d

    def existing(self, stage: str) -> Path:
        d = self.root / STAGE_DIRS[stage]
        if not d.exists():
            raise FileNotFoundError(f"stage {stage!r} has not been run yet ({d} missing)")
        return d

    @property
    def classes(self) -> tuple[str, ...]:
        return attribute_classes(self.config.attribute)


# stages -----------------------------------------------------------------------

def stage_ingest(run: Run) -> dict:
    cfg = run.config
    out = run.dir("ingest", fresh=True)
    counts = {}
    cap = cfg.preprocess.get("max_records")
    for name, block in sorted(cfg.datasets.items()):
        if name == "utkface":
            records = ingest_utkface(cfg.path(block["images"]))
        elif name == "lfwa":
            records = ingest_lfwa(cfg.path(block["attributes"]), block.get("delimiter", "\t"))
        else:
            records = ingest_celeba(cfg.path(block["attributes"]))
        if cap is not None and len(records) > cap:
            rng = np.random.default_rng([stage_seed(cfg.seed, "ingest"), len(name)])
            records = [records[i] for i in sorted(rng.choice(len(records), cap, replace=False))]
        write_records(records, out / f"{name}.jsonl")
        counts[name] = len(records)
    return {"records": counts}


def stage_preprocess(run: Run) -> dict:
    cfg = run.config
    src = run.existing("ingest")
    out = run.dir("preprocess", fresh=True)
    seed = stage_seed(cfg.seed, "preprocess")
    attr = cfg.attribute
    native = [r for r in read_records(src / f"{NATIVE}.jsonl") if r.label(attr) is not None]
    images = preprocess_records(native, cfg.path(cfg.datasets[NATIVE]["images"]), size=cfg.image_size)
    train, val, test = stratified_split(images.records, SplitSpec(*cfg.split_fractions, seed=seed), attr)
    summary = {}
    for name, part in (("train", train), ("val", val), ("test", test)):
        images.subset(part).save(out / NATIVE / name)
        summary[f"{NATIVE}/{name}"] = class_counts(part, attr, run.classes)
    np.save(out / NATIVE / "mean_face.npy", mean_face(images.images()))
    for name, per_class in sorted(cfg.external_targets().items()):
        records = [r for r in read_records(src / f"{name}.jsonl") if r.label(attr) is not None]
        picked = sample_balanced_test(records, attr, per_class, seed, run.classes)
        ext = preprocess_records(picked, cfg.path(cfg.datasets[name]["images"]), size=cfg.image_size)
        ext.save(out / name / "test")
        np.save(out / name / "mean_face.npy", mean_face(ext.images()))
        summary[f"{name}/test"] = class_counts(picked, attr, run.classes)
    _dump_json(summary, out / "counts.json")
    return {"counts": summary}


def _geometric_params(block: dict, seed: int) -> GeometricParams:
    return GeometricParams(**{"seed": seed, **block})


def _stargan_domain_sets(train: ImageSet, config: StarganTrainConfig, seed: int) -> dict[str, np.ndarray]:
    """Up to ``per_class_images`` real images per domain, topped up with geometric copies when short."""
    rng = np.random.default_rng(seed)
    sets = {}
    for dom in DOMAINS:
        attribute, cls = DOMAIN_CLASS[dom]
        real = [r for r in train.records if r.label(attribute) == cls]
        if not real:
            raise ValueError(f"no training images for domain {dom!r}")
        if len(real) > config.per_class_images:
            real = [real[i] for i in sorted(rng.choice(len(real), config.per_class_images, replace=False))]
        pool = train.subset(real)
        if len(real) < config.per_class_images:
            gen = GeometricGenerator(pool, attribute, GeometricParams(seed=seed))
            plan = BalancePlan({cls: config.per_class_images})
            balance_by_generation(real, attribute, gen, classes=(cls,), plan=plan)
        sets[dom] = pool.images()
    return sets


def stage_augment(run: Run) -> dict:
    cfg = run.config
    train = ImageSet.load(run.existing("preprocess") / NATIVE / "train")
    out = run.dir("augment", fresh=True)
    seed = stage_seed(cfg.seed, "augment")
    attr, engine, block = cfg.attribute, cfg.engine, cfg.engine_block()
    shape = (cfg.image_size, cfg.image_size, 3)
    records = [r for r in train.records if r.label(attr) is not None]
    meta: dict = {"engine": engine, "engine_version": ENGINE_VERSIONS[engine], "seed": seed}

    if engine == "baseline":
        result = records
    elif engine == "undersample":
        result = undersample(records, attr, seed, run.classes)
    elif engine == "geometric":
        params = _geometric_params(block, seed)
        meta["params"] = dataclasses.asdict(params)
        result = balance_by_generation(records, attr, GeometricGenerator(train, attr, params), run.classes)
    elif engine == "vae":
        vcfg = VaeTrainConfig(**{"seed": seed, **block, "image_shape": shape})
        trained = train_vae(train.images(records), vcfg)
        fit_class_latents(trained, train.images(records), [r.label(attr) for r in records])
        trained.save(out / "vae.pt")
        meta["config"] = dataclasses.asdict(vcfg)
        meta["loss_history"] = trained.history
        result = balance_by_generation(records, attr, VaeGenerator(train, attr, trained, seed), run.classes)
    elif engine == "stargan":
        scfg = StarganTrainConfig(**{"seed": seed, **block, "image_shape": shape})
        trained = train_stargan(_stargan_domain_sets(train, scfg, seed), scfg, out / "stargan")
        meta["config"] = dataclasses.asdict(scfg)
        meta["checkpoints"] = trained.checkpoints
        result = balance_by_generation(records, attr, StarganGenerator(train, attr, trained, seed), run.classes)
    else:  # pragma: no cover - rejected by validate_config
        raise ValueError(engine)

    meta["class_counts"] = class_counts(result, attr, run.classes)
    meta["synthetic"] = sum(r.synthetic for r in result)
    augmented = train.subset(result)
    augmented.meta = {**train.meta, **meta}
    augmented.save(out / "train")
    return {"class_counts": meta["class_counts"], "synthetic": meta["synthetic"]}


def _labels(records, attr, classes):
    return [classes.index(r.label(attr)) for r in records]


def stage_train(run: Run) -> dict:
    cfg = run.config
    attr, classes = cfg.attribute, list(run.classes)
    train = ImageSet.load(run.existing("augment") / "train")
    val = ImageSet.load(run.existing("preprocess") / NATIVE / "val")
    out = run.dir("train", fresh=True)
    ccfg = cfg.classifier_config(stage_seed(cfg.seed, "train"))
    shape = (cfg.image_size, cfg.image_size, 3)
    trained = train_classifier(train.images(), _labels(train.records, attr, classes), val.images(),
                               _labels(val.records, attr, classes), classes, ccfg, shape)
    trained.save(out / "classifier.pt")
    _dump_json({"config": dataclasses.asdict(ccfg), "initial_train_loss": trained.initial_train_loss,
                "history": trained.history,
                "upscale": "bilinear" if ccfg.input_size else None}, out / "history.json")
    if cfg.evaluation.get("plots"):
        _plot_history(trained.history, out / "loss_curve.png")
    return {"epochs": len(trained.history), "final": trained.history[-1]}


def _plot_history(history, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    epochs = [h["epoch"] for h in history]
    ax.plot(epochs, [h["train_loss"] for h in history], label="train")
    ax.plot(epochs, [h["val_loss"] for h in history], label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _test_sets(run: Run) -> dict[str, Path]:
    pre = run.existing("preprocess")
    sets = {}
    if run.config.evaluation.get("native", True):
        sets[NATIVE] = pre / NATIVE / "test"
    for name in sorted(run.config.external_targets()):
        sets[name] = pre / name / "test"
    return sets


def stage_evaluate(run: Run) -> dict:
    cfg = run.config
    attr = cfg.attribute
    trained = TrainedClassifier.load(run.existing("train") / "classifier.pt")
    out = run.dir("evaluate", fresh=True)
    model_id = cfg.engine
    summary = {}
    for name, path in _test_sets(run).items():
        test = ImageSet.load(path)
        dump = prediction_dump(trained, test.images(), [r.image_ref for r in test.records],
                               [r.label(attr) for r in test.records], attr, model_id, name)
        dump.write(out / f"{name}.predictions.csv")
        report = evaluate_dump(dump, run.classes)
        (out / f"{name}.report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        summary[name] = {"mean_accuracy": report.mean_accuracy, "accuracy_std": report.accuracy_std}
    pre = run.existing("preprocess")
    similarity = {}
    native_face = np.load(pre / NATIVE / "mean_face.npy")
    for name in sorted(cfg.external_targets()):
        score = dataset_similarity(native_face, np.load(pre / name / "mean_face.npy"))
        similarity[name] = dataclasses.asdict(score)
    _dump_json(similarity, out / "similarity.json")
    return {"datasets": summary, "similarity": similarity}


def stage_report(run: Run) -> dict:
    cfg = run.config
    ev = run.existing("evaluate")
    out = run.dir("report", fresh=True)
    extra = [(d["dataset"], cfg.path(d["path"])) for d in cfg.evaluation.get("extra_dumps") or []]
    md_parts, csv_parts, metrics = [f"# {cfg.attribute} / {cfg.engine}\n"], [], {}
    for name in _test_sets(run):
        dumps = [ev / f"{name}.predictions.csv"] + [p for ds, p in extra if ds == name]
        reports, md, csv_text = build_report([PredictionDump.read(p) for p in dumps], cfg.attribute, run.classes)
        md_parts.append(f"\n## {name}\n\n{md}")
        csv_parts.append(f"# {name}\n{csv_text}")
        metrics[name] = [dataclasses.asdict(r) for r in reports]
    sim = json.loads((ev / "similarity.json").read_text())
    if sim:
        md_parts.append("\n## mean-face similarity to " + NATIVE + "\n\n| Dataset | MSE | SSIM |\n|---|---|---|\n")
        md_parts += [f"| {k} | {v['mse']:.4f} | {v['ssim']:.4f} |\n" for k, v in sorted(sim.items())]
    metrics["similarity"] = sim
    (out / "report.md").write_text("".join(md_parts), encoding="utf-8")
    (out / "report.csv").write_text("".join(csv_parts), encoding="utf-8")
    _dump_json(metrics, out / "metrics.json")
    return {"datasets": sorted(metrics)}


STAGE_FUNCS: dict[str, Callable[[Run], dict]] = {
    "ingest": stage_ingest,
    "preprocess": stage_preprocess,
    "augment": stage_augment,
    "train": stage_train,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def run_pipeline(config: ExperimentConfig, stages: tuple[str, ...] | list[str] = STAGES) -> Path:
    """Run ``stages`` in order; returns the run directory.

    A failing stage raises ``StageFailure`` naming it. Outputs of stages that
    completed, including the partial output of the failing one, are left in place.
    """
    run = Run(config)
    run.root.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run.root / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    pkg_log = logging.getLogger("facebias")
    pkg_log.addHandler(handler)
    pkg_log.setLevel(logging.INFO)
    summary_path = run.root / "summary.json"
    summary = json.loads(summary_path.read_text()) if summary_path.exists() else {"stages": {}}
    summary.update({
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "seed": config.seed,
        "versions": {"facebias": __version__, "torch": torch.__version__, "numpy": np.__version__,
                     "python": platform.python_version(),
                     "engines": {config.engine: ENGINE_VERSIONS[config.engine]}},
    })
    try:
        set_deterministic(config.seed)
        for stage in stages:
            log.info("stage %s: start", stage)
            try:
                result = STAGE_FUNCS[stage](run)
            except Exception as exc:
                log.exception("stage %s failed", stage)
                summary["stages"][stage] = {"status": "failed", "error": repr(exc)}
                raise StageFailure(stage, exc) from exc
            summary["stages"][stage] = {"status": "ok", **result}
            log.info("stage %s: done", stage)
    finally:
        _dump_json(summary, summary_path)
        pkg_log.removeHandler(handler)
        handler.close()
    return run.root

