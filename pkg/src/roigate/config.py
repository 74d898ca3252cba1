"""Experiment configuration and its line-oriented file format.

Configs are INI-style text (sections of key = value lines, parsed with
the standard library), diff-friendly and hashable: the canonical text
rendering feeds the checkpoint's config hash.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .data import SynthSpec
from .detector import (BackboneConfig, EvalConfig, ModelSpec, SgdConfig,
                       TrainConfig)

MODELS = ("baseline", "spatial", "channel")
SQUEEZE_RATIOS = (1, 2, 4, 8)


@dataclass
class DatasetConfig:
    spec: SynthSpec = field(default_factory=SynthSpec)
    train_count: int = 500
    eval_count: int = 100
    train_path: str = ""     # existing annotation files override synthesis
    eval_path: str = ""


@dataclass
class ExperimentConfig:
    model: str = "spatial"
    seed: int = 0
    precision: str = "float64"   # float32 is the fast training-demo mode
    squeeze_ratio: int = 2
    blocks_used: tuple = (1, 2, 3, 4, 5)
    roi_size: int = 7
    head_hidden: tuple = (256, 128)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    iterations: int | None = None
    jitter: float = 0.15
    eval: EvalConfig = field(default_factory=EvalConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32")
        if self.model != "baseline" and self.squeeze_ratio not in SQUEEZE_RATIOS:
            raise ValueError(
                f"squeeze_ratio must be one of {SQUEEZE_RATIOS}")
        if self.model == "baseline" and tuple(self.blocks_used) != (5,):
            # the conv5-only baseline ignores the block list and ratio
            self.blocks_used = (5,)

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            gate_kind=self.model,
            squeeze_ratio=self.squeeze_ratio,
            blocks_used=(5,) if self.model == "baseline" else tuple(self.blocks_used),
            roi_size=self.roi_size,
            head_hidden=tuple(self.head_hidden),
            backbone=self.backbone)

    def train_cfg(self) -> TrainConfig:
        return TrainConfig(sgd=self.sgd, iterations=self.iterations,
                           jitter=self.jitter, seed=self.seed)

    def with_model(self, model: str, squeeze_ratio: int | None = None) -> "ExperimentConfig":
        out = replace(self, model=model,
                      blocks_used=(5,) if model == "baseline" else (1, 2, 3, 4, 5))
        if squeeze_ratio is not None:
            out = replace(out, squeeze_ratio=squeeze_ratio)
        return out

    # -- serialization --------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["experiment"] = {
            "model": self.model,
            "seed": str(self.seed),
            "precision": self.precision,
        }
        cp["model"] = {
            "squeeze_ratio": str(self.squeeze_ratio),
            "blocks_used": _ints(self.blocks_used),
            "roi_size": str(self.roi_size),
            "head_hidden": _ints(self.head_hidden),
        }
        cp["backbone"] = {
            "channels": _ints(self.backbone.channels),
            "convs_per_block": str(self.backbone.convs_per_block),
            "downsample": _ints(self.backbone.downsample),
            "final_dilation": str(self.backbone.final_dilation),
        }
        cp["training"] = {
            "momentum": repr(self.sgd.momentum),
            "weight_decay": repr(self.sgd.weight_decay),
            "lr_schedule": ",".join(f"{n}:{r!r}" for n, r in self.sgd.lr_schedule),
            "roi_batch": str(self.sgd.roi_batch),
            "pos_fraction": repr(self.sgd.pos_fraction),
            "jitter": repr(self.jitter),
        }
        if self.iterations is not None:
            cp["training"]["iterations"] = str(self.iterations)
        cp["eval"] = {
            "iou_thresh": repr(self.eval.iou_thresh),
            "subsets": ",".join(self.eval.subsets),
            "grid": ",".join(f"{s}:" + "|".join(repr(h) for h in hs)
                             for s, hs in self.eval.grid),
            "gt_jitters": str(self.eval.gt_jitters),
            "jitter": repr(self.eval.jitter),
            "nms_iou": repr(self.eval.nms_iou),
            "max_dets": str(self.eval.max_dets),
            "seed": str(self.eval.seed),
        }
        spec = self.dataset.spec
        cp["dataset"] = {
            "train_count": str(self.dataset.train_count),
            "eval_count": str(self.dataset.eval_count),
            "image_size": _ints(spec.image_size),
            "objects": _ints(spec.objects_range),
            "heights": f"{spec.height_range[0]!r},{spec.height_range[1]!r}",
            "height_buckets": ",".join(f"{lo!r}:{hi!r}:{w!r}"
                                       for lo, hi, w in spec.height_buckets),
            "occluder_prob": repr(spec.occluder_prob),
            "occluded_fraction": f"{spec.occluded_fraction[0]!r},"
                                 f"{spec.occluded_fraction[1]!r}",
            "distractors": _ints(spec.distractors_range),
        }
        if self.dataset.train_path:
            cp["dataset"]["train_path"] = self.dataset.train_path
        if self.dataset.eval_path:
            cp["dataset"]["eval_path"] = self.dataset.eval_path
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @staticmethod
    def from_ini(text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        exp = cp["experiment"]
        model_s = cp["model"]
        bb = cp["backbone"]
        tr = cp["training"]
        ev = cp["eval"]
        ds = cp["dataset"]
        backbone = BackboneConfig(
            channels=_parse_ints(bb["channels"]),
            convs_per_block=bb.getint("convs_per_block"),
            downsample=_parse_ints(bb["downsample"]),
            final_dilation=bb.getint("final_dilation"))
        sgd = SgdConfig(
            momentum=tr.getfloat("momentum"),
            weight_decay=tr.getfloat("weight_decay"),
            lr_schedule=tuple(
                (int(part.split(":")[0]), float(part.split(":")[1]))
                for part in tr["lr_schedule"].split(",")),
            roi_batch=tr.getint("roi_batch"),
            pos_fraction=tr.getfloat("pos_fraction"))
        eval_cfg = EvalConfig(
            iou_thresh=ev.getfloat("iou_thresh"),
            subsets=tuple(ev["subsets"].split(",")),
            grid=tuple((int(part.split(":")[0]),
                        tuple(float(h) for h in part.split(":")[1].split("|")))
                       for part in ev["grid"].split(",")),
            gt_jitters=ev.getint("gt_jitters"),
            jitter=ev.getfloat("jitter"),
            nms_iou=ev.getfloat("nms_iou"),
            max_dets=ev.getint("max_dets"),
            seed=ev.getint("seed"))
        spec = SynthSpec(
            image_size=_parse_ints(ds["image_size"]),
            objects_range=_parse_ints(ds["objects"]),
            height_range=tuple(float(x) for x in ds["heights"].split(",")),
            height_buckets=tuple(
                tuple(float(x) for x in part.split(":"))
                for part in ds["height_buckets"].split(",")),
            occluder_prob=ds.getfloat("occluder_prob"),
            occluded_fraction=tuple(
                float(x) for x in ds["occluded_fraction"].split(",")),
            distractors_range=_parse_ints(ds["distractors"]))
        dataset = DatasetConfig(
            spec=spec,
            train_count=ds.getint("train_count"),
            eval_count=ds.getint("eval_count"),
            train_path=ds.get("train_path", ""),
            eval_path=ds.get("eval_path", ""))
        return ExperimentConfig(
            model=exp["model"],
            seed=exp.getint("seed"),
            precision=exp["precision"],
            squeeze_ratio=model_s.getint("squeeze_ratio"),
            blocks_used=_parse_ints(model_s["blocks_used"]),
            roi_size=model_s.getint("roi_size"),
            head_hidden=_parse_ints(model_s["head_hidden"]),
            backbone=backbone,
            sgd=sgd,
            iterations=tr.getint("iterations") if "iterations" in tr else None,
            jitter=tr.getfloat("jitter"),
            eval=eval_cfg,
            dataset=dataset)

    @staticmethod
    def load(path) -> "ExperimentConfig":
        with open(path) as fh:
            return ExperimentConfig.from_ini(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_ini())


def _ints(values) -> str:
    return ",".join(str(int(v)) for v in values)


def _parse_ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(","))


def desk_config(**overrides) -> ExperimentConfig:
    """The stock desk-scale experiment preset."""
    return ExperimentConfig(**overrides)


def tiny_config(**overrides) -> ExperimentConfig:
    """A seconds-long preset for smoke tests and demos."""
    base = dict(
        model="spatial",
        backbone=BackboneConfig(channels=(4, 8, 8, 12, 12)),
        head_hidden=(32, 16),
        roi_size=5,
        sgd=SgdConfig(lr_schedule=((30, 1e-3), (10, 1e-4)), roi_batch=8),
        eval=EvalConfig(grid=((32, (40.0,)),), gt_jitters=2,
                        subsets=("All",)),
        dataset=DatasetConfig(
            spec=SynthSpec(image_size=(64, 128), objects_range=(1, 2),
                           height_range=(20.0, 48.0),
                           height_buckets=((20.0, 48.0, 1.0),),
                           distractors_range=(1, 2)),
            train_count=6, eval_count=3),
    )
    base.update(overrides)
    return ExperimentConfig(**base)
