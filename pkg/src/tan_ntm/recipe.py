"""Experiment recipes: one YAML file drives preprocess -> train -> evaluate.

Each stage records a hash of its inputs (config slice plus upstream artifact
hashes) and of its outputs in ``manifest.json``; with ``resume`` a stage whose
input hash and outputs are unchanged is skipped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import yaml

logger = logging.getLogger(__name__)

ROOT_ENV = "TAN_NTM_ROOT"
VARIANT_CHOICES = ["lstm", "attn", "wtan", "ttan", "ttan-noglove"]

SCHEMA = {
    "type": "object",
    "required": ["name", "dataset", "seed", "paths"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "dataset": {"enum": ["20ng", "agnews", "yrp"]},
        "seed": {"type": "integer"},
        "paths": {
            "type": "object",
            "required": ["input", "output"],
            "additionalProperties": False,
            "properties": {"input": {"type": "string"}, "output": {"type": "string"},
                           "glove": {"type": ["string", "null"]}},
        },
        "preprocess": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"tr_size": {"type": "integer", "minimum": 1},
                           "num_below": {"type": "integer", "minimum": 0},
                           "fr_abv": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                           "max_vocab": {"type": ["integer", "null"], "minimum": 1},
                           "max_seq_len": {"type": "integer", "minimum": 1}},
        },
        "variants": {"type": "array", "minItems": 1, "items": {"enum": VARIANT_CHOICES}},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "integer", "minimum": 1}
                           for k in ("num_topics", "embed_dim", "hidden_dim", "attn_dim")}
            | {"dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
               "prior_alpha": {"type": ["number", "null"], "exclusiveMinimum": 0}},
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"batch_size": {"type": "integer", "minimum": 1},
                           "epochs": {"type": "integer", "minimum": 1},
                           "init_rate": {"type": "number", "exclusiveMinimum": 0},
                           "decay_rate": {"type": "number", "exclusiveMinimum": 0},
                           "checkpoint_every": {"type": "integer", "minimum": 0},
                           "coherence_every": {"type": "integer", "minimum": 0}},
        },
        "coherence": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"top_L": {"type": "integer", "minimum": 2},
                           "window": {"anyOf": [{"type": "integer", "minimum": 2}, {"const": "doc"}]}},
        },
        "classify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"enabled": {"type": "boolean"},
                           "sources": {"type": "array", "items": {"enum": ["topic", "context"]}},
                           "epochs": {"type": "integer", "minimum": 1}},
        },
    },
}


class RecipeError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def resolve(path: Optional[str], root: Optional[Path] = None) -> Optional[Path]:
    if path is None:
        return None
    p = Path(os.path.expandvars(os.path.expanduser(path)))
    if not p.is_absolute():
        root = root if root is not None else Path(os.environ.get(ROOT_ENV, "."))
        p = root / p
    return p


def load_recipe(path) -> dict:
    try:
        cfg = yaml.safe_load(Path(path).read_text())
        jsonschema.validate(cfg, SCHEMA)
    except (yaml.YAMLError, jsonschema.ValidationError) as e:
        raise RecipeError("config", str(e).splitlines()[0]) from e
    return cfg


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hash(path: Path) -> str:
    if path.is_file():
        return file_hash(path)
    h = hashlib.sha256()
    for p in sorted(q for q in path.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(path)).encode())
        h.update(file_hash(p).encode())
    return h.hexdigest()


def obj_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class Manifest:
    path: Path
    stages: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: Path) -> "Manifest":
        stages = json.loads(path.read_text())["stages"] if path.exists() else {}
        return cls(path, stages)

    def save(self):
        self.path.write_text(json.dumps({"stages": self.stages}, indent=2, sort_keys=True) + "\n")

    def up_to_date(self, stage: str, input_hash: str) -> bool:
        rec = self.stages.get(stage)
        if rec is None or rec["input_hash"] != input_hash:
            return False
        base = self.path.parent
        return all((base / p).exists() and tree_hash(base / p) == h for p, h in rec["outputs"].items())

    def record(self, stage: str, input_hash: str, outputs: list[Path]):
        base = self.path.parent
        self.stages[stage] = {"input_hash": input_hash,
                              "outputs": {str(p.relative_to(base)): tree_hash(p) for p in outputs}}
        self.save()

    def output_hash(self, stage: str) -> str:
        return obj_hash(self.stages[stage]["outputs"])


def run_recipe(config_path, resume: bool = False, root: Optional[Path] = None, seed: Optional[int] = None) -> Path:
    """Execute every stage of a recipe and return the artifacts directory."""
    from .checkpoint import load_checkpoint, load_model
    from .corpus import CorpusSplit, load_dataset
    from .evaluation import (CoherenceConfig, ProbeConfig, classify, export_topics, model_coherence,
                             reference_tokens)
    from .model import ModelConfig, load_glove
    from .train import TrainConfig, Trainer, train

    cfg = load_recipe(config_path)
    if seed is not None:
        cfg["seed"] = seed
    seed = cfg["seed"]
    in_path = resolve(cfg["paths"]["input"], root)
    out = resolve(cfg["paths"]["output"], root)
    glove = resolve(cfg["paths"].get("glove"), root)
    if not in_path.exists():
        raise RecipeError("config", f"input path {in_path} does not exist")
    if glove is not None and not glove.exists():
        raise RecipeError("config", f"GloVe file {glove} does not exist")
    out.mkdir(parents=True, exist_ok=True)
    (out / "recipe.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    manifest = Manifest.load(out / "manifest.json") if resume else Manifest(out / "manifest.json")

    def stage(name: str, inputs: dict, outputs: list[Path], fn):
        h = obj_hash(inputs)
        if resume and manifest.up_to_date(name, h):
            logger.info("stage %s up to date, skipping", name)
            return
        logger.info("running stage %s", name)
        try:
            fn()
        except RecipeError:
            raise
        except Exception as e:
            raise RecipeError(name, f"{type(e).__name__}: {e}") from e
        manifest.record(name, h, outputs)

    data_dir = out / "data"
    pre = dict(cfg.get("preprocess", {}))
    stage("preprocess", {"dataset": cfg["dataset"], "seed": seed, "pre": pre, "input": tree_hash(in_path)},
          [data_dir],
          lambda: load_dataset(cfg["dataset"], in_path, seed=seed, **pre).save(data_dir))
    corpus = CorpusSplit.load(data_dir)
    coh_cfg = CoherenceConfig(**cfg.get("coherence", {}))
    cls_cfg = cfg.get("classify", {"enabled": False})
    summary = {}

    for name in cfg.get("variants", ["ttan"]):
        vdir = out / name
        variant, use_glove = name.split("-")[0], not name.endswith("noglove")
        mcfg = ModelConfig(vocab_size=corpus.vocab_size, variant=variant, **cfg.get("model", {}))
        tcfg = TrainConfig(seed=seed, **cfg.get("train", {}))
        ckpt = vdir / "final.pt"

        def do_train():
            last = vdir / "last.pt"
            if resume and last.exists():
                saved = load_checkpoint(last)
                if (saved["config"] == mcfg.to_dict() and saved["train_config"] == asdict(tcfg)
                        and saved.get("vocab_sha256") == corpus.vocabulary.fingerprint()):
                    logger.info("continuing %s from %s", name, last)
                    Trainer.resume(last, corpus, vdir).run()
                    return
            emb = None
            if use_glove and glove is not None:
                emb, _ = load_glove(glove, corpus.vocabulary.tokens(), mcfg.embed_dim, seed)
            reference = reference_tokens(corpus, coh_cfg.reference_corpus)

            def coherence_fn(model):
                return model_coherence(model, corpus, coh_cfg, reference).mean

            train(corpus, mcfg, tcfg, vdir, emb, coherence_fn if tcfg.coherence_every else None)

        stage(f"train:{name}", {"model": mcfg.to_dict(), "train": tcfg.__dict__, "glove": use_glove and bool(glove),
                                "data": manifest.output_hash("preprocess")}, [ckpt], do_train)

        def do_coherence():
            model, _ = load_model(ckpt)
            report = model_coherence(model, corpus, coh_cfg)
            (vdir / "coherence.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
            (vdir / "topics.tsv").write_text(export_topics(report.topics, report.per_topic))

        stage(f"eval-coherence:{name}", {"cfg": coh_cfg.__dict__, "ckpt": manifest.output_hash(f"train:{name}")},
              [vdir / "coherence.json", vdir / "topics.tsv"], do_coherence)
        summary[name] = {"npmi": json.loads((vdir / "coherence.json").read_text())["mean"]}

        if cls_cfg.get("enabled"):
            for source in cls_cfg.get("sources", ["topic"]):
                pcfg = ProbeConfig(feature_source=source, seed=seed,
                                   **({"epochs": cls_cfg["epochs"]} if "epochs" in cls_cfg else {}))
                target = vdir / f"classify_{source}.json"

                def do_classify(pcfg=pcfg, target=target):
                    model, _ = load_model(ckpt)
                    target.write_text(json.dumps(classify(model, corpus, pcfg), indent=2) + "\n")

                stage(f"classify:{name}:{source}", {"cfg": pcfg.__dict__,
                                                    "ckpt": manifest.output_hash(f"train:{name}")},
                      [target], do_classify)
                summary[name][f"acc_{source}"] = json.loads(target.read_text())["accuracy"]

    cols = sorted({k for v in summary.values() for k in v})
    rows = ["\t".join(["variant"] + cols)]
    rows += ["\t".join([n] + [f"{summary[n].get(c, float('nan')):.4f}" for c in cols]) for n in summary]
    (out / "comparison.tsv").write_text("\n".join(rows) + "\n")
    (out / "comparison.json").write_text(json.dumps(summary, indent=2) + "\n")
    return out
