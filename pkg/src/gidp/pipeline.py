"""End-to-end orchestration: synth -> pretrain -> finetune -> embed -> enhance -> eval.

One run writes, under the output directory: the effective config echo, the
synthetic dataset, both checkpoints with their training stats, the three
descriptor stores (train / database / queries), enhanced store variants, and
an evaluation report for each of {no enhancement, inductive, transductive} so
ablation-style comparisons fall out of a single invocation.

All randomness derives from run.seed (stage-tagged streams); the world's
geometry comes from world.geometry_seed only, so varying run.seed retrains on
the same benchmark.
"""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import encoder as enc
from .config import PipelineConfig, format_config
from .dataset import (
    SubmapRecord,
    build_index,
    generate_synthetic_world,
    save_dataset,
    split_query_database,
)
from .errors import StageError
from .finetune import format_stats as format_finetune_stats
from .finetune import run_finetuning
from .pretrain import format_stats as format_pretrain_stats
from .pretrain import run_pretraining
from .retrieval import DescriptorStore, enhance_all, evaluate, format_report, save_report

log = logging.getLogger(__name__)

_SPLIT_EVAL_TAG = 0x5B11
_SPLIT_QUERY_TAG = 0x5B12


def embed_records(params: enc.EncoderParams, records: list[SubmapRecord], origin: str) -> DescriptorStore:
    """Encode every record's cloud into a descriptor store (no projection head)."""
    descs = enc.encode(params, [r.cloud for r in records])
    store = DescriptorStore(
        ids=np.array([r.id for r in records], dtype=np.uint64),
        descriptors=descs,
        coords=np.array([r.coord for r in records]),
        origin=origin,
    )
    store.check_unit_norm()
    return store


def run_pipeline(cfg: PipelineConfig, out_dir: str | Path | None = None) -> dict:
    """Execute all stages; any failure raises StageError naming the stage.

    Returns a summary dict with artifact paths and the three reports' recalls.
    """
    out = Path(out_dir if out_dir is not None else cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective.cfg").write_text(format_config(cfg))
    summary: dict = {"out_dir": str(out), "reports": {}}
    seed = cfg.run.seed

    def stage(name):
        log.info("pipeline stage: %s", name)

    try:
        stage("synth")
        records = generate_synthetic_world(cfg.world)
        manifest = save_dataset(records, out / "dataset")
        summary["dataset"] = str(manifest)
    except Exception as exc:
        raise StageError("synth", str(exc)) from exc

    try:
        stage("split")
        eval_pool, train_records = split_query_database(
            records,
            cfg.run.eval_fraction,
            np.random.default_rng([seed, _SPLIT_EVAL_TAG]),
            match_radius=cfg.eval.match_radius,
            require_match=False,
        )
        query_records, database_records = split_query_database(
            eval_pool,
            cfg.run.query_fraction,
            np.random.default_rng([seed, _SPLIT_QUERY_TAG]),
            match_radius=cfg.eval.match_radius,
        )
        summary["split"] = {
            "train": len(train_records),
            "database": len(database_records),
            "queries": len(query_records),
        }
    except Exception as exc:
        raise StageError("split", str(exc)) from exc

    pretrained = None
    if not cfg.run.skip_pretrain:
        try:
            stage("pretrain")
            train_clouds = [r.cloud for r in train_records]
            pretrained, _, stats = run_pretraining(
                train_clouds, cfg.pretrain, seed, widths=cfg.encoder.widths
            )
            enc.save_checkpoint(pretrained, out / "pretrain.ckpt")
            (out / "pretrain_stats.txt").write_text(format_pretrain_stats(stats))
            summary["pretrain_ckpt"] = str(out / "pretrain.ckpt")
        except Exception as exc:
            raise StageError("pretrain", str(exc)) from exc

    try:
        stage("finetune")
        index = build_index(train_records, cfg.index.pos_threshold, cfg.index.neg_threshold)
        init = pretrained if pretrained is not None else enc.init_params(seed, cfg.encoder.widths)
        params, stats = run_finetuning(index, cfg.finetune, seed, init=init)
        enc.save_checkpoint(params, out / "encoder.ckpt")
        (out / "train_stats.txt").write_text(format_finetune_stats(stats))
        summary["encoder_ckpt"] = str(out / "encoder.ckpt")
    except Exception as exc:
        raise StageError("finetune", str(exc)) from exc

    try:
        stage("embed")
        desc_dir = out / "descriptors"
        desc_dir.mkdir(exist_ok=True)
        stores = {
            "train": embed_records(params, train_records, "train"),
            "database": embed_records(params, database_records, "database"),
            "queries": embed_records(params, query_records, "query"),
        }
        for name, store in stores.items():
            store.save(desc_dir / f"{name}.ds")
        summary["descriptors"] = str(desc_dir)
    except Exception as exc:
        raise StageError("embed", str(exc)) from exc

    try:
        stage("eval")
        for mode in ("none", "inductive", "transductive"):
            if mode == "none":
                q_store, db_store = stores["queries"], stores["database"]
                echo = {"enhance": "none", "match_radius": repr(cfg.eval.match_radius)}
            else:
                q_store, db_store = enhance_all(
                    stores["queries"],
                    stores["database"],
                    stores["train"],
                    replace(cfg.enhance, mode=mode),
                )
                q_store.save(desc_dir / f"queries_{mode}.ds")
                db_store.save(desc_dir / f"database_{mode}.ds")
                echo = {
                    "enhance": mode,
                    "lambda": repr(cfg.enhance.lam),
                    "neighbors": str(cfg.enhance.neighbors),
                    "match_radius": repr(cfg.eval.match_radius),
                }
            report = evaluate(q_store, db_store, cfg.eval.match_radius, config_echo=echo)
            save_report(report, out / f"report_{mode}.txt")
            summary["reports"][mode] = {
                "recall_top1": report.recall_top1,
                "recall_top1pct": report.recall_top1pct,
                "num_queries_evaluated": report.num_queries_evaluated,
                "path": str(out / f"report_{mode}.txt"),
            }
            log.info("report[%s]: AR@1=%.2f AR@1%%=%.2f", mode, report.recall_top1, report.recall_top1pct)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("eval", str(exc)) from exc

    return summary
