"""FastAPI application wrapping the core package.

Endpoints run the (CPU-bound) stages synchronously; at desk scale a stage
completes in seconds to a few minutes, and the CLI client disables its request
timeout accordingly.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException

import gidp
from .. import encoder as enc
from ..config import PipelineConfig, format_config, parse_config
from ..dataset import SyntheticWorldConfig, build_index, generate_synthetic_world, load_dataset, save_dataset
from ..errors import GidpError
from ..finetune import FinetuneConfig, run_finetuning
from ..pipeline import embed_records, run_pipeline
from ..pointcloud import AugmentationConfig
from ..pretrain import PretrainConfig, run_pretraining
from ..retrieval import DescriptorStore, EnhanceConfig, enhance_all, evaluate, save_report
from ..finetune import format_stats as format_finetune_stats
from ..pretrain import format_stats as format_pretrain_stats
from . import models


def create_app() -> FastAPI:
    app = FastAPI(title="gidp", version=gidp.__version__)

    @app.exception_handler(GidpError)
    def _gidp_error(request, exc: GidpError):
        from fastapi.responses import JSONResponse

        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(ValueError)
    def _value_error(request, exc: ValueError):
        from fastapi.responses import JSONResponse

        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(FileNotFoundError)
    def _missing(request, exc: FileNotFoundError):
        from fastapi.responses import JSONResponse

        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.get("/health", response_model=models.HealthResponse)
    def health():
        return models.HealthResponse(status="ok", version=gidp.__version__)

    @app.get("/defaults", response_model=models.DefaultsResponse)
    def defaults():
        return models.DefaultsResponse(config=format_config(PipelineConfig()))

    @app.post("/synth", response_model=models.SynthResponse)
    def synth(req: models.SynthRequest):
        cfg = SyntheticWorldConfig(
            num_sites=req.sites,
            submaps_per_site=req.per_site,
            site_spacing=req.spacing,
            intra_site_spread=req.spread,
            points_per_cloud=req.points,
            geometry_seed=req.seed,
        )
        records = generate_synthetic_world(cfg)
        manifest = save_dataset(records, req.out_dir)
        return models.SynthResponse(manifest_path=str(manifest), num_records=len(records))

    @app.post("/pretrain", response_model=models.TrainResponse)
    def pretrain(req: models.PretrainRequest):
        records = load_dataset(req.data_dir)
        cfg = PretrainConfig(
            momentum_m=req.momentum,
            queue_capacity=req.queue_capacity,
            temperature=req.temperature,
            batch_size=req.batch_size,
            learning_rate=req.learning_rate,
            epochs=req.epochs,
            num_negatives=req.num_negatives,
            include_positive_in_denominator=req.include_positive_in_denominator,
            augmentation=AugmentationConfig(
                jitter_sigma=req.jitter_sigma,
                jitter_clip=req.jitter_clip,
                point_removal_fraction=req.point_removal_fraction,
                block_extent=req.block_extent,
                shear_max=req.shear_max,
            ),
        )
        params, _, stats = run_pretraining(
            [r.cloud for r in records], cfg, req.seed, widths=tuple(req.widths)
        )
        enc.save_checkpoint(params, req.out_ckpt)
        stats_path = None
        if req.stats_out:
            Path(req.stats_out).write_text(format_pretrain_stats(stats))
            stats_path = req.stats_out
        return models.TrainResponse(
            ckpt_path=req.out_ckpt,
            stats=[
                models.EpochStatsModel(epoch=s.epoch, mean_loss=_none_if_nan(s.mean_loss), extra=float(s.queue_size))
                for s in stats
            ],
            stats_path=stats_path,
        )

    @app.post("/train", response_model=models.TrainResponse)
    def train(req: models.TrainRequest):
        records = load_dataset(req.data_dir)
        index = build_index(records, req.pos_threshold, req.neg_threshold)
        cfg = FinetuneConfig(
            margin=req.margin,
            batch_size=req.batch_size,
            learning_rate=req.learning_rate,
            epochs=req.epochs,
            lr_decay_factor=req.lr_decay_factor,
            lr_decay_epoch=req.lr_decay_epoch,
            num_pos_candidates=req.num_pos_candidates,
            num_neg_candidates=req.num_neg_candidates,
        )
        if req.init == "random":
            init = enc.init_params(req.seed, tuple(req.widths))
        else:
            init, _ = enc.load_checkpoint(req.init)
        params, stats = run_finetuning(index, cfg, req.seed, init=init)
        enc.save_checkpoint(params, req.out_ckpt)
        stats_path = None
        if req.stats_out:
            Path(req.stats_out).write_text(format_finetune_stats(stats))
            stats_path = req.stats_out
        return models.TrainResponse(
            ckpt_path=req.out_ckpt,
            stats=[
                models.EpochStatsModel(epoch=s.epoch, mean_loss=_none_if_nan(s.mean_loss), extra=s.active_fraction)
                for s in stats
            ],
            stats_path=stats_path,
        )

    @app.post("/embed", response_model=models.EmbedResponse)
    def embed(req: models.EmbedRequest):
        params, _ = enc.load_checkpoint(req.ckpt)
        records = load_dataset(req.data_dir)
        store = embed_records(params, records, req.origin)
        store.save(req.out_path)
        return models.EmbedResponse(out_path=req.out_path, count=len(store), dim=store.dim)

    @app.post("/enhance", response_model=models.EnhanceResponse)
    def enhance(req: models.EnhanceRequest):
        train_store = DescriptorStore.load(req.train_path, origin="train")
        db_store = DescriptorStore.load(req.database_path, origin="database")
        query_store = DescriptorStore.load(req.queries_path, origin="query")
        cfg = EnhanceConfig(
            lam=req.lam,
            neighbors=req.neighbors,
            mode=req.mode,
            enhance_queries=req.enhance_queries,
            enhance_database=req.enhance_database,
        )
        q_enh, db_enh = enhance_all(query_store, db_store, train_store, cfg)
        db_enh.save(req.out_database)
        q_enh.save(req.out_queries)
        return models.EnhanceResponse(out_database=req.out_database, out_queries=req.out_queries)

    @app.post("/eval", response_model=models.EvalResponse)
    def eval_endpoint(req: models.EvalRequest):
        db_store = DescriptorStore.load(req.database_path, origin="database")
        query_store = DescriptorStore.load(req.queries_path, origin="query")
        report = evaluate(
            query_store,
            db_store,
            req.match_radius,
            config_echo={"match_radius": repr(req.match_radius)},
        )
        if req.report_out:
            save_report(report, req.report_out)
        return models.EvalResponse(
            recall_top1=report.recall_top1,
            recall_top1pct=report.recall_top1pct,
            num_queries_evaluated=report.num_queries_evaluated,
            database_size=report.database_size,
            top1pct_cutoff=report.top1pct_cutoff,
            report_path=req.report_out,
        )

    @app.post("/pipeline", response_model=models.PipelineResponse)
    def pipeline(req: models.PipelineRequest):
        overrides = dict(req.overrides)
        if req.seed is not None:
            overrides["run.seed"] = str(req.seed)
        if req.skip_pretrain is not None:
            overrides["run.skip_pretrain"] = "true" if req.skip_pretrain else "false"
        overrides["run.out_dir"] = req.out_dir
        cfg = parse_config(text=req.config_text, overrides=overrides)
        summary = run_pipeline(cfg)
        return models.PipelineResponse(
            out_dir=summary["out_dir"],
            reports={mode: models.ReportSummary(**vals) for mode, vals in summary["reports"].items()},
        )

    return app


def _none_if_nan(value: float) -> float | None:
    return None if value != value else value
