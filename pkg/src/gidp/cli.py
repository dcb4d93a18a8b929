"""Command-line front-end: a thin client over the service endpoints.

Every subcommand builds a request, sends it through ServiceClient (remote URL
via --url / GIDP_URL, otherwise in-process), and prints the response. Run
``gidp serve`` to host the same API over the network.
"""

from __future__ import annotations

import os
import sys

import click

from .client import ServiceClient, ServiceError

_THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_thread_cap(argv: list[str]) -> None:
    """Pin BLAS threads before numpy loads; default 1 keeps runs bit-reproducible."""
    threads = "1"
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    for var in _THREAD_ENV_VARS:
        os.environ.setdefault(var, threads)


@click.group()
@click.option("--url", envvar="GIDP_URL", default=None, help="Service URL; omit to run in-process.")
@click.option("--seed", default=0, show_default=True, help="Global seed (subcommand --seed overrides).")
@click.option("--threads", default=1, show_default=True, help="BLAS thread cap for in-process compute.")
@click.pass_context
def cli(ctx, url, seed, threads):
    """Point-cloud place recognition pipeline."""
    ctx.obj = {"client": ServiceClient(url), "seed": seed}


def _client(ctx) -> ServiceClient:
    return ctx.obj["client"]


def _seed(ctx, seed) -> int:
    return ctx.obj["seed"] if seed is None else seed


def _run(ctx, path: str, payload: dict) -> dict:
    try:
        return _client(ctx).post(path, payload)
    except ServiceError as exc:
        click.echo(f"error: {exc.detail}", err=True)
        sys.exit(1)


def _echo_stats(resp: dict) -> None:
    for s in resp.get("stats", []):
        loss = "nan" if s["mean_loss"] is None else f"{s['mean_loss']:.6g}"
        click.echo(f"epoch {s['epoch']}: loss={loss} ({s['extra']:.6g})")
    click.echo(f"checkpoint: {resp['ckpt_path']}")


@cli.command()
@click.option("--sites", default=60, show_default=True)
@click.option("--per-site", default=4, show_default=True)
@click.option("--spacing", default=120.0, show_default=True)
@click.option("--spread", default=3.0, show_default=True)
@click.option("--points", default=1024, show_default=True)
@click.option("--seed", default=None, type=int)
@click.option("--out", required=True, help="Output dataset directory.")
@click.pass_context
def synth(ctx, sites, per_site, spacing, spread, points, seed, out):
    """Generate a synthetic benchmark world."""
    resp = _run(ctx, "/synth", {
        "sites": sites, "per_site": per_site, "spacing": spacing, "spread": spread,
        "points": points, "seed": _seed(ctx, seed), "out_dir": out,
    })
    click.echo(f"wrote {resp['num_records']} submaps; manifest: {resp['manifest_path']}")


@cli.command()
@click.option("--data", required=True, help="Dataset directory.")
@click.option("--epochs", default=12, show_default=True)
@click.option("--batch", default=64, show_default=True)
@click.option("--lr", default=0.03, show_default=True)
@click.option("--momentum", default=0.999, show_default=True)
@click.option("--queue", default=2048, show_default=True)
@click.option("--neg-k", default=256, show_default=True)
@click.option("--tau", default=1.0, show_default=True)
@click.option("--include-positive", is_flag=True, help="Standard InfoNCE denominator.")
@click.option("--seed", default=None, type=int)
@click.option("--out", required=True, help="Output checkpoint path.")
@click.option("--stats-out", default=None, help="Per-epoch stats file.")
@click.pass_context
def pretrain(ctx, data, epochs, batch, lr, momentum, queue, neg_k, tau, include_positive, seed, out, stats_out):
    """Momentum-contrast pretraining of the encoder."""
    resp = _run(ctx, "/pretrain", {
        "data_dir": data, "epochs": epochs, "batch_size": batch, "learning_rate": lr,
        "momentum": momentum, "queue_capacity": queue, "num_negatives": neg_k,
        "temperature": tau, "include_positive_in_denominator": include_positive,
        "seed": _seed(ctx, seed), "out_ckpt": out, "stats_out": stats_out,
    })
    _echo_stats(resp)


@cli.command()
@click.option("--data", required=True, help="Dataset directory.")
@click.option("--init", default="random", show_default=True, help="'random' or a pretraining checkpoint.")
@click.option("--epochs", default=8, show_default=True)
@click.option("--batch", default=32, show_default=True)
@click.option("--lr", default=1e-3, show_default=True)
@click.option("--margin", default=0.2, show_default=True)
@click.option("--seed", default=None, type=int)
@click.option("--out", required=True, help="Output checkpoint path.")
@click.option("--stats-out", default=None, help="Per-epoch stats file.")
@click.pass_context
def train(ctx, data, init, epochs, batch, lr, margin, seed, out, stats_out):
    """Supervised triplet finetuning."""
    resp = _run(ctx, "/train", {
        "data_dir": data, "init": init, "epochs": epochs, "batch_size": batch,
        "learning_rate": lr, "margin": margin, "seed": _seed(ctx, seed),
        "out_ckpt": out, "stats_out": stats_out,
    })
    _echo_stats(resp)


@cli.command()
@click.option("--ckpt", required=True, help="Encoder checkpoint.")
@click.option("--data", required=True, help="Dataset directory.")
@click.option("--out", required=True, help="Output descriptor store (.ds).")
@click.option("--origin", default="database", show_default=True,
              type=click.Choice(["train", "database", "query"]))
@click.pass_context
def embed(ctx, ckpt, data, out, origin):
    """Compute global descriptors for a dataset."""
    resp = _run(ctx, "/embed", {"ckpt": ckpt, "data_dir": data, "out_path": out, "origin": origin})
    click.echo(f"wrote {resp['count']} descriptors (dim {resp['dim']}) to {resp['out_path']}")


@cli.command()
@click.option("--train", "train_path", required=True, help="Training descriptor store.")
@click.option("--db", required=True, help="Database descriptor store.")
@click.option("--queries", required=True, help="Query descriptor store.")
@click.option("--lambda", "lam", default=0.2, show_default=True)
@click.option("--k", default=5, show_default=True)
@click.option("--mode", default="inductive", show_default=True,
              type=click.Choice(["inductive", "transductive"]))
@click.option("--out-db", required=True)
@click.option("--out-q", required=True)
@click.pass_context
def enhance(ctx, train_path, db, queries, lam, k, mode, out_db, out_q):
    """Inverse-distance post-enhancement of query/database descriptors."""
    resp = _run(ctx, "/enhance", {
        "train_path": train_path, "database_path": db, "queries_path": queries,
        "lambda": lam, "neighbors": k, "mode": mode,
        "out_database": out_db, "out_queries": out_q,
    })
    click.echo(f"wrote {resp['out_database']} and {resp['out_queries']}")


@cli.command(name="eval")
@click.option("--db", required=True, help="Database descriptor store.")
@click.option("--queries", required=True, help="Query descriptor store.")
@click.option("--match-radius", default=25.0, show_default=True)
@click.option("--report", default=None, help="Write the plain-text report here.")
@click.pass_context
def eval_cmd(ctx, db, queries, match_radius, report):
    """Recall@1 and recall@top-1% over a query/database pair."""
    resp = _run(ctx, "/eval", {
        "database_path": db, "queries_path": queries,
        "match_radius": match_radius, "report_out": report,
    })
    click.echo(f"queries evaluated: {resp['num_queries_evaluated']}")
    click.echo(f"recall@1: {resp['recall_top1']:.2f}")
    click.echo(f"recall@top1% (cutoff {resp['top1pct_cutoff']}): {resp['recall_top1pct']:.2f}")
    if resp.get("report_path"):
        click.echo(f"report: {resp['report_path']}")


@cli.command()
@click.option("--config", "config_path", default=None, help="Flat section.key=value config file.")
@click.option("--out", required=True, help="Output directory for all artifacts.")
@click.option("--seed", default=None, type=int)
@click.option("--skip-pretrain", is_flag=True, default=None,
              help="Initialize finetuning randomly (ablation baseline).")
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
              help="Config override, e.g. --set enhance.lambda=0.3 (repeatable).")
@click.pass_context
def pipeline(ctx, config_path, out, seed, skip_pretrain, sets):
    """Full run: synth, pretrain, finetune, embed, enhance, eval."""
    overrides = {}
    for item in sets:
        if "=" not in item:
            click.echo(f"error: --set expects KEY=VALUE, got {item!r}", err=True)
            sys.exit(1)
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    config_text = None
    if config_path:
        try:
            with open(config_path) as f:
                config_text = f.read()
        except OSError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
    resp = _run(ctx, "/pipeline", {
        "out_dir": out, "config_text": config_text, "overrides": overrides,
        "seed": _seed(ctx, seed), "skip_pretrain": skip_pretrain,
    })
    for mode, rep in resp["reports"].items():
        click.echo(
            f"{mode}: recall@1={rep['recall_top1']:.2f} "
            f"recall@top1%={rep['recall_top1pct']:.2f} ({rep['path']})"
        )
    click.echo(f"artifacts: {resp['out_dir']}")


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Host the service over HTTP."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


def main() -> None:
    _apply_thread_cap(sys.argv[1:])
    cli(prog_name="gidp")


if __name__ == "__main__":
    main()
