"""Command-line entry point: ``doremi3d <command>``."""

from __future__ import annotations

import logging
import statistics
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from doremi3d.data import Corpus, generate_scene, load_manifest, save_cloud, save_manifest, standard_corpus
from doremi3d.errors import DoremiError
from doremi3d.metrics import RoutingTrace, alpha_metric, expert_utilization, write_utilization_csv
from doremi3d.pretrain import PretrainConfig, pretrain, save_pretrained
from doremi3d.train import (
    SceneCache,
    TrainConfig,
    bench,
    evaluate,
    finetune,
    joint_train,
    load_model,
    plant_domain_route,
    run_ablation,
    save_model,
    write_report,
)

log = logging.getLogger("doremi3d")


def _common(f):
    f = click.option("--out", "out", type=click.Path(path_type=Path), default=None,
                     help="Output directory (or file for pretrain).")(f)
    f = click.option("--seed", type=int, default=None, help="Run seed; overrides the config.")(f)
    f = click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path), default=None,
                     help="YAML training config.")(f)
    return f


def _resolve(ctx: click.Context, config_path, seed, out) -> tuple[TrainConfig, Path | None]:
    g = ctx.obj or {}
    config_path = config_path or g.get("config")
    seed = seed if seed is not None else g.get("seed")
    out = out or g.get("out")
    config = TrainConfig.from_yaml(config_path) if config_path else TrainConfig()
    if seed is not None:
        config = replace(config, seed=seed)
    return config, out


def _corpus(config: TrainConfig, corpus_path) -> Corpus:
    if corpus_path:
        return load_manifest(corpus_path)
    return load_manifest(config.corpus) if config.corpus else standard_corpus()


def _outdir(out: Path | None, default: str) -> Path:
    path = out or Path(default)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _parse_domains(values, corpus: Corpus, include_heldout: bool) -> list[int]:
    if values:
        return [int(v) for v in values]
    domains = corpus.domains if include_heldout else corpus.training_domains
    return [d.domain_id for d in domains]


@click.group()
@click.option("--config", "config", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(path_type=Path), default=None)
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config, seed, out, verbose):
    """Domain-routed mixture-of-experts segmentation on synthetic point clouds."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"config": config, "seed": seed, "out": out}


@main.command("gen-data")
@click.option("--train-scenes", type=int, default=16, show_default=True)
@click.option("--eval-scenes", type=int, default=6, show_default=True)
@click.option("--write-clouds", is_flag=True, help="Also write every cloud as a binary file.")
@_common
@click.pass_context
def gen_data(ctx, train_scenes, eval_scenes, write_clouds, config_path, seed, out):
    """Write a corpus manifest (and optionally its clouds)."""
    out = _outdir(out or (ctx.obj or {}).get("out"), "data")
    corpus = standard_corpus(train_scenes, eval_scenes)
    save_manifest(corpus, out / "manifest.yaml")
    n = 0
    if write_clouds:
        for split in corpus.splits:
            for spec in corpus.domains:
                for s in corpus.seeds(split):
                    save_cloud(generate_scene(spec, s), out / f"{split}_d{spec.domain_id}_{s}.cloud")
                    n += 1
    click.echo(f"manifest: {out / 'manifest.yaml'} ({len(corpus.domains)} domains, {n} cloud files)")


@main.command("pretrain")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--epochs", type=int, default=50, show_default=True)
@_common
@click.pass_context
def pretrain_cmd(ctx, corpus_path, epochs, config_path, seed, out):
    """Teacher-student pretraining of the backbone; writes a checkpoint."""
    config, out = _resolve(ctx, config_path, seed, out)
    corpus = _corpus(config, corpus_path)
    out = out or Path("pretrained.ckpt")
    if out.suffix != ".ckpt":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "pretrained.ckpt"
    pcfg = PretrainConfig(epochs=epochs)
    clouds = corpus.scenes("train")
    student, _, history = pretrain(clouds, pcfg, config.seed, corpus.voxel_size_m, corpus.patch_extent_m,
                                   progress=lambda e, l: log.info("epoch %d loss %.5f", e, l))
    digest = save_pretrained(out, student, pcfg, {"seed": config.seed, "history": history})
    click.echo(f"pretrained checkpoint {out} sha256={digest} final_loss={history[-1]:.5f}")


@main.command("train")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--variant", type=click.Choice(["baseline", "re", "re-dsr", "full", "custom"]), default=None)
@_common
@click.pass_context
def train_cmd(ctx, corpus_path, epochs, variant, config_path, seed, out):
    """Joint multi-domain training; writes model.ckpt, metrics.yaml and utilization.csv."""
    config, out = _resolve(ctx, config_path, seed, out)
    if epochs is not None:
        config = replace(config, epochs=epochs)
    if variant is not None:
        config = replace(config, variant=variant)
    corpus = _corpus(config, corpus_path)
    out = _outdir(out, "run")
    result = joint_train(config, corpus, progress=lambda e, l: log.info("epoch %d loss %.6f", e, l))
    digest = save_model(out / "model.ckpt", result.model, config)
    write_report(out / "metrics.yaml", result.report())
    write_utilization_csv(expert_utilization(result.evaluation.trace), out / "utilization.csv")
    s = result.evaluation.scores
    click.echo(f"{config.variant} seed={config.seed} mIoU={s.miou:.4f} mAcc={s.macc:.4f} "
               f"allAcc={s.allacc:.4f} checkpoint sha256={digest}")


@main.command("finetune")
@click.option("--model", "model_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--domain", type=int, default=None, help="Target domain; defaults to the first held-out one.")
@click.option("--epochs", type=int, default=10, show_default=True)
@_common
@click.pass_context
def finetune_cmd(ctx, model_path, corpus_path, domain, epochs, config_path, seed, out):
    """Adapt a trained model to one domain, reporting zero-shot and tuned scores."""
    model, saved = load_model(model_path)
    g = ctx.obj or {}
    config, out = _resolve(ctx, config_path, seed, out)
    if config_path is None and g.get("config") is None:
        explicit = seed if seed is not None else g.get("seed")
        config = saved if explicit is None else replace(saved, seed=explicit)
    corpus = _corpus(config, corpus_path)
    domain = domain if domain is not None else (corpus.heldout[0] if corpus.heldout else corpus.domains[0].domain_id)
    unseen = domain not in model.domain_ids
    cache = SceneCache()
    eval_scenes = cache.split(corpus, config.eval_split, [domain], model.backbone.config.n_stages)
    zero = evaluate(model, eval_scenes, unseen=unseen)
    tuned, history = finetune(config, model, corpus, domain, epochs, cache, unseen=unseen)
    after = evaluate(tuned, eval_scenes, unseen=unseen)
    out = _outdir(out, "finetune")
    save_model(out / "model.ckpt", tuned, config)
    write_report(out / "metrics.yaml", {"domain": domain, "unseen": unseen, "epochs": epochs,
                                        "history": history, "zero_shot": zero.to_dict(),
                                        "finetuned": after.to_dict()})
    click.echo(f"domain {domain}: zero-shot mIoU={zero.scores.miou:.4f} "
               f"finetuned mIoU={after.scores.miou:.4f}")


@main.command("eval")
@click.option("--model", "model_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--split", default="eval", show_default=True)
@click.option("--domain", "domains", type=int, multiple=True)
@_common
@click.pass_context
def eval_cmd(ctx, model_path, corpus_path, split, domains, config_path, seed, out):
    """Segmentation metrics of a trained model."""
    model, saved = load_model(model_path)
    corpus = _corpus(saved, corpus_path)
    ids = _parse_domains(domains, corpus, include_heldout=False)
    unseen = any(d not in model.domain_ids for d in ids)
    scenes = SceneCache().split(corpus, split, ids, model.backbone.config.n_stages)
    result = evaluate(model, scenes, unseen=unseen)
    out = out or (ctx.obj or {}).get("out")
    if out:
        out.mkdir(parents=True, exist_ok=True)
        write_report(out / "eval.yaml", result.to_dict())
    s = result.scores
    click.echo(f"mIoU={s.miou:.4f} mAcc={s.macc:.4f} allAcc={s.allacc:.4f} loss={result.mean_loss:.4f}")


@main.command("analyze-experts")
@click.option("--model", "model_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--traces", "trace_paths", type=click.Path(exists=True, path_type=Path), multiple=True,
              help="Existing routing-trace CSVs to merge instead of running a model.")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--split", default="eval", show_default=True)
@click.option("--domain", "domains", type=int, multiple=True)
@click.option("--layer", default=None, help="Restrict histograms to one layer, e.g. s0b1.")
@_common
@click.pass_context
def analyze_experts(ctx, model_path, trace_paths, corpus_path, split, domains, layer, config_path, seed, out):
    """Per-domain expert utilization histograms and the balance metric."""
    out = _outdir(out or (ctx.obj or {}).get("out"), "experts")
    if trace_paths:
        traces = [RoutingTrace.read_csv(p) for p in trace_paths]
    elif model_path is not None:
        model, saved = load_model(model_path)
        corpus = _corpus(saved, corpus_path)
        ids = _parse_domains(domains, corpus, include_heldout=False)
        unseen = any(d not in model.domain_ids for d in ids)
        scenes = SceneCache().split(corpus, split, ids, model.backbone.config.n_stages)
        result = evaluate(model, scenes, unseen=unseen)
        result.trace.write_csv(out / "traces.csv")
        traces = [result.trace]
    else:
        raise click.UsageError("give --model or --traces")
    if layer is not None:
        traces = [t.select(layer) for t in traces]
    hist = expert_utilization(traces)
    if not hist:
        raise click.ClickException("no routed layers in the traces")
    write_utilization_csv(hist, out / "utilization.csv")
    merged = RoutingTrace(n_experts=traces[0].n_experts)
    for t in traces:
        merged.extend(t)
    alphas = {}
    for name in merged.layers():
        alphas[name] = alpha_metric(merged.select(name).expert_counts())
    write_report(out / "alpha.yaml", {"per_layer": alphas,
                                      "mean": float(np.mean(list(alphas.values())))})
    for d, h in hist.items():
        click.echo(f"domain {d}: " + " ".join(f"{v:.3f}" for v in h) + f"  (top expert {int(np.argmax(h))})")
    click.echo(f"alpha mean={np.mean(list(alphas.values())):.4f}")


@main.command("plant-route")
@click.option("--model", "model_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--domain", type=int, required=True)
@click.option("--expert", type=int, required=True)
@click.option("--steps", type=int, default=40, show_default=True)
@click.option("--step-size", type=float, default=10.0, show_default=True,
              help="Length of each normalised embedding step.")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, path_type=Path), default=None)
@_common
@click.pass_context
def plant_route(ctx, model_path, domain, expert, steps, step_size, corpus_path, config_path, seed, out):
    """Diagnostic: steer one domain's embedding so it routes to one expert."""
    model, saved = load_model(model_path)
    corpus = _corpus(saved, corpus_path)
    scenes = SceneCache().split(corpus, saved.train_split, [domain], model.backbone.config.n_stages)[domain]
    plant_domain_route(model, domain, expert, scenes, steps, step_size)
    out = _outdir(out or (ctx.obj or {}).get("out"), "planted")
    digest = save_model(out / "model.ckpt", model, saved)
    click.echo(f"planted domain {domain} -> expert {expert}: {out / 'model.ckpt'} sha256={digest}")


@main.command("bench")
@click.option("--model", "model_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--split", default="eval", show_default=True)
@click.option("--passes", type=int, default=5, show_default=True)
@_common
@click.pass_context
def bench_cmd(ctx, model_path, corpus_path, split, passes, config_path, seed, out):
    """Activated parameters and throughput."""
    model, saved = load_model(model_path)
    corpus = _corpus(saved, corpus_path)
    ids = [d.domain_id for d in corpus.training_domains]
    scenes = SceneCache().split(corpus, split, ids, model.backbone.config.n_stages)
    flat = [s for d in sorted(scenes) for s in scenes[d]]
    report = bench(model, flat, passes)
    out = out or (ctx.obj or {}).get("out")
    if out:
        out.mkdir(parents=True, exist_ok=True)
        write_report(out / "bench.yaml", report)
    click.echo(f"total params={report['total']} activated={report['activated']:.1f} "
               f"throughput={report['scenes_per_second']:.2f} scenes/s")


@main.command("ablate")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--seeds", default="0,1,2,3,4", show_default=True)
@click.option("--variants", default="baseline,re,re-dsr,full", show_default=True)
@_common
@click.pass_context
def ablate(ctx, corpus_path, seeds, variants, config_path, seed, out):
    """The four-row ablation grid under several seeds."""
    config, out = _resolve(ctx, config_path, seed, out)
    corpus = _corpus(config, corpus_path)
    seed_list = [int(s) for s in seeds.split(",") if s]
    names = [v for v in variants.split(",") if v]
    results = run_ablation(config, names, seed_list, corpus,
                           progress=lambda v, s, r: log.info("%s seed %d mIoU %.4f", v, s,
                                                             r.evaluation.scores.miou))
    rows = {}
    for v in names:
        mious = [results[(v, s)].evaluation.scores.miou for s in seed_list]
        alphas = [results[(v, s)].evaluation.alpha()["mean"] for s in seed_list]
        rows[v] = {"mIoU": mious, "median_mIoU": statistics.median(mious),
                   "alpha": alphas, "median_alpha": statistics.median(alphas) if None not in alphas else None}
    out = _outdir(out, "ablation")
    write_report(out / "ablation.yaml", {"seeds": seed_list, "config": config.to_dict(), "rows": rows})
    for v in names:
        click.echo(f"{v:10s} median mIoU={rows[v]['median_mIoU'] * 100:.2f}")


def run() -> None:
    try:
        main(standalone_mode=True)
    except DoremiError as exc:
        raise SystemExit(f"error: {exc}") from exc


if __name__ == "__main__":
    run()
