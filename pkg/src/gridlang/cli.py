"""Command-line surface: gen-data, train, eval, infer, render.

Every command is driven by a YAML config plus a handful of override flags
and is deterministic given (config, seed, checkpoint). Exit codes: 0 ok,
2 bad config, 3 training divergence, 4 checkpoint/config mismatch,
5 bad usage (unknown task).
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np

from .codec import Vocabulary, parse_response, CodecError
from .config import ConfigError, RunConfig, dump_config, load_config
from .decode import decode_grid, decode_single
from .evalkit import (eval_depth_normals, eval_detection, eval_refer,
                      eval_semseg, postprocess)
from .model import GridSpec, Model
from .synth import GenParams, generate, read_shard, write_shard
from .train import NonFiniteLoss, TrainParams, train_loop

TASKS = ("detect", "instseg", "semseg", "refer", "depth", "normals")

EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_USAGE = 2, 3, 4, 5


def _load_config(path: str | None, seed: int | None) -> RunConfig:
    try:
        cfg = load_config(path) if path else RunConfig()
        if not path:
            cfg.validate()
        if seed is not None:
            cfg.seed = seed
        return cfg
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)


def _gen_params(cfg: RunConfig) -> GenParams:
    h, w = cfg.model.image_size
    d = cfg.data
    return GenParams(height=h, width=w, min_shapes=d.min_shapes,
                     max_shapes=d.max_shapes, min_scale=d.min_scale,
                     max_scale=d.max_scale, max_rotation=d.max_rotation)


def _load_model(cfg: RunConfig, checkpoint: str) -> Model:
    vocab = Vocabulary()
    try:
        return Model.load(checkpoint, cfg.model, vocab)
    except ValueError as e:
        click.echo(f"checkpoint mismatch: {e}", err=True)
        sys.exit(EXIT_MISMATCH)
    except OSError as e:
        click.echo(f"cannot read checkpoint: {e}", err=True)
        sys.exit(EXIT_MISMATCH)


@click.group()
def main() -> None:
    """Grid-prompted multimodal toy model tooling."""


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
@click.option("--count", type=int, default=None)
def cmd_gen_data(config_path, seed, out, count):
    """Write a JSONL shard of synthetic scenes plus meta.json."""
    cfg = _load_config(config_path, seed)
    params = _gen_params(cfg)
    n = count if count is not None else cfg.data.count
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    samples = [generate(cfg.seed * 1_000_000 + i, params) for i in range(n)]
    write_shard(out / "shard.jsonl", samples, params)
    click.echo(f"wrote {n} records to {out / 'shard.jsonl'}")


@main.command("train")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
@click.option("--data", "data_path", type=click.Path(), default=None,
              help="shard to train on; generated on the fly when omitted")
@click.option("--dry-run", is_flag=True, default=False)
def cmd_train(config_path, seed, out, data_path, dry_run):
    """Optimize a model; writes checkpoints, loss CSV, and figures."""
    cfg = _load_config(config_path, seed)
    if dry_run:
        click.echo("config ok")
        return
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    vocab = Vocabulary()
    vocab.save(out / "vocab.txt")
    if data_path:
        dataset = read_shard(data_path)
    else:
        params = _gen_params(cfg)
        dataset = [generate(cfg.seed * 1_000_000 + i, params)
                   for i in range(cfg.data.count)]
    model = Model(cfg.model, vocab, seed=cfg.seed)
    tp = dataclasses.replace(cfg.train, seed=cfg.seed)
    try:
        final = train_loop(model, dataset, tp, out)
    except NonFiniteLoss as e:
        click.echo(f"training diverged: {e}", err=True)
        sys.exit(EXIT_DIVERGED)
    from .render import render_loss_curves
    render_loss_curves(out / "loss.csv", out / "loss.png")
    click.echo(f"final checkpoint: {final}")


def _eval_once(cfg: RunConfig, model: Model, dataset, task: str) -> dict:
    h, w = cfg.model.image_size
    grid = GridSpec(cfg.decode.grid_k, h, w,
                    budget=cfg.decode.grid_budget or None)
    if task == "detect":
        rep = eval_detection(model, dataset, grid, beam=cfg.decode.beam,
                             length_normalize=cfg.decode.length_normalize)
    elif task == "instseg":
        rep = eval_detection(model, dataset, grid, beam=cfg.decode.beam,
                             length_normalize=cfg.decode.length_normalize,
                             task_word="outline", use_mask=True)
    elif task == "semseg":
        rep = eval_semseg(model, dataset)
    elif task == "refer":
        rep = eval_refer(model, dataset, beam=cfg.decode.beam)
    else:  # depth / normals
        return eval_depth_normals(model, dataset)
    rep.validate()
    return json.loads(rep.to_json())


@main.command("eval")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--task", default="detect")
@click.option("--beam", type=int, default=None)
@click.option("--mask-tokens", "mask_tokens", type=int, default=None,
              help="number of mask tokens N^2 (1, 4, 16 or 25)")
@click.option("--grid", "grid_k", type=int, default=None)
@click.option("--limit", type=int, default=None,
              help="evaluate only the first N samples")
def cmd_eval(config_path, seed, checkpoint, data_path, out, task, beam,
             mask_tokens, grid_k, limit):
    """Compute a metric report (JSON + PNG figure) for one task."""
    cfg = _load_config(config_path, seed)
    if task not in TASKS:
        click.echo(f"unknown task {task!r}; expected one of {TASKS}", err=True)
        sys.exit(EXIT_USAGE)
    if beam is not None:
        cfg.decode.beam = beam
    if grid_k is not None:
        cfg.decode.grid_k = grid_k
        cfg.decode.grid_budget = 0
    if mask_tokens is not None:
        side = int(round(mask_tokens ** 0.5))
        if side * side != mask_tokens:
            click.echo("--mask-tokens must be a perfect square", err=True)
            sys.exit(EXIT_USAGE)
        cfg.model.mask_tokens_side = side
    try:
        cfg.validate()
    except (ConfigError, ValueError) as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    model = _load_model(cfg, checkpoint)
    dataset = read_shard(data_path)
    if limit:
        dataset = dataset[:limit]
    metrics = _eval_once(cfg, model, dataset, task)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"metrics_{task}.json"
    report_path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    from .render import render_metric_bars
    render_metric_bars(metrics, out / f"metrics_{task}.png", title=task)
    click.echo(json.dumps(metrics, sort_keys=True))


def _task_prompt(vocab: Vocabulary, task: str, sample) -> list[int]:
    from .codec import CLASS_NAMES, COLOR_NAMES
    from .synth import instance_color
    if task == "detect":
        return vocab.encode_all(["detect"])
    if task == "instseg":
        return vocab.encode_all(["outline"])
    if task == "semseg":
        cid = sample.boxes[0].class_id
        return vocab.encode_all(["segment", CLASS_NAMES[cid]])
    if task == "refer":
        cid = sample.boxes[0].class_id
        color = instance_color(sample, 0)
        return vocab.encode_all(["refer", "the", COLOR_NAMES[color],
                                 CLASS_NAMES[cid]])
    return vocab.encode_all([task])  # depth / normals


def _run_inference(cfg: RunConfig, model: Model, sample, task: str):
    vocab = model.vocab
    h, w = cfg.model.image_size
    prompt = _task_prompt(vocab, task, sample)
    if task in ("detect", "instseg"):
        grid = GridSpec(cfg.decode.grid_k, h, w,
                        budget=cfg.decode.grid_budget or None)
        results, prefix = decode_grid(model, prompt, sample.image, grid,
                                      beam_width=cfg.decode.beam,
                                      length_normalize=cfg.decode.length_normalize)
    else:
        res, prefix = decode_single(model, prompt, sample.image,
                                    beam_width=cfg.decode.beam)
        results = [res]
    return results, prefix


@main.command("infer")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=0)
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--task", default="detect")
@click.option("--beam", type=int, default=None)
def cmd_infer(config_path, seed, checkpoint, task, beam):
    """Decode one generated scene and print raw + parsed sequences."""
    cfg = _load_config(config_path, None)
    if task not in TASKS:
        click.echo(f"unknown task {task!r}; expected one of {TASKS}", err=True)
        sys.exit(EXIT_USAGE)
    if beam is not None:
        cfg.decode.beam = beam
    model = _load_model(cfg, checkpoint)
    sample = generate(seed, _gen_params(cfg))
    results, _ = _run_inference(cfg, model, sample, task)
    n_mask = cfg.model.mask_tokens_side ** 2
    for res in results:
        text = " ".join(model.vocab.decode(res.tokens))
        tag = f"grid {res.grid_index}" if res.grid_index >= 0 else "response"
        click.echo(f"[{tag}] {text}")
        try:
            pred = parse_response(res.tokens, n_mask, model.vocab)
            click.echo(f"  parsed: kind={pred.kind} class={pred.class_id} "
                       f"box={pred.quant_box} score={res.first_prob:.3f}")
        except CodecError as e:
            click.echo(f"  parse error at token {e.index}: {e}")


@main.command("render")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=0)
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--task", default="detect")
@click.option("--beam", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
def cmd_render(config_path, seed, checkpoint, task, beam, out):
    """Decode one generated scene and write a PNG overlay."""
    from .render import render_dense_map, render_overlay
    from .retrieval import predict_depth, predict_normals
    from .decode import mask_query_hiddens
    from .synth import DEPTH_MAX, DEPTH_MIN
    cfg = _load_config(config_path, None)
    if task not in TASKS:
        click.echo(f"unknown task {task!r}; expected one of {TASKS}", err=True)
        sys.exit(EXIT_USAGE)
    if beam is not None:
        cfg.decode.beam = beam
    model = _load_model(cfg, checkpoint)
    sample = generate(seed, _gen_params(cfg))
    results, prefix = _run_inference(cfg, model, sample, task)
    out = Path(out)
    h, w = cfg.model.image_size
    if task in ("depth", "normals"):
        vocab = model.vocab
        res = results[0]
        if task == "depth":
            rows = [i + 1 for i, t in enumerate(res.tokens[:-1])
                    if t == vocab.depth]
            if rows and rows[0] < len(res.hiddens):
                field = predict_depth(res.hiddens[rows[0]], prefix.h_v,
                                      DEPTH_MIN, DEPTH_MAX, size=(h, w))
            else:
                field = np.zeros((h, w))
        else:
            ids = vocab.normal_xyz
            rows = {t: i + 1 for i, t in enumerate(res.tokens[:-1])
                    if t in ids}
            if len(rows) == 3 and max(rows.values()) < len(res.hiddens):
                q = np.stack([res.hiddens[rows[t]] for t in ids])
                field = predict_normals(q, prefix.h_v, size=(h, w))
            else:
                field = np.zeros((h, w, 3))
        render_dense_map(field, out, title=task)
    else:
        post = postprocess(model, results, prefix,
                           use_mask=task in ("instseg", "semseg", "refer"))
        grid = None
        status = None
        if task in ("detect", "instseg"):
            grid = GridSpec(cfg.decode.grid_k, h, w)
            status = [False] * grid.m
            for res in results:
                if res.grid_index >= 0:
                    status[res.grid_index] = res.positive
        render_overlay(sample.image, post.detections, out, grid=grid,
                       grid_positive=status, title=task)
    click.echo(f"wrote {out}")


if __name__ == "__main__":
    main()
