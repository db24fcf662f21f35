"""Command-line surface: data generation, training, evaluation, verification.

Every command that writes an output directory also writes a ``config_echo.json``
containing the fully-resolved parameters, so any run can be replayed exactly.
Exit codes: 0 success, 1 assertion/acceptance failure, 2 usage/config error.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import evaluate, figures, mi
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import World, WorldConfig
from .dataio import read_split, world_config_to_dict, write_split
from .encoders import TextEncoderConfig, VisionEncoderConfig
from .errors import (CheckpointFormatError, ConfigError, VolalignError)
from .gradcheck import run_standard_checks
from .losses import Temperature
from .trainer import LOSS_MODES, TrainConfig, Trainer, lr_at


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, CheckpointFormatError) as e:
            _fail(str(e), 2)
        except AssertionError as e:
            _fail(str(e), 1)
        except VolalignError as e:
            _fail(str(e), 1)

    return wrapper


def _load_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def _build(cls, section: dict, name: str):
    """Dataclass construction with unknown-key detection."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown {name} config keys: {sorted(unknown)}")
    fixed = dict(section)
    for key in ("volume_shape", "patch_size", "anomaly_types", "betas",
                "normal_templates", "filler_sentences"):
        if key in fixed and isinstance(fixed[key], list):
            fixed[key] = tuple(fixed[key])
    if "blob_params" in fixed:
        fixed["blob_params"] = {k: tuple(v) for k, v in fixed["blob_params"].items()}
    try:
        return cls(**fixed)
    except TypeError as e:
        raise ConfigError(f"bad {name} config: {e}") from None


def _check_sections(cfg: dict, allowed, where: str):
    unknown = set(cfg) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown top-level keys in {where}: {sorted(unknown)}")


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, payload: dict):
    with open(out / "config_echo.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def _write_metrics(out: Path, reports: list):
    rows = [row for rep in reports for row in rep.rows()]
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task", "disease", "metric", "value"])
        w.writerows(rows)
    with open(out / "metrics.json", "w") as f:
        json.dump({rep.task: rep.summary() for rep in reports}, f,
                  indent=2, sort_keys=True)
    for task, disease, metric, value in rows:
        click.echo(f"{task}\t{disease}\t{metric}\t{value}")


@click.group()
def main():
    """Multi-scale volume/report alignment toolkit."""


# ---------------------------------------------------------------------------


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True, help="JSON with optional 'world' section and "
              "'n_train'/'n_test' counts.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--force", is_flag=True, help="Allow writing into a non-empty directory.")
@guarded
def gen_data(config_path, out_dir, force):
    """Materialize deterministic train/test splits."""
    cfg = _load_json(config_path)
    _check_sections(cfg, {"world", "n_train", "n_test"}, config_path)
    world_cfg = _build(WorldConfig, cfg.get("world", {}), "world")
    n_train = int(cfg.get("n_train", 1000))
    n_test = int(cfg.get("n_test", 200))
    out = _prepare_out(out_dir, force)
    world = World(world_cfg)
    train, test = world.build_splits(n_train, n_test)
    write_split(out / "train.mv3c", world, train)
    write_split(out / "test.mv3c", world, test)
    _echo_config(out, {"world": world_config_to_dict(world_cfg),
                       "n_train": n_train, "n_test": n_test})
    click.echo(f"wrote {n_train} train / {n_test} test samples to {out}")


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="JSON with optional 'train'/'vision'/'text' sections.")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(LOSS_MODES), default=None,
              help="Override the configured loss mode.")
@click.option("--steps", type=int, default=None, help="Override total steps.")
@click.option("--seed", type=int, default=None, help="Override the run seed.")
@click.option("--resume", "resume_path", type=click.Path(exists=True),
              help="Checkpoint to continue from.")
@click.option("--stop-after", type=int, default=None,
              help="Checkpoint after this many total steps (resume later); "
              "the schedule still targets the configured step count.")
@click.option("--force", is_flag=True)
@guarded
def train(config_path, data_dir, out_dir, mode, steps, seed, resume_path,
          stop_after, force):
    """Run the contrastive training loop and write a checkpoint + loss CSV."""
    out = _prepare_out(out_dir, force)
    world, samples = read_split(Path(data_dir) / "train.mv3c")
    if resume_path:
        trainer = load_checkpoint(resume_path)
        if trainer.text_cfg.vocab_size != len(world.vocab):
            raise ConfigError("checkpoint vocabulary does not match the data")
    else:
        cfg = _load_json(config_path) if config_path else {}
        _check_sections(cfg, {"train", "vision", "text"},
                        config_path or "<defaults>")
        overrides = dict(cfg.get("train", {}))
        if mode is not None:
            overrides["loss_mode"] = mode
        if steps is not None:
            overrides["steps"] = steps
            if "warmup_steps" not in overrides:
                overrides["warmup_steps"] = max(1, min(
                    TrainConfig.warmup_steps, steps // 10))
        if seed is not None:
            overrides["seed"] = seed
        train_cfg = _build(TrainConfig, overrides, "train")
        vision_cfg = _build(VisionEncoderConfig, {
            "volume_shape": tuple(world.cfg.volume_shape),
            **cfg.get("vision", {}),
        }, "vision")
        text_cfg = _build(TextEncoderConfig, {
            "vocab_size": len(world.vocab), **cfg.get("text", {}),
        }, "text")
        trainer = Trainer(world, train_cfg, vision_cfg, text_cfg)

    history = []

    def on_step(tr, bundle):
        row = {"step": tr.step_count - 1, **bundle.as_dict(),
               "lr": lr_at(tr.step_count - 1, tr.cfg),
               "tau": tr.temp.tau}
        history.append(row)
        if tr.step_count % 200 == 0 or tr.step_count == tr.cfg.steps:
            click.echo(f"step {tr.step_count}/{tr.cfg.steps} "
                       f"total={bundle.total:.4f} tau={tr.temp.tau:.4f}")

    if stop_after is not None:
        if not trainer.step_count < stop_after <= trainer.cfg.steps:
            raise ConfigError(
                f"--stop-after must lie in ({trainer.step_count}, "
                f"{trainer.cfg.steps}]")
        trainer.run(samples, steps=stop_after - trainer.step_count,
                    on_step=on_step)
    else:
        trainer.run(samples, on_step=on_step)
    save_checkpoint(out / "checkpoint.mv3d", trainer)
    fields = ["step", *history[0].keys()] if history else ["step"]
    fields = list(dict.fromkeys(fields))
    with open(out / "loss.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(history)
    figures.plot_loss_curves(history, out / "loss_curves.png",
                             title=f"loss ({trainer.cfg.loss_mode})")
    _echo_config(out, {"train": dataclasses.asdict(trainer.cfg),
                       "vision": dataclasses.asdict(trainer.vision_cfg),
                       "text": dataclasses.asdict(trainer.text_cfg),
                       "world": world_config_to_dict(world.cfg),
                       "data": str(data_dir), "resume": resume_path})
    click.echo(f"checkpoint written to {out / 'checkpoint.mv3d'}")


EVAL_TASKS = ("zero_shot_global", "zero_shot_local", "report_retrieval",
              "region_grounding")


@main.command("eval")
@click.option("--checkpoint", "ckpt_path", required=True,
              type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--tasks", default="all",
              help=f"'all' or comma-separated from {EVAL_TASKS}.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--crop-emulation", is_flag=True,
              help="Local task: crop-and-pad volumes instead of the region pathway.")
@click.option("--force", is_flag=True)
@guarded
def eval_cmd(ckpt_path, data_dir, tasks, out_dir, crop_emulation, force):
    """Evaluate a checkpoint on the held-out split."""
    selected = EVAL_TASKS if tasks == "all" else tuple(
        t.strip() for t in tasks.split(","))
    unknown = set(selected) - set(EVAL_TASKS)
    if unknown:
        raise ConfigError(f"unknown eval tasks: {sorted(unknown)}")
    out = _prepare_out(out_dir, force)
    trainer = load_checkpoint(ckpt_path)
    world, samples = read_split(Path(data_dir) / "test.mv3c")
    if trainer.text_cfg.vocab_size != len(world.vocab):
        raise ConfigError("checkpoint vocabulary does not match the data")
    model = trainer.model
    reports = []
    for task in selected:
        if task == "zero_shot_global":
            reports.append(evaluate.zero_shot_global(model, world, samples))
        elif task == "zero_shot_local":
            reports.append(evaluate.zero_shot_local(
                model, world, samples, use_crop_emulation=crop_emulation))
        elif task == "report_retrieval":
            reports.append(evaluate.report_retrieval(model, world, samples))
        elif task == "region_grounding":
            reports.append(evaluate.region_grounding(model, world, samples))
    _write_metrics(out, reports)
    cls = {rep.task: rep.summary() for rep in reports
           if rep.per_disease_auc}
    if cls:
        figures.plot_metric_bars(cls, "macro_auc", out / "auc_bars.png",
                                 title="zero-shot AUC")
    _echo_config(out, {"checkpoint": str(ckpt_path), "data": str(data_dir),
                       "tasks": list(selected),
                       "crop_emulation": crop_emulation})


@main.command("mi-check")
@click.option("--batches", default=2000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Optional directory for the bound-history figure.")
@guarded
def mi_check(batches, seed, out_dir):
    """Verify the InfoNCE lower bound and the chain-rule inequality."""
    rng = np.random.default_rng(seed)
    rows = []

    dep = mi.infonce_bound_check(mi.diagonal_joint(8), n=8,
                                 n_batches=batches, seed=seed)
    dep_ok = (dep.log_n - 0.3 <= dep.bound <= dep.log_n + 1e-6
              and dep.bound <= dep.true_mi + 0.05)
    rows.append(("dependent K=8", dep.true_mi, dep.bound, dep.slack, dep_ok))

    ind = mi.infonce_bound_check(
        mi.independent_joint(np.ones(8), np.ones(8)), n=8,
        n_batches=batches, seed=seed)
    ind_ok = ind.bound < 0.1 and ind.bound <= ind.log_n + 1e-6
    rows.append(("independent 8x8", ind.true_mi, ind.bound, ind.slack, ind_ok))

    worst_margin = np.inf
    for _ in range(200):
        shape = tuple(rng.integers(2, 7, size=4))
        res = mi.chain_rule_check(mi.random_joint(rng, shape))
        worst_margin = min(worst_margin, res.margin)
    chain_ok = worst_margin >= -1e-9
    rows.append(("chain rule x200", float("nan"), float("nan"),
                 worst_margin, chain_ok))

    click.echo(f"{'case':<18} {'true MI':>9} {'bound':>9} {'slack/margin':>13} pass")
    for name, true_mi, bound, slack, ok in rows:
        click.echo(f"{name:<18} {true_mi:>9.4f} {bound:>9.4f} {slack:>13.4f} "
                   f"{'yes' if ok else 'NO'}")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        figures.plot_bound_history(dep.history, dep.true_mi, dep.log_n,
                                   out / "bound_history.png")
        _echo_config(out, {"batches": batches, "seed": seed})
    assert all(r[4] for r in rows), "mutual-information checks failed"


@main.command("grad-check")
@click.option("--checks", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--tol", default=1e-5, show_default=True)
@guarded
def grad_check(checks, seed, tol):
    """Randomized finite-difference sweep over every autodiff op."""
    done, worst = run_standard_checks(n_checks=checks, seed=seed, tol=tol)
    click.echo(f"{done} gradient checks passed (worst rel err {worst:.3g} < {tol})")


@main.command("attn-export")
@click.option("--checkpoint", "ckpt_path", required=True,
              type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--index", default=0, show_default=True, help="Test-sample index.")
@click.option("--region", type=int, default=None,
              help="Region index for masked-mode export (default: unmasked).")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--force", is_flag=True)
@guarded
def attn_export(ckpt_path, data_dir, index, region, out_dir, force):
    """Export the final-block [CLS] attention grid plus a rendered figure."""
    out = _prepare_out(out_dir, force)
    trainer = load_checkpoint(ckpt_path)
    world, samples = read_split(Path(data_dir) / "test.mv3c")
    if not 0 <= index < len(samples):
        raise ConfigError(f"sample index {index} out of range 0..{len(samples) - 1}")
    sample = samples[index]
    mask = None
    if region is not None:
        if not 0 <= region < world.cfg.regions:
            raise ConfigError(f"region {region} out of range 0..{world.cfg.regions - 1}")
        mask = sample.masks[region]
    grid = evaluate.attention_grid(trainer.model, sample.volume, mask)
    tag = f"sample{index}" + ("" if region is None else f"_region{region}")
    evaluate.write_attention_file(out / f"attn_{tag}.mv3a", grid)
    figures.plot_attention_slices(grid, out / f"attn_{tag}.png",
                                  volume=sample.volume,
                                  title=f"[CLS] attention ({tag})")
    _echo_config(out, {"checkpoint": str(ckpt_path), "data": str(data_dir),
                       "index": index, "region": region})
    click.echo(f"attention grid written to {out / f'attn_{tag}.mv3a'}")


if __name__ == "__main__":
    main()
