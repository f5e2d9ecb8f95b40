"""Command-line lifecycle: generate, train, forecast, eval.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error. Every
command writes a run manifest next to its outputs; re-running with the
manifest's seed and config snapshot reproduces the output bit for bit.
"""

from __future__ import annotations

import json
import os
import time

import click
import numpy as np
import torch

from . import __version__
from .data import DataError, load_csv, write_csv
from .decoder import ModelConfig
from .evaluation import (
    EvalConfig,
    characterize,
    persistence_forecast,
    sliding_eval,
    write_characterization_csv,
    write_metric_report,
)
from .checkpoint import load_checkpoint
from .inference import ForecastRequest, forecast
from .synthgen import SynthConfig, generate_mixture
from .training import TrainConfig, train_loop


def _pin_torch_threads() -> None:
    # model math always runs single-threaded so results are identical
    # regardless of --threads (which only parallelizes data generation)
    torch.set_num_threads(1)


def write_manifest(out_path, command: str, config_snapshot: dict, seed, inputs, outputs, started: float) -> None:
    manifest = {
        "command": command,
        "config": config_snapshot,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
        "wallclock_s": time.time() - started,
    }
    tmp = f"{out_path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, out_path)


def _load_json_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise click.UsageError(
            f"invalid JSON in {path}: line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from None
    except OSError as exc:
        raise click.UsageError(str(exc)) from None


def _apply_overrides(config: dict, overrides: tuple[str, ...]) -> dict:
    """`--set a.b=value` dot-path overrides; values parsed as JSON when
    possible, else kept as strings. Flag > file > default."""
    out = json.loads(json.dumps(config))
    for item in overrides:
        if "=" not in item:
            raise click.UsageError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def _dataclass_config(cls, data: dict, label: str):
    try:
        return cls.from_dict(data) if hasattr(cls, "from_dict") else cls(**data)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"invalid {label} config: {exc}") from None


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Probabilistic patch-based time series forecasting."""


@main.command("generate")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_path", type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--threads", type=int, default=1, help="Worker threads for generation.")
@click.option("--count", type=int, default=None, help="Number of series (default 1).")
@click.option("--set", "overrides", multiple=True, help="Dot-path config override key=value.")
def cmd_generate(config_path, out_path, seed, threads, count, overrides) -> None:
    """Generate a synthetic CSV dataset from a SynthConfig JSON."""
    _pin_torch_threads()
    started = time.time()
    raw = _apply_overrides(_load_json_config(config_path), overrides)
    dataset_size = count if count is not None else raw.pop("count", 1)
    if seed is not None:
        raw["seed"] = seed
    config = _dataclass_config(SynthConfig, raw, "synth")
    try:
        series_list = generate_mixture(
            dataset_size, 1.0, [], config, max_workers=max(1, threads)
        )
        write_csv(out_path, series_list)
    except (ValueError, OSError) as exc:
        raise click.ClickException(str(exc)) from None
    write_manifest(
        f"{out_path}.manifest.json",
        "generate",
        {"synth": config.to_dict(), "count": dataset_size},
        config.seed,
        [str(config_path)],
        [str(out_path)],
        started,
    )
    click.echo(f"wrote {dataset_size} series to {out_path}")


@main.command("train")
@click.argument("model_config_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("train_config_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("data_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="Override the training seed.")
@click.option("--threads", type=int, default=1)
@click.option("--resume", is_flag=True, help="Continue from the newest checkpoint in OUT_DIR.")
@click.option("--set", "overrides", multiple=True, help="Dot-path config override key=value.")
def cmd_train(model_config_path, train_config_path, data_path, out_dir, seed, threads, resume, overrides) -> None:
    """Pre-train on next-patch prediction; writes checkpoints + NDJSON metrics."""
    _pin_torch_threads()
    started = time.time()
    merged = _apply_overrides(
        {
            "model": _load_json_config(model_config_path),
            "train": _load_json_config(train_config_path),
        },
        overrides,
    )
    if seed is not None:
        merged["train"]["seed"] = seed
    model_config = _dataclass_config(ModelConfig, merged["model"], "model")
    train_config = _dataclass_config(TrainConfig, merged["train"], "train")
    os.makedirs(out_dir, exist_ok=True)
    if resume and not any(n.endswith(".ckpt") for n in os.listdir(out_dir)):
        raise click.ClickException(f"--resume given but no checkpoint in {out_dir}")
    try:
        dataset = load_csv(data_path)
        weights, metrics = train_loop(
            model_config, train_config, dataset, out_dir=out_dir, resume=resume
        )
    except DataError as exc:
        raise click.UsageError(str(exc)) from None
    except (ValueError, RuntimeError, OSError) as exc:
        raise click.ClickException(str(exc)) from None
    write_manifest(
        os.path.join(out_dir, "train.manifest.json"),
        "train",
        {"model": model_config.to_dict(), "train": train_config.to_dict()},
        train_config.seed,
        [str(model_config_path), str(train_config_path), str(data_path)],
        [os.path.join(out_dir, "checkpoint-final.ckpt")],
        started,
    )
    final_loss = metrics[-1]["loss"] if metrics else float("nan")
    click.echo(f"trained to step {len(metrics) and metrics[-1]['step'] + 1}; final loss {final_loss:.4f}")


@main.command("forecast")
@click.argument("checkpoint_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("data_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_path", type=click.Path(dir_okay=False))
@click.option("--horizon", type=int, required=True)
@click.option("--samples", type=int, default=100, show_default=True, help="Sample paths; floor of 100 enforced.")
@click.option("--quantiles", default="0.025,0.5,0.975", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=int, default=1)
def cmd_forecast(checkpoint_path, data_path, out_path, horizon, samples, quantiles, seed, threads) -> None:
    """Monte Carlo forecast for every series in DATA_PATH."""
    _pin_torch_threads()
    started = time.time()
    if horizon <= 0:
        raise click.UsageError("--horizon must be positive")
    try:
        q_levels = tuple(float(q) for q in quantiles.split(","))
    except ValueError:
        raise click.UsageError(f"bad --quantiles {quantiles!r}") from None
    samples = max(samples, 100)  # minimum-sample policy
    try:
        weights, meta, _ = load_checkpoint(checkpoint_path)
        dataset = load_csv(data_path)
        max_context = meta.get("train_config", {}).get("context_len")
        rows_written = 0
        import csv as _csv

        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            writer = _csv.writer(fh)
            qs = sorted(q_levels)
            writer.writerow(["series", "variate", "step", "point"] + [f"q{q:g}" for q in qs])
            for series in dataset:
                request = ForecastRequest(
                    context=series,
                    horizon=horizon,
                    num_samples=samples,
                    quantiles=q_levels,
                    seed=seed,
                    max_context=max_context,
                )
                result = forecast(request, weights.config, weights)
                q_arrays = {q: result.quantile(q) for q in qs}
                for var in range(result.point.shape[0]):
                    for step in range(horizon):
                        row = [series.series_name, var, step, repr(float(result.point[var, step]))]
                        row += [repr(float(q_arrays[q][var, step])) for q in qs]
                        writer.writerow(row)
                        rows_written += 1
    except DataError as exc:
        raise click.UsageError(str(exc)) from None
    except (ValueError, RuntimeError, OSError) as exc:
        raise click.ClickException(str(exc)) from None
    write_manifest(
        f"{out_path}.manifest.json",
        "forecast",
        {"horizon": horizon, "samples": samples, "quantiles": sorted(q_levels)},
        seed,
        [str(checkpoint_path), str(data_path)],
        [str(out_path)],
        started,
    )
    click.echo(f"wrote {rows_written} forecast rows to {out_path}")


@main.command("eval")
@click.argument("checkpoint_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("data_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("eval_config_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_path", type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the eval seed.")
@click.option("--threads", type=int, default=1)
@click.option("--oracle", is_flag=True, help="Testing hook: score a perfect forecaster.")
@click.option("--set", "overrides", multiple=True, help="Dot-path config override key=value.")
def cmd_eval(checkpoint_path, data_path, eval_config_path, out_path, seed, threads, oracle, overrides) -> None:
    """Sliding-window backtest + characterization report.

    Writes OUT_PATH (metric CSV), OUT_PATH with .summary.json, and a
    .characterization.csv next to it.
    """
    _pin_torch_threads()
    started = time.time()
    raw = _apply_overrides(_load_json_config(eval_config_path), overrides)
    if seed is not None:
        raw["seed"] = seed
    config = _dataclass_config(EvalConfig, raw, "eval")
    try:
        weights, meta, _ = load_checkpoint(checkpoint_path)
        dataset = load_csv(data_path)

        if oracle:
            truth_by_name = {s.series_name: s for s in dataset}

            def forecaster(context, horizon):
                full = truth_by_name[context.series_name]
                # locate this window by scanning through the source series
                for s in range(full.length - context.length + 1):
                    if np.array_equal(full.values[:, s : s + context.length], context.values):
                        return full.values[:, s + context.length : s + context.length + horizon]
                raise RuntimeError("oracle could not locate context window")

        else:

            def forecaster(context, horizon):
                request = ForecastRequest(
                    context=context,
                    horizon=horizon,
                    num_samples=config.num_samples,
                    seed=config.seed,
                    max_context=config.context_len,
                )
                return forecast(request, weights.config, weights).point

        rows = sliding_eval(dataset, forecaster, config, dataset_name=os.path.basename(str(data_path)))
        if not any(r["series"] != "__all__" for r in rows):
            raise click.ClickException(
                "no scoreable windows: every series is shorter than context + horizon"
            )
        base = str(out_path)
        write_metric_report(base, f"{base}.summary.json", rows)
        labeled = []
        for series in dataset:
            try:
                labeled.append((series.series_name, characterize(series)))
            except ValueError:
                labeled.append((series.series_name, set()))
        write_characterization_csv(f"{base}.characterization.csv", labeled)
    except DataError as exc:
        raise click.UsageError(str(exc)) from None
    except click.ClickException:
        raise
    except (ValueError, RuntimeError, OSError) as exc:
        raise click.ClickException(str(exc)) from None
    write_manifest(
        f"{out_path}.manifest.json",
        "eval",
        {"eval": config.to_dict(), "oracle": oracle},
        config.seed,
        [str(checkpoint_path), str(data_path), str(eval_config_path)],
        [str(out_path)],
        started,
    )
    click.echo(f"wrote metric report to {out_path}")


if __name__ == "__main__":
    main()
