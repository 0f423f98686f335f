"""Command-line harness: model init, calibration, training, scheduling, runs.

Configuration is one JSON file whose fields mirror ExperimentConfig; every
commonly swept field also exists as a flag that overrides the file. The seed
comes from --seed or the LOSSYTP_SEED environment variable.
"""

from __future__ import annotations

import json
import os

import click
import numpy as np

from .harness import (ExperimentConfig, TrainedModel, build_schedule,
                      run_matrix, summarize, uplinks_for, profiles_for)
from .model import ModelSpec, init_model
from .report import read_jsonl, render_report, write_jsonl
from .runtime import RuntimeConfig, generate
from .sap import (collect_calibration, save_predictors, synthetic_prompts,
                  train)
from .scheduler import CostModel
from . import weightfile


def _seed_option(ctx_seed: int | None) -> int:
    if ctx_seed is not None:
        return ctx_seed
    return int(os.environ.get("LOSSYTP_SEED", "0"))


def _parse_sets(pairs: tuple[str, ...]) -> dict:
    """--set key=value overrides; values parse as JSON, else plain strings."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise click.BadParameter(f"--set needs key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _load_config(path: str | None, sets: tuple[str, ...] = (),
                 **overrides) -> ExperimentConfig:
    overrides.update(_parse_sets(sets))
    if path:
        return ExperimentConfig.from_file(path, **overrides)
    clean = {k: v for k, v in overrides.items() if v is not None}
    return ExperimentConfig(**clean)


def _spec_from_options(config: ExperimentConfig, seed: int) -> ModelSpec:
    fields = dict(config.model)
    fields["seed"] = seed
    return ModelSpec(**fields)


@click.group()
def main():
    """Neuron-group tensor parallelism over lossy links, at desk scale."""


@main.command("init-model")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "-o", required=True, type=click.Path())
def init_model_cmd(config_path, seed, out):
    """Write deterministic toy-model weights to an indexed weight file."""
    config = _load_config(config_path)
    spec = _spec_from_options(config, _seed_option(seed))
    store = init_model(spec)
    weightfile.write_store(store, out)
    size = os.path.getsize(out)
    click.echo(f"wrote {out}: {size} bytes, "
               f"L={spec.num_layers} D={spec.hidden_dim} heads={spec.num_heads} "
               f"mlp_groups={spec.mlp_groups} vocab={spec.vocab_size}")


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--prompts", type=int, default=40, show_default=True)
@click.option("--length", type=int, default=24, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "-o", required=True, type=click.Path())
def calibrate(model_path, prompts, length, seed, out):
    """Collect (hidden state -> next-layer group norm) training pairs."""
    store = weightfile.load_store(model_path)
    seed = _seed_option(seed)
    prompt_list = synthetic_prompts(store.spec, prompts, length, seed=seed)
    calib = collect_calibration(store, prompt_list)
    payload = {f"{layer}:{int(kind)}:{name}": arr
               for (layer, kind), feats in calib.features.items()
               for name, arr in (("x", feats), ("y", calib.targets[(layer, kind)]))}
    np.savez_compressed(out, **payload)
    total = sum(len(v) for k, v in payload.items() if k.endswith(":x"))
    click.echo(f"wrote {out}: {total} samples across "
               f"{len(calib.features)} (layer, kind) pairs")


@main.command("train-sap")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--calib", "calib_path", required=True, type=click.Path(exists=True))
@click.option("--hidden", type=int, default=64, show_default=True)
@click.option("--epochs", type=int, default=300, show_default=True)
@click.option("--lr", type=float, default=0.08, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "-o", required=True, type=click.Path())
def train_sap(model_path, calib_path, hidden, epochs, lr, seed, out):
    """Train the importance predictors and write their checkpoint."""
    from .model import BlockKind
    from .sap import CalibrationSet

    store = weightfile.load_store(model_path)
    data = np.load(calib_path)
    calib = CalibrationSet(spec=store.spec)
    for key in data.files:
        layer, kind, name = key.split(":")
        target = calib.features if name == "x" else calib.targets
        target[(int(layer), BlockKind(int(kind)))] = data[key]
    pset, val = train(calib, hidden_p=hidden, epochs=epochs, learning_rate=lr,
                      seed=_seed_option(seed))
    save_predictors(pset, out)
    losses = ", ".join(f"{kind.name}={loss:.4f}" for kind, loss in val.items())
    click.echo(f"wrote {out}: validation MSE {losses}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--scheduler", type=str, default="min_max", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--set", "sets", multiple=True, help="Override any config field.")
@click.option("--out", "-o", type=click.Path(), default=None)
def schedule(config_path, scheduler, seed, sets, out):
    """Build and print the per-device priority-index schedule."""
    config = _load_config(config_path, sets)
    seed = _seed_option(seed)
    spec = config.model_spec()
    cost = CostModel.from_model_spec(spec, bandwidth_bps=config.bandwidth * 8)
    profiles = profiles_for(config, seed, cost)
    sched = build_schedule(scheduler, spec, profiles, cost)
    text = sched.serialize()
    if out:
        with open(out, "w") as fh:
            fh.write(text)
        click.echo(f"wrote {out}")
    click.echo(text, nl=False)


@main.command("generate")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--scheduler", type=str, default=None)
@click.option("--mapping", type=click.Choice(["halo", "random"]), default=None)
@click.option("--sync-mode", type=click.Choice(["relaxed", "reliable"]), default=None)
@click.option("--plr", type=float, default=None)
@click.option("--num-tokens", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--set", "sets", multiple=True, help="Override any config field.")
@click.option("--metrics-out", type=click.Path(), default=None)
def generate_cmd(config_path, scheduler, mapping, sync_mode, plr, num_tokens,
                 seed, sets, metrics_out):
    """One end-to-end distributed generation run."""
    config = _load_config(config_path, sets)
    seed = _seed_option(seed)
    scheduler = scheduler or config.scheduler[0]
    mapping = mapping or config.mapping[0]
    sync_mode = sync_mode or config.sync_mode[0]
    plr = plr if plr is not None else config.plr_grid[0]
    num_tokens = num_tokens or config.num_tokens
    trained = TrainedModel(config.model_spec(), config)
    profiles = profiles_for(config, seed, trained.cost)
    sched = build_schedule(scheduler, trained.spec, profiles, trained.cost)
    rcfg = RuntimeConfig(sync_mode=sync_mode, mapping=mapping,
                         policy=config.policy(),
                         io_bytes_per_sec=config.io_bytes_per_sec,
                         predict_seconds=config.predict_seconds)
    prompt = synthetic_prompts(trained.spec, 1, config.prompt_len, seed=seed + 10_000)[0]
    uplinks = uplinks_for(profiles, config, plr, seed)
    result = generate(trained.store, sched, profiles, trained.pset, uplinks,
                      rcfg, prompt, num_tokens, cost=trained.cost, seed=seed)
    click.echo(f"tokens: {result.tokens}")
    click.echo(f"tpt: {result.tpt * 1e3:.3f} ms over {result.steps} steps "
               f"(setup {result.setup_time * 1e3:.3f} ms)")
    click.echo(f"mean logit deviation: {result.mean_deviation:.6f}; "
               f"lost groups: {result.lost_groups}")
    if metrics_out:
        rows = [r.to_dict() for r in result.records] + result.token_records()
        write_jsonl(rows, metrics_out)
        click.echo(f"wrote {metrics_out}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--set", "sets", multiple=True, help="Override any config field.")
@click.option("--out", "-o", "outdir", required=True, type=click.Path())
def matrix(config_path, seed, sets, outdir):
    """Run the full experiment grid; write runs.jsonl and summary.tsv."""
    config = _load_config(config_path, sets)
    if seed is not None or "LOSSYTP_SEED" in os.environ:
        base = _seed_option(seed)
        config.seeds = [base + i for i in range(len(config.seeds))]
    os.makedirs(outdir, exist_ok=True)

    def progress(done, total, row):
        status = row["error"] or f"tpt={row['tpt'] * 1e3:.1f}ms"
        click.echo(f"[{done}/{total}] {row['scheduler']}/{row['mapping']}"
                   f"/{row['sync_mode']} plr={row['plr']} seed={row['seed']}: {status}")

    rows = run_matrix(config, progress=progress)
    runs_path = os.path.join(outdir, "runs.jsonl")
    write_jsonl(rows, runs_path)
    write_jsonl(summarize(rows), os.path.join(outdir, "summary.jsonl"))
    click.echo(f"wrote {runs_path} ({len(rows)} runs)")


@main.command()
@click.option("--runs", "runs_path", required=True, type=click.Path(exists=True))
@click.option("--out", "-o", "outdir", required=True, type=click.Path())
def report(runs_path, outdir):
    """Render the summary table and figures from recorded runs."""
    rows = read_jsonl(runs_path)
    result = render_report(rows, outdir)
    click.echo(f"wrote {result['summary']} ({result['cells']} cells)")
    for fig in result["figures"]:
        click.echo(f"wrote {fig}")


if __name__ == "__main__":
    main()
