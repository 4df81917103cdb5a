"""Command line interface for asymcal."""

import json
import logging
import platform
import subprocess
import sys
from contextlib import contextmanager
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click
import numpy as np
import pandas as pd
from click.core import ParameterSource

from . import __version__
from .bench import bench_layer, bench_p, write_csv
from .config import (
    PRESETS,
    AQOrder,
    Mode,
    RunConfig,
    build_run_config,
    read_config_file,
    resolve_threads,
)
from .exceptions import AsymcalError, CapabilityError, ConfigError
from .matrix import Seed, gen_correlated
from .pipeline import ModelGraph, calibrate_model, load_model, save_model
from .tensor_io import read_tensor
from .toymodel import ToySpec, build_model, gen_calib

logger = logging.getLogger(__name__)

EXIT_VALIDATION = 2
EXIT_COMPUTE = 1
# Options that describe where settings come from rather than settings.
CONTROL_OPTIONS = ("config_file", "preset", "verbose")


def _setup_logging(verbose: bool) -> None:
    if verbose:
        logging.basicConfig(level=logging.INFO)


def _emit_error(e: BaseException, code: int) -> None:
    payload = {"error": type(e).__name__, "message": str(e), "exit_code": code}
    if isinstance(e, AsymcalError):
        payload.update(e.context())
    click.echo(json.dumps(payload), err=True)
    sys.exit(code)


@contextmanager
def _error_channel():
    """Turn library errors into a JSON line on stderr and an exit status."""
    try:
        yield
    except (ConfigError, CapabilityError) as e:
        _emit_error(e, EXIT_VALIDATION)
    except AsymcalError as e:
        _emit_error(e, EXIT_COMPUTE)
    except ValueError as e:
        _emit_error(e, EXIT_VALIDATION)
    except (OSError, RuntimeError) as e:
        _emit_error(e, EXIT_COMPUTE)


def run_options(f):
    """Options shared by ``quantize`` and ``ablate``."""
    options = [
        click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
                     help="key = value settings file (flags win)"),
        click.option("--preset", type=click.Choice(sorted(PRESETS)), help="Experimental setup preset"),
        click.option("--toy", type=click.Choice(["mlp", "transformer"]), help="Build a toy model"),
        click.option("--model", type=click.Path(), help="Model description JSON or directory"),
        click.option("--calib", type=click.Path(), help="Calibration activations (.gtaq); synthetic if omitted"),
        click.option("--bits", type=int, help="Weight bits: 2, 3, 4, 8 or 16"),
        click.option("--mode", type=click.Choice([m.value for m in Mode]), help="Weight update mode"),
        click.option("--symmetric", is_flag=True, help="Symmetric weight grid"),
        click.option("--group-size", type=int, help="Columns per quantization group"),
        click.option("--block-size", type=int, help="Lazy-batch block size (default 128)"),
        click.option("--damp", type=float, help="Hessian dampening ratio (default 0.01)"),
        click.option("--act-order", is_flag=True, help="Process columns by descending Hessian diagonal"),
        click.option("--aq-order", type=click.Choice([o.value for o in AQOrder]),
                     help="Enable activation quantization before (aw) or after (wa) weights"),
        click.option("--clip", type=click.Choice(["minmax", "mse"]), help="Weight clip search"),
        click.option("--act-bits", type=int, help="Activation bits (enables activation quantization)"),
        click.option("--act-clip", type=float, help="Activation clip ratio (default 0.9)"),
        click.option("--seed", type=int, help="Seed for toy weights and synthetic data"),
        click.option("--out", type=click.Path(), help="Output directory"),
        click.option("--blocks", type=int, help="Toy model blocks"),
        click.option("--width", type=int, help="Toy model width"),
        click.option("--hidden-mult", type=int, help="Toy MLP hidden multiplier"),
        click.option("--decay", type=float, help="Toy weight spectrum decay"),
        click.option("--samples", type=int, help="Calibration samples"),
        click.option("--tokens", type=int, help="Tokens per sample"),
        click.option("--spill", is_flag=True, help="Spill full-precision captures to disk"),
        click.option("--verbose", "-v", is_flag=True, help="Verbose output"),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _command_line_values(ctx: click.Context, params: Dict[str, object]) -> Dict[str, object]:
    return {
        name: value
        for name, value in params.items()
        if name not in CONTROL_OPTIONS and ctx.get_parameter_source(name) == ParameterSource.COMMANDLINE
    }


def _load_run_config(ctx: click.Context, params: Dict[str, object]) -> RunConfig:
    file_values = read_config_file(params["config_file"]) if params.get("config_file") else {}
    return build_run_config(file_values, _command_line_values(ctx, params), params.get("preset"))


def _toy_spec(run_cfg: RunConfig) -> ToySpec:
    try:
        return ToySpec(
            kind=run_cfg.toy,
            blocks=run_cfg.blocks,
            width=run_cfg.width,
            hidden_mult=run_cfg.hidden_mult,
            seed=run_cfg.seed,
            decay=run_cfg.decay,
            tokens_per_sample=run_cfg.tokens,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _load_inputs(run_cfg: RunConfig) -> Tuple[ModelGraph, np.ndarray]:
    if run_cfg.toy:
        spec = _toy_spec(run_cfg)
        model = build_model(spec)
        calib = gen_calib(spec, samples=run_cfg.samples)
    elif run_cfg.model:
        model = load_model(run_cfg.model)
        calib = gen_correlated(Seed(run_cfg.seed), model.width, run_cfg.samples * model.tokens_per_sample, 0.5)
    else:
        raise ConfigError("Specify a model with --toy or --model")
    if run_cfg.calib:
        calib = read_tensor(run_cfg.calib)
    return model, calib


def _git_hash() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _versions() -> Dict[str, str]:
    versions = {"asymcal": __version__, "python": platform.python_version()}
    for dist in ("numpy", "scipy", "pandas", "pydantic", "click"):
        try:
            versions[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            versions[dist] = "unknown"
    return versions


def write_manifest(out: Path, command: str, config: Dict[str, object], seed: Optional[int]) -> Path:
    """
    Record what is needed to reproduce a run.

    Args:
        out: Run directory
        command: CLI command name
        config: Effective configuration
        seed: Root seed

    Returns:
        Path of manifest.json
    """
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "threads": resolve_threads(),
        "versions": _versions(),
        "git": _git_hash(),
    }
    path = out / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def _write_params(path: Path, report) -> None:
    params = {
        f"block{block.block_index}": {layer.name: layer.params_dict() for layer in block.layers}
        for block in report.blocks
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params, fh, indent=2)


@click.group()
@click.version_option(version=__version__)
def cli():
    """asymcal - Asymmetric post-training quantization for linear layers."""
    pass


@cli.command()
@run_options
@click.pass_context
def quantize(ctx, **params):
    """Quantize a toy or stored model and write weights and reports."""
    _setup_logging(params["verbose"])
    with _error_channel():
        run_cfg = _load_run_config(ctx, params)
        cfg = run_cfg.quant_config(threads=resolve_threads())
        model, calib = _load_inputs(run_cfg)

        out = Path(run_cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        click.echo(f"Calibrating {len(model.blocks)} block(s) in {cfg.mode.value} mode...")
        report = calibrate_model(model, calib, cfg, spill_dir=out / "spill" if run_cfg.spill else None)

        save_model(report.model, out)
        _write_params(out / "params.json", report)
        report.to_json(out / "report.json")
        report.to_csv(out / "report.csv")
        write_manifest(out, "quantize", run_cfg.model_dump(mode="json"), run_cfg.seed)

        summary = report.summary()
        click.echo(f"Wrote results to {out}")
        click.echo(f"\nSummary:")
        click.echo(f"  Layers: {summary['layers']}")
        click.echo(f"  Total asym loss: {summary['total_asym_loss']:.6g}")
        click.echo(f"  Final block MAE: {summary['final_mae']:.6g}")


@cli.command()
@run_options
@click.pass_context
def ablate(ctx, **params):
    """Run every update mode under both activation-quantization orders."""
    _setup_logging(params["verbose"])
    with _error_channel():
        run_cfg = _load_run_config(ctx, params)
        model, calib = _load_inputs(run_cfg)
        threads = resolve_threads()

        out = Path(run_cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        rows: List[Dict[str, object]] = []
        for mode in Mode:
            for order in AQOrder:
                cfg = run_cfg.quant_config(threads=threads, mode=mode, aq_order=order)
                report = calibrate_model(model, calib, cfg)
                summary = report.summary()
                rows.append({
                    "mode": mode.value,
                    "aq_order": order.value,
                    "total_asym_loss": summary["total_asym_loss"],
                    "total_sym_loss": summary["total_sym_loss"],
                    "final_mae": summary["final_mae"],
                })
                click.echo(f"  {mode.value:7s} {order.value}: asym loss {summary['total_asym_loss']:.6g}")

        df = pd.DataFrame(rows)
        df.to_csv(out / "ablation.csv", index=False)
        with open(out / "ablation.json", "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
        write_manifest(out, "ablate", run_cfg.model_dump(mode="json"), run_cfg.seed)
        click.echo(f"Exported {len(df)} ablation rows to {out}")


def _parse_sizes(raw: str) -> List[int]:
    try:
        sizes = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"--sizes must be a comma-separated list of integers, got {raw!r}") from e
    if not sizes:
        raise ConfigError("--sizes must name at least one size")
    bad = [n for n in sizes if n < 1]
    if bad:
        raise ConfigError(f"Benchmark sizes must be positive, got {bad}")
    return sizes


@cli.command()
@click.option("--what", type=click.Choice(["p", "layer"]), default="p", help="Benchmark P or layer calibration")
@click.option("--sizes", default="256,512,1024", help="Comma-separated values of n")
@click.option("--reps", default=9, type=int, help="Measured repetitions (at least 5)")
@click.option("--k", "k", default=256, type=int, help="Calibration columns")
@click.option("--seed", default=0, type=int, help="Data seed")
@click.option("--out", default="asymcal_bench", type=click.Path(), help="Output directory")
@click.option("--verbose", "-v", is_flag=True, help="Verbose output")
def bench(what, sizes, reps, k, seed, out, verbose):
    """Time the fused P kernel or GPTQ vs GPTAQ layer calibration."""
    _setup_logging(verbose)
    with _error_channel():
        size_list = _parse_sizes(sizes)
        if k < 1:
            raise ConfigError(f"--k must be positive, got {k}")
        run = bench_p if what == "p" else bench_layer
        results = run(size_list, reps=reps, k=k, seed=seed)

        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"bench_{what}.csv"
        write_csv(results, path)
        config = {"what": what, "sizes": size_list, "reps": reps, "k": k}
        write_manifest(out_dir, "bench", config, seed)

        for r in results:
            click.echo(f"  {r.variant.value:12s} n={r.n:5d}  median {r.median * 1e3:10.3f} ms")
        click.echo(f"Exported {len(results)} rows to {path}")


@cli.command()
def examples():
    """Show usage examples."""

    examples_text = """
asymcal Usage Examples:

1. Quantize a toy MLP to 4-bit weights with asymmetric calibration:
   asymcal quantize --toy mlp --bits 4 --mode gptaq --out run1/

2. Same toy transformer, W4A4, activation quantization before weights:
   asymcal quantize --toy transformer --bits 4 --act-bits 4 --aq-order aw --out run2/

3. Weight-only preset (3-bit, group size 128, act-order):
   asymcal quantize --toy mlp --width 128 --preset weight-only --out run3/

4. Settings from a file, overriding one value on the command line:
   asymcal quantize --config run.cfg --seed 7

5. Compare all update modes and both activation-quantization orders:
   asymcal ablate --toy transformer --act-bits 4 --out ablation/

6. Benchmark the fused P computation against the row loop:
   asymcal bench --what p --sizes 256,512,1024

7. Benchmark GPTQ vs GPTAQ layer calibration:
   asymcal bench --what layer --sizes 128,256,512

Set ASYMCAL_THREADS to cap internal parallelism.
For more information, use --help with any command.
    """

    click.echo(examples_text)


def main():
    """Main entry point for the CLI."""
    cli()


if __name__ == "__main__":
    main()
