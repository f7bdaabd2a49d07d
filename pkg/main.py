#!/usr/bin/env python3
"""
Main Entry Point - command line for the CoLReg desk-scale pipeline
(prepare / train / translate / eval / zeroshot / report) and a read-only
FastAPI status app over a run directory (serve).
"""
from functools import wraps
from pathlib import Path
import asyncio
import json
import logging
import os
import sys

import click
import torch
import uvicorn
from fastapi import FastAPI, Request
from fastapi.responses import HTMLResponse, JSONResponse
from fastapi.templating import Jinja2Templates

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
from colreg import datapipe
from colreg.checkpoints import read_ledger
from colreg.errors import ColRegError, ConfigError, DataError, StageFailure
from colreg.evaluate import EvalReport
from colreg.mimfeat import LogGaborBank, Provenance, encode_mim, handcrafted_condition
from colreg.mimgcd import NoiseSchedule, inference_t2, translate
from config import RunConfig, load_config, write_effective_config
from orchestrator import AlternationOrchestrator, network_from_checkpoint

TEMPLATE_DIR = Path(__file__).resolve().parent / "templates"

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_STAGE = 4

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def handle_errors(fn):
    """Map the error hierarchy onto exit codes"""
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            click.echo(f"Config error: {e}", err=True)
            sys.exit(EXIT_CONFIG)
        except DataError as e:
            click.echo(f"Data error: {e}", err=True)
            sys.exit(EXIT_DATA)
        except StageFailure as e:
            click.echo(f"Stage failure: {e}", err=True)
            sys.exit(EXIT_STAGE)
        except ColRegError as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_STAGE)
        except Exception as e:
            logger.error(f"Unexpected error in {fn.__name__}: {e}", exc_info=True)
            click.echo(f"Error: {type(e).__name__}: {e}", err=True)
            sys.exit(EXIT_STAGE)
    return wrapper


def config_options(fn):
    fn = click.option("--set", "overrides", multiple=True, help="Override a key, e.g. training.alternations=1")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="TOML or JSON run config")(fn)
    return fn


def _load(config_path, overrides) -> RunConfig:
    return load_config(config_path, list(overrides))


@click.group()
def cli():
    """CoLReg desk-scale multimodal registration"""


@cli.command()
@config_options
@handle_errors
def prepare(config_path, overrides):
    """Freeze unaligned train/test pairs for the configured dataset"""
    config = _load(config_path, overrides)
    orchestrator = AlternationOrchestrator(config)
    asyncio.run(orchestrator.initialize_workers())
    prepared = asyncio.run(orchestrator.workers["data"].prepare())
    state = "up to date" if prepared.reused else "written"
    click.echo(f"{prepared.dataset}: train={prepared.counts['train']} test={prepared.counts['test']} ({state}) -> {prepared.root}")


@cli.command()
@config_options
@click.option("--resume", is_flag=True, help="Reuse checkpoints of finished stages")
@click.option("--dry-run", is_flag=True, help="Print the stage plan and exit")
@click.option("--it-budget", type=int, default=None, help="Set every stage's iteration budget")
@handle_errors
def train(config_path, overrides, resume, dry_run, it_budget):
    """Alternating optimization of all networks"""
    config = _load(config_path, overrides)
    if it_budget is not None:
        if it_budget < 1:
            raise ConfigError("--it-budget must be positive")
        config.training.budgets.set_all(it_budget)

    orchestrator = AlternationOrchestrator(config)
    if dry_run:
        for index, step in enumerate(orchestrator.plan(), start=1):
            budget = f"  [{orchestrator.budget(step.stage, step.it)} steps]" if step.action == "train" else ""
            click.echo(f"{index:3d}. {step.describe()}{budget}")
        return

    asyncio.run(orchestrator.run_training(resume=resume))
    final = config.output.checkpoint_dir / f"reg_c_{config.training.alternations - 1}.ckpt"
    click.echo(f"Training complete: {final}")


@cli.command(name="translate")
@config_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False), help="Diffusion checkpoint")
@click.option("--mim-checkpoint", type=click.Path(exists=True, dir_okay=False), default=None, help="Source MIM encoder; handcrafted MIM when omitted")
@click.option("--source", "sources", multiple=True, required=True, type=click.Path(dir_okay=False))
@click.option("--reference", "references", multiple=True, required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0)
@handle_errors
def translate_cmd(config_path, overrides, checkpoint, mim_checkpoint, sources, references, out_dir, seed):
    """Translate source images into the target domain"""
    config = _load(config_path, overrides)
    if len(sources) != len(references):
        raise ConfigError("Need one --reference per --source")
    diff, payload = network_from_checkpoint(checkpoint)
    sched = NoiseSchedule.from_dict(payload["schedule"])
    encoder = network_from_checkpoint(mim_checkpoint)[0] if mim_checkpoint else None
    bank = LogGaborBank(n_scales=config.model.n_scales, n_orient=config.model.n_orient)
    t2 = inference_t2(sched, config.model.t2_infer)
    generator = torch.Generator().manual_seed(seed)

    out_dir = Path(out_dir)
    written = []
    with torch.no_grad():
        for src_path, ref_path in zip(sources, references):
            x_s = datapipe.to_tensor(datapipe.load_image(src_path, config.dataset.channels))[None]
            x_ref = datapipe.to_tensor(datapipe.load_image(ref_path, config.dataset.channels))[None]
            if encoder is not None:
                cond = encode_mim(encoder, x_s, Provenance.LEARNED_SOURCE)
            else:
                cond = handcrafted_condition(x_s, bank, diff.mim_channels)
            out = translate(diff, x_ref, cond, t2, sched, generator)
            image = out[0].numpy().transpose(1, 2, 0)
            written.append(datapipe.save_image(image[..., 0] if image.shape[2] == 1 else image, out_dir / f"{Path(src_path).stem}_s2t.png"))
    click.echo(f"Wrote {len(written)} translated images to {out_dir}")


@cli.command(name="eval")
@config_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False), help="Registration checkpoint")
@click.option("--split", default="test", show_default=True)
@click.option("--name", default="eval", show_default=True, help="Report file stem")
@handle_errors
def eval_cmd(config_path, overrides, checkpoint, split, name):
    """MACE and AUC of a registration checkpoint on the prepared dataset"""
    config = _load(config_path, overrides)
    write_effective_config(config, config.output.report_dir)
    net, _ = network_from_checkpoint(checkpoint)
    orchestrator = AlternationOrchestrator(config)
    asyncio.run(orchestrator.initialize_workers())
    records = orchestrator.workers["data"].records(split)
    report = asyncio.run(orchestrator.workers["evaluation"].evaluate(net, records, config.dataset.name, Path(checkpoint).name, name))
    click.echo(json.dumps(report.summary(), indent=2))


def _parse_pairs(values, what: str) -> dict[str, str]:
    out = {}
    for value in values:
        if "=" not in value:
            raise ConfigError(f"{what} must look like NAME=VALUE: {value!r}")
        key, val = value.split("=", 1)
        out[key] = val
    return out


@cli.command()
@config_options
@click.option("--checkpoint", "checkpoints", multiple=True, required=True, help="NAME=PATH@TRAINED_ON")
@click.option("--dataset", "datasets", multiple=True, required=True, help="TAG=PREPARED_DIR")
@click.option("--name", default="zeroshot", show_default=True)
@handle_errors
def zeroshot(config_path, overrides, checkpoints, datasets, name):
    """Cross-dataset evaluation grid"""
    config = _load(config_path, overrides)
    write_effective_config(config, config.output.report_dir)
    nets = {}
    for ckpt_name, spec in _parse_pairs(checkpoints, "--checkpoint").items():
        path, _, trained_on = spec.partition("@")
        nets[ckpt_name] = (network_from_checkpoint(path)[0], trained_on)
    records = {tag: datapipe.load_prepared(prepared, "test") for tag, prepared in _parse_pairs(datasets, "--dataset").items()}

    orchestrator = AlternationOrchestrator(config)
    asyncio.run(orchestrator.initialize_workers())
    matrix = asyncio.run(orchestrator.workers["evaluation"].zeroshot(nets, records, name))
    for ckpt_name, row in zip(matrix.checkpoints, matrix.mace_table()):
        click.echo(f"{ckpt_name}: " + "  ".join(f"{tag}={mace:.3f}" for tag, mace in zip(matrix.datasets, row)))


@cli.command()
@config_options
@click.argument("reports", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False), help="Markdown output path")
@click.option("--title", default="Evaluation")
@handle_errors
def report(config_path, overrides, reports, out_path, title):
    """Markdown table and error-curve plot from saved report files"""
    config = _load(config_path, overrides)
    orchestrator = AlternationOrchestrator(config)
    asyncio.run(orchestrator.initialize_workers())
    out_path = Path(out_path) if out_path else config.output.report_dir / "report.md"
    path = orchestrator.workers["evaluation"].render([Path(p) for p in reports], out_path, title)
    click.echo(f"Report written to {path}")


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def run_status(run_dir: Path) -> dict:
    ckpt_dir = run_dir / "checkpoints"
    config_file = run_dir / "effective_config.json"
    return {
        "run_dir": str(run_dir),
        "config": json.loads(config_file.read_text()) if config_file.exists() else None,
        "ledger": read_ledger(ckpt_dir) if (ckpt_dir / "ledger.json").exists() else [],
        "progress": _read_jsonl(run_dir / "progress.jsonl"),
    }


def report_summaries(run_dir: Path) -> list[dict]:
    summaries = []
    for path in sorted((run_dir / "reports").glob("*.json")):
        data = json.loads(path.read_text())
        if "aces" in data:
            summaries.append({"file": path.name, **EvalReport.from_dict(data).summary()})
    return summaries


def create_app(run_dir: str | Path) -> FastAPI:
    """Read-only view over a run directory"""
    run_dir = Path(run_dir)
    app = FastAPI(
        title="CoLReg run status",
        description="Checkpoints, stage progress and evaluation reports of one run",
        version="1.0.0",
    )
    templates = Jinja2Templates(directory=str(TEMPLATE_DIR))

    @app.get("/", response_class=HTMLResponse)
    async def dashboard(request: Request):
        return templates.TemplateResponse(request, "dashboard.html", {"status": run_status(run_dir), "reports": report_summaries(run_dir)})

    @app.get("/api/status")
    async def get_run_status():
        try:
            return JSONResponse(content=run_status(run_dir))
        except Exception as e:
            logger.error(f"Error reading run status: {str(e)}")
            return JSONResponse(content={"error": "Failed to read run status"}, status_code=500)

    @app.get("/api/reports")
    async def get_reports():
        return JSONResponse(content=report_summaries(run_dir))

    @app.get("/health")
    async def health_check():
        return JSONResponse(content={"status": "healthy", "service": "CoLReg run status", "run_dir": str(run_dir), "exists": run_dir.exists()})

    return app


@cli.command()
@config_options
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=5000, show_default=True, type=int)
@handle_errors
def serve(config_path, overrides, host, port):
    """Serve the status dashboard of the configured run"""
    config = _load(config_path, overrides)
    logger.info(f"Serving {config.output.run_dir} on {host}:{port}")
    uvicorn.run(create_app(config.output.run_dir), host=host, port=port, log_level="info")


if __name__ == "__main__":
    cli()
