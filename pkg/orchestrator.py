#!/usr/bin/env python3
"""
Orchestrator - runs the alternating optimization of the translator, the MIM
encoders and the two registration networks, one stage at a time, chaining
every handoff through checkpoints.
"""
from dataclasses import dataclass
from datetime import datetime
import asyncio
import logging

import torch

from colreg.checkpoints import checkpoint_path, load_checkpoint, read_checkpoint, read_ledger, save_checkpoint, verify_chain
from colreg.errors import ColRegError, StageFailure
from colreg.logs import setup_logging
from colreg.mimfeat import MimEncoder
from colreg.mimgcd import DiffusionModel, NoiseSchedule
from colreg.regnet import RegNetwork
from config import RunConfig, write_effective_config
from stages.data import DataStage
from stages.diffusion import DiffusionStage
from stages.evaluation import EvaluationStage
from stages.mim import MimStage
from stages.registration import RegistrationStage

STAGES = ("diff", "mim_t", "mim_s", "reg_s", "reg_c")
STAGE_KINDS = {"diff": "diffusion", "mim_t": "mim", "mim_s": "mim", "reg_s": "registration", "reg_c": "registration"}
NETWORK_CLASSES = {"diffusion": DiffusionModel, "mim": MimEncoder, "registration": RegNetwork}


@dataclass(frozen=True)
class PlanStep:
    action: str  # "train", "load" or "skip-load"
    stage: str
    it: int
    source: tuple[str, int] | None = None

    def describe(self) -> str:
        if self.action == "train":
            return f"train {self.stage}({self.it})"
        src_stage, src_it = self.source
        if self.action == "skip-load":
            return f"skip load {self.stage} <- {src_stage}({src_it}) [it < 2, fresh init]"
        return f"load {self.stage} <- {src_stage}({src_it})"


def alternation_plan(alternations: int) -> list[PlanStep]:
    """Stage order of the alternating optimization for `alternations` rounds"""
    if alternations < 1:
        raise ValueError("Need at least one alternation")
    steps = [
        PlanStep("train", "diff", 0),
        PlanStep("train", "reg_s", 0),
        PlanStep("load", "reg_c", 0, ("reg_s", 0)),
        PlanStep("train", "reg_c", 0),
    ]
    for it in range(1, alternations):
        steps += [
            PlanStep("load" if it >= 2 else "skip-load", "mim_t", it, ("mim_s", it - 1)),
            PlanStep("train", "mim_t", it),
            PlanStep("load", "diff", it, ("diff", it - 1)),
            PlanStep("train", "diff", it),
            PlanStep("load", "mim_s", it, ("mim_t", it)),
            PlanStep("train", "mim_s", it),
            PlanStep("load", "reg_s", it, ("reg_c", it - 1)),
            PlanStep("train", "reg_s", it),
            PlanStep("load", "reg_c", it, ("reg_s", it)),
            PlanStep("train", "reg_c", it),
        ]
    return steps


def build_network(kind: str, architecture: dict) -> torch.nn.Module:
    return NETWORK_CLASSES[kind](**architecture)


def network_from_checkpoint(path) -> tuple[torch.nn.Module, dict]:
    payload = read_checkpoint(path)
    net = build_network(payload["kind"], payload["architecture"])
    net.load_state_dict(payload["params"])
    net.eval()
    return net, payload


@dataclass
class AlternationState:
    it: int
    alternations: int
    step_index: int = 0


class AlternationOrchestrator:
    def __init__(self, config: RunConfig):
        self.name = "Orchestrator"
        self.config = config
        self.status = "initializing"
        self.logger = setup_logging(self.name, config.output.log_dir)
        self.workers = {}
        self.networks: dict[str, torch.nn.Module] = {}
        self.state = AlternationState(0, config.training.alternations)
        self.completed: list[str] = []
        m = config.model
        self.sched = NoiseSchedule.build(m.schedule, m.timesteps, m.beta_start, m.beta_end)

    @property
    def checkpoint_dir(self):
        return self.config.output.checkpoint_dir

    async def initialize_workers(self):
        self.logger.info("Initializing stage workers...")

        try:
            self.workers = {
                "data": DataStage(self.config),
                "diffusion": DiffusionStage(self.config),
                "mim": MimStage(self.config),
                "registration": RegistrationStage(self.config),
                "evaluation": EvaluationStage(self.config),
            }
            self.logger.info(f"Initialized {len(self.workers)} workers")
            self.status = "ready"

        except Exception as e:
            self.logger.error(f"Error initializing workers: {str(e)}")
            self.status = "error"
            raise

    def architecture(self, kind: str) -> dict:
        m, channels = self.config.model, self.config.dataset.channels
        if kind == "diffusion":
            return {"image_channels": channels, "mim_channels": m.mim_channels, "base": m.unet_base}
        if kind == "mim":
            return {"in_channels": channels, "out_channels": m.mim_channels, "width": m.mim_width, "depth": m.mim_depth}
        return {"in_channels": channels, "width": m.reg_width, "iterations": list(m.iterations), "radius": m.radius, "hidden": m.reg_hidden}

    def build_networks(self) -> dict[str, torch.nn.Module]:
        device = torch.device(self.config.training.device)
        for index, stage in enumerate(STAGES):
            torch.manual_seed(self.config.training.seed * 1000 + index)
            self.networks[stage] = build_network(STAGE_KINDS[stage], self.architecture(STAGE_KINDS[stage])).to(device)
        return self.networks

    def plan(self) -> list[PlanStep]:
        return alternation_plan(self.config.training.alternations)

    def budget(self, stage: str, it: int) -> int:
        b = self.config.training.budgets
        if it == 0 and stage == "diff":
            return b.diff_bootstrap
        if it == 0 and stage == "reg_s":
            return b.reg_s_bootstrap
        return getattr(b, stage)

    def stage_seed(self, stage: str, it: int) -> int:
        return self.config.training.seed * 1000 + it * 10 + STAGES.index(stage)

    def _frozen_copy(self, stage: str, it: int, consumer: str) -> torch.nn.Module:
        """Fresh network holding the parameters written by <stage>_<it>"""
        kind = STAGE_KINDS[stage]
        net = build_network(kind, self.architecture(kind)).to(torch.device(self.config.training.device))
        load_checkpoint(self.checkpoint_dir, stage, it, net, consumer=consumer)
        net.eval()
        return net

    async def _train(self, step: PlanStep) -> dict:
        stage, it = step.stage, step.it
        seed = self.stage_seed(stage, it)
        steps = self.budget(stage, it)
        stream = self.workers["data"].stream("train", seed)
        nets = self.networks
        consumer = f"{stage}_{it}"

        if stage == "diff":
            mim_t = nets["mim_t"] if it >= 1 else None
            return await self.workers["diffusion"].train(nets["diff"], self.sched, stream, it, steps, mim_t=mim_t, seed=seed)

        if stage in ("mim_t", "mim_s"):
            reg_c_prev = self._frozen_copy("reg_c", it - 1, consumer)
            mim_s_prev = self._frozen_copy("mim_s", it - 1, consumer) if it >= 2 else None
            if stage == "mim_t":
                return await self.workers["mim"].train_target(nets["mim_t"], mim_s_prev, reg_c_prev, stream, it, steps, seed)
            return await self.workers["mim"].train_source(nets["mim_s"], mim_s_prev, nets["diff"], self.sched, reg_c_prev, stream, it, steps, seed)

        if stage == "reg_s":
            mim_s = nets["mim_s"] if it >= 1 else None
            generators = {"diff": nets["diff"]}
            if mim_s is not None:
                generators["mim_s"] = mim_s
            generator = torch.Generator().manual_seed(seed)
            diffusion = self.workers["diffusion"]

            def translator_for(x_t):
                return diffusion.translator(nets["diff"], self.sched, x_t, it, mim_s, generator)

            return await self.workers["registration"].train_intermediate(nets["reg_s"], translator_for, generators, stream, it, steps, seed)

        return await self.workers["registration"].train_distilled(nets["reg_c"], nets["reg_s"], stream, it, steps, seed)

    def _checkpoint_extra(self, stage: str) -> dict:
        kind = STAGE_KINDS[stage]
        extra = {"architecture": self.networks[stage].architecture()}
        if kind == "diffusion":
            extra["schedule"] = self.sched.to_dict()
        return extra

    async def execute_step(self, step: PlanStep, resume: bool = False) -> None:
        self.state.it = step.it
        label = step.describe()

        if step.action == "skip-load":
            self.logger.info(f"{label}")
            return

        if step.action == "load":
            src_stage, src_it = step.source
            load_checkpoint(self.checkpoint_dir, src_stage, src_it, self.networks[step.stage], consumer=f"{step.stage}_{step.it}")
            self.logger.info(f"{label}: loaded")
            return

        path = checkpoint_path(self.checkpoint_dir, step.stage, step.it)
        if resume and path.exists():
            load_checkpoint(self.checkpoint_dir, step.stage, step.it, self.networks[step.stage], consumer="resume")
            self.logger.info(f"{label}: resumed from {path.name}")
            return

        stats = await self._train(step)
        sha = save_checkpoint(self.checkpoint_dir, step.stage, step.it, self.networks[step.stage], STAGE_KINDS[step.stage], self._checkpoint_extra(step.stage))
        self.logger.info(f"{label}: {stats['steps']} steps, checkpoint {path.name} ({sha[:12]})")

    async def _run_steps(self, steps: list[PlanStep], resume: bool) -> None:
        if not self.workers:
            await self.initialize_workers()
        write_effective_config(self.config)
        await self.workers["data"].prepare()
        if not self.networks:
            self.build_networks()

        self.status = "running"
        for index, step in enumerate(steps):
            self.state.step_index = index
            try:
                await self.execute_step(step, resume)
            except Exception as e:
                self.status = "error"
                self.logger.error(f"Error in {step.describe()}: {str(e)}")
                if isinstance(e, StageFailure):
                    raise
                raise StageFailure(step.stage, step.it, e) from e
            self.completed.append(step.describe())

    async def run_training(self, resume: bool = False) -> RegNetwork:
        """Full schedule; returns the distilled network of the last alternation"""
        self.logger.info(f"Starting training: {self.config.training.alternations} alternations, resume={resume}")
        await self._run_steps(self.plan(), resume)
        verified = verify_chain(self.checkpoint_dir)
        self.logger.info(f"Checkpoint chain verified ({len(verified)} checkpoints)")
        self.status = "completed"
        return self.networks["reg_c"]

    async def bootstrap_stage(self, resume: bool = False) -> tuple[DiffusionModel, RegNetwork, RegNetwork]:
        """The it == 0 stages: translator, intermediate network and its distillation"""
        await self._run_steps([s for s in self.plan() if s.it == 0], resume)
        self.status = "ready"
        return self.networks["diff"], self.networks["reg_s"], self.networks["reg_c"]

    def get_system_status(self):
        worker_statuses = {name: worker.get_status() for name, worker in self.workers.items()}
        ledger = read_ledger(self.checkpoint_dir) if (self.checkpoint_dir / "ledger.json").exists() else []

        return {
            "orchestrator_status": self.status,
            "timestamp": datetime.now().isoformat(),
            "it": self.state.it,
            "alternations": self.state.alternations,
            "completed_steps": list(self.completed),
            "workers_count": len(self.workers),
            "workers": worker_statuses,
            "checkpoints_written": sum(1 for e in ledger if e["event"] == "write"),
            "system_health": "healthy" if all(s["status"] != "error" for s in worker_statuses.values()) else "degraded",
        }


async def main(config: RunConfig):
    orchestrator = AlternationOrchestrator(config)
    try:
        await orchestrator.run_training()
    except KeyboardInterrupt:
        logging.info("Training stopped by user")
    except ColRegError as e:
        logging.error(f"Training error: {str(e)}")
        raise


if __name__ == "__main__":
    from config import load_config
    asyncio.run(main(load_config()))
