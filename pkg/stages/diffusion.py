#!/usr/bin/env python3
"""
Diffusion Stage - trains the MIM-guided translator on target-domain pairs
(x^T, x^T') and exposes it as a frozen source-to-target translator.
"""
import asyncio
from contextlib import nullcontext

import numpy as np
import torch

from colreg.batches import make_warped_pair
from colreg.checkpoints import frozen
from colreg.mimfeat import LogGaborBank, MimEncoder, MimFeature, Provenance, encode_mim, handcrafted_condition
from colreg.mimgcd import DiffusionModel, NoiseSchedule, check_condition, diffusion_loss, inference_t2, translate
from config import RunConfig

from .base import StageWorker


def mim_condition(img: torch.Tensor, it: int, encoder: MimEncoder | None, provenance: Provenance, bank: LogGaborBank, channels: int) -> MimFeature:
    """Handcrafted normalized MIM at it == 0, encoder output afterwards"""
    if it == 0 or encoder is None:
        return handcrafted_condition(img, bank, channels)
    return encode_mim(encoder, img, provenance)


class DiffusionStage(StageWorker):
    def __init__(self, config: RunConfig):
        super().__init__("DiffusionStage", config)
        self.bank = LogGaborBank(n_scales=config.model.n_scales, n_orient=config.model.n_orient)

    def _train_sync(self, model: DiffusionModel, sched: NoiseSchedule, stream, it: int, steps: int, mim_t: MimEncoder | None, seed: int) -> dict:
        cfg = self.config
        model.to(self.device).train()
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.training.lr_diff)
        generator = torch.Generator().manual_seed(seed)
        rng = np.random.default_rng(seed)
        batches = self._batches(stream)

        def step():
            _, x_t = next(batches)
            pair = make_warped_pair(x_t, cfg.dataset.rho, rng)
            cond = mim_condition(x_t, it, mim_t, Provenance.LEARNED_TARGET, self.bank, cfg.model.mim_channels)
            cond_warped = mim_condition(pair.x_warped, it, mim_t, Provenance.LEARNED_TARGET, self.bank, cfg.model.mim_channels)
            check_condition(cond, it)
            loss, _ = diffusion_loss(model, x_t, pair.x_warped, pair.mask, cond, cond_warped, sched, generator, cfg.model.t2_train_low)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            return loss.item()

        guard = frozen(mim_t, "mim_t") if mim_t is not None else nullcontext()
        with guard:
            stats = self._train(steps, step, f"diff it={it}")
        model.eval()
        return stats

    async def train(self, model: DiffusionModel, sched: NoiseSchedule, stream, it: int, steps: int, mim_t: MimEncoder | None = None, seed: int = 0) -> dict:
        """L_n + L_t on randomly warped target pairs; conditions follow the alternation index"""
        self.status = "working"
        self.logger.info(f"Training diffusion model it={it} for {steps} steps")

        try:
            stats = await asyncio.to_thread(self._train_sync, model, sched, stream, it, steps, mim_t, seed)
            self._save_record("diff", it, {"type": "diffusion_training", **stats})
            self.logger.info(f"Diffusion it={it} done, loss {stats['first_loss']:.4f} -> {stats['last_loss']:.4f}")
            self.status = "idle"
            return stats

        except Exception as e:
            self.logger.error(f"Error training diffusion model: {str(e)}")
            self.status = "error"
            raise

    def translator(self, model: DiffusionModel, sched: NoiseSchedule, x_ref: torch.Tensor, it: int, mim_s: MimEncoder | None, generator: torch.Generator | None = None, clip: bool = True):
        """x^S -> x^S->T using x_ref (the target-domain partner) as the noised reference"""
        t2 = inference_t2(sched, self.config.model.t2_infer)
        channels = self.config.model.mim_channels

        def run(x_s: torch.Tensor) -> torch.Tensor:
            cond = mim_condition(x_s, it, mim_s, Provenance.LEARNED_SOURCE, self.bank, channels)
            check_condition(cond, it)
            return translate(model, x_ref, cond, t2, sched, generator, clip=clip)

        return run
