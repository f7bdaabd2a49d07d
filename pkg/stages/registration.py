#!/usr/bin/env python3
"""
Registration Stage - trains the intermediate network on self-supervised
translated pairs and distills it into the cross-modal network through
pseudo-labels.
"""
import asyncio
from contextlib import ExitStack

import numpy as np
import torch

from colreg.batches import PseudoLabelStats, make_pseudo_labels, make_selfsup_batch
from colreg.checkpoints import frozen
from colreg.regnet import RegNetwork, loss_displacement, loss_pseudo, register
from config import RunConfig

from .base import StageWorker


class RegistrationStage(StageWorker):
    def __init__(self, config: RunConfig):
        super().__init__("RegistrationStage", config)

    def _optimizer(self, net: RegNetwork, steps: int):
        lr = self.config.training.lr_reg_max
        optimizer = torch.optim.Adam(net.parameters(), lr=lr)
        scheduler = torch.optim.lr_scheduler.OneCycleLR(optimizer, max_lr=lr, total_steps=steps + 1)
        return optimizer, scheduler

    def _train_intermediate_sync(self, reg_s, translator_for, generators, stream, it, steps, seed) -> dict:
        torch.manual_seed(seed)
        reg_s.to(self.device).train()
        optimizer, scheduler = self._optimizer(reg_s, steps)
        rng = np.random.default_rng(seed)
        batches = self._batches(stream)

        def step():
            x_s, x_t = next(batches)
            batch = make_selfsup_batch(x_s, self.config.dataset.rho, translator_for(x_t), rng)
            pred = register(reg_s, batch.x_s_prime, batch.x_s2t)
            loss = loss_displacement(pred, batch.gt)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            return loss.item()

        with ExitStack() as stack:
            for name, net in generators.items():
                stack.enter_context(frozen(net, name))
            stats = self._train(steps, step, f"reg_s it={it}")
        reg_s.eval()
        return stats

    async def train_intermediate(self, reg_s: RegNetwork, translator_for, generators: dict, stream, it: int, steps: int, seed: int = 0) -> dict:
        """Displacement loss on (x^S', x^S->T) pairs.

        `translator_for(x_t)` returns the frozen x^S -> x^S->T map for one batch;
        `generators` names the networks behind it, held frozen for the stage.
        """
        self.status = "working"
        self.logger.info(f"Training intermediate registration network it={it} for {steps} steps")

        try:
            stats = await asyncio.to_thread(self._train_intermediate_sync, reg_s, translator_for, generators, stream, it, steps, seed)
            self._save_record("reg_s", it, {"type": "intermediate_registration_training", **stats})
            self.logger.info(f"Intermediate network it={it} done, loss {stats['first_loss']:.4f} -> {stats['last_loss']:.4f}")
            self.status = "idle"
            return stats

        except Exception as e:
            self.logger.error(f"Error training intermediate registration network: {str(e)}")
            self.status = "error"
            raise

    def _train_distilled_sync(self, reg_c, reg_s, stream, it, steps, seed) -> dict:
        torch.manual_seed(seed)
        reg_c.to(self.device).train()
        optimizer, scheduler = self._optimizer(reg_c, steps)
        pseudo_stats = PseudoLabelStats()
        labelled = make_pseudo_labels(reg_s, self._batches(stream), pseudo_stats)

        def step():
            pb = next(labelled)
            pred = register(reg_c, pb.x_s, pb.x_t)
            loss = loss_pseudo(pred, pb.pl)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            return loss.item()

        with frozen(reg_s, "reg_s"):
            stats = self._train(steps, step, f"reg_c it={it}")
        stats["pseudo_pairs"] = pseudo_stats.pairs
        stats["skipped_pseudo_labels"] = pseudo_stats.skipped
        reg_c.eval()
        return stats

    async def train_distilled(self, reg_c: RegNetwork, reg_s: RegNetwork, stream, it: int, steps: int, seed: int = 0) -> dict:
        """Pseudo-label loss against the frozen intermediate network's final estimate"""
        self.status = "working"
        self.logger.info(f"Training distilled registration network it={it} for {steps} steps")

        try:
            stats = await asyncio.to_thread(self._train_distilled_sync, reg_c, reg_s, stream, it, steps, seed)
            self._save_record("reg_c", it, {"type": "distilled_registration_training", **stats})
            self.logger.info(f"Distilled network it={it} done, loss {stats['first_loss']:.4f} -> {stats['last_loss']:.4f}")
            self.status = "idle"
            return stats

        except Exception as e:
            self.logger.error(f"Error training distilled registration network: {str(e)}")
            self.status = "error"
            raise
