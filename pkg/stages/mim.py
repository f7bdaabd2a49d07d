#!/usr/bin/env python3
"""
MIM Stage - trains the target and source MIM encoders against pseudo-labels
from the frozen distilled registration network of the previous alternation.
"""
import asyncio
from contextlib import nullcontext

import torch

from colreg.batches import PseudoLabelBatch, PseudoLabelStats, make_pseudo_labels, stack_homographies
from colreg.checkpoints import frozen
from colreg.geometry import warp
from colreg.mimfeat import LogGaborBank, MimEncoder, MimFeature, Provenance, encode_mim, handcrafted_condition, loss_mim_source, loss_mim_target
from colreg.mimgcd import DiffusionModel, NoiseSchedule, t2_band, translate
from colreg.regnet import RegNetwork
from config import RunConfig

from .base import StageWorker

MAX_EMPTY_BATCHES = 100


class MimStage(StageWorker):
    def __init__(self, config: RunConfig):
        super().__init__("MimStage", config)
        self.bank = LogGaborBank(n_scales=config.model.n_scales, n_orient=config.model.n_orient)

    def anchor_feature(self, x_s: torch.Tensor, it: int, mim_s_prev: MimEncoder | None) -> MimFeature:
        """Frozen source-side map: normalized handcrafted MIM at it == 1, previous source encoder after"""
        if it <= 1 or mim_s_prev is None:
            return handcrafted_condition(x_s, self.bank, self.config.model.mim_channels)
        with torch.no_grad():
            return encode_mim(mim_s_prev, x_s, Provenance.LEARNED_SOURCE)

    def _frozen_anchor(self, mim_s_prev: MimEncoder | None):
        return frozen(mim_s_prev, "mim_s") if mim_s_prev is not None else nullcontext()

    def _pseudo_batch(self, reg_c_prev: RegNetwork, batches, stats: PseudoLabelStats) -> PseudoLabelBatch:
        for _ in range(MAX_EMPTY_BATCHES):
            for batch in make_pseudo_labels(reg_c_prev, [next(batches)], stats):
                return batch
        raise RuntimeError(f"No usable pseudo-labels in {MAX_EMPTY_BATCHES} batches")

    def _train_target_sync(self, mim_t, mim_s_prev, reg_c_prev, stream, it, steps, seed) -> dict:
        torch.manual_seed(seed)
        mim_t.to(self.device).train()
        optimizer = torch.optim.Adam(mim_t.parameters(), lr=self.config.training.lr_mim)
        batches = self._batches(stream)
        pseudo_stats = PseudoLabelStats()

        def step():
            pb = self._pseudo_batch(reg_c_prev, batches, pseudo_stats)
            # source map carried into the x^T frame by H-hat
            xs_feat = self.anchor_feature(pb.x_s, it, mim_s_prev)
            xs_warped, mask = warp(xs_feat.map, stack_homographies(pb.h_hat))
            xt_feat = encode_mim(mim_t, pb.x_t, Provenance.LEARNED_TARGET)
            loss = loss_mim_target(xs_warped, xt_feat, mask)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            return loss.item()

        with frozen(reg_c_prev, "reg_c"), self._frozen_anchor(mim_s_prev):
            stats = self._train(steps, step, f"mim_t it={it}")
        stats["pseudo_pairs"] = pseudo_stats.pairs
        stats["skipped_pseudo_labels"] = pseudo_stats.skipped
        mim_t.eval()
        return stats

    async def train_target(self, mim_t: MimEncoder, mim_s_prev: MimEncoder | None, reg_c_prev: RegNetwork, stream, it: int, steps: int, seed: int = 0) -> dict:
        self.status = "working"
        self.logger.info(f"Training target MIM encoder it={it} for {steps} steps")

        try:
            stats = await asyncio.to_thread(self._train_target_sync, mim_t, mim_s_prev, reg_c_prev, stream, it, steps, seed)
            self._save_record("mim_t", it, {"type": "mim_target_training", **stats})
            self.logger.info(f"Target MIM encoder it={it} done, loss {stats['first_loss']:.4f} -> {stats['last_loss']:.4f}")
            self.status = "idle"
            return stats

        except Exception as e:
            self.logger.error(f"Error training target MIM encoder: {str(e)}")
            self.status = "error"
            raise

    def _train_source_sync(self, mim_s, mim_s_prev, diff, sched, reg_c_prev, stream, it, steps, seed) -> dict:
        cfg = self.config
        torch.manual_seed(seed)
        mim_s.to(self.device).train()
        optimizer = torch.optim.Adam(mim_s.parameters(), lr=cfg.training.lr_mim)
        generator = torch.Generator().manual_seed(seed)
        lo, hi = t2_band(sched, cfg.model.t2_train_low)
        batches = self._batches(stream)
        pseudo_stats = PseudoLabelStats()

        def step():
            pb = self._pseudo_batch(reg_c_prev, batches, pseudo_stats)
            xs_feat = encode_mim(mim_s, pb.x_s, Provenance.LEARNED_SOURCE)
            anchor = self.anchor_feature(pb.x_s, it, mim_s_prev)
            t2 = int(torch.randint(lo, hi + 1, (1,), generator=generator))
            # gradients reach the encoder through the frozen translator's condition input
            x_trans = translate(diff, pb.x_t, xs_feat, t2, sched, generator, clip=False)
            loss = loss_mim_source(x_trans, pb.x_tw, pb.mask, xs_feat, anchor, cfg.training.lambda_mds)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            return loss.item()

        with frozen(reg_c_prev, "reg_c"), frozen(diff, "diff"), self._frozen_anchor(mim_s_prev):
            stats = self._train(steps, step, f"mim_s it={it}")
        stats["pseudo_pairs"] = pseudo_stats.pairs
        stats["skipped_pseudo_labels"] = pseudo_stats.skipped
        mim_s.eval()
        return stats

    async def train_source(self, mim_s: MimEncoder, mim_s_prev: MimEncoder | None, diff: DiffusionModel, sched: NoiseSchedule, reg_c_prev: RegNetwork, stream, it: int, steps: int, seed: int = 0) -> dict:
        """lambda_mds * translation consistency with x^T,W plus drift from the frozen anchor"""
        self.status = "working"
        self.logger.info(f"Training source MIM encoder it={it} for {steps} steps")

        try:
            stats = await asyncio.to_thread(self._train_source_sync, mim_s, mim_s_prev, diff, sched, reg_c_prev, stream, it, steps, seed)
            self._save_record("mim_s", it, {"type": "mim_source_training", **stats})
            self.logger.info(f"Source MIM encoder it={it} done, loss {stats['first_loss']:.4f} -> {stats['last_loss']:.4f}")
            self.status = "idle"
            return stats

        except Exception as e:
            self.logger.error(f"Error training source MIM encoder: {str(e)}")
            self.status = "error"
            raise
