#!/usr/bin/env python3
"""
Data Stage - prepares a dataset (toy generation, unaligned pairs, frozen
test perturbations) and serves record splits to the training stages.
"""
import asyncio
from pathlib import Path

from colreg import datapipe
from colreg.datapipe import PairRecord
from config import RunConfig

from .base import StageWorker


class DataStage(StageWorker):
    def __init__(self, config: RunConfig):
        super().__init__("DataStage", config)

    def _prepare(self) -> datapipe.PreparedDataset:
        ds = self.config.dataset
        root = Path(ds.root)
        if ds.name == "toy" and not (root / "manifest.json").exists():
            self.logger.info(f"Generating toy dataset at {root}")
            datapipe.make_toy_dataset(root, seed=ds.seed)
        return datapipe.prepare_dataset(
            root,
            self.config.prepared_dir,
            rho=ds.rho,
            patch=ds.patch,
            oversample=ds.oversample,
            seed=ds.seed,
            channels=ds.channels,
        )

    async def prepare(self) -> datapipe.PreparedDataset:
        """Freeze train/test pairs for the configured dataset"""
        self.status = "working"
        self.logger.info(f"Preparing dataset {self.config.dataset.name} into {self.config.prepared_dir}")

        try:
            prepared = await asyncio.to_thread(self._prepare)
            if prepared.reused:
                self.logger.info(f"Prepared dataset is up to date ({prepared.counts})")
            else:
                self.logger.info(f"Prepared {prepared.counts} records")
            self.status = "idle"
            return prepared

        except Exception as e:
            self.logger.error(f"Error preparing dataset: {str(e)}")
            self.status = "error"
            raise

    def records(self, split: str, prepared_dir: str | Path | None = None) -> list[PairRecord]:
        return datapipe.load_prepared(prepared_dir or self.config.prepared_dir, split)

    def stream(self, split: str, seed: int):
        """Endless shuffled (source, target, dp) batches of one split"""
        return datapipe.infinite_batches(
            self.records(split),
            self.config.training.batch_size,
            seed=seed,
            channels=self.config.dataset.channels,
        )
