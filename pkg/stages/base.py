"""
Stage worker base - shared name/status/logger/record plumbing for the
training and evaluation workers driven by the orchestrator.
"""
from datetime import datetime
from pathlib import Path
import json
import time

import numpy as np
import torch
from tqdm import tqdm

from colreg.logs import setup_logging
from config import RunConfig


class StageWorker:
    def __init__(self, name: str, config: RunConfig):
        self.name = name
        self.config = config
        self.status = "idle"
        self.logger = setup_logging(name, config.output.log_dir)
        self.last_record: dict | None = None
        self.device = torch.device(config.training.device)

    def _train(self, steps: int, step_fn, desc: str) -> dict:
        """Run `step_fn()` `steps` times; returns loss statistics"""
        losses = []
        start = time.perf_counter()
        for step in tqdm(range(steps), desc=desc, leave=False):
            loss = float(step_fn())
            if not np.isfinite(loss):
                raise FloatingPointError(f"{desc}: loss became {loss} at step {step}")
            losses.append(loss)
        return {
            "steps": steps,
            "first_loss": losses[0] if losses else None,
            "last_loss": losses[-1] if losses else None,
            "mean_loss": float(np.mean(losses)) if losses else None,
            "seconds": time.perf_counter() - start,
        }

    def _batches(self, stream):
        """(source, target) on the worker's device from a PairDataset stream"""
        for src, tgt, _ in stream:
            yield src.to(self.device), tgt.to(self.device)

    def _save_record(self, stage: str, it: int, data: dict) -> Path:
        """records/<stage>_<it>.json plus one line in progress.jsonl"""
        record = {
            "worker": self.name,
            "stage": stage,
            "it": it,
            "timestamp": datetime.now().isoformat(),
            **data,
        }
        record_dir = self.config.output.record_dir
        record_dir.mkdir(parents=True, exist_ok=True)
        path = record_dir / f"{stage}_{it}.json"
        path.write_text(json.dumps(record, indent=2))
        with open(self.config.output.run_dir / "progress.jsonl", "a") as f:
            f.write(json.dumps(record) + "\n")
        self.last_record = record
        return path

    def get_status(self) -> dict:
        return {
            "name": self.name,
            "status": self.status,
            "last_record": self.last_record,
            "last_active": datetime.now().isoformat(),
        }
