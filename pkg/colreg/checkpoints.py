"""
Checkpoints - stage checkpoints at checkpoints/<stage>_<it>.ckpt, a JSON
ledger of every write and load, chain verification and frozen-network guards.
"""
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
import hashlib
import json

import torch
import torch.nn as nn

from .errors import ChainIntegrityError, CheckpointMissing, FrozenNetworkMutated

CHECKPOINT_VERSION = 1
LEDGER_FILE = "ledger.json"


def state_hash(obj: nn.Module | dict) -> str:
    """sha256 over parameter names, dtypes, shapes and raw bytes"""
    state = obj.state_dict() if isinstance(obj, nn.Module) else obj
    digest = hashlib.sha256()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes() if tensor.dtype != torch.bfloat16 else tensor.float().numpy().tobytes())
    return digest.hexdigest()


def checkpoint_path(ckpt_dir: str | Path, stage: str, it: int) -> Path:
    return Path(ckpt_dir) / f"{stage}_{it}.ckpt"


def _read_ledger(ckpt_dir: Path) -> dict:
    ledger_file = ckpt_dir / LEDGER_FILE
    if not ledger_file.exists():
        return {"entries": []}
    return json.loads(ledger_file.read_text())


def _append_ledger(ckpt_dir: Path, entry: dict) -> None:
    ledger = _read_ledger(ckpt_dir)
    entry["timestamp"] = datetime.now().isoformat()
    ledger["entries"].append(entry)
    (ckpt_dir / LEDGER_FILE).write_text(json.dumps(ledger, indent=2))


def read_ledger(ckpt_dir: str | Path) -> list[dict]:
    return _read_ledger(Path(ckpt_dir))["entries"]


def save_checkpoint(ckpt_dir: str | Path, stage: str, it: int, module: nn.Module, kind: str, extra: dict | None = None) -> str:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    params = {name: value.detach().cpu().clone() for name, value in module.state_dict().items()}
    sha = state_hash(params)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "stage": stage,
        "it": it,
        "params": params,
        "sha256": sha,
        "rng_state": torch.get_rng_state(),
    }
    payload.update(extra or {})
    path = checkpoint_path(ckpt_dir, stage, it)
    torch.save(payload, path)
    _append_ledger(ckpt_dir, {"event": "write", "checkpoint": path.name, "stage": stage, "it": it, "kind": kind, "sha256": sha})
    return sha


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointMissing(path)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ChainIntegrityError(f"{path.name}: unsupported checkpoint format {payload.get('format_version')}")
    if state_hash(payload["params"]) != payload["sha256"]:
        raise ChainIntegrityError(f"{path.name}: parameters do not match their recorded hash")
    return payload


def load_checkpoint(ckpt_dir: str | Path, stage: str, it: int, into: nn.Module, consumer: str) -> dict:
    """Load <stage>_<it> into `into` and record the handoff in the ledger"""
    ckpt_dir = Path(ckpt_dir)
    path = checkpoint_path(ckpt_dir, stage, it)
    payload = read_checkpoint(path)
    into.load_state_dict(payload["params"])
    loaded = state_hash(into)
    if loaded != payload["sha256"]:
        raise ChainIntegrityError(f"{consumer}: loaded parameters differ from {path.name}")
    _append_ledger(ckpt_dir, {"event": "load", "checkpoint": path.name, "consumer": consumer, "sha256": loaded})
    return payload


def verify_chain(ckpt_dir: str | Path) -> list[dict]:
    """Re-hash every written checkpoint and check each load against its write"""
    ckpt_dir = Path(ckpt_dir)
    written = {}
    for entry in read_ledger(ckpt_dir):
        if entry["event"] == "write":
            written[entry["checkpoint"]] = entry["sha256"]
        elif entry["event"] == "load":
            if written.get(entry["checkpoint"]) != entry["sha256"]:
                raise ChainIntegrityError(f"{entry['consumer']} loaded {entry['checkpoint']} with a different hash than was written")

    verified = []
    for name, sha in written.items():
        payload = read_checkpoint(ckpt_dir / name)
        if payload["sha256"] != sha:
            raise ChainIntegrityError(f"{name} was overwritten after it was recorded")
        verified.append({"checkpoint": name, "sha256": sha})
    return verified


@contextmanager
def frozen(net: nn.Module, name: str = "network"):
    """Use `net` as a read-only data generator; raises if its parameters change"""
    before = state_hash(net)
    was_training = net.training
    flags = [p.requires_grad for p in net.parameters()]
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    try:
        yield net
    finally:
        for p, flag in zip(net.parameters(), flags):
            p.requires_grad_(flag)
        net.train(was_training)
    if state_hash(net) != before:
        raise FrozenNetworkMutated(f"{name} changed while frozen")
