import asyncio
import json

import numpy as np
import pytest
import torch

from colreg.checkpoints import read_ledger, state_hash, verify_chain
from colreg.datapipe import load_prepared
from colreg.errors import StageFailure
from colreg.evaluate import ace, evaluate_dataset, infer
from colreg.geometry import corners_to_homography, invert, random_homography, warp
from config import load_config
from orchestrator import AlternationOrchestrator, PlanStep, alternation_plan, network_from_checkpoint
from tests.conftest import tiny_overrides


def test_single_alternation_plan():
    assert [s.describe() for s in alternation_plan(1)] == [
        "train diff(0)",
        "train reg_s(0)",
        "load reg_c <- reg_s(0)",
        "train reg_c(0)",
    ]


def test_second_alternation_order():
    steps = [s.describe() for s in alternation_plan(2)][4:]
    assert steps == [
        "skip load mim_t <- mim_s(0) [it < 2, fresh init]",
        "train mim_t(1)",
        "load diff <- diff(0)",
        "train diff(1)",
        "load mim_s <- mim_t(1)",
        "train mim_s(1)",
        "load reg_s <- reg_c(0)",
        "train reg_s(1)",
        "load reg_c <- reg_s(1)",
        "train reg_c(1)",
    ]


def test_third_alternation_loads_previous_source_encoder():
    steps = alternation_plan(3)
    assert len(steps) == 24
    assert steps[14] == PlanStep("load", "mim_t", 2, ("mim_s", 1))
    assert [s.stage for s in steps if s.action == "train"][-5:] == ["mim_t", "diff", "mim_s", "reg_s", "reg_c"]
    with pytest.raises(ValueError):
        alternation_plan(0)


def test_budget_lookup(tiny_config):
    tiny_config.training.budgets.diff_bootstrap = 9
    tiny_config.training.budgets.diff = 4
    orchestrator = AlternationOrchestrator(tiny_config)
    assert orchestrator.budget("diff", 0) == 9
    assert orchestrator.budget("diff", 1) == 4
    assert orchestrator.budget("reg_c", 0) == 1


def test_training_run_chains_checkpoints(tiny_config):
    orchestrator = AlternationOrchestrator(tiny_config)
    reg_c = asyncio.run(orchestrator.run_training())
    ckpt_dir = tiny_config.output.checkpoint_dir

    written = {p.name for p in ckpt_dir.glob("*.ckpt")}
    assert written == {"diff_0.ckpt", "reg_s_0.ckpt", "reg_c_0.ckpt", "mim_t_1.ckpt", "diff_1.ckpt", "mim_s_1.ckpt", "reg_s_1.ckpt", "reg_c_1.ckpt"}
    assert len(verify_chain(ckpt_dir)) == 8
    assert orchestrator.status == "completed"

    ledger = read_ledger(ckpt_dir)
    writes = {e["checkpoint"]: e["sha256"] for e in ledger if e["event"] == "write"}
    loads = {(e["checkpoint"], e["consumer"]) for e in ledger if e["event"] == "load"}
    assert ("reg_s_0.ckpt", "reg_c_0") in loads
    assert ("reg_c_0.ckpt", "reg_s_1") in loads
    assert ("reg_c_0.ckpt", "mim_t_1") in loads
    assert ("mim_t_1.ckpt", "mim_s_1") in loads

    final, payload = network_from_checkpoint(ckpt_dir / "reg_c_1.ckpt")
    assert state_hash(final) == state_hash(reg_c) == writes["reg_c_1.ckpt"]
    assert payload["architecture"]["width"] == 8

    progress = (tiny_config.output.run_dir / "progress.jsonl").read_text().splitlines()
    assert [json.loads(line)["stage"] for line in progress] == ["diff", "reg_s", "reg_c", "mim_t", "diff", "mim_s", "reg_s", "reg_c"]
    assert (tiny_config.output.run_dir / "effective_config.json").exists()

    status = orchestrator.get_system_status()
    assert status["checkpoints_written"] == 8
    assert status["workers_count"] == 5


def test_resume_skips_finished_stages(tiny_config):
    tiny_config.training.alternations = 1
    asyncio.run(AlternationOrchestrator(tiny_config).run_training())
    writes_before = [e for e in read_ledger(tiny_config.output.checkpoint_dir) if e["event"] == "write"]
    asyncio.run(AlternationOrchestrator(tiny_config).run_training(resume=True))
    ledger = read_ledger(tiny_config.output.checkpoint_dir)
    assert [e for e in ledger if e["event"] == "write"] == writes_before
    assert sum(1 for e in ledger if e.get("consumer") == "resume") == 3


def test_bootstrap_clones_intermediate_into_distilled_network(tiny_config):
    tiny_config.training.alternations = 1
    orchestrator = AlternationOrchestrator(tiny_config)
    diff, reg_s, reg_c = asyncio.run(orchestrator.bootstrap_stage())
    ledger = read_ledger(tiny_config.output.checkpoint_dir)
    handoff = next(e for e in ledger if e["event"] == "load" and e["consumer"] == "reg_c_0")
    reg_s_write = next(e for e in ledger if e["event"] == "write" and e["checkpoint"] == "reg_s_0.ckpt")
    assert handoff["sha256"] == reg_s_write["sha256"] == state_hash(reg_s)


def test_failing_stage_is_reported_with_its_name(tiny_config, monkeypatch):
    orchestrator = AlternationOrchestrator(tiny_config)
    asyncio.run(orchestrator.initialize_workers())

    async def broken(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(orchestrator.workers["registration"], "train_intermediate", broken)
    with pytest.raises(StageFailure) as info:
        asyncio.run(orchestrator.run_training())
    assert info.value.stage == "reg_s"
    assert info.value.it == 0
    assert orchestrator.status == "error"
    assert (tiny_config.output.checkpoint_dir / "diff_0.ckpt").exists()


def test_networks_are_seeded(tiny_config):
    a = AlternationOrchestrator(tiny_config).build_networks()
    b = AlternationOrchestrator(tiny_config).build_networks()
    for stage in a:
        assert all(torch.equal(p, q) for p, q in zip(a[stage].parameters(), b[stage].parameters()))


def _final_mace(config) -> float:
    net, _ = network_from_checkpoint(config.output.checkpoint_dir / f"reg_c_{config.training.alternations - 1}.ckpt")
    return evaluate_dataset(net, load_prepared(config.prepared_dir, "test"), "toy").mace


def test_same_seed_gives_same_result(tmp_path):
    maces = []
    for name in ("first", "second"):
        config = load_config(None, tiny_overrides(tmp_path / name, budget=2), env={})
        asyncio.run(AlternationOrchestrator(config).run_training())
        maces.append(_final_mace(config))
    assert abs(maces[0] - maces[1]) < 1e-3


@pytest.mark.slow
def test_bootstrap_learns_toy_registration(tmp_path):
    overrides = [
        f"output.root={tmp_path / 'runs'}",
        f"dataset.root={tmp_path / 'toy'}",
        "training.alternations=1",
        "training.budgets.diff_bootstrap=2000",
        "training.budgets.reg_s_bootstrap=2000",
        "training.budgets.reg_c=500",
    ]
    config = load_config(None, overrides, env={})
    orchestrator = AlternationOrchestrator(config)
    _, reg_s, _ = asyncio.run(orchestrator.bootstrap_stage())

    records = load_prepared(config.prepared_dir, "test")
    rng = np.random.default_rng(0)
    errors = []
    for rec in records:
        src, _ = rec.load()
        x = torch.from_numpy(src)[None, None]
        h, dp = random_homography(rng, config.dataset.rho, tuple(x.shape[-2:]))
        moved, _ = warp(x.double(), invert(h))
        errors.append(ace(corners_to_homography(dp, tuple(x.shape[-2:])), infer(reg_s, moved.float()[0], x[0]), tuple(x.shape[-2:])))
    assert float(np.mean(errors)) < 3.0


@pytest.mark.slow
def test_alternations_do_not_degrade_the_distilled_network(tmp_path):
    overrides = [
        f"output.root={tmp_path / 'runs'}",
        f"dataset.root={tmp_path / 'toy'}",
        "training.alternations=3",
        "training.budgets.diff_bootstrap=2000",
        "training.budgets.reg_s_bootstrap=2000",
        "training.budgets.reg_c=500",
    ]
    config = load_config(None, overrides, env={})
    asyncio.run(AlternationOrchestrator(config).run_training())

    records = load_prepared(config.prepared_dir, "test")
    mace = {}
    for name in ("reg_s_0", "reg_c_0", "reg_c_1", "reg_c_2"):
        net, _ = network_from_checkpoint(config.output.checkpoint_dir / f"{name}.ckpt")
        mace[name] = evaluate_dataset(net, records, "toy", name).mace

    tolerance = 0.5
    assert mace["reg_c_0"] <= mace["reg_s_0"] + tolerance, mace
    assert mace["reg_c_1"] <= mace["reg_c_0"] + tolerance, mace
    assert mace["reg_c_2"] <= mace["reg_c_1"] + tolerance, mace
