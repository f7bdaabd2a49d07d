#!/usr/bin/env python3
"""
Evaluation Stage - corner-error evaluation of registration checkpoints,
zero-shot grids and report files.
"""
import asyncio
import json
from pathlib import Path

from colreg import evaluate
from colreg.evaluate import EvalReport, ZeroShotMatrix
from config import RunConfig

from .base import StageWorker

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"


class EvaluationStage(StageWorker):
    def __init__(self, config: RunConfig):
        super().__init__("EvaluationStage", config)

    def write_report(self, report: EvalReport, name: str) -> dict[str, Path]:
        report_dir = self.config.output.report_dir
        paths = {
            "json": report.save_json(report_dir / f"{name}.json"),
            "csv": report.save_csv(report_dir / f"{name}.csv"),
            "plot": evaluate.plot_error_curves({name: report}, report_dir / f"{name}.png"),
        }
        return paths

    async def evaluate(self, net, records, dataset: str, checkpoint: str, name: str = "eval") -> EvalReport:
        self.status = "working"
        self.logger.info(f"Evaluating {checkpoint} on {len(records)} {dataset} pairs")

        try:
            report = await asyncio.to_thread(
                evaluate.evaluate_dataset, net, records, dataset, checkpoint, self.config.dataset.channels
            )
            paths = self.write_report(report, name)
            self._save_record("eval", 0, {"type": "evaluation", "files": {k: str(v) for k, v in paths.items()}, **report.summary()})
            self.logger.info(f"MACE {report.mace:.3f} px over {report.count} pairs")
            self.status = "idle"
            return report

        except Exception as e:
            self.logger.error(f"Error evaluating {checkpoint}: {str(e)}")
            self.status = "error"
            raise

    async def zeroshot(self, checkpoints: dict, datasets: dict, name: str = "zeroshot") -> ZeroShotMatrix:
        """Every checkpoint against every dataset's test split"""
        self.status = "working"
        self.logger.info(f"Zero-shot grid: {len(checkpoints)} checkpoints x {len(datasets)} datasets")

        try:
            matrix = await asyncio.to_thread(evaluate.zero_shot_matrix, checkpoints, datasets, self.config.dataset.channels)
            report_dir = self.config.output.report_dir
            report_dir.mkdir(parents=True, exist_ok=True)
            (report_dir / f"{name}.json").write_text(json.dumps(matrix.to_dict(), indent=2))
            reports = list(matrix.cells.values())
            (report_dir / f"{name}.md").write_text(evaluate.render_report(reports, TEMPLATE_DIR, title="Zero-shot evaluation"))
            self._save_record("zeroshot", 0, {"type": "zero_shot", "mace": matrix.mace_table(), "checkpoints": matrix.checkpoints, "datasets": matrix.datasets})
            self.status = "idle"
            return matrix

        except Exception as e:
            self.logger.error(f"Error in zero-shot evaluation: {str(e)}")
            self.status = "error"
            raise

    def render(self, report_files: list[Path], out_path: Path, title: str = "Evaluation") -> Path:
        """Markdown table plus a combined error-curve plot from saved reports"""
        reports = [EvalReport.load_json(p) for p in report_files]
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(evaluate.render_report(reports, TEMPLATE_DIR, title=title))
        labels = {f"{r.checkpoint}@{r.dataset}": r for r in reports}
        evaluate.plot_error_curves(labels, out_path.with_suffix(".png"))
        return out_path
