from __future__ import annotations

import asyncio
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from itertools import product
from pathlib import Path
from typing import Any

import numpy as np
from jinja2 import Environment, FileSystemLoader, StrictUndefined

from src.app.core.commands import CommandContext, CommandRouter
from src.app.core.config import settings
from src.app.core.errors import ConfigError, ShapeMismatchError, StateError
from src.app.core.rng import RngState
from src.app.db import codecs
from src.app.db.repositories import FileRunRepository
from src.app.models.experiments import AblateConfig, EvalConfig, GenPhantomsConfig, ReportConfig
from src.app.services import distributions
from src.app.services.experiments import (
    ablation_trends,
    aggregate_ablation,
    run_ablation,
    run_ablation_group,
    run_reflow_baseline,
)
from src.app.services.metrics import alignment_export, calibrate_noise_floor, evaluate_samples
from src.app.services.nn import Tensor
from src.app.services.phantom import build_dataset

logger = logging.getLogger(__name__)

router = CommandRouter()


def read_samples(path: Path) -> Tensor:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise StateError(f"samples file {path} not found") from exc
    samples, _ = codecs.decode_samples(blob)
    return samples


@router.command("eval", config=EvalConfig, help="Метрики выборки против эталона", flags={"seed": "seed"})
def eval_command(ctx: CommandContext[EvalConfig]) -> None:
    cfg, run = ctx.config, ctx.run
    rng = RngState(cfg.seed).derive("eval")
    samples = read_samples(cfg.samples)
    if cfg.reference is not None:
        reference = read_samples(cfg.reference)
    else:
        reference = distributions.sample(cfg.target, cfg.n_reference, rng.derive("reference"))
    if samples.shape[1] != reference.shape[1]:
        raise ShapeMismatchError(f"samples have dimension {samples.shape[1]}, reference {reference.shape[1]}")

    for report in evaluate_samples(
        samples, reference, rng=rng, n_projections=cfg.n_projections, feature_seed=cfg.feature_seed, label="eval"
    ):
        run.metric(report)

    if cfg.target is None:
        return
    n = samples.shape[0]
    table = alignment_export({"samples": lambda _n, _rng: samples}, cfg.target, n, cfg.bins, rng)
    run.record(run.runs.write_table("alignment.csv", table.rows))
    run.record(run.runs.write_table("alignment_summary.csv", table.summary_rows()))
    floor = calibrate_noise_floor(cfg.target, n, rng.derive("floor"), n_projections=cfg.n_projections)
    run.record(run.runs.write_text("noise_floor.json", json.dumps(floor.as_dict(), indent=2, sort_keys=True)))


async def _ablate_in_workers(cfg: AblateConfig, workers: int) -> list[dict[str, Any]]:
    """Группы абляции в отдельных процессах; порядок строк как у последовательного прогона."""
    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        jobs = []
        for seed in cfg.seeds:
            for stage1, tweedie in product(cfg.stage1, cfg.tweedie):
                jobs.append(loop.run_in_executor(pool, run_ablation_group, cfg, seed, stage1, tweedie))
            if cfg.include_reflow:
                jobs.append(loop.run_in_executor(pool, run_reflow_baseline, cfg, seed))
        results = await asyncio.gather(*jobs)
    rows: list[dict[str, Any]] = []
    for result in results:
        rows.extend(result if isinstance(result, list) else [result])
    return rows


@router.command(
    "ablate",
    config=AblateConfig,
    help="Сетка абляции: этап 1, Tweedie, потери, ранг LoRA",
    flags={"seed": "seeds", "rank": "ranks", "steps": "stage2_train.steps"},
)
def ablate_command(ctx: CommandContext[AblateConfig]) -> None:
    cfg, run = ctx.config, ctx.run
    if settings.WORKERS > 1:
        logger.info("ablation across %d worker processes", settings.WORKERS)
        rows = asyncio.run(_ablate_in_workers(cfg, settings.WORKERS))
    else:
        rows = run_ablation(cfg)
    failed = sum(1 for row in rows if row["failed"])
    if failed:
        logger.warning("%d of %d ablation cells failed", failed, len(rows))
    run.record(run.runs.write_table("ablation_raw.csv", rows))
    run.record(run.runs.write_table("ablation.csv", aggregate_ablation(rows)))
    trends = ablation_trends(cfg, rows)
    run.record(run.runs.write_text("ablation_trends.json", trends.model_dump_json(indent=2)))
    logger.info("ablation trends: %d/%d seeds pass", sum(trends.passes), len(trends.seeds))


@router.command(
    "gen-phantoms",
    config=GenPhantomsConfig,
    help="Экспорт набора синтетических фантомов",
    flags={"seed": "seed"},
)
def gen_phantoms_command(ctx: CommandContext[GenPhantomsConfig]) -> None:
    cfg, run = ctx.config, ctx.run
    if cfg.phantoms.dataset is not None:
        raise ConfigError("gen-phantoms builds a dataset; phantoms.dataset must be unset")
    samples = build_dataset(cfg.phantoms.n, cfg.phantoms.severity_mix, cfg.seed, size=cfg.phantoms.size)
    run.phantoms().save(samples)
    run.record("phantoms/manifest.csv")
    counts = {split: sum(1 for s in samples if s.split == split) for split in ("train", "val", "test")}
    logger.info("exported %d phantoms: %s", len(samples), counts)


def _run_summary(path: Path) -> dict[str, Any]:
    repo = FileRunRepository(path)
    try:
        manifest = repo.read_manifest()
    except StateError:
        logger.warning("skipping %s: no manifest", path)
        return {}
    ablation = repo.read_table("ablation.csv") if (Path(path) / "ablation.csv").exists() else []
    return {"path": str(path), "manifest": manifest, "metrics": repo.metrics(), "ablation": ablation}


def format_number(value: Any) -> str:
    try:
        number = float(value)
    except (TypeError, ValueError):
        return "n/a"
    return "n/a" if np.isnan(number) else f"{number:.4g}"


def render_report(cfg: ReportConfig, templates_dir: Path = settings.TEMPLATES_DIR) -> str:
    env = Environment(
        loader=FileSystemLoader(str(templates_dir)),
        undefined=StrictUndefined,
        trim_blocks=True,
        lstrip_blocks=True,
    )
    env.filters["num"] = format_number
    runs = [summary for summary in map(_run_summary, cfg.runs) if summary]
    return env.get_template("report.md.j2").render(title=cfg.title, runs=runs, version=settings.VERSION)


@router.command("report", config=ReportConfig, help="Markdown-отчёт по каталогам запусков")
def report_command(ctx: CommandContext[ReportConfig]) -> None:
    cfg, run = ctx.config, ctx.run
    if not cfg.runs:
        raise ConfigError("report needs at least one run directory")
    run.record(run.runs.write_text("report.md", render_report(cfg)))
