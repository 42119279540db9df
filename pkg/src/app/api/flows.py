from __future__ import annotations

import logging
import time
from pathlib import Path

import numpy as np

from src.app.core.commands import CommandContext, CommandRouter
from src.app.core.errors import ConfigError, ShapeMismatchError
from src.app.core.rng import RngState
from src.app.db import codecs
from src.app.db.repositories import FileCheckpointRepository
from src.app.db.storage import RunDirectory
from src.app.models.experiments import DistillConfig, SampleConfig, TrainFlowConfig
from src.app.models.reports import NfeReport
from src.app.services import distributions
from src.app.services.distill import distill, k_step_sample, timed_sample
from src.app.services.experiments import PhantomTask, held_out_conditions, load_phantoms, resolve_score
from src.app.services.flow import (
    CountingField,
    IndependentCoupling,
    StoredCoupling,
    reflow_repair,
    straightness,
    straightness_sweep,
    train_flow,
    train_rectified_flow,
)
from src.app.services.lora import LoraNetwork
from src.app.services.metrics import evaluate_samples
from src.app.services.nn import Tensor, VelocityNet
from src.app.services.stage1 import generate
from src.app.services.tweedie import train_corrected_flow

logger = logging.getLogger(__name__)

router = CommandRouter()


def load_checkpoint(path: Path) -> codecs.Checkpoint:
    path = Path(path)
    return FileCheckpointRepository(path.parent).load(path.stem)


def _write_metrics(run: RunDirectory, samples: Tensor, reference: Tensor, rng: RngState, label: str) -> None:
    for report in evaluate_samples(samples, reference, rng=rng, label=label):
        run.metric(report)


@router.command(
    "train-flow",
    config=TrainFlowConfig,
    help="Обучение rectified flow (с reflow-раундами)",
    flags={"seed": "seed", "steps": "train.steps"},
)
def train_flow_command(ctx: CommandContext[TrainFlowConfig]) -> None:
    cfg, run = ctx.config, ctx.run
    train = cfg.train.model_copy(update={"seed": cfg.seed})
    net = VelocityNet.init(cfg.net_config(), RngState(cfg.seed).derive("flow", "init"))
    if cfg.objective == "corrected":
        if train.steps < 1:
            raise ConfigError("flow training needs at least one step")
        score = resolve_score(cfg.score, cfg.prior, cfg.target, cfg.seed)
        trace = train_corrected_flow(
            net, IndependentCoupling(cfg.prior, cfg.target), train, cfg.schedule, score
        )
    else:
        net, trace = train_rectified_flow(net, cfg.prior, cfg.target, train)

    loss_rows = [{**row, "round": 0} for row in trace.rows()]
    eval_rng = RngState(cfg.seed).derive("flow", "eval")
    pairs = reflow_repair(net, cfg.prior, cfg.straightness_pairs, eval_rng.derive(0), n_steps=cfg.sampler_steps)
    straight_rows = [{"round": 0, "straightness": straightness(net, pairs, cfg.grid_size), "seed": cfg.seed}]
    for round_ in range(1, cfg.reflow_rounds + 1):
        coupling = reflow_repair(
            net, cfg.prior, cfg.reflow_pairs, RngState(cfg.seed).derive("reflow", round_), n_steps=cfg.sampler_steps
        )
        trace = train_flow(net, StoredCoupling(coupling), train, label=f"reflow-{round_}")
        loss_rows.extend({**row, "round": round_} for row in trace.rows())
        pairs = reflow_repair(net, cfg.prior, cfg.straightness_pairs, eval_rng.derive(round_), n_steps=cfg.sampler_steps)
        straight_rows.append({"round": round_, "straightness": straightness(net, pairs, cfg.grid_size), "seed": cfg.seed})
        logger.info("reflow round %d: straightness %.5g", round_, straight_rows[-1]["straightness"])

    sweep = [{**row, "seed": cfg.seed} for row in straightness_sweep(net, pairs, np.linspace(0.0, 1.0, cfg.grid_size))]
    run.record(run.runs.write_table("loss_trace.csv", loss_rows))
    run.record(run.runs.write_table("straightness.csv", straight_rows))
    run.record(run.runs.write_table("straightness_sweep.csv", sweep))
    run.checkpoints.save("checkpoint", net, meta={"kind": "velocity", "objective": cfg.objective})
    run.record("checkpoint.bin")
    run.record("checkpoint.json")

    truth = distributions.sample(cfg.target, pairs.n, eval_rng.derive("truth"))
    _write_metrics(run, pairs.x1, truth, eval_rng.derive("metrics"), f"euler-{cfg.sampler_steps}")


@router.command(
    "sample",
    config=SampleConfig,
    help="Выборка из чекпоинта с учётом NFE",
    flags={"seed": "seed", "steps": "steps", "corrected": "corrected"},
)
def sample_command(ctx: CommandContext[SampleConfig]) -> None:
    cfg, run = ctx.config, ctx.run
    if cfg.adapters is not None:
        _sample_adapted(cfg, run)
        return
    net = load_checkpoint(cfg.checkpoint).net
    if net.config.state_dim != cfg.prior.dim:
        raise ConfigError("prior dimension does not match the checkpoint")
    source = resolve_score(cfg.score, cfg.prior, cfg.target, cfg.seed) if cfg.corrected else None
    rng = RngState(cfg.seed).derive("sample")
    x0 = distributions.sample(cfg.prior, cfg.n, rng.derive("x0"))
    samples, report = timed_sample(
        net,
        x0,
        cfg.steps,
        schedule=cfg.schedule,
        source=source,
        corrected=cfg.corrected,
        sampler="euler",
        chunks=cfg.chunks,
    )
    reports = [report]
    if cfg.compare_steps is not None:
        _, other = timed_sample(
            net, x0, cfg.compare_steps, schedule=cfg.schedule, source=source, corrected=cfg.corrected, sampler="euler"
        )
        reports.append(other)
        logger.info(
            "wall-clock ratio %d/%d steps: %.2f", cfg.steps, cfg.compare_steps, report.seconds / max(other.seconds, 1e-12)
        )
    run.record(run.runs.write_bytes("samples.bin", codecs.encode_samples(samples, {"steps": cfg.steps, "corrected": cfg.corrected})))
    run.record(run.runs.write_table("nfe.csv", [r.model_dump() for r in reports]))
    run.record(run.runs.write_text("nfe.json", "[" + ",".join(r.model_dump_json() for r in reports) + "]"))
    truth = distributions.sample(cfg.target, cfg.n, rng.derive("truth"))
    _write_metrics(run, samples, truth, rng.derive("metrics"), report.sampler)



def _sample_adapted(cfg: SampleConfig, run: RunDirectory) -> None:
    """Генерация фантомов базой этапа 1 с адаптерами этапа 2.

    Raises:
        InvariantViolation: Адаптеры обучены на другой базе
        ShapeMismatchError: База не подходит к фантомам из конфига
    """
    assert cfg.adapters is not None
    checkpoint = load_checkpoint(cfg.checkpoint)
    adapters = FileCheckpointRepository(cfg.adapters.parent).load_adapters(cfg.adapters.stem, checkpoint.checksum)
    phantoms = load_phantoms(cfg.phantoms, cfg.seed)
    task = PhantomTask.from_samples(phantoms)
    base = checkpoint.net
    if base.config.state_dim != task.images.shape[1] or base.config.cond_dim != task.conds.shape[1]:
        raise ShapeMismatchError("base checkpoint does not match the phantom task")

    rng = RngState(cfg.seed).derive("sample")
    network = CountingField(LoraNetwork(base, adapters))
    started = time.perf_counter()
    images = generate(network, held_out_conditions(phantoms, cfg.n), task.image_shape, cfg.steps, rng.derive("noise"))
    seconds = time.perf_counter() - started
    report = NfeReport(
        sampler=f"adapted-{cfg.steps}",
        steps=cfg.steps,
        samples=cfg.n,
        evaluations=network.evaluations,
        seconds=seconds,
        samples_per_second=cfg.n / seconds if seconds > 0 else 0.0,
    )
    logger.info("adapted rank-%d network: %d images in %.2fs", adapters.rank, cfg.n, seconds)
    flat = images.reshape(cfg.n, -1)
    meta = {"steps": cfg.steps, "corrected": False, "adapters": str(cfg.adapters)}
    run.record(run.runs.write_bytes("samples.bin", codecs.encode_samples(flat, meta)))
    run.record(run.runs.write_table("nfe.csv", [report.model_dump()]))
    run.record(run.runs.write_text("nfe.json", "[" + report.model_dump_json() + "]"))
    _write_metrics(run, flat, task.images, rng.derive("metrics"), report.sampler)


@router.command(
    "distill",
    config=DistillConfig,
    help="Дистилляция учителя в одношаговое отображение",
    flags={"seed": "seed", "steps": "train.steps", "corrected": "tweedie"},
)
def distill_command(ctx: CommandContext[DistillConfig]) -> None:
    cfg, run = ctx.config, ctx.run
    teacher = load_checkpoint(cfg.teacher).net
    source = resolve_score(cfg.score, cfg.prior, cfg.target, cfg.seed) if cfg.tweedie else None
    student, trace = distill(
        teacher,
        cfg.schedule if cfg.tweedie else None,
        source,
        cfg.train.model_copy(update={"seed": cfg.seed}),
        prior=cfg.prior,
        tweedie=cfg.tweedie,
        n_pairs=cfg.n_pairs,
        teacher_steps=cfg.teacher_steps,
        cache=run.pair_cache,
    )
    run.check("teacher_unchanged", True)
    run.record(run.runs.write_table("loss_trace.csv", trace.rows()))
    run.checkpoints.save("student", student.net, meta={"kind": "student", "tweedie": cfg.tweedie})
    run.record("student.bin")
    run.record("student.json")

    rng = RngState(cfg.seed).derive("distill", "eval")
    x0 = distributions.sample(cfg.prior, cfg.eval_samples, rng.derive("x0"))
    truth = distributions.sample(cfg.target, cfg.eval_samples, rng.derive("truth"))
    teacher_x, teacher_report = timed_sample(teacher, x0, cfg.teacher_steps)
    reports = [teacher_report]
    _write_metrics(run, teacher_x, truth, rng.derive("metrics"), teacher_report.sampler)
    for k in cfg.eval_steps:
        student_x, report = k_step_sample(student, x0, k, cfg.schedule, source)
        reports.append(report)
        _write_metrics(run, student_x, truth, rng.derive("metrics"), report.sampler)
        logger.info(
            "student k=%d: %d evaluations, %.1fx faster than the teacher",
            k,
            report.evaluations,
            teacher_report.seconds / max(report.seconds, 1e-12),
        )
    run.record(run.runs.write_table("nfe.csv", [r.model_dump() for r in reports]))
    run.record(run.runs.write_text("nfe.json", "[" + ",".join(r.model_dump_json() for r in reports) + "]"))
