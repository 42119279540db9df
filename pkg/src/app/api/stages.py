from __future__ import annotations

import asyncio
import hashlib
import logging
from pathlib import Path

import numpy as np

from src.app.api.flows import load_checkpoint
from src.app.core.commands import CommandContext, CommandRouter
from src.app.core.errors import InvariantViolation, ShapeMismatchError
from src.app.core.rng import RngState
from src.app.db import codecs
from src.app.db.storage import RunDirectory
from src.app.models.experiments import Stage1Config, Stage2Config
from src.app.services.ewc import EwcState, LayerMode
from src.app.services.experiments import PhantomTask, held_out_conditions, load_phantoms, run_stage1
from src.app.services.lora import AdapterSet, LoraNetwork
from src.app.services.metrics import evaluate_samples
from src.app.services.nn import VelocityNet
from src.app.services.phantom import select_split
from src.app.services.stage1 import generate, make_stage_batch
from src.app.services.stage2 import consistency_losses, dual_rollout, generate_pair, stage2_train

logger = logging.getLogger(__name__)

router = CommandRouter()

PREVIEW_SAMPLES = 32


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _frozen_layers_intact(net: VelocityNet, state: EwcState) -> bool:
    mask = state.frozen_mask()
    return all(np.array_equal(p, a) for p, a, frozen in zip(net.parameters(), state.anchor, mask) if frozen)


@router.command(
    "stage1",
    config=Stage1Config,
    help="Этап 1: составная потеря и EWC",
    flags={"seed": "seed", "steps": "train.steps"},
)
def stage1_command(ctx: CommandContext[Stage1Config]) -> None:
    cfg, run = ctx.config, ctx.run
    samples = load_phantoms(cfg.phantoms, cfg.seed)
    task = PhantomTask.from_samples(select_split(samples, "train"))
    net, trace, state = run_stage1(
        task,
        seed=cfg.seed,
        hidden=cfg.hidden,
        n_freqs=cfg.n_freqs,
        train=cfg.train,
        t_max=cfg.t_max,
        weights=cfg.weights,
        ewc=cfg.ewc,
        phantoms=cfg.phantoms,
    )
    if state is not None:
        modes = [{"layer": idx, "mode": mode.value} for idx, mode in enumerate(state.layer_modes)]
        run.record(run.runs.write_table("ewc_layers.csv", modes))
        if LayerMode.FROZEN in state.layer_modes and not run.check("frozen_layers_intact", _frozen_layers_intact(net, state)):
            raise InvariantViolation("a frozen layer received updates")
    run.record(run.runs.write_table("loss_trace.csv", trace.rows()))
    run.checkpoints.save(
        "checkpoint", net, meta={"kind": "stage1", "t_max": cfg.t_max, "image_shape": list(task.image_shape)}
    )
    run.record("checkpoint.bin")
    run.record("checkpoint.json")

    cond = held_out_conditions(samples, PREVIEW_SAMPLES)
    images = generate(net, cond, task.image_shape, cfg.t_max, RngState(cfg.seed).derive("stage1", "preview"))
    run.record(run.runs.write_bytes("samples.bin", codecs.encode_samples(images.reshape(PREVIEW_SAMPLES, -1))))
    reference = np.stack([s.image.reshape(-1) for s in samples])
    for report in evaluate_samples(
        images.reshape(PREVIEW_SAMPLES, -1), reference, rng=RngState(cfg.seed).derive("stage1", "metrics"), label="stage1"
    ):
        run.metric(report)


def _check_zero_init(run: RunDirectory, base: VelocityNet, adapters: AdapterSet, task: PhantomTask, cfg: Stage2Config) -> None:
    """B = 0: адаптированная сеть и все потери согласованности совпадают с базой."""
    batch = make_stage_batch(
        task.images,
        task.conds,
        RngState(cfg.seed).derive("stage2", "probe"),
        t_max=cfg.t_max,
        batch_size=min(8, task.images.shape[0]),
        image_shape=task.image_shape,
        min_index=2,
    )
    dual = dual_rollout(LoraNetwork(base, adapters), batch)
    losses = consistency_losses(dual.base.hidden, dual.adapt.hidden, dual.base_steps, dual.adapt_steps)
    neutral = np.array_equal(dual.base.phi1, dual.adapt.phi1) and all(v == 0.0 for v in losses)
    if not run.check("zero_init_neutral", neutral):
        raise InvariantViolation("zero-initialized adapters changed the base forward pass")


@router.command(
    "stage2",
    config=Stage2Config,
    help="Этап 2: LoRA-адаптеры над замороженной базой",
    flags={"seed": "seed", "steps": "train.steps", "rank": "rank"},
)
def stage2_command(ctx: CommandContext[Stage2Config]) -> None:
    cfg, run = ctx.config, ctx.run
    file_before = _file_digest(cfg.base)
    checkpoint = load_checkpoint(cfg.base)
    base = checkpoint.net
    samples = load_phantoms(cfg.phantoms, cfg.seed)
    task = PhantomTask.from_samples(select_split(samples, "train"))
    if base.config.state_dim != task.images.shape[1] or base.config.cond_dim != task.conds.shape[1]:
        raise ShapeMismatchError("base checkpoint does not match the phantom task")

    adapters = AdapterSet.init(
        base, cfg.rank, RngState(cfg.seed).derive("lora", cfg.rank), alpha=cfg.alpha, layers=cfg.adapted_layers
    )
    _check_zero_init(run, base, adapters, task, cfg)
    expected = sum(cfg.rank * sum(base.weights[layer].shape) for layer in adapters.layers)
    run.check("trainable_count_law", adapters.trainable_count == expected)

    adapters, trace = stage2_train(
        base,
        adapters,
        task.images,
        task.conds,
        cfg.weights,
        cfg.train.model_copy(update={"seed": cfg.seed}),
        t_max=cfg.t_max,
        image_shape=task.image_shape,
        layers=cfg.consistency_layers,
    )
    run.check("base_parameters_unchanged", codecs.parameters_checksum(base.parameters()) == checkpoint.checksum)
    if not run.check("base_checkpoint_unchanged", _file_digest(cfg.base) == file_before):
        raise InvariantViolation(f"base checkpoint {cfg.base} was modified during stage 2")

    run.record(run.runs.write_table("loss_trace.csv", trace.rows()))
    run.checkpoints.save_adapters("adapters", adapters, checkpoint.checksum)
    run.record("adapters.lora")

    cond = held_out_conditions(samples, PREVIEW_SAMPLES)
    base_images, adapt_images = asyncio.run(
        generate_pair(base, adapters, cond, task.image_shape, cfg.sample_steps, RngState(cfg.seed).derive("stage2", "preview"))
    )
    reference = np.stack([s.image.reshape(-1) for s in samples])
    for name, images in (("base", base_images), ("adapted", adapt_images)):
        flat = images.reshape(PREVIEW_SAMPLES, -1)
        run.record(run.runs.write_bytes(f"samples_{name}.bin", codecs.encode_samples(flat)))
        for report in evaluate_samples(flat, reference, rng=RngState(cfg.seed).derive("stage2", "metrics"), label=name):
            run.metric(report)
