import json

import numpy as np
import pytest
from pydantic import ValidationError

from src.app.api.evaluation import router as evaluation_router
from src.app.api.flows import router as flows_router
from src.app.api.stages import router as stages_router
from src.app.core.commands import build_config, read_config_file
from src.app.core.errors import ArtifactExistsError, ConfigError, InvariantViolation, StateError
from src.app.core.rng import RngState
from src.app.db import codecs
from src.app.db.repositories import (
    FileCheckpointRepository,
    FilePairCacheRepository,
    FilePhantomRepository,
    FileRunRepository,
    InMemoryCheckpointRepository,
    InMemoryRunRepository,
)
from src.app.db.storage import RunDirectory, config_hash
from src.app.models.experiments import TrainFlowConfig
from src.app.models.reports import MetricReport
from src.app.services.flow import PairBatch
from src.app.services.lora import AdapterSet
from src.app.services.phantom import build_dataset


def test_checkpoint_file_roundtrip_keeps_parameters(tmp_path, small_net):
    repo = FileCheckpointRepository(tmp_path)
    checksum = repo.save("checkpoint", small_net, meta={"kind": "velocity"})

    loaded = repo.load("checkpoint")

    assert loaded.checksum == checksum
    assert loaded.meta == {"kind": "velocity"}
    for a, b in zip(loaded.net.parameters(), small_net.parameters()):
        assert np.array_equal(a, b)
    manifest = json.loads((tmp_path / "checkpoint.json").read_text())
    assert manifest["checksum"] == checksum
    assert [t["name"] for t in manifest["tensors"]] == small_net.parameter_names()


def test_tampered_checkpoint_is_rejected(tmp_path, small_net):
    repo = FileCheckpointRepository(tmp_path)
    repo.save("checkpoint", small_net)
    path = tmp_path / "checkpoint.bin"
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))

    with pytest.raises(InvariantViolation):
        repo.load("checkpoint")


def test_wrong_container_is_a_config_error(small_net):
    blob = codecs.encode_checkpoint(small_net)

    with pytest.raises(ConfigError):
        codecs.decode_adapters(blob)
    with pytest.raises(ConfigError):
        codecs.decode_checkpoint(b"RF")


def test_missing_checkpoint_is_a_state_error(tmp_path):
    with pytest.raises(StateError):
        FileCheckpointRepository(tmp_path).load("nothing")
    with pytest.raises(StateError):
        InMemoryCheckpointRepository().load("nothing")


def test_adapters_bound_to_their_base(tmp_path, small_net):
    repo = FileCheckpointRepository(tmp_path)
    checksum = repo.save("base", small_net)
    adapters = AdapterSet.init(small_net, 2, RngState(3).derive("lora"))
    repo.save_adapters("adapters", adapters, checksum)

    loaded = repo.load_adapters("adapters", checksum)
    assert loaded.rank == 2
    assert loaded.layers == adapters.layers
    for a, b in zip(loaded.a, adapters.a):
        assert np.array_equal(a, b)

    with pytest.raises(InvariantViolation):
        repo.load_adapters("adapters", "0" * 64)


def test_pair_cache_on_disk(tmp_path):
    cache = FilePairCacheRepository(tmp_path / "pair-cache")
    pairs = PairBatch(np.arange(6.0).reshape(3, 2), -np.arange(6.0).reshape(3, 2))
    checksum = "ab" * 32

    assert cache.get(checksum, 0) is None
    cache.put(checksum, 0, pairs)
    hit = cache.get(checksum, 0)

    assert np.array_equal(hit.x0, pairs.x0)
    assert np.array_equal(hit.x1, pairs.x1)
    assert cache.get(checksum, 1) is None


def test_pair_cache_rejects_foreign_file(tmp_path):
    cache = FilePairCacheRepository(tmp_path)
    pairs = PairBatch(np.zeros((2, 2)), np.ones((2, 2)))
    cache.put("ab" * 32, 0, pairs)
    # другой учитель с тем же префиксом имени файла
    other = "ab" * 6 + "cd" * 26

    with pytest.raises(InvariantViolation):
        cache.get(other, 0)


def test_phantom_repository_keeps_split_and_seed(tmp_path):
    samples = build_dataset(10, (0.25, 0.25, 0.25, 0.25), seed=4, size=8)
    repo = FilePhantomRepository(tmp_path / "phantoms")
    repo.save(samples)

    loaded = repo.load()

    assert len(loaded) == len(samples)
    for a, b in zip(loaded, samples):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)
        assert (a.severity, a.seed, a.split) == (b.severity, b.seed, b.split)


def test_phantom_repository_needs_manifest(tmp_path):
    with pytest.raises(ConfigError):
        FilePhantomRepository(tmp_path).load()


def test_run_repository_tables_and_metrics(tmp_path):
    for repo in (FileRunRepository(tmp_path), InMemoryRunRepository()):
        with pytest.raises(StateError):
            repo.read_manifest()
        repo.write_table("t.csv", [{"a": 1, "b": 2.5}, {"a": 2, "c": "x"}])
        rows = repo.read_table("t.csv")
        assert rows[0]["a"] == "1"
        assert rows[1]["c"] == "x"
        repo.append_metric(MetricReport(metric="mmd2", value=0.1, n_x=4, n_y=4))
        assert [m.metric for m in repo.metrics()] == ["mmd2"]


def test_config_hash_is_stable():
    a = TrainFlowConfig(seed=1)
    b = TrainFlowConfig.model_validate({"seed": 1})

    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(TrainFlowConfig(seed=2))


def test_run_directory_refuses_to_overwrite(tmp_path):
    config = TrainFlowConfig()
    run = RunDirectory.open("train-flow", config, out=tmp_path)
    assert run.root.name == f"train-flow-{config_hash(config)[:12]}"
    (run.root / "stale.txt").write_text("old")

    with pytest.raises(ArtifactExistsError):
        RunDirectory.open("train-flow", config, out=tmp_path)

    again = RunDirectory.open("train-flow", config, out=tmp_path, force=True)
    assert not (again.root / "stale.txt").exists()
    assert again.runs.read_manifest().status == "running"


def test_run_directory_finish_records_status(tmp_path):
    run = RunDirectory.open("train-flow", TrainFlowConfig(), out=tmp_path, seed=3)
    run.record("a.csv")
    run.record("a.csv")
    run.check("holds", True)

    manifest = run.finish(3)

    assert manifest.status == "failed"
    assert manifest.artifacts == ["a.csv"]
    stored = run.runs.read_manifest()
    assert stored.exit_code == 3
    assert stored.invariants == {"holds": True}
    assert stored.seed == 3


def test_pair_cache_shared_between_runs(tmp_path):
    a = RunDirectory.open("distill", TrainFlowConfig(seed=1), out=tmp_path)
    b = RunDirectory.open("distill", TrainFlowConfig(seed=2), out=tmp_path)

    assert a.pair_cache.root == b.pair_cache.root == tmp_path / "pair-cache"


def _commands():
    commands = {}
    for router in (flows_router, stages_router, evaluation_router):
        commands.update(router.commands)
    return commands


def test_build_config_precedence(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seed": 5, "train": {"steps": 10, "batch_size": 8}}))
    command = _commands()["train-flow"]

    config, applied = build_config(command, path, {"seed": None, "steps": 20, "corrected": False, "rank": None})

    assert config.seed == 5
    assert config.train.steps == 20
    assert config.train.batch_size == 8
    assert applied == {"train.steps": 20}


def test_build_config_defaults_without_file():
    config, applied = build_config(_commands()["stage1"], None, {})

    assert config.t_max == 100
    assert applied == {}


def test_build_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seed": 0, "learning_rate": 1.0}))

    with pytest.raises(ValidationError):
        build_config(_commands()["train-flow"], path, {})


def test_build_config_rejects_unsupported_flag():
    with pytest.raises(ConfigError):
        build_config(_commands()["train-flow"], None, {"rank": 4})


def test_ablate_flags_become_grids():
    config, applied = build_config(_commands()["ablate"], None, {"rank": 4, "seed": 7})

    assert config.ranks == (4,)
    assert config.seeds == (7,)
    assert applied == {"ranks": [4], "seeds": [7]}


def test_read_config_file_errors(tmp_path):
    assert read_config_file(None) == {}
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        read_config_file(bad)
    listed = tmp_path / "list.json"
    listed.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        read_config_file(listed)
