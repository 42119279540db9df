import json

import numpy as np
import pytest

from src.app.db import codecs
from src.app.db.repositories import FileRunRepository
from src.app.main import main

TINY_FLOW = {
    "train": {"steps": 30, "batch_size": 32},
    "hidden": [8],
    "n_freqs": 2,
    "sampler_steps": 5,
    "straightness_pairs": 40,
    "grid_size": 4,
    "reflow_rounds": 1,
    "reflow_pairs": 64,
}

TINY_PHANTOMS = {"n": 20, "size": 8}

TINY_STAGE1 = {
    "phantoms": TINY_PHANTOMS,
    "hidden": [8],
    "n_freqs": 1,
    "train": {"steps": 3, "batch_size": 4},
    "t_max": 4,
}


def write_config(tmp_path, name, data):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(data, default=str))
    return path


def only_run(out, command):
    runs = sorted(out.glob(f"{command}-*"))
    assert len(runs) == 1, runs
    return runs[0]


@pytest.fixture
def trained_flow(tmp_path):
    out = tmp_path / "runs"
    code = main(["train-flow", "--config", str(write_config(tmp_path, "flow", TINY_FLOW)), "--out", str(out)])
    assert code == 0
    return only_run(out, "train-flow")


def test_train_flow_writes_artifacts(trained_flow):
    for name in ("checkpoint.bin", "checkpoint.json", "loss_trace.csv", "straightness.csv", "straightness_sweep.csv"):
        assert (trained_flow / name).exists(), name
    repo = FileRunRepository(trained_flow)
    manifest = repo.read_manifest()
    assert manifest.status == "ok"
    assert manifest.exit_code == 0
    assert "checkpoint.bin" in manifest.artifacts
    rounds = [row["round"] for row in repo.read_table("straightness.csv")]
    assert rounds == ["0", "1"]
    assert {m.metric for m in repo.metrics()} >= {"mmd2", "sliced_wasserstein"}


def test_identical_configs_give_identical_checkpoints(tmp_path, trained_flow):
    other = tmp_path / "other"
    config = write_config(tmp_path, "flow", TINY_FLOW)

    assert main(["train-flow", "--config", str(config), "--out", str(other)]) == 0

    twin = only_run(other, "train-flow")
    assert twin.name == trained_flow.name
    assert (twin / "checkpoint.bin").read_bytes() == (trained_flow / "checkpoint.bin").read_bytes()


def test_rerun_needs_force(tmp_path, trained_flow):
    config = write_config(tmp_path, "flow", TINY_FLOW)
    out = trained_flow.parent

    assert main(["train-flow", "--config", str(config), "--out", str(out)]) == 2
    assert main(["train-flow", "--config", str(config), "--out", str(out), "--force"]) == 0


def test_seed_flag_is_recorded(tmp_path):
    out = tmp_path / "runs"
    config = write_config(tmp_path, "flow", {**TINY_FLOW, "reflow_rounds": 0})

    assert main(["train-flow", "--config", str(config), "--out", str(out), "--seed", "3"]) == 0

    manifest = FileRunRepository(only_run(out, "train-flow")).read_manifest()
    assert manifest.seed == 3
    assert manifest.overrides == {"seed": 3}


def test_invalid_configs_exit_with_config_code(tmp_path):
    out = tmp_path / "runs"
    assert main(["stage2", "--rank", "-1", "--out", str(out)]) == 2
    assert main(["train-flow", "--config", str(tmp_path / "missing.json"), "--out", str(out)]) == 2
    assert main(["train-flow", "--rank", "4", "--out", str(out)]) == 2
    bad = write_config(tmp_path, "bad", {"unknown_key": 1})
    assert main(["train-flow", "--config", str(bad), "--out", str(out)]) == 2
    assert not out.exists() or not list(out.iterdir())


def test_missing_checkpoint_is_a_state_failure(tmp_path):
    out = tmp_path / "runs"
    config = write_config(tmp_path, "sample", {"checkpoint": str(tmp_path / "none.bin"), "n": 8, "steps": 2})

    assert main(["sample", "--config", str(config), "--out", str(out)]) == 1

    manifest = FileRunRepository(only_run(out, "sample")).read_manifest()
    assert manifest.status == "failed"
    assert manifest.exit_code == 1


def test_sample_accounts_evaluations(tmp_path, trained_flow):
    out = tmp_path / "runs"
    config = write_config(
        tmp_path,
        "sample",
        {"checkpoint": str(trained_flow / "checkpoint.bin"), "n": 64, "steps": 4, "compare_steps": 8},
    )

    assert main(["sample", "--config", str(config), "--out", str(out)]) == 0

    run = only_run(out, "sample")
    samples, meta = codecs.decode_samples((run / "samples.bin").read_bytes())
    assert samples.shape == (64, 2)
    assert meta == {"steps": 4, "corrected": False}
    reports = json.loads((run / "nfe.json").read_text())
    assert [(r["steps"], r["evaluations"]) for r in reports] == [(4, 256), (8, 512)]


def test_corrected_sampling_with_identity_schedule_matches_plain(tmp_path, trained_flow):
    plain_out, corrected_out = tmp_path / "plain", tmp_path / "corrected"
    config = write_config(tmp_path, "sample", {"checkpoint": str(trained_flow / "checkpoint.bin"), "n": 32, "steps": 4})

    assert main(["sample", "--config", str(config), "--out", str(plain_out)]) == 0
    assert main(["sample", "--config", str(config), "--out", str(corrected_out), "--corrected"]) == 0

    plain, _ = codecs.decode_samples((only_run(plain_out, "sample") / "samples.bin").read_bytes())
    corrected, meta = codecs.decode_samples((only_run(corrected_out, "sample") / "samples.bin").read_bytes())
    assert meta["corrected"] is True
    np.testing.assert_allclose(corrected, plain, rtol=0, atol=1e-12)


def test_distill_keeps_teacher_and_caches_pairs(tmp_path, trained_flow):
    out = tmp_path / "runs"
    teacher = trained_flow / "checkpoint.bin"
    before = teacher.read_bytes()
    config = write_config(
        tmp_path,
        "distill",
        {
            "teacher": str(teacher),
            "train": {"steps": 10, "batch_size": 16},
            "teacher_steps": 4,
            "n_pairs": 64,
            "eval_steps": [1, 2],
            "eval_samples": 32,
        },
    )

    assert main(["distill", "--config", str(config), "--out", str(out)]) == 0

    run = only_run(out, "distill")
    assert teacher.read_bytes() == before
    assert list((out / "pair-cache").glob("pairs-*.bin"))
    manifest = FileRunRepository(run).read_manifest()
    assert manifest.invariants["teacher_unchanged"] is True
    assert (run / "student.bin").exists()
    reports = json.loads((run / "nfe.json").read_text())
    assert [r["evaluations"] for r in reports] == [4 * 32, 32, 64]


def test_eval_of_identical_sets(tmp_path):
    out = tmp_path / "runs"
    points = np.random.default_rng(0).standard_normal((40, 2))
    samples = tmp_path / "samples.bin"
    samples.write_bytes(codecs.encode_samples(points))
    config = write_config(tmp_path, "eval", {"samples": str(samples), "reference": str(samples)})

    assert main(["eval", "--config", str(config), "--out", str(out)]) == 0

    metrics = {m.metric: m.value for m in FileRunRepository(only_run(out, "eval")).metrics()}
    assert metrics["mmd2"] == pytest.approx(0.0, abs=1e-12)
    assert metrics["sliced_wasserstein"] == pytest.approx(0.0, abs=1e-12)
    assert not (only_run(out, "eval") / "noise_floor.json").exists()


def test_eval_against_target_writes_alignment(tmp_path):
    out = tmp_path / "runs"
    points = np.random.default_rng(1).standard_normal((40, 2))
    samples = tmp_path / "samples.bin"
    samples.write_bytes(codecs.encode_samples(points))
    target = {"kind": "gaussian", "mean": [0.0, 0.0], "variance": 1.0}
    config = write_config(
        tmp_path, "eval", {"samples": str(samples), "target": target, "n_reference": 64, "n_projections": 16, "bins": 4}
    )

    assert main(["eval", "--config", str(config), "--out", str(out)]) == 0

    run = only_run(out, "eval")
    for name in ("alignment.csv", "alignment_summary.csv", "noise_floor.json"):
        assert (run / name).exists(), name


def test_gen_phantoms_exports_dataset(tmp_path):
    out = tmp_path / "runs"
    config = write_config(tmp_path, "phantoms", {"phantoms": TINY_PHANTOMS})

    assert main(["gen-phantoms", "--config", str(config), "--out", str(out)]) == 0

    manifest = only_run(out, "gen-phantoms") / "phantoms" / "manifest.csv"
    lines = manifest.read_text().splitlines()
    assert lines[0] == "file,seed,severity,split"
    assert len(lines) == 21


def test_stage1_then_stage2(tmp_path):
    out = tmp_path / "runs"
    stage1 = write_config(tmp_path, "stage1", TINY_STAGE1)
    assert main(["stage1", "--config", str(stage1), "--out", str(out)]) == 0
    first = only_run(out, "stage1")
    base = first / "checkpoint.bin"
    before = base.read_bytes()
    preview, _ = codecs.decode_samples((first / "samples.bin").read_bytes())
    assert preview.shape == (32, 64)

    stage2 = write_config(
        tmp_path,
        "stage2",
        {
            "base": str(base),
            "phantoms": TINY_PHANTOMS,
            "rank": 2,
            "train": {"steps": 3, "batch_size": 4},
            "t_max": 4,
            "sample_steps": 2,
        },
    )
    assert main(["stage2", "--config", str(stage2), "--out", str(out)]) == 0

    second = only_run(out, "stage2")
    manifest = FileRunRepository(second).read_manifest()
    assert manifest.invariants == {
        "zero_init_neutral": True,
        "trainable_count_law": True,
        "base_parameters_unchanged": True,
        "base_checkpoint_unchanged": True,
    }
    assert base.read_bytes() == before
    for name in ("adapters.lora", "samples_base.bin", "samples_adapted.bin", "loss_trace.csv"):
        assert (second / name).exists(), name


def test_stage2_rejects_mismatched_base(tmp_path, trained_flow):
    out = tmp_path / "runs"
    config = write_config(
        tmp_path,
        "stage2",
        {"base": str(trained_flow / "checkpoint.bin"), "phantoms": TINY_PHANTOMS, "t_max": 4},
    )

    assert main(["stage2", "--config", str(config), "--out", str(out)]) == 2


def test_report_lists_runs(tmp_path, trained_flow):
    out = tmp_path / "runs"
    config = write_config(tmp_path, "report", {"runs": [str(trained_flow)], "title": "Smoke"})

    assert main(["report", "--config", str(config), "--out", str(out)]) == 0

    text = (only_run(out, "report") / "report.md").read_text()
    assert text.startswith("# Smoke")
    assert "## train-flow" in text
    assert "checkpoint.bin" in text


def test_ablate_tiny_grid(tmp_path):
    out = tmp_path / "runs"
    config = write_config(
        tmp_path,
        "ablate",
        {
            "seeds": [0, 1],
            "stage1": [False],
            "tweedie": [False],
            "losses": ["diff"],
            "ranks": [2],
            "include_reflow": False,
            "phantoms": TINY_PHANTOMS,
            "hidden": [8],
            "t_max": 4,
            "stage1_train": {"steps": 2, "batch_size": 4},
            "stage2_train": {"steps": 2, "batch_size": 4},
            "sample_steps": 2,
            "n_generated": 17,
        },
    )

    assert main(["ablate", "--config", str(config), "--out", str(out)]) == 0

    repo = FileRunRepository(only_run(out, "ablate"))
    raw = repo.read_table("ablation_raw.csv")
    assert len(raw) == 2
    (row,) = repo.read_table("ablation.csv")
    assert int(row["seeds"]) + int(row["failed"]) == 2
    trends = json.loads((repo.root / "ablation_trends.json").read_text())
    assert trends["name"] == "ablation_trends"


@pytest.fixture
def adapted_run(tmp_path):
    out = tmp_path / "adapted"
    assert main(["stage1", "--config", str(write_config(tmp_path, "stage1", TINY_STAGE1)), "--out", str(out)]) == 0
    base = only_run(out, "stage1") / "checkpoint.bin"
    config = write_config(
        tmp_path,
        "stage2",
        {"base": str(base), "phantoms": TINY_PHANTOMS, "rank": 2, "train": {"steps": 3, "batch_size": 4}, "t_max": 4},
    )
    assert main(["stage2", "--config", str(config), "--out", str(out)]) == 0
    return base, only_run(out, "stage2") / "adapters.lora"


def test_sample_with_adapters(tmp_path, adapted_run):
    base, adapters = adapted_run
    out = tmp_path / "runs"
    config = write_config(
        tmp_path,
        "sample",
        {"checkpoint": str(base), "adapters": str(adapters), "phantoms": TINY_PHANTOMS, "n": 6, "steps": 3},
    )

    assert main(["sample", "--config", str(config), "--out", str(out)]) == 0

    run = only_run(out, "sample")
    images, meta = codecs.decode_samples((run / "samples.bin").read_bytes())
    assert images.shape == (6, 64)
    assert meta["adapters"] == str(adapters)
    (report,) = json.loads((run / "nfe.json").read_text())
    assert (report["sampler"], report["evaluations"]) == ("adapted-3", 18)


def test_sample_rejects_adapters_of_another_base(tmp_path, adapted_run):
    _, adapters = adapted_run
    other_out = tmp_path / "other"
    stage1 = write_config(tmp_path, "stage1", TINY_STAGE1)
    assert main(["stage1", "--config", str(stage1), "--out", str(other_out), "--seed", "1"]) == 0
    other_base = only_run(other_out, "stage1") / "checkpoint.bin"
    out = tmp_path / "runs"
    config = write_config(
        tmp_path,
        "sample",
        {"checkpoint": str(other_base), "adapters": str(adapters), "phantoms": TINY_PHANTOMS, "n": 4, "steps": 2},
    )

    assert main(["sample", "--config", str(config), "--out", str(out)]) == 4

    manifest = FileRunRepository(only_run(out, "sample")).read_manifest()
    assert manifest.status == "failed"
    assert not (only_run(out, "sample") / "samples.bin").exists()


def test_adapted_sampling_is_uncorrected(tmp_path, adapted_run):
    base, adapters = adapted_run
    config = write_config(tmp_path, "sample", {"checkpoint": str(base), "adapters": str(adapters)})

    assert main(["sample", "--config", str(config), "--out", str(tmp_path / "runs"), "--corrected"]) == 2


def test_chunked_sampling_matches_serial(tmp_path, trained_flow):
    serial_out, chunked_out = tmp_path / "serial", tmp_path / "chunked"
    spec = {"checkpoint": str(trained_flow / "checkpoint.bin"), "n": 50, "steps": 4}

    assert main(["sample", "--config", str(write_config(tmp_path, "serial", spec)), "--out", str(serial_out)]) == 0
    chunked = write_config(tmp_path, "chunked", {**spec, "chunks": 3})
    assert main(["sample", "--config", str(chunked), "--out", str(chunked_out)]) == 0

    serial, _ = codecs.decode_samples((only_run(serial_out, "sample") / "samples.bin").read_bytes())
    parallel, _ = codecs.decode_samples((only_run(chunked_out, "sample") / "samples.bin").read_bytes())
    np.testing.assert_allclose(parallel, serial, rtol=1e-12, atol=1e-12)
    (report,) = json.loads((only_run(chunked_out, "sample") / "nfe.json").read_text())
    assert report["evaluations"] == 200
