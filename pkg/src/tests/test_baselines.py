"""Tests for the ablation variants and run merging."""

import pandas as pd
import pytest
import torch

import morel.agent
from morel.agent import MorelActorCritic, StandardActorCritic, count_parameters
from morel.baselines import (
    FrameAutoencoder,
    build_variant,
    compare_variants,
    merge_runs,
    pretrain_autoencoder,
    run_dir_name,
    run_variant,
    steps_to_threshold,
)
from morel.checkpoint import Checkpoint, module_digest
from morel.config import ConfigurationError, load_run_config, write_run_config
from morel.dataset import collect_random
from morel.schemas import EnvConfig, PretrainConfig, RunConfig, VariantSpec
from morel.segnet import SegNet
from morel.segtrain import pretrain


def _seg_checkpoint(num_masks=3, frames=500):
    segnet = SegNet(num_masks=num_masks, frame_size=36, seed=0)
    meta = {"kind": "segnet", "architecture": segnet.architecture(), "dataset_frames": frames}
    return Checkpoint.from_modules(segnet, meta=meta)


def _run_config(variant, **train):
    return RunConfig(
        env=EnvConfig(frame_size=36, num_sprites=2, episode_len=3),
        update={"n_steps": 2, "num_envs": 2},
        train={"total_env_steps": 4, "eval_every": 0, "checkpoint_every": 0, **train},
        variant={"name": variant},
    )


def test_double_matches_joint_parameter_count():
    """Test that the randomly initialized dual-path agent has the same size."""
    ckpt = _seg_checkpoint()
    joint = build_variant(VariantSpec(name="morel_joint"), 0, frame_size=36, seg_checkpoint=ckpt)
    double = build_variant(VariantSpec(name="baseline_double"), 0, frame_size=36, seg_checkpoint=ckpt)
    standard = build_variant(VariantSpec(name="baseline_standard"), 0, frame_size=36)
    assert isinstance(double.model, MorelActorCritic)
    assert isinstance(standard.model, StandardActorCritic)
    assert count_parameters(double.model) == count_parameters(joint.model)
    assert count_parameters(standard.model) < count_parameters(double.model)
    assert module_digest(double.model.motion) != module_digest(joint.model.motion)


def test_variant_flags():
    """Test joint-loss flags and pretraining frame counts per variant."""
    ckpt = _seg_checkpoint(frames=500)
    joint = build_variant(VariantSpec(name="morel_joint"), 0, frame_size=36, seg_checkpoint=ckpt)
    transfer = build_variant(VariantSpec(name="morel_transfer_only"), 0, frame_size=36, seg_checkpoint=ckpt)
    double = build_variant(VariantSpec(name="baseline_double"), 0, frame_size=36)
    assert (joint.joint_seg, joint.pretrain_frames) == (True, 500)
    assert (transfer.joint_seg, transfer.pretrain_frames) == (False, 500)
    assert (double.joint_seg, double.pretrain_frames) == (False, 0)


@pytest.mark.parametrize("variant", ["morel_joint", "morel_transfer_only", "baseline_autoencoder"])
def test_missing_checkpoint(variant):
    """Test that pretrained variants refuse to start without a checkpoint."""
    with pytest.raises(ConfigurationError, match="requires"):
        build_variant(VariantSpec(name=variant), 0, frame_size=36)


@pytest.fixture(scope="module")
def ae_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("ae")
    dataset = collect_random(EnvConfig(frame_size=36, episode_len=20), 0, 12, root / "d.bin")
    config = PretrainConfig(total_steps=2, warmup_steps=1, batch_size=2, checkpoint_every=0)
    return pretrain_autoencoder(dataset, config, root / "run"), root


def test_autoencoder_shapes():
    """Test the single-channel reconstruction."""
    model = FrameAutoencoder(frame_size=36, seed=0)
    assert model(torch.rand(3, 2, 36, 36)).shape == (3, 1, 36, 36)


def test_autoencoder_checkpoint(ae_run):
    """Test the autoencoder checkpoint contents and logged metrics."""
    ckpt, root = ae_run
    assert ckpt.meta["kind"] == "autoencoder"
    assert ckpt.meta["dataset_frames"] == 12
    assert not any("translation" in name for name in ckpt.tensors)
    metrics = pd.read_csv(root / "run" / "metrics.csv")
    assert len(metrics) == 2
    assert (metrics["lambda_reg"] == 0.0).all()
    assert (metrics["loss_reg"] == 0.0).all()


def test_autoencoder_variant_loads_encoder(ae_run):
    """Test that the autoencoder encoder initializes the motion path."""
    ckpt, _ = ae_run
    built = build_variant(VariantSpec(name="baseline_autoencoder"), 0, frame_size=36, ae_checkpoint=ckpt)
    ae = FrameAutoencoder(frame_size=36)
    ae.load_state_dict(ckpt.model_state())
    assert module_digest(built.model.motion.encoder) == module_digest(ae.encoder)
    assert not built.joint_seg
    assert built.pretrain_frames == 12


def _count_seg_calls(monkeypatch):
    calls = []
    original = morel.agent.seg_loss

    def counting(*args, **kwargs):
        calls.append(1)
        return original(*args, **kwargs)

    monkeypatch.setattr(morel.agent, "seg_loss", counting)
    return calls


def test_transfer_only_never_uses_seg_loss(tmp_path, monkeypatch):
    """Test that the transfer-only ablation trains without the segmentation loss."""
    calls = _count_seg_calls(monkeypatch)
    run_variant(_run_config("morel_transfer_only"), [0], tmp_path, seg_checkpoint=_seg_checkpoint())
    assert calls == []


def test_joint_training_uses_seg_loss(tmp_path, monkeypatch):
    """Test that the joint variant adds the segmentation loss to updates."""
    calls = _count_seg_calls(monkeypatch)
    run_variant(_run_config("morel_joint"), [0], tmp_path, seg_checkpoint=_seg_checkpoint())
    assert len(calls) == 1


def test_run_variant_writes_one_dir_per_seed(tmp_path):
    """Test run directories, their configs and refusal to overwrite."""
    config = _run_config("morel_joint")
    results = run_variant(config, [1, 2], tmp_path, seg_checkpoint=_seg_checkpoint(frames=500))
    assert [r.run_dir.name for r in results] == ["morel_joint_a2c_seed1", "morel_joint_a2c_seed2"]
    saved = load_run_config(tmp_path / "morel_joint_a2c_seed2" / "config.toml")
    assert saved.seed == 2
    assert saved.train.pretrain_frames == 500

    with pytest.raises(ConfigurationError, match="already exists"):
        run_variant(config, [2], tmp_path, seg_checkpoint=_seg_checkpoint())


def _fake_run(root, variant, seed, pretrain_frames, returns):
    config = _run_config(variant, pretrain_frames=pretrain_frames).model_copy(update={"seed": seed})
    run_dir = root / run_dir_name(config.variant, "a2c", seed)
    run_dir.mkdir()
    write_run_config(config, run_dir)
    pd.DataFrame(
        {"update": range(1, len(returns) + 1), "env_steps": [4 * (i + 1) for i in range(len(returns))], "mean_return": returns}
    ).to_csv(run_dir / "metrics.csv", index=False)
    return run_dir


def test_merge_runs_offsets_pretrained_variants(tmp_path):
    """Test that only pretrained variants are shifted by their pretraining frames."""
    joint = _fake_run(tmp_path, "morel_joint", 0, 100, [0.0, 1.0])
    double = _fake_run(tmp_path, "baseline_double", 0, 100, [0.0, 2.0])
    merged = merge_runs([joint, double])
    assert list(merged.columns) == ["variant", "algo", "seed", "env_steps", "mean_return", "plotted_env_steps"]
    by_variant = dict(tuple(merged.groupby("variant")))
    assert by_variant["morel_joint"]["plotted_env_steps"].tolist() == [104, 108]
    assert by_variant["baseline_double"]["plotted_env_steps"].tolist() == [4, 8]


def test_merge_runs_needs_runs():
    """Test that merging nothing is an argument error."""
    with pytest.raises(ValueError):
        merge_runs([])


def test_steps_to_threshold(tmp_path):
    """Test the first step reaching a return threshold."""
    run = merge_runs([_fake_run(tmp_path, "morel_joint", 0, 100, [0.0, 0.5, 1.0, 0.2])])
    assert steps_to_threshold(run, 0.5) == 108
    assert steps_to_threshold(run, 0.5, column="env_steps") == 8
    assert steps_to_threshold(run, 5.0) is None


def test_compare_variants_threshold_table(tmp_path):
    """Test the reference threshold and median steps to reach it per variant."""
    runs = [
        _fake_run(tmp_path, "baseline_standard", 0, 0, [0.0, 1.0, 2.0]),
        _fake_run(tmp_path, "baseline_standard", 1, 0, [0.0, 2.0, 4.0]),
        _fake_run(tmp_path, "baseline_standard", 2, 0, [0.0, 1.0, 3.0]),
        _fake_run(tmp_path, "morel_joint", 0, 100, [0.0, 3.0, 3.0]),
        _fake_run(tmp_path, "morel_joint", 1, 100, [3.0, 3.0, 3.0]),
        _fake_run(tmp_path, "baseline_double", 0, 0, [0.0, 0.0, 0.0]),
    ]
    table = compare_variants(merge_runs(runs)).set_index("variant")
    assert table["threshold"].tolist() == pytest.approx([2.4] * 3)
    assert table["runs"].to_dict() == {"baseline_double": 1, "baseline_standard": 3, "morel_joint": 2}
    assert table.loc["baseline_standard", "median_steps_to_threshold"] == 12.0
    assert table.loc["morel_joint", "median_steps_to_threshold"] == 106.0
    assert table.loc["baseline_double", "median_steps_to_threshold"] == float("inf")
    assert table.loc["morel_joint", "median_final_return"] == 3.0


def test_compare_variants_needs_reference(tmp_path):
    """Test that the threshold cannot be set without reference runs."""
    merged = merge_runs([_fake_run(tmp_path, "morel_joint", 0, 100, [0.0, 1.0])])
    with pytest.raises(ValueError, match="baseline_standard"):
        compare_variants(merged)


def test_segnet_frame_size_must_match_env():
    """Test that a checkpoint trained on other frames is refused before training."""
    with pytest.raises(ConfigurationError, match="36px"):
        build_variant(VariantSpec(name="morel_joint"), 0, frame_size=84, seg_checkpoint=_seg_checkpoint())


@pytest.mark.slow
def test_joint_variant_reaches_threshold_first(tmp_path):
    """Test env steps to 80% of the standard agent's final return over three paired seeds."""
    env = EnvConfig(reward_mode="catch")
    data = collect_random(env, 0, 10_000, tmp_path / "d.bin")
    segnet = pretrain(
        data, PretrainConfig(total_steps=5_000, warmup_steps=2_000, checkpoint_every=0), tmp_path / "segnet"
    )
    runs = tmp_path / "runs"
    for variant in ("baseline_standard", "baseline_double", "morel_joint"):
        config = RunConfig(env=env, train={"total_env_steps": 200_000}, variant={"name": variant})
        checkpoint = None if variant == "baseline_standard" else segnet
        run_variant(config, [1, 2, 3], runs, seg_checkpoint=checkpoint)

    table = compare_variants(merge_runs(sorted(runs.iterdir()))).set_index("variant")
    steps = table["median_steps_to_threshold"]
    finals = table["median_final_return"]
    assert steps["morel_joint"] <= steps["baseline_standard"]
    assert steps["morel_joint"] <= steps["baseline_double"]
    assert finals["morel_joint"] >= finals["baseline_double"]
