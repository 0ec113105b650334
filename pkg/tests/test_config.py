import pytest

from selfctl.config import ArchConfig, DataConfig, DiffusionConfig, RunConfig
from selfctl.marloop import TrainConfig
from selfctl.seqmask import DEFAULT_POLICY, ablation_policy

FULL_INI = """
[arch]
width = 64
depth_enc = 2
depth_dec = 2
heads = 2

[diffusion]
steps = 50
sample_steps = 10

[data]
jitter = 1

[train]
batch_size = 8
lr = 0.0005
steps = 12
seed = 4

[policy]
text = causal
imgcond = bidirectional
gen = bidirectional
cross = causal

[paths]
out_dir = runs/example
"""


class TestLoad:
    def test_full_document(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text(FULL_INI)
        cfg = RunConfig.load(path)
        assert cfg.arch == ArchConfig(width=64, depth_enc=2, depth_dec=2, heads=2)
        assert cfg.diffusion.steps == 50 and cfg.diffusion.sample_steps == 10
        assert cfg.train.batch_size == 8 and cfg.train.lr == 0.0005
        assert cfg.policy == DEFAULT_POLICY
        assert cfg.out_dir == "runs/example"

    def test_missing_file_names_path(self, tmp_path):
        missing = tmp_path / "ghost.ini"
        with pytest.raises(FileNotFoundError, match="ghost.ini"):
            RunConfig.load(missing)

    def test_defaults_without_sections(self, tmp_path):
        path = tmp_path / "empty.ini"
        path.write_text("")
        cfg = RunConfig.load(path)
        assert cfg == RunConfig()

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[warp]\nspeed = 9\n")
        with pytest.raises(ValueError, match="warp"):
            RunConfig.load(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[train]\nbatch_size = 4\nturbo = yes\n")
        with pytest.raises(ValueError, match="turbo"):
            RunConfig.load(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[train]\nbatch_size = lots\n")
        with pytest.raises(ValueError, match="lots"):
            RunConfig.load(path)

    def test_policy_by_option(self, tmp_path):
        path = tmp_path / "opt.ini"
        path.write_text("[policy]\noption = 8\n")
        assert RunConfig.load(path).policy == ablation_policy(8)

    def test_policy_option_conflicts_with_modes(self, tmp_path):
        path = tmp_path / "opt.ini"
        path.write_text("[policy]\noption = 8\ntext = causal\n")
        with pytest.raises(ValueError):
            RunConfig.load(path)

    def test_policy_partial_modes_rejected(self, tmp_path):
        path = tmp_path / "opt.ini"
        path.write_text("[policy]\ntext = causal\n")
        with pytest.raises(ValueError, match="missing"):
            RunConfig.load(path)


class TestRoundTrip:
    def test_save_load_equality(self, tmp_path):
        cfg = RunConfig(
            arch=ArchConfig(width=128, depth_enc=3, depth_dec=2, heads=4),
            diffusion=DiffusionConfig(steps=77, beta_end=0.015, sample_steps=13),
            data=DataConfig(jitter=3),
            train=TrainConfig(batch_size=6, lr=2.5e-4, steps=9, seed=8, loss_repeats=2),
            policy=ablation_policy(6),
            out_dir="runs/round",
        )
        path = tmp_path / "cfg.ini"
        cfg.save(path)
        assert RunConfig.load(path) == cfg


class TestValidation:
    def test_arch_divisibility(self):
        with pytest.raises(ValueError):
            ArchConfig(width=30, heads=4)

    def test_diffusion_sample_steps_bound(self):
        with pytest.raises(ValueError):
            DiffusionConfig(steps=10, sample_steps=20)

    def test_data_patch_divisibility(self):
        with pytest.raises(ValueError):
            DataConfig(image_size=16, patch_size=5)

    def test_train_bounds(self):
        with pytest.raises(ValueError):
            TrainConfig(mask_ratio_lo=0.0)
        with pytest.raises(ValueError):
            TrainConfig(cond_dropout=1.5)
        with pytest.raises(ValueError):
            TrainConfig(loss_repeats=0)
