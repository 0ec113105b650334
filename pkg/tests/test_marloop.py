import numpy as np
import pytest
import torch

from selfctl.backbone import SequenceBatch
from selfctl.config import ArchConfig, DiffusionConfig, RunConfig, build_model
from selfctl.errors import NonFiniteError
from selfctl.marloop import (
    MaskingPlan,
    TrainConfig,
    cosine_step_sizes,
    generate,
    generate_batch,
    make_generation_plan,
    sample_training_mask,
    train_loop,
)

SMALL = RunConfig(
    arch=ArchConfig(width=32, depth_enc=1, depth_dec=1, heads=2),
    diffusion=DiffusionConfig(steps=40, sample_steps=10, hidden=32, blocks=1, temb_dim=8),
    train=TrainConfig(batch_size=4, steps=4, seed=3),
)


@pytest.fixture(scope="module")
def small_model():
    model, data = build_model(SMALL)
    return model, data


class TestTrainingMask:
    def test_full_ratio_hides_everything(self):
        rng = np.random.default_rng(0)
        visible = sample_training_mask(4, (1.0, 1.0), rng)
        assert not visible.any()

    def test_hidden_count_within_bounds(self):
        rng = np.random.default_rng(1)
        counts = set()
        for _ in range(2000):
            visible = sample_training_mask(10, (0.7, 1.0), rng)
            counts.add(int((~visible).sum()))
        assert counts <= {7, 8, 9, 10}
        # ceil(r * 10) over r ~ U(0.7, 1.0] gives 8..10 with probability one
        assert {8, 9, 10} <= counts

    def test_at_least_one_hidden(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            visible = sample_training_mask(3, (0.01, 0.2), rng)
            assert (~visible).sum() >= 1

    def test_positions_roughly_uniform(self):
        rng = np.random.default_rng(3)
        g, draws = 8, 4000
        hits = np.zeros(g)
        for _ in range(draws):
            hits += ~sample_training_mask(g, (0.4, 0.6), rng)
        freq = hits / hits.sum()
        assert np.abs(freq - 1 / g).max() < 0.01

    def test_bounds_validation(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError):
            sample_training_mask(4, (0.0, 0.5), rng)
        with pytest.raises(ValueError):
            sample_training_mask(4, (0.8, 0.5), rng)


class TestGenerationPlan:
    def test_single_step_takes_all(self):
        plan = make_generation_plan(5, 1, np.random.default_rng(0))
        assert plan.num_steps == 1
        assert sorted(plan.steps[0].tolist()) == [0, 1, 2, 3, 4]

    def test_all_singletons(self):
        plan = make_generation_plan(4, 4, np.random.default_rng(1))
        assert [len(s) for s in plan.steps] == [1, 1, 1, 1]
        assert sorted(np.concatenate(plan.steps).tolist()) == [0, 1, 2, 3]

    def test_cosine_shares_64_8(self):
        sizes = cosine_step_sizes(64, 8)
        assert sizes.sum() == 64
        # direct evaluation of the share formula: later steps get larger sets
        ks = np.arange(1, 9)
        share = np.cos(np.pi / 2 * (ks - 1) / 8) - np.cos(np.pi / 2 * ks / 8)
        assert np.all(np.diff(share) > 0)
        assert np.all(np.diff(sizes) >= 0)
        assert (sizes >= 1).all()

    def test_partition_invariants_random(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            g = int(rng.integers(1, 65))
            k = int(rng.integers(1, g + 1))
            plan = make_generation_plan(g, k, rng)
            flat = np.concatenate(plan.steps)
            assert len(flat) == g
            assert np.array_equal(np.sort(flat), np.arange(g))
            assert all(len(s) >= 1 for s in plan.steps)

    def test_k_out_of_range(self):
        rng = np.random.default_rng(6)
        with pytest.raises(ValueError):
            make_generation_plan(4, 0, rng)
        with pytest.raises(ValueError):
            make_generation_plan(4, 5, rng)

    def test_plan_validation(self):
        with pytest.raises(ValueError):
            MaskingPlan((np.array([0, 1]), np.array([1, 2])))  # overlap
        with pytest.raises(ValueError):
            MaskingPlan((np.array([0, 2]),))  # gap
        with pytest.raises(ValueError):
            MaskingPlan(())


class TestTrainStep:
    def test_loss_finite_positive_and_decreasing_on_one_batch(self):
        cfg = RunConfig(
            arch=ArchConfig(width=64, depth_enc=1, depth_dec=1, heads=2),
            diffusion=DiffusionConfig(steps=100, sample_steps=10, hidden=64, blocks=2,
                                      temb_dim=16),
            train=TrainConfig(batch_size=4, steps=200, seed=0, lr=2e-3, loss_repeats=8),
        )
        model, data = build_model(cfg)
        rng = np.random.default_rng(0)
        fixed = data.batch(4, rng)

        class OneBatch:
            def batch(self, b, rng):
                return fixed

        losses = train_loop(model, OneBatch(), cfg.train)
        assert all(np.isfinite(losses)) and losses[0] > 0
        assert np.mean(losses[-20:]) < 0.7 * np.mean(losses[:20])

    def test_same_seed_same_trace(self):
        traces = []
        for _ in range(2):
            model, data = build_model(SMALL)
            traces.append(train_loop(model, data, SMALL.train))
        assert traces[0] == traces[1]

    def test_condition_dropout_path(self):
        cfg = RunConfig(
            arch=SMALL.arch, diffusion=SMALL.diffusion,
            train=TrainConfig(batch_size=4, steps=3, seed=1, cond_dropout=1.0),
        )
        model, data = build_model(cfg)
        losses = train_loop(model, data, cfg.train)
        assert len(losses) == 3 and all(np.isfinite(losses))

    def test_non_finite_loss_aborts(self, small_model):
        model, data = small_model
        with torch.no_grad():
            model.denoiser.out_proj.weight[0, 0] = float("nan")
        cfg = TrainConfig(batch_size=4, steps=2, seed=0)
        with pytest.raises(NonFiniteError):
            train_loop(model, data, cfg)
        with torch.no_grad():  # restore for the other module-scoped tests
            model.denoiser.out_proj.weight[0, 0] = 0.0


class TestGenerate:
    @pytest.fixture(scope="class")
    def model(self):
        model, _ = build_model(SMALL)
        return model

    def test_shape_and_range(self, model):
        img = generate(model, "red square", None, k=4, seed=0)
        assert img.shape == (16, 16, 3)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_fixed_seed_bit_identical(self, model):
        a = generate(model, "red square", None, k=4, seed=9)
        b = generate(model, "red square", None, k=4, seed=9)
        assert np.array_equal(a, b)

    def test_k_extremes(self, model):
        g = model.image_spec.gen_len
        for k in (1, g):
            img = generate(model, "blue circle", None, k=k, seed=1)
            assert np.isfinite(img).all()

    def test_every_position_sampled_once(self, model):
        # tokens for all positions move away from their zero init
        seen = []

        def hook(step, hidden):
            seen.append(step)

        imgs = generate_batch(model, ["red square"], [None], k=4, seed=2, trace_hook=hook)
        assert seen == [0, 1, 2, 3]
        assert np.isfinite(imgs).all()

    def test_condition_states_frozen_across_steps(self, model):
        states = []
        cond = np.ones((16, 16, 1), dtype=np.float32)

        def hook(step, hidden):
            states.append(hidden[:, : model.layout.gen_start].clone())

        generate_batch(model, ["green cross"], [cond], k=4, seed=3, trace_hook=hook)
        assert len(states) == 4
        for later in states[1:]:
            assert torch.equal(states[0], later)

    def test_guidance_path_runs_and_differs(self, model):
        cond = np.ones((16, 16, 1), dtype=np.float32)
        a = generate(model, "red square", cond, k=2, seed=4, guidance_scale=1.0)
        b = generate(model, "red square", cond, k=2, seed=4, guidance_scale=2.0)
        assert not np.array_equal(a, b)
        assert np.isfinite(b).all()

    def test_teacher_forcing_consistency(self, model):
        # first generation step conditions on exactly the all-hidden training z
        from selfctl.tokenizer import encode_text

        captured = {}

        def hook(step, hidden):
            if step == 0:
                captured["z"] = hidden[:, model.layout.gen_start :].clone()

        generate_batch(model, ["red square"], [None], k=2, seed=5, trace_hook=hook)
        ids, _ = encode_text("red square", model.vocab, model.max_text_len)
        batch = SequenceBatch(
            text=torch.from_numpy(ids[None]),
            imgcond=torch.zeros(1, 16, model.image_spec.token_dim),
            gen=torch.zeros(1, 16, model.image_spec.token_dim),
            visible=torch.zeros(1, 16, dtype=torch.bool),
            layout=model.layout,
            policy=model.policy,
            null_imgcond=torch.ones(1, dtype=torch.bool),
        )
        with torch.no_grad():
            z = model.backbone(batch)
        assert torch.equal(z, captured["z"])

    def test_null_and_conditioned_runs_differ(self, model):
        cond = np.zeros((16, 16, 1), dtype=np.float32)
        cond[4:10, 4:10] = 1.0
        a = generate(model, "red square", cond, k=2, seed=6)
        b = generate(model, None, None, k=2, seed=6)
        assert not np.array_equal(a, b)

    def test_mismatched_inputs_rejected(self, model):
        with pytest.raises(ValueError):
            generate_batch(model, ["a", "b"], [None], k=1, seed=0)
        with pytest.raises(ValueError):
            generate(model, "red", np.zeros((8, 8, 1), dtype=np.float32), k=1, seed=0)
