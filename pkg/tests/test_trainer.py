import pytest
import torch

from selftrain.correction import RacExample
from selftrain.model import ModelConfig, ModelParams, init_params
from selftrain.trainer import (
    ConfigError,
    MetricsRow,
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    lr_at,
    optimizer_step,
    parse_config_text,
    read_config_file,
    read_metrics,
    run_training,
    train_bash,
    train_sft,
    write_config_file,
    write_metrics,
)


def scalar_params(dtype=torch.float32):
    config = ModelConfig()
    return ModelParams(config, {"w": torch.tensor([1.0], dtype=dtype)})


class TestOptimizerStep:
    def test_first_step_closed_form(self):
        params = scalar_params(torch.float64)
        state = OptimizerState.fresh(params)
        grads = {"w": torch.tensor([1.0], dtype=torch.float64)}
        new_params, new_state = optimizer_step(params, grads, state, lr=0.1)
        expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))
        assert float(new_params.tensors["w"]) == pytest.approx(expected, abs=1e-12)
        assert new_state.step == 1

    def test_zero_gradient_leaves_params(self):
        params = scalar_params()
        state = OptimizerState.fresh(params)
        new_params, _ = optimizer_step(params, {"w": torch.tensor([0.0])}, state, lr=0.5)
        assert float(new_params.tensors["w"]) == 1.0

    def test_two_half_steps_differ_from_one_full_step(self):
        grads = {"w": torch.tensor([0.3])}
        one, _ = optimizer_step(scalar_params(), grads, OptimizerState.fresh(scalar_params()), lr=0.2)
        half_params, half_state = optimizer_step(
            scalar_params(), grads, OptimizerState.fresh(scalar_params()), lr=0.1
        )
        two, _ = optimizer_step(half_params, grads, half_state, lr=0.1)
        assert float(one.tensors["w"]) != float(two.tensors["w"])

    def test_non_finite_gradient_rejected(self):
        params = scalar_params()
        with pytest.raises(TrainingDiverged, match="w"):
            optimizer_step(params, {"w": torch.tensor([float("nan")])}, OptimizerState.fresh(params), lr=0.1)

    def test_weight_decay_decoupled(self):
        params = scalar_params()
        state = OptimizerState.fresh(params, weight_decay=0.5)
        new_params, _ = optimizer_step(params, {"w": torch.tensor([0.0])}, state, lr=0.1)
        # Zero gradient: only the decay factor moves the parameter.
        assert float(new_params.tensors["w"]) == pytest.approx(1.0 * (1 - 0.1 * 0.5))

    def test_deterministic(self):
        grads = {"w": torch.tensor([0.7])}
        a, _ = optimizer_step(scalar_params(), grads, OptimizerState.fresh(scalar_params()), lr=0.3)
        b, _ = optimizer_step(scalar_params(), grads, OptimizerState.fresh(scalar_params()), lr=0.3)
        assert torch.equal(a.tensors["w"], b.tensors["w"])


class TestLrSchedule:
    def test_cosine_endpoints(self):
        config = TrainConfig(lr=0.01, schedule="cosine", lr_warmup_frac=0.1)
        total = 100
        assert lr_at(0, total, config) == 0.0
        assert lr_at(10, total, config) == pytest.approx(0.01)
        assert lr_at(total, total, config) == pytest.approx(0.0, abs=1e-12)

    def test_cosine_midpoint(self):
        config = TrainConfig(lr=0.01, schedule="cosine", lr_warmup_frac=0.0)
        assert lr_at(50, 100, config) == pytest.approx(0.005)

    def test_warmup_is_linear(self):
        config = TrainConfig(lr=0.01, schedule="cosine", lr_warmup_frac=0.5)
        assert lr_at(5, 100, config) == pytest.approx(0.001)

    def test_constant(self):
        config = TrainConfig(lr=0.02, schedule="constant")
        assert {lr_at(s, 10, config) for s in range(11)} == {0.02}


class TestTrainConfig:
    def test_mode_validated(self):
        with pytest.raises(ConfigError):
            TrainConfig(mode="dpo")

    def test_k_requirements_per_mode(self):
        TrainConfig(mode="sft_only", k1_warmup_steps=0)  # allowed
        with pytest.raises(ConfigError):
            TrainConfig(mode="bash", k1_warmup_steps=0)
        with pytest.raises(ConfigError):
            TrainConfig(mode="rac", h_outer_iters=0)

    def test_multiple_problems_reported_together(self):
        with pytest.raises(ConfigError, match="lr.*batch_size|batch_size.*lr"):
            TrainConfig(lr=-1, batch_size=0)


@pytest.fixture(scope="module")
def fast_config():
    return TrainConfig(
        mode="sft_only", k1_warmup_steps=6, k2_inner_steps=4, h_outer_iters=2,
        batch_size=8, seed=3, lr=1e-3, max_new_tokens=8,
    )


class TestTrainSft:
    def test_zero_steps_returns_params_unchanged(self, tiny_params, copy_data):
        config = TrainConfig(mode="sft_only", k1_warmup_steps=0)
        params, record, _ = train_sft(tiny_params, copy_data, config)
        assert params is tiny_params
        assert record.rows == []

    def test_runs_and_records(self, tiny_config, copy_data, fast_config):
        params = init_params(tiny_config, 3)
        params, record, _ = train_sft(params, copy_data, fast_config)
        assert params.sft_warmed
        assert len(record.rows) == 6
        assert [r.step for r in record.rows] == list(range(6))
        assert all(r.phase == "sft" for r in record.rows)

    def test_fixed_seed_reproducible_checkpoints(self, tiny_config, copy_data, fast_config, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            out.mkdir()
            run_training(init_params(tiny_config, 3), copy_data, fast_config, out)
        assert (out_a / "final.ckpt").read_bytes() == (out_b / "final.ckpt").read_bytes()
        metrics_a = read_metrics(out_a / "metrics.csv")
        metrics_b = read_metrics(out_b / "metrics.csv")
        assert [r.loss_total for r in metrics_a] == [r.loss_total for r in metrics_b]

    def test_divergence_aborts_with_checkpoint(self, tiny_config, copy_data, tmp_path):
        config = TrainConfig(mode="sft_only", k1_warmup_steps=30, lr=1e12, schedule="constant", seed=1)
        params = init_params(tiny_config, 1)
        with pytest.raises(TrainingDiverged):
            train_sft(params, copy_data, config, out_dir=tmp_path)
        assert (tmp_path / "last_good.ckpt").exists()


class TestOfflineModes:
    def test_bash_requires_warmup(self, tiny_params, copy_data, fast_config):
        config = TrainConfig(**{**fast_config.__dict__, "mode": "bash"})
        fresh = init_params(tiny_params.config, 1)
        with pytest.raises(ConfigError, match="warmed"):
            train_bash(fresh, copy_data, config)

    def test_bash_emits_artifacts_and_steps(self, tiny_config, copy_data, tmp_path):
        config = TrainConfig(
            mode="bash", k1_warmup_steps=2, k2_inner_steps=3, h_outer_iters=2,
            batch_size=8, seed=4, lr=1e-3,
        )
        params, record = run_training(init_params(tiny_config, 4), copy_data, config, tmp_path)
        build_artifacts = [a for a in record.artifacts if a["phase"] == "bash"]
        assert len(build_artifacts) == 2
        assert all((tmp_path / f"ds_iter{h}.jsonl").exists() for h in (1, 2))
        combined_rows = [r for r in record.rows if r.phase == "bash"]
        assert len(combined_rows) == 2 * 3
        steps = [r.step for r in record.rows]
        assert steps == sorted(steps) and len(set(steps)) == len(steps)

    def test_rac_emits_artifacts(self, tiny_config, copy_data, tmp_path):
        config = TrainConfig(
            mode="rac", k1_warmup_steps=2, k2_inner_steps=2, h_outer_iters=2,
            batch_size=6, seed=5, lr=1e-3, max_new_tokens=8,
        )
        params, record = run_training(init_params(tiny_config, 5), copy_data, config, tmp_path)
        assert len([a for a in record.artifacts if a["phase"] == "rac"]) == 2
        assert all((tmp_path / f"dr_iter{h}.jsonl").exists() for h in (1, 2))

    def test_zero_mask_rac_matches_sft_trajectory(self, tiny_config, copy_data, monkeypatch):
        # With every correction label agreeing, the auxiliary term vanishes;
        # with a shared batch stream, constant lr, and carried optimizer
        # state the run must be bit-identical to plain warmup of equal length.
        def fake_build_dr(params, dataset, gen_config, template=None, seed=0, workers=1):
            return [
                RacExample(ex, (7, 8, 9), (7, 8, 9), (0, 0, 0))
                for ex in dataset.examples
            ]

        monkeypatch.setattr("selftrain.trainer.build_dr", fake_build_dr)
        rac_config = TrainConfig(
            mode="rac", k1_warmup_steps=4, k2_inner_steps=3, h_outer_iters=2,
            batch_size=8, seed=9, lr=1e-3, schedule="constant",
            reset_optimizer_between_phases=False,
        )
        sft_config = TrainConfig(
            mode="sft_only", k1_warmup_steps=4 + 3 * 2, batch_size=8, seed=9,
            lr=1e-3, schedule="constant",
        )
        rac_params, rac_record = run_training(init_params(tiny_config, 9), copy_data, rac_config)
        sft_params, _ = run_training(init_params(tiny_config, 9), copy_data, sft_config)
        assert all(
            torch.equal(rac_params.tensors[k], sft_params.tensors[k]) for k in rac_params.tensors
        )
        assert all(r.loss_aux == 0.0 for r in rac_record.rows if r.phase == "rac")

    def test_scs_beta_zero_matches_sft_trajectory(self, tiny_config, copy_data):
        scs_config = TrainConfig(
            mode="scs_online", beta=0.0, k1_warmup_steps=4, k2_inner_steps=3,
            h_outer_iters=2, batch_size=8, seed=9, lr=1e-3, schedule="constant",
            reset_optimizer_between_phases=False,
        )
        sft_config = TrainConfig(
            mode="sft_only", k1_warmup_steps=10, batch_size=8, seed=9,
            lr=1e-3, schedule="constant",
        )
        scs_params, _ = run_training(init_params(tiny_config, 9), copy_data, scs_config)
        sft_params, _ = run_training(init_params(tiny_config, 9), copy_data, sft_config)
        assert all(
            torch.equal(scs_params.tensors[k], sft_params.tensors[k]) for k in scs_params.tensors
        )

    def test_phase_ordering(self, tiny_config, copy_data, tmp_path):
        config = TrainConfig(
            mode="bash", k1_warmup_steps=3, k2_inner_steps=2, h_outer_iters=1,
            batch_size=8, seed=6, lr=1e-3,
        )
        _, record = run_training(init_params(tiny_config, 6), copy_data, config)
        phases = [r.phase for r in record.rows]
        first_bash = phases.index("bash")
        assert all(p == "sft" for p in phases[:first_bash])
        assert first_bash == 3

    def test_scs_runs_requested_steps(self, tiny_config, copy_data):
        config = TrainConfig(
            mode="scs_online", beta=0.2, k1_warmup_steps=2, k2_inner_steps=3,
            h_outer_iters=2, batch_size=6, seed=7, lr=1e-3,
        )
        _, record = run_training(init_params(tiny_config, 7), copy_data, config)
        assert len([r for r in record.rows if r.phase == "scs_online"]) == 6


class TestMetricsFile:
    def test_round_trip(self, tmp_path):
        rows = [
            MetricsRow(0, "sft", 0.001, 3.5, 3.5, 0.0, 100, 12.0),
            MetricsRow(1, "bash", 0.002, 3.0, 1.5, 1.5, 120, 15.5),
        ]
        path = tmp_path / "metrics.csv"
        write_metrics(path, rows)
        assert read_metrics(path) == rows
        header = path.read_text().splitlines()[0]
        assert header == "step,phase,lr,loss_total,loss_sft,loss_aux,unmasked_token_count,wall_ms"


class TestConfigFile:
    def test_round_trip(self, tmp_path):
        model = ModelConfig(n_layers=3, d_model=48, n_heads=3)
        train = TrainConfig(lr=0.005, mode="bash", include_sft_loss=False, beta=0.4)
        path = tmp_path / "config.txt"
        write_config_file(path, model, train)
        loaded_model, loaded_train = read_config_file(path)
        assert loaded_model == model
        assert loaded_train == train

    def test_unknown_keys_all_reported(self):
        text = "lr = 0.1\nbogus_key = 3\nanother_bad = x\n"
        with pytest.raises(ConfigError) as err:
            parse_config_text(text)
        assert "another_bad" in str(err.value) and "bogus_key" in str(err.value)

    def test_bad_value_reported_with_line(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config_text("lr = fast\n")

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "config.txt"
        write_config_file(path, ModelConfig(), TrainConfig(lr=0.001))
        _, train = read_config_file(path, overrides={"lr": 0.002})
        assert train.lr == 0.002

    def test_comments_and_blanks_ignored(self):
        model, train = parse_config_text("# hello\n\nlr = 0.25\n")
        assert train.lr == 0.25
