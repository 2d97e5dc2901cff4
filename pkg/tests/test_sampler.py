import numpy as np
import pytest
from scipy import stats

from selftrain.corpus import EOS_ID
from selftrain.model import ModelError, forward, init_params
from selftrain.rng import stream
from selftrain.sampler import (
    GenerationConfig,
    generate,
    next_token,
    softmax_probs,
    teacher_forced_argmax,
)

GREEDY = GenerationConfig(max_new_tokens=4, mode="greedy")


def biased_params(config, token, seed=0):
    """Model whose argmax (and near-certain sample) is always ``token``."""
    params = init_params(config, seed)
    params.tensors["out.w"].zero_()
    params.tensors["out.b"].zero_()
    params.tensors["out.b"][token] = 30.0
    return params


class TestNextToken:
    def test_uniform_sampling_frequencies(self):
        v = 44
        config = GenerationConfig(max_new_tokens=1, mode="sample", temperature=1.0)
        rng = stream("freq-test")
        n = 100_000
        counts = np.bincount(
            [next_token(np.zeros(v), config, rng) for _ in range(n)], minlength=v
        )
        sigma = np.sqrt(n * (1 / v) * (1 - 1 / v))
        assert np.abs(counts - n / v).max() <= 4 * sigma

    def test_closed_form_temperature(self):
        probs = softmax_probs(np.array([0.0, np.log(3.0)]), temperature=0.5)
        assert probs == pytest.approx([0.1, 0.9], abs=1e-12)

    def test_greedy_unique_max(self):
        row = np.array([0.1, 5.0, 0.3])
        config = GenerationConfig(max_new_tokens=1, mode="greedy")
        assert all(next_token(row, config) == 1 for _ in range(20))

    def test_greedy_tie_breaks_low_id(self):
        row = np.array([1.0, 7.0, 7.0, 7.0])
        config = GenerationConfig(max_new_tokens=1, mode="greedy")
        assert next_token(row, config) == 1

    def test_non_finite_rejected(self):
        config = GenerationConfig(max_new_tokens=1, mode="greedy")
        with pytest.raises(ValueError, match="non-finite"):
            next_token(np.array([0.0, np.nan]), config)
        with pytest.raises(ValueError, match="non-finite"):
            next_token(np.array([0.0, np.inf]), config)

    def test_low_temperature_concentrates_on_argmax(self, tiny_params):
        logits = forward(tiny_params, [0, 5, 9])[-1]
        greedy_choice = int(np.argmax(logits))
        config = GenerationConfig(max_new_tokens=1, mode="sample", temperature=1e-4)
        rng = stream("cold")
        assert all(next_token(logits, config, rng) == greedy_choice for _ in range(10_000))

    def test_chi_square_goodness_of_fit(self):
        rng_logits = np.random.default_rng(3)
        row = rng_logits.normal(size=16)
        probs = softmax_probs(row, 1.0)
        config = GenerationConfig(max_new_tokens=1, mode="sample", temperature=1.0)
        rng = stream("chi2")
        n = 50_000
        counts = np.bincount([next_token(row, config, rng) for _ in range(n)], minlength=16)
        result = stats.chisquare(counts, probs * n)
        assert result.pvalue > 0.001

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            GenerationConfig(mode="sample", temperature=0.0)
        with pytest.raises(ValueError):
            GenerationConfig(mode="beam")


class TestGenerate:
    def test_always_eos_model(self, tiny_config):
        params = biased_params(tiny_config, EOS_ID)
        result = generate(params, [0, 7, 8], GREEDY)
        assert result.tokens == (EOS_ID,)
        assert result.stopped_by == "eos"

    def test_never_eos_model(self, tiny_config):
        params = biased_params(tiny_config, 9)
        config = GenerationConfig(max_new_tokens=5, mode="greedy")
        result = generate(params, [0, 7], config)
        assert result.tokens == (9,) * 5
        assert result.stopped_by == "max_len"

    def test_greedy_deterministic(self, tiny_params):
        a = generate(tiny_params, [0, 3, 4], GREEDY)
        b = generate(tiny_params, [0, 3, 4], GREEDY)
        assert a == b

    def test_sampled_reproducible_from_stream(self, tiny_params):
        config = GenerationConfig(max_new_tokens=6, mode="sample", temperature=1.0)
        a = generate(tiny_params, [0, 3], config, stream("gen", 1))
        b = generate(tiny_params, [0, 3], config, stream("gen", 1))
        assert a == b

    def test_context_overflow_rejected_before_work(self, tiny_params, tiny_config):
        config = GenerationConfig(max_new_tokens=tiny_config.context_len, mode="greedy")
        with pytest.raises(ModelError):
            generate(tiny_params, [0, 1, 2], config)

    def test_eos_at_most_once_and_final(self, tiny_params):
        config = GenerationConfig(max_new_tokens=12, mode="sample", temperature=2.0)
        for case in range(10):
            result = generate(tiny_params, [0, case + 4], config, stream("eos-pos", case))
            if EOS_ID in result.tokens:
                assert result.tokens.index(EOS_ID) == len(result.tokens) - 1


class TestTeacherForcedArgmax:
    def test_matches_step_by_step_loop(self, tiny_params):
        rng = stream("tfa")
        for _ in range(25):
            prefix = [0] + list(rng.integers(4, 40, size=int(rng.integers(2, 8))))
            given = list(rng.integers(4, 40, size=int(rng.integers(1, 7))))
            single_pass = teacher_forced_argmax(tiny_params, prefix, given)
            looped = []
            for j in range(len(given)):
                logits = forward(tiny_params, prefix + given[:j])
                looped.append(int(np.argmax(logits[-1])))
            assert single_pass == tuple(looped)

    def test_length_one(self, tiny_params):
        prefix = [0, 5, 6]
        out = teacher_forced_argmax(tiny_params, prefix, [9])
        expected = int(np.argmax(forward(tiny_params, prefix)[-1]))
        assert out == (expected,)

    def test_deterministic(self, tiny_params):
        a = teacher_forced_argmax(tiny_params, [0, 5], [7, 8, 9])
        b = teacher_forced_argmax(tiny_params, [0, 5], [7, 8, 9])
        assert a == b

    def test_overflow_rejected(self, tiny_params, tiny_config):
        with pytest.raises(ModelError):
            teacher_forced_argmax(tiny_params, [0] * tiny_config.context_len, [1, 2])
