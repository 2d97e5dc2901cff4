import numpy as np
import pytest
from scipy import stats

from selftrain.corpus import CorpusError, Dataset, Example, EOS_ID, gen_copy_task
from selftrain.mixing import (
    FLAG_GENERATED,
    FLAG_GROUND_TRUTH,
    MixConfig,
    MixedExample,
    build_ds,
    mix_continuation,
    read_mixed_dataset,
    write_mixed_dataset,
)
from selftrain.model import init_params
from selftrain.parallel import BuildError
from selftrain.rng import stream


def oversized_example(context_len):
    n = context_len  # prompt + continuation exceed the context with BOS
    return Example(
        id="too-big",
        prompt_text="a" * n,
        continuation_text="a",
        prompt_ids=(6,) * n,
        continuation_ids=(6, EOS_ID),
    )


class TestMixContinuation:
    def test_beta_zero_is_ground_truth(self, tiny_params, copy_data):
        config = MixConfig(beta=0.0, seed=1)
        for ex in copy_data.examples[:8]:
            mixed = mix_continuation(tiny_params, ex, config, stream(1, "ds", ex.id))
            assert mixed.mixed_ids == ex.continuation_ids
            assert set(mixed.choice_flags) == {FLAG_GROUND_TRUTH}

    def test_beta_one_discards_ground_truth(self, tiny_params, copy_data):
        config = MixConfig(beta=1.0, seed=1)
        for ex in copy_data.examples[:8]:
            mixed = mix_continuation(tiny_params, ex, config, stream(1, "ds", ex.id))
            assert set(mixed.choice_flags) == {FLAG_GENERATED}

    def test_generated_fraction_tracks_beta(self, tiny_params):
        data = gen_copy_task(60, min_len=20, max_len=30, seed=4, context_len=96)
        config = MixConfig(beta=0.2, seed=9)
        mixed = build_ds(tiny_params, data, config)
        flags = np.concatenate([m.choice_flags for m in mixed])
        n = flags.size
        assert n >= 1000
        sigma = np.sqrt(0.2 * 0.8 / n)
        assert abs(flags.mean() - 0.2) <= 4.5 * sigma

    def test_mixed_length_equals_ground_truth_length(self, tiny_params, copy_data):
        config = MixConfig(beta=0.7, seed=2)
        for ex in copy_data.examples[:6]:
            mixed = mix_continuation(tiny_params, ex, config, stream(2, "ds", ex.id))
            assert len(mixed.mixed_ids) == len(ex.continuation_ids)

    def test_flip_pattern_independent_of_params(self, tiny_config, copy_data):
        # The flip draw precedes any sampling, so the generated/ground-truth
        # pattern is a function of the stream alone.
        a_params = init_params(tiny_config, 1)
        b_params = init_params(tiny_config, 2)
        config = MixConfig(beta=0.5, seed=3)
        for ex in copy_data.examples[:6]:
            a = mix_continuation(a_params, ex, config, stream(3, "ds", ex.id))
            b = mix_continuation(b_params, ex, config, stream(3, "ds", ex.id))
            assert a.choice_flags == b.choice_flags

    def test_prefix_before_first_generated_position_is_stable(self, tiny_config, copy_data):
        a_params = init_params(tiny_config, 1)
        b_params = init_params(tiny_config, 2)
        config = MixConfig(beta=0.3, seed=5)
        for ex in copy_data.examples[:8]:
            a = mix_continuation(a_params, ex, config, stream(5, "ds", ex.id))
            b = mix_continuation(b_params, ex, config, stream(5, "ds", ex.id))
            if FLAG_GENERATED in a.choice_flags:
                first = a.choice_flags.index(FLAG_GENERATED)
                assert a.mixed_ids[:first] == b.mixed_ids[:first] == ex.continuation_ids[:first]

    def test_ground_truth_positions_bit_exact(self, tiny_params, copy_data):
        config = MixConfig(beta=0.5, seed=6)
        for ex in copy_data.examples[:8]:
            mixed = mix_continuation(tiny_params, ex, config, stream(6, "ds", ex.id))
            for flag, got, want in zip(mixed.choice_flags, mixed.mixed_ids, ex.continuation_ids):
                if flag == FLAG_GROUND_TRUTH:
                    assert got == want

    def test_per_position_law_chi_square(self, tiny_params):
        # Generated flags at every position follow Bernoulli(beta) independently.
        data = gen_copy_task(300, min_len=6, max_len=6, seed=8)
        mixed = build_ds(tiny_params, data, MixConfig(beta=0.3, seed=8))
        flags = np.array([m.choice_flags for m in mixed])  # [300, 7]
        pvalues = []
        for j in range(flags.shape[1]):
            ones = int(flags[:, j].sum())
            table = np.array([ones, flags.shape[0] - ones])
            expected = np.array([0.3, 0.7]) * flags.shape[0]
            pvalues.append(stats.chisquare(table, expected).pvalue)
        assert min(pvalues) > 0.001

    def test_invalid_beta_rejected(self):
        with pytest.raises(ValueError):
            MixConfig(beta=1.5)


class TestBuildDs:
    def test_worker_count_does_not_change_bytes(self, tiny_params, copy_data, tmp_path):
        config = MixConfig(beta=0.4, seed=12)
        a, b = tmp_path / "w1.jsonl", tmp_path / "w8.jsonl"
        write_mixed_dataset(a, build_ds(tiny_params, copy_data, config, workers=1), copy_data.task_name, copy_data.seed)
        write_mixed_dataset(b, build_ds(tiny_params, copy_data, config, workers=8), copy_data.task_name, copy_data.seed)
        assert a.read_bytes() == b.read_bytes()

    def test_size_preserved_without_skips(self, tiny_params, copy_data):
        mixed = build_ds(tiny_params, copy_data, MixConfig(beta=0.2, seed=1))
        assert len(mixed) == len(copy_data.examples)

    def test_oversized_examples_skip_within_budget(self, tiny_params, tiny_config):
        # One oversized among 121 stays under the 1% failure threshold.
        ok = gen_copy_task(120, min_len=3, max_len=5, seed=2).examples
        data = Dataset(ok + [oversized_example(tiny_config.context_len)], "copy", 0)
        mixed = build_ds(tiny_params, data, MixConfig(beta=0.0, seed=1))
        assert len(mixed) == 120

    def test_too_many_skips_fail(self, tiny_params, tiny_config):
        data = Dataset([oversized_example(tiny_config.context_len)], "copy", 0)
        with pytest.raises(BuildError, match="skipped"):
            build_ds(tiny_params, data, MixConfig(beta=0.0, seed=1))

    def test_file_round_trip(self, tiny_params, copy_data, tmp_path):
        mixed = build_ds(tiny_params, copy_data, MixConfig(beta=0.5, seed=3))
        path = tmp_path / "ds.jsonl"
        write_mixed_dataset(path, mixed, copy_data.task_name, copy_data.seed)
        loaded, task_name, seed = read_mixed_dataset(path)
        assert loaded == mixed
        assert (task_name, seed) == (copy_data.task_name, copy_data.seed)

    def test_mixed_file_reads_as_plain_dataset(self, tiny_params, copy_data, tmp_path):
        from selftrain.corpus import read_dataset

        mixed = build_ds(tiny_params, copy_data, MixConfig(beta=0.5, seed=3))
        path = tmp_path / "ds.jsonl"
        write_mixed_dataset(path, mixed, copy_data.task_name, copy_data.seed)
        assert read_dataset(path) == copy_data

    def test_altered_ground_truth_position_rejected(self, copy_data):
        ex = copy_data.examples[0]
        bad = list(ex.continuation_ids)
        bad[0] += 1
        with pytest.raises(CorpusError, match="ground-truth"):
            MixedExample(ex, tuple(bad), (FLAG_GROUND_TRUTH,) * len(bad))
