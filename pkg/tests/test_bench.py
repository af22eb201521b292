from dataclasses import replace

import numpy as np
import pytest

from progattr.bench import bench_inference, bench_training
from progattr.data import MISSING, ArticleSchema, Dataset, SyntheticConfig, generate_synthetic, preset
from progattr.errors import ComparisonError, ConfigurationError
from progattr.models import Ensemble, NetConfig, build_individual, build_progressive
from progattr.training import TrainConfig

SEVEN = ArticleSchema.from_counts("Synth", {f"A{i}": 2 + i for i in range(7)})
SMALL = NetConfig(input_size=16, stem_channels=4, stage_widths=(4, 8, 8), blocks_per_stage=(1, 1, 1),
                  split_stage=2)


def images(n, size=32, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 1, size, size)).astype(np.float32)


class TestInference:
    @pytest.mark.parametrize("n", [1, 3, 7])
    def test_counters_and_equality(self, n):
        model = build_progressive(SMALL, SEVEN.subset(SEVEN.names[:n]))
        cmp = bench_inference(model, images(100, 16), batch_size=32, repetitions=3)
        assert cmp.progressive.batches == 4
        assert cmp.progressive.base_forward_calls == 4
        assert cmp.ensemble.base_forward_calls == 4 * n
        assert cmp.outputs_equal

    def test_single_branch_ratio(self):
        model = build_progressive(NetConfig(), SEVEN.subset(["A0"]))
        cmp = bench_inference(model, images(128), batch_size=32, repetitions=5)
        assert 0.8 <= cmp.ratio <= 1.25

    def test_seven_branches_faster(self):
        model = build_progressive(NetConfig(), SEVEN)
        cmp = bench_inference(model, images(128), batch_size=32, repetitions=5)
        assert cmp.ratio <= 0.7

    def test_rows(self):
        model = build_progressive(SMALL, SEVEN.subset(SEVEN.names[:2]))
        rows = bench_inference(model, images(40, 16), repetitions=3).to_rows()
        assert [r["mode"] for r in rows] == ["progressive", "individual-ensemble"]
        assert all(v is not None for r in rows for v in r.values())

    def test_too_few_repetitions(self):
        model = build_progressive(SMALL, SEVEN.subset(["A0"]))
        with pytest.raises(ConfigurationError):
            bench_inference(model, images(8, 16), repetitions=2)

    def test_config_mismatch(self):
        model = build_progressive(SMALL, SEVEN.subset(["A0"]))
        other = Ensemble([build_individual(NetConfig(), SEVEN, "A0")])
        with pytest.raises(ComparisonError):
            bench_inference(model, images(8, 16), repetitions=3, ensemble=other)


@pytest.fixture(scope="module")
def jeans400():
    ds, _ = generate_synthetic(SyntheticConfig(preset("jeans"), seed=0), 400)
    return ds


class TestTraining:
    def test_three_attributes(self, jeans400):
        res = bench_training(jeans400, TrainConfig())
        assert res.individual_epochs == {"Fade": 12, "Shade": 10, "Distress": 8}
        assert res.ratio < 0.9
        rows = res.to_rows()
        assert [r["mode"] for r in rows] == ["progressive", "individual-sum"]
        assert all(r["wall_time"] > 0 for r in rows)

    def test_single_attribute(self, jeans400):
        one = Dataset(jeans400.schema.subset(["Fade"]), jeans400.ids, jeans400.features,
                      jeans400.labels[:, [0]])
        one = one.take(np.flatnonzero(one.labels[:, 0] != MISSING))
        # without the frozen-base phase both runs execute the same steps
        res = bench_training(one, TrainConfig(epochs_final_branch=0))
        assert 0.8 <= res.ratio <= 1.25
