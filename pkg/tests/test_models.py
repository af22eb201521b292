import numpy as np
import pytest

from progattr.data import ArticleSchema, preset
from progattr.errors import AlreadyAttachedError, ConfigurationError, InvalidShapeError
from progattr.models import (Ensemble, NetConfig, base_param_count, branch_param_count,
                             build_individual, build_multilabel, build_progressive,
                             build_reference_init, attach_branch, count_params, forward_shared,
                             standalone_branch)

SMALL = NetConfig(input_size=16, stem_channels=4, stage_widths=(4, 8, 8), blocks_per_stage=(1, 1, 1),
                  split_stage=2)


def weights(module):
    return [(n, p.data.tobytes()) for n, p in module.named_parameters()]


def seven_schema():
    return ArticleSchema.from_counts("Synth", {f"A{i}": 2 + i for i in range(7)})


def batch(rng, cfg, n=4):
    return rng.standard_normal((n, cfg.input_channels, cfg.input_size, cfg.input_size)).astype(np.float32)


class TestNetConfig:
    def test_defaults(self):
        c = NetConfig()
        assert (c.input_channels, c.input_size, c.stem_channels) == (1, 32, 8)
        assert c.stage_widths == (8, 16, 32, 32) and c.split_stage == 3

    @pytest.mark.parametrize("split", [0, 4])
    def test_split_out_of_range(self, split):
        with pytest.raises(ConfigurationError):
            NetConfig(split_stage=split)

    def test_layer_group_order(self):
        model = build_progressive(NetConfig(), preset("jeans"))
        base = {p.layer_group for p in model.base.parameters()}
        branch = {p.layer_group for b in model.branches.values() for p in b.parameters()}
        assert max(base) < min(branch)

    def test_round_trip(self):
        assert NetConfig.from_dict(SMALL.to_dict()) == SMALL


class TestReferenceInit:
    def test_deterministic(self):
        a, b = build_reference_init(NetConfig(), 7), build_reference_init(NetConfig(), 7)
        assert weights(a[0]) == weights(b[0]) and weights(a[1]) == weights(b[1])

    def test_seed_matters(self):
        assert weights(build_reference_init(NetConfig(), 1)[0]) != weights(build_reference_init(NetConfig(), 2)[0])

    def test_branch_bodies_identical_before_training(self):
        model = build_progressive(NetConfig(), preset("jeans"))
        bodies = [weights(b.body) for b in model.branches.values()]
        assert bodies[0] == bodies[1] == bodies[2]
        assert weights(model.reference_body) == bodies[0]

    def test_no_shared_storage(self):
        model = build_progressive(NetConfig(), preset("jeans"))
        ptrs = [p.data.__array_interface__["data"][0] for p in model.parameters()]
        assert len(ptrs) == len(set(ptrs))

    def test_he_variance(self):
        base, body = build_reference_init(NetConfig(), 0)
        checked = 0
        for name, p in list(base.named_parameters()) + list(body.named_parameters()):
            if p.data.ndim == 4 and p.size >= 1000:
                fan_in = int(np.prod(p.shape[1:]))
                var = p.data.astype(np.float64).var()
                assert abs(var - 2 / fan_in) <= 0.2 * 2 / fan_in, name
                checked += 1
        assert checked >= 3


class TestAttach:
    def test_increments_and_preserves(self):
        model = build_progressive(NetConfig(), preset("jeans"), attributes=["Fade"])
        before = weights(model.branches["Fade"]) + weights(model.base)
        attach_branch(model, "Shade")
        assert model.n == 2
        assert weights(model.branches["Fade"]) + weights(model.base) == before

    def test_head_shape(self):
        model = build_progressive(NetConfig(), preset("jeans"), attributes=[])
        attach_branch(model, "Colour", num_classes=4)
        assert model.branches["Colour"].head.weight.shape == (NetConfig().feature_width, 4)
        assert "Colour" in model.schema

    def test_duplicate(self):
        model = build_progressive(NetConfig(), preset("jeans"))
        with pytest.raises(AlreadyAttachedError):
            attach_branch(model, "Fade")

    def test_unknown_without_classes(self):
        model = build_progressive(NetConfig(), preset("jeans"), attributes=[])
        with pytest.raises(ConfigurationError):
            attach_branch(model, "Colour")

    @pytest.mark.parametrize("classes", [2, 3, 9])
    def test_count_delta(self, classes):
        model = build_progressive(NetConfig(), preset("jeans"))
        before = count_params(model)["total"]
        attach_branch(model, "New", num_classes=classes)
        assert count_params(model)["total"] - before == branch_param_count(NetConfig(), classes)


class TestForwardShared:
    @pytest.mark.parametrize("n", [1, 3, 7])
    def test_rows_sum_to_one_and_counter(self, n):
        schema = seven_schema().subset([f"A{i}" for i in range(n)])
        model = build_progressive(SMALL, schema, seed=3)
        rng = np.random.default_rng(n)
        for b in range(5):
            outs = forward_shared(model, batch(rng, SMALL))
            assert len(outs) == n
            for k, p in enumerate(outs):
                assert p.shape == (4, schema.class_counts[k])
                np.testing.assert_allclose(p.data.sum(axis=1), 1, atol=1e-6)
            assert model.base_forward_calls == b + 1

    @pytest.mark.parametrize("n", [1, 3, 7])
    def test_bitwise_equal_to_standalone(self, n):
        schema = seven_schema().subset([f"A{i}" for i in range(n)])
        model = build_progressive(SMALL, schema, seed=5)
        rng = np.random.default_rng(0)
        for p in model.parameters():   # decorrelate branches
            p.data += rng.normal(0, 0.01, p.shape).astype(np.float32)
        singles = [standalone_branch(model, a) for a in schema.names]
        x = batch(rng, SMALL)
        for k, out in enumerate(forward_shared(model, x)):
            assert out.data.tobytes() == forward_shared(singles[k], x)[0].data.tobytes()

    def test_branch_independence(self):
        model = build_progressive(SMALL, seven_schema().subset(["A0", "A1", "A2"]), seed=1)
        x = batch(np.random.default_rng(2), SMALL)
        before = [o.data.tobytes() for o in forward_shared(model, x)]
        for p in model.branches["A1"].parameters():
            p.data *= 1.5
        after = [o.data.tobytes() for o in forward_shared(model, x)]
        assert after[0] == before[0] and after[2] == before[2] and after[1] != before[1]

    def test_shape_mismatch(self):
        model = build_progressive(SMALL, preset("jeans"))
        with pytest.raises(InvalidShapeError):
            forward_shared(model, np.zeros((2, 1, 8, 8), np.float32))

    def test_ensemble_counter(self):
        model = build_progressive(SMALL, preset("jeans"))
        ens = Ensemble.from_progressive(model)
        x = batch(np.random.default_rng(0), SMALL)
        for _ in range(4):
            ens.forward(x)
        assert ens.base_forward_calls == 12


class TestBaselines:
    def test_individual_structure(self):
        cfg = NetConfig()
        ind = build_individual(cfg, preset("jeans"), "Shade")
        counts = count_params(ind)
        assert counts["total"] == base_param_count(cfg) + branch_param_count(cfg, 4)
        out = forward_shared(ind, np.zeros((2, 1, 32, 32), np.float32))
        assert len(out) == 1 and out[0].shape == (2, 4)

    def test_individual_unknown(self):
        with pytest.raises(ConfigurationError):
            build_individual(NetConfig(), preset("jeans"), "Neck")

    def test_individual_sum(self):
        cfg, schema = NetConfig(), preset("jeans")
        total = sum(count_params(build_individual(cfg, schema, a))["total"] for a in schema.names)
        expected = sum(base_param_count(cfg) + branch_param_count(cfg, c) for c in schema.class_counts)
        assert total == expected

    def test_multilabel_jeans(self):
        assert build_multilabel(NetConfig(), preset("jeans")).m == 12

    def test_multilabel_dresses(self):
        assert build_multilabel(NetConfig(), preset("dresses")).m == 79

    def test_multilabel_range(self):
        model = build_multilabel(SMALL, preset("tops"))
        out = model.forward(batch(np.random.default_rng(0), SMALL) * 10).data
        assert out.shape == (4, 55) and np.all((out > 0) & (out < 1))

    def test_multilabel_empty_schema(self):
        with pytest.raises(ConfigurationError):
            build_multilabel(NetConfig(), ArticleSchema("Empty", ()))


class TestCountParams:
    def test_empty_branch_list(self):
        model = build_progressive(NetConfig(), preset("jeans"), attributes=[])
        counts = count_params(model)
        assert counts["total"] == counts["base"] == base_param_count(NetConfig())

    def test_additivity(self):
        cfg, schema = NetConfig(), preset("dresses")
        c = count_params(build_progressive(cfg, schema))
        assert c["total"] == base_param_count(cfg) + sum(branch_param_count(cfg, k) for k in schema.class_counts)
        assert c["total"] == c["base"] + sum(c[f"branch:{a}"] for a in schema.names)

    def test_matches_enumeration(self):
        model = build_progressive(NetConfig(), preset("tops"))
        model.base.set_trainable(False)
        c = count_params(model)
        assert c["total"] == sum(p.data.size for p in model.parameters())
        assert c["frozen"] == sum(p.data.size for p in model.base.parameters())
        assert c["trainable"] + c["frozen"] == c["total"]

    @pytest.mark.parametrize("n", range(2, 8))
    def test_progressive_cheaper(self, n):
        cfg, schema = NetConfig(), seven_schema().subset([f"A{i}" for i in range(n)])
        prog = count_params(build_progressive(cfg, schema))["total"]
        indiv = sum(count_params(build_individual(cfg, schema, a))["total"] for a in schema.names)
        assert indiv - prog == (n - 1) * base_param_count(cfg)

    def test_default_sizes(self):
        cfg = NetConfig()
        assert base_param_count(cfg) == 19312
        assert [branch_param_count(cfg, c) for c in (3, 4, 5)] == [19651, 19684, 19717]


def test_clone_is_deep():
    model = build_progressive(SMALL, preset("jeans"))
    twin = model.clone()
    for p in twin.parameters():
        p.data += 1
    assert weights(model.base) != weights(twin.base)
