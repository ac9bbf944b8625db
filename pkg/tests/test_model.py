import math

import numpy as np
import pytest

from netgen import chain_graph, random_cyclic_graph
from reclogit import (
    DimensionError,
    InputError,
    LayerOverflowError,
    ModelKind,
    ModelParams,
    build_features,
    build_proximities,
    cross_effect_derivative,
    nrl_scale,
    resdgcn_residual,
    resrl_residual,
    systematic_utility,
    utility_field,
)
from reclogit.model import LN2, layer_term


def rl_params(phi=-1.0):
    return ModelParams("rl", np.array([phi]), ("travel_time",))


def hybrid_params(kind, theta_layers, **kw):
    return ModelParams(kind, np.array([-1.0]), ("travel_time",), theta=tuple(theta_layers), **kw)


class TestSystematicUtility:
    def test_toy_single_feature(self, toy):
        v = systematic_utility(toy.features, rl_params(-1.0))
        assert v[1, 2] == -2.0  # two minutes from 1-2 to 2-3
        assert v[0, 7] == -4.0

    def test_zero_coefficients_give_zero_utilities(self, toy):
        v = systematic_utility(toy.features, rl_params(0.0))
        assert np.array_equal(v, np.zeros((9, 9)))

    def test_two_feature_linear_combination(self):
        graph, _ = chain_graph(2, travel_time=1.0)
        feats = build_features(graph, ["travel_time"]).with_feature(
            "speed", graph.adjacency * 2.0, link_values=np.full(2, 2.0)
        )
        params = ModelParams("rl", np.array([-1.0, 0.5]), ("travel_time", "speed"))
        v = systematic_utility(feats, params)
        assert v[0, 1] == -1.0 + 0.5 * 2.0

    def test_off_mask_entries_zero(self, toy):
        v = systematic_utility(toy.features, rl_params())
        assert np.array_equal(v[toy.graph.adjacency == 0], np.zeros(81 - 11))

    def test_missing_feature_rejected(self, toy):
        params = ModelParams("rl", np.array([1.0]), ("nonexistent",))
        with pytest.raises(InputError, match="nonexistent"):
            systematic_utility(toy.features, params)


class TestResidualLayers:
    def test_zero_theta_reverts_to_plain_model(self, toy):
        params = hybrid_params("resrl", [np.zeros((9, 9))])
        v = systematic_utility(toy.features, params)
        field = resrl_residual(v, params, toy.graph)
        assert np.array_equal(field.g, np.zeros((9, 9)))
        assert np.array_equal(field.h, v)

    def test_layer_term_at_log3(self):
        mask = np.array([[0.0, 1.0], [0.0, 0.0]])
        term = layer_term(np.array([[0.0, math.log(3)], [0.0, 0.0]]), mask)
        assert term[0, 1] == pytest.approx(-math.log(2), abs=1e-12)

    def test_off_mask_stays_zero_through_layers(self, toy, rng):
        theta = [rng.normal(size=(9, 9)), rng.normal(size=(9, 9))]
        params = hybrid_params("resrl", theta)
        field = utility_field(toy.graph, toy.features, params)
        off = toy.graph.adjacency == 0
        for layer in field.hidden:
            assert np.abs(layer[off]).max() == 0.0

    def test_layer_terms_below_ln2(self, toy, rng):
        theta = [rng.normal(size=(9, 9)) * 2]
        params = hybrid_params("resrl", theta)
        field = utility_field(toy.graph, toy.features, params)
        increment = field.hidden[1] - field.hidden[0]
        assert increment.max() < LN2
        negative_preact = field.preactivations[0] <= 0
        on_mask = toy.graph.adjacency > 0
        bounded = np.abs(increment[negative_preact & on_mask])
        assert bounded.size == 0 or bounded.max() <= LN2

    def test_hidden_layers_retained(self, toy, rng):
        theta = [rng.normal(size=(9, 9)) * 0.1 for _ in range(3)]
        params = hybrid_params("resrl", theta)
        field = utility_field(toy.graph, toy.features, params)
        assert field.n_layers == 3
        assert len(field.preactivations) == 3
        assert np.array_equal(field.hidden[0], field.v)
        assert np.array_equal(field.hidden[-1], field.h)
        assert np.allclose(field.h, field.v + field.g)

    def test_overflow_names_layer(self, toy):
        theta = [np.full((9, 9), -1e308)]
        params = hybrid_params("resrl", theta)
        v = systematic_utility(toy.features, params)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(LayerOverflowError, match="layer 1"):
                resrl_residual(v, params, toy.graph)


class TestGraphConvolutionalResidual:
    def test_zero_theta_reduces(self, toy):
        prox = build_proximities(toy.graph)
        params = hybrid_params("resdgcnrl", [np.zeros((9, 9))], alpha=1.3, beta=0.7, gamma=2.0)
        field = utility_field(toy.graph, toy.features, params, prox)
        assert np.array_equal(field.g, np.zeros((9, 9)))

    def test_zero_scalars_reduce(self, toy, rng):
        prox = build_proximities(toy.graph)
        params = hybrid_params(
            "resdgcnrl", [rng.normal(size=(9, 9))], alpha=0.0, beta=0.0, gamma=0.0
        )
        field = utility_field(toy.graph, toy.features, params, prox)
        assert np.abs(field.g).max() == 0.0

    def test_outgoing_pair_restriction_matches_plain_residual(self, toy):
        # nonzero weight only between the two links leaving node 2; with the
        # out-proximity alone active, the propagation reduces to a scaled
        # plain residual because link 2-3 has a single predecessor.
        prox = build_proximities(toy.graph)
        gamma = 1.3
        theta_d = np.zeros((9, 9))
        theta_d[3, 2] = 0.7
        p_dgcn = hybrid_params("resdgcnrl", [theta_d], alpha=0.0, beta=0.0, gamma=gamma)
        field_dgcn = utility_field(toy.graph, toy.features, p_dgcn, prox)

        theta_r = np.zeros((9, 9))
        theta_r[3, 2] = gamma * prox.z_second_out[1, 1] * 0.7
        p_res = hybrid_params("resrl", [theta_r])
        field_res = utility_field(toy.graph, toy.features, p_res)

        assert np.allclose(field_dgcn.h, field_res.h, atol=1e-14, rtol=0)
        assert np.abs(field_dgcn.g).max() > 0

    def test_requires_proximities(self, toy):
        params = hybrid_params("resdgcnrl", [np.zeros((9, 9))])
        with pytest.raises(InputError, match="Proximity"):
            utility_field(toy.graph, toy.features, params, None)


class TestNrlScale:
    def test_zero_gamma_gives_unit_scales(self, toy):
        params = ModelParams("nrl", np.array([-1.0]), ("travel_time",),
                             nrl_gamma=np.array([0.0]), nrl_gamma_names=("travel_time",))
        assert np.array_equal(nrl_scale(toy.features, params), np.ones(9))

    def test_reported_scale_coefficient(self, toy):
        params = ModelParams("nrl", np.array([-1.0]), ("travel_time",),
                             nrl_gamma=np.array([0.108]), nrl_gamma_names=("travel_time",))
        mu = nrl_scale(toy.features, params)
        unit_time = toy.graph.link_features["travel_time"] == 1.0
        assert np.allclose(mu[unit_time], math.exp(0.108))

    def test_negative_exponent_gives_scale_below_one(self, toy):
        params = ModelParams("nrl", np.array([-1.0]), ("travel_time",),
                             nrl_gamma=np.array([-0.5]), nrl_gamma_names=("travel_time",))
        mu = nrl_scale(toy.features, params)
        assert (mu > 0).all()
        assert (mu[toy.graph.link_features["travel_time"] > 0] < 1).all()

    def test_wrong_kind_rejected(self, toy):
        with pytest.raises(InputError):
            nrl_scale(toy.features, rl_params())


class TestReductionIdentity:
    @pytest.mark.parametrize("kind", ["resrl", "resdgcnrl"])
    def test_zero_theta_equals_plain_utilities(self, toy, kind):
        prox = build_proximities(toy.graph)
        params = hybrid_params(kind, [np.zeros((9, 9)), np.zeros((9, 9))])
        field = utility_field(toy.graph, toy.features, params, prox)
        plain = systematic_utility(toy.features, rl_params())
        assert np.array_equal(field.h, plain)


class TestCrossEffectDerivative:
    def _fd(self, params, graph, features, prox, k, a, kf, af, eps=1e-6):
        v = systematic_utility(features, params)

        def total(vm):
            if params.model_kind is ModelKind.RESRL:
                return resrl_residual(vm, params, graph).h[k, a]
            return resdgcn_residual(vm, params, prox, graph).h[k, a]

        up = v.copy()
        up[kf, af] += eps
        down = v.copy()
        down[kf, af] -= eps
        return (total(up) - total(down)) / (2 * eps)

    def test_zero_theta_entry_gives_zero(self, toy):
        params = hybrid_params("resrl", [np.zeros((9, 9))])
        field = utility_field(toy.graph, toy.features, params)
        assert cross_effect_derivative(field, params, None, 1, 2, 1, 3) == 0.0

    def test_plain_residual_no_cross_intersection_effect(self, toy, rng):
        params = hybrid_params("resrl", [rng.normal(size=(9, 9))])
        field = utility_field(toy.graph, toy.features, params)
        # actions from different links never interact
        assert cross_effect_derivative(field, params, None, 1, 2, 3, 4) == 0.0

    @pytest.mark.parametrize("kind", ["resrl", "resdgcnrl"])
    def test_matches_finite_differences(self, toy, rng, kind):
        prox = build_proximities(toy.graph)
        params = hybrid_params(kind, [rng.normal(size=(9, 9)) * 0.5],
                               alpha=1.1, beta=0.8, gamma=1.2)
        field = utility_field(toy.graph, toy.features, params, prox)
        cells = [(1, 2, 1, 3), (1, 2, 1, 2), (3, 4, 3, 6), (5, 8, 2, 5), (2, 5, 3, 4)]
        for k, a, kf, af in cells:
            closed = cross_effect_derivative(field, params, prox, k, a, kf, af)
            fd = self._fd(params, toy.graph, toy.features, prox, k, a, kf, af)
            assert closed == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_sign_opposes_weight_entry(self, toy):
        # effect of the action into 4-3 on the action into 3-5, one layer:
        # prefactor is minus a sigmoid, so the derivative sign flips theta's.
        prox = build_proximities(toy.graph)
        for theta_val in (0.8, -0.8):
            theta = np.zeros((9, 9))
            theta[4, 5] = theta_val
            params = hybrid_params("resdgcnrl", [theta])
            field = utility_field(toy.graph, toy.features, params, prox)
            deriv = cross_effect_derivative(field, params, prox, 2, 5, 3, 4)
            assert prox.combined(1, 1, 1)[2, 3] > 0
            assert math.copysign(1.0, deriv) == -math.copysign(1.0, theta_val)

    def test_multi_layer_unsupported(self, toy, rng):
        params = hybrid_params("resrl", [np.zeros((9, 9))] * 2)
        field = utility_field(toy.graph, toy.features, params)
        with pytest.raises(InputError, match="one layer"):
            cross_effect_derivative(field, params, None, 1, 2, 1, 3)


class TestModelParams:
    def test_unknown_kind_rejected(self):
        with pytest.raises(InputError, match="unknown model kind"):
            ModelParams("mystery", np.array([1.0]), ("x",))

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(InputError):
            ModelParams("rl", np.array([1.0]), ("x",), mu=0.0)

    def test_theta_shape_checked_against_graph(self, toy):
        params = hybrid_params("resrl", [np.zeros((4, 4))])
        with pytest.raises(DimensionError):
            params.validate_for(toy.graph, toy.features)

    def test_frozen_must_name_known_coefficients(self):
        with pytest.raises(InputError):
            ModelParams("rl", np.array([1.0]), ("x",), frozen_phi={"y"})

    def test_json_round_trip_preserves_values(self, toy, rng, tmp_path):
        from reclogit import load_params, save_params

        params = ModelParams(
            "resdgcnrl", np.array([-0.863]), ("travel_time",),
            theta=(rng.normal(size=(9, 9)),), alpha=0.994, beta=0.997, gamma=0.996,
        )
        path = tmp_path / "params.json"
        save_params(path, params)
        loaded = load_params(path, graph=toy.graph)
        assert np.array_equal(loaded.phi, params.phi)
        assert np.array_equal(loaded.theta[0], params.theta[0])
        prox = build_proximities(toy.graph)
        original = utility_field(toy.graph, toy.features, params, prox)
        reloaded = utility_field(toy.graph, toy.features, loaded, prox)
        assert np.array_equal(original.h, reloaded.h)


class TestFeatureTensor:
    def test_negative_travel_time_rejected(self):
        from reclogit.network import Link, make_graph

        links = [Link("a", "0", "1"), Link("b", "1", "2")]
        graph = make_graph(links, {"travel_time": np.array([1.0, -0.5])})
        with pytest.raises(InputError, match="travel_time"):
            build_features(graph, ["travel_time"])

    def test_with_feature_rejects_duplicates(self, toy):
        with pytest.raises(InputError, match="already"):
            toy.features.with_feature("travel_time", np.zeros((9, 9)))

    def test_scale_overflow_raises(self, toy):
        params = ModelParams("nrl", np.array([-1.0]), ("travel_time",),
                             nrl_gamma=np.array([np.inf]), nrl_gamma_names=("travel_time",))
        with pytest.raises(LayerOverflowError):
            with np.errstate(invalid="ignore"):
                nrl_scale(toy.features, params)
