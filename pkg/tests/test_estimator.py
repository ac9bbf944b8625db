import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from reclogit import RouteChoiceEstimator

EXPECTED_TOY_LL = -(100 * math.log(4) + 100 * math.log(3))


class TestEstimatorSurface:
    def test_get_set_params_round_trip(self):
        est = RouteChoiceEstimator(model="resrl", n_layers=2, penalty=0.3)
        params = est.get_params()
        assert params["model"] == "resrl"
        assert params["n_layers"] == 2
        est.set_params(penalty=0.5)
        assert est.penalty == 0.5

    def test_clone_preserves_hyperparameters(self):
        est = RouteChoiceEstimator(model="resdgcnrl", learning_rate=0.05, seed=9)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_not_fitted_error(self, toy_data):
        est = RouteChoiceEstimator()
        with pytest.raises(NotFittedError):
            est.score(toy_data)

    def test_fit_plain_model(self, toy_data):
        est = RouteChoiceEstimator(
            model="rl", init_phi={"travel_time": -1.0}, max_epochs=50
        )
        est.fit(toy_data)
        assert est.params_.phi_value("travel_time") == pytest.approx(-1.0, abs=1e-6)
        assert est.score(toy_data) == pytest.approx(EXPECTED_TOY_LL / 200, abs=1e-6)

    def test_predict_proba_matches_uniform_paths(self, toy_data):
        est = RouteChoiceEstimator(model="rl", init_phi={"travel_time": -1.0}, max_epochs=5)
        est.fit(toy_data)
        probs = est.predict_proba([toy_data[0]])
        assert probs.shape == (100,)
        assert np.allclose(probs, 0.25, atol=1e-9)

    def test_predict_routes(self, toy_data):
        est = RouteChoiceEstimator(model="rl", init_phi={"travel_time": -1.0}, max_epochs=5)
        est.fit(toy_data)
        routes = est.predict([toy_data[0]], od_pairs=[(0, 8)])
        assert routes == [[0, 1, 3, 4, 5, 8]]

    def test_fit_residual_model_improves(self, toy_data):
        est = RouteChoiceEstimator(
            model="resrl",
            init_phi={"travel_time": -1.0},
            optimizer="adam",
            learning_rate=0.1,
            max_epochs=120,
        )
        est.fit(toy_data)
        assert est.score(toy_data) > EXPECTED_TOY_LL / 200

    def test_report_returns_metrics_per_scenario(self, toy_data):
        est = RouteChoiceEstimator(model="rl", init_phi={"travel_time": -1.0}, max_epochs=5)
        est.fit(toy_data)
        reports = est.report(toy_data)
        assert len(reports) == 2
        assert reports[0].acp == pytest.approx(0.25, abs=1e-9)
        assert reports[1].acp == pytest.approx(1 / 3, abs=1e-9)

    def test_unknown_init_name_rejected(self, toy_data):
        est = RouteChoiceEstimator(model="rl", init_phi={"speed": 1.0})
        with pytest.raises(Exception, match="speed"):
            est.fit(toy_data)

    def test_link_size_model_appends_feature(self, toy_data):
        est = RouteChoiceEstimator(
            model="lsrl",
            init_phi={"travel_time": -1.0},
            ls_coefficients={"travel_time": -1.0},
            optimizer="adam",
            learning_rate=0.05,
            max_epochs=10,
        )
        est.fit(toy_data)
        assert "link_size" in est.params_.phi_names
