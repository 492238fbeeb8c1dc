"""
Unit tests for Pydantic schemas.

Covers field constraints, cross-field validators and serialization of the
network, controller and run models.
"""
import pytest
from pydantic import ValidationError

import schemas


@pytest.mark.unit
class TestNetworkSchemas:
    """Test cases for Cable, DerSpec and RadialNetwork."""

    def test_example_network(self):
        example = schemas.RadialNetwork.model_config["json_schema_extra"]["example"]
        net = schemas.RadialNetwork(**example)
        assert net.n == 2
        assert net.ders[2].q_max == 0.1

    def test_der_limits_must_bracket_zero(self):
        with pytest.raises(ValidationError) as exc_info:
            schemas.DerSpec(bus=1, q_min=0.1, q_max=0.2)
        assert "q_min" in str(exc_info.value)

    def test_der_cost_positive(self):
        with pytest.raises(ValidationError):
            schemas.DerSpec(bus=1, cost=0.0)

    def test_slack_bus_cannot_host_der(self):
        with pytest.raises(ValidationError):
            schemas.DerSpec(bus=0)

    def test_voltage_limits_ordered(self):
        with pytest.raises(ValidationError) as exc_info:
            schemas.RadialNetwork(buses=[0, 1], v_min=1.05, v_max=0.95)
        assert "v_min" in str(exc_info.value)

    def test_network_is_frozen(self):
        net = schemas.RadialNetwork(buses=[0])
        with pytest.raises(ValidationError):
            net.v0 = 1.02

    def test_json_round_trip(self):
        example = schemas.RadialNetwork.model_config["json_schema_extra"]["example"]
        net = schemas.RadialNetwork(**example)
        assert schemas.RadialNetwork.model_validate_json(net.model_dump_json()) == net


@pytest.mark.unit
class TestControllerConfig:
    """Test cases for ControllerConfig and DroopCurve."""

    def test_defaults(self):
        cfg = schemas.ControllerConfig()
        assert cfg.alpha is None and cfg.alpha_d is None and cfg.alpha_u is None
        assert cfg.r_p == 1e-4
        assert cfg.epsilon == 1e-5
        assert cfg.inner_iterations == 4

    def test_alias_and_name(self):
        assert schemas.ControllerConfig(T=7).inner_iterations == 7
        assert schemas.ControllerConfig(inner_iterations=7).inner_iterations == 7

    @pytest.mark.parametrize("field, value", [
        ("alpha", 0.0),
        ("alpha_d", -1.0),
        ("epsilon", 0.5),
        ("T", 0),
        ("deflation", 0.5),
        ("u0_policy", "random"),
        ("capability", "dynamic"),
    ])
    def test_rejects(self, field, value):
        with pytest.raises(ValidationError):
            schemas.ControllerConfig(**{field: value})

    def test_limits_ordered(self):
        with pytest.raises(ValidationError):
            schemas.ControllerConfig(v_min=1.0, v_max=1.0)

    def test_droop_breakpoints(self):
        with pytest.raises(ValidationError) as exc_info:
            schemas.DroopCurve(v3=1.06)
        assert "v1 <= v2 <= v3 <= v4" in str(exc_info.value)

    def test_physical_defaults_are_valid(self):
        cfg = schemas.ControllerConfig(**schemas.PHYSICAL_UNIT_DEFAULTS)
        assert cfg.alpha == 5e-4
        assert cfg.inner_iterations == 4


@pytest.mark.unit
class TestRunSchemas:
    """Test cases for RunConfig and Metrics."""

    def test_controller_from_string(self):
        assert schemas.RunConfig(controller="two-metric").controller == schemas.ControllerKind.TWO_METRIC

    def test_unknown_controller(self):
        with pytest.raises(ValidationError):
            schemas.RunConfig(controller="fuzzy")

    def test_negative_noise(self):
        with pytest.raises(ValidationError):
            schemas.RunConfig(noise_std=-0.1)

    def test_config_json_round_trip(self):
        cfg = schemas.RunConfig(controller="droop", seed=3, controller_config={"T": 2, "alpha": 0.1})
        assert schemas.RunConfig.model_validate_json(cfg.model_dump_json()) == cfg

    def test_metrics_example(self):
        example = schemas.Metrics.model_json_schema()["example"]
        metrics = schemas.Metrics(**example)
        assert metrics.worst_bus == 2

    def test_metrics_non_negative(self):
        with pytest.raises(ValidationError):
            schemas.Metrics(avv_per_bus=[0.0], avv_worst_bus=-1.0, worst_bus=1, max_violation=0.0)
