import dataclasses

import numpy as np
import pytest

from volauction.core import validate_bid
from volauction.scenario import (
    BusinessConstraint,
    ConfigError,
    DiscountBand,
    Scenario,
    default_scenario,
    sample_batch,
    sample_profile,
    scenario_from_text,
    scenario_to_text,
)


class TestDefaultScenario:
    def test_headline_numbers(self, scenario):
        assert scenario.total_units == 1000
        assert scenario.consumers == 5
        assert scenario.reserve_price == 3.0
        assert (scenario.value_low, scenario.value_high) == (3.5, 4.5)
        assert scenario.lot_count == 20
        assert scenario.grid().lot_size == 50
        assert scenario.requirements == (1000,) * 5

    def test_flat_archetype_prices_constant(self, scenario):
        disc = scenario.lot_discounts()
        assert (disc[0] == 0.0).all()

    def test_two_band_archetype(self, scenario):
        disc = scenario.lot_discounts()
        # 5% off for units beyond 500: lots 11..20
        assert disc[1, :10] == pytest.approx(np.zeros(10))
        assert disc[1, 10:] == pytest.approx(np.full(10, 0.05))

    def test_archetype_prices_from_base(self, scenario):
        base = 4.0
        prices = base * (1.0 - scenario.lot_discounts()[1])
        assert prices[:10] == pytest.approx(np.full(10, 4.0))
        assert prices[10:] == pytest.approx(np.full(10, 3.8))

    def test_deepest_discount_stays_above_reserve(self, scenario):
        # worst case: lowest base draw with the 8% discount
        assert scenario.value_low * (1 - 0.08) == pytest.approx(3.22)
        assert scenario.value_low * (1 - 0.08) > scenario.reserve_price

    def test_five_archetypes_tile_grid(self, scenario):
        for bands in scenario.archetypes:
            assert bands[0].start == 1
            assert bands[-1].end == 1000


class TestSampling:
    def test_sampled_profiles_validate(self, scenario):
        rng = np.random.default_rng(0)
        grid = scenario.grid()
        for _ in range(20):
            profile = sample_profile(scenario, rng)
            for s in profile:
                validate_bid(s, scenario.reserve_price, grid)

    def test_no_discount_means_flat_prices(self, scenario):
        rng = np.random.default_rng(1)
        v = sample_batch(scenario, rng, 50)
        flat = v[:, 0, :]  # consumer 1 bids a uniform price
        assert flat.std(axis=1) == pytest.approx(np.zeros(50), abs=1e-12)

    def test_upper_bound_draw(self, scenario):
        disc = scenario.lot_discounts()
        prices = 4.5 * (1 - disc[1])
        assert prices[:10] == pytest.approx(np.full(10, 4.5))
        assert prices[10:] == pytest.approx(np.full(10, 4.275))

    def test_base_mean_matches_uniform(self, scenario):
        rng = np.random.default_rng(123)
        v = sample_batch(scenario, rng, 10_000)
        base = v[:, 0, 0]  # consumer 1 is undiscounted
        assert abs(base.mean() - 4.0) < 0.02

    def test_batch_deterministic_in_seed(self, scenario):
        a = sample_batch(scenario, np.random.default_rng(9), 5)
        b = sample_batch(scenario, np.random.default_rng(9), 5)
        assert (a == b).all()


class TestSerialization:
    def test_round_trip_byte_identical(self, scenario):
        text = scenario_to_text(scenario)
        again = scenario_to_text(scenario_from_text(text))
        assert text == again

    def test_round_trip_preserves_fields(self, scenario):
        parsed = scenario_from_text(scenario_to_text(scenario))
        assert parsed == scenario

    def test_rejects_wrong_format(self):
        with pytest.raises(ConfigError):
            scenario_from_text('{"format":"something-else","version":1}')

    def test_rejects_bad_json(self):
        with pytest.raises(ConfigError):
            scenario_from_text("{nope")


class TestValidation:
    def test_gap_in_bands(self, scenario):
        bad = dataclasses.replace(
            scenario,
            archetypes=scenario.archetypes[:4] + (
                (DiscountBand(1, 500, 0.0), DiscountBand(601, 1000, 0.05)),),
        )
        with pytest.raises(ConfigError):
            bad.validate()

    def test_decreasing_discounts_rejected(self, scenario):
        bad = dataclasses.replace(
            scenario,
            archetypes=scenario.archetypes[:4] + (
                (DiscountBand(1, 500, 0.05), DiscountBand(501, 1000, 0.0)),),
        )
        with pytest.raises(ConfigError):
            bad.validate()

    def test_low_below_reserve_rejected(self, scenario):
        with pytest.raises(ConfigError):
            dataclasses.replace(scenario, value_low=2.0).validate()

    def test_discount_crossing_reserve_rejected(self, scenario):
        bad = dataclasses.replace(
            scenario,
            archetypes=scenario.archetypes[:4] + (
                (DiscountBand(1, 500, 0.0), DiscountBand(501, 1000, 0.2)),),
        )
        with pytest.raises(ConfigError):
            bad.validate()

    def test_misaligned_band_rejected(self, scenario):
        bad = dataclasses.replace(
            scenario,
            archetypes=scenario.archetypes[:4] + (
                (DiscountBand(1, 530, 0.0), DiscountBand(531, 1000, 0.05)),),
        )
        with pytest.raises(ConfigError):
            bad.validate()

    def test_business_constraint_round_trip(self, scenario):
        text = scenario_to_text(scenario)
        parsed = scenario_from_text(text)
        assert parsed.business_constraints == (
            BusinessConstraint(kind="min-winners-with-floor", count=3,
                               quantity_floor=200.0),
        )
