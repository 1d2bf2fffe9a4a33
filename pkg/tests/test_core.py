import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volauction.core import (
    AuctionOutcome,
    BelowReserveError,
    DemandExceededError,
    FlatDiscountBid,
    InvalidGridError,
    InvalidQuantityError,
    MisalignedRequirementError,
    NonMonotoneError,
    UnitOutOfRangeError,
    consumer_utility,
    convert_flat_to_lot,
    envy_profile,
    fc_revenue,
    fc_utility,
    lot_of_unit,
    make_lot_grid,
    make_schedule,
    nash_social_welfare,
    schedule_value,
    validate_bid,
)

MONEY = 1e-9


class TestLotGrid:
    def test_worked_grid(self):
        g = make_lot_grid(2500, 5)
        assert g.lot_size == 500
        assert list(g.boundaries) == [500, 1000, 1500, 2000, 2500]

    def test_single_lot(self):
        g = make_lot_grid(1000, 1)
        assert g.lot_size == 1000
        assert list(g.widths) == [1000]

    def test_remainder_goes_to_last_lot(self):
        g = make_lot_grid(1000, 3)
        assert g.lot_size == 333
        assert list(g.widths) == [333, 333, 334]
        assert g.widths.sum() == 1000

    @pytest.mark.parametrize("m,k", [(5, 6), (5, 0), (0, 1)])
    def test_invalid_grid(self, m, k):
        with pytest.raises(InvalidGridError):
            make_lot_grid(m, k)

    @given(st.integers(1, 500), st.data())
    def test_lots_partition_units(self, m, data):
        k = data.draw(st.integers(1, m))
        g = make_lot_grid(m, k)
        assert g.widths.sum() == m
        assert (g.widths[:-1] == g.lot_size).all()
        assert g.widths[-1] >= g.lot_size


class TestLotOfUnit:
    def test_boundary_stays_in_lot(self):
        g = make_lot_grid(2500, 5)
        assert lot_of_unit(500, g) == 1
        assert lot_of_unit(501, g) == 2

    def test_remainder_units_clamp_to_last_lot(self):
        g = make_lot_grid(1000, 3)
        assert lot_of_unit(1000, g) == 3  # raw ceil(1000/333) would be 4

    def test_out_of_range(self):
        g = make_lot_grid(10, 2)
        for j in (0, 11):
            with pytest.raises(UnitOutOfRangeError):
                lot_of_unit(j, g)

    @given(st.integers(1, 300), st.data())
    def test_consistent_with_widths(self, m, data):
        k = data.draw(st.integers(1, m))
        j = data.draw(st.integers(1, m))
        g = make_lot_grid(m, k)
        lot = lot_of_unit(j, g)
        assert 1 <= lot <= k
        lo = (lot - 1) * g.lot_size + 1
        hi = m if lot == k else lot * g.lot_size
        assert lo <= j <= hi


class TestScheduleValue:
    def test_worked_example_first_consumer(self, worked_grid, worked_bids):
        assert schedule_value(worked_bids[0], 1800, worked_grid) == pytest.approx(32800, abs=MONEY)

    def test_worked_example_second_consumer(self, worked_grid, worked_bids):
        assert schedule_value(worked_bids[1], 700, worked_grid) == pytest.approx(12400, abs=MONEY)

    def test_zero_quantity(self, worked_grid, worked_bids):
        assert schedule_value(worked_bids[0], 0, worked_grid) == 0.0

    def test_fractional_pro_rata(self, worked_grid, worked_bids):
        v = schedule_value(worked_bids[0], 500.5, worked_grid)
        assert v == pytest.approx(500 * 20 + 0.5 * 18, abs=MONEY)

    def test_errors(self, worked_grid, worked_bids):
        with pytest.raises(DemandExceededError):
            schedule_value(worked_bids[1], 1501, worked_grid)
        with pytest.raises(InvalidQuantityError):
            schedule_value(worked_bids[0], -1, worked_grid)

    @given(st.data())
    @settings(max_examples=60)
    def test_concave_piecewise_linear(self, data):
        m = data.draw(st.integers(2, 60))
        k = data.draw(st.integers(1, min(m, 5)))
        g = make_lot_grid(m, k)
        prices = sorted(
            data.draw(st.lists(st.floats(0.5, 50), min_size=k, max_size=k)),
            reverse=True,
        )
        s = make_schedule(prices, m, g)
        values = [schedule_value(s, q, g) for q in range(m + 1)]
        diffs = np.diff(values)
        assert (diffs >= -MONEY).all()  # non-decreasing
        assert (np.diff(diffs) <= MONEY).all()  # concave


class TestUtilitiesAndWelfare:
    def test_payment_equals_full_value(self, worked_grid, worked_bids):
        assert consumer_utility(worked_bids[0], 1800, 32800, worked_grid) == pytest.approx(0)

    def test_partial_payment(self, worked_grid, worked_bids):
        assert consumer_utility(worked_bids[0], 1800, 30000, worked_grid) == pytest.approx(2800)

    def test_non_participation(self, worked_grid, worked_bids):
        assert consumer_utility(worked_bids[0], 0, 0, worked_grid) == 0.0

    def test_fc_utility_examples(self):
        assert fc_utility([3763.0], 3.0, 1000) == pytest.approx(763)
        assert fc_utility([3001.0], 3.0, 1000) == pytest.approx(1)
        assert fc_utility([1500.0, 1500.0], 3.0, 1000) == pytest.approx(0)

    def test_fc_revenue(self):
        assert fc_revenue([1000.0, 2763.0]) == pytest.approx(3763)
        assert fc_revenue(np.zeros(5)) == 0.0
        assert fc_revenue([32800.0, 12400.0]) == pytest.approx(45200)

    def test_utility_identity(self, worked_grid, worked_bids):
        for q, p in [(1800, 30000), (700, 100), (0, 0)]:
            u = consumer_utility(worked_bids[0], q, p, worked_grid)
            assert u + p == pytest.approx(schedule_value(worked_bids[0], q, worked_grid), abs=MONEY)

    @given(st.lists(st.floats(0, 1e4), min_size=1, max_size=6), st.floats(0.1, 10),
           st.integers(1, 2000))
    def test_fc_identity(self, payments, reserve, m):
        assert fc_utility(payments, reserve, m) + reserve * m == pytest.approx(
            fc_revenue(payments), abs=1e-6)

    def test_nsw_examples(self):
        assert nash_social_welfare(0.0, [5.0, 1.0]) == 0.0
        assert nash_social_welfare(397.0, [603.0]) == pytest.approx(239391)
        assert nash_social_welfare(1.0, [875.0]) == pytest.approx(875)

    @given(st.floats(-100, 100), st.floats(-100, 100))
    def test_nsw_commutes(self, a, b):
        assert nash_social_welfare(a, [b]) == pytest.approx(nash_social_welfare(b, [a]))


class TestEnvy:
    def test_symmetric_outcome_no_envy(self):
        g = make_lot_grid(100, 2)
        v = [make_schedule([10, 9], 100, g) for _ in range(3)]
        out = AuctionOutcome(allocation=[30, 30, 30], payments=[100, 100, 100])
        assert envy_profile(v, out, g) == pytest.approx(np.zeros(3))

    def test_loser_envies_subsidized_winner(self):
        g = make_lot_grid(5, 1)
        v = [make_schedule([10.0], 5, g), make_schedule([10.0], 5, g)]
        out = AuctionOutcome(allocation=[5, 0], payments=[30, 0])
        assert envy_profile(v, out, g) == pytest.approx([0.0, 20.0])

    def test_full_value_payment_no_envy(self):
        g = make_lot_grid(5, 1)
        v = [make_schedule([10.0], 5, g), make_schedule([10.0], 5, g)]
        out = AuctionOutcome(allocation=[5, 0], payments=[50, 0])
        assert envy_profile(v, out, g) == pytest.approx([0.0, 0.0])

    def test_swap_capped_at_own_requirement(self):
        g = make_lot_grid(10, 2)
        rich = make_schedule([10, 10], 10, g)
        small = make_schedule([10.0], 5, g)  # only wants the first lot
        out = AuctionOutcome(allocation=[10, 0], payments=[60, 0])
        e = envy_profile([rich, small], out, g)
        # small consumer values only 5 units of the swap: 50 - 60 < 0 -> no envy
        assert e[1] == pytest.approx(0.0)

    @given(st.data())
    @settings(max_examples=40)
    def test_envy_nonnegative(self, data):
        n = data.draw(st.integers(1, 4))
        m = data.draw(st.integers(n, 30))
        g = make_lot_grid(m, data.draw(st.integers(1, min(3, m))))
        vals, alloc, pays = [], [], []
        remaining = m
        for _ in range(n):
            prices = sorted(
                data.draw(st.lists(st.floats(0.5, 20), min_size=g.lot_count,
                                   max_size=g.lot_count)), reverse=True)
            vals.append(make_schedule(prices, m, g))
            a = data.draw(st.integers(0, remaining))
            remaining -= a
            alloc.append(a)
            pays.append(data.draw(st.floats(0, 25.0 * a)) if a else 0.0)
        out = AuctionOutcome(allocation=alloc, payments=pays)
        e = envy_profile(vals, out, g)
        assert (e >= -MONEY).all()


class TestValidateBid:
    def test_worked_bid_accepted(self, worked_grid, worked_bids):
        assert validate_bid(worked_bids[0], 3.0, worked_grid) is worked_bids[0]

    def test_non_monotone_names_lot(self, worked_grid):
        bid = make_schedule([18, 19, 17, 16, 16], 2500, worked_grid)
        with pytest.raises(NonMonotoneError) as err:
            validate_bid(bid, 3.0, worked_grid)
        assert err.value.lot == 2

    def test_below_reserve_names_lot(self):
        g = make_lot_grid(100, 2)
        bid = make_schedule([4, 2.5], 100, g)
        with pytest.raises(BelowReserveError) as err:
            validate_bid(bid, 3.0, g)
        assert err.value.lot == 2

    def test_misaligned_requirement(self):
        g = make_lot_grid(100, 2)
        bid = make_schedule([4, 4], 100, g)
        object.__setattr__(bid, "requirement", 30)
        with pytest.raises(MisalignedRequirementError):
            validate_bid(bid, 3.0, g)

    def test_requirement_equal_to_m_with_remainder(self):
        g = make_lot_grid(1000, 3)
        bid = make_schedule([5, 4, 4], 1000, g)
        assert validate_bid(bid, 3.0, g)


class TestFlatConversion:
    def test_worked_conversion(self):
        g = make_lot_grid(100, 2)
        conv = convert_flat_to_lot(FlatDiscountBid(50, 5.25, 5.0), g)
        assert conv.schedule.prices == pytest.approx((5.25, 4.75))
        assert schedule_value(conv.schedule, 100, g) == pytest.approx(500.0)

    def test_no_discount(self):
        g = make_lot_grid(100, 2)
        conv = convert_flat_to_lot(FlatDiscountBid(0, 0.0, 5.0), g)
        assert conv.schedule.prices == pytest.approx((5.0, 5.0))
        assert conv.max_discrepancy == pytest.approx(0.0)

    def test_interior_discrepancy(self):
        flat = FlatDiscountBid(50, 5.25, 5.0)
        g = make_lot_grid(100, 2)
        conv = convert_flat_to_lot(flat, g)
        assert schedule_value(conv.schedule, 75, g) == pytest.approx(381.25)
        assert flat.value(75) == pytest.approx(375.0)
        # brute-force the worst integer quantity as the oracle
        gaps = [abs(schedule_value(conv.schedule, q, g) - flat.value(q))
                for q in range(101)]
        assert conv.max_discrepancy == pytest.approx(max(gaps), abs=MONEY)
        assert conv.max_discrepancy == pytest.approx(12.25)
        assert conv.worst_quantity == int(np.argmax(gaps)) == 51

    def test_threshold_alignment_error(self):
        from volauction.core import ThresholdAlignmentError

        g = make_lot_grid(100, 2)
        with pytest.raises(ThresholdAlignmentError):
            convert_flat_to_lot(FlatDiscountBid(30, 5.25, 5.0), g)

    @given(st.data())
    @settings(max_examples=60)
    def test_converted_bid_always_validates(self, data):
        k = data.draw(st.integers(1, 6))
        lot = data.draw(st.integers(1, 40))
        m = k * lot
        g = make_lot_grid(m, k)
        reserve = data.draw(st.floats(0.5, 3.0))
        at = data.draw(st.floats(reserve, reserve + 5))
        below = data.draw(st.floats(at, at + 5))  # discount: below >= at
        threshold = data.draw(st.sampled_from([0] + [int(b) for b in g.boundaries]))
        conv = convert_flat_to_lot(FlatDiscountBid(threshold, below, at), g,
                                   reserve_price=reserve)
        validate_bid(conv.schedule, reserve, g)

    def test_reserve_floor_applies(self):
        g = make_lot_grid(100, 2)
        # aggressive retroactive discount would need a fill price below reserve
        conv = convert_flat_to_lot(FlatDiscountBid(50, 10.0, 3.05), g,
                                   reserve_price=3.0)
        assert conv.schedule.prices[1] == pytest.approx(3.0)
        validate_bid(conv.schedule, 3.0, g)
