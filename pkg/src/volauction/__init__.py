"""Volume-discount forward auctions: analytic VCG baseline plus learned
allocation/payment networks trained for Nash-social-welfare style objectives."""

from .core import (
    AuctionOutcome,
    BidSchedule,
    FlatDiscountBid,
    LotGrid,
    LotSchedule,
    ValuationSchedule,
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
from .evaluate import MetricsReport, compare, evaluate
from .nets import (
    LearnedMechanism,
    MechanismParams,
    adam_step,
    forward_allocation,
    forward_payment,
    init_mechanism,
    load_mechanism,
    round_allocation,
    save_mechanism,
)
from .scenario import (
    BusinessConstraint,
    DiscountBand,
    Scenario,
    default_scenario,
    sample_profile,
)
from .training import (
    LagrangeState,
    TrainerConfig,
    TrainResult,
    business_penalty,
    composite_loss,
    empirical_regret,
    lagrange_update,
    train,
)
from .vcg import VcgMechanism, brute_force_welfare, efficient_allocation, vcg_payments

__all__ = [name for name in dir() if not name.startswith("_")]
