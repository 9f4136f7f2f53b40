"""Multi-slot GSP auction simulator and synthetic bid-log generator."""
from .dataset import (
    AuctionBatch, AuctionRecord, BidRequest, Dataset, DatasetMeta, FixedRatioPolicy, RandomRatioPolicy,
    Resolution, apply_policy, generate_dataset, logging_policy, read_dataset, resolve_batch,
    sample_auctions, simulate_click, unshaded_policy, write_dataset,
)
from .landscape import FIELD_NAMES, FieldSpec, LandscapeSpec, make_landscape
from .mechanism import AuctionOutcome, SlotProfile, min_winning_price, resolve_auctions, run_auction, to_milli
from .truth import TruthCurves, true_win_prob, truth_curves
