//! Microgrid energy trading: per-slot drift-plus-penalty control, a double
//! auction between neighbouring microgrids, and a discrete-time simulator.

pub mod auction;
pub mod controller;
pub mod ingest;
pub mod model;
pub mod sim;

pub use auction::{clear, AuctionError, Bid, ClearingOutcome, OrderBook};
pub use controller::{make_bids, solve_slot_program, BidPair, ControllerError, TradeAllocation};
pub use model::{ControlAction, DerivedBounds, Microgrid, MgId, MgParams, MgState, ModelError, PriceBounds, SlotInputs};
