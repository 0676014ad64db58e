//! Sealed-bid double auction run by the auctioneer once per slot.
//!
//! Buy bids are sorted by descending price and sell bids by ascending price.
//! A candidate marginal pair `(i*, l*)` fixes the uniform prices
//! `beta_hat = beta[i*]` and `alpha_hat = alpha[l*]`; only bids strictly
//! ahead of the marginal index win, so no winner pays or receives a price it
//! set itself and a side with a single bid never trades. Among the
//! candidates with `P >= beta_hat > alpha_hat` the auctioneer picks the one
//! with the largest welfare
//!
//! ```text
//! sum over traded pairs of  rho1 * beta_hat * ln(x) - rho2 * alpha_hat * x^2 / 2
//! ```
//!
//! where each winning pair trades `x = w * sqrt(rho1 beta_hat / (rho2 alpha_hat))`
//! and the scale `w <= 1` keeps both parties within their submitted
//! quantities.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{BidPair, TradeAllocation};
use crate::model::MgId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuctionError {
    #[error("sell price {0} must be positive for a bounded pair quantity")]
    UnboundedQuantity(f64),
    #[error("welfare weights must be positive (rho1={rho1}, rho2={rho2})")]
    InvalidWeights { rho1: f64, rho2: f64 },
    #[error("{0} bids on both sides of the book")]
    BothSides(MgId),
    #[error("invalid bid from {id}: price {price}, quantity {quantity}")]
    InvalidBid { id: MgId, price: f64, quantity: f64 },
    #[error("negative auctioneer surplus {0}")]
    NegativeSurplus(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Buy,
    Sell,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Buy => "buy",
            Side::Sell => "sell",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bid {
    pub mg_id: MgId,
    pub price: f64,
    pub quantity_kwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderBook {
    buy_bids: Vec<Bid>,
    sell_bids: Vec<Bid>,
    rho1: f64,
    rho2: f64,
}

impl OrderBook {
    /// Builds a sorted book. Zero-quantity bids are dropped; equal prices are
    /// ordered by ascending id.
    pub fn new(buy_bids: Vec<Bid>, sell_bids: Vec<Bid>, rho1: f64, rho2: f64) -> Result<Self, AuctionError> {
        if !(rho1 > 0.0 && rho2 > 0.0 && rho1.is_finite() && rho2.is_finite()) {
            return Err(AuctionError::InvalidWeights { rho1, rho2 });
        }
        let clean = |bids: Vec<Bid>| -> Result<Vec<Bid>, AuctionError> {
            let mut kept = Vec::with_capacity(bids.len());
            for b in bids {
                if !(b.price.is_finite() && b.price >= 0.0 && b.quantity_kwh.is_finite() && b.quantity_kwh >= 0.0) {
                    return Err(AuctionError::InvalidBid { id: b.mg_id, price: b.price, quantity: b.quantity_kwh });
                }
                if b.quantity_kwh > 0.0 {
                    kept.push(b);
                }
            }
            Ok(kept)
        };
        let mut buy_bids = clean(buy_bids)?;
        let mut sell_bids = clean(sell_bids)?;
        buy_bids.sort_by(|a, b| b.price.total_cmp(&a.price).then(a.mg_id.cmp(&b.mg_id)));
        sell_bids.sort_by(|a, b| a.price.total_cmp(&b.price).then(a.mg_id.cmp(&b.mg_id)));
        let buyers: BTreeSet<MgId> = buy_bids.iter().map(|b| b.mg_id).collect();
        if let Some(dup) = sell_bids.iter().find(|s| buyers.contains(&s.mg_id)) {
            return Err(AuctionError::BothSides(dup.mg_id));
        }
        Ok(Self { buy_bids, sell_bids, rho1, rho2 })
    }

    pub fn from_bid_pairs(bids: &[BidPair], rho1: f64, rho2: f64) -> Result<Self, AuctionError> {
        let buys = bids
            .iter()
            .map(|b| Bid { mg_id: b.mg_id, price: b.buy_price, quantity_kwh: b.buy_quantity_kwh })
            .collect();
        let sells = bids
            .iter()
            .map(|b| Bid { mg_id: b.mg_id, price: b.sell_price, quantity_kwh: b.sell_quantity_kwh })
            .collect();
        Self::new(buys, sells, rho1, rho2)
    }

    pub fn buy_bids(&self) -> &[Bid] {
        &self.buy_bids
    }

    pub fn sell_bids(&self) -> &[Bid] {
        &self.sell_bids
    }

    pub fn rho1(&self) -> f64 {
        self.rho1
    }

    pub fn rho2(&self) -> f64 {
        self.rho2
    }
}

/// Energy traded by one buyer-seller pair. `scale` is the factor applied to
/// the unconstrained pair quantity (the same for both sides of the pair).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairAllocation {
    pub unconstrained_kwh: f64,
    pub scale: f64,
    pub quantity_kwh: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClearingOutcome {
    pub accepted_buyers: BTreeSet<MgId>,
    pub accepted_sellers: BTreeSet<MgId>,
    pub buy_clearing_price: f64,
    pub sell_clearing_price: f64,
    /// Keyed by `(buyer, seller)`.
    pub allocations: BTreeMap<(MgId, MgId), PairAllocation>,
    /// 1-based marginal indices into the sorted book.
    pub marginal: Option<(usize, usize)>,
    pub welfare: f64,
}

impl ClearingOutcome {
    pub fn volume_kwh(&self) -> f64 {
        self.allocations.values().map(|a| a.quantity_kwh).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.allocations.is_empty()
    }

    pub fn bought_by(&self, id: MgId) -> f64 {
        self.allocations.iter().filter(|((b, _), _)| *b == id).map(|(_, a)| a.quantity_kwh).sum()
    }

    pub fn sold_by(&self, id: MgId) -> f64 {
        self.allocations.iter().filter(|((_, s), _)| *s == id).map(|(_, a)| a.quantity_kwh).sum()
    }

    /// The slot's trade as seen by one microgrid. Prices are zero on a side
    /// the microgrid did not win.
    pub fn allocation_for(&self, id: MgId) -> TradeAllocation {
        let mut trade = TradeAllocation::none(id);
        if self.accepted_buyers.contains(&id) {
            trade.bought_kwh = self.bought_by(id);
            trade.buy_unit_price = self.buy_clearing_price;
        }
        if self.accepted_sellers.contains(&id) {
            trade.sold_kwh = self.sold_by(id);
            trade.sell_unit_price = self.sell_clearing_price;
        }
        trade
    }
}

/// Stationary point of `rho1 beta ln(x) - rho2 alpha x^2 / 2`.
pub fn pair_quantity(buy_price: f64, sell_price: f64, rho1: f64, rho2: f64) -> Result<f64, AuctionError> {
    if !(sell_price > 0.0) {
        return Err(AuctionError::UnboundedQuantity(sell_price));
    }
    Ok((rho1 * buy_price / (rho2 * sell_price)).sqrt())
}

/// Per-pair welfare term.
pub fn pair_welfare(quantity: f64, buy_price: f64, sell_price: f64, rho1: f64, rho2: f64) -> f64 {
    rho1 * buy_price * quantity.ln() - rho2 * sell_price * quantity * quantity / 2.0
}

struct Candidate {
    marginal: (usize, usize),
    buyers: usize,
    sellers: usize,
    beta: f64,
    alpha: f64,
}

/// Marginal indices a side may use, with the number of winners each implies.
/// Winners sit strictly ahead of the marginal bid, so a side needs at least
/// two bids to have any.
fn side_candidates(len: usize) -> Vec<(usize, usize)> {
    (2..=len).map(|m| (m, m - 1)).collect()
}

/// Clears the book against the current grid price. Books without a valid
/// marginal pair clear empty.
pub fn clear(book: &OrderBook, grid_price: f64) -> ClearingOutcome {
    let mut best: Option<(ClearingOutcome, f64)> = None;
    for (i_star, n_buy) in side_candidates(book.buy_bids.len()) {
        for (l_star, n_sell) in side_candidates(book.sell_bids.len()) {
            let beta = book.buy_bids[i_star - 1].price;
            let alpha = book.sell_bids[l_star - 1].price;
            if !(beta <= grid_price && beta > alpha) {
                continue;
            }
            let candidate = Candidate { marginal: (i_star, l_star), buyers: n_buy, sellers: n_sell, beta, alpha };
            let outcome = allocate(book, &candidate);
            if outcome.allocations.is_empty() {
                continue;
            }
            if best.as_ref().is_none_or(|(_, w)| outcome.welfare > *w) {
                let w = outcome.welfare;
                best = Some((outcome, w));
            }
        }
    }
    best.map(|(o, _)| o).unwrap_or_default()
}

/// Greedy matching of winners in priority order: each buyer, best first,
/// takes from each seller, best first, the unconstrained pair quantity
/// scaled down to what both still have.
fn allocate(book: &OrderBook, c: &Candidate) -> ClearingOutcome {
    let unconstrained = if c.alpha > 0.0 {
        (book.rho1 * c.beta / (book.rho2 * c.alpha)).sqrt()
    } else {
        f64::INFINITY
    };
    let buyers = &book.buy_bids[..c.buyers];
    let sellers = &book.sell_bids[..c.sellers];
    let mut seller_left: Vec<f64> = sellers.iter().map(|s| s.quantity_kwh).collect();
    let mut allocations = BTreeMap::new();
    let mut welfare = 0.0;
    for buyer in buyers {
        let mut buyer_left = buyer.quantity_kwh;
        for (seller, left) in sellers.iter().zip(seller_left.iter_mut()) {
            let quantity = unconstrained.min(buyer_left).min(*left);
            if quantity <= 0.0 {
                continue;
            }
            buyer_left -= quantity;
            *left -= quantity;
            let scale = if unconstrained.is_finite() { quantity / unconstrained } else { 0.0 };
            allocations.insert(
                (buyer.mg_id, seller.mg_id),
                PairAllocation { unconstrained_kwh: unconstrained, scale, quantity_kwh: quantity },
            );
            welfare += pair_welfare(quantity, c.beta, c.alpha, book.rho1, book.rho2);
        }
    }
    ClearingOutcome {
        accepted_buyers: buyers.iter().map(|b| b.mg_id).collect(),
        accepted_sellers: sellers.iter().map(|s| s.mg_id).collect(),
        buy_clearing_price: c.beta,
        sell_clearing_price: c.alpha,
        allocations,
        marginal: Some(c.marginal),
        welfare,
    }
}

/// Auctioneer surplus `sum beta_hat x - sum alpha_hat y`, which must not be
/// negative.
pub fn budget_check(outcome: &ClearingOutcome) -> Result<f64, AuctionError> {
    let paid: f64 = outcome
        .accepted_buyers
        .iter()
        .map(|id| outcome.buy_clearing_price * outcome.bought_by(*id))
        .sum();
    let received: f64 = outcome
        .accepted_sellers
        .iter()
        .map(|id| outcome.sell_clearing_price * outcome.sold_by(*id))
        .sum();
    let surplus = paid - received;
    if surplus < -1e-9 * (1.0 + paid.abs()) {
        return Err(AuctionError::NegativeSurplus(surplus));
    }
    Ok(surplus.max(0.0))
}

/// One line of the per-slot auction log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub slot: u64,
    pub mg_id: MgId,
    pub side: Side,
    pub price: f64,
    pub quantity: f64,
    pub accepted: bool,
    pub cleared_price: f64,
    pub cleared_quantity: f64,
}

pub fn audit_rows(slot: u64, book: &OrderBook, outcome: &ClearingOutcome) -> Vec<AuditRow> {
    let buys = book.buy_bids.iter().map(|b| {
        let accepted = outcome.accepted_buyers.contains(&b.mg_id);
        AuditRow {
            slot,
            mg_id: b.mg_id,
            side: Side::Buy,
            price: b.price,
            quantity: b.quantity_kwh,
            accepted,
            cleared_price: if accepted { outcome.buy_clearing_price } else { 0.0 },
            cleared_quantity: outcome.bought_by(b.mg_id),
        }
    });
    let sells = book.sell_bids.iter().map(|s| {
        let accepted = outcome.accepted_sellers.contains(&s.mg_id);
        AuditRow {
            slot,
            mg_id: s.mg_id,
            side: Side::Sell,
            price: s.price,
            quantity: s.quantity_kwh,
            accepted,
            cleared_price: if accepted { outcome.sell_clearing_price } else { 0.0 },
            cleared_quantity: outcome.sold_by(s.mg_id),
        }
    });
    buys.chain(sells).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bid(id: u32, price: f64, q: f64) -> Bid {
        Bid { mg_id: MgId(id), price, quantity_kwh: q }
    }

    #[test]
    fn pair_quantity_examples() {
        let x = pair_quantity(2.0, 1.0, 1000.0, 0.0001).unwrap();
        assert!((x - 4472.135955).abs() < 1e-6);
        assert_eq!(pair_quantity(3.0, 3.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(pair_quantity(3.0, 3.0, 4.0, 1.0).unwrap(), 2.0);
        let base = pair_quantity(1.0, 1.0, 5.0, 1.0).unwrap();
        let doubled = pair_quantity(2.0, 1.0, 5.0, 1.0).unwrap();
        assert!((doubled / base - 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(pair_quantity(1.0, 0.0, 1.0, 1.0), Err(AuctionError::UnboundedQuantity(_))));
    }

    #[test]
    fn single_winning_pair_at_marginal_prices() {
        // marginal bids (2, 1) set the prices for the one winning pair
        let book = OrderBook::new(
            vec![bid(1, 3.0, 10.0), bid(3, 2.0, 10.0)],
            vec![bid(2, 0.5, 10.0), bid(4, 1.0, 10.0)],
            1.0,
            1.0,
        )
        .unwrap();
        let out = clear(&book, 5.0);
        assert_eq!(out.buy_clearing_price, 2.0);
        assert_eq!(out.sell_clearing_price, 1.0);
        assert_eq!(out.allocations.len(), 1);
        let x = out.allocations[&(MgId(1), MgId(2))].quantity_kwh;
        assert!((x - 2f64.sqrt()).abs() < 1e-12);
        assert!((budget_check(&out).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(out.allocation_for(MgId(3)), TradeAllocation::none(MgId(3)));
    }

    #[test]
    fn lone_pair_does_not_trade() {
        let book = OrderBook::new(vec![bid(1, 2.0, 10.0)], vec![bid(2, 1.0, 10.0)], 1.0, 1.0).unwrap();
        assert!(clear(&book, 5.0).is_empty());
        // one buyer against many sellers: the buyer would set its own price
        let book =
            OrderBook::new(vec![bid(1, 4.0, 10.0)], vec![bid(2, 1.0, 10.0), bid(3, 2.0, 10.0)], 1.0, 1.0).unwrap();
        assert!(clear(&book, 5.0).is_empty());
    }

    #[test]
    fn empty_side_clears_empty() {
        let book = OrderBook::new(vec![bid(1, 2.0, 10.0)], vec![], 1.0, 1.0).unwrap();
        let out = clear(&book, 5.0);
        assert!(out.is_empty());
        assert_eq!((out.buy_clearing_price, out.sell_clearing_price), (0.0, 0.0));
        assert_eq!(budget_check(&out).unwrap(), 0.0);
    }

    #[test]
    fn non_crossing_book_clears_empty() {
        let book = OrderBook::new(vec![bid(1, 1.0, 10.0)], vec![bid(2, 2.0, 10.0)], 1.0, 1.0).unwrap();
        assert!(clear(&book, 5.0).is_empty());
    }

    #[test]
    fn buy_price_above_grid_is_not_a_valid_marginal() {
        let sells = vec![bid(3, 1.0, 10.0), bid(4, 2.0, 10.0)];
        let book = OrderBook::new(vec![bid(1, 9.0, 10.0), bid(2, 6.0, 10.0)], sells.clone(), 1.0, 1.0).unwrap();
        assert!(clear(&book, 5.0).is_empty());
        let book = OrderBook::new(vec![bid(1, 9.0, 10.0), bid(2, 4.0, 10.0)], sells, 1.0, 1.0).unwrap();
        let out = clear(&book, 5.0);
        assert_eq!(out.buy_clearing_price, 4.0);
    }

    #[test]
    fn winner_price_changes_do_not_move_prices() {
        let sells = vec![bid(4, 1.0, 10.0), bid(5, 1.5, 10.0)];
        let base = OrderBook::new(vec![bid(1, 5.0, 10.0), bid(2, 3.0, 10.0)], sells.clone(), 1.0, 1.0).unwrap();
        let raised = OrderBook::new(vec![bid(1, 5.5, 10.0), bid(2, 3.0, 10.0)], sells, 1.0, 1.0).unwrap();
        assert_eq!(clear(&base, 10.0), clear(&raised, 10.0));
    }

    #[test]
    fn winners_are_strictly_ahead_of_marginal() {
        let buys = vec![bid(1, 5.0, 10.0), bid(2, 3.0, 10.0), bid(3, 2.0, 10.0)];
        let sells = vec![bid(4, 1.0, 10.0), bid(5, 1.5, 10.0), bid(6, 4.0, 10.0)];
        let book = OrderBook::new(buys, sells, 1000.0, 0.0001).unwrap();
        let out = clear(&book, 10.0);
        let (i, l) = out.marginal.unwrap();
        assert_eq!(out.accepted_buyers.len(), i - 1);
        assert_eq!(out.accepted_sellers.len(), l - 1);
        assert!(out.buy_clearing_price > out.sell_clearing_price);
    }

    #[test]
    fn book_rejects_two_sided_bidder() {
        let err = OrderBook::new(vec![bid(1, 2.0, 1.0)], vec![bid(1, 1.0, 1.0)], 1.0, 1.0).unwrap_err();
        assert_eq!(err, AuctionError::BothSides(MgId(1)));
        assert!(OrderBook::new(vec![], vec![], 0.0, 1.0).is_err());
    }

    #[test]
    fn ties_sorted_by_id() {
        let book = OrderBook::new(vec![bid(3, 2.0, 1.0), bid(1, 2.0, 1.0)], vec![bid(5, 1.0, 1.0), bid(4, 1.0, 1.0)], 1.0, 1.0)
            .unwrap();
        assert_eq!(book.buy_bids()[0].mg_id, MgId(1));
        assert_eq!(book.sell_bids()[0].mg_id, MgId(4));
    }

    #[test]
    fn zero_ask_is_quantity_limited() {
        let book = OrderBook::new(
            vec![bid(1, 3.0, 30.0), bid(3, 2.0, 30.0)],
            vec![bid(2, 0.0, 20.0), bid(4, 0.0, 5.0)],
            1.0,
            1.0,
        )
        .unwrap();
        let out = clear(&book, 5.0);
        assert_eq!(out.volume_kwh(), 20.0);
        assert_eq!(out.allocation_for(MgId(2)).sold_kwh, 20.0);
        assert_eq!(out.allocation_for(MgId(1)).bought_kwh, 20.0);
    }
}
