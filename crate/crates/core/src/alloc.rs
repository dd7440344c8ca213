//! Layered two-choice allocation of weighted balls into bins.
//!
//! Weights in `[0, 1]` are split into tiers. Tier 0 (weights at most
//! `1 / log2 m`) is placed by one choice; tier `k >= 1` covers
//! `(2^(k-1) / log2 m, 2^k / log2 m]` and is placed by unweighted two-choice
//! on the per-tier ball counts of the two candidate bins.
//!
//! The bin-level functions ([`place`], [`grow`], [`retire`]) work on any
//! slice of bins so that a client holding only the two candidate bins of a
//! ball can run the same rules as the full simulation in [`L2c`].

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use thiserror::Error;

use crate::crypto::{hash_choices, KeyTree, Tag};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AllocError {
    #[error("weight outside [0, 1]")]
    WeightOutOfRange,
    #[error("ball {0:#x} is already live")]
    DuplicateBall(u64),
    #[error("ball {0:#x} not found in its candidate bins")]
    BallNotFound(u64),
    #[error("ball weights may only grow")]
    WeightDecrease,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DeltaMode {
    One,
    LogLogLog,
}

impl DeltaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DeltaMode::One => "one",
            DeltaMode::LogLogLog => "logloglog",
        }
    }
}

impl fmt::Display for DeltaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DeltaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "one" => Ok(DeltaMode::One),
            "logloglog" => Ok(DeltaMode::LogLogLog),
            other => Err(format!("unknown delta mode `{other}`")),
        }
    }
}

/// Smallest `k >= 0` with `x <= 2^(2^k)`, i.e. `ceil(log2 log2 x)` for `x >= 2`.
fn ceil_loglog(x: u128) -> u64 {
    let mut k = 0;
    while k < 7 && x > 1u128 << (1u32 << k).min(127) {
        k += 1;
    }
    k
}

/// `max(1, ceil(log2 log2 max(x, 4)))`, computed exactly.
pub fn llog(x: u64) -> u64 {
    ceil_loglog(x.max(4) as u128).max(1)
}

/// `max(1, ceil(log2 log2 log2 lambda))` in the triple-log mode, else 1.
pub fn delta(mode: DeltaMode, lambda: u64) -> u64 {
    match mode {
        DeltaMode::One => 1,
        DeltaMode::LogLogLog => {
            // log2 log2 log2 λ <= k  <=>  log2 λ <= 2^(2^k)
            let log_lambda = 64 - lambda.max(2).saturating_sub(1).leading_zeros() as u128;
            ceil_loglog(log_lambda).max(1)
        }
    }
}

/// Weight-to-tier mapping for a fixed bin count.
#[derive(Clone, Copy, Debug)]
pub struct Tiering<S> {
    log_m: S,
    num_tiers: usize,
}

impl<S: Scalar> Tiering<S> {
    pub fn new(m: usize) -> Self {
        let mm = m.max(4) as u64;
        let log_m = if mm.is_power_of_two() {
            S::from_u64(mm.trailing_zeros() as u64)
        } else {
            S::approx_f64((mm as f64).log2())
        };
        Tiering {
            log_m,
            num_tiers: llog(m as u64) as usize,
        }
    }

    pub fn num_tiers(&self) -> usize {
        self.num_tiers
    }

    pub fn tier_of(&self, weight: S) -> Result<usize, AllocError> {
        if weight < S::zero() || weight > S::one() {
            return Err(AllocError::WeightOutOfRange);
        }
        let v = weight * self.log_m;
        if v <= S::one() {
            return Ok(0);
        }
        let mut k = 1usize;
        let mut bound = S::from_u64(2);
        while k < self.num_tiers && v > bound {
            k += 1;
            bound = bound + bound;
        }
        Ok(k)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct L2cParams<S> {
    pub w_max: u64,
    pub lambda: u64,
    pub delta_mode: DeltaMode,
    pub delta: u64,
    pub m: usize,
    pub num_tiers: usize,
    pub load_const: f64,
    /// `load_const * delta * llog(w_max)`, in weight units.
    pub capacity: S,
}

impl<S: Scalar> L2cParams<S> {
    pub fn new(w_max: u64, lambda: u64, delta_mode: DeltaMode, load_const: f64) -> Self {
        let d = delta(delta_mode, lambda);
        let ll = llog(w_max);
        let m = w_max.div_ceil(d * ll).max(1) as usize;
        L2cParams {
            w_max,
            lambda,
            delta_mode,
            delta: d,
            m,
            num_tiers: llog(m as u64) as usize,
            load_const,
            capacity: S::approx_f64(load_const * (d * ll) as f64),
        }
    }

    /// `delta * llog(w_max)`, the scale the load bound is stated in.
    pub fn load_scale(&self) -> u64 {
        self.delta * llog(self.w_max)
    }

    pub fn tiering(&self) -> Tiering<S> {
        Tiering::new(self.m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ball<S> {
    pub id: u64,
    pub tier: usize,
    pub weight: S,
    pub payload: Vec<u64>,
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bin<S> {
    balls: Vec<Ball<S>>,
    tier_counts: Vec<usize>,
    load: S,
}

impl<S: Scalar> Default for Bin<S> {
    fn default() -> Self {
        Bin {
            balls: Vec::new(),
            tier_counts: Vec::new(),
            load: S::zero(),
        }
    }
}

impl<S: Scalar> Bin<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a ball as-is (used when decoding stored bins).
    pub fn push(&mut self, ball: Ball<S>) {
        if self.tier_counts.len() <= ball.tier {
            self.tier_counts.resize(ball.tier + 1, 0);
        }
        self.tier_counts[ball.tier] += 1;
        self.load = self.load + ball.weight;
        self.balls.push(ball);
    }

    pub fn balls(&self) -> &[Ball<S>] {
        &self.balls
    }

    pub fn count(&self, tier: usize) -> usize {
        self.tier_counts.get(tier).copied().unwrap_or(0)
    }

    pub fn load(&self) -> S {
        self.load
    }

    pub fn is_empty(&self) -> bool {
        self.balls.is_empty()
    }

    pub fn find_live(&self, id: u64) -> Option<usize> {
        self.balls.iter().position(|b| b.id == id && !b.residual)
    }
}

/// Bin that receives a ball of `tier`: one choice for tier 0, otherwise the
/// candidate with strictly fewer balls of that tier, ties to `a1`.
pub fn choose<S: Scalar>(bins: &[Bin<S>], a1: usize, a2: usize, tier: usize) -> usize {
    if tier == 0 || bins[a2].count(tier) >= bins[a1].count(tier) {
        a1
    } else {
        a2
    }
}

pub fn place<S: Scalar>(bins: &mut [Bin<S>], a1: usize, a2: usize, ball: Ball<S>) -> usize {
    let b = choose(bins, a1, a2, ball.tier);
    bins[b].push(ball);
    b
}

pub fn find_live<S: Scalar>(bins: &[Bin<S>], a1: usize, a2: usize, id: u64) -> Option<(usize, usize)> {
    [a1, a2]
        .into_iter()
        .find_map(|b| bins[b].find_live(id).map(|pos| (b, pos)))
}

/// Marks a ball residual and replaces its payload by zero words of the same
/// length; its weight stays in the bin.
pub fn retire<S: Scalar>(bins: &mut [Bin<S>], bin: usize, pos: usize) {
    let ball = &mut bins[bin].balls[pos];
    ball.residual = true;
    ball.payload.iter_mut().for_each(|w| *w = 0);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    InPlace { bin: usize },
    Moved { from: usize, to: usize },
}

/// Raises a live ball's weight and appends `extra` to its payload.
///
/// Within the same tier the ball grows in place. On a tier change the old
/// ball is retired and a fresh ball with the merged payload is placed by the
/// new tier's rule.
pub fn grow<S: Scalar>(
    bins: &mut [Bin<S>],
    tiering: &Tiering<S>,
    a1: usize,
    a2: usize,
    id: u64,
    new_weight: S,
    extra: &[u64],
) -> Result<UpdateOutcome, AllocError> {
    let (bin, pos) = find_live(bins, a1, a2, id).ok_or(AllocError::BallNotFound(id))?;
    let old = &bins[bin].balls[pos];
    if new_weight < old.weight {
        return Err(AllocError::WeightDecrease);
    }
    let new_tier = tiering.tier_of(new_weight)?;
    if new_tier == old.tier {
        let b = &mut bins[bin];
        b.load = b.load - b.balls[pos].weight + new_weight;
        b.balls[pos].weight = new_weight;
        b.balls[pos].payload.extend_from_slice(extra);
        return Ok(UpdateOutcome::InPlace { bin });
    }
    let mut payload = old.payload.clone();
    payload.extend_from_slice(extra);
    retire(bins, bin, pos);
    let to = place(
        bins,
        a1,
        a2,
        Ball {
            id,
            tier: new_tier,
            weight: new_weight,
            payload,
            residual: false,
        },
    );
    Ok(UpdateOutcome::Moved { from: bin, to })
}

/// Whole-state allocator over all `m` bins.
#[derive(Clone, Debug)]
pub struct L2c<S> {
    params: L2cParams<S>,
    tiering: Tiering<S>,
    bins: Vec<Bin<S>>,
    live: HashMap<u64, (usize, usize)>,
}

impl<S: Scalar> L2c<S> {
    pub fn new(params: L2cParams<S>) -> Self {
        L2c {
            tiering: params.tiering(),
            bins: vec![Bin::new(); params.m],
            params,
            live: HashMap::new(),
        }
    }

    /// Folds [`insert_ball`](Self::insert_ball) over `balls` in order.
    pub fn setup<I>(params: L2cParams<S>, balls: I) -> Result<Self, AllocError>
    where
        I: IntoIterator<Item = (Tag, S, Vec<u64>)>,
    {
        let mut s = Self::new(params);
        for (tag, w, payload) in balls {
            s.insert_ball(&tag, w, payload)?;
        }
        Ok(s)
    }

    pub fn params(&self) -> &L2cParams<S> {
        &self.params
    }

    pub fn tiering(&self) -> &Tiering<S> {
        &self.tiering
    }

    pub fn bins(&self) -> &[Bin<S>] {
        &self.bins
    }

    pub fn choices(&self, tag: &Tag) -> (usize, usize) {
        hash_choices(tag, self.params.m)
    }

    pub fn insert_ball(&mut self, tag: &Tag, weight: S, payload: Vec<u64>) -> Result<usize, AllocError> {
        let id = tag.prefix_u64();
        if self.live.contains_key(&id) {
            return Err(AllocError::DuplicateBall(id));
        }
        let tier = self.tiering.tier_of(weight)?;
        let (a1, a2) = self.choices(tag);
        let b = place(
            &mut self.bins,
            a1,
            a2,
            Ball {
                id,
                tier,
                weight,
                payload,
                residual: false,
            },
        );
        self.live.insert(id, (a1, a2));
        Ok(b)
    }

    pub fn update_ball(&mut self, tag: &Tag, new_weight: S, extra: &[u64]) -> Result<UpdateOutcome, AllocError> {
        let id = tag.prefix_u64();
        let &(a1, a2) = self.live.get(&id).ok_or(AllocError::BallNotFound(id))?;
        grow(&mut self.bins, &self.tiering, a1, a2, id, new_weight, extra)
    }

    pub fn live_ball(&self, tag: &Tag) -> Option<&Ball<S>> {
        let id = tag.prefix_u64();
        let &(a1, a2) = self.live.get(&id)?;
        find_live(&self.bins, a1, a2, id).map(|(b, p)| &self.bins[b].balls[p])
    }

    pub fn max_load(&self) -> S {
        self.bins.iter().fold(S::zero(), |a, b| a.max_of(b.load))
    }

    pub fn overflowed(&self) -> bool {
        self.bins.iter().any(|b| b.load > self.params.capacity)
    }

    /// Total residual weight left behind by the ball with this tag.
    pub fn residual_weight(&self, tag: &Tag) -> S {
        let id = tag.prefix_u64();
        self.bins
            .iter()
            .flat_map(|b| b.balls.iter())
            .filter(|b| b.id == id && b.residual)
            .fold(S::zero(), |a, b| a + b.weight)
    }
}

/// Max load of weighted one-choice: every ball to one uniform bin.
pub fn baseline_one_choice<S: Scalar, R: RngCore>(weights: &[S], m: usize, rng: &mut R) -> S {
    let mut loads = vec![S::zero(); m];
    for &w in weights {
        let b = rng.gen_range(0..m);
        loads[b] = loads[b] + w;
    }
    loads.into_iter().fold(S::zero(), |a, l| a.max_of(l))
}

/// Max ball count of unweighted greedy two-choice.
pub fn baseline_two_choice<R: RngCore>(n: usize, m: usize, rng: &mut R) -> usize {
    let mut counts = vec![0usize; m];
    for _ in 0..n {
        let (a1, a2) = (rng.gen_range(0..m), rng.gen_range(0..m));
        let b = if counts[a2] < counts[a1] { a2 } else { a1 };
        counts[b] += 1;
    }
    counts.into_iter().max().unwrap_or(0)
}

/// Weight distributions for allocation campaigns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightDist {
    /// `k / page` with `k` uniform in `[1, page]`.
    Paged { page: u64 },
    /// Tier chosen uniformly, then a weight uniform within the tier.
    Tiered,
}

fn sample_weight<S: Scalar, R: RngCore>(dist: WeightDist, tiering: &Tiering<S>, m: usize, rng: &mut R) -> S {
    match dist {
        WeightDist::Paged { page } => S::from_ratio(rng.gen_range(1..=page), page),
        WeightDist::Tiered => {
            let log_m = (m.max(4) as f64).log2();
            let k = rng.gen_range(0..=tiering.num_tiers()) as i32;
            let hi = (2f64.powi(k) / log_m).min(1.0);
            let lo = if k == 0 { 0.0 } else { 2f64.powi(k - 1) / log_m };
            S::approx_f64(rng.gen_range(lo..=hi).clamp(1e-6, 1.0))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocRow {
    pub seed: u64,
    pub w_max: u64,
    pub m: usize,
    pub delta_mode: DeltaMode,
    pub trial: usize,
    pub max_load: f64,
    pub capacity: f64,
    pub overflowed: bool,
}

pub const ALLOC_CSV_HEADER: [&str; 8] = ["seed", "w_max", "m", "delta_mode", "trial", "max_load", "capacity", "overflowed"];

impl AllocRow {
    pub fn record(&self) -> [String; 8] {
        [
            self.seed.to_string(),
            self.w_max.to_string(),
            self.m.to_string(),
            self.delta_mode.to_string(),
            self.trial.to_string(),
            format!("{:.6}", self.max_load),
            format!("{:.6}", self.capacity),
            self.overflowed.to_string(),
        ]
    }
}

/// One trial: random balls inserted until total weight would exceed `w_max`.
pub fn alloc_trial<S: Scalar>(seed: u64, params: &L2cParams<S>, dist: WeightDist, trial: usize) -> AllocRow {
    let mut rng = KeyTree::new(seed).rng(&format!("alloc/{}/{}", params.w_max, trial));
    let mut state = L2c::new(params.clone());
    let budget = S::from_u64(params.w_max);
    let mut total = S::zero();
    loop {
        let w: S = sample_weight(dist, &state.tiering, params.m, &mut rng);
        if total + w > budget {
            break;
        }
        total = total + w;
        let mut tag = [0u8; 32];
        rng.fill_bytes(&mut tag);
        state
            .insert_ball(&Tag(tag), w, Vec::new())
            .expect("fresh random tags and in-range weights");
    }
    AllocRow {
        seed,
        w_max: params.w_max,
        m: params.m,
        delta_mode: params.delta_mode,
        trial,
        max_load: state.max_load().to_f64(),
        capacity: params.capacity.to_f64(),
        overflowed: state.overflowed(),
    }
}

/// Runs `trials` independent trials in parallel, rows in trial order.
pub fn alloc_campaign<S: Scalar>(seed: u64, params: &L2cParams<S>, dist: WeightDist, trials: usize) -> Vec<AllocRow> {
    (0..trials)
        .into_par_iter()
        .map(|t| alloc_trial(seed, params, dist, t))
        .collect()
}
