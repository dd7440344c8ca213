//! Seeded experiment runs: setup, a generated workload checked against a
//! plaintext model, and one report row per operation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::alloc::{alloc_campaign, llog, DeltaMode, L2cParams, WeightDist};
use crate::clip::{ClipParams, ClipRecord};
use crate::crypto::{KeyTree, Tag};
use crate::layered::{LayeredParams, Outcome, RttMode};
use crate::local::LocalParams;
use crate::oram::{LocOram, OramParams};
use crate::scheme::{DynamicSse, Twin, TwinMetrics};
use crate::workload::{gen_db, gen_ops, DbSpec, Dist, Generated, Mix, Op, OpSpec};
use crate::Error;

pub const SCHEMA_VERSION: u32 = 1;

pub const REPORT_HEADER: [&str; 13] = [
    "schema_version",
    "scheme",
    "seed",
    "n",
    "p",
    "op_id",
    "label",
    "locality",
    "read_eff",
    "page_eff",
    "storage_eff",
    "overflow_count",
    "max_load",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchemeKind {
    Layered,
    Clip,
    LocalLayered,
    LocOramDemo,
    AllocStats,
}

impl SchemeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::Layered => "layered",
            SchemeKind::Clip => "clip",
            SchemeKind::LocalLayered => "local-layered",
            SchemeKind::LocOramDemo => "loc-oram-demo",
            SchemeKind::AllocStats => "alloc-stats",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            SchemeKind::Layered,
            SchemeKind::Clip,
            SchemeKind::LocalLayered,
            SchemeKind::LocOramDemo,
            SchemeKind::AllocStats,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| format!("unknown scheme {s:?}"))
    }
}

#[derive(Clone, Debug)]
pub struct RunSpec {
    pub seed: u64,
    pub n: u64,
    pub p: usize,
    pub scheme: SchemeKind,
    pub dist: Dist,
    /// Fraction of `N` filled at setup.
    pub fill: f64,
    pub cap_longest: Option<f64>,
    pub ops: usize,
    pub mix: Mix,
    /// Largest identifier batch of one update; defaults to `p`.
    pub max_batch: Option<usize>,
    pub new_keyword: f64,
    pub alpha: f64,
    pub d: f64,
    pub load_const: f64,
    pub delta_mode: DeltaMode,
    pub lambda: u64,
    /// Round trips per layered update, 1 (piggyback) or 2.
    pub rtt: u8,
    /// ORAM level count.
    pub c: usize,
    /// ORAM block size in words; defaults to the smallest allowed.
    pub beta: Option<usize>,
    /// Independent trials with seeds `seed, seed + 1, ...`.
    pub trials: usize,
}

impl RunSpec {
    pub fn new(scheme: SchemeKind, n: u64, p: usize) -> Self {
        RunSpec {
            seed: 1,
            n,
            p,
            scheme,
            dist: Dist::Uniform(16),
            fill: 0.5,
            cap_longest: None,
            ops: 1000,
            mix: Mix::default(),
            max_batch: None,
            new_keyword: 0.05,
            alpha: 4.0,
            d: 1.0,
            load_const: 4.0,
            delta_mode: DeltaMode::LogLogLog,
            lambda: 128,
            rtt: 2,
            c: 2,
            beta: None,
            trials: 1,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::BadSpec(m));
        if self.n < 2 {
            return bad(format!("N = {} is too small", self.n));
        }
        if self.p == 0 {
            return bad("p must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.fill) || !(0.0..=1.0).contains(&self.new_keyword) {
            return bad("fractions must lie in [0, 1]".into());
        }
        if self.rtt != 1 && self.rtt != 2 {
            return bad(format!("rtt must be 1 or 2, got {}", self.rtt));
        }
        if self.trials == 0 {
            return bad("at least one trial is required".into());
        }
        if self.scheme == SchemeKind::LocOramDemo && self.c < 2 {
            return bad(format!("c must be at least 2, got {}", self.c));
        }
        Ok(())
    }

    fn trial_seed(&self, t: usize) -> u64 {
        self.seed.wrapping_add(t as u64)
    }

    pub fn layered_params(&self) -> LayeredParams {
        LayeredParams {
            lambda: self.lambda,
            delta_mode: self.delta_mode,
            load_const: self.load_const,
            ..LayeredParams::new(self.n, self.p)
        }
    }

    pub fn clip_params(&self) -> ClipParams {
        ClipParams {
            alpha: self.alpha,
            d: self.d,
            page: self.p,
            ..ClipParams::new(self.n)
        }
    }

    pub fn local_params(&self) -> LocalParams {
        LocalParams {
            alpha: self.alpha,
            d: self.d,
            lambda: self.lambda,
            delta_mode: self.delta_mode,
            load_const: self.load_const,
            ..LocalParams::new(self.n, self.p)
        }
    }

    pub fn db_spec(&self) -> DbSpec {
        DbSpec {
            fill: self.fill,
            cap_longest: self.cap_longest,
            ..DbSpec::new(self.n, self.dist.clone())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub scheme: SchemeKind,
    pub seed: u64,
    pub n: u64,
    pub p: usize,
    pub op_id: usize,
    pub label: String,
    pub locality: usize,
    pub read_eff: f64,
    pub page_eff: f64,
    pub storage_eff: f64,
    pub overflow_count: u64,
    pub max_load: Option<f64>,
}

impl ReportRow {
    pub fn record(&self) -> [String; 13] {
        [
            SCHEMA_VERSION.to_string(),
            self.scheme.to_string(),
            self.seed.to_string(),
            self.n.to_string(),
            self.p.to_string(),
            self.op_id.to_string(),
            self.label.clone(),
            self.locality.to_string(),
            format!("{:.6}", self.read_eff),
            format!("{:.6}", self.page_eff),
            format!("{:.6}", self.storage_eff),
            self.overflow_count.to_string(),
            self.max_load.map(|m| format!("{m:.6}")).unwrap_or_default(),
        ]
    }
}

pub fn write_csv<W: Write>(out: W, rows: &[ReportRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("correctness failure: {0}")]
    Correctness(String),
    #[error("bad spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Scheme(#[from] Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Correctness(_) => 2,
            RunError::BadSpec(_) => 4,
            RunError::Scheme(Error::BadParams(_)) => 4,
            RunError::Scheme(Error::CapacityExceeded { .. } | Error::UpdateRejected) => 3,
            RunError::Scheme(_) => 1,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
    /// First overflow beyond what the scheme tolerates, if any.
    pub overflow: Option<String>,
}

/// Runs every trial in parallel; rows come out in trial order.
pub fn run(spec: &RunSpec) -> Result<RunReport, RunError> {
    spec.validate()?;
    let trials: Vec<Result<RunReport, RunError>> =
        (0..spec.trials).into_par_iter().map(|t| run_trial(spec, spec.trial_seed(t))).collect();
    let mut out = RunReport::default();
    for t in trials {
        let t = t?;
        out.rows.extend(t.rows);
        if out.overflow.is_none() {
            out.overflow = t.overflow;
        }
    }
    Ok(out)
}

pub fn run_trial(spec: &RunSpec, seed: u64) -> Result<RunReport, RunError> {
    match spec.scheme {
        SchemeKind::AllocStats => Ok(alloc_stats(spec, seed)),
        SchemeKind::LocOramDemo => oram_demo(spec, seed),
        _ => sse_trial(spec, seed),
    }
}

fn alloc_stats(spec: &RunSpec, seed: u64) -> RunReport {
    let w_max = spec.n.div_ceil(spec.p as u64).max(1);
    let params: L2cParams<f64> = L2cParams::new(w_max, spec.lambda, spec.delta_mode, spec.load_const);
    let rows = alloc_campaign(seed, &params, WeightDist::Paged { page: spec.p as u64 }, spec.ops.max(1));
    let scale = (params.delta * llog(w_max)) as f64;
    let overflow = rows
        .iter()
        .find(|r| r.overflowed)
        .map(|r| format!("trial {} loaded a bin to {:.3} over capacity {:.3}", r.trial, r.max_load, r.capacity));
    let mut overflows = 0;
    let rows = rows
        .iter()
        .map(|r| {
            overflows += r.overflowed as u64;
            ReportRow {
                scheme: spec.scheme,
                seed,
                n: spec.n,
                p: spec.p,
                op_id: r.trial,
                label: "alloc".into(),
                locality: 0,
                read_eff: 0.0,
                page_eff: 0.0,
                storage_eff: r.max_load / scale,
                overflow_count: overflows,
                max_load: Some(r.max_load),
            }
        })
        .collect();
    RunReport { rows, overflow }
}

fn oram_demo(spec: &RunSpec, seed: u64) -> Result<RunReport, RunError> {
    let n = spec.n as usize;
    let beta = spec.beta.unwrap_or_else(|| OramParams::min_beta(n, spec.c));
    let tree = KeyTree::new(seed);
    let mut rng = tree.rng("oram/memory");
    let memory: Vec<Vec<u64>> = (0..n).map(|_| (0..beta).map(|_| rng.gen()).collect()).collect();
    let mut oram = LocOram::init(&tree, &OramParams::new(n, spec.c, beta), &memory)?;
    let mut pick = tree.rng("oram/workload");
    let storage = oram.store().total_words() as f64 / (n * beta) as f64;
    let mut rows = Vec::with_capacity(spec.ops);
    for op_id in 0..spec.ops {
        let k = pick.gen_range(1..=n as u64);
        let out = oram.access(k)?;
        if out.value != memory[k as usize - 1] {
            return Err(RunError::Correctness(format!("seed {seed}: access {op_id} to block {k} returned a wrong value")));
        }
        let m = &out.metrics;
        rows.push(ReportRow {
            scheme: spec.scheme,
            seed,
            n: spec.n,
            p: spec.p,
            op_id,
            label: if out.rebuilt.is_some() { "access+rebuild" } else { "access" }.into(),
            locality: m.locality,
            read_eff: m.transferred_words as f64 / beta as f64,
            page_eff: m.pages_touched as f64,
            storage_eff: storage,
            overflow_count: oram.freshness_violations(),
            max_load: None,
        });
    }
    let overflow = (oram.freshness_violations() > 0)
        .then(|| format!("{} stale position reads", oram.freshness_violations()));
    Ok(RunReport { rows, overflow })
}

/// Plaintext model of what the scheme can return: ids it accepted minus
/// deletions it accepted.
#[derive(Default)]
struct Model {
    lists: BTreeMap<Tag, (BTreeSet<u64>, BTreeSet<u64>)>,
    live: u64,
}

impl Model {
    fn new(db: &crate::db::Database, clip: &[ClipRecord]) -> Self {
        let mut m = Model::default();
        for (t, ids) in db.iter() {
            m.lists.entry(*t).or_default().0.extend(ids);
        }
        for r in clip {
            let e = m.lists.entry(r.token).or_default();
            for i in &r.ids {
                e.0.remove(i);
            }
        }
        m.live = m.lists.values().map(|(a, _)| a.len() as u64).sum();
        m
    }

    fn add(&mut self, t: &Tag, ids: &[u64], clipped: &[u64]) {
        let e = self.lists.entry(*t).or_default();
        for i in ids.iter().filter(|i| !clipped.contains(i)) {
            self.live += e.0.insert(*i) as u64;
        }
    }

    fn delete(&mut self, t: &Tag, ids: &[u64], clipped: &[u64]) {
        let e = self.lists.entry(*t).or_default();
        for i in ids.iter().filter(|i| !clipped.contains(i)) {
            if e.1.insert(*i) && e.0.contains(i) {
                self.live -= 1;
            }
        }
    }

    fn expected(&self, t: &Tag) -> Vec<u64> {
        self.lists.get(t).map_or_else(Vec::new, |(a, d)| a.difference(d).copied().collect())
    }
}

fn sse_trial(spec: &RunSpec, seed: u64) -> Result<RunReport, RunError> {
    let gen = gen_db(seed, &spec.db_spec())?;
    let tree = KeyTree::new(seed);
    match spec.scheme {
        SchemeKind::Layered => {
            let mut twin = Twin::setup_layered(&tree, &spec.layered_params(), &gen.db)?;
            if spec.rtt == 1 {
                twin.add.set_rtt_mode(RttMode::Piggyback)?;
                twin.del.set_rtt_mode(RttMode::Piggyback)?;
            }
            drive(spec, seed, &mut twin, &gen, &[])
        }
        SchemeKind::Clip => {
            let (mut twin, clip) = Twin::setup_clip(&tree, &spec.clip_params(), &gen.db)?;
            drive(spec, seed, &mut twin, &gen, &clip)
        }
        SchemeKind::LocalLayered => {
            let mut twin = Twin::setup_local(&tree, &spec.local_params(), &gen.db)?;
            drive(spec, seed, &mut twin, &gen, &[])
        }
        _ => unreachable!("dispatched by run_trial"),
    }
}

/// Workload of a trial, as used by [`run_trial`].
pub fn trial_ops(spec: &RunSpec, seed: u64, gen: &Generated) -> Vec<Op> {
    let ops = OpSpec {
        ops: spec.ops,
        mix: spec.mix,
        max_batch: spec.max_batch.unwrap_or(spec.p),
        new_keyword: spec.new_keyword,
        budget: spec.n.saturating_sub(gen.db.total_ids()),
    };
    gen_ops(seed, gen, &ops)
}

fn drive<S: DynamicSse>(
    spec: &RunSpec,
    seed: u64,
    twin: &mut Twin<S>,
    gen: &Generated,
    setup_clip: &[ClipRecord],
) -> Result<RunReport, RunError> {
    let mut model = Model::new(&gen.db, setup_clip);
    let mut overflows: u64 = setup_clip.iter().map(|r| r.ids.len() as u64).sum();
    let mut overflow = None;
    let p = spec.p as f64;
    let mut rows = Vec::with_capacity(spec.ops);
    for (op_id, op) in trial_ops(spec, seed, gen).iter().enumerate() {
        let (metrics, answer): (TwinMetrics, usize) = match op {
            Op::Search(t) => {
                let got = twin.search(t)?;
                let want = model.expected(t);
                if got.ids != want {
                    return Err(RunError::Correctness(format!(
                        "seed {seed}: search {op_id} returned {} ids, expected {}",
                        got.ids.len(),
                        want.len()
                    )));
                }
                (got.metrics, want.len())
            }
            Op::Add(t, ids) | Op::Delete(t, ids) => {
                let is_add = matches!(op, Op::Add(..));
                let res = if is_add { twin.add(t, ids) } else { twin.delete(t, ids) };
                match res {
                    Ok(out) if out.outcome == Outcome::Applied => {
                        overflows += out.clipped.len() as u64;
                        if is_add {
                            model.add(t, ids, &out.clipped);
                        } else {
                            model.delete(t, ids, &out.clipped);
                        }
                        (out.metrics, ids.len())
                    }
                    Ok(out) => {
                        overflows += ids.len() as u64;
                        overflow.get_or_insert_with(|| format!("seed {seed}: update {op_id} rejected"));
                        (out.metrics, ids.len())
                    }
                    Err(Error::UpdateRejected) => {
                        overflows += ids.len() as u64;
                        overflow.get_or_insert_with(|| format!("seed {seed}: update {op_id} rejected"));
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        let pages_needed = (answer as f64 / p).ceil().max(1.0);
        rows.push(ReportRow {
            scheme: spec.scheme,
            seed,
            n: spec.n,
            p: spec.p,
            op_id,
            label: op.label().into(),
            locality: metrics.locality(),
            read_eff: metrics.read_words() as f64 / answer.max(1) as f64,
            page_eff: metrics.pages() as f64 / pages_needed,
            storage_eff: twin.storage_words() as f64 / model.live.max(1) as f64,
            overflow_count: overflows,
            max_load: None,
        });
    }
    twin.flush()?;
    if spec.scheme == SchemeKind::Clip {
        let bound = spec.n as f64 / (spec.n as f64).log2();
        if overflows as f64 > bound {
            overflow = Some(format!("seed {seed}: {overflows} clipped ids exceed N/log2 N = {bound:.1}"));
        }
    }
    Ok(RunReport { rows, overflow })
}
