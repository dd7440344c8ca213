//! Synthetic databases, operation scripts and the plaintext oracle.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::crypto::{prf, KeyTree, Tag};
use crate::db::Database;
use crate::error::{Error, Result};

/// List-length distribution of a generated database.
#[derive(Clone, Debug, PartialEq)]
pub enum Dist {
    /// Lengths uniform in `[1, max]`.
    Uniform(usize),
    /// Lengths proportional to `1 / rank^s`.
    Zipf(f64),
    /// Every list has exactly this length.
    Single(usize),
    /// Explicit lengths, one keyword each.
    Script(Vec<usize>),
}

impl Dist {
    /// Reads one list length per line; blank lines and `#` comments skipped.
    pub fn from_script(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            lens.push(
                line.parse()
                    .map_err(|_| Error::BadParams(format!("script line {}: `{line}` is not a length", i + 1)))?,
            );
        }
        Ok(Dist::Script(lens))
    }
}

impl fmt::Display for Dist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dist::Uniform(l) => write!(f, "uniform({l})"),
            Dist::Zipf(s) => write!(f, "zipf({s})"),
            Dist::Single(l) => write!(f, "single({l})"),
            Dist::Script(v) => write!(f, "script({} lists)", v.len()),
        }
    }
}

impl FromStr for Dist {
    type Err = Error;

    /// `uniform(L)`, `zipf(S)`, `single(L)` or `adversarial-script(PATH)`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::BadParams(format!("unknown distribution `{s}`"));
        let (name, arg) = s.split_once('(').ok_or_else(bad)?;
        let arg = arg.strip_suffix(')').ok_or_else(bad)?;
        match name {
            "uniform" => Ok(Dist::Uniform(arg.parse().map_err(|_| bad())?)),
            "zipf" => Ok(Dist::Zipf(arg.parse().map_err(|_| bad())?)),
            "single" => Ok(Dist::Single(arg.parse().map_err(|_| bad())?)),
            "adversarial-script" => Dist::from_script(Path::new(arg)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DbSpec {
    pub n: u64,
    pub dist: Dist,
    /// Fraction of `N` filled at setup; the rest is headroom for adds.
    pub fill: f64,
    /// Caps every list at `⌊N / (log2 N)^d⌋`.
    pub cap_longest: Option<f64>,
}

impl DbSpec {
    pub fn new(n: u64, dist: Dist) -> Self {
        DbSpec {
            n,
            dist,
            fill: 1.0,
            cap_longest: None,
        }
    }

    pub fn longest_allowed(&self) -> usize {
        match self.cap_longest {
            Some(d) => (self.n as f64 / (self.n.max(2) as f64).log2().powf(d)).floor().max(1.0) as usize,
            None => self.n as usize,
        }
    }
}

/// Token of the `i`-th generated keyword, as the client's PRF would derive it.
pub fn keyword_token(tree: &KeyTree, i: u64) -> Tag {
    prf(&tree.prf_key("keywords"), format!("kw{i}").as_bytes())
}

pub struct Generated {
    pub db: Database,
    /// Keyword tokens in generation order.
    pub tokens: Vec<Tag>,
    /// Next unused identifier.
    pub next_id: u64,
}

pub fn gen_lengths(spec: &DbSpec, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let target = (spec.n as f64 * spec.fill).floor() as usize;
    let cap = spec.longest_allowed();
    let mut lens = Vec::new();
    let mut total = 0usize;
    let mut push = |l: usize, lens: &mut Vec<usize>| -> bool {
        let l = l.min(cap).min(target - total);
        if l == 0 {
            return false;
        }
        total += l;
        lens.push(l);
        total < target
    };
    match &spec.dist {
        Dist::Uniform(max) => {
            if *max == 0 {
                return Err(Error::BadParams("uniform length must be positive".into()));
            }
            while push(rng.gen_range(1..=*max), &mut lens) {}
        }
        Dist::Single(l) => {
            if *l == 0 {
                return Err(Error::BadParams("single length must be positive".into()));
            }
            for _ in 0..target / l {
                push(*l, &mut lens);
            }
        }
        Dist::Zipf(s) => {
            if !(*s >= 0.0) {
                return Err(Error::BadParams("zipf exponent must be non-negative".into()));
            }
            let k = (target / 16).max(1);
            let h: f64 = (1..=k).map(|i| 1.0 / (i as f64).powf(*s)).sum();
            for i in 1..=k {
                let l = (target as f64 / (h * (i as f64).powf(*s))).round().max(1.0) as usize;
                if !push(l, &mut lens) {
                    break;
                }
            }
        }
        Dist::Script(v) => {
            for &l in v {
                if !push(l, &mut lens) {
                    break;
                }
            }
        }
    }
    Ok(lens)
}

/// Deterministic database for `seed`; identifiers are distinct across lists.
pub fn gen_db(seed: u64, spec: &DbSpec) -> Result<Generated> {
    let tree = KeyTree::new(seed);
    let mut rng = tree.rng("db");
    let lens = gen_lengths(spec, &mut rng)?;
    let mut db = Database::new();
    let mut tokens = Vec::with_capacity(lens.len());
    let mut next_id = 1u64;
    for (i, l) in lens.into_iter().enumerate() {
        let t = keyword_token(&tree, i as u64);
        db.insert(t, (next_id..next_id + l as u64).collect());
        next_id += l as u64;
        tokens.push(t);
    }
    Ok(Generated { db, tokens, next_id })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Op {
    Search(Tag),
    Add(Tag, Vec<u64>),
    Delete(Tag, Vec<u64>),
}

impl Op {
    pub fn label(&self) -> &'static str {
        match self {
            Op::Search(_) => "search",
            Op::Add(..) => "add",
            Op::Delete(..) => "delete",
        }
    }
}

/// Percentages of searches, adds and deletes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mix {
    pub search: u32,
    pub add: u32,
    pub delete: u32,
}

impl Default for Mix {
    fn default() -> Self {
        Mix { search: 40, add: 40, delete: 20 }
    }
}

impl FromStr for Mix {
    type Err = Error;

    /// `S,A,D`, summing to 100.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::BadParams(format!("bad mix `{s}`")))?;
        let [search, add, delete] = parts[..] else {
            return Err(Error::BadParams(format!("mix `{s}` needs three percentages")));
        };
        if search + add + delete != 100 {
            return Err(Error::BadParams(format!("mix `{s}` does not sum to 100")));
        }
        Ok(Mix { search, add, delete })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpSpec {
    pub ops: usize,
    pub mix: Mix,
    /// Adds and deletes carry between 1 and this many ids.
    pub max_batch: usize,
    /// Probability that an add goes to a fresh keyword.
    pub new_keyword: f64,
    /// Total ids that may be added (and, separately, deleted).
    pub budget: u64,
}

/// Live plaintext state; the reference every search is checked against.
#[derive(Clone, Debug, Default)]
pub struct Oracle {
    lists: BTreeMap<Tag, BTreeSet<u64>>,
}

impl Oracle {
    pub fn from_db(db: &Database) -> Self {
        Oracle {
            lists: db.iter().map(|(t, ids)| (*t, ids.iter().copied().collect())).collect(),
        }
    }

    pub fn apply(&mut self, op: &Op) {
        match op {
            Op::Search(_) => {}
            Op::Add(t, ids) => self.lists.entry(*t).or_default().extend(ids.iter().copied()),
            Op::Delete(t, ids) => {
                let set = self.lists.entry(*t).or_default();
                for id in ids {
                    set.remove(id);
                }
            }
        }
    }

    pub fn expected(&self, t: &Tag) -> Vec<u64> {
        self.lists.get(t).map(|s| s.iter().copied().collect()).unwrap_or_default()
    }

    pub fn len(&self, t: &Tag) -> usize {
        self.lists.get(t).map_or(0, |s| s.len())
    }

    pub fn keywords(&self) -> impl Iterator<Item = &Tag> {
        self.lists.keys()
    }
}

/// Random operation script over `gen`; only known keywords are searched and
/// only live ids deleted, and every added id is fresh.
pub fn gen_ops(seed: u64, gen: &Generated, spec: &OpSpec) -> Vec<Op> {
    let tree = KeyTree::new(seed);
    let mut rng = tree.rng("ops");
    let mut keywords: Vec<Tag> = gen.tokens.clone();
    let mut live: BTreeMap<Tag, Vec<u64>> = gen.db.iter().map(|(t, v)| (*t, v.to_vec())).collect();
    let mut next_id = gen.next_id;
    let mut next_kw = gen.tokens.len() as u64;
    let (mut added, mut deleted) = (0u64, 0u64);
    let mut ops = Vec::with_capacity(spec.ops);
    let total = spec.mix.search + spec.mix.add + spec.mix.delete;
    while ops.len() < spec.ops {
        let roll = rng.gen_range(0..total.max(1));
        let op = if roll < spec.mix.search {
            keywords.choose(&mut rng).map(|t| Op::Search(*t))
        } else if roll < spec.mix.search + spec.mix.add {
            let k = rng.gen_range(1..=spec.max_batch.max(1)) as u64;
            if added + k > spec.budget {
                keywords.choose(&mut rng).map(|t| Op::Search(*t))
            } else {
                let t = if keywords.is_empty() || rng.gen_bool(spec.new_keyword) {
                    let t = keyword_token(&tree, 1 << 40 | next_kw);
                    next_kw += 1;
                    keywords.push(t);
                    t
                } else {
                    *keywords.choose(&mut rng).unwrap()
                };
                let ids: Vec<u64> = (next_id..next_id + k).collect();
                next_id += k;
                added += k;
                live.entry(t).or_default().extend_from_slice(&ids);
                Some(Op::Add(t, ids))
            }
        } else {
            let candidates: Vec<Tag> = live.iter().filter(|(_, v)| !v.is_empty()).map(|(t, _)| *t).collect();
            match candidates.choose(&mut rng) {
                Some(t) if deleted < spec.budget => {
                    let list = live.get_mut(t).unwrap();
                    let k = rng.gen_range(1..=spec.max_batch.max(1).min(list.len())).min((spec.budget - deleted) as usize);
                    list.shuffle(&mut rng);
                    let ids: Vec<u64> = list.split_off(list.len() - k);
                    deleted += k as u64;
                    Some(Op::Delete(*t, ids))
                }
                _ => keywords.choose(&mut rng).map(|t| Op::Search(*t)),
            }
        };
        match op {
            Some(op) => ops.push(op),
            None => break,
        }
    }
    ops
}
