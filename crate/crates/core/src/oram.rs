//! Read-only hierarchical ORAM with constant amortized locality.
//!
//! Level 1 is a small array scanned in full on every access. Levels `2..c`
//! are PRP-permuted arrays holding real blocks at scaled indices and dummies
//! behind them; level `c` holds the whole memory. A level is rebuilt with an
//! oblivious chunked sort once its read counter reaches the capacity of the
//! level below.

use std::collections::HashSet;

use rand::RngCore;
use rand_chacha::ChaCha20Rng;

use crate::crypto::{
    bytes_to_words, ciphertext_len, decrypt_padded, encrypt_padded, words_to_bytes, EncKey, KeyTree, PrfKey, SmallPrp,
};
use crate::store::{OpMetrics, PageStore, Region};
use crate::{Error, Result};

/// Identifier word of a dummy record.
pub const EMPTY: u64 = u64::MAX;

/// Stored width of a sealed record of `plain_words` words.
pub const fn sealed_words(plain_words: usize) -> usize {
    ciphertext_len(8 * plain_words) / 8
}

pub fn seal<R: RngCore + ?Sized>(key: &EncKey, plain: &[u64], rng: &mut R) -> Vec<u64> {
    let bytes = words_to_bytes(plain, plain.len() * 8);
    let ct = encrypt_padded(key, &bytes, bytes.len(), rng).expect("payload fits its own length");
    bytes_to_words(&ct.bytes)
}

pub fn open(key: &EncKey, sealed: &[u64]) -> Result<Vec<u64>> {
    let pt = decrypt_padded(key, &words_to_bytes(sealed, sealed.len() * 8))?;
    Ok(bytes_to_words(&pt))
}

/// `⌈n^(i/c)⌉`, exact whenever `n^i` fits in 128 bits.
pub fn root_ceil(n: usize, i: usize, c: usize) -> usize {
    if i == 0 {
        return 1;
    }
    if i == c {
        return n;
    }
    let est = (n as f64).powf(i as f64 / c as f64).ceil() as u128;
    let Some(target) = (n as u128).checked_pow(i as u32) else {
        return est as usize;
    };
    let pow = |x: u128| x.checked_pow(c as u32);
    let mut x = est.max(1);
    while x > 1 && pow(x - 1).is_some_and(|v| v >= target) {
        x -= 1;
    }
    while pow(x).is_some_and(|v| v < target) {
        x += 1;
    }
    x as usize
}

fn floor_pow2(x: usize) -> usize {
    1 << (usize::BITS - 1 - x.max(1).leading_zeros())
}

/// Sorts `count` sealed records in place by `key_of` of their plaintext.
///
/// Chunks of `chunk` records are sorted locally and then combined by a
/// bitonic network of merge-split steps in standard form (the smaller half
/// always goes to the lower chunk). The access schedule depends on `count`
/// and `chunk` only. Ties are broken by the full plaintext. Returns the
/// number of chunk transfers.
#[allow(clippy::too_many_arguments)]
pub fn obl_sort<R, F>(
    store: &mut PageStore,
    start: usize,
    count: usize,
    plain_words: usize,
    chunk: usize,
    key: &EncKey,
    rng: &mut R,
    key_of: F,
) -> Result<u64>
where
    R: RngCore + ?Sized,
    F: Fn(&[u64]) -> u64,
{
    if !count.is_power_of_two() {
        return Err(Error::BadParams(format!("sort length {count} is not a power of two")));
    }
    let b = floor_pow2(chunk.min(count));
    let chunks = count / b;
    let mut s = Sorter {
        store,
        start,
        b,
        rec: sealed_words(plain_words),
        key,
        rng,
        key_of: &key_of,
        io: 0,
    };
    for i in 0..chunks {
        let mut recs = s.load(i)?;
        s.sort(&mut recs);
        s.save(i, &recs)?;
    }
    let mut k = 2;
    while k <= chunks {
        for i in 0..chunks {
            let l = i ^ (k - 1);
            if l > i {
                s.merge_split(i, l)?;
            }
        }
        let mut j = k / 4;
        while j >= 1 {
            for i in 0..chunks {
                let l = i ^ j;
                if l > i {
                    s.merge_split(i, l)?;
                }
            }
            j /= 2;
        }
        k *= 2;
    }
    Ok(s.io)
}

struct Sorter<'a, R: ?Sized, F> {
    store: &'a mut PageStore,
    start: usize,
    b: usize,
    rec: usize,
    key: &'a EncKey,
    rng: &'a mut R,
    key_of: &'a F,
    io: u64,
}

impl<R: RngCore + ?Sized, F: Fn(&[u64]) -> u64> Sorter<'_, R, F> {
    fn load(&mut self, i: usize) -> Result<Vec<Vec<u64>>> {
        self.io += 1;
        let words = self.store.read(self.start + i * self.b * self.rec, self.b * self.rec)?;
        words.chunks(self.rec).map(|r| open(self.key, r)).collect()
    }

    fn save(&mut self, i: usize, recs: &[Vec<u64>]) -> Result<()> {
        self.io += 1;
        let mut words = Vec::with_capacity(self.b * self.rec);
        for r in recs {
            words.extend(seal(self.key, r, self.rng));
        }
        self.store.write(self.start + i * self.b * self.rec, &words)?;
        Ok(())
    }

    fn sort(&self, recs: &mut [Vec<u64>]) {
        recs.sort_by(|x, y| ((self.key_of)(x), x).cmp(&((self.key_of)(y), y)));
    }

    fn merge_split(&mut self, lo: usize, hi: usize) -> Result<()> {
        let mut all = self.load(lo)?;
        all.extend(self.load(hi)?);
        self.sort(&mut all);
        let upper = all.split_off(self.b);
        self.save(lo, &all)?;
        self.save(hi, &upper)
    }
}

#[derive(Clone, Debug)]
pub struct OramParams {
    pub n: usize,
    pub c: usize,
    /// Block size in words.
    pub beta: usize,
    /// Sort chunk in records; defaults to `⌈n^(1/c)⌉·⌈log2 n⌉²`.
    pub chunk: Option<usize>,
}

impl OramParams {
    pub fn new(n: usize, c: usize, beta: usize) -> Self {
        Self { n, c, beta, chunk: None }
    }

    pub fn min_beta(n: usize, c: usize) -> usize {
        root_ceil(n, c - 1, c)
    }

    pub fn geometry(&self) -> Result<OramGeometry> {
        let (n, c) = (self.n, self.c);
        if n < 2 || c < 2 {
            return Err(Error::BadParams(format!("need n >= 2 and c >= 2, got n = {n}, c = {c}")));
        }
        let need = Self::min_beta(n, c);
        if self.beta < need {
            return Err(Error::BlockTooSmall { beta: self.beta, need });
        }
        let base: Vec<usize> = (0..=c).map(|i| root_ceil(n, i, c)).collect();
        let mut sizes = vec![0; c + 1];
        sizes[1] = base[1];
        for i in 2..=c {
            sizes[i] = base[i] + base[i - 1];
        }
        let log = (usize::BITS - (n - 1).leading_zeros()) as usize;
        let chunk = floor_pow2(self.chunk.unwrap_or(base[1] * log * log));
        let plain_words = self.beta + 2;
        Ok(OramGeometry {
            n,
            c,
            beta: self.beta,
            base,
            sizes,
            chunk,
            plain_words,
            rec_words: sealed_words(plain_words),
        })
    }
}

#[derive(Clone, Debug)]
pub struct OramGeometry {
    pub n: usize,
    pub c: usize,
    pub beta: usize,
    /// `base[i] = ⌈n^(i/c)⌉` for `i` in `0..=c`.
    pub base: Vec<usize>,
    /// Slots of `A_i`; index 0 unused.
    pub sizes: Vec<usize>,
    pub chunk: usize,
    pub plain_words: usize,
    pub rec_words: usize,
}

impl OramGeometry {
    /// Slots of `A_i` as stored, padded for the sort.
    pub fn padded(&self, i: usize) -> usize {
        if i == 1 {
            self.sizes[1]
        } else {
            self.sizes[i].next_power_of_two()
        }
    }

    /// Length of `R_i`: scaled indices for levels below `c`, all blocks at `c`.
    pub fn pending(&self, i: usize) -> usize {
        self.base[i]
    }
}

pub struct AccessOutput {
    pub value: Vec<u64>,
    /// Level the real block came from.
    pub source: usize,
    /// Position read in `A_i` for `i` in `2..=c`.
    pub positions: Vec<usize>,
    pub rebuilt: Option<usize>,
    pub sort_io: u64,
    pub metrics: OpMetrics,
}

pub struct LocOram {
    geo: OramGeometry,
    tree: KeyTree,
    key: EncKey,
    rng: ChaCha20Rng,
    store: PageStore,
    a: Vec<Region>,
    r: Vec<Region>,
    t: Vec<Region>,
    prp: Vec<Option<SmallPrp>>,
    epoch: Vec<u64>,
    cnt: Vec<usize>,
    seen: Vec<HashSet<usize>>,
    violations: u64,
    sort_io: u64,
    rebuilds: Vec<u64>,
}

/// Permutation key of level `i` in its `epoch`-th build.
pub fn level_key(tree: &KeyTree, i: usize, epoch: u64) -> PrfKey {
    tree.prf_key(&format!("oram/pi{i}/{epoch}"))
}

impl LocOram {
    pub fn init(tree: &KeyTree, params: &OramParams, memory: &[Vec<u64>]) -> Result<Self> {
        let geo = params.geometry()?;
        if memory.len() != geo.n {
            return Err(Error::BadParams(format!("memory holds {} blocks, expected {}", memory.len(), geo.n)));
        }
        if let Some(b) = memory.iter().find(|b| b.len() != geo.beta) {
            return Err(Error::BadParams(format!("block of {} words, expected {}", b.len(), geo.beta)));
        }
        let c = geo.c;
        let mut store = PageStore::new(geo.rec_words);
        let empty = Region { start: 0, len: 0 };
        let mut a = vec![empty; c + 1];
        let mut r = vec![empty; c + 1];
        let mut t = vec![empty; c + 1];
        for i in 1..=c {
            a[i] = store.alloc_region(geo.padded(i) * geo.rec_words);
        }
        for i in 2..=c {
            r[i] = store.alloc_region(geo.pending(i) * geo.rec_words);
        }
        for i in 2..c {
            t[i] = store.alloc_region(sealed_words(geo.n));
        }
        let mut o = LocOram {
            prp: vec![None; c + 1],
            epoch: vec![0; c + 1],
            cnt: vec![0; c + 1],
            seen: vec![HashSet::new(); c + 1],
            violations: 0,
            sort_io: 0,
            rebuilds: vec![0; c + 1],
            key: tree.enc_key("oram/enc"),
            rng: tree.rng("oram/client"),
            tree: tree.clone(),
            geo,
            store,
            a,
            r,
            t,
        };
        for i in 2..=c {
            o.rekey(i);
        }
        let op = o.store.begin_op("setup")?;
        let (n, beta) = (o.geo.n, o.geo.beta);
        for i in 1..c {
            o.fill_dummies(i)?;
        }
        let mut level_c = vec![o.dummy(EMPTY); o.geo.padded(c)];
        for (k, v) in memory.iter().enumerate() {
            let pos = o.pi(c, k)?;
            level_c[pos] = record(pos as u64, k as u64, v);
        }
        let zero = vec![0; beta];
        for s in n..o.geo.sizes[c] {
            let pos = o.pi(c, s)?;
            level_c[pos] = record(pos as u64, EMPTY, &zero);
        }
        o.write_records(o.a[c].start, &level_c)?;
        let pending: Vec<Vec<u64>> = memory.iter().enumerate().map(|(k, v)| record(k as u64, k as u64, v)).collect();
        o.write_records(o.r[c].start, &pending)?;
        for i in 2..c {
            let blank = vec![o.dummy(EMPTY); o.geo.pending(i)];
            o.write_records(o.r[i].start, &blank)?;
            o.write_table(i, &vec![0; n])?;
        }
        o.store.end_op(op)?;
        Ok(o)
    }

    pub fn geometry(&self) -> &OramGeometry {
        &self.geo
    }

    pub fn store(&self) -> &PageStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut PageStore {
        &mut self.store
    }

    pub fn counters(&self) -> &[usize] {
        &self.cnt
    }

    /// Reads of an already-read position within one rebuild window.
    pub fn freshness_violations(&self) -> u64 {
        self.violations
    }

    /// Chunk transfers of all sorts so far, in chunk units.
    pub fn sort_io(&self) -> u64 {
        self.sort_io
    }

    pub fn rebuild_counts(&self) -> &[u64] {
        &self.rebuilds
    }

    /// Decrypted slots of `A_i` as `(position key, block id)`, untraced.
    pub fn level_view(&self, i: usize) -> Result<Vec<(u64, Option<u64>)>> {
        let raw = self.store.raw();
        let region = self.a[i];
        (0..self.geo.sizes[i])
            .map(|s| {
                let at = region.start + s * self.geo.rec_words;
                let rec = open(&self.key, &raw[at..at + self.geo.rec_words])?;
                Ok((rec[0], (rec[1] != EMPTY).then_some(rec[1])))
            })
            .collect()
    }

    /// Reads block `k` (1-based).
    pub fn access(&mut self, k: u64) -> Result<AccessOutput> {
        let (n, c) = (self.geo.n, self.geo.c);
        if k == 0 || k > n as u64 {
            return Err(Error::IndexOutOfRange { k, n: n as u64 });
        }
        let id = k - 1;
        let op = self.store.begin_op("access")?;
        for i in 2..=c {
            self.cnt[i] += 1;
        }

        let mut a1 = self.read_records(self.a[1].start, self.geo.sizes[1])?;
        let mut tables = vec![Vec::new(); c];
        for (i, table) in tables.iter_mut().enumerate().skip(2) {
            *table = open(&self.key, &self.store.read(self.t[i].start, self.t[i].len)?)?;
        }

        let mut value = a1.iter().rev().find(|r| r[1] == id).map(|r| r[2..].to_vec());
        let mut source = if value.is_some() { 1 } else { 0 };
        let mut targets = Vec::with_capacity(c - 1);
        for (i, table) in tables.iter_mut().enumerate().skip(2) {
            let scaled = table[id as usize];
            let s = if source != 0 || scaled == 0 {
                self.geo.base[i] + self.cnt[i] - 1
            } else {
                source = i;
                scaled as usize - 1
            };
            targets.push((i, self.pi(i, s)?, source == i));
            table[id as usize] = self.cnt[i + 1] as u64;
        }
        let s = if source != 0 {
            n + self.cnt[c] - 1
        } else {
            source = c;
            id as usize
        };
        targets.push((c, self.pi(c, s)?, source == c));

        let mut positions = Vec::with_capacity(c - 1);
        for (i, pos) in targets.iter().map(|&(i, p, _)| (i, p)) {
            let rec = self.read_records(self.a[i].start + pos * self.geo.rec_words, 1)?.remove(0);
            if !self.seen[i].insert(pos) {
                self.violations += 1;
            }
            if targets.iter().any(|&(j, _, real)| real && j == i) {
                if rec[1] != id {
                    self.store.end_op(op)?;
                    return Err(Error::Malformed("oram level slot"));
                }
                value = Some(rec[2..].to_vec());
            }
            positions.push(pos);
        }
        let value = value.ok_or(Error::Malformed("oram lookup"))?;

        for i in 2..c {
            let s = self.cnt[i + 1] - 1;
            let sealed = seal(&self.key, &record(s as u64, id, &value), &mut self.rng);
            self.store.write(self.r[i].start + s * self.geo.rec_words, &sealed)?;
        }
        a1[self.cnt[2] - 1] = record(0, id, &value);

        let rebuilt = (2..=c).rev().find(|&i| self.cnt[i] >= self.geo.base[i - 1]);
        let io_before = self.sort_io;
        if let Some(i) = rebuilt {
            self.rebuild(i)?;
            a1 = vec![self.dummy(EMPTY); self.geo.sizes[1]];
            for table in tables.iter_mut().take(i).skip(2) {
                table.iter_mut().for_each(|x| *x = 0);
            }
        }
        self.write_records(self.a[1].start, &a1)?;
        for (i, table) in tables.iter().enumerate().skip(2) {
            self.write_table(i, table)?;
        }
        let metrics = self.store.end_op(op)?;
        Ok(AccessOutput {
            value,
            source,
            positions,
            rebuilt,
            sort_io: self.sort_io - io_before,
            metrics,
        })
    }

    /// Rebuilds level `i` from its pending blocks and empties every level below.
    fn rebuild(&mut self, i: usize) -> Result<()> {
        let (c, rec) = (self.geo.c, self.geo.rec_words);
        for j in 2..=i {
            self.epoch[j] += 1;
            self.rekey(j);
            self.cnt[j] = 0;
            self.seen[j].clear();
        }
        self.rebuilds[i] += 1;
        let live = if i == c { self.geo.n } else { self.cnt[i + 1] };
        let pending = self.geo.pending(i);
        let zero = vec![0; self.geo.beta];
        let step = self.geo.chunk;
        let mut s = 0;
        while s < self.geo.padded(i) {
            let len = step.min(self.geo.padded(i) - s);
            let from_pending = pending.saturating_sub(s).min(len);
            let src = self.read_records(self.r[i].start + s * rec, from_pending)?;
            let mut out = Vec::with_capacity(len);
            for (off, r) in src.iter().enumerate() {
                let slot = s + off;
                let key = self.pi(i, slot)? as u64;
                out.push(if slot < live { record(key, r[1], &r[2..]) } else { record(key, EMPTY, &zero) });
            }
            for slot in s + from_pending..s + len {
                let key = if slot < self.geo.sizes[i] { self.pi(i, slot)? as u64 } else { u64::MAX };
                out.push(record(key, EMPTY, &zero));
            }
            self.write_records(self.a[i].start + s * rec, &out)?;
            s += len;
        }
        self.sort_io += obl_sort(
            &mut self.store,
            self.a[i].start,
            self.geo.padded(i),
            self.geo.plain_words,
            step,
            &self.key,
            &mut self.rng,
            |r| r[0],
        )?;
        for j in 2..i {
            self.fill_dummies(j)?;
        }
        Ok(())
    }

    fn rekey(&mut self, i: usize) {
        let key = level_key(&self.tree, i, self.epoch[i]);
        self.prp[i] = Some(SmallPrp::new(&key, self.geo.sizes[i] as u64));
    }

    fn pi(&self, i: usize, s: usize) -> Result<usize> {
        Ok(self.prp[i].as_ref().expect("levels 2..=c are keyed").eval(s as u64)? as usize)
    }

    fn dummy(&self, key: u64) -> Vec<u64> {
        record(key, EMPTY, &vec![0; self.geo.beta])
    }

    fn fill_dummies(&mut self, i: usize) -> Result<()> {
        let total = self.geo.padded(i);
        let step = self.geo.chunk;
        let mut s = 0;
        while s < total {
            let len = step.min(total - s);
            let blank = vec![self.dummy(EMPTY); len];
            self.write_records(self.a[i].start + s * self.geo.rec_words, &blank)?;
            s += len;
        }
        Ok(())
    }

    fn read_records(&mut self, at: usize, count: usize) -> Result<Vec<Vec<u64>>> {
        let rec = self.geo.rec_words;
        let words = self.store.read(at, count * rec)?;
        words.chunks(rec).map(|r| open(&self.key, r)).collect()
    }

    fn write_records(&mut self, at: usize, recs: &[Vec<u64>]) -> Result<()> {
        let mut words = Vec::with_capacity(recs.len() * self.geo.rec_words);
        for r in recs {
            words.extend(seal(&self.key, r, &mut self.rng));
        }
        self.store.write(at, &words)?;
        Ok(())
    }

    fn write_table(&mut self, i: usize, table: &[u64]) -> Result<()> {
        let sealed = seal(&self.key, table, &mut self.rng);
        self.store.write(self.t[i].start, &sealed)?;
        Ok(())
    }
}

fn record(key: u64, id: u64, value: &[u64]) -> Vec<u64> {
    let mut r = Vec::with_capacity(value.len() + 2);
    r.push(key);
    r.push(id);
    r.extend_from_slice(value);
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roots_round_up() {
        assert_eq!(root_ceil(64, 1, 3), 4);
        assert_eq!(root_ceil(64, 2, 3), 16);
        assert_eq!(root_ceil(65, 1, 3), 5);
        assert_eq!(root_ceil(256, 2, 3), 41);
        assert_eq!(root_ceil(16, 1, 2), 4);
        assert_eq!(root_ceil(17, 1, 2), 5);
    }

    #[test]
    fn geometry_small() {
        let g = OramParams::new(64, 3, 16).geometry().unwrap();
        assert_eq!(g.base, vec![1, 4, 16, 64]);
        assert_eq!(g.sizes, vec![0, 4, 20, 80]);
        assert_eq!(g.padded(3), 128);
        assert!(matches!(
            OramParams::new(64, 3, 15).geometry(),
            Err(Error::BlockTooSmall { beta: 15, need: 16 })
        ));
    }
}
