//! Dynamic page-efficient encrypted index over layered two-choice bins.
//!
//! Server memory holds three page-aligned tables:
//!
//! * `bins`: `m` AEAD ciphertexts of identical length. A bin's plaintext is a
//!   sequence of balls, each one header word (40-bit tag fragment, 23-bit
//!   length, residual bit) followed by its identifiers; headers count against
//!   the `capacity_ids` word budget.
//! * `t_len`: byte-packed entries `x ⊕ mask`, where `x = max(1, ⌈ℓ/p⌉)` is
//!   the page count of the keyword's list. Unused entries are random.
//! * `t_full`: one-page slots holding full sublists, stream-encrypted and
//!   written once. Slots are handed out in creation order.
//!
//! A list of length `ℓ` is stored as `x − 1` full pages `T_full[w‖1..x−1]`
//! plus one remainder ball with tag `H(w‖x)` placed by the allocator. A
//! keyword without a remainder ball has an empty remainder.
//!
//! The server keeps two directories (keyword token to `t_len` slot, full-page
//! key to `t_full` slot) outside the traced store; they only record which
//! slot was handed out when.

use std::collections::HashMap;

use rand::RngCore;
use rand_chacha::ChaCha20Rng;

use crate::alloc::{self, Ball, Bin, L2cParams, Tiering};
use crate::crypto::{
    bytes_to_words, ciphertext_len, decrypt_padded, encrypt_padded, hash_choices, prf, ro_hash, stream_xor, words_to_bytes,
    EncKey, KeyTree, PrfKey, Tag,
};
use crate::db::Database;
use crate::error::{Error, Result};
use crate::scalar::{ceil_u64, Exact, Scalar};
use crate::store::{OpMetrics, PageStore, Region};
use crate::wire::{Decoder, Encoder, Loopback, Service, Transcript, Transport, Wire};

pub const EDB_MAGIC: &[u8; 4] = b"LSED";
pub const EDB_VERSION: u32 = 1;

const FRAG_BITS: u32 = 40;
const LEN_BITS: u32 = 23;

#[derive(Clone, Debug, PartialEq)]
pub struct LayeredParams {
    pub n: u64,
    pub p: usize,
    pub lambda: u64,
    pub delta_mode: alloc::DeltaMode,
    pub load_const: f64,
    /// Number of `t_len` entries; defaults to `N`.
    pub max_keywords: Option<usize>,
    /// Number of `t_full` slots; defaults to `⌊N/p⌋`.
    pub full_slots: Option<usize>,
}

impl LayeredParams {
    pub fn new(n: u64, p: usize) -> Self {
        LayeredParams {
            n,
            p,
            lambda: 128,
            delta_mode: alloc::DeltaMode::LogLogLog,
            load_const: 4.0,
            max_keywords: None,
            full_slots: None,
        }
    }

    pub fn with_load_const(mut self, c: f64) -> Self {
        self.load_const = c;
        self
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self)
    }
}

/// Public sizes derived from the parameters.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub n: u64,
    pub p: usize,
    pub l2c: L2cParams<Exact>,
    pub tiering: Tiering<Exact>,
    pub m: usize,
    /// Word budget of a bin plaintext, ball headers included.
    pub cap_ids: usize,
    /// Words of one encrypted bin.
    pub bin_words: usize,
    pub entry_bytes: usize,
    pub entries_per_word: usize,
    pub len_entries: usize,
    pub full_slots: usize,
    /// Largest page count a list can have.
    pub max_x: u64,
}

fn bits_for(v: u64) -> u32 {
    64 - v.leading_zeros()
}

impl Geometry {
    pub fn new(params: &LayeredParams) -> Result<Self> {
        if params.n == 0 || params.p == 0 {
            return Err(Error::BadParams("N and p must be positive".into()));
        }
        if params.p >= 1 << LEN_BITS {
            return Err(Error::BadParams(format!("p = {} exceeds the ball length field", params.p)));
        }
        let p = params.p;
        let w_max = params.n.div_ceil(p as u64).max(1);
        let l2c: L2cParams<Exact> = L2cParams::new(w_max, params.lambda, params.delta_mode, params.load_const);
        let cap_ids = ceil_u64(l2c.capacity * Exact::from_u64(p as u64)) as usize;
        if cap_ids < p + 1 {
            return Err(Error::BadParams(format!(
                "bin capacity of {cap_ids} words cannot hold one page-sized ball"
            )));
        }
        let max_x = w_max;
        let entry_bytes = (bits_for(params.n.max(max_x + 1).saturating_sub(1)).max(1) as usize).div_ceil(8);
        let llog_lambda = alloc::llog(params.lambda) as f64;
        if (p as f64) > (params.n as f64).powf(1.0 - 1.0 / llog_lambda) {
            log::debug!("p = {p} is above N^(1 - 1/llog λ) for N = {}", params.n);
        }
        Ok(Geometry {
            n: params.n,
            p,
            tiering: l2c.tiering(),
            m: l2c.m,
            l2c,
            cap_ids,
            bin_words: ciphertext_len(8 * cap_ids) / 8,
            entry_bytes,
            entries_per_word: 8 / entry_bytes,
            len_entries: params.max_keywords.unwrap_or(params.n as usize).max(1),
            full_slots: params.full_slots.unwrap_or((params.n / p as u64) as usize),
            max_x,
        })
    }

    pub fn weight(&self, len: usize) -> Exact {
        Exact::from_ratio(len as u64, self.p as u64)
    }

    /// `max(1, ⌈ℓ/p⌉)`.
    pub fn pages_of(&self, len: usize) -> u64 {
        (len.div_ceil(self.p) as u64).max(1)
    }
}

pub fn ball_tag(token: &Tag, x: u64) -> Tag {
    ro_hash("ball", &[&token.0, &x.to_le_bytes()])
}

pub fn full_key(token: &Tag, j: u64) -> Tag {
    ro_hash("full", &[&token.0, &j.to_le_bytes()])
}

fn frag(tag: &Tag) -> u64 {
    tag.prefix_u64() & ((1 << FRAG_BITS) - 1)
}

fn miss_slot(domain: &str, key: &Tag, n: usize) -> usize {
    (ro_hash(domain, &[&key.0]).prefix_u64() % n.max(1) as u64) as usize
}

fn encode_bin_plain(bin: &Bin<Exact>) -> Vec<u64> {
    let mut out = Vec::new();
    for b in bin.balls() {
        out.push(b.id << (LEN_BITS + 1) | (b.payload.len() as u64) << 1 | b.residual as u64);
        out.extend_from_slice(&b.payload);
    }
    out
}

/// Plaintext words a bin occupies.
pub fn footprint(bin: &Bin<Exact>) -> usize {
    bin.balls().iter().map(|b| 1 + b.payload.len()).sum()
}

fn decode_bin_plain(words: &[u64], geo: &Geometry) -> Result<Bin<Exact>> {
    let mut bin = Bin::new();
    let mut i = 0;
    while i < words.len() {
        let h = words[i];
        let len = ((h >> 1) & ((1 << LEN_BITS) - 1)) as usize;
        let payload = words.get(i + 1..i + 1 + len).ok_or(Error::Malformed("bin"))?.to_vec();
        let weight = geo.weight(len);
        bin.push(Ball {
            id: h >> (LEN_BITS + 1),
            tier: geo.tiering.tier_of(weight)?,
            weight,
            payload,
            residual: h & 1 == 1,
        });
        i += 1 + len;
    }
    Ok(bin)
}

// ---------------------------------------------------------------- messages

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchQuery {
    pub token: Tag,
    pub mask: Vec<u8>,
}

pub type BinBlob = (u32, Vec<u64>);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchReply {
    pub x: u64,
    pub full_pages: Vec<Vec<u64>>,
    pub bins: Vec<BinBlob>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FetchReply {
    pub x: u64,
    pub registered_now: bool,
    pub bins: Vec<BinBlob>,
}

/// Second flow of an update: re-encrypted bins, the new `t_len` entry and an
/// optional full page `(j, words)` for `T_full[w‖j]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WriteFlow {
    pub token: Tag,
    pub entry: Vec<u8>,
    pub bins: Vec<BinBlob>,
    pub full_page: Option<(u64, Vec<u64>)>,
}

// ------------------------------------------------------------------ server

/// Setup output handed from client to server.
pub struct SetupImage {
    pub bins: Vec<Vec<u64>>,
    pub entries: Vec<(Tag, Vec<u8>)>,
    pub full_pages: Vec<(Tag, Vec<u64>)>,
}

pub struct LayeredServer {
    geo: Geometry,
    bins: Region,
    bin_stride: usize,
    t_len: Region,
    t_full: Region,
    full_stride: usize,
    len_dir: HashMap<Tag, usize>,
    full_dir: HashMap<Tag, usize>,
    next_full: usize,
}

impl LayeredServer {
    /// Lays out the tables in `store` and writes the setup image. Must run
    /// inside an open store operation.
    pub fn create<R: RngCore>(store: &mut PageStore, geo: Geometry, image: SetupImage, rng: &mut R) -> Result<Self> {
        let page = store.page_size();
        let bin_stride = geo.bin_words.div_ceil(page) * page;
        let full_stride = geo.p.div_ceil(page) * page;
        let bins = store.alloc_region(geo.m * bin_stride);
        let t_len = store.alloc_region(geo.len_entries.div_ceil(geo.entries_per_word));
        let t_full = store.alloc_region(geo.full_slots * full_stride);
        let mut s = LayeredServer {
            geo,
            bins,
            bin_stride,
            t_len,
            t_full,
            full_stride,
            len_dir: HashMap::new(),
            full_dir: HashMap::new(),
            next_full: 0,
        };
        if image.bins.len() != s.geo.m {
            return Err(Error::Protocol(format!("setup carries {} bins, expected {}", image.bins.len(), s.geo.m)));
        }
        let mut region = vec![0u64; s.geo.m * bin_stride];
        for (i, b) in image.bins.iter().enumerate() {
            if b.len() != s.geo.bin_words {
                return Err(Error::Protocol("bin ciphertext of wrong length".into()));
            }
            region[i * bin_stride..i * bin_stride + b.len()].copy_from_slice(b);
        }
        store.write(s.bins.start, &region)?;

        let mut len_bytes = vec![0u8; s.t_len.len * 8];
        rng.fill_bytes(&mut len_bytes);
        if image.entries.len() > s.geo.len_entries {
            return Err(Error::TableFull("length table"));
        }
        for (slot, (token, entry)) in image.entries.iter().enumerate() {
            let off = s.entry_offset(slot);
            len_bytes[off..off + entry.len()].copy_from_slice(entry);
            s.len_dir.insert(*token, slot);
        }
        store.write(s.t_len.start, &bytes_to_words(&len_bytes))?;

        if image.full_pages.len() > s.geo.full_slots {
            return Err(Error::TableFull("full-page table"));
        }
        let mut full = vec![0u64; s.t_full.len];
        for w in full.iter_mut() {
            *w = rng.next_u64();
        }
        for (key, page) in &image.full_pages {
            let slot = s.next_full;
            s.next_full += 1;
            full[slot * full_stride..slot * full_stride + page.len()].copy_from_slice(page);
            s.full_dir.insert(*key, slot);
        }
        store.write(s.t_full.start, &full)?;
        Ok(s)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geo
    }

    /// Words of the store occupied by this instance's tables.
    pub fn storage_words(&self, page: usize) -> usize {
        [self.bins, self.t_len, self.t_full]
            .iter()
            .map(|r| r.len.div_ceil(page).max(1) * page)
            .sum()
    }

    fn entry_offset(&self, slot: usize) -> usize {
        (slot / self.geo.entries_per_word) * 8 + (slot % self.geo.entries_per_word) * self.geo.entry_bytes
    }

    fn read_entry(&self, store: &mut PageStore, slot: usize) -> Result<Vec<u8>> {
        let word = slot / self.geo.entries_per_word;
        let w = store.read(self.t_len.start + word, 1)?[0].to_le_bytes();
        let off = (slot % self.geo.entries_per_word) * self.geo.entry_bytes;
        Ok(w[off..off + self.geo.entry_bytes].to_vec())
    }

    fn write_entry(&self, store: &mut PageStore, slot: usize, entry: &[u8]) -> Result<()> {
        if entry.len() != self.geo.entry_bytes {
            return Err(Error::Protocol("length entry of wrong size".into()));
        }
        let addr = self.t_len.start + slot / self.geo.entries_per_word;
        let mut w = store.read(addr, 1)?[0].to_le_bytes();
        let off = (slot % self.geo.entries_per_word) * self.geo.entry_bytes;
        w[off..off + entry.len()].copy_from_slice(entry);
        store.write(addr, &[u64::from_le_bytes(w)])?;
        Ok(())
    }

    fn unmask(&self, entry: &[u8], mask: &[u8]) -> u64 {
        let mut b = [0u8; 8];
        for (i, (e, m)) in entry.iter().zip(mask).enumerate() {
            b[i] = e ^ m;
        }
        u64::from_le_bytes(b).clamp(1, self.geo.max_x)
    }

    fn bin_addr(&self, i: usize) -> usize {
        self.bins.start + i * self.bin_stride
    }

    fn read_bins(&self, store: &mut PageStore, idx: &[usize]) -> Result<Vec<BinBlob>> {
        let mut out: Vec<BinBlob> = Vec::with_capacity(idx.len());
        for &i in idx {
            if out.iter().any(|(j, _)| *j as usize == i) {
                continue;
            }
            out.push((i as u32, store.read(self.bin_addr(i), self.geo.bin_words)?));
        }
        Ok(out)
    }

    fn check_mask(&self, q: &SearchQuery) -> Result<()> {
        if q.mask.len() != self.geo.entry_bytes {
            return Err(Error::Protocol("mask of wrong size".into()));
        }
        Ok(())
    }

    pub fn search(&self, store: &mut PageStore, q: &SearchQuery) -> Result<SearchReply> {
        self.check_mask(q)?;
        let slot = match self.len_dir.get(&q.token) {
            Some(&s) => s,
            None => miss_slot("len-miss", &q.token, self.geo.len_entries),
        };
        let x = self.unmask(&self.read_entry(store, slot)?, &q.mask);
        let mut full_pages = Vec::with_capacity(x as usize - 1);
        for j in 1..x {
            let key = full_key(&q.token, j);
            let slot = match self.full_dir.get(&key) {
                Some(&s) => s,
                None => miss_slot("full-miss", &key, self.geo.full_slots),
            };
            if self.geo.full_slots > 0 {
                full_pages.push(store.read(self.t_full.start + slot * self.full_stride, self.geo.p)?);
            }
        }
        let (a1, a2) = hash_choices(&ball_tag(&q.token, x), self.geo.m);
        Ok(SearchReply {
            x,
            full_pages,
            bins: self.read_bins(store, &[a1, a2])?,
        })
    }

    /// First flow of an update. Registers unseen keywords with `x = 1`.
    pub fn update_fetch(&mut self, store: &mut PageStore, q: &SearchQuery) -> Result<FetchReply> {
        self.check_mask(q)?;
        let (x, registered_now) = match self.len_dir.get(&q.token) {
            Some(&slot) => (self.unmask(&self.read_entry(store, slot)?, &q.mask), false),
            None => {
                let slot = self.len_dir.len();
                if slot >= self.geo.len_entries {
                    return Err(Error::TableFull("length table"));
                }
                let entry: Vec<u8> = 1u64.to_le_bytes()[..self.geo.entry_bytes]
                    .iter()
                    .zip(&q.mask)
                    .map(|(a, b)| a ^ b)
                    .collect();
                self.write_entry(store, slot, &entry)?;
                self.len_dir.insert(q.token, slot);
                (1, true)
            }
        };
        let (a1, a2) = hash_choices(&ball_tag(&q.token, x), self.geo.m);
        let (b1, b2) = hash_choices(&ball_tag(&q.token, x + 1), self.geo.m);
        Ok(FetchReply {
            x,
            registered_now,
            bins: self.read_bins(store, &[a1, a2, b1, b2])?,
        })
    }

    pub fn apply(&mut self, store: &mut PageStore, flow: &WriteFlow) -> Result<()> {
        let slot = *self.len_dir.get(&flow.token).ok_or(Error::UnknownKeyword)?;
        for (i, words) in &flow.bins {
            let i = *i as usize;
            if i >= self.geo.m || words.len() != self.geo.bin_words {
                return Err(Error::Protocol("bad bin in write flow".into()));
            }
            store.write(self.bin_addr(i), words)?;
        }
        self.write_entry(store, slot, &flow.entry)?;
        if let Some((j, page)) = &flow.full_page {
            if page.len() != self.geo.p {
                return Err(Error::Protocol("full page of wrong size".into()));
            }
            if self.next_full >= self.geo.full_slots {
                return Err(Error::TableFull("full-page table"));
            }
            let slot = self.next_full;
            self.next_full += 1;
            self.full_dir.insert(full_key(&flow.token, *j), slot);
            store.write(self.t_full.start + slot * self.full_stride, page)?;
        }
        Ok(())
    }

    /// Header `{magic, version, N, p, m, capacity_ids}` followed by the bins,
    /// `t_len` and `t_full` regions, each as a `u64` word count and raw words.
    pub fn export(&self, store: &PageStore) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(EDB_MAGIC);
        out.extend_from_slice(&EDB_VERSION.to_le_bytes());
        for v in [self.geo.n, self.geo.p as u64, self.geo.m as u64, self.geo.cap_ids as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in [self.bins, self.t_len, self.t_full] {
            out.extend_from_slice(&(r.len as u64).to_le_bytes());
            for w in &store.raw()[r.start..r.end()] {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdbHeader {
    pub version: u32,
    pub n: u64,
    pub p: u64,
    pub m: u64,
    pub cap_ids: u64,
}

impl EdbHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 40 || &bytes[..4] != EDB_MAGIC {
            return Err(Error::Protocol("not an encrypted index image".into()));
        }
        let u = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        Ok(EdbHeader {
            version: u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
            n: u(0),
            p: u(1),
            m: u(2),
            cap_ids: u(3),
        })
    }
}

// ------------------------------------------------------------------ client

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LseKeys {
    pub k_prf: PrfKey,
    pub k_enc: EncKey,
    pub k_full: EncKey,
}

impl LseKeys {
    pub fn keygen(seed: u64) -> Self {
        Self::from_tree(&KeyTree::new(seed))
    }

    pub fn from_tree(tree: &KeyTree) -> Self {
        LseKeys {
            k_prf: tree.prf_key("layered/prf"),
            k_enc: tree.enc_key("layered/enc"),
            k_full: tree.enc_key("layered/full"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Applied,
    Rejected,
}

/// Client-side logic, independent of how messages travel.
pub struct LayeredCore {
    keys: LseKeys,
    geo: Geometry,
    rng: ChaCha20Rng,
}

impl LayeredCore {
    pub fn new(keys: LseKeys, geo: Geometry, rng: ChaCha20Rng) -> Self {
        LayeredCore { keys, geo, rng }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geo
    }

    pub fn mask(&self, token: &Tag) -> Vec<u8> {
        let mut input = b"len-mask".to_vec();
        input.extend_from_slice(&token.0);
        prf(&self.keys.k_prf, &input).0[..self.geo.entry_bytes].to_vec()
    }

    fn entry(&self, token: &Tag, x: u64) -> Vec<u8> {
        x.to_le_bytes()[..self.geo.entry_bytes]
            .iter()
            .zip(self.mask(token))
            .map(|(a, b)| a ^ b)
            .collect()
    }

    pub fn query(&self, token: &Tag) -> SearchQuery {
        SearchQuery {
            token: *token,
            mask: self.mask(token),
        }
    }

    fn full_page_crypt(&self, token: &Tag, j: u64, page: &[u64]) -> Vec<u64> {
        let mut bytes = words_to_bytes(page, page.len() * 8);
        stream_xor(&self.keys.k_full, full_key(token, j).prefix_u64(), &mut bytes);
        bytes_to_words(&bytes)
    }

    fn encrypt_bin(&mut self, bin: &Bin<Exact>) -> Result<Vec<u64>> {
        let plain = encode_bin_plain(bin);
        let ct = encrypt_padded(&self.keys.k_enc, &words_to_bytes(&plain, plain.len() * 8), 8 * self.geo.cap_ids, &mut self.rng)?;
        Ok(bytes_to_words(&ct.bytes))
    }

    pub fn decrypt_bin(&self, words: &[u64]) -> Result<Bin<Exact>> {
        let plain = decrypt_padded(&self.keys.k_enc, &words_to_bytes(words, words.len() * 8))?;
        if plain.len() % 8 != 0 {
            return Err(Error::Malformed("bin"));
        }
        decode_bin_plain(&bytes_to_words(&plain), &self.geo)
    }

    /// Builds the server image for `db`, keywords in token order.
    pub fn build_image<'a, I>(&mut self, lists: I) -> Result<SetupImage>
    where
        I: IntoIterator<Item = (&'a Tag, &'a [u64])>,
    {
        let p = self.geo.p;
        let mut bins: Vec<Bin<Exact>> = vec![Bin::new(); self.geo.m];
        let mut entries = Vec::new();
        let mut full_pages = Vec::new();
        let mut total = 0u64;
        for (token, list) in lists {
            total += list.len() as u64;
            let x = self.geo.pages_of(list.len());
            for j in 1..x {
                let page = &list[(j as usize - 1) * p..j as usize * p];
                full_pages.push((full_key(token, j), self.full_page_crypt(token, j, page)));
            }
            let rem = &list[((x - 1) as usize * p).min(list.len())..];
            if !rem.is_empty() {
                let tag = ball_tag(token, x);
                let (a1, a2) = hash_choices(&tag, self.geo.m);
                let weight = self.geo.weight(rem.len());
                alloc::place(
                    &mut bins,
                    a1,
                    a2,
                    Ball {
                        id: frag(&tag),
                        tier: self.geo.tiering.tier_of(weight)?,
                        weight,
                        payload: rem.to_vec(),
                        residual: false,
                    },
                );
            }
            entries.push((*token, self.entry(token, x)));
        }
        if total > self.geo.n {
            return Err(Error::DatabaseTooLarge { total, n: self.geo.n });
        }
        if let Some(i) = bins.iter().position(|b| footprint(b) > self.geo.cap_ids) {
            return Err(Error::CapacityExceeded { what: "bin", index: i });
        }
        let bins = bins.iter().map(|b| self.encrypt_bin(b)).collect::<Result<_>>()?;
        Ok(SetupImage { bins, entries, full_pages })
    }

    pub fn finish_search(&self, token: &Tag, reply: &SearchReply) -> Result<Vec<u64>> {
        let mut ids = Vec::new();
        for (j, page) in reply.full_pages.iter().enumerate() {
            ids.extend(self.full_page_crypt(token, j as u64 + 1, page));
        }
        let id = frag(&ball_tag(token, reply.x));
        for (_, words) in &reply.bins {
            let bin = self.decrypt_bin(words)?;
            if let Some(pos) = bin.find_live(id) {
                ids.extend_from_slice(&bin.balls()[pos].payload);
                break;
            }
        }
        Ok(ids)
    }

    /// Second flow for adding `ids` (at most one page) to `token`.
    pub fn plan_update(&mut self, token: &Tag, reply: &FetchReply, ids: &[u64]) -> Result<(WriteFlow, Outcome)> {
        let p = self.geo.p;
        if ids.len() > p {
            return Err(Error::UpdateTooLarge { got: ids.len(), limit: p });
        }
        let x = reply.x;
        let index: Vec<usize> = reply.bins.iter().map(|(i, _)| *i as usize).collect();
        let local = |g: usize| index.iter().position(|&i| i == g).ok_or_else(|| Error::Protocol("missing bin".into()));
        let mut bins = reply.bins.iter().map(|(_, w)| self.decrypt_bin(w)).collect::<Result<Vec<_>>>()?;
        let original = bins.clone();

        let tag = ball_tag(token, x);
        let (g1, g2) = hash_choices(&tag, self.geo.m);
        let (l1, l2) = (local(g1)?, local(g2)?);
        let next = ball_tag(token, x + 1);
        let (h1, h2) = hash_choices(&next, self.geo.m);
        let (k1, k2) = (local(h1)?, local(h2)?);

        let id = frag(&tag);
        let found = alloc::find_live(&bins, l1, l2, id);
        let current: Vec<u64> = found.map(|(b, i)| bins[b].balls()[i].payload.clone()).unwrap_or_default();
        let mut new_x = x;
        let mut full_page = None;
        if ids.is_empty() {
        } else if current.len() + ids.len() <= p {
            let weight = self.geo.weight(current.len() + ids.len());
            if found.is_some() {
                alloc::grow(&mut bins, &self.geo.tiering, l1, l2, id, weight, ids)?;
            } else {
                let tier = self.geo.tiering.tier_of(weight)?;
                alloc::place(&mut bins, l1, l2, Ball { id, tier, weight, payload: ids.to_vec(), residual: false });
            }
        } else {
            let mut merged = current;
            merged.extend_from_slice(ids);
            if let Some((b, i)) = found {
                alloc::retire(&mut bins, b, i);
            }
            let rest = merged.split_off(p);
            full_page = Some((x, self.full_page_crypt(token, x, &merged)));
            let weight = self.geo.weight(rest.len());
            let tier = self.geo.tiering.tier_of(weight)?;
            alloc::place(&mut bins, k1, k2, Ball { id: frag(&next), tier, weight, payload: rest, residual: false });
            new_x = x + 1;
        }

        let mut outcome = Outcome::Applied;
        if bins.iter().any(|b| footprint(b) > self.geo.cap_ids) {
            bins = original;
            new_x = x;
            full_page = None;
            outcome = Outcome::Rejected;
        }
        let mut blobs = Vec::with_capacity(bins.len());
        for (g, b) in index.iter().zip(&bins) {
            blobs.push((*g as u32, self.encrypt_bin(b)?));
        }
        let flow = WriteFlow {
            token: *token,
            entry: self.entry(token, new_x),
            bins: blobs,
            full_page,
        };
        Ok((flow, outcome))
    }
}

// ----------------------------------------------------------------- service

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LseRequest {
    Search { pending: Option<WriteFlow>, query: SearchQuery },
    Fetch { pending: Option<WriteFlow>, query: SearchQuery },
    Write(WriteFlow),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LseResponse {
    Search(SearchReply),
    Fetch(FetchReply),
    Ack,
}

fn put_bins(e: &mut Encoder, bins: &[BinBlob]) {
    e.u32(bins.len() as u32);
    for (i, w) in bins {
        e.u32(*i).words(w);
    }
}

fn get_bins(d: &mut Decoder) -> Result<Vec<BinBlob>> {
    let n = d.u32()?;
    (0..n).map(|_| Ok((d.u32()?, d.words()?))).collect()
}

fn put_flow(e: &mut Encoder, f: &WriteFlow) {
    e.tag(&f.token).bytes(&f.entry);
    put_bins(e, &f.bins);
    match &f.full_page {
        Some((j, page)) => {
            e.u8(1).u64(*j).words(page);
        }
        None => {
            e.u8(0);
        }
    }
}

fn get_flow(d: &mut Decoder) -> Result<WriteFlow> {
    let token = d.tag()?;
    let entry = d.bytes()?;
    let bins = get_bins(d)?;
    let full_page = match d.u8()? {
        0 => None,
        _ => Some((d.u64()?, d.words()?)),
    };
    Ok(WriteFlow { token, entry, bins, full_page })
}

fn put_query(e: &mut Encoder, pending: &Option<WriteFlow>, q: &SearchQuery) {
    match pending {
        Some(f) => {
            e.u8(1);
            put_flow(e, f);
        }
        None => {
            e.u8(0);
        }
    }
    e.tag(&q.token).bytes(&q.mask);
}

fn get_query(d: &mut Decoder) -> Result<(Option<WriteFlow>, SearchQuery)> {
    let pending = match d.u8()? {
        0 => None,
        _ => Some(get_flow(d)?),
    };
    let token = d.tag()?;
    let mask = d.bytes()?;
    Ok((pending, SearchQuery { token, mask }))
}

impl Wire for LseRequest {
    fn encode(&self) -> Vec<u8> {
        match self {
            LseRequest::Search { pending, query } => {
                let mut e = Encoder::new(1);
                put_query(&mut e, pending, query);
                e.finish()
            }
            LseRequest::Fetch { pending, query } => {
                let mut e = Encoder::new(2);
                put_query(&mut e, pending, query);
                e.finish()
            }
            LseRequest::Write(f) => {
                let mut e = Encoder::new(3);
                put_flow(&mut e, f);
                e.finish()
            }
        }
    }

    fn decode(frame: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(frame)?;
        let req = match d.kind() {
            1 => {
                let (pending, query) = get_query(&mut d)?;
                LseRequest::Search { pending, query }
            }
            2 => {
                let (pending, query) = get_query(&mut d)?;
                LseRequest::Fetch { pending, query }
            }
            3 => LseRequest::Write(get_flow(&mut d)?),
            k => return Err(Error::Protocol(format!("unknown request kind {k}"))),
        };
        d.finish()?;
        Ok(req)
    }
}

impl Wire for LseResponse {
    fn encode(&self) -> Vec<u8> {
        match self {
            LseResponse::Search(r) => {
                let mut e = Encoder::new(0x81);
                e.u64(r.x).u32(r.full_pages.len() as u32);
                for p in &r.full_pages {
                    e.words(p);
                }
                put_bins(&mut e, &r.bins);
                e.finish()
            }
            LseResponse::Fetch(r) => {
                let mut e = Encoder::new(0x82);
                e.u64(r.x).u8(r.registered_now as u8);
                put_bins(&mut e, &r.bins);
                e.finish()
            }
            LseResponse::Ack => Encoder::new(0x83).finish(),
        }
    }

    fn decode(frame: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(frame)?;
        let resp = match d.kind() {
            0x81 => {
                let x = d.u64()?;
                let n = d.u32()?;
                let full_pages = (0..n).map(|_| d.words()).collect::<Result<_>>()?;
                let bins = get_bins(&mut d)?;
                LseResponse::Search(SearchReply { x, full_pages, bins })
            }
            0x82 => {
                let x = d.u64()?;
                let registered_now = d.u8()? == 1;
                let bins = get_bins(&mut d)?;
                LseResponse::Fetch(FetchReply { x, registered_now, bins })
            }
            0x83 => LseResponse::Ack,
            k => return Err(Error::Protocol(format!("unknown response kind {k}"))),
        };
        d.finish()?;
        Ok(resp)
    }
}

/// A server instance owning its own traced store.
pub struct LayeredService {
    store: PageStore,
    server: LayeredServer,
    metrics: Vec<(usize, OpMetrics)>,
}

impl LayeredService {
    pub fn create<R: RngCore>(geo: Geometry, image: SetupImage, rng: &mut R) -> Result<Self> {
        let mut store = PageStore::new(geo.p);
        let op = store.begin_op("setup")?;
        let server = LayeredServer::create(&mut store, geo, image, rng);
        store.end_op(op)?;
        Ok(LayeredService {
            store,
            server: server?,
            metrics: Vec::new(),
        })
    }

    pub fn store(&self) -> &PageStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut PageStore {
        &mut self.store
    }

    pub fn server(&self) -> &LayeredServer {
        &self.server
    }

    pub fn storage_words(&self) -> usize {
        self.store.total_words()
    }

    pub fn export(&self) -> Vec<u8> {
        self.server.export(&self.store)
    }

    fn run(&mut self, req: LseRequest) -> Result<LseResponse> {
        let (store, server) = (&mut self.store, &mut self.server);
        match req {
            LseRequest::Search { pending, query } => {
                if let Some(f) = pending {
                    server.apply(store, &f)?;
                }
                Ok(LseResponse::Search(server.search(store, &query)?))
            }
            LseRequest::Fetch { pending, query } => {
                if let Some(f) = pending {
                    server.apply(store, &f)?;
                }
                Ok(LseResponse::Fetch(server.update_fetch(store, &query)?))
            }
            LseRequest::Write(f) => {
                server.apply(store, &f)?;
                Ok(LseResponse::Ack)
            }
        }
    }
}

impl Service for LayeredService {
    type Req = LseRequest;
    type Resp = LseResponse;

    fn handle(&mut self, req: LseRequest) -> Result<LseResponse> {
        let label = match &req {
            LseRequest::Search { .. } => "search",
            LseRequest::Fetch { .. } => "update-fetch",
            LseRequest::Write(_) => "update-write",
        };
        let op = self.store.begin_op(label)?;
        let out = self.run(req);
        let m = self.store.end_op(op)?;
        self.metrics.push((self.store.page_size(), m));
        out
    }

    fn take_metrics(&mut self) -> Vec<(usize, OpMetrics)> {
        std::mem::take(&mut self.metrics)
    }
}

// ------------------------------------------------------------- full client

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RttMode {
    TwoRtt,
    /// The second flow of an update rides on the next request.
    Piggyback,
}

#[derive(Clone, Debug)]
pub struct SearchOutput {
    pub ids: Vec<u64>,
    pub metrics: OpMetrics,
}

#[derive(Clone, Debug)]
pub struct UpdateOutput {
    pub outcome: Outcome,
    pub registered_now: bool,
    /// Identifiers the scheme refused to store.
    pub clipped: Vec<u64>,
    pub metrics: OpMetrics,
}

pub struct LayeredClient<T: Transport<LseRequest, LseResponse>> {
    core: LayeredCore,
    transport: T,
    mode: RttMode,
    pending: Option<WriteFlow>,
    next_op: u64,
}

pub type LoopbackClient = LayeredClient<Loopback<LayeredService>>;

impl LoopbackClient {
    /// Keygen, setup and a loopback server in one step.
    pub fn setup(tree: &KeyTree, params: &LayeredParams, db: &Database) -> Result<Self> {
        let geo = params.geometry()?;
        let mut core = LayeredCore::new(LseKeys::from_tree(tree), geo.clone(), tree.rng("layered/client"));
        let image = core.build_image(db.iter())?;
        let service = LayeredService::create(geo, image, &mut tree.rng("layered/server"))?;
        Ok(LayeredClient::new(core, Loopback::new(service)))
    }
}

impl<T: Transport<LseRequest, LseResponse>> LayeredClient<T> {
    pub fn new(core: LayeredCore, transport: T) -> Self {
        LayeredClient {
            core,
            transport,
            mode: RttMode::TwoRtt,
            pending: None,
            next_op: 0,
        }
    }

    pub fn core(&self) -> &LayeredCore {
        &self.core
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn transcript(&self) -> &Transcript {
        self.transport.transcript()
    }

    pub fn set_rtt_mode(&mut self, mode: RttMode) -> Result<()> {
        if mode == RttMode::TwoRtt {
            self.flush()?;
        }
        self.mode = mode;
        Ok(())
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    fn collect(&mut self, label: &str) -> Result<OpMetrics> {
        let parts = self.transport.take_metrics()?;
        let id = self.next_op;
        self.next_op += 1;
        Ok(OpMetrics::combine(id, label, self.core.geo.p, &parts))
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = self.pending.take() {
            match self.transport.call(&LseRequest::Write(f))? {
                LseResponse::Ack => {}
                _ => return Err(Error::Protocol("expected ack".into())),
            }
            self.transport.take_metrics()?;
        }
        Ok(())
    }

    pub fn search(&mut self, token: &Tag) -> Result<SearchOutput> {
        let req = LseRequest::Search {
            pending: self.pending.take(),
            query: self.core.query(token),
        };
        let reply = match self.transport.call(&req)? {
            LseResponse::Search(r) => r,
            _ => return Err(Error::Protocol("expected search reply".into())),
        };
        let ids = self.core.finish_search(token, &reply)?;
        Ok(SearchOutput {
            ids,
            metrics: self.collect("search")?,
        })
    }

    fn update_once(&mut self, token: &Tag, ids: &[u64]) -> Result<(Outcome, bool)> {
        let req = LseRequest::Fetch {
            pending: self.pending.take(),
            query: self.core.query(token),
        };
        let reply = match self.transport.call(&req)? {
            LseResponse::Fetch(r) => r,
            _ => return Err(Error::Protocol("expected fetch reply".into())),
        };
        let (flow, outcome) = self.core.plan_update(token, &reply, ids)?;
        match self.mode {
            RttMode::TwoRtt => match self.transport.call(&LseRequest::Write(flow))? {
                LseResponse::Ack => {}
                _ => return Err(Error::Protocol("expected ack".into())),
            },
            RttMode::Piggyback => self.pending = Some(flow),
        }
        Ok((outcome, reply.registered_now))
    }

    /// Adds `ids` one page at a time; an empty list is a dummy update.
    pub fn update_add(&mut self, token: &Tag, ids: &[u64]) -> Result<UpdateOutput> {
        let p = self.core.geo.p;
        let mut outcome = Outcome::Applied;
        let mut registered_now = false;
        let chunks: Vec<&[u64]> = if ids.is_empty() { vec![ids] } else { ids.chunks(p).collect() };
        for (i, chunk) in chunks.into_iter().enumerate() {
            let (o, r) = self.update_once(token, chunk)?;
            if i == 0 {
                registered_now = r;
            }
            if o == Outcome::Rejected {
                outcome = Outcome::Rejected;
            }
        }
        Ok(UpdateOutput {
            outcome,
            registered_now,
            clipped: Vec::new(),
            metrics: self.collect("update")?,
        })
    }

    /// Consumes the client; a stashed write that was never flushed is an error.
    pub fn finish(mut self) -> Result<()> {
        match self.pending.take() {
            Some(_) => Err(Error::PendingLost),
            None => Ok(()),
        }
    }
}

impl<T: Transport<LseRequest, LseResponse>> Drop for LayeredClient<T> {
    fn drop(&mut self) {
        if self.pending.is_some() {
            log::warn!("layered client dropped with an unflushed pending write");
        }
    }
}
