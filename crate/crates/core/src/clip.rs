//! Clipped one-choice overflowing index.
//!
//! `m` buckets (a power of two) hold at most `τ` items each. The `i`-th
//! identifier of keyword `w` goes to bucket `Add(m, H(w), i)`; if that bucket
//! is full the identifier is clipped and handed back to the caller. A search
//! reads the aligned superbucket `Fetch(m, H(w), ℓ)`, one contiguous span.
//!
//! Items are `(tag fragment, id)` word pairs inside AEAD ciphertexts padded
//! to `τ` items. The per-keyword length table `T[w] = Enc_{K_w}(ℓ)` counts
//! every identifier ever added, clipped or not, and is shared with the local
//! transform.

use std::collections::{HashMap, VecDeque};
use std::ops::Range;

use rand::RngCore;
use rand_chacha::ChaCha20Rng;

use crate::crypto::{
    bytes_to_words, ciphertext_len, decrypt_padded, enc_key_from_tag, encrypt_padded, hash_choices, prf, ro_hash,
    words_to_bytes, EncKey, KeyTree, PrfKey, Tag,
};
use crate::db::Database;
use crate::error::{Error, Result};
use crate::layered::{Outcome, SearchOutput, UpdateOutput};
use crate::store::{OpMetrics, PageStore, Region};
use crate::wire::{Decoder, Encoder, Loopback, Service, Transcript, Transport, Wire};

/// Words of one encrypted length-table entry.
pub const LEN_ENTRY_WORDS: usize = ciphertext_len(8) / 8;

/// `log2 log2 max(n, 4)` as a real number.
pub fn loglog(n: u64) -> f64 {
    (n.max(4) as f64).log2().log2()
}

/// Superbucket of `m` buckets holding the first `len` items of a keyword
/// hashed to `h`. `len = 0` reads the singleton `{h}`.
pub fn oc_fetch(m: usize, h: usize, len: u64) -> Range<usize> {
    let lp = (len.max(1)).next_power_of_two();
    if lp >= m as u64 {
        return 0..m;
    }
    let lp = lp as usize;
    let start = h / lp * lp;
    start..start + lp
}

/// Bucket receiving the item with zero-based index `len`.
pub fn oc_add(m: usize, h: usize, len: u64) -> usize {
    let l = (len % m as u64) as usize;
    let lp = (l + 1).next_power_of_two();
    let i = h / lp;
    if (2 * h / lp) % 2 == 0 {
        lp * i + l
    } else {
        lp * i + l - lp / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipParams {
    pub n: u64,
    pub alpha: f64,
    /// Exponent of the longest-list bound `N / (log2 N)^d`.
    pub d: f64,
    /// Page size of the standalone store.
    pub page: usize,
    /// Length-table entries; defaults to `N`.
    pub max_keywords: Option<usize>,
    /// Sends every keyword to this bucket. Only for saturation tests.
    pub fixed_h: Option<usize>,
}

impl ClipParams {
    pub fn new(n: u64) -> Self {
        ClipParams {
            n,
            alpha: 4.0,
            d: 1.0,
            page: 16,
            max_keywords: None,
            fixed_h: None,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn geometry(&self) -> Result<ClipGeometry> {
        ClipGeometry::new(self)
    }
}

#[derive(Clone, Debug)]
pub struct ClipGeometry {
    pub n: u64,
    pub m: usize,
    pub tau: usize,
    pub bucket_words: usize,
    pub len_entries: usize,
    /// `⌊N / (log2 N)^d⌋`.
    pub longest: usize,
    pub page: usize,
    fixed_h: Option<usize>,
}

impl ClipGeometry {
    pub fn new(params: &ClipParams) -> Result<Self> {
        if params.n < 2 || params.page == 0 {
            return Err(Error::BadParams("N must be at least 2 and the page size positive".into()));
        }
        if !(params.alpha > 0.0) || !(params.d >= 0.0) {
            return Err(Error::BadParams("alpha must be positive and d non-negative".into()));
        }
        let n = params.n as f64;
        let m = 1usize << (n / loglog(params.n)).log2().ceil().max(0.0) as u32;
        if let Some(h) = params.fixed_h {
            if h >= m {
                return Err(Error::BadParams(format!("fixed bucket {h} outside [0, {m})")));
            }
        }
        let tau = (params.alpha * loglog(params.n)).ceil().max(1.0) as usize;
        Ok(ClipGeometry {
            n: params.n,
            m,
            tau,
            bucket_words: ciphertext_len(16 * tau) / 8,
            len_entries: params.max_keywords.unwrap_or(params.n as usize).max(1),
            longest: (n / n.log2().powf(params.d)).floor().max(1.0) as usize,
            page: params.page,
            fixed_h: params.fixed_h,
        })
    }

    pub fn h(&self, token: &Tag) -> usize {
        self.fixed_h.unwrap_or_else(|| hash_choices(&ro_hash("clip", &[&token.0]), self.m).0)
    }
}

fn item_frag(token: &Tag) -> u64 {
    ro_hash("clip-item", &[&token.0]).prefix_u64()
}

// ------------------------------------------------------------ length table

pub fn encrypt_length<R: RngCore>(key: &Tag, len: u64, rng: &mut R) -> Vec<u64> {
    let ct = encrypt_padded(&enc_key_from_tag(key), &len.to_le_bytes(), 8, rng).expect("fixed-size plaintext");
    bytes_to_words(&ct.bytes)
}

pub fn decrypt_length(key: &Tag, words: &[u64]) -> Result<u64> {
    let plain = decrypt_padded(&enc_key_from_tag(key), &words_to_bytes(words, words.len() * 8))?;
    Ok(u64::from_le_bytes(plain.try_into().map_err(|_| Error::Malformed("length entry"))?))
}

/// `T[w]`: fixed-size encrypted lengths, slots handed out in creation order.
pub struct LengthTable {
    region: Region,
    entries: usize,
    dir: HashMap<Tag, usize>,
}

impl LengthTable {
    /// Must run inside an open store operation.
    pub fn create<R: RngCore>(store: &mut PageStore, entries: usize, image: &[(Tag, Vec<u64>)], rng: &mut R) -> Result<Self> {
        if image.len() > entries {
            return Err(Error::TableFull("length table"));
        }
        let region = store.alloc_region(entries * LEN_ENTRY_WORDS);
        let mut words: Vec<u64> = (0..region.len).map(|_| rng.next_u64()).collect();
        let mut dir = HashMap::with_capacity(image.len());
        for (slot, (token, entry)) in image.iter().enumerate() {
            if entry.len() != LEN_ENTRY_WORDS {
                return Err(Error::Protocol("length entry of wrong size".into()));
            }
            words[slot * LEN_ENTRY_WORDS..(slot + 1) * LEN_ENTRY_WORDS].copy_from_slice(entry);
            dir.insert(*token, slot);
        }
        store.write(region.start, &words)?;
        Ok(LengthTable { region, entries, dir })
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn contains(&self, token: &Tag) -> bool {
        self.dir.contains_key(token)
    }

    pub fn len(&self) -> usize {
        self.dir.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dir.is_empty()
    }

    fn slot_or_miss(&self, token: &Tag) -> usize {
        match self.dir.get(token) {
            Some(&s) => s,
            None => (ro_hash("len-table-miss", &[&token.0]).prefix_u64() % self.entries as u64) as usize,
        }
    }

    /// Decrypts `T[w]` with `key`. An unknown keyword still reads one entry
    /// and yields `None`.
    pub fn read(&self, store: &mut PageStore, token: &Tag, key: &Tag) -> Result<Option<u64>> {
        let slot = self.slot_or_miss(token);
        let words = store.read(self.region.start + slot * LEN_ENTRY_WORDS, LEN_ENTRY_WORDS)?;
        if !self.contains(token) {
            return Ok(None);
        }
        decrypt_length(key, &words).map(Some)
    }

    /// Overwrites `T[w]`, registering `w` if new; returns whether it was new.
    pub fn write(&mut self, store: &mut PageStore, token: &Tag, entry: &[u64]) -> Result<bool> {
        if entry.len() != LEN_ENTRY_WORDS {
            return Err(Error::Protocol("length entry of wrong size".into()));
        }
        let (slot, new) = match self.dir.get(token) {
            Some(&s) => (s, false),
            None => {
                let s = self.dir.len();
                if s >= self.entries {
                    return Err(Error::TableFull("length table"));
                }
                self.dir.insert(*token, s);
                (s, true)
            }
        };
        store.write(self.region.start + slot * LEN_ENTRY_WORDS, entry)?;
        Ok(new)
    }
}

// ------------------------------------------------------------------ server

pub struct ClipServer {
    geo: ClipGeometry,
    buckets: Region,
    stride: usize,
}

impl ClipServer {
    /// Must run inside an open store operation.
    pub fn create(store: &mut PageStore, geo: ClipGeometry, buckets: &[Vec<u64>]) -> Result<Self> {
        let page = store.page_size();
        let stride = geo.bucket_words.div_ceil(page) * page;
        if buckets.len() != geo.m || buckets.iter().any(|b| b.len() != geo.bucket_words) {
            return Err(Error::Protocol("malformed bucket image".into()));
        }
        let region = store.alloc_region(geo.m * stride);
        let mut words = vec![0u64; region.len];
        for (i, b) in buckets.iter().enumerate() {
            words[i * stride..i * stride + b.len()].copy_from_slice(b);
        }
        store.write(region.start, &words)?;
        Ok(ClipServer { geo, buckets: region, stride })
    }

    pub fn geometry(&self) -> &ClipGeometry {
        &self.geo
    }

    pub fn region(&self) -> Region {
        self.buckets
    }

    /// Reads `Fetch(m, H(w), len)` as one span; returns its first index.
    pub fn fetch(&self, store: &mut PageStore, token: &Tag, len: u64) -> Result<(usize, Vec<Vec<u64>>)> {
        let r = oc_fetch(self.geo.m, self.geo.h(token), len);
        let words = store.read(self.buckets.start + r.start * self.stride, r.len() * self.stride)?;
        let buckets = words.chunks(self.stride).map(|c| c[..self.geo.bucket_words].to_vec()).collect();
        Ok((r.start, buckets))
    }

    pub fn read_bucket(&self, store: &mut PageStore, i: usize) -> Result<Vec<u64>> {
        Ok(store.read(self.buckets.start + i * self.stride, self.geo.bucket_words)?)
    }

    pub fn write_bucket(&self, store: &mut PageStore, i: usize, words: &[u64]) -> Result<()> {
        if i >= self.geo.m || words.len() != self.geo.bucket_words {
            return Err(Error::Protocol("bad bucket write".into()));
        }
        Ok(store.write(self.buckets.start + i * self.stride, words)?)
    }
}

// ------------------------------------------------------------------ client

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipKeys {
    pub k_prf: PrfKey,
    pub k_enc: EncKey,
}

impl ClipKeys {
    pub fn keygen(seed: u64) -> Self {
        Self::from_tree(&KeyTree::new(seed))
    }

    pub fn from_tree(tree: &KeyTree) -> Self {
        ClipKeys {
            k_prf: tree.prf_key("clip/prf"),
            k_enc: tree.enc_key("clip/enc"),
        }
    }
}

/// Identifiers of one keyword that did not fit; `len` is the keyword's total.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipRecord {
    pub token: Tag,
    pub len: usize,
    pub ids: Vec<u64>,
}

pub struct ClipImage {
    pub buckets: Vec<Vec<u64>>,
    pub lengths: Vec<(Tag, Vec<u64>)>,
}

pub type Items = Vec<(u64, u64)>;

/// Plaintext one-choice placement of whole lists, in iteration order.
pub fn allocate<'a, I>(geo: &ClipGeometry, lists: I) -> (Vec<Items>, Vec<ClipRecord>)
where
    I: IntoIterator<Item = (&'a Tag, &'a [u64])>,
{
    let mut buckets: Vec<Items> = vec![Vec::new(); geo.m];
    let mut clip = Vec::new();
    for (token, list) in lists {
        if list.len() > geo.longest {
            log::warn!("list of length {} exceeds the longest-list bound {}", list.len(), geo.longest);
        }
        let h = geo.h(token);
        let frag = item_frag(token);
        let mut clipped = Vec::new();
        for (i, &id) in list.iter().enumerate() {
            let b = &mut buckets[oc_add(geo.m, h, i as u64)];
            if b.len() < geo.tau {
                b.push((frag, id));
            } else {
                clipped.push(id);
            }
        }
        if !clipped.is_empty() {
            clip.push(ClipRecord {
                token: *token,
                len: list.len(),
                ids: clipped,
            });
        }
    }
    (buckets, clip)
}

pub struct ClipCore {
    keys: ClipKeys,
    geo: ClipGeometry,
    rng: ChaCha20Rng,
}

impl ClipCore {
    pub fn new(keys: ClipKeys, geo: ClipGeometry, rng: ChaCha20Rng) -> Self {
        ClipCore { keys, geo, rng }
    }

    pub fn geometry(&self) -> &ClipGeometry {
        &self.geo
    }

    /// Tag behind the per-keyword key `K_w`.
    pub fn length_key(&self, token: &Tag) -> Tag {
        let mut input = b"len-key".to_vec();
        input.extend_from_slice(&token.0);
        prf(&self.keys.k_prf, &input)
    }

    pub fn length_entry(&mut self, token: &Tag, len: u64) -> Vec<u64> {
        let key = self.length_key(token);
        encrypt_length(&key, len, &mut self.rng)
    }

    pub fn encrypt_bucket(&mut self, items: &[(u64, u64)]) -> Result<Vec<u64>> {
        let plain: Vec<u64> = items.iter().flat_map(|&(f, id)| [f, id]).collect();
        let ct = encrypt_padded(&self.keys.k_enc, &words_to_bytes(&plain, plain.len() * 8), 16 * self.geo.tau, &mut self.rng)?;
        Ok(bytes_to_words(&ct.bytes))
    }

    pub fn decrypt_bucket(&self, words: &[u64]) -> Result<Items> {
        let plain = decrypt_padded(&self.keys.k_enc, &words_to_bytes(words, words.len() * 8))?;
        if plain.len() % 16 != 0 {
            return Err(Error::Malformed("bucket"));
        }
        Ok(bytes_to_words(&plain).chunks_exact(2).map(|c| (c[0], c[1])).collect())
    }

    /// Encrypted buckets, length entries for every keyword, and the clip set.
    pub fn build_image<'a, I>(&mut self, lists: I) -> Result<(ClipImage, Vec<ClipRecord>)>
    where
        I: IntoIterator<Item = (&'a Tag, &'a [u64])>,
    {
        let lists: Vec<_> = lists.into_iter().collect();
        let (plain, clip) = allocate(&self.geo, lists.iter().copied());
        let buckets = plain.iter().map(|b| self.encrypt_bucket(b)).collect::<Result<_>>()?;
        let lengths = lists
            .into_iter()
            .map(|(t, l)| (*t, self.length_entry(t, l.len() as u64)))
            .collect();
        Ok((ClipImage { buckets, lengths }, clip))
    }

    /// Stored identifiers among the first `len` of `token`, in list order,
    /// from the superbucket starting at `start`.
    pub fn stored_ids(&self, token: &Tag, len: u64, start: usize, buckets: &[Vec<u64>]) -> Result<Vec<u64>> {
        let frag = item_frag(token);
        let mut queues: Vec<VecDeque<u64>> = Vec::with_capacity(buckets.len());
        for b in buckets {
            queues.push(self.decrypt_bucket(b)?.into_iter().filter(|(f, _)| *f == frag).map(|(_, id)| id).collect());
        }
        let h = self.geo.h(token);
        let mut ids = Vec::new();
        for i in 0..len {
            let b = oc_add(self.geo.m, h, i)
                .checked_sub(start)
                .filter(|&b| b < queues.len())
                .ok_or_else(|| Error::Protocol("superbucket does not cover the list".into()))?;
            if let Some(id) = queues[b].pop_front() {
                ids.push(id);
            }
        }
        Ok(ids)
    }

    /// New contents of bucket `Add(len)` after offering `id`; reports
    /// whether it was clipped. `None` re-encrypts the bucket unchanged.
    pub fn plan_add(&mut self, token: &Tag, blob: &[u64], id: Option<u64>) -> Result<(Vec<u64>, bool)> {
        let mut items = self.decrypt_bucket(blob)?;
        let mut clipped = false;
        if let Some(id) = id {
            if items.len() < self.geo.tau {
                items.push((item_frag(token), id));
            } else {
                clipped = true;
            }
        }
        Ok((self.encrypt_bucket(&items)?, clipped))
    }
}

// ----------------------------------------------------------------- service

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClipRequest {
    Search { token: Tag, key: Tag },
    Fetch { token: Tag, key: Tag },
    Write { token: Tag, bucket: u32, blob: Vec<u64>, entry: Vec<u64> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClipResponse {
    Search { len: Option<u64>, start: u32, buckets: Vec<Vec<u64>> },
    Fetch { len: u64, bucket: u32, blob: Vec<u64> },
    Ack { registered_now: bool },
}

impl Wire for ClipRequest {
    fn encode(&self) -> Vec<u8> {
        match self {
            ClipRequest::Search { token, key } => {
                let mut e = Encoder::new(0x11);
                e.tag(token).tag(key);
                e.finish()
            }
            ClipRequest::Fetch { token, key } => {
                let mut e = Encoder::new(0x12);
                e.tag(token).tag(key);
                e.finish()
            }
            ClipRequest::Write { token, bucket, blob, entry } => {
                let mut e = Encoder::new(0x13);
                e.tag(token).u32(*bucket).words(blob).words(entry);
                e.finish()
            }
        }
    }

    fn decode(frame: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(frame)?;
        let req = match d.kind() {
            0x11 => ClipRequest::Search { token: d.tag()?, key: d.tag()? },
            0x12 => ClipRequest::Fetch { token: d.tag()?, key: d.tag()? },
            0x13 => ClipRequest::Write {
                token: d.tag()?,
                bucket: d.u32()?,
                blob: d.words()?,
                entry: d.words()?,
            },
            k => return Err(Error::Protocol(format!("unknown request kind {k}"))),
        };
        d.finish()?;
        Ok(req)
    }
}

impl Wire for ClipResponse {
    fn encode(&self) -> Vec<u8> {
        match self {
            ClipResponse::Search { len, start, buckets } => {
                let mut e = Encoder::new(0x91);
                match len {
                    Some(l) => e.u8(1).u64(*l),
                    None => e.u8(0).u64(0),
                };
                e.u32(*start).u32(buckets.len() as u32);
                for b in buckets {
                    e.words(b);
                }
                e.finish()
            }
            ClipResponse::Fetch { len, bucket, blob } => {
                let mut e = Encoder::new(0x92);
                e.u64(*len).u32(*bucket).words(blob);
                e.finish()
            }
            ClipResponse::Ack { registered_now } => {
                let mut e = Encoder::new(0x93);
                e.u8(*registered_now as u8);
                e.finish()
            }
        }
    }

    fn decode(frame: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(frame)?;
        let resp = match d.kind() {
            0x91 => {
                let known = d.u8()? == 1;
                let l = d.u64()?;
                let start = d.u32()?;
                let n = d.u32()?;
                let buckets = (0..n).map(|_| d.words()).collect::<Result<_>>()?;
                ClipResponse::Search {
                    len: known.then_some(l),
                    start,
                    buckets,
                }
            }
            0x92 => ClipResponse::Fetch {
                len: d.u64()?,
                bucket: d.u32()?,
                blob: d.words()?,
            },
            0x93 => ClipResponse::Ack { registered_now: d.u8()? == 1 },
            k => return Err(Error::Protocol(format!("unknown response kind {k}"))),
        };
        d.finish()?;
        Ok(resp)
    }
}

/// Standalone server: buckets and length table in one traced store.
pub struct ClipService {
    store: PageStore,
    table: LengthTable,
    server: ClipServer,
    metrics: Vec<(usize, OpMetrics)>,
}

impl ClipService {
    pub fn create<R: RngCore>(geo: ClipGeometry, image: ClipImage, rng: &mut R) -> Result<Self> {
        let mut store = PageStore::new(geo.page);
        let op = store.begin_op("setup")?;
        let built = ClipServer::create(&mut store, geo.clone(), &image.buckets)
            .and_then(|server| Ok((LengthTable::create(&mut store, geo.len_entries, &image.lengths, rng)?, server)));
        store.end_op(op)?;
        let (table, server) = built?;
        Ok(ClipService {
            store,
            table,
            server,
            metrics: Vec::new(),
        })
    }

    pub fn store(&self) -> &PageStore {
        &self.store
    }

    pub fn server(&self) -> &ClipServer {
        &self.server
    }

    pub fn table(&self) -> &LengthTable {
        &self.table
    }

    pub fn storage_words(&self) -> usize {
        self.store.total_words()
    }

    fn run(&mut self, req: ClipRequest) -> Result<ClipResponse> {
        let store = &mut self.store;
        match req {
            ClipRequest::Search { token, key } => match self.table.read(store, &token, &key)? {
                Some(len) => {
                    let (start, buckets) = self.server.fetch(store, &token, len)?;
                    Ok(ClipResponse::Search {
                        len: Some(len),
                        start: start as u32,
                        buckets,
                    })
                }
                None => Ok(ClipResponse::Search {
                    len: None,
                    start: 0,
                    buckets: Vec::new(),
                }),
            },
            ClipRequest::Fetch { token, key } => {
                let len = self.table.read(store, &token, &key)?.unwrap_or(0);
                let bucket = oc_add(self.server.geo.m, self.server.geo.h(&token), len);
                Ok(ClipResponse::Fetch {
                    len,
                    bucket: bucket as u32,
                    blob: self.server.read_bucket(store, bucket)?,
                })
            }
            ClipRequest::Write { token, bucket, blob, entry } => {
                self.server.write_bucket(store, bucket as usize, &blob)?;
                let registered_now = self.table.write(store, &token, &entry)?;
                Ok(ClipResponse::Ack { registered_now })
            }
        }
    }
}

impl Service for ClipService {
    type Req = ClipRequest;
    type Resp = ClipResponse;

    fn handle(&mut self, req: ClipRequest) -> Result<ClipResponse> {
        let label = match &req {
            ClipRequest::Search { .. } => "search",
            ClipRequest::Fetch { .. } => "update-fetch",
            ClipRequest::Write { .. } => "update-write",
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

pub struct ClipClient<T: Transport<ClipRequest, ClipResponse>> {
    core: ClipCore,
    transport: T,
    next_op: u64,
}

pub type ClipLoopbackClient = ClipClient<Loopback<ClipService>>;

impl ClipLoopbackClient {
    /// Keygen, setup and a loopback server; also returns the setup clip set.
    pub fn setup(tree: &KeyTree, params: &ClipParams, db: &Database) -> Result<(Self, Vec<ClipRecord>)> {
        let geo = params.geometry()?;
        let mut core = ClipCore::new(ClipKeys::from_tree(tree), geo.clone(), tree.rng("clip/client"));
        let (image, clip) = core.build_image(db.iter())?;
        let service = ClipService::create(geo, image, &mut tree.rng("clip/server"))?;
        Ok((ClipClient::new(core, Loopback::new(service)), clip))
    }
}

impl<T: Transport<ClipRequest, ClipResponse>> ClipClient<T> {
    pub fn new(core: ClipCore, transport: T) -> Self {
        ClipClient { core, transport, next_op: 0 }
    }

    pub fn core(&self) -> &ClipCore {
        &self.core
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transcript(&self) -> &Transcript {
        self.transport.transcript()
    }

    fn collect(&mut self, label: &str) -> Result<OpMetrics> {
        let parts = self.transport.take_metrics()?;
        let id = self.next_op;
        self.next_op += 1;
        Ok(OpMetrics::combine(id, label, self.core.geo.page, &parts))
    }

    /// Stored identifiers of `token`, clipped ones excluded.
    pub fn search(&mut self, token: &Tag) -> Result<SearchOutput> {
        let req = ClipRequest::Search {
            token: *token,
            key: self.core.length_key(token),
        };
        let resp = self.transport.call(&req)?;
        let metrics = self.collect("search")?;
        match resp {
            ClipResponse::Search { len: Some(len), start, buckets } => Ok(SearchOutput {
                ids: self.core.stored_ids(token, len, start as usize, &buckets)?,
                metrics,
            }),
            ClipResponse::Search { len: None, .. } => Err(Error::UnknownKeyword),
            _ => Err(Error::Protocol("expected search reply".into())),
        }
    }

    fn add_one(&mut self, token: &Tag, id: Option<u64>) -> Result<(bool, bool)> {
        let key = self.core.length_key(token);
        let (len, bucket, blob) = match self.transport.call(&ClipRequest::Fetch { token: *token, key })? {
            ClipResponse::Fetch { len, bucket, blob } => (len, bucket, blob),
            _ => return Err(Error::Protocol("expected fetch reply".into())),
        };
        let (blob, clipped) = self.core.plan_add(token, &blob, id)?;
        let entry = self.core.length_entry(token, len + id.is_some() as u64);
        match self.transport.call(&ClipRequest::Write { token: *token, bucket, blob, entry })? {
            ClipResponse::Ack { registered_now } => Ok((clipped, registered_now)),
            _ => Err(Error::Protocol("expected ack".into())),
        }
    }

    /// One bucket round trip per identifier; an empty list runs one dummy
    /// round that registers the keyword.
    pub fn update_add(&mut self, token: &Tag, ids: &[u64]) -> Result<UpdateOutput> {
        let mut clipped = Vec::new();
        let mut registered_now = false;
        if ids.is_empty() {
            registered_now = self.add_one(token, None)?.1;
        }
        for (i, &id) in ids.iter().enumerate() {
            let (c, r) = self.add_one(token, Some(id))?;
            if c {
                clipped.push(id);
            }
            if i == 0 {
                registered_now = r;
            }
        }
        Ok(UpdateOutput {
            outcome: Outcome::Applied,
            registered_now,
            clipped,
            metrics: self.collect("update")?,
        })
    }
}
