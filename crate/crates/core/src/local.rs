//! Local transform: a clipped one-choice index for the bulk plus one layered
//! index per power-of-two list size for the clipped identifiers.
//!
//! A keyword of current length `ℓ` keeps its overflow set in layer
//! `level_of(ℓ)`, whose page size is `2^level`. Every keyword is registered
//! in its level's layer, so its layer list always fits one page and a layer
//! search has the same shape for every keyword of that level. When `ℓ`
//! crosses a power of two the overflow set migrates one layer up; the old
//! copy is left behind and never read again.
//!
//! All structures share one traced store. The protocol runs in process: a
//! search is one server round, an update three.

use crate::alloc::DeltaMode;
use crate::clip::{ClipCore, ClipGeometry, ClipKeys, ClipParams, ClipRecord, ClipServer, LengthTable};
use crate::crypto::{KeyTree, Tag};
use crate::db::Database;
use crate::error::{Error, Result};
use crate::layered::{
    FetchReply, Geometry, LayeredCore, LayeredParams, LayeredServer, LseKeys, Outcome, SearchOutput, SearchQuery,
    SearchReply, UpdateOutput,
};
use crate::store::{OpMetrics, PageStore};

/// `⌈log2 max(ℓ, 1)⌉`.
pub fn level_of(len: u64) -> usize {
    let l = len.max(1);
    (64 - (l - 1).leading_zeros()) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalParams {
    pub n: u64,
    /// Page size of the shared store.
    pub page: usize,
    pub alpha: f64,
    pub d: f64,
    pub lambda: u64,
    pub delta_mode: DeltaMode,
    pub load_const: f64,
    /// Keywords each table can hold; defaults to `N`.
    pub max_keywords: Option<usize>,
    /// Forces every keyword to one clip bucket. Only for tests.
    pub fixed_h: Option<usize>,
}

impl LocalParams {
    pub fn new(n: u64, page: usize) -> Self {
        LocalParams {
            n,
            page,
            alpha: 4.0,
            d: 1.0,
            lambda: 128,
            delta_mode: DeltaMode::LogLogLog,
            load_const: 4.0,
            max_keywords: None,
            fixed_h: None,
        }
    }

    pub fn geometry(&self) -> Result<LocalGeometry> {
        LocalGeometry::new(self)
    }
}

#[derive(Clone, Debug)]
pub struct LocalGeometry {
    pub n: u64,
    pub page: usize,
    /// Highest layer index; layers are `0..=n_level`.
    pub n_level: usize,
    /// Capacity `⌈N / log2 N⌉` of each layer.
    pub layer_n: u64,
    pub clip: ClipGeometry,
    pub layers: Vec<Geometry>,
}

impl LocalGeometry {
    pub fn new(params: &LocalParams) -> Result<Self> {
        if params.n < 4 {
            return Err(Error::BadParams("N must be at least 4".into()));
        }
        let n_level = level_of(params.n);
        let layer_n = params.n.div_ceil(n_level as u64);
        let keywords = params.max_keywords.unwrap_or(params.n as usize);
        let clip = ClipParams {
            n: params.n,
            alpha: params.alpha,
            d: params.d,
            page: params.page,
            max_keywords: Some(keywords),
            fixed_h: params.fixed_h,
        }
        .geometry()?;
        let layers = (0..=n_level)
            .map(|i| {
                LayeredParams {
                    n: layer_n,
                    p: 1 << i,
                    lambda: params.lambda,
                    delta_mode: params.delta_mode,
                    load_const: params.load_const,
                    max_keywords: Some(keywords),
                    full_slots: None,
                }
                .geometry()
            })
            .collect::<Result<_>>()?;
        Ok(LocalGeometry {
            n: params.n,
            page: params.page,
            n_level,
            layer_n,
            clip,
            layers,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalKeys {
    pub clip: ClipKeys,
    pub layers: Vec<LseKeys>,
}

impl LocalKeys {
    pub fn from_tree(tree: &KeyTree, n_level: usize) -> Self {
        LocalKeys {
            clip: ClipKeys::from_tree(&tree.child("clip")),
            layers: (0..=n_level).map(|i| LseKeys::from_tree(&tree.child(&format!("layer{i}")))).collect(),
        }
    }
}

pub struct LocalServer {
    store: PageStore,
    table: LengthTable,
    clip: ClipServer,
    layers: Vec<LayeredServer>,
}

impl LocalServer {
    pub fn store(&self) -> &PageStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut PageStore {
        &mut self.store
    }

    pub fn storage_words(&self) -> usize {
        self.store.total_words()
    }

    /// Words of the clip buckets, the length table and each layer.
    pub fn storage_breakdown(&self) -> (usize, usize, Vec<usize>) {
        let page = self.store.page_size();
        let round = |w: usize| w.div_ceil(page) * page;
        (
            round(self.clip.region().len),
            round(self.table.region().len),
            self.layers.iter().map(|l| l.storage_words(page)).collect(),
        )
    }
}

/// Reply to the single search round.
struct SearchRound {
    len: Option<u64>,
    start: usize,
    buckets: Vec<Vec<u64>>,
    layer: SearchReply,
}

pub struct LocalClient {
    geo: LocalGeometry,
    clip: ClipCore,
    layers: Vec<LayeredCore>,
    server: LocalServer,
    next_op: u64,
}

impl LocalClient {
    /// Keygen, setup and an in-process server; also returns the clip set.
    pub fn setup(tree: &KeyTree, params: &LocalParams, db: &Database) -> Result<(Self, Vec<ClipRecord>)> {
        let geo = params.geometry()?;
        let keys = LocalKeys::from_tree(tree, geo.n_level);
        let mut clip = ClipCore::new(keys.clip, geo.clip.clone(), tree.rng("local/clip"));
        let mut layers: Vec<LayeredCore> = keys
            .layers
            .into_iter()
            .zip(&geo.layers)
            .enumerate()
            .map(|(i, (k, g))| LayeredCore::new(k, g.clone(), tree.rng(&format!("local/layer{i}"))))
            .collect();

        if db.total_ids() > geo.n {
            return Err(Error::DatabaseTooLarge { total: db.total_ids(), n: geo.n });
        }
        let (clip_image, records) = clip.build_image(db.iter())?;
        let mut per_layer: Vec<Vec<(Tag, Vec<u64>)>> = vec![Vec::new(); geo.n_level + 1];
        let mut r = records.iter().peekable();
        for (t, list) in db.iter() {
            let overflow = match r.peek() {
                Some(rec) if rec.token == *t => r.next().unwrap().ids.clone(),
                _ => Vec::new(),
            };
            per_layer[level_of(list.len() as u64)].push((*t, overflow));
        }
        let mut images = Vec::with_capacity(layers.len());
        for (core, lists) in layers.iter_mut().zip(&per_layer) {
            images.push(core.build_image(lists.iter().map(|(t, l)| (t, l.as_slice())))?);
        }

        let mut rng = tree.rng("local/server");
        let mut store = PageStore::new(geo.page);
        let op = store.begin_op("setup")?;
        let built = (|| -> Result<LocalServer> {
            let clip_server = ClipServer::create(&mut store, geo.clip.clone(), &clip_image.buckets)?;
            let table = LengthTable::create(&mut store, geo.clip.len_entries, &clip_image.lengths, &mut rng)?;
            let mut servers = Vec::with_capacity(images.len());
            for (g, image) in geo.layers.iter().zip(images) {
                servers.push(LayeredServer::create(&mut store, g.clone(), image, &mut rng)?);
            }
            Ok(LocalServer {
                store: PageStore::new(1),
                table,
                clip: clip_server,
                layers: servers,
            })
        })();
        store.end_op(op)?;
        let mut server = built?;
        server.store = store;
        Ok((
            LocalClient {
                geo,
                clip,
                layers,
                server,
                next_op: 0,
            },
            records,
        ))
    }

    pub fn geometry(&self) -> &LocalGeometry {
        &self.geo
    }

    pub fn server(&self) -> &LocalServer {
        &self.server
    }

    pub fn server_mut(&mut self) -> &mut LocalServer {
        &mut self.server
    }

    fn round<T>(&mut self, label: &str, f: impl FnOnce(&mut LocalServer) -> Result<T>) -> Result<(T, OpMetrics)> {
        let op = self.server.store.begin_op(label)?;
        let out = f(&mut self.server);
        let m = self.server.store.end_op(op)?;
        Ok((out?, m))
    }

    /// Reads layer `level` directly, skipping the length table. For
    /// inspecting where a keyword's overflow lives.
    pub fn layer_search(&mut self, level: usize, token: &Tag) -> Result<Vec<u64>> {
        let q = self.layers[level].query(token);
        let (reply, _) = self.round("inspect", |s| s.layers[level].search(&mut s.store, &q))?;
        self.layers[level].finish_search(token, &reply)
    }

    fn queries(&self, token: &Tag) -> Vec<SearchQuery> {
        self.layers.iter().map(|l| l.query(token)).collect()
    }

    pub fn search(&mut self, token: &Tag) -> Result<SearchOutput> {
        let key = self.clip.length_key(token);
        let queries = self.queries(token);
        let (reply, m) = self.round("search", |s| {
            let len = s.table.read(&mut s.store, token, &key)?;
            let l = len.unwrap_or(0);
            let (start, buckets) = s.clip.fetch(&mut s.store, token, l)?;
            let level = level_of(l);
            let layer = s.layers[level].search(&mut s.store, &queries[level])?;
            Ok(SearchRound { len, start, buckets, layer })
        })?;
        let id = self.next_op;
        self.next_op += 1;
        let metrics = OpMetrics::combine(id, "search", self.geo.page, &[m]);
        let Some(len) = reply.len else {
            return Ok(SearchOutput { ids: Vec::new(), metrics });
        };
        let mut ids = self.clip.stored_ids(token, len, reply.start, &reply.buckets)?;
        ids.extend(self.layers[level_of(len)].finish_search(token, &reply.layer)?);
        Ok(SearchOutput { ids, metrics })
    }

    /// Adds one identifier, or runs a dummy round that registers `token`.
    fn update_one(&mut self, token: &Tag, e: Option<u64>, parts: &mut Vec<OpMetrics>) -> Result<(bool, bool)> {
        let key = self.clip.length_key(token);
        let ((len, registered_now, bucket, blob), m1) = self.round("update-clip", |s| {
            let len = s.table.read(&mut s.store, token, &key)?;
            let l = len.unwrap_or(0);
            let b = crate::clip::oc_add(s.clip.geometry().m, s.clip.geometry().h(token), l);
            Ok((l, len.is_none(), b, s.clip.read_bucket(&mut s.store, b)?))
        })?;
        parts.push(m1);

        let (blob, clipped) = self.clip.plan_add(token, &blob, e)?;
        let new_len = len + e.is_some() as u64;
        let entry = self.clip.length_entry(token, new_len);
        let (i, j) = (level_of(len), level_of(new_len));
        let q_j = self.layers[j].query(token);
        let q_i = (i != j).then(|| self.layers[i].query(token));
        let ((fetch, old), m2) = self.round("update-layer-fetch", |s| {
            s.clip.write_bucket(&mut s.store, bucket, &blob)?;
            s.table.write(&mut s.store, token, &entry)?;
            let fetch: FetchReply = s.layers[j].update_fetch(&mut s.store, &q_j)?;
            let old = match &q_i {
                Some(q) => Some(s.layers[i].search(&mut s.store, q)?),
                None => None,
            };
            Ok((fetch, old))
        })?;
        parts.push(m2);

        let mut ids = match &old {
            Some(r) => self.layers[i].finish_search(token, r)?,
            None => Vec::new(),
        };
        if clipped {
            ids.push(e.unwrap());
        }
        let (flow, outcome) = self.layers[j].plan_update(token, &fetch, &ids)?;
        let ((), m3) = self.round("update-layer-write", |s| s.layers[j].apply(&mut s.store, &flow))?;
        parts.push(m3);
        if outcome == Outcome::Rejected {
            return Err(Error::UpdateRejected);
        }
        Ok((clipped, registered_now))
    }

    /// Adds `ids` one at a time; an empty list is a dummy update.
    pub fn update_add(&mut self, token: &Tag, ids: &[u64]) -> Result<UpdateOutput> {
        let mut parts = Vec::new();
        let mut registered_now = false;
        if ids.is_empty() {
            registered_now = self.update_one(token, None, &mut parts)?.1;
        }
        for (k, &e) in ids.iter().enumerate() {
            let (_, r) = self.update_one(token, Some(e), &mut parts)?;
            if k == 0 {
                registered_now = r;
            }
        }
        let id = self.next_op;
        self.next_op += 1;
        Ok(UpdateOutput {
            outcome: Outcome::Applied,
            registered_now,
            // overflow goes to a layer, so nothing is refused
            clipped: Vec::new(),
            metrics: OpMetrics::combine(id, "update", self.geo.page, &parts),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_table() {
        assert_eq!(level_of(0), 0);
        assert_eq!(level_of(1), 0);
        assert_eq!(level_of(2), 1);
        assert_eq!(level_of(3), 2);
        assert_eq!(level_of(5), 3);
        assert_eq!(level_of(6), 3);
        assert_eq!(level_of(20), 5);
        for k in 0..40 {
            assert_eq!(level_of(1 << k), k);
        }
    }

    #[test]
    fn geometry_layers() {
        let g = LocalParams::new(1 << 16, 16).geometry().unwrap();
        assert_eq!(g.n_level, 16);
        assert_eq!(g.layer_n, 4096);
        assert_eq!(g.layers.len(), 17);
        assert!(g.layers.iter().enumerate().all(|(i, l)| l.p == 1 << i));
    }
}
