//! Common interface of the dynamic schemes and delete support through a
//! pair of add-only instances.

use std::collections::BTreeSet;

use crate::clip::{ClipLoopbackClient, ClipParams};
use crate::crypto::{KeyTree, Tag};
use crate::db::Database;
use crate::error::Result;
use crate::layered::{LayeredClient, LayeredParams, LoopbackClient, Outcome, SearchOutput, UpdateOutput};
use crate::local::{LocalClient, LocalParams};
use crate::store::OpMetrics;

/// Add-only dynamic searchable encryption.
pub trait DynamicSse {
    fn search(&mut self, token: &Tag) -> Result<SearchOutput>;
    /// Appends `ids`; an empty list still runs a full (dummy) update.
    fn update_add(&mut self, token: &Tag, ids: &[u64]) -> Result<UpdateOutput>;
    fn flush(&mut self) -> Result<()>;
    /// Words of server memory holding the encrypted index.
    fn storage_words(&self) -> usize;
    fn page_size(&self) -> usize;
}

impl DynamicSse for LoopbackClient {
    fn search(&mut self, token: &Tag) -> Result<SearchOutput> {
        LayeredClient::search(self, token)
    }

    fn update_add(&mut self, token: &Tag, ids: &[u64]) -> Result<UpdateOutput> {
        LayeredClient::update_add(self, token, ids)
    }

    fn flush(&mut self) -> Result<()> {
        LayeredClient::flush(self)
    }

    fn storage_words(&self) -> usize {
        self.transport().service().storage_words()
    }

    fn page_size(&self) -> usize {
        self.core().geometry().p
    }
}

impl DynamicSse for ClipLoopbackClient {
    fn search(&mut self, token: &Tag) -> Result<SearchOutput> {
        ClipLoopbackClient::search(self, token)
    }

    fn update_add(&mut self, token: &Tag, ids: &[u64]) -> Result<UpdateOutput> {
        ClipLoopbackClient::update_add(self, token, ids)
    }

    fn flush(&mut self) -> Result<()> {
        Ok(())
    }

    fn storage_words(&self) -> usize {
        self.transport().service().storage_words()
    }

    fn page_size(&self) -> usize {
        self.core().geometry().page
    }
}

impl DynamicSse for LocalClient {
    fn search(&mut self, token: &Tag) -> Result<SearchOutput> {
        LocalClient::search(self, token)
    }

    fn update_add(&mut self, token: &Tag, ids: &[u64]) -> Result<UpdateOutput> {
        LocalClient::update_add(self, token, ids)
    }

    fn flush(&mut self) -> Result<()> {
        Ok(())
    }

    fn storage_words(&self) -> usize {
        self.server().storage_words()
    }

    fn page_size(&self) -> usize {
        self.geometry().page
    }
}

/// Metrics of one logical operation spread over two servers.
#[derive(Clone, Debug)]
pub struct TwinMetrics {
    pub add: Vec<OpMetrics>,
    pub del: Vec<OpMetrics>,
}

impl TwinMetrics {
    fn all(&self) -> impl Iterator<Item = &OpMetrics> {
        self.add.iter().chain(self.del.iter())
    }

    /// Disjoint intervals summed over both servers.
    pub fn locality(&self) -> usize {
        self.all().map(|m| m.locality).sum()
    }

    pub fn read_words(&self) -> usize {
        self.all().map(|m| m.read_words).sum()
    }

    pub fn pages(&self) -> usize {
        self.all().map(|m| m.pages_touched).sum()
    }
}

#[derive(Clone, Debug)]
pub struct TwinSearch {
    /// Sorted, distinct, deleted ids removed.
    pub ids: Vec<u64>,
    pub metrics: TwinMetrics,
}

#[derive(Clone, Debug)]
pub struct TwinUpdate {
    pub outcome: Outcome,
    /// Identifiers the acting side refused to store.
    pub clipped: Vec<u64>,
    pub metrics: TwinMetrics,
}

/// Deletes via a second instance holding deleted ids; search returns the
/// difference. A keyword registered on one side is registered on the other
/// with an empty update, so both sides always know the same keywords.
pub struct Twin<S> {
    pub add: S,
    pub del: S,
}

/// Every keyword of `db` with an empty list, for the delete side.
pub fn registration_db(db: &Database) -> Database {
    let mut out = Database::new();
    for t in db.keywords() {
        out.insert(*t, Vec::new());
    }
    out
}

impl Twin<LoopbackClient> {
    /// Two independently keyed layered instances; the delete side starts
    /// with every keyword of `db` registered and empty.
    pub fn setup_layered(tree: &KeyTree, params: &LayeredParams, db: &Database) -> Result<Self> {
        let add = LoopbackClient::setup(&tree.child("add"), params, db)?;
        let del = LoopbackClient::setup(&tree.child("del"), params, &registration_db(db))?;
        Ok(Twin::new(add, del))
    }
}

impl Twin<LocalClient> {
    pub fn setup_local(tree: &KeyTree, params: &LocalParams, db: &Database) -> Result<Self> {
        let (add, _) = LocalClient::setup(&tree.child("add"), params, db)?;
        let (del, _) = LocalClient::setup(&tree.child("del"), params, &registration_db(db))?;
        Ok(Twin::new(add, del))
    }
}

impl Twin<ClipLoopbackClient> {
    /// Returns the setup clip set of the add side as well.
    pub fn setup_clip(tree: &KeyTree, params: &ClipParams, db: &Database) -> Result<(Self, Vec<crate::clip::ClipRecord>)> {
        let (add, clip) = ClipLoopbackClient::setup(&tree.child("add"), params, db)?;
        let (del, _) = ClipLoopbackClient::setup(&tree.child("del"), params, &registration_db(db))?;
        Ok((Twin::new(add, del), clip))
    }
}

impl<S: DynamicSse> Twin<S> {
    pub fn new(add: S, del: S) -> Self {
        Twin { add, del }
    }

    pub fn search(&mut self, token: &Tag) -> Result<TwinSearch> {
        let a = self.add.search(token)?;
        let d = self.del.search(token)?;
        let deleted: BTreeSet<u64> = d.ids.iter().copied().collect();
        let ids: BTreeSet<u64> = a.ids.iter().copied().filter(|i| !deleted.contains(i)).collect();
        Ok(TwinSearch {
            ids: ids.into_iter().collect(),
            metrics: TwinMetrics {
                add: vec![a.metrics],
                del: vec![d.metrics],
            },
        })
    }

    pub fn add(&mut self, token: &Tag, ids: &[u64]) -> Result<TwinUpdate> {
        let a = self.add.update_add(token, ids)?;
        let mut metrics = TwinMetrics { add: vec![a.metrics], del: vec![] };
        if a.registered_now {
            metrics.del.push(self.del.update_add(token, &[])?.metrics);
        }
        Ok(TwinUpdate { outcome: a.outcome, clipped: a.clipped, metrics })
    }

    pub fn delete(&mut self, token: &Tag, ids: &[u64]) -> Result<TwinUpdate> {
        let d = self.del.update_add(token, ids)?;
        let mut metrics = TwinMetrics { add: vec![], del: vec![d.metrics] };
        if d.registered_now {
            metrics.add.push(self.add.update_add(token, &[])?.metrics);
        }
        Ok(TwinUpdate { outcome: d.outcome, clipped: d.clipped, metrics })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.add.flush()?;
        self.del.flush()
    }

    pub fn storage_words(&self) -> usize {
        self.add.storage_words() + self.del.storage_words()
    }
}
