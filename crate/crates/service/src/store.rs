use std::collections::{HashSet, VecDeque};
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use lru::LruCache;

use crate::Session;

pub type Entry = Arc<Mutex<Session>>;

/// How many evicted ids are remembered for the `gone` answer.
const TOMBSTONES: usize = 4096;

pub enum Lookup {
    Found(Entry, u64),
    Gone,
    Unknown,
}

struct Inner {
    live: LruCache<String, (Entry, u64)>,
    evicted: HashSet<String>,
    evicted_order: VecDeque<String>,
}

/// Bounded session map; least recently used sessions are evicted.
pub struct SessionStore {
    inner: Mutex<Inner>,
    capacity: usize,
}

/// 128 random bits as lowercase hex.
pub fn fresh_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

impl SessionStore {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity).expect("session capacity must be positive");
        Self {
            inner: Mutex::new(Inner {
                live: LruCache::new(cap),
                evicted: HashSet::new(),
                evicted_order: VecDeque::new(),
            }),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.lock().live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn insert(&self, session: Mutex<Session>, created: u64) -> String {
        let mut inner = self.lock();
        let id = loop {
            let id = fresh_id();
            if !inner.live.contains(&id) && !inner.evicted.contains(&id) {
                break id;
            }
        };
        if let Some((old, _)) = inner.live.push(id.clone(), (Arc::new(session), created)) {
            inner.evicted.insert(old.clone());
            inner.evicted_order.push_back(old);
            if inner.evicted_order.len() > TOMBSTONES {
                let expired = inner.evicted_order.pop_front().expect("nonempty");
                inner.evicted.remove(&expired);
            }
        }
        id
    }

    /// Look up and mark as most recently used.
    pub fn get(&self, id: &str) -> Lookup {
        let mut inner = self.lock();
        if let Some((entry, created)) = inner.live.get(id) {
            return Lookup::Found(entry.clone(), *created);
        }
        if inner.evicted.contains(id) {
            Lookup::Gone
        } else {
            Lookup::Unknown
        }
    }
}
