//! Per-node key management: synchronized key pools and key delivery to
//! authenticated Secure Application Entities (SAEs).
//!
//! Every QKD link feeds two directional pools, one per (master, slave) SAE
//! pair, mirrored at both endpoint KMEs. The master side draws fresh blocks
//! with [`get_enc_keys`]; the claim is propagated synchronously to the peer
//! KME so the slave side can fetch the same material by key id with
//! [`get_dec_keys`]. All pool mutations are serialized through the KME lock.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::{Arc, Mutex, Weak};

use thiserror::Error;

pub const BLOCK_SIZE_BITS: u64 = 256;
pub const BLOCK_SIZE_BYTES: usize = 32;
pub const DEFAULT_MAX_KEYS_PER_REQUEST: usize = 128;
pub const DEFAULT_POOL_CAP_BLOCKS: usize = 4096;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KmeError {
    #[error("unknown credential")]
    UnknownCredential,
    #[error("unknown link {0}")]
    UnknownLink(String),
    #[error("duplicate key id {0}")]
    DuplicateKeyId(String),
    #[error("pool {master}->{slave} is full")]
    PoolFull { master: String, slave: String },
    #[error("no pool for SAE pair {master}->{slave}")]
    NoSuchPool { master: String, slave: String },
    #[error("insufficient keys: requested {requested}, available {available}")]
    InsufficientKeys { requested: usize, available: usize },
    #[error("unsupported key size {0} bits")]
    SizeUnsupported(u64),
    #[error("request for {requested} keys exceeds per-request maximum {max}")]
    RequestTooLarge { requested: usize, max: usize },
    #[error("key id {0} not found")]
    KeyIdNotFound(String),
    #[error("key id {0} not yet claimed by the master SAE")]
    KeyIdNotYetClaimed(String),
    #[error("key id {0} already delivered once (strict delivery enabled)")]
    AlreadyDelivered(String),
    #[error("pool mirror divergence: {0}")]
    SyncDivergence(String),
}

/// One unit of symmetric key material, identical at both ends of a link.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyBlock {
    pub key_id: String,
    pub material: Vec<u8>,
}

impl KeyBlock {
    pub fn new(key_id: String, material: Vec<u8>) -> Self {
        assert!(!material.is_empty(), "key block must carry material");
        KeyBlock { key_id, material }
    }

    pub fn size_bits(&self) -> u64 {
        self.material.len() as u64 * 8
    }
}

impl fmt::Debug for KeyBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Key material stays out of debug output.
        f.debug_struct("KeyBlock")
            .field("key_id", &self.key_id)
            .field("size_bits", &self.size_bits())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SaeRole {
    Controller,
    Agent,
    Encryptor,
}

/// An authenticated consumer of QKD keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaeIdentity {
    pub sae_id: String,
    pub roles: std::collections::BTreeSet<SaeRole>,
}

impl SaeIdentity {
    pub fn new(sae_id: impl Into<String>, roles: impl IntoIterator<Item = SaeRole>) -> Self {
        SaeIdentity { sae_id: sae_id.into(), roles: roles.into_iter().collect() }
    }
}

/// Snapshot of one directional pool, as reported to SAEs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolStatus {
    pub stored_key_count: usize,
    pub key_size_bits: u64,
    pub max_key_per_request: usize,
    pub source_sae: String,
    pub target_sae: String,
}

#[derive(Debug, Default)]
struct Pool {
    link_id: String,
    available: VecDeque<KeyBlock>,
    delivered_enc: BTreeMap<String, KeyBlock>,
    delivered_dec: HashSet<String>,
    pushed: u64,
    cap: usize,
}

/// Counters used by conservation checks: (pushed, available, delivered_enc).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolCounts {
    pub pushed: u64,
    pub available: usize,
    pub delivered_enc: usize,
}

type PairKey = (String, String);

/// A Key Management Entity. Share one per node behind a [`KmeHandle`].
pub struct Kme {
    node_id: String,
    credentials: HashMap<Vec<u8>, SaeIdentity>,
    pools: BTreeMap<PairKey, Pool>,
    link_pools: BTreeMap<String, Vec<PairKey>>,
    link_rr: BTreeMap<String, u64>,
    link_seen: BTreeMap<String, HashSet<String>>,
    peers: BTreeMap<PairKey, Weak<Mutex<Kme>>>,
    max_key_per_request: usize,
    strict_dec_once: bool,
}

pub type KmeHandle = Arc<Mutex<Kme>>;

impl Kme {
    pub fn new(node_id: impl Into<String>) -> Self {
        Kme {
            node_id: node_id.into(),
            credentials: HashMap::new(),
            pools: BTreeMap::new(),
            link_pools: BTreeMap::new(),
            link_rr: BTreeMap::new(),
            link_seen: BTreeMap::new(),
            peers: BTreeMap::new(),
            max_key_per_request: DEFAULT_MAX_KEYS_PER_REQUEST,
            strict_dec_once: false,
        }
    }

    pub fn into_handle(self) -> KmeHandle {
        Arc::new(Mutex::new(self))
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn set_max_key_per_request(&mut self, max: usize) {
        self.max_key_per_request = max;
    }

    /// When enabled, repeated slave-side retrieval of a key id is refused
    /// instead of answered idempotently.
    pub fn set_strict_dec_once(&mut self, strict: bool) {
        self.strict_dec_once = strict;
    }

    pub fn register_sae(&mut self, credential: Vec<u8>, identity: SaeIdentity) {
        self.credentials.insert(credential, identity);
    }

    pub fn authenticate(&self, credential: &[u8]) -> Result<SaeIdentity, KmeError> {
        self.credentials.get(credential).cloned().ok_or(KmeError::UnknownCredential)
    }

    /// Declares a directional pool fed by `link_id`.
    pub fn add_pool(
        &mut self,
        master_sae: impl Into<String>,
        slave_sae: impl Into<String>,
        link_id: impl Into<String>,
        cap: usize,
    ) {
        let key = (master_sae.into(), slave_sae.into());
        let link_id = link_id.into();
        self.pools.insert(
            key.clone(),
            Pool { link_id: link_id.clone(), cap, ..Default::default() },
        );
        self.link_pools.entry(link_id).or_default().push(key);
    }

    fn pool(&self, master: &str, slave: &str) -> Result<&Pool, KmeError> {
        self.pools.get(&(master.to_string(), slave.to_string())).ok_or(KmeError::NoSuchPool {
            master: master.to_string(),
            slave: slave.to_string(),
        })
    }

    fn pool_mut(&mut self, master: &str, slave: &str) -> Result<&mut Pool, KmeError> {
        self.pools.get_mut(&(master.to_string(), slave.to_string())).ok_or(KmeError::NoSuchPool {
            master: master.to_string(),
            slave: slave.to_string(),
        })
    }

    /// Appends freshly generated blocks, distributing them round-robin over
    /// the link's directional pools. All-or-nothing.
    pub fn push_keys(&mut self, link_id: &str, blocks: &[KeyBlock]) -> Result<(), KmeError> {
        let pool_keys = self
            .link_pools
            .get(link_id)
            .cloned()
            .ok_or_else(|| KmeError::UnknownLink(link_id.to_string()))?;
        let seen = self.link_seen.entry(link_id.to_string()).or_default();
        for block in blocks {
            if seen.contains(&block.key_id) {
                return Err(KmeError::DuplicateKeyId(block.key_id.clone()));
            }
        }
        // Capacity check before any mutation.
        let rr = *self.link_rr.get(link_id).unwrap_or(&0);
        let mut incoming = vec![0usize; pool_keys.len()];
        for i in 0..blocks.len() {
            incoming[((rr + i as u64) % pool_keys.len() as u64) as usize] += 1;
        }
        for (key, extra) in pool_keys.iter().zip(&incoming) {
            let pool = &self.pools[key];
            if pool.available.len() + extra > pool.cap {
                return Err(KmeError::PoolFull { master: key.0.clone(), slave: key.1.clone() });
            }
        }

        let seen = self.link_seen.get_mut(link_id).expect("seen set exists");
        for block in blocks {
            seen.insert(block.key_id.clone());
        }
        for (i, block) in blocks.iter().enumerate() {
            let key = &pool_keys[((rr + i as u64) % pool_keys.len() as u64) as usize];
            let pool = self.pools.get_mut(key).expect("pool exists");
            pool.available.push_back(block.clone());
            pool.pushed += 1;
        }
        self.link_rr.insert(link_id.to_string(), rr + blocks.len() as u64);
        Ok(())
    }

    /// How many more blocks the link can absorb before a pool fills up.
    pub fn link_remaining_capacity(&self, link_id: &str) -> usize {
        match self.link_pools.get(link_id) {
            None => 0,
            Some(keys) => {
                let min_remaining = keys
                    .iter()
                    .map(|k| {
                        let p = &self.pools[k];
                        p.cap.saturating_sub(p.available.len())
                    })
                    .min()
                    .unwrap_or(0);
                min_remaining * keys.len()
            }
        }
    }

    pub fn get_status(&self, requester: &SaeIdentity, slave_sae: &str) -> Result<PoolStatus, KmeError> {
        let pool = self.pool(&requester.sae_id, slave_sae)?;
        Ok(PoolStatus {
            stored_key_count: pool.available.len(),
            key_size_bits: BLOCK_SIZE_BITS,
            max_key_per_request: self.max_key_per_request,
            source_sae: requester.sae_id.clone(),
            target_sae: slave_sae.to_string(),
        })
    }

    /// Local half of [`get_enc_keys`]: atomically claims blocks for the
    /// master SAE. Returns the blocks to deliver.
    fn take_enc_keys(
        &mut self,
        requester: &SaeIdentity,
        slave_sae: &str,
        number: usize,
        size_bits: u64,
    ) -> Result<Vec<KeyBlock>, KmeError> {
        if size_bits == 0 || size_bits % BLOCK_SIZE_BITS != 0 {
            return Err(KmeError::SizeUnsupported(size_bits));
        }
        let blocks_needed = number * (size_bits / BLOCK_SIZE_BITS) as usize;
        if blocks_needed > self.max_key_per_request {
            return Err(KmeError::RequestTooLarge {
                requested: blocks_needed,
                max: self.max_key_per_request,
            });
        }
        let pool = self.pool_mut(&requester.sae_id, slave_sae)?;
        if pool.available.len() < blocks_needed {
            return Err(KmeError::InsufficientKeys {
                requested: blocks_needed,
                available: pool.available.len(),
            });
        }
        let mut out = Vec::with_capacity(blocks_needed);
        for _ in 0..blocks_needed {
            let block = pool.available.pop_front().expect("length checked");
            pool.delivered_enc.insert(block.key_id.clone(), block.clone());
            out.push(block);
        }
        Ok(out)
    }

    /// Mirrors a master-side claim on this (slave-side) KME.
    fn mark_claimed(&mut self, master: &str, slave: &str, key_ids: &[String]) -> Result<(), KmeError> {
        let pool = self.pool_mut(master, slave)?;
        for id in key_ids {
            if pool.delivered_enc.contains_key(id) {
                continue;
            }
            match pool.available.iter().position(|b| &b.key_id == id) {
                Some(pos) => {
                    let block = pool.available.remove(pos).expect("position valid");
                    pool.delivered_enc.insert(block.key_id.clone(), block);
                }
                None => {
                    return Err(KmeError::SyncDivergence(format!(
                        "peer claimed unknown key id {id}"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Slave-side retrieval of already-claimed blocks by id.
    pub fn get_dec_keys(
        &mut self,
        requester: &SaeIdentity,
        master_sae: &str,
        key_ids: &[String],
    ) -> Result<Vec<KeyBlock>, KmeError> {
        let strict = self.strict_dec_once;
        let pool = self.pool_mut(master_sae, &requester.sae_id)?;
        let mut out = Vec::with_capacity(key_ids.len());
        for id in key_ids {
            match pool.delivered_enc.get(id) {
                Some(block) => {
                    if strict && pool.delivered_dec.contains(id) {
                        return Err(KmeError::AlreadyDelivered(id.clone()));
                    }
                    out.push(block.clone());
                }
                None => {
                    if pool.available.iter().any(|b| &b.key_id == id) {
                        return Err(KmeError::KeyIdNotYetClaimed(id.clone()));
                    }
                    return Err(KmeError::KeyIdNotFound(id.clone()));
                }
            }
        }
        for id in key_ids {
            pool.delivered_dec.insert(id.clone());
        }
        Ok(out)
    }

    pub fn pool_counts(&self, master: &str, slave: &str) -> Result<PoolCounts, KmeError> {
        let pool = self.pool(master, slave)?;
        Ok(PoolCounts {
            pushed: pool.pushed,
            available: pool.available.len(),
            delivered_enc: pool.delivered_enc.len(),
        })
    }

    pub fn pool_link(&self, master: &str, slave: &str) -> Result<String, KmeError> {
        Ok(self.pool(master, slave)?.link_id.clone())
    }
}

/// Links the same directional pool at two KMEs so master-side claims are
/// mirrored to the slave side.
pub fn link_pool_pair(a: &KmeHandle, b: &KmeHandle, master_sae: &str, slave_sae: &str) {
    let key = (master_sae.to_string(), slave_sae.to_string());
    a.lock().unwrap().peers.insert(key.clone(), Arc::downgrade(b));
    b.lock().unwrap().peers.insert(key, Arc::downgrade(a));
}

pub fn authenticate(handle: &KmeHandle, credential: &[u8]) -> Result<SaeIdentity, KmeError> {
    handle.lock().unwrap().authenticate(credential)
}

pub fn push_keys(handle: &KmeHandle, link_id: &str, blocks: &[KeyBlock]) -> Result<(), KmeError> {
    handle.lock().unwrap().push_keys(link_id, blocks)
}

pub fn get_status(
    handle: &KmeHandle,
    requester: &SaeIdentity,
    slave_sae: &str,
) -> Result<PoolStatus, KmeError> {
    handle.lock().unwrap().get_status(requester, slave_sae)
}

/// Delivers `number` fresh blocks of `size_bits` to the master SAE and
/// propagates the claim to the peer KME.
///
/// The claim is committed locally before the peer is notified, and the peer
/// is locked only after the local lock is released.
pub fn get_enc_keys(
    handle: &KmeHandle,
    requester: &SaeIdentity,
    slave_sae: &str,
    number: usize,
    size_bits: u64,
) -> Result<Vec<KeyBlock>, KmeError> {
    let (blocks, peer) = {
        let mut kme = handle.lock().unwrap();
        let blocks = kme.take_enc_keys(requester, slave_sae, number, size_bits)?;
        let peer = kme.peers.get(&(requester.sae_id.clone(), slave_sae.to_string())).cloned();
        (blocks, peer)
    };
    if let Some(peer) = peer.and_then(|w| w.upgrade()) {
        let ids: Vec<String> = blocks.iter().map(|b| b.key_id.clone()).collect();
        peer.lock().unwrap().mark_claimed(&requester.sae_id, slave_sae, &ids)?;
    }
    Ok(blocks)
}

pub fn get_dec_keys(
    handle: &KmeHandle,
    requester: &SaeIdentity,
    master_sae: &str,
    key_ids: &[String],
) -> Result<Vec<KeyBlock>, KmeError> {
    handle.lock().unwrap().get_dec_keys(requester, master_sae, key_ids)
}

pub mod api {
    //! JSON request/response surface mirroring the ETSI key-delivery shape.
    //!
    //! Resource paths:
    //! * `GET  /api/v1/keys/{slave_sae}/status`
    //! * `POST /api/v1/keys/{slave_sae}/enc_keys`  body `{"number": n, "size": bits}`
    //! * `POST /api/v1/keys/{master_sae}/dec_keys` body `{"key_IDs": [{"key_ID": id}, ...]}`
    //!
    //! Key material travels base64-encoded under `"key"`; identifiers under
    //! `"key_ID"`. Channel security is the caller's concern.

    use base64::engine::general_purpose::STANDARD as BASE64;
    use base64::Engine;
    use serde_json::{json, Value};

    use super::{KmeError, KmeHandle};

    /// An error with an HTTP-like status code and a semantic code string.
    #[derive(Debug, PartialEq, Eq)]
    pub struct ApiError {
        pub status: u16,
        pub code: String,
        pub message: String,
    }

    impl ApiError {
        fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
            ApiError { status, code: code.to_string(), message: message.into() }
        }

        pub fn to_json(&self) -> Value {
            json!({ "code": self.code, "message": self.message })
        }
    }

    fn map_err(err: KmeError) -> ApiError {
        let (status, code) = match &err {
            KmeError::UnknownCredential => (401, "unknown-credential"),
            KmeError::NoSuchPool { .. } => (404, "no-such-pool"),
            KmeError::UnknownLink(_) => (404, "unknown-link"),
            KmeError::KeyIdNotFound(_) => (404, "key-id-not-found"),
            KmeError::KeyIdNotYetClaimed(_) => (409, "key-id-not-yet-claimed"),
            KmeError::AlreadyDelivered(_) => (409, "already-delivered"),
            KmeError::InsufficientKeys { .. } => (400, "insufficient-keys"),
            KmeError::SizeUnsupported(_) => (400, "size-unsupported"),
            KmeError::RequestTooLarge { .. } => (400, "request-too-large"),
            KmeError::DuplicateKeyId(_) => (409, "duplicate-key-id"),
            KmeError::PoolFull { .. } => (503, "pool-full"),
            KmeError::SyncDivergence(_) => (500, "sync-divergence"),
        };
        ApiError::new(status, code, err.to_string())
    }

    fn parse_path(path: &str) -> Option<(&str, &str)> {
        let rest = path.strip_prefix("/api/v1/keys/")?;
        let (sae, endpoint) = rest.split_once('/')?;
        if sae.is_empty() {
            return None;
        }
        Some((sae, endpoint))
    }

    /// Dispatches one request against the KME, authenticating the caller by
    /// credential first.
    pub fn handle_request(
        handle: &KmeHandle,
        credential: &[u8],
        method: &str,
        path: &str,
        body: Option<&Value>,
    ) -> Result<Value, ApiError> {
        let identity = super::authenticate(handle, credential).map_err(map_err)?;
        let (peer_sae, endpoint) =
            parse_path(path).ok_or_else(|| ApiError::new(404, "not-found", format!("no resource {path}")))?;

        match (method, endpoint) {
            ("GET", "status") => {
                let status = super::get_status(handle, &identity, peer_sae).map_err(map_err)?;
                Ok(json!({
                    "source_sae": status.source_sae,
                    "target_sae": status.target_sae,
                    "stored_key_count": status.stored_key_count,
                    "key_size": status.key_size_bits,
                    "max_key_per_request": status.max_key_per_request,
                }))
            }
            ("POST", "enc_keys") => {
                let number = body
                    .and_then(|b| b.get("number"))
                    .map(|v| v.as_u64().ok_or(()))
                    .transpose()
                    .map_err(|_| ApiError::new(400, "bad-request", "number must be an integer"))?
                    .unwrap_or(1) as usize;
                let size = body
                    .and_then(|b| b.get("size"))
                    .map(|v| v.as_u64().ok_or(()))
                    .transpose()
                    .map_err(|_| ApiError::new(400, "bad-request", "size must be an integer"))?
                    .unwrap_or(super::BLOCK_SIZE_BITS);
                let blocks =
                    super::get_enc_keys(handle, &identity, peer_sae, number, size).map_err(map_err)?;
                Ok(json!({
                    "keys": blocks
                        .iter()
                        .map(|b| json!({ "key_ID": b.key_id, "key": BASE64.encode(&b.material) }))
                        .collect::<Vec<_>>()
                }))
            }
            ("POST", "dec_keys") => {
                let ids: Vec<String> = body
                    .and_then(|b| b.get("key_IDs"))
                    .and_then(|v| v.as_array())
                    .map(|items| {
                        items
                            .iter()
                            .filter_map(|i| i.get("key_ID").and_then(|v| v.as_str()).map(str::to_string))
                            .collect()
                    })
                    .ok_or_else(|| ApiError::new(400, "bad-request", "key_IDs list required"))?;
                let blocks =
                    super::get_dec_keys(handle, &identity, peer_sae, &ids).map_err(map_err)?;
                Ok(json!({
                    "keys": blocks
                        .iter()
                        .map(|b| json!({ "key_ID": b.key_id, "key": BASE64.encode(&b.material) }))
                        .collect::<Vec<_>>()
                }))
            }
            _ => Err(ApiError::new(404, "not-found", format!("no {method} handler for {path}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(id: &str) -> KeyBlock {
        let mut material = vec![0u8; BLOCK_SIZE_BYTES];
        for (i, byte) in material.iter_mut().enumerate() {
            *byte = (id.len() as u8).wrapping_mul(31).wrapping_add(i as u8);
        }
        KeyBlock::new(id.to_string(), material)
    }

    fn blocks(prefix: &str, n: usize) -> Vec<KeyBlock> {
        (0..n).map(|i| block(&format!("{prefix}-{i}"))).collect()
    }

    /// Two KMEs sharing one link with a single directional pool.
    fn linked_pair() -> (KmeHandle, KmeHandle, SaeIdentity, SaeIdentity) {
        let mut a = Kme::new("N1");
        let mut b = Kme::new("N2");
        let master = SaeIdentity::new("ctrl-N1", [SaeRole::Controller]);
        let slave = SaeIdentity::new("agent-N2", [SaeRole::Agent]);
        a.register_sae(b"cred-ctrl".to_vec(), master.clone());
        b.register_sae(b"cred-agent".to_vec(), slave.clone());
        a.add_pool("ctrl-N1", "agent-N2", "QL1", 64);
        b.add_pool("ctrl-N1", "agent-N2", "QL1", 64);
        let (a, b) = (a.into_handle(), b.into_handle());
        link_pool_pair(&a, &b, "ctrl-N1", "agent-N2");
        (a, b, master, slave)
    }

    #[test]
    fn authenticate_resolves_registered_credentials_only() {
        let (a, _b, master, _) = linked_pair();
        let identity = authenticate(&a, b"cred-ctrl").unwrap();
        assert_eq!(identity, master);
        assert!(identity.roles.contains(&SaeRole::Controller));
        assert_eq!(authenticate(&a, b"nope"), Err(KmeError::UnknownCredential));
        // The agent credential is registered at N2's KME, not N1's.
        assert_eq!(authenticate(&a, b"cred-agent"), Err(KmeError::UnknownCredential));
    }

    #[test]
    fn push_appends_and_counts() {
        let (a, _b, master, _) = linked_pair();
        push_keys(&a, "QL1", &blocks("k", 10)).unwrap();
        let status = get_status(&a, &master, "agent-N2").unwrap();
        assert_eq!(status.stored_key_count, 10);
        assert_eq!(status.key_size_bits, 256);
    }

    #[test]
    fn duplicate_push_is_rejected() {
        let (a, _b, _m, _s) = linked_pair();
        push_keys(&a, "QL1", &[block("dup")]).unwrap();
        assert_eq!(
            push_keys(&a, "QL1", &[block("dup")]),
            Err(KmeError::DuplicateKeyId("dup".into()))
        );
        assert_eq!(push_keys(&a, "other", &[block("x")]), Err(KmeError::UnknownLink("other".into())));
    }

    #[test]
    fn concurrent_disjoint_pushes_all_land() {
        let (a, _b, master, _) = linked_pair();
        let h1 = a.clone();
        let h2 = a.clone();
        let t1 = std::thread::spawn(move || {
            for i in 0..8 {
                push_keys(&h1, "QL1", &[block(&format!("t1-{i}"))]).unwrap();
            }
        });
        let t2 = std::thread::spawn(move || {
            for i in 0..8 {
                push_keys(&h2, "QL1", &[block(&format!("t2-{i}"))]).unwrap();
            }
        });
        t1.join().unwrap();
        t2.join().unwrap();
        assert_eq!(get_status(&a, &master, "agent-N2").unwrap().stored_key_count, 16);
    }

    /// Pushes the same freshly generated blocks to both ends, as the link
    /// feed does.
    fn push_both(a: &KmeHandle, b: &KmeHandle, blocks: &[KeyBlock]) {
        push_keys(a, "QL1", blocks).unwrap();
        push_keys(b, "QL1", blocks).unwrap();
    }

    #[test]
    fn status_tracks_enc_key_draws() {
        let (a, b, master, _) = linked_pair();
        push_both(&a, &b, &blocks("k", 5));
        let before = get_status(&a, &master, "agent-N2").unwrap().stored_key_count;
        get_enc_keys(&a, &master, "agent-N2", 2, 256).unwrap();
        let after = get_status(&a, &master, "agent-N2").unwrap().stored_key_count;
        assert_eq!(before - after, 2);
        assert!(matches!(
            get_status(&a, &master, "agent-NX"),
            Err(KmeError::NoSuchPool { .. })
        ));
    }

    #[test]
    fn enc_keys_all_or_nothing() {
        let (a, b, master, _) = linked_pair();
        push_both(&a, &b, &blocks("k", 4));
        let got = get_enc_keys(&a, &master, "agent-N2", 2, 256).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(get_status(&a, &master, "agent-N2").unwrap().stored_key_count, 2);

        let err = get_enc_keys(&a, &master, "agent-N2", 5, 256).unwrap_err();
        assert_eq!(err, KmeError::InsufficientKeys { requested: 5, available: 2 });
        assert_eq!(get_status(&a, &master, "agent-N2").unwrap().stored_key_count, 2);
    }

    #[test]
    fn multiple_of_block_size_maps_to_block_count() {
        let (a, b, master, _) = linked_pair();
        push_both(&a, &b, &blocks("k", 6));
        let got = get_enc_keys(&a, &master, "agent-N2", 2, 512).unwrap();
        assert_eq!(got.len(), 4); // 2 entries x 512 bits = 4 blocks
        assert_eq!(
            get_enc_keys(&a, &master, "agent-N2", 1, 100),
            Err(KmeError::SizeUnsupported(100))
        );
    }

    #[test]
    fn concurrent_oversubscription_never_double_spends() {
        for _ in 0..20 {
            let (a, b, master, _) = linked_pair();
            push_both(&a, &b, &blocks("k", 4));
            let h1 = a.clone();
            let h2 = a.clone();
            let m1 = master.clone();
            let m2 = master.clone();
            let t1 = std::thread::spawn(move || get_enc_keys(&h1, &m1, "agent-N2", 3, 256));
            let t2 = std::thread::spawn(move || get_enc_keys(&h2, &m2, "agent-N2", 3, 256));
            let r1 = t1.join().unwrap();
            let r2 = t2.join().unwrap();
            assert_eq!(r1.is_ok() as u8 + r2.is_ok() as u8, 1, "exactly one request wins");
            let ok = r1.ok().or(r2.ok()).unwrap();
            assert_eq!(ok.len(), 3);
            assert_eq!(get_status(&a, &master, "agent-N2").unwrap().stored_key_count, 1);
        }
    }

    #[test]
    fn dec_keys_mirror_master_material() {
        let (a, b, master, slave) = linked_pair();
        let generated = blocks("k", 4);
        push_keys(&a, "QL1", &generated).unwrap();
        push_keys(&b, "QL1", &generated).unwrap();

        let enc = get_enc_keys(&a, &master, "agent-N2", 2, 256).unwrap();
        let ids: Vec<String> = enc.iter().map(|k| k.key_id.clone()).collect();
        let dec = get_dec_keys(&b, &slave, "ctrl-N1", &ids).unwrap();
        assert_eq!(enc, dec, "slave-side material equals master-side material");

        // Idempotent retry returns the same material.
        let again = get_dec_keys(&b, &slave, "ctrl-N1", &ids).unwrap();
        assert_eq!(dec, again);

        assert_eq!(
            get_dec_keys(&b, &slave, "ctrl-N1", &["missing".into()]),
            Err(KmeError::KeyIdNotFound("missing".into()))
        );
    }

    #[test]
    fn unclaimed_id_is_distinguished_from_unknown() {
        let (a, b, _master, slave) = linked_pair();
        let generated = blocks("k", 2);
        push_keys(&a, "QL1", &generated).unwrap();
        push_keys(&b, "QL1", &generated).unwrap();
        let err = get_dec_keys(&b, &slave, "ctrl-N1", &[generated[0].key_id.clone()]).unwrap_err();
        assert_eq!(err, KmeError::KeyIdNotYetClaimed(generated[0].key_id.clone()));
    }

    #[test]
    fn strict_delivery_refuses_second_fetch() {
        let (a, b, master, slave) = linked_pair();
        b.lock().unwrap().set_strict_dec_once(true);
        let generated = blocks("k", 2);
        push_keys(&a, "QL1", &generated).unwrap();
        push_keys(&b, "QL1", &generated).unwrap();
        let enc = get_enc_keys(&a, &master, "agent-N2", 1, 256).unwrap();
        let ids: Vec<String> = enc.iter().map(|k| k.key_id.clone()).collect();
        get_dec_keys(&b, &slave, "ctrl-N1", &ids).unwrap();
        assert!(matches!(
            get_dec_keys(&b, &slave, "ctrl-N1", &ids),
            Err(KmeError::AlreadyDelivered(_))
        ));
    }

    #[test]
    fn conservation_holds_at_both_kmes() {
        let (a, b, master, slave) = linked_pair();
        let generated = blocks("k", 8);
        push_keys(&a, "QL1", &generated).unwrap();
        push_keys(&b, "QL1", &generated).unwrap();
        get_enc_keys(&a, &master, "agent-N2", 3, 256).unwrap();
        let enc = get_enc_keys(&a, &master, "agent-N2", 2, 256).unwrap();
        let ids: Vec<String> = enc.iter().map(|k| k.key_id.clone()).collect();
        get_dec_keys(&b, &slave, "ctrl-N1", &ids).unwrap();

        for handle in [&a, &b] {
            let counts = handle.lock().unwrap().pool_counts("ctrl-N1", "agent-N2").unwrap();
            assert_eq!(counts.pushed, counts.available as u64 + counts.delivered_enc as u64);
        }
    }

    #[test]
    fn api_round_trip_and_field_names() {
        use serde_json::json;
        let (a, b, _master, _slave) = linked_pair();
        let generated = blocks("k", 4);
        push_keys(&a, "QL1", &generated).unwrap();
        push_keys(&b, "QL1", &generated).unwrap();

        let status =
            api::handle_request(&a, b"cred-ctrl", "GET", "/api/v1/keys/agent-N2/status", None).unwrap();
        assert_eq!(status["stored_key_count"], 4);
        assert_eq!(status["key_size"], 256);
        assert_eq!(status["max_key_per_request"], 128);

        let enc = api::handle_request(
            &a,
            b"cred-ctrl",
            "POST",
            "/api/v1/keys/agent-N2/enc_keys",
            Some(&json!({"number": 2, "size": 256})),
        )
        .unwrap();
        let keys = enc["keys"].as_array().unwrap();
        assert_eq!(keys.len(), 2);
        assert!(keys[0]["key_ID"].is_string() && keys[0]["key"].is_string());

        let dec = api::handle_request(
            &b,
            b"cred-agent",
            "POST",
            "/api/v1/keys/ctrl-N1/dec_keys",
            Some(&json!({"key_IDs": [{"key_ID": keys[0]["key_ID"]}, {"key_ID": keys[1]["key_ID"]}]})),
        )
        .unwrap();
        assert_eq!(dec["keys"], enc["keys"]);

        let err = api::handle_request(&a, b"wrong", "GET", "/api/v1/keys/agent-N2/status", None)
            .unwrap_err();
        assert_eq!(err.status, 401);
        assert_eq!(err.code, "unknown-credential");
    }
}
