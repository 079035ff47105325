//! Session layer between controller and agents.
//!
//! Envelopes are XML (`<env session-id=".." seq=".." kind="..">body</env>`)
//! framed with the 6-byte `]]>]]>` end-of-message delimiter over a reliable
//! byte stream. A session is opened by a HELLO exchange authenticated with a
//! pre-shared bootstrap secret (quantum key pools may be empty at that
//! point); every later RPC, reply, and notification body is protected per
//! the negotiated encryption policy with keys fetched on demand from the
//! local KME. One RPC is outstanding at a time per session; notifications
//! may interleave with replies on the same stream.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;

use crate::codec::{
    self, CipherSuite, CodecError, ConsumptionRecord, EncryptionLevel, EncryptionPolicy, PadLedger,
};
use crate::kme::{self, KeyBlock, KmeError, KmeHandle, SaeIdentity};
use crate::xml::{Element, XmlError, XmlNode, XmlTree};

pub const FRAME_DELIMITER: &[u8] = b"]]>]]>";
pub const DEFAULT_RPC_TIMEOUT_S: u64 = 5;
pub const DEFAULT_RPC_RETRIES: u32 = 3;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("framing error: {0}")]
    Frame(String),
    #[error("frame body contains the end-of-message delimiter")]
    BodyContainsDelimiter,
    #[error("session not open")]
    NotOpen,
    #[error("peer unreachable")]
    Unreachable,
    #[error("policy mismatch: local {local:?}, peer {peer:?}")]
    PolicyMismatch { local: String, peer: String },
    #[error("bootstrap authentication failure")]
    BootstrapAuthFailure,
    #[error("rpc timeout after {attempts} attempts of {timeout_s} s")]
    Timeout { attempts: u32, timeout_s: u64 },
    #[error("decrypt failure: {0}")]
    DecryptFailure(String),
    #[error("key starvation: need {needed_bits} bits, pool holds {available_bits}, deficit {deficit_bits}")]
    KeyStarvation { needed_bits: u64, available_bits: u64, deficit_bits: u64 },
    #[error("sequence violation: {0}")]
    SeqViolation(String),
    #[error(transparent)]
    Kme(#[from] KmeError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Xml(#[from] XmlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeKind {
    Hello,
    Rpc,
    RpcReply,
    Notification,
}

impl EnvelopeKind {
    pub fn name(&self) -> &'static str {
        match self {
            EnvelopeKind::Hello => "hello",
            EnvelopeKind::Rpc => "rpc",
            EnvelopeKind::RpcReply => "rpc-reply",
            EnvelopeKind::Notification => "notification",
        }
    }

    fn parse(s: &str) -> Result<Self, ChannelError> {
        match s {
            "hello" => Ok(EnvelopeKind::Hello),
            "rpc" => Ok(EnvelopeKind::Rpc),
            "rpc-reply" => Ok(EnvelopeKind::RpcReply),
            "notification" => Ok(EnvelopeKind::Notification),
            other => Err(ChannelError::Frame(format!("unknown envelope kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Envelope {
    pub session_id: String,
    pub seq: u64,
    pub kind: EnvelopeKind,
    pub body: Element,
}

impl Envelope {
    fn to_xml(&self) -> XmlTree {
        let mut env = Element::new("env");
        env.set_attr("session-id", &self.session_id);
        env.set_attr("seq", self.seq.to_string());
        env.set_attr("kind", self.kind.name());
        env.push_element(self.body.clone());
        XmlTree::new(env)
    }

    fn from_xml(tree: &XmlTree) -> Result<Envelope, ChannelError> {
        let root = &tree.root;
        if root.tag != "env" {
            return Err(ChannelError::Frame(format!("expected <env>, found <{}>", root.tag)));
        }
        let session_id = root
            .attr("session-id")
            .ok_or_else(|| ChannelError::Frame("missing session-id".into()))?
            .to_string();
        let seq: u64 = root
            .attr("seq")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ChannelError::Frame("missing or invalid seq".into()))?;
        let kind = EnvelopeKind::parse(
            root.attr("kind").ok_or_else(|| ChannelError::Frame("missing kind".into()))?,
        )?;
        let mut elements = root.child_elements();
        let body = elements.next().ok_or_else(|| ChannelError::Frame("missing body".into()))?.clone();
        if elements.next().is_some() {
            return Err(ChannelError::Frame("envelope carries more than one body".into()));
        }
        Ok(Envelope { session_id, seq, kind, body })
    }
}

/// Serializes and delimits one envelope. The canonical XML serializer
/// escapes `>` everywhere, so the delimiter cannot occur inside the payload;
/// the check remains as a guard.
pub fn frame(envelope: &Envelope) -> Result<Vec<u8>, ChannelError> {
    let xml = envelope.to_xml().serialize();
    if xml.as_bytes().windows(FRAME_DELIMITER.len()).any(|w| w == FRAME_DELIMITER) {
        return Err(ChannelError::BodyContainsDelimiter);
    }
    let mut bytes = xml.into_bytes();
    bytes.extend_from_slice(FRAME_DELIMITER);
    Ok(bytes)
}

pub fn unframe(payload: &[u8]) -> Result<Envelope, ChannelError> {
    let text = std::str::from_utf8(payload)
        .map_err(|_| ChannelError::Frame("frame is not valid UTF-8".into()))?;
    Envelope::from_xml(&XmlTree::parse(text)?)
}

/// Accumulates stream bytes and splits out complete frames in order.
#[derive(Debug, Default)]
pub struct FrameSplitter {
    buf: Vec<u8>,
}

impl FrameSplitter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame payload (delimiter stripped), if any.
    pub fn next_frame(&mut self) -> Option<Vec<u8>> {
        let pos = self
            .buf
            .windows(FRAME_DELIMITER.len())
            .position(|w| w == FRAME_DELIMITER)?;
        let frame: Vec<u8> = self.buf[..pos].to_vec();
        self.buf.drain(..pos + FRAME_DELIMITER.len());
        Some(frame)
    }
}

#[derive(Debug, Default)]
struct StreamState {
    data: Vec<u8>,
    unreachable: bool,
    drop_next_frame: bool,
    corrupt_next_frame: bool,
}

/// One direction of an in-process byte channel, with fault hooks for tests
/// and failure drills.
#[derive(Clone, Default)]
pub struct Stream(Arc<Mutex<StreamState>>);

impl Stream {
    fn send_frame(&self, bytes: &[u8]) -> Result<(), ChannelError> {
        let mut state = self.0.lock().unwrap();
        if state.unreachable {
            return Err(ChannelError::Unreachable);
        }
        if state.drop_next_frame {
            state.drop_next_frame = false;
            return Ok(());
        }
        let mut bytes = bytes.to_vec();
        if state.corrupt_next_frame {
            state.corrupt_next_frame = false;
            let payload_len = bytes.len() - FRAME_DELIMITER.len();
            let pos = payload_len * 2 / 3;
            bytes[pos] ^= 0x01;
        }
        state.data.extend_from_slice(&bytes);
        Ok(())
    }

    fn push_raw(&self, bytes: &[u8]) {
        self.0.lock().unwrap().data.extend_from_slice(bytes);
    }

    fn drain(&self) -> Vec<u8> {
        let mut state = self.0.lock().unwrap();
        std::mem::take(&mut state.data)
    }

    pub fn set_unreachable(&self, unreachable: bool) {
        self.0.lock().unwrap().unreachable = unreachable;
    }

    pub fn drop_next_frame(&self) {
        self.0.lock().unwrap().drop_next_frame = true;
    }

    pub fn corrupt_next_frame(&self) {
        self.0.lock().unwrap().corrupt_next_frame = true;
    }
}

/// Both directions of a controller<->agent byte channel.
#[derive(Clone)]
pub struct Transport {
    pub to_peer: Stream,
    pub from_peer: Stream,
}

impl Transport {
    pub fn pair() -> (Transport, Transport) {
        let a2b = Stream::default();
        let b2a = Stream::default();
        (
            Transport { to_peer: a2b.clone(), from_peer: b2a.clone() },
            Transport { to_peer: b2a, from_peer: a2b },
        )
    }
}

/// Handles decrypted RPC bodies on the responder side.
pub trait RpcHandler {
    fn handle_rpc(&mut self, body: &Element) -> Element;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Initiator,
    Responder,
}

/// Session parameters fixed at hello time.
#[derive(Clone)]
pub struct SessionConfig {
    pub peer_sae: String,
    pub policy: EncryptionPolicy,
    /// Optional override for NOTIFICATION envelopes; defaults to `policy`.
    pub notification_policy: Option<EncryptionPolicy>,
    pub bootstrap_secret: Vec<u8>,
    pub timeout_s: u64,
    pub max_retries: u32,
}

impl SessionConfig {
    pub fn new(peer_sae: impl Into<String>, policy: EncryptionPolicy, bootstrap_secret: Vec<u8>) -> Self {
        SessionConfig {
            peer_sae: peer_sae.into(),
            policy,
            notification_policy: None,
            bootstrap_secret,
            timeout_s: DEFAULT_RPC_TIMEOUT_S,
            max_retries: DEFAULT_RPC_RETRIES,
        }
    }
}

/// Per-message consumption entry, drained by the scenario runner.
#[derive(Debug, Clone)]
pub struct SentRecord {
    pub session_id: String,
    pub sender_sae: String,
    pub kind: EnvelopeKind,
    pub seq: u64,
    pub level: EncryptionLevel,
    pub ciphers: CipherSuite,
    pub otp_bits: u64,
    pub aes_key_bits: u64,
    pub total_bits: u64,
    pub drawn_bits: u64,
    pub operation: String,
}

/// One side of a session.
pub struct Endpoint {
    pub role: Role,
    pub sae: SaeIdentity,
    pub cfg: SessionConfig,
    session_id: String,
    kme: Option<KmeHandle>,
    ledger: Arc<Mutex<PadLedger>>,
    pub transport: Transport,
    splitter: FrameSplitter,
    out_seq: u64,
    last_in_rpc_seq: u64,
    last_in_notif_seq: u64,
    outstanding: Option<u64>,
    open: bool,
    notifications: VecDeque<Element>,
    txn_cache: HashMap<String, Element>,
    sent_records: Vec<SentRecord>,
    misattributed_replies: u64,
}

type HmacSha256 = Hmac<Sha256>;

fn hello_mac(secret: &[u8], body_without_mac: &Element, role: Role) -> String {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(secret).expect("HMAC accepts any key size");
    mac.update(XmlTree::new(body_without_mac.clone()).serialize().as_bytes());
    mac.update(match role {
        Role::Initiator => b"i",
        Role::Responder => b"r",
    });
    hex::encode(mac.finalize().into_bytes())
}

fn policy_element(policy: &EncryptionPolicy) -> Element {
    let mut el = Element::new("policy");
    el.set_attr("level", policy.level.name());
    el.set_attr("ciphers", policy.ciphers.label());
    let tags: Vec<&str> = policy.selected_tags.iter().map(String::as_str).collect();
    el.set_attr("tags", tags.join(","));
    el
}

fn policy_from_element(el: &Element) -> Result<EncryptionPolicy, ChannelError> {
    let level = EncryptionLevel::parse(el.attr("level").unwrap_or_default())?;
    let ciphers = CipherSuite::parse(el.attr("ciphers").unwrap_or_default())?;
    let tags: std::collections::BTreeSet<String> = el
        .attr("tags")
        .unwrap_or_default()
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    Ok(EncryptionPolicy { level, ciphers, selected_tags: tags })
}

impl Endpoint {
    pub fn new(
        role: Role,
        sae: SaeIdentity,
        kme: Option<KmeHandle>,
        ledger: Arc<Mutex<PadLedger>>,
        cfg: SessionConfig,
        transport: Transport,
    ) -> Self {
        let session_id = match role {
            Role::Initiator => format!("{}:{}", sae.sae_id, cfg.peer_sae),
            Role::Responder => format!("{}:{}", cfg.peer_sae, sae.sae_id),
        };
        Endpoint {
            role,
            sae,
            cfg,
            session_id,
            kme,
            ledger,
            transport,
            splitter: FrameSplitter::new(),
            out_seq: 0,
            last_in_rpc_seq: 0,
            last_in_notif_seq: 0,
            outstanding: None,
            open: false,
            notifications: VecDeque::new(),
            txn_cache: HashMap::new(),
            sent_records: Vec::new(),
            misattributed_replies: 0,
        }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    pub fn take_sent_records(&mut self) -> Vec<SentRecord> {
        std::mem::take(&mut self.sent_records)
    }

    pub fn take_notifications(&mut self) -> Vec<Element> {
        self.notifications.drain(..).collect()
    }

    pub fn misattributed_replies(&self) -> u64 {
        self.misattributed_replies
    }

    fn policy_for(&self, kind: EnvelopeKind) -> &EncryptionPolicy {
        match kind {
            EnvelopeKind::Notification => {
                self.cfg.notification_policy.as_ref().unwrap_or(&self.cfg.policy)
            }
            _ => &self.cfg.policy,
        }
    }

    fn fetch_blocks(&self, needed_blocks: usize) -> Result<Vec<KeyBlock>, ChannelError> {
        let kme = self.kme.as_ref().ok_or(ChannelError::NotOpen)?;
        kme::get_enc_keys(kme, &self.sae, &self.cfg.peer_sae, needed_blocks, kme::BLOCK_SIZE_BITS)
            .map_err(ChannelError::from)
    }

    /// Encrypts (per policy), wraps, frames, and sends one body.
    fn send_envelope(&mut self, kind: EnvelopeKind, seq: u64, body: &Element) -> Result<(), ChannelError> {
        let policy = self.policy_for(kind).clone();
        let tree = XmlTree::new(body.clone());
        let operation = rpc_operation_name(body);

        let (wire_body, record) = if kind == EnvelopeKind::Hello {
            (body.clone(), None)
        } else {
            let cost = codec::key_cost(&tree, &policy)?;
            if cost.total_bits == 0 {
                (body.clone(), None)
            } else {
                let otp_bytes = (cost.otp_bits / 8) as usize;
                let blocks_needed =
                    otp_bytes.div_ceil(kme::BLOCK_SIZE_BYTES) + usize::from(policy.ciphers.includes_aes());
                let blocks = match self.fetch_blocks(blocks_needed) {
                    Ok(blocks) => blocks,
                    Err(ChannelError::Kme(KmeError::InsufficientKeys { available, .. })) => {
                        let available_bits = available as u64 * kme::BLOCK_SIZE_BITS;
                        return Err(ChannelError::KeyStarvation {
                            needed_bits: cost.total_bits,
                            available_bits,
                            deficit_bits: cost.total_bits.saturating_sub(available_bits),
                        });
                    }
                    Err(e) => return Err(e),
                };
                let message_id = format!("{}#{}{}", self.session_id, self.dir_tag(), seq);
                let mut ledger = self.ledger.lock().unwrap();
                let (sealed, record) =
                    codec::encrypt_message(&tree, &policy, &blocks, &mut ledger, &message_id)?;
                (sealed.root, Some(record))
            }
        };

        let envelope = Envelope { session_id: self.session_id.clone(), seq, kind, body: wire_body };
        let bytes = frame(&envelope)?;
        self.transport.to_peer.send_frame(&bytes)?;
        self.record_sent(kind, seq, &policy, record, operation);
        Ok(())
    }

    fn record_sent(
        &mut self,
        kind: EnvelopeKind,
        seq: u64,
        policy: &EncryptionPolicy,
        record: Option<ConsumptionRecord>,
        operation: String,
    ) {
        if kind == EnvelopeKind::Hello {
            return;
        }
        let (otp, aes, drawn) = record
            .as_ref()
            .map(|r| (r.otp_bits, r.aes_key_bits, r.drawn_bits))
            .unwrap_or((0, 0, 0));
        self.sent_records.push(SentRecord {
            session_id: self.session_id.clone(),
            sender_sae: self.sae.sae_id.clone(),
            kind,
            seq,
            level: policy.level,
            ciphers: policy.ciphers,
            otp_bits: otp,
            aes_key_bits: aes,
            total_bits: otp + aes,
            drawn_bits: drawn,
            operation,
        });
    }

    fn dir_tag(&self) -> &'static str {
        match self.role {
            Role::Initiator => "i",
            Role::Responder => "r",
        }
    }

    fn decrypt_body(&self, body: Element) -> Result<Element, ChannelError> {
        let tree = XmlTree::new(body);
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        collect_key_ids(&tree.root, &mut labels, &mut ids);
        if labels.is_empty() {
            return Ok(tree.root);
        }
        let kme = self.kme.as_ref().ok_or(ChannelError::NotOpen)?;
        let blocks = kme::get_dec_keys(kme, &self.sae, &self.cfg.peer_sae, &ids)
            .map_err(|e| ChannelError::DecryptFailure(e.to_string()))?;
        let by_id: HashMap<String, KeyBlock> =
            blocks.into_iter().map(|b| (b.key_id.clone(), b)).collect();
        let opened = codec::decrypt_message(&tree, |id| by_id.get(id).cloned())
            .map_err(|e| ChannelError::DecryptFailure(e.to_string()))?;
        Ok(opened.root)
    }

    fn hello_body(&self) -> Element {
        let mut hello = Element::new("hello");
        hello.push_element(Element::with_text("sae_id", &self.sae.sae_id));
        hello.push_element(Element::with_text("peer_sae_id", &self.cfg.peer_sae));
        hello.push_element(policy_element(&self.cfg.policy));
        if let Some(np) = &self.cfg.notification_policy {
            let mut el = policy_element(np);
            el.tag = "notification-policy".into();
            hello.push_element(el);
        }
        let mac = hello_mac(&self.cfg.bootstrap_secret, &hello, self.role);
        let mut with_mac = hello;
        with_mac.push_element(Element::with_text("mac", mac));
        with_mac
    }

    fn verify_hello(&self, body: &Element, peer_role: Role) -> Result<(), ChannelError> {
        let mut without_mac = body.clone();
        without_mac.children.retain(|n| !matches!(n, XmlNode::Element(e) if e.tag == "mac"));
        let claimed = body.child("mac").map(|m| m.text()).unwrap_or_default();
        let expected = hello_mac(&self.cfg.bootstrap_secret, &without_mac, peer_role);
        if claimed != expected {
            return Err(ChannelError::BootstrapAuthFailure);
        }
        let peer_policy = body
            .child("policy")
            .ok_or_else(|| ChannelError::Frame("hello without policy".into()))
            .and_then(policy_from_element)?;
        if peer_policy != self.cfg.policy {
            return Err(ChannelError::PolicyMismatch {
                local: self.cfg.policy.level.name().to_string(),
                peer: peer_policy.level.name().to_string(),
            });
        }
        let peer_sae = body.child("sae_id").map(|e| e.text()).unwrap_or_default();
        if peer_sae != self.cfg.peer_sae {
            return Err(ChannelError::Frame(format!(
                "hello from unexpected SAE {peer_sae:?}"
            )));
        }
        Ok(())
    }

    fn inbound_frames(&mut self) -> Vec<Vec<u8>> {
        let bytes = self.transport.from_peer.drain();
        self.splitter.push(&bytes);
        let mut frames = Vec::new();
        while let Some(f) = self.splitter.next_frame() {
            frames.push(f);
        }
        frames
    }

    pub fn send_hello(&mut self) -> Result<(), ChannelError> {
        let body = self.hello_body();
        self.send_envelope(EnvelopeKind::Hello, 0, &body)
    }

    /// Consumes pending HELLO frames; a responder answers with its own.
    pub fn pump_handshake(&mut self) -> Result<(), ChannelError> {
        for payload in self.inbound_frames() {
            let envelope = unframe(&payload)?;
            if envelope.kind != EnvelopeKind::Hello {
                return Err(ChannelError::Frame("expected hello".into()));
            }
            self.pump_handshake_frame(&envelope)?;
        }
        Ok(())
    }

    fn pump_handshake_frame(&mut self, envelope: &Envelope) -> Result<(), ChannelError> {
        let peer_role = match self.role {
            Role::Initiator => Role::Responder,
            Role::Responder => Role::Initiator,
        };
        self.verify_hello(&envelope.body, peer_role)?;
        let was_open = self.open;
        self.open = true;
        if self.role == Role::Responder && !was_open {
            let body = self.hello_body();
            self.send_envelope(EnvelopeKind::Hello, 0, &body)?;
        }
        Ok(())
    }

    /// Issues one RPC attempt: encrypt, frame, send. The reply is collected
    /// by [`Endpoint::pump_initiator`].
    pub fn send_rpc(&mut self, body: &Element) -> Result<u64, ChannelError> {
        if !self.open {
            return Err(ChannelError::NotOpen);
        }
        let seq = self.out_seq + 1;
        self.send_envelope(EnvelopeKind::Rpc, seq, body)?;
        self.out_seq = seq;
        self.outstanding = Some(seq);
        Ok(seq)
    }

    pub fn send_notification(&mut self, body: &Element) -> Result<u64, ChannelError> {
        if !self.open {
            return Err(ChannelError::NotOpen);
        }
        let seq = self.out_seq + 1;
        self.send_envelope(EnvelopeKind::Notification, seq, body)?;
        self.out_seq = seq;
        Ok(seq)
    }

    /// Processes inbound traffic on the initiator side. Returns the reply to
    /// the outstanding RPC when it arrives; notifications are queued.
    pub fn pump_initiator(&mut self) -> Result<Option<Element>, ChannelError> {
        let mut reply = None;
        for payload in self.inbound_frames() {
            let envelope = unframe(&payload)?;
            match envelope.kind {
                EnvelopeKind::RpcReply => {
                    if self.outstanding == Some(envelope.seq) {
                        self.outstanding = None;
                        reply = Some(self.decrypt_body(envelope.body)?);
                    } else {
                        // Late or duplicate reply: never attributed to the
                        // outstanding request.
                        self.misattributed_replies += 1;
                    }
                }
                EnvelopeKind::Notification => {
                    if envelope.seq <= self.last_in_notif_seq {
                        return Err(ChannelError::SeqViolation(format!(
                            "notification seq {} after {}",
                            envelope.seq, self.last_in_notif_seq
                        )));
                    }
                    self.last_in_notif_seq = envelope.seq;
                    let body = self.decrypt_body(envelope.body)?;
                    self.notifications.push_back(body);
                }
                EnvelopeKind::Hello => self.pump_handshake_frame(&envelope)?,
                EnvelopeKind::Rpc => {
                    return Err(ChannelError::Frame("initiator received an rpc".into()))
                }
            }
        }
        Ok(reply)
    }

    /// Processes inbound traffic on the responder side, dispatching RPC
    /// bodies to `handler` and answering with encrypted replies.
    pub fn pump_responder(&mut self, handler: &mut dyn RpcHandler) -> Result<(), ChannelError> {
        for payload in self.inbound_frames() {
            let envelope = unframe(&payload)?;
            match envelope.kind {
                EnvelopeKind::Hello => self.pump_handshake_frame(&envelope)?,
                EnvelopeKind::Rpc => {
                    if envelope.seq <= self.last_in_rpc_seq {
                        return Err(ChannelError::SeqViolation(format!(
                            "rpc seq {} after {}",
                            envelope.seq, self.last_in_rpc_seq
                        )));
                    }
                    self.last_in_rpc_seq = envelope.seq;
                    let body = self.decrypt_body(envelope.body)?;
                    let reply = match body.attr("txn-id") {
                        Some(txn) => match self.txn_cache.get(txn) {
                            Some(cached) => cached.clone(),
                            None => {
                                let reply = handler.handle_rpc(&body);
                                self.txn_cache.insert(txn.to_string(), reply.clone());
                                reply
                            }
                        },
                        None => handler.handle_rpc(&body),
                    };
                    // Replies carry the request's seq.
                    self.send_envelope(EnvelopeKind::RpcReply, envelope.seq, &reply)?;
                }
                EnvelopeKind::RpcReply | EnvelopeKind::Notification => {
                    return Err(ChannelError::Frame("responder received a reply/notification".into()))
                }
            }
        }
        Ok(())
    }
}

fn collect_key_ids(el: &Element, labels: &mut Vec<String>, ids: &mut Vec<String>) {
    if let Some(label) = el.attr(codec::ATTR_ENC) {
        labels.push(label.to_string());
        if let Some(kid) = el.attr(codec::ATTR_KID) {
            for id in kid.split(',').filter(|s| !s.is_empty()) {
                if !ids.iter().any(|x| x == id) {
                    ids.push(id.to_string());
                }
            }
        }
    }
    for child in el.child_elements() {
        collect_key_ids(child, labels, ids);
    }
}

/// Best-effort operation name for logging: the first child element tag of an
/// `<rpc>` body, or the body tag itself.
pub fn rpc_operation_name(body: &Element) -> String {
    if body.tag == "rpc" {
        if let Some(op) = body.child_elements().next() {
            return op.tag.clone();
        }
    }
    body.tag.clone()
}

/// Runs the HELLO exchange over the endpoints' transports.
pub fn open_session(initiator: &mut Endpoint, responder: &mut Endpoint) -> Result<(), ChannelError> {
    initiator.send_hello()?;
    responder.pump_handshake()?;
    initiator.pump_handshake()?;
    if !initiator.is_open() || !responder.is_open() {
        return Err(ChannelError::Frame("handshake incomplete".into()));
    }
    Ok(())
}

/// Stop-and-wait RPC with retries, pumping the responder in-process.
///
/// One attempt is: send, let the responder process, collect the reply. A
/// lost or unreachable exchange counts as a timeout of `cfg.timeout_s`
/// scenario-seconds; idempotent and transaction-tagged RPCs are retried up
/// to `cfg.max_retries` times.
pub fn rpc_roundtrip(
    initiator: &mut Endpoint,
    responder: &mut Endpoint,
    handler: &mut dyn RpcHandler,
    body: &Element,
) -> Result<Element, ChannelError> {
    let attempts = 1 + initiator.cfg.max_retries;
    let mut last_starvation: Option<ChannelError> = None;
    for _ in 0..attempts {
        match initiator.send_rpc(body) {
            Ok(_) => {}
            Err(e @ ChannelError::KeyStarvation { .. }) => return Err(e),
            Err(ChannelError::Unreachable) => continue,
            Err(e) => return Err(e),
        }
        match responder.pump_responder(handler) {
            Ok(()) => {}
            Err(ChannelError::Unreachable) => continue,
            Err(e @ ChannelError::KeyStarvation { .. }) => {
                // The reply could not be protected; the initiator times out.
                last_starvation = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        }
        if let Some(reply) = initiator.pump_initiator()? {
            return Ok(reply);
        }
    }
    if let Some(e) = last_starvation {
        return Err(e);
    }
    Err(ChannelError::Timeout { attempts, timeout_s: initiator.cfg.timeout_s })
}
