//! Selective encryption of XML control messages with exact key accounting.
//!
//! Instead of sealing a whole control message, a policy selects how much of
//! it is protected: the full serialized document, only the text data inside
//! tags, or chosen tags plus the data they carry. One-time-pad material is
//! consumed byte-for-byte from externally supplied key blocks; AES-256-GCM
//! adds integrity at a flat 256-bit key cost per message. A [`PadLedger`]
//! guarantees no pad byte is ever used twice.
//!
//! Encrypted-envelope dialect:
//! * `x-enc` — cipher identifier (`otp`, `aes256gcm`, `otp+aes256gcm`)
//! * `x-kid` — comma-separated key-block identifiers, in consumption order
//! * `x-nonce` — comma-separated base64 96-bit GCM nonces, one per sealed
//!   component of the element (absent for pure OTP)
//! * `x-tag` — base64 ciphertext of an encrypted tag name; the element
//!   itself is renamed to `x-field`
//! * `<x-sealed>` — whole-document envelope produced by full encryption
//!
//! Ciphertext bytes are carried as base64 (RFC 4648, no line breaks).

use std::collections::BTreeMap;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kme::KeyBlock;
use crate::xml::{Element, XmlError, XmlNode, XmlTree};

pub const ATTR_ENC: &str = "x-enc";
pub const ATTR_KID: &str = "x-kid";
pub const ATTR_NONCE: &str = "x-nonce";
pub const ATTR_TAG: &str = "x-tag";
pub const TAG_SEALED: &str = "x-sealed";
pub const TAG_FIELD: &str = "x-field";

const AES_KEY_BYTES: usize = 32;
const GCM_TAG_BYTES: usize = 16;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Xml(#[from] XmlError),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("pad too short: {data_len} data bytes, {pad_len} pad bytes")]
    PadTooShort { data_len: usize, pad_len: usize },
    #[error("insufficient key material: need {needed_bits} bits, have {available_bits}")]
    InsufficientKeyMaterial { needed_bits: u64, available_bits: u64 },
    #[error("pad reuse attempted on key {key_id}")]
    LedgerConflict { key_id: String },
    #[error("input already carries reserved marker {0:?}")]
    ReservedMarker(String),
    #[error("unknown key id {0}")]
    UnknownKeyId(String),
    #[error("authentication failure")]
    AuthenticationFailure,
    #[error("malformed envelope: {0}")]
    MalformedEnvelope(String),
}

/// How much of a message the policy protects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncryptionLevel {
    None,
    Full,
    DataOnly,
    SelectedFields,
}

impl EncryptionLevel {
    pub fn name(&self) -> &'static str {
        match self {
            EncryptionLevel::None => "none",
            EncryptionLevel::Full => "full",
            EncryptionLevel::DataOnly => "data_only",
            EncryptionLevel::SelectedFields => "selected_fields",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CodecError> {
        match s {
            "none" => Ok(EncryptionLevel::None),
            "full" => Ok(EncryptionLevel::Full),
            "data_only" => Ok(EncryptionLevel::DataOnly),
            "selected_fields" => Ok(EncryptionLevel::SelectedFields),
            other => Err(CodecError::InvalidPolicy(format!("unknown level {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CipherSuite {
    Otp,
    Aes256,
    OtpThenAes256,
}

impl CipherSuite {
    pub fn includes_otp(&self) -> bool {
        matches!(self, CipherSuite::Otp | CipherSuite::OtpThenAes256)
    }

    pub fn includes_aes(&self) -> bool {
        matches!(self, CipherSuite::Aes256 | CipherSuite::OtpThenAes256)
    }

    /// Wire identifier carried in `x-enc`.
    pub fn label(&self) -> &'static str {
        match self {
            CipherSuite::Otp => "otp",
            CipherSuite::Aes256 => "aes256gcm",
            CipherSuite::OtpThenAes256 => "otp+aes256gcm",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CodecError> {
        match s {
            "otp" => Ok(CipherSuite::Otp),
            "aes256gcm" => Ok(CipherSuite::Aes256),
            "otp+aes256gcm" => Ok(CipherSuite::OtpThenAes256),
            other => Err(CodecError::InvalidPolicy(format!("unknown cipher {other:?}"))),
        }
    }
}

/// A validated (level, cipher, selected tags) triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptionPolicy {
    pub level: EncryptionLevel,
    pub ciphers: CipherSuite,
    pub selected_tags: std::collections::BTreeSet<String>,
}

impl EncryptionPolicy {
    pub fn none() -> Self {
        EncryptionPolicy {
            level: EncryptionLevel::None,
            ciphers: CipherSuite::Otp,
            selected_tags: Default::default(),
        }
    }

    pub fn full(ciphers: CipherSuite) -> Self {
        EncryptionPolicy { level: EncryptionLevel::Full, ciphers, selected_tags: Default::default() }
    }

    pub fn data_only(ciphers: CipherSuite) -> Self {
        EncryptionPolicy { level: EncryptionLevel::DataOnly, ciphers, selected_tags: Default::default() }
    }

    pub fn selected_fields<I, S>(ciphers: CipherSuite, tags: I) -> Result<Self, CodecError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let policy = EncryptionPolicy {
            level: EncryptionLevel::SelectedFields,
            ciphers,
            selected_tags: tags.into_iter().map(Into::into).collect(),
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.level == EncryptionLevel::SelectedFields && self.selected_tags.is_empty() {
            return Err(CodecError::InvalidPolicy(
                "selected_fields requires at least one selected tag".into(),
            ));
        }
        Ok(())
    }
}

/// Exact key-material price of one message under one policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyCost {
    pub otp_bits: u64,
    pub aes_key_bits: u64,
    pub total_bits: u64,
}

impl KeyCost {
    fn new(otp_bits: u64, aes_key_bits: u64) -> Self {
        KeyCost { otp_bits, aes_key_bits, total_bits: otp_bits + aes_key_bits }
    }
}

/// XORs `data` with the leading bytes of `pad`. Self-inverse.
pub fn otp_transform(data: &[u8], pad: &[u8]) -> Result<Vec<u8>, CodecError> {
    if pad.len() < data.len() {
        return Err(CodecError::PadTooShort { data_len: data.len(), pad_len: pad.len() });
    }
    Ok(data.iter().zip(pad).map(|(d, p)| d ^ p).collect())
}

/// Computes the key-material cost of encrypting `tree` under `policy`.
///
/// One-time-pad cost is 8 bits per plaintext byte in the policy's scope:
/// the whole serialized document (full), every text node (data only), or
/// each selected element's tag name plus the text nodes inside its subtree
/// (selected fields). AES-256 adds a flat 256-bit key when enabled.
pub fn key_cost(tree: &XmlTree, policy: &EncryptionPolicy) -> Result<KeyCost, CodecError> {
    policy.validate()?;
    if policy.level == EncryptionLevel::None {
        return Ok(KeyCost::new(0, 0));
    }
    let scope_bytes = match policy.level {
        EncryptionLevel::None => 0,
        EncryptionLevel::Full => tree.serialize().len() as u64,
        EncryptionLevel::DataOnly | EncryptionLevel::SelectedFields => {
            scope_bytes_of(&tree.root, policy, false)
        }
    };
    let otp_bits = if policy.ciphers.includes_otp() { scope_bytes * 8 } else { 0 };
    let aes_bits = if policy.ciphers.includes_aes() { 256 } else { 0 };
    Ok(KeyCost::new(otp_bits, aes_bits))
}

fn element_coverage(el: &Element, policy: &EncryptionPolicy, inside_selected: bool) -> (bool, bool) {
    match policy.level {
        EncryptionLevel::DataOnly => (false, true),
        EncryptionLevel::SelectedFields => {
            let selected = policy.selected_tags.contains(&el.tag);
            (selected, inside_selected || selected)
        }
        _ => (false, false),
    }
}

fn scope_bytes_of(el: &Element, policy: &EncryptionPolicy, inside_selected: bool) -> u64 {
    let (encrypt_tag, cover_text) = element_coverage(el, policy, inside_selected);
    let mut bytes = 0;
    if encrypt_tag {
        bytes += el.tag.len() as u64;
    }
    for child in &el.children {
        match child {
            XmlNode::Text(t) if cover_text && !t.is_empty() => bytes += t.len() as u64,
            XmlNode::Text(_) => {}
            XmlNode::Element(c) => bytes += scope_bytes_of(c, policy, cover_text),
        }
    }
    bytes
}

/// A consumed byte range within one key block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeySpan {
    pub key_id: String,
    pub start: u64,
    pub end: u64,
}

impl KeySpan {
    pub fn bits(&self) -> u64 {
        (self.end - self.start) * 8
    }
}

/// What one encryption actually consumed.
#[derive(Debug, Clone)]
pub struct ConsumptionRecord {
    pub message_id: String,
    pub otp_bits: u64,
    pub aes_key_bits: u64,
    /// Exact consumed ranges; their bit total equals `bits_used()`.
    pub spans: Vec<KeySpan>,
    /// Every key block handed to the encryptor, consumed or not.
    pub drawn_block_ids: Vec<String>,
    pub drawn_bits: u64,
}

impl ConsumptionRecord {
    pub fn empty(message_id: &str) -> Self {
        ConsumptionRecord {
            message_id: message_id.to_string(),
            otp_bits: 0,
            aes_key_bits: 0,
            spans: Vec::new(),
            drawn_block_ids: Vec::new(),
            drawn_bits: 0,
        }
    }

    pub fn bits_used(&self) -> u64 {
        self.otp_bits + self.aes_key_bits
    }
}

/// Append-only record of every pad byte ever consumed.
///
/// Each entry is a `(key_id, byte range, message_id)` triple; a new
/// consumption is admitted only if it overlaps no existing entry, which is
/// what makes the one-time property of one-time-pad material enforceable.
#[derive(Debug, Default)]
pub struct PadLedger {
    by_key: BTreeMap<String, Vec<(u64, u64, String)>>,
    entry_count: u64,
}

impl PadLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entry_count(&self) -> u64 {
        self.entry_count
    }

    fn overlaps(&self, span: &KeySpan) -> bool {
        self.by_key
            .get(&span.key_id)
            .map(|ranges| ranges.iter().any(|(s, e, _)| span.start < *e && *s < span.end))
            .unwrap_or(false)
    }

    /// Atomically admits all spans or none of them.
    pub fn check_and_append(&mut self, spans: &[KeySpan], message_id: &str) -> Result<(), CodecError> {
        for (i, span) in spans.iter().enumerate() {
            if self.overlaps(span) {
                return Err(CodecError::LedgerConflict { key_id: span.key_id.clone() });
            }
            for earlier in &spans[..i] {
                if earlier.key_id == span.key_id && span.start < earlier.end && earlier.start < span.end {
                    return Err(CodecError::LedgerConflict { key_id: span.key_id.clone() });
                }
            }
        }
        for span in spans {
            self.by_key.entry(span.key_id.clone()).or_default().push((
                span.start,
                span.end,
                message_id.to_string(),
            ));
            self.entry_count += 1;
        }
        Ok(())
    }

    /// True when no two recorded ranges overlap (holds by construction;
    /// exposed so audits can verify independently).
    pub fn is_disjoint(&self) -> bool {
        for ranges in self.by_key.values() {
            let mut sorted: Vec<_> = ranges.iter().map(|(s, e, _)| (*s, *e)).collect();
            sorted.sort_unstable();
            for pair in sorted.windows(2) {
                if pair[1].0 < pair[0].1 {
                    return false;
                }
            }
        }
        true
    }
}

struct StreamCursor<'a> {
    blocks: &'a [KeyBlock],
    idx: usize,
    off: usize,
}

impl<'a> StreamCursor<'a> {
    fn new(blocks: &'a [KeyBlock]) -> Self {
        StreamCursor { blocks, idx: 0, off: 0 }
    }

    fn take(&mut self, mut wanted: usize) -> Result<(Vec<u8>, Vec<KeySpan>), CodecError> {
        let mut bytes = Vec::with_capacity(wanted);
        let mut spans: Vec<KeySpan> = Vec::new();
        while wanted > 0 {
            let block = self
                .blocks
                .get(self.idx)
                .ok_or(CodecError::MalformedEnvelope("key stream exhausted".into()))?;
            let avail = block.material.len() - self.off;
            if avail == 0 {
                self.idx += 1;
                self.off = 0;
                continue;
            }
            let n = wanted.min(avail);
            bytes.extend_from_slice(&block.material[self.off..self.off + n]);
            spans.push(KeySpan {
                key_id: block.key_id.clone(),
                start: self.off as u64,
                end: (self.off + n) as u64,
            });
            self.off += n;
            wanted -= n;
        }
        Ok((bytes, spans))
    }
}

fn push_unique(ids: &mut Vec<String>, id: &str) {
    if !ids.iter().any(|x| x == id) {
        ids.push(id.to_string());
    }
}

struct Sealer<'a> {
    cipher: CipherSuite,
    cursor: StreamCursor<'a>,
    aes: Option<Aes256Gcm>,
    aes_key_ids: Vec<String>,
    nonce_seed: String,
    component_index: u32,
    spans: Vec<KeySpan>,
    otp_bytes: u64,
}

struct SealedComponent {
    ciphertext_b64: String,
    nonce_b64: Option<String>,
    pad_ids: Vec<String>,
}

impl<'a> Sealer<'a> {
    fn new(cipher: CipherSuite, blocks: &'a [KeyBlock]) -> Result<Self, CodecError> {
        let mut sealer = Sealer {
            cipher,
            cursor: StreamCursor::new(blocks),
            aes: None,
            aes_key_ids: Vec::new(),
            nonce_seed: String::new(),
            component_index: 0,
            spans: Vec::new(),
            otp_bytes: 0,
        };
        if cipher.includes_aes() {
            let (key, spans) = sealer.cursor.take(AES_KEY_BYTES)?;
            sealer.nonce_seed = spans[0].key_id.clone();
            for span in &spans {
                push_unique(&mut sealer.aes_key_ids, &span.key_id);
            }
            sealer.spans.extend(spans);
            sealer.aes = Some(Aes256Gcm::new(key.as_slice().into()));
        }
        Ok(sealer)
    }

    fn derive_nonce(&self, index: u32) -> [u8; 12] {
        let mut hasher = Sha256::new();
        hasher.update(b"component-nonce");
        hasher.update(self.nonce_seed.as_bytes());
        hasher.update(index.to_le_bytes());
        let digest = hasher.finalize();
        let mut nonce = [0u8; 12];
        nonce.copy_from_slice(&digest[..12]);
        nonce
    }

    fn seal(&mut self, plaintext: &[u8]) -> Result<SealedComponent, CodecError> {
        let mut pad_ids = Vec::new();
        let inner = if self.cipher.includes_otp() {
            let (pad, spans) = self.cursor.take(plaintext.len())?;
            self.otp_bytes += plaintext.len() as u64;
            for span in &spans {
                push_unique(&mut pad_ids, &span.key_id);
            }
            self.spans.extend(spans);
            otp_transform(plaintext, &pad)?
        } else {
            plaintext.to_vec()
        };
        let (ciphertext, nonce_b64) = match &self.aes {
            Some(aes) => {
                let nonce = self.derive_nonce(self.component_index);
                let ct = aes
                    .encrypt(Nonce::from_slice(&nonce), Payload { msg: &inner, aad: b"" })
                    .map_err(|_| CodecError::MalformedEnvelope("AES encryption failed".into()))?;
                (ct, Some(BASE64.encode(nonce)))
            }
            None => (inner, None),
        };
        self.component_index += 1;
        Ok(SealedComponent { ciphertext_b64: BASE64.encode(ciphertext), nonce_b64, pad_ids })
    }
}

fn reject_reserved(el: &Element) -> Result<(), CodecError> {
    if el.tag == TAG_SEALED || el.tag == TAG_FIELD {
        return Err(CodecError::ReservedMarker(el.tag.clone()));
    }
    for (name, _) in &el.attributes {
        if matches!(name.as_str(), ATTR_ENC | ATTR_KID | ATTR_NONCE | ATTR_TAG) {
            return Err(CodecError::ReservedMarker(name.clone()));
        }
    }
    for child in el.child_elements() {
        reject_reserved(child)?;
    }
    Ok(())
}

/// Encrypts `tree` under `policy`, drawing key material from `keys` in order.
///
/// The first 256 bits of the supplied stream become the per-message AES key
/// when the cipher set includes AES; one-time-pad bytes follow. Consumption
/// is all-or-nothing: on insufficient material or a ledger conflict, no pad
/// byte is recorded as used and no ciphertext is produced.
pub fn encrypt_message(
    tree: &XmlTree,
    policy: &EncryptionPolicy,
    keys: &[KeyBlock],
    ledger: &mut PadLedger,
    message_id: &str,
) -> Result<(XmlTree, ConsumptionRecord), CodecError> {
    policy.validate()?;
    if policy.level == EncryptionLevel::None {
        return Ok((tree.clone(), ConsumptionRecord::empty(message_id)));
    }
    reject_reserved(&tree.root)?;

    let cost = key_cost(tree, policy)?;
    if cost.total_bits == 0 {
        return Ok((tree.clone(), ConsumptionRecord::empty(message_id)));
    }
    let available_bits: u64 = keys.iter().map(|k| k.size_bits()).sum();
    if available_bits < cost.total_bits {
        return Err(CodecError::InsufficientKeyMaterial {
            needed_bits: cost.total_bits,
            available_bits,
        });
    }

    let mut sealer = Sealer::new(policy.ciphers, keys)?;
    let sealed_root = if policy.level == EncryptionLevel::Full {
        let document = tree.serialize();
        let component = sealer.seal(document.as_bytes())?;
        let mut envelope = Element::new(TAG_SEALED);
        apply_envelope_attrs(&mut envelope, policy.ciphers, &sealer.aes_key_ids, &[component.pad_ids.clone()], &[component.nonce_b64.clone()]);
        envelope.push_text(component.ciphertext_b64);
        envelope
    } else {
        seal_element(&tree.root, policy, false, &mut sealer)?
    };

    debug_assert_eq!(sealer.otp_bytes * 8, if policy.ciphers.includes_otp() { cost.otp_bits } else { 0 });
    ledger.check_and_append(&sealer.spans, message_id)?;

    let record = ConsumptionRecord {
        message_id: message_id.to_string(),
        otp_bits: if policy.ciphers.includes_otp() { cost.otp_bits } else { 0 },
        aes_key_bits: cost.aes_key_bits,
        spans: sealer.spans,
        drawn_block_ids: keys.iter().map(|k| k.key_id.clone()).collect(),
        drawn_bits: available_bits,
    };
    Ok((XmlTree::new(sealed_root), record))
}

fn apply_envelope_attrs(
    el: &mut Element,
    cipher: CipherSuite,
    aes_key_ids: &[String],
    component_pad_ids: &[Vec<String>],
    nonces: &[Option<String>],
) {
    el.set_attr(ATTR_ENC, cipher.label());
    let mut ids: Vec<String> = Vec::new();
    for id in aes_key_ids {
        push_unique(&mut ids, id);
    }
    for pad_ids in component_pad_ids {
        for id in pad_ids {
            push_unique(&mut ids, id);
        }
    }
    el.set_attr(ATTR_KID, ids.join(","));
    if cipher.includes_aes() {
        let joined: Vec<&str> = nonces.iter().filter_map(|n| n.as_deref()).collect();
        el.set_attr(ATTR_NONCE, joined.join(","));
    }
}

fn seal_element(
    el: &Element,
    policy: &EncryptionPolicy,
    inside_selected: bool,
    sealer: &mut Sealer<'_>,
) -> Result<Element, CodecError> {
    let (encrypt_tag, cover_text) = element_coverage(el, policy, inside_selected);

    // The element's own components (tag, then its direct text children) are
    // sealed before descending, so decrypt can replay the same pad order.
    let mut tag_component = None;
    if encrypt_tag {
        tag_component = Some(sealer.seal(el.tag.as_bytes())?);
    }
    let mut text_components: Vec<SealedComponent> = Vec::new();
    if cover_text {
        for child in &el.children {
            if let XmlNode::Text(t) = child {
                if !t.is_empty() {
                    text_components.push(sealer.seal(t.as_bytes())?);
                }
            }
        }
    }

    let mut out = Element::new(if encrypt_tag { TAG_FIELD.to_string() } else { el.tag.clone() });
    out.attributes = el.attributes.clone();

    let has_components = tag_component.is_some() || !text_components.is_empty();
    if has_components {
        let mut pad_id_groups = Vec::new();
        let mut nonces = Vec::new();
        if let Some(c) = &tag_component {
            pad_id_groups.push(c.pad_ids.clone());
            nonces.push(c.nonce_b64.clone());
        }
        for c in &text_components {
            pad_id_groups.push(c.pad_ids.clone());
            nonces.push(c.nonce_b64.clone());
        }
        apply_envelope_attrs(&mut out, policy.ciphers, &sealer.aes_key_ids, &pad_id_groups, &nonces);
        if let Some(c) = &tag_component {
            out.set_attr(ATTR_TAG, c.ciphertext_b64.clone());
        }
    }

    let mut text_iter = text_components.into_iter();
    for child in &el.children {
        match child {
            XmlNode::Text(t) => {
                if cover_text && !t.is_empty() {
                    let sealed = text_iter.next().expect("component count matches text children");
                    out.children.push(XmlNode::Text(sealed.ciphertext_b64));
                } else {
                    out.children.push(XmlNode::Text(t.clone()));
                }
            }
            XmlNode::Element(c) => {
                out.children.push(XmlNode::Element(seal_element(c, policy, cover_text, sealer)?));
            }
        }
    }
    Ok(out)
}

struct Opener<'a> {
    cipher: CipherSuite,
    cursor: StreamCursor<'a>,
    aes: Option<Aes256Gcm>,
}

impl<'a> Opener<'a> {
    fn open(&mut self, ciphertext_b64: &str, nonce_b64: Option<&str>) -> Result<Vec<u8>, CodecError> {
        let ciphertext = BASE64
            .decode(ciphertext_b64)
            .map_err(|_| CodecError::MalformedEnvelope("ciphertext is not valid base64".into()))?;
        let inner = match &self.aes {
            Some(aes) => {
                let nonce_b64 = nonce_b64
                    .ok_or(CodecError::MalformedEnvelope("missing nonce for AES component".into()))?;
                let nonce = BASE64
                    .decode(nonce_b64)
                    .map_err(|_| CodecError::MalformedEnvelope("nonce is not valid base64".into()))?;
                if nonce.len() != 12 {
                    return Err(CodecError::MalformedEnvelope("nonce must be 96 bits".into()));
                }
                if ciphertext.len() < GCM_TAG_BYTES {
                    return Err(CodecError::MalformedEnvelope("ciphertext shorter than GCM tag".into()));
                }
                aes.decrypt(Nonce::from_slice(&nonce), Payload { msg: &ciphertext, aad: b"" })
                    .map_err(|_| CodecError::AuthenticationFailure)?
            }
            None => ciphertext,
        };
        if self.cipher.includes_otp() {
            let (pad, _) = self.cursor.take(inner.len())?;
            otp_transform(&inner, &pad)
        } else {
            Ok(inner)
        }
    }
}

fn collect_envelope_info(
    el: &Element,
    labels: &mut Vec<String>,
    ids: &mut Vec<String>,
) {
    if let Some(label) = el.attr(ATTR_ENC) {
        labels.push(label.to_string());
        if let Some(kid) = el.attr(ATTR_KID) {
            for id in kid.split(',').filter(|s| !s.is_empty()) {
                push_unique(ids, id);
            }
        }
    }
    for child in el.child_elements() {
        collect_envelope_info(child, labels, ids);
    }
}

/// Inverts [`encrypt_message`], resolving key blocks through `lookup`.
///
/// A tree without any `x-enc` markers is returned unchanged.
pub fn decrypt_message<F>(tree: &XmlTree, lookup: F) -> Result<XmlTree, CodecError>
where
    F: Fn(&str) -> Option<KeyBlock>,
{
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    collect_envelope_info(&tree.root, &mut labels, &mut ids);
    if labels.is_empty() {
        return Ok(tree.clone());
    }
    let cipher = CipherSuite::parse(&labels[0])
        .map_err(|_| CodecError::MalformedEnvelope(format!("unknown cipher label {:?}", labels[0])))?;
    if labels.iter().any(|l| *l != labels[0]) {
        return Err(CodecError::MalformedEnvelope("mixed cipher labels in one message".into()));
    }

    let mut blocks = Vec::with_capacity(ids.len());
    for id in &ids {
        blocks.push(lookup(id).ok_or_else(|| CodecError::UnknownKeyId(id.clone()))?);
    }

    let mut opener = Opener { cipher, cursor: StreamCursor::new(&blocks), aes: None };
    if cipher.includes_aes() {
        let (key, _) = opener.cursor.take(AES_KEY_BYTES)?;
        opener.aes = Some(Aes256Gcm::new(key.as_slice().into()));
    }

    if tree.root.tag == TAG_SEALED {
        let nonce = tree.root.attr(ATTR_NONCE).map(str::to_string);
        let body = tree.root.text();
        let plaintext = opener.open(&body, nonce.as_deref())?;
        let document = String::from_utf8(plaintext)
            .map_err(|_| CodecError::MalformedEnvelope("decrypted document is not UTF-8".into()))?;
        return Ok(XmlTree::parse(&document)?);
    }

    let root = open_element(&tree.root, &mut opener)?;
    Ok(XmlTree::new(root))
}

fn valid_tag_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | ':'))
}

fn open_element(el: &Element, opener: &mut Opener<'_>) -> Result<Element, CodecError> {
    let encrypted = el.attr(ATTR_ENC).is_some();
    if !encrypted {
        let mut out = Element::new(el.tag.clone());
        out.attributes = el.attributes.clone();
        for child in &el.children {
            match child {
                XmlNode::Text(t) => out.children.push(XmlNode::Text(t.clone())),
                XmlNode::Element(c) => out.children.push(XmlNode::Element(open_element(c, opener)?)),
            }
        }
        return Ok(out);
    }

    let nonces: Vec<String> = el
        .attr(ATTR_NONCE)
        .map(|v| v.split(',').map(str::to_string).collect())
        .unwrap_or_default();
    let mut nonce_iter = nonces.iter();
    let mut next_nonce = |required: bool| -> Result<Option<&str>, CodecError> {
        if !required {
            return Ok(None);
        }
        nonce_iter
            .next()
            .map(|s| Some(s.as_str()))
            .ok_or(CodecError::MalformedEnvelope("missing nonce for component".into()))
    };
    let needs_nonce = opener.aes.is_some();

    // Components are opened in sealing order: the tag first, then every
    // direct text child, before descending into child elements.
    let mut tag = el.tag.clone();
    if let Some(tag_ct) = el.attr(ATTR_TAG) {
        if el.tag != TAG_FIELD {
            return Err(CodecError::MalformedEnvelope("x-tag on a non-x-field element".into()));
        }
        let nonce = next_nonce(needs_nonce)?;
        let plaintext = opener.open(tag_ct, nonce)?;
        tag = String::from_utf8(plaintext)
            .map_err(|_| CodecError::MalformedEnvelope("decrypted tag is not UTF-8".into()))?;
        if !valid_tag_name(&tag) {
            return Err(CodecError::MalformedEnvelope("decrypted tag is not a valid name".into()));
        }
    } else if el.tag == TAG_FIELD {
        return Err(CodecError::MalformedEnvelope("x-field element without x-tag".into()));
    }

    let mut opened_texts: Vec<String> = Vec::new();
    for child in &el.children {
        if let XmlNode::Text(t) = child {
            if t.is_empty() {
                opened_texts.push(String::new());
                continue;
            }
            let nonce = next_nonce(needs_nonce)?;
            let plaintext = opener.open(t, nonce)?;
            opened_texts.push(String::from_utf8(plaintext).map_err(|_| {
                CodecError::MalformedEnvelope("decrypted text is not UTF-8".into())
            })?);
        }
    }

    let mut out = Element::new(tag);
    out.attributes = el
        .attributes
        .iter()
        .filter(|(n, _)| !matches!(n.as_str(), ATTR_ENC | ATTR_KID | ATTR_NONCE | ATTR_TAG))
        .cloned()
        .collect();
    let mut text_iter = opened_texts.into_iter();
    for child in &el.children {
        match child {
            XmlNode::Text(_) => {
                out.children.push(XmlNode::Text(text_iter.next().expect("opened text count")));
            }
            XmlNode::Element(c) => out.children.push(XmlNode::Element(open_element(c, opener)?)),
        }
    }
    Ok(out)
}
