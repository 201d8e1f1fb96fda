//! Signed transactional envelope in JWS compact form.
//!
//! ```text
//! base64url(header) "." base64url(claims_bytes) "." base64url(r || s)
//! ```
//!
//! The signature is ES256 over the ASCII of the first two segments. Received
//! envelopes keep the exact header and claims bytes they arrived with; the
//! verifier never re-serializes anything before checking the signature.

mod keys;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use serde_json::{Map, Value};
use thiserror::Error;
use uuid::Uuid;

use crate::semantic::{to_canonical_vec, validate_payload, SemanticError, SemanticPayload};

pub use keys::{keygen, AgentIdentity, Keystore, KEYSTORE_ENV};

pub const ALGORITHM: &str = "ES256";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvelopeError {
    #[error("entropy source unavailable: {0}")]
    EntropyUnavailable(String),
    #[error("identity has no private key")]
    NoPrivateKey,
    #[error("signer {0:?} is not in the keystore")]
    UnknownKey(String),
    #[error("signature does not match the received bytes")]
    SignatureMismatch,
    #[error("malformed envelope: {0}")]
    MalformedEnvelope(String),
    #[error("invalid claims: {0}")]
    InvalidClaims(String),
    #[error("invalid key: {0}")]
    InvalidKey(String),
    #[error("agent {0:?} already present in keystore")]
    DuplicateAgent(String),
    #[error("keystore: {0}")]
    Keystore(String),
}

impl From<SemanticError> for EnvelopeError {
    fn from(e: SemanticError) -> Self {
        EnvelopeError::InvalidClaims(e.to_string())
    }
}

/// Lowercase hyphenated UUID text, the only accepted form of a transaction id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TransactionId(String);

impl TransactionId {
    pub fn new_random() -> Self {
        TransactionId(Uuid::new_v4().hyphenated().to_string())
    }

    pub fn from_uuid(id: Uuid) -> Self {
        TransactionId(id.hyphenated().to_string())
    }

    pub fn parse(text: &str) -> Result<Self, EnvelopeError> {
        let id = Uuid::try_parse(text)
            .map_err(|e| EnvelopeError::InvalidClaims(format!("transaction_id: {e}")))?;
        let canonical = id.hyphenated().to_string();
        if canonical != text {
            return Err(EnvelopeError::InvalidClaims(
                "transaction_id must be lowercase hyphenated UUID text".into(),
            ));
        }
        Ok(TransactionId(canonical))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for TransactionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeClaims {
    pub sender: String,
    pub recipient: String,
    pub transaction_id: TransactionId,
    pub sequence: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub payload: SemanticPayload,
}

impl EnvelopeClaims {
    pub fn to_value(&self) -> Value {
        let mut map = Map::new();
        map.insert("sender".into(), self.sender.clone().into());
        map.insert("recipient".into(), self.recipient.clone().into());
        map.insert("transaction_id".into(), self.transaction_id.as_str().into());
        map.insert("sequence".into(), self.sequence.into());
        map.insert("timestamp".into(), self.timestamp.into());
        map.insert("payload".into(), self.payload.to_value());
        Value::Object(map)
    }

    /// Canonical bytes; what a signer puts on the wire.
    pub fn encode(&self) -> Vec<u8> {
        to_canonical_vec(&self.to_value())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        let value: Value = serde_json::from_slice(bytes)
            .map_err(|e| EnvelopeError::InvalidClaims(format!("claims text: {e}")))?;
        Self::from_value(&value)
    }

    pub fn from_value(value: &Value) -> Result<Self, EnvelopeError> {
        let obj = value
            .as_object()
            .ok_or_else(|| EnvelopeError::InvalidClaims("claims are not an object".into()))?;
        let text = |name: &str| -> Result<String, EnvelopeError> {
            match obj.get(name) {
                Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
                _ => Err(EnvelopeError::InvalidClaims(format!(
                    "{name} must be a non-empty string"
                ))),
            }
        };
        let uint = |name: &str| -> Result<u64, EnvelopeError> {
            obj.get(name).and_then(Value::as_u64).ok_or_else(|| {
                EnvelopeError::InvalidClaims(format!("{name} must be an unsigned integer"))
            })
        };
        let transaction_id = TransactionId::parse(&text("transaction_id")?)?;
        let timestamp = uint("timestamp")?;
        if timestamp == 0 {
            return Err(EnvelopeError::InvalidClaims("timestamp must be positive".into()));
        }
        let payload = obj
            .get("payload")
            .ok_or_else(|| EnvelopeError::InvalidClaims("payload missing".into()))?;
        Ok(EnvelopeClaims {
            sender: text("sender")?,
            recipient: text("recipient")?,
            transaction_id,
            sequence: uint("sequence")?,
            timestamp,
            payload: validate_payload(payload)?,
        })
    }
}

/// The decoded protected header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtectedHeader {
    pub alg: String,
    pub kid: String,
}

impl ProtectedHeader {
    fn encode(&self) -> Vec<u8> {
        let mut map = Map::new();
        map.insert("alg".into(), self.alg.clone().into());
        map.insert("kid".into(), self.kid.clone().into());
        to_canonical_vec(&Value::Object(map))
    }

    fn decode(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        let value: Value = serde_json::from_slice(bytes)
            .map_err(|e| EnvelopeError::MalformedEnvelope(format!("header: {e}")))?;
        let field = |name: &str| {
            value
                .get(name)
                .and_then(Value::as_str)
                .filter(|s| !s.is_empty())
                .map(str::to_owned)
                .ok_or_else(|| EnvelopeError::MalformedEnvelope(format!("header.{name} missing")))
        };
        let alg = field("alg")?;
        if alg != ALGORITHM {
            return Err(EnvelopeError::MalformedEnvelope(format!(
                "unsupported alg {alg:?}"
            )));
        }
        Ok(ProtectedHeader { alg, kid: field("kid")? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    header: ProtectedHeader,
    header_bytes: Vec<u8>,
    claims_bytes: Vec<u8>,
    signature: [u8; 64],
}

impl Envelope {
    /// Assembles an envelope from raw parts without checking the signature.
    pub fn from_parts(
        header_bytes: Vec<u8>,
        claims_bytes: Vec<u8>,
        signature: [u8; 64],
    ) -> Result<Self, EnvelopeError> {
        let header = ProtectedHeader::decode(&header_bytes)?;
        Ok(Envelope {
            header,
            header_bytes,
            claims_bytes,
            signature,
        })
    }

    pub fn header(&self) -> &ProtectedHeader {
        &self.header
    }

    pub fn kid(&self) -> &str {
        &self.header.kid
    }

    pub fn header_bytes(&self) -> &[u8] {
        &self.header_bytes
    }

    pub fn claims_bytes(&self) -> &[u8] {
        &self.claims_bytes
    }

    pub fn signature(&self) -> &[u8; 64] {
        &self.signature
    }

    /// Replaces the claims bytes, keeping the old signature. Only useful for
    /// building tampered messages.
    pub fn with_claims_bytes(mut self, claims_bytes: Vec<u8>) -> Self {
        self.claims_bytes = claims_bytes;
        self
    }

    pub fn with_signature(mut self, signature: [u8; 64]) -> Self {
        self.signature = signature;
        self
    }

    /// Decodes the claims without any signature check. The result is untrusted.
    pub fn unverified_claims(&self) -> Result<EnvelopeClaims, EnvelopeError> {
        EnvelopeClaims::decode(&self.claims_bytes)
    }

    fn signing_input(header_bytes: &[u8], claims_bytes: &[u8]) -> Vec<u8> {
        let mut input = URL_SAFE_NO_PAD.encode(header_bytes).into_bytes();
        input.push(b'.');
        input.extend_from_slice(URL_SAFE_NO_PAD.encode(claims_bytes).as_bytes());
        input
    }

    /// Length of [`compact_encode`]'s output, computed without allocating it.
    pub fn compact_len(&self) -> usize {
        base64::encoded_len(self.header_bytes.len(), false).unwrap_or(0)
            + base64::encoded_len(self.claims_bytes.len(), false).unwrap_or(0)
            + base64::encoded_len(64, false).unwrap_or(0)
            + 2
    }
}

pub fn sign_envelope(
    claims: &EnvelopeClaims,
    identity: &AgentIdentity,
) -> Result<Envelope, EnvelopeError> {
    if !identity.has_private_key() {
        return Err(EnvelopeError::NoPrivateKey);
    }
    let header = ProtectedHeader {
        alg: ALGORITHM.into(),
        kid: identity.agent_id().to_owned(),
    };
    let header_bytes = header.encode();
    let claims_bytes = claims.encode();
    let signature = identity.sign(&Envelope::signing_input(&header_bytes, &claims_bytes))?;
    Ok(Envelope {
        header,
        header_bytes,
        claims_bytes,
        signature,
    })
}

/// Checks the signer, then the signature over the received bytes, then the
/// claims grammar.
pub fn verify_envelope(
    envelope: &Envelope,
    keystore: &Keystore,
) -> Result<EnvelopeClaims, EnvelopeError> {
    let signer = keystore
        .get(envelope.kid())
        .ok_or_else(|| EnvelopeError::UnknownKey(envelope.kid().to_owned()))?;
    let input = Envelope::signing_input(&envelope.header_bytes, &envelope.claims_bytes);
    if !signer.verify(&input, &envelope.signature) {
        return Err(EnvelopeError::SignatureMismatch);
    }
    let claims = EnvelopeClaims::decode(&envelope.claims_bytes)
        .map_err(|e| EnvelopeError::MalformedEnvelope(e.to_string()))?;
    if claims.sender != envelope.kid() {
        return Err(EnvelopeError::MalformedEnvelope(format!(
            "sender {:?} does not match kid {:?}",
            claims.sender,
            envelope.kid()
        )));
    }
    Ok(claims)
}

pub fn compact_encode(envelope: &Envelope) -> String {
    let mut out = String::with_capacity(envelope.compact_len());
    URL_SAFE_NO_PAD.encode_string(&envelope.header_bytes, &mut out);
    out.push('.');
    URL_SAFE_NO_PAD.encode_string(&envelope.claims_bytes, &mut out);
    out.push('.');
    URL_SAFE_NO_PAD.encode_string(envelope.signature, &mut out);
    out
}

pub fn compact_decode(text: &str) -> Result<Envelope, EnvelopeError> {
    let mut parts = text.split('.');
    let (Some(h), Some(c), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(EnvelopeError::MalformedEnvelope(
            "expected three dot-separated segments".into(),
        ));
    };
    let decode = |segment: &str, what: &str| {
        URL_SAFE_NO_PAD
            .decode(segment)
            .map_err(|e| EnvelopeError::MalformedEnvelope(format!("{what}: {e}")))
    };
    let header_bytes = decode(h, "header")?;
    let claims_bytes = decode(c, "claims")?;
    let signature: [u8; 64] = decode(s, "signature")?
        .try_into()
        .map_err(|_| EnvelopeError::MalformedEnvelope("signature must be 64 bytes".into()))?;
    Envelope::from_parts(header_bytes, claims_bytes, signature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic::Act;

    fn claims(sender: &str) -> EnvelopeClaims {
        EnvelopeClaims {
            sender: sender.into(),
            recipient: "bank".into(),
            transaction_id: TransactionId::new_random(),
            sequence: 0,
            timestamp: 1_760_000_000,
            payload: Act::new("i1", "transfer").with_param("amount", 100).into(),
        }
    }

    fn store_with(ids: &[&AgentIdentity]) -> Keystore {
        let mut store = Keystore::new();
        for id in ids {
            store.insert(id.public_only()).unwrap();
        }
        store
    }

    #[test]
    fn sign_then_verify() {
        let alice = keygen("alice").unwrap();
        let c = claims("alice");
        let env = sign_envelope(&c, &alice).unwrap();
        assert_eq!(verify_envelope(&env, &store_with(&[&alice])).unwrap(), c);
    }

    #[test]
    fn compact_shape() {
        let alice = keygen("alice").unwrap();
        let text = compact_encode(&sign_envelope(&claims("alice"), &alice).unwrap());
        assert_eq!(text.matches('.').count(), 2);
        assert!(!text.contains(['+', '/', '=']));
        let env = compact_decode(&text).unwrap();
        assert_eq!(compact_encode(&env), text);
        assert_eq!(env.compact_len(), text.len());
        assert!(verify_envelope(&env, &store_with(&[&alice])).is_ok());
    }

    #[test]
    fn amount_tamper_detected() {
        let alice = keygen("alice").unwrap();
        let env = sign_envelope(&claims("alice"), &alice).unwrap();
        let tampered_bytes = String::from_utf8(env.claims_bytes().to_vec())
            .unwrap()
            .replace(r#""amount":100"#, r#""amount":10000"#);
        assert_ne!(tampered_bytes.as_bytes(), env.claims_bytes());
        let tampered = env.with_claims_bytes(tampered_bytes.into_bytes());
        assert_eq!(
            verify_envelope(&tampered, &store_with(&[&alice])),
            Err(EnvelopeError::SignatureMismatch)
        );
    }

    #[test]
    fn unknown_signer() {
        let mallory = keygen("mallory").unwrap();
        let alice = keygen("alice").unwrap();
        let env = sign_envelope(&claims("mallory"), &mallory).unwrap();
        assert_eq!(
            verify_envelope(&env, &store_with(&[&alice])),
            Err(EnvelopeError::UnknownKey("mallory".into()))
        );
    }

    #[test]
    fn public_identity_cannot_sign() {
        let alice = keygen("alice").unwrap().public_only();
        assert_eq!(
            sign_envelope(&claims("alice"), &alice),
            Err(EnvelopeError::NoPrivateKey)
        );
    }

    #[test]
    fn malformed_compact_text() {
        for text in ["abc", "a.b", "a.b.c.d", "!!.e30.AA", ""] {
            assert!(matches!(
                compact_decode(text),
                Err(EnvelopeError::MalformedEnvelope(_))
            ));
        }
        // valid base64url but a short signature
        let text = format!("{}.e30.AAAA", URL_SAFE_NO_PAD.encode(br#"{"alg":"ES256","kid":"a"}"#));
        assert!(matches!(
            compact_decode(&text),
            Err(EnvelopeError::MalformedEnvelope(_))
        ));
        // padding characters are not part of the alphabet
        let text = format!("{}=.e30.AAAA", URL_SAFE_NO_PAD.encode(br#"{"alg":"ES256","kid":"a"}"#));
        assert!(compact_decode(&text).is_err());
    }

    #[test]
    fn wrong_algorithm_rejected() {
        let header = br#"{"alg":"none","kid":"a"}"#.to_vec();
        assert!(matches!(
            Envelope::from_parts(header, b"{}".to_vec(), [0; 64]),
            Err(EnvelopeError::MalformedEnvelope(_))
        ));
    }

    #[test]
    fn sender_must_match_kid() {
        let alice = keygen("alice").unwrap();
        let env = sign_envelope(&claims("bob"), &alice).unwrap();
        assert!(matches!(
            verify_envelope(&env, &store_with(&[&alice])),
            Err(EnvelopeError::MalformedEnvelope(_))
        ));
    }

    #[test]
    fn transaction_id_grammar() {
        assert!(TransactionId::parse("6f1c1d1e-8d5b-4c3a-9f00-1234567890ab").is_ok());
        assert!(TransactionId::parse("6F1C1D1E-8D5B-4C3A-9F00-1234567890AB").is_err());
        assert!(TransactionId::parse("6f1c1d1e8d5b4c3a9f001234567890ab").is_err());
        assert!(TransactionId::parse("txn-1").is_err());
    }

    #[test]
    fn verification_uses_received_bytes() {
        // Same claims, different (non-canonical) byte layout, signed as-is: still verifies.
        let alice = keygen("alice").unwrap();
        let c = claims("alice");
        let pretty = serde_json::to_vec_pretty(&c.to_value()).unwrap();
        let header = ProtectedHeader { alg: ALGORITHM.into(), kid: "alice".into() }.encode();
        let sig = alice.sign(&Envelope::signing_input(&header, &pretty)).unwrap();
        let env = Envelope::from_parts(header, pretty, sig).unwrap();
        assert_eq!(verify_envelope(&env, &store_with(&[&alice])).unwrap(), c);
        // Re-serializing would give different bytes, which this signature does not cover.
        let canonical = env.clone().with_claims_bytes(c.encode());
        assert_eq!(
            verify_envelope(&canonical, &store_with(&[&alice])),
            Err(EnvelopeError::SignatureMismatch)
        );
    }
}
