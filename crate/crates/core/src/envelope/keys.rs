//! Agent identities and the keystore file.
//!
//! The keystore file is a JSON object mapping agent ids to
//! `{"public_key": "<hex>", "private_key": "<hex>"}`. Public keys are either a
//! SEC1 point (compressed or uncompressed) or a DER SubjectPublicKeyInfo, both
//! hex encoded. Private keys are the 32-byte scalar in hex.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use p256::pkcs8::DecodePublicKey;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::EnvelopeError;

/// Environment variable consulted when no keystore path is given.
pub const KEYSTORE_ENV: &str = "LACP_KEYSTORE";

#[derive(Clone)]
pub struct AgentIdentity {
    agent_id: String,
    public_key: VerifyingKey,
    private_key: Option<SigningKey>,
}

impl fmt::Debug for AgentIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgentIdentity")
            .field("agent_id", &self.agent_id)
            .field("public_key", &hex::encode(self.public_key_bytes()))
            .field("has_private_key", &self.private_key.is_some())
            .finish()
    }
}

impl AgentIdentity {
    /// Generates a fresh P-256 keypair from the operating system's entropy source.
    pub fn generate(agent_id: impl Into<String>) -> Result<Self, EnvelopeError> {
        let agent_id = checked_id(agent_id.into())?;
        let mut seed = [0u8; 32];
        // Rejection sampling: an all-zero or out-of-range scalar is vanishingly rare.
        for _ in 0..16 {
            OsRng
                .try_fill_bytes(&mut seed)
                .map_err(|e| EnvelopeError::EntropyUnavailable(e.to_string()))?;
            if let Ok(sk) = SigningKey::from_slice(&seed) {
                let identity = Self::from_signing_key(agent_id, sk);
                identity.self_test()?;
                return Ok(identity);
            }
        }
        Err(EnvelopeError::EntropyUnavailable(
            "could not draw a valid scalar".into(),
        ))
    }

    pub fn from_signing_key(agent_id: impl Into<String>, key: SigningKey) -> Self {
        AgentIdentity {
            agent_id: agent_id.into(),
            public_key: *key.verifying_key(),
            private_key: Some(key),
        }
    }

    pub fn from_public_key(
        agent_id: impl Into<String>,
        key: VerifyingKey,
    ) -> Result<Self, EnvelopeError> {
        Ok(AgentIdentity {
            agent_id: checked_id(agent_id.into())?,
            public_key: key,
            private_key: None,
        })
    }

    /// Deterministic identity from a 32-byte secret scalar. Used for fixtures.
    pub fn from_secret_bytes(agent_id: impl Into<String>, secret: &[u8]) -> Result<Self, EnvelopeError> {
        let sk = SigningKey::from_slice(secret)
            .map_err(|_| EnvelopeError::InvalidKey("private key is not a valid P-256 scalar".into()))?;
        Ok(Self::from_signing_key(checked_id(agent_id.into())?, sk))
    }

    pub fn agent_id(&self) -> &str {
        &self.agent_id
    }

    pub fn verifying_key(&self) -> &VerifyingKey {
        &self.public_key
    }

    pub fn signing_key(&self) -> Option<&SigningKey> {
        self.private_key.as_ref()
    }

    pub fn has_private_key(&self) -> bool {
        self.private_key.is_some()
    }

    /// Uncompressed SEC1 point, 65 bytes.
    pub fn public_key_bytes(&self) -> Vec<u8> {
        self.public_key.to_encoded_point(false).as_bytes().to_vec()
    }

    /// The same identity without its private key.
    pub fn public_only(&self) -> Self {
        AgentIdentity {
            agent_id: self.agent_id.clone(),
            public_key: self.public_key,
            private_key: None,
        }
    }

    pub fn sign(&self, message: &[u8]) -> Result<[u8; 64], EnvelopeError> {
        let key = self.private_key.as_ref().ok_or(EnvelopeError::NoPrivateKey)?;
        let sig: Signature = key.sign(message);
        Ok(sig.to_bytes().into())
    }

    pub fn verify(&self, message: &[u8], signature: &[u8; 64]) -> bool {
        match Signature::from_slice(signature) {
            Ok(sig) => self.public_key.verify(message, &sig).is_ok(),
            Err(_) => false,
        }
    }

    fn self_test(&self) -> Result<(), EnvelopeError> {
        let sig = self.sign(b"lacp keypair self-test")?;
        if self.verify(b"lacp keypair self-test", &sig) {
            Ok(())
        } else {
            Err(EnvelopeError::InvalidKey("keypair self-test failed".into()))
        }
    }
}

fn checked_id(agent_id: String) -> Result<String, EnvelopeError> {
    if agent_id.is_empty() {
        Err(EnvelopeError::InvalidKey("agent_id must be non-empty".into()))
    } else {
        Ok(agent_id)
    }
}

/// Fresh identity with a random keypair.
pub fn keygen(agent_id: impl Into<String>) -> Result<AgentIdentity, EnvelopeError> {
    AgentIdentity::generate(agent_id)
}

#[derive(Debug, Serialize, Deserialize)]
struct KeyEntry {
    public_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    private_key: Option<String>,
}

/// Agent id → identity. Ids are unique by construction.
#[derive(Debug, Clone, Default)]
pub struct Keystore {
    identities: HashMap<String, AgentIdentity>,
}

impl Keystore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an identity, failing if the id is already present.
    pub fn insert(&mut self, identity: AgentIdentity) -> Result<(), EnvelopeError> {
        if self.identities.contains_key(identity.agent_id()) {
            return Err(EnvelopeError::DuplicateAgent(identity.agent_id().to_owned()));
        }
        self.identities.insert(identity.agent_id().to_owned(), identity);
        Ok(())
    }

    /// Adds or replaces an identity.
    pub fn upsert(&mut self, identity: AgentIdentity) {
        self.identities.insert(identity.agent_id().to_owned(), identity);
    }

    pub fn get(&self, agent_id: &str) -> Option<&AgentIdentity> {
        self.identities.get(agent_id)
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.identities.keys().map(String::as_str)
    }

    /// A copy holding only public keys, safe to hand to peers.
    pub fn public_view(&self) -> Keystore {
        Keystore {
            identities: self
                .identities
                .iter()
                .map(|(k, v)| (k.clone(), v.public_only()))
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, EnvelopeError> {
        let entries: BTreeMap<String, KeyEntry> = serde_json::from_str(text)
            .map_err(|e| EnvelopeError::Keystore(format!("bad keystore text: {e}")))?;
        let mut store = Keystore::new();
        for (id, entry) in entries {
            let identity = match entry.private_key {
                Some(sk_hex) => {
                    let secret = hex::decode(sk_hex.trim())
                        .map_err(|e| EnvelopeError::InvalidKey(format!("{id}: private key hex: {e}")))?;
                    let identity = AgentIdentity::from_secret_bytes(id.clone(), &secret)?;
                    let listed = parse_public_key(&entry.public_key)
                        .map_err(|e| EnvelopeError::InvalidKey(format!("{id}: {e}")))?;
                    if listed != *identity.verifying_key() {
                        return Err(EnvelopeError::InvalidKey(format!(
                            "{id}: public key does not match private key"
                        )));
                    }
                    identity
                }
                None => {
                    let pk = parse_public_key(&entry.public_key)
                        .map_err(|e| EnvelopeError::InvalidKey(format!("{id}: {e}")))?;
                    AgentIdentity::from_public_key(id, pk)?
                }
            };
            store.insert(identity)?;
        }
        Ok(store)
    }

    pub fn to_json(&self) -> String {
        let entries: BTreeMap<&str, KeyEntry> = self
            .identities
            .iter()
            .map(|(id, identity)| {
                let entry = KeyEntry {
                    public_key: hex::encode(identity.public_key_bytes()),
                    private_key: identity
                        .signing_key()
                        .map(|sk| hex::encode(sk.to_bytes())),
                };
                (id.as_str(), entry)
            })
            .collect();
        serde_json::to_string_pretty(&entries).expect("keystore entries serialize")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EnvelopeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| EnvelopeError::Keystore(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EnvelopeError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json())
            .map_err(|e| EnvelopeError::Keystore(format!("{}: {e}", path.display())))
    }
}

fn parse_public_key(text: &str) -> Result<VerifyingKey, String> {
    let bytes = hex::decode(text.trim()).map_err(|e| format!("public key hex: {e}"))?;
    match bytes.first() {
        Some(0x02..=0x04) => {
            VerifyingKey::from_sec1_bytes(&bytes).map_err(|_| "public key is not a curve point".into())
        }
        // DER SEQUENCE tag
        Some(0x30) => VerifyingKey::from_public_key_der(&bytes)
            .map_err(|e| format!("public key SPKI: {e}")),
        _ => Err("public key is neither a SEC1 point nor SPKI".into()),
    }
}
