//! API keys encrypted at rest under a service-level secret.

use std::sync::Arc;

use chacha20poly1305::aead::{Aead, Generate, KeyInit};
use chacha20poly1305::{Key, XChaCha20Poly1305, XNonce};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::KeyResolver;
use crate::store::{is_valid_key_component, Collection, DocumentRef, Store, StoreError, StoreExt};

#[derive(Debug, Error)]
pub enum CredentialError {
    #[error("invalid key reference {0:?}")]
    InvalidRef(String),
    #[error("credential {0:?} cannot be decrypted with the configured secret")]
    Decrypt(String),
    #[error(transparent)]
    Storage(#[from] StoreError),
}

#[derive(Serialize, Deserialize)]
struct Sealed {
    nonce: String,
    ciphertext: String,
}

pub struct CredentialStore {
    store: Arc<dyn Store>,
    cipher: XChaCha20Poly1305,
}

impl CredentialStore {
    pub fn new(store: Arc<dyn Store>, secret: &str) -> Self {
        let digest = Sha256::digest(secret.as_bytes());
        let key = Key::try_from(&digest[..]).expect("sha256 output is 32 bytes");
        Self { store, cipher: XChaCha20Poly1305::new(&key) }
    }

    fn doc(key_ref: &str) -> Result<DocumentRef, CredentialError> {
        if !is_valid_key_component(key_ref) {
            return Err(CredentialError::InvalidRef(key_ref.to_string()));
        }
        Ok(DocumentRef::new(Collection::Credentials, key_ref))
    }

    /// Stores or replaces the key under `key_ref`.
    pub fn set(&self, key_ref: &str, api_key: &str) -> Result<(), CredentialError> {
        let doc = Self::doc(key_ref)?;
        let nonce = XNonce::generate();
        let ciphertext = self.cipher.encrypt(&nonce, api_key.as_bytes()).expect("encryption is infallible");
        let sealed = Sealed { nonce: hex::encode(nonce), ciphertext: hex::encode(ciphertext) };
        loop {
            let current = self.store.get(&doc)?.map_or(0, |v| v.version);
            match self.store.put_json(&doc, &sealed, current) {
                Ok(_) => return Ok(()),
                Err(StoreError::VersionConflict { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn get(&self, key_ref: &str) -> Result<Option<String>, CredentialError> {
        let doc = Self::doc(key_ref)?;
        let Some(stored) = self.store.get_json::<Sealed>(&doc)? else {
            return Ok(None);
        };
        let bad = || CredentialError::Decrypt(key_ref.to_string());
        let nonce = hex::decode(&stored.value.nonce).map_err(|_| bad())?;
        let nonce = XNonce::try_from(&nonce[..]).map_err(|_| bad())?;
        let ciphertext = hex::decode(&stored.value.ciphertext).map_err(|_| bad())?;
        let plain = self.cipher.decrypt(&nonce, ciphertext.as_slice()).map_err(|_| bad())?;
        String::from_utf8(plain).map(Some).map_err(|_| bad())
    }

    pub fn delete(&self, key_ref: &str) -> Result<bool, CredentialError> {
        let doc = Self::doc(key_ref)?;
        match self.store.get(&doc)? {
            None => Ok(false),
            Some(v) => {
                self.store.delete(&doc, v.version)?;
                Ok(true)
            }
        }
    }

    /// Stored key references; never the keys themselves.
    pub fn refs(&self) -> Result<Vec<String>, CredentialError> {
        Ok(self.store.list(Collection::Credentials, None)?)
    }
}

impl KeyResolver for CredentialStore {
    fn resolve(&self, key_ref: &str) -> Option<String> {
        self.get(key_ref).ok().flatten()
    }
}
