//! Hashing, signing, authenticated encryption and threshold secret sharing.
//!
//! The concrete suite is SHA-256, Ed25519, AES-256-GCM and X25519 sealing.
//! It is recorded in every ledger and snapshot file header as [`SUITE`].

mod seal;
mod shamir;

use std::fmt;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce as GcmNonce};
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

pub use seal::{EncryptionKeyPair, EncryptionPublicKey, SealedBox};
pub use shamir::{recover_secret, split_secret, SecretShare};

/// Algorithm suite identifier pinned into file headers.
pub const SUITE: &str = "sha256/ed25519/aes256gcm/x25519-seal";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("authenticated decryption failed")]
    Decryption,
    #[error("invalid parameters: {0}")]
    Parameter(String),
    #[error("need at least {needed} shares, got {got}")]
    Threshold { needed: usize, got: usize },
}

/// 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Digest(#[serde(with = "crate::hexser")] pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(text: &str) -> Option<Digest> {
        let raw = crate::hexser::decode_strict(text).ok()?;
        Some(Digest(raw.try_into().ok()?))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn hash(data: &[u8]) -> Digest {
    use sha2::Digest as _;
    Digest(Sha256::digest(data).into())
}

/// Hash of the concatenation of `parts`, without any framing.
pub fn hash_concat(parts: &[&[u8]]) -> Digest {
    use sha2::Digest as _;
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    Digest(hasher.finalize().into())
}

/// Public verification key of a node, member or service identity.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PublicId(#[serde(with = "crate::hexser")] pub [u8; 32]);

impl PublicId {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(text: &str) -> Option<PublicId> {
        let raw = crate::hexser::decode_strict(text).ok()?;
        Some(PublicId(raw.try_into().ok()?))
    }
}

impl fmt::Debug for PublicId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicId({})", &self.to_hex()[..12])
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature(#[serde(with = "crate::hexser")] pub [u8; 64]);

impl Signature {
    pub const EMPTY: Signature = Signature([0u8; 64]);
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..6]))
    }
}

/// Ed25519 signing key together with its public half.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn from_seed(seed: [u8; 32]) -> KeyPair {
        KeyPair {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> KeyPair {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        KeyPair::from_seed(seed)
    }

    pub fn seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn public_id(&self) -> PublicId {
        PublicId(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.signing.sign(msg).to_bytes())
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public_id", &self.public_id())
            .finish_non_exhaustive()
    }
}

/// Malformed keys or signatures verify as `false`.
pub fn verify(public_id: &PublicId, msg: &[u8], sig: &Signature) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(&public_id.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    key.verify(msg, &sig).is_ok()
}

/// 256-bit key for AES-256-GCM.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymmetricSecret(#[serde(with = "crate::hexser")] pub [u8; 32]);

impl SymmetricSecret {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> SymmetricSecret {
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        SymmetricSecret(key)
    }
}

impl fmt::Debug for SymmetricSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricSecret(..)")
    }
}

/// 96-bit AEAD nonce. Callers guarantee it is never reused under one key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Nonce(pub [u8; 12]);

pub fn aead_encrypt(secret: &SymmetricSecret, nonce: &Nonce, plaintext: &[u8], aad: &[u8]) -> Vec<u8> {
    let cipher = Aes256Gcm::new_from_slice(&secret.0).expect("32-byte key");
    cipher
        .encrypt(GcmNonce::from_slice(&nonce.0), Payload { msg: plaintext, aad })
        .expect("AES-GCM encryption of in-memory buffers cannot fail")
}

pub fn aead_decrypt(
    secret: &SymmetricSecret,
    nonce: &Nonce,
    ciphertext: &[u8],
    aad: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let cipher = Aes256Gcm::new_from_slice(&secret.0).expect("32-byte key");
    cipher
        .decrypt(GcmNonce::from_slice(&nonce.0), Payload { msg: ciphertext, aad })
        .map_err(|_| CryptoError::Decryption)
}
