//! Public-key sealing for member recovery shares: ephemeral X25519 key
//! agreement, SHA-256 key derivation and AES-256-GCM.

use std::fmt;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use x25519_dalek::{PublicKey, StaticSecret};

use super::{aead_decrypt, aead_encrypt, hash_concat, CryptoError, Nonce, SymmetricSecret};

const SEAL_DOMAIN: &[u8] = b"consortium/seal/v1";

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EncryptionPublicKey(#[serde(with = "crate::hexser")] pub [u8; 32]);

impl fmt::Debug for EncryptionPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EncryptionPublicKey({})", &hex::encode(self.0)[..12])
    }
}

#[derive(Clone)]
pub struct EncryptionKeyPair {
    secret: StaticSecret,
}

impl EncryptionKeyPair {
    pub fn from_seed(seed: [u8; 32]) -> EncryptionKeyPair {
        EncryptionKeyPair {
            secret: StaticSecret::from(seed),
        }
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> EncryptionKeyPair {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        EncryptionKeyPair::from_seed(seed)
    }

    pub fn seed(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }

    pub fn public_key(&self) -> EncryptionPublicKey {
        EncryptionPublicKey(PublicKey::from(&self.secret).to_bytes())
    }

    pub fn open(&self, sealed: &SealedBox) -> Result<Vec<u8>, CryptoError> {
        let shared = self.secret.diffie_hellman(&PublicKey::from(sealed.ephemeral.0));
        let key = derive_key(shared.as_bytes(), &sealed.ephemeral, &self.public_key());
        aead_decrypt(&key, &Nonce([0; 12]), &sealed.ciphertext, SEAL_DOMAIN)
    }
}

impl fmt::Debug for EncryptionKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncryptionKeyPair")
            .field("public", &self.public_key())
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedBox {
    pub ephemeral: EncryptionPublicKey,
    #[serde(with = "crate::hexser")]
    pub ciphertext: Vec<u8>,
}

fn derive_key(shared: &[u8; 32], ephemeral: &EncryptionPublicKey, recipient: &EncryptionPublicKey) -> SymmetricSecret {
    SymmetricSecret(hash_concat(&[SEAL_DOMAIN, shared, &ephemeral.0, &recipient.0]).0)
}

impl SealedBox {
    /// Every seal uses a fresh ephemeral key, so the derived AEAD key is
    /// single-use and a fixed nonce is sound.
    pub fn seal<R: RngCore + CryptoRng>(recipient: &EncryptionPublicKey, plaintext: &[u8], rng: &mut R) -> SealedBox {
        let ephemeral = EncryptionKeyPair::generate(rng);
        let shared = ephemeral.secret.diffie_hellman(&PublicKey::from(recipient.0));
        let ephemeral_pub = ephemeral.public_key();
        let key = derive_key(shared.as_bytes(), &ephemeral_pub, recipient);
        SealedBox {
            ephemeral: ephemeral_pub,
            ciphertext: aead_encrypt(&key, &Nonce([0; 12]), plaintext, SEAL_DOMAIN),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn only_recipient_can_open() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let alice = EncryptionKeyPair::generate(&mut rng);
        let bob = EncryptionKeyPair::generate(&mut rng);
        let sealed = SealedBox::seal(&alice.public_key(), b"share bytes", &mut rng);
        assert_eq!(alice.open(&sealed).unwrap(), b"share bytes");
        assert_eq!(bob.open(&sealed), Err(CryptoError::Decryption));
        let mut tampered = sealed.clone();
        tampered.ciphertext[3] ^= 0x40;
        assert_eq!(alice.open(&tampered), Err(CryptoError::Decryption));
    }
}
