//! Ledger secret wrapping, k-of-n member recovery shares, and collection of
//! submitted shares during disaster recovery.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    aead_decrypt, aead_encrypt, recover_secret, split_secret, CryptoError, EncryptionKeyPair, Nonce, SealedBox,
    SecretShare, SymmetricSecret,
};
use crate::governance::{member_key, members};
use crate::kvstore::{maps, KvRead, StoreError, Tx};
use crate::types::MemberId;

pub const WRAPPED_SECRET_KEY: &str = "wrapped";
const WRAP_AAD: &[u8] = b"consortium/ledger-secret/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecoveryError {
    #[error("threshold {threshold} invalid for {members} members")]
    Threshold { threshold: u32, members: usize },
    #[error("no valid signature entry in the ledger")]
    NoValidSignature,
    #[error("no wrapped ledger secret on record")]
    NoWrappedSecret,
    #[error("{0} holds no recovery share")]
    NotAShareholder(MemberId),
    #[error("{0} already submitted a share")]
    DuplicateShare(MemberId),
    #[error("shares do not unwrap the ledger secret; newest share rejected")]
    RejectedShare,
    #[error("service is not awaiting recovery shares")]
    NotAwaitingShares,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrappedLedgerSecret {
    #[serde(with = "crate::hexser")]
    pub ciphertext: Vec<u8>,
    pub threshold: u32,
    pub share_count: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptedRecoveryShare {
    pub member: MemberId,
    pub sealed: SealedBox,
}

/// Member-side file holding a decrypted share, ready for submission.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareFile {
    pub member: MemberId,
    pub share: SecretShare,
}

fn wrap(secret: &SymmetricSecret, wrapping: &SymmetricSecret) -> Vec<u8> {
    // each wrapping key encrypts exactly one message
    aead_encrypt(wrapping, &Nonce([0; 12]), &secret.0, WRAP_AAD)
}

pub fn unwrap_secret(wrapped: &WrappedLedgerSecret, wrapping: &[u8]) -> Result<SymmetricSecret, CryptoError> {
    let key = SymmetricSecret(wrapping.try_into().map_err(|_| CryptoError::Decryption)?);
    let plain = aead_decrypt(&key, &Nonce([0; 12]), &wrapped.ciphertext, WRAP_AAD)?;
    Ok(SymmetricSecret(plain.try_into().map_err(|_| CryptoError::Decryption)?))
}

/// Wraps `secret` under a fresh key and records that key's shares, one
/// sealed to each member's encryption key.
pub fn issue_shares(
    tx: &mut Tx<'_>,
    secret: &SymmetricSecret,
    threshold: u32,
    rng: &mut ChaCha8Rng,
) -> Result<(), RecoveryError> {
    let members = members(tx);
    if threshold == 0 || threshold as usize > members.len() {
        return Err(RecoveryError::Threshold {
            threshold,
            members: members.len(),
        });
    }
    let wrapping = SymmetricSecret::generate(rng);
    let shares = split_secret(&wrapping.0, threshold as usize, members.len(), rng)?;
    for ((id, info), share) in members.iter().zip(shares) {
        let plain = serde_json::to_vec(&share).expect("share serializes");
        let sealed = SealedBox::seal(&info.encryption_key, &plain, rng);
        tx.put_json(
            maps::RECOVERY_SHARES,
            &member_key(*id),
            &EncryptedRecoveryShare { member: *id, sealed },
        )?;
    }
    let wrapped = WrappedLedgerSecret {
        ciphertext: wrap(secret, &wrapping),
        threshold,
        share_count: members.len() as u32,
    };
    tx.put_json(maps::LEDGER_SECRET, WRAPPED_SECRET_KEY, &wrapped)?;
    Ok(())
}

pub fn wrapped_secret(state: &impl KvRead) -> Option<WrappedLedgerSecret> {
    state.read_json(maps::LEDGER_SECRET, WRAPPED_SECRET_KEY)
}

pub fn encrypted_share(state: &impl KvRead, member: MemberId) -> Option<EncryptedRecoveryShare> {
    state.read_json(maps::RECOVERY_SHARES, &member_key(member))
}

/// Member side: decrypts the member's share with their encryption key.
pub fn open_share(enc: &EncryptedRecoveryShare, key: &EncryptionKeyPair) -> Result<SecretShare, CryptoError> {
    let plain = key.open(&enc.sealed)?;
    serde_json::from_slice(&plain).map_err(|_| CryptoError::Decryption)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ShareProgress {
    Waiting { have: usize, need: usize },
    Complete(SymmetricSecret),
}

/// Shares submitted so far, held in node memory only.
#[derive(Clone, Debug)]
pub struct ShareCollector {
    wrapped: WrappedLedgerSecret,
    shares: BTreeMap<MemberId, SecretShare>,
    newest: Option<MemberId>,
}

impl ShareCollector {
    pub fn new(wrapped: WrappedLedgerSecret) -> ShareCollector {
        ShareCollector {
            wrapped,
            shares: BTreeMap::new(),
            newest: None,
        }
    }

    pub fn count(&self) -> usize {
        self.shares.len()
    }

    pub fn submit(&mut self, member: MemberId, share: SecretShare) -> Result<ShareProgress, RecoveryError> {
        if self.shares.contains_key(&member) {
            return Err(RecoveryError::DuplicateShare(member));
        }
        self.shares.insert(member, share);
        self.newest = Some(member);
        let need = self.wrapped.threshold as usize;
        if self.shares.len() < need {
            return Ok(ShareProgress::Waiting {
                have: self.shares.len(),
                need,
            });
        }
        let shares: Vec<_> = self.shares.values().cloned().collect();
        let secret = recover_secret(&shares, need)
            .ok()
            .and_then(|wrapping| unwrap_secret(&self.wrapped, &wrapping).ok());
        match secret {
            Some(s) => Ok(ShareProgress::Complete(s)),
            None => {
                self.shares.remove(&member);
                Err(RecoveryError::RejectedShare)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use crate::governance::MemberInfo;
    use crate::kvstore::{Access, Store, WriteSet};
    use crate::types::TransactionId;
    use rand::SeedableRng;

    fn store_with_members(n: u64, rng: &mut ChaCha8Rng) -> (Store, Vec<EncryptionKeyPair>) {
        let mut ws = WriteSet::new();
        let mut keys = Vec::new();
        for i in 0..n {
            let enc = EncryptionKeyPair::generate(rng);
            let info = MemberInfo {
                public_id: KeyPair::generate(rng).public_id(),
                encryption_key: enc.public_key(),
            };
            ws.put(
                maps::MEMBERS_CERTS,
                i.to_string().into_bytes(),
                serde_json::to_vec(&info.public_id).unwrap(),
            );
            ws.put(
                maps::MEMBERS_KEYS,
                i.to_string().into_bytes(),
                serde_json::to_vec(&info.encryption_key).unwrap(),
            );
            keys.push(enc);
        }
        let mut store = Store::new();
        store.apply(TransactionId::new(1, 1), &ws).unwrap();
        (store, keys)
    }

    #[test]
    fn thresholds_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut store, keys) = store_with_members(3, &mut rng);
        let secret = SymmetricSecret([42; 32]);
        let mut tx = store.tx(Access::Framework);
        assert!(matches!(
            issue_shares(&mut tx, &secret, 4, &mut rng),
            Err(RecoveryError::Threshold { .. })
        ));
        assert!(matches!(
            issue_shares(&mut tx, &secret, 0, &mut rng),
            Err(RecoveryError::Threshold { .. })
        ));
        issue_shares(&mut tx, &secret, 2, &mut rng).unwrap();
        let ws = tx.into_write_set();
        assert_eq!(ws.map_updates(maps::RECOVERY_SHARES).count(), 3);
        store.apply(TransactionId::new(1, 2), &ws).unwrap();

        let wrapped = wrapped_secret(&store).unwrap();
        let opened: Vec<_> = (0..3)
            .map(|i| open_share(&encrypted_share(&store, MemberId(i)).unwrap(), &keys[i as usize]).unwrap())
            .collect();
        // a member cannot open someone else's share
        assert!(open_share(&encrypted_share(&store, MemberId(0)).unwrap(), &keys[1]).is_err());

        let mut c = ShareCollector::new(wrapped.clone());
        assert_eq!(
            c.submit(MemberId(0), opened[0].clone()).unwrap(),
            ShareProgress::Waiting { have: 1, need: 2 }
        );
        assert!(matches!(
            c.submit(MemberId(0), opened[0].clone()),
            Err(RecoveryError::DuplicateShare(_))
        ));
        let mut bad = opened[2].clone();
        bad.payload[0] ^= 1;
        assert_eq!(c.submit(MemberId(2), bad), Err(RecoveryError::RejectedShare));
        assert_eq!(c.count(), 1);
        assert_eq!(
            c.submit(MemberId(2), opened[2].clone()).unwrap(),
            ShareProgress::Complete(secret)
        );
    }
}
