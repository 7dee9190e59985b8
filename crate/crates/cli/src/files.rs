use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use consortium::crypto::{EncryptionKeyPair, KeyPair, PublicId};
use consortium::sim::SimMember;
use consortium::MemberId;

pub const SERVICE_ID_FILE: &str = "service_identity";

/// Private key material of one consortium member.
#[derive(Serialize, Deserialize)]
pub struct MemberKeyFile {
    pub member: MemberId,
    #[serde(with = "hex::serde")]
    pub signing_seed: [u8; 32],
    #[serde(with = "hex::serde")]
    pub encryption_seed: [u8; 32],
}

impl MemberKeyFile {
    pub fn from_member(m: &SimMember) -> MemberKeyFile {
        MemberKeyFile {
            member: m.id,
            signing_seed: m.key.seed(),
            encryption_seed: m.encryption.seed(),
        }
    }

    pub fn signing(&self) -> KeyPair {
        KeyPair::from_seed(self.signing_seed)
    }

    pub fn encryption(&self) -> EncryptionKeyPair {
        EncryptionKeyPair::from_seed(self.encryption_seed)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Service identity files hold the public key as one line of hex.
pub fn read_service_id(path: &Path) -> Result<PublicId> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    PublicId::from_hex(text.trim()).ok_or_else(|| anyhow!("{}: not a hex service identity", path.display()))
}

pub fn write_service_id(path: &Path, id: &PublicId) -> Result<()> {
    fs::write(path, id.to_hex() + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn write_files(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

pub fn read_ledger_dir(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let chunks = consortium::ledger::read_dir_chunks(dir).with_context(|| format!("reading {}", dir.display()))?;
    Ok(chunks.into_iter().map(|(name, _, bytes)| (name, bytes)).collect())
}
