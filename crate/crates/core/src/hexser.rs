//! Serde helpers encoding byte strings as lowercase hex.

use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

pub fn serialize<S: Serializer, T: AsRef<[u8]>>(bytes: T, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(bytes.as_ref()))
}

pub fn deserialize<'de, D: Deserializer<'de>, T: TryFrom<Vec<u8>>>(d: D) -> Result<T, D::Error> {
    let text = String::deserialize(d)?;
    let raw = decode_strict(&text).map_err(D::Error::custom)?;
    T::try_from(raw).map_err(|_| D::Error::custom("unexpected byte length"))
}

/// Hex decoding that only accepts the canonical lowercase form, so one
/// logical value has exactly one textual encoding.
pub fn decode_strict(text: &str) -> Result<Vec<u8>, String> {
    if text.bytes().any(|b| b.is_ascii_uppercase()) {
        return Err("hex must be lowercase".into());
    }
    hex::decode(text).map_err(|e| e.to_string())
}
