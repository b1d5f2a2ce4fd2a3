use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a serializable value through its JSON form.
pub fn json_hash<S: serde::Serialize>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    sha256_hex(&bytes)
}
