//! Keyed labeling of bucket replicas and authenticated encryption of bucket
//! payloads. This is the only module that touches secret key material; keys
//! live at the proxy and are never sent to the server.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::Sha256;

use crate::error::{Error, Result};

pub const LABEL_LEN: usize = 16;
const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;

/// A 16-byte pseudorandom identifier for one stored bucket replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BucketLabel(pub [u8; LABEL_LEN]);

impl BucketLabel {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != LABEL_LEN * 2 {
            return None;
        }
        let mut out = [0u8; LABEL_LEN];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hi = (chunk[0] as char).to_digit(16)?;
            let lo = (chunk[1] as char).to_digit(16)?;
            out[i] = (hi * 16 + lo) as u8;
        }
        Some(Self(out))
    }
}

/// Key for the labeling PRF.
#[derive(Clone)]
pub struct LabelKey([u8; 32]);

/// Key for the bucket AEAD.
#[derive(Clone)]
pub struct SealKey([u8; 32]);

impl LabelKey {
    pub fn generate(rng: &mut impl RngCore) -> Self {
        let mut k = [0u8; 32];
        rng.fill_bytes(&mut k);
        Self(k)
    }

    pub fn from_bytes(k: [u8; 32]) -> Self {
        Self(k)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl SealKey {
    pub fn generate(rng: &mut impl RngCore) -> Self {
        let mut k = [0u8; 32];
        rng.fill_bytes(&mut k);
        Self(k)
    }

    pub fn from_bytes(k: [u8; 32]) -> Self {
        Self(k)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

/// Deterministic label for the replica `(epoch, bucket_index, replica_index)`.
///
/// The triple is encoded fixed-width big-endian so the encoding is injective,
/// then run through HMAC-SHA256 and truncated to 128 bits.
pub fn label_for(key: &LabelKey, epoch: u64, bucket_index: u64, replica_index: u64) -> BucketLabel {
    let mut mac =
        <Hmac<Sha256> as Mac>::new_from_slice(&key.0).expect("hmac accepts 32-byte keys");
    mac.update(&epoch.to_be_bytes());
    mac.update(&bucket_index.to_be_bytes());
    mac.update(&replica_index.to_be_bytes());
    let digest = mac.finalize().into_bytes();
    let mut label = [0u8; LABEL_LEN];
    label.copy_from_slice(&digest[..LABEL_LEN]);
    BucketLabel(label)
}

/// Encrypts a serialized bucket, binding the replica label as associated data.
///
/// Layout: `nonce (12) || ciphertext || tag (16)`. The nonce is drawn fresh
/// from the caller's RNG, so sealing the same bucket twice yields different
/// ciphertexts. Output length is `plaintext + 28` regardless of content.
pub fn seal_bucket(
    key: &SealKey,
    bucket: &[u8],
    label: &BucketLabel,
    rng: &mut impl RngCore,
) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let ct = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: bucket,
                aad: &label.0,
            },
        )
        .expect("encryption is infallible for in-memory buffers");
    let mut out = Vec::with_capacity(NONCE_LEN + ct.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    out
}

/// Decrypts a sealed bucket. Any bit flip in the ciphertext or a mismatched
/// label yields `Error::AuthFailure`.
pub fn open_bucket(key: &SealKey, ciphertext: &[u8], label: &BucketLabel) -> Result<Vec<u8>> {
    if ciphertext.len() < NONCE_LEN + TAG_LEN {
        return Err(Error::AuthFailure);
    }
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let (nonce, body) = ciphertext.split_at(NONCE_LEN);
    cipher
        .decrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: body,
                aad: &label.0,
            },
        )
        .map_err(|_| Error::AuthFailure)
}

/// Ciphertext length for a given plaintext length; depends on nothing else.
pub fn sealed_len(plaintext_len: usize) -> usize {
    plaintext_len + NONCE_LEN + TAG_LEN
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use std::collections::HashSet;

    #[test]
    fn label_determinism_and_injectivity() {
        let mut r = rng::fork(1, "crypto-test");
        let key = LabelKey::generate(&mut r);
        assert_eq!(label_for(&key, 0, 3, 1), label_for(&key, 0, 3, 1));
        assert_ne!(label_for(&key, 0, 3, 1), label_for(&key, 0, 3, 2));
    }

    #[test]
    fn no_label_collisions_in_1e5_random_triples() {
        // Birthday bound at 128 bits: collision probability < 1e-27.
        let mut r = rng::fork(2, "crypto-test");
        let key = LabelKey::generate(&mut r);
        let mut seen = HashSet::new();
        let mut triples = HashSet::new();
        while triples.len() < 100_000 {
            let t = (
                r.next_u64() % 1_000_000,
                r.next_u64() % 1_000_000,
                r.next_u64() % 64,
            );
            if triples.insert(t) {
                assert!(seen.insert(label_for(&key, t.0, t.1, t.2)));
            }
        }
    }

    #[test]
    fn seal_open_round_trip() {
        let mut r = rng::fork(3, "crypto-test");
        let key = SealKey::generate(&mut r);
        let lkey = LabelKey::generate(&mut r);
        let label = label_for(&lkey, 1, 2, 0);
        let bucket = vec![0xabu8; 300];
        let ct = seal_bucket(&key, &bucket, &label, &mut r);
        assert_eq!(ct.len(), sealed_len(bucket.len()));
        assert_eq!(open_bucket(&key, &ct, &label).unwrap(), bucket);
    }

    #[test]
    fn bit_flip_fails_authentication() {
        let mut r = rng::fork(4, "crypto-test");
        let key = SealKey::generate(&mut r);
        let lkey = LabelKey::generate(&mut r);
        let label = label_for(&lkey, 0, 0, 0);
        let mut ct = seal_bucket(&key, &[1, 2, 3, 4], &label, &mut r);
        ct[15] ^= 0x01;
        assert!(matches!(
            open_bucket(&key, &ct, &label),
            Err(Error::AuthFailure)
        ));
    }

    #[test]
    fn wrong_label_fails_authentication() {
        let mut r = rng::fork(5, "crypto-test");
        let key = SealKey::generate(&mut r);
        let lkey = LabelKey::generate(&mut r);
        let ct = seal_bucket(&key, &[9; 64], &label_for(&lkey, 0, 1, 0), &mut r);
        assert!(open_bucket(&key, &ct, &label_for(&lkey, 0, 1, 1)).is_err());
    }

    #[test]
    fn equal_length_plaintexts_give_equal_length_ciphertexts() {
        let mut r = rng::fork(6, "crypto-test");
        let key = SealKey::generate(&mut r);
        let lkey = LabelKey::generate(&mut r);
        let label = label_for(&lkey, 0, 0, 0);
        let a = seal_bucket(&key, &vec![0u8; 128], &label, &mut r);
        let b = seal_bucket(&key, &vec![0xffu8; 128], &label, &mut r);
        assert_eq!(a.len(), b.len());
    }

    #[test]
    fn resealing_randomizes_ciphertext() {
        let mut r = rng::fork(7, "crypto-test");
        let key = SealKey::generate(&mut r);
        let lkey = LabelKey::generate(&mut r);
        let label = label_for(&lkey, 0, 0, 0);
        let a = seal_bucket(&key, &[5; 32], &label, &mut r);
        let b = seal_bucket(&key, &[5; 32], &label, &mut r);
        assert_ne!(a, b);
    }
}
