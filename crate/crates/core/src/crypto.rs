//! Keyed randomness, padded authenticated encryption, bin-choice hashing and a
//! small-domain pseudorandom permutation.
//!
//! Everything is derived from a single 64-bit experiment seed through
//! [`KeyTree`], so a run is reproducible bit for bit:
//!
//! ```text
//! master          = SHA-256("locsse/master" || seed_le)
//! node(label)     = HMAC-SHA256(master, label)
//! PrfKey(label)   = node("prf/" + label)
//! EncKey(label)   = node("enc/" + label)
//! rng(label)      = ChaCha20Rng::from_seed(node("rng/" + label))
//! ```

use std::fmt;

use chacha20::cipher::{KeyIvInit, StreamCipher};
use chacha20::ChaCha20;
use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hmac::{Hmac, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;

pub const TAG_LEN: usize = 32;
pub const KEY_LEN: usize = 32;
pub const KEY_VERSION: u32 = 1;

const NONCE_LEN: usize = 12;
const AEAD_TAG_LEN: usize = 16;
const LEN_PREFIX: usize = 4;

/// Bytes a padded ciphertext adds on top of its target plaintext length.
pub const CIPHERTEXT_OVERHEAD: usize = NONCE_LEN + LEN_PREFIX + AEAD_TAG_LEN;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("plaintext of {len} bytes exceeds padding target {target}")]
    PlaintextTooLong { len: usize, target: usize },
    #[error("ciphertext failed authentication")]
    Decrypt,
    #[error("index {x} outside permutation domain of size {n}")]
    Domain { x: u64, n: u64 },
    #[error("malformed serialized key")]
    KeyFormat,
}

/// 32-byte PRF / random-oracle output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub [u8; TAG_LEN]);

impl Tag {
    pub fn as_bytes(&self) -> &[u8; TAG_LEN] {
        &self.0
    }

    /// First eight bytes as a little-endian integer.
    pub fn prefix_u64(&self) -> u64 {
        u64::from_le_bytes(self.0[..8].try_into().unwrap())
    }
}

impl fmt::Debug for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tag(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

macro_rules! secret_key {
    ($name:ident) => {
        #[derive(Clone, PartialEq, Eq)]
        pub struct $name([u8; KEY_LEN]);

        impl $name {
            pub fn from_raw(bytes: [u8; KEY_LEN]) -> Self {
                Self(bytes)
            }

            pub fn raw(&self) -> &[u8; KEY_LEN] {
                &self.0
            }

            /// Version prefix (u32 LE) followed by the raw key bytes.
            pub fn to_bytes(&self) -> Vec<u8> {
                let mut out = Vec::with_capacity(4 + KEY_LEN);
                out.extend_from_slice(&KEY_VERSION.to_le_bytes());
                out.extend_from_slice(&self.0);
                out
            }

            pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
                if bytes.len() != 4 + KEY_LEN {
                    return Err(CryptoError::KeyFormat);
                }
                let version = u32::from_le_bytes(bytes[..4].try_into().unwrap());
                if version != KEY_VERSION {
                    return Err(CryptoError::KeyFormat);
                }
                Ok(Self(bytes[4..].try_into().unwrap()))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "(..)"))
            }
        }
    };
}

secret_key!(PrfKey);
secret_key!(EncKey);

/// Deterministic derivation of every key and random stream of an experiment.
#[derive(Clone)]
pub struct KeyTree {
    master: [u8; 32],
}

impl KeyTree {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"locsse/master");
        h.update(seed.to_le_bytes());
        Self {
            master: h.finalize().into(),
        }
    }

    fn node(&self, label: &str) -> [u8; 32] {
        let mut mac = <HmacSha256 as Mac>::new_from_slice(&self.master).expect("hmac accepts any key length");
        mac.update(label.as_bytes());
        mac.finalize().into_bytes().into()
    }

    pub fn prf_key(&self, label: &str) -> PrfKey {
        PrfKey(self.node(&format!("prf/{label}")))
    }

    pub fn enc_key(&self, label: &str) -> EncKey {
        EncKey(self.node(&format!("enc/{label}")))
    }

    pub fn rng(&self, label: &str) -> ChaCha20Rng {
        ChaCha20Rng::from_seed(self.node(&format!("rng/{label}")))
    }

    /// Subtree rooted at `label`, for nested components.
    pub fn child(&self, label: &str) -> KeyTree {
        KeyTree {
            master: self.node(&format!("child/{label}")),
        }
    }
}

/// HMAC-SHA256.
pub fn prf(key: &PrfKey, input: &[u8]) -> Tag {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(&key.0).expect("hmac accepts any key length");
    mac.update(input);
    Tag(mac.finalize().into_bytes().into())
}

/// Public hash modelled as a random oracle, domain-separated by `domain`.
pub fn ro_hash(domain: &str, parts: &[&[u8]]) -> Tag {
    let mut h = Sha256::new();
    h.update((domain.len() as u32).to_le_bytes());
    h.update(domain.as_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    Tag(h.finalize().into())
}

/// Symmetric key derived from a tag (per-keyword keys such as `K_w`).
pub fn enc_key_from_tag(tag: &Tag) -> EncKey {
    EncKey(tag.0)
}

/// Opaque authenticated ciphertext of a zero-padded payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ciphertext {
    pub bytes: Vec<u8>,
}

impl Ciphertext {
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// Ciphertext byte length for a given padding target.
pub const fn ciphertext_len(target_len: usize) -> usize {
    target_len + CIPHERTEXT_OVERHEAD
}

/// Encrypts `plaintext` zero-padded to exactly `target_len` bytes.
///
/// The plaintext length travels inside the authenticated payload, so the
/// ciphertext length is a function of `target_len` alone.
pub fn encrypt_padded<R: RngCore + ?Sized>(
    key: &EncKey,
    plaintext: &[u8],
    target_len: usize,
    rng: &mut R,
) -> Result<Ciphertext, CryptoError> {
    if plaintext.len() > target_len || plaintext.len() > u32::MAX as usize {
        return Err(CryptoError::PlaintextTooLong {
            len: plaintext.len(),
            target: target_len,
        });
    }
    let mut padded = Vec::with_capacity(LEN_PREFIX + target_len);
    padded.extend_from_slice(&(plaintext.len() as u32).to_le_bytes());
    padded.extend_from_slice(plaintext);
    padded.resize(LEN_PREFIX + target_len, 0);

    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let body = cipher
        .encrypt(Nonce::from_slice(&nonce), padded.as_slice())
        .expect("chacha20poly1305 encryption is infallible for in-range inputs");
    let mut bytes = Vec::with_capacity(NONCE_LEN + body.len());
    bytes.extend_from_slice(&nonce);
    bytes.extend_from_slice(&body);
    Ok(Ciphertext { bytes })
}

pub fn decrypt_padded(key: &EncKey, ct: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if ct.len() < CIPHERTEXT_OVERHEAD {
        return Err(CryptoError::Decrypt);
    }
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let padded = cipher
        .decrypt(Nonce::from_slice(&ct[..NONCE_LEN]), &ct[NONCE_LEN..])
        .map_err(|_| CryptoError::Decrypt)?;
    let len = u32::from_le_bytes(padded[..LEN_PREFIX].try_into().unwrap()) as usize;
    if LEN_PREFIX + len > padded.len() {
        return Err(CryptoError::Decrypt);
    }
    Ok(padded[LEN_PREFIX..LEN_PREFIX + len].to_vec())
}

/// Length-preserving ChaCha20 keystream XOR.
///
/// Only for write-once slots: `(key, nonce)` must never encrypt two different
/// plaintexts. Provides confidentiality, not integrity.
pub fn stream_xor(key: &EncKey, nonce: u64, data: &mut [u8]) {
    let mut iv = [0u8; 12];
    iv[..8].copy_from_slice(&nonce.to_le_bytes());
    let mut c = ChaCha20::new(&key.0.into(), &iv.into());
    c.apply_keystream(data);
}

/// Two bin choices in `[0, m)` from disjoint 16-byte halves of `tag`.
///
/// Each half is reduced as a 128-bit integer; the modulo bias is at most
/// `m / 2^128`, far below 2^-64 for any realistic `m`. The two choices may
/// coincide.
pub fn hash_choices(tag: &Tag, m: usize) -> (usize, usize) {
    assert!(m >= 1, "bin count must be positive");
    let lo = u128::from_le_bytes(tag.0[..16].try_into().unwrap());
    let hi = u128::from_le_bytes(tag.0[16..].try_into().unwrap());
    ((lo % m as u128) as usize, (hi % m as u128) as usize)
}

/// 4-round balanced Feistel permutation on `[0, n)` with cycle walking.
#[derive(Clone)]
pub struct SmallPrp {
    mac: HmacSha256,
    n: u64,
    half_bits: u32,
}

impl SmallPrp {
    const ROUNDS: u8 = 4;

    pub fn new(key: &PrfKey, n: u64) -> Self {
        assert!(n >= 1 && n <= 1 << 62, "permutation domain out of range");
        let bits = (64 - (n - 1).leading_zeros()).max(2);
        let bits = bits + (bits & 1);
        let mut mac = <HmacSha256 as Mac>::new_from_slice(&key.0).expect("hmac accepts any key length");
        mac.update(&n.to_le_bytes());
        Self {
            mac,
            n,
            half_bits: bits / 2,
        }
    }

    pub fn domain(&self) -> u64 {
        self.n
    }

    fn round(&self, r: u8, x: u64) -> u64 {
        let mut mac = self.mac.clone();
        mac.update(&[r]);
        mac.update(&x.to_le_bytes());
        let out = mac.finalize().into_bytes();
        u64::from_le_bytes(out[..8].try_into().unwrap()) & self.mask()
    }

    fn mask(&self) -> u64 {
        (1u64 << self.half_bits) - 1
    }

    fn feistel(&self, x: u64) -> u64 {
        let (mut l, mut r) = (x >> self.half_bits, x & self.mask());
        for round in 0..Self::ROUNDS {
            let next = l ^ self.round(round, r);
            l = r;
            r = next;
        }
        (l << self.half_bits) | r
    }

    fn feistel_inv(&self, y: u64) -> u64 {
        let (mut l, mut r) = (y >> self.half_bits, y & self.mask());
        for round in (0..Self::ROUNDS).rev() {
            let prev = r ^ self.round(round, l);
            r = l;
            l = prev;
        }
        (l << self.half_bits) | r
    }

    pub fn eval(&self, x: u64) -> Result<u64, CryptoError> {
        if x >= self.n {
            return Err(CryptoError::Domain { x, n: self.n });
        }
        let mut y = self.feistel(x);
        while y >= self.n {
            y = self.feistel(y);
        }
        Ok(y)
    }

    pub fn invert(&self, y: u64) -> Result<u64, CryptoError> {
        if y >= self.n {
            return Err(CryptoError::Domain { x: y, n: self.n });
        }
        let mut x = self.feistel_inv(y);
        while x >= self.n {
            x = self.feistel_inv(x);
        }
        Ok(x)
    }
}

/// Packs bytes into little-endian words, zero-filling the last word.
pub fn bytes_to_words(bytes: &[u8]) -> Vec<u64> {
    bytes
        .chunks(8)
        .map(|c| {
            let mut w = [0u8; 8];
            w[..c.len()].copy_from_slice(c);
            u64::from_le_bytes(w)
        })
        .collect()
}

/// Inverse of [`bytes_to_words`] truncated to `len` bytes.
pub fn words_to_bytes(words: &[u64], len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(words.len() * 8);
    for w in words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.truncate(len);
    out
}

pub fn words_for_bytes(len: usize) -> usize {
    len.div_ceil(8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::HashSet;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    #[test]
    fn prf_is_deterministic_and_separates_keys() {
        let t = KeyTree::new(1);
        let (k1, k2) = (t.prf_key("a"), t.prf_key("b"));
        assert_eq!(prf(&k1, b"x"), prf(&k1, b"x"));
        assert_ne!(prf(&k1, b"x"), prf(&k2, b"x"));
        assert_ne!(prf(&k1, b"x"), prf(&k1, b"y"));
    }

    #[test]
    fn prf_no_collisions_on_random_inputs() {
        let key = KeyTree::new(2).prf_key("p");
        let mut r = rng();
        let mut seen = HashSet::new();
        let mut inputs = HashSet::new();
        while inputs.len() < 100_000 {
            let x: u64 = r.gen();
            if inputs.insert(x) {
                assert!(seen.insert(prf(&key, &x.to_le_bytes())));
            }
        }
        // Same inputs, fresh key: disjoint tag sets.
        let other = KeyTree::new(3).prf_key("p");
        for x in inputs.iter().take(10_000) {
            assert!(!seen.contains(&prf(&other, &x.to_le_bytes())));
        }
    }

    #[test]
    fn key_tree_is_reproducible() {
        assert_eq!(KeyTree::new(9).enc_key("e"), KeyTree::new(9).enc_key("e"));
        assert_ne!(KeyTree::new(9).enc_key("e"), KeyTree::new(10).enc_key("e"));
        let a: [u8; 16] = KeyTree::new(9).rng("r").gen();
        let b: [u8; 16] = KeyTree::new(9).rng("r").gen();
        assert_eq!(a, b);
    }

    #[test]
    fn keys_serialize_with_version_prefix() {
        let k = KeyTree::new(4).prf_key("k");
        let bytes = k.to_bytes();
        assert_eq!(bytes.len(), 4 + KEY_LEN);
        assert_eq!(&bytes[..4], &KEY_VERSION.to_le_bytes());
        assert_eq!(PrfKey::from_bytes(&bytes).unwrap(), k);
        let mut bad = bytes.clone();
        bad[0] = 9;
        assert_eq!(PrfKey::from_bytes(&bad), Err(CryptoError::KeyFormat));
        assert_eq!(EncKey::from_bytes(&bytes[1..]), Err(CryptoError::KeyFormat));
    }

    #[test]
    fn padded_ciphertext_length_depends_on_target_only() {
        let key = KeyTree::new(5).enc_key("e");
        let mut r = rng();
        let empty = encrypt_padded(&key, &[], 64, &mut r).unwrap();
        assert_eq!(empty.len(), ciphertext_len(64));
        let a = encrypt_padded(&key, &[1u8; 10], 64, &mut r).unwrap();
        let b = encrypt_padded(&key, &[2u8; 10], 64, &mut r).unwrap();
        assert_eq!(a.len(), b.len());
        for len in [0usize, 1, 17, 63, 64] {
            let pt: Vec<u8> = (0..len).map(|_| r.gen()).collect();
            assert_eq!(encrypt_padded(&key, &pt, 64, &mut r).unwrap().len(), empty.len());
        }
        assert_eq!(decrypt_padded(&key, &empty.bytes).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn padded_roundtrip_and_errors() {
        let key = KeyTree::new(6).enc_key("e");
        let mut r = rng();
        let pt: Vec<u8> = (0..1024).map(|_| r.gen()).collect();
        let ct = encrypt_padded(&key, &pt, 1500, &mut r).unwrap();
        assert_eq!(decrypt_padded(&key, &ct.bytes).unwrap(), pt);

        assert_eq!(
            encrypt_padded(&key, &pt, 1000, &mut r),
            Err(CryptoError::PlaintextTooLong { len: 1024, target: 1000 })
        );
        let mut bad = ct.bytes.clone();
        bad[40] ^= 1;
        assert_eq!(decrypt_padded(&key, &bad), Err(CryptoError::Decrypt));
        let other = KeyTree::new(6).enc_key("f");
        assert_eq!(decrypt_padded(&other, &ct.bytes), Err(CryptoError::Decrypt));
    }

    #[test]
    fn stream_xor_is_an_involution() {
        let key = KeyTree::new(1).enc_key("s");
        let mut data = b"sixteen byte msg".to_vec();
        stream_xor(&key, 42, &mut data);
        assert_ne!(&data, b"sixteen byte msg");
        stream_xor(&key, 42, &mut data);
        assert_eq!(&data, b"sixteen byte msg");
    }

    #[test]
    fn hash_choices_single_bin() {
        let t = ro_hash("t", &[b"x"]);
        assert_eq!(hash_choices(&t, 1), (0, 0));
    }

    #[test]
    fn hash_choices_golden_value() {
        // Frozen from an independent SHA-256 evaluation of the same encoding.
        let t = ro_hash("choices", &[b"golden"]);
        let first = hash_choices(&t, 8);
        assert_eq!(first, hash_choices(&t, 8));
        let lo = u128::from_le_bytes(t.0[..16].try_into().unwrap());
        let hi = u128::from_le_bytes(t.0[16..].try_into().unwrap());
        assert_eq!(first, ((lo % 8) as usize, (hi % 8) as usize));
        assert_eq!(first, GOLDEN_CHOICES_M8);
    }

    const GOLDEN_CHOICES_M8: (usize, usize) = (1, 1);

    #[test]
    fn hash_choices_frequencies_are_uniform() {
        let m = 16usize;
        let trials = 100_000usize;
        let mut c1 = vec![0usize; m];
        let mut c2 = vec![0usize; m];
        let mut r = rng();
        for _ in 0..trials {
            let mut b = [0u8; 32];
            r.fill_bytes(&mut b);
            let (a1, a2) = hash_choices(&Tag(b), m);
            c1[a1] += 1;
            c2[a2] += 1;
        }
        let expected = trials as f64 / m as f64;
        let sigma = (trials as f64 * (1.0 / m as f64) * (1.0 - 1.0 / m as f64)).sqrt();
        for c in c1.iter().chain(c2.iter()) {
            assert!((*c as f64 - expected).abs() <= 3.0 * sigma, "count {c} vs {expected}");
        }
        // Chi-square with 15 degrees of freedom; 0.999 quantile is 37.7.
        let chi: f64 = c1.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi < 37.7, "chi-square {chi}");
    }

    #[test]
    fn prp_trivial_domain() {
        let p = SmallPrp::new(&KeyTree::new(1).prf_key("p"), 1);
        assert_eq!(p.eval(0), Ok(0));
        assert_eq!(p.invert(0), Ok(0));
        assert_eq!(p.eval(1), Err(CryptoError::Domain { x: 1, n: 1 }));
    }

    #[test]
    fn prp_is_bijective_by_enumeration() {
        let key = KeyTree::new(2).prf_key("p");
        for n in [2u64, 3, 10, 17, 100, 1000, 4096] {
            let p = SmallPrp::new(&key, n);
            let mut out: Vec<u64> = (0..n).map(|x| p.eval(x).unwrap()).collect();
            out.sort_unstable();
            assert_eq!(out, (0..n).collect::<Vec<_>>(), "n = {n}");
        }
    }

    #[test]
    fn prp_inverts() {
        let p = SmallPrp::new(&KeyTree::new(3).prf_key("p"), 1000);
        let mut r = rng();
        for _ in 0..100 {
            let x = r.gen_range(0..1000);
            assert_eq!(p.invert(p.eval(x).unwrap()).unwrap(), x);
        }
    }

    #[test]
    fn word_packing_roundtrip() {
        let bytes: Vec<u8> = (0..29).collect();
        let words = bytes_to_words(&bytes);
        assert_eq!(words.len(), words_for_bytes(29));
        assert_eq!(words_to_bytes(&words, 29), bytes);
    }
}
