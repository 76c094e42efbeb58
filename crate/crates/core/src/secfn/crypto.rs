//! FE(): per-flow AES-128-GCM payload protection applied at edge switches.

use std::fmt;

use aes_gcm::aead::{AeadInOut, KeyInit};
use aes_gcm::{Aes128Gcm, Nonce, Tag};
use serde::{Deserialize, Serialize};

use crate::flow::FlowMatch;
use crate::net::{Envelope, Packet, SimTime, NONCE_LEN, TAG_LEN};
use crate::wire::b64;

pub const KEY_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyRole {
    Encrypt,
    Decrypt,
}

/// Symmetric key material. `Debug` never prints the bytes.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SecretKey(#[serde(with = "b64::vec")] Vec<u8>);

impl SecretKey {
    pub fn new(bytes: Vec<u8>) -> Self {
        SecretKey(bytes)
    }

    pub fn expose(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecretKey(<{} bytes redacted>)", self.0.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRecord {
    pub flow: FlowMatch,
    pub key: SecretKey,
    pub role: KeyRole,
    pub created_at: SimTime,
    pub key_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FeError {
    #[error("key must be {KEY_LEN} bytes, got {0}")]
    BadKeyLength(usize),
    #[error("packet is already encrypted")]
    AlreadyEncrypted,
    #[error("packet is not encrypted")]
    NotEncrypted,
    #[error("key record role is {0:?}")]
    WrongRole(KeyRole),
    #[error("authentication failed")]
    AuthFailure,
    #[error("no key record for this flow")]
    MissingKey,
}

impl KeyRecord {
    pub fn validate(&self) -> Result<(), FeError> {
        if self.key.len() != KEY_LEN {
            return Err(FeError::BadKeyLength(self.key.len()));
        }
        Ok(())
    }

    fn cipher(&self) -> Result<Aes128Gcm, FeError> {
        Aes128Gcm::new_from_slice(self.key.expose()).map_err(|_| FeError::BadKeyLength(self.key.len()))
    }
}

/// 96-bit nonce: 64-bit per-key counter followed by the 32-bit key id, both
/// big-endian. Unique as long as a counter value is never reused under a key id.
pub fn flow_nonce(key_id: u32, counter: u64) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    n[..8].copy_from_slice(&counter.to_be_bytes());
    n[8..].copy_from_slice(&key_id.to_be_bytes());
    n
}

/// Encrypts the payload in place (ciphertext length = plaintext length); the
/// header fields are authenticated as associated data.
pub fn fe_encrypt(rec: &KeyRecord, counter: u64, pkt: &Packet) -> Result<Packet, FeError> {
    if rec.role != KeyRole::Encrypt {
        return Err(FeError::WrongRole(rec.role));
    }
    if pkt.envelope.is_encrypted() {
        return Err(FeError::AlreadyEncrypted);
    }
    let cipher = rec.cipher()?;
    let nonce_bytes = flow_nonce(rec.key_id, counter);
    let mut out = pkt.clone();
    let tag = cipher
        .encrypt_inout_detached(&Nonce::from(nonce_bytes), &pkt.header_bytes(), (&mut out.payload[..]).into())
        .map_err(|_| FeError::AuthFailure)?;
    let mut tag_bytes = [0u8; TAG_LEN];
    tag_bytes.copy_from_slice(tag.as_slice());
    out.envelope = Envelope::Encrypted { nonce: nonce_bytes, tag: tag_bytes };
    Ok(out)
}

pub fn fe_decrypt(rec: &KeyRecord, pkt: &Packet) -> Result<Packet, FeError> {
    if rec.role != KeyRole::Decrypt {
        return Err(FeError::WrongRole(rec.role));
    }
    let (nonce, tag) = match &pkt.envelope {
        Envelope::Encrypted { nonce, tag } => (*nonce, *tag),
        Envelope::Plain => return Err(FeError::NotEncrypted),
    };
    let cipher = rec.cipher()?;
    let mut out = pkt.clone();
    cipher
        .decrypt_inout_detached(&Nonce::from(nonce), &pkt.header_bytes(), (&mut out.payload[..]).into(), &Tag::from(tag))
        .map_err(|_| FeError::AuthFailure)?;
    out.envelope = Envelope::Plain;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{MacAddr, Proto};
    use proptest::prelude::*;
    use std::net::Ipv4Addr;

    fn rec(key: [u8; 16], role: KeyRole) -> KeyRecord {
        KeyRecord {
            flow: FlowMatch::any(),
            key: SecretKey::new(key.to_vec()),
            role,
            created_at: SimTime::ZERO,
            key_id: 7,
        }
    }

    fn pkt(payload: Vec<u8>) -> Packet {
        Packet::new(
            MacAddr::from_u64(1),
            MacAddr::from_u64(2),
            Ipv4Addr::new(172, 56, 16, 21),
            Ipv4Addr::new(172, 56, 16, 20),
            Proto::Tcp,
            49152,
            502,
            payload,
        )
    }

    /// GCM specification test cases 2 and 3 (AES-128, 96-bit IV, no AAD).
    #[test]
    fn known_answer_vectors() {
        let zero = Aes128Gcm::new_from_slice(&[0u8; 16]).unwrap();
        let mut buf = [0u8; 16];
        let tag = zero.encrypt_inout_detached(&Nonce::from([0u8; 12]), b"", (&mut buf[..]).into()).unwrap();
        assert_eq!(hex::encode(buf), "0388dace60b6a392f328c2b971b2fe78");
        assert_eq!(hex::encode(tag), "ab6e47d42cec13bdf53a67b21257bddf");

        let key = hex::decode("feffe9928665731c6d6a8f9467308308").unwrap();
        let iv: [u8; 12] = hex::decode("cafebabefacedbaddecaf888").unwrap().try_into().unwrap();
        let mut pt = hex::decode(
            "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72\
             1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b391aafd255",
        )
        .unwrap();
        let c = Aes128Gcm::new_from_slice(&key).unwrap();
        let tag = c.encrypt_inout_detached(&Nonce::from(iv), b"", (&mut pt[..]).into()).unwrap();
        assert_eq!(
            hex::encode(&pt),
            "42831ec2217774244b7221b784d0d49ce3aa212f2c02a4e035c17e2329aca12e\
             21d514b25466931c7d8f6a5aac84aa051ba30b396a0aac973d58e091473f5985"
        );
        assert_eq!(hex::encode(tag), "4d5c2af327cd64a62cf35abd2ba6fab4");
    }

    #[test]
    fn round_trip_and_length_preserved() {
        let key = [9u8; 16];
        let p = pkt(b"write register 40001 = 75".to_vec());
        let enc = fe_encrypt(&rec(key, KeyRole::Encrypt), 0, &p).unwrap();
        assert!(enc.envelope.is_encrypted());
        assert_eq!(enc.payload.len(), p.payload.len());
        assert_ne!(enc.payload, p.payload);
        assert_eq!(fe_decrypt(&rec(key, KeyRole::Decrypt), &enc).unwrap(), p);
    }

    #[test]
    fn empty_payload_still_authenticated() {
        let key = [1u8; 16];
        let enc = fe_encrypt(&rec(key, KeyRole::Encrypt), 3, &pkt(vec![])).unwrap();
        assert!(enc.payload.is_empty());
        let mut bad = enc.clone();
        if let Envelope::Encrypted { tag, .. } = &mut bad.envelope {
            tag[0] ^= 1;
        }
        assert_eq!(fe_decrypt(&rec(key, KeyRole::Decrypt), &bad), Err(FeError::AuthFailure));
    }

    #[test]
    fn tampering_is_detected() {
        let key = [5u8; 16];
        let enc = fe_encrypt(&rec(key, KeyRole::Encrypt), 0, &pkt(vec![0xAA; 64])).unwrap();
        let dec = rec(key, KeyRole::Decrypt);

        let mut flipped = enc.clone();
        flipped.payload[10] ^= 0x01;
        assert_eq!(fe_decrypt(&dec, &flipped), Err(FeError::AuthFailure));

        let mut renonced = enc.clone();
        if let Envelope::Encrypted { nonce, .. } = &mut renonced.envelope {
            nonce[0] ^= 0x80;
        }
        assert_eq!(fe_decrypt(&dec, &renonced), Err(FeError::AuthFailure));

        let mut rerouted = enc.clone();
        rerouted.dst_port = 503;
        assert_eq!(fe_decrypt(&dec, &rerouted), Err(FeError::AuthFailure));

        assert_eq!(fe_decrypt(&rec([6u8; 16], KeyRole::Decrypt), &enc), Err(FeError::AuthFailure));
    }

    #[test]
    fn misuse_errors() {
        let key = [2u8; 16];
        let enc = fe_encrypt(&rec(key, KeyRole::Encrypt), 0, &pkt(vec![1])).unwrap();
        assert_eq!(fe_encrypt(&rec(key, KeyRole::Encrypt), 1, &enc), Err(FeError::AlreadyEncrypted));
        assert_eq!(fe_decrypt(&rec(key, KeyRole::Decrypt), &pkt(vec![1])), Err(FeError::NotEncrypted));
        assert_eq!(fe_decrypt(&rec(key, KeyRole::Encrypt), &enc), Err(FeError::WrongRole(KeyRole::Encrypt)));
        let short = KeyRecord { key: SecretKey::new(vec![0; 8]), ..rec(key, KeyRole::Encrypt) };
        assert_eq!(short.validate(), Err(FeError::BadKeyLength(8)));
        assert_eq!(fe_encrypt(&short, 0, &pkt(vec![1])), Err(FeError::BadKeyLength(8)));
    }

    #[test]
    fn nonce_layout() {
        assert_eq!(hex::encode(flow_nonce(0x01020304, 5)), "000000000000000501020304");
    }

    #[test]
    fn secret_debug_is_redacted() {
        let r = rec([0x42; 16], KeyRole::Encrypt);
        let s = format!("{r:?}");
        assert!(s.contains("redacted"));
        assert!(!s.contains("66, 66"));
    }

    proptest! {
        #[test]
        fn decrypt_inverts_encrypt(payload in proptest::collection::vec(any::<u8>(), 0..2048), counter in any::<u64>(), key in any::<[u8; 16]>()) {
            let p = pkt(payload);
            let enc = fe_encrypt(&rec(key, KeyRole::Encrypt), counter, &p).unwrap();
            prop_assert_eq!(enc.payload.len(), p.payload.len());
            prop_assert_eq!(fe_decrypt(&rec(key, KeyRole::Decrypt), &enc).unwrap(), p);
        }
    }
}
