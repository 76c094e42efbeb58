//! Per-flow symmetric key generation.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::flow::FlowMatch;
use crate::net::SimTime;
use crate::secfn::{KeyRecord, KeyRole, SecretKey, KEY_LEN};

/// Seeded key generator. The same seed and call sequence always yields the
/// same keys.
#[derive(Debug, Clone)]
pub struct KeyManager {
    rng: ChaCha20Rng,
    next_key_id: u32,
    by_flow: BTreeMap<FlowMatch, (KeyRecord, KeyRecord)>,
}

impl KeyManager {
    pub fn new(seed: u64) -> Self {
        KeyManager { rng: ChaCha20Rng::seed_from_u64(seed), next_key_id: 1, by_flow: BTreeMap::new() }
    }

    /// Fresh (Encrypt, Decrypt) pair sharing key bytes and key id.
    pub fn generate_key(&mut self, flow: &FlowMatch, now: SimTime) -> (KeyRecord, KeyRecord) {
        let mut bytes = vec![0u8; KEY_LEN];
        self.rng.fill_bytes(&mut bytes);
        let key_id = self.next_key_id;
        self.next_key_id += 1;
        let enc = KeyRecord {
            flow: flow.clone(),
            key: SecretKey::new(bytes),
            role: KeyRole::Encrypt,
            created_at: now,
            key_id,
        };
        let dec = KeyRecord { role: KeyRole::Decrypt, ..enc.clone() };
        (enc, dec)
    }

    /// The flow's pair, generated on first use. Keys are never rotated.
    pub fn pair_for(&mut self, flow: &FlowMatch, now: SimTime) -> (KeyRecord, KeyRecord) {
        if let Some(p) = self.by_flow.get(flow) {
            return p.clone();
        }
        let p = self.generate_key(flow, now);
        self.by_flow.insert(flow.clone(), p.clone());
        p
    }

    pub fn issued(&self) -> usize {
        self.by_flow.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn flow(n: u8) -> FlowMatch {
        FlowMatch { dst_ip: Some(Ipv4Addr::new(10, 0, 0, n)), ..Default::default() }
    }

    #[test]
    fn pair_shares_bytes_and_id() {
        let mut km = KeyManager::new(1);
        let (e, d) = km.generate_key(&flow(1), SimTime::ZERO);
        assert_eq!(e.key.expose().len(), 16);
        assert_eq!(e.key.expose(), d.key.expose());
        assert_eq!(e.key_id, d.key_id);
        assert_eq!((e.role, d.role), (KeyRole::Encrypt, KeyRole::Decrypt));
    }

    #[test]
    fn successive_keys_differ_and_seed_reproduces() {
        let mut a = KeyManager::new(42);
        let mut b = KeyManager::new(42);
        let ka: Vec<Vec<u8>> = (0..20).map(|i| a.generate_key(&flow(i), SimTime::ZERO).0.key.expose().to_vec()).collect();
        let kb: Vec<Vec<u8>> = (0..20).map(|i| b.generate_key(&flow(i), SimTime::ZERO).0.key.expose().to_vec()).collect();
        assert_eq!(ka, kb);
        let distinct: std::collections::BTreeSet<_> = ka.iter().collect();
        assert_eq!(distinct.len(), 20);
        let mut c = KeyManager::new(43);
        assert_ne!(c.generate_key(&flow(0), SimTime::ZERO).0.key.expose(), ka[0].as_slice());
    }

    #[test]
    fn pair_for_reuses() {
        let mut km = KeyManager::new(3);
        let p1 = km.pair_for(&flow(1), SimTime::ZERO);
        let p2 = km.pair_for(&flow(1), SimTime::from_secs(5));
        assert_eq!(p1, p2);
        assert_ne!(km.pair_for(&flow(2), SimTime::ZERO).0.key_id, p1.0.key_id);
        assert_eq!(km.issued(), 2);
    }
}
