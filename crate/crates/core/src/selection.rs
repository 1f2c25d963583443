//! Per-round choice of participating clients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Random,
    /// Largest gap between a client's last reported loss and the global loss.
    #[default]
    Loss,
}

/// Last loss each client reported, plus the server's global loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLedger {
    /// `(loss, round)`; `None` means the client has never reported and ranks
    /// above every finite loss.
    entries: Vec<Option<(f64, usize)>>,
    global_loss: f64,
}

impl ClientLedger {
    pub fn new(clients: usize) -> Self {
        Self {
            entries: vec![None; clients],
            global_loss: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record(&mut self, client: usize, loss: f64, round: usize) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("client {client} reported loss {loss}")));
        }
        let slot = self
            .entries
            .get_mut(client)
            .ok_or_else(|| Error::input(format!("unknown client {client}")))?;
        *slot = Some((loss, round));
        Ok(())
    }

    pub fn set_global_loss(&mut self, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("global loss {loss}")));
        }
        self.global_loss = loss;
        Ok(())
    }

    pub fn global_loss(&self) -> f64 {
        self.global_loss
    }

    pub fn entry(&self, client: usize) -> Option<(f64, usize)> {
        self.entries.get(client).copied().flatten()
    }

    /// `𝓛_c − 𝓛_g`, or `+∞` for a client that never reported.
    pub fn gap(&self, client: usize) -> f64 {
        match self.entries[client] {
            Some((loss, _)) => loss - self.global_loss,
            None => f64::INFINITY,
        }
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::input(format!("cannot select {k} of {n} clients")));
    }
    Ok(())
}

/// The `k` clients with the largest loss gap, best first; ties go to the
/// lower client id.
pub fn select_top_k(ledger: &ClientLedger, k: usize) -> Result<Vec<usize>> {
    check_k(k, ledger.len())?;
    let mut ids: Vec<usize> = (0..ledger.len()).collect();
    ids.sort_by(|&a, &b| ledger.gap(b).total_cmp(&ledger.gap(a)).then(a.cmp(&b)));
    ids.truncate(k);
    Ok(ids)
}

/// `k` distinct clients drawn uniformly, returned in ascending id order.
pub fn select_random<R: Rng + ?Sized>(clients: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    check_k(k, clients)?;
    let mut ids = rand::seq::index::sample(rng, clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_ledger_picks_lowest_ids() {
        let ledger = ClientLedger::new(4);
        assert_eq!(select_top_k(&ledger, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn largest_gap_wins() {
        let mut ledger = ClientLedger::new(3);
        ledger.record(0, 0.5, 1).unwrap();
        ledger.record(1, 0.9, 1).unwrap();
        ledger.record(2, 0.7, 1).unwrap();
        ledger.set_global_loss(0.6).unwrap();
        assert_eq!(select_top_k(&ledger, 1).unwrap(), vec![1]);
        assert_eq!(select_top_k(&ledger, 3).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn unseen_clients_outrank_reported_ones() {
        let mut ledger = ClientLedger::new(4);
        ledger.record(0, 100.0, 0).unwrap();
        ledger.record(2, 50.0, 0).unwrap();
        assert_eq!(select_top_k(&ledger, 2).unwrap(), vec![1, 3]);
        assert_eq!(select_top_k(&ledger, 3).unwrap(), vec![1, 3, 0]);
    }

    #[test]
    fn invalid_k_and_losses_are_rejected() {
        let mut ledger = ClientLedger::new(3);
        assert!(matches!(select_top_k(&ledger, 4), Err(Error::Input(_))));
        assert!(select_top_k(&ledger, 0).is_err());
        assert!(select_random(3, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(ledger.record(0, f64::NAN, 0).is_err());
        assert!(ledger.record(5, 1.0, 0).is_err());
        assert!(ledger.set_global_loss(f64::INFINITY).is_err());
    }

    #[test]
    fn random_with_k_equal_n_returns_everyone() {
        let ids = select_random(5, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn random_is_seeded() {
        let a = select_random(20, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = select_random(20, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_frequencies_are_binomial() {
        let (n, k, draws) = (10usize, 3usize, 10_000usize);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            let ids = select_random(n, k, &mut rng).unwrap();
            let mut uniq = ids.clone();
            uniq.dedup();
            assert_eq!(uniq.len(), k);
            for id in ids {
                counts[id] += 1;
            }
        }
        let p = k as f64 / n as f64;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{c} vs {mean} ± {sigma}");
        }
    }

    #[test]
    fn every_client_participates_within_ceil_n_over_k_rounds() {
        let (n, k) = (7usize, 2usize);
        let mut ledger = ClientLedger::new(n);
        let mut seen = vec![false; n];
        for round in 0..n.div_ceil(k) {
            for c in select_top_k(&ledger, k).unwrap() {
                seen[c] = true;
                ledger.record(c, 0.3 + c as f64, round).unwrap();
            }
            ledger.set_global_loss(0.1).unwrap();
        }
        assert!(seen.iter().all(|s| *s));
    }

    proptest! {
        #[test]
        fn shift_invariant(
            losses in proptest::collection::vec(0.0f64..5.0, 2..12),
            global in 0.0f64..5.0,
            shift in -3.0f64..3.0,
            k_frac in 0.0f64..1.0,
        ) {
            let n = losses.len();
            let k = 1 + ((n - 1) as f64 * k_frac) as usize;
            let mut a = ClientLedger::new(n);
            let mut b = ClientLedger::new(n);
            for (i, l) in losses.iter().enumerate() {
                // Quantized so the shift is exact in binary.
                let l = (l * 64.0).round() / 64.0;
                let s = (shift * 64.0).round() / 64.0;
                a.record(i, l, 0).unwrap();
                b.record(i, l + s, 0).unwrap();
            }
            let g = (global * 64.0).round() / 64.0;
            a.set_global_loss(g).unwrap();
            b.set_global_loss(g + (shift * 64.0).round() / 64.0).unwrap();
            prop_assert_eq!(select_top_k(&a, k).unwrap(), select_top_k(&b, k).unwrap());
        }

        #[test]
        fn top_k_matches_brute_force(losses in proptest::collection::vec(proptest::option::of(0.0f64..5.0), 1..10), k_frac in 0.0f64..1.0) {
            let n = losses.len();
            let k = 1 + ((n - 1) as f64 * k_frac) as usize;
            let mut ledger = ClientLedger::new(n);
            for (i, l) in losses.iter().enumerate() {
                if let Some(l) = l {
                    ledger.record(i, *l, 0).unwrap();
                }
            }
            let got = select_top_k(&ledger, k).unwrap();
            // Every chosen client beats or ties every unchosen one, ties by id.
            for &c in &got {
                for o in (0..n).filter(|o| !got.contains(o)) {
                    let (gc, go) = (ledger.gap(c), ledger.gap(o));
                    prop_assert!(gc > go || (gc == go && c < o));
                }
            }
        }
    }
}
