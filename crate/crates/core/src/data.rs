//! Synthetic token-classification data and client partitions.
//!
//! Token ids: `0` pad, `1` EOS by default, then `classes·motif_tokens` motif
//! ids (class `c` owns a contiguous run), then noise ids up to `vocab`.
//! Each sample is noise with a few of its class's motif tokens dropped at
//! random positions, followed by EOS. A motif id never appears outside its
//! class, so the label is always recoverable.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_TOKEN: u32 = 0;
pub const DATASET_FORMAT: &str = "headfed-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub vocab: usize,
    pub classes: usize,
    /// Content length range, EOS excluded.
    pub min_len: usize,
    pub max_len: usize,
    /// Distinct motif ids owned by each class.
    pub motif_tokens: usize,
    /// Motif occurrences planted per sample.
    pub motifs_per_sample: usize,
    pub eos_token: u32,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            vocab: 32,
            classes: 3,
            min_len: 6,
            max_len: 15,
            motif_tokens: 3,
            motifs_per_sample: 2,
            eos_token: 1,
        }
    }
}

impl SyntheticTask {
    fn first_motif(&self) -> u32 {
        2
    }

    fn first_noise(&self) -> u32 {
        self.first_motif() + (self.classes * self.motif_tokens) as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("task.classes must be at least 2"));
        }
        if self.motif_tokens == 0 || self.motifs_per_sample == 0 {
            return Err(Error::config("task needs at least one motif token per sample"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("task length range must satisfy 1 <= min_len <= max_len"));
        }
        if self.motifs_per_sample > self.min_len {
            return Err(Error::config("task.motifs_per_sample exceeds task.min_len"));
        }
        if self.eos_token != 1 {
            return Err(Error::config("task.eos_token must be 1 (id 0 is padding)"));
        }
        if (self.first_noise() as usize) >= self.vocab {
            return Err(Error::config(format!(
                "vocabulary of {} leaves no noise ids after {} motif ids",
                self.vocab,
                self.classes * self.motif_tokens
            )));
        }
        Ok(())
    }

    /// Motif ids of class `c`.
    pub fn motif_range(&self, class: usize) -> std::ops::Range<u32> {
        let start = self.first_motif() + (class * self.motif_tokens) as u32;
        start..start + self.motif_tokens as u32
    }

    /// Class owning `token`, if it is a motif id.
    pub fn class_of(&self, token: u32) -> Option<usize> {
        if token < self.first_motif() || token >= self.first_noise() {
            return None;
        }
        Some(((token - self.first_motif()) as usize) / self.motif_tokens)
    }

    fn sample<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> Vec<u32> {
        let len = rng.random_range(self.min_len..=self.max_len);
        let noise = self.first_noise()..self.vocab as u32;
        let mut tokens: Vec<u32> = (0..len).map(|_| rng.random_range(noise.clone())).collect();
        let motif = self.motif_range(label);
        for pos in rand::seq::index::sample(rng, len, self.motifs_per_sample) {
            tokens[pos] = rng.random_range(motif.clone());
        }
        tokens.push(self.eos_token);
        tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Ends with EOS; never padded.
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sequences(&self) -> Vec<&[u32]> {
        self.samples.iter().map(|s| s.tokens.as_slice()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// First `n` samples and the rest.
    pub fn split(mut self, n: usize) -> Result<(Dataset, Dataset)> {
        if n > self.len() {
            return Err(Error::input(format!("cannot split {} samples at {n}", self.len())));
        }
        let rest = self.samples.split_off(n);
        Ok((self, Dataset { samples: rest }))
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    /// Writes a header line then one `{"tokens": [...], "label": k}` per sample.
    pub fn write_jsonl<W: Write>(&self, task: &SyntheticTask, mut out: W) -> Result<()> {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            vocab: task.vocab,
            classes: task.classes,
            count: self.len(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<(DatasetHeader, Dataset)> {
        let mut lines = input.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Decode("empty dataset file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(Error::Decode(format!(
                "expected {DATASET_FORMAT} v{DATASET_VERSION}, found {} v{}",
                header.format, header.version
            )));
        }
        let mut samples = Vec::with_capacity(header.count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(&line)?;
            if s.label >= header.classes || s.tokens.iter().any(|t| *t as usize >= header.vocab) {
                return Err(Error::Decode(format!("sample {} out of range", samples.len())));
            }
            samples.push(s);
        }
        if samples.len() != header.count {
            return Err(Error::Decode(format!(
                "header declares {} samples, file has {}",
                header.count,
                samples.len()
            )));
        }
        Ok((header, Dataset { samples }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub vocab: usize,
    pub classes: usize,
    pub count: usize,
}

/// `n` samples with labels `i mod C`, shuffled.
pub fn generate(task: &SyntheticTask, n: usize, seed: u64) -> Result<Dataset> {
    task.validate()?;
    if n < task.classes {
        return Err(Error::input(format!(
            "need at least {} samples, got {n}",
            task.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % task.classes).collect();
    labels.shuffle(&mut rng);
    let samples = labels
        .into_iter()
        .map(|label| Sample {
            tokens: task.sample(label, &mut rng),
            label,
        })
        .collect();
    Ok(Dataset { samples })
}

/// Disjoint per-client index lists covering the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    /// True when the shards are non-empty and exactly cover `0..n`.
    pub fn is_exact(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for shard in &self.shards {
            if shard.is_empty() {
                return false;
            }
            for &i in shard {
                if i >= n || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

fn check_clients(n: usize, clients: usize) -> Result<()> {
    if clients == 0 || clients > n {
        return Err(Error::input(format!("cannot split {n} samples over {clients} clients")));
    }
    Ok(())
}

/// Shuffled shards whose sizes differ by at most one.
pub fn partition_iid(n: usize, clients: usize, seed: u64) -> Result<Partition> {
    check_clients(n, clients)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let (base, extra) = (n / clients, n % clients);
    let mut shards = Vec::with_capacity(clients);
    let mut start = 0;
    for c in 0..clients {
        let size = base + usize::from(c < extra);
        shards.push(idx[start..start + size].to_vec());
        start += size;
    }
    Ok(Partition { shards })
}

/// Label-skewed shards: each class is spread over clients by a
/// Dirichlet(`alpha`) draw.
pub fn partition_dirichlet(labels: &[usize], classes: usize, clients: usize, alpha: f64, seed: u64) -> Result<Partition> {
    check_clients(labels.len(), clients)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::input(format!("dirichlet concentration {alpha} must be positive")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::input(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shards = vec![Vec::new(); clients];
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let mut p: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = p.iter().sum();
        if total > 0.0 {
            p.iter_mut().for_each(|v| *v /= total);
        } else {
            // Every draw underflowed; give the class to one client.
            p = vec![0.0; clients];
            p[rng.random_range(0..clients)] = 1.0;
        }
        let m = members.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (c, pc) in p.iter().enumerate() {
            cum += pc;
            let end = if c + 1 == clients {
                m
            } else {
                ((cum * m as f64).round() as usize).clamp(start, m)
            };
            shards[c].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    while let Some(empty) = shards.iter().position(|s| s.is_empty()) {
        let largest = (0..clients)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = shards[largest].pop().expect("largest shard is non-empty");
        shards[empty].push(moved);
    }
    Ok(Partition { shards })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_labels() {
        let d = generate(&SyntheticTask::default(), 300, 1).unwrap();
        assert_eq!(d.class_counts(3), vec![100, 100, 100]);
        let d = generate(&SyntheticTask::default(), 301, 1).unwrap();
        let c = d.class_counts(3);
        assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
    }

    #[test]
    fn same_seed_same_bytes() {
        let task = SyntheticTask::default();
        let mut a = Vec::new();
        let mut b = Vec::new();
        generate(&task, 50, 9).unwrap().write_jsonl(&task, &mut a).unwrap();
        generate(&task, 50, 9).unwrap().write_jsonl(&task, &mut b).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        generate(&task, 50, 10).unwrap().write_jsonl(&task, &mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn samples_follow_the_layout() {
        let task = SyntheticTask::default();
        let d = generate(&task, 200, 4).unwrap();
        for s in &d.samples {
            let (eos, body) = s.tokens.split_last().unwrap();
            assert_eq!(*eos, task.eos_token);
            assert!((task.min_len..=task.max_len).contains(&body.len()));
            assert!(body.iter().all(|t| *t >= 2 && (*t as usize) < task.vocab));
            let motifs: Vec<usize> = body.iter().filter_map(|t| task.class_of(*t)).collect();
            assert_eq!(motifs.len(), task.motifs_per_sample);
            assert!(motifs.iter().all(|c| *c == s.label));
        }
    }

    #[test]
    fn motif_rule_is_a_perfect_classifier_and_majority_is_not() {
        let task = SyntheticTask::default();
        let d = generate(&task, 600, 5).unwrap();
        let rule = d
            .samples
            .iter()
            .filter(|s| s.tokens.iter().find_map(|t| task.class_of(*t)) == Some(s.label))
            .count();
        assert_eq!(rule, 600);
        let counts = d.class_counts(3);
        let majority = *counts.iter().max().unwrap() as f64 / 600.0;
        assert!((majority - 1.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn invalid_tasks_are_config_errors() {
        let small = SyntheticTask {
            vocab: 11,
            ..SyntheticTask::default()
        };
        assert!(matches!(generate(&small, 10, 0), Err(Error::Config(_))));
        let t = SyntheticTask {
            min_len: 1,
            ..SyntheticTask::default()
        };
        assert!(generate(&t, 10, 0).is_err());
        assert!(matches!(generate(&SyntheticTask::default(), 2, 0), Err(Error::Input(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let task = SyntheticTask::default();
        let d = generate(&task, 20, 3).unwrap();
        let mut buf = Vec::new();
        d.write_jsonl(&task, &mut buf).unwrap();
        let (header, back) = Dataset::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(header.count, 20);
        assert_eq!(back, d);
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(Dataset::read_jsonl(truncated.as_bytes()).is_err());
        assert!(Dataset::read_jsonl(&b"{\"format\":\"other\",\"version\":1,\"vocab\":1,\"classes\":1,\"count\":0}\n"[..]).is_err());
    }

    #[test]
    fn iid_single_and_equal_shards() {
        let p = partition_iid(37, 1, 0).unwrap();
        assert_eq!(p.shards[0].len(), 37);
        assert!(p.is_exact(37));
        let p = partition_iid(100, 10, 0).unwrap();
        assert!(p.shards.iter().all(|s| s.len() == 10));
        assert!(partition_iid(3, 4, 0).is_err());
        assert!(partition_iid(3, 0, 0).is_err());
    }

    #[test]
    fn iid_shards_track_global_class_mix() {
        let d = generate(&SyntheticTask::default(), 900, 2).unwrap();
        let labels = d.labels();
        let p = partition_iid(900, 6, 3).unwrap();
        for shard in &p.shards {
            let n = shard.len() as f64;
            let prob = 1.0 / 3.0;
            let sigma = (n * prob * (1.0 - prob)).sqrt();
            for c in 0..3 {
                let k = shard.iter().filter(|&&i| labels[i] == c).count() as f64;
                assert!((k - n * prob).abs() <= 3.0 * sigma);
            }
        }
    }

    fn dominant_shares(labels: &[usize], p: &Partition) -> Vec<f64> {
        p.shards
            .iter()
            .map(|s| {
                let mut c = [0usize; 3];
                for &i in s {
                    c[labels[i]] += 1;
                }
                *c.iter().max().unwrap() as f64 / s.len() as f64
            })
            .collect()
    }

    #[test]
    fn large_concentration_is_near_iid() {
        let d = generate(&SyntheticTask::default(), 3000, 1).unwrap();
        let labels = d.labels();
        let p = partition_dirichlet(&labels, 3, 10, 1000.0, 7).unwrap();
        assert!(p.is_exact(3000));
        for shard in &p.shards {
            let mut c = [0usize; 3];
            for &i in shard {
                c[labels[i]] += 1;
            }
            let tv: f64 = c.iter().map(|k| (*k as f64 / shard.len() as f64 - 1.0 / 3.0).abs()).sum::<f64>() / 2.0;
            assert!(tv < 0.1, "{tv}");
        }
    }

    #[test]
    fn small_concentration_is_skewed() {
        let d = generate(&SyntheticTask::default(), 600, 1).unwrap();
        let labels = d.labels();
        let mut medians = Vec::new();
        for seed in 0..100 {
            let p = partition_dirichlet(&labels, 3, 10, 0.1, seed).unwrap();
            assert!(p.is_exact(600));
            let mut s = dominant_shares(&labels, &p);
            s.sort_by(f64::total_cmp);
            medians.push((s[4] + s[5]) / 2.0);
        }
        medians.sort_by(f64::total_cmp);
        assert!(medians[50] > 0.6, "{}", medians[50]);
    }

    #[test]
    fn skew_grows_as_concentration_shrinks() {
        let d = generate(&SyntheticTask::default(), 600, 1).unwrap();
        let labels = d.labels();
        let mean_share = |alpha: f64| {
            let mut total = 0.0;
            for seed in 0..40 {
                let p = partition_dirichlet(&labels, 3, 8, alpha, seed).unwrap();
                let s = dominant_shares(&labels, &p);
                total += s.iter().sum::<f64>() / s.len() as f64;
            }
            total / 40.0
        };
        let (a, b, c) = (mean_share(2.0), mean_share(0.5), mean_share(0.1));
        assert!(a < b && b < c, "{a} {b} {c}");
    }

    #[test]
    fn empty_shards_are_repaired() {
        // Eight samples over eight clients at tiny α leaves most shards
        // empty before repair.
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        for seed in 0..20 {
            let p = partition_dirichlet(&labels, 2, 8, 0.01, seed).unwrap();
            assert!(p.is_exact(8));
        }
        assert!(partition_dirichlet(&labels, 2, 3, 0.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn partitions_are_exact(n in 1usize..200, frac in 0.0f64..1.0, alpha in 0.05f64..50.0, seed in any::<u64>()) {
            let clients = 1 + ((n - 1) as f64 * frac) as usize;
            prop_assert!(partition_iid(n, clients, seed).unwrap().is_exact(n));
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            prop_assert!(partition_dirichlet(&labels, 3, clients, alpha, seed).unwrap().is_exact(n));
        }
    }
}
