//! Identity-balanced P×K batch sampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::manifest::SampleRecord;
use crate::error::{Error, Result};

/// Record indices of one training pool grouped by identity, then modality.
#[derive(Clone, Debug)]
pub struct IdentityIndex {
    groups: Vec<(i64, Vec<Vec<usize>>)>,
}

impl IdentityIndex {
    /// Distractors never enter the index.
    pub fn new(records: &[&SampleRecord]) -> Self {
        let mut map: BTreeMap<i64, BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if !r.is_distractor() {
                map.entry(r.id).or_default().entry(&r.modality).or_default().push(i);
            }
        }
        let groups = map
            .into_iter()
            .map(|(id, mods)| (id, mods.into_values().collect()))
            .collect();
        IdentityIndex { groups }
    }

    pub fn num_ids(&self) -> usize {
        self.groups.len()
    }

    pub fn num_samples(&self) -> usize {
        self.groups.iter().flat_map(|(_, m)| m).map(Vec::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = i64> + '_ {
        self.groups.iter().map(|(id, _)| *id)
    }
}

/// Draws `take` of `pool`, without replacement while the pool allows.
fn draw(pool: &[usize], take: usize, rng: &mut impl Rng, out: &mut Vec<usize>) {
    if pool.len() >= take {
        out.extend(pool.choose_multiple(rng, take));
    } else {
        out.extend((0..take).map(|_| pool[rng.gen_range(0..pool.len())]));
    }
}

/// `P` distinct identities with `K` indices each, laid out identity-major.
/// Within an identity the `K` draws are split across its modalities as evenly
/// as possible.
pub fn pk_sample(index: &IdentityIndex, p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if p == 0 || k == 0 {
        return Err(Error::Config(format!("P and K must be positive, got P={p} K={k}")));
    }
    if index.num_ids() < p {
        return Err(Error::Data(format!(
            "P×K sampling needs {p} identities, the pool has {}",
            index.num_ids()
        )));
    }
    let mut out = Vec::with_capacity(p * k);
    for &g in rand::seq::index::sample(rng, index.num_ids(), p).into_vec().iter() {
        let mods = &index.groups[g].1;
        let m = mods.len();
        let offset = rng.gen_range(0..m);
        for (j, pool) in mods.iter().enumerate() {
            let rank = (j + m - offset) % m;
            let take = k / m + usize::from(rank < k % m);
            if take > 0 {
                draw(pool, take, rng, &mut out);
            }
        }
    }
    Ok(out)
}

/// Sequential per-epoch batch stream with an owned RNG.
pub struct PkSampler<R> {
    pub index: IdentityIndex,
    pub p: usize,
    pub k: usize,
    rng: R,
}

impl<R: Rng> PkSampler<R> {
    pub fn new(index: IdentityIndex, p: usize, k: usize, rng: R) -> Result<Self> {
        if index.num_ids() < p {
            return Err(Error::Data(format!(
                "P×K sampling needs {p} identities, the pool has {}",
                index.num_ids()
            )));
        }
        Ok(PkSampler { index, p, k, rng })
    }

    /// Enough batches to cover the pool once on average.
    pub fn batches_per_epoch(&self) -> usize {
        self.index.num_samples().div_ceil(self.p * self.k).max(1)
    }

    pub fn epoch(&mut self) -> Result<Vec<Vec<usize>>> {
        (0..self.batches_per_epoch())
            .map(|_| pk_sample(&self.index, self.p, self.k, &mut self.rng))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::Split;
    use crate::init::rng;

    fn records(spec: &[(i64, &str, usize)]) -> Vec<SampleRecord> {
        let mut out = Vec::new();
        for &(id, modality, n) in spec {
            for j in 0..n {
                out.push(SampleRecord {
                    path: format!("{id}_{modality}_{j}"),
                    id,
                    modality: modality.into(),
                    split: Split::Train,
                    size: None,
                    aspect: None,
                });
            }
        }
        out
    }

    fn index(recs: &[SampleRecord]) -> IdentityIndex {
        IdentityIndex::new(&recs.iter().collect::<Vec<_>>())
    }

    fn labels(recs: &[SampleRecord], batch: &[usize]) -> Vec<i64> {
        batch.iter().map(|&i| recs[i].id).collect()
    }

    #[test]
    fn two_by_two_on_four_ids() {
        let recs = records(&[(0, "opt", 3), (1, "opt", 3), (2, "opt", 3), (3, "opt", 3)]);
        let b = pk_sample(&index(&recs), 2, 2, &mut rng(1)).unwrap();
        let l = labels(&recs, &b);
        assert_eq!(l.len(), 4);
        assert_eq!(l[0], l[1]);
        assert_eq!(l[2], l[3]);
        assert_ne!(l[0], l[2]);
        let mut uniq = b.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 4);
    }

    #[test]
    fn single_image_identity_is_drawn_twice() {
        let recs = records(&[(5, "sar", 1)]);
        let b = pk_sample(&index(&recs), 1, 2, &mut rng(2)).unwrap();
        assert_eq!(b, vec![0, 0]);
    }

    #[test]
    fn too_few_identities_is_a_data_error() {
        let recs = records(&[(0, "opt", 4), (1, "opt", 4)]);
        assert!(matches!(pk_sample(&index(&recs), 3, 2, &mut rng(3)), Err(Error::Data(_))));
    }

    #[test]
    fn modalities_are_balanced_within_identity() {
        let recs = records(&[(0, "opt", 6), (0, "sar", 6), (1, "opt", 6), (1, "sar", 2), (2, "opt", 5)]);
        let idx = index(&recs);
        let mut r = rng(4);
        for _ in 0..50 {
            let b = pk_sample(&idx, 3, 4, &mut r).unwrap();
            for chunk in b.chunks(4) {
                let id = recs[chunk[0]].id;
                assert!(chunk.iter().all(|&i| recs[i].id == id));
                let opt = chunk.iter().filter(|&&i| recs[i].modality == "opt").count();
                if id == 2 {
                    assert_eq!(opt, 4);
                } else {
                    assert_eq!(opt, 2);
                }
            }
        }
    }

    #[test]
    fn distractors_never_enter_batches() {
        let recs = records(&[(-1, "opt", 20), (0, "opt", 2), (1, "sar", 2)]);
        let idx = index(&recs);
        assert_eq!(idx.num_ids(), 2);
        let mut r = rng(5);
        for _ in 0..100 {
            let b = pk_sample(&idx, 2, 3, &mut r).unwrap();
            assert!(b.iter().all(|&i| recs[i].id >= 0));
        }
    }

    /// Each of the N identities is chosen with probability P/N per draw, so
    /// its count over T draws is Binomial(T, P/N).
    #[test]
    fn identity_frequencies_are_uniform_within_three_sigma() {
        let n = 12;
        let spec: Vec<(i64, &str, usize)> = (0..n as i64).map(|i| (i, "opt", 1 + (i as usize % 5))).collect();
        let recs = records(&spec);
        let idx = index(&recs);
        let (p, trials) = (4, 1000);
        let mut counts = vec![0usize; n];
        let mut r = rng(6);
        for _ in 0..trials {
            let b = pk_sample(&idx, p, 2, &mut r).unwrap();
            for c in b.chunks(2) {
                counts[recs[c[0]].id as usize] += 1;
            }
        }
        let q = p as f64 / n as f64;
        let mean = trials as f64 * q;
        let sigma = (trials as f64 * q * (1.0 - q)).sqrt();
        for (id, &c) in counts.iter().enumerate() {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "id {id}: {c} vs {mean}±{sigma}");
        }
    }

    #[test]
    fn epochs_are_reproducible() {
        let recs = records(&[(0, "opt", 4), (1, "sar", 4), (2, "opt", 4)]);
        let run = || PkSampler::new(index(&recs), 2, 2, rng(7)).unwrap().epoch().unwrap();
        assert_eq!(run(), run());
        assert_eq!(run().len(), 3);
    }
}
