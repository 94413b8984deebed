use proptest::prelude::*;

use super::*;
use crate::init::{rng, trunc_normal};

fn head(dim: usize, num_ids: usize) -> (ParamStore<f64>, BnneckHead) {
    let mut s = ParamStore::new();
    let cfg = HeadConfig {
        num_ids,
        ..HeadConfig::default()
    };
    let h = BnneckHead::new(&mut s, "head", dim, cfg, &mut rng(1)).unwrap();
    (s, h)
}

fn triplet(points: &[[f64; 2]], labels: &[usize], margin: f64) -> f64 {
    let mut tape = Tape::<f64>::inference();
    let data = points.iter().flatten().copied().collect();
    let x = tape.constant(Tensor::new(vec![points.len(), 2], data).unwrap());
    let l = triplet_batch_hard(&mut tape, x, labels, margin).unwrap();
    tape.value(l).item()
}

/// Every (anchor, positive, negative) combination is scored and the hardest
/// pair is read off per anchor; no shortcuts.
fn exhaustive_triplet(points: &[[f64; 2]], labels: &[usize], margin: f64) -> f64 {
    let d = |i: usize, j: usize| ((points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2)).sqrt();
    let n = points.len();
    let mut hinges = Vec::new();
    for a in 0..n {
        let mut worst: Option<f64> = None;
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                let v = margin + d(a, p) - d(a, q);
                worst = Some(worst.map_or(v, |w: f64| w.max(v)));
            }
        }
        if let Some(w) = worst {
            hinges.push(w.max(0.0));
        }
    }
    hinges.iter().sum::<f64>() / hinges.len() as f64
}

const PLANTED: [[f64; 2]; 4] = [[0.0, 0.0], [0.0, 1.0], [5.0, 0.0], [5.0, 1.0]];
const PLANTED_LABELS: [usize; 4] = [0, 0, 1, 1];

#[test]
fn triplet_zero_when_separated() {
    let pts = [[0.0, 0.0], [0.0, 0.0], [3.0, 0.0], [3.0, 0.0]];
    assert_eq!(triplet(&pts, &[0, 0, 1, 1], 0.3), 0.0);
    assert_eq!(triplet(&PLANTED, &PLANTED_LABELS, 0.3), 0.0);
}

#[test]
fn triplet_equal_distances_give_the_margin() {
    // Scaled standard basis vectors are pairwise equidistant.
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 2.5 } else { 0.0 }));
    let l = triplet_batch_hard(&mut tape, x, &[0, 0, 1, 1], 0.3).unwrap();
    assert!((tape.value(l).item() - 0.3).abs() < 1e-12);
}

#[test]
fn triplet_matches_exhaustive_pairs_oracle() {
    let mut pts = PLANTED;
    pts[2] = [0.5, 0.0];
    let got = triplet(&pts, &PLANTED_LABELS, 0.3);
    let want = exhaustive_triplet(&pts, &PLANTED_LABELS, 0.3);
    assert!(want > 0.0);
    assert!((got - want).abs() < 1e-12);

    let mut r = rng(3);
    for _ in 0..50 {
        let p: Tensor<f64> = trunc_normal(&[8, 2], 1.0, &mut r);
        let pts: Vec<[f64; 2]> = (0..8).map(|i| [p.data()[2 * i], p.data()[2 * i + 1]]).collect();
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        assert!((triplet(&pts, &labels, 0.3) - exhaustive_triplet(&pts, &labels, 0.3)).abs() < 1e-12);
    }
}

#[test]
fn triplet_rejects_single_identity() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(triplet_batch_hard(&mut tape, x, &[1, 1, 1], 0.3), Err(Error::Contract(_))));
    assert!(matches!(triplet_batch_hard(&mut tape, x, &[0, 1, 2], 0.3), Err(Error::Contract(_))));
}

/// Orthogonal matrix from Gram-Schmidt on a random square matrix.
fn random_orthogonal(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let m: Tensor<f64> = trunc_normal(&[n, n], 1.0, &mut rng(seed));
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let mut v = m.row(i).to_vec();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        q.push(v);
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn triplet_is_isometry_invariant(seed in 0u64..10_000, shift in -5.0f64..5.0) {
        let n = 6;
        let x: Tensor<f64> = trunc_normal(&[8, n], 1.0, &mut rng(seed));
        let q = random_orthogonal(n, seed + 1);
        let y = Tensor::from_fn(&[8, n], |i| {
            let (r, c) = (i / n, i % n);
            (0..n).map(|k| q[c][k] * x.data()[r * n + k]).sum::<f64>() + shift
        });
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let mut t = Tape::inference();
        let (xv, yv) = (t.constant(x), t.constant(y));
        let a = triplet_batch_hard(&mut t, xv, &labels, 0.3).unwrap();
        let b = triplet_batch_hard(&mut t, yv, &labels, 0.3).unwrap();
        prop_assert!((t.value(a).item() - t.value(b).item()).abs() <= 1e-5);
    }
}

#[test]
fn id_loss_cases() {
    let ce = |logits: Vec<f64>, c: usize, labels: &[usize]| {
        let mut t = Tape::<f64>::inference();
        let l = t.constant(Tensor::new(vec![labels.len(), c], logits).unwrap());
        let v = id_loss(&mut t, &l, labels).unwrap();
        t.value(v).item()
    };
    assert!((ce(vec![0.3; 5], 5, &[2]) - 5f64.ln()).abs() < 1e-12);
    assert!(ce(vec![20.0, 0.0], 2, &[0]) <= 1e-4);
    assert!((ce(vec![1.0, 2.0], 2, &[1]) - 0.313_261_687_518_222_8).abs() < 1e-6);

    let mut t = Tape::<f64>::inference();
    let l = t.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(id_loss(&mut t, &l, &[3]), Err(Error::Data(_))));
}

fn losses(store: &ParamStore<f64>, h: &BnneckHead, x: &Tensor<f64>, labels: &[usize]) -> LossReport {
    let mut t = Tape::inference();
    let f = t.constant(x.clone());
    let out = h.forward(&mut t, store, f, true).unwrap();
    total_loss(&mut t, &out, labels, 0.3).unwrap().1
}

#[test]
fn total_is_exact_sum_and_bnneck_split_holds() {
    let (mut s, h) = head(6, 4);
    let x: Tensor<f64> = trunc_normal(&[8, 6], 1.0, &mut rng(2));
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    let base = losses(&s, &h, &x, &labels);
    assert_eq!(base.total, base.triplet + base.id);

    let noise: Tensor<f64> = trunc_normal(&[4, 6], 0.5, &mut rng(9));
    let w = s.tensor_mut(h.classifier.weight);
    w.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    let perturbed = losses(&s, &h, &x, &labels);
    assert_eq!(perturbed.triplet, base.triplet);
    assert_ne!(perturbed.id, base.id);

    s.tensor_mut(h.gamma).data_mut().iter_mut().for_each(|v| *v *= 3.0);
    let scaled = losses(&s, &h, &x, &labels);
    assert_eq!(scaled.triplet, base.triplet);
    assert_ne!(scaled.id, perturbed.id);
}

#[test]
fn total_composes_the_two_oracles() {
    let (mut s, h) = head(2, 2);
    s.tensor_mut(h.classifier.weight).data_mut().fill(0.0);
    let labels = PLANTED_LABELS;
    let sep = Tensor::new(vec![4, 2], PLANTED.iter().flatten().copied().collect()).unwrap();
    let r = losses(&s, &h, &sep, &labels);
    assert_eq!(r.triplet, 0.0);
    assert_eq!(r.total, r.id);
    assert!((r.id - 2f64.ln()).abs() < 1e-12);

    let mut pts = PLANTED;
    pts[2] = [0.5, 0.0];
    let moved = Tensor::new(vec![4, 2], pts.iter().flatten().copied().collect()).unwrap();
    let r = losses(&s, &h, &moved, &labels);
    let want = exhaustive_triplet(&pts, &labels, 0.3) + 2f64.ln();
    assert!((r.total - want).abs() < 1e-12);
}

#[test]
fn head_shapes_and_batch_statistics() {
    let (s, h) = head(3, 5);
    let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, 0.25]).unwrap();
    let mut t = Tape::inference();
    let f = t.constant(x);
    let out = h.forward(&mut t, &s, f, true).unwrap();
    assert_eq!(t.shape(out.logits), &[2, 5]);
    let fi = t.value(out.f_i);
    for c in 0..3 {
        let m = (fi.data()[c] + fi.data()[3 + c]) / 2.0;
        assert!(m.abs() <= 1e-6);
        // two rows standardize to ±1, up to eps
        assert!((fi.data()[c].abs() - 1.0).abs() < 1e-3);
    }
    assert_eq!(out.f_t, f);
    let stats = out.stats.unwrap();
    assert_eq!(stats.mean, vec![2.0, 1.0, 0.375]);
}

#[test]
fn eval_mode_needs_fitted_statistics() {
    let (mut s, h) = head(3, 2);
    let x: Tensor<f64> = trunc_normal(&[4, 3], 1.0, &mut rng(5));
    let mut t = Tape::inference();
    let f = t.constant(x.clone());
    assert!(matches!(h.forward(&mut t, &s, f, false), Err(Error::State(_))));

    h.fit_running(&mut s, &x).unwrap();
    let out = h.forward(&mut t, &s, f, false).unwrap();
    assert_eq!(t.shape(out.logits), &[4, 2]);

    let mut s2 = s.clone();
    let stats = BatchStats {
        mean: vec![1.0; 3],
        var_unbiased: vec![2.0; 3],
    };
    h.update_running(&mut s2, &stats);
    let rm = s2.tensor(h.running_mean).data()[0];
    assert!((rm - (0.9 * s.tensor(h.running_mean).data()[0] + 0.1)).abs() < 1e-12);
    assert_eq!(s2.tensor(h.tracked).item(), 2.0);
}

#[test]
fn classifier_is_bias_free_and_counts_match() {
    let (s, h) = head(384, 100);
    assert!(h.classifier.bias.is_none());
    let cfg = HeadConfig {
        num_ids: 100,
        ..HeadConfig::default()
    };
    let (cls, bn, sst) = cfg.param_counts(384);
    assert_eq!((cls, bn, sst), (38_400, 384, 0));
    let enumerated: usize = h.trainable_params().iter().map(|&p| s.tensor(p).numel()).sum();
    assert_eq!(enumerated, cls + bn);
}

#[test]
fn sst_token_is_a_linear_map_of_metadata() {
    let mut s = ParamStore::<f64>::new();
    let enc = SstEncoder::new(&mut s, "head", 4, &mut rng(2)).unwrap();
    assert_eq!(s.count_prefix("head.sst", false), 2 * 4 + 4);
    let mut t = Tape::inference();
    let tok = enc.forward(&mut t, &s, &[(0.0, 0.0), (1.0, 0.5)]).unwrap();
    let v = t.value(tok);
    let b = s.tensor(enc.linear.bias.unwrap()).data();
    let w = s.tensor(enc.linear.weight).data();
    assert_eq!(v.row(0), b);
    for o in 0..4 {
        assert!((v.row(1)[o] - (b[o] + w[o * 2] + 0.5 * w[o * 2 + 1])).abs() < 1e-15);
    }
}
