use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::graph::permute_rows;
use crate::testutil::random_perm;

fn book(parts: usize, m: usize, dim: usize, centers: &[Vec<f64>]) -> CodebookSet {
    let mut cbs = CodebookSet::new(parts, m, dim).unwrap();
    for (c, h) in centers.iter().enumerate() {
        cbs.set_codebook(c, h, &vec![1.0; m]).unwrap();
    }
    cbs
}

fn random_book(rng: &mut ChaCha8Rng, parts: usize, m: usize, dim: usize) -> CodebookSet {
    let centers: Vec<Vec<f64>> = (0..parts).map(|_| (0..m * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    book(parts, m, dim, &centers)
}

#[test]
fn partition_is_a_reshape() {
    let z = Tensor::matrix(2, 16, (0..32).map(f64::from).collect()).unwrap();
    let p = partition(&z, 2).unwrap();
    assert_eq!(p.shape(), &[2, 2, 8]);
    assert_eq!(p.data(), z.data());
    assert_eq!(partition(&z, 1).unwrap().data(), z.data());
    assert!(partition(&z, 3).is_err());
}

#[test]
fn nearest_codeword_and_tie_rule() {
    let cbs = book(1, 2, 2, &[vec![0.0, 0.0, 1.0, 1.0]]);
    let q = quantize(&Tensor::matrix(1, 2, vec![0.2, 0.1]).unwrap(), &cbs).unwrap();
    assert_eq!(q.indices, vec![0]);
    let q = quantize(&Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap(), &cbs).unwrap();
    assert_eq!(q.indices, vec![0]);
    let q = quantize(&Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(), &cbs).unwrap();
    assert_eq!(q.indices, vec![0]);
}

#[test]
fn quantize_requires_initialized_codebooks() {
    let cbs = CodebookSet::new(1, 2, 2).unwrap();
    assert!(quantize(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), &cbs).is_err());
}

#[test]
fn quantize_is_idempotent_and_codewords_match_indices() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cbs = random_book(&mut rng, 2, 5, 3);
    let z = Tensor::matrix(7, 6, (0..42).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let q = quantize(&z, &cbs).unwrap();
    for i in 0..7 {
        for c in 0..2 {
            let at = (i * 2 + c) * 3;
            assert_eq!(&q.codewords.data()[at..at + 3], cbs.codeword(c, q.tuple(i)[c]));
        }
    }
    let again = quantize(&q.flat(), &cbs).unwrap();
    assert_eq!(again, q);
    assert_eq!(lookup(&cbs, &q.indices).unwrap(), q);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantize_is_equivariant(seed in 0u64..1000, n in 1usize..12, parts in 1usize..4, m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 2;
        let cbs = random_book(&mut rng, parts, m, dim);
        let w = parts * dim;
        let z = Tensor::matrix(n, w, (0..n * w).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let perm = random_perm(&mut rng, n);
        let zp = Tensor::matrix(n, w, permute_rows(z.data(), w, &perm)).unwrap();
        let q = quantize(&z, &cbs).unwrap();
        let qp = quantize(&zp, &cbs).unwrap();
        prop_assert_eq!(qp.indices, permute_rows(&q.indices, parts, &perm));
        prop_assert_eq!(qp.codewords.data(), &permute_rows(q.codewords.data(), w, &perm)[..]);
    }

    #[test]
    fn quantize_is_an_argmin(seed in 0u64..1000, m in 1usize..8, dim in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cbs = random_book(&mut rng, 1, m, dim);
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let q = quantize(&Tensor::matrix(1, dim, z.clone()).unwrap(), &cbs).unwrap();
        let chosen: f64 = z.iter().zip(cbs.codeword(0, q.indices[0])).map(|(a, b)| (a - b) * (a - b)).sum();
        for g in 0..m {
            let d: f64 = z.iter().zip(cbs.codeword(0, g)).map(|(a, b)| (a - b) * (a - b)).sum();
            prop_assert!(chosen <= d);
        }
    }
}

#[test]
fn kmeans_saturated_seeding_returns_the_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples = vec![0.0, 0.0, 3.0, 1.0, -2.0, 4.0];
    let km = kmeanspp_init(&samples, 2, 3, &mut rng).unwrap();
    let mut got: Vec<Vec<f64>> = km.centers.chunks(2).map(<[f64]>::to_vec).collect();
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(got, vec![vec![-2.0, 4.0], vec![0.0, 0.0], vec![3.0, 1.0]]);
    assert!(km.warning.is_none());
}

#[test]
fn kmeans_single_center_is_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..3.0)).collect();
    let km = kmeanspp_init(&samples, 2, 1, &mut rng).unwrap();
    for x in 0..2 {
        let mean = samples.iter().skip(x).step_by(2).sum::<f64>() / 20.0;
        assert!((km.centers[x] - mean).abs() < 1e-12);
    }
}

#[test]
fn kmeans_reports_duplicate_centers() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let km = kmeanspp_init(&[1.0, 1.0, 1.0, 2.0], 1, 3, &mut rng).unwrap();
    assert!(km.warning.is_some());
    assert!(kmeanspp_init(&[1.0], 1, 2, &mut rng).is_err());
}

#[test]
fn kmeans_finds_two_blobs() {
    let noise = Normal::new(0.0, 1.0).unwrap();
    let means = [[-6.0, 0.0], [6.0, 2.0]];
    let mut hits = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut samples = Vec::new();
        for k in 0..200 {
            let mu = means[k % 2];
            samples.push(mu[0] + noise.sample(&mut rng));
            samples.push(mu[1] + noise.sample(&mut rng));
        }
        let km = kmeanspp_init(&samples, 2, 2, &mut rng).unwrap();
        let near = |mu: &[f64; 2]| km.centers.chunks(2).any(|c| ((c[0] - mu[0]).powi(2) + (c[1] - mu[1]).powi(2)).sqrt() < 3.0);
        if near(&means[0]) && near(&means[1]) {
            hits += 1;
        }
    }
    assert!(hits >= 99, "{hits}/100");
}

fn one_part(cbs: &CodebookSet, z: &[f64]) -> (Tensor, Vec<usize>) {
    let t = Tensor::matrix(z.len() / cbs.dim, cbs.dim, z.to_vec()).unwrap();
    let q = quantize(&t, cbs).unwrap();
    (t, q.indices)
}

#[test]
fn zero_memory_ema_jumps_to_batch_mean() {
    let mut cbs = book(1, 2, 1, &[vec![0.0, 10.0]]);
    cbs.decay = 0.0;
    let (z, idx) = one_part(&cbs, &[1.0, 2.0, 9.0]);
    ema_update(&mut cbs, &z, &idx).unwrap();
    assert_eq!(cbs.codewords[0], vec![1.5, 9.0]);
}

#[test]
fn repeated_batch_converges_to_the_geometric_limit() {
    let mut cbs = book(1, 2, 2, &[vec![0.01, 0.0, 5.0, 5.0]]);
    cbs.ema_count[0] = vec![2.0, 1.0];
    cbs.ema_sum[0] = vec![0.02, 0.0, 5.0, 5.0];
    let batch = [-0.1, 0.1, 0.1, -0.1, 5.0, 5.0];
    let (z, idx) = one_part(&cbs, &batch);
    assert_eq!(idx, vec![0, 0, 1]);
    for _ in 0..500 {
        ema_update(&mut cbs, &z, &idx).unwrap();
    }
    // closed form of the recursion: S_t/N_t with S_t = g^t S_0 + (1 − g^t)·sum
    let gt = 0.99f64.powi(500);
    let expect = gt * 0.02 / (gt * 2.0 + (1.0 - gt) * 2.0);
    assert!((cbs.codewords[0][0] - expect).abs() < 1e-12);
    assert!(cbs.codewords[0][0].abs() < 1e-4 && cbs.codewords[0][1].abs() < 1e-4);
}

#[test]
fn unassigned_codeword_stays_put() {
    let mut cbs = book(1, 2, 1, &[vec![0.0, 7.0]]);
    let (z, idx) = one_part(&cbs, &[0.5, -0.5, 0.25]);
    for _ in 0..50 {
        ema_update(&mut cbs, &z, &idx).unwrap();
        assert!((cbs.codewords[0][1] - 7.0).abs() < 1e-12);
    }
}

#[test]
fn ema_codewords_match_accumulators() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cbs = random_book(&mut rng, 2, 4, 2);
    let z = Tensor::matrix(20, 4, (0..80).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let q = quantize(&z, &cbs).unwrap();
    ema_update(&mut cbs, &z, &q.indices).unwrap();
    for c in 0..2 {
        for k in 0..4 {
            let smoothed = cbs.ema_count[c][k].max(cbs.eps);
            for x in 0..2 {
                assert_eq!(cbs.codewords[c][k * 2 + x], cbs.ema_sum[c][k * 2 + x] / smoothed);
                assert!(cbs.codewords[c][k * 2 + x].is_finite());
            }
        }
    }
}

#[test]
fn ema_movement_is_non_increasing_after_burn_in() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let centers = [[-3.0, 0.0], [3.0, 0.0], [0.0, 4.0]];
    let data: Vec<f64> = (0..300).flat_map(|k| centers[k % 3].map(|c| c + noise.sample(&mut rng))).collect();
    let km = kmeanspp_init(&data, 2, 3, &mut rng).unwrap();
    let mut cbs = CodebookSet::new(1, 3, 2).unwrap();
    // start away from the Lloyd solution so the EMA has somewhere to go
    let shifted: Vec<f64> = km.centers.iter().map(|x| x + 0.5).collect();
    cbs.set_codebook(0, &shifted, &[100.0; 3]).unwrap();
    let z = Tensor::matrix(300, 2, data).unwrap();
    let mut moves = Vec::new();
    for _ in 0..200 {
        let before = cbs.codewords[0].clone();
        let q = quantize(&z, &cbs).unwrap();
        ema_update(&mut cbs, &z, &q.indices).unwrap();
        moves.push(before.iter().zip(&cbs.codewords[0]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
    }
    for w in moves[10..].windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} then {}", w[0], w[1]);
    }
}

#[test]
fn commitment_loss_examples() {
    let tape = Tape::new();
    let z = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let q = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    assert_eq!(tape.item(commitment_loss(&tape, z, q, 1).unwrap()), 1.0);
    let same = commitment_loss(&tape, z, z, 1).unwrap();
    assert_eq!(tape.item(same), 0.0);
}

#[test]
fn commitment_gradient_skips_the_codebook() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cbs = random_book(&mut rng, 2, 3, 2);
    let tape = Tape::new();
    let zh = tape.leaf(Tensor::matrix(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
    let tq = quantize_on_tape(&tape, zh, &cbs).unwrap();
    let commit = commitment_loss(&tape, zh, tq.zq, 8).unwrap();
    let g = tape.backward(commit).unwrap();
    for &cb in &tq.codebooks {
        assert!(g.data(cb).iter().all(|&x| x == 0.0));
    }
    // d/dzh of mean squared distance
    let zq = tape.value(tq.zq).clone();
    let zv = tape.value(zh).clone();
    for ((gz, a), b) in g.data(zh).iter().zip(zv.data()).zip(zq.data()) {
        assert!((gz - 2.0 * (a - b) / 8.0).abs() < 1e-15);
    }
}

#[test]
fn straight_through_passes_gradients_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cbs = random_book(&mut rng, 2, 3, 2);
    let tape = Tape::new();
    let zh = tape.leaf(Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
    let tq = quantize_on_tape(&tape, zh, &cbs).unwrap();
    assert_eq!(tape.value(tq.st).data(), tq.quantized.flat().data());
    let w = tape.constant(Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
    let y = tape.sum_all(tape.mul(tape.mul(tq.st, tq.st).unwrap(), w).unwrap());
    let g = tape.backward(y).unwrap();
    assert_eq!(g.data(zh), g.data(tq.st));
    for &cb in &tq.codebooks {
        assert!(!g.reached(cb));
    }
}

#[test]
fn perplexity_examples() {
    assert!((perplexity([5, 5, 5, 5], 4.0).unwrap() - 1.0).abs() < 1e-12);
    assert!((perplexity([9], 4.0).unwrap() - 0.25).abs() < 1e-12);
    assert!((perplexity([3, 3, 0], 4.0).unwrap() - 0.5).abs() < 1e-12);
    assert!(perplexity([0, 0], 4.0).is_err());
    let h = tuple_histogram([&[0usize, 1][..], &[0, 1], &[1, 1]]);
    assert_eq!(h.len(), 2);
    assert_eq!(h[&vec![0, 1]], 2);
}
