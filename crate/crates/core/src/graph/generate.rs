use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};

/// Reproducible description of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub generator: String,
    pub count: usize,
    pub seed: u64,
    /// Candidate graph sizes; each must be even (two equal communities).
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_p_intra")]
    pub p_intra: f64,
    #[serde(default = "default_p_inter")]
    pub p_inter: f64,
}

fn default_sizes() -> Vec<usize> {
    vec![12, 14, 16, 18, 20]
}

fn default_p_intra() -> f64 {
    0.7
}

fn default_p_inter() -> f64 {
    0.03
}

impl DatasetSpec {
    pub fn community_small(count: usize, seed: u64) -> Self {
        DatasetSpec {
            generator: "community-small".into(),
            count,
            seed,
            sizes: default_sizes(),
            p_intra: default_p_intra(),
            p_inter: default_p_inter(),
        }
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Graph>> {
    match spec.generator.as_str() {
        "community-small" => {
            if spec.sizes.is_empty() || spec.sizes.iter().any(|&s| s < 2 || s % 2 != 0) {
                return Err(Error::Config(vec![format!(
                    "community sizes must be even and >= 2, got {:?}",
                    spec.sizes
                )]));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            Ok((0..spec.count)
                .map(|_| two_communities(&mut rng, &spec.sizes, spec.p_intra, spec.p_inter))
                .collect())
        }
        other => Err(Error::Unsupported(format!("unknown generator '{other}'"))),
    }
}

/// One Community-Small graph: two equal communities, intra-community edges with
/// probability 0.7, inter-community edges with probability 0.03, and at least one
/// crossing edge.
pub fn gen_community_small<R: RngCore>(rng: &mut R) -> Graph {
    two_communities(rng, &default_sizes(), default_p_intra(), default_p_inter())
}

// Bernoulli draws compare a raw u32 against a fixed threshold so the stream is
// identical on every platform.
fn bernoulli_threshold(p: f64) -> u64 {
    (p.clamp(0.0, 1.0) * 4_294_967_296.0).round() as u64
}

fn two_communities<R: RngCore>(rng: &mut R, sizes: &[usize], p_intra: f64, p_inter: f64) -> Graph {
    let n = sizes[rng.random_range(0..sizes.len())];
    let half = n / 2;
    let intra = bernoulli_threshold(p_intra);
    let inter = bernoulli_threshold(p_inter);
    let mut edges = Vec::new();
    let mut crossing = 0;
    for i in 0..n {
        for j in i + 1..n {
            let same = (i < half) == (j < half);
            let t = if same { intra } else { inter };
            if u64::from(rng.next_u32()) < t {
                edges.push((i, j));
                if !same {
                    crossing += 1;
                }
            }
        }
    }
    if crossing == 0 {
        let a = rng.random_range(0..half);
        let b = half + rng.random_range(0..n - half);
        edges.push((a, b));
    }
    Graph::simple(n, &edges).expect("generator produces valid edges")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_crossing_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let g = gen_community_small(&mut rng);
            let n = g.n();
            assert!([12, 14, 16, 18, 20].contains(&n));
            let half = n / 2;
            let crossing = g.edge_list().iter().filter(|&&(i, j, _)| (i < half) != (j < half)).count();
            assert!(crossing >= 1);
        }
    }

    #[test]
    fn intra_density_matches_bernoulli() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut hits, mut total) = (0usize, 0usize);
        for _ in 0..10_000 {
            let g = gen_community_small(&mut rng);
            let half = g.n() / 2;
            for i in 0..g.n() {
                for j in i + 1..g.n() {
                    if (i < half) == (j < half) {
                        total += 1;
                        hits += usize::from(g.has_edge(i, j));
                    }
                }
            }
        }
        let density = hits as f64 / total as f64;
        assert!((density - 0.7).abs() < 0.02, "density {density}");
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = DatasetSpec::community_small(20, 7);
        assert_eq!(generate_dataset(&spec).unwrap(), generate_dataset(&spec).unwrap());
        let other = DatasetSpec::community_small(20, 8);
        assert_ne!(generate_dataset(&spec).unwrap(), generate_dataset(&other).unwrap());
    }

    #[test]
    fn unknown_generator_is_rejected() {
        let mut spec = DatasetSpec::community_small(1, 0);
        spec.generator = "grid".into();
        assert!(generate_dataset(&spec).is_err());
        spec.generator = "community-small".into();
        spec.sizes = vec![5];
        assert!(generate_dataset(&spec).is_err());
    }
}
