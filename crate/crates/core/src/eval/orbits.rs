//! Node orbit counts over connected graphlets of two to four nodes, in the
//! usual fifteen-orbit numbering:
//!
//! | orbits | graphlet |
//! |---|---|
//! | 0 | edge |
//! | 1 end, 2 middle | 3-path |
//! | 3 | triangle |
//! | 4 end, 5 middle | 4-path |
//! | 6 leaf, 7 center | 3-star |
//! | 8 | 4-cycle |
//! | 9 tail, 10 base, 11 center | paw |
//! | 12 degree 2, 13 degree 3 | diamond |
//! | 14 | 4-clique |

use crate::graph::Graph;

pub const ORBITS: usize = 15;

/// Orbit of each node of a connected graphlet, given its edge count and the
/// node degrees inside the graphlet. `None` for disconnected node sets.
pub fn classify(edges: usize, degrees: &[usize]) -> Option<Vec<usize>> {
    let max = degrees.iter().copied().max().unwrap_or(0);
    let min = degrees.iter().copied().min().unwrap_or(0);
    let map = |f: &dyn Fn(usize) -> usize| Some(degrees.iter().map(|&d| f(d)).collect());
    match (degrees.len(), edges) {
        (2, 1) => map(&|_| 0),
        (3, 2) => map(&|d| if d == 1 { 1 } else { 2 }),
        (3, 3) => map(&|_| 3),
        (4, _) if min == 0 || edges < 3 => None,
        (4, 3) if max == 3 => map(&|d| if d == 1 { 6 } else { 7 }),
        (4, 3) => map(&|d| if d == 1 { 4 } else { 5 }),
        (4, 4) if max == 3 => map(&|d| 8 + d),
        (4, 4) => map(&|_| 8),
        (4, 5) => map(&|d| if d == 2 { 12 } else { 13 }),
        (4, 6) => map(&|_| 14),
        _ => None,
    }
}

/// Per-node orbit counts, `n × ORBITS` row-major, by exhaustive enumeration
/// of node subsets of size two to four.
pub fn orbit_counts(g: &Graph) -> Vec<usize> {
    let n = g.n();
    let adj = super::simple_adjacency(g);
    let mut out = vec![0usize; n * ORBITS];
    let mut count = |nodes: &[usize]| {
        let degrees: Vec<usize> = nodes.iter().map(|&v| nodes.iter().filter(|&&u| adj[v * n + u]).count()).collect();
        let edges = degrees.iter().sum::<usize>() / 2;
        if let Some(orbits) = classify(edges, &degrees) {
            for (&v, o) in nodes.iter().zip(orbits) {
                out[v * ORBITS + o] += 1;
            }
        }
    };
    for a in 0..n {
        for b in a + 1..n {
            count(&[a, b]);
            for c in b + 1..n {
                count(&[a, b, c]);
                for d in c + 1..n {
                    count(&[a, b, c, d]);
                }
            }
        }
    }
    out
}

/// Orbit counts summed over nodes.
pub fn orbit_totals(g: &Graph) -> Vec<usize> {
    let mut t = vec![0; ORBITS];
    for row in orbit_counts(g).chunks(ORBITS) {
        for (x, &c) in t.iter_mut().zip(row) {
            *x += c;
        }
    }
    t
}
