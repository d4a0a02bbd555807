use super::Graph;
use crate::error::{Error, Result};

pub const MAX_ISO_NODES: usize = 8;

/// Exhaustive isomorphism test over all `n!` relabelings, attributes included.
/// Intended as a test oracle for graphs with at most eight nodes.
pub fn is_isomorphic_small(a: &Graph, b: &Graph) -> Result<bool> {
    if a.n() > MAX_ISO_NODES || b.n() > MAX_ISO_NODES {
        return Err(Error::Unsupported(format!(
            "exhaustive isomorphism is limited to {MAX_ISO_NODES} nodes"
        )));
    }
    if a.n() != b.n()
        || a.node_cats() != b.node_cats()
        || a.edge_cats() != b.edge_cats()
        || a.is_directed() != b.is_directed()
    {
        return Ok(false);
    }
    let n = a.n();
    let mut perm = Vec::with_capacity(n);
    let mut used = vec![false; n];
    Ok(extend(a, b, &mut perm, &mut used))
}

// Depth-first over partial maps a[i] -> b[perm[i]]; a branch is cut as soon as an
// assigned pair disagrees, which visits every consistent permutation.
fn extend(a: &Graph, b: &Graph, perm: &mut Vec<usize>, used: &mut [bool]) -> bool {
    let i = perm.len();
    if i == a.n() {
        return true;
    }
    for t in 0..a.n() {
        if used[t] || a.node_cat(i) != b.node_cat(t) {
            continue;
        }
        let consistent = perm
            .iter()
            .enumerate()
            .all(|(k, &pk)| a.edge_cat(i, k) == b.edge_cat(t, pk) && a.edge_cat(k, i) == b.edge_cat(pk, t));
        if !consistent {
            continue;
        }
        used[t] = true;
        perm.push(t);
        if extend(a, b, perm, used) {
            return true;
        }
        perm.pop();
        used[t] = false;
    }
    false
}
