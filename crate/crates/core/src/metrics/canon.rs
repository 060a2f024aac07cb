//! Canonical form of vertex- and edge-labeled graphs.
//!
//! Colors are refined Weisfeiler-Lehman style until stable. If some color
//! class still holds several vertices, each member of the first such class
//! is individualized in turn and the search recurses; the smallest encoding
//! over all leaves is the canonical form. Two graphs are isomorphic iff
//! their canonical forms are equal.

use sha2::{Digest, Sha256};

/// Sorted-signature relabelling until the partition stops splitting.
fn refine(colors: &mut [u32], adj: &[Vec<u8>]) {
    let n = colors.len();
    let mut classes = count_classes(colors);
    loop {
        let sigs: Vec<(u32, Vec<(u32, u8)>)> = (0..n)
            .map(|i| {
                let mut nb: Vec<(u32, u8)> = (0..n).filter(|&j| adj[i][j] > 0).map(|j| (colors[j], adj[i][j])).collect();
                nb.sort_unstable();
                (colors[i], nb)
            })
            .collect();
        let mut sorted: Vec<&(u32, Vec<(u32, u8)>)> = sigs.iter().collect();
        sorted.sort();
        sorted.dedup();
        for (c, s) in colors.iter_mut().zip(&sigs) {
            *c = sorted.binary_search(&s).expect("signature present") as u32;
        }
        let next = count_classes(colors);
        if next == classes {
            return;
        }
        classes = next;
    }
}

fn count_classes(colors: &[u32]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

fn encode(colors: &[u32], labels: &[u32], adj: &[Vec<u8>]) -> Vec<u32> {
    let n = colors.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.sort_by_key(|&i| colors[i]);
    let mut out = Vec::with_capacity(1 + n + n * n / 2);
    out.push(n as u32);
    out.extend(perm.iter().map(|&i| labels[i]));
    for a in 0..n {
        for b in a + 1..n {
            out.push(adj[perm[a]][perm[b]] as u32);
        }
    }
    out
}

fn search(colors: Vec<u32>, labels: &[u32], adj: &[Vec<u8>], best: &mut Option<Vec<u32>>) {
    let n = colors.len();
    let mut counts = vec![0usize; n];
    for &c in &colors {
        counts[c as usize] += 1;
    }
    let target = (0..n as u32).find(|&c| counts[c as usize] > 1);
    let Some(cell) = target else {
        let code = encode(&colors, labels, adj);
        if best.as_ref().is_none_or(|b| code < *b) {
            *best = Some(code);
        }
        return;
    };
    for v in (0..n).filter(|&v| colors[v] == cell) {
        let mut next: Vec<u32> = colors
            .iter()
            .enumerate()
            .map(|(u, &c)| 2 * c + u32::from(c == cell && u != v))
            .collect();
        refine(&mut next, adj);
        search(next, labels, adj, best);
    }
}

/// Canonical encoding: vertex count, labels in canonical order, then the
/// upper triangle of the relabelled order matrix.
pub fn canonical_form(labels: &[u32], adj: &[Vec<u8>]) -> Vec<u32> {
    let n = labels.len();
    assert!(adj.len() == n && adj.iter().all(|r| r.len() == n), "adjacency must be n x n");
    let mut colors: Vec<u32> = {
        let mut distinct = labels.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        labels
            .iter()
            .map(|l| distinct.binary_search(l).expect("label present") as u32)
            .collect()
    };
    refine(&mut colors, adj);
    let mut best = None;
    search(colors, labels, adj, &mut best);
    best.unwrap_or_else(|| vec![0])
}

/// Hex SHA-256 of the canonical encoding.
pub fn canonical_key(labels: &[u32], adj: &[Vec<u8>]) -> String {
    let mut hasher = Sha256::new();
    for v in canonical_form(labels, adj) {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(labels: &[u32]) -> Vec<Vec<u8>> {
        let n = labels.len();
        let mut adj = vec![vec![0; n]; n];
        for i in 1..n {
            adj[i - 1][i] = 1;
            adj[i][i - 1] = 1;
        }
        adj
    }

    #[test]
    fn relabelled_graphs_share_a_key() {
        let labels = [1, 0, 0, 2];
        let adj = path(&labels);
        let perm = [2, 0, 3, 1];
        let mut plabels = [0; 4];
        let mut padj = vec![vec![0; 4]; 4];
        for i in 0..4 {
            plabels[perm[i]] = labels[i];
            for j in 0..4 {
                padj[perm[i]][perm[j]] = adj[i][j];
            }
        }
        assert_eq!(canonical_key(&labels, &adj), canonical_key(&plabels, &padj));
    }

    #[test]
    fn regular_graphs_are_told_apart() {
        // A 6-cycle and two triangles have identical WL colorings.
        let mut hex = vec![vec![0u8; 6]; 6];
        for i in 0..6 {
            hex[i][(i + 1) % 6] = 1;
            hex[(i + 1) % 6][i] = 1;
        }
        let mut tri = vec![vec![0u8; 6]; 6];
        for base in [0, 3] {
            for k in 0..3 {
                let (a, b) = (base + k, base + (k + 1) % 3);
                tri[a][b] = 1;
                tri[b][a] = 1;
            }
        }
        let labels = [0; 6];
        assert_ne!(canonical_key(&labels, &hex), canonical_key(&labels, &tri));
    }

    #[test]
    fn bond_orders_matter() {
        let labels = [0, 0];
        let single = vec![vec![0, 1], vec![1, 0]];
        let double = vec![vec![0, 2], vec![2, 0]];
        assert_ne!(canonical_key(&labels, &single), canonical_key(&labels, &double));
        assert_eq!(canonical_key(&[], &[]).len(), 64);
    }
}
