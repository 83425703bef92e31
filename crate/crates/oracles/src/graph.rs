//! All-pairs distances and hub scores by dense methods.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Directed hop distances by Floyd-Warshall; `None` when unreachable.
pub fn floyd_warshall(n: usize, edges: &[[usize; 2]]) -> Vec<Vec<Option<u32>>> {
    const INF: u64 = u64::MAX / 4;
    let mut d = vec![vec![INF; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &[u, v] in edges {
        d[u][v] = d[u][v].min(1);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d.into_iter()
        .map(|row| {
            row.into_iter()
                .map(|x| (x < INF).then_some(x as u32))
                .collect()
        })
        .collect()
}

/// Limit of HITS hub iteration from the uniform vector: the projection of
/// the uniform vector onto the dominant eigenspace of `A A^T`, normalized.
pub fn hubs_eigen(n: usize, edges: &[[usize; 2]]) -> Vec<f64> {
    let mut a = DMatrix::<f64>::zeros(n, n);
    for &[u, v] in edges {
        a[(u, v)] = 1.0;
    }
    let m = &a * a.transpose();
    let eig = SymmetricEigen::new(m);
    let top = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let start = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut proj = DVector::zeros(n);
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if (lambda - top).abs() <= 1e-9 * top.max(1.0) {
            let v = eig.eigenvectors.column(i);
            proj += v * v.dot(&start);
        }
    }
    let norm = proj.norm();
    proj.iter().map(|x| x / norm).collect()
}
