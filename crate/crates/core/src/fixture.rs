//! Small deterministic graphs shared by unit, integration, and acceptance
//! tests.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{build_graph, Graph, NodeSplit};
use crate::scalar::Scalar;

/// 12 nodes, 3 classes of 4, three intra-class clusters joined in a ring.
/// Features are 5-dimensional: a class offset plus seeded Gaussian noise.
pub fn twelve_node_graph<T: Scalar>() -> Graph<T> {
    let edges = [
        // class 0 cluster
        (0, 1),
        (0, 2),
        (1, 2),
        (2, 3),
        // class 1 cluster
        (4, 5),
        (5, 6),
        (6, 7),
        (4, 7),
        // class 2 cluster
        (8, 9),
        (9, 10),
        (10, 11),
        (8, 11),
        // ring between clusters
        (3, 4),
        (7, 8),
        (11, 0),
    ];
    let labels = vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut x = Array2::zeros((12, 5));
    for i in 0..12 {
        for j in 0..5 {
            let noise: f64 = rng.random::<f64>() - 0.5;
            let offset = if j == labels[i] { 1.5 } else { 0.0 };
            x[[i, j]] = T::cast(offset + noise);
        }
    }
    build_graph(&edges, x, labels).expect("fixture graph is valid")
}

/// Canonical split of the 12-node fixture.
pub fn twelve_node_split() -> NodeSplit {
    NodeSplit {
        train_ids: vec![0, 1, 4, 5, 8, 9],
        val_ids: vec![2, 6, 10],
        test_ids: vec![3, 7, 11],
    }
}

/// Path graph 0-1-2-...-(n-1) with zero features.
pub fn path_graph<T: Scalar>(n: usize) -> Graph<T> {
    let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    build_graph(&edges, Array2::zeros((n, 2)), vec![0; n]).expect("path graph is valid")
}
