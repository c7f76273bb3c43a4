//! Energy-based edge reconstruction, Gumbel sampling of the node-level
//! posterior, and the replacement losses that make up the training objective.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{Mat, Segments, Tape, Var};
use crate::error::{CgrlError, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;

/// Shared bilinear form scoring edge compatibility.
#[derive(Debug, Clone)]
pub struct EnergyModel<T: Scalar> {
    pub w_uv: Mat<T>,
}

/// E(u, v) = -H_v · W_uv · H_u^T.
pub fn edge_energy<T: Scalar>(
    hc: &Mat<T>,
    model: &EnergyModel<T>,
    u: usize,
    v: usize,
) -> Result<T> {
    let n = hc.nrows();
    for id in [u, v] {
        if id >= n {
            return Err(CgrlError::NodeOutOfRange { id, n });
        }
    }
    if hc.ncols() != model.w_uv.nrows() || model.w_uv.nrows() != model.w_uv.ncols() {
        return Err(CgrlError::Shape {
            op: "edge_energy",
            expect: format!("{0}x{0} bilinear form", hc.ncols()),
            got: format!("{}x{}", model.w_uv.nrows(), model.w_uv.ncols()),
        });
    }
    let hv = hc.row(v);
    let hu = hc.row(u);
    let mut s = T::zero();
    for i in 0..hc.ncols() {
        for j in 0..hc.ncols() {
            s += hv[i] * model.w_uv[[i, j]] * hu[j];
        }
    }
    Ok(-s)
}

/// Softmax of negative energies over the neighborhood of `v`.
pub fn edge_distribution<T: Scalar>(
    hc: &Mat<T>,
    model: &EnergyModel<T>,
    g: &Graph<T>,
    v: usize,
) -> Result<Vec<T>> {
    if v >= g.n() {
        return Err(CgrlError::NodeOutOfRange { id: v, n: g.n() });
    }
    let neigh = g.neighbors(v);
    if neigh.is_empty() {
        return Err(CgrlError::IsolatedNode(v));
    }
    let scores: Vec<T> = neigh
        .iter()
        .map(|&u| edge_energy(hc, model, u, v).map(|e| -e))
        .collect::<Result<_>>()?;
    let m = scores.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<T> = scores.iter().map(|&s| (s - m).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Seeded standard Gumbel draws: -log(-log(u)), u ~ U(0, 1) open interval.
pub fn gumbel_noise<T: Scalar>(rows: usize, cols: usize, seed: u64) -> Mat<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_shape_fn((rows, cols), |_| {
        let u: f64 = rng.sample(rand::distr::Open01);
        T::cast(-(-u.ln()).ln())
    })
}

/// Row-stochastic sample of the node-level distribution: per-row softmax of
/// (Z + g)/tau. Differentiable through Z; the noise is a constant.
pub fn gumbel_sample<T: Scalar>(tape: &mut Tape<T>, z: Var, tau: T, seed: u64) -> Result<Var> {
    if tau <= T::zero() {
        return Err(CgrlError::invalid("gumbel_sample", format!("tau {tau} must be > 0")));
    }
    let (rows, cols) = {
        let v = tape.value(z);
        (v.nrows(), v.ncols())
    };
    let noise = tape.constant(gumbel_noise(rows, cols, seed));
    let perturbed = tape.add(z, noise)?;
    let scaled = tape.scalar_mul(perturbed, T::one() / tau);
    Ok(tape.row_softmax(scaled))
}

/// Value-level convenience over a scratch tape.
pub fn gumbel_sample_values<T: Scalar>(z: &Mat<T>, tau: T, seed: u64) -> Result<Mat<T>> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let q = gumbel_sample(&mut tape, zv, tau, seed)?;
    Ok(tape.value(q).clone())
}

/// Observed directed edges (u in N(v) scattered toward v) grouped by v.
#[derive(Debug, Clone)]
pub struct ReconEdges {
    pub src: Rc<Vec<usize>>,
    pub dst: Rc<Vec<usize>>,
    pub seg: Rc<Segments>,
}

impl ReconEdges {
    pub fn from_graph<T: Scalar>(g: &Graph<T>) -> Self {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut seg_of = Vec::new();
        for v in 0..g.n() {
            for &u in g.neighbors(v) {
                src.push(u);
                dst.push(v);
                seg_of.push(v);
            }
        }
        ReconEdges {
            src: Rc::new(src),
            dst: Rc::new(dst),
            seg: Rc::new(Segments {
                seg_of,
                num_segments: g.n(),
            }),
        }
    }
}

/// L_rec: mean-over-nodes KL(Q_node || softmax(Z), reference constant) plus
/// mean-over-observed-edges negative log-likelihood under the energy model.
///
/// The node and edge components live on different supports, so they are
/// scored separately and summed.
pub fn reconstruction_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    q_node: Var,
    hc: Var,
    w_uv: Var,
    edges: &ReconEdges,
) -> Result<Var> {
    // Reference distribution is a constant: no gradient flows back into Z
    // through it.
    let z_const = {
        let zv = tape.value(z).clone();
        tape.constant(zv)
    };
    let p_ref = tape.row_softmax(z_const);
    let node_kl = tape.kl_rows(q_node, p_ref)?;

    let edge_nll = if edges.src.is_empty() {
        tape.scalar(T::zero())
    } else {
        let scores = tape.matmul(hc, w_uv)?;
        let pd = tape.gather_rows(scores, edges.dst.clone())?;
        let hs = tape.gather_rows(hc, edges.src.clone())?;
        let prod = tape.hadamard(pd, hs)?;
        // one score per directed edge: H_v W H_u^T = -E(u, v)
        let s = tape.row_sum(prod);
        let q_edge = tape.segment_softmax(s, edges.seg.clone())?;
        let log_q = tape.log(q_edge)?;
        let mean = tape.mean_all(log_q);
        tape.scalar_mul(mean, -T::one())
    };
    tape.add(node_kl, edge_nll)
}

/// Sampled node pairs for the replacement losses, training nodes only.
#[derive(Debug, Clone)]
pub struct PairSample<T: Scalar> {
    pub intra: Vec<(usize, usize)>,
    pub inter: Vec<(usize, usize)>,
    pub margin: T,
}

/// Uniform seeded sample of `per_epoch` intra- and inter-class pairs from
/// the training nodes.
pub fn sample_pairs<T: Scalar>(
    labels: &[usize],
    train_ids: &[usize],
    per_epoch: usize,
    seed: u64,
    margin: T,
) -> Result<PairSample<T>> {
    if margin < T::zero() || margin >= T::one() {
        return Err(CgrlError::invalid("sample_pairs", format!("margin {margin} not in [0, 1)")));
    }
    let mut sample = PairSample {
        intra: Vec::with_capacity(per_epoch),
        inter: Vec::with_capacity(per_epoch),
        margin,
    };
    if per_epoch == 0 {
        return Ok(sample);
    }
    let mut class_counts = std::collections::HashMap::new();
    for &i in train_ids {
        *class_counts.entry(labels[i]).or_insert(0usize) += 1;
    }
    if class_counts.len() < 2 {
        return Err(CgrlError::invalid(
            "sample_pairs",
            "training set contains a single class: no inter-class pairs exist",
        ));
    }
    if !class_counts.values().any(|&c| c >= 2) {
        return Err(CgrlError::invalid(
            "sample_pairs",
            "no class has two training nodes: no intra-class pairs exist",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while sample.intra.len() < per_epoch || sample.inter.len() < per_epoch {
        let i = train_ids[rng.random_range(0..train_ids.len())];
        let j = train_ids[rng.random_range(0..train_ids.len())];
        if i == j {
            continue;
        }
        if labels[i] == labels[j] {
            if sample.intra.len() < per_epoch {
                sample.intra.push((i, j));
            }
        } else if sample.inter.len() < per_epoch {
            sample.inter.push((i, j));
        }
    }
    Ok(sample)
}

fn pair_cosines<T: Scalar>(tape: &mut Tape<T>, hc: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let normalized = tape.l2_normalize_rows(hc)?;
    let firsts: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let seconds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let a = tape.gather_rows(normalized, Rc::new(firsts))?;
    let b = tape.gather_rows(normalized, Rc::new(seconds))?;
    let prod = tape.hadamard(a, b)?;
    Ok(tape.row_sum(prod))
}

/// Mean over sampled intra-class pairs of (1 - cosine similarity).
pub fn intra_loss<T: Scalar>(tape: &mut Tape<T>, hc: Var, pairs: &PairSample<T>) -> Result<Var> {
    if pairs.intra.is_empty() {
        return Ok(tape.scalar(T::zero()));
    }
    let cos = pair_cosines(tape, hc, &pairs.intra)?;
    let mean = tape.mean_all(cos);
    let neg = tape.scalar_mul(mean, -T::one());
    Ok(tape.add_scalar(neg, T::one()))
}

/// Mean hinge over sampled inter-class pairs: max(0, cosine - margin).
pub fn inter_loss<T: Scalar>(tape: &mut Tape<T>, hc: Var, pairs: &PairSample<T>) -> Result<Var> {
    if pairs.inter.is_empty() {
        return Ok(tape.scalar(T::zero()));
    }
    let cos = pair_cosines(tape, hc, &pairs.inter)?;
    let shifted = tape.add_scalar(cos, -pairs.margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean_all(hinge))
}

/// Loss weights and the Gumbel temperature they travel with.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights<T: Scalar> {
    pub lambda1: T,
    pub lambda2: T,
    pub tau: T,
}

/// Weighted sum of scalar loss terms; errors if the list is empty.
pub fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, terms: &[(Var, T)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(term, w) in terms {
        let scaled = if w == T::one() {
            term
        } else {
            tape.scalar_mul(term, w)
        };
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    acc.ok_or_else(|| CgrlError::invalid("weighted_sum", "no loss terms enabled"))
}

/// L_sup + L_rec + lambda1 * L_intra + lambda2 * L_inter, where L_sup is the
/// mean cross-entropy over training nodes.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: Rc<Vec<usize>>,
    train_ids: Rc<Vec<usize>>,
    rec: Option<Var>,
    intra: Option<Var>,
    inter: Option<Var>,
    w: &LossWeights<T>,
) -> Result<Var> {
    if train_ids.is_empty() {
        return Err(CgrlError::invalid("total_loss", "empty training set"));
    }
    let sup = tape.cross_entropy(logits, labels, train_ids)?;
    let mut terms = vec![(sup, T::one())];
    if let Some(r) = rec {
        terms.push((r, T::one()));
    }
    if let Some(i) = intra {
        terms.push((i, w.lambda1));
    }
    if let Some(i) = inter {
        terms.push((i, w.lambda2));
    }
    weighted_sum(tape, &terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::twelve_node_graph;
    use crate::graph::build_graph;
    use ndarray::arr2;

    #[test]
    fn edge_energy_cases() {
        let hc = arr2(&[[1.0, 0.0], [1.0, 0.0]]);
        let ident = EnergyModel {
            w_uv: arr2(&[[1.0, 0.0], [0.0, 1.0]]),
        };
        assert_eq!(edge_energy(&hc, &ident, 0, 1).unwrap(), -1.0);
        let zero = EnergyModel {
            w_uv: arr2(&[[0.0, 0.0], [0.0, 0.0]]),
        };
        assert_eq!(edge_energy(&hc, &zero, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn edge_energy_matches_triple_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hc = Mat::from_shape_fn((3, 4), |_| rng.random::<f64>() - 0.5);
        let w = Mat::from_shape_fn((4, 4), |_| rng.random::<f64>() - 0.5);
        let model = EnergyModel { w_uv: w.clone() };
        let oracle = -hc.row(1).dot(&w.dot(&hc.row(0).t()));
        let got = edge_energy(&hc, &model, 0, 1).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn edge_distribution_cases() {
        // equal representations -> uniform over 3 neighbors of the hub
        let g = build_graph(
            &[(0, 1), (0, 2), (0, 3)],
            arr2(&[[1.0f64, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]),
            vec![0; 4],
        )
        .unwrap();
        let model = EnergyModel {
            w_uv: arr2(&[[1.0, 0.0], [0.0, 1.0]]),
        };
        let d = edge_distribution(g.features(), &model, &g, 0).unwrap();
        for p in &d {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        // single neighbor -> [1]
        let d1 = edge_distribution(g.features(), &model, &g, 1).unwrap();
        assert_eq!(d1.len(), 1);
        assert!((d1[0] - 1.0).abs() < 1e-12);

        let lonely = build_graph(&[(0, 1)], arr2(&[[1.0], [1.0], [1.0]]), vec![0; 3]).unwrap();
        let m1 = EnergyModel { w_uv: arr2(&[[1.0]]) };
        assert!(matches!(
            edge_distribution(lonely.features(), &m1, &lonely, 2),
            Err(CgrlError::IsolatedNode(2))
        ));
    }

    #[test]
    fn energies_zero_and_ln2_give_two_thirds() {
        // energies (0, ln 2) over two neighbors -> softmax(-E) = (2/3, 1/3)
        let g = build_graph(
            &[(2, 0), (2, 1)],
            arr2(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]),
            vec![0; 3],
        )
        .unwrap();
        let w = arr2(&[[0.0, 0.0], [0.0, -(2.0f64).ln()]]);
        let model = EnergyModel { w_uv: w };
        // E(u, 2) = -h_2 W h_u^T: u=0 -> 0, u=1 -> ln 2
        assert!(edge_energy(g.features(), &model, 0, 2).unwrap().abs() < 1e-12);
        assert!(
            (edge_energy(g.features(), &model, 1, 2).unwrap() - (2.0f64).ln()).abs() < 1e-12
        );
        let d = edge_distribution(g.features(), &model, &g, 2).unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gumbel_rows_sum_to_one_and_sharpen() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Mat::from_shape_fn((6, 4), |_| rng.random::<f64>() * 2.0 - 1.0);
        let q = gumbel_sample_values(&z, 1.0, 11).unwrap();
        for row in q.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        // low temperature: rows near one-hot
        let sharp = gumbel_sample_values(&z, 0.01, 11).unwrap();
        let mut hits = 0;
        for row in sharp.rows() {
            if row.iter().cloned().fold(f64::MIN, f64::max) > 0.99 {
                hits += 1;
            }
        }
        assert!(hits >= 5, "only {hits}/6 rows sharpened");
        assert!(gumbel_sample_values(&z, 0.0, 11).is_err());
    }

    #[test]
    fn gumbel_seeded_reproducibility() {
        let z = arr2(&[[0.3, -0.2, 1.0]]);
        let a = gumbel_sample_values(&z, 0.7, 123).unwrap();
        let b = gumbel_sample_values(&z, 0.7, 123).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gumbel_argmax_frequencies_match_softmax() {
        // Gumbel-max Monte Carlo oracle: argmax of z + g is Categorical(softmax(z))
        let z = arr2(&[[0.5, -0.3, 1.1]]);
        let mut counts = [0usize; 3];
        let trials = 50_000;
        for s in 0..trials {
            let q = gumbel_sample_values(&z, 1.0, 70_000 + s as u64).unwrap();
            let mut best = 0;
            for j in 1..3 {
                if q[[0, j]] > q[[0, best]] {
                    best = j;
                }
            }
            counts[best] += 1;
        }
        let exps: Vec<f64> = [0.5, -0.3, 1.1].iter().map(|v: &f64| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..3 {
            let freq = counts[j] as f64 / trials as f64;
            assert!(
                (freq - exps[j] / sum).abs() < 0.01,
                "class {j}: {freq} vs {}",
                exps[j] / sum
            );
        }
    }

    #[test]
    fn reconstruction_identity_case_is_zero() {
        // Q_node = softmax(Z) and every node has exactly one neighbor:
        // node component 0 and every edge likelihood 1.
        let g = build_graph(
            &[(0, 1), (2, 3)],
            arr2(&[[0.4, 0.1], [-0.3, 0.2], [0.9, -0.5], [0.0, 0.0]]),
            vec![0, 0, 1, 1],
        )
        .unwrap();
        let edges = ReconEdges::from_graph(&g);
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.leaf(g.features().clone());
        let q = tape.row_softmax(z);
        let hc = tape.leaf(g.features().clone());
        let w = tape.leaf(arr2(&[[0.3, -0.2], [0.1, 0.6]]));
        let rec = reconstruction_loss(&mut tape, z, q, hc, w, &edges).unwrap();
        assert!(tape.scalar_value(rec).unwrap().abs() < 1e-12);
    }

    #[test]
    fn reconstruction_matches_direct_summation_oracle() {
        let g: crate::graph::Graph<f64> = twelve_node_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let hidden = 4;
        let zv = Mat::from_shape_fn((g.n(), hidden), |_| rng.random::<f64>() - 0.5);
        let hcv = Mat::from_shape_fn((g.n(), hidden), |_| rng.random::<f64>() - 0.5);
        let wv = Mat::from_shape_fn((hidden, hidden), |_| rng.random::<f64>() - 0.5);

        let edges = ReconEdges::from_graph(&g);
        let mut tape = Tape::new();
        let z = tape.leaf(zv.clone());
        let q = gumbel_sample(&mut tape, z, 1.0, 99).unwrap();
        let hc = tape.leaf(hcv.clone());
        let w = tape.leaf(wv.clone());
        let rec = reconstruction_loss(&mut tape, z, q, hc, w, &edges).unwrap();
        let got = tape.scalar_value(rec).unwrap();

        // direct summation oracle
        let qv = tape.value(q).clone();
        let mut node_kl = 0.0;
        for i in 0..g.n() {
            let zrow = zv.row(i);
            let m = zrow.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = zrow.iter().map(|&v| (v - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            for j in 0..hidden {
                let p = exps[j] / s;
                let qi = qv[[i, j]];
                if qi > 0.0 {
                    node_kl += qi * (qi / p).ln();
                }
            }
        }
        node_kl /= g.n() as f64;

        let model = EnergyModel { w_uv: wv };
        let mut edge_nll = 0.0;
        let mut edge_count = 0;
        for v in 0..g.n() {
            if g.neighbors(v).is_empty() {
                continue;
            }
            let dist = edge_distribution(&hcv, &model, &g, v).unwrap();
            for p in dist {
                edge_nll -= p.ln();
                edge_count += 1;
            }
        }
        // careful: the oracle above iterates Q(u,v) for each observed edge
        edge_nll /= edge_count as f64;

        assert!(
            (got - (node_kl + edge_nll)).abs() < 1e-10,
            "got {got}, oracle {}",
            node_kl + edge_nll
        );
    }

    #[test]
    fn pair_sampling_properties() {
        let labels = vec![0, 0, 1, 1, 2];
        let ids = vec![0, 1, 2, 3, 4];
        let a = sample_pairs(&labels, &ids, 50, 9, 0.5f64).unwrap();
        let b = sample_pairs(&labels, &ids, 50, 9, 0.5f64).unwrap();
        assert_eq!(a.intra, b.intra);
        assert_eq!(a.inter, b.inter);
        assert_eq!(a.intra.len(), 50);
        assert_eq!(a.inter.len(), 50);
        for &(i, j) in &a.intra {
            assert_ne!(i, j);
            assert_eq!(labels[i], labels[j]);
        }
        for &(i, j) in &a.inter {
            assert_ne!(labels[i], labels[j]);
        }

        let empty = sample_pairs(&labels, &ids, 0, 9, 0.5f64).unwrap();
        assert!(empty.intra.is_empty() && empty.inter.is_empty());

        assert!(sample_pairs(&[0, 0, 0], &[0, 1, 2], 4, 9, 0.5f64).is_err());
    }

    #[test]
    fn intra_and_inter_loss_cases() {
        let mut tape: Tape<f64> = Tape::new();
        // rows: e0, e0, e1 (unit)
        let hc = tape.leaf(arr2(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]));
        let identical = PairSample {
            intra: vec![(0, 1)],
            inter: vec![],
            margin: 0.5,
        };
        let li = intra_loss(&mut tape, hc, &identical).unwrap();
        assert!(tape.scalar_value(li).unwrap().abs() < 1e-12);

        let orthogonal = PairSample {
            intra: vec![(0, 2)],
            inter: vec![(0, 2)],
            margin: 0.5,
        };
        let li = intra_loss(&mut tape, hc, &orthogonal).unwrap();
        assert!((tape.scalar_value(li).unwrap() - 1.0).abs() < 1e-12);
        let le = inter_loss(&mut tape, hc, &orthogonal).unwrap();
        assert!(tape.scalar_value(le).unwrap().abs() < 1e-12);

        // identical unit rows as an inter pair: hinge = 1 - margin
        let clash = PairSample {
            intra: vec![],
            inter: vec![(0, 1)],
            margin: 0.5,
        };
        let le = inter_loss(&mut tape, hc, &clash).unwrap();
        assert!((tape.scalar_value(le).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pair_losses_match_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let hcv = Mat::from_shape_fn((8, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
        let pairs = PairSample {
            intra: vec![(0, 1), (2, 3), (4, 5), (1, 2), (6, 7)],
            inter: vec![(0, 7), (3, 5), (2, 6)],
            margin: 0.4,
        };
        let cosine = |i: usize, j: usize| {
            let a = hcv.row(i);
            let b = hcv.row(j);
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            a.dot(&b) / (na * nb)
        };
        let want_intra = pairs
            .intra
            .iter()
            .map(|&(i, j)| 1.0 - cosine(i, j))
            .sum::<f64>()
            / pairs.intra.len() as f64;
        let want_inter = pairs
            .inter
            .iter()
            .map(|&(i, j)| (cosine(i, j) - 0.4).max(0.0))
            .sum::<f64>()
            / pairs.inter.len() as f64;

        let mut tape = Tape::new();
        let hc = tape.leaf(hcv.clone());
        let li = intra_loss(&mut tape, hc, &pairs).unwrap();
        let le = inter_loss(&mut tape, hc, &pairs).unwrap();
        assert!((tape.scalar_value(li).unwrap() - want_intra).abs() < 1e-12);
        assert!((tape.scalar_value(le).unwrap() - want_inter).abs() < 1e-12);
    }

    #[test]
    fn pair_losses_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let hcv = Mat::from_shape_fn((6, 4), |_| rng.random::<f64>() - 0.5);
        let pairs = PairSample {
            intra: vec![(0, 1), (2, 3)],
            inter: vec![(0, 5), (1, 4)],
            margin: 0.5,
        };
        let eval = |m: &Mat<f64>| {
            let mut tape = Tape::new();
            let hc = tape.leaf(m.clone());
            let li = intra_loss(&mut tape, hc, &pairs).unwrap();
            let le = inter_loss(&mut tape, hc, &pairs).unwrap();
            (
                tape.scalar_value(li).unwrap(),
                tape.scalar_value(le).unwrap(),
            )
        };
        let (i0, e0) = eval(&hcv);
        for scale in [0.01, 3.0, 250.0] {
            let (i1, e1) = eval(&hcv.mapv(|x| x * scale));
            assert!((i0 - i1).abs() < 1e-9, "intra drifted under scale {scale}");
            assert!((e0 - e1).abs() < 1e-9, "inter drifted under scale {scale}");
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        // fixture values (2.0, 0.5, 0.3, 0.1) with lambda1=1, lambda2=0.5 -> 2.85
        let mut tape: Tape<f64> = Tape::new();
        let sup = tape.scalar(2.0);
        let rec = tape.scalar(0.5);
        let intra = tape.scalar(0.3);
        let inter = tape.scalar(0.1);
        let total = weighted_sum(
            &mut tape,
            &[(sup, 1.0), (rec, 1.0), (intra, 1.0), (inter, 0.5)],
        )
        .unwrap();
        assert!((tape.scalar_value(total).unwrap() - 2.85).abs() < 1e-12);
    }

    #[test]
    fn total_loss_reduces_to_erm() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(arr2(&[[2.0, -1.0], [0.5, 0.5], [-1.0, 3.0]]));
        let labels = Rc::new(vec![0usize, 1, 1]);
        let ids = Rc::new(vec![0usize, 1, 2]);
        let w = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            tau: 1.0,
        };
        let total = total_loss(
            &mut tape,
            logits,
            labels.clone(),
            ids.clone(),
            None,
            None,
            None,
            &w,
        )
        .unwrap();
        let plain = tape.cross_entropy(logits, labels, ids).unwrap();
        let t = tape.scalar_value(total).unwrap();
        let p = tape.scalar_value(plain).unwrap();
        assert!((t - p).abs() < 1e-12);
    }
}
