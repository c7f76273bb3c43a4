//! Synthetic benchmark generation: stochastic block model graphs, controlled
//! feature-shift injection across six domains, degree-based covariate
//! splits, and the on-disk bundle format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diff::Mat;
use crate::error::{CgrlError, Result};
use crate::graph::{
    build_graph, read_edge_list, read_features_csv, read_labels, read_text, split_nodes,
    write_edge_list, write_features_csv, write_labels, write_text, Graph, NodeSplit,
};
use crate::scalar::{mix_seed, Scalar};

/// Stochastic block model description. Features are a class mean (separation
/// `delta` along one-hot directions) plus Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmSpec {
    pub classes: usize,
    pub per_class: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub dim: usize,
    pub delta: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        SbmSpec {
            classes: 4,
            per_class: 75,
            p_in: 0.06,
            p_out: 0.005,
            dim: 32,
            delta: 1.0,
            noise: 0.6,
            seed: 1,
        }
    }
}

impl SbmSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_out)
            || !(0.0..=1.0).contains(&self.p_in)
            || self.p_out > self.p_in
        {
            return Err(CgrlError::invalid(
                "SbmSpec",
                format!("need 0 <= p_out <= p_in <= 1, got ({}, {})", self.p_in, self.p_out),
            ));
        }
        if self.delta <= 0.0 {
            return Err(CgrlError::invalid("SbmSpec", "delta must be > 0"));
        }
        if self.classes < 2 || self.per_class == 0 {
            return Err(CgrlError::invalid("SbmSpec", "need >= 2 classes with nodes"));
        }
        if self.dim < self.classes {
            return Err(CgrlError::invalid(
                "SbmSpec",
                "feature dim must be >= class count for the one-hot means",
            ));
        }
        Ok(())
    }
}

/// Six feature-shift domains of strictly increasing strength; the first is
/// the identity, the last three are the OOD domains.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    pub strengths: [f64; 6],
    pub seed: u64,
}

pub const NUM_DOMAINS: usize = 6;
pub const ID_DOMAINS: [usize; 3] = [1, 2, 3];
pub const OOD_DOMAINS: [usize; 3] = [4, 5, 6];

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            strengths: [0.0, 0.1, 0.2, 0.4, 0.7, 1.0],
            seed: 2,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.strengths[0] != 0.0 {
            return Err(CgrlError::invalid("ShiftSpec", "first strength must be 0"));
        }
        if self.strengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CgrlError::invalid("ShiftSpec", "strengths must strictly increase"));
        }
        Ok(())
    }
}

/// Sample a stochastic block model graph with class-mean features.
pub fn gen_sbm<T: Scalar>(spec: &SbmSpec) -> Result<Graph<T>> {
    spec.validate()?;
    let n = spec.classes * spec.per_class;
    let labels: Vec<usize> = (0..n).map(|i| i / spec.per_class).collect();

    let mut feat_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0xF0));
    let mut x = Mat::zeros((n, spec.dim));
    for i in 0..n {
        for j in 0..spec.dim {
            let noise: f64 = feat_rng.sample(StandardNormal);
            let mean = if j == labels[i] { spec.delta } else { 0.0 };
            x[[i, j]] = T::cast(mean + spec.noise * noise);
        }
    }

    let mut edge_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0xE0));
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] {
                spec.p_in
            } else {
                spec.p_out
            };
            if edge_rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    build_graph(&edges, x, labels)
}

/// X_k = X (I + sigma_k R_k) + sigma_k mu_k with seeded R_k (entries scaled
/// by 1/sqrt(d)) and row offset mu_k. Labels and topology are untouched;
/// domain 1 is bit-identical to the input.
pub fn inject_feature_shift<T: Scalar>(
    g: &Graph<T>,
    spec: &ShiftSpec,
    domain: usize,
) -> Result<Graph<T>> {
    spec.validate()?;
    if !(1..=NUM_DOMAINS).contains(&domain) {
        return Err(CgrlError::invalid(
            "inject_feature_shift",
            format!("domain {domain} outside 1..=6"),
        ));
    }
    let sigma = spec.strengths[domain - 1];
    if sigma == 0.0 {
        return g.with_features(g.features().clone());
    }
    let d = g.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, domain as u64));
    let scale = 1.0 / (d as f64).sqrt();
    let r = Mat::from_shape_fn((d, d), |_| {
        T::cast(sigma * scale * rng.sample::<f64, _>(StandardNormal))
    });
    let mu: Vec<T> = (0..d)
        .map(|_| T::cast(sigma * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut shifted = g.features() + &g.features().dot(&r);
    for mut row in shifted.rows_mut() {
        for (v, &m) in row.iter_mut().zip(&mu) {
            *v += m;
        }
    }
    let mut out = g.with_features(shifted)?;
    out.set_domain_ids(vec![domain; g.n()]);
    Ok(out)
}

/// Degree-based covariate split: the `quantile` lowest-degree nodes (ties
/// broken by node id) are OOD, the rest ID.
pub fn degree_domain_split<T: Scalar>(g: &Graph<T>, quantile: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&quantile) || quantile == 0.0 {
        return Err(CgrlError::invalid(
            "degree_domain_split",
            format!("quantile {quantile} outside (0, 1)"),
        ));
    }
    let degrees: Vec<usize> = (0..g.n()).map(|v| g.degree(v)).collect();
    let (min, max) = (
        *degrees.iter().min().unwrap_or(&0),
        *degrees.iter().max().unwrap_or(&0),
    );
    if min == max {
        return Err(CgrlError::Unsplittable(min));
    }
    let mut order: Vec<usize> = (0..g.n()).collect();
    order.sort_by_key(|&v| (degrees[v], v));
    let cut = ((g.n() as f64) * quantile).floor() as usize;
    let mut ood: Vec<usize> = order[..cut].to_vec();
    let mut id: Vec<usize> = order[cut..].to_vec();
    ood.sort_unstable();
    id.sort_unstable();
    Ok((id, ood))
}

/// Everything one experiment needs: the ID graph (per-node mix of domains
/// 1-3), the three OOD evaluation graphs, and the node split.
pub struct BenchmarkBundle<T: Scalar> {
    pub id_graph: Graph<T>,
    pub ood_graphs: Vec<Graph<T>>,
    pub split: NodeSplit,
    pub domain_assignment: Vec<usize>,
    pub manifest: BTreeMap<String, String>,
}

impl<T: Scalar> BenchmarkBundle<T> {
    pub fn manifest_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.manifest {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn manifest_from_specs(sbm: &SbmSpec, shift: &ShiftSpec) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("classes".into(), sbm.classes.to_string());
    m.insert("per_class".into(), sbm.per_class.to_string());
    m.insert("p_in".into(), format!("{:?}", sbm.p_in));
    m.insert("p_out".into(), format!("{:?}", sbm.p_out));
    m.insert("dim".into(), sbm.dim.to_string());
    m.insert("delta".into(), format!("{:?}", sbm.delta));
    m.insert("noise".into(), format!("{:?}", sbm.noise));
    m.insert("sbm_seed".into(), sbm.seed.to_string());
    m.insert(
        "strengths".into(),
        shift
            .strengths
            .iter()
            .map(|s| format!("{s:?}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    m.insert("shift_seed".into(), shift.seed.to_string());
    m.insert("split_ratios".into(), "0.5,0.25,0.25".into());
    m
}

/// Build the full benchmark: sample the SBM, shift all six domains, assign
/// each node uniformly to one ID domain, split 50/25/25, and keep the three
/// OOD graphs for evaluation.
pub fn assemble_benchmark<T: Scalar>(sbm: &SbmSpec, shift: &ShiftSpec) -> Result<BenchmarkBundle<T>> {
    let base = gen_sbm::<T>(sbm)?;
    let shifted: Vec<Graph<T>> = (1..=NUM_DOMAINS)
        .map(|d| inject_feature_shift(&base, shift, d))
        .collect::<Result<_>>()?;

    let mut assign_rng = ChaCha8Rng::seed_from_u64(mix_seed(shift.seed, 0xA5));
    let assignment: Vec<usize> = (0..base.n())
        .map(|_| ID_DOMAINS[assign_rng.random_range(0..ID_DOMAINS.len())])
        .collect();
    let mut id_features = Mat::zeros((base.n(), base.feature_dim()));
    for (i, &dom) in assignment.iter().enumerate() {
        id_features
            .row_mut(i)
            .assign(&shifted[dom - 1].features().row(i));
    }
    let mut id_graph = base.with_features(id_features)?;
    id_graph.set_domain_ids(assignment.clone());

    let split = split_nodes(base.n(), (0.5, 0.25, 0.25), mix_seed(sbm.seed, 0x59))?;
    let ood_graphs = OOD_DOMAINS
        .iter()
        .map(|&d| shifted[d - 1].clone())
        .collect();

    Ok(BenchmarkBundle {
        id_graph,
        ood_graphs,
        split,
        domain_assignment: assignment,
        manifest: manifest_from_specs(sbm, shift),
    })
}

// ---------------------------------------------------------------------------
// Bundle disk format
// ---------------------------------------------------------------------------

pub fn save_bundle<T: Scalar>(bundle: &BenchmarkBundle<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CgrlError::io(dir.display().to_string(), e))?;
    write_text(&dir.join("manifest.txt"), &bundle.manifest_text())?;
    write_edge_list(&bundle.id_graph, &dir.join("edges.txt"))?;
    write_labels(bundle.id_graph.labels(), &dir.join("labels.txt"))?;
    write_features_csv(bundle.id_graph.features(), &dir.join("features_id.csv"))?;
    for (i, g) in bundle.ood_graphs.iter().enumerate() {
        let dom = OOD_DOMAINS[i];
        write_features_csv(g.features(), &dir.join(format!("features_domain{dom}.csv")))?;
    }
    let assign_text: String = bundle
        .domain_assignment
        .iter()
        .map(|d| format!("{d}\n"))
        .collect();
    write_text(&dir.join("domain_assignment.txt"), &assign_text)?;
    let write_ids = |name: &str, ids: &[usize]| -> Result<()> {
        let text: String = ids.iter().map(|i| format!("{i}\n")).collect();
        write_text(&dir.join(name), &text)
    };
    write_ids("train.txt", &bundle.split.train_ids)?;
    write_ids("val.txt", &bundle.split.val_ids)?;
    write_ids("test.txt", &bundle.split.test_ids)?;
    Ok(())
}

pub fn load_bundle<T: Scalar>(dir: &Path) -> Result<BenchmarkBundle<T>> {
    let manifest_text = read_text(&dir.join("manifest.txt"))?;
    let mut manifest = BTreeMap::new();
    for line in manifest_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            manifest.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let edges = read_edge_list(&dir.join("edges.txt"))?;
    let labels = read_labels(&dir.join("labels.txt"))?;
    let id_features: Mat<T> = read_features_csv(&dir.join("features_id.csv"))?;
    let mut id_graph = build_graph(&edges, id_features, labels.clone())?;
    let assignment = read_labels(&dir.join("domain_assignment.txt"))?;
    id_graph.set_domain_ids(assignment.clone());

    let mut ood_graphs = Vec::new();
    for dom in OOD_DOMAINS {
        let x: Mat<T> = read_features_csv(&dir.join(format!("features_domain{dom}.csv")))?;
        let mut g = id_graph.with_features(x)?;
        g.set_domain_ids(vec![dom; g.n()]);
        ood_graphs.push(g);
    }
    let read_ids = |name: &str| -> Result<Vec<usize>> { read_labels(&dir.join(name)) };
    let split = NodeSplit {
        train_ids: read_ids("train.txt")?,
        val_ids: read_ids("val.txt")?,
        test_ids: read_ids("test.txt")?,
    };
    Ok(BenchmarkBundle {
        id_graph,
        ood_graphs,
        split,
        domain_assignment: assignment,
        manifest,
    })
}
