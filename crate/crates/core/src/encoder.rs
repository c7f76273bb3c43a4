//! GNN encoders: the two-round baseline encoder producing Z, the re-weight
//! matrix H_r, the K-branch CGRL-GCN/GAT layers producing H_c, and the
//! classifier head.
//!
//! In the testing phase Z goes through a node-axis softmax and the re-weight
//! layers; the training phase replaces that softmax with a Gumbel-perturbed
//! row distribution which doubles as the sampled node posterior for the
//! reconstruction loss.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{EdgeAgg, Mat, Segments, Tape, Var};
use crate::error::{CgrlError, Result};
use crate::graph::{Graph, Fnv};
use crate::objective::{gumbel_sample, EnergyModel, ReconEdges};
use crate::scalar::{mix_seed, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ModelKind {
    CgrlGcn,
    CgrlGat,
    ErmGcn,
    ErmGat,
}

impl ModelKind {
    pub fn is_gat(self) -> bool {
        matches!(self, ModelKind::CgrlGat | ModelKind::ErmGat)
    }

    /// ERM variants disable the re-weighting entirely (H_r is all ones) and
    /// train on the supervised loss alone.
    pub fn is_erm(self) -> bool {
        matches!(self, ModelKind::ErmGcn | ModelKind::ErmGat)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cgrl-gcn" => Ok(ModelKind::CgrlGcn),
            "cgrl-gat" => Ok(ModelKind::CgrlGat),
            "erm-gcn" => Ok(ModelKind::ErmGcn),
            "erm-gat" => Ok(ModelKind::ErmGat),
            other => Err(CgrlError::Config(format!(
                "unknown model {other:?} (expected cgrl-gcn, cgrl-gat, erm-gcn, erm-gat)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::CgrlGcn => "cgrl-gcn",
            ModelKind::CgrlGat => "cgrl-gat",
            ModelKind::ErmGcn => "erm-gcn",
            ModelKind::ErmGat => "erm-gat",
        }
    }
}

/// Which node-level sampler the training phase uses in place of the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Sampler {
    Gumbel,
    Softmax,
}

/// Two-round baseline encoder weights: d -> hidden -> hidden.
#[derive(Debug, Clone)]
pub struct EncoderParams<T: Scalar> {
    pub w_in: Mat<T>,
    pub w_hidden: Mat<T>,
}

/// Every trainable weight of a CGRL model.
#[derive(Debug, Clone)]
pub struct CgrlParams<T: Scalar> {
    pub encoder: EncoderParams<T>,
    /// W_c, indexed [layer][branch], hidden x hidden.
    pub branch_weights: Vec<Vec<Mat<T>>>,
    /// W_alpha, indexed [layer][branch], hidden x hidden.
    pub attn_proj: Vec<Vec<Mat<T>>>,
    /// a, indexed [layer][branch], (2*hidden) x 1.
    pub attn_vec: Vec<Vec<Mat<T>>>,
    /// hidden x classes.
    pub classifier: Mat<T>,
    pub energy: EnergyModel<T>,
}

fn glorot<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<T> {
    let scale = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| {
        T::cast((rng.random::<f64>() * 2.0 - 1.0) * scale)
    })
}

impl<T: Scalar> CgrlParams<T> {
    pub fn init(
        feature_dim: usize,
        hidden: usize,
        classes: usize,
        layers: usize,
        branches: usize,
        seed: u64,
    ) -> Result<Self> {
        if branches == 0 {
            return Err(CgrlError::invalid("CgrlParams::init", "K must be >= 1"));
        }
        if layers == 0 {
            return Err(CgrlError::invalid("CgrlParams::init", "layers must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams {
            w_in: glorot(&mut rng, feature_dim, hidden),
            w_hidden: glorot(&mut rng, hidden, hidden),
        };
        let mut branch_weights = Vec::new();
        let mut attn_proj = Vec::new();
        let mut attn_vec = Vec::new();
        for _ in 0..layers {
            branch_weights.push((0..branches).map(|_| glorot(&mut rng, hidden, hidden)).collect());
        }
        for _ in 0..layers {
            attn_proj.push((0..branches).map(|_| glorot(&mut rng, hidden, hidden)).collect());
        }
        for _ in 0..layers {
            attn_vec.push((0..branches).map(|_| glorot(&mut rng, 2 * hidden, 1)).collect());
        }
        Ok(CgrlParams {
            encoder,
            branch_weights,
            attn_proj,
            attn_vec,
            classifier: glorot(&mut rng, hidden, classes),
            energy: EnergyModel {
                w_uv: glorot(&mut rng, hidden, hidden),
            },
        })
    }

    pub fn layers(&self) -> usize {
        self.branch_weights.len()
    }

    pub fn branches(&self) -> usize {
        self.branch_weights[0].len()
    }

    pub fn hidden(&self) -> usize {
        self.encoder.w_in.ncols()
    }

    /// Fixed flattening order shared by the tape insertion, the gradient
    /// read-back, and the optimizer moments.
    pub fn flat(&self) -> Vec<&Mat<T>> {
        let mut out = vec![&self.encoder.w_in, &self.encoder.w_hidden];
        for group in [&self.branch_weights, &self.attn_proj, &self.attn_vec] {
            for layer in group {
                for m in layer {
                    out.push(m);
                }
            }
        }
        out.push(&self.classifier);
        out.push(&self.energy.w_uv);
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Mat<T>> {
        let mut out = vec![&mut self.encoder.w_in, &mut self.encoder.w_hidden];
        for group in [
            &mut self.branch_weights,
            &mut self.attn_proj,
            &mut self.attn_vec,
        ] {
            for layer in group.iter_mut() {
                for m in layer.iter_mut() {
                    out.push(m);
                }
            }
        }
        out.push(&mut self.classifier);
        out.push(&mut self.energy.w_uv);
        out
    }
}

/// Tape handles for a parameter set, mirroring [`CgrlParams`].
pub struct ParamVars {
    pub w_in: Var,
    pub w_hidden: Var,
    pub branch_weights: Vec<Vec<Var>>,
    pub attn_proj: Vec<Vec<Var>>,
    pub attn_vec: Vec<Vec<Var>>,
    pub classifier: Var,
    pub energy: Var,
}

impl ParamVars {
    pub fn insert<T: Scalar>(tape: &mut Tape<T>, params: &CgrlParams<T>) -> ParamVars {
        let w_in = tape.leaf(params.encoder.w_in.clone());
        let w_hidden = tape.leaf(params.encoder.w_hidden.clone());
        let lift = |tape: &mut Tape<T>, group: &Vec<Vec<Mat<T>>>| {
            group
                .iter()
                .map(|layer| layer.iter().map(|m| tape.leaf(m.clone())).collect())
                .collect()
        };
        let branch_weights = lift(tape, &params.branch_weights);
        let attn_proj = lift(tape, &params.attn_proj);
        let attn_vec = lift(tape, &params.attn_vec);
        let classifier = tape.leaf(params.classifier.clone());
        let energy = tape.leaf(params.energy.w_uv.clone());
        ParamVars {
            w_in,
            w_hidden,
            branch_weights,
            attn_proj,
            attn_vec,
            classifier,
            energy,
        }
    }

    /// Same order as [`CgrlParams::flat`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.w_in, self.w_hidden];
        for group in [&self.branch_weights, &self.attn_proj, &self.attn_vec] {
            for layer in group {
                out.extend(layer.iter().copied());
            }
        }
        out.push(self.classifier);
        out.push(self.energy);
        out
    }

    pub fn read_grads<T: Scalar>(&self, tape: &Tape<T>) -> Vec<Mat<T>> {
        self.flat().iter().map(|&v| tape.grad(v).clone()).collect()
    }
}

/// Precomputed aggregation structure for one topology. Feature matrices vary
/// across shift domains; the topology (and hence this context) does not.
pub struct AggContext<T: Scalar> {
    pub n: usize,
    /// Symmetric-normalized adjacency with implicit self-loops.
    pub gcn: Rc<EdgeAgg<T>>,
    /// Attention edges: every (u -> v) plus a self-loop per node.
    pub attn_src: Rc<Vec<usize>>,
    pub attn_dst: Rc<Vec<usize>>,
    pub attn_seg: Rc<Segments>,
    /// Observed directed edges only, for reconstruction.
    pub recon: ReconEdges,
}

impl<T: Scalar> AggContext<T> {
    pub fn new(g: &Graph<T>) -> Self {
        let n = g.n();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut coeff = Vec::new();
        let mut attn_src = Vec::new();
        let mut attn_dst = Vec::new();
        let mut attn_seg = Vec::new();
        for v in 0..n {
            let dv = (g.degree(v) + 1) as f64;
            src.push(v);
            dst.push(v);
            coeff.push(T::cast(1.0 / dv));
            attn_src.push(v);
            attn_dst.push(v);
            attn_seg.push(v);
            for &u in g.neighbors(v) {
                let du = (g.degree(u) + 1) as f64;
                src.push(u);
                dst.push(v);
                coeff.push(T::cast(1.0 / (du.sqrt() * dv.sqrt())));
                attn_src.push(u);
                attn_dst.push(v);
                attn_seg.push(v);
            }
        }
        AggContext {
            n,
            gcn: Rc::new(EdgeAgg {
                src,
                dst,
                coeff,
                out_rows: n,
            }),
            attn_src: Rc::new(attn_src),
            attn_dst: Rc::new(attn_dst),
            attn_seg: Rc::new(Segments {
                seg_of: attn_seg,
                num_segments: n,
            }),
            recon: ReconEdges::from_graph(g),
        }
    }
}

/// One CGRL-GCN layer: residual + ReLU over the K-branch sum of
/// normalized aggregation of the re-weighted representation.
pub fn cgrl_gcn_layer<T: Scalar>(
    tape: &mut Tape<T>,
    hc: Var,
    hr: Var,
    ctx: &AggContext<T>,
    branch_weights: &[Var],
) -> Result<Var> {
    if branch_weights.is_empty() {
        return Err(CgrlError::invalid("cgrl_gcn_layer", "K must be >= 1"));
    }
    let modulated = tape.hadamard(hr, hc)?;
    let aggregated = tape.neighbor_scatter_add(modulated, ctx.gcn.clone())?;
    let mut acc: Option<Var> = None;
    for &w in branch_weights {
        let branch = tape.matmul(aggregated, w)?;
        acc = Some(match acc {
            None => branch,
            Some(a) => tape.add(a, branch)?,
        });
    }
    let activated = tape.relu(acc.expect("K >= 1"));
    tape.add(hc, activated)
}

/// One CGRL-GAT layer; attention coefficients are a per-branch softmax over
/// each node's neighborhood (self-loop included), LeakyReLU slope 0.2.
pub fn cgrl_gat_layer<T: Scalar>(
    tape: &mut Tape<T>,
    hc: Var,
    hr: Var,
    ctx: &AggContext<T>,
    branch_weights: &[Var],
    attn_proj: &[Var],
    attn_vec: &[Var],
) -> Result<Var> {
    if branch_weights.is_empty() {
        return Err(CgrlError::invalid("cgrl_gat_layer", "K must be >= 1"));
    }
    let hidden = tape.value(hc).ncols();
    let modulated = tape.hadamard(hr, hc)?;
    let gathered = tape.gather_rows(modulated, ctx.attn_src.clone())?;
    let mut acc: Option<Var> = None;
    for k in 0..branch_weights.len() {
        let alpha = attention_coefficients(tape, hc, ctx, attn_proj[k], attn_vec[k], hidden)?;
        let agg = tape.scatter_weighted_rows(gathered, alpha, ctx.attn_dst.clone(), ctx.n)?;
        let branch = tape.matmul(agg, branch_weights[k])?;
        acc = Some(match acc {
            None => branch,
            Some(a) => tape.add(a, branch)?,
        });
    }
    let activated = tape.relu(acc.expect("K >= 1"));
    tape.add(hc, activated)
}

/// e_(k,uv) = a^T [W_a h_v || W_a h_u] via the split-vector form, then
/// LeakyReLU and a per-neighborhood softmax.
fn attention_coefficients<T: Scalar>(
    tape: &mut Tape<T>,
    hc: Var,
    ctx: &AggContext<T>,
    proj: Var,
    attn: Var,
    hidden: usize,
) -> Result<Var> {
    let projected = tape.matmul(hc, proj)?;
    let a_dst = tape.slice_rows(attn, 0, hidden)?;
    let a_src = tape.slice_rows(attn, hidden, 2 * hidden)?;
    let score_dst = tape.matmul(projected, a_dst)?;
    let score_src = tape.matmul(projected, a_src)?;
    let per_edge_dst = tape.gather_rows(score_dst, ctx.attn_dst.clone())?;
    let per_edge_src = tape.gather_rows(score_src, ctx.attn_src.clone())?;
    let scores = tape.add(per_edge_dst, per_edge_src)?;
    let activated = tape.leaky_relu(scores, T::cast(0.2));
    tape.segment_softmax(activated, ctx.attn_seg.clone())
}

/// Forward-pass configuration.
#[derive(Debug, Clone)]
pub struct ForwardCfg<T: Scalar> {
    pub kind: ModelKind,
    pub mode: Mode,
    pub tau: T,
    pub dropout: T,
    pub seed: u64,
    pub sampler: Sampler,
    /// Recompute H_r from the current H_c before every layer instead of once
    /// from the encoder output.
    pub hr_recompute: bool,
}

impl<T: Scalar> ForwardCfg<T> {
    pub fn test(kind: ModelKind) -> Self {
        ForwardCfg {
            kind,
            mode: Mode::Test,
            tau: T::one(),
            dropout: T::zero(),
            seed: 0,
            sampler: Sampler::Gumbel,
            hr_recompute: false,
        }
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars {
    pub z1: Var,
    pub z: Var,
    pub hr: Var,
    pub hc: Var,
    pub logits: Var,
    /// Sampled node-level distribution (train mode only).
    pub q_node: Option<Var>,
}

fn node_distribution<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    cfg: &ForwardCfg<T>,
    stream: u64,
) -> Result<Var> {
    match (cfg.mode, cfg.sampler) {
        (Mode::Test, _) => Ok(tape.col_softmax(z)),
        (Mode::Train, Sampler::Gumbel) => gumbel_sample(tape, z, cfg.tau, mix_seed(cfg.seed, stream)),
        (Mode::Train, Sampler::Softmax) => Ok(tape.row_softmax(z)),
    }
}

/// Full model forward pass on an existing tape.
pub fn forward_model<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &AggContext<T>,
    features: &Mat<T>,
    pv: &ParamVars,
    cfg: &ForwardCfg<T>,
) -> Result<ForwardVars> {
    if cfg.mode == Mode::Train && cfg.tau <= T::zero() {
        return Err(CgrlError::invalid("forward", format!("tau {} must be > 0", cfg.tau)));
    }
    let train = cfg.mode == Mode::Train;
    let x_raw = tape.constant(features.clone());
    // dropout on the input features and between rounds, train mode only
    let x = if train && cfg.dropout > T::zero() {
        tape.dropout(x_raw, cfg.dropout, mix_seed(cfg.seed, 0xD2))?
    } else {
        x_raw
    };

    // round 1: aggregate -> linear -> ReLU; H_c^(0) is this output
    let a1 = tape.neighbor_scatter_add(x, ctx.gcn.clone())?;
    let pre1 = tape.matmul(a1, pv.w_in)?;
    let z1 = tape.relu(pre1);

    let round2_in = if train && cfg.dropout > T::zero() {
        tape.dropout(z1, cfg.dropout, mix_seed(cfg.seed, 0xD0))?
    } else {
        z1
    };
    let a2 = tape.neighbor_scatter_add(round2_in, ctx.gcn.clone())?;
    let pre2 = tape.matmul(a2, pv.w_hidden)?;
    let z = tape.relu(pre2);

    let hidden = tape.value(z).ncols();
    let (hr, q_node) = if cfg.kind.is_erm() {
        let ones = tape.constant(Mat::from_elem((ctx.n, hidden), T::one()));
        (ones, None)
    } else {
        let dist = node_distribution(tape, z, cfg, 0x6B)?;
        (dist, train.then_some(dist))
    };

    let mut hc = z1;
    let layers = pv.branch_weights.len();
    for l in 0..layers {
        let hr_l = if cfg.hr_recompute && l > 0 && !cfg.kind.is_erm() {
            node_distribution(tape, hc, cfg, 0x6C + l as u64)?
        } else {
            hr
        };
        hc = if cfg.kind.is_gat() {
            cgrl_gat_layer(
                tape,
                hc,
                hr_l,
                ctx,
                &pv.branch_weights[l],
                &pv.attn_proj[l],
                &pv.attn_vec[l],
            )?
        } else {
            cgrl_gcn_layer(tape, hc, hr_l, ctx, &pv.branch_weights[l])?
        };
    }

    let logits = tape.matmul(hc, pv.classifier)?;
    Ok(ForwardVars {
        z1,
        z,
        hr,
        hc,
        logits,
        q_node,
    })
}

/// Materialized forward outputs.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Scalar> {
    pub z: Mat<T>,
    pub hr: Mat<T>,
    pub hc: Mat<T>,
    pub logits: Mat<T>,
    pub mode: Mode,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.logits)
    }

    /// Per-node max softmax probability of the logits.
    pub fn confidences(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.logits.nrows());
        for row in self.logits.rows() {
            let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
            let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
            let sum: T = exps.iter().copied().sum();
            let top = exps.iter().fold(T::zero(), |a, &b| a.max(b));
            out.push((top / sum).as_f64());
        }
        out
    }
}

pub fn argmax_rows<T: Scalar>(m: &Mat<T>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Convenience forward over a fresh tape and context.
pub fn forward<T: Scalar>(
    g: &Graph<T>,
    params: &CgrlParams<T>,
    cfg: &ForwardCfg<T>,
) -> Result<ForwardOutput<T>> {
    let ctx = AggContext::new(g);
    forward_on(&ctx, g.features(), params, cfg)
}

/// Forward over an existing context (shared topology, varying features).
pub fn forward_on<T: Scalar>(
    ctx: &AggContext<T>,
    features: &Mat<T>,
    params: &CgrlParams<T>,
    cfg: &ForwardCfg<T>,
) -> Result<ForwardOutput<T>> {
    let mut tape = Tape::new();
    let pv = ParamVars::insert(&mut tape, params);
    let fv = forward_model(&mut tape, ctx, features, &pv, cfg)?;
    Ok(ForwardOutput {
        z: tape.value(fv.z).clone(),
        hr: tape.value(fv.hr).clone(),
        hc: tape.value(fv.hc).clone(),
        logits: tape.value(fv.logits).clone(),
        mode: cfg.mode,
    })
}

/// Spec-level op: the two-round encoder alone, producing Z.
pub fn gnn_encode<T: Scalar>(
    g: &Graph<T>,
    params: &EncoderParams<T>,
    mode: Mode,
    dropout: T,
    seed: u64,
) -> Result<Mat<T>> {
    if g.feature_dim() != params.w_in.nrows() {
        return Err(CgrlError::Shape {
            op: "gnn_encode",
            expect: format!("{} feature dim", params.w_in.nrows()),
            got: format!("{}", g.feature_dim()),
        });
    }
    let ctx = AggContext::new(g);
    let mut tape = Tape::new();
    let x_raw = tape.constant(g.features().clone());
    let w_in = tape.leaf(params.w_in.clone());
    let w_hidden = tape.leaf(params.w_hidden.clone());
    let train = mode == Mode::Train && dropout > T::zero();
    let x = if train {
        tape.dropout(x_raw, dropout, mix_seed(seed, 0xD2))?
    } else {
        x_raw
    };
    let a1 = tape.neighbor_scatter_add(x, ctx.gcn.clone())?;
    let pre1 = tape.matmul(a1, w_in)?;
    let z1 = tape.relu(pre1);
    let round2_in = if train {
        tape.dropout(z1, dropout, mix_seed(seed, 0xD0))?
    } else {
        z1
    };
    let a2 = tape.neighbor_scatter_add(round2_in, ctx.gcn.clone())?;
    let pre2 = tape.matmul(a2, w_hidden)?;
    let z = tape.relu(pre2);
    Ok(tape.value(z).clone())
}

/// Spec-level op: softmax over the node axis, independently per hidden
/// dimension. Every column sums to 1.
pub fn reweight_matrix<T: Scalar>(z: &Mat<T>) -> Result<Mat<T>> {
    if z.iter().any(|x| !x.is_finite()) {
        return Err(CgrlError::NonFinite("reweight_matrix input"));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let hr = tape.col_softmax(zv);
    Ok(tape.value(hr).clone())
}

/// Spec-level op: logits = H_c · W_cls, no activation.
pub fn classify<T: Scalar>(hc: &Mat<T>, classifier: &Mat<T>) -> Result<Mat<T>> {
    if hc.ncols() != classifier.nrows() {
        return Err(CgrlError::Shape {
            op: "classify",
            expect: format!("{} hidden dims", classifier.nrows()),
            got: format!("{}", hc.ncols()),
        });
    }
    Ok(hc.dot(classifier))
}

/// Structural fingerprint of a parameter set (shapes only), handy for
/// asserting that ablation variants share one architecture.
pub fn param_shape_hash<T: Scalar>(p: &CgrlParams<T>) -> u64 {
    let mut h = Fnv::new();
    for m in p.flat() {
        h.write_usize(m.nrows());
        h.write_usize(m.ncols());
    }
    h.finish()
}
