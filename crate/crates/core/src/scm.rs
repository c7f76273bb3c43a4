//! Executable verification of the causal theory on finite discrete
//! instances: backdoor adjustment against a truncated-factorization oracle,
//! the variational lower bound, and the asymptotic behavior of the
//! replacement losses.
//!
//! Variables and mechanisms: E (environment noise), G (graph), H (prediction
//! representation), H_intra and H_inter (class-conditional distributions),
//! Y (label). Structure: E -> G, E -> Y, G -> H, H -> H_intra -> Y,
//! H -> H_inter. A deliberately graph-violating variant adds E -> H to
//! demonstrate where the adjustment breaks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CgrlError, Result};
use crate::scalar::Scalar;

/// How H is generated: from G alone (the stated causal graph), or from both
/// G and E (violating the graph; used as a negative control).
#[derive(Debug, Clone)]
pub enum HMechanism<T> {
    /// p[g][h]
    GOnly(Vec<Vec<T>>),
    /// p[g][e][h] - E is a direct cause of H
    GAndE(Vec<Vec<Vec<T>>>),
}

/// Finite-support SCM with explicit conditional probability tables.
#[derive(Debug, Clone)]
pub struct DiscreteScm<T: Scalar> {
    pub p_e: Vec<T>,
    /// p[e][g]
    pub p_g_given_e: Vec<Vec<T>>,
    pub h_mechanism: HMechanism<T>,
    /// p[h][hi]
    pub p_intra_given_h: Vec<Vec<T>>,
    /// p[h][hj]
    pub p_inter_given_h: Vec<Vec<T>>,
    /// p[hi][e][y]
    pub p_y_given_intra_e: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> DiscreteScm<T> {
    pub fn sizes(&self) -> (usize, usize, usize, usize, usize, usize) {
        let ny = self.p_y_given_intra_e[0][0].len();
        (
            self.p_e.len(),
            self.p_g_given_e[0].len(),
            self.p_intra_given_h.len(),
            self.p_intra_given_h[0].len(),
            self.p_inter_given_h[0].len(),
            ny,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (ne, ng, nh, nhi, nhj, ny) = self.sizes();
        for (name, size) in [
            ("E", ne),
            ("G", ng),
            ("H", nh),
            ("H_intra", nhi),
            ("H_inter", nhj),
            ("Y", ny),
        ] {
            if size == 0 || size > 8 {
                return Err(CgrlError::invalid(
                    "DiscreteScm",
                    format!("support of {name} must be in 1..=8, got {size}"),
                ));
            }
        }
        let check = |name: &'static str, row: &[T]| -> Result<()> {
            let sum: T = row.iter().copied().sum();
            if (sum - T::one()).abs() > T::cast(1e-12) || row.iter().any(|&p| p < T::zero()) {
                return Err(CgrlError::NotStochastic {
                    what: name,
                    row: 0,
                    sum: sum.as_f64(),
                });
            }
            Ok(())
        };
        check("P(E)", &self.p_e)?;
        for row in &self.p_g_given_e {
            check("P(G|E)", row)?;
        }
        match &self.h_mechanism {
            HMechanism::GOnly(t) => {
                for row in t {
                    check("P(H|G)", row)?;
                }
            }
            HMechanism::GAndE(t) => {
                for per_g in t {
                    for row in per_g {
                        check("P(H|G,E)", row)?;
                    }
                }
            }
        }
        for row in &self.p_intra_given_h {
            check("P(H_intra|H)", row)?;
        }
        for row in &self.p_inter_given_h {
            check("P(H_inter|H)", row)?;
        }
        for per_hi in &self.p_y_given_intra_e {
            for row in per_hi {
                check("P(Y|H_intra,E)", row)?;
            }
        }
        Ok(())
    }

    fn p_h_given(&self, g: usize, e: usize, h: usize) -> T {
        match &self.h_mechanism {
            HMechanism::GOnly(t) => t[g][h],
            HMechanism::GAndE(t) => t[g][e][h],
        }
    }

    /// Full observational joint P(e, g, h, hi, hj, y) as nested enumeration.
    fn observational_joint(&self) -> Vec<(usize, usize, usize, usize, usize, usize, T)> {
        let (ne, ng, nh, nhi, nhj, ny) = self.sizes();
        let mut cells = Vec::new();
        for e in 0..ne {
            for g in 0..ng {
                for h in 0..nh {
                    for hi in 0..nhi {
                        for hj in 0..nhj {
                            for y in 0..ny {
                                let w = self.p_e[e]
                                    * self.p_g_given_e[e][g]
                                    * self.p_h_given(g, e, h)
                                    * self.p_intra_given_h[h][hi]
                                    * self.p_inter_given_h[h][hj]
                                    * self.p_y_given_intra_e[hi][e][y];
                                cells.push((e, g, h, hi, hj, y, w));
                            }
                        }
                    }
                }
            }
        }
        cells
    }
}

fn dirichlet_row<T: Scalar>(rng: &mut ChaCha8Rng, len: usize) -> Vec<T> {
    // symmetric Dirichlet(1) = normalized unit exponentials
    let draws: Vec<f64> = (0..len)
        .map(|_| {
            let u: f64 = rng.sample(rand::distr::Open01);
            -u.ln()
        })
        .collect();
    let sum: f64 = draws.iter().sum();
    draws.into_iter().map(|d| T::cast(d / sum)).collect()
}

/// Random SCM over the stated causal graph; strictly positive tables.
pub fn random_scm<T: Scalar>(seed: u64) -> DiscreteScm<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut size = || 2 + (rng.random::<u64>() % 3) as usize; // 2..=4
    let (ne, ng, nh, nhi, nhj, ny) = (size(), size(), size(), size(), size(), size());
    let scm = DiscreteScm {
        p_e: dirichlet_row(&mut rng, ne),
        p_g_given_e: (0..ne).map(|_| dirichlet_row(&mut rng, ng)).collect(),
        h_mechanism: HMechanism::GOnly((0..ng).map(|_| dirichlet_row(&mut rng, nh)).collect()),
        p_intra_given_h: (0..nh).map(|_| dirichlet_row(&mut rng, nhi)).collect(),
        p_inter_given_h: (0..nh).map(|_| dirichlet_row(&mut rng, nhj)).collect(),
        p_y_given_intra_e: (0..nhi)
            .map(|_| (0..ne).map(|_| dirichlet_row(&mut rng, ny)).collect())
            .collect(),
    };
    scm.validate().expect("random SCM is valid");
    scm
}

/// Random SCM where E is also a direct cause of H (violating the graph the
/// adjustment relies on).
pub fn random_violating_scm<T: Scalar>(seed: u64) -> DiscreteScm<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut size = || 2 + (rng.random::<u64>() % 3) as usize;
    let (ne, ng, nh, nhi, nhj, ny) = (size(), size(), size(), size(), size(), size());
    let scm = DiscreteScm {
        p_e: dirichlet_row(&mut rng, ne),
        p_g_given_e: (0..ne).map(|_| dirichlet_row(&mut rng, ng)).collect(),
        h_mechanism: HMechanism::GAndE(
            (0..ng)
                .map(|_| (0..ne).map(|_| dirichlet_row(&mut rng, nh)).collect())
                .collect(),
        ),
        p_intra_given_h: (0..nh).map(|_| dirichlet_row(&mut rng, nhi)).collect(),
        p_inter_given_h: (0..nh).map(|_| dirichlet_row(&mut rng, nhj)).collect(),
        p_y_given_intra_e: (0..nhi)
            .map(|_| (0..ne).map(|_| dirichlet_row(&mut rng, ny)).collect())
            .collect(),
    };
    scm.validate().expect("random violating SCM is valid");
    scm
}

/// Hand-built graph-violating SCM with a large, easily checked divergence:
/// H copies E, Y = H_intra xor E. Under do(H=0) the label still depends on
/// E, but conditioning on H pins E and hides that dependence.
pub fn xor_violating_scm<T: Scalar>() -> DiscreteScm<T> {
    let half = T::cast(0.5);
    let (lo, hi) = (T::cast(0.3), T::cast(0.7));
    let one = T::one();
    let zero = T::zero();
    let det = |v: usize, n: usize| -> Vec<T> {
        (0..n).map(|i| if i == v { one } else { zero }).collect()
    };
    DiscreteScm {
        p_e: vec![half, half],
        p_g_given_e: vec![vec![hi, lo], vec![lo, hi]],
        h_mechanism: HMechanism::GAndE(vec![
            vec![det(0, 2), det(1, 2)],
            vec![det(0, 2), det(1, 2)],
        ]),
        p_intra_given_h: vec![det(0, 2), det(1, 2)],
        p_inter_given_h: vec![det(0, 1), det(0, 1)],
        p_y_given_intra_e: vec![
            vec![det(0, 2), det(1, 2)],
            vec![det(1, 2), det(0, 2)],
        ],
    }
}

/// P(Y | do(H = h)) by truncated factorization: the H mechanism is deleted,
/// H is pinned to `h`, and the remaining full joint is marginalized.
pub fn interventional_brute_force<T: Scalar>(scm: &DiscreteScm<T>, h: usize) -> Result<Vec<T>> {
    scm.validate()?;
    let (ne, ng, nh, nhi, nhj, ny) = scm.sizes();
    if h >= nh {
        return Err(CgrlError::NodeOutOfRange { id: h, n: nh });
    }
    let mut dist = vec![T::zero(); ny];
    for e in 0..ne {
        for g in 0..ng {
            for hi in 0..nhi {
                for hj in 0..nhj {
                    for y in 0..ny {
                        let w = scm.p_e[e]
                            * scm.p_g_given_e[e][g]
                            * scm.p_intra_given_h[h][hi]
                            * scm.p_inter_given_h[h][hj]
                            * scm.p_y_given_intra_e[hi][e][y];
                        dist[y] += w;
                    }
                }
            }
        }
    }
    Ok(dist)
}

/// Backdoor adjustment: sum over g of P(Y | H = h, G = g) P(g), with the
/// conditionals computed from the observational joint.
pub fn backdoor_estimate<T: Scalar>(scm: &DiscreteScm<T>, h: usize) -> Result<Vec<T>> {
    scm.validate()?;
    let (_, ng, nh, _, _, ny) = scm.sizes();
    if h >= nh {
        return Err(CgrlError::NodeOutOfRange { id: h, n: nh });
    }
    let joint = scm.observational_joint();
    let mut p_g = vec![T::zero(); ng];
    let mut p_hg = vec![T::zero(); ng];
    let mut p_yhg = vec![vec![T::zero(); ng]; ny];
    for &(_, g, hh, _, _, y, w) in &joint {
        p_g[g] += w;
        if hh == h {
            p_hg[g] += w;
            p_yhg[y][g] += w;
        }
    }
    let mut dist = vec![T::zero(); ny];
    for g in 0..ng {
        if p_g[g] <= T::zero() {
            continue;
        }
        if p_hg[g] <= T::zero() {
            return Err(CgrlError::PositivityViolation { h, g });
        }
        for (y, row) in p_yhg.iter().enumerate() {
            dist[y] += row[g] / p_hg[g] * p_g[g];
        }
    }
    Ok(dist)
}

/// Observational conditional P(Y | H = h), for the no-confounding sanity
/// cases.
pub fn observational_conditional<T: Scalar>(scm: &DiscreteScm<T>, h: usize) -> Result<Vec<T>> {
    scm.validate()?;
    let (_, _, nh, _, _, ny) = scm.sizes();
    if h >= nh {
        return Err(CgrlError::NodeOutOfRange { id: h, n: nh });
    }
    let joint = scm.observational_joint();
    let mut p_h = T::zero();
    let mut p_yh = vec![T::zero(); ny];
    for &(_, _, hh, _, _, y, w) in &joint {
        if hh == h {
            p_h += w;
            p_yh[y] += w;
        }
    }
    if p_h <= T::zero() {
        return Err(CgrlError::invalid("observational_conditional", "P(h) = 0"));
    }
    Ok(p_yh.into_iter().map(|p| p / p_h).collect())
}

pub fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs())
        .fold(T::zero(), |acc, d| acc.max(d))
}

// ---------------------------------------------------------------------------
// Lower bound
// ---------------------------------------------------------------------------

/// Discrete instance of the lower bound: prior tables P, posterior tables Q
/// over (G_s, H_intra, H_inter) at a fixed conditioning value of H, plus the
/// likelihood of the observed label per (H_intra, G_s) cell.
#[derive(Debug, Clone)]
pub struct ElboInstance<T: Scalar> {
    pub p_g: Vec<T>,
    pub p_intra: Vec<T>,
    pub p_inter: Vec<T>,
    pub q_g: Vec<T>,
    pub q_intra: Vec<T>,
    pub q_inter: Vec<T>,
    /// lik[hi][g] = P(Y | H, H_intra = hi, G_s = g) for the observed Y.
    pub lik: Vec<Vec<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct ElboGap<T> {
    pub log_likelihood: T,
    pub bound: T,
    pub gap: T,
}

fn kl_discrete<T: Scalar>(q: &[T], p: &[T]) -> T {
    let mut kl = T::zero();
    for (&qi, &pi) in q.iter().zip(p) {
        if qi > T::zero() {
            kl += qi * (qi / pi).ln();
        }
    }
    kl
}

fn check_stochastic<T: Scalar>(name: &'static str, row: &[T]) -> Result<()> {
    let sum: T = row.iter().copied().sum();
    if (sum - T::one()).abs() > T::cast(1e-9) || row.iter().any(|&p| p < T::zero()) {
        return Err(CgrlError::NotStochastic {
            what: name,
            row: 0,
            sum: sum.as_f64(),
        });
    }
    Ok(())
}

/// Evaluate the log-likelihood, the four-term lower bound, and their gap by
/// direct summation. A bound of -inf (zero likelihood under positive Q mass)
/// is legitimate and yields an infinite gap.
pub fn elbo_gap<T: Scalar>(inst: &ElboInstance<T>) -> Result<ElboGap<T>> {
    check_stochastic("p_g", &inst.p_g)?;
    check_stochastic("p_intra", &inst.p_intra)?;
    check_stochastic("p_inter", &inst.p_inter)?;
    check_stochastic("q_g", &inst.q_g)?;
    check_stochastic("q_intra", &inst.q_intra)?;
    check_stochastic("q_inter", &inst.q_inter)?;

    // log-likelihood of the factorized joint
    let mut total = T::zero();
    for (hi, row) in inst.lik.iter().enumerate() {
        for (g, &l) in row.iter().enumerate() {
            for &pj in &inst.p_inter {
                total += l * inst.p_intra[hi] * pj * inst.p_g[g];
            }
        }
    }
    let log_likelihood = total.ln();

    // expected log-likelihood under Q, with 0 * log 0 = 0
    let mut expect = T::zero();
    for (hi, row) in inst.lik.iter().enumerate() {
        for (g, &l) in row.iter().enumerate() {
            let w = inst.q_intra[hi] * inst.q_g[g];
            if w > T::zero() {
                expect += w * l.ln();
            }
        }
    }
    let bound = expect
        - kl_discrete(&inst.q_g, &inst.p_g)
        - kl_discrete(&inst.q_intra, &inst.p_intra)
        - kl_discrete(&inst.q_inter, &inst.p_inter);
    Ok(ElboGap {
        log_likelihood,
        bound,
        gap: log_likelihood - bound,
    })
}

/// Random instance with likelihoods bounded away from zero.
pub fn random_elbo_instance<T: Scalar>(seed: u64) -> ElboInstance<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut size = || 2 + (rng.random::<u64>() % 3) as usize;
    let (ng, nhi, nhj) = (size(), size(), size());
    let lik = (0..nhi)
        .map(|_| {
            (0..ng)
                .map(|_| T::cast(0.05 + 0.95 * rng.random::<f64>()))
                .collect()
        })
        .collect();
    ElboInstance {
        p_g: dirichlet_row(&mut rng, ng),
        p_intra: dirichlet_row(&mut rng, nhi),
        p_inter: dirichlet_row(&mut rng, nhj),
        q_g: dirichlet_row(&mut rng, ng),
        q_intra: dirichlet_row(&mut rng, nhi),
        q_inter: dirichlet_row(&mut rng, nhj),
        lik,
    }
}

impl<T: Scalar> ElboInstance<T> {
    /// Same priors with Q set equal to P.
    pub fn with_q_equal_p(&self) -> Self {
        ElboInstance {
            q_g: self.p_g.clone(),
            q_intra: self.p_intra.clone(),
            q_inter: self.p_inter.clone(),
            ..self.clone()
        }
    }

    /// Same tables with the likelihood pinned to a constant. With Q = P this
    /// collapses the Jensen slack, so the gap is exactly the KL sum (zero).
    pub fn with_constant_likelihood(&self, c: T) -> Self {
        let lik = self
            .lik
            .iter()
            .map(|row| row.iter().map(|_| c).collect())
            .collect();
        ElboInstance {
            lik,
            ..self.clone()
        }
    }

    pub fn kl_sum(&self) -> T {
        kl_discrete(&self.q_g, &self.p_g)
            + kl_discrete(&self.q_intra, &self.p_intra)
            + kl_discrete(&self.q_inter, &self.p_inter)
    }
}

// ---------------------------------------------------------------------------
// Asymptotic loss replacement
// ---------------------------------------------------------------------------

/// Outcome of the constructed-sequence check of the replacement-loss limits.
#[derive(Debug, Clone)]
pub struct AsymptoticReport {
    pub t_max: usize,
    /// L_intra(t) == |S| * (1/t) bitwise for |S| in {1, 2, 4}, all t.
    pub intra_exact: bool,
    /// Assumption-satisfying inter sequence (cosine = margin*(1 - 1/t))
    /// yields exactly zero loss for all t.
    pub inter_zero_exact: bool,
    /// Pinned inter sequence (cosine = margin + 1/t) yields exactly 1/t.
    pub inter_pinned_exact: bool,
    /// Worst relative deviation of the dyadic 1/t used in the construction
    /// from the exact rational 1/t; at most t_max * eps / 2.
    pub max_rel_deviation: f64,
    /// Machine epsilon of the scalar type the check ran under.
    pub type_epsilon: f64,
    pub final_intra: f64,
    pub final_inter_pinned: f64,
}

impl AsymptoticReport {
    pub fn passed(&self) -> bool {
        let limit = 2.0 / self.t_max as f64;
        self.intra_exact
            && self.inter_zero_exact
            && self.inter_pinned_exact
            && self.max_rel_deviation <= self.t_max as f64 * self.type_epsilon
            && self.final_intra <= limit
            && self.final_inter_pinned <= limit
    }
}

/// Nearest multiple of eps/2 to 1/t: the spacing of representable values in
/// [1/2, 1). On this grid every subtraction in the loss identities is exact.
fn dyadic_inverse<T: Scalar>(t: usize) -> T {
    let grid = T::epsilon() / T::cast(2.0);
    let scale = T::one() / grid;
    let k = (scale / T::cast(t as f64)).round();
    k * grid
}

/// Embedding pair with an exact dot product `c`: u = (1, 0), v = (c, s).
fn pair_loss_intra<T: Scalar>(c: T) -> T {
    let u = [T::one(), T::zero()];
    let v = [c, (T::one() - c * c).max(T::zero()).sqrt()];
    let dot = u[0] * v[0] + u[1] * v[1];
    T::one() - dot
}

fn pair_loss_inter<T: Scalar>(c: T, margin: T) -> T {
    let u = [T::one(), T::zero()];
    let v = [c, (T::one() - c * c).max(T::zero()).sqrt()];
    let dot = u[0] * v[0] + u[1] * v[1];
    (dot - margin).max(T::zero())
}

/// Construct embedding sequences realizing the limit conditions and check
/// the replacement losses against them for every t up to `t_max`.
///
/// Intra pairs have cosine 1 - 1/t, so each contributes exactly 1/t and a
/// set S of such pairs has summed loss |S|/t. An inter sequence with cosine
/// margin*(1 - 1/t) stays below margin (zero hinge); one pinned at
/// margin + 1/t incurs exactly 1/t.
pub fn asymptotic_loss_check<T: Scalar>(t_max: usize) -> Result<AsymptoticReport> {
    if t_max < 10 {
        return Err(CgrlError::invalid("asymptotic_loss_check", "t_max must be >= 10"));
    }
    let margin = T::cast(0.5);
    let mut intra_exact = true;
    let mut inter_zero_exact = true;
    let mut inter_pinned_exact = true;
    let mut max_rel_dev = 0.0f64;
    let mut final_intra = T::zero();
    let mut final_inter = T::zero();

    for t in 1..=t_max {
        let inv = dyadic_inverse::<T>(t);
        let rel_dev = (inv.as_f64() * t as f64 - 1.0).abs();
        max_rel_dev = max_rel_dev.max(rel_dev);

        // intra: cosine 1 - 1/t, summed over |S| identical pairs
        let cos_intra = T::one() - inv;
        for set_size in [1usize, 2, 4] {
            let mut loss = T::zero();
            for _ in 0..set_size {
                loss += pair_loss_intra(cos_intra);
            }
            let expected = T::cast(set_size as f64) * inv;
            if loss != expected {
                intra_exact = false;
            }
            if set_size == 1 && t == t_max {
                final_intra = loss;
            }
        }

        // inter, assumption-satisfying: cosine margin*(1 - 1/t) <= margin
        let cos_ok = margin * (T::one() - inv);
        if pair_loss_inter(cos_ok, margin) != T::zero() {
            inter_zero_exact = false;
        }

        // inter, pinned above margin: cosine margin + 1/t (needs cosine <= 1)
        if t >= 2 {
            let cos_pinned = margin + inv;
            let loss = pair_loss_inter(cos_pinned, margin);
            if loss != inv {
                inter_pinned_exact = false;
            }
            if t == t_max {
                final_inter = loss;
            }
        }
    }

    Ok(AsymptoticReport {
        t_max,
        intra_exact,
        inter_zero_exact,
        inter_pinned_exact,
        max_rel_deviation: max_rel_dev,
        type_epsilon: T::epsilon().as_f64(),
        final_intra: final_intra.as_f64(),
        final_inter_pinned: final_inter.as_f64(),
    })
}

// ---------------------------------------------------------------------------
// Verification suite
// ---------------------------------------------------------------------------

/// One named check with its worst observed error.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Text-reportable outcome of the whole theory suite.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("theory verification\n");
        for c in &self.checks {
            out.push_str(&format!(
                "  [{}] {}: {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        out.push_str(if self.passed() {
            "all checks passed\n"
        } else {
            "FAILURES PRESENT\n"
        });
        out
    }
}

/// Run the full suite: backdoor equivalence over `scm_seeds` random SCMs,
/// the graph-violating negative control, `elbo_seeds` lower-bound instances
/// plus the Q = P cases, and the asymptotic loss check up to `t_max`.
pub fn run_verification<T: Scalar>(scm_seeds: u64, elbo_seeds: u64, t_max: usize) -> Result<VerifyReport> {
    let mut checks = Vec::new();

    // Theorem: backdoor == interventional on conforming SCMs
    let mut worst = T::zero();
    for seed in 0..scm_seeds {
        let scm = random_scm::<T>(seed);
        let nh = scm.p_intra_given_h.len();
        for h in 0..nh {
            let oracle = interventional_brute_force(&scm, h)?;
            let est = backdoor_estimate(&scm, h)?;
            worst = worst.max(max_abs_diff(&oracle, &est));
        }
    }
    checks.push(CheckResult {
        name: format!("backdoor adjustment vs brute force ({scm_seeds} SCMs)"),
        passed: worst < T::cast(1e-10),
        detail: format!("max |diff| = {:.3e}", worst.as_f64()),
    });

    // Negative control: E -> H violation makes the adjustment diverge
    let xor = xor_violating_scm::<T>();
    let oracle = interventional_brute_force(&xor, 0)?;
    let est = backdoor_estimate(&xor, 0)?;
    let xor_div = max_abs_diff(&oracle, &est);
    let mut any_random_div = T::zero();
    for seed in 0..scm_seeds {
        let scm = random_violating_scm::<T>(seed);
        let o = interventional_brute_force(&scm, 0)?;
        let e = backdoor_estimate(&scm, 0)?;
        any_random_div = any_random_div.max(max_abs_diff(&o, &e));
    }
    checks.push(CheckResult {
        name: "graph-violating SCM breaks the adjustment".into(),
        passed: xor_div > T::cast(1e-3),
        detail: format!(
            "hand-built divergence {:.3e}, max random divergence {:.3e}",
            xor_div.as_f64(),
            any_random_div.as_f64()
        ),
    });

    // Lower bound: gap >= 0 always, zero at Q = P with collapsed Jensen slack
    let mut min_gap = T::infinity();
    let mut kl_zero_worst = T::zero();
    let mut qp_gap_worst = T::zero();
    for seed in 0..elbo_seeds {
        let inst = random_elbo_instance::<T>(seed);
        let g = elbo_gap(&inst)?;
        min_gap = min_gap.min(g.gap);
        let qp = inst.with_q_equal_p();
        kl_zero_worst = kl_zero_worst.max(qp.kl_sum().abs());
        let collapsed = qp.with_constant_likelihood(T::cast(0.37));
        qp_gap_worst = qp_gap_worst.max(elbo_gap(&collapsed)?.gap.abs());
    }
    checks.push(CheckResult {
        name: format!("lower bound holds ({elbo_seeds} instances)"),
        passed: min_gap >= T::cast(-1e-9),
        detail: format!("min gap = {:.3e}", min_gap.as_f64()),
    });
    checks.push(CheckResult {
        name: "Q = P collapses the KL terms and the gap".into(),
        passed: kl_zero_worst < T::cast(1e-12) && qp_gap_worst < T::cast(1e-9),
        detail: format!(
            "max |KL sum| = {:.3e}, max |gap| = {:.3e}",
            kl_zero_worst.as_f64(),
            qp_gap_worst.as_f64()
        ),
    });

    // Replacement-loss limits
    let rep = asymptotic_loss_check::<T>(t_max)?;
    checks.push(CheckResult {
        name: format!("replacement-loss limits up to t = {t_max}"),
        passed: rep.passed(),
        detail: format!(
            "intra exact: {}, inter zero: {}, inter pinned: {}, final losses ({:.1e}, {:.1e})",
            rep.intra_exact,
            rep.inter_zero_exact,
            rep.inter_pinned_exact,
            rep.final_intra,
            rep.final_inter_pinned
        ),
    });

    Ok(VerifyReport { checks })
}
