//! Class-distribution algebra: KL divergence (the class-imbalance measure),
//! entropy, the continuous relaxation of the code entropy, and the
//! KL-targeted subset sampler used to build imbalanced evaluation splits.
//!
//! All logarithms here are base 2, so divergences and entropies are in bits.

use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::ndnum::matrix::Matrix;
use crate::ndnum::mlp::softmax_rows;
use crate::rng::Rng;

const LOG2_E: f64 = std::f64::consts::LOG2_E;
const SUM_TOL: f64 = 1e-9;

/// A probability vector over `K+1` classes (index `K` is the open-set
/// "unknown" class, which typically carries zero mass).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput("ClassDistribution::new"));
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Numeric(
                "class distribution entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::Numeric(format!(
                "class distribution sums to {sum}, expected 1"
            )));
        }
        Ok(ClassDistribution { probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Numeric("weights sum to zero".into()));
        }
        ClassDistribution::new(weights.iter().map(|&w| w / sum).collect())
    }

    pub fn uniform(k: usize) -> Self {
        ClassDistribution {
            probs: vec![1.0 / k as f64; k],
        }
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Support-respecting floor: lifts every entry to at least `floor` and
    /// renormalizes. Used when a divergence must stay finite against an
    /// empirical reference that has absent classes.
    pub fn floored(&self, floor: f64) -> ClassDistribution {
        let lifted: Vec<f64> = self.probs.iter().map(|&p| p.max(floor)).collect();
        ClassDistribution::from_weights(&lifted).expect("floored weights are positive")
    }
}

/// `KL(p || q)` in bits. Zero-mass terms of `p` contribute exactly zero;
/// a class with `q = 0` but `p > 0` makes the divergence undefined.
pub fn kl_divergence(p: &ClassDistribution, q: &ClassDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            context: "kl_divergence",
            expected: format!("{} classes", p.len()),
            actual: format!("{}", q.len()),
        });
    }
    let mut kl = 0.0;
    for (k, (&pk, &qk)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pk == 0.0 {
            continue;
        }
        if qk == 0.0 {
            return Err(Error::KlSupport { class: k, p_mass: pk });
        }
        kl += pk * (pk / qk).log2();
    }
    // Rounding can push a true zero slightly negative.
    Ok(kl.max(0.0))
}

/// Shannon entropy in bits (non-negative convention).
pub fn entropy(p: &ClassDistribution) -> f64 {
    p.probs
        .iter()
        .map(|&pk| if pk > 0.0 { -pk * pk.log2() } else { 0.0 })
        .sum()
}

/// Normalized class counts; classes absent from `labels` get exactly zero.
pub fn empirical_distribution(labels: &[usize], num_classes: usize) -> Result<ClassDistribution> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("empirical_distribution: no labels"));
    }
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(Error::Bounds {
                context: "empirical_distribution label",
                index: l,
                size: num_classes,
            });
        }
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    ClassDistribution::new(counts.iter().map(|&c| c as f64 / n).collect())
}

/// An `N_t x (K+1)` row-stochastic assignment produced by row-softmax of
/// logits `theta`; the smooth stand-in for hard one-hot class indicators.
#[derive(Debug, Clone)]
pub struct RelaxedAssignment {
    theta: Matrix,
    p: Matrix,
}

impl RelaxedAssignment {
    pub fn from_logits(theta: Matrix) -> Result<Self> {
        if theta.rows() == 0 {
            return Err(Error::EmptyInput("RelaxedAssignment: no rows"));
        }
        let p = softmax_rows(&theta);
        Ok(RelaxedAssignment { theta, p })
    }

    /// Builds the assignment from row-stochastic probabilities by taking
    /// `theta = ln p` (so that row-softmax reproduces `p` exactly).
    pub fn from_probs(probs: &Matrix) -> Result<Self> {
        let theta = probs.map(|v| v.max(1e-300).ln());
        if probs.rows() == 0 {
            return Err(Error::EmptyInput("RelaxedAssignment: no rows"));
        }
        Ok(RelaxedAssignment {
            theta,
            p: probs.clone(),
        })
    }

    pub fn num_rows(&self) -> usize {
        self.p.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.p.cols()
    }

    pub fn probs(&self) -> &Matrix {
        &self.p
    }

    pub fn theta(&self) -> &Matrix {
        &self.theta
    }
}

/// Column means of the assignment: the relaxed class marginal.
pub fn relaxed_marginal(a: &RelaxedAssignment) -> Result<ClassDistribution> {
    if a.num_rows() == 0 {
        return Err(Error::EmptyInput("relaxed_marginal: empty assignment"));
    }
    ClassDistribution::new(a.p.col_means())
}

pub struct RelaxedEntropy {
    pub h_bits: f64,
    /// Gradient of the entropy with respect to `theta`, same shape.
    pub grad_theta: Matrix,
    pub marginal: ClassDistribution,
}

/// Entropy of the relaxed marginal together with its gradient through the
/// row-softmax. `P_k = 0` contributes zero value and zero gradient.
pub fn relaxed_entropy(a: &RelaxedAssignment) -> Result<RelaxedEntropy> {
    let marginal = relaxed_marginal(a)?;
    let h_bits = entropy(&marginal);
    let n = a.num_rows();
    let k = a.num_classes();
    let inv_n = 1.0 / n as f64;
    // dH/dP_k for H = sum_k -P_k log2 P_k.
    let dh_dpk: Vec<f64> = marginal
        .probs()
        .iter()
        .map(|&pk| if pk > 0.0 { -(pk.log2() + LOG2_E) } else { 0.0 })
        .collect();
    let mut grad = Matrix::zeros(n, k);
    for i in 0..n {
        let p_row = a.p.row(i);
        // Through the row softmax: dH/dtheta_ij = P_ij (dH/dP_ij - sum_k dH/dP_ik P_ik)
        // with dH/dP_ik = dH/dP_k / n.
        let dot: f64 = p_row
            .iter()
            .zip(&dh_dpk)
            .map(|(&p, &d)| p * d * inv_n)
            .sum();
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = p_row[j] * (dh_dpk[j] * inv_n - dot);
        }
    }
    Ok(RelaxedEntropy {
        h_bits,
        grad_theta: grad,
        marginal,
    })
}

const DIRICHLET_ALPHA: f64 = 0.1;
const BISECT_ITERS: usize = 80;

/// Finds a distribution `p_t` with `KL(p_t || p_s)` within `tol` of `kappa`.
///
/// Proposals are sparse Dirichlet draws restricted to the support of `p_s`;
/// the geometric path `p(lambda) ∝ p_s^(1-lambda) * p_x^lambda` starts at
/// `p_s` (KL 0) and is bisected on `lambda`. Fresh proposals are drawn until
/// the path reaches `kappa` or `max_retries` is exhausted.
pub fn solve_kl_target(
    p_s: &ClassDistribution,
    kappa: f64,
    tol: f64,
    rng: &mut Rng,
    max_retries: usize,
) -> Result<ClassDistribution> {
    if kappa < 0.0 {
        return Err(Error::Numeric("kappa must be non-negative".into()));
    }
    if kappa <= tol {
        return Ok(p_s.clone());
    }
    let support: Vec<usize> = (0..p_s.len()).filter(|&k| p_s.probs()[k] > 0.0).collect();
    if support.len() < 2 {
        return Err(Error::Numeric(
            "source support must contain at least two classes".into(),
        ));
    }
    let gamma = Gamma::new(DIRICHLET_ALPHA, 1.0).expect("valid gamma parameters");
    let mut best_max = 0.0_f64;
    for _ in 0..max_retries {
        // Dirichlet(alpha) on the support via normalized gammas.
        let mut proposal = vec![0.0; p_s.len()];
        let mut sum = 0.0;
        for &k in &support {
            let g: f64 = gamma.sample(rng);
            proposal[k] = g;
            sum += g;
        }
        if !(sum > 0.0) || !sum.is_finite() {
            continue;
        }
        for v in &mut proposal {
            *v /= sum;
        }

        let blend = |lambda: f64| -> ClassDistribution {
            let mut w = vec![0.0; p_s.len()];
            for &k in &support {
                w[k] = p_s.probs()[k].powf(1.0 - lambda) * proposal[k].powf(lambda);
            }
            ClassDistribution::from_weights(&w).expect("path weights stay positive somewhere")
        };
        let kl_at = |lambda: f64| -> f64 {
            kl_divergence(&blend(lambda), p_s).expect("path respects the source support")
        };

        let max_kl = kl_at(1.0);
        best_max = best_max.max(max_kl);
        if max_kl < kappa {
            continue;
        }
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..BISECT_ITERS {
            let mid = 0.5 * (lo + hi);
            if kl_at(mid) < kappa {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let p_t = blend(0.5 * (lo + hi));
        let achieved = kl_divergence(&p_t, p_s)?;
        if (achieved - kappa).abs() <= tol {
            return Ok(p_t);
        }
    }
    Err(Error::UnreachableTarget {
        kappa,
        retries: max_retries,
        best_max,
    })
}

/// A target subset with its realized class-imbalance value.
#[derive(Debug, Clone)]
pub struct SubsetSample {
    pub indices: Vec<usize>,
    pub achieved_ci: f64,
    pub realized: ClassDistribution,
}

const SUBSET_RETRIES: usize = 200;

/// Samples a subset of the labeled target pool whose empirical class
/// distribution sits within `tol` of the requested divergence `kappa` from
/// `p_s`. Pool labels are used for split construction only.
///
/// The subset is as large as the pool allows for the solved distribution
/// (never smaller than `min_total`), with integer per-class counts from
/// largest-remainder rounding and the reported CI recomputed from those
/// realized counts.
pub fn sample_target_subset(
    target_labels: &[usize],
    p_s: &ClassDistribution,
    kappa: f64,
    tol: f64,
    min_total: usize,
    rng: &mut Rng,
) -> Result<SubsetSample> {
    if target_labels.is_empty() {
        return Err(Error::EmptyInput("sample_target_subset: empty pool"));
    }
    let num_classes = p_s.len();
    let mut available = vec![0usize; num_classes];
    for &l in target_labels {
        if l >= num_classes {
            return Err(Error::Bounds {
                context: "sample_target_subset label",
                index: l,
                size: num_classes,
            });
        }
        available[l] += 1;
    }

    let mut last_err = None;
    for attempt in 0..SUBSET_RETRIES {
        let p_t = solve_kl_target(p_s, kappa, (tol * 0.5).max(1e-4), rng, 64)?;
        match quantize_counts(p_t.probs(), &available, min_total) {
            Ok(counts) => {
                let total: usize = counts.iter().sum();
                let realized = ClassDistribution::new(
                    counts.iter().map(|&c| c as f64 / total as f64).collect(),
                )?;
                let achieved = kl_divergence(&realized, p_s)?;
                if (achieved - kappa).abs() <= tol || kappa <= tol && achieved <= tol {
                    let indices = draw_indices(target_labels, &counts, rng);
                    return Ok(SubsetSample {
                        indices,
                        achieved_ci: achieved,
                        realized,
                    });
                }
                // Quantization pushed us out of tolerance; try a fresh proposal.
            }
            Err(e) => {
                last_err = Some(e);
            }
        }
        let _ = attempt;
    }
    Err(last_err.unwrap_or(Error::UnreachableTarget {
        kappa,
        retries: SUBSET_RETRIES,
        best_max: f64::NAN,
    }))
}

/// Largest-remainder quantization of `p_t` into integer counts, sized as
/// large as the pool permits (at most the full pool, at least `min_total`).
fn quantize_counts(p_t: &[f64], available: &[usize], min_total: usize) -> Result<Vec<usize>> {
    let pool_total: usize = available.iter().sum();
    // Largest subset size for which every class demand fits its availability.
    let mut n_max = pool_total as f64;
    let mut limiting = 0usize;
    for (k, (&p, &avail)) in p_t.iter().zip(available).enumerate() {
        if p > 0.0 {
            let cap = avail as f64 / p;
            if cap < n_max {
                n_max = cap;
                limiting = k;
            }
        }
    }
    let mut n = n_max.floor() as usize;
    loop {
        if n < min_total.max(1) {
            let needed = (min_total.max(1) as f64 * p_t[limiting]).ceil() as usize;
            return Err(Error::InsufficientPool {
                class: limiting,
                available: available[limiting],
                needed,
            });
        }
        let counts = largest_remainder(p_t, n);
        if counts.iter().zip(available).all(|(&c, &a)| c <= a) {
            return Ok(counts);
        }
        n -= 1;
    }
}

fn largest_remainder(p: &[f64], n: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = p.iter().map(|&pk| (pk * n as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| (k, pk * n as f64 - counts[k] as f64))
        .collect();
    // Ties broken by class index for determinism.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for i in 0..n.saturating_sub(assigned) {
        counts[remainders[i % remainders.len()].0] += 1;
    }
    counts
}

fn draw_indices(labels: &[usize], counts: &[usize], rng: &mut Rng) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); counts.len()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let picks = rand::seq::index::sample(rng, by_class[k].len(), c);
        for p in picks {
            out.push(by_class[k][p]);
        }
    }
    out.sort_unstable();
    out
}
