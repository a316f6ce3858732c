//! Synthetic domain-pair generation and feature-file I/O.
//!
//! A domain pair is a balanced Gaussian mixture (the source) plus the same
//! mixture pushed through an invertible rotation-and-translation shift (the
//! target pool). Feature files use a plain CSV interchange format:
//! header `label,f0,...,f{d-1}`, empty label column for unlabeled rows.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ndnum::matrix::Matrix;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// A feature set with optional labels over a `K+1` open-set label space
/// (index `K` is the "unknown" class and never receives generated samples).
///
/// Target sets handed to the trainer must have labels withheld; labels stay
/// with the split sampler and the final scorer.
#[derive(Debug, Clone)]
pub struct FeatureDataset {
    pub x: Matrix,
    pub y: Option<Vec<usize>>,
    pub domain: Domain,
    /// K+1: known classes plus the open-set slot.
    pub num_classes: usize,
}

impl FeatureDataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.y
            .as_deref()
            .ok_or_else(|| Error::Contract("dataset has no labels".into()))
    }

    /// A copy with labels withheld, for handing to the trainer.
    pub fn unlabeled(&self) -> FeatureDataset {
        FeatureDataset {
            x: self.x.clone(),
            y: None,
            domain: self.domain,
            num_classes: self.num_classes,
        }
    }

    /// Row subset keeping labels (split construction / scoring only).
    pub fn subset(&self, indices: &[usize]) -> FeatureDataset {
        FeatureDataset {
            x: self.x.select_rows(indices),
            y: self
                .y
                .as_ref()
                .map(|labels| indices.iter().map(|&i| labels[i]).collect()),
            domain: self.domain,
            num_classes: self.num_classes,
        }
    }
}

/// Parameters of the synthetic domain pair.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DomainPairSpec {
    /// Known class count K; the label space is K+1 with an empty unknown slot.
    pub classes: usize,
    pub feature_dim: usize,
    /// Class means are placed uniformly on a sphere of this radius.
    pub class_radius: f64,
    /// Isotropic within-class standard deviation.
    pub class_sigma: f64,
    /// Domain-shift rotation angle, applied block-planarly: the same 2x2
    /// rotation acts on every consecutive coordinate pair, so every point
    /// moves by exactly `2 sin(theta/2) |x|`.
    pub shift_rotation: f64,
    /// Norm of the domain-shift translation (direction drawn from the rng).
    pub shift_translation: f64,
    pub n_source: usize,
    pub n_target_pool: usize,
}

impl Default for DomainPairSpec {
    fn default() -> Self {
        DomainPairSpec {
            classes: 10,
            feature_dim: 64,
            class_radius: 4.0,
            class_sigma: 1.0,
            shift_rotation: std::f64::consts::PI / 6.0,
            shift_translation: 1.0,
            n_source: 2000,
            n_target_pool: 4000,
        }
    }
}

impl DomainPairSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config {
                field: "data.classes".into(),
                message: "need at least 2 classes".into(),
            });
        }
        if self.feature_dim < 2 && self.shift_rotation != 0.0 {
            return Err(Error::Config {
                field: "data.feature_dim".into(),
                message: "rotation requires feature_dim >= 2".into(),
            });
        }
        if self.class_radius < 0.0 || self.class_sigma < 0.0 || self.shift_translation < 0.0 {
            return Err(Error::Config {
                field: "data".into(),
                message: "radii, sigma and shift norms must be non-negative".into(),
            });
        }
        if self.n_source == 0 || self.n_target_pool == 0 {
            return Err(Error::Config {
                field: "data.n_source".into(),
                message: "sample counts must be positive".into(),
            });
        }
        Ok(())
    }
}

pub struct DomainPair {
    pub source: FeatureDataset,
    pub target_pool: FeatureDataset,
    /// True class means (source frame), kept for oracle-style checks.
    pub class_means: Matrix,
    pub shift_translation: Vec<f64>,
}

/// Generates the labeled source set and the labeled target pool. Target
/// labels are for split construction and final scoring only.
pub fn generate_domain_pair(spec: &DomainPairSpec, rng: &mut Rng) -> Result<DomainPair> {
    spec.validate()?;
    let k = spec.classes;
    let d = spec.feature_dim;

    // Class means uniform on the sphere of radius r.
    let mut means = Matrix::zeros(k, d);
    for c in 0..k {
        let row = means.row_mut(c);
        loop {
            let mut norm2 = 0.0;
            for v in row.iter_mut() {
                *v = StandardNormal.sample(rng);
                norm2 += *v * *v;
            }
            if norm2 > 1e-12 {
                let s = spec.class_radius / norm2.sqrt();
                for v in row.iter_mut() {
                    *v *= s;
                }
                break;
            }
        }
    }

    // Translation direction on the unit sphere, scaled to the requested norm.
    let mut translation = vec![0.0_f64; d];
    if spec.shift_translation > 0.0 {
        loop {
            let mut norm2 = 0.0_f64;
            for v in translation.iter_mut() {
                *v = StandardNormal.sample(rng);
                norm2 += *v * *v;
            }
            if norm2 > 1e-12 {
                let s = spec.shift_translation / norm2.sqrt();
                for v in translation.iter_mut() {
                    *v *= s;
                }
                break;
            }
        }
    }

    let source = sample_mixture(&means, spec.class_sigma, spec.n_source, k + 1, Domain::Source, rng);
    let mut target = sample_mixture(
        &means,
        spec.class_sigma,
        spec.n_target_pool,
        k + 1,
        Domain::Target,
        rng,
    );
    apply_shift(&mut target.x, spec.shift_rotation, &translation);
    target.domain = Domain::Target;

    Ok(DomainPair {
        source,
        target_pool: target,
        class_means: means,
        shift_translation: translation,
    })
}

/// Exactly balanced class counts: `floor(n/K)` each, remainder spread over
/// the lowest class indices.
pub fn balanced_counts(n: usize, k: usize) -> Vec<usize> {
    let base = n / k;
    let rem = n % k;
    (0..k).map(|c| base + usize::from(c < rem)).collect()
}

fn sample_mixture(
    means: &Matrix,
    sigma: f64,
    n: usize,
    num_classes: usize,
    domain: Domain,
    rng: &mut Rng,
) -> FeatureDataset {
    let k = means.rows();
    let d = means.cols();
    let counts = balanced_counts(n, k);
    let mut x = Matrix::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    let mut row = 0;
    for (c, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let out = x.row_mut(row);
            for (v, &m) in out.iter_mut().zip(means.row(c)) {
                let noise: f64 = StandardNormal.sample(rng);
                *v = m + sigma * noise;
            }
            y.push(c);
            row += 1;
        }
    }
    FeatureDataset {
        x,
        y: Some(y),
        domain,
        num_classes,
    }
}

/// In-place block-planar rotation plus translation. The same 2x2 rotation is
/// applied to every consecutive coordinate pair (a trailing odd coordinate is
/// left untouched), so `theta = pi` maps `x` to `-x` on the rotated block.
pub fn apply_shift(x: &mut Matrix, theta: f64, translation: &[f64]) {
    assert_eq!(x.cols(), translation.len(), "translation dim mismatch");
    let (sin, cos) = theta.sin_cos();
    let d = x.cols();
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        let mut j = 0;
        while j + 1 < d {
            let (a, b) = (row[j], row[j + 1]);
            row[j] = cos * a - sin * b;
            row[j + 1] = sin * a + cos * b;
            j += 2;
        }
        for (v, &t) in row.iter_mut().zip(translation) {
            *v += t;
        }
    }
}

/// Nearest-class-mean classification accuracy against known true means;
/// the model-free oracle for separability checks.
pub fn nearest_mean_accuracy(ds: &FeatureDataset, means: &Matrix) -> Result<f64> {
    let labels = ds.labels()?;
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = ds.x.row(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..means.rows() {
            let dist: f64 = row
                .iter()
                .zip(means.row(c))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            if dist < best_d {
                best_d = dist;
                best = c;
            }
        }
        correct += usize::from(best == label);
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Writes the CSV interchange format. Floats use Rust's shortest
/// round-trippable representation, so load-after-save is exact.
pub fn save_feature_csv(ds: &FeatureDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("label");
    for j in 0..ds.dim() {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for i in 0..ds.len() {
        match &ds.y {
            Some(labels) => {
                let _ = write!(out, "{}", labels[i]);
            }
            None => {}
        }
        for v in ds.x.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads the CSV interchange format. Rows must be uniformly labeled or
/// uniformly unlabeled; ragged or non-numeric rows are reported with their
/// 1-based line number.
pub fn load_feature_csv(path: &Path) -> Result<FeatureDataset> {
    let text = fs::read_to_string(path)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"label") {
        return Err(parse_err(1, "header must start with `label`".into()));
    }
    let dim = cols.len() - 1;
    for (j, c) in cols.iter().skip(1).enumerate() {
        if *c != format!("f{j}") {
            return Err(parse_err(1, format!("expected column f{j}, found `{c}`")));
        }
    }
    if dim == 0 {
        return Err(parse_err(1, "no feature columns".into()));
    }

    let mut data = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut n = 0usize;
    let mut labeled: Option<bool> = None;
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(parse_err(
                lineno,
                format!("expected {} fields, found {}", dim + 1, fields.len()),
            ));
        }
        let has_label = !fields[0].is_empty();
        match labeled {
            None => labeled = Some(has_label),
            Some(expected) if expected != has_label => {
                return Err(parse_err(
                    lineno,
                    "mixed labeled and unlabeled rows".into(),
                ));
            }
            _ => {}
        }
        if has_label {
            let l: usize = fields[0]
                .parse()
                .map_err(|e| parse_err(lineno, format!("bad label `{}`: {e}", fields[0])))?;
            labels.push(l);
        }
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|e| parse_err(lineno, format!("bad value `{f}`: {e}")))?;
            data.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(parse_err(1, "no data rows".into()));
    }
    let x = Matrix::from_vec(n, dim, data)?;
    let y = if labeled == Some(true) { Some(labels) } else { None };
    let num_classes = y
        .as_ref()
        .map(|l| l.iter().max().map_or(1, |&m| m + 1))
        .unwrap_or(0);
    Ok(FeatureDataset {
        x,
        y,
        domain: Domain::Source,
        num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classdist::{empirical_distribution, kl_divergence};
    use crate::rng::rng_for;
    use rand::Rng as _;

    #[test]
    fn generated_source_is_exactly_balanced() {
        let spec = DomainPairSpec {
            n_source: 103,
            classes: 5,
            feature_dim: 8,
            ..Default::default()
        };
        let mut rng = rng_for(9, "gen", 0);
        let pair = generate_domain_pair(&spec, &mut rng).unwrap();
        let labels = pair.source.labels().unwrap();
        let mut counts = vec![0usize; 5];
        for &l in labels {
            counts[l] += 1;
        }
        assert_eq!(counts, vec![21, 21, 21, 20, 20]);
    }

    #[test]
    fn zero_shift_keeps_domains_identical_in_distribution() {
        let spec = DomainPairSpec {
            shift_rotation: 0.0,
            shift_translation: 0.0,
            n_source: 500,
            n_target_pool: 500,
            ..Default::default()
        };
        let mut rng = rng_for(10, "gen", 1);
        let pair = generate_domain_pair(&spec, &mut rng).unwrap();
        // Well separated classes: nearest-mean oracle scores high on both.
        let acc_s = nearest_mean_accuracy(&pair.source, &pair.class_means).unwrap();
        let acc_t = nearest_mean_accuracy(&pair.target_pool, &pair.class_means).unwrap();
        assert!(acc_s >= 0.95, "source accuracy {acc_s}");
        assert!(acc_t >= 0.95, "target accuracy {acc_t}");
    }

    #[test]
    fn pi_rotation_destroys_source_frame_accuracy() {
        let spec = DomainPairSpec {
            shift_rotation: std::f64::consts::PI,
            shift_translation: 0.0,
            n_source: 400,
            n_target_pool: 400,
            ..Default::default()
        };
        let mut rng = rng_for(11, "gen", 2);
        let pair = generate_domain_pair(&spec, &mut rng).unwrap();
        let acc = nearest_mean_accuracy(&pair.target_pool, &pair.class_means).unwrap();
        let chance = 1.0 / spec.classes as f64;
        assert!(acc < chance + 0.2, "rotated accuracy {acc}");
    }

    #[test]
    fn fixed_seed_reproduces_datasets_bit_for_bit() {
        let spec = DomainPairSpec::default();
        let mut r1 = rng_for(12, "gen", 3);
        let mut r2 = rng_for(12, "gen", 3);
        let a = generate_domain_pair(&spec, &mut r1).unwrap();
        let b = generate_domain_pair(&spec, &mut r2).unwrap();
        assert_eq!(a.source.x.data(), b.source.x.data());
        assert_eq!(a.target_pool.x.data(), b.target_pool.x.data());
        assert_eq!(a.source.y, b.source.y);
    }

    #[test]
    fn shift_is_invertible() {
        let mut rng = rng_for(13, "gen", 4);
        let mut x = Matrix::zeros(7, 6);
        for v in x.data_mut() {
            *v = rng.random_range(-3.0..3.0);
        }
        let original = x.clone();
        let theta = 0.83;
        let translation = vec![0.4, -1.0, 2.0, 0.1, -0.3, 0.9];
        apply_shift(&mut x, theta, &translation);
        // Invert: subtract translation, rotate back.
        for r in 0..x.rows() {
            for (v, &t) in x.row_mut(r).iter_mut().zip(&translation) {
                *v -= t;
            }
        }
        apply_shift(&mut x, -theta, &vec![0.0; 6]);
        assert!(x.max_abs_diff(&original) < 1e-12);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let mut rng = rng_for(14, "csv", 0);
        let mut x = Matrix::zeros(10, 4);
        for v in x.data_mut() {
            *v = rng.random_range(-5.0..5.0);
        }
        let ds = FeatureDataset {
            x,
            y: Some((0..10).map(|i| i % 3).collect()),
            domain: Domain::Source,
            num_classes: 4,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        save_feature_csv(&ds, &path).unwrap();
        let back = load_feature_csv(&path).unwrap();
        assert_eq!(back.x.data(), ds.x.data());
        assert_eq!(back.y.as_deref(), ds.y.as_deref());
    }

    #[test]
    fn unlabeled_roundtrip_keeps_labels_absent() {
        let ds = FeatureDataset {
            x: Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            y: None,
            domain: Domain::Target,
            num_classes: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.csv");
        save_feature_csv(&ds, &path).unwrap();
        let back = load_feature_csv(&path).unwrap();
        assert!(back.y.is_none());
        assert_eq!(back.x.data(), ds.x.data());
    }

    #[test]
    fn ragged_row_is_reported_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut text = String::from("label,f0,f1\n");
        for i in 0..20 {
            if i == 15 {
                text.push_str("1,0.5\n"); // line 17: missing a field
            } else {
                text.push_str("0,1.0,2.0\n");
            }
        }
        std::fs::write(&path, text).unwrap();
        match load_feature_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 17),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn label_distribution_survives_roundtrip() {
        let mut rng = rng_for(15, "csv", 1);
        let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..4usize)).collect();
        let ds = FeatureDataset {
            x: Matrix::zeros(200, 3),
            y: Some(labels.clone()),
            domain: Domain::Target,
            num_classes: 5,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        save_feature_csv(&ds, &path).unwrap();
        let back = load_feature_csv(&path).unwrap();
        let before = empirical_distribution(&labels, 5).unwrap();
        let after = empirical_distribution(back.y.as_ref().unwrap(), 5).unwrap();
        assert_eq!(kl_divergence(&before, &after).unwrap(), 0.0);
    }
}
