//! The LADA network: source/target encoders, a source classifier, a
//! generator conditioned on categorical latent codes, and the discriminator
//! and auxiliary heads that share the generator trunk.
//!
//! The generator consumes the concatenation `[E(x), c]` of an encoding and a
//! one-hot code; the discriminator and auxiliary head both read its last
//! hidden layer. The classifier reads encoder output directly and never sees
//! a code.
//!
//! # Checkpoint format
//!
//! A model checkpoint is a single little-endian binary file:
//!
//! ```text
//! magic      8  bytes  "LADACKPT"
//! version    u32       currently 1
//! dims       u32 x 4   feature_dim, encoding_dim, classes (K), g_out
//! nets       u32       network count, always 6, order: e_s, e_t,
//!                      classifier, generator, discriminator, auxiliary
//! per net:
//!   layers   u32
//!   per layer:
//!     act    u32       0 = relu, 1 = identity, 2 = softmax
//!     out    u32
//!     in     u32
//!     w      u64 length prefix, then length f64 values (row-major)
//!     b      u64 length prefix, then length f64 values
//! ```

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng as _;

use crate::classdist::ClassDistribution;
use crate::error::{Error, Result};
use crate::ndnum::matrix::Matrix;
use crate::ndnum::mlp::{Activation, Layer, Mlp};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LadaDims {
    pub feature_dim: usize,
    pub encoding_dim: usize,
    /// Known class count K; heads are sized K+1 for the open-set slot.
    pub classes: usize,
    /// Generator hidden widths; the last one is the shared trunk feeding the
    /// discriminator and auxiliary heads.
    pub g_hidden: Vec<usize>,
    /// Hidden widths of the discriminator and auxiliary heads (empty for a
    /// single affine layer).
    pub head_hidden: Vec<usize>,
}

impl Default for LadaDims {
    fn default() -> Self {
        LadaDims {
            feature_dim: 64,
            encoding_dim: 128,
            classes: 10,
            g_hidden: vec![256, 128, 64],
            head_hidden: vec![32],
        }
    }
}

impl LadaDims {
    pub fn head_classes(&self) -> usize {
        self.classes + 1
    }

    pub fn g_in(&self) -> usize {
        self.encoding_dim + self.head_classes()
    }

    pub fn g_out(&self) -> usize {
        *self.g_hidden.last().expect("generator needs hidden layers")
    }
}

#[derive(Debug, Clone)]
pub struct LadaModel {
    pub dims: LadaDims,
    pub e_s: Mlp,
    pub e_t: Mlp,
    pub classifier: Mlp,
    pub generator: Mlp,
    pub discriminator: Mlp,
    pub auxiliary: Mlp,
}

/// Which network a parameter-touching operation addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetId {
    SourceEncoder,
    TargetEncoder,
    Classifier,
    Generator,
    Discriminator,
    Auxiliary,
}

pub const NET_ORDER: [NetId; 6] = [
    NetId::SourceEncoder,
    NetId::TargetEncoder,
    NetId::Classifier,
    NetId::Generator,
    NetId::Discriminator,
    NetId::Auxiliary,
];

impl LadaModel {
    /// Initializes all six networks; the target encoder starts as a deep copy
    /// of the source encoder.
    pub fn init(dims: LadaDims, rng: &mut Rng) -> Result<Self> {
        if dims.classes < 1 || dims.feature_dim == 0 || dims.encoding_dim == 0 {
            return Err(Error::State("model dims must be positive".into()));
        }
        if dims.g_hidden.is_empty() {
            return Err(Error::State("generator needs at least one layer".into()));
        }
        let e_s = Mlp::new(
            &[(dims.feature_dim, dims.encoding_dim, Activation::Relu)],
            rng,
        )?;
        let e_t = e_s.clone();
        let classifier = Mlp::new(
            &[(dims.encoding_dim, dims.head_classes(), Activation::Softmax)],
            rng,
        )?;
        let mut g_dims = Vec::new();
        let mut in_dim = dims.g_in();
        for &h in &dims.g_hidden {
            g_dims.push((in_dim, h, Activation::Relu));
            in_dim = h;
        }
        let generator = Mlp::new(&g_dims, rng)?;
        let head = |out: usize, rng: &mut Rng| -> Result<Mlp> {
            let mut layers = Vec::new();
            let mut in_dim = dims.g_out();
            for &h in &dims.head_hidden {
                layers.push((in_dim, h, Activation::Relu));
                in_dim = h;
            }
            layers.push((in_dim, out, Activation::Softmax));
            Mlp::new(&layers, rng)
        };
        let discriminator = head(2, rng)?;
        let auxiliary = head(dims.head_classes(), rng)?;
        Ok(LadaModel {
            dims,
            e_s,
            e_t,
            classifier,
            generator,
            discriminator,
            auxiliary,
        })
    }

    /// Re-copies the trained source encoder into the target encoder (done at
    /// the start of adversarial training).
    pub fn reset_target_encoder(&mut self) {
        self.e_t = self.e_s.clone();
    }

    pub fn net(&self, id: NetId) -> &Mlp {
        match id {
            NetId::SourceEncoder => &self.e_s,
            NetId::TargetEncoder => &self.e_t,
            NetId::Classifier => &self.classifier,
            NetId::Generator => &self.generator,
            NetId::Discriminator => &self.discriminator,
            NetId::Auxiliary => &self.auxiliary,
        }
    }

    pub fn net_mut(&mut self, id: NetId) -> &mut Mlp {
        match id {
            NetId::SourceEncoder => &mut self.e_s,
            NetId::TargetEncoder => &mut self.e_t,
            NetId::Classifier => &mut self.classifier,
            NetId::Generator => &mut self.generator,
            NetId::Discriminator => &mut self.discriminator,
            NetId::Auxiliary => &mut self.auxiliary,
        }
    }

    /// Class probabilities `C(E_t(x))` for target instances; inference mode,
    /// no codes involved.
    pub fn classify_target(&self, x_t: &Matrix) -> Result<Matrix> {
        let enc = self.e_t.infer(x_t)?;
        self.classifier.infer(&enc)
    }

    /// Class probabilities from the auxiliary head on target input.
    pub fn q_predict_target(&self, x_t: &Matrix, codes: &LatentCodeBatch) -> Result<Matrix> {
        let enc = self.e_t.infer(x_t)?;
        Ok(self.adversarial_forward(&enc, codes)?.q_probs)
    }

    /// Inference pass through generator and both heads.
    pub fn adversarial_forward(
        &self,
        encoded: &Matrix,
        codes: &LatentCodeBatch,
    ) -> Result<AdvOutputs> {
        if encoded.cols() != self.dims.encoding_dim {
            return Err(Error::Shape {
                context: "adversarial_forward encoding",
                expected: format!("{} columns", self.dims.encoding_dim),
                actual: format!("{}", encoded.cols()),
            });
        }
        if codes.codes.rows() != encoded.rows() {
            return Err(Error::Shape {
                context: "adversarial_forward codes",
                expected: format!("{} rows", encoded.rows()),
                actual: format!("{}", codes.codes.rows()),
            });
        }
        let z = Matrix::concat_cols(encoded, &codes.codes);
        let g = self.generator.infer(&z)?;
        let d_probs = self.discriminator.infer(&g)?;
        let q_probs = self.auxiliary.infer(&g)?;
        Ok(AdvOutputs { g, d_probs, q_probs })
    }
}

pub struct AdvOutputs {
    pub g: Matrix,
    pub d_probs: Matrix,
    pub q_probs: Matrix,
}

/// How latent codes are drawn for a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodePolicyKind {
    /// All-zero codes: the network degenerates to a plain adversarial
    /// adaptation net.
    Zero,
    /// Uniform over the K+1 classes.
    Uniform,
    /// Drawn from the source class distribution.
    SourceDist,
    /// Drawn from a (re-)estimated target class distribution.
    Estimated,
    /// Deterministically the instance's own label (source batches).
    CoupledLabel,
}

/// A batch of one-hot latent codes (all-zero rows under the zero policy).
#[derive(Debug, Clone)]
pub struct LatentCodeBatch {
    pub codes: Matrix,
    /// Hot index per row; `None` for the zero policy.
    pub indices: Option<Vec<usize>>,
    pub policy: CodePolicyKind,
}

impl LatentCodeBatch {
    pub fn is_zero(&self) -> bool {
        self.policy == CodePolicyKind::Zero
    }
}

/// Samples `m` latent codes. `distribution` is required for `SourceDist` and
/// `Estimated`; `source_labels` (length `m`) is required for `CoupledLabel`.
pub fn sample_codes(
    kind: CodePolicyKind,
    m: usize,
    num_classes: usize,
    rng: &mut Rng,
    source_labels: Option<&[usize]>,
    distribution: Option<&ClassDistribution>,
) -> Result<LatentCodeBatch> {
    let indices: Option<Vec<usize>> = match kind {
        CodePolicyKind::Zero => None,
        CodePolicyKind::Uniform => {
            Some((0..m).map(|_| rng.random_range(0..num_classes)).collect())
        }
        CodePolicyKind::SourceDist | CodePolicyKind::Estimated => {
            let dist = distribution.ok_or(Error::Policy {
                policy: if kind == CodePolicyKind::SourceDist {
                    "source-dist"
                } else {
                    "estimated"
                },
                missing: "distribution",
            })?;
            if dist.len() != num_classes {
                return Err(Error::Shape {
                    context: "sample_codes distribution",
                    expected: format!("{num_classes} classes"),
                    actual: format!("{}", dist.len()),
                });
            }
            Some((0..m).map(|_| sample_categorical(dist, rng)).collect())
        }
        CodePolicyKind::CoupledLabel => {
            let labels = source_labels.ok_or(Error::Policy {
                policy: "coupled-label",
                missing: "source_labels",
            })?;
            if labels.len() != m {
                return Err(Error::Shape {
                    context: "sample_codes labels",
                    expected: format!("{m} labels"),
                    actual: format!("{}", labels.len()),
                });
            }
            Some(labels.to_vec())
        }
    };
    let mut codes = Matrix::zeros(m, num_classes);
    if let Some(idx) = &indices {
        for (r, &k) in idx.iter().enumerate() {
            if k >= num_classes {
                return Err(Error::Bounds {
                    context: "sample_codes index",
                    index: k,
                    size: num_classes,
                });
            }
            codes.set(r, k, 1.0);
        }
    }
    Ok(LatentCodeBatch {
        codes,
        indices,
        policy: kind,
    })
}

fn sample_categorical(dist: &ClassDistribution, rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in dist.probs().iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    dist.len() - 1
}

/// Elementwise mean of the classifier and auxiliary predictions.
pub fn fuse_predictions(p_c: &Matrix, p_q: &Matrix) -> Result<Matrix> {
    if (p_c.rows(), p_c.cols()) != (p_q.rows(), p_q.cols()) {
        return Err(Error::Shape {
            context: "fuse_predictions",
            expected: format!("{}x{}", p_c.rows(), p_c.cols()),
            actual: format!("{}x{}", p_q.rows(), p_q.cols()),
        });
    }
    let mut out = p_c.clone();
    for (o, &q) in out.data_mut().iter_mut().zip(p_q.data()) {
        *o = 0.5 * (*o + q);
    }
    Ok(out)
}

pub fn argmax_rows(probs: &Matrix) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

const CKPT_MAGIC: &[u8; 8] = b"LADACKPT";
const CKPT_VERSION: u32 = 1;

fn act_tag(a: Activation) -> u32 {
    match a {
        Activation::Relu => 0,
        Activation::Identity => 1,
        Activation::Softmax => 2,
    }
}

fn act_from_tag(t: u32) -> Result<Activation> {
    match t {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Identity),
        2 => Ok(Activation::Softmax),
        other => Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
    }
}

pub fn save_model(model: &LadaModel, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for v in [
        model.dims.feature_dim,
        model.dims.encoding_dim,
        model.dims.classes,
        model.dims.g_out(),
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(NET_ORDER.len() as u32).to_le_bytes());
    for id in NET_ORDER {
        let net = model.net(id);
        buf.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
        for layer in net.layers() {
            buf.extend_from_slice(&act_tag(layer.activation).to_le_bytes());
            buf.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
            buf.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
            write_f64_array(&mut buf, layer.w.data());
            write_f64_array(&mut buf, &layer.b);
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

fn write_f64_array(buf: &mut Vec<u8>, values: &[f64]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn load_model(path: &Path) -> Result<LadaModel> {
    let mut file = fs::File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };

    let magic = cur.take(8)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let feature_dim = cur.u32()? as usize;
    let encoding_dim = cur.u32()? as usize;
    let classes = cur.u32()? as usize;
    let g_out = cur.u32()? as usize;
    let nets = cur.u32()?;
    if nets as usize != NET_ORDER.len() {
        return Err(Error::Checkpoint(format!("expected 6 nets, found {nets}")));
    }
    let mut loaded: Vec<Mlp> = Vec::with_capacity(6);
    for _ in 0..nets {
        let n_layers = cur.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let activation = act_from_tag(cur.u32()?)?;
            let out_dim = cur.u32()? as usize;
            let in_dim = cur.u32()? as usize;
            let w = cur.f64_array()?;
            let b = cur.f64_array()?;
            if w.len() != out_dim * in_dim || b.len() != out_dim {
                return Err(Error::Checkpoint("array length mismatch".into()));
            }
            layers.push(Layer {
                w: Matrix::from_vec(out_dim, in_dim, w)?,
                b,
                activation,
            });
        }
        if layers.is_empty() {
            return Err(Error::Checkpoint("network with no layers".into()));
        }
        loaded.push(Mlp::from_layers(layers));
    }
    let mut it = loaded.into_iter();
    let (e_s, e_t, classifier, generator, discriminator, auxiliary) = (
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    );
    let g_hidden: Vec<usize> = generator.layers().iter().map(|l| l.out_dim()).collect();
    let n_head = discriminator.layers().len();
    let head_hidden: Vec<usize> = discriminator.layers()[..n_head - 1]
        .iter()
        .map(|l| l.out_dim())
        .collect();
    let dims = LadaDims {
        feature_dim,
        encoding_dim,
        classes,
        g_hidden,
        head_hidden,
    };
    if dims.g_out() != g_out {
        return Err(Error::Checkpoint("generator trunk width mismatch".into()));
    }
    Ok(LadaModel {
        dims,
        e_s,
        e_t,
        classifier,
        generator,
        discriminator,
        auxiliary,
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64_array(&mut self) -> Result<Vec<f64>> {
        let len = self.u64()? as usize;
        let bytes = self.take(len * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn tiny_dims() -> LadaDims {
        LadaDims {
            feature_dim: 6,
            encoding_dim: 8,
            classes: 3,
            g_hidden: vec![10, 7],
            head_hidden: vec![5],
        }
    }

    fn random_batch(rows: usize, cols: usize, rng: &mut crate::rng::Rng) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = rng.random_range(-1.5..1.5);
        }
        m
    }

    #[test]
    fn encoders_start_identical() {
        let mut rng = rng_for(20, "net", 0);
        let model = LadaModel::init(tiny_dims(), &mut rng).unwrap();
        let x = random_batch(4, 6, &mut rng);
        let a = model.e_s.infer(&x).unwrap();
        let b = model.e_t.infer(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn updating_target_encoder_leaves_source_untouched() {
        let mut rng = rng_for(20, "net", 1);
        let mut model = LadaModel::init(tiny_dims(), &mut rng).unwrap();
        let before = model.e_s.params_flat();
        let mut p = model.e_t.params_flat();
        for v in &mut p {
            *v += 1.0;
        }
        model.e_t.set_params_flat(&p);
        assert_eq!(model.e_s.params_flat(), before);
        assert_ne!(model.e_t.params_flat(), before);
    }

    #[test]
    fn classifier_rows_sum_to_one() {
        let mut rng = rng_for(21, "net", 0);
        let model = LadaModel::init(tiny_dims(), &mut rng).unwrap();
        let x = random_batch(5, 6, &mut rng);
        let p = model.classify_target(&x).unwrap();
        for r in 0..p.rows() {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn default_generator_trunk_is_64_wide() {
        let dims = LadaDims::default();
        assert_eq!(dims.g_out(), 64);
        assert_eq!(dims.g_hidden, vec![256, 128, 64]);
    }

    #[test]
    fn coupled_codes_are_the_labels() {
        let mut rng = rng_for(22, "net", 0);
        let batch =
            sample_codes(CodePolicyKind::CoupledLabel, 2, 4, &mut rng, Some(&[2, 0]), None)
                .unwrap();
        assert_eq!(batch.codes.row(0), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(batch.codes.row(1), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(batch.indices.as_deref(), Some(&[2usize, 0][..]));
    }

    #[test]
    fn zero_codes_are_all_zero() {
        let mut rng = rng_for(22, "net", 1);
        let batch = sample_codes(CodePolicyKind::Zero, 3, 4, &mut rng, None, None).unwrap();
        assert!(batch.codes.data().iter().all(|&v| v == 0.0));
        assert!(batch.indices.is_none());
        assert!(batch.is_zero());
    }

    #[test]
    fn uniform_codes_have_uniform_frequencies() {
        let mut rng = rng_for(22, "net", 2);
        let m = 10_000;
        let batch = sample_codes(CodePolicyKind::Uniform, m, 5, &mut rng, None, None).unwrap();
        let mut counts = [0usize; 5];
        for &i in batch.indices.as_ref().unwrap() {
            counts[i] += 1;
        }
        for &c in &counts {
            let f = c as f64 / m as f64;
            assert!((f - 0.2).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn missing_policy_arguments_error() {
        let mut rng = rng_for(22, "net", 3);
        assert!(matches!(
            sample_codes(CodePolicyKind::CoupledLabel, 2, 4, &mut rng, None, None),
            Err(Error::Policy { .. })
        ));
        assert!(matches!(
            sample_codes(CodePolicyKind::Estimated, 2, 4, &mut rng, None, None),
            Err(Error::Policy { .. })
        ));
    }

    #[test]
    fn adversarial_forward_heads_are_row_stochastic() {
        let mut rng = rng_for(23, "net", 0);
        let model = LadaModel::init(tiny_dims(), &mut rng).unwrap();
        let enc = random_batch(6, 8, &mut rng);
        let codes = sample_codes(CodePolicyKind::Uniform, 6, 4, &mut rng, None, None).unwrap();
        let out = model.adversarial_forward(&enc, &codes).unwrap();
        for r in 0..6 {
            let ds: f64 = out.d_probs.row(r).iter().sum();
            let qs: f64 = out.q_probs.row(r).iter().sum();
            assert!((ds - 1.0).abs() < 1e-9);
            assert!((qs - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn permuting_rows_permutes_outputs() {
        let mut rng = rng_for(23, "net", 1);
        let model = LadaModel::init(tiny_dims(), &mut rng).unwrap();
        let enc = random_batch(4, 8, &mut rng);
        let codes = sample_codes(CodePolicyKind::Uniform, 4, 4, &mut rng, None, None).unwrap();
        let out = model.adversarial_forward(&enc, &codes).unwrap();

        let perm = [2usize, 0, 3, 1];
        let enc_p = enc.select_rows(&perm);
        let codes_p = LatentCodeBatch {
            codes: codes.codes.select_rows(&perm),
            indices: codes
                .indices
                .as_ref()
                .map(|v| perm.iter().map(|&i| v[i]).collect()),
            policy: codes.policy,
        };
        let out_p = model.adversarial_forward(&enc_p, &codes_p).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            assert_eq!(out_p.d_probs.row(r), out.d_probs.row(src));
            assert_eq!(out_p.q_probs.row(r), out.q_probs.row(src));
        }
    }

    #[test]
    fn zero_codes_match_reduced_code_free_network() {
        // Oracle: drop the code columns of the generator's first layer and
        // feed raw encodings; with all-zero codes the outputs must match.
        let mut rng = rng_for(23, "net", 2);
        let model = LadaModel::init(tiny_dims(), &mut rng).unwrap();
        let enc = random_batch(5, 8, &mut rng);
        let codes = sample_codes(CodePolicyKind::Zero, 5, 4, &mut rng, None, None).unwrap();
        let out = model.adversarial_forward(&enc, &codes).unwrap();

        let mut reduced_layers = Vec::new();
        for (li, layer) in model.generator.layers().iter().enumerate() {
            let w = if li == 0 {
                layer.w.slice_cols(0, 8)
            } else {
                layer.w.clone()
            };
            reduced_layers.push(Layer {
                w,
                b: layer.b.clone(),
                activation: layer.activation,
            });
        }
        let reduced = Mlp::from_layers(reduced_layers);
        let g = reduced.infer(&enc).unwrap();
        assert!(out.g.max_abs_diff(&g) == 0.0);
    }

    #[test]
    fn fuse_is_the_elementwise_mean() {
        let a = Matrix::from_rows(&[vec![0.8, 0.2]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.6, 0.4]]).unwrap();
        let f = fuse_predictions(&a, &b).unwrap();
        assert!((f.get(0, 0) - 0.7).abs() < 1e-12);
        assert!((f.get(0, 1) - 0.3).abs() < 1e-12);
        let same = fuse_predictions(&a, &a).unwrap();
        assert_eq!(same.data(), a.data());
        assert!(fuse_predictions(&a, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = rng_for(24, "net", 0);
        let model = LadaModel::init(tiny_dims(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.dims, model.dims);
        for id in NET_ORDER {
            assert_eq!(back.net(id).params_flat(), model.net(id).params_flat());
        }
        let x = random_batch(3, 6, &mut rng);
        assert_eq!(
            back.classify_target(&x).unwrap().data(),
            model.classify_target(&x).unwrap().data()
        );
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut rng = rng_for(24, "net", 1);
        let model = LadaModel::init(tiny_dims(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_model(&path).is_err());
    }
}
