//! Two-stage and three-player training.
//!
//! Stage 1 fits the source encoder and classifier supervised. Stage 2 loops
//! three steps per iteration: the discriminator step (domain classification
//! loss on generator output over both domains), the target-encoder step
//! (non-saturating flip of the domain loss), and the auxiliary step (code
//! reconstruction likelihood over both domains plus the relaxed entropy of
//! the estimated target class marginal). The three-player regime additionally
//! interleaves a supervised step and lets the auxiliary gradient reach the
//! source encoder.
//!
//! Latent codes are sampled inputs, not parameters: they receive no gradient.

use rand::seq::index::sample as index_sample;

use crate::classdist::{
    empirical_distribution, kl_divergence, relaxed_entropy, ClassDistribution,
    RelaxedAssignment,
};
use crate::datasets::FeatureDataset;
use crate::error::{Error, Result};
use crate::ndnum::loss::softmax_cross_entropy;
use crate::ndnum::matrix::Matrix;
use crate::ndnum::mlp::{ActivationStack, DropoutMask, Gradients, Mlp};
use crate::ndnum::optim::{OptimizerKind, OptimizerState};
use crate::net::{
    argmax_rows, fuse_predictions, sample_codes, CodePolicyKind, LadaModel, LatentCodeBatch,
};
use crate::rng::Rng;

/// Latent-code variant: zero codes (plain adversarial baseline), uniform
/// prior, source class prior, or continuously re-estimated target prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LadaVariant {
    Zero,
    Uniform,
    SourceDist,
    Estimated,
}

impl LadaVariant {
    pub fn short(&self) -> &'static str {
        match self {
            LadaVariant::Zero => "0",
            LadaVariant::Uniform => "u",
            LadaVariant::SourceDist => "s",
            LadaVariant::Estimated => "t",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRegime {
    TwoStage,
    ThreePlayer,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub variant: LadaVariant,
    pub regime: TrainRegime,
    pub batch_source: usize,
    pub batch_target: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub dropout_p: f64,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    /// Iterations on uniform codes before the estimated-distribution variant
    /// switches to its own estimate.
    pub warmup_iters: usize,
    /// Refresh cadence of the target-distribution estimate after warmup.
    pub reestimate_every: usize,
    /// Cadence of accuracy / divergence measurements in the trace.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let stage2_iters = 1500;
        TrainConfig {
            variant: LadaVariant::Estimated,
            regime: TrainRegime::ThreePlayer,
            batch_source: 32,
            batch_target: 32,
            learning_rate: 0.001,
            optimizer: OptimizerKind::Adam,
            dropout_p: 0.5,
            stage1_iters: 800,
            stage2_iters,
            warmup_iters: stage2_iters * 3 / 10,
            reestimate_every: 200,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_source == 0 || self.batch_target == 0 {
            return Err(Error::config("train.batch", "batch sizes must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("train.dropout", "dropout must be in [0,1)"));
        }
        if self.warmup_iters > self.stage2_iters {
            return Err(Error::config(
                "train.warmup_iters",
                "warmup cannot exceed stage2_iters",
            ));
        }
        if self.eval_every == 0 || self.reestimate_every == 0 {
            return Err(Error::config("train.eval_every", "cadences must be >= 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// One trace row; losses are recorded every iteration, measurements at the
/// eval cadence (absent otherwise).
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct TraceRow {
    pub stage: u8,
    pub iter: usize,
    pub l_cls: Option<f64>,
    pub l_adv_d: Option<f64>,
    pub l_adv_e: Option<f64>,
    pub l_q: Option<f64>,
    pub mean_d_source: Option<f64>,
    pub mean_d_target: Option<f64>,
    pub source_acc: Option<f64>,
    pub target_acc: Option<f64>,
    pub h_p: Option<f64>,
    /// KL(estimate || true target marginal), floored reference.
    pub kl_est_true: Option<f64>,
    /// KL(estimate || source marginal), floored reference.
    pub kl_est_source: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

pub const TRACE_CSV_HEADER: &str = "stage,iter,l_cls,l_adv_d,l_adv_e,l_q,mean_d_source,\
mean_d_target,source_acc,target_acc,h_p,kl_est_true,kl_est_source";

impl TrainTrace {
    pub fn extend(&mut self, other: TrainTrace) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        let cell = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.stage,
                r.iter,
                cell(&r.l_cls),
                cell(&r.l_adv_d),
                cell(&r.l_adv_e),
                cell(&r.l_q),
                cell(&r.mean_d_source),
                cell(&r.mean_d_target),
                cell(&r.source_acc),
                cell(&r.target_acc),
                cell(&r.h_p),
                cell(&r.kl_est_true),
                cell(&r.kl_est_source),
            ));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| {
            [
                r.l_cls,
                r.l_adv_d,
                r.l_adv_e,
                r.l_q,
                r.mean_d_source,
                r.mean_d_target,
                r.source_acc,
                r.target_acc,
                r.h_p,
                r.kl_est_true,
                r.kl_est_source,
            ]
            .iter()
            .all(|v| v.map_or(true, f64::is_finite))
        })
    }
}

/// Divergence traces against empirical references are floored at this mass
/// so they stay finite when classes are absent from the target subset.
pub const KL_TRACE_FLOOR: f64 = 1e-6;

/// Optimizer states, one per network.
pub struct Optimizers {
    pub e_s: OptimizerState,
    pub e_t: OptimizerState,
    pub classifier: OptimizerState,
    pub generator: OptimizerState,
    pub discriminator: OptimizerState,
    pub auxiliary: OptimizerState,
}

impl Optimizers {
    pub fn new(model: &LadaModel, kind: OptimizerKind, lr: f64) -> Self {
        Optimizers {
            e_s: OptimizerState::for_mlp(kind, lr, &model.e_s),
            e_t: OptimizerState::for_mlp(kind, lr, &model.e_t),
            classifier: OptimizerState::for_mlp(kind, lr, &model.classifier),
            generator: OptimizerState::for_mlp(kind, lr, &model.generator),
            discriminator: OptimizerState::for_mlp(kind, lr, &model.discriminator),
            auxiliary: OptimizerState::for_mlp(kind, lr, &model.auxiliary),
        }
    }
}

/// Encoder forward plus output dropout; single struct so gradients can be
/// pushed back through the same mask.
struct EncodedBatch {
    stack: ActivationStack,
    mask: Option<DropoutMask>,
    dropped: Matrix,
}

fn encode(
    encoder: &Mlp,
    x: &Matrix,
    dropout_p: f64,
    rng: &mut Rng,
    train_mode: bool,
) -> Result<EncodedBatch> {
    let stack = encoder.forward(x, dropout_p, rng, train_mode)?;
    let out = stack.output().clone();
    let (mask, dropped) = if train_mode && dropout_p > 0.0 {
        let m = DropoutMask::sample(out.rows(), out.cols(), dropout_p, rng);
        let dropped = m.apply(&out);
        (Some(m), dropped)
    } else {
        (None, out)
    };
    Ok(EncodedBatch {
        stack,
        mask,
        dropped,
    })
}

fn back_through_encoder(
    encoder: &Mlp,
    enc: &EncodedBatch,
    grad_encoding: &Matrix,
) -> Result<Gradients> {
    let grad = match &enc.mask {
        Some(m) => m.apply(grad_encoding),
        None => grad_encoding.clone(),
    };
    let (grads, _) = encoder.backward(&enc.stack, &grad)?;
    Ok(grads)
}

fn code_dropout_enabled() -> bool {
    std::env::var("LADA_CODE_DROPOUT").map(|v| v == "1").unwrap_or(false)
}

/// One adversarial branch: encoder forward, generator-input dropout over the
/// concatenated `[encoding, code]`, generator forward.
struct AdvBranch {
    enc_stack: ActivationStack,
    z_mask: Option<DropoutMask>,
    g_stack: ActivationStack,
}

fn forward_branch(
    encoder: &Mlp,
    generator: &Mlp,
    x: &Matrix,
    codes: &LatentCodeBatch,
    dropout_p: f64,
    rng: &mut Rng,
    train_mode: bool,
) -> Result<AdvBranch> {
    let enc_stack = encoder.forward(x, dropout_p, rng, train_mode)?;
    let z = Matrix::concat_cols(enc_stack.output(), &codes.codes);
    let (z_mask, z_in) = if train_mode && dropout_p > 0.0 {
        let mut m = DropoutMask::sample(z.rows(), z.cols(), dropout_p, rng);
        if !code_dropout_enabled() {
            let e = enc_stack.output().cols();
            for r in 0..z.rows() {
                for c in e..z.cols() {
                    m.set_keep(r, c);
                }
            }
        }
        let z_in = m.apply(&z);
        (Some(m), z_in)
    } else {
        (None, z)
    };
    let g_stack = generator.forward(&z_in, dropout_p, rng, train_mode)?;
    Ok(AdvBranch {
        enc_stack,
        z_mask,
        g_stack,
    })
}

/// Pushes a gradient at the generator input back into encoder parameter
/// space (through the input mask and the encoding slice).
fn branch_encoder_grads(
    encoder: &Mlp,
    branch: &AdvBranch,
    grad_z: &Matrix,
    encoding_dim: usize,
) -> Result<Gradients> {
    let grad_z = match &branch.z_mask {
        Some(m) => m.apply(grad_z),
        None => grad_z.clone(),
    };
    let grad_encoding = grad_z.slice_cols(0, encoding_dim);
    let (grads, _) = encoder.backward(&branch.enc_stack, &grad_encoding)?;
    Ok(grads)
}

const D_SOURCE_CLASS: usize = 1;
const D_TARGET_CLASS: usize = 0;

pub struct DiscriminatorStep {
    pub loss: f64,
    pub mean_d_source: f64,
    pub mean_d_target: f64,
    pub d_grads: Gradients,
}

/// Domain-classification loss and its gradient for the discriminator head:
/// source instances labeled 1, target instances labeled 0, each domain term
/// normalized by its own batch size.
pub fn discriminator_loss_grads(
    model: &LadaModel,
    src_x: &Matrix,
    src_codes: &LatentCodeBatch,
    tgt_x: &Matrix,
    tgt_codes: &LatentCodeBatch,
    dropout_p: f64,
    rng: &mut Rng,
    train_mode: bool,
) -> Result<DiscriminatorStep> {
    let mut total = Gradients::zeros_like(&model.discriminator);
    let mut loss = 0.0;
    let mut means = [0.0; 2];
    for (slot, (x, codes, encoder, class)) in [
        (src_x, src_codes, &model.e_s, D_SOURCE_CLASS),
        (tgt_x, tgt_codes, &model.e_t, D_TARGET_CLASS),
    ]
    .into_iter()
    .enumerate()
    {
        let branch = forward_branch(
            encoder,
            &model.generator,
            x,
            codes,
            dropout_p,
            rng,
            train_mode,
        )?;
        let d = model
            .discriminator
            .forward(branch.g_stack.output(), 0.0, rng, false)?;
        let logits = d.pre.last().expect("head has a layer");
        let targets = vec![class; x.rows()];
        let ce = softmax_cross_entropy(logits, &targets)?;
        let (grads, _) = model.discriminator.backward(&d, &ce.grad_logits)?;
        total.add_assign(&grads);
        loss += ce.loss;
        // Mean probability assigned to the source class.
        means[slot] = (0..x.rows())
            .map(|r| ce.probs.get(r, D_SOURCE_CLASS))
            .sum::<f64>()
            / x.rows() as f64;
    }
    Ok(DiscriminatorStep {
        loss,
        mean_d_source: means[0],
        mean_d_target: means[1],
        d_grads: total,
    })
}

/// Runs the discriminator step: computes the loss and updates only the
/// discriminator head.
pub fn adv_step_d(
    model: &mut LadaModel,
    opts: &mut Optimizers,
    src_x: &Matrix,
    src_codes: &LatentCodeBatch,
    tgt_x: &Matrix,
    tgt_codes: &LatentCodeBatch,
    dropout_p: f64,
    rng: &mut Rng,
) -> Result<DiscriminatorStep> {
    let step = discriminator_loss_grads(
        model, src_x, src_codes, tgt_x, tgt_codes, dropout_p, rng, true,
    )?;
    opts.discriminator
        .step_mlp(&mut model.discriminator, &step.d_grads);
    Ok(step)
}

pub struct EncoderStep {
    pub loss: f64,
    pub e_t_grads: Gradients,
}

/// Non-saturating target-encoder loss: `-mean log D_source(G([E_t(x), c]))`,
/// differentiated with respect to the target encoder only.
pub fn encoder_loss_grads(
    model: &LadaModel,
    tgt_x: &Matrix,
    tgt_codes: &LatentCodeBatch,
    dropout_p: f64,
    rng: &mut Rng,
    train_mode: bool,
) -> Result<EncoderStep> {
    let branch = forward_branch(
        &model.e_t,
        &model.generator,
        tgt_x,
        tgt_codes,
        dropout_p,
        rng,
        train_mode,
    )?;
    let d = model
        .discriminator
        .forward(branch.g_stack.output(), 0.0, rng, false)?;
    let logits = d.pre.last().expect("head has a layer");
    let targets = vec![D_SOURCE_CLASS; tgt_x.rows()];
    let ce = softmax_cross_entropy(logits, &targets)?;
    let (_, grad_g_out) = model.discriminator.backward(&d, &ce.grad_logits)?;
    let (_, grad_z) = model.generator.backward(&branch.g_stack, &grad_g_out)?;
    let e_t_grads = branch_encoder_grads(&model.e_t, &branch, &grad_z, model.dims.encoding_dim)?;
    Ok(EncoderStep {
        loss: ce.loss,
        e_t_grads,
    })
}

/// Runs the target-encoder step; only `E_t` moves.
pub fn adv_step_e(
    model: &mut LadaModel,
    opts: &mut Optimizers,
    tgt_x: &Matrix,
    tgt_codes: &LatentCodeBatch,
    dropout_p: f64,
    rng: &mut Rng,
) -> Result<EncoderStep> {
    let step = encoder_loss_grads(model, tgt_x, tgt_codes, dropout_p, rng, true)?;
    opts.e_t.step_mlp(&mut model.e_t, &step.e_t_grads);
    Ok(step)
}

pub struct AuxiliaryStep {
    pub loss: f64,
    pub h_p: f64,
    pub q_grads: Gradients,
    /// Present in the three-player regime.
    pub g_grads: Option<Gradients>,
    pub e_s_grads: Option<Gradients>,
    /// The relaxed assignment built from the fused predictions of the target
    /// batch (its marginal is the batch-level class estimate).
    pub assignment: RelaxedAssignment,
}

/// Code-reconstruction loss over both domains plus the relaxed entropy of the
/// fused target class estimate.
///
/// The relaxed assignment takes the fused classifier/auxiliary probabilities
/// of the target batch as its row distributions (`theta = ln fused`); the
/// entropy gradient flows back through the auxiliary head only — the
/// classifier path is treated as constant. In the three-player regime the
/// gradients continue into the generator trunk and the source encoder.
pub fn auxiliary_loss_grads(
    model: &LadaModel,
    src_x: &Matrix,
    src_codes: &LatentCodeBatch,
    tgt_x: &Matrix,
    tgt_codes: &LatentCodeBatch,
    regime: TrainRegime,
    dropout_p: f64,
    rng: &mut Rng,
    train_mode: bool,
) -> Result<AuxiliaryStep> {
    let src_idx = src_codes.indices.as_ref().ok_or_else(|| {
        Error::Contract("auxiliary step needs one-hot source codes".into())
    })?;
    let tgt_idx = tgt_codes.indices.as_ref().ok_or_else(|| {
        Error::Contract("auxiliary step needs one-hot target codes".into())
    })?;

    // Source branch.
    let b_s = forward_branch(
        &model.e_s,
        &model.generator,
        src_x,
        src_codes,
        dropout_p,
        rng,
        train_mode,
    )?;
    let q_s = model.auxiliary.forward(b_s.g_stack.output(), 0.0, rng, false)?;
    let ce_s = softmax_cross_entropy(q_s.pre.last().unwrap(), src_idx)?;

    // Target branch.
    let b_t = forward_branch(
        &model.e_t,
        &model.generator,
        tgt_x,
        tgt_codes,
        dropout_p,
        rng,
        train_mode,
    )?;
    let q_t = model.auxiliary.forward(b_t.g_stack.output(), 0.0, rng, false)?;
    let ce_t = softmax_cross_entropy(q_t.pre.last().unwrap(), tgt_idx)?;

    // Relaxed entropy of the fused class estimate for this target batch.
    let p_c = model.classifier.infer(b_t.enc_stack.output())?;
    let p_q = &ce_t.probs;
    let fused = fuse_predictions(&p_c, p_q)?;
    let assignment = RelaxedAssignment::from_probs(&fused)?;
    let re = relaxed_entropy(&assignment)?;

    // Chain dH/dtheta into auxiliary logit space: theta = ln fused,
    // fused = (p_c + softmax(q_logits)) / 2 with p_c constant.
    let n = tgt_x.rows();
    let k = fused.cols();
    let mut h_grad_q_logits = Matrix::zeros(n, k);
    for i in 0..n {
        let mut dh_dpq = vec![0.0; k];
        for j in 0..k {
            let f = fused.get(i, j).max(1e-300);
            dh_dpq[j] = 0.5 * re.grad_theta.get(i, j) / f;
        }
        let q_row = p_q.row(i);
        let weighted: f64 = (0..k).map(|j| dh_dpq[j] * q_row[j]).sum();
        for j in 0..k {
            h_grad_q_logits.set(i, j, q_row[j] * (dh_dpq[j] - weighted));
        }
    }

    let hp_sign: f64 = std::env::var("LADA_HP_SIGN")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1.0);
    let mut tgt_grad_logits = ce_t.grad_logits.clone();
    h_grad_q_logits.scale(hp_sign);
    tgt_grad_logits.add_assign(&h_grad_q_logits);

    let (q_grads_src, grad_gs_out) = model.auxiliary.backward(&q_s, &ce_s.grad_logits)?;
    let (q_grads_tgt, grad_gt_out) = model.auxiliary.backward(&q_t, &tgt_grad_logits)?;
    let mut q_grads = q_grads_src;
    q_grads.add_assign(&q_grads_tgt);

    let loss = ce_s.loss + ce_t.loss + hp_sign * re.h_bits;

    let (g_grads, e_s_grads) = match regime {
        TrainRegime::TwoStage => (None, None),
        TrainRegime::ThreePlayer => {
            let (g_grads_src, grad_zs) = model.generator.backward(&b_s.g_stack, &grad_gs_out)?;
            let (g_grads_tgt, _grad_zt) = model.generator.backward(&b_t.g_stack, &grad_gt_out)?;
            let mut g_grads = g_grads_src;
            g_grads.add_assign(&g_grads_tgt);
            let e_s_grads =
                branch_encoder_grads(&model.e_s, &b_s, &grad_zs, model.dims.encoding_dim)?;
            (Some(g_grads), Some(e_s_grads))
        }
    };

    Ok(AuxiliaryStep {
        loss,
        h_p: re.h_bits,
        q_grads,
        g_grads,
        e_s_grads,
        assignment,
    })
}

/// Runs the auxiliary step: always updates the auxiliary head; in the
/// three-player regime also the generator trunk and the source encoder.
pub fn q_step(
    model: &mut LadaModel,
    opts: &mut Optimizers,
    src_x: &Matrix,
    src_codes: &LatentCodeBatch,
    tgt_x: &Matrix,
    tgt_codes: &LatentCodeBatch,
    regime: TrainRegime,
    dropout_p: f64,
    rng: &mut Rng,
) -> Result<AuxiliaryStep> {
    let step = auxiliary_loss_grads(
        model, src_x, src_codes, tgt_x, tgt_codes, regime, dropout_p, rng, true,
    )?;
    opts.auxiliary.step_mlp(&mut model.auxiliary, &step.q_grads);
    if let Some(g) = &step.g_grads {
        opts.generator.step_mlp(&mut model.generator, g);
    }
    if let Some(e) = &step.e_s_grads {
        opts.e_s.step_mlp(&mut model.e_s, e);
    }
    Ok(step)
}

pub struct ClassifierStep {
    pub loss: f64,
    pub c_grads: Gradients,
    pub e_s_grads: Gradients,
}

/// Supervised classification loss over a labeled source batch, gradients for
/// the classifier and the source encoder.
pub fn classifier_loss_grads(
    model: &LadaModel,
    src_x: &Matrix,
    labels: &[usize],
    dropout_p: f64,
    rng: &mut Rng,
    train_mode: bool,
) -> Result<ClassifierStep> {
    let enc = encode(&model.e_s, src_x, dropout_p, rng, train_mode)?;
    let c = model.classifier.forward(&enc.dropped, 0.0, rng, false)?;
    let ce = softmax_cross_entropy(c.pre.last().unwrap(), labels)?;
    let (c_grads, grad_enc) = model.classifier.backward(&c, &ce.grad_logits)?;
    let e_s_grads = back_through_encoder(&model.e_s, &enc, &grad_enc)?;
    Ok(ClassifierStep {
        loss: ce.loss,
        c_grads,
        e_s_grads,
    })
}

fn cls_step(
    model: &mut LadaModel,
    opts: &mut Optimizers,
    src_x: &Matrix,
    labels: &[usize],
    dropout_p: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let step = classifier_loss_grads(model, src_x, labels, dropout_p, rng, true)?;
    opts.classifier
        .step_mlp(&mut model.classifier, &step.c_grads);
    opts.e_s.step_mlp(&mut model.e_s, &step.e_s_grads);
    Ok(step.loss)
}

fn sample_batch(n: usize, m: usize, rng: &mut Rng) -> Vec<usize> {
    let m = m.min(n);
    index_sample(rng, n, m).into_iter().collect()
}

pub fn accuracy(probs: &Matrix, labels: &[usize]) -> f64 {
    let pred = argmax_rows(probs);
    let correct = pred
        .iter()
        .zip(labels)
        .filter(|(&p, &t)| p == t)
        .count();
    correct as f64 / labels.len() as f64
}

/// Stage 1: supervised training of the source encoder and classifier; the
/// target encoder is re-initialized from the trained source encoder at the
/// end.
pub fn train_stage1(
    model: &mut LadaModel,
    source: &FeatureDataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let labels = source
        .y
        .as_deref()
        .ok_or_else(|| Error::Contract("stage 1 requires a labeled source".into()))?;
    let mut opts = Optimizers::new(model, cfg.optimizer, cfg.learning_rate);
    let mut trace = TrainTrace::default();
    for it in 0..cfg.stage1_iters {
        let idx = sample_batch(source.len(), cfg.batch_source, rng);
        let x = source.x.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let loss = cls_step(model, &mut opts, &x, &y, cfg.dropout_p, rng)?;
        let mut row = TraceRow {
            stage: 1,
            iter: it,
            l_cls: Some(loss),
            ..Default::default()
        };
        if (it + 1) % cfg.eval_every == 0 || it + 1 == cfg.stage1_iters {
            let probs = source_predictions(model, &source.x)?;
            row.source_acc = Some(accuracy(&probs, labels));
        }
        trace.rows.push(row);
    }
    model.reset_target_encoder();
    Ok(trace)
}

fn source_predictions(model: &LadaModel, x: &Matrix) -> Result<Matrix> {
    let enc = model.e_s.infer(x)?;
    model.classifier.infer(&enc)
}

/// Distribution the target codes are currently drawn from.
#[derive(Debug, Clone)]
pub enum CodeSpec {
    Zero,
    Uniform,
    Dist(ClassDistribution),
}

impl CodeSpec {
    fn sample(&self, m: usize, num_classes: usize, rng: &mut Rng) -> Result<LatentCodeBatch> {
        match self {
            CodeSpec::Zero => sample_codes(CodePolicyKind::Zero, m, num_classes, rng, None, None),
            CodeSpec::Uniform => {
                sample_codes(CodePolicyKind::Uniform, m, num_classes, rng, None, None)
            }
            CodeSpec::Dist(d) => sample_codes(
                CodePolicyKind::Estimated,
                m,
                num_classes,
                rng,
                None,
                Some(d),
            ),
        }
    }
}

/// Fused classifier/auxiliary probabilities over a full target set, plus the
/// class-distribution estimate (their column means). Codes for the auxiliary
/// path follow `codes`.
pub fn fused_target_predictions(
    model: &LadaModel,
    x_t: &Matrix,
    codes: &CodeSpec,
    rng: &mut Rng,
) -> Result<(Matrix, ClassDistribution)> {
    if x_t.rows() == 0 {
        return Err(Error::EmptyInput("fused_target_predictions: empty target"));
    }
    let p_c = model.classify_target(x_t)?;
    let batch = codes.sample(x_t.rows(), model.dims.head_classes(), rng)?;
    let p_q = model.q_predict_target(x_t, &batch)?;
    let fused = fuse_predictions(&p_c, &p_q)?;
    let estimate = ClassDistribution::new(fused.col_means())?;
    Ok((fused, estimate))
}

/// Column mean of the fused predictions over all target instances.
pub fn estimate_target_distribution(
    model: &LadaModel,
    x_t: &Matrix,
    codes: &CodeSpec,
    rng: &mut Rng,
) -> Result<ClassDistribution> {
    Ok(fused_target_predictions(model, x_t, codes, rng)?.1)
}

/// What the trainer exposes to the evaluation hook at each measurement
/// point. `predictions` is variant-appropriate: fused for code-carrying
/// variants, classifier-only for the zero baseline.
pub struct EvalSnapshot<'a> {
    pub model: &'a LadaModel,
    pub predictions: &'a Matrix,
    pub p_hat: Option<&'a ClassDistribution>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalMetrics {
    pub target_acc: Option<f64>,
    pub kl_est_true: Option<f64>,
}

pub type EvalHook<'a> = dyn Fn(&EvalSnapshot) -> EvalMetrics + 'a;

/// Stage 2: the adversarial loop. Target labels are never read — the dataset
/// may carry them, but only `x` is touched; scoring goes through `eval_hook`.
pub fn train_stage2(
    model: &mut LadaModel,
    source: &FeatureDataset,
    target: &FeatureDataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
    eval_hook: Option<&EvalHook>,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let src_labels = source
        .y
        .as_deref()
        .ok_or_else(|| Error::Contract("stage 2 requires a labeled source".into()))?;
    if target.is_empty() {
        return Err(Error::EmptyInput("train_stage2: empty target set"));
    }
    let k1 = model.dims.head_classes();
    let p_s = empirical_distribution(src_labels, k1)?;
    let p_s_floored = p_s.floored(KL_TRACE_FLOOR);

    let mut opts = Optimizers::new(model, cfg.optimizer, cfg.learning_rate);
    let mut trace = TrainTrace::default();
    let mut estimate: Option<ClassDistribution> = None;

    for it in 0..cfg.stage2_iters {
        // Refresh the estimate at the warmup boundary and on cadence after it.
        if cfg.variant == LadaVariant::Estimated
            && it >= cfg.warmup_iters
            && (it - cfg.warmup_iters) % cfg.reestimate_every == 0
        {
            let spec = current_code_spec(cfg, it, &p_s, &estimate);
            estimate = Some(estimate_target_distribution(model, &target.x, &spec, rng)?);
        }

        let src_idx = sample_batch(source.len(), cfg.batch_source, rng);
        let src_x = source.x.select_rows(&src_idx);
        let src_y: Vec<usize> = src_idx.iter().map(|&i| src_labels[i]).collect();
        let tgt_idx = sample_batch(target.len(), cfg.batch_target, rng);
        let tgt_x = target.x.select_rows(&tgt_idx);

        let src_codes = if cfg.variant == LadaVariant::Zero {
            sample_codes(CodePolicyKind::Zero, src_x.rows(), k1, rng, None, None)?
        } else {
            sample_codes(
                CodePolicyKind::CoupledLabel,
                src_x.rows(),
                k1,
                rng,
                Some(&src_y),
                None,
            )?
        };
        let tgt_spec = current_code_spec(cfg, it, &p_s, &estimate);
        let tgt_codes = tgt_spec.sample(tgt_x.rows(), k1, rng)?;

        let d_step = adv_step_d(
            model,
            &mut opts,
            &src_x,
            &src_codes,
            &tgt_x,
            &tgt_codes,
            cfg.dropout_p,
            rng,
        )?;
        let e_step = adv_step_e(model, &mut opts, &tgt_x, &tgt_codes, cfg.dropout_p, rng)?;
        let q = if cfg.variant == LadaVariant::Zero {
            None
        } else {
            Some(q_step(
                model,
                &mut opts,
                &src_x,
                &src_codes,
                &tgt_x,
                &tgt_codes,
                cfg.regime,
                cfg.dropout_p,
                rng,
            )?)
        };
        let l_cls = match cfg.regime {
            TrainRegime::ThreePlayer => Some(cls_step(
                model,
                &mut opts,
                &src_x,
                &src_y,
                cfg.dropout_p,
                rng,
            )?),
            TrainRegime::TwoStage => None,
        };

        let mut row = TraceRow {
            stage: 2,
            iter: it,
            l_cls,
            l_adv_d: Some(d_step.loss),
            l_adv_e: Some(e_step.loss),
            l_q: q.as_ref().map(|s| s.loss),
            mean_d_source: Some(d_step.mean_d_source),
            mean_d_target: Some(d_step.mean_d_target),
            h_p: q.as_ref().map(|s| s.h_p),
            ..Default::default()
        };

        if (it + 1) % cfg.eval_every == 0 || it + 1 == cfg.stage2_iters {
            let s_probs = source_predictions(model, &source.x)?;
            row.source_acc = Some(accuracy(&s_probs, src_labels));

            let (predictions, p_hat) = if cfg.variant == LadaVariant::Zero {
                (model.classify_target(&target.x)?, None)
            } else {
                let spec = current_code_spec(cfg, it, &p_s, &estimate);
                let (fused, est) = fused_target_predictions(model, &target.x, &spec, rng)?;
                if std::env::var("LADA_EVAL_ZERO").map(|v| v == "1").unwrap_or(false) {
                    let (fused_zero, _) =
                        fused_target_predictions(model, &target.x, &CodeSpec::Zero, rng)?;
                    (fused_zero, Some(est))
                } else {
                    (fused, Some(est))
                }
            };
            if let Some(est) = &p_hat {
                row.kl_est_source = Some(kl_divergence(est, &p_s_floored)?);
            }
            if let Some(hook) = eval_hook {
                let snapshot = EvalSnapshot {
                    model,
                    predictions: &predictions,
                    p_hat: p_hat.as_ref(),
                };
                let metrics = hook(&snapshot);
                row.target_acc = metrics.target_acc;
                row.kl_est_true = metrics.kl_est_true;
            }
        }
        trace.rows.push(row);
    }
    Ok(trace)
}

fn current_code_spec(
    cfg: &TrainConfig,
    it: usize,
    p_s: &ClassDistribution,
    estimate: &Option<ClassDistribution>,
) -> CodeSpec {
    match cfg.variant {
        LadaVariant::Zero => CodeSpec::Zero,
        LadaVariant::Uniform => CodeSpec::Uniform,
        LadaVariant::SourceDist => CodeSpec::Dist(p_s.clone()),
        LadaVariant::Estimated => {
            if it < cfg.warmup_iters {
                CodeSpec::Uniform
            } else {
                match estimate {
                    Some(e) => CodeSpec::Dist(e.clone()),
                    None => CodeSpec::Uniform,
                }
            }
        }
    }
}
