// Scratch diagnostic: compares classifier-only vs fused target accuracy and
// the auxiliary head's code-recovery rate across variants and imbalance
// levels. Not part of the shipped surface.

use lada::classdist::empirical_distribution;
use lada::classdist::sample_target_subset;
use lada::datasets::{generate_domain_pair, DomainPairSpec};
use lada::harness::{run_experiment, DataSource, VariantSpec};
use lada::net::{LadaDims, LadaModel};
use lada::rng::rng_for;
use lada::training::{
    accuracy, estimate_target_distribution, fused_target_predictions, train_stage1,
    train_stage2, CodeSpec, TrainConfig,
};

fn main() {
    let kappa: f64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.9);
    let variant_token = std::env::args().nth(2).unwrap_or("lada-3t".into());
    let stage2: usize = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(500);
    let seed: u64 = std::env::args()
        .nth(4)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let v = VariantSpec::parse(&variant_token).unwrap();

    let mut spec = DomainPairSpec::default();
    if let Ok(v) = std::env::var("DIAG_ROT") {
        spec.shift_rotation = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("DIAG_TRANS") {
        spec.shift_translation = v.parse().unwrap();
    }
    let mut data_rng = rng_for(seed, "data", 0);
    let pair = generate_domain_pair(&spec, &mut data_rng).unwrap();
    let k1 = pair.source.num_classes;
    let p_s = empirical_distribution(pair.source.labels().unwrap(), k1).unwrap();
    let mut subset_rng = rng_for(seed, "subset", kappa.to_bits());
    let subset = sample_target_subset(
        pair.target_pool.labels().unwrap(),
        &p_s,
        kappa,
        0.02,
        300,
        &mut subset_rng,
    )
    .unwrap();
    let target = pair.target_pool.subset(&subset.indices);
    let labels = target.labels().unwrap().to_vec();
    println!(
        "kappa {kappa} variant {} stage2 {stage2} seed {seed} ci {:.4} n {}",
        v.token(),
        subset.achieved_ci,
        subset.indices.len()
    );

    let warmup: usize = std::env::var("DIAG_WARMUP")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(stage2 * 3 / 10);
    let reest: usize = std::env::var("DIAG_REEST")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(200);
    let stage1: usize = std::env::var("DIAG_STAGE1")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(800);
    let mut cfg = TrainConfig {
        stage1_iters: stage1,
        stage2_iters: stage2,
        warmup_iters: warmup,
        reestimate_every: reest,
        ..Default::default()
    };
    cfg.variant = v.variant;
    cfg.regime = v.regime;

    let dims = LadaDims::default();
    let mut rng = rng_for(seed, "train", 0);
    let mut model = LadaModel::init(dims, &mut rng).unwrap();
    train_stage1(&mut model, &pair.source, &cfg, &mut rng).unwrap();

    let p_c0 = model.classify_target(&target.x).unwrap();
    println!("after stage1: C-only acc {:.4}", accuracy(&p_c0, &labels));

    train_stage2(&mut model, &pair.source, &target.unlabeled(), &cfg, &mut rng, None).unwrap();

    let p_c = model.classify_target(&target.x).unwrap();
    let mut eval_rng = rng_for(seed, "diag-eval", 0);
    let est = estimate_target_distribution(&model, &target.x, &CodeSpec::Uniform, &mut eval_rng)
        .unwrap();
    let (fused_u, _) =
        fused_target_predictions(&model, &target.x, &CodeSpec::Uniform, &mut eval_rng).unwrap();
    let (fused_e, _) =
        fused_target_predictions(&model, &target.x, &CodeSpec::Dist(est.clone()), &mut eval_rng)
            .unwrap();
    println!("after stage2: C-only acc {:.4}", accuracy(&p_c, &labels));
    println!("fused (uniform codes) acc {:.4}", accuracy(&fused_u, &labels));
    println!("fused (estimated codes) acc {:.4}", accuracy(&fused_e, &labels));
    let (fused_z, _) =
        fused_target_predictions(&model, &target.x, &CodeSpec::Zero, &mut eval_rng).unwrap();
    println!("fused (zero codes) acc {:.4}", accuracy(&fused_z, &labels));
    let p_t = empirical_distribution(&labels, k1).unwrap();
    println!("true p_t  {:?}", trunc(p_t.probs()));
    println!("estimate  {:?}", trunc(est.probs()));

    if std::env::var("DIAG_RUNEXP").is_ok() {
        eprintln!("diag cfg: {:?}", cfg);
        eprintln!("diag variant: {:?}", v);
        let run = run_experiment(
            v,
            kappa,
            &DataSource::Synthetic(spec.clone()),
            &cfg,
            0.02,
            300,
            128,
            &[256, 128, 64],
            &[32],
            seed,
        )
        .unwrap();
        println!(
            "run_experiment: ci {:.4} target_acc {:.4}",
            run.result.ci_achieved, run.result.target_accuracy
        );
    }
}

#[allow(dead_code)]
fn unused() {}

fn trunc(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
