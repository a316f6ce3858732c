//! The command-line surface: config files, run manifests, and the four
//! subcommands (`gen-data`, `sample-ci`, `train`, `sweep`).
//!
//! # Config format
//!
//! A plain-text key-value file, one `key = value` per line, `#` comments.
//! Every key has a default; unknown keys are rejected with their path.
//!
//! ```text
//! seed = 7
//! data.classes = 10            # known classes K (label space is K+1)
//! data.feature_dim = 64
//! data.class_radius = 4.0
//! data.class_sigma = 1.0
//! data.shift_rotation = 0.5235987755982988
//! data.shift_translation = 1.0
//! data.n_source = 2000
//! data.n_target_pool = 4000
//! data.source_csv =            # set both to train on real feature files
//! data.target_csv =
//! model.encoding_dim = 128
//! model.g_hidden = 256,128,64
//! model.head_hidden = 32
//! train.variant = lada-3t      # lada-{2|3}{0|u|s|t}; bare digit = two-stage
//! train.batch_source = 32
//! train.batch_target = 32
//! train.learning_rate = 0.001
//! train.optimizer = adam       # adam | sgd
//! train.dropout = 0.5
//! train.stage1_iters = 800
//! train.stage2_iters = 1500
//! train.warmup_frac = 0.3
//! train.reestimate_every = 200
//! train.eval_every = 100
//! ci.kappa = 0.6
//! ci.tol = 0.02
//! ci.min_subset = 300
//! sweep.kappas = 0.05,0.3,0.6,0.9
//! sweep.variants = lada-0,lada-3t
//! sweep.seeds = 1,2,3,4,5
//! ```
//!
//! # Manifests and reruns
//!
//! Every command writes `manifest.json` into the output directory before any
//! computation: tool version, master seed, the fully resolved config text,
//! and a timestamp. Passing a manifest as `--config` reruns the command with
//! the embedded config and seed; everything except the manifest timestamp is
//! then byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::classdist::{empirical_distribution, kl_divergence, sample_target_subset};
use crate::datasets::{save_feature_csv, DomainPairSpec};
use crate::error::{Error, Result};
use crate::harness::{
    accuracy_vs_ci_csv, kl_series_csv, run_ci_sweep, run_experiment, track_kl_convergence,
    DataSource, SweepSpec, VariantSpec,
};
use crate::ndnum::optim::OptimizerKind;
use crate::net::save_model;
use crate::rng::rng_for;
use crate::training::{TrainConfig, TRACE_CSV_HEADER};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Declarative schema: every known key with its default value.
const SCHEMA: &[(&str, &str)] = &[
    ("seed", "7"),
    ("data.classes", "10"),
    ("data.feature_dim", "64"),
    ("data.class_radius", "4"),
    ("data.class_sigma", "1"),
    ("data.shift_rotation", "0.5235987755982988"),
    ("data.shift_translation", "1"),
    ("data.n_source", "2000"),
    ("data.n_target_pool", "4000"),
    ("data.source_csv", ""),
    ("data.target_csv", ""),
    ("model.encoding_dim", "128"),
    ("model.g_hidden", "256,128,64"),
    ("model.head_hidden", "32"),
    ("train.variant", "lada-3t"),
    ("train.batch_source", "32"),
    ("train.batch_target", "32"),
    ("train.learning_rate", "0.001"),
    ("train.optimizer", "adam"),
    ("train.dropout", "0.5"),
    ("train.stage1_iters", "800"),
    ("train.stage2_iters", "1500"),
    ("train.warmup_frac", "0.3"),
    ("train.reestimate_every", "200"),
    ("train.eval_every", "100"),
    ("ci.kappa", "0.6"),
    ("ci.tol", "0.02"),
    ("ci.min_subset", "300"),
    ("sweep.kappas", "0.05,0.3,0.6,0.9"),
    ("sweep.variants", "lada-0,lada-3t"),
    ("sweep.seeds", "1,2,3,4,5"),
];

/// A fully resolved configuration: schema defaults overlaid with file values
/// and command-line overrides.
#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn defaults() -> Self {
        Config {
            values: SCHEMA
                .iter()
                .map(|&(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Parses config text over the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::defaults();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", idx + 1),
                    format!("expected `key = value`, found `{line}`"),
                )
            })?;
            let key = key.trim();
            let value = value.trim();
            if !cfg.values.contains_key(key) {
                return Err(Error::config(key, "unknown key"));
            }
            cfg.values.insert(key.to_string(), value.to_string());
        }
        Ok(cfg)
    }

    /// Loads either a config file or a manifest JSON (recognized by content).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        if text.trim_start().starts_with('{') {
            let manifest: RunManifest = serde_json::from_str(&text)
                .map_err(|e| Error::config("manifest", format!("bad manifest JSON: {e}")))?;
            Config::parse(&manifest.resolved_config)
        } else {
            Config::parse(&text)
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::config(key, "unknown key"));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Canonical text form: every key, sorted, one per line.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or("")
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .parse::<T>()
            .map_err(|e| Error::config(key, format!("bad value `{}`: {e}", self.raw(key))))
    }

    fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>()
                    .map_err(|e| Error::config(key, format!("bad value `{s}`: {e}")))
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse_as("seed")
    }

    pub fn domain_spec(&self) -> Result<DomainPairSpec> {
        Ok(DomainPairSpec {
            classes: self.parse_as("data.classes")?,
            feature_dim: self.parse_as("data.feature_dim")?,
            class_radius: self.parse_as("data.class_radius")?,
            class_sigma: self.parse_as("data.class_sigma")?,
            shift_rotation: self.parse_as("data.shift_rotation")?,
            shift_translation: self.parse_as("data.shift_translation")?,
            n_source: self.parse_as("data.n_source")?,
            n_target_pool: self.parse_as("data.n_target_pool")?,
        })
    }

    pub fn data_source(&self) -> Result<DataSource> {
        let src = self.raw("data.source_csv");
        let tgt = self.raw("data.target_csv");
        match (src.is_empty(), tgt.is_empty()) {
            (true, true) => Ok(DataSource::Synthetic(self.domain_spec()?)),
            (false, false) => Ok(DataSource::Files {
                source: PathBuf::from(src),
                target: PathBuf::from(tgt),
                classes: self.parse_as("data.classes")?,
            }),
            _ => Err(Error::config(
                "data.source_csv",
                "source_csv and target_csv must be set together",
            )),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let variant = VariantSpec::parse(self.raw("train.variant"))
            .map_err(|_| Error::config("train.variant", format!("bad variant `{}`", self.raw("train.variant"))))?;
        let stage2_iters: usize = self.parse_as("train.stage2_iters")?;
        let warmup_frac: f64 = self.parse_as("train.warmup_frac")?;
        if !(0.0..=1.0).contains(&warmup_frac) {
            return Err(Error::config("train.warmup_frac", "must be in [0,1]"));
        }
        let optimizer = match self.raw("train.optimizer") {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            other => {
                return Err(Error::config(
                    "train.optimizer",
                    format!("expected adam or sgd, found `{other}`"),
                ))
            }
        };
        let cfg = TrainConfig {
            variant: variant.variant,
            regime: variant.regime,
            batch_source: self.parse_as("train.batch_source")?,
            batch_target: self.parse_as("train.batch_target")?,
            learning_rate: self.parse_as("train.learning_rate")?,
            optimizer,
            dropout_p: self.parse_as("train.dropout")?,
            stage1_iters: self.parse_as("train.stage1_iters")?,
            stage2_iters,
            warmup_iters: (stage2_iters as f64 * warmup_frac).round() as usize,
            reestimate_every: self.parse_as("train.reestimate_every")?,
            eval_every: self.parse_as("train.eval_every")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn variant(&self) -> Result<VariantSpec> {
        VariantSpec::parse(self.raw("train.variant"))
    }

    pub fn encoding_dim(&self) -> Result<usize> {
        self.parse_as("model.encoding_dim")
    }

    pub fn g_hidden(&self) -> Result<Vec<usize>> {
        let v: Vec<usize> = self.parse_list("model.g_hidden")?;
        if v.is_empty() {
            return Err(Error::config("model.g_hidden", "needs at least one layer"));
        }
        Ok(v)
    }

    /// Hidden widths for the discriminator/auxiliary heads; empty means a
    /// single affine layer.
    pub fn head_hidden(&self) -> Result<Vec<usize>> {
        self.parse_list("model.head_hidden")
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        let variants = self
            .parse_list::<String>("sweep.variants")?
            .iter()
            .map(|t| VariantSpec::parse(t))
            .collect::<Result<Vec<_>>>()?;
        let spec = SweepSpec {
            kappas: self.parse_list("sweep.kappas")?,
            variants,
            seeds: self.parse_list("sweep.seeds")?,
            data: self.data_source()?,
            train: self.train_config()?,
            ci_tol: self.parse_as("ci.tol")?,
            min_subset: self.parse_as("ci.min_subset")?,
            encoding_dim: self.encoding_dim()?,
            g_hidden: self.g_hidden()?,
            head_hidden: self.head_hidden()?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Written to the output directory before any computation.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub master_seed: u64,
    pub out_dir: String,
    /// Wall-clock timestamp; excluded from rerun comparisons.
    pub created_unix_ms: u128,
    /// The full resolved config; rerunning with this manifest as `--config`
    /// reproduces all other outputs byte-identically.
    pub resolved_config: String,
}

fn write_manifest(command: &str, cfg: &Config, out_dir: &Path) -> Result<()> {
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        command: command.to_string(),
        master_seed: cfg.seed()?,
        out_dir: out_dir.display().to_string(),
        created_unix_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0),
        resolved_config: cfg.canonical(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(())
}

fn prepare_out(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    Ok(())
}

/// `gen-data`: synthesize a domain pair and write both CSVs.
pub fn cmd_gen_data(cfg: &Config, out_dir: &Path) -> Result<()> {
    let spec = cfg.domain_spec()?;
    spec.validate()?;
    prepare_out(out_dir)?;
    write_manifest("gen-data", cfg, out_dir)?;
    let seed = cfg.seed()?;
    let mut rng = rng_for(seed, "data", 0);
    let pair = crate::datasets::generate_domain_pair(&spec, &mut rng)?;
    save_feature_csv(&pair.source, &out_dir.join("source.csv"))?;
    save_feature_csv(&pair.target_pool, &out_dir.join("target_pool.csv"))?;
    println!(
        "wrote {} source and {} target-pool rows to {}",
        pair.source.len(),
        pair.target_pool.len(),
        out_dir.display()
    );
    Ok(())
}

/// `sample-ci`: carve a subset of the target pool at the requested imbalance
/// and write its indices (one per line).
pub fn cmd_sample_ci(cfg: &Config, out_dir: &Path) -> Result<()> {
    prepare_out(out_dir)?;
    write_manifest("sample-ci", cfg, out_dir)?;
    let seed = cfg.seed()?;
    let kappa: f64 = cfg.parse_as("ci.kappa")?;
    let tol: f64 = cfg.parse_as("ci.tol")?;
    let min_subset: usize = cfg.parse_as("ci.min_subset")?;
    let (source, pool) = crate::harness::load_data(&cfg.data_source()?, seed)?;
    let k1 = source.num_classes;
    let p_s = empirical_distribution(source.labels()?, k1)?;
    let mut rng = rng_for(seed, "subset", kappa.to_bits());
    let subset = sample_target_subset(pool.labels()?, &p_s, kappa, tol, min_subset, &mut rng)?;
    let mut text = String::new();
    for &i in &subset.indices {
        let _ = writeln!(text, "{i}");
    }
    fs::write(out_dir.join("subset_indices.txt"), text)?;
    println!("achieved_ci = {}", subset.achieved_ci);
    println!("subset_size = {}", subset.indices.len());
    Ok(())
}

/// `train`: the full single-run pipeline; writes checkpoint, trace CSV,
/// result JSON, and an embedding export.
pub fn cmd_train(cfg: &Config, out_dir: &Path) -> Result<()> {
    prepare_out(out_dir)?;
    write_manifest("train", cfg, out_dir)?;
    let seed = cfg.seed()?;
    let kappa: f64 = cfg.parse_as("ci.kappa")?;
    let data = cfg.data_source()?;
    if std::env::var("LADA_DEBUG_CFG").is_ok() {
        eprintln!("cmd_train cfg: {:?}", cfg.train_config()?);
        eprintln!("cmd_train variant: {:?}", cfg.variant()?);
    }
    let run = run_experiment(
        cfg.variant()?,
        kappa,
        &data,
        &cfg.train_config()?,
        cfg.parse_as("ci.tol")?,
        cfg.parse_as("ci.min_subset")?,
        cfg.encoding_dim()?,
        &cfg.g_hidden()?,
        &cfg.head_hidden()?,
        seed,
    )?;
    fs::write(out_dir.join("trace.csv"), run.trace.to_csv())?;
    save_model(&run.model, &out_dir.join("model.ckpt"))?;
    let json = serde_json::to_string_pretty(&run.result).expect("result serializes");
    fs::write(out_dir.join("result.json"), json)?;
    let (source, pool) = crate::harness::load_data(&data, seed)?;
    crate::harness::export_embeddings(
        &run.model,
        &source,
        &pool,
        &out_dir.join("embeddings.csv"),
    )?;
    println!(
        "{}: ci {:.4}, target acc {:.4}, source acc {:.4} ({:.1}s)",
        run.result.variant,
        run.result.ci_achieved,
        run.result.target_accuracy,
        run.result.source_accuracy,
        run.result.wall_time_s,
    );
    Ok(())
}

/// `sweep`: the full cross-product; writes the sweep JSON, the
/// accuracy-vs-CI plot CSV, and one KL-convergence CSV per applicable run.
pub fn cmd_sweep(cfg: &Config, out_dir: &Path, jobs: usize) -> Result<()> {
    prepare_out(out_dir)?;
    write_manifest("sweep", cfg, out_dir)?;
    let spec = cfg.sweep_spec()?;
    let run = || run_ci_sweep(&spec);
    let (output, traces) = if jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::State(format!("thread pool: {e}")))?
            .install(run)?
    } else {
        run()?
    };

    #[derive(serde::Serialize)]
    struct SweepDocument<'a> {
        spec: &'a SweepSpec,
        results: &'a crate::harness::SweepOutput,
    }
    let json = serde_json::to_string_pretty(&SweepDocument {
        spec: &spec,
        results: &output,
    })
    .expect("sweep serializes");
    fs::write(out_dir.join("sweep.json"), json)?;
    fs::write(
        out_dir.join("accuracy_vs_ci.csv"),
        accuracy_vs_ci_csv(&output.results),
    )?;
    for (tag, trace) in &traces {
        if let Some(series) = track_kl_convergence(trace) {
            fs::write(
                out_dir.join(format!("kl_convergence_{tag}.csv")),
                kl_series_csv(&series),
            )?;
        }
        fs::write(out_dir.join(format!("trace_{tag}.csv")), trace.to_csv())?;
    }
    for r in &output.results {
        println!(
            "{} kappa {:.2} seed {}: ci {:.4} target_acc {:.4}",
            r.variant, r.kappa_requested, r.seed, r.ci_achieved, r.target_accuracy
        );
    }
    for f in &output.failures {
        eprintln!("FAILED {} kappa {} seed {}: {}", f.variant, f.kappa, f.seed, f.error);
    }
    if output.results.is_empty() {
        return Err(Error::State("every sweep cell failed".into()));
    }
    println!(
        "sweep complete: {} results, {} failures",
        output.results.len(),
        output.failures.len()
    );
    Ok(())
}

/// Sanity: the trace CSV header the docs promise is the one the trainer
/// writes.
pub fn trace_header() -> &'static str {
    TRACE_CSV_HEADER
}

/// Recomputes a subset's divergence from an index file; used by tests and
/// handy for spot checks.
pub fn recompute_ci(indices_path: &Path, labels: &[usize], num_classes: usize) -> Result<f64> {
    let text = fs::read_to_string(indices_path)?;
    let indices: Vec<usize> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            l.trim().parse::<usize>().map_err(|e| Error::Parse {
                path: indices_path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let selected: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
    let balanced = vec![1.0 / (num_classes - 1) as f64; num_classes - 1];
    let mut p_s = balanced;
    p_s.push(0.0);
    let p_s = crate::classdist::ClassDistribution::new(p_s)?;
    let d = empirical_distribution(&selected, num_classes)?;
    kl_divergence(&d, &p_s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_schema_and_parse() {
        let cfg = Config::defaults();
        assert_eq!(cfg.seed().unwrap(), 7);
        let spec = cfg.domain_spec().unwrap();
        assert_eq!(spec.classes, 10);
        assert_eq!(spec.feature_dim, 64);
        let train = cfg.train_config().unwrap();
        assert_eq!(train.batch_source, 32);
        assert_eq!(train.stage2_iters, 1500);
        assert_eq!(train.warmup_iters, 450);
        let sweep = cfg.sweep_spec().unwrap();
        assert_eq!(sweep.kappas.len(), 4);
        assert_eq!(sweep.g_hidden, vec![256, 128, 64]);
    }

    #[test]
    fn unknown_key_is_rejected_with_path() {
        match Config::parse("data.clases = 10") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "data.clases"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = Config::parse("# hello\n\nseed = 42   # trailing\n").unwrap();
        assert_eq!(cfg.seed().unwrap(), 42);
    }

    #[test]
    fn canonical_text_roundtrips() {
        let mut cfg = Config::defaults();
        cfg.set("seed", "123").unwrap();
        cfg.set("train.variant", "lada-2u").unwrap();
        let text = cfg.canonical();
        let back = Config::parse(&text).unwrap();
        assert_eq!(back.canonical(), text);
    }

    #[test]
    fn bad_values_name_their_field() {
        let cfg = Config::parse("train.optimizer = adagrad").unwrap();
        match cfg.train_config() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "train.optimizer"),
            other => panic!("expected config error, got {other:?}"),
        }
        let cfg = Config::parse("data.n_source = lots").unwrap();
        assert!(matches!(cfg.domain_spec(), Err(Error::Config { .. })));
    }

    #[test]
    fn file_source_requires_both_paths() {
        let cfg = Config::parse("data.source_csv = a.csv").unwrap();
        assert!(matches!(cfg.data_source(), Err(Error::Config { .. })));
    }

    #[test]
    fn manifest_embeds_a_runnable_config() {
        let mut cfg = Config::defaults();
        cfg.set("seed", "99").unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_manifest("train", &cfg, dir.path()).unwrap();
        let loaded = Config::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.seed().unwrap(), 99);
        assert_eq!(loaded.canonical(), cfg.canonical());
    }
}
