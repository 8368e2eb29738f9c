//! Experiment configuration, stage runners and run manifests.
//!
//! Every stage reads its inputs from and writes its artifacts to one output
//! directory. Artifacts are written to a temporary name and renamed, so a
//! file that exists is complete; the stage manifest lists every expected
//! artifact with a completeness flag and a SHA-256 digest. Wall-clock
//! timings go to a separate `<stage>.timing.json` so manifests stay
//! byte-identical across reruns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, Header};
use crate::ddpm::{self, DenoiserModel, NetConfig, OptimConfig, SamplingSequence, TrainReport};
use crate::diti::{self, make_partition, DitiConfig, EncoderDecoder, PartitionConfig, PartitionKind};
use crate::error::{ensure, DitiError, Result};
use crate::eval::{self, Features, ProbeConfig, ProbeResult, ProbeTarget};
use crate::generate::{self, FeatureStats, SparseConfig};
use crate::schedule::{ScheduleConfig, VarianceSchedule};
use crate::seed;
use crate::synth::{self, Dataset, FactorRecord, SyntheticSpec};
use crate::theory::{self, LossTimeQuery};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_samples: usize,
    /// JSON [`SyntheticSpec`] to use instead of the reference factor set.
    /// Its `n_samples` and `seed` are overridden by this config.
    #[serde(default)]
    pub spec_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmConfig {
    pub net: NetConfig,
    pub optim: OptimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    pub taus: Vec<f64>,
    pub n_pairs: usize,
    /// Monte-Carlo draws per intervention pair and time-step.
    pub mc_per_pair: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            taus: vec![0.05, 0.1, 0.2],
            n_pairs: 1000,
            mc_per_pair: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    /// Length `M` of the DDIM sampling sequence.
    pub sampling_steps: usize,
    /// Interpolation scales, each in `[0, 1]`.
    pub interp_lambdas: Vec<f64>,
    /// Signed manipulation scales.
    pub manip_lambdas: Vec<f64>,
    /// Subsets edited one at a time by `interpolate`; empty means all.
    #[serde(default)]
    pub subsets: Vec<usize>,
    /// Sparsity budget `d'` of the manipulation classifier.
    pub sparsity: usize,
    /// Attribute targeted by `manipulate`.
    pub target_attribute: String,
    /// Number of test images (interpolation pairs) to process.
    pub n_images: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            sampling_steps: 51,
            interp_lambdas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            manip_lambdas: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            subsets: Vec::new(),
            sparsity: 16,
            target_attribute: "background".into(),
            n_images: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetConfig,
    pub dm: DmConfig,
    pub diti: DitiConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
    #[serde(default)]
    pub generate: GenerateConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Desk-scale reference: T = 100, 2000 images of 16×16, d = 64, k = 8.
    pub fn reference(seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        let optim = |iterations| OptimConfig {
            learning_rate: 1e-3,
            iterations,
            batch_size: 64,
            grad_clip: Some(1.0),
        };
        Self {
            seed,
            schedule: ScheduleConfig {
                steps: 100,
                beta_start: 1e-4,
                beta_end: 0.02,
            },
            dataset: DatasetConfig {
                n_samples: 2000,
                spec_file: None,
            },
            dm: DmConfig {
                net: NetConfig::default(),
                optim: optim(5000),
            },
            diti: DitiConfig {
                partition: PartitionConfig {
                    kind: PartitionKind::Balanced,
                    k: 8,
                    d: 64,
                },
                encoder: NetConfig::default(),
                decoder: NetConfig::default(),
                optim: optim(5000),
                detach: true,
            },
            probe: ProbeConfig::default(),
            theory: TheoryConfig::default(),
            generate: GenerateConfig::default(),
            output_dir: output_dir.into(),
        }
    }

    /// Parses JSON; errors carry serde's line, column and field message.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| DitiError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| DitiError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            DitiError::Config(m) => DitiError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(DitiError::Config(m));
        if let Err(e) = self.schedule.build() {
            return cfg_err(format!("schedule: {e}"));
        }
        if self.dataset.n_samples < 2 {
            return cfg_err("dataset.n_samples: need at least 2 samples".into());
        }
        if let Some(p) = &self.dataset.spec_file {
            if !p.is_file() {
                return cfg_err(format!("dataset.spec_file: {} does not exist", p.display()));
            }
        }
        let p = &self.diti.partition;
        if let Err(e) = make_partition(p.kind, p.k, p.d, self.schedule.steps) {
            return cfg_err(format!("diti.partition: {e}"));
        }
        for (name, o) in [("dm.optim", &self.dm.optim), ("diti.optim", &self.diti.optim)] {
            if let Err(e) = o.validate() {
                return cfg_err(format!("{name}: {e}"));
            }
        }
        if self.theory.taus.iter().any(|&t| !(t > 0.0 && t <= 0.5)) {
            return cfg_err("theory.taus: every tau must lie in (0, 0.5]".into());
        }
        if self.theory.n_pairs == 0 || self.theory.mc_per_pair == 0 {
            return cfg_err("theory: n_pairs and mc_per_pair must be positive".into());
        }
        let g = &self.generate;
        if g.sampling_steps < 2 || g.sampling_steps > self.schedule.steps + 1 {
            return cfg_err(format!(
                "generate.sampling_steps: need 2 <= M <= T + 1 = {}",
                self.schedule.steps + 1
            ));
        }
        if g.sparsity == 0 || g.sparsity > p.d {
            return cfg_err(format!("generate.sparsity: need 1 <= d' <= d = {}", p.d));
        }
        if g.interp_lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return cfg_err("generate.interp_lambdas: every lambda must lie in [0, 1]".into());
        }
        if let Some(&s) = g.subsets.iter().find(|&&s| s == 0 || s > p.k) {
            return cfg_err(format!("generate.subsets: subset {s} outside 1..={}", p.k));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON with the output directory left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex(&Sha256::digest(serde_json::to_vec(&c).expect("config serialises")))
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let mut spec = match &self.dataset.spec_file {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            None => SyntheticSpec::reference(self.dataset.n_samples, self.seed),
        };
        spec.n_samples = self.dataset.n_samples;
        spec.seed = self.seed;
        spec.validate()?;
        Ok(spec)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainDm,
    TrainDiti,
    VerifyTheory,
    Probe,
    Generate,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainDm => "train-dm",
            Stage::TrainDiti => "train-diti",
            Stage::VerifyTheory => "verify-theory",
            Stage::Probe => "probe",
            Stage::Generate => "generate",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerateMode {
    Interpolate,
    Manipulate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub status: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub artifacts: Vec<ArtifactEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Writes a stage's artifacts atomically and records them.
struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<ArtifactEntry>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir,
            written: Vec::new(),
        })
    }

    fn bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        let tmp = self.dir.join(format!(".{name}.partial"));
        std::fs::write(&tmp, data)?;
        std::fs::rename(&tmp, self.dir.join(name))?;
        self.written.push(ArtifactEntry {
            name: name.to_string(),
            complete: true,
            sha256: Some(hex(&Sha256::digest(data))),
        });
        Ok(())
    }

    fn text(&mut self, name: &str, data: &str) -> Result<()> {
        self.bytes(name, data.as_bytes())
    }

    fn checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<()> {
        let mut buf = Vec::new();
        ck.write(&mut buf)?;
        self.bytes(name, &buf)
    }
}

/// Result of one stage invocation.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub manifest: Manifest,
    pub seconds: f64,
}

/// Runs one stage and writes its manifest and timing file, also on failure.
pub fn run_stage(stage: Stage, cfg: &ExperimentConfig, opts: &StageOptions) -> Result<StageOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir.as_path();
    let mut out = Outputs::new(dir)?;
    let start = Instant::now();
    let result = match stage {
        Stage::GenData => gen_data(cfg, &mut out),
        Stage::TrainDm => train_dm_stage(cfg, &mut out),
        Stage::TrainDiti => train_diti_stage(cfg, opts, &mut out),
        Stage::VerifyTheory => verify_theory_stage(cfg, &mut out),
        Stage::Probe => probe_stage(cfg, opts, &mut out),
        Stage::Generate => generate_stage(cfg, opts, &mut out),
        Stage::Report => report_stage(cfg, &mut out),
    };
    let seconds = start.elapsed().as_secs_f64();
    let expected = expected_artifacts(stage, cfg, opts);
    let mut artifacts = out.written.clone();
    for name in expected {
        if !artifacts.iter().any(|a| a.name == name) {
            artifacts.push(ArtifactEntry {
                name,
                complete: false,
                sha256: None,
            });
        }
    }
    let manifest = Manifest {
        stage: stage.name().to_string(),
        status: if result.is_ok() { "complete" } else { "failed" }.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: VERSION.to_string(),
        artifacts,
        error: result.as_ref().err().map(ToString::to_string),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(dir.join(format!("{}.manifest.json", stage.name())), json)?;
    let timing = serde_json::json!({ "stage": stage.name(), "seconds": seconds });
    std::fs::write(dir.join(format!("{}.timing.json", stage.name())), format!("{timing}\n"))?;
    result?;
    Ok(StageOutcome { manifest, seconds })
}

/// Per-invocation options that are not part of the experiment config.
#[derive(Debug, Clone, Default)]
pub struct StageOptions {
    /// Denoiser checkpoint; defaults to `dm.ckpt` in the output directory.
    pub dm: Option<PathBuf>,
    /// Encoder/decoder checkpoint; defaults to `diti.ckpt` in the output directory.
    pub diti: Option<PathBuf>,
    pub mode: Option<GenerateMode>,
}

fn expected_artifacts(stage: Stage, cfg: &ExperimentConfig, opts: &StageOptions) -> Vec<String> {
    let names: &[&str] = match stage {
        Stage::GenData => &["spec.json", "images.bin", "factors.csv"],
        Stage::TrainDm => &["dm.ckpt", "dm_loss_per_t.csv", "dm_trace.csv"],
        Stage::TrainDiti => &["diti.ckpt", "diti_loss_per_t.csv", "diti_trace.csv", "compensation.csv"],
        Stage::VerifyTheory => &["schedule.csv", "loss_times.csv", "dominance.csv"],
        Stage::Probe => &[
            "probe_diti.csv",
            "probe_pixel.csv",
            "alignment.csv",
            "alignment_test.csv",
        ],
        Stage::Generate => match opts.mode.unwrap_or(GenerateMode::Interpolate) {
            GenerateMode::Interpolate => &["interpolate_metrics.csv"],
            GenerateMode::Manipulate => &["manipulate_metrics.csv", "manipulate_classifier.json"],
        },
        Stage::Report => &["acceptance_summary.csv"],
    };
    let mut v: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    if stage == Stage::VerifyTheory {
        if let Ok(spec) = cfg.synthetic_spec() {
            v.extend(spec.factors.iter().map(|f| format!("theory_{}.csv", f.name)));
        }
    }
    v
}

fn schedule(cfg: &ExperimentConfig) -> Result<VarianceSchedule> {
    cfg.schedule.build()
}

/// Writes the dataset as `spec.json`, `images.bin` and `factors.csv`.
fn gen_data(cfg: &ExperimentConfig, out: &mut Outputs<'_>) -> Result<()> {
    let spec = cfg.synthetic_spec()?;
    let ds = Dataset::generate(&spec)?;
    out.text("spec.json", &(serde_json::to_string_pretty(&spec)? + "\n"))?;
    let mut buf = Vec::new();
    diti_tensor::io::write_tensor(&mut buf, &ds.images)?;
    out.bytes("images.bin", &buf)?;
    out.text("factors.csv", &ds.factors_csv())?;
    Ok(())
}

/// Reads a dataset written by the `gen-data` stage.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let spec: SyntheticSpec = serde_json::from_str(&std::fs::read_to_string(dir.join("spec.json"))?)?;
    spec.validate()?;
    let images = diti_tensor::io::load(dir.join("images.bin"))?;
    ensure!(
        images.shape() == [spec.n_samples, spec.pixels()],
        "images.bin has shape {:?}, spec expects [{}, {}]",
        images.shape(),
        spec.n_samples,
        spec.pixels()
    );
    let csv = std::fs::read_to_string(dir.join("factors.csv"))?;
    let mut records = Vec::with_capacity(spec.n_samples);
    for (line_no, line) in csv.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        ensure!(
            fields.len() == spec.num_factors() + 1,
            "factors.csv line {}: expected {} fields",
            line_no + 1,
            spec.num_factors() + 1
        );
        let factors = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| DitiError::Config(format!("factors.csv line {}: {e}", line_no + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(FactorRecord::new(&spec, factors)?);
    }
    ensure!(records.len() == spec.n_samples, "factors.csv has {} rows", records.len());
    let (train, test) = synth::split_indices(spec.n_samples, spec.seed);
    Ok(Dataset {
        spec,
        images,
        records,
        train,
        test,
    })
}

fn trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (i, v) in trace.iter().enumerate() {
        let _ = writeln!(out, "{},{v:.9e}", i + 1);
    }
    out
}

/// Trains the denoiser on the training split.
pub fn train_reference_dm(cfg: &ExperimentConfig, ds: &Dataset, s: &VarianceSchedule) -> Result<(DenoiserModel, TrainReport)> {
    let mut rng = seed::stream(cfg.seed, "init/dm");
    let mut model = DenoiserModel::new(ds.spec.pixels(), cfg.dm.net.clone(), &mut rng)?;
    let report = ddpm::train_dm(&mut model, &ds.batch(&ds.train), s, &cfg.dm.optim, cfg.seed)?;
    Ok((model, report))
}

fn train_dm_stage(cfg: &ExperimentConfig, out: &mut Outputs<'_>) -> Result<()> {
    let ds = load_dataset(out.dir)?;
    let s = schedule(cfg)?;
    let (model, report) = train_reference_dm(cfg, &ds, &s)?;
    out.checkpoint("dm.ckpt", &Checkpoint::from_dm(&model, &s))?;
    out.text("dm_loss_per_t.csv", &report.per_timestep_csv())?;
    out.text("dm_trace.csv", &trace_csv(&report.loss_trace))?;
    Ok(())
}

fn load_dm(path: &Path, cfg: &ExperimentConfig) -> Result<(DenoiserModel, VarianceSchedule)> {
    let ck = Checkpoint::load(path)
        .map_err(|e| DitiError::Checkpoint(format!("{}: {e}", path.display())))?;
    let s = ck.schedule()?;
    ensure!(
        s.config() == cfg.schedule,
        "denoiser checkpoint schedule {:?} differs from the config's {:?}",
        s.config(),
        cfg.schedule
    );
    Ok((ck.to_dm()?, s))
}

fn load_diti(path: &Path) -> Result<EncoderDecoder> {
    Checkpoint::load(path)
        .map_err(|e| DitiError::Checkpoint(format!("{}: {e}", path.display())))?
        .to_diti()
}

/// Trains the encoder/decoder pair on the training split.
pub fn train_reference_diti(
    cfg: &ExperimentConfig,
    dm: &DenoiserModel,
    ds: &Dataset,
    s: &VarianceSchedule,
) -> Result<(EncoderDecoder, TrainReport)> {
    let p = &cfg.diti.partition;
    let partition = make_partition(p.kind, p.k, p.d, s.steps())?;
    let mut rng = seed::stream(cfg.seed, "init/diti");
    let mut ed = EncoderDecoder::new(ds.spec.pixels(), partition, &cfg.diti.encoder, &cfg.diti.decoder, &mut rng)?;
    let report = diti::train_diti(
        dm,
        &mut ed,
        &ds.batch(&ds.train),
        s,
        &cfg.diti.optim,
        cfg.diti.detach,
        None,
        cfg.seed,
    )?;
    Ok((ed, report))
}

/// Held-out objective per time-step decile: `(t_lo, t_hi, baseline, diti)`.
pub fn compensation_by_decile(
    dm: &DenoiserModel,
    ed: &EncoderDecoder,
    ds: &Dataset,
    s: &VarianceSchedule,
    seed: u64,
) -> Result<Vec<(usize, usize, f64, f64)>> {
    let x = ds.batch(&ds.test);
    let base = diti::eval_diti_per_timestep(dm, None, &x, s, None, seed)?;
    let ours = diti::eval_diti_per_timestep(dm, Some(ed), &x, s, None, seed)?;
    let (bb, bo) = (diti::bucket_means(&base, 10), diti::bucket_means(&ours, 10));
    let steps = s.steps();
    Ok((0..10)
        .map(|b| {
            let lo = b * steps / 10 + 1;
            let hi = ((b + 1) * steps / 10).max(lo);
            (lo, hi, bb[b], bo[b])
        })
        .collect())
}

fn train_diti_stage(cfg: &ExperimentConfig, opts: &StageOptions, out: &mut Outputs<'_>) -> Result<()> {
    let ds = load_dataset(out.dir)?;
    let dm_path = opts.dm.clone().unwrap_or_else(|| out.dir.join("dm.ckpt"));
    let (dm, s) = load_dm(&dm_path, cfg)?;
    let (ed, report) = train_reference_diti(cfg, &dm, &ds, &s)?;
    // relative to the output directory when inside it, so reruns elsewhere match
    let dm_ref = dm_path.strip_prefix(out.dir).unwrap_or(&dm_path).to_string_lossy().into_owned();
    let ck = Checkpoint::from_diti(&ed, &cfg.diti.encoder, &cfg.diti.decoder, &s, &dm_ref);
    out.checkpoint("diti.ckpt", &ck)?;
    out.text("diti_loss_per_t.csv", &report.per_timestep_csv())?;
    out.text("diti_trace.csv", &trace_csv(&report.loss_trace))?;
    let mut csv = String::from("decile,t_lo,t_hi,baseline,diti\n");
    for (i, (lo, hi, b, o)) in compensation_by_decile(&dm, &ed, &ds, &s, seed::derive_seed(cfg.seed, "heldout"))?
        .into_iter()
        .enumerate()
    {
        let _ = writeln!(csv, "{},{lo},{hi},{b:.9e},{o:.9e}", i + 1);
    }
    out.text("compensation.csv", &csv)?;
    Ok(())
}

/// `t,err_analytic,err_mc,ci_halfwidth` for one attribute's intervention pairs.
pub fn theory_curve(pairs: &[(Vec<f32>, Vec<f32>)], s: &VarianceSchedule, mc_per_pair: usize, seed: u64) -> Result<String> {
    let deltas: Vec<f64> = pairs.iter().map(|(x, y)| synth::pixel_distance(x, y)).collect();
    let q = LossTimeQuery::new(0.5, deltas)?;
    let mut out = String::from("t,err_analytic,err_mc,ci_halfwidth\n");
    let total = pairs.len() * mc_per_pair;
    for t in 1..=s.steps() {
        let analytic = theory::mean_err_over_dataset(&q, t, s)?;
        let mut errors = 0.0;
        for (j, (x, y)) in pairs.iter().enumerate() {
            let sd = seed::derive_seed(seed, &format!("theory-mc/{t}/{j}"));
            errors += theory::ovl_monte_carlo(x, y, t, s, mc_per_pair, sd)? * mc_per_pair as f64;
        }
        let mc = errors / total as f64;
        let _ = writeln!(out, "{t},{analytic:.9e},{mc:.9e},{:.9e}", theory::binomial_3sigma(mc, total));
    }
    Ok(out)
}

/// Loss time per attribute and `τ`, `None` when not lost by `T`.
pub fn loss_time_table(deltas: &[Vec<f64>], taus: &[f64], s: &VarianceSchedule) -> Result<Vec<Vec<Option<usize>>>> {
    deltas
        .iter()
        .map(|d| {
            taus.iter()
                .map(|&tau| Ok(theory::find_loss_time(&LossTimeQuery::new(tau, d.clone())?, s)))
                .collect()
        })
        .collect()
}

fn verify_theory_stage(cfg: &ExperimentConfig, out: &mut Outputs<'_>) -> Result<()> {
    let spec = cfg.synthetic_spec()?;
    let s = schedule(cfg)?;
    out.text("schedule.csv", &s.to_csv())?;
    let pairs = synth::intervention_pairs(&spec, cfg.theory.n_pairs, seed::derive_seed(cfg.seed, "theory"))?;
    let deltas: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| p.iter().map(|(x, y)| synth::pixel_distance(x, y)).collect())
        .collect();
    let table = loss_time_table(&deltas, &cfg.theory.taus, &s)?;
    let mut lt = String::from("attribute,granularity_rank,tau,loss_time\n");
    for (i, f) in spec.factors.iter().enumerate() {
        for (j, tau) in cfg.theory.taus.iter().enumerate() {
            let t = table[i][j].map_or("none".to_string(), |t| t.to_string());
            let _ = writeln!(lt, "{},{},{tau},{t}", f.name, f.granularity_rank);
        }
    }
    out.text("loss_times.csv", &lt)?;
    let mut order: Vec<usize> = (0..spec.num_factors()).collect();
    order.sort_by_key(|&i| spec.factors[i].granularity_rank);
    let mut dom = String::from("coarse,fine,dominates\n");
    for w in order.windows(2) {
        let d = theory::stochastic_dominance(&deltas[w[1]], &deltas[w[0]])?;
        let _ = writeln!(dom, "{},{},{d}", spec.factors[w[1]].name, spec.factors[w[0]].name);
    }
    out.text("dominance.csv", &dom)?;
    for (i, f) in spec.factors.iter().enumerate() {
        let sd = seed::derive_seed(cfg.seed, &format!("theory/{}", f.name));
        out.text(&format!("theory_{}.csv", f.name), &theory_curve(&pairs[i], &s, cfg.theory.mc_per_pair, sd)?)?;
    }
    Ok(())
}

/// Probe targets for every attribute; labels are `factor ≥ 0.5`.
pub fn probe_targets(ds: &Dataset) -> Vec<ProbeTarget> {
    let all: Vec<usize> = (0..ds.len()).collect();
    ds.spec
        .factors
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let values = ds.factor_column(i, &all);
            ProbeTarget {
                name: f.name.clone(),
                labels: values.iter().map(|&v| v >= 0.5).collect(),
                values,
            }
        })
        .collect()
}

/// Encoder features of every image.
pub fn encode_all(ed: &EncoderDecoder, ds: &Dataset) -> Result<Features> {
    Features::from_tensor(&ed.encode(&ds.images)?)
}

pub fn probe_with(features: &Features, ds: &Dataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    eval::linear_probe(features, &probe_targets(ds), &ds.train, &ds.test, cfg)
}

/// Alignment matrix, best subset per attribute, and the Spearman test of
/// granularity rank against best subset.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub matrix: Vec<Vec<f64>>,
    pub best: Vec<usize>,
    pub rho: f64,
    pub p_value: f64,
}

pub fn alignment(features: &Features, ed: &EncoderDecoder, ds: &Dataset, cfg: &ProbeConfig, seed: u64) -> Result<Alignment> {
    let subsets = (1..=ed.partition.k)
        .map(|i| ed.partition.dims_of(i))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let factors: Vec<Vec<f64>> = (0..ds.spec.num_factors()).map(|i| ds.factor_column(i, &all)).collect();
    let matrix = eval::subset_alignment(features, &subsets, &factors, &ds.train, &ds.test, cfg)?;
    let best = eval::best_subsets(&matrix);
    let ranks: Vec<f64> = ds.spec.granularity_ranks().iter().map(|&r| r as f64).collect();
    let best_f: Vec<f64> = best.iter().map(|&b| b as f64).collect();
    let (rho, p_value) = if best.iter().all(|&b| b == best[0]) {
        (0.0, 1.0)
    } else {
        eval::spearman_permutation_test(&ranks, &best_f, 1000, seed)?
    };
    Ok(Alignment {
        matrix,
        best,
        rho,
        p_value,
    })
}

fn probe_stage(cfg: &ExperimentConfig, opts: &StageOptions, out: &mut Outputs<'_>) -> Result<()> {
    let ds = load_dataset(out.dir)?;
    let ed = load_diti(&opts.diti.clone().unwrap_or_else(|| out.dir.join("diti.ckpt")))?;
    let z = encode_all(&ed, &ds)?;
    let pixels = Features::from_tensor(&ds.images)?;
    let ours = probe_with(&z, &ds, &cfg.probe)?;
    let base = probe_with(&pixels, &ds, &cfg.probe)?;
    out.text("probe_diti.csv", &ours.to_csv())?;
    out.text("probe_pixel.csv", &base.to_csv())?;
    for a in &ours.attributes {
        if !a.weights.is_empty() {
            out.text(&format!("weights_hist_{}.csv", a.attribute), &eval::histogram_csv(&a.weights, 20)?)?;
        }
    }
    let al = alignment(&z, &ed, &ds, &cfg.probe, seed::derive_seed(cfg.seed, "alignment"))?;
    let names: Vec<String> = ds.spec.factors.iter().map(|f| f.name.clone()).collect();
    out.text("alignment.csv", &eval::alignment_csv(&al.matrix, &names))?;
    let mut csv = String::from("attribute,granularity_rank,best_subset\n");
    for (i, f) in ds.spec.factors.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{}", f.name, f.granularity_rank, al.best[i]);
    }
    let _ = writeln!(csv, "spearman_rho,{:.6},", al.rho);
    let _ = writeln!(csv, "permutation_p,{:.6},", al.p_value);
    out.text("alignment_test.csv", &csv)?;
    Ok(())
}

/// Binary PGM (P5) of a grid of `side×side` images in `[−1, 1]`, one pixel
/// of black between cells.
pub fn pgm_grid(cells: &[Vec<&[f32]>], side: usize) -> Vec<u8> {
    let rows = cells.len();
    let cols = cells.iter().map(Vec::len).max().unwrap_or(0);
    let (w, h) = (cols * (side + 1) + 1, rows * (side + 1) + 1);
    let mut px = vec![0u8; w * h];
    for (r, row) in cells.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            for y in 0..side {
                for x in 0..side {
                    let v = f64::from(img[y * side + x]).clamp(-1.0, 1.0);
                    let p = ((v + 1.0) * 127.5).round() as u8;
                    px[(r * (side + 1) + 1 + y) * w + c * (side + 1) + 1 + x] = p;
                }
            }
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(px);
    out
}

fn energy_columns(spec: &SyntheticSpec) -> String {
    spec.factors.iter().map(|f| format!(",energy_{}", f.name)).collect()
}

fn energy_values(spec: &SyntheticSpec, a: &[f32], b: &[f32]) -> Result<String> {
    let mut s = String::new();
    for i in 0..spec.num_factors() {
        let _ = write!(s, ",{:.6}", generate::mask_energy_ratio(a, b, &spec.footprint(i))?);
    }
    Ok(s)
}

fn generate_stage(cfg: &ExperimentConfig, opts: &StageOptions, out: &mut Outputs<'_>) -> Result<()> {
    let ds = load_dataset(out.dir)?;
    let dm_path = opts.dm.clone().unwrap_or_else(|| out.dir.join("dm.ckpt"));
    let (dm, s) = load_dm(&dm_path, cfg)?;
    let ed = load_diti(&opts.diti.clone().unwrap_or_else(|| out.dir.join("diti.ckpt")))?;
    let g = &cfg.generate;
    let seq = SamplingSequence::uniform(g.sampling_steps, s.steps())?;
    let side = ds.spec.image_side;
    let n = g.n_images.min(ds.test.len() / 2).max(1);
    match opts.mode.unwrap_or(GenerateMode::Interpolate) {
        GenerateMode::Interpolate => {
            let src: Vec<usize> = ds.test[..n].to_vec();
            let dst: Vec<usize> = ds.test[n..2 * n].to_vec();
            let (x, y) = (ds.batch(&src), ds.batch(&dst));
            let subsets: Vec<usize> = if g.subsets.is_empty() {
                (1..=ed.partition.k).collect()
            } else {
                g.subsets.clone()
            };
            let mut csv = format!("source,target,subset,lambda,change_norm{}\n", energy_columns(&ds.spec));
            let mut grids: Vec<Vec<Vec<Vec<f32>>>> = vec![Vec::new(); n];
            for &sub in &subsets {
                let mut row_imgs: Vec<Vec<Vec<f32>>> = vec![Vec::new(); n];
                for &lam in &g.interp_lambdas {
                    let img = generate::counterfactual(&x, &y, &[sub], lam, &dm, &ed, &s, &seq)?;
                    for r in 0..n {
                        let (a, b) = (x.row_slice(r), img.row_slice(r));
                        let _ = writeln!(
                            csv,
                            "{},{},{sub},{lam},{:.6}{}",
                            src[r],
                            dst[r],
                            synth::pixel_distance(a, b),
                            energy_values(&ds.spec, a, b)?
                        );
                        row_imgs[r].push(b.to_vec());
                    }
                }
                for r in 0..n {
                    grids[r].push(std::mem::take(&mut row_imgs[r]));
                }
            }
            out.text("interpolate_metrics.csv", &csv)?;
            for (r, grid) in grids.iter().enumerate() {
                let cells: Vec<Vec<&[f32]>> = grid.iter().map(|row| row.iter().map(Vec::as_slice).collect()).collect();
                out.bytes(&format!("interpolate_{r}.pgm"), &pgm_grid(&cells, side))?;
            }
        }
        GenerateMode::Manipulate => {
            let attr = ds
                .spec
                .factors
                .iter()
                .position(|f| f.name == g.target_attribute)
                .ok_or_else(|| DitiError::Config(format!("generate.target_attribute: unknown attribute {:?}", g.target_attribute)))?;
            let z_all = ed.encode(&ds.images)?;
            let z_train = synth::gather_rows(&z_all, &ds.train);
            let feats = Features::from_tensor(&z_train)?;
            let labels: Vec<bool> = ds.factor_column(attr, &ds.train).iter().map(|&v| v >= 0.5).collect();
            let sparse = SparseConfig {
                probe: cfg.probe.clone(),
                ..SparseConfig::default()
            };
            let clf = generate::train_sparse_classifier(&feats, &labels, g.sparsity, &sparse)?;
            let stats = FeatureStats::from_features(&z_train)?;
            out.text("manipulate_classifier.json", &(serde_json::to_string_pretty(&clf)? + "\n"))?;
            let idx: Vec<usize> = ds.test[..n].to_vec();
            let x = ds.batch(&idx);
            let mut csv = format!("image,lambda,logit_before,logit_after,change_norm{}\n", energy_columns(&ds.spec));
            let mut cells: Vec<Vec<Vec<f32>>> = vec![Vec::new(); n];
            for &lam in &g.manip_lambdas {
                let img = generate::manipulate(&x, &clf, &stats, lam, &dm, &ed, &s, &seq)?;
                let z_after = ed.encode(&img)?;
                for r in 0..n {
                    let (a, b) = (x.row_slice(r), img.row_slice(r));
                    let _ = writeln!(
                        csv,
                        "{},{lam},{:.6},{:.6},{:.6}{}",
                        idx[r],
                        clf.logit(z_all.row_slice(idx[r])),
                        clf.logit(z_after.row_slice(r)),
                        synth::pixel_distance(a, b),
                        energy_values(&ds.spec, a, b)?
                    );
                    cells[r].push(b.to_vec());
                }
            }
            out.text("manipulate_metrics.csv", &csv)?;
            let grid: Vec<Vec<&[f32]>> = cells.iter().map(|row| row.iter().map(Vec::as_slice).collect()).collect();
            out.bytes("manipulate.pgm", &pgm_grid(&grid, side))?;
        }
    }
    Ok(())
}

fn read_csv(dir: &Path, name: &str) -> Option<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(dir.join(name)).ok()?;
    Some(
        text.lines()
            .skip(1)
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect(),
    )
}

/// Checks derivable from the artifacts in `dir`: `(check, value, pass)`.
/// Missing artifacts yield a `missing` row.
pub fn summarize(dir: &Path) -> Vec<(String, String, String)> {
    let mut rows = Vec::new();
    let missing = |rows: &mut Vec<(String, String, String)>, check: &str, file: &str| {
        rows.push((check.to_string(), format!("{file} not found"), "missing".to_string()));
    };
    let pass = |b: bool| if b { "pass" } else { "fail" }.to_string();
    match read_csv(dir, "loss_times.csv") {
        Some(lines) => {
            let mut by_tau: std::collections::BTreeMap<String, Vec<(usize, usize)>> = Default::default();
            for l in &lines {
                let rank: usize = l[1].parse().unwrap_or(0);
                let t = l[3].parse().unwrap_or(usize::MAX);
                by_tau.entry(l[2].clone()).or_default().push((rank, t));
            }
            for (tau, mut v) in by_tau {
                v.sort_unstable();
                let ok = v.windows(2).all(|w| w[0].1 < w[1].1);
                let times: Vec<String> = v
                    .iter()
                    .map(|&(_, t)| if t == usize::MAX { "none".into() } else { t.to_string() })
                    .collect();
                rows.push((format!("loss_time_order_tau_{tau}"), times.join(" "), pass(ok)));
            }
        }
        None => missing(&mut rows, "loss_time_order", "loss_times.csv"),
    }
    match read_csv(dir, "dominance.csv") {
        Some(lines) => {
            let ok = lines.iter().all(|l| l.get(2).map(String::as_str) == Some("true"));
            rows.push(("granularity_dominance_chain".into(), format!("{} links", lines.len()), pass(ok)));
        }
        None => missing(&mut rows, "granularity_dominance_chain", "dominance.csv"),
    }
    match read_csv(dir, "compensation.csv") {
        Some(lines) => {
            let worse: Vec<String> = lines
                .iter()
                .filter(|l| {
                    let b: f64 = l[3].parse().unwrap_or(f64::NAN);
                    let o: f64 = l[4].parse().unwrap_or(f64::NAN);
                    o.is_nan() || b.is_nan() || o >= b
                })
                .map(|l| l[0].clone())
                .collect();
            let value = if worse.is_empty() {
                "all deciles below baseline".to_string()
            } else {
                format!("deciles not below baseline: {}", worse.join(" "))
            };
            rows.push(("compensation_every_decile".into(), value, pass(worse.is_empty())));
        }
        None => missing(&mut rows, "compensation_every_decile", "compensation.csv"),
    }
    match (read_csv(dir, "probe_diti.csv"), read_csv(dir, "probe_pixel.csv")) {
        (Some(a), Some(b)) => {
            for (x, y) in a.iter().zip(&b) {
                let (p, q): (f64, f64) = (x[1].parse().unwrap_or(f64::NAN), y[1].parse().unwrap_or(f64::NAN));
                rows.push((format!("probe_ap_{}", x[0]), format!("diti {p:.4} pixel {q:.4}"), pass(p > q)));
            }
        }
        _ => missing(&mut rows, "probe_ap", "probe_diti.csv/probe_pixel.csv"),
    }
    match read_csv(dir, "alignment_test.csv") {
        Some(lines) => {
            let get = |k: &str| {
                lines
                    .iter()
                    .find(|l| l[0] == k)
                    .and_then(|l| l[1].parse::<f64>().ok())
                    .unwrap_or(f64::NAN)
            };
            let (rho, p) = (get("spearman_rho"), get("permutation_p"));
            rows.push(("subset_alignment".into(), format!("rho {rho:.3} p {p:.4}"), pass(rho > 0.0 && p < 0.05)));
        }
        None => missing(&mut rows, "subset_alignment", "alignment_test.csv"),
    }
    rows
}

fn report_stage(_cfg: &ExperimentConfig, out: &mut Outputs<'_>) -> Result<()> {
    let mut csv = String::from("check,value,status\n");
    for (c, v, s) in summarize(out.dir) {
        let _ = writeln!(csv, "{c},{v},{s}");
    }
    out.text("acceptance_summary.csv", &csv)
}

/// Reads the header of any checkpoint, for diagnostics.
pub fn checkpoint_header(path: &Path) -> Result<Header> {
    Ok(Checkpoint::load(path)?.header)
}

/// Runs every stage in order with both generation modes.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<StageOutcome>> {
    let mut outcomes = Vec::new();
    for stage in [
        Stage::GenData,
        Stage::TrainDm,
        Stage::TrainDiti,
        Stage::VerifyTheory,
        Stage::Probe,
    ] {
        outcomes.push(run_stage(stage, cfg, &StageOptions::default())?);
    }
    for mode in [GenerateMode::Interpolate, GenerateMode::Manipulate] {
        let opts = StageOptions {
            mode: Some(mode),
            ..StageOptions::default()
        };
        outcomes.push(run_stage(Stage::Generate, cfg, &opts)?);
    }
    outcomes.push(run_stage(Stage::Report, cfg, &StageOptions::default())?);
    Ok(outcomes)
}

/// Small test-friendly copy of `base` pinned to a tiny budget.
pub fn tiny(mut base: ExperimentConfig) -> ExperimentConfig {
    let small = NetConfig {
        hidden: vec![32, 32],
        ..NetConfig::default()
    };
    base.dataset.n_samples = 200;
    base.dm.net = small.clone();
    base.dm.optim.iterations = 30;
    base.diti.encoder = small.clone();
    base.diti.decoder = small;
    base.diti.optim.iterations = 30;
    base.theory.n_pairs = 50;
    base.theory.mc_per_pair = 2;
    base.generate.sampling_steps = 6;
    base.generate.n_images = 2;
    base.generate.interp_lambdas = vec![0.0, 1.0];
    base.generate.manip_lambdas = vec![-1.0, 1.0];
    base.generate.subsets = vec![1, 8];
    base.probe.iterations = 100;
    base
}
