//! Experiment configuration and the pipeline stages behind the command line.
//!
//! Every stage reads its upstream artifacts from the output directory, writes
//! its own artifacts next to a TOML manifest that records the resolved
//! configuration and the SHA-256 of every input file, and is deterministic
//! given the configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use restore_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{run_attack, AttackConfig, BudgetGradient, Variant};
use crate::data::{build_dataset, derive_seed, Dataset, DatasetManifest, DatasetParams, Split};
use crate::diffusion::DdimSubsequence;
use crate::error::{io_err, Error, Result};
use crate::facerec::{
    adversarial_finetune, embedding_distance, train_fr_model, verification_accuracy, EmbeddingModel, FrArchitecture,
    FrTraining, Role, VerificationThreshold,
};
use crate::io::{
    file_digest, load_checkpoint, read_manifest, save_checkpoint, save_image, save_tensor, to_manifest, write_manifest,
};
use crate::metrics::{
    emit_report, psnr, AsrReport, AsrTable, CurvePoint, IterationCurve, QualityReport, QualityRow, BENIGN_ROW,
};
use crate::rldm::{
    train_autoencoder, train_rldm, Autoencoder, AutoencoderConfig, AutoencoderTraining, Rldm, RldmTraining,
    ScheduleConfig, UnetConfig,
};

const STAGE_AUTOENCODER: u64 = 1;
const STAGE_RLDM: u64 = 2;
const STAGE_FR: u64 = 3;
const STAGE_ROBUST: u64 = 4;
const STAGE_ATTACK: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrSettings {
    pub training: FrTraining,
    pub surrogate_arch_seed: u64,
    /// One victim per entry; each seed selects a distinct architecture.
    pub victim_arch_seeds: Vec<u64>,
    /// False accept rate used to calibrate every threshold.
    pub far: f64,
    /// Adversarial fine-tuning of the robust victims.
    pub robust_training: FrTraining,
    pub robust_rho: f64,
}

impl Default for FrSettings {
    fn default() -> Self {
        Self {
            training: FrTraining::default(),
            surrogate_arch_seed: 3,
            victim_arch_seeds: vec![22, 33],
            far: 0.01,
            robust_training: FrTraining {
                steps: 200,
                lr: 1e-3,
                ..FrTraining::default()
            },
            robust_rho: 8.0 / 255.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub beta: f64,
    pub n_max: usize,
    pub rho: f64,
    pub dropout: f64,
    pub budget_gradient: BudgetGradient,
    /// Variants run by the attack stage, reported in table order.
    pub variants: Vec<Variant>,
    /// Spacing of the success-rate-per-iteration table.
    pub curve_stride: usize,
}

impl Default for AttackSettings {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            beta: a.beta,
            n_max: a.n_max,
            rho: a.rho,
            dropout: a.dropout,
            budget_gradient: a.budget_gradient,
            variants: Variant::ALL.to_vec(),
            curve_stride: 10,
        }
    }
}

impl AttackSettings {
    pub fn config(&self, variant: Variant, seed: u64) -> AttackConfig {
        AttackConfig {
            beta: self.beta,
            n_max: self.n_max,
            rho: self.rho,
            seed,
            variant,
            dropout: self.dropout,
            budget_gradient: self.budget_gradient,
        }
    }
}

/// Everything that determines an experiment's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetParams,
    pub autoencoder: AutoencoderConfig,
    pub autoencoder_training: AutoencoderTraining,
    pub unet: UnetConfig,
    pub schedule: ScheduleConfig,
    pub rldm_training: RldmTraining,
    pub fr: FrSettings,
    pub attack: AttackSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("advrestore-out"),
            dataset: DatasetParams::default(),
            autoencoder: AutoencoderConfig::default(),
            autoencoder_training: AutoencoderTraining::default(),
            unet: UnetConfig::default(),
            schedule: ScheduleConfig::default(),
            rldm_training: RldmTraining::default(),
            fr: FrSettings::default(),
            attack: AttackSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml(&self) -> Result<String> {
        to_manifest(self)
    }

    /// Hex SHA-256 of the serialised configuration.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        for &v in &self.attack.variants {
            self.attack
                .config(v, 0)
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.attack.variants.is_empty() {
            return Err(Error::Config("attack.variants is empty".into()));
        }
        if self.attack.curve_stride == 0 {
            return Err(Error::Config("attack.curve_stride must be positive".into()));
        }
        if self.fr.victim_arch_seeds.is_empty() {
            return Err(Error::Config("fr.victim_arch_seeds is empty".into()));
        }
        if !(self.fr.far > 0.0 && self.fr.far <= 1.0) {
            return Err(Error::Config(format!("fr.far {} outside (0, 1]", self.fr.far)));
        }
        if self.schedule.ddim_steps == 0 || self.schedule.ddim_steps > self.schedule.num_steps {
            return Err(Error::Config(format!(
                "schedule.ddim_steps {} outside 1..={}",
                self.schedule.ddim_steps, self.schedule.num_steps
            )));
        }
        Ok(())
    }
}

/// File locations inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.root.join("data").join("manifest.toml")
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("data").join("images")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn autoencoder(&self) -> PathBuf {
        self.checkpoints().join("autoencoder.ckpt")
    }

    pub fn rldm(&self) -> PathBuf {
        self.checkpoints().join("rldm.ckpt")
    }

    pub fn fr_model(&self, name: &str) -> PathBuf {
        self.checkpoints().join(format!("{name}.ckpt"))
    }

    pub fn stage_manifest(&self, stage: &str) -> PathBuf {
        self.checkpoints().join(format!("{stage}.toml"))
    }

    pub fn attack_dir(&self, variant: Variant) -> PathBuf {
        self.root.join("attacks").join(variant.flag())
    }

    pub fn attack_results(&self, variant: Variant) -> PathBuf {
        self.attack_dir(variant).join("results.toml")
    }

    pub fn adversarial_tensor(&self, variant: Variant, pair: usize) -> PathBuf {
        self.attack_dir(variant).join(format!("pair-{pair:03}.tensor"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn report_manifest(&self) -> PathBuf {
        self.root.join("report.toml")
    }

    /// Path relative to the output directory, for manifests.
    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }
}

pub const SURROGATE: &str = "surrogate";

pub fn victim_name(k: usize) -> String {
    format!("victim-{}", k + 1)
}

pub fn robust_victim_name(k: usize) -> String {
    format!("victim-{}-adv", k + 1)
}

/// Checkpoint paths that replace the defaults of the output layout.
#[derive(Debug, Clone, Default)]
pub struct ModelOverrides {
    pub surrogate: Option<PathBuf>,
    pub victims: Option<Vec<PathBuf>>,
}

/// Exclusive ownership of an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let path = root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::Io { path, source: e }),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DataStageManifest {
    config: ExperimentConfig,
    mean_degraded_psnr: f64,
    dataset: DatasetManifest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutoencoderSummary {
    pub final_loss: f64,
    /// Mean reconstruction PSNR on the test split.
    pub test_psnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RldmSummary {
    pub final_loss: f64,
    /// Mean PSNR against the ground truth on the test split.
    pub restored_psnr: f64,
    pub degraded_psnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrModelSummary {
    pub name: String,
    pub architecture: FrArchitecture,
    pub threshold: VerificationThreshold,
    /// Verification accuracy on the test genuine and impostor pairs.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageManifest<T> {
    config: ExperimentConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    summary: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrStageSummary {
    models: Vec<FrModelSummary>,
}

/// Per-pair record of the attack stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub pair: usize,
    pub source: usize,
    pub target: usize,
    pub seed: u64,
    pub iterations_run: usize,
    pub budget_linf: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Clean-surrogate distance to the target after each update.
    pub distance_trace: Vec<f64>,
}

/// `results.toml` of one attack variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackStageManifest {
    pub config: ExperimentConfig,
    pub inputs: BTreeMap<String, String>,
    pub attack: AttackConfig,
    pub pairs: Vec<PairResult>,
}

/// Machine-readable counterpart of `report.txt`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportManifest {
    pub config: ExperimentConfig,
    pub inputs: BTreeMap<String, String>,
    pub models: Vec<FrModelSummary>,
    pub quality: Vec<QualityRow>,
    pub asr: Vec<AsrTable>,
    pub curve: IterationCurve,
}

/// An experiment bound to its output directory, which it locks.
#[derive(Debug)]
pub struct Experiment {
    config: ExperimentConfig,
    layout: Layout,
    _lock: OutputLock,
}

impl Experiment {
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config.out.clone());
        let lock = OutputLock::acquire(layout.root())?;
        Ok(Self {
            config,
            layout,
            _lock: lock,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn digests(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        let mut m = BTreeMap::new();
        for p in paths {
            m.insert(self.layout.rel(p), file_digest(p)?);
        }
        Ok(m)
    }

    /// Generates the dataset and writes its manifest and PGM images.
    pub fn gen_data(&self) -> Result<Dataset> {
        let ds = build_dataset(self.config.seed, &self.config.dataset)?;
        let dir = self.layout.images_dir();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut total = 0.0;
        for (i, r) in ds.records.iter().enumerate() {
            let stem = format!("{i:04}-id{:02}-v{:02}", r.identity, r.variant);
            save_image(dir.join(format!("{stem}-hq.pgm")), &r.hq)?;
            save_image(dir.join(format!("{stem}-degraded.pgm")), &r.degraded)?;
            total += psnr(&r.degraded, &r.hq, 1.0)?;
        }
        write_manifest(
            self.layout.data_manifest(),
            &DataStageManifest {
                config: self.config.clone(),
                mean_degraded_psnr: total / ds.records.len() as f64,
                dataset: ds.manifest.clone(),
            },
        )?;
        Ok(ds)
    }

    /// Regenerates the dataset and checks it against the recorded manifest.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let recorded: DataStageManifest = read_manifest(self.layout.data_manifest())?;
        let ds = build_dataset(self.config.seed, &self.config.dataset)?;
        if ds.manifest != recorded.dataset {
            return Err(Error::Config(format!(
                "{} was generated with a different seed or dataset section; rerun gen-data",
                self.layout.data_manifest().display()
            )));
        }
        Ok(ds)
    }

    pub fn train_autoencoder(&self) -> Result<AutoencoderSummary> {
        let ds = self.load_dataset()?;
        let train: Vec<Tensor> = ds.split(Split::Train).map(|r| r.hq.clone()).collect();
        let (ae, losses) = train_autoencoder(
            &train,
            self.config.autoencoder.clone(),
            &self.config.autoencoder_training,
            derive_seed(self.config.seed, STAGE_AUTOENCODER, 0),
        )?;
        let mut total = 0.0;
        let test: Vec<&Tensor> = ds.split(Split::Test).map(|r| &r.hq).collect();
        for x in &test {
            total += psnr(&ae.decode(&ae.encode(x)?)?, x, 1.0)?;
        }
        let summary = AutoencoderSummary {
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
            test_psnr: total / test.len() as f64,
        };
        self.save_stage(
            "autoencoder",
            &self.layout.autoencoder(),
            &ae.to_checkpoint()?,
            &[self.layout.data_manifest()],
            summary.clone(),
        )?;
        Ok(summary)
    }

    pub fn train_rldm(&self) -> Result<RldmSummary> {
        let ds = self.load_dataset()?;
        let ae = Autoencoder::from_checkpoint(&load_checkpoint(self.layout.autoencoder())?)?;
        let train: Vec<_> = ds.split(Split::Train).collect();
        let hq: Vec<Tensor> = train.iter().map(|r| r.hq.clone()).collect();
        let degraded: Vec<Tensor> = train.iter().map(|r| r.degraded.clone()).collect();
        let seed = derive_seed(self.config.seed, STAGE_RLDM, 0);
        let (model, losses) = train_rldm(
            ae,
            &hq,
            &degraded,
            self.config.unet.clone(),
            self.config.schedule.clone(),
            &self.config.rldm_training,
            seed,
        )?;
        let (mut restored, mut baseline, mut n) = (0.0, 0.0, 0.0);
        for (k, r) in ds.split(Split::Test).enumerate() {
            let x_bar = model.restore(&r.degraded, derive_seed(seed, 1, k as u64))?.image;
            restored += psnr(&x_bar, &r.hq, 1.0)?;
            baseline += psnr(&r.degraded, &r.hq, 1.0)?;
            n += 1.0;
        }
        let tail = &losses[losses.len().saturating_sub(100)..];
        let summary = RldmSummary {
            final_loss: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
            restored_psnr: restored / n,
            degraded_psnr: baseline / n,
        };
        self.save_stage(
            "rldm",
            &self.layout.rldm(),
            &model.to_checkpoint()?,
            &[self.layout.data_manifest(), self.layout.autoencoder()],
            summary.clone(),
        )?;
        Ok(summary)
    }

    fn save_stage<T: Serialize>(
        &self,
        stage: &str,
        path: &Path,
        ckpt: &crate::io::Checkpoint,
        inputs: &[PathBuf],
        summary: T,
    ) -> Result<()> {
        let dir = self.layout.checkpoints();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let digest = save_checkpoint(path, ckpt)?;
        write_manifest(
            self.layout.stage_manifest(stage),
            &StageManifest {
                config: self.config.clone(),
                inputs: self.digests(inputs)?,
                outputs: BTreeMap::from([(self.layout.rel(path), digest)]),
                summary,
            },
        )
    }

    /// Trains the surrogate, the victims and their adversarially fine-tuned
    /// counterparts, calibrating every threshold on test impostor pairs.
    pub fn train_fr(&self) -> Result<Vec<FrModelSummary>> {
        let ds = self.load_dataset()?;
        let fr = &self.config.fr;
        let train: Vec<_> = ds.split(Split::Train).collect();
        let images: Vec<Tensor> = train.iter().map(|r| r.hq.clone()).collect();
        let labels: Vec<usize> = train.iter().map(|r| r.identity).collect();
        let seed = |stage: u64, k: u64| derive_seed(self.config.seed, stage, k);

        let mut models = vec![train_fr_model(
            SURROGATE,
            &images,
            &labels,
            Role::Surrogate,
            fr.surrogate_arch_seed,
            &fr.training,
            seed(STAGE_FR, 0),
        )?];
        for (k, &arch) in fr.victim_arch_seeds.iter().enumerate() {
            let victim = train_fr_model(
                &victim_name(k),
                &images,
                &labels,
                Role::Victim,
                arch,
                &fr.training,
                seed(STAGE_FR, k as u64 + 1),
            )?;
            let mut robust = adversarial_finetune(
                &victim,
                &images,
                &labels,
                fr.robust_rho,
                &fr.robust_training,
                seed(STAGE_ROBUST, k as u64),
            )?;
            robust.rename(robust_victim_name(k));
            models.push(victim);
            models.push(robust);
        }

        let dir = self.layout.checkpoints();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut summaries = Vec::with_capacity(models.len());
        let mut outputs = BTreeMap::new();
        for mut m in models {
            let summary = calibrate_model(&mut m, &ds, fr.far)?;
            let path = self.layout.fr_model(&summary.name);
            outputs.insert(self.layout.rel(&path), save_checkpoint(&path, &m.to_checkpoint()?)?);
            summaries.push(summary);
        }
        write_manifest(
            self.layout.stage_manifest("fr"),
            &StageManifest {
                config: self.config.clone(),
                inputs: self.digests(&[self.layout.data_manifest()])?,
                outputs,
                summary: FrStageSummary {
                    models: summaries.clone(),
                },
            },
        )?;
        Ok(summaries)
    }

    fn surrogate_path(&self, o: &ModelOverrides) -> PathBuf {
        o.surrogate.clone().unwrap_or_else(|| self.layout.fr_model(SURROGATE))
    }

    fn victim_paths(&self, o: &ModelOverrides) -> Vec<PathBuf> {
        o.victims.clone().unwrap_or_else(|| {
            (0..self.config.fr.victim_arch_seeds.len())
                .map(|k| self.layout.fr_model(&victim_name(k)))
                .collect()
        })
    }

    fn robust_paths(&self) -> Vec<PathBuf> {
        (0..self.config.fr.victim_arch_seeds.len())
            .map(|k| self.layout.fr_model(&robust_victim_name(k)))
            .collect()
    }

    /// Restoration model with the configured DDIM sub-schedule.
    pub fn load_rldm(&self) -> Result<Rldm> {
        let mut model = Rldm::from_checkpoint(&load_checkpoint(self.layout.rldm())?)?;
        let trained = model.schedule_config();
        let s = &self.config.schedule;
        if (trained.num_steps, trained.beta_start, trained.beta_end) != (s.num_steps, s.beta_start, s.beta_end) {
            return Err(Error::Config(format!(
                "schedule differs from the one the restoration model was trained with ({trained:?})"
            )));
        }
        if model.subsequence().len() != s.ddim_steps {
            model.set_subsequence(DdimSubsequence::evenly_spaced(s.num_steps, s.ddim_steps)?)?;
        }
        Ok(model)
    }

    /// Runs every configured variant on every attack pair.
    pub fn attack(&self, overrides: &ModelOverrides) -> Result<BTreeMap<Variant, Vec<PairResult>>> {
        let ds = self.load_dataset()?;
        let surrogate_path = self.surrogate_path(overrides);
        let surrogate = load_fr(&surrogate_path)?;
        let needs_rldm = self.config.attack.variants.iter().any(|v| v.is_advrestore());
        let rldm = if needs_rldm { Some(self.load_rldm()?) } else { None };
        let mut inputs = vec![self.layout.data_manifest(), surrogate_path];
        if needs_rldm {
            inputs.push(self.layout.rldm());
        }
        let inputs = self.digests(&inputs)?;

        let mut all = BTreeMap::new();
        for &variant in &self.config.attack.variants {
            let dir = self.layout.attack_dir(variant);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let mut pairs = Vec::with_capacity(ds.manifest.attack_pairs.len());
            let mut traces = Vec::with_capacity(pairs.capacity());
            for (k, ap) in ds.manifest.attack_pairs.iter().enumerate() {
                let seed = derive_seed(self.config.seed, STAGE_ATTACK, k as u64);
                let cfg = self.config.attack.config(variant, seed);
                let x_s = &ds.records[ap.source].degraded;
                let x_t = &ds.records[ap.target].hq;
                let result = match &rldm {
                    Some(r) => run_attack(x_s, x_t, r, &surrogate, &cfg)?,
                    None => crate::attack::fim_attack(x_s, x_t, &surrogate, &cfg)?,
                };
                save_image(dir.join(format!("pair-{k:03}.pgm")), &result.x_adv)?;
                save_tensor(self.layout.adversarial_tensor(variant, k), &result.x_adv)?;
                pairs.push(PairResult {
                    pair: k,
                    source: ap.source,
                    target: ap.target,
                    seed,
                    iterations_run: result.iterations_run,
                    budget_linf: result.budget_linf,
                    initial_loss: result.loss_trace.first().copied().unwrap_or(f64::NAN),
                    final_loss: result.loss_trace.last().copied().unwrap_or(f64::NAN),
                    distance_trace: result.distance_trace,
                });
                traces.push(result.loss_trace);
            }
            write_text(&dir.join("loss_trace.tsv"), &loss_table(&traces))?;
            write_manifest(
                self.layout.attack_results(variant),
                &AttackStageManifest {
                    config: self.config.clone(),
                    inputs: inputs.clone(),
                    attack: self.config.attack.config(variant, self.config.seed),
                    pairs: pairs.clone(),
                },
            )?;
            all.insert(variant, pairs);
        }
        Ok(all)
    }

    /// Scores the attack outputs and writes `report.txt` and `report.toml`.
    pub fn evaluate(&self, overrides: &ModelOverrides) -> Result<String> {
        let ds = self.load_dataset()?;
        let surrogate_path = self.surrogate_path(overrides);
        let victim_paths = self.victim_paths(overrides);
        let robust_paths: Vec<PathBuf> = self.robust_paths().into_iter().filter(|p| p.exists()).collect();
        let surrogate = load_fr(&surrogate_path)?;
        let victims = victim_paths.iter().map(|p| load_fr(p)).collect::<Result<Vec<_>>>()?;
        let robust = robust_paths.iter().map(|p| load_fr(p)).collect::<Result<Vec<_>>>()?;

        let mut input_paths = vec![self.layout.data_manifest(), surrogate_path];
        if self.layout.rldm().exists() {
            input_paths.push(self.layout.rldm());
        }
        input_paths.extend(victim_paths.iter().cloned());
        input_paths.extend(robust_paths.iter().cloned());

        let variants: Vec<Variant> = Variant::ALL
            .into_iter()
            .filter(|v| self.config.attack.variants.contains(v))
            .collect();
        let mut outputs: Vec<(Variant, Vec<PairResult>, Vec<Tensor>)> = Vec::new();
        for &v in &variants {
            let manifest: AttackStageManifest = read_manifest(self.layout.attack_results(v))?;
            input_paths.push(self.layout.attack_results(v));
            let mut images = Vec::with_capacity(manifest.pairs.len());
            for p in &manifest.pairs {
                let path = self.layout.adversarial_tensor(v, p.pair);
                if !path.exists() {
                    return Err(Error::MissingArtifact(path));
                }
                images.push(crate::io::load_tensor(&path)?);
                input_paths.push(path);
            }
            outputs.push((v, manifest.pairs, images));
        }
        let inputs = self.digests(&input_paths)?;

        let pairs = &ds.manifest.attack_pairs;
        let sources: Vec<Tensor> = pairs.iter().map(|p| ds.records[p.source].degraded.clone()).collect();
        let source_hq: Vec<Tensor> = pairs.iter().map(|p| ds.records[p.source].hq.clone()).collect();
        let targets: Vec<Tensor> = pairs.iter().map(|p| ds.records[p.target].hq.clone()).collect();

        let mut quality = vec![QualityRow {
            label: BENIGN_ROW.into(),
            vs_source: QualityReport::compute("x^s", &sources, &sources)?,
            vs_hq: QualityReport::compute("x^hq", &sources, &source_hq)?,
        }];
        for (v, _, images) in &outputs {
            check_pair_count(*v, images.len(), pairs.len())?;
            quality.push(QualityRow {
                label: v.label().into(),
                vs_source: QualityReport::compute("x^s", images, &sources)?,
                vs_hq: QualityReport::compute("x^hq", images, &source_hq)?,
            });
        }

        let asr_table = |title: &str, models: &[&EmbeddingModel]| -> Result<AsrTable> {
            let mut rows = vec![(BENIGN_ROW.to_string(), asr_row(models, &sources, &targets)?)];
            for (v, _, images) in &outputs {
                rows.push((v.label().to_string(), asr_row(models, images, &targets)?));
            }
            Ok(AsrTable {
                title: title.into(),
                victims: models
                    .iter()
                    .map(|m| crate::facerec::Embedder::name(*m).to_string())
                    .collect(),
                rows,
            })
        };
        let mut normal: Vec<&EmbeddingModel> = vec![&surrogate];
        normal.extend(victims.iter());
        let mut asr = vec![asr_table(
            "Attack success rate (%) against normally trained models",
            &normal,
        )?];
        if !robust.is_empty() {
            let robust_refs: Vec<&EmbeddingModel> = robust.iter().collect();
            asr.push(asr_table(
                "Attack success rate (%) against adversarially trained victims",
                &robust_refs,
            )?);
        }

        let surrogate_threshold = threshold_of(&surrogate)?;
        let n_max = outputs
            .iter()
            .map(|(_, p, _)| p.iter().map(|r| r.iterations_run).max().unwrap_or(0))
            .max()
            .unwrap_or(0);
        let mut iterations: Vec<usize> = (0..=n_max).step_by(self.config.attack.curve_stride).collect();
        if iterations.last() != Some(&n_max) {
            iterations.push(n_max);
        }
        let curve = IterationCurve {
            labels: outputs.iter().map(|(v, _, _)| v.label().to_string()).collect(),
            points: iterations
                .into_iter()
                .map(|it| CurvePoint {
                    iteration: it,
                    asr: outputs
                        .iter()
                        .map(|(_, results, _)| {
                            let hits = results
                                .iter()
                                .filter(|r| {
                                    surrogate_threshold.accepts(r.distance_trace[it.min(r.distance_trace.len() - 1)])
                                })
                                .count();
                            100.0 * hits as f64 / results.len() as f64
                        })
                        .collect(),
                })
                .collect(),
        };

        let mut models = vec![model_summary(&surrogate, &ds)?];
        for m in victims.iter().chain(robust.iter()) {
            models.push(model_summary(m, &ds)?);
        }
        let config_text = self.config.to_toml()?;
        let mut header = String::new();
        let _ = writeln!(header, "AdvRestore evaluation report");
        let _ = writeln!(
            header,
            "seed {}  attack pairs {}  config sha256 {}",
            self.config.seed,
            pairs.len(),
            self.config.digest()?
        );
        header.push('\n');
        let _ = writeln!(header, "Face models (threshold at FAR {})", self.config.fr.far);
        let _ = writeln!(
            header,
            "{:<16} | {:<32} | {:>9} | {:>8}",
            "model", "kernels/widths", "threshold", "accuracy"
        );
        for m in &models {
            let arch = format!("{:?}/{:?}", m.architecture.kernels, m.architecture.widths);
            let _ = writeln!(
                header,
                "{:<16} | {:<32} | {:>9.4} | {:>7.1}%",
                m.name,
                arch,
                m.threshold.threshold,
                100.0 * m.accuracy
            );
        }
        let mut report = emit_report(&header, &quality, &asr, Some(&curve));
        report.push_str("\nInputs (sha256; per-pair tensors are listed in report.toml)\n");
        for (path, digest) in inputs.iter().filter(|(p, _)| !p.ends_with(".tensor")) {
            let _ = writeln!(report, "{digest}  {path}");
        }
        report.push_str("\nResolved configuration\n");
        report.push_str(&config_text);

        write_text(&self.layout.report(), &report)?;
        write_manifest(
            self.layout.report_manifest(),
            &ReportManifest {
                config: self.config.clone(),
                inputs,
                models,
                quality,
                asr,
                curve,
            },
        )?;
        Ok(report)
    }

    /// Runs every stage in order and returns the report text.
    pub fn reproduce_report(&self) -> Result<String> {
        self.gen_data()?;
        self.train_autoencoder()?;
        self.train_rldm()?;
        self.train_fr()?;
        let defaults = ModelOverrides::default();
        self.attack(&defaults)?;
        self.evaluate(&defaults)
    }
}

fn load_fr(path: &Path) -> Result<EmbeddingModel> {
    EmbeddingModel::from_checkpoint(&load_checkpoint(path)?)
}

fn threshold_of(m: &EmbeddingModel) -> Result<VerificationThreshold> {
    m.threshold().ok_or_else(|| {
        Error::Config(format!(
            "model {} has no calibrated threshold",
            crate::facerec::Embedder::name(m)
        ))
    })
}

fn check_pair_count(v: Variant, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Config(format!(
            "{} results cover {got} pairs but the dataset has {want}; rerun attack",
            v.flag()
        )));
    }
    Ok(())
}

fn all_hq(ds: &Dataset) -> Vec<Tensor> {
    ds.records.iter().map(|r| r.hq.clone()).collect()
}

fn pairs_of(p: &[crate::data::Pair]) -> Vec<(usize, usize)> {
    p.iter().map(|p| (p.a, p.b)).collect()
}

/// Calibrates `m` on the test impostor pairs and measures its accuracy.
fn calibrate_model(m: &mut EmbeddingModel, ds: &Dataset, far: f64) -> Result<FrModelSummary> {
    m.calibrate(&all_hq(ds), &pairs_of(&ds.manifest.impostor_pairs), far)?;
    model_summary(m, ds)
}

fn model_summary(m: &EmbeddingModel, ds: &Dataset) -> Result<FrModelSummary> {
    let images = all_hq(ds);
    let threshold = threshold_of(m)?;
    let genuine = m.pair_distances(&images, &pairs_of(&ds.manifest.genuine_pairs))?;
    let impostor = m.pair_distances(&images, &pairs_of(&ds.manifest.impostor_pairs))?;
    Ok(FrModelSummary {
        name: crate::facerec::Embedder::name(m).to_string(),
        architecture: m.architecture().clone(),
        threshold,
        accuracy: verification_accuracy(&genuine, &impostor, &threshold),
    })
}

fn asr_row(models: &[&EmbeddingModel], images: &[Tensor], targets: &[Tensor]) -> Result<Vec<AsrReport>> {
    models
        .iter()
        .map(|m| {
            let t = threshold_of(m)?;
            let d = images
                .iter()
                .zip(targets)
                .map(|(x, y)| embedding_distance(&m.embed(x)?, &m.embed(y)?))
                .collect::<Result<Vec<f64>>>()?;
            AsrReport::from_distances(crate::facerec::Embedder::name(*m), &d, t.threshold)
        })
        .collect()
}

/// Tab-separated loss table: one row per iteration, one column per pair.
fn loss_table(traces: &[Vec<f64>]) -> String {
    let mut s = String::from("iteration");
    for k in 0..traces.len() {
        let _ = write!(s, "\tpair-{k:03}");
    }
    s.push('\n');
    let n = traces.iter().map(Vec::len).max().unwrap_or(0);
    for i in 0..n {
        let _ = write!(s, "{i}");
        for t in traces {
            match t.get(i) {
                Some(v) => {
                    let _ = write!(s, "\t{v:.10e}");
                }
                None => s.push('\t'),
            }
        }
        s.push('\n');
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_keeps_defaults_and_unknown_keys_fail() {
        let cfg = ExperimentConfig::from_toml("seed = 7\n[attack]\nn_max = 5\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.attack.n_max, 5);
        assert_eq!(cfg.attack.rho, AttackSettings::default().rho);
        assert!(matches!(
            ExperimentConfig::from_toml("sed = 7\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("[attack]\nrh = 0.1\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn variants_parse_from_flags() {
        let cfg = ExperimentConfig::from_toml("[attack]\nvariants = [\"dfanet\", \"advrestore-fim\"]\n").unwrap();
        assert_eq!(cfg.attack.variants, [Variant::Dfanet, Variant::AdvrestoreFim]);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.attack.rho = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.schedule.ddim_steps = 0;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert!(matches!(OutputLock::acquire(dir.path()), Err(Error::Locked(_))));
        drop(lock);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn missing_upstream_artifacts_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            out: dir.path().to_path_buf(),
            ..Default::default()
        };
        let exp = Experiment::open(cfg).unwrap();
        assert!(matches!(exp.train_autoencoder(), Err(Error::MissingArtifact(_))));
        assert!(matches!(
            exp.attack(&ModelOverrides::default()),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn loss_table_layout() {
        let t = loss_table(&[vec![1.0, 0.5], vec![2.0, 1.5]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "iteration\tpair-000\tpair-001");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0\t1.0000000000e0"));
    }
}
