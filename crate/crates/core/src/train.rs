//! Adversarial training: alternating discriminator and generator AdamW
//! steps per batch, per-epoch evaluation, checkpointing and
//! cross-validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fncgen_autodiff::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{named_tensors, Checkpoint, OptimBlock, RngState};
use crate::data::{stratified_kfold, Dataset, FoldSplit, SubjectRecord};
use crate::discriminator::{batch_matrices, Discriminator, PerceptualConfig, PerceptualNet, VitConfig2d};
use crate::error::{config_err, contract_err, Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::generator::{Generator, GeneratorConfig};
use crate::layers::ClassConditioning;
use crate::losses::{correlation_loss, d_loss, g_adv_loss, mse_loss, perceptual_loss, total_g_loss, LossBreakdown, LossWeights};
use crate::optim::{adamw_step, AdamWConfig, LrSchedule, OptimState};
use crate::seeds::derive_seed;
use crate::types::ClassLabel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub patch: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ffn_hidden: usize,
    pub fragment: usize,
    pub head_hidden: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            patch: g.patch,
            d_model: g.d_model,
            n_heads: g.n_heads,
            n_blocks: g.n_blocks,
            ffn_hidden: g.ffn_hidden,
            fragment: g.fragment,
            head_hidden: g.head_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitSection {
    pub patch: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ffn_hidden: usize,
}

impl VitSection {
    fn build(&self, fnc_order: usize) -> VitConfig2d {
        VitConfig2d {
            fnc_order,
            patch: self.patch,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_blocks: self.n_blocks,
            ffn_hidden: self.ffn_hidden,
        }
    }
}

impl Default for VitSection {
    fn default() -> Self {
        let d = VitConfig2d::default();
        Self {
            patch: d.patch,
            d_model: d.d_model,
            n_heads: d.n_heads,
            n_blocks: d.n_blocks,
            ffn_hidden: d.ffn_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualSection {
    pub net: VitSection,
    /// 1-based block indices averaged in the loss.
    pub blocks: Vec<usize>,
    pub seed: u64,
    /// Optional checkpoint whose `perc.*` tensors replace the seeded weights.
    pub weights: Option<PathBuf>,
}

impl Default for PerceptualSection {
    fn default() -> Self {
        let p = PerceptualConfig::default();
        Self {
            net: VitSection {
                n_blocks: p.net.n_blocks,
                ..VitSection::default()
            },
            blocks: p.blocks,
            seed: p.seed,
            weights: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub generator: GeneratorSection,
    pub discriminator: VitSection,
    pub perceptual: PerceptualSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub class_identifier: bool,
    pub use_corr_loss: bool,
    pub use_perceptual_loss: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            class_identifier: true,
            use_corr_loss: true,
            use_perceptual_loss: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adamw: AdamWConfig,
    pub ablation: AblationFlags,
    pub seed: u64,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 8,
            schedule: LrSchedule::default(),
            adamw: AdamWConfig::default(),
            ablation: AblationFlags::default(),
            seed: 1,
            folds: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return config_err("epochs and batch_size must be ≥ 1");
        }
        if self.folds < 2 {
            return config_err(format!("folds must be ≥ 2, got {}", self.folds));
        }
        self.schedule.validate()?;
        self.adamw.validate()
    }
}

/// Everything that determines a training run; its hash is stored in every
/// checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub volume_dims: [usize; 3],
    pub fnc_order: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub losses: LossWeights,
}

impl RunSpec {
    pub fn for_dataset(data: &Dataset, model: ModelConfig, train: TrainConfig, losses: LossWeights) -> Self {
        Self {
            volume_dims: data.volume_dims,
            fnc_order: data.fnc_order,
            model,
            train,
            losses,
        }
    }

    pub fn conditioning(&self) -> ClassConditioning {
        ClassConditioning::from_flag(self.train.ablation.class_identifier)
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let g = &self.model.generator;
        GeneratorConfig {
            volume_dims: self.volume_dims,
            patch: g.patch,
            d_model: g.d_model,
            n_heads: g.n_heads,
            n_blocks: g.n_blocks,
            ffn_hidden: g.ffn_hidden,
            fnc_order: self.fnc_order,
            fragment: g.fragment,
            head_hidden: g.head_hidden,
            conditioning: self.conditioning(),
        }
    }

    pub fn discriminator_config(&self) -> VitConfig2d {
        self.model.discriminator.build(self.fnc_order)
    }

    pub fn perceptual_config(&self) -> PerceptualConfig {
        let p = &self.model.perceptual;
        PerceptualConfig {
            net: p.net.build(self.fnc_order),
            blocks: p.blocks.clone(),
            seed: p.seed,
        }
    }

    /// Loss weights after ablation gating.
    pub fn weights(&self) -> LossWeights {
        let a = self.train.ablation;
        self.losses.gated(a.use_perceptual_loss, a.use_corr_loss)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.losses.validate()?;
        self.generator_config().validate()?;
        self.discriminator_config().validate()?;
        self.perceptual_config().validate()
    }

    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("run spec serializes");
        Sha256::digest(json).into()
    }

    pub fn fold_seed(&self, fold: usize) -> u64 {
        derive_seed(self.train.seed, fold as u64)
    }

    pub fn split(&self, data: &Dataset) -> Result<FoldSplit> {
        stratified_kfold(&data.labels(), self.train.folds, self.train.seed)
    }

    /// Rejects a dataset whose dimensions differ from the run's.
    pub fn check_dataset(&self, data: &Dataset, dir: &Path) -> Result<()> {
        if data.fnc_order != self.fnc_order {
            return Err(Error::format(
                dir.join("manifest.json"),
                format!("FNC order mismatch: expected {}, actual {}", self.fnc_order, data.fnc_order),
            ));
        }
        if data.volume_dims != self.volume_dims {
            return Err(Error::format(
                dir.join("manifest.json"),
                format!("volume dims mismatch: expected {:?}, actual {:?}", self.volume_dims, data.volume_dims),
            ));
        }
        Ok(())
    }

    /// Loads the generator stored in a checkpoint written by this run.
    pub fn load_generator(&self, ckpt: &Checkpoint, path: &Path) -> Result<Generator> {
        if ckpt.config_hash != self.hash() {
            return Err(Error::format(path, "checkpoint config hash does not match the run configuration"));
        }
        let mut gen = Generator::new(self.generator_config(), 0)?;
        gen.params_mut().load_values(&ckpt.tensors_with_prefix("gen"))?;
        Ok(gen)
    }
}

/// One line of the metric log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub d_loss: f64,
    pub g_gan: f64,
    pub g_mse: f64,
    pub g_perc: f64,
    pub g_corr: f64,
    pub g_total: f64,
    /// Held-out group-difference Pearson.
    pub eval_pearson: f64,
    /// Held-out group-difference cosine.
    pub eval_cosine: f64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log line serializes")
    }
}

fn check_finite(value: f64, term: &'static str, epoch: usize, batch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term, epoch, batch })
    }
}

/// Training state for one fold.
pub struct Trainer<'a> {
    spec: RunSpec,
    fold: usize,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    subjects: &'a [SubjectRecord],
    partition: crate::data::DomainPartition,
    patches: BTreeMap<usize, Tensor>,
    pub gen: Generator,
    pub disc: Discriminator,
    pub perc: PerceptualNet,
    pub g_opt: OptimState,
    pub d_opt: OptimState,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, split: &FoldSplit, fold: usize, spec: RunSpec) -> Result<Self> {
        spec.validate()?;
        if data.volume_dims != spec.volume_dims || data.fnc_order != spec.fnc_order {
            return Err(Error::Config(format!(
                "run expects volumes {:?} and order {}, dataset has {:?} and {}",
                spec.volume_dims, spec.fnc_order, data.volume_dims, data.fnc_order
            )));
        }
        let test_idx = split.test(fold)?.to_vec();
        let train_idx = split.train(fold)?;
        if train_idx.is_empty() || test_idx.is_empty() {
            return contract_err(format!("fold {fold} leaves an empty train or test set"));
        }
        let seed = spec.fold_seed(fold);
        let gen = Generator::new(spec.generator_config(), derive_seed(seed, 1))?;
        let disc = Discriminator::new(spec.discriminator_config(), spec.conditioning(), derive_seed(seed, 2))?;
        let mut perc = PerceptualNet::new(spec.perceptual_config())?;
        if let Some(path) = &spec.model.perceptual.weights {
            perc.load_weights(&Checkpoint::load(path)?.tensors_with_prefix("perc"))?;
        }
        let g_opt = OptimState::new(gen.params(), spec.train.adamw);
        let d_opt = OptimState::new(disc.params(), spec.train.adamw);
        let mut patches = BTreeMap::new();
        for &i in train_idx.iter().chain(&test_idx) {
            patches.insert(i, gen.patches(&data.subjects[i].volume)?);
        }
        Ok(Self {
            fold,
            train_idx,
            test_idx,
            subjects: &data.subjects,
            partition: data.partition.clone(),
            patches,
            gen,
            disc,
            perc,
            g_opt,
            d_opt,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 3)),
            epoch: 0,
            spec,
        })
    }

    /// Restores every network, optimizer and the shuffle stream.
    pub fn resume(data: &'a Dataset, split: &FoldSplit, fold: usize, spec: RunSpec, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config_hash != spec.hash() {
            return Err(Error::Contract("checkpoint was written by a different run configuration".into()));
        }
        let mut t = Self::new(data, split, fold, spec)?;
        t.gen.params_mut().load_values(&ckpt.tensors_with_prefix("gen"))?;
        t.disc.params_mut().load_values(&ckpt.tensors_with_prefix("disc"))?;
        t.perc = {
            let mut p = PerceptualNet::new(t.spec.perceptual_config())?;
            p.load_weights(&ckpt.tensors_with_prefix("perc"))?;
            p
        };
        t.g_opt = ckpt.optimizer("gen")?.restore(t.gen.params())?;
        t.d_opt = ckpt.optimizer("disc")?.restore(t.disc.params())?;
        t.rng = ckpt.rng.restore();
        t.epoch = ckpt.epoch as usize;
        Ok(t)
    }

    pub fn spec(&self) -> &RunSpec {
        &self.spec
    }

    pub fn fold(&self) -> usize {
        self.fold
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn test_subjects(&self) -> Vec<&'a SubjectRecord> {
        self.test_idx.iter().map(|&i| &self.subjects[i]).collect()
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = named_tensors("gen", self.gen.params());
        tensors.extend(named_tensors("disc", self.disc.params()));
        tensors.extend(named_tensors("perc", self.perc.params()));
        Ok(Checkpoint {
            config_hash: self.spec.hash(),
            epoch: self.epoch as u32,
            tensors,
            optimizers: vec![
                OptimBlock::capture("gen", self.gen.params(), &self.g_opt)?,
                OptimBlock::capture("disc", self.disc.params(), &self.d_opt)?,
            ],
            rng: RngState::capture(&self.rng),
        })
    }

    fn batch_inputs(&self, idx: &[usize]) -> Result<(Tensor, Tensor, Vec<ClassLabel>)> {
        let patches: Vec<&Tensor> = idx.iter().map(|i| &self.patches[i]).collect();
        let fncs: Vec<_> = idx.iter().map(|&i| &self.subjects[i].fnc).collect();
        let classes = idx.iter().map(|&i| self.subjects[i].class).collect();
        Ok((Generator::batch_patches(&patches)?, batch_matrices(&fncs)?, classes))
    }

    /// One discriminator step then one generator step on a batch.
    pub fn train_batch(&mut self, idx: &[usize], lr: f64, batch: usize) -> Result<(f64, LossBreakdown)> {
        let epoch = self.epoch;
        let w = self.spec.weights();
        let (x, y, classes) = self.batch_inputs(idx)?;
        let mut g = Graph::new();
        let gp = self.gen.params().bind(&mut g, true);
        let xv = g.constant(x);
        let yv = g.constant(y);
        let y_hat = self.gen.forward(&mut g, &gp, xv, &classes)?;

        let dp = self.disc.params().bind(&mut g, true);
        let fake = g.detach(y_hat);
        let real_logit = self.disc.forward(&mut g, &dp, yv, &classes)?;
        let fake_logit = self.disc.forward(&mut g, &dp, fake, &classes)?;
        let dl = d_loss(&mut g, real_logit, fake_logit)?;
        let d_value = check_finite(g.data(dl)[0], "discriminator", epoch, batch)?;
        g.backward(dl)?;
        self.disc.params_mut().clear_grads();
        self.disc.params_mut().accumulate_grads(&g, &dp)?;
        adamw_step(self.disc.params_mut(), &mut self.d_opt, lr)?;
        self.disc.params_mut().clear_grads();
        g.zero_grads();

        let dp = self.disc.params().bind(&mut g, false);
        let logit = self.disc.forward(&mut g, &dp, y_hat, &classes)?;
        let gan = g_adv_loss(&mut g, logit);
        let mut total = gan;
        let mut term = |g: &mut Graph, weight: f64, name: &'static str, f: &dyn Fn(&mut Graph) -> Result<Var>| -> Result<f64> {
            if weight <= 0.0 {
                return Ok(0.0);
            }
            let v = f(g)?;
            let value = check_finite(g.data(v)[0], name, epoch, batch)?;
            let scaled = g.scale(v, weight);
            total = g.add(total, scaled)?;
            Ok(value)
        };
        let mse = term(&mut g, w.lambda1, "mse", &|g| mse_loss(g, yv, y_hat))?;
        let perc = term(&mut g, w.lambda2, "perceptual", &|g| perceptual_loss(g, &self.perc, yv, y_hat))?;
        let corr = term(&mut g, w.lambda3, "correlation", &|g| correlation_loss(g, yv, y_hat))?;
        let gan_value = check_finite(g.data(gan)[0], "adversarial", epoch, batch)?;
        let breakdown = total_g_loss(gan_value, mse, perc, corr, &w)?;
        check_finite(g.data(total)[0], "generator total", epoch, batch)?;
        g.backward(total)?;
        self.gen.params_mut().clear_grads();
        self.gen.params_mut().accumulate_grads(&g, &gp)?;
        adamw_step(self.gen.params_mut(), &mut self.g_opt, lr)?;
        self.gen.params_mut().clear_grads();
        Ok((d_value, breakdown))
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        let mut report = evaluate(&self.gen, &self.test_subjects(), &self.partition)?;
        report.fold = Some(self.fold);
        report.config = serde_json::to_value(&self.spec).map_err(|e| Error::Contract(e.to_string()))?;
        report.seeds.insert("train".into(), self.spec.train.seed);
        report.seeds.insert("fold".into(), self.spec.fold_seed(self.fold));
        report.seeds.insert("perceptual".into(), self.spec.model.perceptual.seed);
        Ok(report)
    }

    /// Trains one epoch and evaluates on the held-out fold.
    pub fn run_epoch(&mut self) -> Result<(EpochLog, EvalReport)> {
        let lr = self.spec.train.schedule.at(self.epoch);
        let mut order = self.train_idx.clone();
        order.shuffle(&mut self.rng);
        let mut sums = [0.0; 6];
        let batches: Vec<Vec<usize>> = order.chunks(self.spec.train.batch_size).map(<[usize]>::to_vec).collect();
        for (b, idx) in batches.iter().enumerate() {
            let (d, parts) = self.train_batch(idx, lr, b)?;
            for (s, v) in sums.iter_mut().zip([d, parts.gan, parts.mse, parts.perceptual, parts.correlation, parts.total]) {
                *s += v;
            }
        }
        let nb = batches.len() as f64;
        let report = self.evaluate()?;
        let log = EpochLog {
            epoch: self.epoch,
            lr,
            d_loss: sums[0] / nb,
            g_gan: sums[1] / nb,
            g_mse: sums[2] / nb,
            g_perc: sums[3] / nb,
            g_corr: sums[4] / nb,
            g_total: sums[5] / nb,
            eval_pearson: report.group_diff_pearson.value,
            eval_cosine: report.group_diff_cosine.value,
        };
        self.epoch += 1;
        Ok((log, report))
    }
}

/// Receives progress during a fold.
pub trait FoldObserver: Sync {
    fn epoch_done(&self, _fold: usize, _log: &EpochLog, _trainer: &Trainer<'_>) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl FoldObserver for NoObserver {}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub log: Vec<EpochLog>,
    pub report: EvalReport,
    pub checkpoint: Checkpoint,
}

/// Trains one fold from scratch for the configured number of epochs.
pub fn train_fold(data: &Dataset, split: &FoldSplit, fold: usize, spec: &RunSpec, obs: &dyn FoldObserver) -> Result<FoldOutcome> {
    let trainer = Trainer::new(data, split, fold, spec.clone())?;
    continue_fold(trainer, obs)
}

/// Runs a trainer to the configured epoch count.
pub fn continue_fold(mut trainer: Trainer<'_>, obs: &dyn FoldObserver) -> Result<FoldOutcome> {
    let mut log = Vec::new();
    let mut last = None;
    while trainer.epoch() < trainer.spec().train.epochs {
        let (entry, report) = trainer.run_epoch()?;
        obs.epoch_done(trainer.fold(), &entry, &trainer)?;
        log.push(entry);
        last = Some(report);
    }
    let report = match last {
        Some(r) => r,
        None => trainer.evaluate()?,
    };
    Ok(FoldOutcome {
        fold: trainer.fold(),
        log,
        report,
        checkpoint: trainer.checkpoint()?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub group_diff_pearson: f64,
    pub group_diff_cosine: f64,
    pub mean_subject_pearson: f64,
    pub mean_subject_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldSummary>,
    pub group_diff_pearson: MeanStd,
    pub group_diff_cosine: MeanStd,
    pub mean_subject_pearson: MeanStd,
    pub mean_subject_cosine: MeanStd,
}

impl CvReport {
    pub fn from_reports(reports: &[(usize, &EvalReport)]) -> Self {
        let folds: Vec<FoldSummary> = reports
            .iter()
            .map(|(k, r)| FoldSummary {
                fold: *k,
                group_diff_pearson: r.group_diff_pearson.value,
                group_diff_cosine: r.group_diff_cosine.value,
                mean_subject_pearson: r.mean_subject_pearson,
                mean_subject_cosine: r.mean_subject_cosine,
            })
            .collect();
        let col = |f: fn(&FoldSummary) -> f64| MeanStd::of(&folds.iter().map(f).collect::<Vec<_>>());
        Self {
            group_diff_pearson: col(|f| f.group_diff_pearson),
            group_diff_cosine: col(|f| f.group_diff_cosine),
            mean_subject_pearson: col(|f| f.mean_subject_pearson),
            mean_subject_cosine: col(|f| f.mean_subject_cosine),
            folds,
        }
    }
}

/// Trains the given folds (all folds when `None`) on up to `jobs` threads.
/// Results are ordered by fold regardless of scheduling.
pub fn run_cv(
    data: &Dataset,
    spec: &RunSpec,
    folds: Option<&[usize]>,
    jobs: usize,
    obs: &dyn FoldObserver,
) -> Result<(Vec<FoldOutcome>, CvReport)> {
    spec.validate()?;
    let split = spec.split(data)?;
    let all: Vec<usize> = (0..split.k()).collect();
    let todo: Vec<usize> = folds.map_or(all, <[usize]>::to_vec);
    for &f in &todo {
        split.test(f)?;
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<FoldOutcome>)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, todo.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&fold) = todo.get(k) else { break };
                let out = train_fold(data, &split, fold, spec, obs);
                results.lock().expect("no poisoned lock").push((k, out));
            });
        }
    });
    let mut results = results.into_inner().expect("no poisoned lock");
    results.sort_by_key(|(k, _)| *k);
    let outcomes = results.into_iter().map(|(_, r)| r).collect::<Result<Vec<_>>>()?;
    let reports: Vec<(usize, &EvalReport)> = outcomes.iter().map(|o| (o.fold, &o.report)).collect();
    let agg = CvReport::from_reports(&reports);
    Ok((outcomes, agg))
}

/// Directory layout of a training run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    /// Resolved run specification, including the dataset dimensions.
    pub fn spec(&self) -> PathBuf {
        self.root.join("spec.json")
    }

    pub fn write_spec(&self, spec: &RunSpec) -> Result<()> {
        crate::data::write_json(&self.spec(), spec)
    }

    pub fn read_spec(&self) -> Result<RunSpec> {
        crate::data::read_json(&self.spec())
    }

    pub fn checkpoint(&self, fold: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("fold{fold}.ckpt"))
    }

    pub fn log(&self, fold: usize) -> PathBuf {
        self.root.join("logs").join(format!("fold{fold}.jsonl"))
    }

    pub fn report(&self, fold: usize) -> PathBuf {
        self.root.join("reports").join(format!("fold{fold}.json"))
    }

    pub fn aggregate(&self) -> PathBuf {
        self.root.join("reports").join("aggregate.json")
    }

    pub fn create(&self) -> Result<()> {
        for sub in ["checkpoints", "logs", "reports"] {
            let p = self.root.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Writes a fold's log, final checkpoint and report.
    pub fn write_fold(&self, out: &FoldOutcome) -> Result<()> {
        let text: String = out.log.iter().map(|l| l.to_json_line() + "\n").collect();
        let p = self.log(out.fold);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        out.checkpoint.save(&self.checkpoint(out.fold))?;
        out.report.write(&self.report(out.fold))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}
