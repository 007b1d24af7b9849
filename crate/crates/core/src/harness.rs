//! Joint training of quantiser and classifier, and the two-stage
//! colour-naming protocol (embed a human map, then evolve one extra colour).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::colour::RgbImage;
use crate::cqformer::{CqFormer, CqFormerConfig, EncoderConfig, PaletteMode};
use crate::dataset::{augment, epoch_rng, Dataset, Sample};
use crate::error::{config_err, Error, Result};
use crate::io::{Checkpoint, CheckpointManifest, CLASSIFIER, OPTIM_CLASSIFIER, OPTIM_QUANTISER, QUANTISER};
use crate::nn::{Binding, Schedule, Sgd};
use crate::objectives::{graph_central_term, graph_terms, ClusterCentroids, LossParts, LossWeights};
use crate::recognition::{evaluate_top1, ClassifierConfig, Quantiser, SmallCnn};
use crate::wcs::{build_machine_wcs_map, map_agreement, project_human_map, HumanWcsMap, MachineWcsMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerKind {
    Constant,
    CosineWarmRestarts,
}

/// Joint training settings. Serialised as flat TOML key-value pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub colours: usize,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub scheduler: SchedulerKind,
    /// Epochs per cosine cycle.
    pub restart_period: f64,
    pub min_lr: f64,
    pub seed: u64,
    pub query_dim: usize,
    pub encoder_widths: [usize; 3],
    pub classifier_widths: Vec<usize>,
    pub palette_mode: PaletteMode,
    pub augment: bool,
    /// Rescales the joint gradient to at most this global L2 norm; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            colours: 4,
            tau: 0.01,
            alpha: 1.0,
            beta: 0.3,
            gamma: 1.0,
            epochs: 60,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.5,
            weight_decay: 1e-3,
            scheduler: SchedulerKind::CosineWarmRestarts,
            restart_period: 10.0,
            min_lr: 0.0,
            seed: 0,
            query_dim: 64,
            encoder_widths: [24, 48, 96],
            classifier_widths: vec![32, 64, 128, 128],
            palette_mode: PaletteMode::Branch,
            augment: true,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta, gamma: self.gamma }
    }

    pub fn set_weights(&mut self, w: LossWeights) {
        (self.alpha, self.beta, self.gamma) = (w.alpha, w.beta, w.gamma);
    }

    pub fn schedule(&self) -> Schedule {
        match self.scheduler {
            SchedulerKind::Constant => Schedule::Constant,
            SchedulerKind::CosineWarmRestarts => Schedule::CosineWarmRestarts { period: self.restart_period, min_lr: self.min_lr },
        }
    }

    pub fn quantiser_config(&self) -> CqFormerConfig {
        CqFormerConfig {
            colours: self.colours,
            query_dim: self.query_dim,
            encoder: EncoderConfig::UNet { widths: self.encoder_widths },
            palette_mode: self.palette_mode,
            seed: self.seed,
        }
    }

    pub fn classifier_config(&self, num_classes: usize) -> ClassifierConfig {
        ClassifierConfig { num_classes, widths: self.classifier_widths.clone(), seed: self.seed.wrapping_add(1) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.colours == 0 || self.colours > 256 {
            return Err(config_err("colours must be in 1..=256"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(config_err(format!("tau must be positive, got {}", self.tau)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(config_err("grad_clip must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(config_err("momentum must be in [0, 1) and weight_decay non-negative"));
        }
        if self.scheduler == SchedulerKind::CosineWarmRestarts && !(self.restart_period > 0.0) {
            return Err(config_err("restart_period must be positive"));
        }
        if self.query_dim < 2 || self.encoder_widths.contains(&0) || self.classifier_widths.is_empty() || self.classifier_widths.contains(&0) {
            return Err(config_err("layer widths must be positive"));
        }
        self.weights().validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// What the quantiser is trained to minimise besides the task loss.
#[derive(Debug, Clone)]
pub enum Objective {
    /// `L_M + α·R_Colour + β·R_Diversity + γ·L_Perceptual`.
    Standard,
    /// `L_M` plus cross-entropy of `m_τ` against the projected human map.
    FullEmbedding(HumanWcsMap),
    /// `L_M` plus the colour term measured against fixed human centres.
    CentralEmbedding(ClusterCentroids),
}

/// Averages over one epoch's batches; `top1` on the held-out set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_m: f64,
    pub r_colour: f64,
    pub r_diversity: f64,
    pub l_perceptual: f64,
    pub l_total: f64,
    pub top1: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,L_M,R_Colour,R_Diversity,L_Perceptual,L_total,top1";

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in history {
        let top1 = m.top1.map(|t| t.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{},{},{}", m.epoch, m.l_m, m.r_colour, m.r_diversity, m.l_perceptual, m.l_total, top1);
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Per-epoch checkpoints land here as `epoch_NNN.cqck`.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Owns the parameters and optimiser state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub quantiser: CqFormer,
    pub classifier: SmallCnn,
    opt_q: Sgd,
    opt_c: Sgd,
    objective: Objective,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let quantiser = CqFormer::new(cfg.quantiser_config())?;
        let classifier = SmallCnn::new(cfg.classifier_config(num_classes))?;
        Self::from_parts(cfg, quantiser, classifier, Objective::Standard)
    }

    /// Continues from existing models with fresh optimiser state.
    pub fn from_parts(cfg: TrainConfig, quantiser: CqFormer, classifier: SmallCnn, objective: Objective) -> Result<Self> {
        cfg.validate()?;
        if let Objective::FullEmbedding(h) = &objective {
            if h.colours() != quantiser.colours() {
                return Err(config_err(format!("human map has {} terms, quantiser {} colours", h.colours(), quantiser.colours())));
            }
        }
        let opt_q = Sgd::new(quantiser.params(), cfg.momentum, cfg.weight_decay);
        let opt_c = Sgd::new(classifier.params(), cfg.momentum, cfg.weight_decay);
        Ok(Self { cfg, quantiser, classifier, opt_q, opt_c, objective, epoch: 0, history: Vec::new() })
    }

    pub fn set_objective(&mut self, objective: Objective) {
        self.objective = objective;
    }

    /// Restores models, momentum, epoch counter and metric history.
    pub fn resume(cfg: TrainConfig, ck: &Checkpoint, objective: Objective) -> Result<Self> {
        let quantiser = ck.quantiser()?;
        let classifier = ck.classifier()?.ok_or_else(|| Error::Format("checkpoint has no classifier".into()))?;
        let mut t = Self::from_parts(cfg, quantiser, classifier, objective)?;
        t.opt_q.set_velocity(ck.tensors_like(OPTIM_QUANTISER, t.quantiser.params())?);
        t.opt_c.set_velocity(ck.tensors_like(OPTIM_CLASSIFIER, t.classifier.params())?);
        t.epoch = ck.manifest.epoch;
        if let Some(h) = ck.manifest.extra.get("history") {
            t.history = serde_json::from_value(h.clone())?;
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CheckpointManifest {
            quantiser: self.quantiser.config().clone(),
            tau: self.cfg.tau,
            classifier: Some(self.classifier.config().clone()),
            epoch: self.epoch,
            extra: serde_json::json!({ "train_config": self.cfg, "history": self.history }),
        });
        ck.push_store(QUANTISER, self.quantiser.params());
        ck.push_store(CLASSIFIER, self.classifier.params());
        ck.push_tensors(OPTIM_QUANTISER, self.quantiser.params(), self.opt_q.velocity());
        ck.push_tensors(OPTIM_CLASSIFIER, self.classifier.params(), self.opt_c.velocity());
        ck
    }

    fn batch_objective(&self, g: &mut Graph, images: &[RgbImage], labels: &[usize]) -> Result<(Var, LossParts, Binding, Binding)> {
        let pq = self.quantiser.params().bind(g, true);
        let pc = self.classifier.params().bind(g, true);
        let fwd = self.quantiser.forward_train(g, &pq, images, self.cfg.tau)?;
        let logits = self.classifier.forward(g, &pc, fwd.quantised);
        let l_m = g.cross_entropy(logits, labels);
        let terms = graph_terms(g, &fwd, images);
        let w = self.cfg.weights();
        let (total, r_colour) = match &self.objective {
            Objective::Standard => (
                g.weighted_sum(&[(l_m, 1.0), (terms.r_colour, w.alpha), (terms.r_diversity, w.beta), (terms.l_perceptual, w.gamma)]),
                terms.r_colour,
            ),
            Objective::FullEmbedding(hmap) => {
                let c = hmap.colours();
                let hw = images[0].num_pixels();
                let target: Vec<f64> = images.iter().flat_map(|img| project_human_map(img, hmap).data).collect();
                let emb = g.soft_cross_entropy(fwd.pixel_logits, &Tensor::new(vec![images.len(), hw, c], target), 1.0 / self.cfg.tau);
                (g.weighted_sum(&[(l_m, 1.0), (emb, 1.0)]), terms.r_colour)
            }
            Objective::CentralEmbedding(centres) => {
                let rc = graph_central_term(g, fwd.probs, images, centres);
                (g.weighted_sum(&[(l_m, 1.0), (rc, 1.0)]), rc)
            }
        };
        let parts = LossParts {
            l_m: g.value(l_m).item(),
            r_colour: g.value(r_colour).item(),
            r_diversity: g.value(terms.r_diversity).item(),
            l_perceptual: g.value(terms.l_perceptual).item(),
        };
        Ok((total, parts, pq, pc))
    }

    /// Objective value on a batch without updating anything.
    pub fn evaluate_batch(&self, batch: &[&Sample]) -> Result<(f64, LossParts)> {
        let images: Vec<RgbImage> = batch.iter().map(|s| s.image.clone()).collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let mut g = Graph::new();
        let (total, parts, _, _) = self.batch_objective(&mut g, &images, &labels)?;
        Ok((g.value(total).item(), parts))
    }

    fn step(&mut self, images: &[RgbImage], labels: &[usize], lr: f64, step: usize) -> Result<(f64, LossParts)> {
        let mut g = Graph::new();
        let (total, parts, pq, pc) = self.batch_objective(&mut g, images, labels)?;
        let value = g.value(total).item();
        if !value.is_finite() {
            return Err(Error::Diverged { epoch: self.epoch, step, message: format!("objective is {value}") });
        }
        let grads = g.backward(total);
        let mut gq = pq.gradients(self.quantiser.params(), &grads);
        let mut gc = pc.gradients(self.classifier.params(), &grads);
        if self.cfg.grad_clip > 0.0 {
            let norm = gq.iter().chain(&gc).flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > self.cfg.grad_clip {
                let k = self.cfg.grad_clip / norm;
                for t in gq.iter_mut().chain(gc.iter_mut()) {
                    t.data_mut().iter_mut().for_each(|v| *v *= k);
                }
            }
        }
        if gq.iter().chain(&gc).any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { epoch: self.epoch, step, message: "non-finite gradient".into() });
        }
        self.opt_q.step(self.quantiser.params_mut(), &gq, lr);
        self.opt_c.step(self.classifier.params_mut(), &gc, lr);
        Ok((value, parts))
    }

    /// One pass over `train`; `top1` is measured on `test` when given.
    pub fn train_epoch(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(config_err("training set is empty"));
        }
        let order = train.epoch_order(self.cfg.seed, self.epoch);
        let mut aug_rng = epoch_rng(self.cfg.seed, self.epoch, 1);
        let batches = order.len().div_ceil(self.cfg.batch_size);
        let schedule = self.cfg.schedule();
        let mut sums = [0.0; 5];
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let images: Vec<RgbImage> = chunk
                .iter()
                .map(|&i| {
                    let img = &train.items()[i].image;
                    if self.cfg.augment { augment(img, &mut aug_rng) } else { img.clone() }
                })
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.items()[i].label).collect();
            let lr = schedule.lr(self.cfg.lr, self.epoch as f64 + b as f64 / batches as f64);
            let (total, p) = self.step(&images, &labels, lr, b)?;
            let n = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip([p.l_m, p.r_colour, p.r_diversity, p.l_perceptual, total]) {
                *s += v * n;
            }
        }
        let n = train.len() as f64;
        let top1 = match test {
            Some(t) if !t.is_empty() => Some(evaluate_top1(&self.classifier, Quantiser::Learned(&self.quantiser), t)?.top1),
            _ => None,
        };
        self.epoch += 1;
        let m = EpochMetrics {
            epoch: self.epoch,
            l_m: sums[0] / n,
            r_colour: sums[1] / n,
            r_diversity: sums[2] / n,
            l_perceptual: sums[3] / n,
            l_total: sums[4] / n,
            top1,
        };
        log::info!("epoch {} L_total {:.5} top1 {:?}", m.epoch, m.l_total, m.top1);
        self.history.push(m.clone());
        Ok(m)
    }

    /// Trains until `cfg.epochs` epochs are complete, checkpointing after
    /// each. On divergence a snapshot is written as `diverged.cqck`.
    pub fn run(&mut self, train: &Dataset, test: Option<&Dataset>, opts: &TrainOptions) -> Result<()> {
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
        }
        while self.epoch < self.cfg.epochs {
            match self.train_epoch(train, test) {
                Ok(_) => {
                    if let Some(dir) = &opts.checkpoint_dir {
                        self.checkpoint().save(&dir.join(format!("epoch_{:03}.cqck", self.epoch)))?;
                    }
                }
                Err(e @ Error::Diverged { .. }) => {
                    if let Some(dir) = &opts.checkpoint_dir {
                        self.checkpoint().save(&dir.join("diverged.cqck"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

/// Fresh joint training run.
pub fn train_joint(cfg: &TrainConfig, train: &Dataset, test: Option<&Dataset>, opts: &TrainOptions) -> Result<Trainer> {
    let mut t = Trainer::new(cfg.clone(), train.num_classes())?;
    t.run(train, test, opts)?;
    Ok(t)
}

/// Machine map of `quantiser` over `images`, quantised in batches.
pub fn machine_map(quantiser: &CqFormer, data: &Dataset) -> Result<MachineWcsMap> {
    let mut map = MachineWcsMap::new(quantiser.colours());
    for chunk in data.items().chunks(crate::recognition::EVAL_BATCH) {
        let images: Vec<RgbImage> = chunk.iter().map(|s| s.image.clone()).collect();
        for (img, (_, idx, _)) in images.iter().zip(quantiser.quantise_test_batch(&images)?) {
            map.add(img, &idx)?;
        }
    }
    Ok(map)
}

/// Loss terms active during the evolution stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossCombination {
    #[serde(rename = "m")]
    Machine,
    #[serde(rename = "m+div")]
    MachineDiversity,
    #[serde(rename = "m+colour+div+perceptual")]
    Full,
}

impl LossCombination {
    pub fn weights(self, full: LossWeights) -> LossWeights {
        match self {
            LossCombination::Machine => LossWeights::machine_only(),
            LossCombination::MachineDiversity => LossWeights { alpha: 0.0, beta: full.beta, gamma: 0.0 },
            LossCombination::Full => full,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossCombination::Machine => "m",
            LossCombination::MachineDiversity => "m+div",
            LossCombination::Full => "m+colour+div+perceptual",
        }
    }
}

impl FromStr for LossCombination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [LossCombination::Machine, LossCombination::MachineDiversity, LossCombination::Full]
            .into_iter()
            .find(|c| c.name() == s.to_ascii_lowercase())
            .ok_or_else(|| config_err(format!("unknown loss combination {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    /// Match the projected per-pixel human distributions.
    Full,
    /// Pull clusters towards fixed human (hue, value) centres.
    Central,
}

/// Settings of the embed-then-evolve protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    /// Term count of the embedded language.
    pub colours: usize,
    pub embedding_epochs: usize,
    pub evolution_epochs: usize,
    pub tau_embed: f64,
    pub embedding: EmbeddingKind,
    /// Term whose colour is cloned to seed the new one.
    pub parent_term: String,
    pub losses: LossCombination,
    /// Deviation of the clone perturbation.
    pub split_noise: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub restart_period: f64,
    pub seed: u64,
    pub query_dim: usize,
    pub encoder_widths: [usize; 3],
    pub classifier_widths: Vec<usize>,
    pub augment: bool,
    pub grad_clip: f64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            colours: 3,
            embedding_epochs: 40,
            evolution_epochs: 20,
            tau_embed: 1.0,
            embedding: EmbeddingKind::Full,
            parent_term: "wOO".into(),
            losses: LossCombination::Full,
            split_noise: 1e-3,
            alpha: t.alpha,
            beta: t.beta,
            gamma: t.gamma,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            restart_period: t.restart_period,
            seed: t.seed,
            query_dim: t.query_dim,
            encoder_widths: t.encoder_widths,
            classifier_widths: t.classifier_widths,
            augment: false,
            grad_clip: t.grad_clip,
        }
    }
}

impl EvolutionConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_noise >= 0.0) {
            return Err(config_err("split_noise must be non-negative"));
        }
        if self.parent_term.is_empty() {
            return Err(config_err("parent_term must name an embedded term"));
        }
        self.stage_config(self.colours, self.embedding_epochs.max(1), LossWeights::machine_only()).validate()
    }

    /// Training settings for one stage.
    pub fn stage_config(&self, colours: usize, epochs: usize, weights: LossWeights) -> TrainConfig {
        let mut t = TrainConfig {
            colours,
            tau: self.tau_embed,
            epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            scheduler: SchedulerKind::CosineWarmRestarts,
            restart_period: self.restart_period,
            min_lr: 0.0,
            seed: self.seed,
            query_dim: self.query_dim,
            encoder_widths: self.encoder_widths,
            classifier_widths: self.classifier_widths.clone(),
            palette_mode: PaletteMode::Branch,
            augment: self.augment,
            grad_clip: self.grad_clip,
            ..TrainConfig::default()
        };
        t.set_weights(weights);
        t
    }

    pub fn full_weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta, gamma: self.gamma }
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingOutcome {
    pub trainer: Trainer,
    pub machine_map: MachineWcsMap,
    pub agreement: f64,
    pub terms: Vec<String>,
}

/// Trains a `C`-colour quantiser to reproduce `hmap`.
pub fn run_embedding_stage(cfg: &EvolutionConfig, hmap: &HumanWcsMap, train: &Dataset) -> Result<EmbeddingOutcome> {
    cfg.validate()?;
    if cfg.colours != hmap.colours() {
        return Err(config_err(format!("configured {} colours but the human map has {} terms", cfg.colours, hmap.colours())));
    }
    let tc = cfg.stage_config(hmap.colours(), cfg.embedding_epochs.max(1), LossWeights::machine_only());
    let mut trainer = Trainer::new(tc, train.num_classes())?;
    trainer.set_objective(match cfg.embedding {
        EmbeddingKind::Full => Objective::FullEmbedding(hmap.clone()),
        EmbeddingKind::Central => Objective::CentralEmbedding(ClusterCentroids::from_human(&hmap.term_centres())?),
    });
    for _ in 0..cfg.embedding_epochs {
        trainer.train_epoch(train, None)?;
    }
    let machine_map = machine_map(&trainer.quantiser, train)?;
    let agreement = map_agreement(&machine_map, hmap)?;
    Ok(EmbeddingOutcome { trainer, machine_map, agreement, terms: hmap.terms().to_vec() })
}

#[derive(Debug, Clone)]
pub struct EvolutionReport {
    pub parent_term: String,
    pub parent_index: usize,
    pub new_index: usize,
    /// How the extra colour was seeded.
    pub mechanism: String,
    pub losses: LossCombination,
    pub pre_map: MachineWcsMap,
    pub post_map: MachineWcsMap,
    pub pre_shares: Vec<f64>,
    pub post_shares: Vec<f64>,
    pub new_colour_share: f64,
    /// Top-1 on the evaluation set after each evolution epoch.
    pub accuracy_trace: Vec<f64>,
    pub history: Vec<EpochMetrics>,
    pub trainer: Trainer,
}

impl EvolutionReport {
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "parent_term": self.parent_term,
            "parent_index": self.parent_index,
            "new_index": self.new_index,
            "mechanism": self.mechanism,
            "losses": self.losses.name(),
            "pre_shares": self.pre_shares,
            "post_shares": self.post_shares,
            "new_colour_share": self.new_colour_share,
            "accuracy_trace": self.accuracy_trace,
            "post_regions": self.post_map.regions().iter().map(Vec::len).collect::<Vec<_>>(),
        })
    }
}

/// Adds one colour cloned from the parent term and keeps training with the
/// selected loss combination.
pub fn run_evolution_stage(embedded: &EmbeddingOutcome, cfg: &EvolutionConfig, train: &Dataset, eval: Option<&Dataset>) -> Result<EvolutionReport> {
    cfg.validate()?;
    let parent_index = embedded
        .terms
        .iter()
        .position(|t| *t == cfg.parent_term)
        .ok_or_else(|| config_err(format!("unknown parent term {:?}; embedded terms are {:?}", cfg.parent_term, embedded.terms)))?;
    let pre_map = machine_map(&embedded.trainer.quantiser, train)?;
    let mut quantiser = embedded.trainer.quantiser.clone();
    quantiser.expand_colour(parent_index, cfg.split_noise, cfg.seed.wrapping_add(0x5eed))?;
    let new_index = quantiser.colours() - 1;
    let tc = cfg.stage_config(quantiser.colours(), cfg.evolution_epochs.max(1), cfg.losses.weights(cfg.full_weights()));
    let mut trainer = Trainer::from_parts(tc, quantiser, embedded.trainer.classifier.clone(), Objective::Standard)?;
    let mut accuracy_trace = Vec::new();
    for _ in 0..cfg.evolution_epochs {
        let m = trainer.train_epoch(train, eval)?;
        if let Some(t) = m.top1 {
            accuracy_trace.push(t);
        }
    }
    let post_map = machine_map(&trainer.quantiser, train)?;
    let post_shares = post_map.pixel_shares();
    Ok(EvolutionReport {
        parent_term: cfg.parent_term.clone(),
        parent_index,
        new_index,
        mechanism: "clone-and-perturb".into(),
        losses: cfg.losses,
        pre_shares: pre_map.pixel_shares(),
        new_colour_share: post_shares[new_index],
        post_shares,
        pre_map,
        post_map,
        accuracy_trace,
        history: trainer.history.clone(),
        trainer,
    })
}

/// Machine map built with any per-image quantiser closure.
pub fn machine_map_with<F>(data: &Dataset, colours: usize, f: F) -> Result<MachineWcsMap>
where
    F: FnMut(&RgbImage) -> Result<crate::cqformer::IndexMap>,
{
    build_machine_wcs_map(data.images(), colours, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colour::{Chip, WcsGrid};
    use crate::dataset::{synthetic_chip_dataset, synthetic_colour_classes};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            colours: 2,
            epochs: 1,
            batch_size: 2,
            query_dim: 4,
            encoder_widths: [2, 3, 3],
            classifier_widths: vec![3, 4],
            augment: false,
            tau: 0.5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("colours = 8\ntau = 0.05\nscheduler = \"constant\"\n").unwrap();
        assert_eq!((partial.colours, partial.tau, partial.scheduler), (8, 0.05, SchedulerKind::Constant));
        assert_eq!(partial.lr, 0.05);
        assert!(TrainConfig::from_toml("tau = 0.0").is_err());
        assert!(TrainConfig::from_toml("epochs = 0").is_err());
        assert!(TrainConfig::from_toml("alpha = -1.0").is_err());
        assert!(TrainConfig::from_toml("colour = 3").is_err());
        let evo = EvolutionConfig::default();
        assert_eq!(EvolutionConfig::from_toml(&evo.to_toml()).unwrap(), evo);
        assert_eq!(EvolutionConfig::from_toml("losses = \"m+div\"").unwrap().losses, LossCombination::MachineDiversity);
        assert_eq!((evo.embedding_epochs, evo.evolution_epochs, evo.tau_embed), (40, 20, 1.0));
    }

    #[test]
    fn one_epoch_reduces_loss_for_some_seed() {
        let data = synthetic_colour_classes(4, 8, 1);
        let mut improved = 0;
        for seed in 0..3 {
            let cfg = TrainConfig { seed, lr: 0.05, scheduler: SchedulerKind::Constant, ..tiny_cfg() };
            let mut t = Trainer::new(cfg, 4).unwrap();
            let all: Vec<&Sample> = data.items().iter().collect();
            let (before, _) = t.evaluate_batch(&all).unwrap();
            t.run(&data, None, &TrainOptions::default()).unwrap();
            let (after, _) = t.evaluate_batch(&all).unwrap();
            improved += usize::from(after < before);
        }
        assert!(improved >= 1);
    }

    #[test]
    fn zero_weights_give_machine_objective() {
        let data = synthetic_colour_classes(2, 8, 2);
        let mut cfg = tiny_cfg();
        cfg.set_weights(LossWeights::machine_only());
        let t = Trainer::new(cfg, 4).unwrap();
        let all: Vec<&Sample> = data.items().iter().collect();
        let (total, parts) = t.evaluate_batch(&all).unwrap();
        assert_eq!(total, parts.l_m);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = synthetic_colour_classes(6, 8, 3);
        let (train, test) = data.split_at(4);
        let cfg = TrainConfig { epochs: 3, augment: true, ..tiny_cfg() };
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()) };
        let full = train_joint(&cfg, &train, Some(&test), &opts).unwrap();

        let ck = Checkpoint::load(&dir.path().join("epoch_001.cqck")).unwrap();
        let mut resumed = Trainer::resume(cfg.clone(), &ck, Objective::Standard).unwrap();
        resumed.run(&train, Some(&test), &TrainOptions::default()).unwrap();
        assert_eq!(resumed.quantiser.params(), full.quantiser.params());
        assert_eq!(resumed.classifier.params(), full.classifier.params());
        assert_eq!(metrics_csv(&resumed.history), metrics_csv(&full.history));
        assert_eq!(full.history.len(), 3);
    }

    #[test]
    fn divergence_aborts_with_snapshot() {
        let data = synthetic_colour_classes(4, 8, 4);
        let cfg = TrainConfig { lr: 1e300, epochs: 3, scheduler: SchedulerKind::Constant, ..tiny_cfg() };
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()) };
        match train_joint(&cfg, &data, None, &opts) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|t| t.history)),
        }
        assert!(dir.path().join("diverged.cqck").exists());
    }

    #[test]
    fn metrics_csv_schema() {
        let m = EpochMetrics { epoch: 1, l_m: 0.5, r_colour: 0.1, r_diversity: 0.0, l_perceptual: 0.25, l_total: 0.6, top1: None };
        let csv = metrics_csv(&[m]);
        assert_eq!(csv, "epoch,L_M,R_Colour,R_Diversity,L_Perceptual,L_total,top1\n1,0.5,0.1,0,0.25,0.6,\n");
    }

    fn three_term_map() -> HumanWcsMap {
        let modes: Vec<usize> = WcsGrid::chips().map(|c| if c.row < 3 { 1 } else if c.col < 14 { 2 } else { 0 }).collect();
        HumanWcsMap::one_hot(vec!["light".into(), "dark".into(), "warm".into()], &modes).unwrap()
    }

    #[test]
    fn embedding_and_evolution_stages_are_well_formed() {
        let hmap = three_term_map();
        let chips = [Chip { row: 1, col: 5 }, Chip { row: 6, col: 3 }, Chip { row: 5, col: 30 }];
        let data = synthetic_chip_dataset(4, 8, 2, &chips, &hmap.argmax(), 3, 5).unwrap();
        let cfg = EvolutionConfig {
            embedding_epochs: 1,
            evolution_epochs: 0,
            batch_size: 2,
            query_dim: 4,
            encoder_widths: [2, 3, 3],
            classifier_widths: vec![3],
            parent_term: "dark".into(),
            ..EvolutionConfig::default()
        };
        let emb = run_embedding_stage(&cfg, &hmap, &data).unwrap();
        assert!((0.0..=1.0).contains(&emb.agreement));
        let report = run_evolution_stage(&emb, &cfg, &data, None).unwrap();
        assert_eq!(report.post_shares.len(), 4);
        assert!((report.post_shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((report.pre_shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(report.new_index, 3);
        for img in data.images() {
            let (out, _, _) = report.trainer.quantiser.quantise_test(img).unwrap();
            let distinct: std::collections::BTreeSet<[u8; 3]> = out.to_rgb8().pixels().map(|p| p.0).collect();
            assert!(distinct.len() <= 4);
        }

        let bad = EvolutionConfig { parent_term: "nope".into(), ..cfg.clone() };
        assert!(run_evolution_stage(&emb, &bad, &data, None).is_err());
        let wrong_c = EvolutionConfig { colours: 4, ..cfg };
        assert!(run_embedding_stage(&wrong_c, &hmap, &data).is_err());
    }

    #[test]
    fn central_embedding_is_zero_at_centres() {
        let centres = [(0.5, 0.4), (3.0, 0.8)];
        let c = ClusterCentroids::from_human(&centres).unwrap();
        let px: Vec<[f64; 3]> = centres
            .iter()
            .map(|&(h, v)| crate::colour::hsv_pixel_to_rgb(crate::colour::HsvPixel::new(h, 1.0, v)))
            .collect();
        let img = RgbImage::from_pixels(1, 2, &px).unwrap();
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let r = graph_central_term(&mut g, m, std::slice::from_ref(&img), &c);
        assert!(g.value(r).item() < 1e-20);
    }
}
