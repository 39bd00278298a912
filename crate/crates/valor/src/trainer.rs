//! Training loop: configuration, Adam with linear warmup/decay, mixed-dataset
//! batch assembly, retrieval evaluation, task fine-tuning, and bit-exact
//! checkpoint resume.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{dual_softmax, rank_by_score, recall_at_k, EvalReport, DUAL_SOFTMAX_TEMPERATURE};
use crate::checkpoint::{self, CheckpointData};
use crate::data::{
    generate_example, prepare_example, qa_from_example, BatchExample, DatasetEntry, DatasetSpec,
    GeneratorConfig, TriModalExample,
};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::mga::{group_similarity, AlignmentVariant, AvFusion, Granularity, Modality, ModalityGroup, TextPool, Weighting};
use crate::mgc::{
    decoder_forward, mask_for_generation, mask_tokens, mgc_loss, select_conditions, AttentionMode,
    FusionVariant, MaskedTokens,
};
use crate::model::{LossOptions, Model, ModelConfig};
use crate::tensor::{ParamStore, Tensor};
use crate::text::{Vocabulary, CLS, SEP};

// ── Configuration ───────────────────────────────────────────────────────

/// Flat key=value training configuration (TOML on disk).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    // Objective
    pub alpha: f64,
    pub mask_prob: f64,
    pub mga_groups: Vec<String>,
    pub mgc_groups: Vec<String>,
    pub fusion_variant: FusionVariant,
    pub alignment_granularity: Granularity,
    pub alignment_fusion: AvFusion,
    pub alignment_weighting: Weighting,
    pub alignment_text_pool: TextPool,
    pub share_weights: bool,

    // Optimization
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,

    // Data
    pub dataset_names: Vec<String>,
    pub dataset_weights: Vec<f64>,
    pub dataset_has_audio: Vec<bool>,
    pub pool_size: usize,
    pub frames_per_sample: usize,
    pub clips_per_sample: usize,
    pub vision_events: usize,
    pub audio_events: usize,
    pub noise_std: f64,
    pub frames_per_example: usize,
    pub clips_per_example: usize,

    // Evaluation
    pub eval_every: u64,
    pub eval_groups: Vec<String>,
    pub dual_softmax_eval: bool,

    // Model geometry
    pub max_text_len: usize,
    pub text_dim: usize,
    pub vision_dim: usize,
    pub audio_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub common_dim: usize,
    pub max_frames: usize,
    pub max_clips: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub frame_ch: usize,
    pub vision_patch: usize,
    pub mel_bins: usize,
    pub spec_frames: usize,
    pub audio_patch_h: usize,
    pub audio_patch_w: usize,

    // Fine-tuning driver
    pub finetune_task: String,
    pub finetune_group: String,
    pub finetune_steps: u64,
    pub init_checkpoint: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.5,
            mask_prob: 0.6,
            mga_groups: vec!["t-av".into(), "t-v".into(), "t-a".into()],
            mgc_groups: vec!["t-av".into(), "t-v".into(), "t-a".into()],
            fusion_variant: FusionVariant::ConcatenateCross,
            alignment_granularity: Granularity::Fine,
            alignment_fusion: AvFusion::Feature,
            alignment_weighting: Weighting::Learned,
            alignment_text_pool: TextPool::Mean,
            share_weights: true,
            learning_rate: 1e-3,
            warmup_steps: 50,
            total_steps: 300,
            batch_size: 16,
            grad_clip: 1.0,
            seed: 42,
            dataset_names: vec!["tri".into()],
            dataset_weights: vec![1.0],
            dataset_has_audio: vec![true],
            pool_size: 0,
            frames_per_sample: 1,
            clips_per_sample: 1,
            vision_events: 8,
            audio_events: 8,
            noise_std: 0.05,
            frames_per_example: 1,
            clips_per_example: 1,
            eval_every: 0,
            eval_groups: vec!["t-av".into(), "t-v".into(), "t-a".into()],
            dual_softmax_eval: false,
            max_text_len: 32,
            text_dim: 64,
            vision_dim: 64,
            audio_dim: 64,
            layers: 2,
            heads: 4,
            ff_mult: 2,
            common_dim: 64,
            max_frames: 4,
            max_clips: 2,
            frame_h: 16,
            frame_w: 16,
            frame_ch: 1,
            vision_patch: 8,
            mel_bins: 8,
            spec_frames: 16,
            audio_patch_h: 4,
            audio_patch_w: 4,
            finetune_task: "retrieval".into(),
            finetune_group: "t-av".into(),
            finetune_steps: 200,
            init_checkpoint: String::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(0.0 < self.mask_prob && self.mask_prob < 1.0) {
            return Err(Error::Config(format!(
                "mask_prob {} must lie strictly between 0 and 1",
                self.mask_prob
            )));
        }
        if self.total_steps <= self.warmup_steps {
            return Err(Error::Config(format!(
                "total_steps {} must exceed warmup_steps {}",
                self.total_steps, self.warmup_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.dataset_names.len() != self.dataset_weights.len()
            || self.dataset_names.len() != self.dataset_has_audio.len()
        {
            return Err(Error::Config(
                "dataset_names, dataset_weights, dataset_has_audio must have equal length".into(),
            ));
        }
        self.dataset_spec()?.validate()?;
        self.generator_config().validate()?;
        self.model_config(16).validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = toml::from_str(&body).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let datasets = self
            .dataset_names
            .iter()
            .zip(&self.dataset_weights)
            .zip(&self.dataset_has_audio)
            .map(|((name, &weight), &has_audio)| DatasetEntry {
                name: name.clone(),
                weight,
                has_audio,
            })
            .collect();
        let spec = DatasetSpec { datasets };
        spec.validate()?;
        Ok(spec)
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            vision_events: self.vision_events,
            audio_events: self.audio_events,
            noise_std: self.noise_std,
            frame_h: self.frame_h,
            frame_w: self.frame_w,
            frame_ch: self.frame_ch,
            mel_bins: self.mel_bins,
            spec_frames: self.spec_frames,
            frames_per_example: self.frames_per_example,
            clips_per_example: self.clips_per_example,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size,
                max_text_len: self.max_text_len,
                text_dim: self.text_dim,
                vision_dim: self.vision_dim,
                audio_dim: self.audio_dim,
                layers: self.layers,
                heads: self.heads,
                ff_mult: self.ff_mult,
                max_frames: self.max_frames,
                max_clips: self.max_clips,
                frame_h: self.frame_h,
                frame_w: self.frame_w,
                frame_ch: self.frame_ch,
                vision_patch: self.vision_patch,
                mel_bins: self.mel_bins,
                spec_frames: self.spec_frames,
                audio_patch_h: self.audio_patch_h,
                audio_patch_w: self.audio_patch_w,
            },
            common_dim: self.common_dim,
            fusion_variant: self.fusion_variant,
            share_weights: self.share_weights,
        }
    }

    pub fn alignment_variant(&self) -> AlignmentVariant {
        AlignmentVariant {
            granularity: self.alignment_granularity,
            av_fusion: self.alignment_fusion,
            weighting: self.alignment_weighting,
            text_pool: self.alignment_text_pool,
        }
    }

    fn parse_groups(names: &[String]) -> Result<Vec<ModalityGroup>> {
        names.iter().map(|s| ModalityGroup::parse(s)).collect()
    }

    pub fn loss_options(&self) -> Result<LossOptions> {
        Ok(LossOptions {
            alpha: self.alpha,
            mga_groups: Self::parse_groups(&self.mga_groups)?,
            mgc_groups: Self::parse_groups(&self.mgc_groups)?,
            variant: self.alignment_variant(),
        })
    }
}

// ── Schedule and optimizer ──────────────────────────────────────────────

/// Piecewise-linear rate: 0 at step 0, peak exactly at `warmup`, 0 at `total`.
pub fn learning_rate_at(step: u64, warmup: u64, total: u64, peak: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    if warmup > 0 && step < warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        let v = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        AdamState { m, v, t: 0 }
    }

    /// Clip the global gradient norm, apply one Adam update to every
    /// parameter that received a gradient, then clear gradients.
    /// Returns the pre-clip global norm.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, clip: f64) -> f64 {
        let mut sq = 0.0;
        for id in store.ids() {
            if let Some(g) = store.get(id).grad.as_ref() {
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };

        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        // ParamId order matches the AdamState vectors by construction.
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad.take() else {
                continue;
            };
            for (k, g0) in grad.iter().enumerate() {
                let g = g0 * scale;
                self.m[i][k] = ADAM_BETA1 * self.m[i][k] + (1.0 - ADAM_BETA1) * g;
                self.v[i][k] = ADAM_BETA2 * self.v[i][k] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = self.m[i][k] / bc1;
                let vhat = self.v[i][k] / bc2;
                tensor.data[k] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        store.zero_grads();
        norm
    }
}

// ── Trainer ─────────────────────────────────────────────────────────────

const POOL_SEED_XOR: u64 = 0x504f_4f4c;
const TRAIN_SEED_XOR: u64 = 0x5452_4149;
const EVAL_SEED_XOR: u64 = 0x4556_414c;

#[derive(Debug, Clone)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub mga: Option<f64>,
    pub mgc: Option<f64>,
    pub grad_norm: f64,
    pub per_group_mga: Vec<(String, f64)>,
    pub per_group_mgc: Vec<(String, f64)>,
    pub dataset: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroupEval {
    pub group: String,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub mga: Option<f64>,
    pub mgc: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub evals: Vec<GroupEval>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub vocab: Vocabulary,
    pub opt: AdamState,
    pub step: u64,
    rng: ChaCha20Rng,
    spec: DatasetSpec,
    gen: GeneratorConfig,
    /// Per-dataset fixed pools when `pool_size > 0`; otherwise fresh stream.
    pools: Vec<Vec<TriModalExample>>,
}

pub enum Task {
    Retrieval,
    Caption,
    Qa,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        match s.trim().to_lowercase().as_str() {
            "retrieval" => Ok(Task::Retrieval),
            "caption" => Ok(Task::Caption),
            "qa" => Ok(Task::Qa),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let gen = config.generator_config();
        let vocab = gen.vocabulary()?;
        let model = Model::new(config.model_config(vocab.len()), config.seed)?;
        let opt = AdamState::new(&model.store);
        let spec = config.dataset_spec()?;

        let mut pools = Vec::new();
        if config.pool_size > 0 {
            let mut pool_rng = ChaCha20Rng::seed_from_u64(config.seed ^ POOL_SEED_XOR);
            for entry in &spec.datasets {
                let pool = (0..config.pool_size)
                    .map(|_| generate_example(&gen, entry.has_audio, &mut pool_rng))
                    .collect::<Result<Vec<_>>>()?;
                pools.push(pool);
            }
        }

        let rng = ChaCha20Rng::seed_from_u64(config.seed ^ TRAIN_SEED_XOR);
        Ok(Trainer {
            config,
            model,
            vocab,
            opt,
            step: 0,
            rng,
            spec,
            gen,
            pools,
        })
    }

    /// Sample a dataset by weight, then draw a batch from its pool or from
    /// the generator stream.
    pub fn next_batch(&mut self) -> Result<crate::data::TrainingBatch> {
        let idx = self.spec.sample(&mut self.rng)?;
        let entry = self.spec.datasets[idx].clone();
        let mut examples = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let ex = if self.pools.is_empty() {
                generate_example(&self.gen, entry.has_audio, &mut self.rng)?
            } else {
                let pool = &self.pools[idx];
                pool[self.rng.gen_range(0..pool.len())].clone()
            };
            examples.push(prepare_example(
                &ex,
                &self.vocab,
                self.config.max_text_len,
                self.config.frames_per_sample,
                self.config.clips_per_sample,
                &mut self.rng,
            )?);
        }
        Ok(crate::data::TrainingBatch {
            dataset: entry.name,
            has_audio: entry.has_audio,
            examples,
        })
    }

    /// Groups whose modalities the batch can serve. A batch without audio
    /// keeps only text-vision groups.
    fn active_groups(groups: &[ModalityGroup], has_audio: bool) -> Vec<ModalityGroup> {
        groups
            .iter()
            .filter(|g| {
                has_audio
                    || (g.query() != Modality::Audio && !g.targets().contains(&Modality::Audio))
            })
            .cloned()
            .collect()
    }

    pub fn train_step(&mut self, batch: &crate::data::TrainingBatch) -> Result<StepStats> {
        let opts = self.config.loss_options()?;
        let mga_groups = Self::active_groups(&opts.mga_groups, batch.has_audio);
        let mgc_groups = Self::active_groups(&opts.mgc_groups, batch.has_audio);
        if (self.config.alpha == 0.0 || mga_groups.is_empty()) && mgc_groups.is_empty() {
            return Err(Error::Config(format!(
                "batch from dataset '{}' (audio: {}) serves none of the configured groups",
                batch.dataset, batch.has_audio
            )));
        }
        let step_opts = LossOptions {
            alpha: opts.alpha,
            mga_groups,
            mgc_groups: mgc_groups.clone(),
            variant: opts.variant,
        };

        let masked: Vec<MaskedTokens> = if mgc_groups.is_empty() {
            Vec::new()
        } else {
            batch
                .examples
                .iter()
                .map(|ex| {
                    mask_tokens(&ex.token_ids, &ex.attention_mask, self.config.mask_prob, &mut self.rng)
                })
                .collect::<Result<_>>()?
        };

        let mut g = crate::tensor::Graph::new();
        let losses = self.model.joint_loss(&mut g, &batch.examples, &masked, &step_opts)?;
        if !losses.total_value.is_finite() {
            let component = match (losses.mga_value, losses.mgc_value) {
                (Some(a), _) if !a.is_finite() => "alignment (MGA)",
                (_, Some(c)) if !c.is_finite() => "captioning (MGC)",
                _ => "joint",
            };
            return Err(Error::Numeric(format!(
                "non-finite {component} loss at step {}",
                self.step
            )));
        }
        g.backward(losses.total)?;
        g.export_grads(&mut self.model.store);

        let lr = learning_rate_at(
            self.step,
            self.config.warmup_steps,
            self.config.total_steps,
            self.config.learning_rate,
        );
        let grad_norm = self.opt.step(&mut self.model.store, lr, self.config.grad_clip);
        self.step += 1;

        Ok(StepStats {
            step: self.step,
            lr,
            loss: losses.total_value,
            mga: losses.mga_value,
            mgc: losses.mgc_value,
            grad_norm,
            per_group_mga: losses.per_group_mga,
            per_group_mgc: losses.per_group_mgc,
            dataset: batch.dataset.clone(),
        })
    }

    /// Held-out eval split: one example per latent pair, rendered and
    /// subsampled with an rng independent of the training stream.
    pub fn eval_split(&self) -> Result<Vec<BatchExample>> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.config.seed ^ EVAL_SEED_XOR);
        let mut out = Vec::with_capacity(self.gen.vision_events * self.gen.audio_events);
        for v in 0..self.gen.vision_events {
            for a in 0..self.gen.audio_events {
                let ex = crate::data::render_example(&self.gen, v, Some(a), &mut rng)?;
                out.push(prepare_example(
                    &ex,
                    &self.vocab,
                    self.config.max_text_len,
                    self.config.frames_per_sample,
                    self.config.clips_per_sample,
                    &mut rng,
                )?);
            }
        }
        Ok(out)
    }

    /// Text-query retrieval over the eval split: each caption queries all
    /// candidates; the matched candidate is the ground truth.
    pub fn evaluate(&self) -> Result<(Vec<GroupEval>, Vec<(String, EvalReport)>)> {
        let split = self.eval_split()?;
        let variant = self.config.alignment_variant();
        let groups = TrainConfig::parse_groups(&self.config.eval_groups)?;
        let mut evals = Vec::with_capacity(groups.len());
        let mut reports = Vec::with_capacity(groups.len());
        // One tape for the whole evaluation: every example is encoded and
        // embedded once, then reused by all group score matrices.
        let mut g = crate::tensor::Graph::new();
        let embs: Vec<crate::mga::CommonEmbeddings> = split
            .iter()
            .map(|ex| {
                let enc = self.model.encode_example(&mut g, ex)?;
                self.model.embed_example(&mut g, &enc)
            })
            .collect::<Result<_>>()?;
        for group in &groups {
            let n = embs.len();
            let mut matrix = vec![vec![0.0; n]; n];
            for (qi, q) in embs.iter().enumerate() {
                for (ci, c) in embs.iter().enumerate() {
                    let s = group_similarity(
                        &mut g,
                        &self.model.store,
                        &self.model.align,
                        &variant,
                        group,
                        q,
                        c,
                    )?;
                    matrix[qi][ci] = g.value(s);
                }
            }
            let scored = if self.config.dual_softmax_eval {
                dual_softmax(&matrix, DUAL_SOFTMAX_TEMPERATURE)?
            } else {
                matrix
            };
            let ids: Vec<usize> = (0..n).collect();
            let rankings: Vec<Vec<usize>> = scored
                .iter()
                .map(|row| rank_by_score(&ids, row).into_iter().map(|(id, _)| id).collect())
                .collect();
            let gt: Vec<usize> = (0..n).collect();
            let eval = GroupEval {
                group: group.label(),
                r1: recall_at_k(&rankings, &gt, 1)?,
                r5: recall_at_k(&rankings, &gt, 5.min(n))?,
                r10: recall_at_k(&rankings, &gt, 10.min(n))?,
            };
            let records: Vec<(usize, Vec<(usize, f64)>)> = scored
                .iter()
                .enumerate()
                .map(|(qi, row)| {
                    let top: Vec<(usize, f64)> =
                        rank_by_score(&ids, row).into_iter().take(10).collect();
                    (qi, top)
                })
                .collect();
            reports.push((
                group.label(),
                EvalReport {
                    records,
                    summary: vec![
                        ("R@1".into(), eval.r1),
                        ("R@5".into(), eval.r5),
                        ("R@10".into(), eval.r10),
                    ],
                },
            ));
            evals.push(eval);
        }
        Ok((evals, reports))
    }

    fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        let line = serde_json::to_string(record).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    /// Run the configured number of steps with periodic evaluation,
    /// checkpointing, and an append-only metrics log under `out_dir`.
    pub fn pretrain(&mut self, out_dir: Option<&Path>) -> Result<Vec<GroupEval>> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        let metrics_path = out_dir.map(|d| d.join("metrics.jsonl"));
        let mut final_evals = Vec::new();
        while self.step < self.config.total_steps {
            let batch = self.next_batch()?;
            let stats = self.train_step(&batch)?;
            let is_final = self.step >= self.config.total_steps;
            let do_eval =
                is_final || (self.config.eval_every > 0 && stats.step % self.config.eval_every == 0);
            if do_eval {
                let (evals, reports) = self.evaluate()?;
                if let Some(path) = &metrics_path {
                    Self::append_metrics(
                        path,
                        &MetricsRecord {
                            step: stats.step,
                            loss: stats.loss,
                            mga: stats.mga,
                            mgc: stats.mgc,
                            lr: stats.lr,
                            grad_norm: stats.grad_norm,
                            evals: evals.clone(),
                        },
                    )?;
                }
                if let Some(dir) = out_dir {
                    self.save_checkpoint(&dir.join("checkpoint.bin"))?;
                    if is_final {
                        for (label, report) in &reports {
                            std::fs::write(
                                dir.join(format!("eval_{}.txt", label.to_lowercase())),
                                report.render(),
                            )?;
                        }
                    }
                }
                if is_final {
                    final_evals = evals;
                }
            }
        }
        Ok(final_evals)
    }

    /// Single-objective task adaptation.
    pub fn finetune(&mut self, task: Task, group: &ModalityGroup, steps: u64) -> Result<()> {
        match task {
            Task::Retrieval => {
                if group.query() != Modality::Text {
                    return Err(Error::Config(format!(
                        "retrieval fine-tuning expects a text-query group, got {}",
                        group.label()
                    )));
                }
                for _ in 0..steps {
                    let batch = self.next_batch()?;
                    if !batch.has_audio && group.targets().contains(&Modality::Audio) {
                        return Err(Error::Config(format!(
                            "group {} needs audio but dataset '{}' has none",
                            group.label(),
                            batch.dataset
                        )));
                    }
                    let opts = LossOptions {
                        alpha: 1.0,
                        mga_groups: vec![group.clone()],
                        mgc_groups: vec![],
                        variant: self.config.alignment_variant(),
                    };
                    let mut g = crate::tensor::Graph::new();
                    let losses = self.model.joint_loss(&mut g, &batch.examples, &[], &opts)?;
                    g.backward(losses.total)?;
                    g.export_grads(&mut self.model.store);
                    self.apply_update();
                }
                Ok(())
            }
            Task::Caption => {
                for _ in 0..steps {
                    let batch = self.next_batch()?;
                    if !batch.has_audio && group.targets().contains(&Modality::Audio) {
                        return Err(Error::Config(format!(
                            "group {} needs audio but dataset '{}' has none",
                            group.label(),
                            batch.dataset
                        )));
                    }
                    let masked: Vec<MaskedTokens> = batch
                        .examples
                        .iter()
                        .map(|ex| {
                            mask_for_generation(
                                &ex.token_ids,
                                &ex.attention_mask,
                                1,
                                self.config.mask_prob,
                                &mut self.rng,
                            )
                        })
                        .collect::<Result<_>>()?;
                    let opts = LossOptions {
                        alpha: 0.0,
                        mga_groups: vec![],
                        mgc_groups: vec![group.clone()],
                        variant: self.config.alignment_variant(),
                    };
                    let mut g = crate::tensor::Graph::new();
                    let losses = self.model.joint_loss(&mut g, &batch.examples, &masked, &opts)?;
                    g.backward(losses.total)?;
                    g.export_grads(&mut self.model.store);
                    self.apply_update();
                }
                Ok(())
            }
            Task::Qa => self.finetune_qa(group, steps),
        }
    }

    /// QA fine-tuning: `[CLS] question answer [SEP]` with bidirectional
    /// question attention, causal answer attention, and masking restricted
    /// to the answer region.
    fn finetune_qa(&mut self, group: &ModalityGroup, steps: u64) -> Result<()> {
        for _ in 0..steps {
            let batch = self.next_batch()?;
            if !batch.has_audio && group.targets().contains(&Modality::Audio) {
                return Err(Error::Config(format!(
                    "group {} needs audio but dataset '{}' has none",
                    group.label(),
                    batch.dataset
                )));
            }
            let mut g = crate::tensor::Graph::new();
            let mut example_losses = Vec::with_capacity(batch.examples.len());
            for (i, ex) in batch.examples.iter().enumerate() {
                // Ask about vision or audio according to the group; T-AV
                // alternates by example index.
                let about_vision = match (
                    group.targets().contains(&Modality::Vision),
                    group.targets().contains(&Modality::Audio),
                ) {
                    (true, false) => true,
                    (false, true) => false,
                    _ => i % 2 == 0,
                };
                let tri = TriModalExample {
                    caption: ex.caption.clone(),
                    frames: ex.frames.clone(),
                    spectrograms: ex.spectrograms.clone(),
                    vision_event: ex.vision_event,
                    audio_event: ex.audio_event,
                };
                let qa = qa_from_example(&tri, about_vision)?;
                let (ids, question_len) = self.qa_token_ids(&qa)?;
                let attention = vec![true; ids.len()];
                let masked = mask_for_generation(
                    &ids,
                    &attention,
                    question_len,
                    self.config.mask_prob,
                    &mut self.rng,
                )?;
                let enc = self.model.encode_example(&mut g, ex)?;
                let conds = self.model.conditions(&mut g, &enc)?;
                let selected = select_conditions(&conds, group)?;
                let logits = decoder_forward(
                    &mut g,
                    &self.model.store,
                    &self.model.decoder,
                    &self.model.config.encoder,
                    &masked.input_ids,
                    &selected,
                    AttentionMode::MixedQa { question_len },
                )?;
                example_losses.push(mgc_loss(&mut g, logits, &masked)?);
            }
            let mut acc = example_losses[0];
            for &l in &example_losses[1..] {
                acc = g.add(acc, l)?;
            }
            let loss = g.scale(acc, 1.0 / example_losses.len() as f64);
            g.backward(loss)?;
            g.export_grads(&mut self.model.store);
            self.apply_update();
        }
        Ok(())
    }

    /// `[CLS] question-words answer-word [SEP]` plus the question length.
    pub fn qa_token_ids(&self, qa: &crate::data::QaExample) -> Result<(Vec<usize>, usize)> {
        let mut ids = vec![CLS];
        for w in qa.question.split_whitespace() {
            ids.push(self.vocab.id(w).unwrap_or(crate::text::UNK));
        }
        let question_len = ids.len();
        for w in qa.answer.split_whitespace() {
            ids.push(self.vocab.id(w).unwrap_or(crate::text::UNK));
        }
        ids.push(SEP);
        if ids.len() > self.config.max_text_len {
            return Err(Error::Config(format!(
                "QA sequence of {} tokens exceeds max_text_len {}",
                ids.len(),
                self.config.max_text_len
            )));
        }
        Ok((ids, question_len))
    }

    fn apply_update(&mut self) {
        let lr = learning_rate_at(
            self.step,
            self.config.warmup_steps,
            self.config.total_steps,
            self.config.learning_rate,
        );
        self.opt.step(&mut self.model.store, lr, self.config.grad_clip);
        self.step += 1;
    }

    // ── Checkpointing ───────────────────────────────────────────────────

    pub fn to_checkpoint(&self) -> Result<CheckpointData> {
        let store = &self.model.store;
        let mut params = Vec::with_capacity(store.len());
        let mut opt_m = Vec::with_capacity(store.len());
        let mut opt_v = Vec::with_capacity(store.len());
        for (i, id) in store.ids().enumerate() {
            let t = store.get(id);
            let name = store.name(id).to_string();
            params.push((name.clone(), Tensor::new(t.shape.clone(), t.data.clone())?));
            opt_m.push((name.clone(), Tensor::new(t.shape.clone(), self.opt.m[i].clone())?));
            opt_v.push((name, Tensor::new(t.shape.clone(), self.opt.v[i].clone())?));
        }
        Ok(CheckpointData {
            params,
            opt_m,
            opt_v,
            opt_t: self.opt.t,
            step: self.step,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
            config_toml: self.config.to_toml()?,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_checkpoint()?)
    }

    /// Rebuild a trainer from a checkpoint: the stored config reconstructs
    /// the model skeleton, then every tensor, optimizer moment, rng position,
    /// and the step counter are restored exactly.
    pub fn from_checkpoint_file(path: &Path) -> Result<Trainer> {
        Self::from_checkpoint_data(checkpoint::load(path)?)
    }

    pub fn from_checkpoint_data(ckpt: CheckpointData) -> Result<Trainer> {
        let config: TrainConfig =
            toml::from_str(&ckpt.config_toml).map_err(|e| Error::Parse(e.to_string()))?;
        let mut trainer = Trainer::new(config)?;

        let restore = |target: &ParamStore,
                       stored: &[(String, Tensor)],
                       what: &str|
         -> Result<Vec<Vec<f64>>> {
            let mut restored: Vec<Option<Vec<f64>>> = vec![None; target.len()];
            for (name, tensor) in stored {
                let id = target.by_name(name).ok_or_else(|| {
                    Error::CheckpointRecord(format!("unknown {what} tensor '{name}'"))
                })?;
                let expect = &target.get(id).shape;
                if *expect != tensor.shape {
                    return Err(Error::CheckpointShape {
                        name: name.clone(),
                        found: tensor.shape.clone(),
                        expected: expect.clone(),
                    });
                }
                let i = target.ids().position(|x| x == id).expect("id in store");
                restored[i] = Some(tensor.data.clone());
            }
            restored
                .into_iter()
                .enumerate()
                .map(|(i, slot)| {
                    slot.ok_or_else(|| {
                        let name = target.name(target.ids().nth(i).expect("index in store"));
                        Error::CheckpointRecord(format!("missing {what} tensor '{name}'"))
                    })
                })
                .collect()
        };

        let params = restore(&trainer.model.store, &ckpt.params, "parameter")?;
        for (i, id) in trainer.model.store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            trainer.model.store.get_mut(id).data = params[i].clone();
        }
        trainer.opt.m = restore(&trainer.model.store, &ckpt.opt_m, "optimizer m")?;
        trainer.opt.v = restore(&trainer.model.store, &ckpt.opt_v, "optimizer v")?;
        trainer.opt.t = ckpt.opt_t;
        trainer.step = ckpt.step;
        trainer.rng = ChaCha20Rng::from_seed(ckpt.rng_seed);
        trainer.rng.set_word_pos(ckpt.rng_word_pos);
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small geometry so training-loop tests run in seconds.
    fn tiny_config() -> TrainConfig {
        TrainConfig {
            total_steps: 40,
            warmup_steps: 10,
            batch_size: 4,
            max_text_len: 12,
            text_dim: 16,
            vision_dim: 16,
            audio_dim: 16,
            layers: 1,
            heads: 2,
            common_dim: 16,
            frame_h: 8,
            frame_w: 8,
            vision_patch: 4,
            mel_bins: 4,
            spec_frames: 8,
            audio_patch_h: 2,
            audio_patch_w: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn learning_rate_schedule_endpoints() {
        assert_eq!(learning_rate_at(0, 100, 1000, 2e-3), 0.0);
        assert_eq!(learning_rate_at(100, 100, 1000, 2e-3), 2e-3);
        assert_eq!(learning_rate_at(1000, 100, 1000, 2e-3), 0.0);
        // Piecewise linear on both sides.
        assert!((learning_rate_at(50, 100, 1000, 2e-3) - 1e-3).abs() < 1e-15);
        assert!((learning_rate_at(550, 100, 1000, 2e-3) - 1e-3).abs() < 1e-15);
        // Zero warmup starts at the peak.
        assert_eq!(learning_rate_at(0, 0, 10, 1e-3), 1e-3);
    }

    #[test]
    fn config_toml_round_trip_with_partial_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "alpha = 0.5\nmga_groups = [\"t-v\"]\ntotal_steps = 99\n").unwrap();
        let cfg = TrainConfig::load(&path).unwrap();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.total_steps, 99);
        assert_eq!(cfg.mga_groups, vec!["t-v".to_string()]);
        // Unspecified keys fall back to defaults.
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);

        let text = cfg.to_toml().unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.mask_prob = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.total_steps = cfg.warmup_steps;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.alpha = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.dataset_weights = vec![1.0, 2.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn smoothed_loss_decreases_on_fixed_pool() {
        let mut cfg = tiny_config();
        cfg.total_steps = 200;
        cfg.warmup_steps = 20;
        cfg.pool_size = 32;
        let mut trainer = Trainer::new(cfg).unwrap();
        let mut losses = Vec::new();
        for _ in 0..200 {
            let batch = trainer.next_batch().unwrap();
            losses.push(trainer.train_step(&batch).unwrap().loss);
        }
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "smoothed loss did not decrease: {head} -> {tail}");
    }

    #[test]
    fn seed_fixed_runs_produce_identical_metric_logs() {
        let run = |dir: &std::path::Path| {
            let mut cfg = tiny_config();
            cfg.total_steps = 12;
            cfg.warmup_steps = 4;
            cfg.eval_every = 6;
            let mut trainer = Trainer::new(cfg).unwrap();
            trainer.pretrain(Some(dir)).unwrap();
            std::fs::read(dir.join("metrics.jsonl")).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        assert_eq!(run(d1.path()), run(d2.path()));
    }

    #[test]
    fn alpha_zero_never_updates_alignment_parameters() {
        let mut cfg = tiny_config();
        cfg.alpha = 0.0;
        cfg.total_steps = 6;
        cfg.warmup_steps = 2;
        let mut trainer = Trainer::new(cfg).unwrap();
        let before: Vec<Vec<f64>> = trainer
            .model
            .alignment_param_ids()
            .iter()
            .map(|&id| trainer.model.store.get(id).data.clone())
            .collect();
        for _ in 0..6 {
            let batch = trainer.next_batch().unwrap();
            trainer.train_step(&batch).unwrap();
        }
        for (i, &id) in trainer.model.alignment_param_ids().iter().enumerate() {
            assert_eq!(
                trainer.model.store.get(id).data,
                before[i],
                "alignment param {} moved under alpha = 0",
                trainer.model.store.name(id)
            );
        }
    }

    #[test]
    fn retrieval_finetune_leaves_decoder_cross_untouched() {
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        let before: Vec<Vec<f64>> = trainer
            .model
            .decoder_cross_param_ids()
            .iter()
            .map(|&id| trainer.model.store.get(id).data.clone())
            .collect();
        let group = ModalityGroup::parse("T-AV").unwrap();
        trainer.finetune(Task::Retrieval, &group, 4).unwrap();
        for (i, &id) in trainer.model.decoder_cross_param_ids().iter().enumerate() {
            assert_eq!(
                trainer.model.store.get(id).data,
                before[i],
                "decoder cross param {} moved during retrieval fine-tuning",
                trainer.model.store.name(id)
            );
        }
    }

    #[test]
    fn tv_caption_finetune_ignores_audio_parameters() {
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        let audio_ids: Vec<_> = {
            let p = &trainer.model.audio_enc;
            let mut ids = vec![p.patch_w, p.patch_b, p.pos_emb];
            for b in &p.blocks {
                ids.extend([b.attn.wq, b.attn.wk, b.attn.wv, b.attn.wo, b.ff_w1, b.ff_w2]);
            }
            ids
        };
        let before: Vec<Vec<f64>> = audio_ids
            .iter()
            .map(|&id| trainer.model.store.get(id).data.clone())
            .collect();
        let group = ModalityGroup::parse("T-V").unwrap();
        trainer.finetune(Task::Caption, &group, 4).unwrap();
        for (i, &id) in audio_ids.iter().enumerate() {
            assert_eq!(trainer.model.store.get(id).data, before[i]);
        }
    }

    #[test]
    fn dual_batch_with_audio_group_is_config_error() {
        let mut cfg = tiny_config();
        cfg.dataset_names = vec!["dual".into()];
        cfg.dataset_weights = vec![1.0];
        cfg.dataset_has_audio = vec![false];
        cfg.mga_groups = vec!["t-a".into()];
        cfg.mgc_groups = vec!["t-a".into()];
        let mut trainer = Trainer::new(cfg).unwrap();
        let batch = trainer.next_batch().unwrap();
        assert!(!batch.has_audio);
        assert!(matches!(trainer.train_step(&batch), Err(Error::Config(_))));
    }

    #[test]
    fn dual_batch_restricts_m6_to_text_vision() {
        let mut cfg = tiny_config();
        cfg.dataset_names = vec!["dual".into()];
        cfg.dataset_weights = vec![1.0];
        cfg.dataset_has_audio = vec![false];
        let mut trainer = Trainer::new(cfg).unwrap();
        let batch = trainer.next_batch().unwrap();
        let stats = trainer.train_step(&batch).unwrap();
        let labels: Vec<&str> = stats.per_group_mga.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, vec!["T-V"]);
        let labels: Vec<&str> = stats.per_group_mgc.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, vec!["T-V"]);
    }

    #[test]
    fn non_finite_loss_aborts_with_component_diagnostic() {
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        let id = trainer.model.align.proj_t_w;
        trainer.model.store.get_mut(id).data[0] = f64::NAN;
        let batch = trainer.next_batch().unwrap();
        let err = trainer.train_step(&batch).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("MGA") || msg.contains("alignment"), "got: {msg}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        for _ in 0..3 {
            let batch = trainer.next_batch().unwrap();
            trainer.train_step(&batch).unwrap();
        }
        trainer.save_checkpoint(&path).unwrap();
        let restored = Trainer::from_checkpoint_file(&path).unwrap();

        let (e1, _) = trainer.evaluate().unwrap();
        let (e2, _) = restored.evaluate().unwrap();
        assert_eq!(e1, e2);
        for (a, b) in trainer.model.store.ids().zip(restored.model.store.ids()) {
            assert_eq!(trainer.model.store.get(a).data, restored.model.store.get(b).data);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_training_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");

        let mut a = Trainer::new(tiny_config()).unwrap();
        for _ in 0..3 {
            let batch = a.next_batch().unwrap();
            a.train_step(&batch).unwrap();
        }
        a.save_checkpoint(&path).unwrap();
        for _ in 0..3 {
            let batch = a.next_batch().unwrap();
            a.train_step(&batch).unwrap();
        }

        let mut b = Trainer::from_checkpoint_file(&path).unwrap();
        for _ in 0..3 {
            let batch = b.next_batch().unwrap();
            b.train_step(&batch).unwrap();
        }

        assert_eq!(a.step, b.step);
        assert_eq!(a.opt.t, b.opt.t);
        for id in a.model.store.ids() {
            assert_eq!(
                a.model.store.get(id).data,
                b.model.store.get(id).data,
                "parameter {} diverged after resume",
                a.model.store.name(id)
            );
        }
    }

    #[test]
    fn corrupt_checkpoints_never_load_silently() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let trainer = Trainer::new(tiny_config()).unwrap();
        trainer.save_checkpoint(&path).unwrap();

        // Shape mismatch: restore into a model with different geometry.
        let ckpt = checkpoint::load(&path).unwrap();
        let mut other_cfg = tiny_config();
        other_cfg.text_dim = 32;
        other_cfg.vision_dim = 32;
        other_cfg.audio_dim = 32;
        other_cfg.common_dim = 32;
        let mut tampered = ckpt.clone();
        tampered.config_toml = other_cfg.to_toml().unwrap();
        assert!(matches!(
            Trainer::from_checkpoint_data(tampered),
            Err(Error::CheckpointShape { .. })
        ));

        // Missing tensor record.
        let mut missing = ckpt;
        missing.params.pop();
        assert!(matches!(
            Trainer::from_checkpoint_data(missing),
            Err(Error::CheckpointRecord(_))
        ));
    }

    #[test]
    fn finetuned_retrieval_beats_zero_shot() {
        let mut cfg = tiny_config();
        cfg.total_steps = 60;
        cfg.warmup_steps = 10;
        cfg.noise_std = 0.02;
        let mut trainer = Trainer::new(cfg).unwrap();
        // A short pretraining leg that leaves headroom.
        for _ in 0..10 {
            let batch = trainer.next_batch().unwrap();
            trainer.train_step(&batch).unwrap();
        }
        let zero_shot = trainer
            .evaluate()
            .unwrap()
            .0
            .into_iter()
            .find(|e| e.group == "T-AV")
            .unwrap();
        let group = ModalityGroup::parse("T-AV").unwrap();
        trainer.finetune(Task::Retrieval, &group, 40).unwrap();
        let tuned = trainer
            .evaluate()
            .unwrap()
            .0
            .into_iter()
            .find(|e| e.group == "T-AV")
            .unwrap();
        assert!(
            tuned.r1 > zero_shot.r1,
            "finetuned R@1 {} did not beat zero-shot {}",
            tuned.r1,
            zero_shot.r1
        );
    }

    #[test]
    fn qa_finetune_runs_and_updates() {
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        let head_before = trainer.model.store.get(trainer.model.decoder.head_w2).data.clone();
        let group = ModalityGroup::parse("T-AV").unwrap();
        trainer.finetune(Task::Qa, &group, 2).unwrap();
        let head_after = &trainer.model.store.get(trainer.model.decoder.head_w2).data;
        assert_ne!(&head_before, head_after);
    }
}
