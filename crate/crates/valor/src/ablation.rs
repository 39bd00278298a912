//! Ablation runner: trains a grid of named configurations with a shared seed
//! and budget, evaluates each zero-shot and after single-objective
//! fine-tuning, and renders a results table.

use crate::adapters::{generate_caption, GenerationConfig};
use crate::error::{Error, Result};
use crate::mga::{AvFusion, Granularity, ModalityGroup, Weighting};
use crate::mgc::FusionVariant;
use crate::text::detokenize;
use crate::trainer::{Task, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// Alignment modality-group subsets M1..M7, alignment objective only.
    MgaGroups,
    /// Captioning modality-group subsets, captioning objective only.
    MgcGroups,
    /// Coarse/fine x score/feature (+ learnable weighting) on T-AV alignment.
    AlignmentVariants,
    /// The five decoder fusion attention wirings on T-AV captioning.
    FusionVariants,
    /// Weight sharing and loss-ratio settings for the joint objective.
    CombineTasks,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "mga-groups" => Ok(AblationAxis::MgaGroups),
            "mgc-groups" => Ok(AblationAxis::MgcGroups),
            "alignment-variants" => Ok(AblationAxis::AlignmentVariants),
            "fusion-variants" => Ok(AblationAxis::FusionVariants),
            "combine-tasks" => Ok(AblationAxis::CombineTasks),
            other => Err(Error::Config(format!(
                "unknown ablation axis '{other}' (expected mga-groups, mgc-groups, \
                 alignment-variants, fusion-variants, combine-tasks)"
            ))),
        }
    }

    /// Metric per benchmark: retrieval R@1 for alignment axes, exact-match
    /// caption accuracy for captioning axes.
    pub fn metric(&self) -> Metric {
        match self {
            AblationAxis::MgcGroups | AblationAxis::FusionVariants => Metric::CaptionAccuracy,
            _ => Metric::RetrievalR1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    RetrievalR1,
    CaptionAccuracy,
}

type Patch = Box<dyn Fn(&mut TrainConfig)>;

fn group_patch(mga: Vec<&str>, mgc: Vec<&str>, alpha: f64) -> Patch {
    let mga: Vec<String> = mga.into_iter().map(str::to_string).collect();
    let mgc: Vec<String> = mgc.into_iter().map(str::to_string).collect();
    Box::new(move |cfg: &mut TrainConfig| {
        cfg.mga_groups = mga.clone();
        cfg.mgc_groups = mgc.clone();
        cfg.alpha = alpha;
    })
}

/// Named configuration rows for one axis.
pub fn grid_for(axis: AblationAxis) -> Vec<(String, Patch)> {
    match axis {
        AblationAxis::MgaGroups => vec![
            ("M1".into(), group_patch(vec!["t-v"], vec![], 1.0)),
            ("M2".into(), group_patch(vec!["t-a"], vec![], 1.0)),
            ("M3".into(), group_patch(vec!["t-av"], vec![], 1.0)),
            ("M4".into(), group_patch(vec!["t-v", "t-av"], vec![], 1.0)),
            ("M5".into(), group_patch(vec!["t-a", "t-av"], vec![], 1.0)),
            ("M6".into(), group_patch(vec!["t-v", "t-a", "t-av"], vec![], 1.0)),
            (
                "M7".into(),
                group_patch(vec!["t-v", "t-a", "t-av", "v-a", "a-tv", "v-ta"], vec![], 1.0),
            ),
        ],
        AblationAxis::MgcGroups => vec![
            ("G1".into(), group_patch(vec![], vec!["t-v"], 0.0)),
            ("G2".into(), group_patch(vec![], vec!["t-a"], 0.0)),
            ("G3".into(), group_patch(vec![], vec!["t-av"], 0.0)),
            ("G4".into(), group_patch(vec![], vec!["t-v", "t-av"], 0.0)),
            ("G5".into(), group_patch(vec![], vec!["t-a", "t-av"], 0.0)),
            ("G6".into(), group_patch(vec![], vec!["t-v", "t-a", "t-av"], 0.0)),
        ],
        AblationAxis::AlignmentVariants => {
            let mk = |name: &str, gran: Granularity, fusion: AvFusion, w: Weighting| -> (String, Patch) {
                (
                    name.to_string(),
                    Box::new(move |cfg: &mut TrainConfig| {
                        cfg.mga_groups = vec!["t-av".into()];
                        cfg.mgc_groups = vec![];
                        cfg.alpha = 1.0;
                        cfg.alignment_granularity = gran;
                        cfg.alignment_fusion = fusion;
                        cfg.alignment_weighting = w;
                    }),
                )
            };
            vec![
                mk("coarse+score", Granularity::Coarse, AvFusion::Score, Weighting::Equal),
                mk("coarse+feature", Granularity::Coarse, AvFusion::Feature, Weighting::Equal),
                mk("fine+score", Granularity::Fine, AvFusion::Score, Weighting::Equal),
                mk("fine+feature", Granularity::Fine, AvFusion::Feature, Weighting::Equal),
                mk("fine+feature+weighted", Granularity::Fine, AvFusion::Feature, Weighting::Learned),
            ]
        }
        AblationAxis::FusionVariants => FusionVariant::all()
            .into_iter()
            .map(|variant| {
                let name = variant.label().to_string();
                let patch: Patch = Box::new(move |cfg: &mut TrainConfig| {
                    cfg.mga_groups = vec![];
                    cfg.mgc_groups = vec!["t-av".into()];
                    cfg.alpha = 0.0;
                    cfg.fusion_variant = variant;
                });
                (name, patch)
            })
            .collect(),
        AblationAxis::CombineTasks => {
            let mk = |share: bool, alpha: f64| -> (String, Patch) {
                (
                    format!("share={} alpha={alpha}", if share { "y" } else { "n" }),
                    Box::new(move |cfg: &mut TrainConfig| {
                        cfg.share_weights = share;
                        cfg.alpha = alpha;
                        cfg.mga_groups = vec!["t-v".into(), "t-a".into(), "t-av".into()];
                        cfg.mgc_groups = vec!["t-v".into(), "t-a".into(), "t-av".into()];
                    }),
                )
            };
            vec![
                mk(false, 1.0),
                mk(true, 1.0),
                mk(true, 0.5),
                mk(true, 1.5),
                mk(true, 3.0),
            ]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCellResult {
    pub benchmark: String,
    pub zero_shot: f64,
    pub finetuned: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub cells: Vec<AblationCellResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub metric: Metric,
    pub benchmarks: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// Exact-match caption accuracy over the held-out split with greedy decoding.
pub fn caption_accuracy(trainer: &Trainer, group: &ModalityGroup) -> Result<f64> {
    let split = trainer.eval_split()?;
    let cfg = GenerationConfig::greedy(trainer.config.max_text_len - 2);
    let mut hits = 0usize;
    for ex in &split {
        let out = generate_caption(
            &trainer.model,
            Some(&ex.frames),
            ex.spectrograms.as_ref(),
            group,
            &cfg,
        )?;
        if detokenize(&out.tokens, &trainer.vocab) == ex.caption {
            hits += 1;
        }
    }
    Ok(hits as f64 / split.len() as f64)
}

fn benchmark_metric(trainer: &Trainer, group: &ModalityGroup, metric: Metric) -> Result<f64> {
    match metric {
        Metric::RetrievalR1 => {
            let (evals, _) = trainer.evaluate()?;
            evals
                .iter()
                .find(|e| e.group == group.label())
                .map(|e| e.r1)
                .ok_or_else(|| Error::Config(format!("benchmark group {} not evaluated", group.label())))
        }
        Metric::CaptionAccuracy => caption_accuracy(trainer, group),
    }
}

/// Train every configuration on the axis with the base config's seed and
/// budget, then score each benchmark group zero-shot and after fine-tuning.
/// Optimizer state is never shared across cells: every cell starts from a
/// fresh trainer and every fine-tune restores the cell's own pretrained
/// snapshot.
pub fn run_ablation(
    base: &TrainConfig,
    axis: AblationAxis,
    benchmarks: &[ModalityGroup],
) -> Result<AblationResult> {
    if benchmarks.is_empty() {
        return Err(Error::Contract("ablation needs at least one benchmark group".into()));
    }
    let metric = axis.metric();
    let finetune_task = match metric {
        Metric::RetrievalR1 => Task::Retrieval,
        Metric::CaptionAccuracy => Task::Caption,
    };
    let mut rows = Vec::new();
    for (name, patch) in grid_for(axis) {
        let mut cfg = base.clone();
        patch(&mut cfg);
        cfg.eval_groups = benchmarks.iter().map(|g| g.label().to_lowercase()).collect();
        cfg.validate()?;
        let mut trainer = Trainer::new(cfg)?;
        trainer.pretrain(None)?;
        let snapshot = trainer.to_checkpoint()?;

        let mut cells = Vec::with_capacity(benchmarks.len());
        for group in benchmarks {
            let zero_shot = benchmark_metric(&trainer, group, metric)?;
            let mut tuned = Trainer::from_checkpoint_data(snapshot.clone())?;
            let task = match finetune_task {
                Task::Retrieval => Task::Retrieval,
                Task::Caption => Task::Caption,
                Task::Qa => Task::Qa,
            };
            tuned.finetune(task, group, tuned.config.finetune_steps)?;
            let finetuned = benchmark_metric(&tuned, group, metric)?;
            cells.push(AblationCellResult {
                benchmark: group.label(),
                zero_shot,
                finetuned,
            });
        }
        rows.push(AblationRow { name, cells });
    }
    Ok(AblationResult {
        metric,
        benchmarks: benchmarks.iter().map(|g| g.label()).collect(),
        rows,
    })
}

/// Fixed-width text table: one row per configuration, one
/// `zero-shot/finetune` cell per benchmark group.
pub fn render_table(result: &AblationResult) -> String {
    let metric_name = match result.metric {
        Metric::RetrievalR1 => "R@1",
        Metric::CaptionAccuracy => "caption accuracy",
    };
    let name_w = result
        .rows
        .iter()
        .map(|r| r.name.len())
        .chain(["config".len()])
        .max()
        .unwrap_or(6);
    let mut out = format!("metric: {metric_name} (zero-shot/finetune)\n");
    out.push_str(&format!("{:<name_w$}", "config"));
    for b in &result.benchmarks {
        out.push_str(&format!(" | {b:>11}"));
    }
    out.push('\n');
    out.push_str(&"-".repeat(name_w + result.benchmarks.len() * 14));
    out.push('\n');
    for row in &result.rows {
        out.push_str(&format!("{:<name_w$}", row.name));
        for cell in &row.cells {
            out.push_str(&format!(" | {:>5.3}/{:<5.3}", cell.zero_shot, cell.finetuned));
        }
        out.push('\n');
    }
    out
}
