//! Grouped contrastive alignment.
//!
//! Modality features are pooled per frame/clip, projected into one normalized
//! common space, and compared with a fine-grained token-level similarity:
//! bidirectional max over the token similarity matrix, aggregated with
//! learnable softmax weights. Matched batches feed a symmetric InfoNCE loss
//! per modality group; the task loss averages over the active groups.
//! Coarse/score-fusion/equal-average variants are selectable for ablations.

use rand_chacha::ChaCha20Rng;

use crate::encoders::{AudioFeatures, EncoderConfig, TextFeatures, VisionFeatures, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Vision,
    Audio,
}

impl Modality {
    fn letter(self) -> char {
        match self {
            Modality::Text => 'T',
            Modality::Vision => 'V',
            Modality::Audio => 'A',
        }
    }
}

/// A query modality paired with an ordered target modality set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityGroup {
    query: Modality,
    targets: Vec<Modality>,
}

impl ModalityGroup {
    /// Supported pairings: T-V, T-A, T-AV, V-A, A-TV, V-TA.
    pub fn new(query: Modality, targets: Vec<Modality>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Config("modality group needs at least one target".into()));
        }
        if targets.contains(&query) {
            return Err(Error::Config("group query cannot also be a target".into()));
        }
        let group = ModalityGroup { query, targets };
        const SUPPORTED: [&str; 6] = ["T-V", "T-A", "T-AV", "V-A", "A-TV", "V-TA"];
        if !SUPPORTED.contains(&group.label().as_str()) {
            return Err(Error::Config(format!(
                "unsupported modality group {} (supported: {})",
                group.label(),
                SUPPORTED.join(", ")
            )));
        }
        Ok(group)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let up = s.trim().to_uppercase();
        let (q, t) = up
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("malformed modality group '{s}'")))?;
        let parse_one = |c: char| match c {
            'T' => Ok(Modality::Text),
            'V' => Ok(Modality::Vision),
            'A' => Ok(Modality::Audio),
            _ => Err(Error::Config(format!("unknown modality '{c}' in group '{s}'"))),
        };
        let mut qc = q.chars();
        let query = parse_one(qc.next().ok_or_else(|| Error::Config(format!("empty query in '{s}'")))?)?;
        if qc.next().is_some() {
            return Err(Error::Config(format!("group '{s}' must have a single query modality")));
        }
        let targets = t.chars().map(parse_one).collect::<Result<Vec<_>>>()?;
        ModalityGroup::new(query, targets)
    }

    pub fn label(&self) -> String {
        let mut s = String::new();
        s.push(self.query.letter());
        s.push('-');
        for m in &self.targets {
            s.push(m.letter());
        }
        s
    }

    pub fn query(&self) -> Modality {
        self.query
    }

    pub fn targets(&self) -> &[Modality] {
        &self.targets
    }

    /// The default pretraining trio: T-AV, T-V, T-A.
    pub fn default_groups() -> Vec<ModalityGroup> {
        ["T-AV", "T-V", "T-A"]
            .iter()
            .map(|s| ModalityGroup::parse(s).expect("static groups are valid"))
            .collect()
    }

    /// All six supported groups.
    pub fn all_groups() -> Vec<ModalityGroup> {
        ["T-V", "T-A", "T-AV", "V-A", "A-TV", "V-TA"]
            .iter()
            .map(|s| ModalityGroup::parse(s).expect("static groups are valid"))
            .collect()
    }
}

// ── Variants ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    Fine,
    Coarse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AvFusion {
    Feature,
    Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Learned,
    Equal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextPool {
    Mean,
    Cls,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AlignmentVariant {
    pub granularity: Granularity,
    pub av_fusion: AvFusion,
    pub weighting: Weighting,
    pub text_pool: TextPool,
}

impl Default for AlignmentVariant {
    fn default() -> Self {
        AlignmentVariant {
            granularity: Granularity::Fine,
            av_fusion: AvFusion::Feature,
            weighting: Weighting::Learned,
            text_pool: TextPool::Mean,
        }
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AlignmentParams {
    pub proj_t_w: ParamId,
    pub proj_t_b: ParamId,
    pub proj_v_w: ParamId,
    pub proj_v_b: ParamId,
    pub proj_a_w: ParamId,
    pub proj_a_b: ParamId,
    pub weight_t: ParamId,
    pub weight_v: ParamId,
    pub weight_a: ParamId,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub log_tau: ParamId,
}

pub const INITIAL_TAU: f64 = 0.07;

pub fn init_alignment(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    cfg: &EncoderConfig,
    common_dim: usize,
) -> Result<AlignmentParams> {
    let c = common_dim;
    let proj = |name: &str, from: usize, rng: &mut ChaCha20Rng, store: &mut ParamStore| {
        let w = store.add(&format!("align.{name}.w"), Tensor::randn(vec![from, c], INIT_STD, rng))?;
        let b = store.add(&format!("align.{name}.b"), Tensor::zeros(vec![c]))?;
        Ok::<_, Error>((w, b))
    };
    let (proj_t_w, proj_t_b) = proj("proj_t", cfg.text_dim, rng, store)?;
    let (proj_v_w, proj_v_b) = proj("proj_v", cfg.vision_dim, rng, store)?;
    let (proj_a_w, proj_a_b) = proj("proj_a", cfg.audio_dim, rng, store)?;
    let weight_t = store.add("align.weight_t", Tensor::randn(vec![c, 1], INIT_STD, rng))?;
    let weight_v = store.add("align.weight_v", Tensor::randn(vec![c, 1], INIT_STD, rng))?;
    let weight_a = store.add("align.weight_a", Tensor::randn(vec![c, 1], INIT_STD, rng))?;
    let fuse_w = store.add("align.fuse.w", Tensor::randn(vec![2 * c, c], INIT_STD, rng))?;
    let fuse_b = store.add("align.fuse.b", Tensor::zeros(vec![c]))?;
    let log_tau = store.add("align.log_tau", Tensor::new(vec![1], vec![INITIAL_TAU.ln()])?)?;
    Ok(AlignmentParams {
        proj_t_w,
        proj_t_b,
        proj_v_w,
        proj_v_b,
        proj_a_w,
        proj_a_b,
        weight_t,
        weight_v,
        weight_a,
        fuse_w,
        fuse_b,
        log_tau,
    })
}

// ── Common-space embeddings ─────────────────────────────────────────────

/// One example's unit-norm rows in the shared space.
#[derive(Debug, Clone)]
pub struct CommonEmbeddings {
    pub text: NodeId,
    pub text_mask: Vec<bool>,
    pub vision: Option<NodeId>,
    pub audio: Option<NodeId>,
}

impl CommonEmbeddings {
    /// e_av: vision rows stacked over audio rows.
    pub fn audiovisual(&self, g: &mut Graph) -> Result<NodeId> {
        match (self.vision, self.audio) {
            (Some(v), Some(a)) => g.concat_rows(&[v, a]),
            _ => Err(Error::Config("audiovisual embedding needs both modalities".into())),
        }
    }

    fn rows(&self, m: Modality) -> Result<NodeId> {
        match m {
            Modality::Text => Ok(self.text),
            Modality::Vision => self
                .vision
                .ok_or_else(|| Error::Config("group references vision, absent from batch".into())),
            Modality::Audio => self
                .audio
                .ok_or_else(|| Error::Config("group references audio, absent from batch".into())),
        }
    }
}

/// Pool per-frame/clip features, project each modality, L2-normalize rows.
/// Text keeps all token positions; vision and audio mean-pool over their
/// within-frame/within-clip sequence.
pub fn pool_and_project(
    g: &mut Graph,
    store: &ParamStore,
    p: &AlignmentParams,
    text: &TextFeatures,
    vision: Option<&VisionFeatures>,
    audio: Option<&AudioFeatures>,
) -> Result<CommonEmbeddings> {
    let (tw, tb) = (g.param(store, p.proj_t_w), g.param(store, p.proj_t_b));
    let proj_t = g.linear(text.features, tw, tb)?;
    let e_t = g.l2_normalize_rows(proj_t)?;

    let pool = |g: &mut Graph, parts: &[NodeId]| -> Result<NodeId> {
        let pooled = parts
            .iter()
            .map(|&n| g.mean_rows(n))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&pooled)
    };

    let e_v = match vision {
        Some(v) => {
            let pooled = pool(g, &v.frames)?;
            let (w, b) = (g.param(store, p.proj_v_w), g.param(store, p.proj_v_b));
            let proj = g.linear(pooled, w, b)?;
            Some(g.l2_normalize_rows(proj)?)
        }
        None => None,
    };
    let e_a = match audio {
        Some(a) => {
            let pooled = pool(g, &a.clips)?;
            let (w, b) = (g.param(store, p.proj_a_w), g.param(store, p.proj_a_b));
            let proj = g.linear(pooled, w, b)?;
            Some(g.l2_normalize_rows(proj)?)
        }
        None => None,
    };

    Ok(CommonEmbeddings {
        text: e_t,
        text_mask: text.attention_mask.clone(),
        vision: e_v,
        audio: e_a,
    })
}

// ── Similarity ──────────────────────────────────────────────────────────

/// One side of a similarity computation: embedding rows plus the per-row
/// weighting logits from that modality's weighting map.
struct Side {
    rows: NodeId,
    logits: NodeId,
}

fn weight_map(p: &AlignmentParams, m: Modality) -> ParamId {
    match m {
        Modality::Text => p.weight_t,
        Modality::Vision => p.weight_v,
        Modality::Audio => p.weight_a,
    }
}

/// Build a side from one or more modalities of an example, fusing rows by
/// concatenation in the given order. Text contributes only unmasked rows.
fn build_side(
    g: &mut Graph,
    store: &ParamStore,
    p: &AlignmentParams,
    emb: &CommonEmbeddings,
    modalities: &[Modality],
) -> Result<Side> {
    let mut row_parts = Vec::new();
    let mut logit_parts = Vec::new();
    for &m in modalities {
        let rows = emb.rows(m)?;
        let rows = if m == Modality::Text {
            let keep: Vec<usize> = emb
                .text_mask
                .iter()
                .enumerate()
                .filter_map(|(i, &k)| k.then_some(i))
                .collect();
            if keep.is_empty() {
                return Err(Error::Contract("no unmasked text positions".into()));
            }
            g.gather_rows(rows, &keep)?
        } else {
            rows
        };
        let w = g.param(store, weight_map(p, m));
        logit_parts.push(g.matmul(rows, w)?);
        row_parts.push(rows);
    }
    Ok(Side {
        rows: g.concat_rows(&row_parts)?,
        logits: g.concat_rows(&logit_parts)?,
    })
}

fn side_weights(g: &mut Graph, side: &Side, weighting: Weighting) -> Result<NodeId> {
    let n = g.shape(side.rows)[0];
    match weighting {
        Weighting::Learned => {
            let flat = g.reshape(side.logits, vec![n])?;
            g.softmax(flat, 0)
        }
        Weighting::Equal => Ok(g.constant(vec![n], vec![1.0 / n as f64; n])),
    }
}

/// Token-level weighted bidirectional max similarity between two sides.
fn fine_similarity_node(g: &mut Graph, q: &Side, t: &Side, weighting: Weighting) -> Result<NodeId> {
    let tt = g.transpose(t.rows)?;
    let s = g.matmul(q.rows, tt)?;
    let q_max = g.max_axis(s, 1)?;
    let t_max = g.max_axis(s, 0)?;
    let w_q = side_weights(g, q, weighting)?;
    let w_t = side_weights(g, t, weighting)?;
    let term_q = g.dot(w_q, q_max)?;
    let term_t = g.dot(w_t, t_max)?;
    let sum = g.add(term_q, term_t)?;
    Ok(g.scale(sum, 0.5))
}

/// Fine-grained similarity s(T, X) between a query example's modality rows
/// and a target example's (possibly fused) modality rows.
pub fn fine_similarity(
    g: &mut Graph,
    store: &ParamStore,
    p: &AlignmentParams,
    emb_q: &CommonEmbeddings,
    emb_t: &CommonEmbeddings,
    group: &ModalityGroup,
    weighting: Weighting,
) -> Result<NodeId> {
    let q = build_side(g, store, p, emb_q, &[group.query()])?;
    let t = build_side(g, store, p, emb_t, group.targets())?;
    fine_similarity_node(g, &q, &t, weighting)
}

/// Mean-pooled (or [CLS]) global vectors, renormalized, dot product.
/// With two targets: feature fusion concatenates pooled vectors along the
/// hidden axis and projects; score fusion averages per-modality scores.
pub fn coarse_similarity(
    g: &mut Graph,
    store: &ParamStore,
    p: &AlignmentParams,
    emb_q: &CommonEmbeddings,
    emb_t: &CommonEmbeddings,
    group: &ModalityGroup,
    variant: &AlignmentVariant,
) -> Result<NodeId> {
    let pool_side = |g: &mut Graph, emb: &CommonEmbeddings, m: Modality| -> Result<NodeId> {
        let rows = emb.rows(m)?;
        let pooled = if m == Modality::Text {
            match variant.text_pool {
                TextPool::Cls => g.gather_rows(rows, &[0])?,
                TextPool::Mean => {
                    let keep: Vec<usize> = emb
                        .text_mask
                        .iter()
                        .enumerate()
                        .filter_map(|(i, &k)| k.then_some(i))
                        .collect();
                    if keep.is_empty() {
                        return Err(Error::Contract("no unmasked text positions".into()));
                    }
                    let real = g.gather_rows(rows, &keep)?;
                    g.mean_rows(real)?
                }
            }
        } else {
            g.mean_rows(rows)?
        };
        g.l2_normalize_rows(pooled)
    };

    let q = pool_side(g, emb_q, group.query())?;
    let dot_with = |g: &mut Graph, q: NodeId, t: NodeId| -> Result<NodeId> {
        let tt = g.transpose(t)?;
        let m = g.matmul(q, tt)?;
        g.reshape(m, vec![1])
    };

    match group.targets() {
        [single] => {
            let t = pool_side(g, emb_t, *single)?;
            dot_with(g, q, t)
        }
        [first, second] => match variant.av_fusion {
            AvFusion::Feature => {
                let t1 = pool_side(g, emb_t, *first)?;
                let t2 = pool_side(g, emb_t, *second)?;
                let cat = g.concat_cols(&[t1, t2])?;
                let (w, b) = (g.param(store, p.fuse_w), g.param(store, p.fuse_b));
                let fused = g.linear(cat, w, b)?;
                let fused = g.l2_normalize_rows(fused)?;
                dot_with(g, q, fused)
            }
            AvFusion::Score => {
                let t1 = pool_side(g, emb_t, *first)?;
                let t2 = pool_side(g, emb_t, *second)?;
                let s1 = dot_with(g, q, t1)?;
                let s2 = dot_with(g, q, t2)?;
                let sum = g.add(s1, s2)?;
                Ok(g.scale(sum, 0.5))
            }
        },
        _ => Err(Error::Config("coarse similarity supports at most two targets".into())),
    }
}

/// Similarity under the configured variant.
pub fn group_similarity(
    g: &mut Graph,
    store: &ParamStore,
    p: &AlignmentParams,
    variant: &AlignmentVariant,
    group: &ModalityGroup,
    emb_q: &CommonEmbeddings,
    emb_t: &CommonEmbeddings,
) -> Result<NodeId> {
    match (variant.granularity, variant.av_fusion, group.targets().len()) {
        (Granularity::Coarse, _, _) => coarse_similarity(g, store, p, emb_q, emb_t, group, variant),
        (Granularity::Fine, AvFusion::Score, 2) => {
            let q = build_side(g, store, p, emb_q, &[group.query()])?;
            let mut scores = Vec::new();
            for &m in group.targets() {
                let t = build_side(g, store, p, emb_t, &[m])?;
                scores.push(fine_similarity_node(g, &q, &t, variant.weighting)?);
            }
            let sum = g.add(scores[0], scores[1])?;
            Ok(g.scale(sum, 0.5))
        }
        (Granularity::Fine, _, _) => {
            fine_similarity(g, store, p, emb_q, emb_t, group, variant.weighting)
        }
    }
}

// ── Losses ──────────────────────────────────────────────────────────────

/// Symmetric InfoNCE over a `[B, B]` similarity matrix whose diagonal holds
/// the matched pairs. `log_tau` is the learnable log-temperature node.
pub fn contrastive_loss(g: &mut Graph, sims: NodeId, log_tau: NodeId) -> Result<NodeId> {
    let shape = g.shape(sims).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return Err(Error::Contract(format!(
            "contrastive loss needs a square batch matrix, got {shape:?}"
        )));
    }
    let neg = g.neg(log_tau);
    let inv_tau = g.exp(neg);
    let logits = g.mul_scalar(sims, inv_tau)?;
    let by_row = g.log_softmax(logits, 1)?;
    let by_col = g.log_softmax(logits, 0)?;
    let diag_r = g.take_diag(by_row)?;
    let diag_c = g.take_diag(by_col)?;
    let mean_r = g.mean_all(diag_r);
    let mean_c = g.mean_all(diag_c);
    let sum = g.add(mean_r, mean_c)?;
    Ok(g.scale(sum, -0.5))
}

/// All-pairs similarity matrix for one group over a matched batch.
pub fn batch_similarity_matrix(
    g: &mut Graph,
    store: &ParamStore,
    p: &AlignmentParams,
    variant: &AlignmentVariant,
    group: &ModalityGroup,
    batch: &[CommonEmbeddings],
) -> Result<NodeId> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut cells = Vec::with_capacity(b * b);
    for qi in batch {
        for tj in batch {
            cells.push(group_similarity(g, store, p, variant, group, qi, tj)?);
        }
    }
    g.stack_scalars(&cells, b, b)
}

/// Grouped alignment loss: mean of the per-group contrastive losses.
/// Returns the loss node plus (label, value) pairs for logging.
pub fn mga_loss(
    g: &mut Graph,
    store: &ParamStore,
    p: &AlignmentParams,
    variant: &AlignmentVariant,
    groups: &[ModalityGroup],
    batch: &[CommonEmbeddings],
) -> Result<(NodeId, Vec<(String, f64)>)> {
    if groups.is_empty() {
        return Err(Error::Contract("mga_loss needs at least one group".into()));
    }
    if batch.is_empty() {
        return Err(Error::Contract("mga_loss needs a nonempty batch".into()));
    }
    let log_tau = g.param(store, p.log_tau);
    let mut total: Option<NodeId> = None;
    let mut per_group = Vec::with_capacity(groups.len());
    for group in groups {
        let sims = batch_similarity_matrix(g, store, p, variant, group, batch)?;
        let loss = contrastive_loss(g, sims, log_tau)?;
        per_group.push((group.label(), g.value(loss)));
        total = Some(match total {
            Some(t) => g.add(t, loss)?,
            None => loss,
        });
    }
    let total = g.scale(total.expect("nonempty groups"), 1.0 / groups.len() as f64);
    Ok((total, per_group))
}
