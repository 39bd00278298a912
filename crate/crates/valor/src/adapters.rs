//! Downstream task adapters: retrieval ranking with optional dual-softmax
//! post-processing, autoregressive caption generation (greedy or beam), and
//! generative QA with a mixed question/answer attention mask.

use crate::data::BatchExample;
use crate::encoders::{encode_audio, encode_vision};
use crate::error::{Error, Result};
use crate::mga::{group_similarity, AlignmentVariant, Modality, ModalityGroup};
use crate::mgc::{
    decoder_forward, project_conditions, select_conditions, AttentionMode, ConditionalFeatures,
};
use crate::model::Model;
use crate::tensor::{Graph, Tensor};
use crate::text::{CLS, MASK, SEP};

pub const DUAL_SOFTMAX_TEMPERATURE: f64 = 100.0;

// ── Retrieval ───────────────────────────────────────────────────────────

/// Candidate embeddings live on the index's own tape.
pub struct RetrievalIndex {
    graph: Graph,
    ids: Vec<usize>,
    embeddings: Vec<crate::mga::CommonEmbeddings>,
}

impl RetrievalIndex {
    /// Encode and embed every candidate once. Ids must be unique.
    pub fn build(model: &Model, candidates: &[(usize, BatchExample)]) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Contract("retrieval index needs at least one candidate".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (id, _) in candidates {
            if !seen.insert(*id) {
                return Err(Error::Contract(format!("duplicate candidate id {id}")));
            }
        }
        let mut graph = Graph::new();
        let mut ids = Vec::with_capacity(candidates.len());
        let mut embeddings = Vec::with_capacity(candidates.len());
        for (id, ex) in candidates {
            let enc = model.encode_example(&mut graph, ex)?;
            embeddings.push(model.embed_example(&mut graph, &enc)?);
            ids.push(*id);
        }
        Ok(RetrievalIndex { graph, ids, embeddings })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Similarity of one query against every candidate, in candidate order.
    pub fn scores(
        &mut self,
        model: &Model,
        query: &BatchExample,
        group: &ModalityGroup,
        variant: &AlignmentVariant,
    ) -> Result<Vec<f64>> {
        let g = &mut self.graph;
        let enc = model.encode_example(g, query)?;
        let q_emb = model.embed_example(g, &enc)?;
        let mut scores = Vec::with_capacity(self.embeddings.len());
        for cand in &self.embeddings {
            let s = group_similarity(g, &model.store, &model.align, variant, group, &q_emb, cand)?;
            scores.push(g.value(s));
        }
        Ok(scores)
    }

    /// Candidates ordered by descending score; ties break toward the lower
    /// candidate id so rankings are insertion-order independent.
    pub fn rank(
        &mut self,
        model: &Model,
        query: &BatchExample,
        group: &ModalityGroup,
        variant: &AlignmentVariant,
    ) -> Result<Vec<(usize, f64)>> {
        let scores = self.scores(model, query, group, variant)?;
        Ok(rank_by_score(&self.ids, &scores))
    }
}

/// Descending stable ordering with id-ascending tie-break.
pub fn rank_by_score(ids: &[usize], scores: &[f64]) -> Vec<(usize, f64)> {
    let mut order: Vec<(usize, f64)> = ids.iter().copied().zip(scores.iter().copied()).collect();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    order
}

/// Row-wise softmax of `s * temperature`.
pub fn row_softmax(s: &[Vec<f64>], temperature: f64) -> Vec<Vec<f64>> {
    s.iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * temperature;
            let exps: Vec<f64> = row.iter().map(|v| (v * temperature - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.iter().map(|e| e / sum).collect()
        })
        .collect()
}

fn transpose_matrix(s: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (r, c) = (s.len(), s[0].len());
    (0..c).map(|j| (0..r).map(|i| s[i][j]).collect()).collect()
}

/// Dual-softmax post-processing: elementwise product of the row-wise and
/// column-wise softmax of the score matrix. Ranking proceeds on the product.
pub fn dual_softmax(s: &[Vec<f64>], temperature: f64) -> Result<Vec<Vec<f64>>> {
    if s.is_empty() || s[0].is_empty() {
        return Err(Error::Contract("dual_softmax needs a nonempty matrix".into()));
    }
    if s.iter().any(|row| row.len() != s[0].len()) {
        return Err(Error::Contract("dual_softmax needs a rectangular matrix".into()));
    }
    if s.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("dual_softmax input must be finite".into()));
    }
    let rows = row_softmax(s, temperature);
    let cols_t = row_softmax(&transpose_matrix(s), temperature);
    let cols = transpose_matrix(&cols_t);
    Ok(rows
        .iter()
        .zip(&cols)
        .map(|(r, c)| r.iter().zip(c).map(|(x, y)| x * y).collect())
        .collect())
}

/// Fraction of queries whose ground truth lands in the top `k`.
pub fn recall_at_k(rankings: &[Vec<usize>], ground_truth: &[usize], k: usize) -> Result<f64> {
    if rankings.len() != ground_truth.len() {
        return Err(Error::Contract(format!(
            "{} rankings for {} ground-truth entries",
            rankings.len(),
            ground_truth.len()
        )));
    }
    if rankings.is_empty() {
        return Err(Error::Contract("recall needs at least one query".into()));
    }
    if let Some(r) = rankings.iter().find(|r| k > r.len()) {
        return Err(Error::Contract(format!(
            "k {k} larger than candidate count {}",
            r.len()
        )));
    }
    let hits = rankings
        .iter()
        .zip(ground_truth)
        .filter(|(r, gt)| r[..k].contains(gt))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

// ── Generation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenerationConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    pub max_length: usize,
    pub end_token: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            strategy: Strategy::Beam,
            beam_size: 3,
            max_length: 16,
            end_token: SEP,
        }
    }
}

impl GenerationConfig {
    pub fn greedy(max_length: usize) -> Self {
        GenerationConfig {
            strategy: Strategy::Greedy,
            beam_size: 1,
            max_length,
            end_token: SEP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_length == 0 {
            return Err(Error::Config("beam size and max length must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSequence {
    /// Generated token ids, end token excluded.
    pub tokens: Vec<usize>,
    /// False when max length was reached before the end token.
    pub terminated: bool,
    /// Total log-probability of every emitted token (end token included).
    pub log_prob: f64,
    /// Total log-probability divided by emitted token count.
    pub normalized_log_prob: f64,
}

/// Encode only what the group needs and project to condition features.
fn conditions_for(
    model: &Model,
    g: &mut Graph,
    frames: Option<&Tensor>,
    spectrograms: Option<&Tensor>,
    group: &ModalityGroup,
) -> Result<ConditionalFeatures> {
    let needs = |m: Modality| group.targets().contains(&m);
    let vision = if needs(Modality::Vision) {
        let f = frames.ok_or_else(|| Error::Config("group references vision, absent from input".into()))?;
        Some(encode_vision(g, &model.store, &model.vision_enc, &model.config.encoder, f)?)
    } else {
        None
    };
    let audio = if needs(Modality::Audio) {
        let s = spectrograms
            .ok_or_else(|| Error::Config("group references audio, absent from input".into()))?;
        Some(encode_audio(g, &model.store, &model.audio_enc, &model.config.encoder, s)?)
    } else {
        None
    };
    let all = project_conditions(g, &model.store, &model.decoder, vision.as_ref(), audio.as_ref())?;
    select_conditions(&all, group)
}

/// Log-probabilities over the vocabulary for the next token, given the
/// prefix: the decoder reads `prefix ++ [MASK]` and the masked position's
/// logits are scored.
fn next_token_log_probs(
    model: &Model,
    g: &mut Graph,
    prefix: &[usize],
    conds: &ConditionalFeatures,
    mode: AttentionMode,
) -> Result<Vec<f64>> {
    let mut ids = prefix.to_vec();
    ids.push(MASK);
    let logits = decoder_forward(
        g,
        &model.store,
        &model.decoder,
        &model.config.encoder,
        &ids,
        conds,
        mode,
    )?;
    let last = g.shape(logits)[0] - 1;
    let row = g.gather_rows(logits, &[last])?;
    let v = g.shape(row)[1];
    let flat = g.reshape(row, vec![v])?;
    let lp = g.log_softmax(flat, 0)?;
    Ok(g.data(lp).to_vec())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let _ = values[best];
    best
}

struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
    emitted: usize,
    finished: bool,
}

/// Iterative masked decoding: `[CLS] [MASK]` predicts the first token,
/// `[CLS] t1 [MASK]` the next, until the end token or the length budget.
fn decode(
    model: &Model,
    g: &mut Graph,
    head: &[usize],
    conds: &ConditionalFeatures,
    cfg: &GenerationConfig,
    mode_for_len: impl Fn(usize) -> AttentionMode,
) -> Result<GeneratedSequence> {
    cfg.validate()?;
    // The running input is head ++ generated ++ [MASK]; it must fit N_t.
    let room = model
        .config
        .encoder
        .max_text_len
        .saturating_sub(head.len() + 1);
    let budget = cfg.max_length.min(room);
    if budget == 0 {
        return Err(Error::Config(format!(
            "no room to generate: head of {} tokens fills max_text_len {}",
            head.len(),
            model.config.encoder.max_text_len
        )));
    }

    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        emitted: 0,
        finished: false,
    }];

    loop {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for beam in &beams {
            if beam.finished {
                candidates.push(Hypothesis {
                    tokens: beam.tokens.clone(),
                    log_prob: beam.log_prob,
                    emitted: beam.emitted,
                    finished: true,
                });
                continue;
            }
            let mut prefix = head.to_vec();
            prefix.extend_from_slice(&beam.tokens);
            let mode = mode_for_len(prefix.len() + 1);
            let lp = next_token_log_probs(model, g, &prefix, conds, mode)?;
            // Expanding over the whole vocabulary in id order keeps ties
            // deterministic after the stable sort below.
            for (tok, &tok_lp) in lp.iter().enumerate() {
                let finished_now = tok == cfg.end_token;
                let out_of_room = !finished_now && beam.tokens.len() + 1 >= budget;
                let mut tokens = beam.tokens.clone();
                if !finished_now {
                    tokens.push(tok);
                }
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: beam.log_prob + tok_lp,
                    emitted: beam.emitted + 1,
                    finished: finished_now || out_of_room,
                });
            }
        }
        candidates.sort_by(|a, b| b.log_prob.partial_cmp(&a.log_prob).unwrap_or(std::cmp::Ordering::Equal));
        candidates.truncate(cfg.beam_size);
        beams = candidates;
    }

    // Final selection is length-normalized.
    let best = beams
        .into_iter()
        .map(|b| {
            let norm = b.log_prob / b.emitted.max(1) as f64;
            (norm, b)
        })
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal))
        .expect("at least one beam");
    let (normalized, hyp) = best;
    let terminated = hyp.tokens.len() < budget || hyp.emitted > hyp.tokens.len();
    Ok(GeneratedSequence {
        terminated: terminated && hyp.finished,
        tokens: hyp.tokens,
        log_prob: hyp.log_prob,
        normalized_log_prob: normalized,
    })
}

fn decode_greedy(
    model: &Model,
    g: &mut Graph,
    head: &[usize],
    conds: &ConditionalFeatures,
    cfg: &GenerationConfig,
    mode_for_len: impl Fn(usize) -> AttentionMode,
) -> Result<GeneratedSequence> {
    cfg.validate()?;
    let room = model
        .config
        .encoder
        .max_text_len
        .saturating_sub(head.len() + 1);
    let budget = cfg.max_length.min(room);
    if budget == 0 {
        return Err(Error::Config(format!(
            "no room to generate: head of {} tokens fills max_text_len {}",
            head.len(),
            model.config.encoder.max_text_len
        )));
    }
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut emitted = 0usize;
    let mut terminated = false;
    while tokens.len() < budget {
        let mut prefix = head.to_vec();
        prefix.extend_from_slice(&tokens);
        let mode = mode_for_len(prefix.len() + 1);
        let lp = next_token_log_probs(model, g, &prefix, conds, mode)?;
        let tok = argmax(&lp);
        log_prob += lp[tok];
        emitted += 1;
        if tok == cfg.end_token {
            terminated = true;
            break;
        }
        tokens.push(tok);
    }
    Ok(GeneratedSequence {
        tokens,
        terminated,
        log_prob,
        normalized_log_prob: log_prob / emitted.max(1) as f64,
    })
}

/// Autoregressive caption generation conditioned on the group's modalities.
pub fn generate_caption(
    model: &Model,
    frames: Option<&Tensor>,
    spectrograms: Option<&Tensor>,
    group: &ModalityGroup,
    cfg: &GenerationConfig,
) -> Result<GeneratedSequence> {
    let mut g = Graph::new();
    let conds = conditions_for(model, &mut g, frames, spectrograms, group)?;
    let head = [CLS];
    match cfg.strategy {
        Strategy::Greedy => decode_greedy(model, &mut g, &head, &conds, cfg, |_| AttentionMode::Causal),
        Strategy::Beam => decode(model, &mut g, &head, &conds, cfg, |_| AttentionMode::Causal),
    }
}

/// Generative QA: the decoder reads `[CLS] question ++ answer-so-far`;
/// question positions attend bidirectionally, answer positions causally.
pub fn answer_question(
    model: &Model,
    question_ids: &[usize],
    frames: Option<&Tensor>,
    spectrograms: Option<&Tensor>,
    group: &ModalityGroup,
    cfg: &GenerationConfig,
) -> Result<GeneratedSequence> {
    if question_ids.is_empty() {
        return Err(Error::Contract("question must be nonempty".into()));
    }
    let mut g = Graph::new();
    let conds = conditions_for(model, &mut g, frames, spectrograms, group)?;
    let mut head = vec![CLS];
    head.extend_from_slice(question_ids);
    let question_len = head.len();
    let mode = move |_l: usize| AttentionMode::MixedQa { question_len };
    match cfg.strategy {
        Strategy::Greedy => decode_greedy(model, &mut g, &head, &conds, cfg, mode),
        Strategy::Beam => decode(model, &mut g, &head, &conds, cfg, mode),
    }
}

// ── Evaluation report ───────────────────────────────────────────────────

/// One evaluation's structured-text report: one record per query with the
/// top-10 candidates, then a summary block. Field order is fixed so reports
/// diff cleanly.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: Vec<(usize, Vec<(usize, f64)>)>,
    pub summary: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (query_id, top) in &self.records {
            out.push_str(&format!("query {query_id} |"));
            for (cand, score) in top.iter().take(10) {
                out.push_str(&format!(" {cand}:{score:.6}"));
            }
            out.push('\n');
        }
        for (name, value) in &self.summary {
            out.push_str(&format!("summary {name} {value:.6}\n"));
        }
        out
    }
}
