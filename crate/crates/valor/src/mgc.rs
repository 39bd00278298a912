//! Grouped causal masked captioning.
//!
//! Text tokens are randomly replaced with [MASK]; the decoder reconstructs
//! them under a causal self-attention mask, conditioned on vision/audio
//! features through one of five fusion attention wirings. The loss is mean
//! cross-entropy over masked positions, averaged over the active modality
//! groups, and joins the alignment loss as `alpha * L_align + L_caption`.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::encoders::{
    attention, feed_forward, init_attn, init_block, transformer_block, AttnParams, AudioFeatures,
    BlockParams, EncoderConfig, TextEncoderParams, VisionFeatures, INIT_STD, LAYER_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::mga::{Modality, ModalityGroup};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::text::{CLS, MASK, PAD, SEP};

/// Decoder fusion attention wirings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionVariant {
    /// Single self-attention over [vision + audio + text] with a part-causal mask.
    MergeAttention,
    /// Two stacked cross-attention layers: audio first, then vision.
    AudioVisualCross,
    /// Two stacked cross-attention layers: vision first, then audio.
    VisualAudioCross,
    /// Two cross-attention layers with independent parameters, outputs summed.
    ParallelCross,
    /// One cross-attention layer over the sequence concatenation of both.
    ConcatenateCross,
}

impl FusionVariant {
    pub fn all() -> [FusionVariant; 5] {
        [
            FusionVariant::MergeAttention,
            FusionVariant::AudioVisualCross,
            FusionVariant::VisualAudioCross,
            FusionVariant::ParallelCross,
            FusionVariant::ConcatenateCross,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            FusionVariant::MergeAttention => "merge-attention",
            FusionVariant::AudioVisualCross => "audio-visual-cross",
            FusionVariant::VisualAudioCross => "visual-audio-cross",
            FusionVariant::ParallelCross => "parallel-cross",
            FusionVariant::ConcatenateCross => "concatenate-cross",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::all()
            .into_iter()
            .find(|v| v.label() == s.trim().to_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown fusion variant '{s}'")))
    }
}

// ── Token masking ───────────────────────────────────────────────────────

/// One sequence with [MASK] substitutions and reconstruction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTokens {
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub mask_positions: Vec<usize>,
    pub attention_mask: Vec<bool>,
}

/// Independently mask each non-special token with probability `mask_prob`;
/// if nothing was selected, force one uniformly chosen non-special token so
/// every example contributes loss. [CLS]/[SEP]/[PAD] are never masked.
pub fn mask_tokens(
    token_ids: &[usize],
    attention_mask: &[bool],
    mask_prob: f64,
    rng: &mut ChaCha20Rng,
) -> Result<MaskedTokens> {
    if !(0.0 < mask_prob && mask_prob < 1.0) {
        return Err(Error::Contract(format!(
            "mask probability {mask_prob} must lie strictly between 0 and 1"
        )));
    }
    let candidates: Vec<usize> = token_ids
        .iter()
        .enumerate()
        .filter_map(|(i, &id)| (!matches!(id, PAD | CLS | SEP)).then_some(i))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Contract("sequence has no maskable tokens".into()));
    }

    let mut input_ids = token_ids.to_vec();
    let mut mask_positions = Vec::new();
    let mut target_ids = Vec::new();
    for &i in &candidates {
        if rng.gen_bool(mask_prob) {
            mask_positions.push(i);
            target_ids.push(token_ids[i]);
            input_ids[i] = MASK;
        }
    }
    if mask_positions.is_empty() {
        let i = candidates[rng.gen_range(0..candidates.len())];
        mask_positions.push(i);
        target_ids.push(token_ids[i]);
        input_ids[i] = MASK;
    }
    Ok(MaskedTokens {
        input_ids,
        target_ids,
        mask_positions,
        attention_mask: attention_mask.to_vec(),
    })
}

/// Masking for caption/QA fine-tuning: candidates are the positions at or
/// after `start` holding a word or the terminating [SEP], so the decoder also
/// learns to emit the stop token that autoregressive inference waits for.
/// [CLS] and [PAD] stay unmaskable; the force-one rule applies as above.
pub fn mask_for_generation(
    token_ids: &[usize],
    attention_mask: &[bool],
    start: usize,
    mask_prob: f64,
    rng: &mut ChaCha20Rng,
) -> Result<MaskedTokens> {
    if !(0.0 < mask_prob && mask_prob < 1.0) {
        return Err(Error::Contract(format!(
            "mask probability {mask_prob} must lie strictly between 0 and 1"
        )));
    }
    let candidates: Vec<usize> = token_ids
        .iter()
        .enumerate()
        .filter_map(|(i, &id)| (i >= start && !matches!(id, PAD | CLS)).then_some(i))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Contract("no maskable positions in the generation region".into()));
    }
    let mut input_ids = token_ids.to_vec();
    let mut mask_positions = Vec::new();
    let mut target_ids = Vec::new();
    for &i in &candidates {
        if rng.gen_bool(mask_prob) {
            mask_positions.push(i);
            target_ids.push(token_ids[i]);
            input_ids[i] = MASK;
        }
    }
    if mask_positions.is_empty() {
        let i = candidates[rng.gen_range(0..candidates.len())];
        mask_positions.push(i);
        target_ids.push(token_ids[i]);
        input_ids[i] = MASK;
    }
    Ok(MaskedTokens {
        input_ids,
        target_ids,
        mask_positions,
        attention_mask: attention_mask.to_vec(),
    })
}

// ── Attention masks ─────────────────────────────────────────────────────

/// Strictly causal `[l, l]` additive mask (position i sees positions <= i).
pub fn causal_mask(l: usize) -> Tensor {
    let mut data = vec![0.0; l * l];
    for i in 0..l {
        for j in (i + 1)..l {
            data[i * l + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(vec![l, l], data).expect("square mask")
}

/// QA mask: question positions attend bidirectionally among themselves,
/// answer positions attend to the whole question plus earlier answers.
/// Block form: [bidirectional | blocked; full | causal].
pub fn qa_mixed_mask(l: usize, question_len: usize) -> Result<Tensor> {
    if question_len == 0 || question_len > l {
        return Err(Error::Contract(format!(
            "question length {question_len} out of range for sequence of {l}"
        )));
    }
    let mut data = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            let visible = if i < question_len {
                j < question_len
            } else {
                j < question_len || j <= i
            };
            if !visible {
                data[i * l + j] = f64::NEG_INFINITY;
            }
        }
    }
    Tensor::new(vec![l, l], data)
}

/// Part-causal mask for merge attention over [conditions + text]: condition
/// rows attend to every condition and never to text; text rows attend to all
/// conditions plus their own text mask.
pub fn merge_mask(n_cond: usize, text_mask: &Tensor) -> Tensor {
    let l = text_mask.shape[0];
    let n = n_cond + l;
    let mut data = vec![0.0; n * n];
    for i in 0..n_cond {
        for j in n_cond..n {
            data[i * n + j] = f64::NEG_INFINITY;
        }
    }
    for i in 0..l {
        for j in 0..l {
            data[(n_cond + i) * n + (n_cond + j)] = text_mask.data[i * l + j];
        }
    }
    Tensor::new(vec![n, n], data).expect("square mask")
}

// ── Decoder parameters ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub attn: AttnParams,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

#[derive(Debug, Clone)]
pub enum CrossWiring {
    /// Merge attention folds conditions into self-attention; no cross layer.
    Merge,
    /// One cross layer over the (possibly concatenated) condition rows.
    Single(CrossBlock),
    /// Two stacked cross layers, one bound to each modality.
    Stacked {
        audio: CrossBlock,
        vision: CrossBlock,
        audio_first: bool,
    },
    /// Independent per-modality cross layers, outputs summed before one norm.
    Parallel {
        vision: AttnParams,
        audio: AttnParams,
        ln_g: ParamId,
        ln_b: ParamId,
    },
}

#[derive(Debug, Clone)]
pub struct DecoderBlockParams {
    pub base: BlockParams,
    pub cross: CrossWiring,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<DecoderBlockParams>,
    pub head_w1: ParamId,
    pub head_b1: ParamId,
    pub head_w2: ParamId,
    pub head_b2: ParamId,
    pub cond_v_w: ParamId,
    pub cond_v_b: ParamId,
    pub cond_a_w: ParamId,
    pub cond_a_b: ParamId,
    pub variant: FusionVariant,
    pub shares_text_encoder: bool,
}

fn init_cross_block(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    dim: usize,
    layers: usize,
) -> Result<CrossBlock> {
    Ok(CrossBlock {
        attn: init_attn(store, rng, prefix, dim, layers)?,
        ln_g: store.add(&format!("{prefix}.ln.g"), Tensor::filled(vec![dim], 1.0))?,
        ln_b: store.add(&format!("{prefix}.ln.b"), Tensor::zeros(vec![dim]))?,
    })
}

/// Build the multimodal decoder. With `share` the self-attention,
/// feed-forward, and embedding parameters are the text encoder's own ids, so
/// both roles train the same tensors; cross-attention layers, condition
/// projections, and the output head are always decoder-owned.
pub fn init_decoder(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    cfg: &EncoderConfig,
    variant: FusionVariant,
    share: Option<&TextEncoderParams>,
) -> Result<DecoderParams> {
    let dim = cfg.text_dim;
    let (tok_emb, pos_emb, base_blocks) = match share {
        Some(t) => (t.tok_emb, t.pos_emb, t.blocks.clone()),
        None => {
            let tok = store.add(
                "decoder.tok_emb",
                Tensor::randn(vec![cfg.vocab_size, dim], INIT_STD, rng),
            )?;
            let pos = store.add(
                "decoder.pos_emb",
                Tensor::randn(vec![cfg.max_text_len, dim], INIT_STD, rng),
            )?;
            let blocks = (0..cfg.layers)
                .map(|l| init_block(store, rng, &format!("decoder.block{l}"), dim, cfg.ff_mult, cfg.layers))
                .collect::<Result<Vec<_>>>()?;
            (tok, pos, blocks)
        }
    };

    let blocks = base_blocks
        .into_iter()
        .enumerate()
        .map(|(l, base)| {
            let prefix = format!("decoder.block{l}");
            let cross = match variant {
                FusionVariant::MergeAttention => CrossWiring::Merge,
                FusionVariant::ConcatenateCross => CrossWiring::Single(init_cross_block(
                    store,
                    rng,
                    &format!("{prefix}.cross"),
                    dim,
                    cfg.layers,
                )?),
                FusionVariant::AudioVisualCross | FusionVariant::VisualAudioCross => {
                    CrossWiring::Stacked {
                        audio: init_cross_block(store, rng, &format!("{prefix}.cross_audio"), dim, cfg.layers)?,
                        vision: init_cross_block(store, rng, &format!("{prefix}.cross_vision"), dim, cfg.layers)?,
                        audio_first: variant == FusionVariant::AudioVisualCross,
                    }
                }
                FusionVariant::ParallelCross => CrossWiring::Parallel {
                    vision: init_attn(store, rng, &format!("{prefix}.cross_vision"), dim, cfg.layers)?,
                    audio: init_attn(store, rng, &format!("{prefix}.cross_audio"), dim, cfg.layers)?,
                    ln_g: store.add(&format!("{prefix}.cross.ln.g"), Tensor::filled(vec![dim], 1.0))?,
                    ln_b: store.add(&format!("{prefix}.cross.ln.b"), Tensor::zeros(vec![dim]))?,
                },
            };
            Ok(DecoderBlockParams { base, cross })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(DecoderParams {
        tok_emb,
        pos_emb,
        blocks,
        head_w1: store.add("decoder.head.w1", Tensor::randn(vec![dim, dim], INIT_STD, rng))?,
        head_b1: store.add("decoder.head.b1", Tensor::zeros(vec![dim]))?,
        head_w2: store.add("decoder.head.w2", Tensor::randn(vec![dim, cfg.vocab_size], INIT_STD, rng))?,
        head_b2: store.add("decoder.head.b2", Tensor::zeros(vec![cfg.vocab_size]))?,
        cond_v_w: store.add("decoder.cond_v.w", Tensor::randn(vec![cfg.vision_dim, dim], INIT_STD, rng))?,
        cond_v_b: store.add("decoder.cond_v.b", Tensor::zeros(vec![dim]))?,
        cond_a_w: store.add("decoder.cond_a.w", Tensor::randn(vec![cfg.audio_dim, dim], INIT_STD, rng))?,
        cond_a_b: store.add("decoder.cond_a.b", Tensor::zeros(vec![dim]))?,
        variant,
        shares_text_encoder: share.is_some(),
    })
}

// ── Conditional features ────────────────────────────────────────────────

/// Flattened, hidden-size-matched condition sequences `F_v'` and `F_a'`.
#[derive(Debug, Clone)]
pub struct ConditionalFeatures {
    pub vision: Option<NodeId>,
    pub audio: Option<NodeId>,
}

impl ConditionalFeatures {
    /// `F_av`: vision rows then audio rows along the sequence axis.
    pub fn fused(&self, g: &mut Graph) -> Result<NodeId> {
        match (self.vision, self.audio) {
            (Some(v), Some(a)) => g.concat_rows(&[v, a]),
            (Some(v), None) => Ok(v),
            (None, Some(a)) => Ok(a),
            (None, None) => Err(Error::Config("no condition features present".into())),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.vision.is_none() && self.audio.is_none()
    }
}

/// Flatten per-frame/clip features along the temporal axis and project each
/// modality to the decoder hidden size.
pub fn project_conditions(
    g: &mut Graph,
    store: &ParamStore,
    dec: &DecoderParams,
    vision: Option<&VisionFeatures>,
    audio: Option<&AudioFeatures>,
) -> Result<ConditionalFeatures> {
    let vision = match vision {
        Some(v) => {
            let flat = g.concat_rows(&v.frames)?;
            let (w, b) = (g.param(store, dec.cond_v_w), g.param(store, dec.cond_v_b));
            Some(g.linear(flat, w, b)?)
        }
        None => None,
    };
    let audio = match audio {
        Some(a) => {
            let flat = g.concat_rows(&a.clips)?;
            let (w, b) = (g.param(store, dec.cond_a_w), g.param(store, dec.cond_a_b));
            Some(g.linear(flat, w, b)?)
        }
        None => None,
    };
    Ok(ConditionalFeatures { vision, audio })
}

/// Select the condition modalities a group needs. Text-query groups only.
pub fn select_conditions(
    conds: &ConditionalFeatures,
    group: &ModalityGroup,
) -> Result<ConditionalFeatures> {
    if group.query() != Modality::Text {
        return Err(Error::Config(format!(
            "captioning conditions are defined for text-query groups, got {}",
            group.label()
        )));
    }
    let mut out = ConditionalFeatures { vision: None, audio: None };
    for &m in group.targets() {
        match m {
            Modality::Vision => {
                out.vision = Some(conds.vision.ok_or_else(|| {
                    Error::Config("group references vision, absent from batch".into())
                })?);
            }
            Modality::Audio => {
                out.audio = Some(conds.audio.ok_or_else(|| {
                    Error::Config("group references audio, absent from batch".into())
                })?);
            }
            Modality::Text => {
                return Err(Error::Config("text cannot condition itself".into()));
            }
        }
    }
    Ok(out)
}

/// Project then select in one call.
pub fn build_conditions(
    g: &mut Graph,
    store: &ParamStore,
    dec: &DecoderParams,
    vision: Option<&VisionFeatures>,
    audio: Option<&AudioFeatures>,
    group: &ModalityGroup,
) -> Result<ConditionalFeatures> {
    let all = project_conditions(g, store, dec, vision, audio)?;
    select_conditions(&all, group)
}

// ── Decoder forward ─────────────────────────────────────────────────────

/// Self-attention pattern for the text positions.
#[derive(Debug, Clone, Copy)]
pub enum AttentionMode {
    Causal,
    /// Bidirectional over the first `question_len` positions, causal after.
    MixedQa { question_len: usize },
}

fn text_mask(mode: AttentionMode, l: usize) -> Result<Tensor> {
    match mode {
        AttentionMode::Causal => Ok(causal_mask(l)),
        AttentionMode::MixedQa { question_len } => qa_mixed_mask(l, question_len),
    }
}

fn cross_sublayer(
    g: &mut Graph,
    store: &ParamStore,
    cb: &CrossBlock,
    heads: usize,
    x: NodeId,
    kv: NodeId,
) -> Result<NodeId> {
    let att = attention(g, store, &cb.attn, heads, x, kv, None)?;
    let sum = g.add(x, att)?;
    let (lg, lb) = (g.param(store, cb.ln_g), g.param(store, cb.ln_b));
    g.layer_norm(sum, lg, lb, LAYER_NORM_EPS)
}

/// Vocabulary logits `[L, V]` for a (possibly masked) token sequence under
/// the decoder's fusion variant.
pub fn decoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    dec: &DecoderParams,
    cfg: &EncoderConfig,
    input_ids: &[usize],
    conds: &ConditionalFeatures,
    mode: AttentionMode,
) -> Result<NodeId> {
    let l = input_ids.len();
    if l == 0 || l > cfg.max_text_len {
        return Err(Error::Input(format!(
            "decoder sequence length {l} out of range 1..={}",
            cfg.max_text_len
        )));
    }
    if conds.is_empty() {
        return Err(Error::Config(format!(
            "decoder variant {} needs at least one condition modality",
            dec.variant.label()
        )));
    }
    let table = g.param(store, dec.tok_emb);
    let emb = g.embedding(table, input_ids)?;
    let pos_all = g.param(store, dec.pos_emb);
    let positions: Vec<usize> = (0..l).collect();
    let pos = g.gather_rows(pos_all, &positions)?;
    let mut x = g.add(emb, pos)?;
    let tmask = text_mask(mode, l)?;
    let heads = cfg.heads;

    if dec.variant == FusionVariant::MergeAttention {
        let cond_seq = conds.fused(g)?;
        let n_cond = g.shape(cond_seq)[0];
        let mask = g.input(&merge_mask(n_cond, &tmask));
        let mut seq = g.concat_rows(&[cond_seq, x])?;
        for block in &dec.blocks {
            seq = transformer_block(g, store, &block.base, heads, seq, Some(mask))?;
        }
        let text_rows: Vec<usize> = (n_cond..n_cond + l).collect();
        x = g.gather_rows(seq, &text_rows)?;
        return mlm_head(g, store, dec, x);
    }

    let mask = g.input(&tmask);
    for block in &dec.blocks {
        // Self-attention sublayer.
        let att = attention(g, store, &block.base.attn, heads, x, x, Some(mask))?;
        let sum = g.add(x, att)?;
        let (g1, b1) = (g.param(store, block.base.ln1_g), g.param(store, block.base.ln1_b));
        x = g.layer_norm(sum, g1, b1, LAYER_NORM_EPS)?;

        // Cross-attention sublayer(s).
        x = match &block.cross {
            CrossWiring::Merge => unreachable!("merge handled above"),
            CrossWiring::Single(cb) => {
                let kv = conds.fused(g)?;
                cross_sublayer(g, store, cb, heads, x, kv)?
            }
            CrossWiring::Stacked { audio, vision, audio_first } => {
                let order: [(Option<NodeId>, &CrossBlock); 2] = if *audio_first {
                    [(conds.audio, audio), (conds.vision, vision)]
                } else {
                    [(conds.vision, vision), (conds.audio, audio)]
                };
                let mut cur = x;
                for (kv, cb) in order {
                    if let Some(kv) = kv {
                        cur = cross_sublayer(g, store, cb, heads, cur, kv)?;
                    }
                }
                cur
            }
            CrossWiring::Parallel { vision, audio, ln_g, ln_b } => {
                let mut sum = x;
                if let Some(kv) = conds.vision {
                    let att = attention(g, store, vision, heads, x, kv, None)?;
                    sum = g.add(sum, att)?;
                }
                if let Some(kv) = conds.audio {
                    let att = attention(g, store, audio, heads, x, kv, None)?;
                    sum = g.add(sum, att)?;
                }
                let (lg, lb) = (g.param(store, *ln_g), g.param(store, *ln_b));
                g.layer_norm(sum, lg, lb, LAYER_NORM_EPS)?
            }
        };

        // Feed-forward sublayer.
        let ff = feed_forward(g, store, &block.base, x)?;
        let sum = g.add(x, ff)?;
        let (g2, b2) = (g.param(store, block.base.ln2_g), g.param(store, block.base.ln2_b));
        x = g.layer_norm(sum, g2, b2, LAYER_NORM_EPS)?;
    }
    mlm_head(g, store, dec, x)
}

fn mlm_head(g: &mut Graph, store: &ParamStore, dec: &DecoderParams, x: NodeId) -> Result<NodeId> {
    let (w1, b1) = (g.param(store, dec.head_w1), g.param(store, dec.head_b1));
    let (w2, b2) = (g.param(store, dec.head_w2), g.param(store, dec.head_b2));
    let h = g.linear(x, w1, b1)?;
    let h = g.gelu(h);
    g.linear(h, w2, b2)
}

// ── Loss ────────────────────────────────────────────────────────────────

/// Mean cross-entropy over masked positions only.
pub fn mgc_loss(g: &mut Graph, logits: NodeId, masked: &MaskedTokens) -> Result<NodeId> {
    if masked.mask_positions.is_empty() {
        return Err(Error::Contract("no masked positions to score".into()));
    }
    let rows = g.gather_rows(logits, &masked.mask_positions)?;
    g.cross_entropy(rows, &masked.target_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{encode_audio, encode_vision, init_audio_encoder, init_text_encoder, init_vision_encoder};
    use rand::SeedableRng;

    #[test]
    fn masking_rate_close_to_configured() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let ids: Vec<usize> = {
            let mut v = vec![CLS];
            v.extend(std::iter::repeat(7).take(1000));
            v.push(SEP);
            v
        };
        let mask = vec![true; ids.len()];
        let mut masked_count = 0usize;
        let mut total = 0usize;
        for _ in 0..120 {
            let m = mask_tokens(&ids, &mask, 0.6, &mut rng).unwrap();
            masked_count += m.mask_positions.len();
            total += 1000;
        }
        let rate = masked_count as f64 / total as f64;
        assert!((0.59..=0.61).contains(&rate), "rate {rate}");
    }

    #[test]
    fn near_one_probability_masks_everything() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let ids = vec![CLS, 7, 8, 9, 10, 11, SEP, PAD];
        let mask = vec![true; 8];
        let mut all = 0;
        for _ in 0..200 {
            let m = mask_tokens(&ids, &mask, 0.999, &mut rng).unwrap();
            if m.mask_positions.len() == 5 {
                all += 1;
            }
        }
        // P(all 5 masked) = 0.999^5, about 0.995 per draw.
        assert!(all >= 190, "only {all}/200 fully masked");
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let ids = vec![CLS, 7, 8, 9, SEP];
        let mask = vec![true; 5];
        let a = mask_tokens(&ids, &mask, 0.6, &mut ChaCha20Rng::seed_from_u64(42)).unwrap();
        let b = mask_tokens(&ids, &mask, 0.6, &mut ChaCha20Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn specials_never_masked_and_force_one_rule() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let ids = vec![CLS, 7, SEP, PAD];
        let mask = vec![true, true, true, false];
        for _ in 0..200 {
            let m = mask_tokens(&ids, &mask, 0.01, &mut rng).unwrap();
            // Exactly the one candidate can be masked; forced if the coin missed.
            assert_eq!(m.mask_positions, vec![1]);
            assert_eq!(m.input_ids, vec![CLS, MASK, SEP, PAD]);
            assert_eq!(m.target_ids, vec![7]);
        }
    }

    #[test]
    fn sequence_without_maskable_tokens_is_contract_error() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let ids = vec![CLS, SEP, PAD, PAD];
        let mask = vec![true, true, false, false];
        assert!(matches!(
            mask_tokens(&ids, &mask, 0.6, &mut rng),
            Err(Error::Contract(_))
        ));
        assert!(mask_tokens(&[CLS, 7, SEP], &[true; 3], 1.0, &mut ChaCha20Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn qa_mask_has_block_structure() {
        let l = 7;
        let q = 3;
        let m = qa_mixed_mask(l, q).unwrap();
        for i in 0..l {
            for j in 0..l {
                let expect_visible = if i < q { j < q } else { j < q || j <= i };
                let visible = m.data[i * l + j] == 0.0;
                assert_eq!(visible, expect_visible, "mask[{i},{j}]");
            }
        }
    }

    fn full_setup(
        variant: FusionVariant,
        share: bool,
    ) -> (
        EncoderConfig,
        ParamStore,
        TextEncoderParams,
        crate::encoders::PatchEncoderParams,
        crate::encoders::PatchEncoderParams,
        DecoderParams,
    ) {
        let cfg = EncoderConfig::tiny();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let t = init_text_encoder(&mut store, &mut rng, &cfg).unwrap();
        let v = init_vision_encoder(&mut store, &mut rng, &cfg).unwrap();
        let a = init_audio_encoder(&mut store, &mut rng, &cfg).unwrap();
        let d = init_decoder(&mut store, &mut rng, &cfg, variant, share.then_some(&t)).unwrap();
        (cfg, store, t, v, a, d)
    }

    fn make_conditions(
        g: &mut Graph,
        store: &ParamStore,
        cfg: &EncoderConfig,
        vp: &crate::encoders::PatchEncoderParams,
        ap: &crate::encoders::PatchEncoderParams,
        dec: &DecoderParams,
        group: &str,
        vision_fill: f64,
        audio_fill: f64,
    ) -> ConditionalFeatures {
        let frames = Tensor::filled(vec![1, cfg.frame_h, cfg.frame_w, cfg.frame_ch], vision_fill);
        let spec = Tensor::filled(vec![1, cfg.mel_bins, cfg.spec_frames], audio_fill);
        let fv = encode_vision(g, store, vp, cfg, &frames).unwrap();
        let fa = encode_audio(g, store, ap, cfg, &spec).unwrap();
        build_conditions(g, store, dec, Some(&fv), Some(&fa), &ModalityGroup::parse(group).unwrap())
            .unwrap()
    }

    #[test]
    fn condition_row_counts_and_order() {
        let (cfg, store, _, vp, ap, dec) = full_setup(FusionVariant::ConcatenateCross, true);
        let mut g = Graph::new();
        // Two frames: n_v = 2 * S_v rows.
        let frames = Tensor::filled(vec![2, cfg.frame_h, cfg.frame_w, cfg.frame_ch], 0.3);
        let spec = Tensor::filled(vec![1, cfg.mel_bins, cfg.spec_frames], 0.7);
        let fv = encode_vision(&mut g, &store, &vp, &cfg, &frames).unwrap();
        let fa = encode_audio(&mut g, &store, &ap, &cfg, &spec).unwrap();
        let group = ModalityGroup::parse("T-AV").unwrap();
        let conds = build_conditions(&mut g, &store, &dec, Some(&fv), Some(&fa), &group).unwrap();
        let n_v = 2 * cfg.vision_seq_len();
        let n_a = cfg.audio_seq_len();
        assert_eq!(g.shape(conds.vision.unwrap()), &[n_v, cfg.text_dim]);
        let fused = conds.fused(&mut g).unwrap();
        assert_eq!(g.shape(fused), &[n_v + n_a, cfg.text_dim]);
        let v_rows = g.data(conds.vision.unwrap()).to_vec();
        assert_eq!(g.data(fused)[..v_rows.len()], v_rows[..]);
    }

    #[test]
    fn tv_selection_ignores_audio_values() {
        let (cfg, store, _, vp, ap, dec) = full_setup(FusionVariant::ConcatenateCross, true);
        let mut g = Graph::new();
        let c1 = make_conditions(&mut g, &store, &cfg, &vp, &ap, &dec, "T-V", 0.4, 0.9);
        let c2 = make_conditions(&mut g, &store, &cfg, &vp, &ap, &dec, "T-V", 0.4, -2.5);
        assert!(c1.audio.is_none() && c2.audio.is_none());
        assert_eq!(g.data(c1.vision.unwrap()), g.data(c2.vision.unwrap()));

        let ids = vec![CLS, MASK, 7, SEP];
        let l1 = decoder_forward(&mut g, &store, &dec, &cfg, &ids, &c1, AttentionMode::Causal).unwrap();
        let l2 = decoder_forward(&mut g, &store, &dec, &cfg, &ids, &c2, AttentionMode::Causal).unwrap();
        assert_eq!(g.data(l1), g.data(l2));
    }

    #[test]
    fn missing_modality_for_group_is_config_error() {
        let (cfg, store, _, vp, _, dec) = full_setup(FusionVariant::ConcatenateCross, true);
        let mut g = Graph::new();
        let frames = Tensor::filled(vec![1, cfg.frame_h, cfg.frame_w, cfg.frame_ch], 0.1);
        let fv = encode_vision(&mut g, &store, &vp, &cfg, &frames).unwrap();
        let group = ModalityGroup::parse("T-A").unwrap();
        let err = build_conditions(&mut g, &store, &dec, Some(&fv), None, &group);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn causality_for_every_variant() {
        for variant in FusionVariant::all() {
            let (cfg, store, _, vp, ap, dec) = full_setup(variant, true);
            let mut g = Graph::new();
            let conds = make_conditions(&mut g, &store, &cfg, &vp, &ap, &dec, "T-AV", 0.2, 0.5);
            let base_ids = vec![CLS, 7, 8, 9, 10, SEP];
            let base =
                decoder_forward(&mut g, &store, &dec, &cfg, &base_ids, &conds, AttentionMode::Causal)
                    .unwrap();
            let v = cfg.vocab_size;
            for p in 1..base_ids.len() {
                let mut ids = base_ids.clone();
                ids[p] = if ids[p] == 7 { 11 } else { 7 };
                let out =
                    decoder_forward(&mut g, &store, &dec, &cfg, &ids, &conds, AttentionMode::Causal)
                        .unwrap();
                for i in 0..p {
                    assert_eq!(
                        g.data(base)[i * v..(i + 1) * v],
                        g.data(out)[i * v..(i + 1) * v],
                        "variant {} leaked position {p} into logits at {i}",
                        variant.label()
                    );
                }
            }
        }
    }

    #[test]
    fn qa_mode_earlier_answer_positions_ignore_later_tokens() {
        let (cfg, store, _, vp, ap, dec) = full_setup(FusionVariant::ConcatenateCross, true);
        let mut g = Graph::new();
        let conds = make_conditions(&mut g, &store, &cfg, &vp, &ap, &dec, "T-AV", 0.2, 0.5);
        let q_len = 3;
        let ids1 = vec![CLS, 7, 8, 9, 10, 11];
        let mut ids2 = ids1.clone();
        ids2[5] = 12; // later answer token
        let mode = AttentionMode::MixedQa { question_len: q_len };
        let l1 = decoder_forward(&mut g, &store, &dec, &cfg, &ids1, &conds, mode).unwrap();
        let l2 = decoder_forward(&mut g, &store, &dec, &cfg, &ids2, &conds, mode).unwrap();
        let v = cfg.vocab_size;
        for i in 0..5 {
            assert_eq!(g.data(l1)[i * v..(i + 1) * v], g.data(l2)[i * v..(i + 1) * v]);
        }
    }

    #[test]
    fn parallel_cross_is_symmetric_under_modality_and_parameter_swap() {
        let (cfg, mut store, _, _, _, dec) = full_setup(FusionVariant::ParallelCross, true);
        let c = cfg.text_dim;
        let n = 3;
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let xv = Tensor::randn(vec![n, c], 0.5, &mut rng);
        let xa = Tensor::randn(vec![n, c], 0.5, &mut rng);

        let run = |store: &ParamStore, v: &Tensor, a: &Tensor| {
            let mut g = Graph::new();
            let conds = ConditionalFeatures {
                vision: Some(g.input(v)),
                audio: Some(g.input(a)),
            };
            let ids = vec![CLS, MASK, 7, SEP];
            let out =
                decoder_forward(&mut g, store, &dec, &cfg, &ids, &conds, AttentionMode::Causal)
                    .unwrap();
            g.data(out).to_vec()
        };

        let before = run(&store, &xv, &xa);
        // Swap the two cross parameter sets in place, then swap the inputs.
        for block in &dec.blocks {
            if let CrossWiring::Parallel { vision, audio, .. } = &block.cross {
                for (pv, pa) in [
                    (vision.wq, audio.wq),
                    (vision.bq, audio.bq),
                    (vision.wk, audio.wk),
                    (vision.bk, audio.bk),
                    (vision.wv, audio.wv),
                    (vision.bv, audio.bv),
                    (vision.wo, audio.wo),
                    (vision.bo, audio.bo),
                ] {
                    let tmp = store.get(pv).data.clone();
                    store.get_mut(pv).data = store.get(pa).data.clone();
                    store.get_mut(pa).data = tmp;
                }
            }
        }
        let after = run(&store, &xa, &xv);
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mgc_loss_uniform_logits_is_ln_v() {
        let mut g = Graph::new();
        let v = 16;
        let logits = g.constant(vec![4, v], vec![0.1; 4 * v]);
        let masked = MaskedTokens {
            input_ids: vec![CLS, MASK, MASK, SEP],
            target_ids: vec![7, 9],
            mask_positions: vec![1, 2],
            attention_mask: vec![true; 4],
        };
        let loss = mgc_loss(&mut g, logits, &masked).unwrap();
        assert!((g.value(loss) - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mgc_loss_one_hot_correct_is_small() {
        let mut g = Graph::new();
        let v = 16;
        let mut data = vec![0.0; 2 * v];
        data[7] = 30.0;
        data[v + 9] = 30.0;
        let logits = g.constant(vec![2, v], data);
        let masked = MaskedTokens {
            input_ids: vec![MASK, MASK],
            target_ids: vec![7, 9],
            mask_positions: vec![0, 1],
            attention_mask: vec![true; 2],
        };
        let loss = mgc_loss(&mut g, logits, &masked).unwrap();
        assert!(g.value(loss) < 1e-3);
    }

    #[test]
    fn mgc_loss_ignores_unmasked_positions() {
        let mut g = Graph::new();
        let v = 8;
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let base = Tensor::randn(vec![4, v], 1.0, &mut rng);
        let mut altered = base.clone();
        for j in 0..v {
            altered.data[3 * v + j] += 5.0; // unmasked row
        }
        let masked = MaskedTokens {
            input_ids: vec![CLS, MASK, 7, SEP],
            target_ids: vec![5],
            mask_positions: vec![1],
            attention_mask: vec![true; 4],
        };
        let l1 = {
            let n = g.input(&base);
            mgc_loss(&mut g, n, &masked).unwrap()
        };
        let l2 = {
            let n = g.input(&altered);
            mgc_loss(&mut g, n, &masked).unwrap()
        };
        assert_eq!(g.value(l1), g.value(l2));
    }

    #[test]
    fn condition_gradient_reaches_condition_inputs() {
        let (cfg, mut store, _, _, _, dec) = full_setup(FusionVariant::ConcatenateCross, true);
        let c = cfg.text_dim;
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let cond_param = store
            .add("test.cond", Tensor::randn(vec![3, c], 0.5, &mut rng))
            .unwrap();
        let mut g = Graph::new();
        let conds = ConditionalFeatures {
            vision: Some(g.param(&store, cond_param)),
            audio: None,
        };
        let masked = MaskedTokens {
            input_ids: vec![CLS, MASK, 7, SEP],
            target_ids: vec![9],
            mask_positions: vec![1],
            attention_mask: vec![true; 4],
        };
        let logits =
            decoder_forward(&mut g, &store, &dec, &cfg, &masked.input_ids, &conds, AttentionMode::Causal)
                .unwrap();
        let loss = mgc_loss(&mut g, logits, &masked).unwrap();
        g.backward(loss).unwrap();
        g.export_grads(&mut store);
        let grad = store.get(cond_param).grad.as_ref().unwrap();
        assert!(grad.iter().any(|&v| v.abs() > 1e-12), "cross-attention detached");
    }
}
