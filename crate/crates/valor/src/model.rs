//! Full model: three encoders, alignment head, multimodal decoder, and the
//! joint objective `alpha * L_align + L_caption` assembled on one tape.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::BatchExample;
use crate::encoders::{
    encode_audio, encode_text, encode_vision, init_audio_encoder, init_text_encoder,
    init_vision_encoder, AudioFeatures, EncoderConfig, PatchEncoderParams, TextEncoderParams,
    TextFeatures, VisionFeatures,
};
use crate::error::{Error, Result};
use crate::mga::{
    init_alignment, mga_loss, pool_and_project, AlignmentParams, AlignmentVariant,
    CommonEmbeddings, Modality, ModalityGroup,
};
use crate::mgc::{
    decoder_forward, init_decoder, mgc_loss, project_conditions, select_conditions, AttentionMode,
    ConditionalFeatures, DecoderParams, FusionVariant, MaskedTokens,
};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub common_dim: usize,
    pub fusion_variant: FusionVariant,
    pub share_weights: bool,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig::desk(),
            common_dim: 64,
            fusion_variant: FusionVariant::ConcatenateCross,
            share_weights: true,
        }
    }

    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig::tiny(),
            common_dim: 8,
            fusion_variant: FusionVariant::ConcatenateCross,
            share_weights: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.common_dim == 0 {
            return Err(Error::Config("common_dim must be >= 1".into()));
        }
        Ok(())
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text_enc: TextEncoderParams,
    pub vision_enc: PatchEncoderParams,
    pub audio_enc: PatchEncoderParams,
    pub decoder: DecoderParams,
    pub align: AlignmentParams,
}

/// Everything one example contributes to a step's tape.
pub struct EncodedExample {
    pub text: TextFeatures,
    pub vision: VisionFeatures,
    pub audio: Option<AudioFeatures>,
}

#[derive(Debug, Clone)]
pub struct LossOptions {
    pub alpha: f64,
    pub mga_groups: Vec<ModalityGroup>,
    pub mgc_groups: Vec<ModalityGroup>,
    pub variant: AlignmentVariant,
}

impl LossOptions {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} must be >= 0", self.alpha)));
        }
        for group in &self.mgc_groups {
            if group.query() != Modality::Text {
                return Err(Error::Config(format!(
                    "captioning group {} must have a text query",
                    group.label()
                )));
            }
        }
        if self.mgc_groups.is_empty() && (self.alpha == 0.0 || self.mga_groups.is_empty()) {
            return Err(Error::Config("no active objective".into()));
        }
        Ok(())
    }
}

/// Loss node plus scalar components for logging.
pub struct StepLosses {
    pub total: NodeId,
    pub total_value: f64,
    pub mga_value: Option<f64>,
    pub mgc_value: Option<f64>,
    pub per_group_mga: Vec<(String, f64)>,
    pub per_group_mgc: Vec<(String, f64)>,
}

/// Tag numeric failures with the pipeline stage that produced them.
fn with_component<T>(r: Result<T>, component: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("{component}: {msg}")),
        other => other,
    })
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let text_enc = init_text_encoder(&mut store, &mut rng, &config.encoder)?;
        let vision_enc = init_vision_encoder(&mut store, &mut rng, &config.encoder)?;
        let audio_enc = init_audio_encoder(&mut store, &mut rng, &config.encoder)?;
        let decoder = init_decoder(
            &mut store,
            &mut rng,
            &config.encoder,
            config.fusion_variant,
            config.share_weights.then_some(&text_enc),
        )?;
        let align = init_alignment(&mut store, &mut rng, &config.encoder, config.common_dim)?;
        Ok(Model {
            config,
            store,
            text_enc,
            vision_enc,
            audio_enc,
            decoder,
            align,
        })
    }

    pub fn encode_example(&self, g: &mut Graph, ex: &BatchExample) -> Result<EncodedExample> {
        let text = encode_text(
            g,
            &self.store,
            &self.text_enc,
            &self.config.encoder,
            &ex.token_ids,
            &ex.attention_mask,
        )?;
        let vision = encode_vision(g, &self.store, &self.vision_enc, &self.config.encoder, &ex.frames)?;
        let audio = match &ex.spectrograms {
            Some(s) => Some(encode_audio(g, &self.store, &self.audio_enc, &self.config.encoder, s)?),
            None => None,
        };
        Ok(EncodedExample { text, vision, audio })
    }

    pub fn embed_example(&self, g: &mut Graph, enc: &EncodedExample) -> Result<CommonEmbeddings> {
        pool_and_project(
            g,
            &self.store,
            &self.align,
            &enc.text,
            Some(&enc.vision),
            enc.audio.as_ref(),
        )
    }

    /// Project both condition modalities (where present) to decoder size.
    pub fn conditions(&self, g: &mut Graph, enc: &EncodedExample) -> Result<ConditionalFeatures> {
        project_conditions(
            g,
            &self.store,
            &self.decoder,
            Some(&enc.vision),
            enc.audio.as_ref(),
        )
    }

    /// Assemble the joint objective over one matched batch. `masked[i]` must
    /// be the masking of `batch[i]`'s tokens; it is reused across MGC groups.
    pub fn joint_loss(
        &self,
        g: &mut Graph,
        batch: &[BatchExample],
        masked: &[MaskedTokens],
        opts: &LossOptions,
    ) -> Result<StepLosses> {
        opts.validate()?;
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let run_mga = opts.alpha > 0.0 && !opts.mga_groups.is_empty();
        let run_mgc = !opts.mgc_groups.is_empty();
        if run_mgc && masked.len() != batch.len() {
            return Err(Error::Contract(format!(
                "batch of {} examples with {} masked sequences",
                batch.len(),
                masked.len()
            )));
        }

        let encoded: Vec<EncodedExample> = with_component(
            batch.iter().map(|ex| self.encode_example(g, ex)).collect::<Result<_>>(),
            "encoders",
        )?;

        let mut per_group_mga = Vec::new();
        let mga_node = if run_mga {
            let embeddings: Vec<CommonEmbeddings> = with_component(
                encoded.iter().map(|enc| self.embed_example(g, enc)).collect::<Result<_>>(),
                "alignment (MGA)",
            )?;
            let (node, per) = with_component(
                mga_loss(g, &self.store, &self.align, &opts.variant, &opts.mga_groups, &embeddings),
                "alignment (MGA)",
            )?;
            per_group_mga = per;
            Some(node)
        } else {
            None
        };

        let mut per_group_mgc = Vec::new();
        let mgc_node = if run_mgc {
            let conds: Vec<ConditionalFeatures> = encoded
                .iter()
                .map(|enc| self.conditions(g, enc))
                .collect::<Result<_>>()?;
            let mut group_nodes = Vec::with_capacity(opts.mgc_groups.len());
            for group in &opts.mgc_groups {
                let mut example_losses = Vec::with_capacity(batch.len());
                for (i, m) in masked.iter().enumerate() {
                    let selected = select_conditions(&conds[i], group)?;
                    let logits = with_component(
                        decoder_forward(
                            g,
                            &self.store,
                            &self.decoder,
                            &self.config.encoder,
                            &m.input_ids,
                            &selected,
                            AttentionMode::Causal,
                        ),
                        "captioning (MGC)",
                    )?;
                    example_losses.push(with_component(mgc_loss(g, logits, m), "captioning (MGC)")?);
                }
                let mut acc = example_losses[0];
                for &l in &example_losses[1..] {
                    acc = g.add(acc, l)?;
                }
                let group_loss = g.scale(acc, 1.0 / example_losses.len() as f64);
                per_group_mgc.push((group.label(), g.value(group_loss)));
                group_nodes.push(group_loss);
            }
            let mut acc = group_nodes[0];
            for &l in &group_nodes[1..] {
                acc = g.add(acc, l)?;
            }
            Some(g.scale(acc, 1.0 / group_nodes.len() as f64))
        } else {
            None
        };

        let total = match (mga_node, mgc_node) {
            (Some(a), Some(c)) => {
                let scaled = g.scale(a, opts.alpha);
                g.add(scaled, c)?
            }
            (Some(a), None) => g.scale(a, opts.alpha),
            (None, Some(c)) => c,
            (None, None) => unreachable!("validated above"),
        };

        Ok(StepLosses {
            total,
            total_value: g.value(total),
            mga_value: mga_node.map(|n| g.value(n)),
            mgc_value: mgc_node.map(|n| g.value(n)),
            per_group_mga,
            per_group_mgc,
        })
    }

    /// Parameters reachable only through the alignment objective.
    pub fn alignment_param_ids(&self) -> Vec<ParamId> {
        vec![
            self.align.proj_t_w,
            self.align.proj_t_b,
            self.align.proj_v_w,
            self.align.proj_v_b,
            self.align.proj_a_w,
            self.align.proj_a_b,
            self.align.weight_t,
            self.align.weight_v,
            self.align.weight_a,
            self.align.fuse_w,
            self.align.fuse_b,
            self.align.log_tau,
        ]
    }

    /// Cross-attention parameters, reachable only through the decoder.
    pub fn decoder_cross_param_ids(&self) -> Vec<ParamId> {
        use crate::mgc::CrossWiring;
        let mut out = Vec::new();
        let push_attn = |a: &crate::encoders::AttnParams, out: &mut Vec<ParamId>| {
            out.extend([a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo]);
        };
        for block in &self.decoder.blocks {
            match &block.cross {
                CrossWiring::Merge => {}
                CrossWiring::Single(cb) => {
                    push_attn(&cb.attn, &mut out);
                    out.extend([cb.ln_g, cb.ln_b]);
                }
                CrossWiring::Stacked { audio, vision, .. } => {
                    push_attn(&audio.attn, &mut out);
                    out.extend([audio.ln_g, audio.ln_b]);
                    push_attn(&vision.attn, &mut out);
                    out.extend([vision.ln_g, vision.ln_b]);
                }
                CrossWiring::Parallel { vision, audio, ln_g, ln_b } => {
                    push_attn(vision, &mut out);
                    push_attn(audio, &mut out);
                    out.extend([*ln_g, *ln_b]);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_batch, DatasetSpec, GeneratorConfig};
    use crate::mgc::mask_tokens;

    fn tiny_setup(seed: u64) -> (Model, Vec<BatchExample>, Vec<MaskedTokens>) {
        let gen = GeneratorConfig {
            frame_h: 8,
            frame_w: 8,
            mel_bins: 4,
            spec_frames: 8,
            ..GeneratorConfig::default()
        };
        let vocab = gen.vocabulary().unwrap();
        let mut config = ModelConfig::tiny();
        config.encoder.vocab_size = vocab.len();
        config.encoder.max_text_len = 10;
        let model = Model::new(config, seed).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed + 1);
        let batch = build_batch(&DatasetSpec::tri_only(), &gen, &vocab, 10, 2, 1, 1, &mut rng)
            .unwrap()
            .examples;
        let masked = batch
            .iter()
            .map(|ex| mask_tokens(&ex.token_ids, &ex.attention_mask, 0.6, &mut rng).unwrap())
            .collect();
        (model, batch, masked)
    }

    fn opts(alpha: f64) -> LossOptions {
        LossOptions {
            alpha,
            mga_groups: ModalityGroup::default_groups(),
            mgc_groups: ModalityGroup::default_groups(),
            variant: AlignmentVariant::default(),
        }
    }

    #[test]
    fn alpha_zero_reduces_to_captioning_loss() {
        let (model, batch, masked) = tiny_setup(3);
        let mut g = Graph::new();
        let joint = model.joint_loss(&mut g, &batch, &masked, &opts(0.0)).unwrap();
        assert_eq!(joint.total_value, joint.mgc_value.unwrap());
        assert!(joint.mga_value.is_none());
    }

    #[test]
    fn loss_is_linear_in_alpha() {
        let (model, batch, masked) = tiny_setup(5);
        let at = |alpha: f64| {
            let mut g = Graph::new();
            model.joint_loss(&mut g, &batch, &masked, &opts(alpha)).unwrap()
        };
        let h = 0.05;
        let base = at(1.5);
        let up = at(1.5 + h);
        let down = at(1.5 - h);
        let fd = (up.total_value - down.total_value) / (2.0 * h);
        assert!(
            (fd - base.mga_value.unwrap()).abs() < 1e-9,
            "dL/dalpha {} vs L_mga {}",
            fd,
            base.mga_value.unwrap()
        );
    }

    #[test]
    fn joint_decomposes_into_alpha_weighted_parts() {
        let (model, batch, masked) = tiny_setup(7);
        let mut g = Graph::new();
        let joint = model.joint_loss(&mut g, &batch, &masked, &opts(1.5)).unwrap();
        let expect = 1.5 * joint.mga_value.unwrap() + joint.mgc_value.unwrap();
        assert!((joint.total_value - expect).abs() < 1e-12);
    }

    #[test]
    fn shared_params_accumulate_roles() {
        // Gradient of (mga + mgc) on a shared tensor equals the sum of the
        // gradients computed from each objective alone.
        let (mut model, batch, masked) = tiny_setup(11);
        assert!(model.decoder.shares_text_encoder);
        let tok = model.text_enc.tok_emb;
        assert_eq!(tok, model.decoder.tok_emb);

        let grad_of = |model: &mut Model, alpha: f64, mgc: bool| {
            let o = LossOptions {
                alpha,
                mga_groups: if alpha > 0.0 { ModalityGroup::default_groups() } else { vec![] },
                mgc_groups: if mgc { ModalityGroup::default_groups() } else { vec![] },
                variant: AlignmentVariant::default(),
            };
            let mut g = Graph::new();
            let losses = model.joint_loss(&mut g, &batch, &masked, &o).unwrap();
            g.backward(losses.total).unwrap();
            model.store.zero_grads();
            g.export_grads(&mut model.store);
            model.store.get(tok).grad.clone().unwrap()
        };

        let joint = grad_of(&mut model, 1.0, true);
        let mga_only = grad_of(&mut model, 1.0, false);
        let mgc_only = grad_of(&mut model, 0.0, true);
        for i in 0..joint.len() {
            let sum = mga_only[i] + mgc_only[i];
            assert!(
                (joint[i] - sum).abs() < 1e-10,
                "element {i}: joint {} vs role sum {}",
                joint[i],
                sum
            );
        }
        // The captioning path reaches the shared embedding table at all.
        assert!(mgc_only.iter().any(|v| v.abs() > 1e-12));
    }

    #[test]
    fn mgc_path_does_not_touch_alignment_params() {
        let (mut model, batch, masked) = tiny_setup(13);
        let o = LossOptions {
            alpha: 0.0,
            mga_groups: vec![],
            mgc_groups: ModalityGroup::default_groups(),
            variant: AlignmentVariant::default(),
        };
        let mut g = Graph::new();
        let losses = model.joint_loss(&mut g, &batch, &masked, &o).unwrap();
        g.backward(losses.total).unwrap();
        g.export_grads(&mut model.store);
        for pid in model.alignment_param_ids() {
            assert!(
                model.store.get(pid).grad.is_none(),
                "alignment param {} got a gradient through the captioning path",
                model.store.name(pid)
            );
        }
    }

    #[test]
    fn grouped_mgc_is_mean_of_single_groups() {
        let (model, batch, masked) = tiny_setup(17);
        let run = |groups: Vec<&str>| {
            let o = LossOptions {
                alpha: 0.0,
                mga_groups: vec![],
                mgc_groups: groups.iter().map(|s| ModalityGroup::parse(s).unwrap()).collect(),
                variant: AlignmentVariant::default(),
            };
            let mut g = Graph::new();
            model.joint_loss(&mut g, &batch, &masked, &o).unwrap().mgc_value.unwrap()
        };
        let all = run(vec!["T-AV", "T-V", "T-A"]);
        let mean = (run(vec!["T-AV"]) + run(vec!["T-V"]) + run(vec!["T-A"])) / 3.0;
        assert!((all - mean).abs() < 1e-12, "{all} vs {mean}");
    }
}
