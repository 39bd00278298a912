//! Single-modality transformer encoders.
//!
//! Text: token + positional embeddings into bidirectional self-attention with
//! key-padding masks. Vision: frames are patchified and encoded independently
//! (no cross-frame attention). Audio: spectrogram clips are patchified and
//! encoded independently per clip.

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Geometry and capacity of the three encoders.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub text_dim: usize,
    pub vision_dim: usize,
    pub audio_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
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
}

impl EncoderConfig {
    /// Desk-scale defaults: small enough that a full pretrain run takes
    /// minutes on one CPU core.
    pub fn desk() -> Self {
        EncoderConfig {
            vocab_size: 64,
            max_text_len: 32,
            text_dim: 64,
            vision_dim: 64,
            audio_dim: 64,
            layers: 2,
            heads: 4,
            ff_mult: 2,
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
        }
    }

    /// Minimal geometry for finite-difference gradient sweeps.
    pub fn tiny() -> Self {
        EncoderConfig {
            vocab_size: 16,
            max_text_len: 6,
            text_dim: 8,
            vision_dim: 8,
            audio_dim: 8,
            layers: 1,
            heads: 2,
            ff_mult: 2,
            max_frames: 2,
            max_clips: 1,
            frame_h: 8,
            frame_w: 8,
            frame_ch: 1,
            vision_patch: 4,
            mel_bins: 4,
            spec_frames: 8,
            audio_patch_h: 2,
            audio_patch_w: 4,
        }
    }

    pub fn vision_seq_len(&self) -> usize {
        (self.frame_h / self.vision_patch) * (self.frame_w / self.vision_patch)
    }

    pub fn audio_seq_len(&self) -> usize {
        (self.mel_bins / self.audio_patch_h) * (self.spec_frames / self.audio_patch_w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, dim) in [
            ("text_dim", self.text_dim),
            ("vision_dim", self.vision_dim),
            ("audio_dim", self.audio_dim),
        ] {
            if dim % self.heads != 0 {
                return Err(Error::Config(format!(
                    "{name} {dim} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        if self.frame_h % self.vision_patch != 0 || self.frame_w % self.vision_patch != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible by patch {}",
                self.frame_h, self.frame_w, self.vision_patch
            )));
        }
        if self.mel_bins % self.audio_patch_h != 0 || self.spec_frames % self.audio_patch_w != 0 {
            return Err(Error::Config(format!(
                "spectrogram {}x{} not divisible by patch {}x{}",
                self.mel_bins, self.spec_frames, self.audio_patch_h, self.audio_patch_w
            )));
        }
        let ones = [
            self.vocab_size,
            self.max_text_len,
            self.layers,
            self.heads,
            self.ff_mult,
            self.max_frames,
            self.max_clips,
            self.vision_seq_len(),
            self.audio_seq_len(),
        ];
        if ones.iter().any(|&v| v == 0) {
            return Err(Error::Config("all counts and lengths must be >= 1".into()));
        }
        Ok(())
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AttnParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub attn: AttnParams,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct TextEncoderParams {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockParams>,
}

#[derive(Debug, Clone)]
pub struct PatchEncoderParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockParams>,
}

pub fn init_attn(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    dim: usize,
    layers: usize,
) -> Result<AttnParams> {
    // Residual output projections get 1/sqrt(2*layers) scaling.
    let resid = INIT_STD / (2.0 * layers as f64).sqrt();
    Ok(AttnParams {
        wq: store.add(&format!("{prefix}.wq"), Tensor::randn(vec![dim, dim], INIT_STD, rng))?,
        bq: store.add(&format!("{prefix}.bq"), Tensor::zeros(vec![dim]))?,
        wk: store.add(&format!("{prefix}.wk"), Tensor::randn(vec![dim, dim], INIT_STD, rng))?,
        bk: store.add(&format!("{prefix}.bk"), Tensor::zeros(vec![dim]))?,
        wv: store.add(&format!("{prefix}.wv"), Tensor::randn(vec![dim, dim], INIT_STD, rng))?,
        bv: store.add(&format!("{prefix}.bv"), Tensor::zeros(vec![dim]))?,
        wo: store.add(&format!("{prefix}.wo"), Tensor::randn(vec![dim, dim], resid, rng))?,
        bo: store.add(&format!("{prefix}.bo"), Tensor::zeros(vec![dim]))?,
    })
}

pub fn init_block(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    dim: usize,
    ff_mult: usize,
    layers: usize,
) -> Result<BlockParams> {
    let ff = dim * ff_mult;
    let resid = INIT_STD / (2.0 * layers as f64).sqrt();
    Ok(BlockParams {
        attn: init_attn(store, rng, &format!("{prefix}.attn"), dim, layers)?,
        ln1_g: store.add(&format!("{prefix}.ln1.g"), Tensor::filled(vec![dim], 1.0))?,
        ln1_b: store.add(&format!("{prefix}.ln1.b"), Tensor::zeros(vec![dim]))?,
        ff_w1: store.add(&format!("{prefix}.ff.w1"), Tensor::randn(vec![dim, ff], INIT_STD, rng))?,
        ff_b1: store.add(&format!("{prefix}.ff.b1"), Tensor::zeros(vec![ff]))?,
        ff_w2: store.add(&format!("{prefix}.ff.w2"), Tensor::randn(vec![ff, dim], resid, rng))?,
        ff_b2: store.add(&format!("{prefix}.ff.b2"), Tensor::zeros(vec![dim]))?,
        ln2_g: store.add(&format!("{prefix}.ln2.g"), Tensor::filled(vec![dim], 1.0))?,
        ln2_b: store.add(&format!("{prefix}.ln2.b"), Tensor::zeros(vec![dim]))?,
    })
}

pub fn init_text_encoder(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    cfg: &EncoderConfig,
) -> Result<TextEncoderParams> {
    let tok_emb = store.add(
        "text.tok_emb",
        Tensor::randn(vec![cfg.vocab_size, cfg.text_dim], INIT_STD, rng),
    )?;
    let pos_emb = store.add(
        "text.pos_emb",
        Tensor::randn(vec![cfg.max_text_len, cfg.text_dim], INIT_STD, rng),
    )?;
    let blocks = (0..cfg.layers)
        .map(|l| init_block(store, rng, &format!("text.block{l}"), cfg.text_dim, cfg.ff_mult, cfg.layers))
        .collect::<Result<_>>()?;
    Ok(TextEncoderParams { tok_emb, pos_emb, blocks })
}

pub fn init_vision_encoder(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    cfg: &EncoderConfig,
) -> Result<PatchEncoderParams> {
    let pdim = cfg.vision_patch * cfg.vision_patch * cfg.frame_ch;
    init_patch_encoder(store, rng, "vision", pdim, cfg.vision_seq_len(), cfg.vision_dim, cfg)
}

pub fn init_audio_encoder(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    cfg: &EncoderConfig,
) -> Result<PatchEncoderParams> {
    let pdim = cfg.audio_patch_h * cfg.audio_patch_w;
    init_patch_encoder(store, rng, "audio", pdim, cfg.audio_seq_len(), cfg.audio_dim, cfg)
}

fn init_patch_encoder(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    name: &str,
    patch_dim: usize,
    seq_len: usize,
    dim: usize,
    cfg: &EncoderConfig,
) -> Result<PatchEncoderParams> {
    let patch_w = store.add(
        &format!("{name}.patch_w"),
        Tensor::randn(vec![patch_dim, dim], INIT_STD, rng),
    )?;
    let patch_b = store.add(&format!("{name}.patch_b"), Tensor::zeros(vec![dim]))?;
    let pos_emb = store.add(
        &format!("{name}.pos_emb"),
        Tensor::randn(vec![seq_len, dim], INIT_STD, rng),
    )?;
    let blocks = (0..cfg.layers)
        .map(|l| init_block(store, rng, &format!("{name}.block{l}"), dim, cfg.ff_mult, cfg.layers))
        .collect::<Result<_>>()?;
    Ok(PatchEncoderParams { patch_w, patch_b, pos_emb, blocks })
}

// ── Attention / blocks ──────────────────────────────────────────────────

/// Multi-head attention; queries from `x_q`, keys and values from `x_kv`.
/// `mask` is an additive `[Lq, Lk]` matrix (0 or -inf entries).
pub fn attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttnParams,
    heads: usize,
    x_q: NodeId,
    x_kv: NodeId,
    mask: Option<NodeId>,
) -> Result<NodeId> {
    let dim = g.shape(x_q)[1];
    let dh = dim / heads;
    let (wq, bq) = (g.param(store, p.wq), g.param(store, p.bq));
    let (wk, bk) = (g.param(store, p.wk), g.param(store, p.bk));
    let (wv, bv) = (g.param(store, p.wv), g.param(store, p.bv));
    let (wo, bo) = (g.param(store, p.wo), g.param(store, p.bo));
    let q = g.linear(x_q, wq, bq)?;
    let k = g.linear(x_kv, wk, bk)?;
    let v = g.linear(x_kv, wv, bv)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale);
        let masked = match mask {
            Some(m) => g.add(scaled, m)?,
            None => scaled,
        };
        let attn = g.softmax_masked(masked, 1)?;
        head_outs.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat_cols(&head_outs)?;
    g.linear(cat, wo, bo)
}

/// Post-norm transformer block: attention and feed-forward sublayers, each
/// with residual connection and layer norm.
pub fn transformer_block(
    g: &mut Graph,
    store: &ParamStore,
    p: &BlockParams,
    heads: usize,
    x: NodeId,
    mask: Option<NodeId>,
) -> Result<NodeId> {
    let att = attention(g, store, &p.attn, heads, x, x, mask)?;
    let sum = g.add(x, att)?;
    let (g1, b1) = (g.param(store, p.ln1_g), g.param(store, p.ln1_b));
    let x = g.layer_norm(sum, g1, b1, LAYER_NORM_EPS)?;

    let x2 = feed_forward(g, store, p, x)?;
    let sum = g.add(x, x2)?;
    let (g2, b2) = (g.param(store, p.ln2_g), g.param(store, p.ln2_b));
    g.layer_norm(sum, g2, b2, LAYER_NORM_EPS)
}

pub fn feed_forward(g: &mut Graph, store: &ParamStore, p: &BlockParams, x: NodeId) -> Result<NodeId> {
    let (w1, b1) = (g.param(store, p.ff_w1), g.param(store, p.ff_b1));
    let (w2, b2) = (g.param(store, p.ff_w2), g.param(store, p.ff_b2));
    let h = g.linear(x, w1, b1)?;
    let h = g.gelu(h);
    g.linear(h, w2, b2)
}

/// Additive `[L, L]` mask hiding padded keys from every query.
pub fn key_padding_mask(mask: &[bool]) -> Tensor {
    let l = mask.len();
    let mut data = vec![0.0; l * l];
    for i in 0..l {
        for (j, &keep) in mask.iter().enumerate() {
            if !keep {
                data[i * l + j] = f64::NEG_INFINITY;
            }
        }
    }
    Tensor::new(vec![l, l], data).expect("square mask")
}

// ── Encoder outputs ─────────────────────────────────────────────────────

/// `F_t`: one `[N_t, C_t]` node plus the token/mask metadata.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    pub features: NodeId,
    pub token_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
}

/// `F_v`: one `[S_v, C_v]` node per frame.
#[derive(Debug, Clone)]
pub struct VisionFeatures {
    pub frames: Vec<NodeId>,
}

/// `F_a`: one `[S_a, C_a]` node per clip.
#[derive(Debug, Clone)]
pub struct AudioFeatures {
    pub clips: Vec<NodeId>,
}

impl VisionFeatures {
    /// Stacked `[N_v, S_v, C_v]` tensor view of the per-frame nodes.
    pub fn to_tensor(&self, g: &Graph) -> Tensor {
        stack_3d(g, &self.frames)
    }
}

impl AudioFeatures {
    pub fn to_tensor(&self, g: &Graph) -> Tensor {
        stack_3d(g, &self.clips)
    }
}

fn stack_3d(g: &Graph, parts: &[NodeId]) -> Tensor {
    let (s, c) = (g.shape(parts[0])[0], g.shape(parts[0])[1]);
    let mut data = Vec::with_capacity(parts.len() * s * c);
    for &p in parts {
        data.extend_from_slice(g.data(p));
    }
    Tensor::new(vec![parts.len(), s, c], data).expect("uniform parts")
}

pub fn encode_text(
    g: &mut Graph,
    store: &ParamStore,
    p: &TextEncoderParams,
    cfg: &EncoderConfig,
    token_ids: &[usize],
    attention_mask: &[bool],
) -> Result<TextFeatures> {
    if token_ids.len() != cfg.max_text_len || attention_mask.len() != cfg.max_text_len {
        return Err(Error::Input(format!(
            "token sequence of {} ids must be padded to {}",
            token_ids.len(),
            cfg.max_text_len
        )));
    }
    let table = g.param(store, p.tok_emb);
    let emb = g.embedding(table, token_ids)?;
    let pos = g.param(store, p.pos_emb);
    let mut x = g.add(emb, pos)?;
    let mask = key_padding_mask(attention_mask);
    let mask_node = g.input(&mask);
    for block in &p.blocks {
        x = transformer_block(g, store, block, cfg.heads, x, Some(mask_node))?;
    }
    Ok(TextFeatures {
        features: x,
        token_ids: token_ids.to_vec(),
        attention_mask: attention_mask.to_vec(),
    })
}

/// Row-major patch grid of one frame: `[S, patch*patch*ch]`.
pub fn patchify_frame(data: &[f64], h: usize, w: usize, ch: usize, patch: usize) -> Vec<f64> {
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(gh * gw * patch * patch * ch);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                for dx in 0..patch {
                    for c in 0..ch {
                        let (y, x) = (py * patch + dy, px * patch + dx);
                        out.push(data[(y * w + x) * ch + c]);
                    }
                }
            }
        }
    }
    out
}

pub fn encode_vision(
    g: &mut Graph,
    store: &ParamStore,
    p: &PatchEncoderParams,
    cfg: &EncoderConfig,
    frames: &Tensor,
) -> Result<VisionFeatures> {
    let s = &frames.shape;
    if s.len() != 4 || s[1] != cfg.frame_h || s[2] != cfg.frame_w || s[3] != cfg.frame_ch {
        return Err(Error::Input(format!(
            "frames shape {s:?} does not match configured {}x{}x{}",
            cfg.frame_h, cfg.frame_w, cfg.frame_ch
        )));
    }
    if cfg.frame_h % cfg.vision_patch != 0 || cfg.frame_w % cfg.vision_patch != 0 {
        return Err(Error::Config(format!(
            "frame {}x{} not divisible by patch {}",
            cfg.frame_h, cfg.frame_w, cfg.vision_patch
        )));
    }
    let n_v = s[0];
    let frame_len = cfg.frame_h * cfg.frame_w * cfg.frame_ch;
    let pdim = cfg.vision_patch * cfg.vision_patch * cfg.frame_ch;
    let s_v = cfg.vision_seq_len();

    let mut outs = Vec::with_capacity(n_v);
    for f in 0..n_v {
        let patches = patchify_frame(
            &frames.data[f * frame_len..(f + 1) * frame_len],
            cfg.frame_h,
            cfg.frame_w,
            cfg.frame_ch,
            cfg.vision_patch,
        );
        let node = g.constant(vec![s_v, pdim], patches);
        outs.push(encode_patches(g, store, p, cfg, node)?);
    }
    Ok(VisionFeatures { frames: outs })
}

pub fn encode_audio(
    g: &mut Graph,
    store: &ParamStore,
    p: &PatchEncoderParams,
    cfg: &EncoderConfig,
    spectrograms: &Tensor,
) -> Result<AudioFeatures> {
    let s = &spectrograms.shape;
    if s.len() != 3 || s[1] != cfg.mel_bins || s[2] != cfg.spec_frames {
        return Err(Error::Input(format!(
            "spectrogram shape {s:?} does not match configured {}x{}",
            cfg.mel_bins, cfg.spec_frames
        )));
    }
    let n_a = s[0];
    let clip_len = cfg.mel_bins * cfg.spec_frames;
    let pdim = cfg.audio_patch_h * cfg.audio_patch_w;
    let s_a = cfg.audio_seq_len();

    let mut outs = Vec::with_capacity(n_a);
    for c in 0..n_a {
        let patches = patchify_grid(
            &spectrograms.data[c * clip_len..(c + 1) * clip_len],
            cfg.mel_bins,
            cfg.spec_frames,
            cfg.audio_patch_h,
            cfg.audio_patch_w,
        );
        let node = g.constant(vec![s_a, pdim], patches);
        outs.push(encode_patches(g, store, p, cfg, node)?);
    }
    Ok(AudioFeatures { clips: outs })
}

/// Row-major patch grid of a 2D array: `[(rows/ph)*(cols/pw), ph*pw]`.
pub fn patchify_grid(data: &[f64], rows: usize, cols: usize, ph: usize, pw: usize) -> Vec<f64> {
    let (gr, gc) = (rows / ph, cols / pw);
    let mut out = Vec::with_capacity(gr * gc * ph * pw);
    for py in 0..gr {
        for px in 0..gc {
            for dy in 0..ph {
                for dx in 0..pw {
                    out.push(data[(py * ph + dy) * cols + px * pw + dx]);
                }
            }
        }
    }
    out
}

fn encode_patches(
    g: &mut Graph,
    store: &ParamStore,
    p: &PatchEncoderParams,
    cfg: &EncoderConfig,
    patches: NodeId,
) -> Result<NodeId> {
    let (w, b) = (g.param(store, p.patch_w), g.param(store, p.patch_b));
    let emb = g.linear(patches, w, b)?;
    let pos = g.param(store, p.pos_emb);
    let mut x = g.add(emb, pos)?;
    let heads = cfg.heads;
    for block in &p.blocks {
        x = transformer_block(g, store, block, heads, x, None)?;
    }
    Ok(x)
}
