//! Synthetic correlated tri-modality data, batch assembly, and the audio
//! concept density corpus tool.
//!
//! Each latent (vision_event, audio_event) pair maps to a pixel motif (a
//! bright block at an event-indexed position), a spectrogram motif (energy in
//! an event-indexed mel band), and a caption that names one word recoverable
//! only from vision and one recoverable only from audio. Gaussian noise at a
//! configured level sits on top of the motifs.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{self, Vocabulary};

pub const VISION_WORDS: [&str; 16] = [
    "circle", "square", "triangle", "diamond", "star", "cross", "ring", "arrow", "stripe", "dot",
    "grid", "wave", "spiral", "wedge", "band", "knot",
];

pub const AUDIO_WORDS: [&str; 16] = [
    "barking", "ringing", "humming", "whistling", "drumming", "buzzing", "chirping", "clapping",
    "roaring", "ticking", "splashing", "rustling", "beeping", "growling", "rattling", "knocking",
];

const TEMPLATE_WORDS: [&str; 7] = ["a", "appears", "while", "sound", "plays", "what", "shape"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub vision_events: usize,
    pub audio_events: usize,
    pub noise_std: f64,
    pub frame_h: usize,
    pub frame_w: usize,
    pub frame_ch: usize,
    pub mel_bins: usize,
    pub spec_frames: usize,
    pub frames_per_example: usize,
    pub clips_per_example: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            vision_events: 8,
            audio_events: 8,
            noise_std: 0.05,
            frame_h: 16,
            frame_w: 16,
            frame_ch: 1,
            mel_bins: 8,
            spec_frames: 16,
            frames_per_example: 1,
            clips_per_example: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vision_events < 2 || self.audio_events < 2 {
            return Err(Error::Config(
                "need at least 2 vision and 2 audio events for non-degenerate retrieval".into(),
            ));
        }
        if self.vision_events > VISION_WORDS.len() || self.audio_events > AUDIO_WORDS.len() {
            return Err(Error::Config(format!(
                "at most {} vision / {} audio events supported",
                VISION_WORDS.len(),
                AUDIO_WORDS.len()
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        if self.frames_per_example == 0 || self.clips_per_example == 0 {
            return Err(Error::Config("need at least one frame and clip per example".into()));
        }
        Ok(())
    }

    /// All words the generator can emit, in stable order.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        self.validate()?;
        let mut words: Vec<&str> = TEMPLATE_WORDS.to_vec();
        words.extend(&VISION_WORDS[..self.vision_events]);
        words.extend(&AUDIO_WORDS[..self.audio_events]);
        Vocabulary::from_words(words)
    }
}

/// One synthetic triplet with its latent labels.
#[derive(Debug, Clone)]
pub struct TriModalExample {
    pub caption: String,
    pub frames: Tensor,
    pub spectrograms: Option<Tensor>,
    pub vision_event: usize,
    pub audio_event: Option<usize>,
}

impl TriModalExample {
    pub fn has_audio(&self) -> bool {
        self.spectrograms.is_some()
    }
}

/// Deterministic caption for a latent pair. Without audio the caption names
/// no audio-concept word at all.
pub fn caption_for(v: usize, a: Option<usize>) -> String {
    match a {
        Some(a) => format!(
            "a {} appears while {} sound plays",
            VISION_WORDS[v], AUDIO_WORDS[a]
        ),
        None => format!("a {} appears", VISION_WORDS[v]),
    }
}

/// Noise-free pixel motif for a vision event: a 4x4 block whose position is
/// indexed by the event id on a 4x4 cell grid.
fn vision_motif(cfg: &GeneratorConfig, event: usize) -> Vec<f64> {
    let mut frame = vec![0.0; cfg.frame_h * cfg.frame_w * cfg.frame_ch];
    let cells_x = (cfg.frame_w / 4).max(1);
    let cell = (event % (cells_x * (cfg.frame_h / 4).max(1))).min(cells_x * 4 - 1);
    let (cy, cx) = (cell / cells_x, cell % cells_x);
    for dy in 0..4.min(cfg.frame_h) {
        for dx in 0..4.min(cfg.frame_w) {
            let y = (cy * 4 + dy).min(cfg.frame_h - 1);
            let x = (cx * 4 + dx).min(cfg.frame_w - 1);
            for c in 0..cfg.frame_ch {
                frame[(y * cfg.frame_w + x) * cfg.frame_ch + c] = 1.0;
            }
        }
    }
    frame
}

/// Noise-free spectrogram motif for an audio event: full-width energy in an
/// event-indexed mel band.
fn audio_motif(cfg: &GeneratorConfig, event: usize) -> Vec<f64> {
    let mut spec = vec![0.0; cfg.mel_bins * cfg.spec_frames];
    let row = event % cfg.mel_bins;
    let phase = event / cfg.mel_bins;
    for t in 0..cfg.spec_frames {
        // Events beyond the mel range reuse a band with alternating stripes.
        if phase == 0 || (t / 2) % 2 == phase % 2 {
            spec[row * cfg.spec_frames + t] = 1.0;
        }
    }
    spec
}

fn add_noise(data: &mut [f64], std: f64, rng: &mut ChaCha20Rng) {
    if std == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("validated noise std");
    for v in data.iter_mut() {
        *v += normal.sample(rng);
    }
}

/// Render a specific latent pair.
pub fn render_example(
    cfg: &GeneratorConfig,
    vision_event: usize,
    audio_event: Option<usize>,
    rng: &mut ChaCha20Rng,
) -> Result<TriModalExample> {
    cfg.validate()?;
    if vision_event >= cfg.vision_events {
        return Err(Error::Index(format!(
            "vision event {vision_event} out of range {}",
            cfg.vision_events
        )));
    }
    if let Some(a) = audio_event {
        if a >= cfg.audio_events {
            return Err(Error::Index(format!(
                "audio event {a} out of range {}",
                cfg.audio_events
            )));
        }
    }
    let frame_len = cfg.frame_h * cfg.frame_w * cfg.frame_ch;
    let motif = vision_motif(cfg, vision_event);
    let mut frames = Vec::with_capacity(cfg.frames_per_example * frame_len);
    for _ in 0..cfg.frames_per_example {
        let mut f = motif.clone();
        add_noise(&mut f, cfg.noise_std, rng);
        frames.extend_from_slice(&f);
    }
    let frames = Tensor::new(
        vec![cfg.frames_per_example, cfg.frame_h, cfg.frame_w, cfg.frame_ch],
        frames,
    )?;

    let spectrograms = match audio_event {
        Some(a) => {
            let clip_len = cfg.mel_bins * cfg.spec_frames;
            let motif = audio_motif(cfg, a);
            let mut clips = Vec::with_capacity(cfg.clips_per_example * clip_len);
            for _ in 0..cfg.clips_per_example {
                let mut c = motif.clone();
                add_noise(&mut c, cfg.noise_std, rng);
                clips.extend_from_slice(&c);
            }
            Some(Tensor::new(
                vec![cfg.clips_per_example, cfg.mel_bins, cfg.spec_frames],
                clips,
            )?)
        }
        None => None,
    };

    Ok(TriModalExample {
        caption: caption_for(vision_event, audio_event),
        frames,
        spectrograms,
        vision_event,
        audio_event,
    })
}

/// Sample latent events independently and render.
pub fn generate_example(
    cfg: &GeneratorConfig,
    with_audio: bool,
    rng: &mut ChaCha20Rng,
) -> Result<TriModalExample> {
    cfg.validate()?;
    let v = rng.gen_range(0..cfg.vision_events);
    let a = with_audio.then(|| rng.gen_range(0..cfg.audio_events));
    render_example(cfg, v, a, rng)
}

/// A generative QA pair over one example's latent factors.
#[derive(Debug, Clone)]
pub struct QaExample {
    pub question: String,
    pub answer: String,
    pub frames: Tensor,
    pub spectrograms: Option<Tensor>,
}

/// Ask about the vision factor ("what shape appears") or the audio factor
/// ("what sound plays"); the answer is the corresponding concept word.
pub fn qa_from_example(ex: &TriModalExample, about_vision: bool) -> Result<QaExample> {
    let (question, answer) = if about_vision {
        ("what shape appears".to_string(), VISION_WORDS[ex.vision_event].to_string())
    } else {
        let a = ex
            .audio_event
            .ok_or_else(|| Error::Config("audio question about an example without audio".into()))?;
        ("what sound plays".to_string(), AUDIO_WORDS[a].to_string())
    };
    Ok(QaExample {
        question,
        answer,
        frames: ex.frames.clone(),
        spectrograms: ex.spectrograms.clone(),
    })
}

// ── Batch assembly ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub weight: f64,
    pub has_audio: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub datasets: Vec<DatasetEntry>,
}

impl DatasetSpec {
    /// One tri-modality dataset with unit weight.
    pub fn tri_only() -> Self {
        DatasetSpec {
            datasets: vec![DatasetEntry {
                name: "tri".into(),
                weight: 1.0,
                has_audio: true,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("dataset spec needs at least one dataset".into()));
        }
        for d in &self.datasets {
            if !(d.weight > 0.0 && d.weight.is_finite()) {
                return Err(Error::Config(format!(
                    "dataset '{}' weight {} must be positive",
                    d.name, d.weight
                )));
            }
        }
        Ok(())
    }

    /// Weighted draw of a dataset index.
    pub fn sample(&self, rng: &mut ChaCha20Rng) -> Result<usize> {
        self.validate()?;
        let total: f64 = self.datasets.iter().map(|d| d.weight).sum();
        let mut x = rng.gen_range(0.0..total);
        for (i, d) in self.datasets.iter().enumerate() {
            if x < d.weight {
                return Ok(i);
            }
            x -= d.weight;
        }
        Ok(self.datasets.len() - 1)
    }
}

/// One example prepared for the model: tokenized caption plus subsampled
/// frames/clips.
#[derive(Debug, Clone)]
pub struct BatchExample {
    pub token_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    pub frames: Tensor,
    pub spectrograms: Option<Tensor>,
    pub vision_event: usize,
    pub audio_event: Option<usize>,
    pub caption: String,
}

#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub dataset: String,
    pub has_audio: bool,
    pub examples: Vec<BatchExample>,
}

fn subsample_stack(t: &Tensor, count: usize, rng: &mut ChaCha20Rng) -> Result<Tensor> {
    let n = t.shape[0];
    let item: usize = t.shape[1..].iter().product();
    let count = count.min(n);
    let mut data = Vec::with_capacity(count * item);
    // Sample without replacement, preserving original order.
    let mut picked: Vec<usize> = Vec::with_capacity(count);
    while picked.len() < count {
        let i = rng.gen_range(0..n);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    for &i in &picked {
        data.extend_from_slice(&t.data[i * item..(i + 1) * item]);
    }
    let mut shape = t.shape.clone();
    shape[0] = count;
    Tensor::new(shape, data)
}

/// Convert an example to model inputs, subsampling frames and clips.
pub fn prepare_example(
    ex: &TriModalExample,
    vocab: &Vocabulary,
    max_text_len: usize,
    frames_per_sample: usize,
    clips_per_sample: usize,
    rng: &mut ChaCha20Rng,
) -> Result<BatchExample> {
    let (token_ids, attention_mask) = text::tokenize(&ex.caption, vocab, max_text_len)?;
    let frames = subsample_stack(&ex.frames, frames_per_sample, rng)?;
    let spectrograms = match &ex.spectrograms {
        Some(s) => Some(subsample_stack(s, clips_per_sample, rng)?),
        None => None,
    };
    Ok(BatchExample {
        token_ids,
        attention_mask,
        frames,
        spectrograms,
        vision_event: ex.vision_event,
        audio_event: ex.audio_event,
        caption: ex.caption.clone(),
    })
}

/// Draw a dataset by weight, then generate `b` fresh examples from it.
/// Dual-modality datasets produce batches without audio.
pub fn build_batch(
    spec: &DatasetSpec,
    gen: &GeneratorConfig,
    vocab: &Vocabulary,
    max_text_len: usize,
    b: usize,
    frames_per_sample: usize,
    clips_per_sample: usize,
    rng: &mut ChaCha20Rng,
) -> Result<TrainingBatch> {
    if b == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let idx = spec.sample(rng)?;
    let entry = &spec.datasets[idx];
    let mut examples = Vec::with_capacity(b);
    for _ in 0..b {
        let ex = generate_example(gen, entry.has_audio, rng)?;
        examples.push(prepare_example(
            &ex,
            vocab,
            max_text_len,
            frames_per_sample,
            clips_per_sample,
            rng,
        )?);
    }
    Ok(TrainingBatch {
        dataset: entry.name.clone(),
        has_audio: entry.has_audio,
        examples,
    })
}

// ── Audio concept density ───────────────────────────────────────────────

/// Unique, nonempty, normalized audio-concept phrases.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptOntology {
    phrases: Vec<String>,
}

impl ConceptOntology {
    pub fn new<I, S>(phrases: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = Vec::new();
        for p in phrases {
            let norm = text::normalize(p.as_ref());
            if norm.is_empty() {
                return Err(Error::Input("empty phrase in ontology".into()));
            }
            if out.contains(&norm) {
                return Err(Error::Input(format!("duplicate ontology phrase '{norm}'")));
            }
            out.push(norm);
        }
        Ok(ConceptOntology { phrases: out })
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// One phrase per line.
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        Self::new(body.lines().filter(|l| !l.trim().is_empty()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.phrases.join("\n") + "\n")?;
        Ok(())
    }
}

/// Count whole-word contiguous occurrences of `phrase_words` in `words`.
/// A phrase occurring twice counts twice.
fn count_occurrences(words: &[&str], phrase_words: &[&str]) -> usize {
    if phrase_words.is_empty() || phrase_words.len() > words.len() {
        return 0;
    }
    let mut n = 0;
    for start in 0..=(words.len() - phrase_words.len()) {
        if words[start..start + phrase_words.len()] == *phrase_words {
            n += 1;
        }
    }
    n
}

/// Audio concept density: detected concept occurrences over total words,
/// after lowercasing and punctuation stripping.
pub fn acd(corpus: &[String], ontology: &ConceptOntology) -> Result<f64> {
    if ontology.is_empty() {
        return Err(Error::Contract("acd needs a nonempty ontology".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Contract("acd needs a nonempty corpus".into()));
    }
    let phrase_words: Vec<Vec<&str>> = ontology
        .phrases
        .iter()
        .map(|p| p.split_whitespace().collect())
        .collect();
    let mut n_ac = 0usize;
    let mut n_w = 0usize;
    for caption in corpus {
        let norm = text::normalize(caption);
        let words: Vec<&str> = norm.split_whitespace().collect();
        n_w += words.len();
        for pw in &phrase_words {
            n_ac += count_occurrences(&words, pw);
        }
    }
    if n_w == 0 {
        return Err(Error::Input("corpus contains no words after preprocessing".into()));
    }
    Ok(n_ac as f64 / n_w as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub captions: usize,
    pub total_words: usize,
    pub average_length: f64,
    pub phrase_counts: Vec<(String, usize)>,
}

/// Mean preprocessed word count plus a per-phrase frequency table.
pub fn corpus_stats(corpus: &[String], ontology: &ConceptOntology) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::Contract("corpus_stats needs a nonempty corpus".into()));
    }
    let mut total_words = 0usize;
    let mut counts: Vec<(String, usize)> =
        ontology.phrases.iter().map(|p| (p.clone(), 0)).collect();
    for caption in corpus {
        let norm = text::normalize(caption);
        let words: Vec<&str> = norm.split_whitespace().collect();
        total_words += words.len();
        for (i, p) in ontology.phrases.iter().enumerate() {
            let pw: Vec<&str> = p.split_whitespace().collect();
            counts[i].1 += count_occurrences(&words, &pw);
        }
    }
    Ok(CorpusStats {
        captions: corpus.len(),
        total_words,
        average_length: total_words as f64 / corpus.len() as f64,
        phrase_counts: counts,
    })
}

/// One caption per line.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let body = std::fs::read_to_string(path)?;
    Ok(body.lines().map(|l| l.to_string()).filter(|l| !l.trim().is_empty()).collect())
}

// ── Dataset persistence ─────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    id: usize,
    vision_event: usize,
    audio_event: Option<usize>,
    has_audio: bool,
    caption: String,
}

fn write_blob(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = Vec::with_capacity(4 + t.shape.len() * 8 + t.data.len() * 8);
    out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &e in &t.shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_blob(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::Input(format!("truncated blob {path:?}")));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let rank = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
    }
    Tensor::new(shape, data)
}

/// Persist examples as a manifest plus per-example binary blobs, along with
/// the vocabulary that tokenizes their captions.
pub fn save_dataset(dir: &Path, examples: &[TriModalExample], vocab: &Vocabulary) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.jsonl"))?);
    for (id, ex) in examples.iter().enumerate() {
        let record = ManifestRecord {
            id,
            vision_event: ex.vision_event,
            audio_event: ex.audio_event,
            has_audio: ex.has_audio(),
            caption: ex.caption.clone(),
        };
        serde_json::to_writer(&mut manifest, &record)
            .map_err(|e| Error::Parse(e.to_string()))?;
        manifest.write_all(b"\n")?;
        write_blob(&dir.join(format!("{id}.frames.bin")), &ex.frames)?;
        if let Some(s) = &ex.spectrograms {
            write_blob(&dir.join(format!("{id}.audio.bin")), s)?;
        }
    }
    manifest.flush()?;
    vocab.save(&dir.join("vocab.txt"))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<TriModalExample>, Vocabulary)> {
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    let manifest = std::fs::read_to_string(dir.join("manifest.jsonl"))?;
    let mut examples = Vec::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| Error::Parse(e.to_string()))?;
        let frames = read_blob(&dir.join(format!("{}.frames.bin", rec.id)))?;
        let spectrograms = if rec.has_audio {
            Some(read_blob(&dir.join(format!("{}.audio.bin", rec.id)))?)
        } else {
            None
        };
        examples.push(TriModalExample {
            caption: rec.caption,
            frames,
            spectrograms,
            vision_event: rec.vision_event,
            audio_event: rec.audio_event,
        });
    }
    Ok((examples, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::HashSet;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_noise_equal_labels_give_identical_renders() {
        let cfg = GeneratorConfig {
            noise_std: 0.0,
            ..GeneratorConfig::default()
        };
        let a = render_example(&cfg, 3, Some(5), &mut rng(1)).unwrap();
        let b = render_example(&cfg, 3, Some(5), &mut rng(999)).unwrap();
        assert_eq!(a.frames.data, b.frames.data);
        assert_eq!(
            a.spectrograms.unwrap().data,
            b.spectrograms.unwrap().data
        );
    }

    #[test]
    fn captions_are_injective_over_latent_pairs() {
        let cfg = GeneratorConfig::default();
        let mut seen = HashSet::new();
        for v in 0..cfg.vision_events {
            for a in 0..cfg.audio_events {
                assert!(seen.insert(caption_for(v, Some(a))));
            }
        }
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn captions_distinguishable_by_bag_of_words() {
        let cfg = GeneratorConfig::default();
        let bags: Vec<HashSet<String>> = (0..cfg.vision_events)
            .flat_map(|v| {
                (0..cfg.audio_events)
                    .map(move |a| (v, a))
            })
            .map(|(v, a)| {
                caption_for(v, Some(a))
                    .split_whitespace()
                    .map(str::to_string)
                    .collect()
            })
            .collect();
        for i in 0..bags.len() {
            for j in (i + 1)..bags.len() {
                assert_ne!(bags[i], bags[j], "bags {i} and {j} identical");
            }
        }
    }

    #[test]
    fn no_audio_means_no_audio_words_and_no_spectrograms() {
        let cfg = GeneratorConfig::default();
        let ex = generate_example(&cfg, false, &mut rng(7)).unwrap();
        assert!(ex.spectrograms.is_none());
        assert!(ex.audio_event.is_none());
        for w in ex.caption.split_whitespace() {
            assert!(!AUDIO_WORDS.contains(&w), "audio word '{w}' leaked");
        }
    }

    #[test]
    fn degenerate_event_counts_are_config_errors() {
        let cfg = GeneratorConfig {
            vision_events: 1,
            ..GeneratorConfig::default()
        };
        assert!(matches!(
            generate_example(&cfg, true, &mut rng(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_dataset_always_selected() {
        let spec = DatasetSpec::tri_only();
        let mut r = rng(11);
        for _ in 0..100 {
            assert_eq!(spec.sample(&mut r).unwrap(), 0);
        }
    }

    #[test]
    fn weighted_sampling_matches_expected_frequency() {
        let spec = DatasetSpec {
            datasets: vec![
                DatasetEntry { name: "a".into(), weight: 3.0, has_audio: true },
                DatasetEntry { name: "b".into(), weight: 1.0, has_audio: false },
            ],
        };
        let mut r = rng(13);
        let mut a_count = 0;
        for _ in 0..10_000 {
            if spec.sample(&mut r).unwrap() == 0 {
                a_count += 1;
            }
        }
        let freq = a_count as f64 / 10_000.0;
        assert!((0.72..=0.78).contains(&freq), "frequency {freq}");
    }

    #[test]
    fn build_batch_is_reproducible_bit_for_bit() {
        let spec = DatasetSpec::tri_only();
        let gen = GeneratorConfig::default();
        let vocab = gen.vocabulary().unwrap();
        let run = |seed| {
            let mut r = rng(seed);
            build_batch(&spec, &gen, &vocab, 16, 4, 1, 1, &mut r).unwrap()
        };
        let (b1, b2) = (run(17), run(17));
        for (x, y) in b1.examples.iter().zip(&b2.examples) {
            assert_eq!(x.token_ids, y.token_ids);
            assert_eq!(x.frames.data, y.frames.data);
            assert_eq!(
                x.spectrograms.as_ref().map(|t| &t.data),
                y.spectrograms.as_ref().map(|t| &t.data)
            );
        }
    }

    #[test]
    fn dual_modality_batch_has_no_audio() {
        let spec = DatasetSpec {
            datasets: vec![DatasetEntry { name: "dual".into(), weight: 1.0, has_audio: false }],
        };
        let gen = GeneratorConfig::default();
        let vocab = gen.vocabulary().unwrap();
        let batch = build_batch(&spec, &gen, &vocab, 16, 3, 1, 1, &mut rng(19)).unwrap();
        assert!(!batch.has_audio);
        assert!(batch.examples.iter().all(|e| e.spectrograms.is_none()));
    }

    #[test]
    fn nearest_neighbor_on_zero_noise_motifs_is_a_perfect_retriever() {
        let cfg = GeneratorConfig { noise_std: 0.0, ..GeneratorConfig::default() };
        let mut r = rng(23);
        let candidates: Vec<TriModalExample> = (0..cfg.vision_events)
            .flat_map(|v| (0..cfg.audio_events).map(move |a| (v, a)))
            .map(|(v, a)| render_example(&cfg, v, Some(a), &mut r).unwrap())
            .collect();
        let dist = |x: &[f64], y: &[f64]| -> f64 {
            x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        let mut hits = 0;
        for (qi, q) in candidates.iter().enumerate() {
            let best = candidates
                .iter()
                .enumerate()
                .min_by(|(_, x), (_, y)| {
                    let dx = dist(&q.frames.data, &x.frames.data)
                        + dist(&q.spectrograms.as_ref().unwrap().data, &x.spectrograms.as_ref().unwrap().data);
                    let dy = dist(&q.frames.data, &y.frames.data)
                        + dist(&q.spectrograms.as_ref().unwrap().data, &y.spectrograms.as_ref().unwrap().data);
                    dx.partial_cmp(&dy).unwrap()
                })
                .unwrap()
                .0;
            if best == qi {
                hits += 1;
            }
        }
        assert_eq!(hits, candidates.len());
    }

    #[test]
    fn acd_hand_counts() {
        let ont = ConceptOntology::new(["barks"]).unwrap();
        let corpus = vec!["a dog barks loudly".to_string()];
        assert_eq!(acd(&corpus, &ont).unwrap(), 0.25);

        let ont2 = ConceptOntology::new(["meows"]).unwrap();
        assert_eq!(acd(&corpus, &ont2).unwrap(), 0.0);
    }

    #[test]
    fn acd_counts_multiword_phrases_and_repeats() {
        let ont = ConceptOntology::new(["police siren", "dog"]).unwrap();
        // 8 words; "police siren" once, "dog" twice.
        let corpus = vec!["Dog and dog hear a loud police siren".to_string()];
        let v = acd(&corpus, &ont).unwrap();
        assert!((v - 3.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn acd_whole_word_not_substring() {
        let ont = ConceptOntology::new(["cat"]).unwrap();
        let corpus = vec!["a catalog of cats and a cat".to_string()];
        // Only the standalone "cat" matches; "catalog"/"cats" do not.
        let v = acd(&corpus, &ont).unwrap();
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn acd_invariant_to_order_and_whitespace() {
        let ont = ConceptOntology::new(["barking"]).unwrap();
        let c1 = vec!["a dog barking".to_string(), "quiet street".to_string()];
        let c2 = vec!["quiet   street".to_string(), "a  dog   barking".to_string()];
        assert_eq!(acd(&c1, &ont).unwrap(), acd(&c2, &ont).unwrap());
    }

    #[test]
    fn acd_contract_errors() {
        let ont = ConceptOntology::new(Vec::<String>::new()).unwrap();
        assert!(matches!(
            acd(&["x".to_string()], &ont),
            Err(Error::Contract(_))
        ));
        let ont = ConceptOntology::new(["dog"]).unwrap();
        assert!(matches!(acd(&[], &ont), Err(Error::Contract(_))));
    }

    #[test]
    fn corpus_stats_average_length() {
        let ont = ConceptOntology::new(["dog"]).unwrap();
        let corpus = vec!["one two three".to_string(), "a b c d e".to_string()];
        let stats = corpus_stats(&corpus, &ont).unwrap();
        assert_eq!(stats.average_length, 4.0);
        let single = corpus_stats(&corpus[..1].to_vec(), &ont).unwrap();
        assert_eq!(single.average_length, 3.0);
    }

    #[test]
    fn synthetic_corpus_average_matches_template() {
        let cfg = GeneratorConfig::default();
        let mut r = rng(29);
        let corpus: Vec<String> = (0..50)
            .map(|_| generate_example(&cfg, true, &mut r).unwrap().caption)
            .collect();
        let ont = ConceptOntology::new(["barking"]).unwrap();
        let stats = corpus_stats(&corpus, &ont).unwrap();
        // Template "a V appears while A sound plays" is 7 words.
        assert_eq!(stats.average_length, 7.0);
    }

    #[test]
    fn dataset_directory_round_trip() {
        let cfg = GeneratorConfig::default();
        let vocab = cfg.vocabulary().unwrap();
        let mut r = rng(31);
        let examples: Vec<TriModalExample> = (0..4)
            .map(|i| generate_example(&cfg, i % 2 == 0, &mut r).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &examples, &vocab).unwrap();
        let (loaded, loaded_vocab) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 4);
        assert_eq!(loaded_vocab.len(), vocab.len());
        for (a, b) in examples.iter().zip(&loaded) {
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.frames.data, b.frames.data);
            assert_eq!(a.vision_event, b.vision_event);
            assert_eq!(a.audio_event, b.audio_event);
            assert_eq!(
                a.spectrograms.as_ref().map(|t| &t.data),
                b.spectrograms.as_ref().map(|t| &t.data)
            );
        }
    }

    #[test]
    fn ontology_rejects_duplicates_and_empties() {
        assert!(ConceptOntology::new(["dog", "Dog"]).is_err());
        assert!(ConceptOntology::new(["", "x"]).is_err());
    }
}
