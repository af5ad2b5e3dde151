//! Synthetic audio-visual corpus in which audio identifies every phone while
//! the visual stream only carries the visual features.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{format_tier, Corpus, Manifest, ManifestUtterance, Modality, PhoneInventory, Segment, Split, UtteranceRecord};
use crate::error::{Error, Result};
use crate::features::FeatureSeq;
use crate::rng::{streams, substream, Rng};
use crate::wsmf;

const SYNTH_INVENTORY: &str = include_str!("../data/inventory_synth.json");
const FRENCH_INVENTORY: &str = include_str!("../data/inventory_french.json");

/// The 18-phone inventory used by default for synthetic corpora.
pub fn default_inventory() -> PhoneInventory {
    serde_json::from_str(SYNTH_INVENTORY).expect("bundled inventory parses")
}

/// The full French opposition table, ASCII-transliterated.
pub fn french_inventory() -> PhoneInventory {
    serde_json::from_str(FRENCH_INVENTORY).expect("bundled inventory parses")
}

/// IPA symbols and the ASCII names used for them in the bundled inventories.
pub const TRANSLITERATION: &[(&str, &str)] = &[
    ("ø", "2"),
    ("œ", "9"),
    ("ɛ", "E"),
    ("ɔ", "O"),
    ("ɑ̃", "an"),
    ("ɔ̃", "on"),
    ("ɛ̃", "En"),
    ("ʃ", "S"),
    ("ʒ", "Z"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub inventory: PhoneInventory,
    pub speakers: usize,
    pub words: usize,
    pub min_word_phones: usize,
    pub max_word_phones: usize,
    pub tokens_per_word: usize,
    pub words_per_utterance: usize,
    pub min_phone_frames: usize,
    pub max_phone_frames: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    /// Expected norm of each speaker's additive offset.
    pub speaker_offset: f64,
    /// Per-dimension standard deviation of frame noise.
    pub audio_noise: f64,
    pub visual_noise: f64,
    /// Moving-average width applied within each word.
    pub smoothing: usize,
    /// Minimum distance between any two prototypes of one modality.
    pub min_prototype_distance: f64,
    /// Evaluation set: contexts per contrast and repetitions per speaker.
    pub eval_contexts: usize,
    pub eval_reps: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            inventory: default_inventory(),
            speakers: 6,
            words: 40,
            min_word_phones: 2,
            max_word_phones: 4,
            tokens_per_word: 3,
            words_per_utterance: 6,
            min_phone_frames: 5,
            max_phone_frames: 15,
            audio_dim: 40,
            visual_dim: 40,
            speaker_offset: 0.5,
            audio_noise: 0.5,
            visual_noise: 0.5,
            smoothing: 3,
            min_prototype_distance: 1.0,
            eval_contexts: 2,
            eval_reps: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.speakers == 0 || self.words == 0 || self.tokens_per_word == 0 || self.words_per_utterance == 0 {
            return bad("speaker, word and token counts must be positive");
        }
        if self.min_word_phones < 1 || self.min_word_phones > self.max_word_phones {
            return bad("word length range is empty");
        }
        if self.min_phone_frames < 1 || self.min_phone_frames > self.max_phone_frames {
            return bad("phone duration range is empty");
        }
        if self.audio_dim == 0 || self.visual_dim == 0 {
            return bad("feature dimensions must be positive");
        }
        if self.smoothing == 0 || self.smoothing % 2 == 0 {
            return bad("smoothing width must be odd");
        }
        if self.audio_noise < 0.0 || self.visual_noise < 0.0 || self.speaker_offset < 0.0 {
            return bad("noise and offset scales must be non-negative");
        }
        Ok(())
    }
}

/// Visual-feature values per phone.
///
/// Phones linked by a non-visual opposition must look alike, so values
/// propagate through those links; unconstrained values default to negative.
pub fn visual_classes(inventory: &PhoneInventory) -> Result<BTreeMap<String, Vec<bool>>> {
    let problems = inventory.problems();
    if let Some(p) = problems.first() {
        return Err(Error::ConfigInfeasible(p.clone()));
    }
    let index: BTreeMap<&str, usize> = inventory.phones.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let mut parent: Vec<usize> = (0..inventory.phones.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for (feature, pairs) in &inventory.features {
        if inventory.is_visual(feature) {
            continue;
        }
        for (p, q) in pairs {
            let (a, b) = (find(&mut parent, index[p.as_str()]), find(&mut parent, index[q.as_str()]));
            parent[a.max(b)] = a.min(b);
        }
    }
    let visual: Vec<&String> = inventory.features.keys().filter(|f| inventory.is_visual(f)).collect();
    // component -> per visual feature: Some(value) once constrained
    let mut values: BTreeMap<usize, Vec<Option<bool>>> = BTreeMap::new();
    for (k, f) in visual.iter().enumerate() {
        for (p, q) in &inventory.features[*f] {
            for (phone, value) in [(p, false), (q, true)] {
                let root = find(&mut parent, index[phone.as_str()]);
                let slot = &mut values.entry(root).or_insert_with(|| vec![None; visual.len()])[k];
                if slot.is_some_and(|v| v != value) {
                    return Err(Error::ConfigInfeasible(format!(
                        "phone {phone} needs both values of visual feature {f} (it is linked to the other pole through non-visual oppositions)"
                    )));
                }
                *slot = Some(value);
            }
        }
    }
    let mut out = BTreeMap::new();
    for (i, p) in inventory.phones.iter().enumerate() {
        let root = find(&mut parent, i);
        let tuple = values
            .get(&root)
            .map(|v| v.iter().map(|x| x.unwrap_or(false)).collect())
            .unwrap_or_else(|| vec![false; visual.len()]);
        out.insert(p.clone(), tuple);
    }
    Ok(out)
}

/// Prototypes and speaker offsets drawn for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecipe {
    pub audio: BTreeMap<String, Array1<f64>>,
    /// Keyed by visual-feature tuple, not by phone.
    pub visual: BTreeMap<Vec<bool>, Array1<f64>>,
    pub visual_class: BTreeMap<String, Vec<bool>>,
    pub audio_offsets: Vec<Array1<f64>>,
    pub visual_offsets: Vec<Array1<f64>>,
}

impl GenerationRecipe {
    pub fn visual_prototype(&self, phone: &str) -> &Array1<f64> {
        &self.visual[&self.visual_class[phone]]
    }
}

fn gaussian(dim: usize, scale: f64, rng: &mut Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(dim, || scale * rng.sample::<f64, _>(StandardNormal))
}

/// `n` unit-scale prototypes with pairwise distance at least `min_dist`.
fn separated_prototypes(n: usize, dim: usize, min_dist: f64, rng: &mut Rng) -> Result<Vec<Array1<f64>>> {
    let scale = 1.0 / (dim as f64).sqrt();
    let mut out: Vec<Array1<f64>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 10_000 * n.max(1) {
            return Err(Error::ConfigInfeasible(format!(
                "cannot place {n} prototypes {min_dist} apart in {dim} dimensions"
            )));
        }
        let v = gaussian(dim, scale, rng);
        if out.iter().all(|w| (w - &v).mapv(|x| x * x).sum().sqrt() >= min_dist) {
            out.push(v);
        }
    }
    Ok(out)
}

pub fn recipe(cfg: &SynthConfig) -> Result<GenerationRecipe> {
    cfg.validate()?;
    let visual_class = visual_classes(&cfg.inventory)?;
    for (f, pairs) in &cfg.inventory.features {
        if pairs.len() < 2 {
            return Err(Error::ConfigInfeasible(format!("feature {f} has fewer than two oppositions")));
        }
    }
    let mut rng = substream(cfg.seed, streams::SYNTH, 0);
    let audio = separated_prototypes(cfg.inventory.phones.len(), cfg.audio_dim, cfg.min_prototype_distance, &mut rng)?;
    let tuples: BTreeSet<Vec<bool>> = visual_class.values().cloned().collect();
    let visual = separated_prototypes(tuples.len(), cfg.visual_dim, cfg.min_prototype_distance, &mut rng)?;
    let scale_a = cfg.speaker_offset / (cfg.audio_dim as f64).sqrt();
    let scale_v = cfg.speaker_offset / (cfg.visual_dim as f64).sqrt();
    let mut audio_offsets = Vec::new();
    let mut visual_offsets = Vec::new();
    for _ in 0..cfg.speakers {
        audio_offsets.push(gaussian(cfg.audio_dim, scale_a, &mut rng));
        visual_offsets.push(gaussian(cfg.visual_dim, scale_v, &mut rng));
    }
    Ok(GenerationRecipe {
        audio: cfg.inventory.phones.iter().cloned().zip(audio).collect(),
        visual: tuples.into_iter().zip(visual).collect(),
        visual_class,
        audio_offsets,
        visual_offsets,
    })
}

/// Centered moving average of width `width` with clamped edges.
pub fn smooth(x: &Array2<f64>, width: usize) -> Array2<f64> {
    let half = width / 2;
    let n = x.nrows();
    if half == 0 || n == 0 {
        return x.clone();
    }
    let mut out = Array2::zeros(x.raw_dim());
    for t in 0..n {
        let mut row = out.row_mut(t);
        for k in 0..width {
            let src = (t + k).saturating_sub(half).min(n - 1);
            row += &x.row(src);
        }
        row /= width as f64;
    }
    out
}

struct Rendered {
    audio: Array2<f64>,
    visual: Array2<f64>,
    phones: Vec<Segment>,
}

fn render_word(cfg: &SynthConfig, recipe: &GenerationRecipe, phones: &[String], speaker: usize, rng: &mut Rng) -> Rendered {
    let durations: Vec<usize> = phones
        .iter()
        .map(|_| rng.gen_range(cfg.min_phone_frames..=cfg.max_phone_frames))
        .collect();
    let total: usize = durations.iter().sum();
    let mut audio = Array2::zeros((total, cfg.audio_dim));
    let mut visual = Array2::zeros((total, cfg.visual_dim));
    let mut segs = Vec::new();
    let mut t = 0;
    for (p, &d) in phones.iter().zip(&durations) {
        for _ in 0..d {
            let a = &recipe.audio[p] + &recipe.audio_offsets[speaker] + &gaussian(cfg.audio_dim, cfg.audio_noise, rng);
            let v = recipe.visual_prototype(p) + &recipe.visual_offsets[speaker] + &gaussian(cfg.visual_dim, cfg.visual_noise, rng);
            audio.row_mut(t).assign(&a);
            visual.row_mut(t).assign(&v);
            t += 1;
        }
        segs.push(Segment::new(p.clone(), t - d, t));
    }
    Rendered {
        audio: smooth(&audio, cfg.smoothing),
        visual: smooth(&visual, cfg.smoothing),
        phones: segs,
    }
}

fn word_label(phones: &[String]) -> String {
    phones.join("_")
}

/// Distinct random words, no phone repeated back to back.
fn lexicon(cfg: &SynthConfig, rng: &mut Rng) -> Result<Vec<Vec<String>>> {
    let phones = &cfg.inventory.phones;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut attempts = 0;
    while out.len() < cfg.words {
        attempts += 1;
        if attempts > 1000 * cfg.words {
            return Err(Error::ConfigInfeasible(format!("cannot draw {} distinct words", cfg.words)));
        }
        let len = rng.gen_range(cfg.min_word_phones..=cfg.max_word_phones);
        let mut w: Vec<String> = Vec::with_capacity(len);
        while w.len() < len {
            let p = phones.choose(rng).unwrap();
            if w.last() != Some(p) {
                w.push(p.clone());
            }
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    Ok(out)
}

fn speaker_id(s: usize) -> String {
    format!("spk{:02}", s + 1)
}

fn utterance(cfg: &SynthConfig, id: String, speaker: usize, split: Split, words: Vec<(String, Rendered)>) -> Result<UtteranceRecord> {
    let total: usize = words.iter().map(|(_, r)| r.audio.nrows()).sum();
    let mut audio = Array2::zeros((total, cfg.audio_dim));
    let mut visual = Array2::zeros((total, cfg.visual_dim));
    let mut word_tier = Vec::new();
    let mut phone_tier = Vec::new();
    let mut t = 0;
    for (label, r) in words {
        let n = r.audio.nrows();
        audio.slice_mut(ndarray::s![t..t + n, ..]).assign(&r.audio);
        visual.slice_mut(ndarray::s![t..t + n, ..]).assign(&r.visual);
        word_tier.push(Segment::new(label, t, t + n));
        phone_tier.extend(r.phones.into_iter().map(|s| Segment::new(s.label, s.start + t, s.end + t)));
        t += n;
    }
    wsmf::quantize(&mut audio);
    wsmf::quantize(&mut visual);
    let mut features = BTreeMap::new();
    features.insert("audio".to_string(), FeatureSeq::new(audio, 100.0)?);
    features.insert("visual".to_string(), FeatureSeq::new(visual, 100.0)?);
    Ok(UtteranceRecord {
        id,
        speaker: speaker_id(speaker),
        split,
        features,
        words: word_tier,
        phones: phone_tier,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub recipe: GenerationRecipe,
    pub lexicon: Vec<Vec<String>>,
}

/// Generate the corpus in memory: a training split of multi-word utterances
/// and a test split of triphone words covering every opposition for every
/// speaker.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let recipe = recipe(cfg)?;
    let lex = lexicon(cfg, &mut substream(cfg.seed, streams::SYNTH, 1))?;
    let mut utterances = Vec::new();

    let mut rng = substream(cfg.seed, streams::SYNTH, 2);
    for s in 0..cfg.speakers {
        let mut order: Vec<usize> = (0..lex.len()).flat_map(|w| std::iter::repeat(w).take(cfg.tokens_per_word)).collect();
        order.shuffle(&mut rng);
        for (k, chunk) in order.chunks(cfg.words_per_utterance).enumerate() {
            let words = chunk
                .iter()
                .map(|&w| (word_label(&lex[w]), render_word(cfg, &recipe, &lex[w], s, &mut rng)))
                .collect();
            utterances.push(utterance(cfg, format!("{}_tr{:03}", speaker_id(s), k), s, Split::Train, words)?);
        }
    }

    let mut rng = substream(cfg.seed, streams::SYNTH, 3);
    let phones = &cfg.inventory.phones;
    let mut counters = vec![0usize; cfg.speakers];
    for (p, q) in cfg.inventory.contrasts() {
        let candidates: Vec<&String> = phones.iter().filter(|x| **x != p && **x != q).collect();
        if candidates.is_empty() {
            return Err(Error::ConfigInfeasible(format!("no context phones available for {p}-{q}")));
        }
        let mut contexts = BTreeSet::new();
        let max_contexts = candidates.len() * candidates.len();
        while contexts.len() < cfg.eval_contexts.min(max_contexts) {
            contexts.insert(((*candidates.choose(&mut rng).unwrap()).clone(), (*candidates.choose(&mut rng).unwrap()).clone()));
        }
        for (l, r) in &contexts {
            for s in 0..cfg.speakers {
                for _ in 0..cfg.eval_reps {
                    for c in [&p, &q] {
                        let w = vec![l.clone(), c.clone(), r.clone()];
                        let rendered = render_word(cfg, &recipe, &w, s, &mut rng);
                        let id = format!("{}_ev{:04}", speaker_id(s), counters[s]);
                        counters[s] += 1;
                        utterances.push(utterance(cfg, id, s, Split::Test, vec![(word_label(&w), rendered)])?);
                    }
                }
            }
        }
    }

    let modalities = vec![
        Modality {
            name: "audio".into(),
            dim: cfg.audio_dim,
            fps: 100.0,
        },
        Modality {
            name: "visual".into(),
            dim: cfg.visual_dim,
            fps: 100.0,
        },
    ];
    let corpus = Corpus {
        utterances,
        speakers: (0..cfg.speakers).map(speaker_id).collect(),
        modalities,
        inventory: cfg.inventory.clone(),
    };
    Ok(SynthCorpus {
        corpus,
        recipe,
        lexicon: lex,
    })
}

/// Write `corpus` as manifest, inventory, WSMF feature files and TSV tiers.
/// Returns the manifest path.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("features"))?;
    std::fs::create_dir_all(dir.join("annotations"))?;
    let mut entries = Vec::new();
    for u in &corpus.utterances {
        let mut features = BTreeMap::new();
        for m in &corpus.modalities {
            let rel = PathBuf::from(format!("features/{}.{}.wsmf", u.id, m.name));
            wsmf::write(&dir.join(&rel), &u.features[&m.name].data)?;
            features.insert(m.name.clone(), rel);
        }
        let words = PathBuf::from(format!("annotations/{}.words.tsv", u.id));
        let phones = PathBuf::from(format!("annotations/{}.phones.tsv", u.id));
        wsmf::write_atomic(&dir.join(&words), format_tier(&u.words).as_bytes())?;
        wsmf::write_atomic(&dir.join(&phones), format_tier(&u.phones).as_bytes())?;
        entries.push(ManifestUtterance {
            id: u.id.clone(),
            speaker: u.speaker.clone(),
            split: u.split,
            features,
            words,
            phones,
        });
    }
    let mut inv = corpus.inventory.to_json();
    inv.push('\n');
    wsmf::write_atomic(&dir.join("inventory.json"), inv.as_bytes())?;
    let manifest = Manifest {
        modalities: corpus.modalities.clone(),
        speakers: Some(corpus.speakers.iter().cloned().collect()),
        utterances: entries,
        inventory: PathBuf::from("inventory.json"),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let path = dir.join("manifest.json");
    wsmf::write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

/// Generate and write; returns the in-memory corpus.
pub fn generate_corpus(cfg: &SynthConfig, dir: &Path) -> Result<Corpus> {
    let synth = generate(cfg)?;
    write_corpus(&synth.corpus, dir)?;
    Ok(synth.corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleContrast {
    pub phones: (String, String),
    pub features: Vec<String>,
    pub audio: bool,
    pub visual: bool,
    pub audiovisual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub contrasts: Vec<OracleContrast>,
}

impl OracleReport {
    pub fn visually_separable(&self, p: &str, q: &str) -> Option<bool> {
        let key = crate::corpus::unordered(p, q);
        self.contrasts
            .iter()
            .find(|c| crate::corpus::unordered(&c.phones.0, &c.phones.1) == key)
            .map(|c| c.visual)
    }
}

/// Which contrasts each modality can separate by construction.
pub fn oracle_report(cfg: &SynthConfig) -> Result<OracleReport> {
    let classes = visual_classes(&cfg.inventory)?;
    let contrasts = cfg
        .inventory
        .contrasts()
        .into_iter()
        .map(|(p, q)| {
            let visual = classes[&p] != classes[&q];
            OracleContrast {
                features: cfg.inventory.features_of(&p, &q).into_iter().map(String::from).collect(),
                phones: (p, q),
                audio: true,
                visual,
                audiovisual: true,
            }
        })
        .collect();
    Ok(OracleReport { contrasts })
}
