//! Multimodal corpora: manifest loading, validation, and token extraction.
//!
//! A manifest is a JSON file naming the modalities, the utterances (with
//! per-modality WSMF feature files and word/phone TSV tiers) and the phone
//! inventory. All paths are relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{canonical_len, FeatureSeq};
use crate::wsmf;

/// A feature stream declared by the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Modality {
    pub name: String,
    pub dim: usize,
    pub fps: f64,
}

/// A labelled `[start, end)` span at the canonical frame rate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(label: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            label: label.into(),
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which side of the train/test partition an utterance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: String,
    pub split: Split,
    pub features: BTreeMap<String, FeatureSeq>,
    pub words: Vec<Segment>,
    pub phones: Vec<Segment>,
}

impl UtteranceRecord {
    /// Frame count at the canonical rate, taken from the first modality.
    pub fn num_frames(&self, modalities: &[Modality]) -> usize {
        modalities
            .iter()
            .find_map(|m| self.features.get(&m.name).map(|f| canonical_len(f.len(), f.fps)))
            .unwrap_or(0)
    }
}

/// Phone set plus minimal oppositions per phonological feature.
///
/// Pairs are ordered: the first phone is the feature-negative pole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhoneInventory {
    pub phones: Vec<String>,
    pub features: IndexMap<String, Vec<(String, String)>>,
    #[serde(default)]
    pub visual_features: Vec<String>,
}

impl PhoneInventory {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::MalformedManifest(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("inventory serializes")
    }

    /// Phones that take part in at least one opposition.
    pub fn contrastive_phones(&self) -> BTreeSet<&str> {
        self.features
            .values()
            .flatten()
            .flat_map(|(p, q)| [p.as_str(), q.as_str()])
            .collect()
    }

    /// Distinct unordered contrasts across all features, in first-seen order,
    /// each stored as listed (negative pole first).
    pub fn contrasts(&self) -> Vec<(String, String)> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for pairs in self.features.values() {
            for (p, q) in pairs {
                if seen.insert(unordered(p, q)) {
                    out.push((p.clone(), q.clone()));
                }
            }
        }
        out
    }

    /// Features whose opposition list contains the unordered pair `{p, q}`.
    pub fn features_of(&self, p: &str, q: &str) -> Vec<&str> {
        let key = unordered(p, q);
        self.features
            .iter()
            .filter(|(_, pairs)| pairs.iter().any(|(a, b)| unordered(a, b) == key))
            .map(|(f, _)| f.as_str())
            .collect()
    }

    pub fn is_visual(&self, feature: &str) -> bool {
        self.visual_features.iter().any(|f| f == feature)
    }

    /// Violations of the inventory invariants.
    pub fn problems(&self) -> Vec<String> {
        let phones: BTreeSet<&str> = self.phones.iter().map(String::as_str).collect();
        let mut out = Vec::new();
        for (feature, pairs) in &self.features {
            let mut seen = BTreeSet::new();
            for (p, q) in pairs {
                for x in [p, q] {
                    if !phones.contains(x.as_str()) {
                        out.push(format!("feature {feature}: phone {x} not in inventory"));
                    }
                }
                if p == q {
                    out.push(format!("feature {feature}: degenerate pair {p}-{q}"));
                }
                if !seen.insert((p.as_str(), q.as_str())) {
                    out.push(format!("feature {feature}: duplicate pair {p}-{q}"));
                }
            }
        }
        for f in &self.visual_features {
            if !self.features.contains_key(f) {
                out.push(format!("visual feature {f} is not a declared feature"));
            }
        }
        out
    }
}

/// Canonical key for an unordered phone pair.
pub fn unordered(p: &str, q: &str) -> (String, String) {
    if p <= q {
        (p.to_string(), q.to_string())
    } else {
        (q.to_string(), p.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<UtteranceRecord>,
    pub speakers: BTreeSet<String>,
    pub modalities: Vec<Modality>,
    pub inventory: PhoneInventory,
}

impl Corpus {
    pub fn modality(&self, name: &str) -> Option<&Modality> {
        self.modalities.iter().find(|m| m.name == name)
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    pub fn utterance(&self, id: &str) -> Option<&UtteranceRecord> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// A corpus restricted to utterances matching `keep`, sharing everything else.
    pub fn filtered(&self, keep: impl Fn(&UtteranceRecord) -> bool) -> Corpus {
        Corpus {
            utterances: self.utterances.iter().filter(|u| keep(u)).cloned().collect(),
            speakers: self.speakers.clone(),
            modalities: self.modalities.clone(),
            inventory: self.inventory.clone(),
        }
    }

    pub fn split(&self, split: Split) -> Corpus {
        self.filtered(|u| u.split == split)
    }
}

// ---------------------------------------------------------------------------
// manifest files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub modalities: Vec<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speakers: Option<Vec<String>>,
    pub utterances: Vec<ManifestUtterance>,
    pub inventory: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestUtterance {
    pub id: String,
    pub speaker: String,
    #[serde(default)]
    pub split: Split,
    pub features: BTreeMap<String, PathBuf>,
    pub words: PathBuf,
    pub phones: PathBuf,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Parse a `label<TAB>start<TAB>end` annotation tier.
pub fn parse_tier(text: &str, origin: &Path) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |why: &str| {
            Error::MalformedManifest(format!("{}:{}: {why}", origin.display(), lineno + 1))
        };
        if cols.len() != 3 {
            return Err(bad("expected label<TAB>start<TAB>end"));
        }
        let start = cols[1].trim().parse::<usize>().map_err(|_| bad("bad start frame"))?;
        let end = cols[2].trim().parse::<usize>().map_err(|_| bad("bad end frame"))?;
        out.push(Segment::new(cols[0], start, end));
    }
    Ok(out)
}

pub fn format_tier(segments: &[Segment]) -> String {
    segments
        .iter()
        .map(|s| format!("{}\t{}\t{}\n", s.label, s.start, s.end))
        .collect()
}

/// Load and validate a corpus from its manifest.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let text = read_text(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::MalformedManifest(format!("{}: {e}", manifest_path.display())))?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let inventory = PhoneInventory::load(&root.join(&manifest.inventory))?;
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for mu in &manifest.utterances {
        let mut features = BTreeMap::new();
        for m in &manifest.modalities {
            let rel = mu.features.get(&m.name).ok_or_else(|| {
                Error::MalformedManifest(format!("utterance {} lacks modality {}", mu.id, m.name))
            })?;
            let path = root.join(rel);
            let data = wsmf::read(&path)?;
            if data.ncols() != m.dim {
                return Err(Error::DimensionMismatch {
                    context: format!("{} ({})", path.display(), m.name),
                    expected: m.dim,
                    got: data.ncols(),
                });
            }
            let seq = FeatureSeq::new(data, m.fps).map_err(|e| {
                Error::MalformedManifest(format!("{}: {e}", path.display()))
            })?;
            features.insert(m.name.clone(), seq);
        }
        let words_path = root.join(&mu.words);
        let phones_path = root.join(&mu.phones);
        utterances.push(UtteranceRecord {
            id: mu.id.clone(),
            speaker: mu.speaker.clone(),
            split: mu.split,
            features,
            words: parse_tier(&read_text(&words_path)?, &words_path)?,
            phones: parse_tier(&read_text(&phones_path)?, &phones_path)?,
        });
    }
    let speakers = match &manifest.speakers {
        Some(s) => s.iter().cloned().collect(),
        None => utterances.iter().map(|u| u.speaker.clone()).collect(),
    };
    let corpus = Corpus {
        utterances,
        speakers,
        modalities: manifest.modalities,
        inventory,
    };
    let report = validate_corpus(&corpus);
    if let Some(v) = report.violations.first() {
        return Err(Error::MalformedManifest(format!(
            "{} violation(s); first: {v}",
            report.violations.len()
        )));
    }
    Ok(corpus)
}

// ---------------------------------------------------------------------------
// validation

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub utterance: Option<String>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.utterance {
            Some(u) => write!(f, "{u}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
    pub utterances_per_speaker: BTreeMap<String, usize>,
    pub tokens_per_word: BTreeMap<String, usize>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn check_tier(tier: &str, segs: &[Segment], frames: usize, utt: &str, out: &mut Vec<Violation>) {
    let mut push = |message: String| {
        out.push(Violation {
            utterance: Some(utt.to_string()),
            message,
        })
    };
    for s in segs {
        if s.start >= s.end {
            push(format!("{tier} segment {} [{}, {}) is empty", s.label, s.start, s.end));
        }
        if s.end > frames {
            push(format!(
                "{tier} segment {} [{}, {}) ends beyond {frames} frames",
                s.label, s.start, s.end
            ));
        }
    }
    for w in segs.windows(2) {
        if w[1].start < w[0].start {
            push(format!(
                "{tier} segments {} [{}, {}) and {} [{}, {}) are not sorted",
                w[0].label, w[0].start, w[0].end, w[1].label, w[1].start, w[1].end
            ));
        } else if w[1].start < w[0].end {
            push(format!(
                "{tier} segments {} [{}, {}) and {} [{}, {}) overlap",
                w[0].label, w[0].start, w[0].end, w[1].label, w[1].start, w[1].end
            ));
        }
    }
}

/// Check every corpus invariant; violations are collected, never raised.
pub fn validate_corpus(corpus: &Corpus) -> ValidationReport {
    let mut report = ValidationReport::default();
    for s in &corpus.speakers {
        report.utterances_per_speaker.insert(s.clone(), 0);
    }
    for p in corpus.inventory.problems() {
        report.violations.push(Violation {
            utterance: None,
            message: format!("inventory: {p}"),
        });
    }
    let mut ids = BTreeSet::new();
    for u in &corpus.utterances {
        let mut push = |message: String| {
            report.violations.push(Violation {
                utterance: Some(u.id.clone()),
                message,
            })
        };
        if !ids.insert(u.id.as_str()) {
            push("duplicate utterance id".into());
        }
        if !corpus.speakers.contains(&u.speaker) {
            push(format!("unknown speaker {}", u.speaker));
        } else {
            *report.utterances_per_speaker.get_mut(&u.speaker).unwrap() += 1;
        }
        let frames = u.num_frames(&corpus.modalities);
        for m in &corpus.modalities {
            match u.features.get(&m.name) {
                None => push(format!("missing modality {}", m.name)),
                Some(f) => {
                    if f.dim() != m.dim {
                        push(format!("modality {} has dim {}, declared {}", m.name, f.dim(), m.dim));
                    }
                    if f.is_empty() {
                        push(format!("modality {} has no frames", m.name));
                    }
                    if f.data.iter().any(|v| !v.is_finite()) {
                        push(format!("modality {} has non-finite values", m.name));
                    }
                    let len = canonical_len(f.len(), f.fps);
                    let slack = (crate::features::CANONICAL_FPS / f.fps).ceil() as usize;
                    if len.abs_diff(frames) > slack.saturating_sub(1) {
                        push(format!(
                            "modality {} spans {len} canonical frames, utterance has {frames}",
                            m.name
                        ));
                    }
                }
            }
        }
        let mut local = Vec::new();
        check_tier("word", &u.words, frames, &u.id, &mut local);
        check_tier("phone", &u.phones, frames, &u.id, &mut local);
        report.violations.extend(local);
        for w in &u.words {
            *report.tokens_per_word.entry(w.label.clone()).or_insert(0) += 1;
        }
    }
    for (s, n) in &report.utterances_per_speaker {
        if *n == 0 {
            report.warnings.push(format!("speaker {s} has no utterances"));
        }
    }
    report
}

// ---------------------------------------------------------------------------
// tokens

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WordToken {
    pub label: String,
    pub utterance: String,
    pub speaker: String,
    pub start: usize,
    pub end: usize,
}

/// One token per word segment, in corpus order.
pub fn word_tokens(corpus: &Corpus) -> Vec<WordToken> {
    corpus
        .utterances
        .iter()
        .flat_map(|u| {
            u.words.iter().map(move |w| WordToken {
                label: w.label.clone(),
                utterance: u.id.clone(),
                speaker: u.speaker.clone(),
                start: w.start,
                end: w.end,
            })
        })
        .collect()
}

/// Token positions grouped by word label.
pub fn index_by_label(tokens: &[WordToken]) -> BTreeMap<String, Vec<usize>> {
    let mut idx: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, t) in tokens.iter().enumerate() {
        idx.entry(t.label.clone()).or_default().push(i);
    }
    idx
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TriphoneToken {
    pub left: String,
    pub center: String,
    pub right: String,
    pub speaker: String,
    pub utterance: String,
    pub start: usize,
    pub end: usize,
    /// Span of the central phone alone.
    pub center_start: usize,
    pub center_end: usize,
}

impl TriphoneToken {
    pub fn context(&self) -> (&str, &str) {
        (&self.left, &self.right)
    }
}

/// Every window of three consecutive phones whose centre takes part in an
/// opposition of `inventory`.
pub fn triphone_tokens(corpus: &Corpus, inventory: &PhoneInventory) -> Vec<TriphoneToken> {
    let contrastive = inventory.contrastive_phones();
    let mut out = Vec::new();
    for u in &corpus.utterances {
        for w in u.phones.windows(3) {
            if !contrastive.contains(w[1].label.as_str()) {
                continue;
            }
            out.push(TriphoneToken {
                left: w[0].label.clone(),
                center: w[1].label.clone(),
                right: w[2].label.clone(),
                speaker: u.speaker.clone(),
                utterance: u.id.clone(),
                start: w[0].start,
                end: w[2].end,
                center_start: w[1].start,
                center_end: w[1].end,
            });
        }
    }
    out
}
