//! Siamese training examples from word-level same/different information.
//!
//! Same-word token pairs are aligned with DTW on the reference modality,
//! different-word pairs along the diagonal. Each aligned frame pair becomes a
//! stacked input pair, masked per branch by the drawn modality combination.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::WordToken;
use crate::error::{Error, Result};
use crate::features::{FeatureSeq, ModalityLayout, ModalityMask};
use crate::prep::PreparedCorpus;
use crate::rng::Rng;

// ---------------------------------------------------------------------------
// frame distances and alignment

/// Cosine similarity; a zero-norm vector has similarity 0 with anything.
///
/// Computed as `dot / sqrt(|a|^2 |b|^2)` so identical vectors give exactly 1.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine_similarity(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameMetric {
    #[default]
    Cosine,
    Euclidean,
}

impl FrameMetric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            FrameMetric::Cosine => cosine_distance(a, b),
            FrameMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }
}

/// Pairwise frame cost matrix (`Ta x Tb`).
pub fn cost_matrix(a: ArrayView2<f64>, b: ArrayView2<f64>, metric: FrameMetric) -> Array2<f64> {
    let rows_a: Vec<Vec<f64>> = a.outer_iter().map(|r| r.to_vec()).collect();
    let rows_b: Vec<Vec<f64>> = b.outer_iter().map(|r| r.to_vec()).collect();
    Array2::from_shape_fn((rows_a.len(), rows_b.len()), |(i, j)| metric.distance(&rows_a[i], &rows_b[j]))
}

/// Monotone alignment between two sequences as `(i, j)` index pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPath {
    pub steps: Vec<(usize, usize)>,
}

impl AlignmentPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Sum of `cost[i, j]` along the path.
    pub fn cost(&self, cost: &Array2<f64>) -> f64 {
        self.steps.iter().map(|&(i, j)| cost[[i, j]]).sum()
    }

    /// Whether this is a valid full path for sequences of the given lengths.
    pub fn is_valid(&self, len_a: usize, len_b: usize) -> bool {
        let Some(&first) = self.steps.first() else {
            return false;
        };
        let last = *self.steps.last().unwrap();
        first == (0, 0)
            && last == (len_a - 1, len_b - 1)
            && self.steps.windows(2).all(|w| {
                let di = w[1].0 as isize - w[0].0 as isize;
                let dj = w[1].1 as isize - w[0].1 as isize;
                matches!((di, dj), (1, 0) | (0, 1) | (1, 1))
            })
    }
}

/// Minimum-total-cost path under steps (1,1), (1,0), (0,1), preferring them
/// in that order on ties. Returns the path and its total cost.
pub fn dtw_from_costs(cost: &Array2<f64>) -> (AlignmentPath, f64) {
    let (n, m) = cost.dim();
    assert!(n > 0 && m > 0, "DTW needs non-empty sequences");
    let mut acc = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[[i - 1, j - 1]] } else { f64::INFINITY };
                let up = if i > 0 { acc[[i - 1, j]] } else { f64::INFINITY };
                let left = if j > 0 { acc[[i, j - 1]] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[[i, j]] = best + cost[[i, j]];
        }
    }
    let mut steps = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        let diag = if i > 0 && j > 0 { acc[[i - 1, j - 1]] } else { f64::INFINITY };
        let up = if i > 0 { acc[[i - 1, j]] } else { f64::INFINITY };
        let left = if j > 0 { acc[[i, j - 1]] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        steps.push((i, j));
    }
    steps.reverse();
    (AlignmentPath { steps }, acc[[n - 1, m - 1]])
}

/// DTW alignment of two sequences under `metric`.
pub fn dtw_align(seq_a: &FeatureSeq, seq_b: &FeatureSeq, metric: FrameMetric) -> AlignmentPath {
    dtw_views(seq_a.data.view(), seq_b.data.view(), metric).0
}

pub fn dtw_views(a: ArrayView2<f64>, b: ArrayView2<f64>, metric: FrameMetric) -> (AlignmentPath, f64) {
    dtw_from_costs(&cost_matrix(a, b, metric))
}

/// `round(t * (len - 1) / (L - 1))`, rounding halves up, in exact integer arithmetic.
fn scaled_round(t: usize, len: usize, steps: usize) -> usize {
    if steps == 0 {
        return 0;
    }
    (2 * t * (len - 1) + steps) / (2 * steps)
}

/// Linear alignment along the diagonal, `max(len_a, len_b)` steps long.
pub fn diagonal_align(len_a: usize, len_b: usize) -> AlignmentPath {
    assert!(len_a >= 1 && len_b >= 1, "diagonal alignment needs positive lengths");
    let l = len_a.max(len_b);
    let steps = (0..l)
        .map(|t| (scaled_round(t, len_a, l - 1), scaled_round(t, len_b, l - 1)))
        .collect();
    AlignmentPath { steps }
}

// ---------------------------------------------------------------------------
// pair sampling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerConstraint {
    #[default]
    Any,
    Same,
    Different,
}

/// Restrictions on which token pairs are eligible.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairConstraints {
    pub speakers: SpeakerConstraint,
    /// When set, only tokens whose label is in this set are used.
    pub labels: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordPair {
    pub token_a: WordToken,
    pub token_b: WordToken,
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSample {
    pub pairs: Vec<WordPair>,
    /// Requested same pairs that could not be drawn.
    pub same_shortfall: usize,
    pub diff_shortfall: usize,
}

/// Draw `n_same` same-word and `n_diff` different-word pairs uniformly
/// without replacement. Same-word pairs come first.
pub fn sample_word_pairs(
    tokens: &[WordToken],
    n_same: usize,
    n_diff: usize,
    rng: &mut Rng,
    constraints: &PairConstraints,
) -> Result<PairSample> {
    let eligible: Vec<usize> = (0..tokens.len())
        .filter(|&i| constraints.labels.as_ref().map_or(true, |l| l.contains(&tokens[i].label)))
        .collect();
    let speaker_ok = |a: &WordToken, b: &WordToken| match constraints.speakers {
        SpeakerConstraint::Any => true,
        SpeakerConstraint::Same => a.speaker == b.speaker,
        SpeakerConstraint::Different => a.speaker != b.speaker,
    };
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for (k, &i) in eligible.iter().enumerate() {
        for &j in &eligible[k + 1..] {
            let (a, b) = (&tokens[i], &tokens[j]);
            if !speaker_ok(a, b) {
                continue;
            }
            if a.label == b.label {
                same.push((i as u32, j as u32));
            } else {
                diff.push((i as u32, j as u32));
            }
        }
    }
    if n_same > 0 && same.is_empty() {
        return Err(Error::NoSamePairsAvailable);
    }
    let mut draw = |universe: &[(u32, u32)], n: usize, is_same: bool, out: &mut Vec<WordPair>| -> usize {
        let k = n.min(universe.len());
        for idx in sample(rng, universe.len(), k).into_iter() {
            let (i, j) = universe[idx];
            out.push(WordPair {
                token_a: tokens[i as usize].clone(),
                token_b: tokens[j as usize].clone(),
                same: is_same,
            });
        }
        n - k
    };
    let mut pairs = Vec::with_capacity(n_same + n_diff);
    let same_shortfall = draw(&same, n_same, true, &mut pairs);
    let diff_shortfall = draw(&diff, n_diff, false, &mut pairs);
    Ok(PairSample {
        pairs,
        same_shortfall,
        diff_shortfall,
    })
}

/// Audit listing: `utt_a span_a utt_b span_b same`, spans as `start:end`.
pub fn pairs_to_tsv(pairs: &[WordPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let _ = writeln!(
            out,
            "{}\t{}:{}\t{}\t{}:{}\t{}",
            p.token_a.utterance,
            p.token_a.start,
            p.token_a.end,
            p.token_b.utterance,
            p.token_b.start,
            p.token_b.end,
            u8::from(p.same)
        );
    }
    out
}

// ---------------------------------------------------------------------------
// modality combinations

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityCombo {
    pub branch1: ModalityMask,
    pub branch2: ModalityMask,
}

/// How masks are chosen for each training pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ComboMode {
    /// Both branches always see the same fixed mask.
    Mono(ModalityMask),
    /// One of the listed combinations, uniformly at random.
    Multi(Vec<ModalityCombo>),
}

impl ComboMode {
    /// The four multi-task combinations: (AV,AV), (A,A), (V,V), (A,V).
    pub fn multitask(layout: &ModalityLayout) -> Result<Self> {
        let (a, v) = audio_visual(layout)?;
        let n = layout.num_modalities();
        let av = ModalityMask::keep_all(n);
        let a = ModalityMask::only(a, n);
        let v = ModalityMask::only(v, n);
        let combo = |x: &ModalityMask, y: &ModalityMask| ModalityCombo {
            branch1: x.clone(),
            branch2: y.clone(),
        };
        Ok(ComboMode::Multi(vec![
            combo(&av, &av),
            combo(&a, &a),
            combo(&v, &v),
            combo(&a, &v),
        ]))
    }
}

/// Indices of the audio and visual modalities in a two-modality layout.
pub fn audio_visual(layout: &ModalityLayout) -> Result<(usize, usize)> {
    if layout.num_modalities() != 2 {
        return Err(Error::InvalidConfig(format!(
            "audio-visual combinations need exactly two modalities, found {}",
            layout.num_modalities()
        )));
    }
    let a = layout.modality_index("audio").unwrap_or(0);
    let v = layout.modality_index("visual").unwrap_or(1 - a);
    Ok((a, v))
}

impl ComboMode {
    /// The combinations this mode draws from; a mono mode has exactly one.
    pub fn combos(&self) -> Vec<ModalityCombo> {
        match self {
            ComboMode::Mono(mask) => vec![ModalityCombo {
                branch1: mask.clone(),
                branch2: mask.clone(),
            }],
            ComboMode::Multi(combos) => combos.clone(),
        }
    }
}

/// Index into `mode.combos()`; mono modes consume no randomness.
pub fn draw_combo_index(mode: &ComboMode, rng: &mut Rng) -> usize {
    match mode {
        ComboMode::Mono(_) => 0,
        ComboMode::Multi(combos) => rng.gen_range(0..combos.len()),
    }
}

pub fn draw_combo(mode: &ComboMode, rng: &mut Rng) -> ModalityCombo {
    let i = draw_combo_index(mode, rng);
    match mode {
        ComboMode::Mono(mask) => ModalityCombo {
            branch1: mask.clone(),
            branch2: mask.clone(),
        },
        ComboMode::Multi(combos) => combos[i].clone(),
    }
}

// ---------------------------------------------------------------------------
// realization

/// One aligned frame pair: stacked inputs for both branches and the label.
#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub y: u8,
    pub combo: ModalityCombo,
}

/// A frame pair by reference into a prepared corpus; materialised per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramePair {
    pub utt_a: u32,
    pub frame_a: u32,
    pub utt_b: u32,
    pub frame_b: u32,
    pub same: bool,
    /// Index into the combo list the pair was realised with.
    pub combo: u8,
}

/// Utterance-level frame correspondences for a word pair.
pub fn align_pair(pair: &WordPair, prepared: &PreparedCorpus) -> Result<(usize, usize, Vec<(usize, usize)>)> {
    let ua = prepared
        .utterance_index(&pair.token_a.utterance)
        .ok_or_else(|| Error::MissingEmbedding(pair.token_a.utterance.clone()))?;
    let ub = prepared
        .utterance_index(&pair.token_b.utterance)
        .ok_or_else(|| Error::MissingEmbedding(pair.token_b.utterance.clone()))?;
    let (a, b) = (&pair.token_a, &pair.token_b);
    let path = if pair.same {
        let m = prepared.reference_modality();
        let va = prepared.modality_view(ua, m, a.start, a.end);
        let vb = prepared.modality_view(ub, m, b.start, b.end);
        dtw_views(va, vb, FrameMetric::Cosine).0
    } else {
        diagonal_align(a.len(), b.len())
    };
    let frames = path
        .steps
        .into_iter()
        .map(|(i, j)| (a.start + i, b.start + j))
        .collect();
    Ok((ua, ub, frames))
}

impl WordToken {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Materialise all aligned frame pairs of `pair` under `combo`.
pub fn realize_pair(pair: &WordPair, prepared: &PreparedCorpus, combo: &ModalityCombo) -> Result<Vec<PairExample>> {
    let (ua, ub, frames) = align_pair(pair, prepared)?;
    let dim = prepared.input_dim();
    let fa = prepared.frames(ua);
    let fb = prepared.frames(ub);
    Ok(frames
        .into_iter()
        .map(|(i, j)| {
            let mut x1 = vec![0.0; dim];
            let mut x2 = vec![0.0; dim];
            PreparedCorpus::write_stacked(&prepared.layout, prepared.window, fa, i, &combo.branch1, &mut x1);
            PreparedCorpus::write_stacked(&prepared.layout, prepared.window, fb, j, &combo.branch2, &mut x2);
            PairExample {
                x1,
                x2,
                y: u8::from(pair.same),
                combo: combo.clone(),
            }
        })
        .collect())
}
