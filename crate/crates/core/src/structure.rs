//! Structural analyses of embeddings: feature parallelism and the McGurk
//! mismatch experiment.

use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexMap;
use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::abx::{enumerate_cell, score_views};
use crate::archive::EmbeddingArchive;
use crate::corpus::{Corpus, PhoneInventory};
use crate::error::{Error, Result};
use crate::features::{cubic_resample, FeatureSeq, ModalityMask, CANONICAL_FPS};
use crate::network::Network;
use crate::pairing::{audio_visual, cosine_similarity};
use crate::prep::PreparedCorpus;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct PhoneCentroids {
    pub centroids: BTreeMap<String, Array1<f64>>,
    pub token_counts: BTreeMap<String, usize>,
    /// Inventory phones without any token.
    pub missing: Vec<String>,
}

/// Token-balanced mean embedding per phone: frames are averaged within a
/// token, then tokens are averaged with equal weight.
pub fn phone_centroids(archive: &EmbeddingArchive, corpus: &Corpus) -> Result<PhoneCentroids> {
    let mut sums: BTreeMap<String, (Array1<f64>, usize)> = BTreeMap::new();
    let dim = archive.dim();
    for u in &corpus.utterances {
        for seg in &u.phones {
            let frames = archive.span(&u.id, seg.start, seg.end)?;
            let mean = frames.mean_axis(ndarray::Axis(0)).expect("non-empty span");
            let e = sums.entry(seg.label.clone()).or_insert_with(|| (Array1::zeros(dim), 0));
            e.0 += &mean;
            e.1 += 1;
        }
    }
    let missing = corpus
        .inventory
        .phones
        .iter()
        .filter(|p| !sums.contains_key(*p))
        .cloned()
        .collect();
    let token_counts = sums.iter().map(|(k, v)| (k.clone(), v.1)).collect();
    let centroids = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    Ok(PhoneCentroids {
        centroids,
        token_counts,
        missing,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceVector {
    pub from: String,
    pub to: String,
    pub vector: Array1<f64>,
    pub zero: bool,
}

/// For each opposition `(p, q)` of each feature, `centroid(q) - centroid(p)`.
pub fn feature_difference_vectors(centroids: &PhoneCentroids, inventory: &PhoneInventory) -> IndexMap<String, Vec<DifferenceVector>> {
    let mut out = IndexMap::new();
    for (feature, pairs) in &inventory.features {
        let vs: Vec<DifferenceVector> = pairs
            .iter()
            .filter_map(|(p, q)| {
                let (cp, cq) = (centroids.centroids.get(p)?, centroids.centroids.get(q)?);
                let vector = cq - cp;
                let zero = vector.iter().all(|&v| v == 0.0);
                Some(DifferenceVector {
                    from: p.clone(),
                    to: q.clone(),
                    vector,
                    zero,
                })
            })
            .collect();
        out.insert(feature.clone(), vs);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureParallelism {
    pub feature: String,
    pub score: f64,
    pub vectors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelismReport {
    pub features: Vec<FeatureParallelism>,
    /// Features with fewer than two usable vectors.
    pub excluded: Vec<String>,
}

impl ParallelismReport {
    pub fn score(&self, feature: &str) -> Option<f64> {
        self.features.iter().find(|f| f.feature == feature).map(|f| f.score)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,score,vectors\n");
        for f in &self.features {
            out.push_str(&format!("{},{},{}\n", f.feature, f.score, f.vectors));
        }
        out
    }
}

/// Probability that a same-feature cosine exceeds a cross-feature cosine,
/// ties counting one half.
pub fn parallelism_score(vectors: &IndexMap<String, Vec<Array1<f64>>>) -> Result<ParallelismReport> {
    let usable: IndexMap<&String, Vec<&Array1<f64>>> = vectors
        .iter()
        .map(|(f, vs)| (f, vs.iter().filter(|v| v.iter().any(|&x| x != 0.0)).collect()))
        .collect();
    if usable.values().filter(|v| !v.is_empty()).count() < 2 {
        return Err(Error::InsufficientVectors("parallelism needs vectors from at least two features".into()));
    }
    let cos = |a: &Array1<f64>, b: &Array1<f64>| cosine_similarity(a.as_slice().unwrap(), b.as_slice().unwrap());
    let mut features = Vec::new();
    let mut excluded = Vec::new();
    for (f, vs) in &usable {
        if vs.len() < 2 {
            excluded.push((*f).clone());
            continue;
        }
        let mut same = Vec::new();
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                same.push(cos(vs[i], vs[j]));
            }
        }
        let mut cross = Vec::new();
        for (g, ws) in &usable {
            if g == f {
                continue;
            }
            // the sign of a cross-feature cosine only reflects which phone of
            // each opposition is listed first, so both signs enter
            for v in vs {
                for w in ws {
                    let c = cos(v, w);
                    cross.push(c);
                    cross.push(-c);
                }
            }
        }
        if cross.is_empty() {
            excluded.push((*f).clone());
            continue;
        }
        cross.sort_by(|a, b| a.total_cmp(b));
        let mut wins = 0.0;
        for s in &same {
            let below = cross.partition_point(|d| d < s);
            let not_above = cross.partition_point(|d| d <= s);
            wins += below as f64 + 0.5 * (not_above - below) as f64;
        }
        features.push(FeatureParallelism {
            feature: (*f).clone(),
            score: wins / (same.len() * cross.len()) as f64,
            vectors: vs.len(),
        });
    }
    Ok(ParallelismReport { features, excluded })
}

/// Parallelism of an embedding archive over the phones of `corpus`.
pub fn archive_parallelism(archive: &EmbeddingArchive, corpus: &Corpus) -> Result<ParallelismReport> {
    let centroids = phone_centroids(archive, corpus)?;
    let diffs = feature_difference_vectors(&centroids, &corpus.inventory);
    let vectors = diffs
        .into_iter()
        .map(|(f, vs)| (f, vs.into_iter().map(|d| d.vector).collect()))
        .collect();
    parallelism_score(&vectors)
}

// ---------------------------------------------------------------------------
// McGurk

/// One phone occurrence: utterance index into a prepared corpus and frame span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PhoneSpan {
    utt: usize,
    start: usize,
    end: usize,
}

fn phone_spans(prepared: &PreparedCorpus, phone: &str, keep: impl Fn(&str) -> bool) -> BTreeMap<String, Vec<PhoneSpan>> {
    let mut out: BTreeMap<String, Vec<PhoneSpan>> = BTreeMap::new();
    for (i, u) in prepared.corpus.utterances.iter().enumerate() {
        if !keep(&u.speaker) {
            continue;
        }
        for seg in u.phones.iter().filter(|s| s.label == phone) {
            out.entry(u.speaker.clone()).or_default().push(PhoneSpan {
                utt: i,
                start: seg.start,
                end: seg.end,
            });
        }
    }
    out
}

/// Mean of the held-out speakers' preprocessed visual tokens of `phone`,
/// each resampled to `target_len` frames.
pub fn generic_visual_template(prepared: &PreparedCorpus, phone: &str, speakers: &BTreeSet<String>, target_len: usize) -> Result<FeatureSeq> {
    let (_, v) = audio_visual(&prepared.layout)?;
    let spans: Vec<PhoneSpan> = phone_spans(prepared, phone, |s| speakers.contains(s)).into_values().flatten().collect();
    if spans.is_empty() {
        return Err(Error::NoHeldOutTokens(phone.to_string()));
    }
    let mut acc: Option<Array2<f64>> = None;
    for sp in &spans {
        let view = prepared.modality_view(sp.utt, v, sp.start, sp.end);
        let seq = FeatureSeq::new(view.to_owned(), CANONICAL_FPS)?;
        let r = cubic_resample(&seq, target_len).data;
        match acc.as_mut() {
            Some(a) => *a += &r,
            None => acc = Some(r),
        }
    }
    let mean = acc.unwrap() / spans.len() as f64;
    FeatureSeq::new(mean, CANONICAL_FPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VisualSource {
    /// Mean held-out template of the variant phone.
    #[default]
    Template,
    /// The token's own visual frames (self-consistency check).
    OwnSpan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McGurkConfig {
    pub audio_phone: String,
    pub competitor: String,
    pub variants: Vec<String>,
    pub heldout_speakers: BTreeSet<String>,
    pub budget: usize,
    pub visual_source: VisualSource,
}

impl Default for McGurkConfig {
    fn default() -> Self {
        Self {
            audio_phone: "b".into(),
            competitor: "d".into(),
            variants: vec!["b".into(), "p".into(), "g".into()],
            heldout_speakers: BTreeSet::new(),
            budget: crate::abx::DEFAULT_BUDGET,
            visual_source: VisualSource::Template,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McGurkVariant {
    pub visual: String,
    pub accuracy: f64,
    pub triplets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McGurkReport {
    pub audio_phone: String,
    pub competitor: String,
    pub variants: Vec<McGurkVariant>,
}

impl McGurkReport {
    pub fn accuracy(&self, visual: &str) -> Option<f64> {
        self.variants.iter().find(|v| v.visual == visual).map(|v| v.accuracy)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn embed_frames(net: &Network<f32>, prepared: &PreparedCorpus, frames: &Array2<f64>) -> Result<Array2<f64>> {
    let mask = ModalityMask::keep_all(prepared.layout.num_modalities());
    let x = prepared.stacked_input::<f32>(frames, &mask);
    Ok(net.forward(x.view())?.mapv(f64::from))
}

/// Within-speaker ABX between two stimulus sets, both category orders.
fn two_set_abx(a_sets: &BTreeMap<String, Vec<Array2<f64>>>, b_sets: &BTreeMap<String, Vec<Array2<f64>>>, budget: usize, rng: &mut Rng) -> (f64, usize) {
    let (mut sum, mut n) = (0.0, 0);
    for (spk, a) in a_sets {
        let Some(b) = b_sets.get(spk) else { continue };
        for (first, second) in [(a, b), (b, a)] {
            for (ia, ib, ix) in enumerate_cell(first.len(), second.len(), first.len(), true, budget, rng) {
                sum += score_views(first[ia].view(), second[ib].view(), first[ix].view());
                n += 1;
            }
        }
    }
    (if n > 0 { sum / n as f64 } else { f64::NAN }, n)
}

/// ABX accuracy between audio-phone tokens carrying a substituted visual
/// stream and unmodified competitor tokens, for each visual variant.
pub fn mcgurk_eval(net: &Network<f32>, prepared: &PreparedCorpus, cfg: &McGurkConfig, rng: &mut Rng) -> Result<McGurkReport> {
    if cfg.variants.is_empty() {
        return Err(Error::InvalidConfig("McGurk evaluation needs at least one visual variant".into()));
    }
    let (_, v) = audio_visual(&prepared.layout)?;
    let v_range = prepared
        .layout
        .ranges()
        .into_iter()
        .find(|(m, _)| *m == v)
        .map(|(_, r)| r)
        .expect("visual block");
    let test_speaker = |s: &str| !cfg.heldout_speakers.contains(s);
    let audio_spans = phone_spans(prepared, &cfg.audio_phone, test_speaker);
    let comp_spans = phone_spans(prepared, &cfg.competitor, test_speaker);
    if audio_spans.is_empty() || comp_spans.is_empty() {
        return Err(Error::InsufficientVectors(format!(
            "no {} or {} tokens outside the held-out speakers",
            cfg.audio_phone, cfg.competitor
        )));
    }

    // unmodified embeddings, computed once per utterance
    let mut cache: BTreeMap<usize, Array2<f64>> = BTreeMap::new();
    let mut embed_utt = |utt: usize| -> Result<Array2<f64>> {
        if let Some(e) = cache.get(&utt) {
            return Ok(e.clone());
        }
        let e = embed_frames(net, prepared, prepared.frames(utt))?;
        cache.insert(utt, e.clone());
        Ok(e)
    };
    let span_rows = |e: &Array2<f64>, sp: &PhoneSpan| e.slice(s![sp.start..sp.end, ..]).to_owned();

    let mut competitors: BTreeMap<String, Vec<Array2<f64>>> = BTreeMap::new();
    for (spk, spans) in &comp_spans {
        for sp in spans {
            let e = embed_utt(sp.utt)?;
            competitors.entry(spk.clone()).or_default().push(span_rows(&e, sp));
        }
    }

    let mut variants = Vec::new();
    for variant in &cfg.variants {
        let mut templates: BTreeMap<usize, FeatureSeq> = BTreeMap::new();
        let mut stimuli: BTreeMap<String, Vec<Array2<f64>>> = BTreeMap::new();
        for (spk, spans) in &audio_spans {
            for sp in spans {
                let len = sp.end - sp.start;
                let visual: Array2<f64> = match cfg.visual_source {
                    VisualSource::OwnSpan => prepared.modality_view(sp.utt, v, sp.start, sp.end).to_owned(),
                    VisualSource::Template => {
                        if !templates.contains_key(&len) {
                            let t = generic_visual_template(prepared, variant, &cfg.heldout_speakers, len)?;
                            templates.insert(len, t);
                        }
                        templates[&len].data.clone()
                    }
                };
                let mut frames = prepared.frames(sp.utt).clone();
                frames.slice_mut(s![sp.start..sp.end, v_range.clone()]).assign(&visual);
                let e = embed_frames(net, prepared, &frames)?;
                stimuli.entry(spk.clone()).or_default().push(span_rows(&e, sp));
            }
        }
        let (accuracy, triplets) = two_set_abx(&stimuli, &competitors, cfg.budget, rng);
        variants.push(McGurkVariant {
            visual: variant.clone(),
            accuracy,
            triplets,
        });
    }
    Ok(McGurkReport {
        audio_phone: cfg.audio_phone.clone(),
        competitor: cfg.competitor.clone(),
        variants,
    })
}

/// Within-speaker phone-segment ABX between two phones of an archive, using
/// the same protocol as [`mcgurk_eval`].
pub fn phone_pair_abx(archive: &EmbeddingArchive, prepared: &PreparedCorpus, p: &str, q: &str, heldout: &BTreeSet<String>, budget: usize, rng: &mut Rng) -> Result<(f64, usize)> {
    let collect = |phone: &str| -> Result<BTreeMap<String, Vec<Array2<f64>>>> {
        let mut out: BTreeMap<String, Vec<Array2<f64>>> = BTreeMap::new();
        for (spk, spans) in phone_spans(prepared, phone, |s| !heldout.contains(s)) {
            for sp in spans {
                let id = &prepared.corpus.utterances[sp.utt].id;
                out.entry(spk.clone()).or_default().push(archive.span(id, sp.start, sp.end)?.to_owned());
            }
        }
        Ok(out)
    };
    Ok(two_set_abx(&collect(p)?, &collect(q)?, budget, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(entries: Vec<(&str, Vec<Array1<f64>>)>) -> IndexMap<String, Vec<Array1<f64>>> {
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    fn unit(dim: usize, k: usize) -> Array1<f64> {
        Array1::from_shape_fn(dim, |i| f64::from(u8::from(i == k)))
    }

    #[test]
    fn factorized_space_scores_one() {
        // centroid(phone) = feature-indicator vector, so each feature's
        // differences are the same unit vector
        let v = map(vec![
            ("Voice", vec![unit(3, 0), unit(3, 0), unit(3, 0)]),
            ("Round", vec![unit(3, 1), unit(3, 1)]),
            ("Nasal", vec![unit(3, 2), unit(3, 2)]),
        ]);
        let r = parallelism_score(&v).unwrap();
        assert!(r.features.iter().all(|f| f.score == 1.0));
        assert!(r.excluded.is_empty());
    }

    #[test]
    fn anti_collinear_scores_zero() {
        let v = map(vec![
            ("Voice", vec![unit(2, 0), -unit(2, 0)]),
            ("Round", vec![unit(2, 1), -unit(2, 1)]),
        ]);
        let r = parallelism_score(&v).unwrap();
        assert_eq!(r.score("Voice"), Some(0.0));
        assert_eq!(r.score("Round"), Some(0.0));
    }

    #[test]
    fn exclusions_and_errors() {
        let v = map(vec![
            ("Voice", vec![unit(2, 0), unit(2, 0)]),
            ("Round", vec![unit(2, 1)]),
            ("Zero", vec![Array1::zeros(2), Array1::zeros(2)]),
        ]);
        let r = parallelism_score(&v).unwrap();
        assert_eq!(r.features.len(), 1);
        assert_eq!(r.excluded, vec!["Round".to_string(), "Zero".to_string()]);
        let v = map(vec![("Voice", vec![unit(2, 0), unit(2, 1)])]);
        assert!(matches!(parallelism_score(&v), Err(Error::InsufficientVectors(_))));
    }

    pub(crate) fn random_draw(seed: u64) -> IndexMap<String, Vec<Array1<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        (0..8)
            .map(|f| {
                let vs = (0..4).map(|_| Array1::from_shape_simple_fn(39, || rng.sample::<f64, _>(normal))).collect();
                (format!("F{f}"), vs)
            })
            .collect()
    }

    #[test]
    fn random_vectors_score_near_half() {
        let mut total = 0.0;
        let mut n = 0;
        for seed in 0..200 {
            let r = parallelism_score(&random_draw(seed)).unwrap();
            for f in &r.features {
                total += f.score;
                n += 1;
            }
        }
        let mean = total / n as f64;
        assert!((mean - 0.5).abs() < 0.1, "{mean}");
    }

    #[test]
    fn difference_vector_orientation() {
        let mut inv = crate::corpus::PhoneInventory {
            phones: vec!["t".into(), "d".into(), "p".into()],
            features: IndexMap::new(),
            visual_features: vec![],
        };
        inv.features.insert("Voice".into(), vec![("t".into(), "d".into()), ("p".into(), "b".into())]);
        let c = PhoneCentroids {
            centroids: [("t", array![1.0, 0.0]), ("d", array![1.0, 1.0]), ("p", array![0.0, 0.0])]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            token_counts: BTreeMap::new(),
            missing: vec![],
        };
        let d = feature_difference_vectors(&c, &inv);
        assert_eq!(d["Voice"].len(), 1);
        assert_eq!(d["Voice"][0].vector, array![0.0, 1.0]);
        assert!(!d["Voice"][0].zero);
    }

    fn rotate(v: &IndexMap<String, Vec<Array1<f64>>>, q: &Array2<f64>, scale: f64) -> IndexMap<String, Vec<Array1<f64>>> {
        v.iter()
            .map(|(k, vs)| (k.clone(), vs.iter().map(|x| q.dot(x) * scale).collect()))
            .collect()
    }

    proptest! {
        #[test]
        fn invariances(seed in 0u64..1000, scale in 0.1f64..10.0) {
            let v = random_draw(seed);
            let base = parallelism_score(&v).unwrap();
            // seeded random orthogonal transform
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let raw = nalgebra::DMatrix::<f64>::from_fn(39, 39, |_, _| rng.sample(rand_distr::StandardNormal));
            let q = raw.qr().q();
            let q = Array2::from_shape_fn((39, 39), |(i, j)| q[(i, j)]);
            let rotated = parallelism_score(&rotate(&v, &q, scale)).unwrap();
            for (a, b) in base.features.iter().zip(&rotated.features) {
                prop_assert!((a.score - b.score).abs() < 1e-12);
            }
            let mut flipped = v.clone();
            for x in flipped.get_mut("F0").unwrap() {
                *x = -&*x;
            }
            let f = parallelism_score(&flipped).unwrap();
            prop_assert_eq!(f.score("F0"), base.score("F0"));
        }
    }
}
