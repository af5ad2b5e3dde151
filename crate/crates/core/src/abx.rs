//! ABX minimal-pair discrimination on embedding sequences.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::archive::EmbeddingArchive;
use crate::corpus::{unordered, PhoneInventory, TriphoneToken};
use crate::error::{Error, Result};
use crate::pairing::{cost_matrix, FrameMetric};
use crate::rng::Rng;

pub const DEFAULT_BUDGET: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// All three stimuli from one speaker.
    Within,
    /// A and B from one speaker, X from another.
    Across,
}

impl Task {
    pub fn short(self) -> &'static str {
        match self {
            Task::Within => "WST",
            Task::Across => "AST",
        }
    }
}

/// Minimum over monotone paths of the mean frame cost along the path.
pub fn divergence_from_costs(cost: &Array2<f64>) -> f64 {
    let (n, m) = cost.dim();
    assert!(n > 0 && m > 0, "divergence needs non-empty sequences");
    // prev[i][j]: cheapest path to (i, j) using exactly k - 1 steps. Cells
    // are only read while that step count is reachable, so stale values
    // left by earlier steps are never used.
    let mut prev = vec![f64::INFINITY; n * m];
    let mut cur = vec![f64::INFINITY; n * m];
    let c = cost.as_standard_layout();
    let c = c.as_slice().expect("standard layout");
    prev[0] = c[0];
    let mut best = if n == 1 && m == 1 { c[0] } else { f64::INFINITY };
    for k in 2..=(n + m - 1) {
        for i in 0..n.min(k) {
            // j must satisfy max(i, j) + 1 <= k <= i + j + 1
            let j_lo = (k - 1).saturating_sub(i);
            let j_hi = (k - 1).min(m - 1);
            for j in j_lo..=j_hi {
                let mut b = f64::INFINITY;
                if i > 0 && j > 0 && k <= i + j {
                    b = b.min(prev[(i - 1) * m + j - 1]);
                }
                if i > 0 {
                    b = b.min(prev[(i - 1) * m + j]);
                }
                if j > 0 {
                    b = b.min(prev[i * m + j - 1]);
                }
                cur[i * m + j] = b + c[i * m + j];
            }
        }
        let end = cur[n * m - 1];
        if k >= n.max(m) && end.is_finite() {
            best = best.min(end / k as f64);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// DTW divergence between two embedding sequences under cosine frame distance.
pub fn divergence(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    divergence_from_costs(&cost_matrix(x, y, FrameMetric::Cosine))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbxTriplet {
    /// Indices into the token list the triplets were built from.
    pub a: usize,
    pub b: usize,
    pub x: usize,
    /// Centre phones of A and B.
    pub contrast: (String, String),
    pub task: Task,
}

/// `(a, b, x)` index triples of one cell, at most `budget` of them, sampled
/// uniformly when the full enumeration is larger. With `distinct_ax`, A and
/// X are drawn from one set and must differ.
pub fn enumerate_cell(n_a: usize, n_b: usize, n_x: usize, distinct_ax: bool, budget: usize, rng: &mut Rng) -> Vec<(usize, usize, usize)> {
    let x_choices = if distinct_ax { n_a.saturating_sub(1) } else { n_x };
    let total = n_a * x_choices * n_b;
    if total == 0 {
        return Vec::new();
    }
    let decode = |idx: usize| {
        let a = idx / (x_choices * n_b);
        let r = idx % (x_choices * n_b);
        let xi = r / n_b;
        let b = r % n_b;
        let x = if distinct_ax && xi >= a { xi + 1 } else { xi };
        (a, b, x)
    };
    if total <= budget {
        (0..total).map(decode).collect()
    } else {
        let mut picked = sample(rng, total, budget).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(decode).collect()
    }
}

/// Triplets for every ordered contrast of the inventory and every shared context.
pub fn build_triplets(tokens: &[TriphoneToken], inventory: &PhoneInventory, task: Task, budget: usize, rng: &mut Rng) -> Vec<AbxTriplet> {
    // (centre, left, right) -> speaker -> token indices
    let mut groups: BTreeMap<(&str, &str, &str), BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
    for (i, t) in tokens.iter().enumerate() {
        groups
            .entry((&t.center, &t.left, &t.right))
            .or_default()
            .entry(&t.speaker)
            .or_default()
            .push(i);
    }
    let mut contexts: BTreeMap<&str, Vec<(&str, &str)>> = BTreeMap::new();
    for &(c, l, r) in groups.keys() {
        contexts.entry(c).or_default().push((l, r));
    }
    let mut out = Vec::new();
    for (p, q) in inventory.contrasts() {
        for (pa, pb) in [(p.as_str(), q.as_str()), (q.as_str(), p.as_str())] {
            let Some(ctx_a) = contexts.get(pa) else { continue };
            for &(l, r) in ctx_a {
                let (Some(ga), Some(gb)) = (groups.get(&(pa, l, r)), groups.get(&(pb, l, r))) else {
                    continue;
                };
                for (&spk, a_toks) in ga {
                    let Some(b_toks) = gb.get(spk) else { continue };
                    let x_sets: Vec<&Vec<usize>> = match task {
                        Task::Within => vec![a_toks],
                        Task::Across => ga.iter().filter(|(s, _)| **s != spk).map(|(_, v)| v).collect(),
                    };
                    for x_toks in x_sets {
                        let cell = enumerate_cell(a_toks.len(), b_toks.len(), x_toks.len(), task == Task::Within, budget, rng);
                        out.extend(cell.into_iter().map(|(a, b, x)| AbxTriplet {
                            a: a_toks[a],
                            b: b_toks[b],
                            x: x_toks[x],
                            contrast: (pa.to_string(), pb.to_string()),
                            task,
                        }));
                    }
                }
            }
        }
    }
    out
}

/// 1 if A is closer to X than B is, 0 if farther, 0.5 on a tie.
pub fn score_views(a: ArrayView2<f64>, b: ArrayView2<f64>, x: ArrayView2<f64>) -> f64 {
    let dax = divergence(a, x);
    let dbx = divergence(b, x);
    if dax < dbx {
        1.0
    } else if dax > dbx {
        0.0
    } else {
        0.5
    }
}

pub fn score_triplet(t: &AbxTriplet, tokens: &[TriphoneToken], archive: &EmbeddingArchive) -> Result<f64> {
    let view = |i: usize| {
        let tok = &tokens[i];
        archive.span(&tok.utterance, tok.start, tok.end)
    };
    Ok(score_views(view(t.a)?, view(t.b)?, view(t.x)?))
}

/// Score triplets, computing each token-pair divergence once.
pub fn score_all(triplets: &[AbxTriplet], tokens: &[TriphoneToken], archive: &EmbeddingArchive) -> Result<Vec<f64>> {
    let view = |i: usize| {
        let tok = &tokens[i];
        archive.span(&tok.utterance, tok.start, tok.end)
    };
    let mut memo: HashMap<(usize, usize), f64> = HashMap::new();
    let mut div = |i: usize, j: usize| -> Result<f64> {
        let key = (i.min(j), i.max(j));
        if let Some(&d) = memo.get(&key) {
            return Ok(d);
        }
        let d = divergence(view(key.0)?, view(key.1)?);
        memo.insert(key, d);
        Ok(d)
    };
    triplets
        .iter()
        .map(|t| {
            let (dax, dbx) = (div(t.a, t.x)?, div(t.b, t.x)?);
            Ok(if dax < dbx {
                1.0
            } else if dax > dbx {
                0.0
            } else {
                0.5
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastScore {
    pub phones: (String, String),
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub feature: String,
    pub visual: bool,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbxCounts {
    pub triplets: usize,
    pub contrasts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbxReport {
    pub task: Task,
    pub overall_error: f64,
    pub per_contrast: Vec<ContrastScore>,
    pub per_feature: Vec<FeatureScore>,
    pub counts: AbxCounts,
}

/// Flat-mean aggregation of per-triplet scores.
pub fn aggregate(task: Task, triplets: &[AbxTriplet], scores: &[f64], inventory: &PhoneInventory) -> AbxReport {
    assert_eq!(triplets.len(), scores.len());
    let mut by_contrast: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for (t, &s) in triplets.iter().zip(scores) {
        let e = by_contrast.entry(unordered(&t.contrast.0, &t.contrast.1)).or_default();
        e.0 += s;
        e.1 += 1;
    }
    let total: f64 = scores.iter().sum();
    let per_contrast = by_contrast
        .iter()
        .map(|(k, &(sum, n))| ContrastScore {
            phones: k.clone(),
            accuracy: sum / n as f64,
            count: n,
        })
        .collect();
    let mut per_feature = Vec::new();
    for (feature, pairs) in &inventory.features {
        let (mut sum, mut n) = (0.0, 0);
        let keys: std::collections::BTreeSet<(String, String)> = pairs.iter().map(|(p, q)| unordered(p, q)).collect();
        for k in &keys {
            if let Some(&(s, c)) = by_contrast.get(k) {
                sum += s;
                n += c;
            }
        }
        if n > 0 {
            per_feature.push(FeatureScore {
                feature: feature.clone(),
                visual: inventory.is_visual(feature),
                accuracy: sum / n as f64,
                count: n,
            });
        }
    }
    AbxReport {
        task,
        overall_error: if scores.is_empty() { f64::NAN } else { 1.0 - total / scores.len() as f64 },
        per_contrast,
        per_feature,
        counts: AbxCounts {
            triplets: scores.len(),
            contrasts: by_contrast.len(),
        },
    }
}

/// Score every triplet against `archive` and aggregate.
pub fn abx_report(
    task: Task,
    triplets: &[AbxTriplet],
    tokens: &[TriphoneToken],
    archive: &EmbeddingArchive,
    inventory: &PhoneInventory,
) -> Result<AbxReport> {
    if triplets.is_empty() {
        return Err(Error::InsufficientVectors(format!("no {} triplets to score", task.short())));
    }
    let scores = score_all(triplets, tokens, archive)?;
    Ok(aggregate(task, triplets, &scores, inventory))
}

impl AbxReport {
    /// Count-weighted accuracy over the contrasts accepted by `keep`.
    pub fn pooled_accuracy(&self, keep: impl Fn(&str, &str) -> bool) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0);
        for c in &self.per_contrast {
            if keep(&c.phones.0, &c.phones.1) {
                sum += c.accuracy * c.count as f64;
                n += c.count;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// `kind,name,accuracy,count` rows; the overall row carries the error.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,name,value,count\n");
        let _ = writeln!(out, "overall_error,{},{},{}", self.task.short(), self.overall_error, self.counts.triplets);
        for c in &self.per_contrast {
            let _ = writeln!(out, "contrast,{}-{},{},{}", c.phones.0, c.phones.1, c.accuracy, c.count);
        }
        for f in &self.per_feature {
            let _ = writeln!(out, "feature,{},{},{}", f.feature, f.accuracy, f.count);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use indexmap::IndexMap;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tri(c: &str, l: &str, r: &str, spk: &str, utt: &str) -> TriphoneToken {
        TriphoneToken {
            left: l.into(),
            center: c.into(),
            right: r.into(),
            speaker: spk.into(),
            utterance: utt.into(),
            start: 0,
            end: 3,
            center_start: 1,
            center_end: 2,
        }
    }

    fn inv(pairs: &[(&str, &str, &str)], visual: &[&str]) -> PhoneInventory {
        let mut features: IndexMap<String, Vec<(String, String)>> = IndexMap::new();
        let mut phones = std::collections::BTreeSet::new();
        for (f, p, q) in pairs {
            features.entry(f.to_string()).or_default().push((p.to_string(), q.to_string()));
            phones.insert(p.to_string());
            phones.insert(q.to_string());
        }
        PhoneInventory {
            phones: phones.into_iter().collect(),
            features,
            visual_features: visual.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn all_paths(n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
        fn rec(i: usize, j: usize, n: usize, m: usize, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
            cur.push((i, j));
            if (i, j) == (n - 1, m - 1) {
                out.push(cur.clone());
            } else {
                if i + 1 < n && j + 1 < m {
                    rec(i + 1, j + 1, n, m, cur, out);
                }
                if i + 1 < n {
                    rec(i + 1, j, n, m, cur, out);
                }
                if j + 1 < m {
                    rec(i, j + 1, n, m, cur, out);
                }
            }
            cur.pop();
        }
        let mut out = Vec::new();
        rec(0, 0, n, m, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn divergence_anchors() {
        let x = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.1]];
        assert_eq!(divergence(x.view(), x.view()), 0.0);
        assert_eq!(divergence(array![[1.0, 0.0]].view(), array![[0.0, 1.0]].view()), 1.0);
    }

    #[test]
    fn mean_is_not_the_mean_of_the_cheapest_sum() {
        let cost = array![[0.0, 0.9], [0.9, 0.9]];
        // diagonal mean 0.45; both three-step paths average 0.6
        assert!((divergence_from_costs(&cost) - 0.45).abs() < 1e-15);
        let cost = array![[0.0, 0.1], [1.0, 0.35]];
        // cheapest sum is the diagonal (0.35, mean 0.175), but the longer
        // path through (0, 1) has the lower mean 0.45 / 3
        assert!((divergence_from_costs(&cost) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn hand_enumerated_triplets() {
        let inventory = inv(&[("Open", "a", "e")], &[]);
        let toks = vec![tri("a", "b", "g", "s1", "u1"), tri("a", "b", "g", "s1", "u2"), tri("e", "b", "g", "s1", "u3")];
        let mut rng = substream(1, "triplets", 0);
        let t = build_triplets(&toks, &inventory, Task::Within, 1000, &mut rng);
        assert_eq!(t.len(), 2);
        for tr in &t {
            assert_eq!(tr.contrast, ("a".to_string(), "e".to_string()));
            assert_eq!(tr.b, 2);
            assert_ne!(tr.a, tr.x);
        }
        assert!(build_triplets(&toks, &inventory, Task::Across, 1000, &mut rng).is_empty());
    }

    #[test]
    fn across_speaker_constraints() {
        let inventory = inv(&[("Voice", "t", "d")], &[]);
        let toks = vec![
            tri("t", "a", "a", "s1", "u1"),
            tri("d", "a", "a", "s1", "u2"),
            tri("t", "a", "a", "s2", "u3"),
            tri("d", "a", "a", "s2", "u4"),
        ];
        let t = build_triplets(&toks, &inventory, Task::Across, 1000, &mut substream(1, "triplets", 0));
        // each order: A,B from one speaker, X from the other
        assert_eq!(t.len(), 4);
        for tr in &t {
            assert_eq!(toks[tr.a].speaker, toks[tr.b].speaker);
            assert_ne!(toks[tr.a].speaker, toks[tr.x].speaker);
            assert_eq!(toks[tr.a].center, toks[tr.x].center);
        }
    }

    #[test]
    fn budget_subsamples_deterministically() {
        let inventory = inv(&[("Voice", "t", "d")], &[]);
        let mut toks = Vec::new();
        for i in 0..20 {
            toks.push(tri("t", "a", "a", "s1", &format!("t{i}")));
            toks.push(tri("d", "a", "a", "s1", &format!("d{i}")));
        }
        let a = build_triplets(&toks, &inventory, Task::Within, 50, &mut substream(3, "triplets", 0));
        let b = build_triplets(&toks, &inventory, Task::Within, 50, &mut substream(3, "triplets", 0));
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        assert!(a.iter().all(|t| t.a != t.x));
    }

    #[test]
    fn cell_enumeration_is_complete() {
        let mut rng = substream(0, "triplets", 0);
        let cell = enumerate_cell(3, 2, 3, true, 1000, &mut rng);
        assert_eq!(cell.len(), 12);
        let set: std::collections::BTreeSet<_> = cell.iter().collect();
        assert_eq!(set.len(), 12);
        assert!(cell.iter().all(|&(a, b, x)| a != x && a < 3 && x < 3 && b < 2));
        assert_eq!(enumerate_cell(2, 3, 4, false, 1000, &mut rng).len(), 24);
    }

    #[test]
    fn scoring_rules() {
        let a = array![[1.0, 0.0]];
        let x = array![[1.0, 0.0]];
        let b = array![[1.0, 1.0]];
        assert_eq!(score_views(a.view(), b.view(), x.view()), 1.0);
        assert_eq!(score_views(b.view(), a.view(), x.view()), 0.0);
        assert_eq!(score_views(a.view(), a.view(), x.view()), 0.5);
    }

    #[test]
    fn aggregation_examples() {
        let inventory = inv(&[("Voice", "t", "d"), ("Place", "t", "k")], &["Place"]);
        let tr = |p: &str, q: &str| AbxTriplet {
            a: 0,
            b: 0,
            x: 0,
            contrast: (p.into(), q.into()),
            task: Task::Within,
        };
        let r = aggregate(Task::Within, &[tr("t", "d"), tr("d", "t")], &[1.0, 1.0], &inventory);
        assert_eq!(r.overall_error, 0.0);
        assert!(r.per_feature.iter().all(|f| f.accuracy == 1.0));
        let trips = [tr("t", "d"), tr("k", "t"), tr("t", "k")];
        let r = aggregate(Task::Within, &trips, &[1.0, 0.0, 0.5], &inventory);
        assert!((r.overall_error - 0.5).abs() < 1e-15);
        assert_eq!(r.per_contrast.len(), 2);
        assert_eq!(r.per_feature[1].feature, "Place");
        assert!(r.per_feature[1].visual);
        assert_eq!(r.per_feature[1].count, 2);
        assert_eq!(r.per_feature[1].accuracy, 0.25);
        assert_eq!(r.pooled_accuracy(|p, q| inventory.features_of(p, q).iter().any(|f| inventory.is_visual(f))), Some(0.25));
    }

    fn one_hot_fixture(constant: bool) -> (Vec<TriphoneToken>, EmbeddingArchive, PhoneInventory) {
        let inventory = inv(&[("Voice", "t", "d"), ("Voice", "p", "b"), ("Place", "t", "p")], &["Place"]);
        let phones = ["a", "t", "d", "p", "b"];
        let mut toks = Vec::new();
        let mut archive = EmbeddingArchive::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut n = 0;
        for spk in ["s1", "s2", "s3"] {
            for c in ["t", "d", "p", "b"] {
                for _ in 0..3 {
                    let id = format!("u{n}");
                    n += 1;
                    let labels = ["a", c, "a"];
                    let mut frames = Vec::new();
                    for l in labels {
                        for _ in 0..rng.gen_range(1..4) {
                            let k = phones.iter().position(|p| *p == l).unwrap();
                            frames.push((0..5).map(|j| if constant { 1.0 } else { f64::from(u8::from(j == k)) }).collect::<Vec<_>>());
                        }
                    }
                    let t = frames.len();
                    let m = Array2::from_shape_vec((t, 5), frames.concat()).unwrap();
                    archive.insert(id.clone(), m);
                    toks.push(TriphoneToken {
                        left: "a".into(),
                        center: c.into(),
                        right: "a".into(),
                        speaker: spk.into(),
                        utterance: id,
                        start: 0,
                        end: t,
                        center_start: 0,
                        center_end: t,
                    });
                }
            }
        }
        (toks, archive, inventory)
    }

    #[test]
    fn calibration_anchors() {
        for task in [Task::Within, Task::Across] {
            let (toks, archive, inventory) = one_hot_fixture(false);
            let t = build_triplets(&toks, &inventory, task, 1000, &mut substream(1, "triplets", 0));
            assert!(!t.is_empty());
            let r = abx_report(task, &t, &toks, &archive, &inventory).unwrap();
            assert_eq!(r.overall_error, 0.0);
            // invariant to positive scaling
            let scaled = abx_report(task, &t, &toks, &archive.map(|v| 3.0 * v), &inventory).unwrap();
            assert_eq!(r, scaled);
            let (toks, archive, inventory) = one_hot_fixture(true);
            let r = abx_report(task, &t, &toks, &archive, &inventory).unwrap();
            assert_eq!(r.overall_error, 0.5);
            // count-weighted mean of per-contrast accuracies equals overall accuracy
            let weighted: f64 = r.per_contrast.iter().map(|c| c.accuracy * c.count as f64).sum::<f64>() / r.counts.triplets as f64;
            assert!((weighted - (1.0 - r.overall_error)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn divergence_matches_brute_force(n in 1usize..=6, m in 1usize..=6, seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
            let b = Array2::from_shape_fn((m, 3), |_| rng.gen_range(-1.0..1.0));
            let cost = cost_matrix(a.view(), b.view(), FrameMetric::Cosine);
            let brute = all_paths(n, m)
                .iter()
                .map(|p| p.iter().map(|&(i, j)| cost[[i, j]]).sum::<f64>() / p.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let d = divergence(a.view(), b.view());
            prop_assert!((d - brute).abs() < 1e-12);
            prop_assert_eq!(d, divergence(b.view(), a.view()));
            prop_assert!(d >= 0.0);
            prop_assert_eq!(divergence(a.view(), a.view()), 0.0);
        }
    }
}
