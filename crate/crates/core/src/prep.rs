//! Fitted preprocessing: canonical frame rate, optional PCA whitening per
//! modality, then mean-variance normalization per modality. Stacking and
//! masking happen downstream on the concatenated frames.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, NdFloat};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{Corpus, Modality, UtteranceRecord};
use crate::error::{Error, Result};
use crate::features::{
    apply_moments, apply_pca, clamped_index, compute_moments, fit_pca_whitener, to_canonical_rate,
    FeatureSeq, ModalityLayout, ModalityMask, Moments, PcaModel, CANONICAL_FPS,
};
use crate::wsmf;

pub const DEFAULT_WINDOW: usize = 7;
const FORMAT_VERSION: u32 = 1;

fn default_window() -> usize {
    DEFAULT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepConfig {
    /// Modalities to PCA-whiten, with their output dimension.
    #[serde(default)]
    pub pca: BTreeMap<String, usize>,
    /// Frame-stacking window (odd).
    #[serde(default = "default_window")]
    pub window: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            pca: BTreeMap::new(),
            window: DEFAULT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityPrep {
    pub modality: Modality,
    pub pca: Option<PcaModel>,
    pub moments: Moments,
}

impl ModalityPrep {
    pub fn output_dim(&self) -> usize {
        self.moments.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub config: PrepConfig,
    pub modalities: Vec<ModalityPrep>,
}

impl Preprocessor {
    /// Fit on every utterance of `train` (pass the training split only).
    pub fn fit(train: &Corpus, config: &PrepConfig) -> Result<Self> {
        if config.window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "stacking window must be odd, got {}",
                config.window
            )));
        }
        if train.utterances.is_empty() {
            return Err(Error::InvalidConfig("no training utterances to fit preprocessing on".into()));
        }
        for name in config.pca.keys() {
            if train.modality(name).is_none() {
                return Err(Error::InvalidConfig(format!("PCA requested for unknown modality {name}")));
            }
        }
        let mut modalities = Vec::new();
        for m in &train.modalities {
            let canon: Vec<FeatureSeq> = train
                .utterances
                .iter()
                .map(|u| canonical_stream(u, m, &train.modalities))
                .collect::<Result<_>>()?;
            let stacked = stack_rows(&canon);
            let pca = match config.pca.get(&m.name) {
                Some(&k) => Some(fit_pca_whitener(stacked.view(), k)?),
                None => None,
            };
            let projected = match &pca {
                Some(model) => stacked.dot(&model.projection) - model.mean.dot(&model.projection),
                None => stacked,
            };
            let moments = compute_moments(projected.view());
            modalities.push(ModalityPrep {
                modality: m.clone(),
                pca,
                moments,
            });
        }
        Ok(Self {
            config: config.clone(),
            modalities,
        })
    }

    /// Round every fitted parameter to f32, the precision of the saved
    /// bundle, so in-process results match a save and reload.
    pub fn quantized(mut self) -> Self {
        let q = |x: &mut f64| *x = *x as f32 as f64;
        for m in &mut self.modalities {
            if let Some(p) = &mut m.pca {
                p.mean.iter_mut().for_each(q);
                p.projection.iter_mut().for_each(q);
                p.eigenvalues.iter_mut().for_each(q);
            }
            m.moments.mean.iter_mut().for_each(q);
            m.moments.std.iter_mut().for_each(q);
        }
        self
    }

    pub fn window(&self) -> usize {
        self.config.window
    }

    /// Per-frame layout after preprocessing, modalities in manifest order.
    pub fn layout(&self) -> ModalityLayout {
        let dims: Vec<(String, usize)> = self
            .modalities
            .iter()
            .map(|m| (m.modality.name.clone(), m.output_dim()))
            .collect();
        ModalityLayout::new(&dims)
    }

    /// Network input dimension: window times the concatenated frame dimension.
    pub fn input_dim(&self) -> usize {
        self.window() * self.layout().dim()
    }

    /// One modality, preprocessed, at the canonical rate.
    pub fn stream(&self, utt: &UtteranceRecord, modality: usize, all: &[Modality]) -> Result<FeatureSeq> {
        let mp = &self.modalities[modality];
        let mut seq = canonical_stream(utt, &mp.modality, all)?;
        if let Some(pca) = &mp.pca {
            seq = apply_pca(pca, &seq)?;
        }
        apply_moments(&mp.moments, &seq)
    }

    /// All modalities, preprocessed and concatenated in layout order.
    pub fn frames(&self, utt: &UtteranceRecord, all: &[Modality]) -> Result<FeatureSeq> {
        let streams: Vec<FeatureSeq> = (0..self.modalities.len())
            .map(|i| self.stream(utt, i, all))
            .collect::<Result<_>>()?;
        let views: Vec<ArrayView2<f64>> = streams.iter().map(|s| s.data.view()).collect();
        let data = concatenate(Axis(1), &views).map_err(|e| Error::LayoutMismatch(e.to_string()))?;
        Ok(FeatureSeq {
            data,
            fps: CANONICAL_FPS,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for mp in &self.modalities {
            let name = &mp.modality.name;
            let pca_file = match &mp.pca {
                Some(pca) => {
                    let file = format!("{name}.pca.wsmf");
                    let d = pca.input_dim();
                    let k = pca.output_dim();
                    let mut m = Array2::zeros((d, k + 2));
                    m.column_mut(0).assign(&pca.mean);
                    for (i, v) in pca.eigenvalues.iter().enumerate() {
                        m[[i, 1]] = *v;
                    }
                    m.slice_mut(s![.., 2..]).assign(&pca.projection);
                    wsmf::write(&dir.join(&file), &m)?;
                    let sidecar = json!({"role": "pca", "modality": name, "input_dim": d, "output_dim": k, "columns": "mean,eigenvalues,projection"});
                    wsmf::write_atomic(&dir.join(format!("{file}.json")), format!("{sidecar}\n").as_bytes())?;
                    Some(file)
                }
                None => None,
            };
            let mom_file = format!("{name}.moments.wsmf");
            let mut m = Array2::zeros((2, mp.moments.dim()));
            m.row_mut(0).assign(&mp.moments.mean);
            m.row_mut(1).assign(&mp.moments.std);
            wsmf::write(&dir.join(&mom_file), &m)?;
            let sidecar = json!({"role": "moments", "modality": name, "dim": mp.moments.dim(), "rows": "mean,std"});
            wsmf::write_atomic(&dir.join(format!("{mom_file}.json")), format!("{sidecar}\n").as_bytes())?;
            entries.push(json!({"modality": mp.modality, "pca": pca_file, "moments": mom_file}));
        }
        let header = json!({"format_version": FORMAT_VERSION, "config": self.config, "modalities": entries});
        wsmf::write_atomic(&dir.join("prep.json"), serde_json::to_string_pretty(&header)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            modality: Modality,
            pca: Option<String>,
            moments: String,
        }
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
            config: PrepConfig,
            modalities: Vec<Entry>,
        }
        let path = dir.join("prep.json");
        let text = fs::read_to_string(&path).map_err(|_| Error::MissingFile(path.clone()))?;
        let header: Header = serde_json::from_str(&text)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported preprocessing format version {}",
                header.format_version
            )));
        }
        let mut modalities = Vec::new();
        for e in header.modalities {
            let pca = match e.pca {
                Some(file) => {
                    let m = wsmf::read(&dir.join(file))?;
                    if m.ncols() < 3 {
                        return Err(Error::InvalidConfig("PCA file has too few columns".into()));
                    }
                    Some(PcaModel {
                        mean: m.column(0).to_owned(),
                        eigenvalues: m.column(1).to_vec(),
                        projection: m.slice(s![.., 2..]).to_owned(),
                    })
                }
                None => None,
            };
            let m = wsmf::read(&dir.join(&e.moments))?;
            if m.nrows() != 2 {
                return Err(Error::DimensionMismatch {
                    context: "moments file rows".into(),
                    expected: 2,
                    got: m.nrows(),
                });
            }
            modalities.push(ModalityPrep {
                modality: e.modality,
                pca,
                moments: Moments {
                    mean: m.row(0).to_owned(),
                    std: m.row(1).to_owned(),
                },
            });
        }
        Ok(Self {
            config: header.config,
            modalities,
        })
    }
}

fn stack_rows(seqs: &[FeatureSeq]) -> Array2<f64> {
    let views: Vec<ArrayView2<f64>> = seqs.iter().map(|s| s.data.view()).collect();
    concatenate(Axis(0), &views).expect("same modality shares its dimension")
}

fn canonical_stream(u: &UtteranceRecord, m: &Modality, all: &[Modality]) -> Result<FeatureSeq> {
    let seq = u.features.get(&m.name).ok_or_else(|| {
        Error::MalformedManifest(format!("utterance {} lacks modality {}", u.id, m.name))
    })?;
    Ok(to_canonical_rate(seq, u.num_frames(all)))
}

/// A corpus with every utterance preprocessed once, ready for pairing and embedding.
pub struct PreparedCorpus<'a> {
    pub corpus: &'a Corpus,
    pub layout: ModalityLayout,
    pub window: usize,
    frames: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
    reference: usize,
}

impl<'a> PreparedCorpus<'a> {
    pub fn new(corpus: &'a Corpus, prep: &Preprocessor) -> Result<Self> {
        let layout = prep.layout();
        let frames = corpus
            .utterances
            .iter()
            .map(|u| prep.frames(u, &corpus.modalities).map(|f| f.data))
            .collect::<Result<Vec<_>>>()?;
        let index = corpus
            .utterances
            .iter()
            .enumerate()
            .map(|(i, u)| (u.id.clone(), i))
            .collect();
        let reference = layout
            .modality_index("audio")
            .or_else(|| layout.modality_index("visual"))
            .unwrap_or(0);
        Ok(Self {
            corpus,
            layout,
            window: prep.window(),
            frames,
            index,
            reference,
        })
    }

    pub fn utterance_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn num_utterances(&self) -> usize {
        self.frames.len()
    }

    /// Preprocessed concatenated frames of utterance `utt`.
    pub fn frames(&self, utt: usize) -> &Array2<f64> {
        &self.frames[utt]
    }

    pub fn frames_by_id(&self, id: &str) -> Result<&Array2<f64>> {
        self.utterance_index(id)
            .map(|i| &self.frames[i])
            .ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    }

    /// Modality used to compute same-word DTW alignments.
    pub fn reference_modality(&self) -> usize {
        self.reference
    }

    /// Columns of modality `m` for frames `[start, end)` of utterance `utt`.
    pub fn modality_view(&self, utt: usize, m: usize, start: usize, end: usize) -> ArrayView2<'_, f64> {
        let (_, range) = self
            .layout
            .ranges()
            .into_iter()
            .find(|(idx, _)| *idx == m)
            .expect("modality in layout");
        self.frames[utt].slice(s![start..end, range])
    }

    pub fn input_dim(&self) -> usize {
        self.window * self.layout.dim()
    }

    /// Write the stacked, masked input vector for frame `t` of `frames` into `out`.
    pub fn write_stacked<T: NdFloat>(
        layout: &ModalityLayout,
        window: usize,
        frames: &Array2<f64>,
        t: usize,
        mask: &ModalityMask,
        out: &mut [T],
    ) {
        let d = layout.dim();
        let half = window / 2;
        let len = frames.nrows();
        let ranges = layout.ranges();
        for k in 0..window {
            let src = frames.row(clamped_index(t, k, half, len));
            let dst = &mut out[k * d..(k + 1) * d];
            for (modality, range) in &ranges {
                if mask.keeps(*modality) {
                    for c in range.clone() {
                        dst[c] = T::from(src[c]).unwrap();
                    }
                } else {
                    for c in range.clone() {
                        dst[c] = T::zero();
                    }
                }
            }
        }
    }

    /// Stacked, masked network input rows for a whole frame matrix.
    pub fn stacked_input<T: NdFloat>(&self, frames: &Array2<f64>, mask: &ModalityMask) -> Array2<T> {
        let dim = self.input_dim();
        let mut out = Array2::<T>::zeros((frames.nrows(), dim));
        for (t, mut row) in out.outer_iter_mut().enumerate() {
            let slice = row.as_slice_mut().expect("contiguous row");
            Self::write_stacked(&self.layout, self.window, frames, t, mask, slice);
        }
        out
    }
}
