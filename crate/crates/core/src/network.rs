//! The ABnet: a feedforward network shared by both branches of a Siamese
//! pair, trained with a margin cosine loss on aligned frame pairs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis, NdFloat, Zip};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::archive::EmbeddingArchive;
use crate::corpus::WordToken;
use crate::error::{Error, Result};
use crate::features::ModalityMask;
use crate::pairing::{align_pair, draw_combo_index, sample_word_pairs, ComboMode, FramePair, PairConstraints};
use crate::prep::PreparedCorpus;
use crate::rng::{streams, substream};
use crate::wsmf;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub embedding_blocks: usize,
    pub block_dim: usize,
    pub margin: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: 560,
            hidden_layers: 5,
            hidden_units: 1000,
            embedding_blocks: 2,
            block_dim: 39,
            margin: 0.5,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_units == 0 || self.embedding_blocks == 0 || self.block_dim == 0 {
            return Err(Error::InvalidConfig("network dimensions must be positive".into()));
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(Error::InvalidConfig(format!("margin must lie in (0, 1), got {}", self.margin)));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.embedding_blocks * self.block_dim
    }

    /// Layer widths from input to output.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat(self.hidden_units).take(self.hidden_layers));
        dims.push(self.output_dim());
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub config: NetConfig,
    /// `fan_in x fan_out` per layer.
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

/// Uniform fan-balanced weights, zero biases.
pub fn init_network<T: NdFloat>(cfg: &NetConfig) -> Result<Network<T>> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, streams::INIT, 0);
    let dims = cfg.layer_dims();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.push(Array2::from_shape_simple_fn((fan_in, fan_out), || {
            T::from(rng.gen_range(-s..s)).unwrap()
        }));
        biases.push(Array1::zeros(fan_out));
    }
    Ok(Network {
        config: cfg.clone(),
        weights,
        biases,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

impl<T: NdFloat> Network<T> {
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn cast<U: NdFloat>(&self) -> Network<U> {
        let conv = |x: &T| U::from(*x).unwrap();
        Network {
            config: self.config.clone(),
            weights: self.weights.iter().map(|w| w.map(conv)).collect(),
            biases: self.biases.iter().map(|b| b.map(conv)).collect(),
        }
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                context: "network input".into(),
                expected: self.config.input_dim,
                got: cols,
            });
        }
        Ok(())
    }

    /// Embeddings for a batch of inputs, one row per input.
    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(x.ncols())?;
        Ok(self.activations(x).pop().unwrap())
    }

    pub fn forward_one(&self, x: ArrayView1<T>) -> Result<Array1<T>> {
        let row = x.insert_axis(Axis(0));
        Ok(self.forward(row)?.row(0).to_owned())
    }

    /// Layer outputs, input first; every layer but the last is rectified.
    fn activations(&self, x: ArrayView2<T>) -> Vec<Array2<T>> {
        let mut acts = vec![x.to_owned()];
        let last = self.num_layers() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(w);
            z += b;
            if l < last {
                z.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
            }
            acts.push(z);
        }
        acts
    }

    /// Mean margin cosine loss over a batch of pairs.
    pub fn batch_loss(&self, x1: ArrayView2<T>, x2: ArrayView2<T>, y: &[u8]) -> Result<T> {
        let e1 = self.forward(x1)?;
        let e2 = self.forward(x2)?;
        let margin = T::from(self.config.margin).unwrap();
        let mut total = T::zero();
        for (i, &yi) in y.iter().enumerate() {
            total += blocks_loss_grad(e1.row(i), e2.row(i), yi, self.config.block_dim, margin, None);
        }
        Ok(total / T::from(y.len()).unwrap())
    }

    /// Mean loss over the batch and its gradient; both branches accumulate
    /// into the shared parameters.
    pub fn backward(&self, x1: ArrayView2<T>, x2: ArrayView2<T>, y: &[u8]) -> Result<(T, Gradients<T>)> {
        let n = y.len();
        if n == 0 || x1.nrows() != n || x2.nrows() != n {
            return Err(Error::LengthMismatch(x1.nrows(), x2.nrows()));
        }
        self.check_input(x1.ncols())?;
        self.check_input(x2.ncols())?;
        let mut x = Array2::<T>::zeros((2 * n, self.config.input_dim));
        x.slice_mut(s![..n, ..]).assign(&x1);
        x.slice_mut(s![n.., ..]).assign(&x2);
        let acts = self.activations(x.view());
        let out = acts.last().unwrap();
        let margin = T::from(self.config.margin).unwrap();
        let scale = T::one() / T::from(n).unwrap();
        let mut delta = Array2::<T>::zeros(out.raw_dim());
        let mut total = T::zero();
        for i in 0..n {
            let (mut g_top, mut g_bottom) = delta.view_mut().split_at(Axis(0), n);
            total += blocks_loss_grad(
                out.row(i),
                out.row(n + i),
                y[i],
                self.config.block_dim,
                margin,
                Some((g_top.row_mut(i), g_bottom.row_mut(i), scale)),
            );
        }
        let layers = self.num_layers();
        let mut gw = Vec::with_capacity(layers);
        let mut gb = Vec::with_capacity(layers);
        for l in (0..layers).rev() {
            gw.push(acts[l].t().dot(&delta));
            gb.push(delta.sum_axis(Axis(0)));
            if l > 0 {
                let mut prev = delta.dot(&self.weights[l].t());
                Zip::from(&mut prev).and(&acts[l]).for_each(|d, &a| {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                });
                delta = prev;
            }
        }
        gw.reverse();
        gb.reverse();
        Ok((total * scale, Gradients { weights: gw, biases: gb }))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut layers = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wf = format!("layer{l}_weight.wsmf");
            let bf = format!("layer{l}_bias.wsmf");
            wsmf::write(&dir.join(&wf), &w.mapv(|v| v.to_f64().unwrap()))?;
            let b2 = b.mapv(|v| v.to_f64().unwrap()).insert_axis(Axis(0)).to_owned();
            wsmf::write(&dir.join(&bf), &b2)?;
            layers.push(LayerEntry {
                weight: wf,
                bias: bf,
                fan_in: w.nrows(),
                fan_out: w.ncols(),
            });
        }
        let header = NetworkHeader {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            layers,
        };
        write_json_atomic(&dir.join("network.json"), &header)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("network.json");
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::Io(e),
        })?;
        let header: NetworkHeader = serde_json::from_str(&text)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::MalformedManifest(format!(
                "unsupported network format version {}",
                header.format_version
            )));
        }
        let dims = header.config.layer_dims();
        if header.layers.len() != dims.len() - 1 {
            return Err(Error::MalformedManifest("layer count does not match config".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, entry) in header.layers.iter().enumerate() {
            let w = wsmf::read(&dir.join(&entry.weight))?;
            let b = wsmf::read(&dir.join(&entry.bias))?;
            if w.dim() != (dims[l], dims[l + 1]) || b.dim() != (1, dims[l + 1]) {
                return Err(Error::DimensionMismatch {
                    context: format!("layer {l}"),
                    expected: dims[l + 1],
                    got: w.ncols(),
                });
            }
            weights.push(w.mapv(|v| T::from(v).unwrap()));
            biases.push(b.row(0).mapv(|v| T::from(v).unwrap()));
        }
        Ok(Network {
            config: header.config,
            weights,
            biases,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    weight: String,
    bias: String,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkHeader {
    format_version: u32,
    config: NetConfig,
    layers: Vec<LayerEntry>,
}

pub(crate) fn write_json_atomic<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    wsmf::write_atomic(path, text.as_bytes())
}

// ---------------------------------------------------------------------------
// loss

/// Summed per-block loss for one pair. When `grads` is given, adds
/// `scale * dloss/de` into the two gradient rows.
fn blocks_loss_grad<T: NdFloat>(
    e1: ArrayView1<T>,
    e2: ArrayView1<T>,
    y: u8,
    block_dim: usize,
    margin: T,
    mut grads: Option<(ArrayViewMut1<T>, ArrayViewMut1<T>, T)>,
) -> T {
    let mut loss = T::zero();
    let blocks = e1.len() / block_dim;
    for k in 0..blocks {
        let r = k * block_dim..(k + 1) * block_dim;
        let a = e1.slice(s![r.clone()]);
        let b = e2.slice(s![r.clone()]);
        let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
        for (&x, &z) in a.iter().zip(b.iter()) {
            dot += x * z;
            na += x * x;
            nb += z * z;
        }
        if na == T::zero() || nb == T::zero() {
            // cosine 0: -0 for same pairs, inactive hinge otherwise
            continue;
        }
        let norm = (na * nb).sqrt();
        let c = dot / norm;
        let dl_dc = if y == 1 {
            loss -= c;
            -T::one()
        } else if c > margin {
            loss += c - margin;
            T::one()
        } else {
            T::zero()
        };
        if let Some((g1, g2, scale)) = grads.as_mut() {
            if dl_dc == T::zero() {
                continue;
            }
            let f = dl_dc * *scale;
            let mut g1b = g1.slice_mut(s![r.clone()]);
            let mut g2b = g2.slice_mut(s![r]);
            for i in 0..block_dim {
                g1b[i] += f * (b[i] / norm - c * a[i] / na);
                g2b[i] += f * (a[i] / norm - c * b[i] / nb);
            }
        }
    }
    loss
}

/// Margin cosine loss of one pair of embeddings split into `blocks` blocks.
pub fn margin_cosine_loss(e1: &[f64], e2: &[f64], y: u8, margin: f64, blocks: usize) -> f64 {
    assert_eq!(e1.len(), e2.len(), "embeddings must have equal length");
    assert!(blocks > 0 && e1.len() % blocks == 0, "length must split into blocks");
    blocks_loss_grad(
        ArrayView1::from(e1),
        ArrayView1::from(e2),
        y,
        e1.len() / blocks,
        margin,
        None,
    )
}

/// Loss and gradients with respect to both embeddings of one pair.
pub fn margin_cosine_grad(e1: &[f64], e2: &[f64], y: u8, margin: f64, blocks: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let mut g1 = Array1::zeros(e1.len());
    let mut g2 = Array1::zeros(e2.len());
    let loss = blocks_loss_grad(
        ArrayView1::from(e1),
        ArrayView1::from(e2),
        y,
        e1.len() / blocks,
        margin,
        Some((g1.view_mut(), g2.view_mut(), 1.0)),
    );
    (loss, g1.to_vec(), g2.to_vec())
}

// ---------------------------------------------------------------------------
// optimisation

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Gradients<T>,
    v: Gradients<T>,
}

impl<T: NdFloat> Adam<T> {
    pub fn new(net: &Network<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || Gradients {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        };
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, net: &mut Network<T>, g: &Gradients<T>) {
        self.t += 1;
        let b1 = T::from(self.beta1).unwrap();
        let b2 = T::from(self.beta2).unwrap();
        let c1 = T::from(1.0 - self.beta1.powi(self.t)).unwrap();
        let c2 = T::from(1.0 - self.beta2.powi(self.t)).unwrap();
        let lr = T::from(self.lr).unwrap();
        let eps = T::from(self.eps).unwrap();
        let one = T::one();
        let update = |p: &mut T, m: &mut T, v: &mut T, g: &T| {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        };
        for l in 0..net.num_layers() {
            Zip::from(&mut net.weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .and(&g.weights[l])
                .for_each(update);
            Zip::from(&mut net.biases[l])
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .and(&g.biases[l])
                .for_each(update);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Word pairs drawn per epoch, half same and half different.
    pub pairs_per_epoch: usize,
    /// Epochs without held-out improvement before stopping; 0 disables.
    pub patience: usize,
    /// Keep every n-th aligned frame of each word pair.
    pub frame_stride: usize,
    /// Share of word labels reserved for the held-out loss.
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            pairs_per_epoch: 300,
            patience: 0,
            frame_stride: 1,
            heldout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.pairs_per_epoch == 0 || self.frame_stride == 0 {
            return Err(Error::InvalidConfig("batch size and pairs per epoch must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::InvalidConfig("held-out fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Loss of the first batch before any update.
    pub initial_train_loss: Option<f64>,
    pub stopped_early: bool,
    pub best_epoch: Option<usize>,
    pub heldout_labels: Vec<String>,
    pub pair_shortfall: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,heldout_loss,seconds\n");
        for e in &self.epochs {
            let h = e.heldout_loss.map(|h| format!("{h:.9}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.9},{},{:.3}", e.epoch, e.train_loss, h, e.seconds);
        }
        out
    }

    /// The log without wall times, for determinism comparisons.
    pub fn without_timing(&self) -> TrainLog {
        let mut log = self.clone();
        for e in &mut log.epochs {
            e.seconds = 0.0;
        }
        log
    }
}

/// Everything the training loop draws pairs from.
pub struct TrainData<'a> {
    pub prepared: &'a PreparedCorpus<'a>,
    pub tokens: Vec<WordToken>,
    pub mode: ComboMode,
}

fn frame_pairs(
    data: &TrainData,
    pairs: &[crate::pairing::WordPair],
    stride: usize,
    rng: &mut crate::rng::Rng,
) -> Result<Vec<FramePair>> {
    let mut out = Vec::new();
    for p in pairs {
        let combo = draw_combo_index(&data.mode, rng) as u8;
        let (ua, ub, frames) = align_pair(p, data.prepared)?;
        out.extend(frames.into_iter().step_by(stride).map(|(i, j)| FramePair {
            utt_a: ua as u32,
            frame_a: i as u32,
            utt_b: ub as u32,
            frame_b: j as u32,
            same: p.same,
            combo,
        }));
    }
    Ok(out)
}

fn materialize(data: &TrainData, combos: &[crate::pairing::ModalityCombo], batch: &[FramePair]) -> (Array2<f32>, Array2<f32>, Vec<u8>) {
    let p = data.prepared;
    let dim = p.input_dim();
    let mut x1 = Array2::<f32>::zeros((batch.len(), dim));
    let mut x2 = Array2::<f32>::zeros((batch.len(), dim));
    for (r, fp) in batch.iter().enumerate() {
        let combo = &combos[fp.combo as usize];
        PreparedCorpus::write_stacked(
            &p.layout,
            p.window,
            p.frames(fp.utt_a as usize),
            fp.frame_a as usize,
            &combo.branch1,
            x1.row_mut(r).as_slice_mut().unwrap(),
        );
        PreparedCorpus::write_stacked(
            &p.layout,
            p.window,
            p.frames(fp.utt_b as usize),
            fp.frame_b as usize,
            &combo.branch2,
            x2.row_mut(r).as_slice_mut().unwrap(),
        );
    }
    (x1, x2, batch.iter().map(|f| u8::from(f.same)).collect())
}

fn mean_loss(net: &Network<f32>, data: &TrainData, combos: &[crate::pairing::ModalityCombo], pairs: &[FramePair], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in pairs.chunks(batch) {
        let (x1, x2, y) = materialize(data, combos, chunk);
        total += net.batch_loss(x1.view(), x2.view(), &y)? as f64 * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Split word labels into training and held-out sets.
fn split_labels(tokens: &[WordToken], fraction: f64, rng: &mut crate::rng::Rng) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut labels: Vec<String> = tokens.iter().map(|t| t.label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let n_held = if fraction > 0.0 && labels.len() >= 3 {
        ((labels.len() as f64 * fraction).round() as usize).clamp(1, labels.len() - 2)
    } else {
        0
    };
    labels.shuffle(rng);
    let held = labels[..n_held].iter().cloned().collect();
    let train = labels[n_held..].iter().cloned().collect();
    (train, held)
}

/// Train with mini-batch Adam over freshly sampled word pairs each epoch.
pub fn train(net: Network<f32>, cfg: &TrainConfig, data: &TrainData) -> Result<(Network<f32>, TrainLog)> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((net, log));
    }
    let combos = data.mode.combos();
    let (train_labels, held_labels) = split_labels(&data.tokens, cfg.heldout_fraction, &mut substream(cfg.seed, streams::PAIRING, 0));
    log.heldout_labels = held_labels.iter().cloned().collect();

    let heldout = if held_labels.is_empty() {
        Vec::new()
    } else {
        let constraints = PairConstraints {
            labels: Some(held_labels),
            ..Default::default()
        };
        let n = ((cfg.pairs_per_epoch as f64 * cfg.heldout_fraction).round() as usize).max(2);
        let mut rng = substream(cfg.seed, streams::PAIRING, 1);
        let sample = match sample_word_pairs(&data.tokens, n / 2, n - n / 2, &mut rng, &constraints) {
            Err(Error::NoSamePairsAvailable) => sample_word_pairs(&data.tokens, 0, n, &mut rng, &constraints)?,
            other => other?,
        };
        frame_pairs(data, &sample.pairs, cfg.frame_stride, &mut substream(cfg.seed, streams::TRAINING, 0))?
    };

    let constraints = PairConstraints {
        labels: Some(train_labels),
        ..Default::default()
    };
    let mut net = net;
    let mut adam = Adam::new(&net, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut best: Option<(f64, Network<f32>, usize)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let n_same = cfg.pairs_per_epoch / 2;
        let mut prng = substream(cfg.seed, streams::PAIRING, epoch as u64 + 2);
        let sample = sample_word_pairs(&data.tokens, n_same, cfg.pairs_per_epoch - n_same, &mut prng, &constraints)?;
        log.pair_shortfall += sample.same_shortfall + sample.diff_shortfall;
        let mut trng = substream(cfg.seed, streams::TRAINING, epoch as u64 + 1);
        let mut pairs = frame_pairs(data, &sample.pairs, cfg.frame_stride, &mut trng)?;
        pairs.shuffle(&mut trng);
        let mut total = 0.0;
        for (b, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
            let (x1, x2, y) = materialize(data, &combos, chunk);
            let (loss, grads) = net.backward(x1.view(), x2.view(), &y)?;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { epoch, batch: b });
            }
            if log.initial_train_loss.is_none() {
                log.initial_train_loss = Some(loss as f64);
            }
            total += loss as f64 * chunk.len() as f64;
            adam.step(&mut net, &grads);
        }
        let train_loss = total / pairs.len().max(1) as f64;
        let heldout_loss = if heldout.is_empty() {
            None
        } else {
            Some(mean_loss(&net, data, &combos, &heldout, cfg.batch_size)?)
        };
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            heldout_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(h) = heldout_loss {
            if !h.is_finite() {
                return Err(Error::DivergedLoss { epoch, batch: usize::MAX });
            }
            if best.as_ref().map_or(true, |(b, _, _)| h < *b) {
                best = Some((h, net.clone(), epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    let (_, best_net, best_epoch) = best.unwrap();
                    log.stopped_early = true;
                    log.best_epoch = Some(best_epoch);
                    return Ok((best_net, log));
                }
            }
        }
    }
    log.best_epoch = best.map(|(_, _, e)| e);
    Ok((net, log))
}

// ---------------------------------------------------------------------------
// embedding

/// Per-utterance embedding sequences: preprocess, stack, mask, forward.
pub fn embed_corpus<T: NdFloat>(net: &Network<T>, prepared: &PreparedCorpus, mask: &ModalityMask) -> Result<EmbeddingArchive> {
    if mask.flags().len() != prepared.layout.num_modalities() {
        return Err(Error::LayoutMismatch(format!(
            "mask has {} flags for {} modalities",
            mask.flags().len(),
            prepared.layout.num_modalities()
        )));
    }
    let mut archive = EmbeddingArchive::default();
    for (i, u) in prepared.corpus.utterances.iter().enumerate() {
        let x = prepared.stacked_input::<T>(prepared.frames(i), mask);
        let e = net.forward(x.view())?;
        archive.insert(u.id.clone(), e.mapv(|v| v.to_f64().unwrap()));
    }
    Ok(archive)
}

/// Preprocessed, unstacked frames with dropped modalities zeroed.
pub fn raw_archive(prepared: &PreparedCorpus, mask: &ModalityMask) -> Result<EmbeddingArchive> {
    let mut archive = EmbeddingArchive::default();
    for (i, u) in prepared.corpus.utterances.iter().enumerate() {
        let mut f = prepared.frames(i).clone();
        crate::features::knockout_in_place(&mut f, mask, &prepared.layout)?;
        archive.insert(u.id.clone(), f);
    }
    Ok(archive)
}
