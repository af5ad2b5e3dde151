//! Per-frame feature preprocessing: rate conversion, PCA whitening,
//! mean-variance normalization, frame stacking, modality concatenation and
//! modality knockout.
//!
//! Every operation here is a pure function; fitted models are immutable.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame rate every annotation is stored at.
pub const CANONICAL_FPS: f64 = 100.0;

/// Eigenvalues at or below this are treated as zero when whitening.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Standard deviations are floored here before dividing.
pub const STD_FLOOR: f64 = 1e-8;

/// A time-major `T x D` matrix of frames for one utterance and modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    pub data: Array2<f64>,
    pub fps: f64,
}

impl FeatureSeq {
    /// Checked constructor: at least one frame and one dimension, all finite.
    pub fn new(data: Array2<f64>, fps: f64) -> Result<Self> {
        let (t, d) = data.dim();
        if t == 0 || d == 0 {
            return Err(Error::InvalidConfig(format!(
                "feature sequence must be at least 1x1, got {t}x{d}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("feature sequence has non-finite values".into()));
        }
        if !(fps > 0.0) {
            return Err(Error::InvalidConfig(format!("frame rate must be positive, got {fps}")));
        }
        Ok(Self { data, fps })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Repeat every frame `factor` times (25 fps video to 100 fps is factor 4).
pub fn repeat_upsample(seq: &FeatureSeq, factor: usize) -> FeatureSeq {
    assert!(factor >= 1, "upsampling factor must be positive");
    let (t, d) = seq.data.dim();
    let mut out = Array2::zeros((t * factor, d));
    for (i, row) in seq.data.outer_iter().enumerate() {
        for k in 0..factor {
            out.row_mut(i * factor + k).assign(&row);
        }
    }
    FeatureSeq {
        data: out,
        fps: seq.fps * factor as f64,
    }
}

/// Second derivatives of the natural cubic spline through equally spaced
/// knots with spacing `h` (Thomas algorithm on the tridiagonal system).
fn natural_spline_moments(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // interior equations: m[i-1] + 4 m[i] + m[i+1] = 6 (y[i-1] - 2y[i] + y[i+1]) / h^2
    let k = n - 2;
    let mut c = vec![0.0; k];
    let mut d = vec![0.0; k];
    for i in 0..k {
        let rhs = 6.0 * (y[i] - 2.0 * y[i + 1] + y[i + 2]) / (h * h);
        let denom = if i == 0 { 4.0 } else { 4.0 - c[i - 1] };
        c[i] = 1.0 / denom;
        d[i] = if i == 0 { rhs / denom } else { (rhs - d[i - 1]) / denom };
    }
    m[k] = d[k - 1];
    for i in (0..k - 1).rev() {
        m[i + 1] = d[i] - c[i] * m[i + 2];
    }
    m
}

/// Resample to `target_len` frames with a natural cubic spline per dimension.
///
/// Knots sit at `i / (T - 1)` and samples at `j / (target_len - 1)`, so both
/// endpoints are preserved. A single-frame input is replicated. The frame
/// rate is scaled so the sequence keeps its duration.
pub fn cubic_resample(seq: &FeatureSeq, target_len: usize) -> FeatureSeq {
    assert!(target_len >= 1, "target length must be positive");
    let (t, d) = seq.data.dim();
    let fps = if t > 1 && target_len > 1 {
        seq.fps * (target_len - 1) as f64 / (t - 1) as f64
    } else {
        seq.fps
    };
    if t == target_len {
        return FeatureSeq {
            data: seq.data.clone(),
            fps,
        };
    }
    if t == 1 {
        let row = seq.data.row(0);
        let data = Array2::from_shape_fn((target_len, d), |(_, j)| row[j]);
        return FeatureSeq { data, fps };
    }
    let h = 1.0 / (t - 1) as f64;
    let mut out = Array2::zeros((target_len, d));
    for j in 0..d {
        let y: Vec<f64> = seq.data.column(j).to_vec();
        let m = natural_spline_moments(&y, h);
        for q in 0..target_len {
            let x = if target_len == 1 {
                0.0
            } else {
                q as f64 / (target_len - 1) as f64
            };
            let seg = ((x / h).floor() as usize).min(t - 2);
            let a = seg as f64 * h;
            let b = (seg + 1) as f64 * h;
            let u = b - x;
            let v = x - a;
            let val = m[seg] * u.powi(3) / (6.0 * h)
                + m[seg + 1] * v.powi(3) / (6.0 * h)
                + (y[seg] / h - m[seg] * h / 6.0) * u
                + (y[seg + 1] / h - m[seg + 1] * h / 6.0) * v;
            out[[q, j]] = val;
        }
        out[[0, j]] = y[0];
        out[[target_len - 1, j]] = y[t - 1];
    }
    FeatureSeq { data: out, fps }
}

/// Bring a sequence to the canonical rate with exactly `target_len` frames.
///
/// Integer rate ratios use frame repetition (then trim or pad with the last
/// frame); anything else goes through cubic resampling.
pub fn to_canonical_rate(seq: &FeatureSeq, target_len: usize) -> FeatureSeq {
    let ratio = CANONICAL_FPS / seq.fps;
    let factor = ratio.round();
    if (ratio - factor).abs() < 1e-9 && factor >= 1.0 {
        let up = repeat_upsample(seq, factor as usize);
        if up.len() == target_len {
            return up;
        }
        let d = up.dim();
        let last = up.len() - 1;
        let data = Array2::from_shape_fn((target_len, d), |(i, j)| up.data[[i.min(last), j]]);
        return FeatureSeq {
            data,
            fps: CANONICAL_FPS,
        };
    }
    let mut out = cubic_resample(seq, target_len);
    out.fps = CANONICAL_FPS;
    out
}

/// Number of frames a sequence spans once brought to the canonical rate.
pub fn canonical_len(frames: usize, fps: f64) -> usize {
    ((frames as f64) * CANONICAL_FPS / fps).round() as usize
}

/// PCA whitening model: `y = (x - mean) . projection`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// `D x K`; column k is the k-th eigenvector scaled by `1/sqrt(lambda_k)`.
    pub projection: Array2<f64>,
    /// All `D` covariance eigenvalues, decreasing.
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.ncols()
    }

    /// Fraction of total variance captured by each retained component.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        self.eigenvalues[..self.output_dim()]
            .iter()
            .map(|v| v / total)
            .collect()
    }
}

fn column_means(frames: ArrayView2<f64>) -> Array1<f64> {
    frames.mean_axis(Axis(0)).expect("non-empty frame matrix")
}

/// Fit a whitening PCA that keeps the `out_dim` largest-variance directions.
///
/// Covariance uses the population normalisation (1/N), so the projected
/// training data has unit variance per component.
pub fn fit_pca_whitener(frames: ArrayView2<f64>, out_dim: usize) -> Result<PcaModel> {
    let (n, d) = frames.dim();
    if out_dim == 0 || out_dim > d {
        return Err(Error::InvalidConfig(format!(
            "PCA output dimension {out_dim} must be in 1..={d}"
        )));
    }
    if n <= out_dim {
        return Err(Error::InvalidConfig(format!(
            "PCA needs more frames ({n}) than components ({out_dim})"
        )));
    }
    let mean = column_means(frames);
    let centered = &frames - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let sym = DMatrix::from_fn(d, d, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
    let eig = SymmetricEigen::new(sym);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let available = eigenvalues.iter().filter(|&&v| v > EIGEN_FLOOR).count();
    if available < out_dim {
        return Err(Error::RankDeficient {
            requested: out_dim,
            available,
        });
    }
    let mut projection = Array2::zeros((d, out_dim));
    for (c, &k) in order.iter().take(out_dim).enumerate() {
        let v = eig.eigenvectors.column(k);
        // sign convention: largest-magnitude entry positive
        let pivot = (0..d)
            .max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap().then(b.cmp(&a)))
            .unwrap();
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        let scale = sign / eigenvalues[c].sqrt();
        for r in 0..d {
            projection[[r, c]] = v[r] * scale;
        }
    }
    Ok(PcaModel {
        mean,
        projection,
        eigenvalues,
    })
}

pub fn apply_pca(model: &PcaModel, seq: &FeatureSeq) -> Result<FeatureSeq> {
    if seq.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "PCA input".into(),
            expected: model.input_dim(),
            got: seq.dim(),
        });
    }
    let data = (&seq.data - &model.mean).dot(&model.projection);
    Ok(FeatureSeq { data, fps: seq.fps })
}

/// Per-dimension mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Moments {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn compute_moments(frames: ArrayView2<f64>) -> Moments {
    let n = frames.nrows();
    assert!(n >= 1, "moments need at least one frame");
    let mean = column_means(frames);
    let mut ss = Array1::<f64>::zeros(mean.len());
    for row in frames.outer_iter() {
        for ((s, &x), &m) in ss.iter_mut().zip(row.iter()).zip(mean.iter()) {
            let dx = x - m;
            *s += dx * dx;
        }
    }
    let std = ss.mapv(|s| (s / n as f64).sqrt().max(STD_FLOOR));
    Moments { mean, std }
}

pub fn apply_moments(m: &Moments, seq: &FeatureSeq) -> Result<FeatureSeq> {
    if seq.dim() != m.dim() {
        return Err(Error::DimensionMismatch {
            context: "mean-variance normalization".into(),
            expected: m.dim(),
            got: seq.dim(),
        });
    }
    let data = (&seq.data - &m.mean) / &m.std;
    Ok(FeatureSeq { data, fps: seq.fps })
}

/// Index of the frame at offset `k - half` from `t`, clamped to the sequence.
#[inline]
pub fn clamped_index(t: usize, k: usize, half: usize, len: usize) -> usize {
    (t + k).saturating_sub(half).min(len - 1)
}

/// Stack `window` frames centred on each frame; edges replicate the boundary frames.
pub fn stack_frames(seq: &FeatureSeq, window: usize) -> FeatureSeq {
    assert!(window % 2 == 1, "stacking window must be odd");
    let (t, d) = seq.data.dim();
    let half = window / 2;
    let mut out = Array2::zeros((t, window * d));
    for i in 0..t {
        let mut row = out.row_mut(i);
        for k in 0..window {
            let src = clamped_index(i, k, half, t);
            row.slice_mut(s![k * d..(k + 1) * d])
                .assign(&seq.data.row(src));
        }
    }
    FeatureSeq {
        data: out,
        fps: seq.fps,
    }
}

/// Concatenate two synchronous streams along the feature axis, first one first.
pub fn concat_modalities(a: &FeatureSeq, v: &FeatureSeq) -> Result<FeatureSeq> {
    if a.len() != v.len() {
        return Err(Error::LengthMismatch(a.len(), v.len()));
    }
    if (a.fps - v.fps).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "cannot concatenate streams at {} and {} fps",
            a.fps, v.fps
        )));
    }
    let data = concatenate(Axis(1), &[a.data.view(), v.data.view()])
        .expect("row counts checked above");
    Ok(FeatureSeq { data, fps: a.fps })
}

/// One contiguous column block of a feature vector belonging to a modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub modality: usize,
    pub size: usize,
}

/// How the columns of a (possibly stacked) feature vector split into modality blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityLayout {
    pub names: Vec<String>,
    pub blocks: Vec<Block>,
}

impl ModalityLayout {
    /// Per-frame layout: one block per modality, in order.
    pub fn new(modalities: &[(String, usize)]) -> Self {
        Self {
            names: modalities.iter().map(|(n, _)| n.clone()).collect(),
            blocks: modalities
                .iter()
                .enumerate()
                .map(|(i, (_, size))| Block { modality: i, size: *size })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.size).sum()
    }

    pub fn num_modalities(&self) -> usize {
        self.names.len()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Layout of `window` stacked copies of this layout.
    pub fn stacked(&self, window: usize) -> Self {
        Self {
            names: self.names.clone(),
            blocks: (0..window).flat_map(|_| self.blocks.iter().copied()).collect(),
        }
    }

    /// Column range of every block, in order.
    pub fn ranges(&self) -> Vec<(usize, std::ops::Range<usize>)> {
        let mut start = 0;
        self.blocks
            .iter()
            .map(|b| {
                let r = start..start + b.size;
                start += b.size;
                (b.modality, r)
            })
            .collect()
    }
}

/// Per-modality keep (`true`) or zero (`false`) flags.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask {
    keep: Vec<bool>,
}

impl ModalityMask {
    pub fn new(keep: Vec<bool>) -> Result<Self> {
        if !keep.iter().any(|&k| k) {
            return Err(Error::InvalidConfig("modality mask must keep at least one modality".into()));
        }
        Ok(Self { keep })
    }

    pub fn keep_all(n: usize) -> Self {
        Self { keep: vec![true; n] }
    }

    /// Keep only modality `index` out of `n`.
    pub fn only(index: usize, n: usize) -> Self {
        Self {
            keep: (0..n).map(|i| i == index).collect(),
        }
    }

    pub fn keeps(&self, modality: usize) -> bool {
        self.keep.get(modality).copied().unwrap_or(false)
    }

    pub fn flags(&self) -> &[bool] {
        &self.keep
    }

    pub fn keeps_all(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }
}

fn check_layout(dim: usize, mask: &ModalityMask, layout: &ModalityLayout) -> Result<()> {
    if layout.dim() != dim {
        return Err(Error::LayoutMismatch(format!(
            "layout covers {} columns, data has {dim}",
            layout.dim()
        )));
    }
    if mask.flags().len() != layout.num_modalities() {
        return Err(Error::LayoutMismatch(format!(
            "mask has {} flags for {} modalities",
            mask.flags().len(),
            layout.num_modalities()
        )));
    }
    Ok(())
}

/// Zero every column block whose modality the mask drops.
pub fn knockout(seq: &FeatureSeq, mask: &ModalityMask, layout: &ModalityLayout) -> Result<FeatureSeq> {
    let mut out = seq.clone();
    knockout_in_place(&mut out.data, mask, layout)?;
    Ok(out)
}

pub fn knockout_in_place(data: &mut Array2<f64>, mask: &ModalityMask, layout: &ModalityLayout) -> Result<()> {
    check_layout(data.ncols(), mask, layout)?;
    if mask.keeps_all() {
        return Ok(());
    }
    for (modality, range) in layout.ranges() {
        if !mask.keeps(modality) {
            data.slice_mut(s![.., range]).fill(0.0);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(data: Array2<f64>) -> FeatureSeq {
        FeatureSeq::new(data, 100.0).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn feature_seq_rejects_empty_and_nan() {
        assert!(FeatureSeq::new(Array2::zeros((0, 3)), 100.0).is_err());
        assert!(FeatureSeq::new(array![[f64::NAN]], 100.0).is_err());
    }

    #[test]
    fn repeat_upsample_examples() {
        let s = FeatureSeq::new(array![[1.0], [2.0]], 25.0).unwrap();
        let up = repeat_upsample(&s, 4);
        assert_eq!(up.data.column(0).to_vec(), vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        assert_eq!(up.fps, 100.0);
        assert_eq!(repeat_upsample(&s, 1), s);
        let s3 = seq(random_matrix(3, 2, 1));
        assert_eq!(repeat_upsample(&s3, 2).len(), 6);
    }

    /// Textbook natural cubic spline (general knots, full tridiagonal solve).
    fn oracle_spline(xs: &[f64], ys: &[f64], x: f64) -> f64 {
        let n = xs.len();
        let h: Vec<f64> = (0..n - 1).map(|i| xs[i + 1] - xs[i]).collect();
        // Solve for second derivatives with Gaussian elimination on the dense system.
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        a[0][0] = 1.0;
        a[n - 1][n - 1] = 1.0;
        for i in 1..n - 1 {
            a[i][i - 1] = h[i - 1];
            a[i][i] = 2.0 * (h[i - 1] + h[i]);
            a[i][i + 1] = h[i];
            b[i] = 6.0 * ((ys[i + 1] - ys[i]) / h[i] - (ys[i] - ys[i - 1]) / h[i - 1]);
        }
        for col in 0..n {
            let piv = (col..n).max_by(|&p, &q| a[p][col].abs().partial_cmp(&a[q][col].abs()).unwrap()).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut m = vec![0.0; n];
        for row in (0..n).rev() {
            let mut acc = b[row];
            for k in row + 1..n {
                acc -= a[row][k] * m[k];
            }
            m[row] = acc / a[row][row];
        }
        let mut i = 0;
        while i < n - 2 && x > xs[i + 1] {
            i += 1;
        }
        let t = (x - xs[i]) / h[i];
        let a0 = 1.0 - t;
        a0 * ys[i] + t * ys[i + 1] + ((a0.powi(3) - a0) * m[i] + (t.powi(3) - t) * m[i + 1]) * h[i] * h[i] / 6.0
    }

    #[test]
    fn cubic_resample_constant_and_linear() {
        let c = seq(Array2::from_elem((6, 2), 3.5));
        let r = cubic_resample(&c, 13);
        assert!(r.data.iter().all(|&v| (v - 3.5).abs() < 1e-12));

        let ramp = seq(Array2::from_shape_fn((5, 1), |(i, _)| i as f64 / 4.0));
        let r = cubic_resample(&ramp, 9);
        for (j, v) in r.data.column(0).iter().enumerate() {
            assert!((v - j as f64 * 0.125).abs() < 1e-12, "{j}: {v}");
        }
    }

    #[test]
    fn cubic_resample_matches_oracle_on_sine() {
        let t = 12;
        let ys: Vec<f64> = (0..t).map(|i| (i as f64 * 0.7).sin()).collect();
        let xs: Vec<f64> = (0..t).map(|i| i as f64 / (t - 1) as f64).collect();
        let s = seq(Array2::from_shape_vec((t, 1), ys.clone()).unwrap());
        let target = 4 * t;
        let r = cubic_resample(&s, target);
        for q in 0..target {
            let x = q as f64 / (target - 1) as f64;
            let expect = oracle_spline(&xs, &ys, x);
            assert!((r.data[[q, 0]] - expect).abs() < 1e-9, "q={q}");
        }
    }

    #[test]
    fn cubic_resample_single_frame_replicates() {
        let s = seq(array![[1.0, 2.0]]);
        let r = cubic_resample(&s, 4);
        assert_eq!(r.len(), 4);
        assert!(r.data.outer_iter().all(|row| row.to_vec() == vec![1.0, 2.0]));
    }

    #[test]
    fn canonical_rate_conversion() {
        let s = FeatureSeq::new(random_matrix(5, 3, 2), 25.0).unwrap();
        let c = to_canonical_rate(&s, 20);
        assert_eq!(c.len(), 20);
        assert_eq!(c.data.row(7), s.data.row(1));
        // off by one frame: pad with the last frame
        let c = to_canonical_rate(&s, 21);
        assert_eq!(c.data.row(20), s.data.row(4));
        // non-integer ratio goes through the spline and keeps endpoints
        let s = FeatureSeq::new(random_matrix(6, 2, 3), 30.0).unwrap();
        let c = to_canonical_rate(&s, 20);
        assert_eq!(c.len(), 20);
        assert_eq!(c.data.row(0), s.data.row(0));
        assert_eq!(c.data.row(19), s.data.row(5));
    }

    /// Cyclic Jacobi eigenvalue iteration for a symmetric matrix.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _sweep in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
        ev
    }

    #[test]
    fn pca_eigenvalues_match_jacobi_oracle() {
        let x = random_matrix(50, 5, 11);
        let model = fit_pca_whitener(x.view(), 3).unwrap();
        let n = x.nrows() as f64;
        let mean: Vec<f64> = (0..5).map(|j| x.column(j).sum() / n).collect();
        let mut cov = vec![vec![0.0; 5]; 5];
        for row in x.outer_iter() {
            for i in 0..5 {
                for j in 0..5 {
                    cov[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]) / n;
                }
            }
        }
        let oracle = jacobi_eigenvalues(cov);
        for (a, b) in model.eigenvalues.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        assert_eq!(model.output_dim(), 3);
        assert!(model.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    fn covariance(data: &Array2<f64>) -> Array2<f64> {
        let n = data.nrows() as f64;
        let mean = data.mean_axis(Axis(0)).unwrap();
        let c = data - &mean;
        c.t().dot(&c) / n
    }

    #[test]
    fn pca_whitens_training_data() {
        let mut x = random_matrix(200, 6, 5);
        // correlate some columns
        for mut row in x.outer_iter_mut() {
            row[1] += 2.0 * row[0];
            row[4] -= 0.5 * row[2];
        }
        let model = fit_pca_whitener(x.view(), 6).unwrap();
        let y = apply_pca(&model, &seq(x.clone())).unwrap();
        let mean = y.data.mean_axis(Axis(0)).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-6));
        let cov = covariance(&y.data);
        for i in 0..6 {
            for j in 0..6 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((cov[[i, j]] - target).abs() < 1e-6, "cov[{i},{j}]={}", cov[[i, j]]);
            }
        }
    }

    #[test]
    fn pca_line_data_is_one_dimensional() {
        let x = Array2::from_shape_fn((20, 2), |(i, j)| if j == 0 { i as f64 } else { 2.0 * i as f64 + 1.0 });
        let model = fit_pca_whitener(x.view(), 1).unwrap();
        assert!((model.explained_variance_ratio()[0] - 1.0).abs() < 1e-12);
        assert!(matches!(
            fit_pca_whitener(x.view(), 2),
            Err(Error::RankDeficient { requested: 2, available: 1 })
        ));
    }

    #[test]
    fn pca_mean_frame_maps_to_zero_and_checks_dim() {
        let x = random_matrix(30, 4, 8);
        let model = fit_pca_whitener(x.view(), 2).unwrap();
        let m = seq(model.mean.clone().insert_axis(Axis(0)));
        let y = apply_pca(&model, &m).unwrap();
        assert!(y.data.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(apply_pca(&model, &seq(x.clone())).unwrap().len(), 30);
        assert!(matches!(
            apply_pca(&model, &seq(random_matrix(3, 5, 1))),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn moments_examples() {
        let x = array![[0.0, 5.0], [2.0, 5.0]];
        let m = compute_moments(x.view());
        assert_eq!(m.mean.to_vec(), vec![1.0, 5.0]);
        assert_eq!(m.std[0], 1.0);
        assert_eq!(m.std[1], STD_FLOOR);

        let r = random_matrix(40, 3, 21);
        let m = compute_moments(r.view());
        for j in 0..3 {
            let col: Vec<f64> = r.column(j).to_vec();
            let mu = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / col.len() as f64;
            assert!((m.mean[j] - mu).abs() < 1e-10);
            assert!((m.std[j] - var.sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn apply_moments_normalizes() {
        let r = random_matrix(40, 3, 22);
        let m = compute_moments(r.view());
        let n = apply_moments(&m, &seq(r.clone())).unwrap();
        let m2 = compute_moments(n.data.view());
        assert!(m2.mean.iter().all(|v| v.abs() < 1e-12));
        assert!(m2.std.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let again = apply_moments(&m2, &n).unwrap();
        assert!((&again.data - &n.data).iter().all(|v| v.abs() < 1e-12));
        let at_mean = seq(m.mean.clone().insert_axis(Axis(0)));
        assert!(apply_moments(&m, &at_mean).unwrap().data.iter().all(|v| *v == 0.0));
        assert!(apply_moments(&m, &seq(random_matrix(2, 4, 1))).is_err());
    }

    #[test]
    fn stacking_examples() {
        let s = seq(random_matrix(10, 40, 3));
        assert_eq!(stack_frames(&s, 1), s);
        let st = stack_frames(&s, 7);
        assert_eq!(st.data.dim(), (10, 280));
        let small = seq(array![[1.0], [2.0], [3.0]]);
        let st = stack_frames(&small, 3);
        assert_eq!(st.data.row(0).to_vec(), vec![1.0, 1.0, 2.0]);
        assert_eq!(st.data.row(2).to_vec(), vec![2.0, 3.0, 3.0]);
    }

    #[test]
    fn concat_examples() {
        let a = seq(random_matrix(10, 40, 1));
        let v = seq(random_matrix(10, 40, 2));
        let c = concat_modalities(&a, &v).unwrap();
        assert_eq!(c.data.dim(), (10, 80));
        assert_eq!(c.data.slice(s![.., 0..40]), a.data);
        assert_eq!(c.data.slice(s![.., 40..80]), v.data);
        let short = seq(random_matrix(9, 40, 2));
        assert!(matches!(concat_modalities(&a, &short), Err(Error::LengthMismatch(10, 9))));
    }

    fn av_layout() -> ModalityLayout {
        ModalityLayout::new(&[("audio".into(), 40), ("visual".into(), 40)])
    }

    #[test]
    fn knockout_examples() {
        let x = seq(random_matrix(10, 80, 4));
        let layout = av_layout();
        assert_eq!(knockout(&x, &ModalityMask::keep_all(2), &layout).unwrap(), x);
        let zv = knockout(&x, &ModalityMask::only(0, 2), &layout).unwrap();
        assert!(zv.data.slice(s![.., 40..]).iter().all(|v| *v == 0.0));
        assert_eq!(zv.data.slice(s![.., ..40]), x.data.slice(s![.., ..40]));
        let za = knockout(&x, &ModalityMask::only(1, 2), &layout).unwrap();
        assert!(za.data.slice(s![.., ..40]).iter().all(|v| *v == 0.0));
        assert_eq!(za.data.slice(s![.., 40..]), x.data.slice(s![.., 40..]));
        let bad = ModalityLayout::new(&[("audio".into(), 40), ("visual".into(), 30)]);
        assert!(matches!(knockout(&x, &ModalityMask::only(0, 2), &bad), Err(Error::LayoutMismatch(_))));
        assert!(ModalityMask::new(vec![false, false]).is_err());
    }

    #[test]
    fn knockout_on_stacked_layout_zeroes_every_window_copy() {
        let x = seq(random_matrix(6, 4, 9));
        let layout = ModalityLayout::new(&[("audio".into(), 2), ("visual".into(), 2)]);
        let st = stack_frames(&x, 3);
        let z = knockout(&st, &ModalityMask::only(0, 2), &layout.stacked(3)).unwrap();
        for k in 0..3 {
            assert!(z.data.slice(s![.., k * 4 + 2..k * 4 + 4]).iter().all(|v| *v == 0.0));
            assert_eq!(z.data.slice(s![.., k * 4..k * 4 + 2]), st.data.slice(s![.., k * 4..k * 4 + 2]));
        }
    }

    proptest! {
        #[test]
        fn upsample_composes(a in 1usize..5, b in 1usize..5, t in 1usize..6, seed in 0u64..1000) {
            let s = seq(random_matrix(t, 2, seed));
            prop_assert_eq!(repeat_upsample(&s, a * b), repeat_upsample(&repeat_upsample(&s, a), b));
        }

        #[test]
        fn resample_to_same_length_is_identity(t in 1usize..30, seed in 0u64..1000) {
            let s = seq(random_matrix(t, 3, seed));
            let r = cubic_resample(&s, t);
            prop_assert!((&r.data - &s.data).iter().all(|v| v.abs() < 1e-9));
        }

        #[test]
        fn stacking_centre_block_is_raw_frame(t in 1usize..20, half in 0usize..4, seed in 0u64..1000) {
            let window = 2 * half + 1;
            let s = seq(random_matrix(t, 3, seed));
            let st = stack_frames(&s, window);
            for i in 0..t {
                prop_assert_eq!(st.data.slice(s![i, half * 3..half * 3 + 3]), s.data.row(i));
            }
        }

        #[test]
        fn knockout_idempotent_and_commutes_with_moments(seed in 0u64..1000, which in 0usize..3) {
            let layout = ModalityLayout::new(&[("audio".into(), 3), ("visual".into(), 2)]);
            let mask = match which { 0 => ModalityMask::only(0, 2), 1 => ModalityMask::only(1, 2), _ => ModalityMask::keep_all(2) };
            let x = seq(random_matrix(8, 5, seed));
            let once = knockout(&x, &mask, &layout).unwrap();
            prop_assert_eq!(&knockout(&once, &mask, &layout).unwrap(), &once);
            let m = compute_moments(x.data.view());
            let a = knockout(&apply_moments(&m, &x).unwrap(), &mask, &layout).unwrap();
            let b = knockout(&apply_moments(&m, &once).unwrap(), &mask, &layout).unwrap();
            for (modality, range) in layout.ranges() {
                if mask.keeps(modality) {
                    prop_assert_eq!(a.data.slice(s![.., range.clone()]), b.data.slice(s![.., range]));
                }
            }
        }
    }
}
