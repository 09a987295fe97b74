//! Feature-statistics math shared by mining, training and the baselines.
//!
//! A style is the per-channel (mean, std) pair of a feature map. Everything
//! here is a pure function over immutable inputs; randomized operations take
//! an explicit RNG stream so callers own determinism.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use thiserror::Error;

/// Lower bound enforced on every per-channel standard deviation.
///
/// Keeps the AdaIN division well-defined on zero-variance channels.
pub const EPSILON_SIGMA: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("non-finite value in feature map at (row {row}, col {col}, channel {channel})")]
    NonFinite {
        row: usize,
        col: usize,
        channel: usize,
    },
    #[error("feature map dimensions must all be >= 1, got {h}x{w}x{c}")]
    EmptyShape { h: usize, w: usize, c: usize },
    #[error("channel count mismatch: {left} vs {right}")]
    ChannelMismatch { left: usize, right: usize },
    #[error("non-finite style statistic in channel {channel}")]
    NonFiniteStyle { channel: usize },
    #[error("mix weight component {index} = {value} outside [0, 1]")]
    MixWeightOutOfRange { index: usize, value: f64 },
    #[error("patch count {m} is not a perfect square")]
    NonSquarePatchCount { m: usize },
    #[error("dimensions {h}x{w} not divisible by grid side {side}")]
    IndivisibleGrid { h: usize, w: usize, side: usize },
    #[error("label value {value} at (row {row}, col {col}) outside [0, {num_classes})")]
    LabelOutOfRange {
        value: u32,
        row: usize,
        col: usize,
        num_classes: u32,
    },
    #[error("zero-norm {which} cannot be perturbed at a finite SNR")]
    DegenerateSignal { which: &'static str },
    #[error("SNR must be finite or +inf, got {0}")]
    InvalidSnr(f64),
}

/// A real-valued h x w x c activation tensor, channels on the last axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f64>,
}

impl FeatureMap {
    /// Validates shape and finiteness on construction.
    pub fn new(data: Array3<f64>) -> Result<Self, CoreError> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(CoreError::EmptyShape { h, w, c });
        }
        for ((row, col, channel), &v) in data.indexed_iter() {
            if !v.is_finite() {
                return Err(CoreError::NonFinite { row, col, channel });
            }
        }
        Ok(Self { data })
    }

    pub fn from_shape_fn(
        h: usize,
        w: usize,
        c: usize,
        f: impl FnMut((usize, usize, usize)) -> f64,
    ) -> Result<Self, CoreError> {
        Self::new(Array3::from_shape_fn((h, w, c), f))
    }

    /// Single-channel map from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, CoreError> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if h == 0 || w == 0 {
            return Err(CoreError::EmptyShape { h, w, c: 1 });
        }
        Self::from_shape_fn(h, w, 1, |(i, j, _)| rows[i][j])
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// Wraps an array that is already known to be finite and non-empty.
    pub(crate) fn from_valid(data: Array3<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data }
    }
}

/// Per-channel (mu, sigma) statistics of a feature map.
///
/// Every `sigma[k]` is at least [`EPSILON_SIGMA`].
#[derive(Debug, Clone, PartialEq)]
pub struct StyleStats {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl StyleStats {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self, CoreError> {
        if mu.len() != sigma.len() {
            return Err(CoreError::ChannelMismatch {
                left: mu.len(),
                right: sigma.len(),
            });
        }
        for (k, (&m, &s)) in mu.iter().zip(&sigma).enumerate() {
            if !m.is_finite() || !s.is_finite() {
                return Err(CoreError::NonFiniteStyle { channel: k });
            }
        }
        let sigma = sigma.into_iter().map(|s| s.max(EPSILON_SIGMA)).collect();
        Ok(Self { mu, sigma })
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }
}

/// An integer class map with an ignore index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    data: Array2<u32>,
    num_classes: u32,
    ignore_index: u32,
}

impl LabelMap {
    pub fn new(data: Array2<u32>, num_classes: u32, ignore_index: u32) -> Result<Self, CoreError> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(CoreError::EmptyShape { h, w, c: 1 });
        }
        for ((row, col), &v) in data.indexed_iter() {
            if v != ignore_index && v >= num_classes {
                return Err(CoreError::LabelOutOfRange {
                    value: v,
                    row,
                    col,
                    num_classes,
                });
            }
        }
        Ok(Self {
            data,
            num_classes,
            ignore_index,
        })
    }

    pub fn from_rows(rows: &[&[u32]], num_classes: u32, ignore_index: u32) -> Result<Self, CoreError> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        let data = Array2::from_shape_fn((h, w), |(i, j)| rows[i][j]);
        Self::new(data, num_classes, ignore_index)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn ignore_index(&self) -> u32 {
        self.ignore_index
    }

    pub fn data(&self) -> &Array2<u32> {
        &self.data
    }

    /// Non-overlapping grid of `m` label patches, same rules as [`partition`].
    pub fn partition(&self, m: usize) -> Result<Vec<LabelMap>, CoreError> {
        let side = grid_side(m)?;
        let (h, w) = self.data.dim();
        if h % side != 0 || w % side != 0 {
            return Err(CoreError::IndivisibleGrid { h, w, side });
        }
        let (ph, pw) = (h / side, w / side);
        let mut patches = Vec::with_capacity(m);
        for i in 0..side {
            for j in 0..side {
                let view = self
                    .data
                    .slice(ndarray::s![i * ph..(i + 1) * ph, j * pw..(j + 1) * pw]);
                patches.push(LabelMap {
                    data: view.to_owned(),
                    num_classes: self.num_classes,
                    ignore_index: self.ignore_index,
                });
            }
        }
        Ok(patches)
    }
}

/// A feature map viewed as a sqrt(m) x sqrt(m) grid of equal patches.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    patches: Vec<FeatureMap>,
    side: usize,
    patch_h: usize,
    patch_w: usize,
    channels: usize,
}

impl PatchGrid {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn patch_count(&self) -> usize {
        self.side * self.side
    }

    /// Patch at grid position (i, j), zero-based row/column.
    pub fn patch(&self, i: usize, j: usize) -> &FeatureMap {
        &self.patches[i * self.side + j]
    }

    /// Patches in row-major order.
    pub fn patches(&self) -> &[FeatureMap] {
        &self.patches
    }

    /// Tiles the patches back into the parent map, bit-exactly.
    pub fn reassemble(&self) -> FeatureMap {
        let (h, w) = (self.patch_h * self.side, self.patch_w * self.side);
        let mut data = Array3::zeros((h, w, self.channels));
        for i in 0..self.side {
            for j in 0..self.side {
                let patch = &self.patches[i * self.side + j];
                data.slice_mut(ndarray::s![
                    i * self.patch_h..(i + 1) * self.patch_h,
                    j * self.patch_w..(j + 1) * self.patch_w,
                    ..
                ])
                .assign(patch.data());
            }
        }
        FeatureMap::from_valid(data)
    }
}

/// How mix weights are shaped: one scalar for the whole map, or one weight
/// per channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixShape {
    Scalar,
    PerChannel(usize),
}

/// The sampling law a [`MixWeight`] was drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MixLaw {
    Beta { alpha: f64, beta: f64 },
    Fixed,
}

/// A style-mixing weight with every component in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MixWeight {
    values: Vec<f64>,
    scalar: bool,
    law: MixLaw,
}

impl MixWeight {
    pub fn scalar(value: f64) -> Result<Self, CoreError> {
        Self::checked(vec![value], true, MixLaw::Fixed)
    }

    pub fn per_channel(values: Vec<f64>) -> Result<Self, CoreError> {
        Self::checked(values, false, MixLaw::Fixed)
    }

    fn checked(values: Vec<f64>, scalar: bool, law: MixLaw) -> Result<Self, CoreError> {
        for (index, &value) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                return Err(CoreError::MixWeightOutOfRange { index, value });
            }
        }
        Ok(Self {
            values,
            scalar,
            law,
        })
    }

    pub fn is_scalar(&self) -> bool {
        self.scalar
    }

    pub fn law(&self) -> MixLaw {
        self.law
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The weight applied to channel `k`.
    pub fn component(&self, k: usize) -> f64 {
        if self.scalar {
            self.values[0]
        } else {
            self.values[k]
        }
    }

    fn check_channels(&self, channels: usize) -> Result<(), CoreError> {
        if !self.scalar && self.values.len() != channels {
            return Err(CoreError::ChannelMismatch {
                left: self.values.len(),
                right: channels,
            });
        }
        Ok(())
    }
}

/// Per-channel spatial mean and population standard deviation.
///
/// Sigma is clamped to [`EPSILON_SIGMA`], so constant channels stay usable
/// as styles.
pub fn channel_stats(f: &FeatureMap) -> Result<StyleStats, CoreError> {
    let (h, w, c) = f.data.dim();
    let n = (h * w) as f64;
    let mut mu = vec![0.0; c];
    let mut sigma = vec![0.0; c];
    for k in 0..c {
        let channel = f.data.index_axis(Axis(2), k);
        let mean = channel.sum() / n;
        let var = channel.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if !mean.is_finite() || !var.is_finite() {
            return Err(CoreError::NonFiniteStyle { channel: k });
        }
        mu[k] = mean;
        sigma[k] = var.sqrt().max(EPSILON_SIGMA);
    }
    StyleStats::new(mu, sigma)
}

/// Restylizes `source` so its channel statistics become `target_style`.
pub fn adain(source: &FeatureMap, target_style: &StyleStats) -> Result<FeatureMap, CoreError> {
    if target_style.channels() != source.channels() {
        return Err(CoreError::ChannelMismatch {
            left: source.channels(),
            right: target_style.channels(),
        });
    }
    let own = channel_stats(source)?;
    let mut data = source.data.clone();
    for (k, mut channel) in data.axis_iter_mut(Axis(2)).enumerate() {
        let scale = target_style.sigma[k] / own.sigma[k];
        let shift = target_style.mu[k] - own.mu[k] * scale;
        channel.mapv_inplace(|v| v * scale + shift);
    }
    Ok(FeatureMap::from_valid(data))
}

/// Linear interpolation between two styles: (1 - a) * source + a * target.
pub fn mix_styles(
    source: &StyleStats,
    target: &StyleStats,
    alpha: &MixWeight,
) -> Result<StyleStats, CoreError> {
    if source.channels() != target.channels() {
        return Err(CoreError::ChannelMismatch {
            left: source.channels(),
            right: target.channels(),
        });
    }
    alpha.check_channels(source.channels())?;
    let c = source.channels();
    let mut mu = Vec::with_capacity(c);
    let mut sigma = Vec::with_capacity(c);
    for k in 0..c {
        let a = alpha.component(k);
        mu.push((1.0 - a) * source.mu[k] + a * target.mu[k]);
        sigma.push((1.0 - a) * source.sigma[k] + a * target.sigma[k]);
    }
    StyleStats::new(mu, sigma)
}

/// Draws a mix weight with components i.i.d. from Beta(0.1, 0.1).
pub fn sample_mix_weight(shape: MixShape, rng: &mut impl Rng) -> MixWeight {
    let beta = Beta::new(0.1, 0.1).expect("valid Beta parameters");
    let n = match shape {
        MixShape::Scalar => 1,
        MixShape::PerChannel(c) => c,
    };
    let values: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = beta.sample(rng);
            v.clamp(0.0, 1.0)
        })
        .collect();
    MixWeight::checked(values, matches!(shape, MixShape::Scalar), MixLaw::Beta {
        alpha: 0.1,
        beta: 0.1,
    })
    .expect("Beta draws lie in [0, 1]")
}

fn grid_side(m: usize) -> Result<usize, CoreError> {
    if m == 0 {
        return Err(CoreError::NonSquarePatchCount { m });
    }
    let side = (m as f64).sqrt().round() as usize;
    if side * side != m {
        return Err(CoreError::NonSquarePatchCount { m });
    }
    Ok(side)
}

/// Splits `f` into `m` non-overlapping patches on a sqrt(m) x sqrt(m) grid.
///
/// Requires exact divisibility; there is no silent padding or truncation.
pub fn partition(f: &FeatureMap, m: usize) -> Result<PatchGrid, CoreError> {
    let side = grid_side(m)?;
    let (h, w, c) = f.data.dim();
    if h % side != 0 || w % side != 0 {
        return Err(CoreError::IndivisibleGrid { h, w, side });
    }
    let (ph, pw) = (h / side, w / side);
    let mut patches = Vec::with_capacity(m);
    for i in 0..side {
        for j in 0..side {
            let view = f.data.slice(ndarray::s![
                i * ph..(i + 1) * ph,
                j * pw..(j + 1) * pw,
                ..
            ]);
            patches.push(FeatureMap::from_valid(view.to_owned()));
        }
    }
    Ok(PatchGrid {
        patches,
        side,
        patch_h: ph,
        patch_w: pw,
        channels: c,
    })
}

/// Most frequent non-ignore class in a label patch.
///
/// Ties break toward the lowest class id; an all-ignore patch yields `None`.
pub fn dominant_class(y_patch: &LabelMap) -> Option<u32> {
    let mut counts = vec![0usize; y_patch.num_classes as usize];
    for &v in y_patch.data.iter() {
        if v != y_patch.ignore_index {
            counts[v as usize] += 1;
        }
    }
    let mut best: Option<(u32, usize)> = None;
    for (id, &count) in counts.iter().enumerate() {
        if count > 0 && best.is_none_or(|(_, c)| count > c) {
            best = Some((id as u32, count));
        }
    }
    best.map(|(id, _)| id)
}

/// Adds Gaussian noise to a style at a decibel signal-to-noise ratio.
///
/// Independent noise vectors for mu and sigma, each rescaled so that
/// `||noise|| / ||signal|| = 10^(-snr_db / 20)`. `snr_db = +inf` returns the
/// style unchanged.
pub fn perturb_with_snr(
    s: &StyleStats,
    snr_db: f64,
    rng: &mut impl Rng,
) -> Result<StyleStats, CoreError> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(CoreError::InvalidSnr(snr_db));
    }
    if snr_db == f64::INFINITY {
        return Ok(s.clone());
    }
    let ratio = 10f64.powf(-snr_db / 20.0);
    let mu = add_scaled_noise(&s.mu, ratio, "mu", rng)?;
    let sigma = add_scaled_noise(&s.sigma, ratio, "sigma", rng)?;
    StyleStats::new(mu, sigma)
}

fn add_scaled_noise(
    signal: &[f64],
    ratio: f64,
    which: &'static str,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, CoreError> {
    let signal_norm = norm(signal);
    if signal_norm == 0.0 {
        return Err(CoreError::DegenerateSignal { which });
    }
    let mut noise: Vec<f64> = (0..signal.len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let mut noise_norm = norm(&noise);
    while noise_norm == 0.0 {
        // measure-zero event, but the scale below must stay defined
        noise = (0..signal.len())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        noise_norm = norm(&noise);
    }
    let scale = ratio * signal_norm / noise_norm;
    Ok(signal
        .iter()
        .zip(&noise)
        .map(|(&s, &n)| s + scale * n)
        .collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut r = rng(seed);
        FeatureMap::from_shape_fn(h, w, c, |_| r.gen_range(-3.0..3.0)).unwrap()
    }

    fn random_style(c: usize, seed: u64) -> StyleStats {
        let mut r = rng(seed);
        let mu = (0..c).map(|_| r.gen_range(-2.0..2.0)).collect();
        let sigma = (0..c).map(|_| r.gen_range(0.1..2.5)).collect();
        StyleStats::new(mu, sigma).unwrap()
    }

    #[test]
    fn channel_stats_direct_values() {
        let f = FeatureMap::from_rows(&[&[1.0, 3.0], &[5.0, 7.0]]).unwrap();
        let s = channel_stats(&f).unwrap();
        assert!((s.mu()[0] - 4.0).abs() < 1e-12);
        assert!((s.sigma()[0] - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn channel_stats_constant_channel_clamps_sigma() {
        let f = FeatureMap::from_rows(&[&[2.0, 2.0], &[2.0, 2.0]]).unwrap();
        let s = channel_stats(&f).unwrap();
        assert_eq!(s.mu()[0], 2.0);
        assert_eq!(s.sigma()[0], EPSILON_SIGMA);
    }

    #[test]
    fn channel_stats_shift_invariance() {
        let base = random_map(4, 6, 1, 11);
        let shifted = FeatureMap::from_shape_fn(4, 6, 2, |(i, j, k)| {
            let v = base.data()[[i, j, 0]];
            if k == 0 {
                v
            } else {
                v + 10.0
            }
        })
        .unwrap();
        let s = channel_stats(&shifted).unwrap();
        assert!((s.mu()[1] - (s.mu()[0] + 10.0)).abs() < 1e-10);
        assert!((s.sigma()[1] - s.sigma()[0]).abs() < 1e-10);
    }

    #[test]
    fn feature_map_rejects_non_finite() {
        let arr = array![[[1.0, f64::NAN]]];
        match FeatureMap::new(arr) {
            Err(CoreError::NonFinite { channel: 1, .. }) => {}
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn adain_self_identity() {
        let f = random_map(5, 7, 3, 21);
        let out = adain(&f, &channel_stats(&f).unwrap()).unwrap();
        for (a, b) in f.data().iter().zip(out.data().iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn adain_unit_style_values() {
        let f = FeatureMap::from_rows(&[&[1.0, 3.0], &[5.0, 7.0]]).unwrap();
        let target = StyleStats::new(vec![0.0], vec![1.0]).unwrap();
        let out = adain(&f, &target).unwrap();
        let r5 = 5f64.sqrt();
        let expect = [[-3.0 / r5, -1.0 / r5], [1.0 / r5, 3.0 / r5]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((out.data()[[i, j, 0]] - expect[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adain_transfers_exact_stats() {
        let f = random_map(6, 6, 4, 33);
        let s = random_style(4, 34);
        let out = channel_stats(&adain(&f, &s).unwrap()).unwrap();
        for k in 0..4 {
            assert!((out.mu()[k] - s.mu()[k]).abs() < 1e-9);
            assert!((out.sigma()[k] - s.sigma()[k]).abs() / s.sigma()[k] < 1e-9);
        }
    }

    #[test]
    fn adain_channel_mismatch_errors() {
        let f = random_map(2, 2, 3, 1);
        let s = random_style(2, 2);
        assert!(matches!(
            adain(&f, &s),
            Err(CoreError::ChannelMismatch { left: 3, right: 2 })
        ));
    }

    #[test]
    fn mix_styles_endpoints_and_midpoint() {
        let s = StyleStats::new(vec![2.0], vec![1.0]).unwrap();
        let t = StyleStats::new(vec![6.0], vec![3.0]).unwrap();
        let at0 = mix_styles(&s, &t, &MixWeight::scalar(0.0).unwrap()).unwrap();
        assert_eq!(at0, s);
        let at1 = mix_styles(&s, &t, &MixWeight::scalar(1.0).unwrap()).unwrap();
        assert_eq!(at1, t);
        let mid = mix_styles(&s, &t, &MixWeight::scalar(0.5).unwrap()).unwrap();
        assert_eq!(mid.mu()[0], 4.0);
        assert_eq!(mid.sigma()[0], 2.0);
    }

    #[test]
    fn mix_weight_rejects_out_of_range() {
        assert!(matches!(
            MixWeight::scalar(1.5),
            Err(CoreError::MixWeightOutOfRange { .. })
        ));
        assert!(MixWeight::per_channel(vec![0.0, 0.3, 1.0]).is_ok());
    }

    #[test]
    fn sample_mix_weight_support_and_determinism() {
        let a = sample_mix_weight(MixShape::PerChannel(64), &mut rng(7));
        for &v in a.values() {
            assert!((0.0..=1.0).contains(&v));
        }
        let b = sample_mix_weight(MixShape::PerChannel(64), &mut rng(7));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mix_weight_symmetry() {
        let mut r = rng(123);
        let n = 100_000;
        let mut sum = 0.0;
        let mut below_half = 0usize;
        for _ in 0..n {
            let w = sample_mix_weight(MixShape::Scalar, &mut r);
            let v = w.values()[0];
            sum += v;
            if v <= 0.5 {
                below_half += 1;
            }
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "empirical mean {mean}");
        let cdf_half = below_half as f64 / n as f64;
        assert!((cdf_half - 0.5).abs() < 0.01, "empirical cdf(0.5) {cdf_half}");
    }

    #[test]
    fn partition_tiles_and_reassembles() {
        let f = random_map(4, 4, 1, 5);
        let grid = partition(&f, 4).unwrap();
        assert_eq!(grid.patch_count(), 4);
        assert_eq!(grid.patch(0, 0).height(), 2);
        assert_eq!(grid.reassemble(), f);
    }

    #[test]
    fn partition_degenerate_single_patch() {
        let f = random_map(3, 5, 2, 6);
        let grid = partition(&f, 1).unwrap();
        assert_eq!(grid.patch(0, 0), &f);
    }

    #[test]
    fn partition_rejects_bad_shapes() {
        let f = random_map(5, 4, 1, 7);
        assert!(matches!(
            partition(&f, 4),
            Err(CoreError::IndivisibleGrid { h: 5, .. })
        ));
        let g = random_map(6, 6, 1, 8);
        assert!(matches!(
            partition(&g, 3),
            Err(CoreError::NonSquarePatchCount { m: 3 })
        ));
    }

    #[test]
    fn dominant_class_majority_tie_and_ignore() {
        let majority = LabelMap::from_rows(&[&[1, 1], &[2, 0]], 4, 255).unwrap();
        assert_eq!(dominant_class(&majority), Some(1));
        let tie = LabelMap::from_rows(&[&[2, 1], &[1, 2]], 4, 255).unwrap();
        assert_eq!(dominant_class(&tie), Some(1));
        let ignored = LabelMap::from_rows(&[&[255, 255], &[255, 255]], 4, 255).unwrap();
        assert_eq!(dominant_class(&ignored), None);
    }

    /// Brute-force histogram oracle over every 2x2 patch for small alphabets.
    #[test]
    fn dominant_class_matches_histogram_oracle() {
        for alphabet in [&[0u32, 1, 2, 255][..], &[0, 1, 2, 3][..]] {
            let n = alphabet.len();
            for code in 0..n.pow(4) {
                let mut vals = [0u32; 4];
                let mut rem = code;
                for v in &mut vals {
                    *v = alphabet[rem % n];
                    rem /= n;
                }
                let patch =
                    LabelMap::from_rows(&[&[vals[0], vals[1]], &[vals[2], vals[3]]], 4, 255)
                        .unwrap();
                // oracle: count occurrences, pick max count with lowest id
                let mut best: Option<u32> = None;
                let mut best_count = 0usize;
                for id in 0..4u32 {
                    let count = vals.iter().filter(|&&v| v == id).count();
                    if count > best_count {
                        best = Some(id);
                        best_count = count;
                    }
                }
                assert_eq!(dominant_class(&patch), best, "patch {vals:?}");
            }
        }
    }

    #[test]
    fn perturb_snr_norm_ratios() {
        let s = random_style(32, 99);
        for (snr, expect) in [(20.0, 0.1), (0.0, 1.0)] {
            let p = perturb_with_snr(&s, snr, &mut rng(1)).unwrap();
            let noise: Vec<f64> = p.mu().iter().zip(s.mu()).map(|(a, b)| a - b).collect();
            let ratio = norm(&noise) / norm(s.mu());
            assert!(
                (ratio - expect).abs() / expect < 1e-6,
                "snr {snr}: ratio {ratio}"
            );
        }
    }

    #[test]
    fn perturb_snr_infinite_is_identity() {
        let s = random_style(8, 3);
        let p = perturb_with_snr(&s, f64::INFINITY, &mut rng(4)).unwrap();
        assert_eq!(p, s);
    }

    #[test]
    fn perturb_snr_zero_norm_mu_errors() {
        let s = StyleStats::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            perturb_with_snr(&s, 20.0, &mut rng(5)),
            Err(CoreError::DegenerateSignal { which: "mu" })
        ));
    }

    #[test]
    fn perturb_keeps_sigma_clamped() {
        let s = StyleStats::new(vec![1.0; 4], vec![EPSILON_SIGMA; 4]).unwrap();
        let p = perturb_with_snr(&s, -20.0, &mut rng(6)).unwrap();
        for &v in p.sigma() {
            assert!(v >= EPSILON_SIGMA);
        }
    }
}
