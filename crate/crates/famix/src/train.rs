//! Training with patch-wise style randomization, plus every baseline arm:
//! direct restylization, class-wise source mixing, SNR-noise banks, vanilla
//! MixStyle, and plain supervised training.
//!
//! The randomization sits on the low-level (stride 4) features, where the
//! styles were mined. Statistics inside the restylization are treated as
//! constants during backprop, so gradients pass through as a per-channel
//! scale.

use crate::bank::{
    BankEntry, BankError, BankMetadata, MissingStyleFallback, Reader, StyleBank, Writer,
};
use crate::data::{augment_sample, AugmentConfig, SegDataset};
use crate::model::{FreezePolicy, FreezePreset, ModelConfig, ModelError, SegModel};
use crate::nn::{cross_entropy, poly_lr, SgdMomentum, Stage};
use crate::stats::{
    channel_stats, dominant_class, mix_styles, partition, perturb_with_snr, sample_mix_weight,
    CoreError, FeatureMap, LabelMap, MixShape, MixWeight,
};
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid augment mode: {0}")]
    InvalidMode(String),
    #[error("mode requires a {needed} bank but none was supplied")]
    MissingBank { needed: &'static str },
    #[error("vanilla style mixing needs a batch of at least 2, got {0}")]
    DegenerateBatch(usize),
    #[error("training diverged: non-finite loss at iteration {iteration}")]
    Divergence { iteration: u64 },
    #[error("batch has {images} images but {labels} label maps")]
    BatchMismatch { images: usize, labels: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
}

/// What fills the style banks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AugmentVariant {
    /// Prompt-mined styles.
    Language,
    /// Source styles perturbed at a decibel signal-to-noise ratio.
    Noise { snr_db: f64 },
    /// No augmentation.
    None,
}

/// Which set styles are sampled from at training time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixSource {
    /// The augmented (mined or perturbed) set.
    Mined,
    /// Raw source styles.
    Source,
    /// The union of both.
    SourceAndMined,
}

/// Patch granularity of the randomization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locality {
    /// Grid of m patches per map.
    LocalPerPatch,
    /// The whole map treated as a single patch.
    GlobalPerMap,
}

/// Full description of the augmentation arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentMode {
    pub variant: AugmentVariant,
    pub mix: bool,
    pub mix_source: MixSource,
    pub locality: Locality,
    /// Probability of applying randomization to a batch; 1.0 by default.
    pub apply_prob: f64,
    /// Sample one mixing weight per channel instead of a scalar.
    pub per_channel_alpha: bool,
}

impl AugmentMode {
    pub fn language() -> Self {
        Self {
            variant: AugmentVariant::Language,
            mix: true,
            mix_source: MixSource::Mined,
            locality: Locality::LocalPerPatch,
            apply_prob: 1.0,
            per_channel_alpha: false,
        }
    }

    pub fn passthrough() -> Self {
        Self {
            variant: AugmentVariant::None,
            mix: false,
            mix_source: MixSource::Source,
            locality: Locality::LocalPerPatch,
            apply_prob: 1.0,
            per_channel_alpha: false,
        }
    }

    /// The component grid: augment on/off crossed with mix on/off.
    pub fn for_components(augment: bool, mix: bool) -> Self {
        let mut mode = Self::language();
        mode.mix = mix;
        if !augment {
            mode.variant = AugmentVariant::None;
            mode.mix_source = MixSource::Source;
        }
        mode
    }

    pub fn is_passthrough(&self) -> bool {
        matches!(self.variant, AugmentVariant::None) && !self.mix
    }

    /// Whether the arm actually samples from the mined set.
    pub fn needs_mined_bank(&self) -> bool {
        matches!(self.variant, AugmentVariant::Language)
            && !(self.mix && self.mix_source == MixSource::Source)
    }

    pub fn needs_source_set(&self) -> bool {
        if self.is_passthrough() {
            return false;
        }
        matches!(self.variant, AugmentVariant::Noise { .. })
            || (self.mix
                && matches!(self.mix_source, MixSource::Source | MixSource::SourceAndMined))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.apply_prob) || !self.apply_prob.is_finite() {
            return Err(TrainError::InvalidMode(format!(
                "apply_prob {} outside [0, 1]",
                self.apply_prob
            )));
        }
        if let AugmentVariant::Noise { snr_db } = self.variant {
            if snr_db.is_nan() {
                return Err(TrainError::InvalidMode("snr_db is NaN".into()));
            }
        }
        if matches!(self.variant, AugmentVariant::None)
            && self.mix
            && self.mix_source != MixSource::Source
        {
            return Err(TrainError::InvalidMode(
                "mixing without augmentation must sample source styles (mix_source = source)"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Per-batch record of what the randomization did, for backprop and logging.
pub struct RandomizeCache {
    /// Per map, per patch (row-major): per-channel gradient scale, or `None`
    /// when the patch was left untouched.
    scales: Vec<Vec<Option<Vec<f64>>>>,
    side: usize,
    pub alpha: Option<MixWeight>,
    pub applied: bool,
}

impl RandomizeCache {
    fn identity(batch: usize) -> Self {
        Self {
            scales: vec![Vec::new(); batch],
            side: 1,
            alpha: None,
            applied: false,
        }
    }

    /// Mean mixing weight, for log lines.
    pub fn alpha_scalar(&self) -> Option<f64> {
        self.alpha.as_ref().map(|a| {
            a.values().iter().sum::<f64>() / a.values().len() as f64
        })
    }
}

/// Patch-wise style randomization of a feature batch.
///
/// Draws one mixing weight per batch, then per grid patch: queries the
/// dominant class, samples a style from the bank, interpolates it with the
/// patch's own statistics and restylizes in place. With `mix` off the patch
/// is restylized directly to the sampled style; with the passthrough mode the
/// batch is returned bit-exactly.
pub fn randomize_batch(
    features: &[FeatureMap],
    labels: &[LabelMap],
    bank: &StyleBank,
    mode: &AugmentMode,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Vec<FeatureMap>, TrainError> {
    randomize_batch_impl(features, labels, bank, mode, m, None, rng).map(|(out, _)| out)
}

/// Test and ablation hook: identical to [`randomize_batch`] with the batch
/// mixing weight pinned instead of drawn.
pub fn randomize_batch_with_alpha(
    features: &[FeatureMap],
    labels: &[LabelMap],
    bank: &StyleBank,
    mode: &AugmentMode,
    m: usize,
    alpha: MixWeight,
    rng: &mut impl Rng,
) -> Result<Vec<FeatureMap>, TrainError> {
    randomize_batch_impl(features, labels, bank, mode, m, Some(alpha), rng).map(|(out, _)| out)
}

pub(crate) fn randomize_batch_impl(
    features: &[FeatureMap],
    labels: &[LabelMap],
    bank: &StyleBank,
    mode: &AugmentMode,
    m: usize,
    forced_alpha: Option<MixWeight>,
    rng: &mut impl Rng,
) -> Result<(Vec<FeatureMap>, RandomizeCache), TrainError> {
    mode.validate()?;
    if features.len() != labels.len() {
        return Err(TrainError::BatchMismatch {
            images: features.len(),
            labels: labels.len(),
        });
    }
    if mode.is_passthrough() {
        return Ok((features.to_vec(), RandomizeCache::identity(features.len())));
    }
    if mode.apply_prob < 1.0 && !rng.gen_bool(mode.apply_prob) {
        return Ok((features.to_vec(), RandomizeCache::identity(features.len())));
    }
    let m = match mode.locality {
        Locality::LocalPerPatch => m,
        Locality::GlobalPerMap => 1,
    };
    let channels = features
        .first()
        .map(FeatureMap::channels)
        .unwrap_or(bank.channels());
    if bank.channels() != channels {
        return Err(TrainError::Bank(BankError::ChannelMismatch {
            expected: channels,
            got: bank.channels(),
        }));
    }
    // one mixing weight for the whole batch, drawn before the patch loop
    let alpha = if mode.mix {
        Some(match forced_alpha {
            Some(a) => a,
            None => {
                let shape = if mode.per_channel_alpha {
                    MixShape::PerChannel(channels)
                } else {
                    MixShape::Scalar
                };
                sample_mix_weight(shape, rng)
            }
        })
    } else {
        None
    };
    let mut outputs = Vec::with_capacity(features.len());
    let mut all_scales = Vec::with_capacity(features.len());
    for (f, y) in features.iter().zip(labels) {
        let grid = partition(f, m)?;
        let label_patches = y.partition(m)?;
        let side = grid.side();
        let mut patches: Vec<FeatureMap> = grid.patches().to_vec();
        let mut scales: Vec<Option<Vec<f64>>> = vec![None; patches.len()];
        for (idx, patch) in patches.iter_mut().enumerate() {
            let Some(class) = dominant_class(&label_patches[idx]) else {
                continue;
            };
            let Some(style) =
                bank.sample_style(class, rng, MissingStyleFallback::SkipMixing)?
            else {
                continue;
            };
            let own = channel_stats(patch)?;
            let target = match &alpha {
                Some(a) => mix_styles(&own, &style, a)?,
                None => style,
            };
            let scale: Vec<f64> = target
                .sigma()
                .iter()
                .zip(own.sigma())
                .map(|(t, s)| t / s)
                .collect();
            let restylized = crate::stats::adain(patch, &target)?;
            *patch = restylized;
            scales[idx] = Some(scale);
        }
        let restyled = PatchAssembler {
            side,
            patches: &patches,
        }
        .assemble();
        outputs.push(restyled);
        all_scales.push(scales);
    }
    let side = (m as f64).sqrt().round() as usize;
    Ok((
        outputs,
        RandomizeCache {
            scales: all_scales,
            side,
            alpha,
            applied: true,
        },
    ))
}

struct PatchAssembler<'a> {
    side: usize,
    patches: &'a [FeatureMap],
}

impl PatchAssembler<'_> {
    fn assemble(&self) -> FeatureMap {
        let (ph, pw, c) = (
            self.patches[0].height(),
            self.patches[0].width(),
            self.patches[0].channels(),
        );
        let mut data = Array3::zeros((ph * self.side, pw * self.side, c));
        for i in 0..self.side {
            for j in 0..self.side {
                data.slice_mut(ndarray::s![i * ph..(i + 1) * ph, j * pw..(j + 1) * pw, ..])
                    .assign(self.patches[i * self.side + j].data());
            }
        }
        FeatureMap::new(data).expect("restylized features stay finite")
    }
}

/// Chain rule through the randomization: statistics are constants, so each
/// restylized patch scales its gradient per channel; untouched patches pass
/// gradients through unchanged.
pub(crate) fn randomize_backward(
    cache: &RandomizeCache,
    map_index: usize,
    dfeat: &Array3<f64>,
) -> Array3<f64> {
    if !cache.applied || cache.scales[map_index].is_empty() {
        return dfeat.clone();
    }
    let (h, w, _) = dfeat.dim();
    let side = cache.side;
    let (ph, pw) = (h / side, w / side);
    let mut out = dfeat.clone();
    for i in 0..side {
        for j in 0..side {
            if let Some(scale) = &cache.scales[map_index][i * side + j] {
                let mut patch = out.slice_mut(ndarray::s![
                    i * ph..(i + 1) * ph,
                    j * pw..(j + 1) * pw,
                    ..
                ]);
                for ((_, _, k), v) in patch.indexed_iter_mut() {
                    *v *= scale[k];
                }
            }
        }
    }
    out
}

/// Class-wise source styles: every patch's raw statistics filed under its
/// dominant class, no optimization.
pub fn build_source_style_set(
    batches: &[(Vec<FeatureMap>, Vec<LabelMap>)],
    m: usize,
    channels: usize,
    class_names: &[String],
) -> Result<StyleBank, TrainError> {
    let mut bank = StyleBank::new_class_wise(
        channels,
        class_names.to_vec(),
        BankMetadata {
            prompt_set_id: "source".to_string(),
            ..BankMetadata::default()
        },
    );
    for (batch_idx, (features, labels)) in batches.iter().enumerate() {
        if features.len() != labels.len() {
            return Err(TrainError::BatchMismatch {
                images: features.len(),
                labels: labels.len(),
            });
        }
        for (map_idx, (f, y)) in features.iter().zip(labels).enumerate() {
            let grid = partition(f, m)?;
            let label_patches = y.partition(m)?;
            for (patch_idx, patch) in grid.patches().iter().enumerate() {
                let Some(class) = dominant_class(&label_patches[patch_idx]) else {
                    continue;
                };
                let stats = channel_stats(patch)?;
                bank.push(
                    class,
                    BankEntry::from_style(
                        &stats,
                        "",
                        &format!("b{batch_idx}.m{map_idx}.p{patch_idx}"),
                    ),
                )?;
            }
        }
    }
    Ok(bank)
}

/// Perturbs every entry of a source set at the given SNR; zero-norm
/// statistics carry zero noise at any finite ratio and stay unchanged.
pub fn build_noise_bank(
    source: &StyleBank,
    snr_db: f64,
    rng: &mut impl Rng,
) -> Result<StyleBank, TrainError> {
    let mut bank = StyleBank::new_class_wise(
        source.channels(),
        source.class_names().to_vec(),
        BankMetadata {
            prompt_set_id: format!("noise:snr={snr_db}"),
            ..source.metadata().clone()
        },
    );
    for class in 0..source.num_classes() as u32 {
        for entry in source.entries(class) {
            let style = entry.style();
            let perturbed = match perturb_with_snr(&style, snr_db, rng) {
                Ok(p) => p,
                Err(CoreError::DegenerateSignal { .. }) => style,
                Err(e) => return Err(TrainError::Core(e)),
            };
            bank.push(
                class,
                BankEntry::from_style(&perturbed, "", &entry.source_id),
            )?;
        }
    }
    Ok(bank)
}

/// Resolves which bank the randomization samples from for a given mode.
pub fn effective_bank(
    mode: &AugmentMode,
    mined: Option<&StyleBank>,
    source: Option<&StyleBank>,
    rng: &mut impl Rng,
) -> Result<Option<StyleBank>, TrainError> {
    mode.validate()?;
    if mode.is_passthrough() {
        return Ok(None);
    }
    let source_req = || -> Result<&StyleBank, TrainError> {
        source.ok_or(TrainError::MissingBank { needed: "source" })
    };
    if mode.mix && mode.mix_source == MixSource::Source {
        return Ok(Some(source_req()?.clone()));
    }
    let augmented = match mode.variant {
        AugmentVariant::Language => mined
            .ok_or(TrainError::MissingBank { needed: "mined" })?
            .clone(),
        AugmentVariant::Noise { snr_db } => build_noise_bank(source_req()?, snr_db, rng)?,
        // variant=none with mixing validates to mix_source=source above;
        // variant=none without mixing is the passthrough handled earlier
        AugmentVariant::None => return Ok(Some(source_req()?.clone())),
    };
    let bank = if mode.mix && mode.mix_source == MixSource::SourceAndMined {
        source_req()?.merged_with(&augmented)?
    } else {
        augmented
    };
    Ok(Some(bank))
}

/// Record of one vanilla whole-map mixing call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixStyleRecord {
    pub alpha: f64,
    pub permutation: Vec<usize>,
}

/// Vanilla MixStyle baseline: batch-shuffled pairing, whole-map statistics
/// mixed with one scalar weight, no patches, no classes.
pub fn mixstyle_batch(
    features: &[FeatureMap],
    rng: &mut impl Rng,
) -> Result<(Vec<FeatureMap>, MixStyleRecord), TrainError> {
    let alpha = sample_mix_weight(MixShape::Scalar, rng).values()[0];
    mixstyle_batch_with_alpha(features, alpha, rng)
}

pub fn mixstyle_batch_with_alpha(
    features: &[FeatureMap],
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<FeatureMap>, MixStyleRecord), TrainError> {
    mixstyle_impl(features, alpha, rng).map(|(out, _, record)| (out, record))
}

fn mixstyle_impl(
    features: &[FeatureMap],
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<FeatureMap>, RandomizeCache, MixStyleRecord), TrainError> {
    let n = features.len();
    if n < 2 {
        return Err(TrainError::DegenerateBatch(n));
    }
    // derangement pairing: nobody mixes with itself
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            break;
        }
    }
    let weight = MixWeight::scalar(alpha)?;
    let stats: Vec<_> = features
        .iter()
        .map(channel_stats)
        .collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(n);
    let mut scales = Vec::with_capacity(n);
    for (i, f) in features.iter().enumerate() {
        let mixed = mix_styles(&stats[i], &stats[perm[i]], &weight)?;
        let scale: Vec<f64> = mixed
            .sigma()
            .iter()
            .zip(stats[i].sigma())
            .map(|(t, s)| t / s)
            .collect();
        out.push(crate::stats::adain(f, &mixed)?);
        scales.push(vec![Some(scale)]);
    }
    let cache = RandomizeCache {
        scales,
        side: 1,
        alpha: Some(weight),
        applied: true,
    };
    Ok((
        out,
        cache,
        MixStyleRecord {
            alpha,
            permutation: perm,
        },
    ))
}

/// Learning-rate and optimizer settings for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_decoder: f64,
    pub lr_backbone: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
}

impl ScheduleConfig {
    /// Desk-scale defaults: short runs at reduced learning rates.
    pub fn desk() -> Self {
        Self {
            iterations: 600,
            batch_size: 4,
            lr_decoder: 4e-2,
            lr_backbone: 4e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
        }
    }

    /// Full-scale settings: 40k iterations, batch 8, poly decay 0.9 from
    /// 1e-1 (decoder) and 1e-2 (backbone), momentum 0.9, weight decay 1e-4.
    pub fn paper() -> Self {
        Self {
            iterations: 40_000,
            batch_size: 8,
            lr_decoder: 1e-1,
            lr_backbone: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
        }
    }

    pub fn lr_at(&self, base: f64, t: u64) -> f64 {
        poly_lr(base, t, self.iterations, self.poly_power)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub phase: usize,
    pub loss: f64,
    pub lr_backbone: f64,
    pub lr_decoder: f64,
    /// Mean of the mixing weight drawn for the batch, when one was drawn.
    pub alpha: Option<f64>,
}

/// Mutable training state threaded through steps and checkpoints.
pub struct TrainState {
    pub model: SegModel,
    pub schedule: ScheduleConfig,
    pub grid_m: usize,
    pub iteration: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: SegModel, schedule: ScheduleConfig, grid_m: usize, seed: u64) -> Self {
        Self {
            model,
            schedule,
            grid_m,
            iteration: 0,
            seed,
        }
    }
}

fn split_mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-iteration RNG stream; resuming at iteration t replays it exactly.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_mix(seed ^ split_mix(iteration.wrapping_add(1))))
}

/// How the low-level features get restyled inside a step.
pub enum Randomization<'a> {
    /// Patch-wise bank sampling per the augment mode.
    Bank {
        mode: &'a AugmentMode,
        bank: Option<&'a StyleBank>,
    },
    /// Whole-map vanilla mixing within the batch.
    VanillaMixStyle,
}

/// One optimization step: forward through stem+layer1, randomize the
/// features, forward through the rest, pixel cross-entropy, SGD update of
/// trainable parameters only.
pub fn train_step(
    state: &mut TrainState,
    images: &[Array3<f64>],
    labels: &[LabelMap],
    randomization: Randomization<'_>,
    policy: &FreezePolicy,
    rng: &mut impl Rng,
) -> Result<StepRecord, TrainError> {
    if images.len() != labels.len() {
        return Err(TrainError::BatchMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    if images.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let m = state.grid_m;
    // low-stage forward per map
    let mut lows = Vec::with_capacity(images.len());
    let mut feats = Vec::with_capacity(images.len());
    for img in images {
        let (f1, low) = state.model.forward_low(img)?;
        feats.push(FeatureMap::new(f1).expect("finite stage output"));
        lows.push(low);
    }
    // style randomization on the feature batch
    let (feats, rand_cache) = match randomization {
        Randomization::Bank { mode, bank } => {
            mode.validate()?;
            match (mode.is_passthrough(), bank) {
                (true, _) => (feats, RandomizeCache::identity(images.len())),
                (false, Some(bank)) => {
                    randomize_batch_impl(&feats, labels, bank, mode, m, None, rng)?
                }
                (false, None) => return Err(TrainError::MissingBank { needed: "sampling" }),
            }
        }
        Randomization::VanillaMixStyle => {
            let alpha = sample_mix_weight(MixShape::Scalar, rng).values()[0];
            let (out, cache, _) = mixstyle_impl(&feats, alpha, rng)?;
            (out, cache)
        }
    };
    // rest of the network, loss and gradients
    state.model.params.zero_grads();
    let mut caches = Vec::with_capacity(images.len());
    let mut dlogits_all = Vec::with_capacity(images.len());
    let mut loss_sum = 0.0;
    let mut pixel_count = 0usize;
    for ((f, low), label) in feats.iter().zip(lows).zip(labels) {
        let (h, w) = (label.height(), label.width());
        let (logits, cache) = state.model.forward_from_features(low, f.data(), h, w);
        let (sum, count, dlogits) = cross_entropy(&logits, label.data(), label.ignore_index());
        loss_sum += sum;
        pixel_count += count;
        caches.push(cache);
        dlogits_all.push(dlogits);
    }
    if pixel_count == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let loss = loss_sum / pixel_count as f64;
    if !loss.is_finite() {
        return Err(TrainError::Divergence {
            iteration: state.iteration,
        });
    }
    for (i, cache) in caches.iter().enumerate() {
        let mut dlogits = dlogits_all[i].clone();
        dlogits.mapv_inplace(|v| v / pixel_count as f64);
        let dfeat = state.model.backward_to_features(cache, &dlogits, policy);
        if policy.stem || policy.layer1 {
            let dfeat = randomize_backward(&rand_cache, i, &dfeat);
            state.model.backward_low(cache, &dfeat, policy);
        }
    }
    // poly-decayed SGD on trainable stages only
    let lr_backbone = state.schedule.lr_at(state.schedule.lr_backbone, state.iteration);
    let lr_decoder = state.schedule.lr_at(state.schedule.lr_decoder, state.iteration);
    let optimizer = SgdMomentum {
        momentum: state.schedule.momentum,
        weight_decay: state.schedule.weight_decay,
    };
    optimizer.step(
        &mut state.model.params,
        |stage| {
            if stage == Stage::Decoder {
                lr_decoder
            } else {
                lr_backbone
            }
        },
        |stage| policy.trainable(stage),
    );
    let record = StepRecord {
        iteration: state.iteration,
        phase: 0,
        loss,
        lr_backbone,
        lr_decoder,
        alpha: rand_cache.alpha_scalar(),
    };
    state.iteration += 1;
    Ok(record)
}

/// A full training run: phases from the freeze preset, per-iteration batch
/// sampling and augmentation, one log record per step.
pub struct RunPlan {
    pub schedule: ScheduleConfig,
    pub preset: FreezePreset,
    pub mode: AugmentMode,
    pub grid_m: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Pause the run at this iteration (for checkpointing); the decay horizon
    /// stays `schedule.iterations`.
    pub stop_after: Option<u64>,
    /// Replace bank randomization with whole-map vanilla mixing.
    pub vanilla_mixstyle: bool,
}

pub fn run_schedule(
    state: &mut TrainState,
    dataset: &SegDataset,
    bank: Option<&StyleBank>,
    plan: &RunPlan,
) -> Result<Vec<StepRecord>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    plan.mode.validate()?;
    if plan.vanilla_mixstyle && !plan.mode.is_passthrough() {
        return Err(TrainError::InvalidMode(
            "vanilla mixing replaces bank randomization; use the passthrough mode with it".into(),
        ));
    }
    if !plan.vanilla_mixstyle && !plan.mode.is_passthrough() && bank.is_none() {
        return Err(TrainError::MissingBank { needed: "sampling" });
    }
    let phases = plan.preset.phases();
    let total = plan.schedule.iterations;
    let stop = plan.stop_after.unwrap_or(total).min(total);
    let phase_len = total / phases.len() as u64;
    let mut records = Vec::with_capacity(stop as usize);
    while state.iteration < stop {
        let phase_idx = ((state.iteration / phase_len.max(1)) as usize).min(phases.len() - 1);
        let policy = &phases[phase_idx];
        let mut rng = iteration_rng(plan.seed, state.iteration);
        let mut images = Vec::with_capacity(plan.schedule.batch_size);
        let mut labels = Vec::with_capacity(plan.schedule.batch_size);
        for _ in 0..plan.schedule.batch_size {
            let idx = rng.gen_range(0..dataset.len());
            let (img, lbl) =
                augment_sample(&dataset.images[idx], &dataset.labels[idx], plan.augment, &mut rng);
            images.push(img);
            labels.push(lbl);
        }
        let randomization = if plan.vanilla_mixstyle {
            Randomization::VanillaMixStyle
        } else {
            Randomization::Bank {
                mode: &plan.mode,
                bank,
            }
        };
        let mut record = train_step(state, &images, &labels, randomization, policy, &mut rng)?;
        record.phase = phase_idx;
        records.push(record);
    }
    Ok(records)
}

// -- checkpointing ---------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"FAMIXCKP";
const CKPT_VERSION: u32 = 1;

fn stage_to_byte(stage: Stage) -> u8 {
    Stage::ALL.iter().position(|&s| s == stage).unwrap() as u8
}

fn stage_from_byte(b: u8) -> Result<Stage, TrainError> {
    Stage::ALL
        .get(b as usize)
        .copied()
        .ok_or_else(|| TrainError::CheckpointFormat(format!("bad stage byte {b}")))
}

/// Serializes model weights, optimizer momentum and run position; the
/// frozen/trainable partition is recorded via the preset name.
pub fn save_checkpoint(
    state: &TrainState,
    preset: FreezePreset,
    path: &Path,
) -> Result<(), TrainError> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(CKPT_MAGIC);
    w.u32(CKPT_VERSION);
    let c = state.model.config();
    for v in [
        c.in_channels,
        c.c1,
        c.c2,
        c.c3,
        c.c4,
        c.aspp_channels,
        c.skip_channels,
        c.head_channels,
        c.num_classes,
    ] {
        w.u32(v as u32);
    }
    w.str16(preset.name());
    w.u64(state.iteration);
    w.u64(state.seed);
    w.u64(state.grid_m as u64);
    w.f64(state.schedule.lr_decoder);
    w.f64(state.schedule.lr_backbone);
    w.f64(state.schedule.momentum);
    w.f64(state.schedule.weight_decay);
    w.f64(state.schedule.poly_power);
    w.u64(state.schedule.iterations);
    w.u32(state.schedule.batch_size as u32);
    w.u32(state.model.params.blocks().len() as u32);
    for block in state.model.params.blocks() {
        w.str16(&block.name);
        w.u8(stage_to_byte(block.stage));
        w.u8(block.shape.len() as u8);
        for &d in &block.shape {
            w.u32(d as u32);
        }
        for &v in &block.data {
            w.f64(v);
        }
        for &v in &block.vel {
            w.f64(v);
        }
    }
    std::fs::write(path, w.buf)?;
    Ok(())
}

pub struct Checkpoint {
    pub state: TrainState,
    pub preset: FreezePreset,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path)?;
    let fmt = |e: BankError| TrainError::CheckpointFormat(e.to_string());
    let mut r = Reader::new(&bytes);
    if r.take(8, "magic").map_err(fmt)? != CKPT_MAGIC {
        return Err(TrainError::CheckpointFormat("bad magic".into()));
    }
    let version = r.u32("version").map_err(fmt)?;
    if version != CKPT_VERSION {
        return Err(TrainError::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }
    let mut dims = [0usize; 9];
    for d in &mut dims {
        *d = r.u32("model config").map_err(fmt)? as usize;
    }
    let config = ModelConfig {
        in_channels: dims[0],
        c1: dims[1],
        c2: dims[2],
        c3: dims[3],
        c4: dims[4],
        aspp_channels: dims[5],
        skip_channels: dims[6],
        head_channels: dims[7],
        num_classes: dims[8],
    };
    let preset = FreezePreset::parse(&r.str16("preset").map_err(fmt)?)?;
    let iteration = r.u64("iteration").map_err(fmt)?;
    let seed = r.u64("seed").map_err(fmt)?;
    let grid_m = r.u64("grid").map_err(fmt)? as usize;
    let schedule = ScheduleConfig {
        lr_decoder: r.f64("lr_decoder").map_err(fmt)?,
        lr_backbone: r.f64("lr_backbone").map_err(fmt)?,
        momentum: r.f64("momentum").map_err(fmt)?,
        weight_decay: r.f64("weight_decay").map_err(fmt)?,
        poly_power: r.f64("poly_power").map_err(fmt)?,
        iterations: r.u64("iterations").map_err(fmt)?,
        batch_size: r.u32("batch_size").map_err(fmt)? as usize,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = SegModel::new(config, &mut rng);
    let block_count = r.u32("block count").map_err(fmt)? as usize;
    if block_count != model.params.blocks().len() {
        return Err(TrainError::CheckpointFormat(format!(
            "checkpoint has {block_count} blocks, model expects {}",
            model.params.blocks().len()
        )));
    }
    for i in 0..block_count {
        let name = r.str16("block name").map_err(fmt)?;
        let stage = stage_from_byte(r.u8("stage").map_err(fmt)?)?;
        let ndims = r.u8("ndims").map_err(fmt)? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u32("dim").map_err(fmt)? as usize);
        }
        let block = &mut model.params.blocks_mut()[i];
        if block.name != name || block.stage != stage || block.shape != shape {
            return Err(TrainError::CheckpointFormat(format!(
                "block {i} mismatch: checkpoint has {name}, model has {}",
                block.name
            )));
        }
        for v in &mut block.data {
            *v = r.f64("weights").map_err(fmt)?;
        }
        for v in &mut block.vel {
            *v = r.f64("momentum").map_err(fmt)?;
        }
    }
    if r.remaining() != 0 {
        return Err(TrainError::CheckpointFormat(format!(
            "{} trailing bytes",
            r.remaining()
        )));
    }
    let mut state = TrainState::new(model, schedule, grid_m, seed);
    state.iteration = iteration;
    Ok(Checkpoint { state, preset })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_two_domain_corpus, SynthConfig};
    use crate::stats::adain;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_feature(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut r = rng(seed);
        FeatureMap::from_shape_fn(h, w, c, |_| r.gen_range(-1.0..1.0)).unwrap()
    }

    /// One entry per class so the sampled style is known in advance.
    fn singleton_bank(channels: usize, k: usize) -> StyleBank {
        let names: Vec<String> = (0..k).map(|i| format!("class{i}")).collect();
        let mut bank = StyleBank::new_class_wise(channels, names, BankMetadata::default());
        for class in 0..k as u32 {
            let mu: Vec<f64> = (0..channels).map(|c| class as f64 + c as f64 * 0.1).collect();
            let sigma: Vec<f64> = (0..channels).map(|c| 0.5 + c as f64 * 0.05).collect();
            bank.push(
                class,
                BankEntry::from_style(
                    &crate::stats::StyleStats::new(mu, sigma).unwrap(),
                    "",
                    &format!("fixed{class}"),
                ),
            )
            .unwrap();
        }
        bank
    }

    fn quadrant_labels(size: usize, classes: [u32; 4]) -> LabelMap {
        let half = size / 2;
        let data = ndarray::Array2::from_shape_fn((size, size), |(y, x)| {
            match (y < half, x < half) {
                (true, true) => classes[0],
                (true, false) => classes[1],
                (false, true) => classes[2],
                (false, false) => classes[3],
            }
        });
        LabelMap::new(data, 4, 255).unwrap()
    }

    #[test]
    fn mode_validation_table() {
        let mut bad_prob = AugmentMode::language();
        bad_prob.apply_prob = 1.5;
        assert!(bad_prob.validate().is_err());
        let mut none_mix_mined = AugmentMode::for_components(false, true);
        none_mix_mined.mix_source = MixSource::Mined;
        assert!(none_mix_mined.validate().is_err());
        assert!(AugmentMode::for_components(false, true).validate().is_ok());
        assert!(AugmentMode::language().validate().is_ok());
        let mut nan_snr = AugmentMode::language();
        nan_snr.variant = AugmentVariant::Noise { snr_db: f64::NAN };
        assert!(nan_snr.validate().is_err());
    }

    #[test]
    fn passthrough_is_bit_exact() {
        let features = vec![random_feature(8, 8, 3, 1), random_feature(8, 8, 3, 2)];
        let labels = vec![quadrant_labels(8, [0, 1, 2, 3]), quadrant_labels(8, [1, 1, 2, 2])];
        let bank = singleton_bank(3, 4);
        let out = randomize_batch(
            &features,
            &labels,
            &bank,
            &AugmentMode::passthrough(),
            4,
            &mut rng(3),
        )
        .unwrap();
        assert_eq!(out, features);
    }

    #[test]
    fn alpha_zero_is_identity_within_tolerance() {
        let features = vec![random_feature(8, 8, 3, 5)];
        let labels = vec![quadrant_labels(8, [0, 1, 2, 3])];
        let bank = singleton_bank(3, 4);
        let out = randomize_batch_with_alpha(
            &features,
            &labels,
            &bank,
            &AugmentMode::language(),
            4,
            MixWeight::scalar(0.0).unwrap(),
            &mut rng(7),
        )
        .unwrap();
        for (a, b) in out[0].data().iter().zip(features[0].data().iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn alpha_one_matches_direct_restylization_on_stats() {
        let features = vec![random_feature(8, 8, 3, 6)];
        let labels = vec![quadrant_labels(8, [0, 1, 2, 3])];
        let bank = singleton_bank(3, 4);
        let mixed = randomize_batch_with_alpha(
            &features,
            &labels,
            &bank,
            &AugmentMode::language(),
            4,
            MixWeight::scalar(1.0).unwrap(),
            &mut rng(8),
        )
        .unwrap();
        let mut direct_mode = AugmentMode::language();
        direct_mode.mix = false;
        let direct =
            randomize_batch(&features, &labels, &bank, &direct_mode, 4, &mut rng(8)).unwrap();
        // exact agreement on per-patch statistics with the sampled bank style
        for out in [&mixed, &direct] {
            let grid = partition(&out[0], 4).unwrap();
            let label_patches = labels[0].partition(4).unwrap();
            for (idx, patch) in grid.patches().iter().enumerate() {
                let class = dominant_class(&label_patches[idx]).unwrap();
                let expect = bank.entries(class)[0].style();
                let got = channel_stats(patch).unwrap();
                for k in 0..3 {
                    assert!((got.mu()[k] - expect.mu()[k]).abs() < 1e-9);
                    assert!((got.sigma()[k] - expect.sigma()[k]).abs() < 1e-9);
                }
            }
        }
        for (a, b) in mixed[0].data().iter().zip(direct[0].data().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn all_ignore_with_skip_fallback_is_identity() {
        let features = vec![random_feature(8, 8, 3, 9)];
        let labels = vec![quadrant_labels(8, [255, 255, 255, 255])];
        let bank = singleton_bank(3, 4);
        let out = randomize_batch(
            &features,
            &labels,
            &bank,
            &AugmentMode::language(),
            4,
            &mut rng(10),
        )
        .unwrap();
        assert_eq!(out, features);
        // empty-class bank falls back to skip as well
        let empty = StyleBank::new_class_wise(
            3,
            (0..4).map(|i| format!("c{i}")).collect(),
            BankMetadata::default(),
        );
        let labeled = vec![quadrant_labels(8, [0, 1, 2, 3])];
        let out = randomize_batch(
            &features,
            &labeled,
            &empty,
            &AugmentMode::language(),
            4,
            &mut rng(11),
        )
        .unwrap();
        assert_eq!(out, features);
    }

    #[test]
    fn randomize_preserves_shape_and_finiteness() {
        let features = vec![random_feature(16, 16, 4, 12)];
        let labels = vec![quadrant_labels(16, [0, 1, 2, 3])];
        let bank = singleton_bank(4, 4);
        let out =
            randomize_batch(&features, &labels, &bank, &AugmentMode::language(), 16, &mut rng(13))
                .unwrap();
        assert_eq!(out[0].height(), 16);
        assert_eq!(out[0].width(), 16);
        assert_eq!(out[0].channels(), 4);
        assert!(out[0].data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn global_locality_treats_map_as_one_patch() {
        let features = vec![random_feature(8, 8, 3, 20)];
        let labels = vec![quadrant_labels(8, [2, 2, 2, 1])];
        let bank = singleton_bank(3, 4);
        let mut mode = AugmentMode::language();
        mode.locality = Locality::GlobalPerMap;
        mode.mix = false;
        let out = randomize_batch(&features, &labels, &bank, &mode, 4, &mut rng(21)).unwrap();
        // whole map takes the dominant class (2) style
        let got = channel_stats(&out[0]).unwrap();
        let expect = bank.entries(2)[0].style();
        for k in 0..3 {
            assert!((got.mu()[k] - expect.mu()[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn source_style_set_counts_every_patch() {
        let features = vec![random_feature(8, 8, 3, 14), random_feature(8, 8, 3, 15)];
        // map 1: classes 0 dominant in 3 patches, 1 in 1; map 2: all class 1
        let labels = vec![
            quadrant_labels(8, [0, 0, 0, 1]),
            quadrant_labels(8, [1, 1, 1, 1]),
        ];
        let names: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
        let bank =
            build_source_style_set(&[(features.clone(), labels.clone())], 4, 3, &names).unwrap();
        assert_eq!(bank.class_counts(), vec![3, 5, 0, 0]);
        // stored statistics match the oracle recomputation
        let grid = partition(&features[0], 4).unwrap();
        let expect = channel_stats(grid.patch(0, 0)).unwrap();
        let got = bank.entries(0)[0].style();
        for k in 0..3 {
            assert!((got.mu()[k] - expect.mu()[k]).abs() < 1e-6);
        }
        // all-ignore patches contribute nothing
        let ignore_labels = vec![quadrant_labels(8, [255, 255, 255, 255])];
        let empty = build_source_style_set(
            &[(vec![features[0].clone()], ignore_labels)],
            4,
            3,
            &names,
        )
        .unwrap();
        assert_eq!(empty.total_entries(), 0);
    }

    #[test]
    fn noise_bank_perturbs_at_the_requested_ratio() {
        let names: Vec<String> = vec!["a".into()];
        let mut source = StyleBank::new_class_wise(16, names, BankMetadata::default());
        let mu: Vec<f64> = (0..16).map(|i| 1.0 + i as f64 * 0.1).collect();
        let sigma: Vec<f64> = (0..16).map(|i| 0.5 + i as f64 * 0.02).collect();
        source
            .push(
                0,
                BankEntry::from_style(
                    &crate::stats::StyleStats::new(mu.clone(), sigma).unwrap(),
                    "",
                    "s0",
                ),
            )
            .unwrap();
        let bank = build_noise_bank(&source, 20.0, &mut rng(16)).unwrap();
        let perturbed = bank.entries(0)[0].style();
        let noise: Vec<f64> = perturbed.mu().iter().zip(&mu).map(|(a, b)| a - b).collect();
        let ratio = noise.iter().map(|v| v * v).sum::<f64>().sqrt()
            / mu.iter().map(|v| v * v).sum::<f64>().sqrt();
        // float32 storage rounds the exact ratio slightly
        assert!((ratio - 0.1).abs() < 1e-4, "ratio {ratio}");
        // infinite SNR keeps entries identical
        let same = build_noise_bank(&source, f64::INFINITY, &mut rng(17)).unwrap();
        assert_eq!(same.entries(0)[0].mu, source.entries(0)[0].mu);
    }

    #[test]
    fn effective_bank_resolution_matrix() {
        let mined = singleton_bank(3, 2);
        let source = {
            let mut b = StyleBank::new_class_wise(
                3,
                vec!["class0".into(), "class1".into()],
                BankMetadata::default(),
            );
            b.push(
                0,
                BankEntry::from_style(
                    &crate::stats::StyleStats::new(vec![9.0; 3], vec![1.0; 3]).unwrap(),
                    "",
                    "src",
                ),
            )
            .unwrap();
            b
        };
        // passthrough needs nothing
        assert!(effective_bank(
            &AugmentMode::passthrough(),
            None,
            None,
            &mut rng(1)
        )
        .unwrap()
        .is_none());
        // language + T
        let bank = effective_bank(&AugmentMode::language(), Some(&mined), None, &mut rng(2))
            .unwrap()
            .unwrap();
        assert_eq!(bank.total_entries(), mined.total_entries());
        // language + missing mined bank errors
        assert!(matches!(
            effective_bank(&AugmentMode::language(), None, Some(&source), &mut rng(3)),
            Err(TrainError::MissingBank { needed: "mined" })
        ));
        // S union T merges
        let mut union_mode = AugmentMode::language();
        union_mode.mix_source = MixSource::SourceAndMined;
        let bank = effective_bank(&union_mode, Some(&mined), Some(&source), &mut rng(4))
            .unwrap()
            .unwrap();
        assert_eq!(
            bank.total_entries(),
            mined.total_entries() + source.total_entries()
        );
        // augment-off mix-on samples source styles
        let bank = effective_bank(
            &AugmentMode::for_components(false, true),
            None,
            Some(&source),
            &mut rng(5),
        )
        .unwrap()
        .unwrap();
        assert_eq!(bank.total_entries(), source.total_entries());
    }

    #[test]
    fn mixstyle_identity_partner_and_derangement() {
        let features: Vec<FeatureMap> =
            (0..4).map(|i| random_feature(6, 6, 3, 30 + i)).collect();
        let (out, record) = mixstyle_batch_with_alpha(&features, 0.0, &mut rng(31)).unwrap();
        for (o, f) in out.iter().zip(&features) {
            for (a, b) in o.data().iter().zip(f.data().iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        // permutation is a derangement (identity never survives the loop)
        assert!(record.permutation.iter().enumerate().all(|(i, &p)| i != p));
        // alpha = 1: each map carries its partner's statistics
        let (out, record) = mixstyle_batch_with_alpha(&features, 1.0, &mut rng(32)).unwrap();
        for (i, o) in out.iter().enumerate() {
            let got = channel_stats(o).unwrap();
            let expect = channel_stats(&features[record.permutation[i]]).unwrap();
            for k in 0..3 {
                assert!((got.mu()[k] - expect.mu()[k]).abs() < 1e-9);
            }
        }
        // reproducibility: the record pins the pairing
        let (_, r1) = mixstyle_batch(&features, &mut rng(33)).unwrap();
        let (_, r2) = mixstyle_batch(&features, &mut rng(33)).unwrap();
        assert_eq!(r1, r2);
        assert!(matches!(
            mixstyle_batch(&features[..1], &mut rng(34)),
            Err(TrainError::DegenerateBatch(1))
        ));
    }

    fn tiny_state(seed: u64) -> TrainState {
        let mut r = rng(seed);
        let model = SegModel::new(ModelConfig::desk(4), &mut r);
        let schedule = ScheduleConfig {
            iterations: 10,
            batch_size: 2,
            lr_decoder: 0.01,
            lr_backbone: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
        };
        TrainState::new(model, schedule, 4, seed)
    }

    fn tiny_batch(seed: u64) -> (Vec<Array3<f64>>, Vec<LabelMap>) {
        let mut r = rng(seed);
        let images: Vec<Array3<f64>> = (0..2)
            .map(|_| Array3::from_shape_fn((32, 32, 3), |_| r.gen_range(0.0..1.0)))
            .collect();
        let labels = vec![
            quadrant_labels(32, [0, 1, 2, 3]),
            quadrant_labels(32, [3, 2, 1, 0]),
        ];
        (images, labels)
    }

    #[test]
    fn train_step_respects_freeze_partition() {
        let mut state = tiny_state(40);
        let (images, labels) = tiny_batch(41);
        let bank = singleton_bank(16, 4);
        let policy = FreezePreset::Famix.phases()[0];
        let frozen_before: Vec<u64> = policy
            .frozen_stages()
            .iter()
            .map(|&s| state.model.params.stage_checksum(s))
            .collect();
        let trainable_before: Vec<u64> = policy
            .trainable_stages()
            .iter()
            .map(|&s| state.model.params.stage_checksum(s))
            .collect();
        let mut r = rng(42);
        for _ in 0..3 {
            let record = train_step(
                &mut state,
                &images,
                &labels,
                Randomization::Bank {
                    mode: &AugmentMode::language(),
                    bank: Some(&bank),
                },
                &policy,
                &mut r,
            )
            .unwrap();
            assert!(record.loss.is_finite());
        }
        for (stage, before) in policy.frozen_stages().iter().zip(&frozen_before) {
            assert_eq!(state.model.params.stage_checksum(*stage), *before, "{stage:?}");
        }
        for (stage, before) in policy.trainable_stages().iter().zip(&trainable_before) {
            assert_ne!(state.model.params.stage_checksum(*stage), *before, "{stage:?}");
        }
    }

    #[test]
    fn train_step_flags_divergence() {
        let mut state = tiny_state(50);
        let (images, labels) = tiny_batch(51);
        // poison one decoder weight
        let id = crate::nn::BlockId(state.model.params.blocks().len() - 1);
        state.model.params.data_mut(id)[0] = f64::NAN;
        let policy = FreezePreset::Dp.phases()[0];
        let err = train_step(
            &mut state,
            &images,
            &labels,
            Randomization::Bank {
                mode: &AugmentMode::passthrough(),
                bank: None,
            },
            &policy,
            &mut rng(52),
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::Divergence { iteration: 0 }));
    }

    #[test]
    fn run_schedule_is_deterministic_and_phased() {
        let (train_set, _, _) = generate_two_domain_corpus(SynthConfig {
            size: 32,
            num_train: 4,
            num_eval: 1,
            seed: 60,
        });
        let bank = singleton_bank(16, 4);
        let run = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(999);
            let model = SegModel::new(ModelConfig::desk(4), &mut r);
            let schedule = ScheduleConfig {
                iterations: 6,
                batch_size: 2,
                lr_decoder: 0.01,
                lr_backbone: 0.001,
                momentum: 0.9,
                weight_decay: 1e-4,
                poly_power: 0.9,
            };
            let mut state = TrainState::new(model, schedule, 4, seed);
            let plan = RunPlan {
                schedule,
                preset: FreezePreset::DpFt,
                mode: AugmentMode::language(),
                grid_m: 4,
                seed,
                augment: AugmentConfig::default(),
                stop_after: None,
                vanilla_mixstyle: false,
            };
            let records = run_schedule(&mut state, &train_set, Some(&bank), &plan).unwrap();
            (records, state.model.params.checksum(|_| true))
        };
        let (ra, ca) = run(7);
        let (rb, cb) = run(7);
        assert_eq!(ra, rb);
        assert_eq!(ca, cb);
        // two-phase preset switches policy halfway
        assert!(ra[..3].iter().all(|r| r.phase == 0));
        assert!(ra[3..].iter().all(|r| r.phase == 1));
        let (rc, cc) = run(8);
        assert_ne!(ca, cc);
        assert_ne!(
            ra.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>(),
            rc.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn checkpoint_roundtrip_and_exact_resume() {
        let dir = tempfile::tempdir().unwrap();
        let (train_set, _, _) = generate_two_domain_corpus(SynthConfig {
            size: 32,
            num_train: 3,
            num_eval: 1,
            seed: 70,
        });
        let schedule = ScheduleConfig {
            iterations: 6,
            batch_size: 2,
            lr_decoder: 0.01,
            lr_backbone: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
        };
        let fresh_state = || {
            let mut r = ChaCha8Rng::seed_from_u64(71);
            TrainState::new(SegModel::new(ModelConfig::desk(4), &mut r), schedule, 4, 72)
        };
        let plan = RunPlan {
            schedule,
            preset: FreezePreset::Famix,
            mode: AugmentMode::passthrough(),
            grid_m: 4,
            seed: 72,
            augment: AugmentConfig::default(),
            stop_after: None,
            vanilla_mixstyle: false,
        };
        // uninterrupted run
        let mut full = fresh_state();
        let full_records = run_schedule(&mut full, &train_set, None, &plan).unwrap();
        // interrupted at iteration 3 and resumed from the checkpoint
        let mut half = fresh_state();
        let mut half_plan = RunPlan {
            schedule,
            preset: FreezePreset::Famix,
            mode: AugmentMode::passthrough(),
            grid_m: 4,
            seed: 72,
            augment: AugmentConfig::default(),
            stop_after: Some(3),
            vanilla_mixstyle: false,
        };
        let first_half = run_schedule(&mut half, &train_set, None, &half_plan).unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&half, FreezePreset::Famix, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        assert_eq!(resumed.preset, FreezePreset::Famix);
        assert_eq!(resumed.state.iteration, 3);
        half_plan.stop_after = None;
        let second_half =
            run_schedule(&mut resumed.state, &train_set, None, &half_plan).unwrap();
        let stitched: Vec<&StepRecord> = first_half.iter().chain(&second_half).collect();
        assert_eq!(stitched.len(), full_records.len());
        for (a, b) in stitched.iter().zip(&full_records) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "iteration {}", b.iteration);
        }
        assert_eq!(
            resumed.state.model.params.checksum(|_| true),
            full.model.params.checksum(|_| true)
        );
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let state = tiny_state(80);
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&state, FreezePreset::Dp, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() / 2];
        std::fs::write(dir.path().join("bad.bin"), truncated).unwrap();
        assert!(load_checkpoint(&dir.path().join("bad.bin")).is_err());
    }

    #[test]
    fn vanilla_mixstyle_train_steps_update_and_stay_finite() {
        let mut state = tiny_state(95);
        let (images, labels) = tiny_batch(96);
        let policy = FreezePreset::Famix.phases()[0];
        let before = state.model.params.stage_checksum(Stage::Decoder);
        let mut r = rng(97);
        for _ in 0..3 {
            let record = train_step(
                &mut state,
                &images,
                &labels,
                Randomization::VanillaMixStyle,
                &policy,
                &mut r,
            )
            .unwrap();
            assert!(record.loss.is_finite());
            assert!(record.alpha.is_some(), "mixing weight must be logged");
        }
        assert_ne!(state.model.params.stage_checksum(Stage::Decoder), before);
        // a batch of one cannot pair up
        let err = train_step(
            &mut state,
            &images[..1],
            &labels[..1],
            Randomization::VanillaMixStyle,
            &policy,
            &mut r,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::DegenerateBatch(1)));
    }

    #[test]
    fn restylization_gradient_scale_matches_finite_differences() {
        // the randomize backward treats statistics as constants; verify that
        // scaling matches the actual AdaIN jacobian in that convention
        let f = random_feature(4, 4, 2, 90);
        let style = crate::stats::StyleStats::new(vec![0.3, -0.2], vec![1.7, 0.4]).unwrap();
        let own = channel_stats(&f).unwrap();
        let out = adain(&f, &style).unwrap();
        let scale: Vec<f64> = style
            .sigma()
            .iter()
            .zip(own.sigma())
            .map(|(t, s)| t / s)
            .collect();
        // d out[i,j,k] / d f[i,j,k] with stats frozen is sigma_t/sigma_s
        for k in 0..2 {
            let a = out.data()[[1, 2, k]];
            let b = out.data()[[3, 0, k]];
            let fa = f.data()[[1, 2, k]];
            let fb = f.data()[[3, 0, k]];
            assert!(((a - b) / (fa - fb) - scale[k]).abs() < 1e-9);
        }
    }
}
