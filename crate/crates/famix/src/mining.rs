//! Prompt-driven instance normalization (PIN) and local style mining.
//!
//! PIN treats the target statistics of AdaIN as free variables and fits them
//! by gradient descent so the restylized patch's joint-space embedding moves
//! toward a text prompt's embedding. Local style mining runs PIN on one
//! patch per dominant class per batch and files the results into class-wise
//! style banks.

use crate::bank::{BankEntry, BankError, BankMetadata, PromptSet, StyleBank};
use crate::encoder::{EncoderError, JointEncoder};
use crate::stats::{
    channel_stats, dominant_class, partition, CoreError, FeatureMap, LabelMap, StyleStats,
    EPSILON_SIGMA,
};
use ndarray::Array3;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MiningError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("step size must be positive, got {0}")]
    NonPositiveStepSize(f64),
    #[error("feature batch has {features} maps but label batch has {labels}")]
    BatchLengthMismatch { features: usize, labels: usize },
    #[error("class id {class} has no name; {known} names known")]
    UnknownClassName { class: u32, known: usize },
}

/// How prompts are assembled from a fragment and a class name.
///
/// The default keeps both parts: `<fragment> style <class name>`. The
/// ablation arms drop one side or the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub use_fragment: bool,
    pub use_class_name: bool,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            use_fragment: true,
            use_class_name: true,
        }
    }
}

impl PromptTemplate {
    /// Class-name-only prompts (no fragment, no suffix).
    pub fn class_name_only() -> Self {
        Self {
            use_fragment: false,
            use_class_name: true,
        }
    }

    /// Fragment-only prompts: `<fragment> style`.
    pub fn fragment_only() -> Self {
        Self {
            use_fragment: true,
            use_class_name: false,
        }
    }
}

/// A fully rendered mining prompt with its parts kept for provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub style_fragment: String,
    pub class_name: String,
    pub suffix: String,
    pub rendered: String,
}

impl PromptSpec {
    /// Applies the concatenation rule `<fragment> <suffix> <class name>`,
    /// dropping the parts the template disables.
    pub fn render(fragment: &str, class_name: &str, template: PromptTemplate) -> Self {
        let suffix = "style";
        let rendered = match (template.use_fragment, template.use_class_name) {
            (true, true) => format!("{fragment} {suffix} {class_name}"),
            (true, false) => format!("{fragment} {suffix}"),
            (false, true) => class_name.to_string(),
            (false, false) => suffix.to_string(),
        };
        Self {
            style_fragment: if template.use_fragment {
                fragment.to_string()
            } else {
                String::new()
            },
            class_name: if template.use_class_name {
                class_name.to_string()
            } else {
                String::new()
            },
            suffix: suffix.to_string(),
            rendered,
        }
    }
}

/// Gradient-descent settings for PIN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinHyperparams {
    pub steps: usize,
    pub step_size: f64,
}

impl Default for PinHyperparams {
    fn default() -> Self {
        Self {
            steps: 100,
            step_size: 1.0,
        }
    }
}

/// Outcome of one PIN optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct PinResult {
    pub style: StyleStats,
    pub final_cosine_distance: f64,
    pub initial_cosine_distance: f64,
    pub iterations_run: usize,
    pub prompt: PromptSpec,
    /// Loss after each recorded point, index 0 being the initial loss.
    pub loss_trace: Vec<f64>,
}

fn cosine_distance(v: &[f64], t: &[f64]) -> f64 {
    let dot: f64 = v.iter().zip(t).map(|(a, b)| a * b).sum();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    1.0 - dot / (nv * nt)
}

/// d(cosine distance)/d(v).
fn cosine_distance_grad(v: &[f64], t: &[f64]) -> Vec<f64> {
    let dot: f64 = v.iter().zip(t).map(|(a, b)| a * b).sum();
    let nv2 = v.iter().map(|x| x * x).sum::<f64>().max(1e-24);
    let nv = nv2.sqrt();
    let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter()
        .zip(t)
        .map(|(&vi, &ti)| dot * vi / (nv2 * nv * nt) - ti / (nv * nt))
        .collect()
}

/// Applies PIN with explicit statistics: sigma * (patch - mu_p) / sigma_p + mu.
fn stylize(norm: &Array3<f64>, mu: &[f64], sigma: &[f64]) -> FeatureMap {
    let (h, w, c) = norm.dim();
    let data = Array3::from_shape_fn((h, w, c), |(i, j, k)| norm[[i, j, k]] * sigma[k] + mu[k]);
    FeatureMap::new(data).expect("stylized patch stays finite")
}

/// Fits (mu, sigma) by gradient descent on the cosine distance between the
/// restylized patch's visual embedding and the prompt's text embedding.
///
/// Starts from the patch's own statistics; sigma is re-clamped after every
/// step; the step size halves whenever a step would increase the loss, so
/// the recorded trace never increases. The encoder is read-only throughout.
pub fn pin_optimize(
    patch: &FeatureMap,
    prompt: &PromptSpec,
    encoder: &dyn JointEncoder,
    hyper: PinHyperparams,
) -> Result<PinResult, MiningError> {
    if !hyper.step_size.is_finite() || hyper.step_size <= 0.0 {
        return Err(MiningError::NonPositiveStepSize(hyper.step_size));
    }
    let init = channel_stats(patch)?;
    let c = init.channels();
    // normalized patch is constant across the optimization
    let norm = {
        let (h, w, _) = patch.data().dim();
        Array3::from_shape_fn((h, w, c), |(i, j, k)| {
            (patch.data()[[i, j, k]] - init.mu()[k]) / init.sigma()[k]
        })
    };
    let text = encoder.embed_text(&prompt.rendered)?;
    let loss_at = |mu: &[f64], sigma: &[f64]| -> Result<f64, MiningError> {
        let stylized = stylize(&norm, mu, sigma);
        let v = encoder.embed_visual(&stylized)?;
        Ok(cosine_distance(&v, &text))
    };
    let mut mu = init.mu().to_vec();
    let mut sigma = init.sigma().to_vec();
    let mut loss = loss_at(&mu, &sigma)?;
    let initial = loss;
    let mut trace = vec![loss];
    let mut lr = hyper.step_size;
    let mut iterations_run = 0;
    for _ in 0..hyper.steps {
        let stylized = stylize(&norm, &mu, &sigma);
        let (v, vjp) = encoder.embed_visual_with_grad(&stylized)?;
        let dv = cosine_distance_grad(&v, &text);
        let dpatch = vjp(&dv)?;
        // fold the patch gradient into the per-channel statistics
        let mut dmu = vec![0.0; c];
        let mut dsigma = vec![0.0; c];
        for ((_, _, k), &g) in dpatch.indexed_iter() {
            dmu[k] += g;
        }
        for ((i, j, k), &g) in dpatch.indexed_iter() {
            dsigma[k] += g * norm[[i, j, k]];
        }
        // backtrack: only accept a non-increasing step
        let mut accepted = false;
        while lr >= 1e-15 {
            let cand_mu: Vec<f64> = mu.iter().zip(&dmu).map(|(m, d)| m - lr * d).collect();
            let cand_sigma: Vec<f64> = sigma
                .iter()
                .zip(&dsigma)
                .map(|(s, d)| (s - lr * d).max(EPSILON_SIGMA))
                .collect();
            let cand_loss = loss_at(&cand_mu, &cand_sigma)?;
            if cand_loss <= loss {
                mu = cand_mu;
                sigma = cand_sigma;
                loss = cand_loss;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        iterations_run += 1;
        trace.push(loss);
        if !accepted {
            break;
        }
    }
    let style = StyleStats::new(mu, sigma)?;
    Ok(PinResult {
        style,
        final_cosine_distance: loss,
        initial_cosine_distance: initial,
        iterations_run,
        prompt: prompt.clone(),
        loss_trace: trace,
    })
}

/// One (class, patch) pick per distinct dominant class, in first-seen order.
///
/// All-ignore patches are skipped; the first patch seen for a class wins.
pub fn select_balanced_patches(patches: &[(&FeatureMap, &LabelMap)]) -> Vec<(u32, usize)> {
    let mut selected: Vec<(u32, usize)> = Vec::new();
    for (idx, (_, labels)) in patches.iter().enumerate() {
        if let Some(class) = dominant_class(labels) {
            if !selected.iter().any(|&(c, _)| c == class) {
                selected.push((class, idx));
            }
        }
    }
    selected
}

/// Settings shared by the mining loops.
pub struct MiningConfig<'a> {
    pub prompts: &'a PromptSet,
    pub template: PromptTemplate,
    pub class_names: &'a [String],
    pub patches_per_map: usize,
    pub pin: PinHyperparams,
    pub seed: u64,
}

fn bank_metadata(config: &MiningConfig<'_>) -> BankMetadata {
    BankMetadata {
        prompt_set_id: format!(
            "{}:{}",
            config.prompts.variant(),
            config.prompts.cardinality()
        ),
        pin_steps: config.pin.steps as u32,
        pin_step_size: config.pin.step_size,
        seed: config.seed,
        patches_per_map: config.patches_per_map as u32,
    }
}

/// Local style mining: per batch, partition features and labels, take one
/// patch per distinct dominant class, run PIN against a freshly sampled
/// prompt, and append the result to that class's bank.
///
/// Bank growth per batch equals the number of distinct non-ignore dominant
/// classes in the batch. Deterministic for a fixed seed.
pub fn mine_style_banks(
    batches: &[(Vec<FeatureMap>, Vec<LabelMap>)],
    encoder: &dyn JointEncoder,
    config: &MiningConfig<'_>,
    rng: &mut impl Rng,
) -> Result<StyleBank, MiningError> {
    let mut bank = StyleBank::new_class_wise(
        encoder.feature_channels(),
        config.class_names.to_vec(),
        bank_metadata(config),
    );
    for (batch_idx, (features, labels)) in batches.iter().enumerate() {
        if features.len() != labels.len() {
            return Err(MiningError::BatchLengthMismatch {
                features: features.len(),
                labels: labels.len(),
            });
        }
        // flatten the batch into b x m patches, map-major
        let mut feature_patches = Vec::new();
        let mut label_patches = Vec::new();
        for (f, y) in features.iter().zip(labels) {
            let grid = partition(f, config.patches_per_map)?;
            let ygrid = y.partition(config.patches_per_map)?;
            feature_patches.extend(grid.patches().to_vec());
            label_patches.extend(ygrid);
        }
        let pairs: Vec<(&FeatureMap, &LabelMap)> = feature_patches
            .iter()
            .zip(label_patches.iter())
            .collect();
        let selected = select_balanced_patches(&pairs);
        for (class, patch_idx) in selected {
            let name = config
                .class_names
                .get(class as usize)
                .ok_or(MiningError::UnknownClassName {
                    class,
                    known: config.class_names.len(),
                })?;
            let fragment = config.prompts.sample(rng).to_string();
            let prompt = PromptSpec::render(&fragment, name, config.template);
            let result = pin_optimize(&feature_patches[patch_idx], &prompt, encoder, config.pin)?;
            bank.push(
                class,
                BankEntry::from_style(
                    &result.style,
                    &result.prompt.rendered,
                    &format!("b{batch_idx}.p{patch_idx}"),
                ),
            )?;
        }
    }
    Ok(bank)
}

/// Global style mining: one style per whole feature map, prompts built from
/// `<fragment> style driving`, all stored in a single shared bank.
pub fn mine_global(
    batches: &[(Vec<FeatureMap>, Vec<LabelMap>)],
    encoder: &dyn JointEncoder,
    config: &MiningConfig<'_>,
    rng: &mut impl Rng,
) -> Result<StyleBank, MiningError> {
    let mut bank = StyleBank::new_global(
        encoder.feature_channels(),
        "driving",
        bank_metadata(config),
    );
    for (batch_idx, (features, _)) in batches.iter().enumerate() {
        for (map_idx, f) in features.iter().enumerate() {
            let fragment = config.prompts.sample(rng).to_string();
            let prompt = PromptSpec::render(&fragment, "driving", PromptTemplate::default());
            let result = pin_optimize(f, &prompt, encoder, config.pin)?;
            bank.push(
                0,
                BankEntry::from_style(
                    &result.style,
                    &result.prompt.rendered,
                    &format!("b{batch_idx}.m{map_idx}"),
                ),
            )?;
        }
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::PromptVariant;
    use crate::encoder::{StubEncoder, TinyJointEncoder};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_patch(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_shape_fn(h, w, c, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn prompt_rendering_follows_concatenation_rule() {
        let p = PromptSpec::render("Retro Futurism", "building", PromptTemplate::default());
        assert_eq!(p.rendered, "Retro Futurism style building");
        let q = PromptSpec::render("Ethereal Mist", "driving", PromptTemplate::default());
        assert_eq!(q.rendered, "Ethereal Mist style driving");
        let frag_only = PromptSpec::render("ioscjspa", "car", PromptTemplate::fragment_only());
        assert_eq!(frag_only.rendered, "ioscjspa style");
        let class_only = PromptSpec::render("ignored", "car", PromptTemplate::class_name_only());
        assert_eq!(class_only.rendered, "car");
    }

    #[test]
    fn prompt_rendering_is_injective_over_fragment_class_pairs() {
        let fragments = ["Ethereal Mist", "Urban Grit", "Pastel Dreams"];
        let classes = ["road", "car", "sky"];
        let mut seen = std::collections::HashSet::new();
        for f in fragments {
            for c in classes {
                let rendered = PromptSpec::render(f, c, PromptTemplate::default()).rendered;
                assert!(seen.insert(rendered));
            }
        }
    }

    #[test]
    fn pin_zero_steps_returns_patch_statistics() {
        let enc = StubEncoder::new(4, 8, 2);
        let patch = random_patch(6, 6, 4, 3);
        let prompt = PromptSpec::render("Urban Grit", "road", PromptTemplate::default());
        let result = pin_optimize(
            &patch,
            &prompt,
            &enc,
            PinHyperparams {
                steps: 0,
                step_size: 1.0,
            },
        )
        .unwrap();
        assert_eq!(result.iterations_run, 0);
        let own = channel_stats(&patch).unwrap();
        assert_eq!(result.style, own);
        assert_eq!(result.final_cosine_distance, result.initial_cosine_distance);
        assert_eq!(result.loss_trace.len(), 1);
    }

    #[test]
    fn pin_trace_is_monotone_and_final_not_worse() {
        let enc = TinyJointEncoder::new(ModelConfig::desk(2), 16, 5);
        let patch = random_patch(8, 8, 16, 7);
        let prompt = PromptSpec::render("Pastel Dreams", "car", PromptTemplate::default());
        let result = pin_optimize(
            &patch,
            &prompt,
            &enc,
            PinHyperparams {
                steps: 25,
                step_size: 1.0,
            },
        )
        .unwrap();
        assert!(result.final_cosine_distance <= result.initial_cosine_distance);
        for pair in result.loss_trace.windows(2) {
            assert!(pair[1] <= pair[0], "trace increased: {pair:?}");
        }
        assert!(result.final_cosine_distance < result.initial_cosine_distance);
    }

    #[test]
    fn pin_is_deterministic() {
        let enc = StubEncoder::new(3, 6, 9);
        let patch = random_patch(4, 4, 3, 11);
        let prompt = PromptSpec::render("Dystopian Noir", "sky", PromptTemplate::default());
        let hyper = PinHyperparams {
            steps: 10,
            step_size: 0.5,
        };
        let a = pin_optimize(&patch, &prompt, &enc, hyper).unwrap();
        let b = pin_optimize(&patch, &prompt, &enc, hyper).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pin_gradient_matches_finite_differences() {
        // checks d(cosine)/d(mu, sigma) against central differences through
        // the full stub pathway
        let enc = StubEncoder::new(16, 32, 21);
        let patch = random_patch(8, 8, 16, 22);
        let prompt = PromptSpec::render("Cosmic Voyage", "terrain", PromptTemplate::default());
        let init = channel_stats(&patch).unwrap();
        let c = init.channels();
        let norm = {
            let (h, w, _) = patch.data().dim();
            Array3::from_shape_fn((h, w, c), |(i, j, k)| {
                (patch.data()[[i, j, k]] - init.mu()[k]) / init.sigma()[k]
            })
        };
        let text = enc.embed_text(&prompt.rendered).unwrap();
        let loss = |mu: &[f64], sigma: &[f64]| -> f64 {
            let stylized = stylize(&norm, mu, sigma);
            let v = enc.embed_visual(&stylized).unwrap();
            cosine_distance(&v, &text)
        };
        let mu = init.mu().to_vec();
        let sigma = init.sigma().to_vec();
        let stylized = stylize(&norm, &mu, &sigma);
        let (v, vjp) = enc.embed_visual_with_grad(&stylized).unwrap();
        let dv = cosine_distance_grad(&v, &text);
        let dpatch = vjp(&dv).unwrap();
        let mut dmu = vec![0.0; c];
        let mut dsigma = vec![0.0; c];
        for ((i, j, k), &g) in dpatch.indexed_iter() {
            dmu[k] += g;
            dsigma[k] += g * norm[[i, j, k]];
        }
        let eps = 1e-6;
        for k in [0usize, 7, 15] {
            let mut mup = mu.clone();
            mup[k] += eps;
            let hi = loss(&mup, &sigma);
            mup[k] -= 2.0 * eps;
            let lo = loss(&mup, &sigma);
            let num = (hi - lo) / (2.0 * eps);
            let denom = num.abs().max(dmu[k].abs()).max(1e-8);
            assert!(
                (dmu[k] - num).abs() / denom < 1e-3,
                "dmu[{k}]: {} vs {num}",
                dmu[k]
            );
            let mut sip = sigma.clone();
            sip[k] += eps;
            let hi = loss(&mu, &sip);
            sip[k] -= 2.0 * eps;
            let lo = loss(&mu, &sip);
            let num = (hi - lo) / (2.0 * eps);
            let denom = num.abs().max(dsigma[k].abs()).max(1e-8);
            assert!(
                (dsigma[k] - num).abs() / denom < 1e-3,
                "dsigma[{k}]: {} vs {num}",
                dsigma[k]
            );
        }
    }

    #[test]
    fn balanced_selection_one_patch_per_class() {
        let f = random_patch(2, 2, 1, 1);
        let mk = |v: u32| LabelMap::from_rows(&[&[v, v], &[v, v]], 4, 255).unwrap();
        let labels = [mk(0), mk(1), mk(0), mk(1)];
        let pairs: Vec<(&FeatureMap, &LabelMap)> = labels.iter().map(|l| (&f, l)).collect();
        let selected = select_balanced_patches(&pairs);
        assert_eq!(selected, vec![(0, 0), (1, 1)]);
        // single class collapses to one pick
        let labels = [mk(2), mk(2), mk(2)];
        let pairs: Vec<(&FeatureMap, &LabelMap)> = labels.iter().map(|l| (&f, l)).collect();
        assert_eq!(select_balanced_patches(&pairs).len(), 1);
        // all-ignore yields nothing
        let labels = [mk(255), mk(255)];
        let pairs: Vec<(&FeatureMap, &LabelMap)> = labels.iter().map(|l| (&f, l)).collect();
        assert!(select_balanced_patches(&pairs).is_empty());
    }

    fn toy_batch(classes: &[u32], seed: u64) -> (Vec<FeatureMap>, Vec<LabelMap>) {
        // one 8x8x4 map per entry, labels constant per quadrant so each of
        // the m=4 patches has the requested dominant class
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (map_idx, quad) in classes.chunks(4).enumerate() {
            features.push(random_patch(8, 8, 4, seed + map_idx as u64));
            let q = |i: usize| quad.get(i).copied().unwrap_or(quad[0]);
            let data = ndarray::Array2::from_shape_fn((8, 8), |(y, x)| {
                match (y < 4, x < 4) {
                    (true, true) => q(0),
                    (true, false) => q(1),
                    (false, true) => q(2),
                    (false, false) => q(3),
                }
            });
            labels.push(LabelMap::new(data, 4, 255).unwrap());
        }
        (features, labels)
    }

    fn stub_mining_config<'a>(prompts: &'a PromptSet, names: &'a [String]) -> MiningConfig<'a> {
        MiningConfig {
            prompts,
            template: PromptTemplate::default(),
            class_names: names,
            patches_per_map: 4,
            pin: PinHyperparams {
                steps: 2,
                step_size: 0.5,
            },
            seed: 5,
        }
    }

    #[test]
    fn bank_growth_tracks_distinct_dominant_classes() {
        let enc = StubEncoder::new(4, 8, 1);
        let prompts =
            PromptSet::new(PromptVariant::Rsp, vec!["Urban Grit".into(), "Pastel Dreams".into()])
                .unwrap();
        let names: Vec<String> = ["road", "car", "sky", "tree"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let config = stub_mining_config(&prompts, &names);
        // batch 1 dominant classes {0, 1}; batch 2 {2}
        let batches = vec![toy_batch(&[0, 1, 0, 1], 1), toy_batch(&[2, 2, 2, 2], 2)];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bank = mine_style_banks(&batches, &enc, &config, &mut rng).unwrap();
        assert_eq!(bank.class_counts(), vec![1, 1, 1, 0]);
        assert_eq!(bank.total_entries(), 3);
    }

    #[test]
    fn every_class_every_batch_gives_n_entries_per_bank() {
        let enc = StubEncoder::new(4, 8, 1);
        let prompts = PromptSet::new(PromptVariant::Rsp, vec!["Urban Grit".into()]).unwrap();
        let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let config = stub_mining_config(&prompts, &names);
        let n = 3;
        let batches: Vec<_> = (0..n).map(|i| toy_batch(&[0, 1, 2, 3], i as u64)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bank = mine_style_banks(&batches, &enc, &config, &mut rng).unwrap();
        assert_eq!(bank.class_counts(), vec![n, n, n, n]);
    }

    #[test]
    fn singleton_prompt_set_shares_fragment_but_not_class() {
        let enc = StubEncoder::new(4, 8, 1);
        let prompts = PromptSet::new(PromptVariant::Rsp, vec!["Ethereal Mist".into()]).unwrap();
        let names: Vec<String> = ["road", "car", "sky", "tree"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let config = stub_mining_config(&prompts, &names);
        let batches = vec![toy_batch(&[0, 1, 2, 3], 4)];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = mine_style_banks(&batches, &enc, &config, &mut rng).unwrap();
        let mut prompts_seen = Vec::new();
        for class in 0..4 {
            for e in bank.entries(class) {
                assert!(e.prompt.starts_with("Ethereal Mist style "));
                prompts_seen.push(e.prompt.clone());
            }
        }
        prompts_seen.sort();
        prompts_seen.dedup();
        assert_eq!(prompts_seen.len(), 4, "class names differentiate prompts");
    }

    #[test]
    fn mining_is_deterministic_under_seed() {
        let enc = StubEncoder::new(4, 8, 1);
        let prompts =
            PromptSet::new(PromptVariant::Rsp, vec!["Urban Grit".into(), "Cosmic Voyage".into()])
                .unwrap();
        let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let config = stub_mining_config(&prompts, &names);
        let batches = vec![toy_batch(&[0, 1, 2, 3], 8), toy_batch(&[1, 1, 3, 3], 9)];
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            crate::bank::encode_bank(&mine_style_banks(&batches, &enc, &config, &mut rng).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn global_mining_mines_one_style_per_map() {
        let enc = StubEncoder::new(4, 8, 1);
        let prompts = PromptSet::new(PromptVariant::Rsp, vec!["Ethereal Mist".into()]).unwrap();
        let names: Vec<String> = vec!["unused".into()];
        let config = stub_mining_config(&prompts, &names);
        let batches = vec![toy_batch(&[0, 1, 2, 3], 1), toy_batch(&[0, 0, 0, 0], 2)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = mine_global(&batches, &enc, &config, &mut rng).unwrap();
        // one entry per feature map, shared across classes
        assert_eq!(bank.total_entries(), 2);
        assert_eq!(bank.entries(0)[0].prompt, "Ethereal Mist style driving");
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = bank
            .sample_style(0, &mut r, crate::bank::MissingStyleFallback::Error)
            .unwrap();
        let b = bank
            .sample_style(3, &mut r, crate::bank::MissingStyleFallback::Error)
            .unwrap();
        assert!(a.is_some() && b.is_some());
    }

    #[test]
    fn encoder_checksum_survives_mining() {
        let enc = TinyJointEncoder::new(ModelConfig::desk(2), 16, 17);
        let before = enc.parameter_checksum();
        let prompts = PromptSet::new(PromptVariant::Rsp, vec!["Urban Grit".into()]).unwrap();
        let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let mut config = stub_mining_config(&prompts, &names);
        config.pin = PinHyperparams {
            steps: 3,
            step_size: 1.0,
        };
        let batches = vec![(
            vec![random_patch(16, 16, 16, 30)],
            vec![LabelMap::new(ndarray::Array2::zeros((16, 16)), 4, 255).unwrap()],
        )];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = mine_style_banks(&batches, &enc, &config, &mut rng).unwrap();
        assert_eq!(bank.total_entries(), 1);
        assert_eq!(enc.parameter_checksum(), before);
    }

    #[test]
    fn empty_prompt_set_is_rejected_upstream() {
        assert!(matches!(
            PromptSet::new(PromptVariant::Rsp, vec![]),
            Err(BankError::EmptyPromptSet)
        ));
    }
}
