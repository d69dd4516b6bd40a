//! Zero-shot evaluation, few-shot adaptation and the feature-independence probe.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::AdaptConfig;
use crate::data::{Dataset, Mask, Sample};
use crate::error::{Error, Result};
use crate::losses::{seg_loss, LossConfig};
use crate::mine::{estimate_mi_with_permutation, random_permutation, MineNetwork};
use crate::networks::{images_to_tensor, Component, ModelBundle};
use crate::nn::Adam;
use crate::seed::{derived_rng, rng, Rng};

/// Threshold used to binarize predicted probabilities.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Samples per forward pass during evaluation.
const EVAL_BATCH: usize = 16;

/// Minimum target-set size accepted by [`adapt`].
pub const MIN_ADAPT_TARGET: usize = 20;

/// Dice overlap of `probs >= threshold` with `mask`. Two empty masks score 1,
/// exactly one empty mask scores 0.
pub fn dice_score(probs: &[f32], mask: &Mask, threshold: f32) -> Result<f64> {
    let labels = mask.labels();
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, mask has {}",
            probs.len(),
            labels.len()
        )));
    }
    let (mut inter, mut predicted, mut truth) = (0usize, 0usize, 0usize);
    for (&p, &l) in probs.iter().zip(labels) {
        let p = p >= threshold;
        let l = l == 1;
        inter += (p && l) as usize;
        predicted += p as usize;
        truth += l as usize;
    }
    Ok(if predicted + truth == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (predicted + truth) as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    ZeroShot,
    Adapted,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::ZeroShot => "zero_shot",
            Protocol::Adapted => "adapted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub name: String,
    pub dsc: f64,
}

/// Scores for one domain. `std_dsc` is the population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain_id: String,
    pub count: usize,
    pub mean_dsc: f64,
    pub std_dsc: f64,
    pub per_sample: Vec<SampleScore>,
}

impl DomainReport {
    fn from_scores(domain_id: String, per_sample: Vec<SampleScore>) -> Self {
        let (mean, std) = mean_std(per_sample.iter().map(|s| s.dsc));
        Self {
            domain_id,
            count: per_sample.len(),
            mean_dsc: mean,
            std_dsc: std,
            per_sample,
        }
    }
}

pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let values: Vec<f64> = values.into_iter().collect();
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Which samples of a target set were used for fine-tuning and which were held out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptSplit {
    pub seed: u64,
    pub fraction: f64,
    pub adapt: Vec<String>,
    pub held_out: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_id: Option<String>,
    pub protocol: Protocol,
    pub threshold: f32,
    pub domains: Vec<DomainReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<AdaptSplit>,
}

impl EvalReport {
    /// Mean DSC over every sample of every domain.
    pub fn mean_dsc(&self) -> f64 {
        mean_std(self.domains.iter().flat_map(|d| d.per_sample.iter().map(|s| s.dsc))).0
    }

    pub fn domain(&self, id: &str) -> Option<&DomainReport> {
        self.domains.iter().find(|d| d.domain_id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Fixed-width text table, one row per domain.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "protocol: {}  checkpoint: {}",
            self.protocol.as_str(),
            self.checkpoint_id.as_deref().unwrap_or("-")
        );
        let _ = writeln!(out, "{:<12} {:>7} {:>9} {:>9}", "domain", "n", "mean_dsc", "std_dsc");
        for d in &self.domains {
            let _ = writeln!(
                out,
                "{:<12} {:>7} {:>9.4} {:>9.4}",
                d.domain_id, d.count, d.mean_dsc, d.std_dsc
            );
        }
        out
    }
}

/// Foreground probabilities for each sample, row-major per image.
pub fn predict(bundle: &ModelBundle, samples: &[&Sample]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let x = images_to_tensor(&images)?;
        let probs = bundle.segment(&bundle.encode_anatomy(&x)?)?.squeeze(0)?;
        for row in probs.flatten_from(1)?.to_dtype(DType::F32)?.to_vec2::<f32>()? {
            out.push(row);
        }
    }
    Ok(out)
}

fn score(
    bundle: &ModelBundle,
    samples: &[&Sample],
    checkpoint_id: Option<String>,
    protocol: Protocol,
    threshold: f32,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let probs = predict(bundle, samples)?;
    let mut by_domain: BTreeMap<&str, Vec<SampleScore>> = BTreeMap::new();
    for (s, p) in samples.iter().zip(&probs) {
        by_domain.entry(&s.domain_id).or_default().push(SampleScore {
            name: s.name.clone(),
            dsc: dice_score(p, &s.mask, threshold)?,
        });
    }
    Ok(EvalReport {
        checkpoint_id,
        protocol,
        threshold,
        domains: by_domain
            .into_iter()
            .map(|(id, scores)| DomainReport::from_scores(id.to_string(), scores))
            .collect(),
        split: None,
    })
}

/// Zero-shot DSC of every sample, grouped by domain. Never touches parameters.
pub fn evaluate(bundle: &ModelBundle, dataset: &Dataset, checkpoint_id: Option<String>) -> Result<EvalReport> {
    evaluate_at(bundle, dataset, checkpoint_id, DEFAULT_THRESHOLD)
}

/// [`evaluate`] with a custom binarization threshold.
pub fn evaluate_at(
    bundle: &ModelBundle,
    dataset: &Dataset,
    checkpoint_id: Option<String>,
    threshold: f32,
) -> Result<EvalReport> {
    let samples: Vec<&Sample> = dataset.samples().iter().collect();
    score(bundle, &samples, checkpoint_id, Protocol::ZeroShot, threshold)
}

/// Seeded split of `n` indices into `(adapt, held_out)` with
/// `round(fraction * n)` adaptation samples.
pub fn split_for_adaptation(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < MIN_ADAPT_TARGET {
        return Err(Error::InvalidValue(format!(
            "adaptation needs a target set of at least {MIN_ADAPT_TARGET} samples, got {n}"
        )));
    }
    let n_adapt = (fraction * n as f64).round() as usize;
    if n_adapt < 1 {
        return Err(Error::config(
            "adapt.fraction",
            format!("{fraction} of {n} samples leaves no adaptation sample"),
        ));
    }
    if n_adapt >= n {
        return Err(Error::config(
            "adapt.fraction",
            format!("{fraction} of {n} samples leaves nothing to evaluate"),
        ));
    }
    let order = random_permutation(n, &mut derived_rng("adapt_split", seed, 0));
    let (a, h) = order.split_at(n_adapt);
    Ok((a.to_vec(), h.to_vec()))
}

pub struct AdaptOutcome {
    pub split: AdaptSplit,
    /// Held-out scores before fine-tuning.
    pub zero_shot: EvalReport,
    /// Held-out scores after fine-tuning.
    pub adapted: EvalReport,
}

/// Fine-tunes the anatomical encoder and segmentor on a seeded `cfg.fraction`
/// of `target` with the segmentation loss only (no augmentation), then scores
/// the held-out rest. The other three components are never stepped.
pub fn adapt(
    bundle: &mut ModelBundle,
    target: &Dataset,
    cfg: &AdaptConfig,
    loss: &LossConfig,
    checkpoint_id: Option<String>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if target.resolution() != bundle.config().resolution {
        return Err(Error::Shape(format!(
            "target images are {0}x{0} but the model expects {1}x{1}",
            target.resolution(),
            bundle.config().resolution
        )));
    }
    let (adapt_idx, held_idx) = split_for_adaptation(target.len(), cfg.fraction, cfg.seed)?;
    let samples = target.samples();
    let adapt_set: Vec<&Sample> = adapt_idx.iter().map(|&i| &samples[i]).collect();
    let held_out: Vec<&Sample> = held_idx.iter().map(|&i| &samples[i]).collect();
    let split = AdaptSplit {
        seed: cfg.seed,
        fraction: cfg.fraction,
        adapt: adapt_set.iter().map(|s| s.name.clone()).collect(),
        held_out: held_out.iter().map(|s| s.name.clone()).collect(),
    };

    let zero_shot = score(bundle, &held_out, checkpoint_id.clone(), Protocol::ZeroShot, DEFAULT_THRESHOLD)?;

    let mut encoder_opt = Adam::new(bundle.vars(Component::AnatomyEncoder), cfg.learning_rate, None);
    let mut seg_opt = Adam::new(bundle.vars(Component::Segmentor), cfg.learning_rate, None);
    for epoch in 0..cfg.epochs {
        let order = random_permutation(adapt_set.len(), &mut derived_rng("adapt_shuffle", cfg.seed, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| adapt_set[i]).collect();
            let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
            let x = images_to_tensor(&images)?;
            let probs = bundle.segment(&bundle.encode_anatomy(&x)?)?.squeeze(0)?;
            let labels = mask_tensor(&batch)?;
            let l = seg_loss(&labels, &probs, loss)?;
            let value: f64 = l.to_dtype(DType::F64)?.to_scalar()?;
            if !value.is_finite() {
                return Err(Error::InvalidValue(format!("non-finite adaptation loss at epoch {epoch}")));
            }
            let grads = l.backward()?;
            encoder_opt.step(&grads)?;
            seg_opt.step(&grads)?;
        }
    }

    let mut adapted = score(bundle, &held_out, checkpoint_id, Protocol::Adapted, DEFAULT_THRESHOLD)?;
    adapted.split = Some(split.clone());
    Ok(AdaptOutcome {
        split,
        zero_shot,
        adapted,
    })
}

fn mask_tensor(samples: &[&Sample]) -> Result<Tensor> {
    let r = samples[0].resolution();
    let buf: Vec<f32> = samples
        .iter()
        .flat_map(|s| s.mask.labels().iter().map(|&v| v as f32))
        .collect();
    Ok(Tensor::from_vec(buf, (samples.len(), r, r), &Device::Cpu)?)
}

/// Settings for [`probe_mutual_information`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub hidden_layers: usize,
    /// Held-out checks happen every this many fitting steps.
    pub eval_every: usize,
    /// Permutations averaged per held-out estimate.
    pub eval_permutations: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 1e-3,
            hidden: 64,
            hidden_layers: 2,
            eval_every: 25,
            eval_permutations: 32,
            seed: 0,
        }
    }
}

/// Mutual information between pooled anatomical and domain features of
/// `probe`, measured by a freshly trained statistics network. The network is
/// fitted on the first half of the probe set and the bound is evaluated on the
/// second half every `cfg.eval_every` steps; the best held-out value is
/// returned, so neither an underfit nor a memorizing critic sets the result.
pub fn probe_mutual_information(bundle: &ModelBundle, probe: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    let n = probe.len();
    if n < 8 {
        return Err(Error::InvalidValue(format!("the probe needs at least 8 samples, got {n}")));
    }
    let samples: Vec<&Sample> = probe.samples().iter().collect();
    let mut fa_rows = Vec::new();
    let mut fd_rows = Vec::new();
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let x = images_to_tensor(&images)?;
        fa_rows.push(bundle.encode_anatomy(&x)?.pooled()?.detach());
        fd_rows.push(bundle.encode_domain(&x)?.pooled()?.detach());
    }
    let fa = Tensor::cat(&fa_rows, 0)?;
    let fd = Tensor::cat(&fd_rows, 0)?;
    let half = n / 2;
    let (fa_fit, fd_fit) = (fa.narrow(0, 0, half)?, fd.narrow(0, 0, half)?);
    let (fa_eval, fd_eval) = (fa.narrow(0, half, n - half)?, fd.narrow(0, half, n - half)?);

    let mut r = rng(cfg.seed);
    let critic = MineNetwork::new(fa.dim(1)?, fd.dim(1)?, cfg.hidden, cfg.hidden_layers, DType::F32, &mut r)?;
    let vars: Vec<_> = critic.params().into_iter().map(|p| p.var).collect();
    let mut opt = Adam::new(vars, cfg.learning_rate, None);
    let held_out = |r: &mut Rng| -> Result<f64> {
        let k = cfg.eval_permutations.max(1);
        let mut total = 0.0;
        for _ in 0..k {
            let perm = random_permutation(n - half, r);
            total += estimate_mi_with_permutation(&critic, &fa_eval, &fd_eval, &perm)?.value_f64()?;
        }
        Ok(total / k as f64)
    };
    let every = cfg.eval_every.max(1);
    let mut best = f64::NEG_INFINITY;
    for step in 0..cfg.steps {
        let perm = random_permutation(half, &mut r);
        let est = estimate_mi_with_permutation(&critic, &fa_fit, &fd_fit, &perm)?;
        opt.step_scaled(&est.value.backward()?, -1.0)?;
        if (step + 1) % every == 0 || step + 1 == cfg.steps {
            best = best.max(held_out(&mut r)?);
        }
    }
    if cfg.steps == 0 {
        best = held_out(&mut r)?;
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::NetworkConfig;
    use crate::synth::{canonical_domain, synth_domain_dataset};

    fn mask(labels: &[u8]) -> Mask {
        Mask::new(labels.len(), 1, labels.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let l = mask(&[1, 1, 0, 0]);
        assert_eq!(dice_score(&[1.0, 1.0, 0.0, 0.0], &l, 0.5).unwrap(), 1.0);
        assert_eq!(dice_score(&[0.0, 0.0, 1.0, 1.0], &l, 0.5).unwrap(), 0.0);
        assert_eq!(dice_score(&[0.9, 0.0, 0.7, 0.0], &l, 0.5).unwrap(), 0.5);
        assert_eq!(dice_score(&[0.1; 4], &mask(&[0; 4]), 0.5).unwrap(), 1.0);
        assert_eq!(dice_score(&[0.9, 0.0, 0.0, 0.0], &mask(&[0; 4]), 0.5).unwrap(), 0.0);
        assert!(dice_score(&[0.0; 3], &l, 0.5).is_err());
    }

    #[test]
    fn split_arithmetic() {
        let (a, h) = split_for_adaptation(540, 0.05, 0).unwrap();
        assert_eq!((a.len(), h.len()), (27, 513));
        let mut all: Vec<usize> = a.iter().chain(&h).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..540).collect::<Vec<_>>());
        assert_eq!(split_for_adaptation(540, 0.05, 0).unwrap().0, a);
        assert!(split_for_adaptation(19, 0.5, 0).is_err());
        assert!(split_for_adaptation(20, 0.01, 0).is_err());
    }

    #[test]
    fn report_statistics_follow_the_scores() {
        let scores = vec![
            SampleScore { name: "a".into(), dsc: 0.5 },
            SampleScore { name: "b".into(), dsc: 1.0 },
        ];
        let d = DomainReport::from_scores("A".into(), scores);
        assert_eq!(d.mean_dsc, 0.75);
        assert_eq!(d.std_dsc, 0.25);
        let report = EvalReport {
            checkpoint_id: None,
            protocol: Protocol::ZeroShot,
            threshold: 0.5,
            domains: vec![d],
            split: None,
        };
        assert_eq!(EvalReport::from_json(&report.to_json()).unwrap(), report);
        assert!(report.to_table().contains("zero_shot"));
    }

    #[test]
    fn evaluate_is_deterministic_and_read_only() {
        let ds = synth_domain_dataset(&canonical_domain("B").unwrap(), 5, 1, 16).unwrap();
        let mut cfg = NetworkConfig::small(16);
        cfg.anatomy_channels = vec![4, 4];
        cfg.domain_channels = vec![4, 4];
        cfg.decoder_channels = vec![4, 4];
        let bundle = ModelBundle::new(cfg, 2).unwrap();
        let before = bundle.param_hashes().unwrap();
        let r1 = evaluate(&bundle, &ds, None).unwrap();
        let r2 = evaluate(&bundle, &ds, None).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(bundle.param_hashes().unwrap(), before);
        assert_eq!(r1.domains.len(), 1);
        assert_eq!(r1.domains[0].count, 5);
        assert!(r1.domains[0].per_sample.iter().all(|s| (0.0..=1.0).contains(&s.dsc)));
    }
}
