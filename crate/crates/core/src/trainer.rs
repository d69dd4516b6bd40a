//! The alternating training loop.
//!
//! Each step builds one quadruple per sample, runs a single forward pass, computes
//! every objective's gradients from that pass and only then applies the updates,
//! in this order:
//!
//! | objective                 | descends                   | updates          |
//! |---------------------------|----------------------------|------------------|
//! | [`Objective::MineBound`]  | `-(MI_1 + MI_2)`           | MINE             |
//! | [`Objective::Reconstruction`] | `sum_ij L_rec(x_aidj)` | E_a, E_d, G      |
//! | [`Objective::MutualInformation`] | `MI_1 + MI_2`       | E_a, E_d         |
//! | [`Objective::Segmentation`] | `L_seg(l1,m1) + L_seg(l2,m2)` | E_a, Seg    |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{Dataset, Mask, Sample};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::losses::{rec_loss, seg_loss};
use crate::mine::{estimate_mi_with_permutation, mi_loss, random_permutation};
use crate::networks::{images_to_tensor, Component, FeatureMap, FeatureRole, ModelBundle};
use crate::nn::Adam;
use crate::seed::{derive_seed, derived_rng};
use crate::transforms::{make_quadruple, Quadruple};

/// Environment variable capping the number of augmentation workers.
pub const THREADS_ENV: &str = "DISENTANGLE_SEG_THREADS";

pub const CHECKPOINT_BEST: &str = "checkpoint_best";
pub const CHECKPOINT_FINAL: &str = "checkpoint_final";
pub const METRICS_CSV: &str = "metrics.csv";
pub const EPOCHS_CSV: &str = "epochs.csv";
pub const CONFIG_JSON: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Objective {
    MineBound,
    Reconstruction,
    MutualInformation,
    Segmentation,
}

impl Objective {
    /// Update order within one step.
    pub const ORDER: [Objective; 4] = [
        Objective::MineBound,
        Objective::Reconstruction,
        Objective::MutualInformation,
        Objective::Segmentation,
    ];

    /// Components whose optimizers consume this objective's gradient.
    pub fn components(self) -> &'static [Component] {
        match self {
            Objective::MineBound => &[Component::Mine],
            Objective::Reconstruction => &[
                Component::AnatomyEncoder,
                Component::DomainEncoder,
                Component::Generator,
            ],
            Objective::MutualInformation => &[Component::AnatomyEncoder, Component::DomainEncoder],
            Objective::Segmentation => &[Component::AnatomyEncoder, Component::Segmentor],
        }
    }

    /// Objectives enabled by a config: toggles switch objectives off, as does a zero weight.
    pub fn enabled(cfg: &TrainConfig) -> Vec<Objective> {
        Self::ORDER
            .into_iter()
            .filter(|o| match o {
                Objective::MineBound => cfg.use_mi_loss,
                Objective::Reconstruction => cfg.loss_weights.rec > 0.0,
                Objective::MutualInformation => cfg.use_mi_loss && cfg.loss_weights.mi > 0.0,
                Objective::Segmentation => cfg.loss_weights.seg > 0.0,
            })
            .collect()
    }
}

/// One row of `metrics.csv`. Losses are unweighted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub mi_estimate_1: f64,
    pub mi_estimate_2: f64,
    pub seg_loss: f64,
    pub rec_a1d1: f64,
    pub rec_a2d2: f64,
    pub rec_a1d2: f64,
    pub rec_a2d1: f64,
    /// Optimizer sub-steps taken (one per applied objective).
    pub updates: usize,
}

impl StepMetrics {
    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("mi_estimate_1", self.mi_estimate_1),
            ("mi_estimate_2", self.mi_estimate_2),
            ("seg_loss", self.seg_loss),
            ("rec_a1d1", self.rec_a1d1),
            ("rec_a2d2", self.rec_a2d2),
            ("rec_a1d2", self.rec_a1d2),
            ("rec_a2d1", self.rec_a2d1),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(k, _)| k)
    }
}

/// Per-epoch summary, one row of `epochs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_seg_loss: f64,
    pub mean_rec_loss: f64,
    pub mean_mi_estimate: f64,
    pub val_dsc: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar()?)
}

fn masks_to_tensor(masks: &[&Mask]) -> Result<Tensor> {
    let first = masks[0];
    let (w, h) = (first.width(), first.height());
    let buf: Vec<f32> = masks.iter().flat_map(|m| m.labels().iter().map(|&v| v as f32)).collect();
    Ok(Tensor::from_vec(buf, (masks.len(), h, w), &Device::Cpu)?)
}

/// Thread pool for per-sample augmentation, sized by [`THREADS_ENV`] when set.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::config(THREADS_ENV, format!("expected a non-negative integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidValue(format!("cannot start worker pool: {e}")))
}

pub struct Trainer {
    cfg: TrainConfig,
    bundle: ModelBundle,
    /// One optimizer per (objective, component) pair, so each update line
    /// keeps its own moment estimates.
    optimizers: BTreeMap<(Objective, Component), Adam>,
    history: Vec<StepMetrics>,
    pool: rayon::ThreadPool,
}

impl Trainer {
    /// Fresh bundle initialized from the config seed.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let bundle = ModelBundle::new(cfg.network.clone(), derive_seed("init", cfg.seed, 0))?;
        Self::with_bundle(cfg, bundle)
    }

    pub fn with_bundle(cfg: TrainConfig, bundle: ModelBundle) -> Result<Self> {
        cfg.validate()?;
        if bundle.config() != &cfg.network {
            return Err(Error::Contract("bundle architecture differs from the training config".into()));
        }
        let optimizers = Objective::ORDER
            .into_iter()
            .flat_map(|o| o.components().iter().map(move |&c| (o, c)))
            .map(|(o, c)| {
                let lr = if c == Component::Mine { cfg.mine_lr() } else { cfg.learning_rate };
                ((o, c), Adam::new(bundle.vars(c), lr, cfg.grad_clip_norm))
            })
            .collect();
        Ok(Self {
            cfg,
            bundle,
            optimizers,
            history: Vec::new(),
            pool: worker_pool()?,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> ModelBundle {
        self.bundle
    }

    pub fn history(&self) -> &[StepMetrics] {
        &self.history
    }

    /// Sub-steps taken so far on one component, summed over its objectives.
    pub fn optimizer_steps(&self, component: Component) -> u64 {
        self.optimizers
            .iter()
            .filter(|((_, c), _)| *c == component)
            .map(|(_, opt)| opt.steps())
            .sum::<u64>()
    }

    /// Quadruples for a batch. Each sample's stream is derived from `batch_key`
    /// and its batch position, so results do not depend on the worker count.
    pub fn build_quadruples(&self, batch: &[&Sample], batch_key: u64) -> Result<Vec<Quadruple>> {
        let transforms = &self.cfg.transforms;
        self.pool.install(|| {
            batch
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut rng = derived_rng("quadruple", batch_key, i as u64);
                    make_quadruple(&s.image, &s.mask, transforms, &mut rng)
                })
                .collect()
        })
    }

    /// One step with the config's enabled objectives.
    pub fn train_step(&mut self, batch: &[&Sample], epoch: usize) -> Result<StepMetrics> {
        let step = self.history.len();
        let quads = self.build_quadruples(batch, derive_seed("batch", self.cfg.seed, step as u64))?;
        let objectives = Objective::enabled(&self.cfg);
        self.step_on_quadruples(&quads, epoch, &objectives)
    }

    /// One step on prepared quadruples, applying only `objectives` (in [`Objective::ORDER`]).
    pub fn step_on_quadruples(&mut self, quads: &[Quadruple], epoch: usize, objectives: &[Objective]) -> Result<StepMetrics> {
        let n = quads.len();
        if n < 2 {
            return Err(Error::InvalidValue(format!("a training step needs at least 2 samples, got {n}")));
        }
        let step = self.history.len();
        let has = |o: Objective| objectives.contains(&o);

        // Only x_a1d1 and x_a2d2 enter the encoders; both halves share one pass.
        let inputs: Vec<_> = quads.iter().map(|q| &q.x_a1d1).chain(quads.iter().map(|q| &q.x_a2d2)).collect();
        let x = images_to_tensor(&inputs)?;
        let fa = self.bundle.encode_anatomy(&x)?;
        let fd = self.bundle.encode_domain(&x)?;

        // Segmentation of both inputs.
        let probs = self.bundle.segment(&fa)?.squeeze(0)?;
        let labels = masks_to_tensor(&quads.iter().map(|q| &q.l1).chain(quads.iter().map(|q| &q.l2)).collect::<Vec<_>>())?;
        let seg_1 = seg_loss(&labels.narrow(0, 0, n)?, &probs.narrow(0, 0, n)?, &self.cfg.loss)?;
        let seg_2 = seg_loss(&labels.narrow(0, n, n)?, &probs.narrow(0, n, n)?, &self.cfg.loss)?;
        let seg_total = (&seg_1 + &seg_2)?;

        // Reconstructions ordered a1d1, a2d2, a1d2, a2d1.
        let fd_swapped = Tensor::cat(&[&fd.values.narrow(1, n, n)?, &fd.values.narrow(1, 0, n)?], 1)?;
        let fa_all = FeatureMap {
            values: Tensor::cat(&[&fa.values, &fa.values], 1)?,
            role: FeatureRole::Anatomical,
            skips: Vec::new(),
        };
        let fd_all = FeatureMap {
            values: Tensor::cat(&[&fd.values, &fd_swapped], 1)?,
            role: FeatureRole::Domain,
            skips: Vec::new(),
        };
        let recon = self.bundle.generate(&fa_all, &fd_all)?.squeeze(0)?;
        let targets: Vec<_> = [
            quads.iter().map(|q| &q.x_a1d1).collect::<Vec<_>>(),
            quads.iter().map(|q| &q.x_a2d2).collect(),
            quads.iter().map(|q| &q.x_a1d2).collect(),
            quads.iter().map(|q| &q.x_a2d1).collect(),
        ]
        .concat();
        let targets = images_to_tensor(&targets)?.squeeze(0)?;
        let rec: Vec<Tensor> = (0..4)
            .map(|k| rec_loss(&targets.narrow(0, k * n, n)?, &recon.narrow(0, k * n, n)?))
            .collect::<Result<_>>()?;
        let rec_total = if self.cfg.use_cross_rec {
            (((&rec[0] + &rec[1])? + &rec[2])? + &rec[3])?
        } else {
            (&rec[0] + &rec[1])?
        };

        // Mutual information on pooled features of each input image.
        let pa = fa.pooled()?;
        let pd = fd.pooled()?;
        let mut perm_rng = derived_rng("marginal", self.cfg.seed, step as u64);
        let perm1 = random_permutation(n, &mut perm_rng);
        let perm2 = random_permutation(n, &mut perm_rng);
        let t = self.bundle.mine();
        let est1 = estimate_mi_with_permutation(t, &pa.narrow(0, 0, n)?, &pd.narrow(0, 0, n)?, &perm1)?;
        let est2 = estimate_mi_with_permutation(t, &pa.narrow(0, n, n)?, &pd.narrow(0, n, n)?, &perm2)?;

        let metrics = StepMetrics {
            step,
            epoch,
            mi_estimate_1: est1.value_f64()?,
            mi_estimate_2: est2.value_f64()?,
            seg_loss: scalar(&seg_total)?,
            rec_a1d1: scalar(&rec[0])?,
            rec_a2d2: scalar(&rec[1])?,
            rec_a1d2: scalar(&rec[2])?,
            rec_a2d1: scalar(&rec[3])?,
            updates: 0,
        };
        if let Some(what) = metrics.first_non_finite() {
            let mut history = self.history.clone();
            history.push(metrics);
            return Err(Error::NonFinite {
                what: what.to_string(),
                step,
                history,
            });
        }

        // All gradients come from this step's forward pass and are taken before
        // any parameter moves (updates write variables in place).
        let w = self.cfg.loss_weights;
        let mut stores: Vec<GradStore> = Vec::new();
        let mut plan: Vec<(Objective, usize, f64)> = Vec::new();
        if has(Objective::MineBound) || has(Objective::MutualInformation) {
            // The MINE objective is -(MI_1 + MI_2), so one backward pass of the sum
            // serves both: MINE steps on the negated gradient.
            let mi_sum = (mi_loss(&est1) + mi_loss(&est2))?;
            stores.push(mi_sum.backward()?);
            if has(Objective::MineBound) {
                plan.push((Objective::MineBound, stores.len() - 1, -1.0));
            }
            if has(Objective::MutualInformation) {
                plan.push((Objective::MutualInformation, stores.len() - 1, w.mi));
            }
        }
        if has(Objective::Reconstruction) {
            stores.push(rec_total.backward()?);
            plan.push((Objective::Reconstruction, stores.len() - 1, w.rec));
        }
        if has(Objective::Segmentation) {
            stores.push(seg_total.backward()?);
            plan.push((Objective::Segmentation, stores.len() - 1, w.seg));
        }
        plan.sort_by_key(|(o, _, _)| *o);

        for (objective, store, factor) in &plan {
            for &c in objective.components() {
                self.optimizers
                    .get_mut(&(*objective, c))
                    .expect("one optimizer per routed pair")
                    .step_scaled(&stores[*store], *factor)?;
            }
        }
        let updates = plan.len();
        let metrics = StepMetrics { updates, ..metrics };
        self.history.push(metrics.clone());
        Ok(metrics)
    }
}

/// Everything a finished run produced.
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub best_val_dsc: f64,
    pub best_epoch: usize,
    pub epochs: Vec<EpochSummary>,
    pub history: Vec<StepMetrics>,
    pub out_dir: PathBuf,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::InvalidValue(format!("{}: {other:?}", path.display())),
    })?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Full run: `cfg.epochs` passes over `train` in a seeded per-epoch order,
/// validation DSC after each epoch. Writes `config.json`, `metrics.csv`,
/// `epochs.csv`, `checkpoint_best` and `checkpoint_final` into `out_dir`.
pub fn train(cfg: &TrainConfig, train: &Dataset, val: &Dataset, out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    let out_dir = out_dir.as_ref();
    cfg.validate()?;
    for (what, ds) in [("training", train), ("validation", val)] {
        if ds.resolution() != cfg.resolution() {
            return Err(Error::config(
                "network.resolution",
                format!(
                    "{what} images are {0}x{0} but the network expects {1}x{1}",
                    ds.resolution(),
                    cfg.resolution()
                ),
            ));
        }
    }
    if train.len() < 2 {
        return Err(Error::InvalidValue("training needs at least 2 samples".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join(CONFIG_JSON);
    fs::write(&config_path, cfg.to_json()).map_err(|e| Error::io(&config_path, e))?;

    let mut trainer = Trainer::new(cfg.clone())?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::NEG_INFINITY, 0);
    let best_path = out_dir.join(CHECKPOINT_BEST);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let order = random_permutation(train.len(), &mut derived_rng("shuffle", cfg.seed, epoch as u64));
        let first_step = trainer.history().len();
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                // The marginal shuffle needs two samples.
                continue;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train.samples()[i]).collect();
            let result = trainer.train_step(&batch, epoch);
            if result.is_err() {
                // Keep whatever was logged for diagnosis.
                let _ = write_csv(&out_dir.join(METRICS_CSV), trainer.history());
            }
            result?;
        }
        let steps = &trainer.history()[first_step..];
        let mean = |f: fn(&StepMetrics) -> f64| steps.iter().map(f).sum::<f64>() / steps.len().max(1) as f64;
        let val_dsc = evaluate(trainer.bundle(), val, None)?.mean_dsc();
        let summary = EpochSummary {
            epoch,
            steps: steps.len(),
            mean_seg_loss: mean(|m| m.seg_loss),
            mean_rec_loss: mean(|m| m.rec_a1d1 + m.rec_a2d2 + m.rec_a1d2 + m.rec_a2d1),
            mean_mi_estimate: mean(|m| 0.5 * (m.mi_estimate_1 + m.mi_estimate_2)),
            val_dsc,
        };
        log::info!(
            "epoch {epoch}: seg {:.4} rec {:.4} mi {:.4} val_dsc {:.4} ({:.1}s)",
            summary.mean_seg_loss,
            summary.mean_rec_loss,
            summary.mean_mi_estimate,
            val_dsc,
            started.elapsed().as_secs_f64()
        );
        if val_dsc > best.0 {
            best = (val_dsc, epoch);
            trainer.bundle().save(&best_path)?;
        }
        epochs.push(summary);
    }
    trainer.bundle().save(out_dir.join(CHECKPOINT_FINAL))?;
    write_csv(&out_dir.join(METRICS_CSV), trainer.history())?;
    write_csv(&out_dir.join(EPOCHS_CSV), &epochs)?;
    let history = trainer.history().to_vec();
    Ok(TrainOutcome {
        bundle: trainer.into_bundle(),
        best_val_dsc: best.0,
        best_epoch: best.1,
        epochs,
        history,
        out_dir: out_dir.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::NetworkConfig;
    use crate::synth::{canonical_domain, synth_domain_dataset};
    use crate::transforms::TransformConfig;

    fn tiny_config() -> TrainConfig {
        let mut network = NetworkConfig::small(16);
        network.anatomy_channels = vec![4, 8];
        network.domain_channels = vec![4, 4];
        network.decoder_channels = vec![8, 4];
        network.mine_hidden = 16;
        TrainConfig {
            network,
            batch_size: 4,
            epochs: 1,
            ..TrainConfig::default()
        }
    }

    fn tiny_batch(n: usize) -> Dataset {
        synth_domain_dataset(&canonical_domain("A").unwrap(), n, 3, 16).unwrap()
    }

    #[test]
    fn routing_table_matches_the_update_rules() {
        use Component::*;
        assert_eq!(Objective::MineBound.components(), &[Mine]);
        assert_eq!(
            Objective::Reconstruction.components(),
            &[AnatomyEncoder, DomainEncoder, Generator]
        );
        assert_eq!(Objective::MutualInformation.components(), &[AnatomyEncoder, DomainEncoder]);
        assert_eq!(Objective::Segmentation.components(), &[AnatomyEncoder, Segmentor]);
    }

    #[test]
    fn toggles_select_objectives() {
        let mut cfg = tiny_config();
        assert_eq!(Objective::enabled(&cfg), Objective::ORDER.to_vec());
        cfg.use_mi_loss = false;
        assert_eq!(
            Objective::enabled(&cfg),
            vec![Objective::Reconstruction, Objective::Segmentation]
        );
        cfg.loss_weights.rec = 0.0;
        assert_eq!(Objective::enabled(&cfg), vec![Objective::Segmentation]);
    }

    #[test]
    fn step_counts_updates_and_logs() {
        let ds = tiny_batch(4);
        let batch: Vec<&Sample> = ds.samples().iter().collect();
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        let m = trainer.train_step(&batch, 0).unwrap();
        assert_eq!(m.updates, 4);
        assert_eq!(trainer.optimizer_steps(Component::AnatomyEncoder), 3);
        assert_eq!(trainer.optimizer_steps(Component::DomainEncoder), 2);
        assert_eq!(trainer.optimizer_steps(Component::Mine), 1);

        let mut cfg = tiny_config();
        cfg.use_mi_loss = false;
        let mut trainer = Trainer::new(cfg).unwrap();
        assert_eq!(trainer.train_step(&batch, 0).unwrap().updates, 2);
        assert_eq!(trainer.optimizer_steps(Component::Mine), 0);
    }

    #[test]
    fn single_sample_batch_is_rejected() {
        let ds = tiny_batch(1);
        let batch: Vec<&Sample> = ds.samples().iter().collect();
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        assert!(trainer.train_step(&batch, 0).is_err());
    }

    #[test]
    fn collapsed_quadruple_makes_cross_and_matched_targets_equal() {
        let ds = tiny_batch(3);
        let mut cfg = tiny_config();
        cfg.transforms = TransformConfig::disabled();
        let trainer = Trainer::new(cfg).unwrap();
        let batch: Vec<&Sample> = ds.samples().iter().collect();
        let quads = trainer.build_quadruples(&batch, 9).unwrap();
        for q in &quads {
            assert_eq!(q.x_a1d1, q.x_a1d2);
            assert_eq!(q.x_a2d2, q.x_a2d1);
            assert_eq!(q.x_a1d1, q.x_a2d2);
        }
    }

    #[test]
    fn quadruples_do_not_depend_on_worker_count() {
        let ds = tiny_batch(5);
        let batch: Vec<&Sample> = ds.samples().iter().collect();
        let trainer = Trainer::new(tiny_config()).unwrap();
        let parallel = trainer.build_quadruples(&batch, 4).unwrap();
        let serial: Vec<Quadruple> = batch
            .iter()
            .enumerate()
            .map(|(i, s)| {
                make_quadruple(&s.image, &s.mask, &trainer.cfg.transforms, &mut derived_rng("quadruple", 4, i as u64))
                    .unwrap()
            })
            .collect();
        assert_eq!(parallel, serial);
    }
}
