//! Loss assembly and the training loop.
//!
//! Direct variants minimize their grid NLL. VAE variants minimize the
//! negative ELBO (reconstruction plus closed-form latent KL); adversarial
//! variants alternate one discriminator step (real batch labeled 1,
//! generated batch labeled 0) with one generator step on the convex loss
//! mixture `alpha * L_vae + (1 - alpha) * L_adv`.
//!
//! Determinism contract: the trajectory is a pure function of
//! `(dataset, config)`. Batch order comes from a per-epoch shuffle stream,
//! reparameterization noise from per-step streams, and per-sample gradients
//! are reduced in slot order, so rayon-parallel batches are bit-identical
//! to serial execution.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use drs_tensor::optim::{adadelta_step, AdadeltaState};
use drs_tensor::{Scalar, Tape, TensorError, TensorId};

use crate::dataset::{dataset_content_hash, Dataset, FrameRecord};
use crate::nets::{
    gmm_nll, normal_nll, reparameterize, ArchConfig, BindMode, ModelVariant, NetError, RadarModel,
    TrainMeta,
};
use crate::rng::substream;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),

    #[error("dataset of {len} frames cannot be split")]
    DatasetTooSmall { len: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error(transparent)]
    Net(#[from] NetError),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Training hyperparameters. `alpha` weights the VAE loss against the
/// adversarial loss for the mixed variant; `sigma_sq` is the observation
/// variance of the reconstruction term in normalized units.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    pub arch: ArchConfig,
    pub alpha: f64,
    pub sigma_sq: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// `Some(f)` holds out `1 - f` of the frames; `None` trains on all.
    pub split_fraction: Option<f64>,
    pub disc_updates: usize,
    pub gen_updates: usize,
}

impl TrainConfig {
    pub fn new(variant: ModelVariant, arch: ArchConfig) -> Self {
        Self {
            variant,
            arch,
            alpha: 0.99,
            sigma_sq: 1.0,
            batch_size: 16,
            epochs: 5,
            seed: 0,
            split_fraction: Some(0.9),
            disc_updates: 1,
            gen_updates: 1,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.sigma_sq > 0.0) {
            return Err(TrainError::Config(format!(
                "sigma_sq {} must be positive",
                self.sigma_sq
            )));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".to_string()));
        }
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be >= 1".to_string()));
        }
        if let Some(f) = self.split_fraction {
            if !(0.0 < f && f < 1.0) {
                return Err(TrainError::Config(format!(
                    "split fraction {f} outside (0, 1)"
                )));
            }
        }
        if self.disc_updates < 1 || self.gen_updates < 1 {
            return Err(TrainError::Config(
                "update ratio entries must be >= 1".to_string(),
            ));
        }
        Ok(())
    }

    /// Effective VAE-vs-adversarial mixing weight for the variant.
    fn alpha_eff(&self) -> f64 {
        match self.variant {
            ModelVariant::VaeMixed => self.alpha,
            ModelVariant::VaeAdv => 0.0,
            _ => 1.0,
        }
    }
}

/// Per-epoch log record (line-delimited JSON on disk).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_vae: Option<f64>,
    pub loss_adv: Option<f64>,
    pub nll: Option<f64>,
    pub disc_accuracy: Option<f64>,
    pub wall_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

/// Disjoint, exhaustive, frame-wise random split. Both sides are returned in
/// ascending index order.
pub fn split_dataset(
    n_frames: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if n_frames < 2 {
        return Err(TrainError::DatasetTooSmall { len: n_frames });
    }
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(TrainError::Config(format!(
            "split fraction {fraction} outside (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..n_frames).collect();
    fisher_yates(&mut order, &mut substream(seed, "split", 0));
    let k = ((n_frames as f64 * fraction).round() as usize).clamp(1, n_frames - 1);
    let mut train: Vec<usize> = order[..k].to_vec();
    let mut test: Vec<usize> = order[k..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn fisher_yates(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

// ── Loss builders ───────────────────────────────────────────────────────

/// Closed-form KL of a diagonal Gaussian against the unit Gaussian:
/// `0.5 sum(mu^2 + sigma^2 - 1 - log sigma^2)`.
pub fn kl_standard_normal<S: Scalar>(
    tape: &mut Tape<S>,
    mu: TensorId,
    logvar: TensorId,
) -> Result<TensorId, TensorError> {
    let mu2 = tape.square(mu)?;
    let var = tape.exp(logvar)?;
    let sum_terms = tape.add(mu2, var)?;
    let lv_plus_one = tape.add_scalar(logvar, S::one())?;
    let inner = tape.sub(sum_terms, lv_plus_one)?;
    let total = tape.sum(inner)?;
    tape.scale(total, S::from_f64(0.5))
}

/// Negative ELBO with constants dropped:
/// `sum((y - y_hat)^2) / (2 sigma^2) + KL[Q || N(0, I)]`.
pub fn loss_vae<S: Scalar>(
    tape: &mut Tape<S>,
    y_hat: TensorId,
    y: TensorId,
    mu: TensorId,
    logvar: TensorId,
    sigma_sq: f64,
) -> Result<TensorId, TensorError> {
    let diff = tape.sub(y, y_hat)?;
    let sq = tape.square(diff)?;
    let sse = tape.sum(sq)?;
    let recon = tape.scale(sse, S::from_f64(1.0 / (2.0 * sigma_sq)))?;
    let kl = kl_standard_normal(tape, mu, logvar)?;
    tape.add(recon, kl)
}

const PROB_CLAMP: f64 = 1e-7;

/// Generator-side adversarial loss: `-log d_fake` (fakes labeled real).
pub fn loss_adv<S: Scalar>(tape: &mut Tape<S>, d_fake: TensorId) -> Result<TensorId, TensorError> {
    let p = tape.clamp(
        d_fake,
        S::from_f64(PROB_CLAMP),
        S::from_f64(1.0 - PROB_CLAMP),
    )?;
    let lp = tape.log(p)?;
    tape.scale(lp, S::from_f64(-1.0))
}

/// Discriminator loss: `-log d_real - log(1 - d_fake)`.
pub fn loss_disc<S: Scalar>(
    tape: &mut Tape<S>,
    d_real: TensorId,
    d_fake: TensorId,
) -> Result<TensorId, TensorError> {
    let lo = S::from_f64(PROB_CLAMP);
    let hi = S::from_f64(1.0 - PROB_CLAMP);
    let pr = tape.clamp(d_real, lo, hi)?;
    let pf = tape.clamp(d_fake, lo, hi)?;
    let neg_pf = tape.scale(pf, S::from_f64(-1.0))?;
    let one_minus = tape.add_scalar(neg_pf, S::one())?;
    let log_real = tape.log(pr)?;
    let log_not_fake = tape.log(one_minus)?;
    let sum = tape.add(log_real, log_not_fake)?;
    tape.scale(sum, S::from_f64(-1.0))
}

/// Convex combination `alpha * l_vae + (1 - alpha) * l_adv`.
pub fn loss_mixed<S: Scalar>(
    tape: &mut Tape<S>,
    l_vae: TensorId,
    l_adv: TensorId,
    alpha: f64,
) -> Result<TensorId, TensorError> {
    let a = tape.scale(l_vae, S::from_f64(alpha))?;
    let b = tape.scale(l_adv, S::from_f64(1.0 - alpha))?;
    tape.add(a, b)
}

// ── Training loop ───────────────────────────────────────────────────────

struct SampleOut {
    grads: Vec<Vec<f32>>,
    primary: f64,
    adv: Option<f64>,
    d_real: Option<f64>,
    d_fake: Option<f64>,
}

fn wrap_sample_err(e: TrainError, epoch: usize, batch: usize) -> TrainError {
    match e {
        TrainError::Net(NetError::Tensor(t)) | TrainError::Tensor(t) => {
            if matches!(t, TensorError::NonFinite { .. } | TensorError::LogDomain { .. }) {
                TrainError::NonFinite {
                    epoch,
                    batch,
                    detail: t.to_string(),
                }
            } else {
                TrainError::Tensor(t)
            }
        }
        other => other,
    }
}

/// Draws `count` standard normal values as f32.
fn draw_noise(rng: &mut ChaCha8Rng, count: usize) -> Vec<f32> {
    (0..count)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) as f32)
        .collect()
}

/// Sums per-sample gradient bundles in slot order and applies one mean
/// ADADELTA step to every parameter in `range`.
fn apply_batch_grads(
    model: &mut RadarModel<f32>,
    states: &mut [AdadeltaState<f32>],
    range: std::ops::Range<usize>,
    outs: &[SampleOut],
) -> Result<(), TrainError> {
    let scale = 1.0 / outs.len() as f32;
    for (offset, idx) in range.enumerate() {
        let mut acc = vec![0.0f32; model.store.tensor_at(idx).numel()];
        for out in outs {
            for (a, g) in acc.iter_mut().zip(&out.grads[offset]) {
                *a += *g;
            }
        }
        acc.iter_mut().for_each(|v| *v *= scale);
        let (_, tensor) = model.store.entry_mut(idx);
        tensor.set_grad(acc)?;
        adadelta_step(tensor, &mut states[idx])?;
    }
    Ok(())
}

/// Extracts the gradients of every trainable leaf in `range`, in order.
fn collect_range_grads(
    tape: &mut Tape<f32>,
    bound: &crate::nets::Bound,
    range: std::ops::Range<usize>,
) -> Vec<Vec<f32>> {
    range
        .map(|idx| {
            tape.take_grad(bound.ids()[idx])
                .expect("trainable leaf has a gradient after backward")
        })
        .collect()
}

/// Trains a model. `hook` fires after every epoch with the current model and
/// its stats (the CLI uses it for logging and periodic checkpoints).
pub fn train<F>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut hook: F,
) -> Result<(RadarModel<f32>, TrainLog, TrainMeta), TrainError>
where
    F: FnMut(usize, &RadarModel<f32>, &EpochStats),
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Config("dataset is empty".to_string()));
    }
    if dataset.manifest.grid != cfg.arch.grid {
        return Err(TrainError::Config(
            "dataset grid spec does not match architecture grid".to_string(),
        ));
    }
    let train_idx: Vec<usize> = match cfg.split_fraction {
        Some(f) => split_dataset(dataset.len(), f, cfg.seed)?.0,
        None => (0..dataset.len()).collect(),
    };

    let mut model = RadarModel::<f32>::init(cfg.variant, cfg.arch.clone(), cfg.seed)?;
    let mut states: Vec<AdadeltaState<f32>> = model
        .store
        .iter()
        .map(|(_, t)| AdadeltaState::for_param(t))
        .collect::<Result<_, _>>()?;

    let mut log = TrainLog::default();
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut order = train_idx.clone();
        fisher_yates(&mut order, &mut substream(cfg.seed, "shuffle", epoch as u64));

        let mut primary_sum = 0.0;
        let mut adv_sum = 0.0;
        let mut adv_count = 0usize;
        let mut sample_count = 0usize;
        let mut disc_correct = 0usize;
        let mut disc_total = 0usize;

        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let records: Vec<&FrameRecord> = batch.iter().map(|&i| &dataset.frames[i]).collect();

            if model.variant.has_discriminator() {
                for k in 0..cfg.disc_updates {
                    let mut noise_rng =
                        substream(cfg.seed, "disc-fake", step * cfg.disc_updates as u64 + k as u64);
                    let priors: Vec<Vec<f32>> = (0..records.len())
                        .map(|_| draw_noise(&mut noise_rng, cfg.arch.d_z))
                        .collect();
                    let outs: Vec<SampleOut> = records
                        .par_iter()
                        .zip(priors.par_iter())
                        .map(|(record, z)| disc_sample(&model, record, z))
                        .collect::<Result<_, _>>()
                        .map_err(|e| wrap_sample_err(e, epoch, batch_no))?;
                    for out in &outs {
                        let (dr, df) = (out.d_real.unwrap(), out.d_fake.unwrap());
                        disc_correct +=
                            usize::from(dr > 0.5) + usize::from(df < 0.5);
                        disc_total += 2;
                    }
                    apply_batch_grads(&mut model, &mut states, model.disc_param_range(), &outs)?;
                }
            }

            for k in 0..cfg.gen_updates {
                let mut noise_rng =
                    substream(cfg.seed, "recog", step * cfg.gen_updates as u64 + k as u64);
                let etas: Vec<Vec<f32>> = (0..records.len())
                    .map(|_| draw_noise(&mut noise_rng, cfg.arch.d_z))
                    .collect();
                let outs: Vec<SampleOut> = records
                    .par_iter()
                    .zip(etas.par_iter())
                    .map(|(record, eta)| gen_sample(&model, cfg, record, eta))
                    .collect::<Result<_, _>>()
                    .map_err(|e| wrap_sample_err(e, epoch, batch_no))?;
                for out in &outs {
                    primary_sum += out.primary;
                    if let Some(a) = out.adv {
                        adv_sum += a;
                        adv_count += 1;
                    }
                    sample_count += 1;
                }
                apply_batch_grads(&mut model, &mut states, model.generator_param_range(), &outs)?;
            }
            step += 1;
        }

        let mean_primary = primary_sum / sample_count.max(1) as f64;
        let stats = EpochStats {
            epoch,
            loss_vae: cfg.variant.is_vae_family().then_some(mean_primary),
            loss_adv: (adv_count > 0).then(|| adv_sum / adv_count as f64),
            nll: (!cfg.variant.is_vae_family()).then_some(mean_primary),
            disc_accuracy: (disc_total > 0).then(|| disc_correct as f64 / disc_total as f64),
            wall_s: t0.elapsed().as_secs_f64(),
        };
        log.epochs.push(stats.clone());
        hook(epoch, &model, &stats);
    }

    let meta = TrainMeta {
        seed: cfg.seed,
        epochs: cfg.epochs,
        alpha: cfg.alpha_eff(),
        sigma_sq: cfg.sigma_sq,
        batch_size: cfg.batch_size,
        split_fraction: cfg.split_fraction.unwrap_or(1.0),
        split_seed: cfg.seed,
        dataset_hash: dataset_content_hash(dataset),
        dataset_frames: dataset.len(),
    };
    Ok((model, log, meta))
}

/// One generator-side sample: forward, loss, backward, gradient bundle.
fn gen_sample(
    model: &RadarModel<f32>,
    cfg: &TrainConfig,
    record: &FrameRecord,
    eta: &[f32],
) -> Result<SampleOut, TrainError> {
    let mut tape = Tape::<f32>::new();
    let bound = model.bind(&mut tape, BindMode::TrainGenerator)?;
    let raster = model.insert_raster(&mut tape, &record.raster)?;
    let objects = model.insert_objects(&mut tape, &record.objects)?;
    let y = model.insert_frame(&mut tape, &record.frame)?;
    let x = model.encode_scene(&mut tape, &bound, raster, objects)?;

    let (loss, primary, adv) = match model.variant {
        ModelVariant::Normal => {
            let grids = model.normal_forward(&mut tape, &bound, x)?;
            let nll = normal_nll(&mut tape, &grids, y)?;
            (nll, tape.scalar_value(nll) as f64, None)
        }
        ModelVariant::Gmm => {
            let grids = model.gmm_forward(&mut tape, &bound, x)?;
            let nll = gmm_nll(&mut tape, &grids, y)?;
            (nll, tape.scalar_value(nll) as f64, None)
        }
        _ => {
            let latent = model.recognition(&mut tape, &bound, x, y)?;
            let z = reparameterize(&mut tape, &latent, eta)?;
            let y_hat = model.decode(&mut tape, &bound, x, z)?;
            let l_vae = loss_vae(&mut tape, y_hat, y, latent.mu, latent.logvar, cfg.sigma_sq)?;
            if model.variant.has_discriminator() {
                let d_fake = model.discriminator_prob(&mut tape, &bound, y_hat)?;
                let l_adv = loss_adv(&mut tape, d_fake)?;
                let loss = loss_mixed(&mut tape, l_vae, l_adv, cfg.alpha_eff())?;
                (
                    loss,
                    tape.scalar_value(l_vae) as f64,
                    Some(tape.scalar_value(l_adv) as f64),
                )
            } else {
                (l_vae, tape.scalar_value(l_vae) as f64, None)
            }
        }
    };

    tape.backward(loss)?;
    let grads = collect_range_grads(&mut tape, &bound, model.generator_param_range());
    Ok(SampleOut {
        grads,
        primary,
        adv,
        d_real: None,
        d_fake: None,
    })
}

/// One discriminator-side sample: real labeled 1, generated labeled 0. The
/// generator is bound frozen, so the fake grid is a constant.
fn disc_sample(
    model: &RadarModel<f32>,
    record: &FrameRecord,
    z_prior: &[f32],
) -> Result<SampleOut, TrainError> {
    let mut tape = Tape::<f32>::new();
    let bound = model.bind(&mut tape, BindMode::TrainDiscriminator)?;
    let raster = model.insert_raster(&mut tape, &record.raster)?;
    let objects = model.insert_objects(&mut tape, &record.objects)?;
    let y_real = model.insert_frame(&mut tape, &record.frame)?;
    let x = model.encode_scene(&mut tape, &bound, raster, objects)?;
    let z = tape.constant(vec![model.arch.d_z], z_prior.to_vec())?;
    let y_fake = model.decode(&mut tape, &bound, x, z)?;
    let d_real = model.discriminator_prob(&mut tape, &bound, y_real)?;
    let d_fake = model.discriminator_prob(&mut tape, &bound, y_fake)?;
    let loss = loss_disc(&mut tape, d_real, d_fake)?;
    tape.backward(loss)?;
    let grads = collect_range_grads(&mut tape, &bound, model.disc_param_range());
    Ok(SampleOut {
        grads,
        primary: tape.scalar_value(loss) as f64,
        adv: None,
        d_real: Some(tape.scalar_value(d_real) as f64),
        d_fake: Some(tape.scalar_value(d_fake) as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{generate_dataset, OracleConfig};
    use crate::scene::PolarGridSpec;
    use approx::assert_relative_eq;

    #[test]
    fn split_is_a_disjoint_exhaustive_partition() {
        let (train, test) = split_dataset(100, 0.9, 1).unwrap();
        assert_eq!(train.len(), 90);
        assert_eq!(test.len(), 10);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let a = split_dataset(100, 0.9, 7).unwrap();
        let b = split_dataset(100, 0.9, 7).unwrap();
        assert_eq!(a, b);
        let others: Vec<_> = (8..13).map(|s| split_dataset(100, 0.9, s).unwrap()).collect();
        assert!(
            others.iter().all(|o| o.1 != a.1),
            "five different seeds should all differ from seed 7"
        );
    }

    #[test]
    fn split_rejects_tiny_datasets() {
        assert!(matches!(
            split_dataset(1, 0.9, 0),
            Err(TrainError::DatasetTooSmall { len: 1 })
        ));
    }

    #[test]
    fn vae_loss_is_zero_at_perfect_reconstruction_and_prior_posterior() {
        let mut tape = Tape::<f64>::new();
        let y = tape.constant(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y_hat = tape.constant(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mu = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let lv = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let loss = loss_vae(&mut tape, y_hat, y, mu, lv, 1.0).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn vae_loss_kl_closed_form_cases() {
        // mu = [1], logvar = [0] -> KL = 0.5 (1 + 1 - 1 - 0) = 0.5
        let mut tape = Tape::<f64>::new();
        let y = tape.constant(vec![1], vec![0.5]).unwrap();
        let y_hat = tape.constant(vec![1], vec![0.5]).unwrap();
        let mu = tape.constant(vec![1], vec![1.0]).unwrap();
        let lv = tape.constant(vec![1], vec![0.0]).unwrap();
        let loss = loss_vae(&mut tape, y_hat, y, mu, lv, 1.0).unwrap();
        assert_relative_eq!(tape.scalar_value(loss), 0.5, max_relative = 1e-12);

        // mu = [0], sigma^2 = e -> KL = 0.5 (e - 2) ~= 0.3591
        let mu = tape.constant(vec![1], vec![0.0]).unwrap();
        let lv = tape.constant(vec![1], vec![1.0]).unwrap();
        let kl = kl_standard_normal(&mut tape, mu, lv).unwrap();
        assert_relative_eq!(
            tape.scalar_value(kl),
            0.5 * (std::f64::consts::E - 2.0),
            max_relative = 1e-12
        );
    }

    #[test]
    fn kl_is_non_negative_and_zero_only_at_standard_normal() {
        let mut rng = substream(3, "kl", 0);
        for _ in 0..200 {
            let d = rng.random_range(1..=6usize);
            let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let lv: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut tape = Tape::<f64>::new();
            let m = tape.constant(vec![d], mu.clone()).unwrap();
            let l = tape.constant(vec![d], lv.clone()).unwrap();
            let kl = kl_standard_normal(&mut tape, m, l).unwrap();
            let v = tape.scalar_value(kl);
            assert!(v >= 0.0, "KL {v} negative for mu {mu:?}, lv {lv:?}");
            let at_prior = mu.iter().all(|&x| x == 0.0) && lv.iter().all(|&x| x == 0.0);
            if !at_prior {
                assert!(v > 0.0);
            }
        }
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        let l = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        let kl = kl_standard_normal(&mut tape, m, l).unwrap();
        assert_eq!(tape.scalar_value(kl), 0.0);
    }

    #[test]
    fn adversarial_loss_reference_values() {
        let mut tape = Tape::<f64>::new();
        let half = tape.constant(vec![1], vec![0.5]).unwrap();
        let l = loss_adv(&mut tape, half).unwrap();
        assert_relative_eq!(tape.scalar_value(l), 2.0f64.ln(), max_relative = 1e-9);

        let d_real = tape.constant(vec![1], vec![1.0 - 1e-7]).unwrap();
        let d_fake = tape.constant(vec![1], vec![1e-7]).unwrap();
        let ld = loss_disc(&mut tape, d_real, d_fake).unwrap();
        assert!(tape.scalar_value(ld).abs() < 1e-5);

        let h1 = tape.constant(vec![1], vec![0.5]).unwrap();
        let h2 = tape.constant(vec![1], vec![0.5]).unwrap();
        let ld = loss_disc(&mut tape, h1, h2).unwrap();
        assert_relative_eq!(tape.scalar_value(ld), 2.0 * 2.0f64.ln(), max_relative = 1e-9);
    }

    #[test]
    fn adversarial_losses_survive_saturated_probabilities() {
        // Exact 0/1 probabilities must clamp rather than produce -inf.
        let mut tape = Tape::<f64>::new();
        let zero = tape.constant(vec![1], vec![0.0]).unwrap();
        let one = tape.constant(vec![1], vec![1.0]).unwrap();
        assert!(loss_adv(&mut tape, zero).is_ok());
        assert!(loss_disc(&mut tape, zero, one).is_ok());
    }

    #[test]
    fn mixed_loss_endpoints_and_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let lv = tape.constant(vec![1], vec![10.0]).unwrap();
        let la = tape.constant(vec![1], vec![0.7]).unwrap();
        let at1 = loss_mixed(&mut tape, lv, la, 1.0).unwrap();
        assert_eq!(tape.scalar_value(at1), 10.0);
        let at0 = loss_mixed(&mut tape, lv, la, 0.0).unwrap();
        assert_eq!(tape.scalar_value(at0), 0.7);
        let mixed = loss_mixed(&mut tape, lv, la, 0.99).unwrap();
        assert_relative_eq!(tape.scalar_value(mixed), 9.907, max_relative = 1e-12);
    }

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let mut config = OracleConfig::default();
        config.grid = PolarGridSpec {
            n_range: 8,
            n_azimuth: 8,
            ..PolarGridSpec::default()
        };
        generate_dataset(n, &config, seed).unwrap()
    }

    #[test]
    fn training_is_deterministic_bitwise() {
        let ds = tiny_dataset(8, 5);
        let arch = ArchConfig::tiny(ds.manifest.grid.clone());
        let mut cfg = TrainConfig::new(ModelVariant::VaeMixed, arch);
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.split_fraction = None;
        cfg.sigma_sq = 0.01;
        let run = || {
            let (model, _, meta) = train(&ds, &cfg, |_, _, _| {}).unwrap();
            let ckpt = model.to_checkpoint(Some(meta)).unwrap();
            (ckpt.metadata.clone(), ckpt.params)
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn mixed_at_alpha_one_reproduces_pure_vae_generator_trajectory() {
        let ds = tiny_dataset(8, 6);
        let arch = ArchConfig::tiny(ds.manifest.grid.clone());
        let mut vae_cfg = TrainConfig::new(ModelVariant::Vae, arch.clone());
        vae_cfg.epochs = 2;
        vae_cfg.batch_size = 4;
        vae_cfg.split_fraction = None;
        vae_cfg.sigma_sq = 0.01;
        let mut mixed_cfg = TrainConfig::new(ModelVariant::VaeMixed, arch);
        mixed_cfg.alpha = 1.0;
        mixed_cfg.epochs = 2;
        mixed_cfg.batch_size = 4;
        mixed_cfg.split_fraction = None;
        mixed_cfg.sigma_sq = 0.01;

        let (vae_model, _, _) = train(&ds, &vae_cfg, |_, _, _| {}).unwrap();
        let (mixed_model, _, _) = train(&ds, &mixed_cfg, |_, _, _| {}).unwrap();
        // The discriminator still trains, but with alpha = 1 it must not
        // perturb a single generator parameter bit.
        for idx in vae_model.generator_param_range() {
            let (name_a, _) = (&vae_model.store.iter().nth(idx).unwrap().0, ());
            let a = vae_model.store.iter().nth(idx).unwrap().1;
            let b = mixed_model.store.iter().nth(idx).unwrap().1;
            assert_eq!(a.data(), b.data(), "generator param {name_a} diverged");
        }
    }

    #[test]
    fn normal_variant_memorizes_one_tiny_frame() {
        let ds = {
            let full = tiny_dataset(1, 9);
            full
        };
        let arch = ArchConfig::tiny(ds.manifest.grid.clone());
        let mut cfg = TrainConfig::new(ModelVariant::Normal, arch);
        cfg.epochs = 200;
        cfg.batch_size = 1;
        cfg.split_fraction = None;
        let mut losses = Vec::new();
        let (model, log, _) = train(&ds, &cfg, |_, _, stats| {
            losses.push(stats.nll.unwrap());
        })
        .unwrap();
        assert_eq!(log.epochs.len(), 200);
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "epoch loss must strictly decrease: {w:?}");
        }
        // Memorization: the predicted mean grid matches the frame closely.
        let record = &ds.frames[0];
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, BindMode::Frozen).unwrap();
        let r = model.insert_raster(&mut tape, &record.raster).unwrap();
        let o = model.insert_objects(&mut tape, &record.objects).unwrap();
        let x = model.encode_scene(&mut tape, &bound, r, o).unwrap();
        let grids = model.normal_forward(&mut tape, &bound, x).unwrap();
        let y = crate::scene::normalize_frame(&record.frame);
        let worst = tape
            .value(grids.mean)
            .iter()
            .zip(y.data())
            .map(|(m, t)| (m - t) * (m - t))
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-2, "max per-cell squared error {worst}");
    }

    #[test]
    fn gmm_variant_trains_without_nan_and_loss_drops() {
        let ds = tiny_dataset(4, 12);
        let arch = ArchConfig::tiny(ds.manifest.grid.clone());
        let mut cfg = TrainConfig::new(ModelVariant::Gmm, arch);
        cfg.epochs = 30;
        cfg.batch_size = 4;
        cfg.split_fraction = None;
        let mut losses = Vec::new();
        let (_, _, _) = train(&ds, &cfg, |_, _, stats| {
            losses.push(stats.nll.unwrap());
        })
        .unwrap();
        assert!(losses.last().unwrap() < losses.first().unwrap());
    }

    #[test]
    fn adv_variant_runs_and_logs_discriminator_accuracy() {
        let ds = tiny_dataset(6, 13);
        let arch = ArchConfig::tiny(ds.manifest.grid.clone());
        let mut cfg = TrainConfig::new(ModelVariant::VaeAdv, arch);
        cfg.epochs = 2;
        cfg.batch_size = 3;
        cfg.split_fraction = None;
        cfg.sigma_sq = 0.01;
        let (_, log, _) = train(&ds, &cfg, |_, _, _| {}).unwrap();
        for stats in &log.epochs {
            let acc = stats.disc_accuracy.unwrap();
            assert!((0.0..=1.0).contains(&acc));
            assert!(stats.loss_adv.unwrap().is_finite());
            assert!(stats.loss_vae.unwrap().is_finite());
        }
    }
}
