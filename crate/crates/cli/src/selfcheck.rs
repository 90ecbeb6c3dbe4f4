//! Self-consistency harness: trains image critics (and VAEs for the
//! generative branch) per (setting, rows-kept) cell and reduces the resulting
//! MI estimates to independence / data-processing / additivity ratios.

use serde::Serialize;

use mibench_core::analysis::{consistency_ratios, ConsistencyReport};
use mibench_core::autodiff::{AdamState, Params, Tape, Tensor};
use mibench_core::error::{Error, Result};
use mibench_core::estimators::losses::{cpc_loss, mine_loss, smile_js_loss};
use mibench_core::estimators::{est_cpc, est_dv_smile, est_gm, MineEmaState, ScoreMatrix};
use mibench_core::models::{ConvCritic, ConvCriticConfig, Critic, VaeModel};
use mibench_core::rng::{derive_seed, Rng};
use mibench_core::tasks::{
    consistency_batch, load_idx, parse_idx, synthetic_digits_idx, ConsistencySetting, ImageDataset,
};

use crate::config::SelfCheckConfig;

/// One trained cell's estimate.
#[derive(Debug, Clone, Serialize)]
pub struct SettingEstimate {
    pub estimator: String,
    pub setting: String,
    pub rows_kept: usize,
    pub estimate: f64,
    /// Samples excluded from generative estimates for non-finite densities.
    pub excluded: usize,
}

#[derive(Debug, Serialize)]
pub struct SelfCheckReport {
    pub dataset: String,
    pub resolution: usize,
    pub estimates: Vec<SettingEstimate>,
    pub ratios: Vec<ConsistencyReport>,
    pub failures: Vec<String>,
}

/// Load the configured dataset: IDX files when paths are given, otherwise the
/// deterministic synthetic digit corpus.
pub fn load_dataset(cfg: &SelfCheckConfig, master_seed: u64) -> Result<(ImageDataset, String)> {
    let (ds, origin) = match (&cfg.images_path, &cfg.labels_path) {
        (Some(ip), Some(lp)) => (load_idx(ip, lp)?, ip.display().to_string()),
        _ => {
            let seed = derive_seed(master_seed, &["synthetic-digits"]);
            let (images, labels) = synthetic_digits_idx(cfg.synthetic_count, seed);
            (
                parse_idx(&images, &labels, "synthetic")?,
                format!("synthetic({} images)", cfg.synthetic_count),
            )
        }
    };
    let ds = match cfg.max_images {
        Some(n) => ds.truncate(n),
        None => ds,
    };
    let ds = match (ds.side(), cfg.working_resolution) {
        (28, 14) => ds.downsample_2x(),
        (s, want) if s == want => ds,
        (s, want) => {
            return Err(Error::contract(
                "selfcheck",
                format!("dataset resolution {s} incompatible with working resolution {want}"),
            ))
        }
    };
    Ok((ds, origin))
}

fn conv_config(cfg: &SelfCheckConfig, setting: &ConsistencySetting, side: usize) -> ConvCriticConfig {
    let (cx, cy) = setting.channels();
    if cfg.full_size_model {
        ConvCriticConfig::full(cx, cy, side)
    } else {
        ConvCriticConfig::desk(cx, cy, side)
    }
}

fn vae_config(cfg: &SelfCheckConfig, channels: usize, side: usize) -> ConvCriticConfig {
    if cfg.full_size_model {
        ConvCriticConfig::full(channels, 0, side)
    } else {
        ConvCriticConfig::desk(channels, 0, side)
    }
}

#[derive(Debug, Clone)]
pub enum ImageEstimator {
    Cpc,
    Mine { ema_decay: f64 },
    /// One JS-trained critic evaluated at every τ.
    SmileGroup { taus: Vec<f64> },
    GmVae,
}

impl ImageEstimator {
    pub fn stream_tag(&self) -> &'static str {
        match self {
            ImageEstimator::Cpc => "cpc",
            ImageEstimator::Mine { .. } => "mine",
            ImageEstimator::SmileGroup { .. } => "smile",
            ImageEstimator::GmVae => "gm",
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match self {
            ImageEstimator::Cpc => vec!["cpc".into()],
            ImageEstimator::Mine { .. } => vec!["mine".into()],
            ImageEstimator::SmileGroup { taus } => taus
                .iter()
                .map(|&tau| {
                    if tau.is_infinite() {
                        "smile_tau=inf".into()
                    } else {
                        format!("smile_tau={tau}")
                    }
                })
                .collect(),
            ImageEstimator::GmVae => vec!["gm".into()],
        }
    }
}

/// Train one discriminative image cell and return (label, estimate) pairs
/// averaged over fresh evaluation batches.
pub fn train_image_cell(
    cfg: &SelfCheckConfig,
    estimator: &ImageEstimator,
    setting: &ConsistencySetting,
    dataset: &ImageDataset,
    stream_seed: u64,
) -> Result<Vec<SettingEstimate>> {
    let side = dataset.side();
    let mut rng = Rng::new(stream_seed);
    let mut init_rng = rng.child("init");
    match estimator {
        ImageEstimator::GmVae => train_gm_cell(cfg, setting, dataset, &mut rng, &mut init_rng),
        _ => {
            let mut params = Params::new();
            let critic = ConvCritic::new(
                &mut params,
                &mut init_rng,
                "img",
                conv_config(cfg, setting, side),
            );
            let mut adam = AdamState::new(&params, cfg.learning_rate);
            let mut ema = match estimator {
                ImageEstimator::Mine { ema_decay } => Some(MineEmaState::new(*ema_decay)),
                _ => None,
            };
            let iters = (cfg.epochs * dataset.len()).div_ceil(cfg.batch_size);
            for iter in 0..iters {
                let (x, y) = consistency_batch(setting, dataset, cfg.batch_size, &mut rng)?;
                let mut tape = Tape::new();
                let xc = tape.constant(&x);
                let yc = tape.constant(&y);
                let t = critic.score_matrix(&mut tape, &params, &xc, &yc)?;
                let loss = match estimator {
                    ImageEstimator::Cpc => cpc_loss(&mut tape, &t)?,
                    ImageEstimator::Mine { .. } => {
                        mine_loss(&mut tape, &t, ema.as_mut().unwrap())?
                    }
                    ImageEstimator::SmileGroup { .. } => smile_js_loss(&mut tape, &t)?,
                    ImageEstimator::GmVae => unreachable!(),
                };
                let loss_value = loss.item()?;
                if !loss_value.is_finite() {
                    return Err(Error::RunAbort {
                        iteration: iter,
                        what: "loss",
                        param: "image critic loss".into(),
                        norm: loss_value,
                    });
                }
                let grads = tape.backward(&loss)?;
                let pg = tape.param_grads(&grads, &params);
                adam.step(&mut params, &pg, iter)?;
            }

            // frozen-critic evaluation on fresh batches
            let labels = estimator.labels();
            let mut sums = vec![0.0; labels.len()];
            for _ in 0..cfg.eval_batches {
                let (x, y) = consistency_batch(setting, dataset, cfg.batch_size, &mut rng)?;
                let mut tape = Tape::new();
                let xc = tape.constant(&x);
                let yc = tape.constant(&y);
                let t = critic.score_matrix(&mut tape, &params, &xc, &yc)?;
                let sm = ScoreMatrix::from_tensor(&t)?;
                for (k, label) in labels.iter().enumerate() {
                    sums[k] += match estimator {
                        ImageEstimator::Cpc => est_cpc(&sm),
                        ImageEstimator::Mine { .. } => est_dv_smile(&sm, f64::INFINITY),
                        ImageEstimator::SmileGroup { taus } => est_dv_smile(&sm, taus[k]),
                        ImageEstimator::GmVae => unreachable!(),
                    };
                    let _ = label;
                }
            }
            Ok(labels
                .into_iter()
                .zip(sums)
                .map(|(label, sum)| SettingEstimate {
                    estimator: label,
                    setting: setting.tag().into(),
                    rows_kept: setting.rows_kept(),
                    estimate: sum / cfg.eval_batches as f64,
                    excluded: 0,
                })
                .collect())
        }
    }
}

/// The generative branch: three VAEs (channel-stacked joint plus the two
/// marginal views), each trained by maximizing its own ELBO; the estimate
/// plugs ELBO values in for the log densities.
fn train_gm_cell(
    cfg: &SelfCheckConfig,
    setting: &ConsistencySetting,
    dataset: &ImageDataset,
    rng: &mut Rng,
    init_rng: &mut Rng,
) -> Result<Vec<SettingEstimate>> {
    let side = dataset.side();
    let (cx, cy) = setting.channels();
    let mut params_joint = Params::new();
    let vae_joint = VaeModel::new(
        &mut params_joint,
        init_rng,
        "vj",
        vae_config(cfg, cx + cy, side),
        cfg.latent_dim,
        cfg.decoder_width,
    );
    let mut params_x = Params::new();
    let vae_x = VaeModel::new(
        &mut params_x,
        init_rng,
        "vx",
        vae_config(cfg, cx, side),
        cfg.latent_dim,
        cfg.decoder_width,
    );
    let mut params_y = Params::new();
    let vae_y = VaeModel::new(
        &mut params_y,
        init_rng,
        "vy",
        vae_config(cfg, cy, side),
        cfg.latent_dim,
        cfg.decoder_width,
    );
    let mut adam_joint = AdamState::new(&params_joint, cfg.learning_rate);
    let mut adam_x = AdamState::new(&params_x, cfg.learning_rate);
    let mut adam_y = AdamState::new(&params_y, cfg.learning_rate);

    let iters = (cfg.gm_epochs * dataset.len()).div_ceil(cfg.batch_size);
    let mut noise_rng = rng.child("noise");
    for iter in 0..iters {
        let (x, y) = consistency_batch(setting, dataset, cfg.batch_size, rng)?;
        let joint = stack_channels(&x, &y);
        for (vae, params, adam, input) in [
            (&vae_joint, &mut params_joint, &mut adam_joint, &joint),
            (&vae_x, &mut params_x, &mut adam_x, &x),
            (&vae_y, &mut params_y, &mut adam_y, &y),
        ] {
            let n = input.shape()[0];
            let mut noise = vec![0.0; n * cfg.latent_dim];
            noise_rng.fill_normal(&mut noise);
            let noise = Tensor::from_vec(vec![n, cfg.latent_dim], noise);
            let mut tape = Tape::new();
            let inp = tape.constant(input);
            let elbo = vae.elbo(&mut tape, params, &inp, &noise)?;
            let mean_elbo = tape.mean(&elbo, None)?;
            let loss = tape.neg(&mean_elbo)?;
            let loss_value = loss.item()?;
            if !loss_value.is_finite() {
                return Err(Error::RunAbort {
                    iteration: iter,
                    what: "loss",
                    param: "vae elbo".into(),
                    norm: loss_value,
                });
            }
            let grads = tape.backward(&loss)?;
            let pg = tape.param_grads(&grads, params);
            adam.step(params, &pg, iter)?;
        }
    }

    // evaluation: ELBO stands in for log p in the generative estimate
    let mut acc = 0.0;
    let mut excluded = 0usize;
    for _ in 0..cfg.eval_batches {
        let (x, y) = consistency_batch(setting, dataset, cfg.batch_size, rng)?;
        let joint = stack_channels(&x, &y);
        let mut elbos = Vec::with_capacity(3);
        for (vae, params, input) in [
            (&vae_joint, &params_joint, &joint),
            (&vae_x, &params_x, &x),
            (&vae_y, &params_y, &y),
        ] {
            let n = input.shape()[0];
            let mut noise = vec![0.0; n * cfg.latent_dim];
            noise_rng.fill_normal(&mut noise);
            let noise = Tensor::from_vec(vec![n, cfg.latent_dim], noise);
            let mut tape = Tape::new();
            let inp = tape.constant(input);
            let elbo = vae.elbo(&mut tape, params, &inp, &noise)?;
            elbos.push(elbo.data().to_vec());
        }
        let est = est_gm(&elbos[0], &elbos[1], &elbos[2])?;
        acc += est.value;
        excluded += est.excluded;
    }
    Ok(vec![SettingEstimate {
        estimator: "gm".into(),
        setting: setting.tag().into(),
        rows_kept: setting.rows_kept(),
        estimate: acc / cfg.eval_batches as f64,
        excluded,
    }])
}

/// Row-wise concatenation of flattened C·H·W views stacks channels.
fn stack_channels(x: &Tensor, y: &Tensor) -> Tensor {
    let n = x.shape()[0];
    let (dx, dy) = (x.shape()[1], y.shape()[1]);
    let mut out = Vec::with_capacity(n * (dx + dy));
    for i in 0..n {
        out.extend_from_slice(&x.data()[i * dx..(i + 1) * dx]);
        out.extend_from_slice(&y.data()[i * dy..(i + 1) * dy]);
    }
    Tensor::from_vec(vec![n, dx + dy], out)
}

/// The full grid for one estimator: baseline sweep (plus full height),
/// optional data-processing and additivity sweeps.
pub fn settings_grid(cfg: &SelfCheckConfig, side: usize) -> Vec<ConsistencySetting> {
    let clamp = |t: usize| t.min(side);
    let mut grid = Vec::new();
    let mut baseline: Vec<usize> = cfg.baseline_t_values.iter().map(|&t| clamp(t)).collect();
    if !baseline.contains(&side) {
        baseline.push(side);
    }
    baseline.sort_unstable();
    baseline.dedup();
    for t in baseline {
        grid.push(ConsistencySetting::Baseline { rows_kept: t });
    }
    for &t in &cfg.data_processing_t_values {
        let t = clamp(t);
        if t >= 3 {
            grid.push(ConsistencySetting::DataProcessing { rows_kept: t });
        }
    }
    for &t in &cfg.additivity_t_values {
        grid.push(ConsistencySetting::Additivity { rows_kept: clamp(t) });
    }
    grid
}

/// Reduce per-cell estimates to the ratio metrics, one report per estimator
/// label present in `estimates`.
pub fn reports_from_estimates(estimates: &[SettingEstimate]) -> (Vec<ConsistencyReport>, Vec<String>) {
    let mut labels: Vec<String> = estimates.iter().map(|e| e.estimator.clone()).collect();
    labels.sort();
    labels.dedup();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for label in labels {
        let of_setting = |tag: &str| -> Vec<(usize, f64)> {
            let mut v: Vec<(usize, f64)> = estimates
                .iter()
                .filter(|e| e.estimator == label && e.setting == tag)
                .map(|e| (e.rows_kept, e.estimate))
                .collect();
            v.sort_by_key(|(t, _)| *t);
            v
        };
        let baseline = of_setting("baseline");
        let Some(&(_, self_information)) = baseline.iter().max_by_key(|(t, _)| *t) else {
            failures.push(format!("{label}: no baseline estimates"));
            continue;
        };
        match consistency_ratios(
            &label,
            &baseline,
            self_information,
            &of_setting("data_processing"),
            &of_setting("additivity"),
        ) {
            Ok(report) => reports.push(report),
            Err(e) => failures.push(format!("{label}: {e}")),
        }
    }
    (reports, failures)
}
