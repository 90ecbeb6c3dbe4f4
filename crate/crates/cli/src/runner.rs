//! Experiment orchestration: the benchmark grid, the self-consistency suite
//! and the verification battery, with deterministic per-cell seed streams and
//! CSV/JSON emission.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use mibench_core::analysis::{
    summarize_segments, summarize_segments_pooled, RunRecord, SegmentSummary,
};
use mibench_core::error::{Error, Result};
use mibench_core::rng::derive_seed;

use crate::config::RunConfig;
use crate::emit;
use crate::selfcheck::{
    load_dataset, reports_from_estimates, settings_grid, train_image_cell, ImageEstimator,
    SelfCheckReport, SettingEstimate,
};
use crate::trainer::{
    run_discriminative_cell, run_gm_cell, AbortEvent, CellOutcome, CriticKind, TrainKind,
};
use crate::verify::{run_verify, VerifyReport};

/// One benchmark grid cell before seeding.
#[derive(Debug, Clone)]
pub struct BenchmarkCell {
    pub kind: Option<TrainKind>, // None marks the generative cell
    pub critic: CriticKind,
    pub cubic: bool,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct BenchmarkArtifacts {
    pub completed_cells: usize,
    pub aborted_cells: usize,
    pub all_completed: bool,
}

/// Expand the configured estimator/critic/task/seed grid in a fixed order;
/// ordering never affects results because each cell derives its own stream.
pub fn benchmark_grid(config: &RunConfig) -> Vec<BenchmarkCell> {
    let b = &config.benchmark;
    let mut cells = Vec::new();
    for task in &b.tasks {
        let cubic = task == "cubic";
        for critic_name in &b.critics {
            let critic = match critic_name.as_str() {
                "separable" => CriticKind::Separable,
                _ => CriticKind::Joint,
            };
            for estimator in &b.estimators {
                let kind = match estimator.as_str() {
                    "cpc" => Some(TrainKind::Cpc),
                    "nwj" => Some(TrainKind::Nwj),
                    "mine" => Some(TrainKind::Mine {
                        ema_decay: b.mine_ema_decay,
                    }),
                    "smile" => Some(TrainKind::SmileGroup {
                        taus: b.taus.iter().map(|t| t.0).collect(),
                    }),
                    "gm" => None,
                    other => unreachable!("validated estimator {other}"),
                };
                for &seed in &config.seeds {
                    // the generative cell ignores the critic axis
                    if kind.is_none() && critic != CriticKind::Joint {
                        continue;
                    }
                    cells.push(BenchmarkCell {
                        kind: kind.clone(),
                        critic,
                        cubic,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

fn cell_stream_seed(config: &RunConfig, cell: &BenchmarkCell) -> u64 {
    let estimator_tag = match &cell.kind {
        Some(k) => k.stream_tag(),
        None => "gm",
    };
    let task = if cell.cubic { "cubic" } else { "gaussian" };
    derive_seed(
        config.master_seed,
        &[estimator_tag, cell.critic.tag(), task, &cell.seed.to_string()],
    )
}

pub fn run_benchmark_cell(config: &RunConfig, cell: &BenchmarkCell) -> CellOutcome {
    let stream = cell_stream_seed(config, cell);
    match &cell.kind {
        Some(kind) => run_discriminative_cell(
            &config.benchmark,
            kind,
            cell.critic,
            cell.cubic,
            cell.seed,
            stream,
        ),
        None => run_gm_cell(&config.benchmark, cell.cubic, cell.seed, stream),
    }
}

/// Records grouped per (task, estimator label, critic, seed) cell.
pub type GroupedRecords = Vec<((String, String, String, u64), Vec<RunRecord>)>;

pub fn group_records(task_tag: &str, records: Vec<RunRecord>) -> GroupedRecords {
    let mut grouped: GroupedRecords = Vec::new();
    for r in records {
        let key = (
            task_tag.to_string(),
            r.estimator.clone(),
            r.critic.clone(),
            r.seed,
        );
        match grouped.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => grouped.push((key, vec![r])),
        }
    }
    grouped
}

/// Execute the full benchmark grid, writing records/summaries/aborts under
/// `out_dir/benchmark/<task>/`.
pub fn run_benchmark(config: &RunConfig) -> Result<BenchmarkArtifacts> {
    let cells = benchmark_grid(config);
    let schedule = crate::trainer::schedule_of(&config.benchmark);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::contract("run_benchmark", e.to_string()))?;
    let outcomes: Vec<(BenchmarkCell, CellOutcome)> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| (cell.clone(), run_benchmark_cell(config, cell)))
            .collect()
    });

    let mut aborts: Vec<AbortEvent> = Vec::new();
    for task_tag in ["gaussian", "cubic"] {
        let mut task_records: Vec<RunRecord> = Vec::new();
        for (cell, outcome) in outcomes.iter() {
            let cell_tag = if cell.cubic { "cubic" } else { "gaussian" };
            if cell_tag == task_tag {
                task_records.extend(outcome.records.iter().cloned());
            }
        }
        if task_records.is_empty() {
            continue;
        }
        let grouped = group_records(task_tag, task_records.clone());
        let mut summaries: Vec<SegmentSummary> = Vec::new();
        // per-seed rows
        for ((_, _, _, _), records) in &grouped {
            summaries.extend(summarize_segments(records, &schedule)?);
        }
        // pooled rows across seeds of the same (estimator, critic)
        let mut cells_ec: Vec<(String, String)> = grouped
            .iter()
            .map(|((_, e, c, _), _)| (e.clone(), c.clone()))
            .collect();
        cells_ec.sort();
        cells_ec.dedup();
        for (e, c) in cells_ec {
            let per_seed: Vec<&[RunRecord]> = grouped
                .iter()
                .filter(|((_, ge, gc, _), _)| *ge == e && *gc == c)
                .map(|(_, v)| v.as_slice())
                .collect();
            if per_seed.len() > 1 {
                summaries.extend(summarize_segments_pooled(&per_seed, &schedule)?);
            }
        }
        let dir = config.out_dir.join("benchmark").join(task_tag);
        emit::write_records_csv(&dir.join("records.csv"), &task_records)?;
        emit::write_summaries_csv(&dir.join("summaries.csv"), &summaries)?;
    }
    for (_, outcome) in outcomes.iter() {
        if let Some(a) = &outcome.abort {
            aborts.push(a.clone());
        }
    }
    emit::write_aborts_csv(&config.out_dir.join("benchmark").join("aborts.csv"), &aborts)?;
    crate::config::echo_config(config, &config.out_dir)?;
    Ok(BenchmarkArtifacts {
        completed_cells: outcomes.len() - aborts.len(),
        aborted_cells: aborts.len(),
        all_completed: aborts.is_empty(),
    })
}

/// Execute the self-consistency suite; artifacts land under
/// `out_dir/selfcheck/`.
pub fn run_selfconsistency(config: &RunConfig) -> Result<SelfCheckReport> {
    let sc = &config.selfcheck;
    let (dataset, origin) = load_dataset(sc, config.master_seed)?;
    let side = dataset.side();
    let grid = settings_grid(sc, side);

    let mut estimators: Vec<ImageEstimator> = Vec::new();
    for e in &sc.estimators {
        estimators.push(match e.as_str() {
            "cpc" => ImageEstimator::Cpc,
            "mine" => ImageEstimator::Mine {
                ema_decay: sc.mine_ema_decay,
            },
            "smile" => ImageEstimator::SmileGroup {
                taus: sc.taus.iter().map(|t| t.0).collect(),
            },
            "gm" => ImageEstimator::GmVae,
            other => unreachable!("validated estimator {other}"),
        });
    }

    let jobs: Vec<(ImageEstimator, mibench_core::tasks::ConsistencySetting)> = estimators
        .iter()
        .flat_map(|e| grid.iter().map(move |s| (e.clone(), *s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::contract("run_selfconsistency", e.to_string()))?;
    let results: Vec<Result<Vec<SettingEstimate>>> = pool.install(|| {
        jobs.par_iter()
            .map(|(estimator, setting)| {
                let stream = derive_seed(
                    config.master_seed,
                    &[
                        "selfcheck",
                        estimator.stream_tag(),
                        setting.tag(),
                        &setting.rows_kept().to_string(),
                    ],
                );
                train_image_cell(sc, estimator, setting, &dataset, stream)
            })
            .collect()
    });

    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for ((estimator, setting), result) in jobs.iter().zip(results) {
        match result {
            Ok(mut ests) => estimates.append(&mut ests),
            Err(e) => failures.push(format!(
                "{}/{} t={}: {e}",
                estimator.stream_tag(),
                setting.tag(),
                setting.rows_kept()
            )),
        }
    }
    let (ratios, mut ratio_failures) = reports_from_estimates(&estimates);
    failures.append(&mut ratio_failures);
    let report = SelfCheckReport {
        dataset: origin,
        resolution: side,
        estimates,
        ratios,
        failures,
    };
    let dir = config.out_dir.join("selfcheck");
    emit::write_json(&dir.join("report.json"), &report)?;
    crate::config::echo_config(config, &config.out_dir)?;
    Ok(report)
}

/// Execute the bound-check battery and write `bounds.json`.
pub fn run_verify_command(config: &RunConfig) -> Result<VerifyReport> {
    let report = run_verify(&config.verify, config.master_seed)?;
    let dir = config.out_dir.join("verify");
    emit::write_json(&dir.join("bounds.json"), &report)?;
    crate::config::echo_config(config, &config.out_dir)?;
    Ok(report)
}

/// Gradient-check battery over the primitive set and miniature models.
#[derive(Debug, Serialize)]
pub struct GradCheckSummary {
    pub checks: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn run_gradcheck(out_dir: &Path) -> Result<GradCheckSummary> {
    use mibench_core::autodiff::{grad_check, Params, Tensor};
    use mibench_core::models::{
        ConvCritic, ConvCriticConfig, Critic, FlowModel, JointCritic, SeparableCritic, VaeModel,
    };
    use mibench_core::rng::Rng;

    let mut checks: Vec<(String, f64)> = Vec::new();
    let mut rng = Rng::new(11);

    // miniature joint critic
    {
        let mut params = Params::new();
        let critic = JointCritic::new(&mut params, &mut rng.child("jc"), 3, 3, 8);
        let (x, y) = gaussian_batch(&mut rng, 4, 3);
        let report = grad_check(&mut params, 1e-5, move |tape, params| {
            let (xc, yc) = (tape.constant(&x), tape.constant(&y));
            let t = critic.score_matrix(tape, params, &xc, &yc)?;
            let sq = tape.mul(&t, &t)?;
            tape.mean(&sq, None)
        })?;
        checks.push(("joint_critic".into(), report.max_rel_error));
    }
    // miniature separable critic
    {
        let mut params = Params::new();
        let critic = SeparableCritic::new(&mut params, &mut rng.child("sc"), 3, 3, 8, 4);
        let (x, y) = gaussian_batch(&mut rng, 4, 3);
        let report = grad_check(&mut params, 1e-5, move |tape, params| {
            let (xc, yc) = (tape.constant(&x), tape.constant(&y));
            let t = critic.score_matrix(tape, params, &xc, &yc)?;
            let sq = tape.mul(&t, &t)?;
            tape.mean(&sq, None)
        })?;
        checks.push(("separable_critic".into(), report.max_rel_error));
    }
    // miniature conv critic
    {
        let mut params = Params::new();
        let cfg = ConvCriticConfig {
            channels_x: 1,
            channels_y: 1,
            height: 8,
            width: 8,
            conv1_out: 2,
            conv2_out: 3,
            dense_width: 8,
        };
        let critic = ConvCritic::new(&mut params, &mut rng.child("cc"), "cc", cfg);
        let mut xv = vec![0.0; 3 * 64];
        let mut yv = vec![0.0; 3 * 64];
        rng.fill_uniform_in(&mut xv, 0.0, 1.0);
        rng.fill_uniform_in(&mut yv, 0.0, 1.0);
        let x = Tensor::from_vec(vec![3, 64], xv);
        let y = Tensor::from_vec(vec![3, 64], yv);
        let report = grad_check(&mut params, 1e-5, move |tape, params| {
            let (xc, yc) = (tape.constant(&x), tape.constant(&y));
            let t = critic.score_matrix(tape, params, &xc, &yc)?;
            let sq = tape.mul(&t, &t)?;
            tape.mean(&sq, None)
        })?;
        checks.push(("conv_critic".into(), report.max_rel_error));
    }
    // miniature flow
    {
        let mut params = Params::new();
        let flow = FlowModel::with_arch(&mut params, &mut rng.child("fl"), "f", 4, 2, 8);
        let (x, _) = gaussian_batch(&mut rng, 5, 4);
        let report = grad_check(&mut params, 1e-5, move |tape, params| {
            let xc = tape.constant(&x);
            let lp = flow.log_prob(tape, params, &xc)?;
            let m = tape.mean(&lp, None)?;
            tape.neg(&m)
        })?;
        checks.push(("flow".into(), report.max_rel_error));
    }
    // miniature VAE
    {
        let mut params = Params::new();
        let cfg = ConvCriticConfig {
            channels_x: 1,
            channels_y: 0,
            height: 8,
            width: 8,
            conv1_out: 2,
            conv2_out: 3,
            dense_width: 8,
        };
        let vae = VaeModel::new(&mut params, &mut rng.child("va"), "v", cfg, 3, 6);
        let mut xv = vec![0.0; 2 * 64];
        rng.fill_uniform_in(&mut xv, 0.05, 0.95);
        let x = Tensor::from_vec(vec![2, 64], xv);
        let mut nv = vec![0.0; 2 * 3];
        rng.fill_normal(&mut nv);
        let noise = Tensor::from_vec(vec![2, 3], nv);
        let report = grad_check(&mut params, 1e-5, move |tape, params| {
            let xc = tape.constant(&x);
            let elbo = vae.elbo(tape, params, &xc, &noise)?;
            let m = tape.mean(&elbo, None)?;
            tape.scale(&m, -1.0 / 64.0)
        })?;
        checks.push(("vae".into(), report.max_rel_error));
    }

    let max_rel_error = checks.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let summary = GradCheckSummary {
        checks,
        max_rel_error,
        tolerance: 1e-4,
        pass: max_rel_error <= 1e-4,
    };
    emit::write_json(&out_dir.join("gradcheck.json"), &summary)?;
    Ok(summary)
}

fn gaussian_batch(
    rng: &mut mibench_core::rng::Rng,
    n: usize,
    d: usize,
) -> (mibench_core::autodiff::Tensor, mibench_core::autodiff::Tensor) {
    let mut xv = vec![0.0; n * d];
    let mut yv = vec![0.0; n * d];
    rng.fill_normal(&mut xv);
    rng.fill_normal(&mut yv);
    (
        mibench_core::autodiff::Tensor::from_vec(vec![n, d], xv),
        mibench_core::autodiff::Tensor::from_vec(vec![n, d], yv),
    )
}
