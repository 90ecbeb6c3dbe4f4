//! Staircase-benchmark training loops: one function per estimator family,
//! each producing per-iteration [`RunRecord`]s. A non-finite loss or gradient
//! aborts the run and is recorded as data; partial records are kept.

use std::time::Instant;

use mibench_core::analysis::RunRecord;
use mibench_core::autodiff::{AdamState, Params, Tape, Tensor};
use mibench_core::error::Error;
use mibench_core::estimators::losses::{
    cpc_loss, mine_loss, nll_loss, nwj_loss, smile_js_loss,
};
use mibench_core::estimators::{est_cpc, est_dv_smile, est_gm, est_nwj, MineEmaState, ScoreMatrix};
use mibench_core::models::{Critic, FlowModel, JointCritic, SeparableCritic};
use mibench_core::rng::Rng;
use mibench_core::tasks::{sample_pair, GaussianTaskSpec, StaircaseSchedule};

use crate::config::BenchmarkConfig;

/// Which loss a discriminative benchmark cell trains.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainKind {
    Cpc,
    Nwj,
    Mine { ema_decay: f64 },
    /// JS-trained critic evaluated at every τ in the list.
    SmileGroup { taus: Vec<f64> },
}

impl TrainKind {
    /// Tag entering seed derivation (shared across a SMILE τ group, so the
    /// group is one training run evaluated at several τ).
    pub fn stream_tag(&self) -> &'static str {
        match self {
            TrainKind::Cpc => "cpc",
            TrainKind::Nwj => "nwj",
            TrainKind::Mine { .. } => "mine",
            TrainKind::SmileGroup { .. } => "smile",
        }
    }

    /// (record label, estimate evaluation) pairs this training emits per
    /// iteration.
    fn eval_specs(&self) -> Vec<(String, EvalSpec)> {
        match self {
            TrainKind::Cpc => vec![("cpc".into(), EvalSpec::Cpc)],
            TrainKind::Nwj => vec![("nwj".into(), EvalSpec::Nwj)],
            TrainKind::Mine { .. } => {
                vec![("mine".into(), EvalSpec::DvSmile(f64::INFINITY))]
            }
            TrainKind::SmileGroup { taus } => taus
                .iter()
                .map(|&tau| {
                    let label = if tau.is_infinite() {
                        "smile_tau=inf".to_string()
                    } else {
                        format!("smile_tau={tau}")
                    };
                    (label, EvalSpec::DvSmile(tau))
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum EvalSpec {
    Cpc,
    Nwj,
    DvSmile(f64),
}

impl EvalSpec {
    fn evaluate(&self, sm: &ScoreMatrix) -> f64 {
        match *self {
            EvalSpec::Cpc => est_cpc(sm),
            EvalSpec::Nwj => est_nwj(sm),
            EvalSpec::DvSmile(tau) => est_dv_smile(sm, tau),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticKind {
    Joint,
    Separable,
}

impl CriticKind {
    pub fn tag(&self) -> &'static str {
        match self {
            CriticKind::Joint => "joint",
            CriticKind::Separable => "separable",
        }
    }
}

/// Outcome of one grid cell: the records that were produced plus the abort
/// event, if the run blew up.
#[derive(Debug)]
pub struct CellOutcome {
    pub records: Vec<RunRecord>,
    pub abort: Option<AbortEvent>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AbortEvent {
    pub estimator: String,
    pub critic: String,
    pub task: String,
    pub seed: u64,
    pub iteration: usize,
    pub reason: String,
}

pub fn schedule_of(cfg: &BenchmarkConfig) -> StaircaseSchedule {
    StaircaseSchedule {
        start_mi: cfg.start_mi,
        step: cfg.step_mi,
        step_every: cfg.step_every,
        total_iters: cfg.total_iters,
    }
}

/// Train one discriminative cell over the staircase.
pub fn run_discriminative_cell(
    cfg: &BenchmarkConfig,
    kind: &TrainKind,
    critic_kind: CriticKind,
    cubic: bool,
    seed: u64,
    stream_seed: u64,
) -> CellOutcome {
    let schedule = schedule_of(cfg);
    let mut rng = Rng::new(stream_seed);
    let mut params = Params::new();
    let mut init_rng = rng.child("init");
    let critic: Box<dyn Critic> = match critic_kind {
        CriticKind::Joint => Box::new(JointCritic::new(
            &mut params,
            &mut init_rng,
            cfg.dim,
            cfg.dim,
            cfg.hidden_width,
        )),
        CriticKind::Separable => Box::new(SeparableCritic::new(
            &mut params,
            &mut init_rng,
            cfg.dim,
            cfg.dim,
            cfg.hidden_width,
            cfg.embed_dim,
        )),
    };
    let mut adam = AdamState::new(&params, cfg.learning_rate);
    let mut ema = match kind {
        TrainKind::Mine { ema_decay } => Some(MineEmaState::new(*ema_decay)),
        _ => None,
    };
    let eval_specs = kind.eval_specs();
    let task_tag = if cubic { "cubic" } else { "gaussian" };

    let mut records = Vec::with_capacity(cfg.total_iters * eval_specs.len());
    let mut abort = None;
    let started = Instant::now();

    for iter in 0..cfg.total_iters {
        let mi = schedule.mi_at(iter).expect("iter in range");
        let spec = GaussianTaskSpec::at_mi(cfg.dim, mi, cubic);
        let (x, y) = sample_pair(&spec, cfg.batch_size, &mut rng);

        let step = (|| -> Result<ScoreMatrix, Error> {
            let mut tape = Tape::new();
            let xc = tape.constant(&x);
            let yc = tape.constant(&y);
            let t = critic.score_matrix(&mut tape, &params, &xc, &yc)?;
            let loss = match kind {
                TrainKind::Cpc => cpc_loss(&mut tape, &t)?,
                TrainKind::Nwj => nwj_loss(&mut tape, &t)?,
                TrainKind::Mine { .. } => mine_loss(&mut tape, &t, ema.as_mut().unwrap())?,
                TrainKind::SmileGroup { .. } => smile_js_loss(&mut tape, &t)?,
            };
            let loss_value = loss.item()?;
            if !loss_value.is_finite() {
                return Err(Error::RunAbort {
                    iteration: iter,
                    what: "loss",
                    param: "loss".into(),
                    norm: loss_value,
                });
            }
            let grads = tape.backward(&loss)?;
            let pg = tape.param_grads(&grads, &params);
            adam.step(&mut params, &pg, iter)?;
            let sm = ScoreMatrix::from_tensor(&t)?;
            let wall = started.elapsed().as_secs_f64() * 1e3;
            for (label, eval) in &eval_specs {
                let estimate = eval.evaluate(&sm);
                records.push(RunRecord {
                    iteration: iter,
                    mi_truth: mi,
                    loss: loss_value,
                    estimate,
                    estimator: label.clone(),
                    critic: critic_kind.tag().into(),
                    seed,
                    wall_ms: wall,
                });
            }
            Ok(sm)
        })();

        if let Err(e) = step {
            abort = Some(AbortEvent {
                estimator: kind.stream_tag().into(),
                critic: critic_kind.tag().into(),
                task: task_tag.into(),
                seed,
                iteration: iter,
                reason: e.to_string(),
            });
            break;
        }
    }
    CellOutcome { records, abort }
}

/// Train the three-flow generative cell over the staircase: joint (2d),
/// x-marginal and y-marginal flows optimized independently on fresh samples.
pub fn run_gm_cell(cfg: &BenchmarkConfig, cubic: bool, seed: u64, stream_seed: u64) -> CellOutcome {
    let schedule = schedule_of(cfg);
    let mut rng = Rng::new(stream_seed);
    let mut init_rng = rng.child("init");
    let d = cfg.dim;

    let mut params_joint = Params::new();
    let flow_joint = FlowModel::with_arch(
        &mut params_joint,
        &mut init_rng,
        "joint",
        2 * d,
        cfg.flow_layers,
        cfg.flow_hidden,
    );
    let mut params_x = Params::new();
    let flow_x = FlowModel::with_arch(
        &mut params_x,
        &mut init_rng,
        "x",
        d,
        cfg.flow_layers,
        cfg.flow_hidden,
    );
    let mut params_y = Params::new();
    let flow_y = FlowModel::with_arch(
        &mut params_y,
        &mut init_rng,
        "y",
        d,
        cfg.flow_layers,
        cfg.flow_hidden,
    );
    let mut adam_joint = AdamState::new(&params_joint, cfg.learning_rate);
    let mut adam_x = AdamState::new(&params_x, cfg.learning_rate);
    let mut adam_y = AdamState::new(&params_y, cfg.learning_rate);

    let task_tag = if cubic { "cubic" } else { "gaussian" };
    let mut records = Vec::with_capacity(cfg.total_iters);
    let mut abort = None;
    let started = Instant::now();

    for iter in 0..cfg.total_iters {
        let mi = schedule.mi_at(iter).expect("iter in range");
        let spec = GaussianTaskSpec::at_mi(d, mi, cubic);
        let (x, y) = sample_pair(&spec, cfg.batch_size, &mut rng);
        let n = cfg.batch_size;
        let mut joint_rows = Vec::with_capacity(n * 2 * d);
        for i in 0..n {
            joint_rows.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
            joint_rows.extend_from_slice(&y.data()[i * d..(i + 1) * d]);
        }
        let xy = Tensor::from_vec(vec![n, 2 * d], joint_rows);

        let step = (|| -> Result<(f64, f64), Error> {
            let mut lp = Vec::with_capacity(3);
            let mut loss_total = 0.0;
            for (flow, params, adam, input) in [
                (&flow_joint, &mut params_joint, &mut adam_joint, &xy),
                (&flow_x, &mut params_x, &mut adam_x, &x),
                (&flow_y, &mut params_y, &mut adam_y, &y),
            ] {
                let mut tape = Tape::new();
                let inp = tape.constant(input);
                let log_probs = flow.log_prob(&mut tape, params, &inp)?;
                let loss = nll_loss(&mut tape, &log_probs)?;
                let loss_value = loss.item()?;
                if !loss_value.is_finite() {
                    return Err(Error::RunAbort {
                        iteration: iter,
                        what: "loss",
                        param: "flow nll".into(),
                        norm: loss_value,
                    });
                }
                loss_total += loss_value;
                let grads = tape.backward(&loss)?;
                let pg = tape.param_grads(&grads, params);
                adam.step(params, &pg, iter)?;
                lp.push(log_probs.data().to_vec());
            }
            let est = est_gm(&lp[0], &lp[1], &lp[2])?;
            Ok((loss_total, est.value))
        })();

        match step {
            Ok((loss, estimate)) => records.push(RunRecord {
                iteration: iter,
                mi_truth: mi,
                loss,
                estimate,
                estimator: "gm".into(),
                critic: "flow".into(),
                seed,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            }),
            Err(e) => {
                abort = Some(AbortEvent {
                    estimator: "gm".into(),
                    critic: "flow".into(),
                    task: task_tag.into(),
                    seed,
                    iteration: iter,
                    reason: e.to_string(),
                });
                break;
            }
        }
    }
    CellOutcome { records, abort }
}
