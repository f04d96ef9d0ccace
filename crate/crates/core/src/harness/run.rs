//! Training, evaluation and the toggle ablation grid.

use super::{build_model, Dataset, ExperimentConfig, HarnessError, Model, ModelConfig, Result, Sample, TrainConfig};
use crate::autodiff::Tape;
use crate::graph::JointRegressor;
use crate::metrics::{compute_metrics, PoseError};
use crate::nn::Adam;
use crate::synth::{points, MotionSequence};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::time::Instant;

pub struct TrainOutcome {
    pub model: Model,
    /// Total loss at every step, before the update.
    pub curve: Vec<f64>,
}

fn stack(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let t = samples[0].frames();
    if samples.iter().any(|s| s.frames() != t) {
        return Err(HarnessError::Data("sequences in a batch differ in length".into()));
    }
    let b = samples.len();
    let (wi, n) = (samples[0].input.shape()[1], samples[0].target.shape()[1]);
    let input = samples.iter().flat_map(|s| s.input.data().iter().copied()).collect();
    let target = samples.iter().flat_map(|s| s.target.data().iter().copied()).collect();
    Ok((Tensor::new(&[b * t, wi], input)?, Tensor::new(&[b * t, n, 3], target)?))
}

/// Adam on shuffled minibatches for a fixed number of steps. Initialization,
/// batch order and diffusion noise all derive from `model.seed`.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, data: &[MotionSequence]) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(HarnessError::Data("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(HarnessError::Config("batch_size must be positive".into()));
    }
    let mut model = build_model(model)?;
    let n = model.n_vertices();
    if let Some(s) = data.iter().find(|s| s.n_vertices != n) {
        return Err(HarnessError::Data(format!("sequence has {} vertices, model expects {n}", s.n_vertices)));
    }
    let samples = data
        .iter()
        .map(|s| Sample::from_sequence(s, model.config.unit_mm))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    rng.set_stream(1);
    let mut opt = Adam::new(cfg.adam, &model.store);
    let bs = cfg.batch_size.min(samples.len());
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.len() < bs {
            let mut perm: Vec<usize> = (0..samples.len()).collect();
            perm.shuffle(&mut rng);
            order.extend(perm);
        }
        let mut idx: Vec<usize> = order.drain(..bs).collect();
        idx.sort_unstable();
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let (input, target) = stack(&batch)?;
        let seed: u64 = rng.random();
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let x = tape.constant(input);
        let fwd = model.forward(&mut tape, &p, x, bs, batch[0].frames(), seed)?;
        let parts = model.loss(&mut tape, &fwd, &target, &cfg.weights)?;
        let loss = tape.value(parts.total).item();
        if !loss.is_finite() {
            return Err(HarnessError::Divergence { step, loss });
        }
        curve.push(loss);
        let grads = tape.backward(parts.total)?;
        opt.step(&mut model.store, &p.gradients(&tape, &grads));
    }
    Ok(TrainOutcome { model, curve })
}

/// Anything that maps a sequence's observations to vertex positions in mm.
pub trait Predictor: Sync {
    /// Flat `[T, n, 3]` vertex positions.
    fn predict(&self, seq: &MotionSequence) -> Result<Vec<f64>>;
}

impl Predictor for Model {
    fn predict(&self, seq: &MotionSequence) -> Result<Vec<f64>> {
        let s = Sample::from_sequence(seq, self.config.unit_mm)?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let x = tape.constant(s.input);
        let f = self.forward(&mut tape, &p, x, 1, seq.frames, self.config.seed)?;
        Ok(tape.value(f.vertices).data().iter().map(|v| v * self.config.unit_mm).collect())
    }
}

/// Returns the observations unchanged.
pub struct IdentityStub;

impl Predictor for IdentityStub {
    fn predict(&self, seq: &MotionSequence) -> Result<Vec<f64>> {
        Ok(seq.observations.clone())
    }
}

/// Predicts the training-set mean position of every vertex in every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanPose {
    pub vertices: Vec<f64>,
}

impl MeanPose {
    pub fn fit(data: &[MotionSequence]) -> Result<Self> {
        let first = data.first().ok_or_else(|| HarnessError::Data("empty set".into()))?;
        let n = first.n_vertices;
        let mut acc = vec![0.0; n * 3];
        let mut frames = 0usize;
        for s in data {
            if s.n_vertices != n {
                return Err(HarnessError::Data("vertex counts differ".into()));
            }
            for f in s.gt_vertices.chunks_exact(n * 3) {
                acc.iter_mut().zip(f).for_each(|(a, v)| *a += v);
                frames += 1;
            }
        }
        Ok(Self {
            vertices: acc.into_iter().map(|a| a / frames as f64).collect(),
        })
    }
}

impl Predictor for MeanPose {
    fn predict(&self, seq: &MotionSequence) -> Result<Vec<f64>> {
        if seq.n_vertices * 3 != self.vertices.len() {
            return Err(HarnessError::Data("graph mismatch".into()));
        }
        Ok(self.vertices.repeat(seq.frames))
    }
}

/// One CSV row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sequence_id: usize,
    pub mpvpe_mm: f64,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
}

impl MetricRow {
    pub fn error(&self) -> PoseError {
        PoseError {
            mpvpe: self.mpvpe_mm,
            mpjpe: self.mpjpe_mm,
            pa_mpjpe: self.pa_mpjpe_mm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub mean: PoseError,
}

/// Per-sequence errors (averaged over frames) and their mean.
pub fn evaluate(predictor: &dyn Predictor, regressor: &JointRegressor, seqs: &[MotionSequence]) -> Result<EvalReport> {
    let n = regressor.n_vertices();
    let rows = seqs
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            if s.n_vertices != n {
                return Err(HarnessError::Data(format!(
                    "sequence {i} has {} vertices, regressor expects {n}",
                    s.n_vertices
                )));
            }
            let pred = predictor.predict(s)?;
            if pred.len() != s.gt_vertices.len() {
                return Err(HarnessError::Data(format!("prediction for sequence {i} has wrong length")));
            }
            let e = compute_metrics(&points(&pred), &s.gt_points(), regressor)?;
            Ok(MetricRow {
                sequence_id: i,
                mpvpe_mm: e.mpvpe,
                mpjpe_mm: e.mpjpe,
                pa_mpjpe_mm: e.pa_mpjpe,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = PoseError::mean(&rows.iter().map(MetricRow::error).collect::<Vec<_>>());
    Ok(EvalReport { rows, mean })
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("sequence_id,mpvpe_mm,mpjpe_mm,pa_mpjpe_mm\n");
    for r in rows {
        s += &format!("{},{},{},{}\n", r.sequence_id, r.mpvpe_mm, r.mpjpe_mm, r.pa_mpjpe_mm);
    }
    s
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: PoseError,
    pub std: PoseError,
}

impl Spread {
    pub fn of(errors: &[PoseError]) -> Self {
        let mean = PoseError::mean(errors);
        let k = errors.len();
        let sd = |f: fn(&PoseError) -> f64| {
            if k < 2 {
                return 0.0;
            }
            let m = f(&mean);
            (errors.iter().map(|e| (f(e) - m).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
        };
        Self {
            mean,
            std: PoseError {
                mpvpe: sd(|e| e.mpvpe),
                mpjpe: sd(|e| e.mpjpe),
                pa_mpjpe: sd(|e| e.pa_mpjpe),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub occluded: Option<PoseError>,
    pub clean: Option<PoseError>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub tpdist_on: bool,
    pub hhloss_on: bool,
    pub runs: Vec<RunReport>,
    /// Over successful runs; absent when every run failed.
    pub occluded: Option<Spread>,
    pub clean: Option<Spread>,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReport {
    pub occluded: PoseError,
    pub clean: PoseError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    /// Baseline, diffusion only, part loss only, full.
    pub cells: Vec<CellReport>,
    /// The mean-pose predictor fitted on the training split.
    pub mean_pose: ReferenceReport,
    pub wall_clock_s: f64,
    /// SHA-256 of the report with `wall_clock_s` zeroed and this field empty.
    pub report_hash: String,
}

impl ExperimentReport {
    pub fn compute_hash(&self) -> String {
        let mut r = self.clone();
        r.wall_clock_s = 0.0;
        r.report_hash.clear();
        hex::encode(Sha256::digest(serde_json::to_vec(&r).expect("report serializes")))
    }

    pub fn cell(&self, tpdist_on: bool, hhloss_on: bool) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.tpdist_on == tpdist_on && c.hhloss_on == hhloss_on)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub const CELLS: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

/// Trains and evaluates every toggle cell for every seed.
pub fn ablate(cfg: &ExperimentConfig, data: &Dataset) -> Result<ExperimentReport> {
    cfg.validate()?;
    if cfg.seeds.len() < 3 {
        return Err(HarnessError::Config(format!("ablation needs at least 3 seeds, got {}", cfg.seeds.len())));
    }
    if data.test.is_empty() {
        return Err(HarnessError::Data("test split is empty".into()));
    }
    let start = Instant::now();
    let clean = data.clean_test();
    let reg = &data.body.regressor;
    let jobs: Vec<(usize, u64)> = (0..CELLS.len())
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let run = |&(c, seed): &(usize, u64)| -> RunReport {
        let (tpdist_on, hhloss_on) = CELLS[c];
        let model_cfg = ModelConfig {
            tpdist_on,
            hhloss_on,
            seed,
            ..cfg.model.clone()
        };
        let result = (|| -> Result<(f64, PoseError, PoseError)> {
            let out = train(&model_cfg, &cfg.train, &data.train)?;
            let occ = evaluate(&out.model, reg, &data.test)?.mean;
            let cl = evaluate(&out.model, reg, &clean)?.mean;
            Ok((out.curve.last().copied().unwrap_or(f64::NAN), occ, cl))
        })();
        match result {
            Ok((l, o, c)) => RunReport {
                seed,
                final_loss: Some(l),
                occluded: Some(o),
                clean: Some(c),
                error: None,
            },
            Err(e) => RunReport {
                seed,
                final_loss: None,
                occluded: None,
                clean: None,
                error: Some(format!("{}: {e}", e.kind())),
            },
        }
    };
    let runs: Vec<RunReport> = if cfg.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };
    let cells = CELLS
        .iter()
        .enumerate()
        .map(|(c, &(tpdist_on, hhloss_on))| {
            let runs: Vec<RunReport> = runs
                .iter()
                .zip(&jobs)
                .filter(|(_, j)| j.0 == c)
                .map(|(r, _)| r.clone())
                .collect();
            let occ: Vec<PoseError> = runs.iter().filter_map(|r| r.occluded).collect();
            let cl: Vec<PoseError> = runs.iter().filter_map(|r| r.clean).collect();
            CellReport {
                tpdist_on,
                hhloss_on,
                failed: runs.iter().any(|r| r.error.is_some()),
                occluded: (!occ.is_empty()).then(|| Spread::of(&occ)),
                clean: (!cl.is_empty()).then(|| Spread::of(&cl)),
                runs,
            }
        })
        .collect();
    let mean_pose = MeanPose::fit(&data.train)?;
    let mut report = ExperimentReport {
        format: "tempograph.report".into(),
        version: 1,
        config_hash: cfg.hash(),
        cells,
        mean_pose: ReferenceReport {
            occluded: evaluate(&mean_pose, reg, &data.test)?.mean,
            clean: evaluate(&mean_pose, reg, &clean)?.mean,
        },
        wall_clock_s: start.elapsed().as_secs_f64(),
        report_hash: String::new(),
    };
    report.report_hash = report.compute_hash();
    Ok(report)
}
