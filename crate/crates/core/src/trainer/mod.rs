//! Four-step training schedule: foreground localisation, coarse
//! segmentation, joint training, and slice-classifier fine-tuning.

mod checkpoint;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};

use crate::error::{Error, Result};
use crate::inference::{coarse_probabilities, InferenceConfig};
use crate::losses::{step_loss, step_terms, LossConfig, LossTerms, ProbabilityField, SourceNet};
use crate::networks::{compose_from_labels, compose_net2_input, Net1, Net1Config, Net2, Net2Config, INPLANE_DIVISOR};
use crate::nn::{Adam, Gradients, ParamStore, Tensor};
use crate::sampler::{make_batch, Dataset, Sample, SamplerConfig};
use crate::volumes::{one_hot_from_slice, OneHotField};

/// Both networks and the steps already trained into them.
#[derive(Debug, Clone)]
pub struct Models {
    pub net1: Net1,
    pub net2: Net2,
    pub completed_steps: Vec<u8>,
}

impl Models {
    pub fn new(net1: Net1Config, net2: Net2Config, seed: u64) -> Result<Self> {
        if net1.num_classes != net2.num_classes {
            return Err(Error::InvalidConfig(format!(
                "net1 has {} classes, net2 has {}",
                net1.num_classes, net2.num_classes
            )));
        }
        Ok(Self { net1: Net1::new(net1, seed)?, net2: Net2::new(net2, seed)?, completed_steps: Vec::new() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frozen {
    Net1,
    Net2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub step: u8,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
}

impl StepSchedule {
    pub fn iterations(&self) -> usize {
        self.epochs * self.iterations_per_epoch
    }
}

/// Network held fixed in each step. Steps 1 and 2 involve only Net1.
pub fn frozen_in(step: u8) -> Result<Frozen> {
    match step {
        1 | 2 => Ok(Frozen::Net2),
        3 => Err(Error::InvalidArgument("step 3 trains both networks".into())),
        4 => Ok(Frozen::Net1),
        _ => Err(Error::InvalidArgument(format!("training step must be 1..=4, got {step}"))),
    }
}

fn trains(step: u8) -> (bool, bool) {
    match frozen_in(step) {
        Ok(Frozen::Net1) => (false, true),
        Ok(Frozen::Net2) => (true, false),
        Err(_) => (true, true),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub steps: Vec<StepSchedule>,
    pub learning_rate: f32,
    /// Seeds network initialisation and dropout.
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 writes only at the
    /// end of each step.
    pub checkpoint_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainSchedule {
    fn uniform(epochs: usize, iterations_per_epoch: usize, learning_rate: f32) -> Self {
        Self {
            steps: (1..=4).map(|step| StepSchedule { step, epochs, iterations_per_epoch }).collect(),
            learning_rate,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    /// 200 epochs of 16 iterations per step at learning rate 1e-4.
    pub fn paper() -> Self {
        Self::uniform(200, 16, 1e-4)
    }

    /// 50 epochs of 4 iterations per step at learning rate 3e-3.
    pub fn desk() -> Self {
        Self::uniform(50, 4, 3e-3)
    }

    pub fn total_iterations(&self) -> usize {
        self.steps.iter().map(StepSchedule::iterations).sum()
    }

    pub fn step(&self, step: u8) -> Option<&StepSchedule> {
        self.steps.iter().find(|s| s.step == step)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.steps {
            step_terms(s.step)?;
        }
        if self.steps.windows(2).any(|w| w[0].step >= w[1].step) {
            return Err(Error::InvalidConfig("schedule steps must be strictly increasing".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// One optimizer update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub step: u8,
    pub epoch: usize,
    pub terms: LossTerms,
}

pub const LOG_HEADER: &str = "iteration,step,epoch,roi1,dice1,dice2,total";

impl LogRecord {
    pub fn total(&self) -> f64 {
        self.terms.total()
    }

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{:.8}",
            self.iteration,
            self.step,
            self.epoch,
            f(self.terms.roi1),
            f(self.terms.dice1),
            f(self.terms.dice2),
            self.total()
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u8,
    pub iterations: usize,
    pub net1_checksum: (u64, u64),
    pub net2_checksum: (u64, u64),
    /// Trainable tensors whose gradient stayed exactly zero through the
    /// first epoch.
    pub dead_tensors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceReport {
    pub smoothed_start: f64,
    pub smoothed_end: f64,
    pub decreasing: bool,
}

/// Compares window-20 means at the two ends of a loss trace. A trace that
/// does not end lower than it started is flagged as stalled.
pub fn loss_trace_monotonicity_report(trace: &[f64]) -> Result<TraceReport> {
    if trace.is_empty() {
        return Err(Error::InvalidArgument("empty loss trace".into()));
    }
    let w = trace.len().min(20);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let smoothed_start = mean(&trace[..w]);
    let smoothed_end = mean(&trace[trace.len() - w..]);
    Ok(TraceReport { smoothed_start, smoothed_end, decreasing: smoothed_end < smoothed_start })
}

/// Owns the models and dataset and runs schedule steps over them.
pub struct Trainer {
    models: Models,
    dataset: Dataset,
    sampler: SamplerConfig,
    loss: LossConfig,
    schedule: TrainSchedule,
    inference: InferenceConfig,
    log: Vec<LogRecord>,
    csv: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
}

fn tensor(dims: [usize; 3], g: &[f64]) -> Tensor {
    Tensor::from_vec(g.len() / dims.iter().product::<usize>(), dims, g.iter().map(|&v| v as f32).collect())
}

fn record_nonzero(seen: &mut [bool], g: &Gradients) {
    for (s, v) in seen.iter_mut().zip(g.iter()) {
        *s |= v.iter().any(|&x| x != 0.0);
    }
}

fn dead(store: &ParamStore, seen: &[bool]) -> Vec<String> {
    store.iter().zip(seen).filter(|(_, &s)| !s).map(|((n, _, _), _)| n.to_string()).collect()
}

impl Trainer {
    pub fn new(
        models: Models,
        dataset: Dataset,
        sampler: SamplerConfig,
        loss: LossConfig,
        schedule: TrainSchedule,
        inference: InferenceConfig,
    ) -> Result<Self> {
        sampler.validate()?;
        loss.validate()?;
        schedule.validate()?;
        inference.validate()?;
        let c = dataset.num_classes();
        if models.net1.config().num_classes != c || models.net2.config().num_classes != c {
            return Err(Error::InvalidConfig(format!("networks must output the dataset's {c} classes")));
        }
        let d1 = models.net1.divisor();
        if d1.iter().any(|&d| !INPLANE_DIVISOR.is_multiple_of(d)) {
            return Err(Error::InvalidConfig(format!("net1 divisor {d1:?} must divide {INPLANE_DIVISOR}")));
        }
        let k = models.net2.config().k_slices;
        for &s in &sampler.subvolume_sizes {
            if s % INPLANE_DIVISOR != 0 {
                return Err(Error::InvalidConfig(format!(
                    "subvolume size {s} must be a multiple of {INPLANE_DIVISOR}"
                )));
            }
            if s < k {
                return Err(Error::InvalidConfig(format!("subvolume size {s} is thinner than K = {k}")));
            }
        }
        Ok(Self { models, dataset, sampler, loss, schedule, inference, log: Vec::new(), csv: None, checkpoint: None })
    }

    /// Appends every log record to a CSV file.
    pub fn with_csv_log(mut self, path: impl Into<PathBuf>) -> Self {
        self.csv = Some(path.into());
        self
    }

    /// Checkpoint written after each step and every `checkpoint_every`
    /// iterations.
    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint = Some(path.into());
        self
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    pub fn into_models(self) -> Models {
        self.models
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn inference(&self) -> &InferenceConfig {
        &self.inference
    }

    /// Loss terms and accumulated gradients of one sample; gradients of a
    /// network outside the step's objective stay zero.
    pub fn sample_gradients(
        &self,
        step: u8,
        sample: &Sample,
        dropout: &mut ChaCha8Rng,
        g1: &mut Gradients,
        g2: &mut Gradients,
    ) -> Result<LossTerms> {
        let (net1, net2) = (&self.models.net1, &self.models.net2);
        let c = self.dataset.num_classes();
        let dims = sample.dims;
        let (use_roi, use_d1, use_d2) = step_terms(step)?;
        let mut p1 = None;
        let mut t1: Option<OneHotField> = None;
        let mut trace1 = None;
        if use_roi || use_d1 {
            let x = Tensor::from_vec(1, dims, sample.intensity.clone());
            let (logits, tr) = net1.forward_train(x, dropout)?;
            p1 = Some(ProbabilityField::from_logits(&logits, SourceNet::Net1));
            t1 = Some(one_hot_from_slice(&sample.labels, dims, c)?);
            trace1 = Some(tr);
        }
        let mut p2 = None;
        let mut t2 = None;
        let mut trace2 = None;
        if use_d2 {
            let k = net2.config().k_slices;
            let (x, target, tdims) = match (&p1, &sample.guide) {
                (Some(p1), _) => {
                    // valid z-reduction drops (K-1)/2 slices at each end
                    let h = (k - 1) / 2;
                    let plane = dims[0] * dims[1];
                    let depth = dims[2] + 1 - k;
                    let target = sample.labels[h * plane..(h + depth) * plane].to_vec();
                    (compose_net2_input(&sample.intensity, p1)?, target, [dims[0], dims[1], depth])
                }
                (None, Some(guide)) => (
                    compose_from_labels(&sample.intensity, guide, dims, c)?,
                    sample.labels.clone(),
                    [dims[0], dims[1], 1],
                ),
                (None, None) => {
                    return Err(Error::MissingPrerequisite { step, what: "Net1 label maps for the Net2 input".into() })
                }
            };
            let (logits, tr) = net2.forward(x)?;
            if logits.dims() != tdims {
                return Err(Error::ShapeMismatch(format!("net2 output {:?} vs target {tdims:?}", logits.dims())));
            }
            p2 = Some(ProbabilityField::from_logits(&logits, SourceNet::Net2));
            t2 = Some(one_hot_from_slice(&target, tdims, c)?);
            trace2 = Some(tr);
        }
        let sl = step_loss(step, p1.as_ref(), p2.as_ref(), t1.as_ref(), t2.as_ref(), &self.loss)?;
        if let (Some(g), Some(p), Some(tr)) = (&sl.grad_p1, &p1, &trace1) {
            net1.backward(tr, &tensor(p.dims(), &p.softmax_backward(g)), g1);
        }
        if let (Some(g), Some(p), Some(tr)) = (&sl.grad_p2, &p2, &trace2) {
            net2.backward(tr, &tensor(p.dims(), &p.softmax_backward(g)), g2);
        }
        Ok(sl.terms)
    }

    /// Net1 label maps on every training volume, the second Net2 channel in
    /// step 4.
    pub fn refresh_guides(&mut self) -> Result<()> {
        let spacing = self.dataset.coarse_spacing();
        for case in self.dataset.cases_mut() {
            let p = coarse_probabilities(&case.intensity, &self.models.net1, spacing)?;
            case.guide = Some(p.argmax());
        }
        Ok(())
    }

    fn append_csv(&self, records: &[LogRecord]) -> Result<()> {
        let Some(path) = &self.csv else { return Ok(()) };
        let unwritable = |e: std::io::Error| Error::Unwritable { path: path.clone(), reason: e.to_string() };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(unwritable)?;
        }
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(unwritable)?;
        if fresh {
            writeln!(f, "{LOG_HEADER}").map_err(unwritable)?;
        }
        for r in records {
            writeln!(f, "{}", r.csv_row()).map_err(unwritable)?;
        }
        Ok(())
    }

    fn save(&self) -> Result<()> {
        match &self.checkpoint {
            Some(p) => save_checkpoint(p, &self.models, &self.inference),
            None => Ok(()),
        }
    }

    /// Runs one step of the schedule. Unless `allow_skipped` is set, every
    /// earlier step must already be trained into the models.
    pub fn run_step(&mut self, step: u8, allow_skipped: bool) -> Result<StepReport> {
        let spec = *self
            .schedule
            .step(step)
            .ok_or_else(|| Error::InvalidArgument(format!("step {step} is not in the schedule")))?;
        if !allow_skipped {
            if let Some(missing) = (1..step).find(|s| !self.models.completed_steps.contains(s)) {
                return Err(Error::MissingPrerequisite {
                    step,
                    what: format!("a checkpoint with step {missing} trained"),
                });
            }
        }
        if step == 4 {
            self.refresh_guides()?;
        }
        let (train1, train2) = trains(step);
        let before = (self.models.net1.params().checksum(), self.models.net2.params().checksum());
        let mut adam1 = Adam::new(self.models.net1.params(), self.schedule.learning_rate);
        let mut adam2 = Adam::new(self.models.net2.params(), self.schedule.learning_rate);
        let mut batch_rng = ChaCha8Rng::seed_from_u64(self.sampler.rng_seed);
        batch_rng.set_stream(step as u64);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(self.schedule.seed);
        dropout_rng.set_stream(100 + step as u64);
        let mut g1 = self.models.net1.params().zero_grads();
        let mut g2 = self.models.net2.params().zero_grads();
        let mut seen1 = vec![false; self.models.net1.params().len()];
        let mut seen2 = vec![false; self.models.net2.params().len()];
        let k = self.models.net2.config().k_slices;
        let mut pending = Vec::new();
        let mut done = 0;
        for epoch in 0..spec.epochs {
            for _ in 0..spec.iterations_per_epoch {
                let batch = make_batch(&self.dataset, step, &self.sampler, k, &mut batch_rng)?;
                g1.zero();
                g2.zero();
                let mut sum = [0.0f64; 3];
                let mut has = [false; 3];
                for s in &batch.samples {
                    let t = self.sample_gradients(step, s, &mut dropout_rng, &mut g1, &mut g2)?;
                    for (i, v) in [t.roi1, t.dice1, t.dice2].into_iter().enumerate() {
                        if let Some(v) = v {
                            sum[i] += v;
                            has[i] = true;
                        }
                    }
                }
                let n = batch.samples.len() as f64;
                let avg = |i: usize| has[i].then(|| sum[i] / n);
                let terms = LossTerms { roi1: avg(0), dice1: avg(1), dice2: avg(2) };
                let iteration = self.log.len() + 1;
                if !terms.total().is_finite() || !g1.is_finite() || !g2.is_finite() {
                    self.append_csv(&pending)?;
                    return Err(Error::NonFiniteLoss { step, iteration, value: terms.total() });
                }
                let scale = 1.0 / n as f32;
                if train1 {
                    g1.scale(scale);
                    adam1.step(self.models.net1.params_mut(), &g1);
                }
                if train2 {
                    g2.scale(scale);
                    adam2.step(self.models.net2.params_mut(), &g2);
                }
                if epoch == 0 {
                    record_nonzero(&mut seen1, &g1);
                    record_nonzero(&mut seen2, &g2);
                }
                let rec = LogRecord { iteration, step, epoch, terms };
                self.log.push(rec);
                pending.push(rec);
                done += 1;
                if self.schedule.checkpoint_every > 0 && done % self.schedule.checkpoint_every == 0 {
                    self.append_csv(&pending)?;
                    pending.clear();
                    self.save()?;
                }
            }
        }
        self.append_csv(&pending)?;
        if !self.models.completed_steps.contains(&step) {
            self.models.completed_steps.push(step);
            self.models.completed_steps.sort_unstable();
        }
        self.save()?;
        let after = (self.models.net1.params().checksum(), self.models.net2.params().checksum());
        let mut dead_tensors = Vec::new();
        if spec.epochs > 0 {
            if train1 {
                dead_tensors.extend(dead(self.models.net1.params(), &seen1));
            }
            if train2 {
                dead_tensors.extend(dead(self.models.net2.params(), &seen2));
            }
        }
        Ok(StepReport {
            step,
            iterations: done,
            net1_checksum: (before.0, after.0),
            net2_checksum: (before.1, after.1),
            dead_tensors,
        })
    }

    /// Every scheduled step in order.
    pub fn run_all(&mut self) -> Result<Vec<StepReport>> {
        let steps: Vec<u8> = self.schedule.steps.iter().map(|s| s.step).collect();
        steps.into_iter().map(|s| self.run_step(s, true)).collect()
    }
}

/// Reads a training log written by [`Trainer::with_csv_log`].
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::InvalidArgument(format!("{}:{}: malformed log row", path.display(), n + 1));
        if f.len() != 7 {
            return Err(bad());
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad())
            }
        };
        out.push(LogRecord {
            iteration: f[0].parse().map_err(|_| bad())?,
            step: f[1].parse().map_err(|_| bad())?,
            epoch: f[2].parse().map_err(|_| bad())?,
            terms: LossTerms { roi1: opt(f[3])?, dice1: opt(f[4])?, dice2: opt(f[5])? },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};
    use crate::sampler::AugmentConfig;

    fn tiny_trainer(iters: usize) -> Trainer {
        let ph = PhantomConfig { shape: [32, 32, 24], num_foreground_classes: 2, ..PhantomConfig::default() };
        let ds = Dataset::new(vec![generate_phantom(&ph).unwrap()], [3.0; 3]).unwrap();
        let n1 = Net1Config { base_width: 2, num_classes: 3, kernel: [3; 3], ..Net1Config::default() };
        let n2 = Net2Config { base_width: 2, num_classes: 3, k_slices: 3, ..Net2Config::default() };
        let sampler = SamplerConfig {
            subvolume_sizes: vec![16],
            volumes_per_batch: 1,
            augmentation: AugmentConfig { enabled: false, ..AugmentConfig::default() },
            ..SamplerConfig::default()
        };
        let schedule = TrainSchedule::uniform(1, iters, 1e-3);
        Trainer::new(
            Models::new(n1, n2, 0).unwrap(),
            ds,
            sampler,
            LossConfig::default(),
            schedule,
            InferenceConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn schedule_arithmetic() {
        assert_eq!(TrainSchedule::paper().total_iterations(), 12_800);
        assert_eq!(TrainSchedule::desk().total_iterations(), 800);
        assert_eq!(TrainSchedule::paper().learning_rate, 1e-4);
    }

    #[test]
    fn freezing_table() {
        assert_eq!(frozen_in(1).unwrap(), Frozen::Net2);
        assert_eq!(frozen_in(4).unwrap(), Frozen::Net1);
        assert!(frozen_in(3).is_err());
        assert_eq!(trains(3), (true, true));
    }

    #[test]
    fn monotonicity_report() {
        let down: Vec<f64> = (0..100).map(|i| 1.0 - i as f64 / 100.0).collect();
        assert!(loss_trace_monotonicity_report(&down).unwrap().decreasing);
        assert!(!loss_trace_monotonicity_report(&[0.5; 50]).unwrap().decreasing);
        assert!(loss_trace_monotonicity_report(&[]).is_err());
    }

    #[test]
    fn later_steps_need_earlier_ones() {
        let mut t = tiny_trainer(1);
        assert!(matches!(t.run_step(3, false), Err(Error::MissingPrerequisite { step: 3, .. })));
        t.run_step(1, false).unwrap();
        t.run_step(2, false).unwrap();
        assert!(t.run_step(3, false).is_ok());
    }

    #[test]
    fn steps_respect_freezing_and_log_terms() {
        let mut t = tiny_trainer(2);
        let reports = t.run_all().unwrap();
        assert_eq!(reports.len(), 4);
        assert_eq!(reports[0].net2_checksum.0, reports[0].net2_checksum.1);
        assert_ne!(reports[0].net1_checksum.0, reports[0].net1_checksum.1);
        assert_eq!(reports[3].net1_checksum.0, reports[3].net1_checksum.1);
        assert_ne!(reports[3].net2_checksum.0, reports[3].net2_checksum.1);
        assert_eq!(t.log().len(), 8);
        for r in t.log() {
            let (a, b, c) = step_terms(r.step).unwrap();
            assert_eq!((r.terms.roi1.is_some(), r.terms.dice1.is_some(), r.terms.dice2.is_some()), (a, b, c));
        }
        assert_eq!(t.models().completed_steps, vec![1, 2, 3, 4]);
    }

    #[test]
    fn csv_log_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let mut t = tiny_trainer(2).with_csv_log(&path);
        t.run_step(1, false).unwrap();
        let back = read_log(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(t.log()) {
            assert_eq!((a.iteration, a.step, a.epoch), (b.iteration, b.step, b.epoch));
            assert!((a.total() - b.total()).abs() < 1e-7);
        }
        assert!(std::fs::read_to_string(&path).unwrap().starts_with(LOG_HEADER));
    }
}
