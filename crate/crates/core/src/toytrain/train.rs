use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::{gen_dataset, ToyDatasetSpec};
use super::model::ToyModel;
use super::optim::{AdamW, AdamWConfig};
use super::InitMode;
use crate::arch::ModelArch;
use crate::error::{Error, Result};
use crate::linalg::{hash64, Rng};

const STREAM_SHUFFLE: u64 = 0x7368_7566;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ModelArch,
    pub mode: InitMode,
    pub data: ToyDatasetSpec,
    pub steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl TrainConfig {
    /// Toy architecture, batch 64, default optimizer; the dataset seed
    /// follows the run seed so paired runs see the same data.
    pub fn toy(mode: InitMode, seed: u64, steps: usize) -> Self {
        Self {
            arch: ModelArch::toy(),
            mode,
            data: ToyDatasetSpec {
                seed,
                ..Default::default()
            },
            steps,
            seed,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRunMetrics {
    pub seed: u64,
    pub init_mode: InitMode,
    pub steps: usize,
    /// Mini-batch loss before each update.
    pub train_loss: Vec<f64>,
    pub initial_test_loss: f64,
    pub final_test_loss: f64,
    pub final_test_accuracy: f64,
    /// Excluded from the serialized summary so reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl ToyRunMetrics {
    /// `step,train_loss` rows.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,train_loss\n");
        for (i, l) in self.train_loss.iter().enumerate() {
            out.push_str(&format!("{i},{}\n", crate::inspect::format_g17(*l)));
        }
        out
    }
}

/// Trains one model. Deterministic given the configuration.
pub fn train_toy(cfg: &TrainConfig) -> Result<ToyRunMetrics> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be at least 1".into()));
    }
    let started = Instant::now();
    let (train, test) = gen_dataset(&cfg.data)?;
    let mut model = ToyModel::new(&cfg.arch, cfg.mode, cfg.seed)?;
    let mut opt = AdamW::new(&model.params, cfg.optimizer);
    let eval_chunk = 256;
    let (initial_test_loss, initial_acc) = model.evaluate(&test.pixels, &test.labels, eval_chunk)?;

    let mut rng = Rng::seed_from_u64(hash64(cfg.seed, STREAM_SHUFFLE, 0));
    let batch = cfg.batch_size.min(train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut train_loss = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let mb = train.select(&order[cursor..cursor + batch]);
        cursor += batch;
        let out = model.loss_and_grad(&mb.pixels, &mb.labels)?;
        if !out.loss.is_finite() || !out.grads.is_finite() {
            return Err(Error::Divergence { step, loss: out.loss });
        }
        train_loss.push(out.loss);
        opt.step(&mut model.params, &out.grads);
    }

    let (final_test_loss, final_test_accuracy) = if cfg.steps == 0 {
        (initial_test_loss, initial_acc)
    } else {
        model.evaluate(&test.pixels, &test.labels, eval_chunk)?
    };
    if !final_test_loss.is_finite() {
        return Err(Error::Divergence {
            step: cfg.steps,
            loss: final_test_loss,
        });
    }
    Ok(ToyRunMetrics {
        seed: cfg.seed,
        init_mode: cfg.mode,
        steps: cfg.steps,
        train_loss,
        initial_test_loss,
        final_test_loss,
        final_test_accuracy,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Runs independent configurations on up to `threads` workers. Results
/// come back in input order regardless of scheduling.
pub fn run_many(cfgs: &[TrainConfig], threads: usize) -> Vec<Result<ToyRunMetrics>> {
    let workers = threads.clamp(1, cfgs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ToyRunMetrics>>>> = Mutex::new((0..cfgs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cfgs.len() {
                    break;
                }
                let result = train_toy(&cfgs[i]);
                slots.lock().expect("result slots")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every configuration ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: InitMode, seed: u64, steps: usize) -> TrainConfig {
        let mut cfg = TrainConfig::toy(mode, seed, steps);
        cfg.data.train_count = 64;
        cfg.data.test_count = 32;
        cfg.batch_size = 16;
        cfg
    }

    #[test]
    fn zero_steps_start_at_chance() {
        for mode in [InitMode::Default, InitMode::Mimetic] {
            let r = train_toy(&TrainConfig::toy(mode, 0, 0)).unwrap();
            assert!((r.initial_test_loss - 3f64.ln()).abs() < 0.05, "{mode}: {}", r.initial_test_loss);
            assert_eq!(r.final_test_loss, r.initial_test_loss);
            assert!(r.train_loss.is_empty());
        }
    }

    #[test]
    fn runs_repeat_exactly_and_ignore_threads() {
        let cfgs: Vec<TrainConfig> = InitMode::ALL.iter().map(|&m| small(m, 3, 5)).collect();
        let one: Vec<ToyRunMetrics> = run_many(&cfgs, 1).into_iter().map(|r| r.unwrap()).collect();
        let many: Vec<ToyRunMetrics> = run_many(&cfgs, 4).into_iter().map(|r| r.unwrap()).collect();
        for (a, b) in one.iter().zip(&many) {
            assert_eq!(a.train_loss, b.train_loss);
            assert_eq!(a.final_test_loss.to_bits(), b.final_test_loss.to_bits());
            assert_eq!(a.loss_csv(), b.loss_csv());
        }
        assert_eq!(one[1].train_loss.len(), 5);
    }

    #[test]
    fn empty_batches_are_rejected() {
        let mut cfg = small(InitMode::Default, 0, 1);
        cfg.batch_size = 0;
        assert!(matches!(train_toy(&cfg), Err(Error::InvalidParameter(_))));
    }
}
