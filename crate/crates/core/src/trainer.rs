//! The training loop: triple sampling, sparse Adam updates, per-epoch
//! augmentation redraws, validation-based model selection, and early
//! stopping.
//!
//! Everything is deterministic given the config seed: sampling, dropout
//! seeds, and update order are all derived streams, so two runs with the
//! same config produce bit-identical logs and checkpoints.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SplitDataset;
use crate::encoder::{
    backward, forward, init_embeddings, EmbeddingState, Graphs, ModelConfig, TableGradients,
};
use crate::error::{Error, Result};
use crate::evaluator::{rank_view_metrics, EvalTarget};
use crate::graph::AugmentationMode;
use crate::mat::Mat;
use crate::objectives::{total_loss, LossBreakdown, LossConfig, ScoreView, TrainBatch};
use crate::seeds;

/// The K used to pick the best epoch on the validation split.
pub const MODEL_SELECTION_K: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 0.001,
            batch_size: 2048,
            max_epochs: 200,
            patience: 20,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 1,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.model.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.model.augmentation.dropout_ratio) {
            return Err(Error::InvalidDropoutRatio(self.model.augmentation.dropout_ratio));
        }
        self.loss.validate()
    }
}

/// First/second Adam moment tables mirroring the embedding tables, with
/// the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m_user: Mat,
    pub v_user: Mat,
    pub m_bundle: Mat,
    pub v_bundle: Mat,
    pub m_item: Mat,
    pub v_item: Mat,
    pub t: u64,
}

impl AdamState {
    pub fn zeros(state: &EmbeddingState) -> Self {
        let like = |m: &Mat| Mat::zeros(m.rows(), m.cols());
        AdamState {
            m_user: like(&state.user),
            v_user: like(&state.user),
            m_bundle: like(&state.bundle),
            v_bundle: like(&state.bundle),
            m_item: like(&state.item),
            v_item: like(&state.item),
            t: 0,
        }
    }
}

/// Per-user training interactions, preprocessed for negative sampling.
pub struct NegativeSampler {
    train_pairs: Vec<(u32, u32)>,
    /// Sorted train bundles per user.
    user_bundles: Vec<Vec<u32>>,
    num_bundles: usize,
}

impl NegativeSampler {
    pub fn new(split: &SplitDataset) -> Result<Self> {
        if split.train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let mut user_bundles = vec![Vec::new(); split.base.num_users];
        for &(u, b) in &split.train {
            user_bundles[u as usize].push(b);
        }
        Ok(NegativeSampler {
            train_pairs: split.train.clone(),
            user_bundles,
            num_bundles: split.base.num_bundles,
        })
    }

    fn draw_negative(&self, user: u32, rng: &mut ChaCha8Rng) -> Result<u32> {
        let seen = &self.user_bundles[user as usize];
        if seen.len() >= self.num_bundles {
            return Err(Error::NoNegativeCandidates(user as usize));
        }
        loop {
            let cand = rng.random_range(0..self.num_bundles as u32);
            if seen.binary_search(&cand).is_err() {
                return Ok(cand);
            }
        }
    }
}

/// Draw `batch_size` positive pairs uniformly (with replacement) from the
/// training interactions, plus one rejection-sampled negative per pair.
pub fn sample_batch(
    sampler: &NegativeSampler,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainBatch> {
    let mut users = Vec::with_capacity(batch_size);
    let mut pos = Vec::with_capacity(batch_size);
    let mut neg = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let &(u, b) = &sampler.train_pairs[rng.random_range(0..sampler.train_pairs.len())];
        users.push(u);
        pos.push(b);
        neg.push(sampler.draw_negative(u, rng)?);
    }
    Ok(TrainBatch {
        users,
        pos_bundles: pos,
        neg_bundles: neg,
    })
}

struct AdamHyper {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bias1: f64,
    bias2: f64,
}

fn adam_update_table(
    table: &mut Mat,
    m: &mut Mat,
    v: &mut Mat,
    grads: &Mat,
    table_name: &'static str,
    hyper: &AdamHyper,
) -> Result<()> {
    for row in 0..table.rows() {
        let g = grads.row(row);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                table: table_name,
                row,
            });
        }
        if g.iter().all(|&x| x == 0.0) {
            // lazy update: untouched rows keep their moments undecayed
            continue;
        }
        for (mc, &gc) in m.row_mut(row).iter_mut().zip(g) {
            *mc = hyper.beta1 * *mc + (1.0 - hyper.beta1) * gc;
        }
        for (vc, &gc) in v.row_mut(row).iter_mut().zip(g) {
            *vc = hyper.beta2 * *vc + (1.0 - hyper.beta2) * gc * gc;
        }
        for ((theta, &mc), &vc) in table
            .row_mut(row)
            .iter_mut()
            .zip(m.row(row))
            .zip(v.row(row))
        {
            let m_hat = mc / hyper.bias1;
            let v_hat = vc / hyper.bias2;
            *theta -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// One bias-corrected Adam step over the rows that received gradient.
/// The step counter advances exactly once regardless of how many rows
/// were touched.
pub fn adam_step(
    state: &mut EmbeddingState,
    adam: &mut AdamState,
    grads: &TableGradients,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    adam.t += 1;
    let hyper = AdamHyper {
        lr,
        beta1: betas.0,
        beta2: betas.1,
        eps,
        bias1: 1.0 - betas.0.powi(adam.t as i32),
        bias2: 1.0 - betas.1.powi(adam.t as i32),
    };
    adam_update_table(
        &mut state.user,
        &mut adam.m_user,
        &mut adam.v_user,
        &grads.user,
        "user",
        &hyper,
    )?;
    adam_update_table(
        &mut state.bundle,
        &mut adam.m_bundle,
        &mut adam.v_bundle,
        &grads.bundle,
        "bundle",
        &hyper,
    )?;
    adam_update_table(
        &mut state.item,
        &mut adam.m_item,
        &mut adam.v_item,
        &grads.item,
        "item",
        &hyper,
    )
}

/// One per-step line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub bpr: f64,
    pub cl_u: f64,
    pub cl_b: f64,
    pub l2: f64,
    pub total: f64,
}

impl StepRecord {
    fn new(step: u64, b: &LossBreakdown) -> Self {
        StepRecord {
            step,
            bpr: b.bpr,
            cl_u: b.contrastive_user,
            cl_b: b.contrastive_bundle,
            l2: b.l2,
            total: b.total,
        }
    }
}

/// One per-epoch line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub val_recall20: f64,
    pub val_ndcg20: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogEntry {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Chronological training log; serializes to one JSON object per line.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("log entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Epoch(r) => Some(r),
            LogEntry::Step(_) => None,
        })
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Step(r) => Some(r),
            LogEntry::Epoch(_) => None,
        })
    }
}

/// Everything `train` returns.
pub struct TrainOutcome {
    /// Snapshot with the best validation NDCG@20 (initial state when no
    /// epoch ran).
    pub best_state: EmbeddingState,
    /// Epoch of the best snapshot; 0 means the initial state.
    pub best_epoch: u64,
    pub best_val_ndcg20: Option<f64>,
    pub best_adam: AdamState,
    pub final_state: EmbeddingState,
    pub final_adam: AdamState,
    pub epochs_run: u64,
    pub log: TrainLog,
}

/// Run the full training loop on a split dataset.
pub fn train(split: &SplitDataset, cfg: &TrainerConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let base = &split.base;
    let graphs = Graphs::build(base, &split.train, &cfg.model);
    let mut state = init_embeddings(
        base.num_users,
        base.num_bundles,
        base.num_items,
        cfg.model.embedding_dim,
        cfg.model.init_scale,
        seeds::derive(cfg.seed, "init", &[]),
    );
    let mut adam = AdamState::zeros(&state);
    let mut log = TrainLog::default();

    if cfg.max_epochs == 0 {
        return Ok(TrainOutcome {
            best_state: state.clone(),
            best_epoch: 0,
            best_val_ndcg20: None,
            best_adam: adam.clone(),
            final_state: state,
            final_adam: adam,
            epochs_run: 0,
            log,
        });
    }

    let sampler = NegativeSampler::new(split)?;
    let mut rng = seeds::rng(cfg.seed, "sampling", &[]);
    let steps_per_epoch = split.train.len().div_ceil(cfg.batch_size);
    let eval_model = ModelConfig {
        augmentation: crate::graph::AugmentationConfig {
            mode: AugmentationMode::Op,
            ..cfg.model.augmentation
        },
        ..cfg.model.clone()
    };

    let mut best: Option<(f64, u64, EmbeddingState, AdamState)> = None;
    let mut epochs_without_improvement = 0usize;
    let mut global_step = 0u64;
    let mut epochs_run = 0u64;

    for epoch in 1..=cfg.max_epochs as u64 {
        let epoch_seed = seeds::derive(cfg.seed, "epoch", &[epoch]);
        for s in 0..steps_per_epoch as u64 {
            let step_seed = match cfg.model.augmentation.mode {
                AugmentationMode::Op => 0,
                AugmentationMode::Ed => epoch_seed,
                AugmentationMode::Md => seeds::derive(epoch_seed, "step", &[s]),
            };
            let batch = sample_batch(&sampler, cfg.batch_size, &mut rng)?;
            let reps = forward(&state, &graphs, &cfg.model, step_seed)?;
            let out = total_loss(&reps, &state, &batch, &cfg.loss)?;
            global_step += 1;
            if !out.breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: global_step,
                    detail: format!("{:?}", out.breakdown),
                });
            }
            let mut grads = backward(&reps, &graphs, &out.rep_grads);
            out.direct_grads.add_to(&mut grads);
            adam_step(
                &mut state,
                &mut adam,
                &grads,
                cfg.learning_rate,
                (cfg.adam_beta1, cfg.adam_beta2),
                cfg.adam_eps,
            )?;
            log.entries
                .push(LogEntry::Step(StepRecord::new(global_step, &out.breakdown)));
        }

        // validation with deterministic OP forward
        let reps = forward(&state, &graphs, &eval_model, 0)?;
        let (metrics, _) = rank_view_metrics(
            &reps,
            split,
            EvalTarget::Validation,
            &[MODEL_SELECTION_K],
            ScoreView::Both,
            true,
        )?;
        let ndcg = metrics.ndcg_at[&MODEL_SELECTION_K];
        let recall = metrics.recall_at[&MODEL_SELECTION_K];
        log.entries.push(LogEntry::Epoch(EpochRecord {
            epoch,
            val_recall20: recall,
            val_ndcg20: ndcg,
        }));
        epochs_run = epoch;

        let improved = best.as_ref().is_none_or(|(b, _, _, _)| ndcg > *b);
        if improved {
            best = Some((ndcg, epoch, state.clone(), adam.clone()));
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement >= cfg.patience {
                break;
            }
        }
    }

    let (best_metric, best_epoch, best_state, best_adam) =
        best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best_state,
        best_epoch,
        best_val_ndcg20: Some(best_metric),
        best_adam,
        final_state: state,
        final_adam: adam,
        epochs_run,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, split, BundleDataset, SyntheticSpec};
    use crate::objectives::LossMode;

    fn tiny_split() -> SplitDataset {
        let d = generate_synthetic(&SyntheticSpec {
            users: 20,
            bundles: 10,
            items: 40,
            blocks: 2,
            noise_rate: 0.2,
            seed: 1,
        })
        .unwrap();
        split(&d, (0.7, 0.1, 0.2), 3).unwrap()
    }

    fn quick_config() -> TrainerConfig {
        TrainerConfig {
            learning_rate: 0.01,
            batch_size: 16,
            max_epochs: 3,
            patience: 5,
            seed: 9,
            model: ModelConfig {
                embedding_dim: 8,
                num_layers: 1,
                ..ModelConfig::default()
            },
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn forced_negative_when_one_candidate() {
        // user 0 interacts with bundles 0 and 1 out of 3
        let base = BundleDataset::new(
            1,
            3,
            3,
            vec![(0, 0), (0, 1)],
            vec![],
            vec![(0, 0), (1, 1), (2, 2)],
        )
        .unwrap();
        let s = SplitDataset {
            train: base.user_bundle.clone(),
            validation: vec![],
            test: vec![],
            base,
        };
        let sampler = NegativeSampler::new(&s).unwrap();
        let mut rng = seeds::rng(0, "t", &[]);
        for _ in 0..20 {
            let b = sample_batch(&sampler, 4, &mut rng).unwrap();
            assert!(b.neg_bundles.iter().all(|&n| n == 2));
        }
    }

    #[test]
    fn saturated_user_is_detected() {
        let base = BundleDataset::new(1, 2, 2, vec![(0, 0), (0, 1)], vec![], vec![(0, 0), (1, 1)])
            .unwrap();
        let s = SplitDataset {
            train: base.user_bundle.clone(),
            validation: vec![],
            test: vec![],
            base,
        };
        let sampler = NegativeSampler::new(&s).unwrap();
        let mut rng = seeds::rng(0, "t", &[]);
        assert!(matches!(
            sample_batch(&sampler, 1, &mut rng),
            Err(Error::NoNegativeCandidates(0))
        ));
    }

    #[test]
    fn negative_sampling_is_uniform() {
        // user 0 interacts with bundle 0; negatives uniform over 1..=4
        let pairs = vec![(0, 0)];
        let bi: Vec<(u32, u32)> = (0..5).map(|b| (b, 0)).collect();
        let base = BundleDataset::new(1, 5, 1, pairs, vec![], bi).unwrap();
        let s = SplitDataset {
            train: base.user_bundle.clone(),
            validation: vec![],
            test: vec![],
            base,
        };
        let sampler = NegativeSampler::new(&s).unwrap();
        let mut rng = seeds::rng(5, "chi", &[]);
        let draws = 100_000usize;
        let mut counts = [0usize; 5];
        let batch = sample_batch(&sampler, draws, &mut rng).unwrap();
        for &n in &batch.neg_bundles {
            counts[n as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| {
                let diff = c as f64 - expected;
                diff * diff / expected
            })
            .sum();
        // dof = 3; 16.27 is the 99.9th percentile
        assert!(chi2 < 16.27, "chi2 {chi2} too large: {counts:?}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = tiny_split();
        let sampler = NegativeSampler::new(&s).unwrap();
        let mut rng_a = seeds::rng(7, "sampling", &[]);
        let mut rng_b = seeds::rng(7, "sampling", &[]);
        for _ in 0..5 {
            let a = sample_batch(&sampler, 8, &mut rng_a).unwrap();
            let b = sample_batch(&sampler, 8, &mut rng_b).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut state = init_embeddings(2, 2, 2, 3, 1.0, 4);
        let before = state.clone();
        let mut adam = AdamState::zeros(&state);
        let grads = TableGradients {
            user: Mat::zeros(2, 3),
            bundle: Mat::zeros(2, 3),
            item: Mat::zeros(2, 3),
        };
        adam_step(&mut state, &mut adam, &grads, 0.1, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(state, before);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let mut state = init_embeddings(1, 1, 1, 1, 1.0, 4);
        let theta0 = state.user.row(0)[0];
        let mut adam = AdamState::zeros(&state);
        let mut grads = TableGradients {
            user: Mat::zeros(1, 1),
            bundle: Mat::zeros(1, 1),
            item: Mat::zeros(1, 1),
        };
        grads.user.row_mut(0)[0] = 1.0;
        adam_step(&mut state, &mut adam, &grads, 0.001, (0.9, 0.999), 1e-8).unwrap();
        // m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
        let expected = theta0 - 0.001 / (1.0 + 1e-8);
        assert!((state.user.row(0)[0] - expected).abs() < 1e-15);
        assert!((state.user.row(0)[0] - (theta0 - 0.000999999)).abs() < 1e-9);
    }

    #[test]
    fn adam_untouched_rows_are_bit_identical() {
        let mut state = init_embeddings(4, 1, 1, 2, 1.0, 8);
        let mut adam = AdamState::zeros(&state);
        // seed row 2 with nonzero moments via a first step
        let mut grads = TableGradients {
            user: Mat::zeros(4, 2),
            bundle: Mat::zeros(1, 2),
            item: Mat::zeros(1, 2),
        };
        grads.user.row_mut(2)[0] = 0.5;
        adam_step(&mut state, &mut adam, &grads, 0.01, (0.9, 0.999), 1e-8).unwrap();
        let state_before = state.clone();
        let adam_before = adam.clone();
        // second step touches only row 1
        let mut grads = TableGradients {
            user: Mat::zeros(4, 2),
            bundle: Mat::zeros(1, 2),
            item: Mat::zeros(1, 2),
        };
        grads.user.row_mut(1)[1] = -0.25;
        adam_step(&mut state, &mut adam, &grads, 0.01, (0.9, 0.999), 1e-8).unwrap();
        for row in [0usize, 2, 3] {
            assert_eq!(state.user.row(row), state_before.user.row(row));
            assert_eq!(adam.m_user.row(row), adam_before.m_user.row(row));
            assert_eq!(adam.v_user.row(row), adam_before.v_user.row(row));
        }
        assert_ne!(state.user.row(1), state_before.user.row(1));
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut state = init_embeddings(1, 1, 1, 1, 1.0, 4);
        let mut adam = AdamState::zeros(&state);
        let mut grads = TableGradients {
            user: Mat::zeros(1, 1),
            bundle: Mat::zeros(1, 1),
            item: Mat::zeros(1, 1),
        };
        grads.user.row_mut(0)[0] = f64::NAN;
        assert!(matches!(
            adam_step(&mut state, &mut adam, &grads, 0.001, (0.9, 0.999), 1e-8),
            Err(Error::NonFiniteGradient { table: "user", .. })
        ));
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let s = tiny_split();
        let mut cfg = quick_config();
        cfg.max_epochs = 0;
        let out = train(&s, &cfg).unwrap();
        assert!(out.log.entries.is_empty());
        assert_eq!(out.best_epoch, 0);
        assert_eq!(out.best_state, out.final_state);
        let expected = init_embeddings(
            20,
            10,
            40,
            cfg.model.embedding_dim,
            1.0,
            seeds::derive(cfg.seed, "init", &[]),
        );
        assert_eq!(out.best_state, expected);
    }

    #[test]
    fn training_is_deterministic_per_mode() {
        let s = tiny_split();
        for mode in [AugmentationMode::Op, AugmentationMode::Ed, AugmentationMode::Md] {
            let mut cfg = quick_config();
            cfg.model.augmentation.mode = mode;
            cfg.model.augmentation.dropout_ratio = 0.3;
            let a = train(&s, &cfg).unwrap();
            let b = train(&s, &cfg).unwrap();
            assert_eq!(a.log.to_jsonl(), b.log.to_jsonl(), "mode {mode:?}");
            assert_eq!(a.best_state, b.best_state);
            assert_eq!(a.final_state, b.final_state);
        }
    }

    #[test]
    fn best_state_matches_logged_maximum() {
        let s = tiny_split();
        let mut cfg = quick_config();
        cfg.max_epochs = 6;
        let out = train(&s, &cfg).unwrap();
        let max_ndcg = out
            .log
            .epochs()
            .map(|e| e.val_ndcg20)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_val_ndcg20.unwrap(), max_ndcg);
        let first_argmax = out
            .log
            .epochs()
            .find(|e| e.val_ndcg20 == max_ndcg)
            .unwrap()
            .epoch;
        assert_eq!(out.best_epoch, first_argmax);

        // re-evaluating the returned snapshot reproduces the logged value
        let graphs = Graphs::build(&s.base, &s.train, &cfg.model);
        let reps = forward(&out.best_state, &graphs, &cfg.model, 0).unwrap();
        let (m, _) = rank_view_metrics(
            &reps,
            &s,
            EvalTarget::Validation,
            &[MODEL_SELECTION_K],
            ScoreView::Both,
            true,
        )
        .unwrap();
        assert_eq!(m.ndcg_at[&MODEL_SELECTION_K], max_ndcg);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let s = tiny_split();
        let mut cfg = quick_config();
        cfg.max_epochs = 50;
        cfg.patience = 2;
        cfg.learning_rate = 0.0001;
        let out = train(&s, &cfg).unwrap();
        assert!(out.epochs_run < 50, "expected an early stop");
        let best = out.best_epoch;
        assert!(out.epochs_run <= best + 2);
    }

    #[test]
    fn bpr_loss_trends_down_on_synthetic_data() {
        for seed in [1u64, 2, 3] {
            let d = generate_synthetic(&SyntheticSpec {
                users: 100,
                bundles: 50,
                items: 200,
                blocks: 5,
                noise_rate: 0.1,
                seed,
            })
            .unwrap();
            let s = split(&d, (0.7, 0.1, 0.2), seed).unwrap();
            let cfg = TrainerConfig {
                learning_rate: 0.01,
                batch_size: 128,
                max_epochs: 20,
                patience: 50,
                seed,
                model: ModelConfig {
                    embedding_dim: 16,
                    num_layers: 2,
                    ..ModelConfig::default()
                },
                loss: LossConfig {
                    mode: LossMode::Full,
                    ..LossConfig::default()
                },
                ..TrainerConfig::default()
            };
            let out = train(&s, &cfg).unwrap();
            let steps: Vec<f64> = out.log.steps().map(|r| r.bpr).collect();
            let steps_per_epoch = s.train.len().div_ceil(cfg.batch_size);
            let first: f64 = steps[..10 * steps_per_epoch].iter().sum::<f64>()
                / (10 * steps_per_epoch) as f64;
            let last: f64 = steps[steps.len() - 10 * steps_per_epoch..].iter().sum::<f64>()
                / (10 * steps_per_epoch) as f64;
            assert!(
                last < first,
                "seed {seed}: BPR did not decrease ({first} -> {last})"
            );
        }
    }
}
