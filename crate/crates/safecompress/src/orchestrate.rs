//! The end-to-end compression loop: round-based dynamic sparse training
//! with attacker-in-the-loop candidate selection, the adversarial
//! training enhancement, and the pretrain-prune-finetune baseline.
//!
//! Each round: train the carried model, derive four candidates via the
//! 2x2 prune/grow grid, train the round's simulated attacker(s) against
//! the carried model, fine-tune one attacker copy per candidate, score
//! every candidate by task accuracy and attack accuracy, and carry the
//! best scorer into the next round. The safety-testing attackers live
//! outside the training graph; only the adversarial-training adversary
//! ever shapes target gradients.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    finetune_attacker, make_split, mia_accuracy, train_attacker, AttackKind, AttackerConfig,
    AttackerModel, MembershipSplit,
};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::{label_tensor, Graph};
use crate::model::{
    build_mlp, mlp_param_nodes, step_masked, unwire_params, wire_mlp_from_params, FineTuneConfig,
    TargetModel, TrainOptions,
};
use crate::optim::{Optimizer, OptimizerConfig, ParamSlot};
use crate::select::{select_best, EvalReport};
use crate::sparse::{PruneSchedule, UpdateStrategy};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Bmia,
    Wmia,
    Mmia,
}

impl Mode {
    pub fn uses_black_box(&self) -> bool {
        matches!(self, Mode::Bmia | Mode::Mmia)
    }

    pub fn uses_white_box(&self) -> bool {
        matches!(self, Mode::Wmia | Mode::Mmia)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Bmia => "bmia",
            Mode::Wmia => "wmia",
            Mode::Mmia => "mmia",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bmia" => Ok(Mode::Bmia),
            "wmia" => Ok(Mode::Wmia),
            "mmia" => Ok(Mode::Mmia),
            other => Err(format!("unknown mode `{other}` (expected bmia|wmia|mmia)")),
        }
    }
}

fn default_lambda() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    0.5
}
fn default_beta() -> f64 {
    0.1
}
fn default_rounds() -> usize {
    10
}
fn default_iterations() -> usize {
    200
}
fn default_batch() -> usize {
    16
}
fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_lr() -> f64 {
    0.1
}
fn default_tau() -> f64 {
    crate::model::DEFAULT_THRESHOLD_TAU
}
fn default_mode() -> Mode {
    Mode::Bmia
}
fn default_seed() -> u64 {
    1
}

/// Every knob of a compression run. Defaults: lambda 1, alpha 0.5,
/// beta 0.1, ten rounds of 200 iterations at desk-scale sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    pub omega: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_rounds")]
    pub total_rounds: usize,
    #[serde(default = "default_iterations")]
    pub iterations_per_round: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_lr")]
    pub train_learning_rate: f64,
    #[serde(default)]
    pub prune_schedule: PruneSchedule,
    #[serde(default = "default_tau")]
    pub threshold_tau: f64,
    #[serde(default)]
    pub adversarial_training: bool,
    #[serde(default)]
    pub fine_tune: FineTuneConfig,
    /// Recovery pass of the pruning baseline; runs to convergence, which
    /// takes far longer than the per-round candidate fine-tune.
    #[serde(default = "default_baseline_fine_tune")]
    pub baseline_fine_tune: FineTuneConfig,
    #[serde(default)]
    pub attacker: AttackerConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_baseline_fine_tune() -> FineTuneConfig {
    FineTuneConfig {
        epochs: 100,
        batch_size: 32,
        learning_rate: 5e-3,
    }
}

impl RunConfig {
    pub fn with_omega(omega: f64) -> Self {
        RunConfig {
            mode: default_mode(),
            omega,
            lambda: default_lambda(),
            alpha: default_alpha(),
            beta: default_beta(),
            total_rounds: default_rounds(),
            iterations_per_round: default_iterations(),
            batch_size: default_batch(),
            hidden_dims: default_hidden(),
            train_learning_rate: default_lr(),
            prune_schedule: PruneSchedule::default(),
            threshold_tau: default_tau(),
            adversarial_training: false,
            fine_tune: FineTuneConfig::default(),
            baseline_fine_tune: default_baseline_fine_tune(),
            attacker: AttackerConfig::default(),
            seed: default_seed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, message: String| -> Result<()> {
            Err(Error::Config {
                path: path.to_string(),
                message,
            })
        };
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return fail("omega", format!("must be in (0, 1], got {}", self.omega));
        }
        if self.lambda <= 0.0 {
            return fail("lambda", format!("must be positive, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("alpha", format!("must be in [0, 1], got {}", self.alpha));
        }
        if self.beta < 0.0 {
            return fail("beta", format!("must be non-negative, got {}", self.beta));
        }
        if self.total_rounds == 0 {
            return fail("total_rounds", "must be at least 1".to_string());
        }
        if self.iterations_per_round == 0 {
            return fail("iterations_per_round", "must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.prune_schedule.initial) {
            return fail(
                "prune_schedule.initial",
                format!("must be in [0, 1], got {}", self.prune_schedule.initial),
            );
        }
        if self.threshold_tau < 0.0 {
            return fail(
                "threshold_tau",
                format!("must be non-negative, got {}", self.threshold_tau),
            );
        }
        Ok(())
    }
}

/// Wall-clock milliseconds per stage of one round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub train_ms: u64,
    pub update_ms: u64,
    pub attack_ms: u64,
    pub eval_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub prune_fraction: f64,
    pub candidates: Vec<EvalReport>,
    pub selected: usize,
    pub active_before: usize,
    pub active_after: usize,
    pub sparsity_after: f64,
    pub sparsity_ok: bool,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub mode: Mode,
    pub omega: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
    pub rounds: Vec<RoundTrace>,
    pub final_report: EvalReport,
    pub final_mask_digest: String,
}

impl RunTrace {
    pub fn selected_strategies(&self) -> Vec<String> {
        self.rounds
            .iter()
            .map(|r| {
                r.candidates[r.selected]
                    .strategy
                    .map(|s| s.label())
                    .unwrap_or_else(|| "none".to_string())
            })
            .collect()
    }
}

fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ master.wrapping_mul(0x9e3779b97f4a7c15);
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Seed of the membership split a run with this master seed uses. Post-hoc
/// attack evaluation reconstructs the same member/non-member partition
/// from it.
pub fn split_seed(master: u64) -> u64 {
    derive_seed(master, "split")
}

fn sample_indices(n: usize, want: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.truncate(want.min(n));
    order
}

fn ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

/// A minibatch annotated with membership flags for the adversarial game.
#[derive(Debug, Clone)]
pub struct FlaggedBatch {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub member_flags: Vec<bool>,
}

impl FlaggedBatch {
    fn validate(&self, n_features: usize) -> Result<()> {
        if self.member_flags.len() != self.labels.len()
            || self.features.len() != self.labels.len() * n_features
        {
            return Err(Error::MissingMembershipFlags);
        }
        if !self.member_flags.iter().any(|&m| m) || self.member_flags.iter().all(|&m| m) {
            return Err(Error::MissingMembershipFlags);
        }
        Ok(())
    }
}

/// One adversarial-training step: the adversary ascends its membership
/// gain on the batch, then the target descends the task loss plus beta
/// times the adversary's (mean per-sample) gain. Masked positions stay
/// zero; the adversary sees the target's softmax outputs and labels, as a
/// black-box attacker does.
pub fn adversarial_train_step(
    model: &mut TargetModel,
    adversary: &mut AttackerModel,
    batch: &FlaggedBatch,
    beta: f64,
    target_optimizer: &mut Optimizer,
    adversary_optimizer: &mut Optimizer,
) -> Result<()> {
    batch.validate(model.n_features())?;
    let classes = model.class_count();
    let member_rows: Vec<usize> = (0..batch.labels.len())
        .filter(|&i| batch.member_flags[i])
        .collect();
    let nonmember_rows: Vec<usize> = (0..batch.labels.len())
        .filter(|&i| !batch.member_flags[i])
        .collect();
    let d = model.n_features();
    let gather = |rows: &[usize]| -> (Vec<f64>, Vec<usize>) {
        let mut features = Vec::with_capacity(rows.len() * d);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(&batch.features[r * d..(r + 1) * d]);
            labels.push(batch.labels[r]);
        }
        (features, labels)
    };
    let (member_features, member_labels) = gather(&member_rows);
    let (nonmember_features, nonmember_labels) = gather(&nonmember_rows);

    let mut graph = Graph::new();
    let x_members = graph.input("x_members");
    let x_nonmembers = graph.input("x_nonmembers");
    let target_params = mlp_param_nodes(&mut graph, model.weights(), model.biases(), "t.");
    let member_logits = wire_mlp_from_params(&mut graph, &target_params, x_members);
    let nonmember_logits = wire_mlp_from_params(&mut graph, &target_params, x_nonmembers);
    let member_probs = graph.softmax(member_logits);
    let nonmember_probs = graph.softmax(nonmember_logits);
    let all_probs = graph.concat_rows(&[member_probs, nonmember_probs]);
    let onehots = graph.input("onehots");
    let adversary_logit = adversary.wire_into_graph(&mut graph, &[all_probs, onehots], "adv.")?;
    let flags = graph.input("flags");
    let adversary_loss = graph.bce_with_logits(adversary_logit, flags);
    let member_labels_node = graph.input("y_members");
    let task_loss = graph.cross_entropy(member_logits, member_labels_node);
    // Gain of the adversary is the negated binary cross-entropy; the
    // target minimizes task loss + beta * gain.
    let gain = graph.scale(adversary_loss, -1.0);
    let weighted_gain = graph.scale(gain, beta);
    let objective = graph.add(task_loss, weighted_gain);

    let mut onehot_block = vec![0.0; batch.labels.len() * classes];
    for (row, &label) in member_labels.iter().chain(&nonmember_labels).enumerate() {
        onehot_block[row * classes + label] = 1.0;
    }
    let mut flag_block = vec![1.0; member_rows.len()];
    flag_block.extend(vec![0.0; nonmember_rows.len()]);

    let mut inputs = BTreeMap::new();
    inputs.insert(
        "x_members".to_string(),
        Tensor::new(vec![member_rows.len(), d], member_features)?,
    );
    inputs.insert(
        "x_nonmembers".to_string(),
        Tensor::new(vec![nonmember_rows.len(), d], nonmember_features)?,
    );
    inputs.insert(
        "onehots".to_string(),
        Tensor::new(vec![batch.labels.len(), classes], onehot_block)?,
    );
    inputs.insert("flags".to_string(), Tensor::vector(flag_block));
    inputs.insert("y_members".to_string(), label_tensor(&member_labels));

    // Inner ascent: maximize the gain, i.e. minimize the adversary's BCE.
    graph.forward(adversary_loss, &inputs)?;
    graph.backward(adversary_loss)?;
    step_prefixed(&mut graph, adversary_optimizer, "adv.")?;

    // Outer descent for the target against the updated adversary.
    graph.forward(objective, &inputs)?;
    graph.backward(objective)?;
    step_masked(
        &mut graph,
        target_optimizer,
        model.mask(),
        "t.",
        model.weights().len(),
    )?;

    let (weights, biases) = unwire_params(&graph, "t.", model.weights().len());
    model.replace_params(weights, biases)?;
    adversary.unwire_from_graph(&graph, "adv.");
    Ok(())
}

fn step_prefixed(graph: &mut Graph, optimizer: &mut Optimizer, prefix: &str) -> Result<()> {
    let mut params = graph.params_mut();
    let mut slots: Vec<ParamSlot<'_>> = params
        .iter_mut()
        .filter(|(name, _)| name.starts_with(prefix))
        .map(|(name, tensor)| ParamSlot {
            name,
            tensor,
            mask: None,
        })
        .collect();
    optimizer.step(&mut slots)
}

/// Adversarially train the target for `iterations` steps: members drawn
/// from the training set, non-members from the attacker-known held-out
/// half (the defender plays both sides of the game with data it owns).
#[allow(clippy::too_many_arguments)]
fn adversarial_train_rounds(
    model: &mut TargetModel,
    adversary: &mut AttackerModel,
    adversary_optimizer: &mut Optimizer,
    train: &LabeledDataset,
    reference: &LabeledDataset,
    iterations: usize,
    cfg: &RunConfig,
    seed: u64,
) -> Result<()> {
    let mut target_optimizer = Optimizer::new(OptimizerConfig::sgd(cfg.train_learning_rate));
    let mut member_sampler = crate::model::BatchSampler::new(train.len(), cfg.batch_size, seed);
    let mut nonmember_sampler = crate::model::BatchSampler::new(
        reference.len(),
        cfg.batch_size,
        derive_seed(seed, "reference"),
    );
    for _ in 0..iterations {
        let member_idx = member_sampler.next_batch();
        let nonmember_idx = nonmember_sampler.next_batch();
        let mut features = train.gather_features(&member_idx);
        features.extend(reference.gather_features(&nonmember_idx));
        let mut labels = train.gather_labels(&member_idx);
        labels.extend(reference.gather_labels(&nonmember_idx));
        let mut member_flags = vec![true; member_idx.len()];
        member_flags.extend(vec![false; nonmember_idx.len()]);
        adversarial_train_step(
            model,
            adversary,
            &FlaggedBatch {
                features,
                labels,
                member_flags,
            },
            cfg.beta,
            &mut target_optimizer,
            adversary_optimizer,
        )?;
    }
    Ok(())
}

/// Train the round's simulated attackers and score one candidate.
#[allow(clippy::too_many_arguments)]
fn evaluate_candidate(
    candidate: usize,
    strategy: Option<UpdateStrategy>,
    model: &TargetModel,
    parents: &RoundAttackers,
    split: &MembershipSplit,
    test_data: &LabeledDataset,
    cfg: &RunConfig,
    seed: u64,
) -> Result<EvalReport> {
    let task_acc_pct = model.task_accuracy(test_data)? * 100.0;
    let mia_b = parents
        .black_box
        .as_ref()
        .map(|parent| -> Result<f64> {
            let tuned = finetune_attacker(
                parent,
                model,
                split,
                cfg.attacker.finetune_epochs,
                &cfg.attacker,
                derive_seed(seed, "ft_b"),
            )?;
            Ok(mia_accuracy(&tuned, model, split, derive_seed(seed, "eval_b"))? * 100.0)
        })
        .transpose()?;
    let mia_w = parents
        .white_box
        .as_ref()
        .map(|parent| -> Result<f64> {
            let tuned = finetune_attacker(
                parent,
                model,
                split,
                cfg.attacker.finetune_epochs,
                &cfg.attacker,
                derive_seed(seed, "ft_w"),
            )?;
            Ok(mia_accuracy(&tuned, model, split, derive_seed(seed, "eval_w"))? * 100.0)
        })
        .transpose()?;
    EvalReport::score(
        candidate,
        strategy,
        task_acc_pct,
        mia_b,
        mia_w,
        cfg.lambda,
        cfg.alpha,
        model.active_fraction(),
    )
}

struct RoundAttackers {
    black_box: Option<AttackerModel>,
    white_box: Option<AttackerModel>,
}

fn train_round_attackers(
    model: &TargetModel,
    split: &MembershipSplit,
    cfg: &RunConfig,
    seed: u64,
) -> Result<RoundAttackers> {
    let black_box = if cfg.mode.uses_black_box() {
        Some(train_attacker(
            AttackKind::BlackBox,
            model,
            split,
            &cfg.attacker,
            derive_seed(seed, "attacker_b"),
        )?)
    } else {
        None
    };
    let white_box = if cfg.mode.uses_white_box() {
        Some(train_attacker(
            AttackKind::WhiteBox,
            model,
            split,
            &cfg.attacker,
            derive_seed(seed, "attacker_w"),
        )?)
    } else {
        None
    };
    Ok(RoundAttackers {
        black_box,
        white_box,
    })
}

/// Run the full compression loop and return the final model plus the
/// per-round trace.
pub fn run_safecompress(
    config: &RunConfig,
    train_data: &LabeledDataset,
    test_data: &LabeledDataset,
) -> Result<(TargetModel, RunTrace)> {
    config.validate()?;
    if train_data.is_empty() || test_data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let split = make_split(train_data, test_data, split_seed(config.seed))?;
    let mut dims = vec![train_data.n_features()];
    dims.extend_from_slice(&config.hidden_dims);
    dims.push(train_data.class_count());
    let mut model = build_mlp(&dims, config.omega, derive_seed(config.seed, "init"))?;

    let mut adversary = if config.adversarial_training {
        Some(AttackerModel::new(
            AttackKind::BlackBox,
            model.class_count(),
            crate::attack::wbox_grad_dim(&model),
            derive_seed(config.seed, "adversary"),
        ))
    } else {
        None
    };
    let mut adversary_optimizer =
        Optimizer::new(OptimizerConfig::adam(config.attacker.learning_rate));

    let mut rounds = Vec::with_capacity(config.total_rounds);
    let mut final_report: Option<EvalReport> = None;
    for round in 0..config.total_rounds {
        let round_seed = derive_seed(config.seed, &format!("round{round}"));
        let result = run_round(
            round,
            round_seed,
            config,
            &mut model,
            &mut adversary,
            &mut adversary_optimizer,
            &split,
            train_data,
            test_data,
        )
        .map_err(|e| e.in_round(round))?;
        final_report = Some(result.candidates[result.selected].clone());
        rounds.push(result);
    }

    let trace = RunTrace {
        mode: config.mode,
        omega: config.omega,
        lambda: config.lambda,
        alpha: config.alpha,
        seed: config.seed,
        rounds,
        final_report: final_report.expect("at least one round"),
        final_mask_digest: format!("{:016x}", model.mask_digest()),
    };
    Ok((model, trace))
}

#[allow(clippy::too_many_arguments)]
fn run_round(
    round: usize,
    round_seed: u64,
    config: &RunConfig,
    model: &mut TargetModel,
    adversary: &mut Option<AttackerModel>,
    adversary_optimizer: &mut Optimizer,
    split: &MembershipSplit,
    train_data: &LabeledDataset,
    test_data: &LabeledDataset,
) -> Result<RoundTrace> {
    let active_before = model.mask().active_count();

    // Stage 2 training of the carried model.
    let t_train = Instant::now();
    match adversary {
        Some(adversary) => adversarial_train_rounds(
            model,
            adversary,
            adversary_optimizer,
            train_data,
            &split.known_test,
            config.iterations_per_round,
            config,
            derive_seed(round_seed, "train"),
        )?,
        None => model.train_rounds(
            train_data,
            &TrainOptions {
                iterations: config.iterations_per_round,
                batch_size: config.batch_size,
                optimizer: OptimizerConfig::sgd(config.train_learning_rate),
                seed: derive_seed(round_seed, "train"),
            },
        )?,
    }
    let train_ms = ms(t_train);

    // Branch 1: four candidate topologies, fine-tuned.
    let t_update = Instant::now();
    let prune_fraction = config
        .prune_schedule
        .fraction_at(round, config.total_rounds);
    let growth_idx = sample_indices(
        train_data.len(),
        config.batch_size.max(64),
        derive_seed(round_seed, "growth"),
    );
    let growth_features = train_data.gather_features(&growth_idx);
    let growth_labels = train_data.gather_labels(&growth_idx);

    let candidates: Vec<TargetModel> = UpdateStrategy::all()
        .par_iter()
        .enumerate()
        .map(|(i, &strategy)| -> Result<TargetModel> {
            let mut candidate = model.sparse_update(
                strategy,
                prune_fraction,
                config.threshold_tau,
                &growth_features,
                &growth_labels,
                derive_seed(round_seed, &format!("update{i}")),
            )?;
            candidate.fine_tune(
                train_data,
                &config.fine_tune,
                derive_seed(round_seed, &format!("finetune{i}")),
            )?;
            Ok(candidate)
        })
        .collect::<Result<Vec<_>>>()?;
    let update_ms = ms(t_update);

    // Branch 2: simulate this round's attackers against the carried model.
    let t_attack = Instant::now();
    let parents = train_round_attackers(model, split, config, round_seed)?;
    let attack_ms = ms(t_attack);

    // Stage 3: safety testing and selection.
    let t_eval = Instant::now();
    let reports: Vec<EvalReport> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, candidate)| {
            evaluate_candidate(
                i,
                Some(UpdateStrategy::all()[i]),
                candidate,
                &parents,
                split,
                test_data,
                config,
                derive_seed(round_seed, &format!("candidate{i}")),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let selected = select_best(&reports)?;
    let eval_ms = ms(t_eval);

    *model = candidates
        .into_iter()
        .nth(selected)
        .expect("selected index");
    let active_after = model.mask().active_count();
    let sparsity_after = model.active_fraction();
    let sparsity_ok = active_after == active_before && active_after <= model.mask().active_cap();
    debug_assert!(sparsity_ok);

    Ok(RoundTrace {
        round,
        prune_fraction,
        candidates: reports,
        selected,
        active_before,
        active_after,
        sparsity_after,
        sparsity_ok,
        timings: StageTimings {
            train_ms,
            update_ms,
            attack_ms,
            eval_ms,
        },
    })
}

/// The pretrain -> one-shot magnitude prune -> fine-tune baseline,
/// evaluated with the same attacker battery as the compression loop.
pub fn run_baseline_prune_finetune(
    config: &RunConfig,
    train_data: &LabeledDataset,
    test_data: &LabeledDataset,
) -> Result<(TargetModel, RunTrace)> {
    config.validate()?;
    if train_data.is_empty() || test_data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let split = make_split(train_data, test_data, split_seed(config.seed))?;
    let mut dims = vec![train_data.n_features()];
    dims.extend_from_slice(&config.hidden_dims);
    dims.push(train_data.class_count());

    // Dense pretraining with the same total step budget as the loop.
    let mut model = build_mlp(&dims, 1.0, derive_seed(config.seed, "init"))?;
    model.train_rounds(
        train_data,
        &TrainOptions {
            iterations: config.total_rounds * config.iterations_per_round,
            batch_size: config.batch_size,
            optimizer: OptimizerConfig::sgd(config.train_learning_rate),
            seed: derive_seed(config.seed, "pretrain"),
        },
    )?;

    model.magnitude_prune_global(config.omega)?;
    model.fine_tune(
        train_data,
        &config.baseline_fine_tune,
        derive_seed(config.seed, "baseline_finetune"),
    )?;

    let parents =
        train_round_attackers(&model, &split, config, derive_seed(config.seed, "baseline"))?;
    let report = evaluate_candidate(
        0,
        None,
        &model,
        &parents,
        &split,
        test_data,
        config,
        derive_seed(config.seed, "baseline_eval"),
    )?;

    let trace = RunTrace {
        mode: config.mode,
        omega: config.omega,
        lambda: config.lambda,
        alpha: config.alpha,
        seed: config.seed,
        rounds: Vec::new(),
        final_report: report,
        final_mask_digest: format!("{:016x}", model.mask_digest()),
    };
    Ok((model, trace))
}
