//! Simulated membership-inference attackers: dataset splits, black-box
//! and white-box attacker networks, their training protocol, and the
//! gain/accuracy metrics used for safety testing.
//!
//! The attacker knows half of the target's training data and half of the
//! held-out data; those known halves are its training set (members vs
//! non-members). The unknown halves are reserved for evaluation and are
//! never read during attacker training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::{one_hot, Graph, NodeId};
use crate::model::TargetModel;
use crate::optim::{Optimizer, OptimizerConfig, ParamSlot};
use crate::tensor::Tensor;

/// Clamp bound applied to attacker probabilities inside the gain.
pub const GAIN_PROB_CLAMP: f64 = 1e-12;

const STREAM_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    BlackBox,
    WhiteBox,
}

/// Four disjoint views per the attacker-knowledge split.
#[derive(Debug, Clone)]
pub struct MembershipSplit {
    pub known_train: LabeledDataset,
    pub known_test: LabeledDataset,
    pub unknown_train: LabeledDataset,
    pub unknown_test: LabeledDataset,
    pub known_train_idx: Vec<usize>,
    pub known_test_idx: Vec<usize>,
    pub unknown_train_idx: Vec<usize>,
    pub unknown_test_idx: Vec<usize>,
}

/// Seeded 50/50 partition of the target's training data and of the
/// held-out data.
pub fn make_split(
    train: &LabeledDataset,
    test: &LabeledDataset,
    seed: u64,
) -> Result<MembershipSplit> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let halve = |n: usize, rng: &mut ChaCha8Rng| -> (Vec<usize>, Vec<usize>) {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        (order[..n / 2].to_vec(), order[n / 2..].to_vec())
    };
    let (known_train_idx, unknown_train_idx) = halve(train.len(), &mut rng);
    let (known_test_idx, unknown_test_idx) = halve(test.len(), &mut rng);
    Ok(MembershipSplit {
        known_train: train.subset(&known_train_idx),
        known_test: test.subset(&known_test_idx),
        unknown_train: train.subset(&unknown_train_idx),
        unknown_test: test.subset(&unknown_test_idx),
        known_train_idx,
        known_test_idx,
        unknown_train_idx,
        unknown_test_idx,
    })
}

/// Attacker training hyperparameters (Adam, balanced minibatches).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackerConfig {
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        AttackerConfig {
            epochs: 40,
            finetune_epochs: 5,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

/// One small perceptron block (affine layers with ReLU between).
#[derive(Debug, Clone, PartialEq)]
struct Subnet {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl Subnet {
    fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let dist = Normal::new(0.0, 1.0 / (n_in as f64).sqrt()).expect("valid std");
            let values: Vec<f64> = (0..n_in * n_out).map(|_| dist.sample(rng)).collect();
            weights.push(Tensor::new(vec![n_in, n_out], values).expect("sized init"));
            biases.push(Tensor::zeros(vec![n_out]));
        }
        Subnet { weights, biases }
    }

    /// Plain forward pass; `relu_last` controls the output activation.
    fn forward(&self, input: &[f64], rows: usize, relu_last: bool) -> Vec<f64> {
        let mut h = input.to_vec();
        let layers = self.weights.len();
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
            let mut out = vec![0.0; rows * n_out];
            for r in 0..rows {
                let xrow = &h[r * n_in..(r + 1) * n_in];
                let orow = &mut out[r * n_out..(r + 1) * n_out];
                orow.copy_from_slice(b.values());
                for (p, &x) in xrow.iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    let wrow = &w.values()[p * n_out..(p + 1) * n_out];
                    for j in 0..n_out {
                        orow[j] += x * wrow[j];
                    }
                }
                if k + 1 < layers || relu_last {
                    for v in orow.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
            }
            h = out;
        }
        h
    }
}

/// Membership classifier: per-input stream subnetworks feeding a fusion
/// subnetwork that emits one probability in (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct AttackerModel {
    kind: AttackKind,
    streams: Vec<Subnet>,
    fusion: Subnet,
    stream_dims: Vec<usize>,
}

/// Per-sample attacker inputs for a batch, one matrix per stream.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    streams: Vec<Vec<f64>>,
    dims: Vec<usize>,
    rows: usize,
}

impl FeatureBatch {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

impl AttackerModel {
    /// Fresh attacker for a target with the given class count and, for
    /// white-box attackers, flattened final-layer gradient width.
    pub fn new(kind: AttackKind, classes: usize, grad_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stream_dims: Vec<usize> = match kind {
            AttackKind::BlackBox => vec![classes, classes],
            AttackKind::WhiteBox => vec![classes, 1, grad_dim, classes],
        };
        let streams = stream_dims
            .iter()
            .map(|&d| Subnet::new(&[d, STREAM_WIDTH, STREAM_WIDTH], &mut rng))
            .collect::<Vec<_>>();
        let fusion = Subnet::new(&[streams.len() * STREAM_WIDTH, STREAM_WIDTH, 1], &mut rng);
        AttackerModel {
            kind,
            streams,
            fusion,
            stream_dims,
        }
    }

    pub fn kind(&self) -> AttackKind {
        self.kind
    }

    /// All parameters flattened, for bit-level comparisons.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for net in self.streams.iter().chain(std::iter::once(&self.fusion)) {
            for t in net.weights.iter().chain(&net.biases) {
                out.extend_from_slice(t.values());
            }
        }
        out
    }

    /// Stream features for selected samples of a dataset under a target.
    pub fn extract_features(
        &self,
        target: &TargetModel,
        data: &LabeledDataset,
        indices: &[usize],
    ) -> Result<FeatureBatch> {
        let features = data.gather_features(indices);
        let labels = data.gather_labels(indices);
        extract_feature_batch(self.kind, target, &features, &labels)
    }

    /// Membership probabilities for a feature batch.
    pub fn membership_probs(&self, batch: &FeatureBatch) -> Vec<f64> {
        let rows = batch.rows;
        let total = self.streams.len() * STREAM_WIDTH;
        let mut fused = vec![0.0; rows * total];
        for (s, net) in self.streams.iter().enumerate() {
            let out = net.forward(&batch.streams[s], rows, true);
            for r in 0..rows {
                fused[r * total + s * STREAM_WIDTH..r * total + (s + 1) * STREAM_WIDTH]
                    .copy_from_slice(&out[r * STREAM_WIDTH..(r + 1) * STREAM_WIDTH]);
            }
        }
        let logits = self.fusion.forward(&fused, rows, false);
        logits
            .iter()
            .map(|&z| {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            })
            .collect()
    }

    /// Wire this attacker into an existing graph, one input node per
    /// stream, returning the pre-sigmoid logit node. Used when the
    /// attacker must sit downstream of a target model's outputs.
    pub fn wire_into_graph(
        &self,
        graph: &mut Graph,
        stream_inputs: &[NodeId],
        prefix: &str,
    ) -> Result<NodeId> {
        if stream_inputs.len() != self.streams.len() {
            return Err(Error::ShapeMismatch {
                op: "attacker_wire",
                detail: format!(
                    "{} stream inputs for {} streams",
                    stream_inputs.len(),
                    self.streams.len()
                ),
            });
        }
        let outputs: Vec<NodeId> = self
            .streams
            .iter()
            .zip(stream_inputs)
            .enumerate()
            .map(|(s, (net, &input))| {
                wire_subnet(graph, net, input, &format!("{prefix}s{s}."), true)
            })
            .collect();
        let fused = graph.concat_cols(&outputs);
        Ok(wire_subnet(
            graph,
            &self.fusion,
            fused,
            &format!("{prefix}f."),
            false,
        ))
    }

    /// Copy parameters back after training inside an external graph.
    pub fn unwire_from_graph(&mut self, graph: &Graph, prefix: &str) {
        for s in 0..self.streams.len() {
            let sub_prefix = format!("{prefix}s{s}.");
            unwire_subnet(graph, &mut self.streams[s], &sub_prefix);
        }
        unwire_subnet(graph, &mut self.fusion, &format!("{prefix}f."));
    }

    /// Train on already-extracted member/non-member features with strictly
    /// balanced minibatches.
    fn fit(
        &mut self,
        members: &FeatureBatch,
        nonmembers: &FeatureBatch,
        epochs: usize,
        cfg: &AttackerConfig,
        seed: u64,
    ) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        let mut graph = Graph::new();
        let mut stream_outputs = Vec::new();
        for s in 0..self.streams.len() {
            let id = graph.input(&format!("s{s}"));
            stream_outputs.push(wire_subnet(
                &mut graph,
                &self.streams[s],
                id,
                &format!("a.s{s}."),
                true,
            ));
        }
        let fused = graph.concat_cols(&stream_outputs);
        let logit = wire_subnet(&mut graph, &self.fusion, fused, "a.f.", false);
        let targets = graph.input("flags");
        let loss = graph.bce_with_logits(logit, targets);

        let mut optimizer = Optimizer::new(OptimizerConfig::adam(cfg.learning_rate));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = (cfg.batch_size / 2).max(1);
        for _ in 0..epochs {
            for (member_rows, nonmember_rows) in
                balanced_batches(members.rows, nonmembers.rows, half, &mut rng)
            {
                let rows = member_rows.len() + nonmember_rows.len();
                let mut inputs = BTreeMap::new();
                for s in 0..self.streams.len() {
                    let dim = members.dims[s];
                    let mut block = Vec::with_capacity(rows * dim);
                    for &r in &member_rows {
                        block.extend_from_slice(&members.streams[s][r * dim..(r + 1) * dim]);
                    }
                    for &r in &nonmember_rows {
                        block.extend_from_slice(&nonmembers.streams[s][r * dim..(r + 1) * dim]);
                    }
                    inputs.insert(format!("s{s}"), Tensor::new(vec![rows, dim], block)?);
                }
                let mut flags = vec![1.0; member_rows.len()];
                flags.extend(vec![0.0; nonmember_rows.len()]);
                inputs.insert("flags".to_string(), Tensor::vector(flags));

                graph.forward(loss, &inputs)?;
                graph.backward(loss)?;
                let mut params = graph.params_mut();
                let mut slots: Vec<ParamSlot<'_>> = params
                    .iter_mut()
                    .map(|(name, tensor)| ParamSlot {
                        name,
                        tensor,
                        mask: None,
                    })
                    .collect();
                optimizer.step(&mut slots)?;
            }
        }

        for s in 0..self.streams.len() {
            let prefix = format!("a.s{s}.");
            unwire_subnet(&graph, &mut self.streams[s], &prefix);
        }
        unwire_subnet(&graph, &mut self.fusion, "a.f.");
        Ok(())
    }
}

fn wire_subnet(
    graph: &mut Graph,
    net: &Subnet,
    input: NodeId,
    prefix: &str,
    relu_last: bool,
) -> NodeId {
    let mut h = input;
    let layers = net.weights.len();
    for k in 0..layers {
        let w = graph.param(&format!("{prefix}w{k}"), net.weights[k].clone());
        let b = graph.param(&format!("{prefix}b{k}"), net.biases[k].clone());
        let a = graph.affine(h, w, b);
        h = if k + 1 < layers || relu_last {
            graph.relu(a)
        } else {
            a
        };
    }
    h
}

fn unwire_subnet(graph: &Graph, net: &mut Subnet, prefix: &str) {
    for k in 0..net.weights.len() {
        let mut w = graph
            .param_value(&format!("{prefix}w{k}"))
            .expect("wired weight")
            .clone();
        w.clear_grad();
        let mut b = graph
            .param_value(&format!("{prefix}b{k}"))
            .expect("wired bias")
            .clone();
        b.clear_grad();
        net.weights[k] = w;
        net.biases[k] = b;
    }
}

/// Strictly balanced batch index pairs: every batch holds `half` member
/// rows and `half` non-member rows.
pub(crate) fn balanced_batches(
    n_members: usize,
    n_nonmembers: usize,
    half: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut member_order: Vec<usize> = (0..n_members).collect();
    let mut nonmember_order: Vec<usize> = (0..n_nonmembers).collect();
    member_order.shuffle(rng);
    nonmember_order.shuffle(rng);
    let pairs = n_members.min(n_nonmembers);
    let batches = pairs / half;
    (0..batches)
        .map(|i| {
            (
                member_order[i * half..(i + 1) * half].to_vec(),
                nonmember_order[i * half..(i + 1) * half].to_vec(),
            )
        })
        .collect()
}

/// Black-box view of one sample: softmax prediction vector and one-hot
/// label.
pub fn extract_bbox_features(
    target: &TargetModel,
    sample: &[f64],
    label: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let classes = target.class_count();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let probs = target.predict_probs(sample, 1);
    Ok((probs, one_hot(label, classes)))
}

/// White-box view of one sample: prediction vector, per-sample loss, the
/// flattened gradient of that loss w.r.t. the final affine layer's
/// weights, and the one-hot label.
pub fn extract_wbox_features(
    target: &TargetModel,
    sample: &[f64],
    label: usize,
) -> Result<(Vec<f64>, f64, Vec<f64>, Vec<f64>)> {
    let classes = target.class_count();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let detail = target.forward_detail(sample, 1);
    let probs = detail.probs.clone();
    let loss = -probs[label].max(1e-300).ln();
    // d(-log p_y)/dW_last[p][j] = h_p * (probs_j - onehot_j)
    let n_prev = detail.last_hidden.len();
    let mut grad = vec![0.0; n_prev * classes];
    for p in 0..n_prev {
        let h = detail.last_hidden[p];
        for j in 0..classes {
            let delta = probs[j] - if j == label { 1.0 } else { 0.0 };
            grad[p * classes + j] = h * delta;
        }
    }
    Ok((probs, loss, grad, one_hot(label, classes)))
}

/// Stream matrices for a whole batch under a target model.
pub fn extract_feature_batch(
    kind: AttackKind,
    target: &TargetModel,
    features: &[f64],
    labels: &[usize],
) -> Result<FeatureBatch> {
    let rows = labels.len();
    let classes = target.class_count();
    let detail = target.forward_detail(features, rows);
    let mut onehots = vec![0.0; rows * classes];
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        onehots[r * classes + label] = 1.0;
    }
    match kind {
        AttackKind::BlackBox => Ok(FeatureBatch {
            streams: vec![detail.probs, onehots],
            dims: vec![classes, classes],
            rows,
        }),
        AttackKind::WhiteBox => {
            let n_prev = detail.last_hidden.len() / rows;
            let mut losses = vec![0.0; rows];
            let mut grads = vec![0.0; rows * n_prev * classes];
            for (r, &label) in labels.iter().enumerate() {
                let probs = &detail.probs[r * classes..(r + 1) * classes];
                losses[r] = -probs[label].max(1e-300).ln();
                let hidden = &detail.last_hidden[r * n_prev..(r + 1) * n_prev];
                let grow = &mut grads[r * n_prev * classes..(r + 1) * n_prev * classes];
                for p in 0..n_prev {
                    for j in 0..classes {
                        let delta = probs[j] - if j == label { 1.0 } else { 0.0 };
                        grow[p * classes + j] = hidden[p] * delta;
                    }
                }
            }
            Ok(FeatureBatch {
                streams: vec![detail.probs, losses, grads, onehots],
                dims: vec![classes, 1, n_prev * classes, classes],
                rows,
            })
        }
    }
}

/// Expected log-likelihood gain of an attacker from raw probabilities;
/// outputs are clamped away from {0,1} so the sum stays finite.
pub fn mia_gain_from_probs(member_probs: &[f64], nonmember_probs: &[f64]) -> f64 {
    let clamp = |p: f64| p.clamp(GAIN_PROB_CLAMP, 1.0 - GAIN_PROB_CLAMP);
    member_probs.iter().map(|&p| clamp(p).ln()).sum::<f64>()
        + nonmember_probs
            .iter()
            .map(|&p| (1.0 - clamp(p)).ln())
            .sum::<f64>()
}

/// Gain of an attacker against a target over explicit member and
/// non-member sets.
pub fn mia_gain(
    attacker: &AttackerModel,
    target: &TargetModel,
    members: &LabeledDataset,
    nonmembers: &LabeledDataset,
) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let all: Vec<usize> = (0..members.len()).collect();
    let member_probs =
        attacker.membership_probs(&attacker.extract_features(target, members, &all)?);
    let all: Vec<usize> = (0..nonmembers.len()).collect();
    let nonmember_probs =
        attacker.membership_probs(&attacker.extract_features(target, nonmembers, &all)?);
    Ok(mia_gain_from_probs(&member_probs, &nonmember_probs))
}

/// Train a simulated attacker against a target using only the known
/// halves of the split: members are known training samples, non-members
/// are known held-out samples.
pub fn train_attacker(
    kind: AttackKind,
    target: &TargetModel,
    split: &MembershipSplit,
    cfg: &AttackerConfig,
    seed: u64,
) -> Result<AttackerModel> {
    if split.known_train.is_empty() {
        return Err(Error::EmptySplitHalf("known_train"));
    }
    if split.known_test.is_empty() {
        return Err(Error::EmptySplitHalf("known_test"));
    }
    let mut attacker = AttackerModel::new(kind, target.class_count(), wbox_grad_dim(target), seed);
    let members = attacker.extract_features(
        target,
        &split.known_train,
        &(0..split.known_train.len()).collect::<Vec<_>>(),
    )?;
    let nonmembers = attacker.extract_features(
        target,
        &split.known_test,
        &(0..split.known_test.len()).collect::<Vec<_>>(),
    )?;
    attacker.fit(&members, &nonmembers, cfg.epochs, cfg, seed ^ 0xa77ac4e2)?;
    Ok(attacker)
}

/// Width of the flattened final-affine-layer gradient a white-box
/// attacker consumes.
pub fn wbox_grad_dim(target: &TargetModel) -> usize {
    let dims = target.layer_dims();
    dims[dims.len() - 2] * dims[dims.len() - 1]
}

/// Adapt a trained attacker to a candidate target for a few epochs,
/// returning an independent copy; the parent attacker is untouched.
pub fn finetune_attacker(
    attacker: &AttackerModel,
    candidate: &TargetModel,
    split: &MembershipSplit,
    epochs: usize,
    cfg: &AttackerConfig,
    seed: u64,
) -> Result<AttackerModel> {
    let mut tuned = attacker.clone();
    if epochs == 0 {
        return Ok(tuned);
    }
    let members = tuned.extract_features(
        candidate,
        &split.known_train,
        &(0..split.known_train.len()).collect::<Vec<_>>(),
    )?;
    let nonmembers = tuned.extract_features(
        candidate,
        &split.known_test,
        &(0..split.known_test.len()).collect::<Vec<_>>(),
    )?;
    tuned.fit(&members, &nonmembers, epochs, cfg, seed ^ 0x0f17e701)?;
    Ok(tuned)
}

/// Threshold-0.5 attack accuracy from raw probabilities over an exactly
/// balanced member/non-member evaluation set.
pub fn mia_accuracy_from_probs(member_probs: &[f64], nonmember_probs: &[f64]) -> f64 {
    debug_assert_eq!(member_probs.len(), nonmember_probs.len());
    let hits = member_probs.iter().filter(|&&p| p > 0.5).count()
        + nonmember_probs.iter().filter(|&&p| p <= 0.5).count();
    hits as f64 / (member_probs.len() + nonmember_probs.len()) as f64
}

/// Attack accuracy on the unknown halves: the unknown held-out samples as
/// non-members plus an equal-size seeded subsample of unknown training
/// samples as members.
pub fn mia_accuracy(
    attacker: &AttackerModel,
    target: &TargetModel,
    split: &MembershipSplit,
    seed: u64,
) -> Result<f64> {
    if split.unknown_train.is_empty() {
        return Err(Error::EmptySplitHalf("unknown_train"));
    }
    if split.unknown_test.is_empty() {
        return Err(Error::EmptySplitHalf("unknown_test"));
    }
    let eval_n = split.unknown_test.len().min(split.unknown_train.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut member_idx: Vec<usize> = (0..split.unknown_train.len()).collect();
    member_idx.shuffle(&mut rng);
    member_idx.truncate(eval_n);

    let nonmember_idx: Vec<usize> = (0..eval_n).collect();

    let member_probs = attacker.membership_probs(&attacker.extract_features(
        target,
        &split.unknown_train,
        &member_idx,
    )?);
    let nonmember_probs = attacker.membership_probs(&attacker.extract_features(
        target,
        &split.unknown_test,
        &nonmember_idx,
    )?);
    Ok(mia_accuracy_from_probs(&member_probs, &nonmember_probs))
}
