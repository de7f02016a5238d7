//! Masked feed-forward classifiers: construction, training, evaluation,
//! and the dynamic sparse update that derives candidate topologies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::{label_tensor, Graph, NodeId};
use crate::optim::{Optimizer, OptimizerConfig, ParamSlot};
use crate::sparse::{er_init, GrowKind, PruneKind, SparseMask, UpdateStrategy};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD_TAU: f64 = 1e-3;

/// The compressed target classifier: dense biases, masked weights.
#[derive(Debug, Clone)]
pub struct TargetModel {
    layer_dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    mask: SparseMask,
    iterations_done: u64,
}

/// One minibatch-training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

/// Candidate recovery pass after a sparse update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 5e-4,
        }
    }
}

/// Cycles shuffled full batches over a dataset, reshuffling per epoch.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut sampler = BatchSampler {
            order: (0..n).collect(),
            pos: 0,
            batch: batch.min(n).max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        sampler.reshuffle();
        sampler
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.reshuffle();
        }
        let slice = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        slice
    }
}

/// Create the named parameter nodes of a feed-forward net once, so
/// several forward chains can share them.
pub(crate) fn mlp_param_nodes(
    graph: &mut Graph,
    weights: &[Tensor],
    biases: &[Tensor],
    prefix: &str,
) -> Vec<(NodeId, NodeId)> {
    weights
        .iter()
        .zip(biases)
        .enumerate()
        .map(|(k, (w, b))| {
            (
                graph.param(&format!("{prefix}w{k}"), w.clone()),
                graph.param(&format!("{prefix}b{k}"), b.clone()),
            )
        })
        .collect()
}

/// Wire a forward chain through existing parameter nodes; returns the
/// logits node.
pub(crate) fn wire_mlp_from_params(
    graph: &mut Graph,
    params: &[(NodeId, NodeId)],
    input: NodeId,
) -> NodeId {
    let mut h = input;
    let layers = params.len();
    for (k, &(w, b)) in params.iter().enumerate() {
        let a = graph.affine(h, w, b);
        h = if k + 1 < layers { graph.relu(a) } else { a };
    }
    h
}

pub(crate) fn wire_mlp(
    graph: &mut Graph,
    weights: &[Tensor],
    biases: &[Tensor],
    input: NodeId,
    prefix: &str,
) -> NodeId {
    let params = mlp_param_nodes(graph, weights, biases, prefix);
    wire_mlp_from_params(graph, &params, input)
}

/// Copy a wired net's parameters out of the graph.
pub(crate) fn unwire_params(
    graph: &Graph,
    prefix: &str,
    layers: usize,
) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for k in 0..layers {
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
        weights.push(w);
        biases.push(b);
    }
    (weights, biases)
}

/// Build an ER-initialized masked multi-layer perceptron. Active weights
/// draw from a fan-in-scaled normal; inactive positions are exactly zero.
pub fn build_mlp(layer_dims: &[usize], omega: f64, seed: u64) -> Result<TargetModel> {
    if layer_dims.len() < 2 {
        return Err(Error::Config {
            path: "model.layer_dims".to_string(),
            message: format!("need at least 2 layers, got {:?}", layer_dims),
        });
    }
    let shapes: Vec<(usize, usize)> = layer_dims.windows(2).map(|w| (w[0], w[1])).collect();
    let mask = er_init(&shapes, omega, seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut weights = Vec::with_capacity(shapes.len());
    let mut biases = Vec::with_capacity(shapes.len());
    for (k, &(n_prev, n_cur)) in shapes.iter().enumerate() {
        let dist = Normal::new(0.0, (2.0 / n_prev as f64).sqrt()).expect("valid std");
        let values: Vec<f64> = mask
            .layer(k)
            .iter()
            .map(|&active| if active { dist.sample(&mut rng) } else { 0.0 })
            .collect();
        weights.push(Tensor::new(vec![n_prev, n_cur], values)?);
        biases.push(Tensor::zeros(vec![n_cur]));
    }

    Ok(TargetModel {
        layer_dims: layer_dims.to_vec(),
        weights,
        biases,
        mask,
        iterations_done: 0,
    })
}

impl TargetModel {
    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn class_count(&self) -> usize {
        *self.layer_dims.last().expect("non-empty dims")
    }

    pub fn n_features(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn mask(&self) -> &SparseMask {
        &self.mask
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn iterations_done(&self) -> u64 {
        self.iterations_done
    }

    pub fn active_fraction(&self) -> f64 {
        self.mask.active_fraction()
    }

    pub fn mask_digest(&self) -> u64 {
        self.mask.digest()
    }

    /// Rebuild a model from raw parts (checkpoint loading).
    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
        mask: SparseMask,
        iterations_done: u64,
    ) -> Result<Self> {
        let model = TargetModel {
            layer_dims,
            weights,
            biases,
            mask,
            iterations_done,
        };
        if !model.mask_consistent() {
            return Err(Error::Checkpoint(
                "mask and weights disagree: non-zero weight at inactive position".to_string(),
            ));
        }
        Ok(model)
    }

    /// Every inactive position must hold exactly zero.
    pub fn mask_consistent(&self) -> bool {
        self.weights.iter().enumerate().all(|(k, w)| {
            w.values()
                .iter()
                .zip(self.mask.layer(k))
                .all(|(&v, &active)| active || v == 0.0)
        })
    }

    /// Logits for a flat row-major feature block.
    pub fn logits(&self, features: &[f64], rows: usize) -> Vec<f64> {
        self.forward_detail(features, rows).logits
    }

    /// Softmax prediction rows for a feature block.
    pub fn predict_probs(&self, features: &[f64], rows: usize) -> Vec<f64> {
        self.forward_detail(features, rows).probs
    }

    /// Forward pass keeping the pieces the attackers consume.
    pub fn forward_detail(&self, features: &[f64], rows: usize) -> ForwardDetail {
        let layers = self.weights.len();
        let mut h = features.to_vec();
        let mut h_cols = self.layer_dims[0];
        let mut last_hidden = h.clone();
        for k in 0..layers {
            let (n_prev, n_cur) = (self.layer_dims[k], self.layer_dims[k + 1]);
            debug_assert_eq!(h_cols, n_prev);
            if k == layers - 1 {
                last_hidden = h.clone();
            }
            let w = self.weights[k].values();
            let b = self.biases[k].values();
            let mut out = vec![0.0; rows * n_cur];
            for r in 0..rows {
                let xrow = &h[r * n_prev..(r + 1) * n_prev];
                let orow = &mut out[r * n_cur..(r + 1) * n_cur];
                orow.copy_from_slice(b);
                for (p, &x) in xrow.iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    let wrow = &w[p * n_cur..(p + 1) * n_cur];
                    for j in 0..n_cur {
                        orow[j] += x * wrow[j];
                    }
                }
                if k + 1 < layers {
                    for v in orow.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
            }
            h = out;
            h_cols = n_cur;
        }
        let classes = self.class_count();
        let mut probs = vec![0.0; rows * classes];
        for r in 0..rows {
            let row = &h[r * classes..(r + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &z) in row.iter().enumerate() {
                let e = (z - m).exp();
                probs[r * classes + j] = e;
                sum += e;
            }
            for j in 0..classes {
                probs[r * classes + j] /= sum;
            }
        }
        ForwardDetail {
            logits: h,
            probs,
            last_hidden,
            rows,
            classes,
        }
    }

    /// Fraction of argmax-correct predictions; ties break to the lowest
    /// class index so degenerate models stay deterministic.
    pub fn task_accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let indices: Vec<usize> = (0..data.len()).collect();
        let features = data.gather_features(&indices);
        let detail = self.forward_detail(&features, data.len());
        let classes = self.class_count();
        let mut correct = 0usize;
        for i in 0..data.len() {
            let row = &detail.logits[i * classes..(i + 1) * classes];
            let mut best = 0usize;
            for j in 1..classes {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == data.label(i) {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Train for exactly `iterations` minibatch steps. Masked positions
    /// stay zero through every optimizer step.
    pub fn train_rounds(&mut self, data: &LabeledDataset, opts: &TrainOptions) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if opts.iterations == 0 {
            return Ok(());
        }
        let layers = self.weights.len();
        let mut graph = Graph::new();
        let input = graph.input("x");
        let labels = graph.input("y");
        let logits = wire_mlp(&mut graph, &self.weights, &self.biases, input, "t.");
        let loss = graph.cross_entropy(logits, labels);

        let mut optimizer = Optimizer::new(opts.optimizer);
        let mut sampler = BatchSampler::new(data.len(), opts.batch_size, opts.seed);
        for _ in 0..opts.iterations {
            let batch = sampler.next_batch();
            let mut inputs = std::collections::BTreeMap::new();
            inputs.insert(
                "x".to_string(),
                Tensor::new(
                    vec![batch.len(), data.n_features()],
                    data.gather_features(&batch),
                )?,
            );
            inputs.insert("y".to_string(), label_tensor(&data.gather_labels(&batch)));
            graph.forward(loss, &inputs)?;
            graph.backward(loss)?;
            step_masked(&mut graph, &mut optimizer, &self.mask, "t.", layers)?;
        }

        let (weights, biases) = unwire_params(&graph, "t.", layers);
        self.weights = weights;
        self.biases = biases;
        self.iterations_done += opts.iterations as u64;
        debug_assert!(self.mask_consistent());
        Ok(())
    }

    /// Swap in updated parameters, preserving mask consistency.
    pub fn replace_params(&mut self, weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<()> {
        if weights.len() != self.weights.len() || biases.len() != self.biases.len() {
            return Err(Error::ShapeMismatch {
                op: "replace_params",
                detail: "layer count changed".to_string(),
            });
        }
        self.weights = weights;
        self.biases = biases;
        debug_assert!(self.mask_consistent());
        Ok(())
    }

    /// One optimizer step on an explicit batch; returns the batch loss.
    pub fn train_on_batch(
        &mut self,
        features: &[f64],
        labels: &[usize],
        optimizer: &mut Optimizer,
    ) -> Result<f64> {
        let layers = self.weights.len();
        let mut graph = Graph::new();
        let input = graph.input("x");
        let label_node = graph.input("y");
        let logits = wire_mlp(&mut graph, &self.weights, &self.biases, input, "t.");
        let loss = graph.cross_entropy(logits, label_node);
        let mut inputs = std::collections::BTreeMap::new();
        inputs.insert(
            "x".to_string(),
            Tensor::new(vec![labels.len(), self.layer_dims[0]], features.to_vec())?,
        );
        inputs.insert("y".to_string(), label_tensor(labels));
        let loss_value = graph.forward(loss, &inputs)?.item();
        graph.backward(loss)?;
        step_masked(&mut graph, optimizer, &self.mask, "t.", layers)?;
        let (weights, biases) = unwire_params(&graph, "t.", layers);
        self.weights = weights;
        self.biases = biases;
        self.iterations_done += 1;
        Ok(loss_value)
    }

    /// Recovery training used on each candidate after a sparse update.
    pub fn fine_tune(
        &mut self,
        data: &LabeledDataset,
        cfg: &FineTuneConfig,
        seed: u64,
    ) -> Result<()> {
        let batches_per_epoch = data.len().div_ceil(cfg.batch_size.max(1)).max(1);
        self.train_rounds(
            data,
            &TrainOptions {
                iterations: cfg.epochs * batches_per_epoch,
                batch_size: cfg.batch_size,
                optimizer: OptimizerConfig::adam(cfg.learning_rate),
                seed,
            },
        )
    }

    /// Dense loss gradients for every weight position, inactive ones
    /// included: the mask lives in the (zero) weight values, not in the
    /// gradient flow.
    pub fn growth_gradients(&self, features: &[f64], labels: &[usize]) -> Result<Vec<Vec<f64>>> {
        let rows = labels.len();
        let mut graph = Graph::new();
        let input = graph.input("x");
        let label_node = graph.input("y");
        let logits = wire_mlp(&mut graph, &self.weights, &self.biases, input, "t.");
        let loss = graph.cross_entropy(logits, label_node);
        let mut inputs = std::collections::BTreeMap::new();
        inputs.insert(
            "x".to_string(),
            Tensor::new(vec![rows, self.layer_dims[0]], features.to_vec())?,
        );
        inputs.insert("y".to_string(), label_tensor(labels));
        graph.forward(loss, &inputs)?;
        let grads = graph.backward(loss)?;
        Ok((0..self.weights.len())
            .map(|k| grads[&format!("t.w{k}")].values().to_vec())
            .collect())
    }

    /// One dynamic sparse update: per layer, prune by the strategy's rule,
    /// then grow exactly as many positions back, leaving the global active
    /// count unchanged. Returns an independent candidate.
    pub fn sparse_update(
        &self,
        strategy: UpdateStrategy,
        prune_fraction: f64,
        threshold_tau: f64,
        growth_features: &[f64],
        growth_labels: &[usize],
        seed: u64,
    ) -> Result<TargetModel> {
        let dense_grads = if strategy.grow == GrowKind::Gradient {
            Some(self.growth_gradients(growth_features, growth_labels)?)
        } else {
            None
        };

        let mut candidate = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 0..candidate.weights.len() {
            let active = candidate.mask.layer_active(k);
            let cap = (prune_fraction * active as f64).ceil() as usize;
            let cap = cap.min(active);
            let weights = candidate.weights[k].values_mut();
            let pruned = match strategy.prune {
                PruneKind::Magnitude => {
                    candidate.mask.magnitude_prune(k, weights, cap)?;
                    cap
                }
                PruneKind::Threshold => {
                    candidate
                        .mask
                        .threshold_prune_capped(k, weights, threshold_tau, cap)
                }
            };
            match strategy.grow {
                GrowKind::Gradient => {
                    let grads = &dense_grads.as_ref().expect("computed above")[k];
                    candidate.mask.gradient_grow(k, weights, grads, pruned)?;
                }
                GrowKind::Random => {
                    candidate.mask.random_grow(k, weights, pruned, &mut rng)?;
                }
            }
        }
        debug_assert_eq!(candidate.mask.active_count(), self.mask.active_count());
        debug_assert!(candidate.mask_consistent());
        Ok(candidate)
    }

    /// One-shot global magnitude prune down to the mask cap for `omega`.
    /// Used by the pretrain-prune-finetune baseline.
    pub fn magnitude_prune_global(&mut self, omega: f64) -> Result<()> {
        if !(omega > 0.0 && omega <= 1.0) {
            return Err(Error::InfeasibleOmega {
                omega,
                detail: "target sparsity must lie in (0, 1]".to_string(),
            });
        }
        self.mask.set_target_sparsity(omega);
        let cap = self.mask.active_cap();
        let mut entries: Vec<(f64, usize, usize)> = Vec::new();
        for (k, w) in self.weights.iter().enumerate() {
            for (i, &v) in w.values().iter().enumerate() {
                if self.mask.layer(k)[i] {
                    entries.push((v.abs(), k, i));
                }
            }
        }
        if entries.len() <= cap {
            return Ok(());
        }
        entries.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
        let remove = entries.len() - cap;
        for &(_, k, i) in entries.iter().take(remove) {
            self.mask.layer_mut(k)[i] = false;
            self.weights[k].values_mut()[i] = 0.0;
        }
        Ok(())
    }
}

/// The raw pieces a white-box attacker sees.
pub struct ForwardDetail {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub last_hidden: Vec<f64>,
    pub rows: usize,
    pub classes: usize,
}

/// Optimizer step over a wired net's parameters with mask enforcement on
/// the weight matrices.
pub(crate) fn step_masked(
    graph: &mut Graph,
    optimizer: &mut Optimizer,
    mask: &SparseMask,
    prefix: &str,
    layers: usize,
) -> Result<()> {
    let masks: Vec<Vec<bool>> = (0..layers).map(|k| mask.layer(k).to_vec()).collect();
    let mut params = graph.params_mut();
    let mut slots: Vec<ParamSlot<'_>> = Vec::with_capacity(layers * 2);
    for (name, tensor) in params.iter_mut() {
        if let Some(rest) = name.strip_prefix(prefix) {
            let mask_ref = rest
                .strip_prefix('w')
                .and_then(|idx| idx.parse::<usize>().ok())
                .map(|k| masks[k].as_slice());
            slots.push(ParamSlot {
                name,
                tensor,
                mask: mask_ref,
            });
        }
    }
    optimizer.step(&mut slots)
}
