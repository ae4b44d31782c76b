//! Desk-scale self-supervised training.
//!
//! Synthetic Gaussian blobs stand in for images, vector jitter/scale/dropout
//! for image augmentations, and a small ReLU network for the backbone. The
//! network output is unit-normalized before it reaches a loss; gradients are
//! chained back through the normalization and every layer by hand.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GcaError, Result};
use crate::kernel::{normalize_rows, EmbeddingBatch};
use crate::losses::{evaluate_loss, LossConfig, LossKind};
use crate::matio::{Metric, MetricsRecord};
use crate::matrix::{norm, DenseMatrix};
use crate::metrics::{alignment_loss, uniformity_loss};
use crate::plans::block_domain_plan;
use crate::sampling::{rng, GcaRng};

/// Temperature of the uniformity metric reported during training.
pub const UNIFORMITY_T: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BlobConfig {
    pub classes: usize,
    pub domains: usize,
    pub dim: usize,
    pub per_cell: usize,
    /// Per-coordinate standard deviation around each cell center.
    pub class_spread: f64,
    /// Norm of each domain's offset vector.
    pub domain_offset_scale: f64,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            domains: 1,
            dim: 16,
            per_cell: 50,
            class_spread: 0.5,
            domain_offset_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub points: DenseMatrix,
    pub class_labels: Vec<usize>,
    pub domain_labels: Vec<usize>,
    pub config: BlobConfig,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }
}

fn random_direction(rng: &mut GcaRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Class centers uniform on the sphere of radius 3, one random offset per
/// domain, isotropic Gaussian spread; `per_cell` points per (class, domain).
pub fn gen_blobs(config: &BlobConfig) -> Result<SyntheticDataset> {
    if config.classes == 0 || config.domains == 0 || config.per_cell == 0 {
        return Err(GcaError::InvalidParameter(
            "classes, domains and points per cell must be positive".into(),
        ));
    }
    if config.dim < 2 {
        return Err(GcaError::InvalidParameter(format!(
            "dimension must be at least 2, got {}",
            config.dim
        )));
    }
    for (name, x) in [
        ("class spread", config.class_spread),
        ("domain offset scale", config.domain_offset_scale),
    ] {
        if !(x >= 0.0 && x.is_finite()) {
            return Err(GcaError::InvalidParameter(format!("{name} must be nonnegative")));
        }
    }
    let mut r = rng(config.seed);
    let d = config.dim;
    let centers: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| random_direction(&mut r, d).into_iter().map(|x| 3.0 * x).collect())
        .collect();
    let offsets: Vec<Vec<f64>> = (0..config.domains)
        .map(|_| {
            random_direction(&mut r, d)
                .into_iter()
                .map(|x| config.domain_offset_scale * x)
                .collect()
        })
        .collect();
    let n = config.classes * config.domains * config.per_cell;
    let mut data = Vec::with_capacity(n * d);
    let mut class_labels = Vec::with_capacity(n);
    let mut domain_labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for (m, offset) in offsets.iter().enumerate() {
            for _ in 0..config.per_cell {
                for k in 0..d {
                    let noise: f64 = r.sample(StandardNormal);
                    data.push(center[k] + offset[k] + config.class_spread * noise);
                }
                class_labels.push(c);
                domain_labels.push(m);
            }
        }
    }
    Ok(SyntheticDataset {
        points: DenseMatrix::from_vec(n, d, data)?,
        class_labels,
        domain_labels,
        config: config.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub jitter_sigma: f64,
    /// Bounds of the per-sample multiplicative factor.
    pub scale_range: (f64, f64),
    pub dropout_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.3,
            scale_range: (0.8, 1.2),
            dropout_prob: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Leaves every input unchanged.
    pub fn identity() -> Self {
        Self {
            jitter_sigma: 0.0,
            scale_range: (1.0, 1.0),
            dropout_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(GcaError::InvalidParameter("jitter must be nonnegative".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(GcaError::InvalidParameter(format!(
                "scale range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(GcaError::InvalidParameter(format!(
                "dropout probability must lie in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        Ok(())
    }
}

/// `dropout(scale * x + jitter)` applied row by row with fresh draws.
pub fn augment(x: &DenseMatrix, config: &AugmentConfig, rng: &mut GcaRng) -> DenseMatrix {
    let (lo, hi) = config.scale_range;
    let mut out = x.clone();
    for row in out.as_mut_slice().chunks_exact_mut(x.cols().max(1)) {
        let scale = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        for v in row.iter_mut() {
            let jitter = if config.jitter_sigma > 0.0 {
                config.jitter_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            *v = scale * *v + jitter;
            if config.dropout_prob > 0.0 && rng.gen::<f64>() < config.dropout_prob {
                *v = 0.0;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`.
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

static NEXT_ENCODER_ID: AtomicU64 = AtomicU64::new(1);

/// Feed-forward encoder followed by a projector; the activation follows every
/// layer except the last.
#[derive(Debug, Clone)]
pub struct MlpEncoder {
    layers: Vec<DenseLayer>,
    encoder_depth: usize,
    activation: Activation,
    id: u64,
    version: u64,
}

impl PartialEq for MlpEncoder {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.encoder_depth == other.encoder_depth
            && self.activation == other.activation
    }
}

impl MlpEncoder {
    /// `encoder` lists widths from input to feature layer; `projector` lists
    /// the widths after it. Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`,
    /// zero biases.
    pub fn new(encoder: &[usize], projector: &[usize], rng: &mut GcaRng) -> Result<Self> {
        if encoder.len() < 2 || encoder.iter().chain(projector).any(|&w| w == 0) {
            return Err(GcaError::InvalidParameter(
                "encoder needs an input and at least one positive layer width".into(),
            ));
        }
        let widths: Vec<usize> = encoder.iter().chain(projector).copied().collect();
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                DenseLayer {
                    weights: DenseMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-bound..=bound)),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self::from_layers(layers, encoder.len() - 1, Activation::Relu)?)
    }

    /// Default architecture `d -> 64 -> 32`, projector `32 -> 16`.
    pub fn default_for(input_dim: usize, rng: &mut GcaRng) -> Result<Self> {
        Self::new(&[input_dim, 64, 32], &[16], rng)
    }

    pub fn from_layers(layers: Vec<DenseLayer>, encoder_depth: usize, activation: Activation) -> Result<Self> {
        if layers.is_empty() || encoder_depth == 0 || encoder_depth > layers.len() {
            return Err(GcaError::InvalidParameter(format!(
                "encoder depth {encoder_depth} invalid for {} layers",
                layers.len()
            )));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].weights.rows() != pair[1].weights.cols() {
                return Err(GcaError::DimensionMismatch(format!(
                    "layer {k} outputs {} values but layer {} takes {}",
                    pair[0].weights.rows(),
                    k + 1,
                    pair[1].weights.cols()
                )));
            }
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weights.rows() {
                return Err(GcaError::DimensionMismatch(format!(
                    "layer {k} has {} biases for {} outputs",
                    layer.bias.len(),
                    layer.weights.rows()
                )));
            }
        }
        Ok(Self {
            layers,
            encoder_depth,
            activation,
            id: NEXT_ENCODER_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.rows())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.as_slice().len() + l.bias.len()).sum()
    }

    /// All parameters flattened layer by layer, weights before biases.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(GcaError::DimensionMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut rest = values;
        for layer in &mut self.layers {
            let (w, tail) = rest.split_at(layer.weights.as_slice().len());
            layer.weights.as_mut_slice().copy_from_slice(w);
            let (b, tail) = tail.split_at(layer.bias.len());
            layer.bias.copy_from_slice(b);
            rest = tail;
        }
        self.version += 1;
        Ok(())
    }

    fn activate(&self, x: f64) -> f64 {
        match self.activation {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn layer_forward(layer: &DenseLayer, x: &DenseMatrix) -> DenseMatrix {
        let mut y = x.matmul_t(&layer.weights).expect("widths checked at construction");
        for row in y.as_mut_slice().chunks_exact_mut(layer.bias.len().max(1)) {
            row.iter_mut().zip(&layer.bias).for_each(|(v, b)| *v += b);
        }
        y
    }

    /// Output of the feature layer (before the projector), for probing.
    pub fn features(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers[..self.encoder_depth] {
            h = Self::layer_forward(layer, &h).map(|v| self.activate(v));
        }
        Ok(h)
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(GcaError::DimensionMismatch(format!(
                "input has {} columns, encoder expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

/// Everything `encoder_backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each layer; the first entry is the batch itself.
    inputs: Vec<DenseMatrix>,
    /// Pre-activation output of each layer.
    pre_activations: Vec<DenseMatrix>,
    embeddings: EmbeddingBatch,
    norms: Vec<f64>,
    encoder_id: u64,
    version: u64,
}

impl ForwardCache {
    pub fn embeddings(&self) -> &EmbeddingBatch {
        &self.embeddings
    }

    /// Unnormalized network output.
    pub fn raw_output(&self) -> &DenseMatrix {
        self.pre_activations.last().expect("at least one layer")
    }
}

/// Runs the network and normalizes its output rows.
pub fn encoder_forward(encoder: &MlpEncoder, batch: &DenseMatrix) -> Result<(EmbeddingBatch, ForwardCache)> {
    encoder.check_input(batch)?;
    let last = encoder.layers.len() - 1;
    let mut inputs = Vec::with_capacity(encoder.layers.len());
    let mut pre_activations = Vec::with_capacity(encoder.layers.len());
    let mut h = batch.clone();
    for (k, layer) in encoder.layers.iter().enumerate() {
        let y = MlpEncoder::layer_forward(layer, &h);
        inputs.push(h);
        h = if k < last { y.map(|v| encoder.activate(v)) } else { y.clone() };
        pre_activations.push(y);
    }
    let embeddings = normalize_rows(&h)?;
    let norms = h.row_iter().map(norm).collect();
    let cache = ForwardCache {
        inputs,
        pre_activations,
        embeddings: embeddings.clone(),
        norms,
        encoder_id: encoder.id,
        version: encoder.version,
    };
    Ok((embeddings, cache))
}

/// Per-layer parameter gradients, shaped like the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGradients {
    pub layers: Vec<DenseLayer>,
}

impl EncoderGradients {
    pub fn zeros_like(encoder: &MlpEncoder) -> Self {
        Self {
            layers: encoder
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weights: DenseMatrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn add_assign(&mut self, other: &EncoderGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights
                .as_mut_slice()
                .iter_mut()
                .zip(b.weights.as_slice())
                .for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }
}

/// Gradient of the unit-normalization `z = y / |y|` applied row-wise:
/// `(I - z z^T) g / |y|`.
pub fn normalization_backward(z: &DenseMatrix, norms: &[f64], grad_z: &DenseMatrix) -> DenseMatrix {
    let mut out = grad_z.clone();
    for (i, row) in out.as_mut_slice().chunks_exact_mut(z.cols().max(1)).enumerate() {
        let zi = z.row(i);
        let along: f64 = zi.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
        for (o, zk) in row.iter_mut().zip(zi) {
            *o = (*o - along * zk) / norms[i];
        }
    }
    out
}

/// Backpropagates `dL/dz` (gradient w.r.t. the normalized embeddings) to
/// every weight and bias.
pub fn encoder_backward(
    encoder: &MlpEncoder,
    cache: &ForwardCache,
    grad_embeddings: &DenseMatrix,
) -> Result<EncoderGradients> {
    if cache.encoder_id != encoder.id || cache.version != encoder.version {
        return Err(GcaError::StaleCache(format!(
            "cache from encoder {} v{}, current encoder {} v{}",
            cache.encoder_id, cache.version, encoder.id, encoder.version
        )));
    }
    if grad_embeddings.shape() != cache.embeddings.matrix().shape() {
        return Err(GcaError::DimensionMismatch(format!(
            "gradient {:?} for embeddings {:?}",
            grad_embeddings.shape(),
            cache.embeddings.matrix().shape()
        )));
    }
    let last = encoder.layers.len() - 1;
    let mut upstream = normalization_backward(cache.embeddings.matrix(), &cache.norms, grad_embeddings);
    let mut grads = EncoderGradients::zeros_like(encoder);
    for k in (0..=last).rev() {
        if k < last && encoder.activation == Activation::Relu {
            let pre = &cache.pre_activations[k];
            upstream
                .as_mut_slice()
                .iter_mut()
                .zip(pre.as_slice())
                .for_each(|(g, &y)| {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                });
        }
        let layer = &encoder.layers[k];
        grads.layers[k].weights = upstream.t_matmul(&cache.inputs[k])?;
        grads.layers[k].bias = upstream.col_sums();
        if k > 0 {
            upstream = upstream.matmul(&layer.weights)?;
        }
    }
    Ok(grads)
}

/// Plain gradient step; invalidates outstanding caches.
pub fn sgd_step(encoder: &mut MlpEncoder, grads: &EncoderGradients, rate: f64) {
    for (layer, g) in encoder.layers.iter_mut().zip(&grads.layers) {
        layer
            .weights
            .as_mut_slice()
            .iter_mut()
            .zip(g.weights.as_slice())
            .for_each(|(w, d)| *w -= rate * d);
        layer.bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b -= rate * d);
    }
    encoder.version += 1;
}

/// Largest difference between backpropagated parameter gradients and central
/// differences of `sum <c, z>` for a random read-out `c`, relative to the
/// largest analytic entry.
pub fn encoder_grad_check(encoder: &MlpEncoder, x: &DenseMatrix, seed: u64) -> Result<f64> {
    let (z, cache) = encoder_forward(encoder, x)?;
    let c = crate::sampling::gaussian_matrix(&mut rng(seed), z.batch_size(), z.dim());
    let analytic = encoder_backward(encoder, &cache, &c)?.flatten();
    let objective = |e: &MlpEncoder| -> Result<f64> {
        let (z, _) = encoder_forward(e, x)?;
        Ok(z.matrix().as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum())
    };
    let params = encoder.parameters();
    let mut probe = encoder.clone();
    let h = 1e-6;
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut worst: f64 = 0.0;
    for k in 0..params.len() {
        let mut p = params.clone();
        p[k] += h;
        probe.set_parameters(&p)?;
        let plus = objective(&probe)?;
        p[k] -= 2.0 * h;
        probe.set_parameters(&p)?;
        let minus = objective(&probe)?;
        worst = worst.max(((plus - minus) / (2.0 * h) - analytic[k]).abs() / scale);
    }
    Ok(worst)
}

/// Domain-structured target weights for the plan-based losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainWeights {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub loss_config: LossConfig,
    /// When set, each batch's target is built from its domain labels.
    pub domain_weights: Option<DomainWeights>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate decays linearly to this fraction of its initial value.
    pub final_rate_fraction: f64,
    pub hidden: Vec<usize>,
    pub projection_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::GcaInce,
            loss_config: LossConfig::default(),
            domain_weights: None,
            epochs: 200,
            batch_size: 64,
            learning_rate: 0.5,
            final_rate_fraction: 1e-3,
            hidden: vec![64, 32],
            projection_dim: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 4 {
            return Err(GcaError::InvalidParameter(format!(
                "batch size must be at least 4, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GcaError::InvalidParameter("learning rate must be positive".into()));
        }
        if !(self.final_rate_fraction > 0.0 && self.final_rate_fraction <= 1.0) {
            return Err(GcaError::InvalidParameter(
                "final rate fraction must lie in (0, 1]".into(),
            ));
        }
        if self.hidden.is_empty() || self.projection_dim == 0 {
            return Err(GcaError::InvalidParameter("network widths must be nonempty".into()));
        }
        Ok(())
    }
}

/// Metrics after `epoch` epochs; epoch 0 is the initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-sample loss: over the epoch's batches, or over evaluation
    /// batches for epoch 0.
    pub loss: f64,
    pub alignment: f64,
    pub uniformity: f64,
}

impl EpochMetrics {
    pub fn to_record(&self) -> MetricsRecord {
        MetricsRecord::new(self.epoch)
            .with(Metric::Loss, self.loss)
            .with(Metric::Alignment, self.alignment)
            .with(Metric::Uniformity, self.uniformity)
    }
}

/// Fixed pair of augmented views used to compare epochs.
struct EvalViews {
    first: DenseMatrix,
    second: DenseMatrix,
}

fn row_subset(x: &DenseMatrix, idx: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(idx.len(), x.cols(), |i, j| x[(idx[i], j)])
}

fn batch_loss_config(
    config: &TrainConfig,
    domains: &[usize],
) -> Result<LossConfig> {
    let mut lc = config.loss_config.clone();
    if let Some(w) = config.domain_weights {
        let labels: Vec<i64> = domains.iter().map(|&d| d as i64).collect();
        lc.target = Some(block_domain_plan(&labels, w.alpha, w.beta)?);
    }
    Ok(lc)
}

/// Loss value and parameter gradient of one batch of view pairs.
fn batch_step(
    encoder: &MlpEncoder,
    config: &TrainConfig,
    first: &DenseMatrix,
    second: &DenseMatrix,
    domains: &[usize],
) -> Result<(f64, EncoderGradients)> {
    let (z1, c1) = encoder_forward(encoder, first)?;
    let (z2, c2) = encoder_forward(encoder, second)?;
    let lc = batch_loss_config(config, domains)?;
    let result = evaluate_loss(config.loss, &z1, &z2, &lc)?;
    // optimize the per-sample mean so the rate does not depend on B
    let scale = 1.0 / first.rows() as f64;
    let mut grads = encoder_backward(encoder, &c1, &result.grad_z1.scale(scale))?;
    if config.loss != LossKind::Byol {
        grads.add_assign(&encoder_backward(encoder, &c2, &result.grad_z2.scale(scale))?);
    }
    Ok((result.value * scale, grads))
}

fn evaluate_epoch(
    encoder: &MlpEncoder,
    dataset: &SyntheticDataset,
    config: &TrainConfig,
    views: &EvalViews,
    epoch: usize,
    loss: Option<f64>,
) -> Result<EpochMetrics> {
    let (z1, _) = encoder_forward(encoder, &views.first)?;
    let (z2, _) = encoder_forward(encoder, &views.second)?;
    let (clean, _) = encoder_forward(encoder, &dataset.points)?;
    let loss = match loss {
        Some(l) => l,
        None => {
            let n = dataset.len();
            let mut total = 0.0;
            let mut count = 0usize;
            let all: Vec<usize> = (0..n).collect();
            for chunk in all.chunks(config.batch_size) {
                if chunk.len() < 4 {
                    continue;
                }
                let a = row_subset(&views.first, chunk);
                let b = row_subset(&views.second, chunk);
                let domains: Vec<usize> = chunk.iter().map(|&i| dataset.domain_labels[i]).collect();
                let (value, _) = batch_step(encoder, config, &a, &b, &domains)?;
                total += value * chunk.len() as f64;
                count += chunk.len();
            }
            total / count.max(1) as f64
        }
    };
    Ok(EpochMetrics {
        epoch,
        loss,
        alignment: alignment_loss(&z1, &z2)?,
        uniformity: uniformity_loss(&clean, UNIFORMITY_T)?,
    })
}

/// Trains a fresh encoder with plain SGD and linear rate decay. The history
/// starts with the initialization (epoch 0) and has one entry per epoch.
pub fn train_encoder(
    dataset: &SyntheticDataset,
    config: &TrainConfig,
    augmentation: &AugmentConfig,
) -> Result<(MlpEncoder, Vec<EpochMetrics>)> {
    config.validate()?;
    augmentation.validate()?;
    if dataset.len() < 4 {
        return Err(GcaError::InvalidParameter("dataset needs at least 4 points".into()));
    }
    let mut init_rng = rng(config.seed);
    let widths: Vec<usize> = std::iter::once(dataset.dim()).chain(config.hidden.iter().copied()).collect();
    let mut encoder = MlpEncoder::new(&widths, &[config.projection_dim], &mut init_rng)?;

    let mut eval_rng = rng(config.seed ^ 0x5eed_e7a1);
    let views = EvalViews {
        first: augment(&dataset.points, augmentation, &mut eval_rng),
        second: augment(&dataset.points, augmentation, &mut eval_rng),
    };
    let mut history = vec![evaluate_epoch(&encoder, dataset, config, &views, 0, None)?];

    let n = dataset.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = (config.epochs * batches_per_epoch).max(1);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = init_rng;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 4 {
                continue;
            }
            let x = row_subset(&dataset.points, chunk);
            let first = augment(&x, augmentation, &mut r);
            let second = augment(&x, augmentation, &mut r);
            let domains: Vec<usize> = chunk.iter().map(|&i| dataset.domain_labels[i]).collect();
            let (value, grads) = batch_step(&encoder, config, &first, &second, &domains)?;
            if !value.is_finite() || grads.flatten().iter().any(|g| !g.is_finite()) {
                return Err(GcaError::NonFiniteLoss { epoch, batch: b });
            }
            let progress = step as f64 / total_steps as f64;
            let rate = config.learning_rate * (1.0 - (1.0 - config.final_rate_fraction) * progress);
            sgd_step(&mut encoder, &grads, rate);
            step += 1;
            total += value * chunk.len() as f64;
            count += chunk.len();
        }
        let mean = total / count.max(1) as f64;
        history.push(evaluate_epoch(&encoder, dataset, config, &views, epoch, Some(mean))?);
    }
    Ok((encoder, history))
}

fn standardize(train: &DenseMatrix, other: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let n = train.rows().max(1) as f64;
    let mean: Vec<f64> = train.col_sums().iter().map(|s| s / n).collect();
    let mut var = vec![0.0; train.cols()];
    for row in train.row_iter() {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m) / n;
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
    let apply = |m: &DenseMatrix| DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| (m[(i, j)] - mean[j]) * scale[j]);
    (apply(train), apply(other))
}

pub const PROBE_STEPS: usize = 500;
pub const PROBE_RATE: f64 = 0.1;

/// Held-out accuracy of multinomial logistic regression trained by
/// full-batch gradient descent on standardized features.
pub fn linear_probe(features: &DenseMatrix, labels: &[usize], train_fraction: f64, seed: u64) -> Result<f64> {
    let n = features.rows();
    if labels.len() != n {
        return Err(GcaError::DimensionMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(GcaError::InvalidParameter(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(seed));
    let cut = ((n as f64) * train_fraction).round() as usize;
    let (train_idx, test_idx) = order.split_at(cut.min(n));
    if test_idx.is_empty() {
        return Err(GcaError::DegenerateSplit("empty held-out split".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; k];
    train_idx.iter().for_each(|&i| seen[labels[i]] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(GcaError::DegenerateSplit(
            "training split contains fewer than 2 classes".into(),
        ));
    }
    let (x_train, x_test) = standardize(&row_subset(features, train_idx), &row_subset(features, test_idx));
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let d = features.cols();
    let m = train_idx.len() as f64;
    let mut w = DenseMatrix::zeros(k, d);
    let mut b = vec![0.0; k];
    for _ in 0..PROBE_STEPS {
        let mut logits = x_train.matmul_t(&w)?;
        for (i, row) in logits.as_mut_slice().chunks_exact_mut(k).enumerate() {
            row.iter_mut().zip(&b).for_each(|(l, bb)| *l += bb);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            row.iter_mut().for_each(|l| {
                *l = (*l - mx).exp();
                z += *l;
            });
            row.iter_mut().for_each(|l| *l /= z);
            row[y_train[i]] -= 1.0;
        }
        let gw = logits.t_matmul(&x_train)?;
        let gb = logits.col_sums();
        w.as_mut_slice().iter_mut().zip(gw.as_slice()).for_each(|(a, g)| *a -= PROBE_RATE * g / m);
        b.iter_mut().zip(&gb).for_each(|(a, g)| *a -= PROBE_RATE * g / m);
    }
    let logits = x_test.matmul_t(&w)?;
    let correct = test_idx
        .iter()
        .enumerate()
        .filter(|&(i, &orig)| {
            let row = logits.row(i);
            let pred = (0..k).fold(0, |best, c| if row[c] + b[c] > row[best] + b[best] { c } else { best });
            pred == labels[orig]
        })
        .count();
    Ok(correct as f64 / test_idx.len() as f64)
}

pub const PROBE_TRAIN_FRACTION: f64 = 0.5;

/// Class and domain probe accuracies on the encoder's feature layer.
pub fn probe_encoder(encoder: &MlpEncoder, dataset: &SyntheticDataset, seed: u64) -> Result<(f64, f64)> {
    let features = encoder.features(&dataset.points)?;
    let class = linear_probe(&features, &dataset.class_labels, PROBE_TRAIN_FRACTION, seed)?;
    let domain = if dataset.config.domains >= 2 {
        linear_probe(&features, &dataset.domain_labels, PROBE_TRAIN_FRACTION, seed)?
    } else {
        1.0
    };
    Ok((class, domain))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainRow {
    pub alpha: f64,
    pub class_accuracy: f64,
    pub domain_accuracy: f64,
}

/// Trains once per `alpha` with the domain-structured target under the
/// plan-based softmax loss and probes class and domain labels.
pub fn domain_alignment_experiment(
    alphas: &[f64],
    beta: f64,
    dataset: &SyntheticDataset,
    base: &TrainConfig,
    augmentation: &AugmentConfig,
) -> Result<Vec<DomainRow>> {
    if dataset.config.domains < 2 {
        return Err(GcaError::InvalidParameter(
            "domain experiment needs at least 2 domains".into(),
        ));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let config = TrainConfig {
                loss: LossKind::GcaInce,
                domain_weights: Some(DomainWeights { alpha, beta }),
                ..base.clone()
            };
            let (encoder, _) = train_encoder(dataset, &config, augmentation)?;
            let (class_accuracy, domain_accuracy) = probe_encoder(&encoder, dataset, base.seed)?;
            Ok(DomainRow {
                alpha,
                class_accuracy,
                domain_accuracy,
            })
        })
        .collect()
}
