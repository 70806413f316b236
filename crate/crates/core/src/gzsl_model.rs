//! Latent embedding module and classifier head with temperature-scaled
//! softmax and calibrated stacking.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeVector, NUM_ATTRIBUTES};
use crate::error::{Error, Result};
use crate::numcore::{AdamState, ParamSet, Rng, Tape, Tensor, Var, DEFAULT_LR};

/// Which features feed the latent module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Encoder embedding and attributes.
    Full,
    /// Raw series and attributes; no encoder.
    NoEmbedder,
    /// Encoder embedding only.
    NoAttributes,
}

impl RunMode {
    pub fn uses_embedder(self) -> bool {
        self != RunMode::NoEmbedder
    }

    pub fn uses_attributes(self) -> bool {
        self != RunMode::NoAttributes
    }

    /// Width of the fused input.
    pub fn input_dim(self, repr_dim: usize, series_length: usize) -> usize {
        match self {
            RunMode::Full => repr_dim + NUM_ATTRIBUTES,
            RunMode::NoEmbedder => series_length + NUM_ATTRIBUTES,
            RunMode::NoAttributes => repr_dim,
        }
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(RunMode::Full),
            "no_embedder" => Ok(RunMode::NoEmbedder),
            "no_attributes" => Ok(RunMode::NoAttributes),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected full, no_embedder or no_attributes)"
            ))),
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Full => "full",
            RunMode::NoEmbedder => "no_embedder",
            RunMode::NoAttributes => "no_attributes",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    /// Output channels of each convolutional block; its length is the block count.
    pub filters: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub pool_size: usize,
    pub latent_dim: usize,
    pub classifier_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            filters: vec![8],
            kernel_sizes: vec![3],
            pool_size: 2,
            latent_dim: 32,
            classifier_hidden: vec![32],
            epochs: 100,
            batch_size: 32,
            lr: DEFAULT_LR,
        }
    }
}

impl LatentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("latent: {m}")));
        if self.filters.is_empty() {
            return bad("at least one convolutional block is required");
        }
        if self.filters.len() != self.kernel_sizes.len() {
            return bad("filters and kernel_sizes must have the same length");
        }
        if self.filters.contains(&0) || self.kernel_sizes.contains(&0) {
            return bad("filters and kernel sizes must be >= 1");
        }
        if self.latent_dim < 1 || self.pool_size < 1 || self.batch_size < 1 {
            return bad("latent_dim, pool_size and batch_size must be >= 1");
        }
        if self.classifier_hidden.contains(&0) {
            return bad("classifier hidden sizes must be >= 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }

    /// Sequence length after each block's pooling, starting from `input_dim`.
    fn lengths(&self, input_dim: usize) -> Vec<usize> {
        let mut lens = vec![input_dim];
        let mut len = input_dim;
        for _ in &self.filters {
            if self.pool_size > 1 && len >= self.pool_size {
                len = (len - self.pool_size) / self.pool_size + 1;
            }
            lens.push(len);
        }
        lens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub tau: f64,
    pub gamma: f64,
}

/// Output positions: seen classes first, then unseen, each ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLayout {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl ClassLayout {
    pub fn new(mut seen: Vec<usize>, mut unseen: Vec<usize>) -> Result<Self> {
        seen.sort_unstable();
        unseen.sort_unstable();
        seen.dedup();
        unseen.dedup();
        if seen.is_empty() {
            return Err(Error::Config("class layout needs at least one seen class".into()));
        }
        if seen.iter().any(|c| unseen.binary_search(c).is_ok()) {
            return Err(Error::Config("seen and unseen classes overlap".into()));
        }
        Ok(ClassLayout { seen, unseen })
    }

    pub fn len(&self) -> usize {
        self.seen.len() + self.unseen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_at(&self, pos: usize) -> usize {
        if pos < self.seen.len() {
            self.seen[pos]
        } else {
            self.unseen[pos - self.seen.len()]
        }
    }

    pub fn position(&self, class: usize) -> Option<usize> {
        self.seen
            .binary_search(&class)
            .ok()
            .or_else(|| {
                self.unseen
                    .binary_search(&class)
                    .ok()
                    .map(|p| p + self.seen.len())
            })
    }

    pub fn is_seen_position(&self, pos: usize) -> bool {
        pos < self.seen.len()
    }

    pub fn is_seen_class(&self, class: usize) -> bool {
        self.seen.binary_search(&class).is_ok()
    }
}

/// Per-feature z-score fitted on training attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeStandardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl AttributeStandardizer {
    /// Zero-variance features keep unit scale.
    pub fn fit(attrs: &[AttributeVector]) -> Result<Self> {
        if attrs.is_empty() {
            return Err(Error::invalid("standardizer", "no training attributes"));
        }
        let n = attrs.len() as f64;
        let mut mean = vec![0.0; NUM_ATTRIBUTES];
        for a in attrs {
            for (m, v) in mean.iter_mut().zip(a.0) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; NUM_ATTRIBUTES];
        for a in attrs {
            for ((s, v), m) in std.iter_mut().zip(a.0).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        Ok(AttributeStandardizer { mean, std })
    }

    pub fn apply(&self, a: &AttributeVector) -> Vec<f64> {
        a.0.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// `q = h ++ standardize(a)`.
pub fn fuse(
    h: &[f64],
    a: &AttributeVector,
    standardizer: Option<&AttributeStandardizer>,
) -> Result<Vec<f64>> {
    let st = standardizer
        .ok_or_else(|| Error::invalid("fuse", "attribute standardizer has not been fitted"))?;
    let mut q = h.to_vec();
    q.extend(st.apply(a));
    Ok(q)
}

/// Assembles the latent-module input for one series according to `mode`.
pub fn build_input(
    mode: RunMode,
    embedding: Option<&[f64]>,
    raw: &[f64],
    attrs: &AttributeVector,
    standardizer: Option<&AttributeStandardizer>,
) -> Result<Vec<f64>> {
    let need_embedding = || {
        embedding.ok_or_else(|| Error::invalid("build_input", format!("mode {mode} needs an embedding")))
    };
    match mode {
        RunMode::Full => fuse(need_embedding()?, attrs, standardizer),
        RunMode::NoEmbedder => fuse(raw, attrs, standardizer),
        RunMode::NoAttributes => Ok(need_embedding()?.to_vec()),
    }
}

/// Numerically stable `softmax(logits / tau)`.
pub fn class_probs(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid("class_probs", format!("temperature {tau} must be > 0")));
    }
    let scaled: Vec<f64> = logits.iter().map(|r| r / tau).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Calibrated stacking: argmax of `p_c - gamma * [c is seen]`, ties going
/// to the lowest class id. Returns the class id.
pub fn predict(probs: &[f64], layout: &ClassLayout, gamma: f64) -> usize {
    let mut best: Option<(f64, usize)> = None;
    for (pos, &p) in probs.iter().enumerate() {
        let score = if layout.is_seen_position(pos) { p - gamma } else { p };
        let class = layout.class_at(pos);
        best = match best {
            Some((s, c)) if s > score || (s == score && c < class) => Some((s, c)),
            _ => Some((score, class)),
        };
    }
    best.map(|(_, c)| c).expect("non-empty probability vector")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GzslModel {
    pub config: LatentConfig,
    pub mode: RunMode,
    pub input_dim: usize,
    pub layout: ClassLayout,
    pub standardizer: Option<AttributeStandardizer>,
    pub params: ParamSet,
}

impl GzslModel {
    pub fn new(
        config: LatentConfig,
        mode: RunMode,
        input_dim: usize,
        layout: ClassLayout,
        standardizer: Option<AttributeStandardizer>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("latent input dimension must be >= 1".into()));
        }
        if mode.uses_attributes() && standardizer.is_none() {
            return Err(Error::Config(format!("mode {mode} needs an attribute standardizer")));
        }
        let mut params = ParamSet::new();
        let mut c_in = 1;
        for (i, (&f, &k)) in config.filters.iter().zip(&config.kernel_sizes).enumerate() {
            let fan = c_in * k;
            params.insert(
                format!("latent.conv{i}.weight"),
                Tensor::uniform_init(&[f, c_in, k], fan, rng),
            );
            params.insert(format!("latent.conv{i}.bias"), Tensor::uniform_init(&[f], fan, rng));
            c_in = f;
        }
        let flat = c_in * config.lengths(input_dim).last().copied().unwrap_or(input_dim);
        params.insert(
            "latent.fc.weight",
            Tensor::uniform_init(&[flat, config.latent_dim], flat, rng),
        );
        params.insert(
            "latent.fc.bias",
            Tensor::uniform_init(&[config.latent_dim], flat, rng),
        );
        let mut width = config.latent_dim;
        for (j, &h) in config.classifier_hidden.iter().enumerate() {
            params.insert(
                format!("classifier.hidden{j}.weight"),
                Tensor::uniform_init(&[width, h], width, rng),
            );
            params.insert(
                format!("classifier.hidden{j}.bias"),
                Tensor::uniform_init(&[h], width, rng),
            );
            width = h;
        }
        params.insert(
            "classifier.out.weight",
            Tensor::uniform_init(&[width, layout.len()], width, rng),
        );
        params.insert(
            "classifier.out.bias",
            Tensor::uniform_init(&[layout.len()], width, rng),
        );
        Ok(GzslModel {
            config,
            mode,
            input_dim,
            layout,
            standardizer,
            params,
        })
    }

    /// Replaces freshly initialised parameters with stored ones after
    /// checking names and shapes.
    pub fn with_params(mut self, params: ParamSet) -> Result<Self> {
        crate::embedder::check_layout(&self.params, &params)?;
        self.params = params;
        Ok(self)
    }

    fn num_latent_params(&self) -> usize {
        2 * self.config.filters.len() + 2
    }

    /// Latent module on `q: [N, input_dim]`, returning `z: [N, P]`.
    pub fn latent_forward(&self, tape: &mut Tape, vars: &[Var], q: Var) -> Result<Var> {
        let shape = tape.shape(q).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Shape {
                op: "latent_embed",
                lhs: vec![shape.first().copied().unwrap_or(0), self.input_dim],
                rhs: shape,
            });
        }
        let n = shape[0];
        let mut x = tape.reshape(q, vec![n, 1, self.input_dim])?;
        let lens = self.config.lengths(self.input_dim);
        for i in 0..self.config.filters.len() {
            x = tape.conv1d_same(x, vars[2 * i], Some(vars[2 * i + 1]), 1)?;
            x = tape.relu(x);
            if lens[i + 1] != lens[i] {
                x = tape.maxpool_last(x, self.config.pool_size, self.config.pool_size)?;
            }
        }
        let flat: usize = tape.shape(x)[1..].iter().product();
        x = tape.reshape(x, vec![n, flat])?;
        let fc = self.num_latent_params() - 2;
        let z = tape.matmul(x, vars[fc])?;
        tape.add_row(z, vars[fc + 1])
    }

    /// Classifier head on `z: [N, P]`, returning logits `[N, classes]`.
    pub fn classifier_forward(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<Var> {
        let mut x = z;
        let mut idx = self.num_latent_params();
        for _ in &self.config.classifier_hidden {
            x = tape.matmul(x, vars[idx])?;
            x = tape.add_row(x, vars[idx + 1])?;
            x = tape.relu(x);
            idx += 2;
        }
        let out = tape.matmul(x, vars[idx])?;
        tape.add_row(out, vars[idx + 1])
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], q: Var) -> Result<Var> {
        let z = self.latent_forward(tape, vars, q)?;
        self.classifier_forward(tape, vars, z)
    }

    fn input_var(&self, tape: &mut Tape, inputs: &[Vec<f64>]) -> Result<Var> {
        let mut flat = Vec::with_capacity(inputs.len() * self.input_dim);
        for q in inputs {
            if q.len() != self.input_dim {
                return Err(Error::Shape {
                    op: "latent_embed",
                    lhs: vec![self.input_dim],
                    rhs: vec![q.len()],
                });
            }
            flat.extend_from_slice(q);
        }
        tape.constant(vec![inputs.len(), self.input_dim], flat)
    }

    /// `z = L(q)` for one input.
    pub fn latent_embed(&self, q: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = self.input_var(&mut tape, &[q.to_vec()])?;
        let z = self.latent_forward(&mut tape, &vars, x)?;
        Ok(tape.value(z).to_vec())
    }

    pub fn logits(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(512) {
            let mut tape = Tape::new();
            let vars = self.params.bind(&mut tape, false);
            let x = self.input_var(&mut tape, chunk)?;
            let r = self.forward(&mut tape, &vars, x)?;
            out.extend(tape.value(r).chunks(self.layout.len()).map(|c| c.to_vec()));
        }
        Ok(out)
    }

    pub fn probabilities(&self, inputs: &[Vec<f64>], tau: f64) -> Result<Vec<Vec<f64>>> {
        self.logits(inputs)?
            .iter()
            .map(|r| class_probs(r, tau))
            .collect()
    }
}

/// Mean over the batch of `-log softmax(logits / tau)[target]`, where
/// `targets` are output positions.
pub fn classifier_loss(tape: &mut Tape, logits: Var, targets: &[usize], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid("classifier_loss", format!("temperature {tau} must be > 0")));
    }
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Shape {
            op: "classifier_loss",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    let classes = shape[1];
    let mut onehot = vec![0.0; targets.len() * classes];
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::invalid("classifier_loss", format!("target {t} >= {classes}")));
        }
        onehot[i * classes + t] = 1.0;
    }
    let scaled = tape.scale(logits, 1.0 / tau);
    let lse = tape.logsumexp_last(scaled, None)?;
    let picked = tape.mask_mul(scaled, onehot)?;
    let pos = tape.sum_last(picked);
    let per_sample = tape.sub(lse, pos)?;
    Ok(tape.mean_all(per_sample))
}

/// Trains latent module and classifier with Adam on seen-class samples.
/// `labels` are class ids. Returns the mean loss per epoch.
pub fn train_gzsl(
    model: &mut GzslModel,
    inputs: &[Vec<f64>],
    labels: &[usize],
    tau: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::invalid(
            "train_gzsl",
            format!("{} inputs for {} labels", inputs.len(), labels.len()),
        ));
    }
    let mut targets = Vec::with_capacity(labels.len());
    for &l in labels {
        if !model.layout.is_seen_class(l) {
            return Err(Error::invalid(
                "train_gzsl",
                format!("label {l} is not a seen class"),
            ));
        }
        targets.push(model.layout.position(l).expect("seen class has a position"));
    }
    let mut adam = AdamState::new(&model.params, model.config.lr);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::with_capacity(model.config.epochs);
    for epoch in 0..model.config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(model.config.batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let batch_targets: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape, true);
            let x = model.input_var(&mut tape, &batch)?;
            let logits = model.forward(&mut tape, &vars, x)?;
            let loss = classifier_loss(&mut tape, logits, &batch_targets, tau)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "classifier",
                    epoch,
                    value,
                });
            }
            tape.backward(loss)?;
            model.params.collect_grads(&tape, &vars)?;
            adam.step(&mut model.params)?;
            total += value * chunk.len() as f64;
            count += chunk.len();
        }
        history.push(total / count as f64);
    }
    Ok(history)
}

/// Everything besides parameters needed to reload a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSidecar {
    pub mode: RunMode,
    pub tau: f64,
    pub gamma: f64,
    pub input_dim: usize,
    pub layout: ClassLayout,
    pub standardizer: Option<AttributeStandardizer>,
    pub latent: LatentConfig,
    pub encoder: Option<crate::embedder::EncoderConfig>,
    pub normalize: bool,
    pub apen: crate::attributes::ApEnParams,
}
