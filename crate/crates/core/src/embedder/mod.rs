//! Self-supervised series encoder: input projection, timestamp masking, a
//! stack of dilated residual convolutions and an output projection, trained
//! with temporal and instance-wise contrastive losses on random crops.

pub mod crop;
pub mod loss;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{AdamState, ParamSet, Rng, Tape, Tensor, Var, DEFAULT_LR};

pub use crop::{random_crop, CropPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub repr_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub kernel_size: usize,
    pub mask_probability: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hierarchical: bool,
    pub lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            repr_dim: 32,
            hidden_dim: 32,
            num_blocks: 3,
            kernel_size: 3,
            mask_probability: 0.5,
            batch_size: 128,
            epochs: 40,
            hierarchical: true,
            lr: DEFAULT_LR,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("encoder: {m}")));
        if self.repr_dim < 1 || self.hidden_dim < 1 || self.kernel_size < 1 {
            return bad("repr_dim, hidden_dim and kernel_size must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if !(0.0..=1.0).contains(&self.mask_probability) {
            return bad("mask_probability must lie in [0, 1]");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderModel {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

fn conv_param(
    params: &mut ParamSet,
    name: &str,
    c_out: usize,
    c_in: usize,
    kernel: usize,
    rng: &mut Rng,
) {
    let fan_in = c_in * kernel;
    params.insert(
        format!("{name}.weight"),
        Tensor::uniform_init(&[c_out, c_in, kernel], fan_in, rng),
    );
    params.insert(format!("{name}.bias"), Tensor::uniform_init(&[c_out], fan_in, rng));
}

/// Flattens equal-length series into a `[B, 1, T]` buffer.
fn stack(batch: &[&[f64]]) -> Result<(Vec<f64>, usize)> {
    let len = batch
        .first()
        .map(|s| s.len())
        .ok_or_else(|| Error::invalid("encode", "empty batch"))?;
    if len == 0 {
        return Err(Error::invalid("encode", "series length must be >= 1"));
    }
    let mut flat = Vec::with_capacity(batch.len() * len);
    for s in batch {
        if s.len() != len {
            return Err(Error::Shape {
                op: "encode",
                lhs: vec![len],
                rhs: vec![s.len()],
            });
        }
        flat.extend_from_slice(s);
    }
    Ok((flat, len))
}

impl EmbedderModel {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let h = config.hidden_dim;
        conv_param(&mut params, "input_proj", h, 1, 1, rng);
        for b in 0..config.num_blocks {
            conv_param(&mut params, &format!("block{b}.conv1"), h, h, config.kernel_size, rng);
            conv_param(&mut params, &format!("block{b}.conv2"), h, h, config.kernel_size, rng);
        }
        conv_param(&mut params, "output_proj", config.repr_dim, h, 1, rng);
        Ok(EmbedderModel { config, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::numcore::rng_for(0, 0);
        let reference = EmbedderModel::new(config.clone(), &mut rng)?;
        check_layout(&reference.params, &params)?;
        Ok(EmbedderModel { config, params })
    }

    /// Records the encoder on `tape`. `input` is `[B, 1, T]`; the result is
    /// `[B, repr_dim, T]`. With `mask = Some(rng)` every (series, timestamp)
    /// latent is zeroed with probability `mask_probability`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        input: Var,
        mask: Option<&mut Rng>,
    ) -> Result<Var> {
        let mut h = tape.conv1d_same(input, vars[0], Some(vars[1]), 1)?;
        if let Some(rng) = mask {
            let shape = tape.shape(h).to_vec();
            let (b, c, t) = (shape[0], shape[1], shape[2]);
            let p = self.config.mask_probability;
            let keep: Vec<f64> = (0..b * t)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 })
                .collect();
            let mut m = Vec::with_capacity(b * c * t);
            for bi in 0..b {
                for _ in 0..c {
                    m.extend_from_slice(&keep[bi * t..(bi + 1) * t]);
                }
            }
            h = tape.mask_mul(h, m)?;
        }
        for blk in 0..self.config.num_blocks {
            let dilation = 1usize << blk;
            let base = 2 + 4 * blk;
            let residual = h;
            let mut y = tape.relu(h);
            y = tape.conv1d_same(y, vars[base], Some(vars[base + 1]), dilation)?;
            y = tape.relu(y);
            y = tape.conv1d_same(y, vars[base + 2], Some(vars[base + 3]), dilation)?;
            h = tape.add(y, residual)?;
        }
        let out = 2 + 4 * self.config.num_blocks;
        tape.conv1d_same(h, vars[out], Some(vars[out + 1]), 1)
    }

    /// Per-timestamp representations `[B, T, repr_dim]`.
    pub fn encode(&self, batch: &[&[f64]], mask: Option<&mut Rng>) -> Result<Tensor> {
        let (flat, len) = stack(batch)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(vec![batch.len(), 1, len], flat)?;
        let out = self.forward(&mut tape, &vars, x, mask)?;
        let t = tape.transpose(out, 1, 2)?;
        Ok(tape.tensor(t))
    }

    /// Instance embedding: max over time of the unmasked representations.
    pub fn embed_series(&self, series: &[f64]) -> Result<Vec<f64>> {
        Ok(self.embed_batch(&[series])?.remove(0))
    }

    pub fn embed_batch(&self, batch: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(256) {
            let (flat, len) = stack(chunk)?;
            let mut tape = Tape::new();
            let vars = self.params.bind(&mut tape, false);
            let x = tape.constant(vec![chunk.len(), 1, len], flat)?;
            let reps = self.forward(&mut tape, &vars, x, None)?;
            let pooled = tape.max_last(reps);
            out.extend(
                tape.value(pooled)
                    .chunks(self.config.repr_dim)
                    .map(|c| c.to_vec()),
            );
        }
        Ok(out)
    }

    /// Loss for one crop pair on `batch`, recorded on `tape`.
    pub fn crop_loss(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &[&[f64]],
        crop: CropPair,
        mask: Option<&mut Rng>,
    ) -> Result<Var> {
        let len = batch[0].len();
        if !crop.is_valid(len) {
            return Err(Error::invalid("crop_loss", format!("{crop:?} for length {len}")));
        }
        let window = |r: std::ops::Range<usize>| -> Vec<&[f64]> {
            batch.iter().map(|s| &s[r.clone()]).collect()
        };
        let w1 = window(crop.window1());
        let w2 = window(crop.window2());
        let (f1, l1) = stack(&w1)?;
        let (f2, l2) = stack(&w2)?;
        let x1 = tape.constant(vec![batch.len(), 1, l1], f1)?;
        let x2 = tape.constant(vec![batch.len(), 1, l2], f2)?;
        let (o1, o2) = match mask {
            Some(rng) => {
                let o1 = self.forward(tape, vars, x1, Some(&mut *rng))?;
                (o1, self.forward(tape, vars, x2, Some(rng))?)
            }
            None => (
                self.forward(tape, vars, x1, None)?,
                self.forward(tape, vars, x2, None)?,
            ),
        };
        let r1 = crop.overlap_in_window1();
        let r2 = crop.overlap_in_window2();
        let h1 = tape.transpose(o1, 1, 2)?;
        let h1 = tape.slice(h1, 1, r1.start, r1.end)?;
        let h2 = tape.transpose(o2, 1, 2)?;
        let h2 = tape.slice(h2, 1, r2.start, r2.end)?;
        loss::total_loss(tape, h1, h2, self.config.hierarchical)
    }
}

pub(crate) fn check_layout(reference: &ParamSet, got: &ParamSet) -> Result<()> {
    if reference.len() != got.len() {
        return Err(Error::Mismatch(format!(
            "expected {} tensors, found {}",
            reference.len(),
            got.len()
        )));
    }
    for ((n1, a), (n2, b)) in reference.iter().zip(got.iter()) {
        if n1 != n2 || a.shape() != b.shape() {
            return Err(Error::Mismatch(format!(
                "expected `{n1}` {:?}, found `{n2}` {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

/// Trains a fresh encoder with Adam. Returns the model and the mean loss of
/// each epoch.
pub fn train_embedder(
    series: &[&[f64]],
    config: &EncoderConfig,
    rng: &mut Rng,
) -> Result<(EmbedderModel, Vec<f64>)> {
    if series.is_empty() {
        return Err(Error::invalid("train_embedder", "empty training set"));
    }
    let len = series[0].len();
    if len < 2 {
        return Err(Error::invalid("train_embedder", format!("series length {len} < 2")));
    }
    let mut model = EmbedderModel::new(config.clone(), rng)?;
    let mut adam = AdamState::new(&model.params, config.lr);
    let mut order: Vec<usize> = (0..series.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| series[i]).collect();
            let crop = random_crop(len, rng)?;
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape, true);
            let loss = model.crop_loss(&mut tape, &vars, &batch, crop, Some(rng))?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "embedder",
                    epoch,
                    value,
                });
            }
            tape.backward(loss)?;
            model.params.collect_grads(&tape, &vars)?;
            adam.step(&mut model.params)?;
            total += value;
            batches += 1;
        }
        history.push(total / batches as f64);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng_for;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            repr_dim: 3,
            hidden_dim: 4,
            num_blocks: 2,
            batch_size: 4,
            epochs: 1,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn zero_output_projection_gives_zero_reps() {
        let mut rng = rng_for(0, 0);
        let mut m = EmbedderModel::new(tiny(), &mut rng).unwrap();
        let n = m.params.len();
        for i in [n - 2, n - 1] {
            m.params.get_mut(i).data_mut().fill(0.0);
        }
        let s = [0.3, -1.0, 2.0, 0.5, 0.9];
        let h = m.encode(&[&s], None).unwrap();
        assert!(h.data().iter().all(|&x| x == 0.0));
        assert_eq!(m.embed_series(&s).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn zero_mask_probability_matches_unmasked() {
        let mut rng = rng_for(0, 0);
        let cfg = EncoderConfig {
            mask_probability: 0.0,
            ..tiny()
        };
        let m = EmbedderModel::new(cfg, &mut rng).unwrap();
        let s1 = [0.3, -1.0, 2.0, 0.5, 0.9, 1.1];
        let s2 = [1.3, 0.0, -2.0, 0.5, 0.2, 0.1];
        let plain = m.encode(&[&s1, &s2], None).unwrap();
        let masked = m.encode(&[&s1, &s2], Some(&mut rng)).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&plain), bits(&masked));
    }

    #[test]
    fn encode_shape_follows_input() {
        let mut rng = rng_for(4, 0);
        for (blocks, k, len) in [(1, 3, 1), (3, 3, 7), (2, 2, 5), (4, 5, 16)] {
            let cfg = EncoderConfig {
                num_blocks: blocks,
                kernel_size: k,
                ..tiny()
            };
            let m = EmbedderModel::new(cfg, &mut rng).unwrap();
            let s: Vec<f64> = (0..len).map(|i| i as f64 * 0.1).collect();
            let h = m.encode(&[&s, &s], None).unwrap();
            assert_eq!(h.shape(), &[2, len, 3]);
        }
    }

    #[test]
    fn embedding_is_max_over_time() {
        let mut rng = rng_for(5, 0);
        let m = EmbedderModel::new(tiny(), &mut rng).unwrap();
        let s: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        let h = m.encode(&[&s], None).unwrap();
        let emb = m.embed_series(&s).unwrap();
        for d in 0..3 {
            let max = (0..9).map(|t| h.data()[t * 3 + d]).fold(f64::MIN, f64::max);
            assert_eq!(emb[d], max);
        }
    }

    #[test]
    fn constant_series_smoke() {
        let mut rng = rng_for(6, 0);
        let series = [[1.0; 12], [0.0; 12], [-1.0; 12], [2.0; 12]];
        let refs: Vec<&[f64]> = series.iter().map(|s| s.as_slice()).collect();
        let (m, hist) = train_embedder(&refs, &tiny(), &mut rng).unwrap();
        assert_eq!(hist.len(), 1);
        assert!(hist[0].is_finite());
        assert!(m.params.all_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let series: Vec<Vec<f64>> = (0..6)
            .map(|k| (0..10).map(|t| ((t * (k + 1)) as f64 * 0.3).sin()).collect())
            .collect();
        let refs: Vec<&[f64]> = series.iter().map(|s| s.as_slice()).collect();
        let cfg = EncoderConfig {
            epochs: 3,
            ..tiny()
        };
        let (a, ha) = train_embedder(&refs, &cfg, &mut rng_for(9, 2)).unwrap();
        let (b, hb) = train_embedder(&refs, &cfg, &mut rng_for(9, 2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn ragged_batch_rejected() {
        let mut rng = rng_for(0, 0);
        let m = EmbedderModel::new(tiny(), &mut rng).unwrap();
        assert!(m.encode(&[&[1.0, 2.0], &[1.0]], None).is_err());
        assert!(m.encode(&[&[]], None).is_err());
    }
}
