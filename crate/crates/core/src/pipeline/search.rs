use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::numcore::Rng;

/// Candidate values per hyperparameter. Each trial draws one value per list
/// independently; `latent_blocks` copies of the drawn filter count and
/// kernel size form the latent convolution stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub trials: usize,
    pub repr_dim: Vec<usize>,
    pub hidden_dim: Vec<usize>,
    pub num_blocks: Vec<usize>,
    pub latent_dim: Vec<usize>,
    pub latent_blocks: Vec<usize>,
    pub latent_filters: Vec<usize>,
    pub latent_kernel_size: Vec<usize>,
    pub latent_pool: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub tau: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            trials: 3,
            repr_dim: vec![16, 32],
            hidden_dim: vec![16, 32],
            num_blocks: vec![2, 3],
            latent_dim: vec![16, 32],
            latent_blocks: vec![1, 2],
            latent_filters: vec![4, 8],
            latent_kernel_size: vec![3, 5],
            latent_pool: vec![2],
            classifier_hidden: vec![16, 32],
            tau: vec![0.5, 1.0, 2.0],
        }
    }
}

/// Outcome of one search trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub validation_ausuc: f64,
    pub validation_gamma: f64,
    pub validation_h: f64,
    pub config: RunConfig,
}

impl SearchSpace {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::Config("search budget must be >= 1 trial".into()));
        }
        let lists: [(&str, bool); 10] = [
            ("repr_dim", self.repr_dim.is_empty()),
            ("hidden_dim", self.hidden_dim.is_empty()),
            ("num_blocks", self.num_blocks.is_empty()),
            ("latent_dim", self.latent_dim.is_empty()),
            ("latent_blocks", self.latent_blocks.is_empty()),
            ("latent_filters", self.latent_filters.is_empty()),
            ("latent_kernel_size", self.latent_kernel_size.is_empty()),
            ("latent_pool", self.latent_pool.is_empty()),
            ("classifier_hidden", self.classifier_hidden.is_empty()),
            ("tau", self.tau.is_empty()),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, empty)| *empty) {
            return Err(Error::Config(format!("search space `{name}` has no candidates")));
        }
        Ok(())
    }

    /// `base` with every searched field replaced by a draw from the space.
    pub fn sample(&self, base: &RunConfig, rng: &mut Rng) -> RunConfig {
        fn pick<T: Copy>(v: &[T], rng: &mut Rng) -> T {
            *v.choose(rng).expect("validated non-empty")
        }
        let blocks = pick(&self.latent_blocks, rng);
        let filters = pick(&self.latent_filters, rng);
        let kernel = pick(&self.latent_kernel_size, rng);
        RunConfig {
            repr_dim: pick(&self.repr_dim, rng),
            hidden_dim: pick(&self.hidden_dim, rng),
            num_blocks: pick(&self.num_blocks, rng),
            latent_dim: pick(&self.latent_dim, rng),
            latent_filters: vec![filters; blocks],
            latent_kernel_sizes: vec![kernel; blocks],
            latent_pool: pick(&self.latent_pool, rng),
            classifier_hidden: vec![pick(&self.classifier_hidden, rng)],
            tau: pick(&self.tau, rng),
            ..base.clone()
        }
    }

    pub fn contains(&self, c: &RunConfig) -> bool {
        let blocks = c.latent_filters.len();
        self.repr_dim.contains(&c.repr_dim)
            && self.hidden_dim.contains(&c.hidden_dim)
            && self.num_blocks.contains(&c.num_blocks)
            && self.latent_dim.contains(&c.latent_dim)
            && self.latent_blocks.contains(&blocks)
            && c.latent_filters.iter().all(|f| self.latent_filters.contains(f))
            && c.latent_kernel_sizes.iter().all(|k| self.latent_kernel_size.contains(k))
            && self.latent_pool.contains(&c.latent_pool)
            && c.classifier_hidden.len() == 1
            && self.classifier_hidden.contains(&c.classifier_hidden[0])
            && self.tau.contains(&c.tau)
    }
}

/// Index of the first trial with the largest objective.
pub fn best_trial(trials: &[TrialRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, t) in trials.iter().enumerate() {
        if best.map_or(true, |b| t.validation_ausuc > trials[b].validation_ausuc) {
            best = Some(i);
        }
    }
    best
}
