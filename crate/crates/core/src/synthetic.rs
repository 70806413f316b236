//! Four-class waveform generator: sine, square, sawtooth and white noise,
//! each with random frequency, phase and amplitude.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::dataset::Dataset;
use crate::error::Result;
use crate::numcore::rng_for;

pub const WAVEFORMS: [&str; 4] = ["sine", "square", "sawtooth", "noise"];

const SYNTH_STREAM: u64 = 7;

fn waveform(class: usize, phase: f64) -> f64 {
    let frac = (phase / (2.0 * PI)).rem_euclid(1.0);
    match class {
        0 => phase.sin(),
        1 => {
            if frac < 0.5 {
                1.0
            } else {
                -1.0
            }
        }
        _ => 2.0 * frac - 1.0,
    }
}

/// `num_series` series of `length` samples; series `i` has class `i % 4`.
pub fn waveforms(num_series: usize, length: usize, seed: u64) -> Result<Dataset> {
    let mut rng = rng_for(seed, SYNTH_STREAM);
    let jitter = Normal::new(0.0, 0.1).expect("valid std");
    let white = Normal::new(0.0, 1.0).expect("valid std");
    let mut rows = Vec::with_capacity(num_series);
    for i in 0..num_series {
        let class = i % WAVEFORMS.len();
        let cycles = rng.gen_range(1.5..4.0);
        let offset = rng.gen_range(0.0..2.0 * PI);
        let amp = rng.gen_range(0.8..1.2);
        let values: Vec<f64> = (0..length)
            .map(|t| {
                if class == 3 {
                    white.sample(&mut rng)
                } else {
                    let phase = 2.0 * PI * cycles * t as f64 / length as f64 + offset;
                    amp * waveform(class, phase) + jitter.sample(&mut rng)
                }
            })
            .collect();
        rows.push((class.to_string(), values));
    }
    Dataset::from_rows("Waveforms", rows)
}

/// Writes `label<TAB>v1<TAB>...` rows, the layout the UCR loader reads.
pub fn write_tsv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let names: Vec<&String> = {
        let mut by_id: Vec<(&String, &usize)> = ds.label_map.iter().collect();
        by_id.sort_by_key(|(_, id)| **id);
        by_id.into_iter().map(|(n, _)| n).collect()
    };
    let mut out = String::new();
    for s in &ds.series {
        out.push_str(names[s.label]);
        for v in &s.values {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    crate::pipeline::write_atomic(path.as_ref(), out.as_bytes())
}
