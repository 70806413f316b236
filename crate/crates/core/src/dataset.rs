//! UCR-style univariate series ingestion and the class-wise GZSL partition.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::rng_for;

/// Random stream tag for split construction.
const SPLIT_STREAM: u64 = 1;

/// Fraction of samples held out per class, as `NUM / DEN`.
const HOLDOUT_NUM: usize = 1;
const HOLDOUT_DEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSeries {
    pub values: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub series: Vec<LabeledSeries>,
    pub num_classes: usize,
    pub series_length: usize,
    /// Original label text to dense class id.
    pub label_map: BTreeMap<String, usize>,
}

impl Dataset {
    /// Builds a dataset from `(original label, values)` rows. Dense ids follow
    /// numeric label order when every label parses as a number, lexical order
    /// otherwise.
    pub fn from_rows(name: impl Into<String>, rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let name = name.into();
        let first = rows
            .first()
            .ok_or_else(|| Error::EmptyFile(PathBuf::from(&name)))?;
        let len = first.1.len();
        if len < 2 {
            return Err(Error::invalid("dataset", format!("series length {len} < 2")));
        }
        for (i, (_, v)) in rows.iter().enumerate() {
            if v.len() != len {
                return Err(Error::invalid(
                    "dataset",
                    format!("row {i} has length {}, expected {len}", v.len()),
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("dataset", format!("row {i} has non-finite values")));
            }
        }
        let mut labels: Vec<&String> = rows.iter().map(|(l, _)| l).collect();
        labels.sort();
        labels.dedup();
        let numeric: Option<Vec<f64>> = labels.iter().map(|l| l.parse::<f64>().ok()).collect();
        if let Some(nums) = numeric {
            let mut paired: Vec<(f64, &String)> = nums.into_iter().zip(labels).collect();
            paired.sort_by(|a, b| a.0.total_cmp(&b.0));
            labels = paired.into_iter().map(|(_, l)| l).collect();
        }
        let label_map: BTreeMap<String, usize> = labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        let series = rows
            .iter()
            .map(|(l, v)| LabeledSeries {
                values: v.clone(),
                label: label_map[l],
            })
            .collect();
        Ok(Dataset {
            name,
            series,
            num_classes: label_map.len(),
            series_length: len,
            label_map,
        })
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.series.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.series {
            counts[s.label] += 1;
        }
        counts
    }
}

fn parse_rows(path: &Path, text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rows = Vec::new();
    let mut expected: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = if line.contains('\t') {
            line.split('\t').collect()
        } else if line.contains(',') {
            line.split(',').collect()
        } else {
            line.split_whitespace().collect()
        };
        let label = fields[0].trim().to_string();
        let mut values = Vec::with_capacity(fields.len() - 1);
        for (col, tok) in fields[1..].iter().enumerate() {
            let tok = tok.trim();
            match tok.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: lineno + 1,
                        column: col + 2,
                        token: tok.to_string(),
                    })
                }
            }
        }
        match expected {
            None => expected = Some(values.len()),
            Some(n) if n != values.len() => {
                return Err(Error::RaggedRow {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    expected: n,
                    found: values.len(),
                })
            }
            _ => {}
        }
        rows.push((label, values));
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Ok(rows)
}

fn dataset_name(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    stem.trim_end_matches("_TRAIN")
        .trim_end_matches("_TEST")
        .to_string()
}

/// Reads one UCR archive file: one series per line, label first, tab or
/// comma separated.
pub fn load_ucr_tsv(path: impl AsRef<Path>) -> Result<Dataset> {
    load_ucr_files(&[path.as_ref()])
}

/// Reads and pools several files (e.g. `_TRAIN` and `_TEST`) into one dataset.
pub fn load_ucr_files<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut expected: Option<(PathBuf, usize)> = None;
    for p in paths {
        let p = p.as_ref();
        let text = fs::read_to_string(p)?;
        let file_rows = parse_rows(p, &text)?;
        let len = file_rows[0].1.len();
        match &expected {
            None => expected = Some((p.to_path_buf(), len)),
            Some((first, n)) if *n != len => {
                return Err(Error::invalid(
                    "load_ucr_files",
                    format!(
                        "{} has length {len} but {} has length {n}",
                        p.display(),
                        first.display()
                    ),
                ))
            }
            _ => {}
        }
        rows.extend(file_rows);
    }
    let name = paths
        .first()
        .map(|p| dataset_name(p.as_ref()))
        .unwrap_or_default();
    Dataset::from_rows(name, rows)
}

/// Per-series z-normalization with population variance. Constant series
/// become all zeros.
pub fn znormalize(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for s in &mut out.series {
        znormalize_in_place(&mut s.values);
    }
    out
}

pub fn znormalize_in_place(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x = (*x - mean) / std);
    }
}

/// Validation partition carved out of the seen classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerSplit {
    pub inner_train_classes: Vec<usize>,
    pub val_classes: Vec<usize>,
    pub inner_train_idx: Vec<usize>,
    pub seen_val_idx: Vec<usize>,
    pub unseen_val_idx: Vec<usize>,
}

/// Class-wise partition; serialized as the split manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GzslSplit {
    pub seed: u64,
    pub dataset: String,
    pub num_series: usize,
    pub num_classes: usize,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub seen_test_idx: Vec<usize>,
    pub unseen_test_idx: Vec<usize>,
    pub inner: InnerSplit,
    pub warnings: Vec<String>,
}

/// `ceil(2C/3)` classes go to the seen side.
pub fn num_seen_classes(total: usize) -> usize {
    (2 * total).div_ceil(3)
}

/// Stratified holdout. Per class `floor(n/5)`; the remainder needed to reach
/// `round(N/5)` overall goes one sample each to the largest classes.
/// Returns `(kept, held)`, both sorted.
fn stratified_holdout(
    groups: &[(usize, Vec<usize>)],
    rng: &mut crate::numcore::Rng,
    what: &str,
    warnings: &mut Vec<String>,
) -> (Vec<usize>, Vec<usize>) {
    let total: usize = groups.iter().map(|(_, g)| g.len()).sum();
    let target = (2 * total * HOLDOUT_NUM + HOLDOUT_DEN) / (2 * HOLDOUT_DEN);
    let mut counts: Vec<usize> = groups
        .iter()
        .map(|(class, g)| {
            if g.len() < 2 {
                warnings.push(format!(
                    "class {class} has {} sample(s); {what} holdout skipped",
                    g.len()
                ));
                0
            } else {
                (g.len() * HOLDOUT_NUM / HOLDOUT_DEN).min(g.len() - 1)
            }
        })
        .collect();
    let mut remainder = target.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        groups[b]
            .1
            .len()
            .cmp(&groups[a].1.len())
            .then(groups[a].0.cmp(&groups[b].0))
    });
    for &g in &order {
        if remainder == 0 {
            break;
        }
        if groups[g].1.len() >= 2 && counts[g] + 1 < groups[g].1.len() {
            counts[g] += 1;
            remainder -= 1;
        }
    }
    if remainder > 0 {
        warnings.push(format!(
            "{what} holdout is {remainder} sample(s) short of its 20% target"
        ));
    }
    let mut kept = Vec::new();
    let mut held = Vec::new();
    for ((_, g), &h) in groups.iter().zip(&counts) {
        let mut idx = g.clone();
        idx.shuffle(rng);
        held.extend_from_slice(&idx[..h]);
        kept.extend_from_slice(&idx[h..]);
    }
    kept.sort_unstable();
    held.sort_unstable();
    (kept, held)
}

fn group_by_class(labels: &[usize], pool: &[usize], classes: &[usize]) -> Vec<(usize, Vec<usize>)> {
    classes
        .iter()
        .map(|&c| (c, pool.iter().copied().filter(|&i| labels[i] == c).collect()))
        .collect()
}

/// Seeded class-wise partition: seen/unseen classes, a seen-test holdout,
/// and an inner train/validation split of the seen classes.
pub fn make_gzsl_split(ds: &Dataset, seed: u64) -> Result<GzslSplit> {
    make_split_from_labels(&ds.name, &ds.labels(), ds.num_classes, seed)
}

/// Split construction from labels alone.
pub fn make_split_from_labels(
    name: &str,
    labels: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<GzslSplit> {
    if num_classes < 3 {
        return Err(Error::invalid(
            "make_gzsl_split",
            format!("need at least 3 classes, dataset has {num_classes}"),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::invalid(
            "make_gzsl_split",
            format!("label {bad} outside 0..{num_classes}"),
        ));
    }
    let mut rng = rng_for(seed, SPLIT_STREAM);
    let mut warnings = Vec::new();

    let mut classes: Vec<usize> = (0..num_classes).collect();
    classes.shuffle(&mut rng);
    let n_seen = num_seen_classes(num_classes);
    let mut seen_classes = classes[..n_seen].to_vec();
    let mut unseen_classes = classes[n_seen..].to_vec();
    seen_classes.sort_unstable();
    unseen_classes.sort_unstable();

    let all: Vec<usize> = (0..labels.len()).collect();
    let seen_groups = group_by_class(labels, &all, &seen_classes);
    let (train_idx, seen_test_idx) =
        stratified_holdout(&seen_groups, &mut rng, "seen-test", &mut warnings);
    let unseen_test_idx: Vec<usize> = all
        .iter()
        .copied()
        .filter(|&i| unseen_classes.binary_search(&labels[i]).is_ok())
        .collect();

    let mut shuffled_seen = seen_classes.clone();
    shuffled_seen.shuffle(&mut rng);
    let n_inner = seen_classes.len().div_ceil(2);
    let mut inner_train_classes = shuffled_seen[..n_inner].to_vec();
    let mut val_classes = shuffled_seen[n_inner..].to_vec();
    inner_train_classes.sort_unstable();
    val_classes.sort_unstable();

    let inner_groups = group_by_class(labels, &train_idx, &inner_train_classes);
    let (inner_train_idx, seen_val_idx) =
        stratified_holdout(&inner_groups, &mut rng, "seen-validation", &mut warnings);
    let unseen_val_idx: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|&i| val_classes.binary_search(&labels[i]).is_ok())
        .collect();

    for &c in &seen_classes {
        if !train_idx.iter().any(|&i| labels[i] == c) {
            warnings.push(format!("seen class {c} has no training samples"));
        }
    }
    for &c in &unseen_classes {
        if !labels.contains(&c) {
            warnings.push(format!("unseen class {c} has no samples"));
        }
    }

    Ok(GzslSplit {
        seed,
        dataset: name.to_string(),
        num_series: labels.len(),
        num_classes,
        seen_classes,
        unseen_classes,
        train_idx,
        seen_test_idx,
        unseen_test_idx,
        inner: InnerSplit {
            inner_train_classes,
            val_classes,
            inner_train_idx,
            seen_val_idx,
            unseen_val_idx,
        },
        warnings,
    })
}

impl GzslSplit {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Checks the partition invariants against `labels`.
    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        let fail = |m: String| Err(Error::Mismatch(m));
        if labels.len() != self.num_series {
            return fail(format!(
                "split covers {} series, dataset has {}",
                self.num_series,
                labels.len()
            ));
        }
        if self.seen_classes.iter().any(|c| self.unseen_classes.contains(c)) {
            return fail("seen and unseen classes overlap".into());
        }
        let mut seen_count = vec![0u8; labels.len()];
        for &i in self
            .train_idx
            .iter()
            .chain(&self.seen_test_idx)
            .chain(&self.unseen_test_idx)
        {
            if i >= labels.len() {
                return fail(format!("index {i} out of range"));
            }
            seen_count[i] += 1;
        }
        if seen_count.iter().any(|&c| c != 1) {
            return fail("train/seen-test/unseen-test do not partition the samples".into());
        }
        if self
            .unseen_test_idx
            .iter()
            .any(|&i| !self.unseen_classes.contains(&labels[i]))
        {
            return fail("unseen-test holds a seen-class sample".into());
        }
        if self
            .train_idx
            .iter()
            .chain(&self.seen_test_idx)
            .any(|&i| !self.seen_classes.contains(&labels[i]))
        {
            return fail("unseen-class sample on the seen side".into());
        }
        Ok(())
    }
}
