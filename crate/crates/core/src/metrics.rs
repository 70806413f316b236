//! Seen/unseen accuracy, harmonic mean and the area under the seen-unseen
//! accuracy curve traced by sweeping the stacking constant.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gzsl_model::{predict, ClassLayout};

/// Group accuracies plus the raw counts behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_s: f64,
    pub acc_u: f64,
    #[serde(rename = "H")]
    pub h: f64,
    /// Per-class mean accuracies, reported alongside the per-sample ones.
    pub macro_acc_s: f64,
    pub macro_acc_u: f64,
    pub seen_total: usize,
    pub seen_correct: usize,
    pub unseen_total: usize,
    pub unseen_correct: usize,
    pub gamma: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gamma: f64,
    pub acc_s: f64,
    pub acc_u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SUCurve {
    /// Ordered by strictly increasing `gamma`.
    pub points: Vec<SweepPoint>,
    pub ausuc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct GroupCounts {
    seen_total: usize,
    seen_correct: usize,
    unseen_total: usize,
    unseen_correct: usize,
}

fn count(preds: &[usize], labels: &[usize], layout: &ClassLayout) -> Result<GroupCounts> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(
            "accuracy_split",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    let mut c = GroupCounts::default();
    for (&p, &l) in preds.iter().zip(labels) {
        if layout.is_seen_class(l) {
            c.seen_total += 1;
            c.seen_correct += usize::from(p == l);
        } else {
            c.unseen_total += 1;
            c.unseen_correct += usize::from(p == l);
        }
    }
    if c.seen_total == 0 || c.unseen_total == 0 {
        return Err(Error::invalid(
            "accuracy_split",
            format!(
                "need both groups (seen={}, unseen={})",
                c.seen_total, c.unseen_total
            ),
        ));
    }
    Ok(c)
}

/// Per-sample top-1 accuracy within the seen and the unseen groups. A label
/// counts as seen when it is a seen class of `layout`.
pub fn accuracy_split(preds: &[usize], labels: &[usize], layout: &ClassLayout) -> Result<(f64, f64)> {
    let c = count(preds, labels, layout)?;
    Ok((
        c.seen_correct as f64 / c.seen_total as f64,
        c.unseen_correct as f64 / c.unseen_total as f64,
    ))
}

/// Mean of per-class accuracies within each group.
pub fn macro_accuracy_split(
    preds: &[usize],
    labels: &[usize],
    layout: &ClassLayout,
) -> Result<(f64, f64)> {
    count(preds, labels, layout)?;
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &l) in preds.iter().zip(labels) {
        let e = per_class.entry(l).or_default();
        e.0 += usize::from(p == l);
        e.1 += 1;
    }
    let mean = |seen: bool| {
        let accs: Vec<f64> = per_class
            .iter()
            .filter(|(c, _)| layout.is_seen_class(**c) == seen)
            .map(|(_, (ok, n))| *ok as f64 / *n as f64)
            .collect();
        accs.iter().sum::<f64>() / accs.len() as f64
    };
    Ok((mean(true), mean(false)))
}

/// `2 s u / (s + u)`, or 0 when either accuracy is 0.
pub fn harmonic_mean(acc_s: f64, acc_u: f64) -> f64 {
    if acc_s * acc_u == 0.0 {
        0.0
    } else {
        2.0 * acc_s * acc_u / (acc_s + acc_u)
    }
}

/// Applies calibrated stacking at `gamma` to every probability row.
pub fn predict_all(probs: &[Vec<f64>], layout: &ClassLayout, gamma: f64) -> Vec<usize> {
    probs.iter().map(|p| predict(p, layout, gamma)).collect()
}

pub fn evaluate(
    probs: &[Vec<f64>],
    labels: &[usize],
    layout: &ClassLayout,
    gamma: f64,
    tau: f64,
) -> Result<EvalReport> {
    let preds = predict_all(probs, layout, gamma);
    let c = count(&preds, labels, layout)?;
    let acc_s = c.seen_correct as f64 / c.seen_total as f64;
    let acc_u = c.unseen_correct as f64 / c.unseen_total as f64;
    let (macro_acc_s, macro_acc_u) = macro_accuracy_split(&preds, labels, layout)?;
    Ok(EvalReport {
        acc_s,
        acc_u,
        h: harmonic_mean(acc_s, acc_u),
        macro_acc_s,
        macro_acc_u,
        seen_total: c.seen_total,
        seen_correct: c.seen_correct,
        unseen_total: c.unseen_total,
        unseen_correct: c.unseen_correct,
        gamma,
        tau,
    })
}

/// `-1.00, -0.95, ..., 0.00` followed by `0.001, 0.002, ..., 1.000`:
/// 1021 strictly increasing values.
pub fn gamma_grid() -> Vec<f64> {
    let coarse = (0..=20).map(|i| (i as f64 - 20.0) / 20.0);
    let fine = (1..=1000).map(|k| k as f64 / 1000.0);
    coarse.chain(fine).collect()
}

/// Trapezoid area under the `(acc_s, acc_u)` staircase after sorting by
/// `acc_s` (ties by descending `acc_u`), dropping duplicates and anchoring
/// at `(0, max acc_u)` and `(max acc_s, 0)`.
pub fn area_under_curve(points: &[(f64, f64)]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let max_s = points.iter().map(|p| p.0).fold(0.0, f64::max);
    let max_u = points.iter().map(|p| p.1).fold(0.0, f64::max);
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.push((0.0, max_u));
    pts.push((max_s, 0.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup();
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Re-runs calibrated stacking at every grid value.
pub fn sweep(
    probs: &[Vec<f64>],
    labels: &[usize],
    layout: &ClassLayout,
    grid: &[f64],
) -> Result<SUCurve> {
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("sweep", "gamma grid must be strictly increasing"));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &gamma in grid {
        let (acc_s, acc_u) = accuracy_split(&predict_all(probs, layout, gamma), labels, layout)?;
        points.push(SweepPoint { gamma, acc_s, acc_u });
    }
    let ausuc = area_under_curve(&points.iter().map(|p| (p.acc_s, p.acc_u)).collect::<Vec<_>>());
    Ok(SUCurve { points, ausuc })
}

pub fn ausuc_sweep(probs: &[Vec<f64>], labels: &[usize], layout: &ClassLayout) -> Result<SUCurve> {
    sweep(probs, labels, layout, &gamma_grid())
}

impl SUCurve {
    /// Grid point with the largest harmonic mean; the smallest gamma wins ties.
    pub fn best_h(&self) -> Option<SweepPoint> {
        let mut best: Option<(f64, SweepPoint)> = None;
        for p in &self.points {
            let h = harmonic_mean(p.acc_s, p.acc_u);
            if best.map_or(true, |(bh, _)| h > bh) {
                best = Some((h, *p));
            }
        }
        best.map(|(_, p)| p)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("gamma,acc_s,acc_u\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.gamma, p.acc_s, p.acc_u);
        }
        out
    }

    /// Standalone line plot of unseen against seen accuracy.
    pub fn to_svg(&self, title: &str) -> String {
        const SIZE: f64 = 400.0;
        const MARGIN: f64 = 50.0;
        let x = |v: f64| MARGIN + v * SIZE;
        let y = |v: f64| MARGIN + (1.0 - v) * SIZE;
        let mut pts: Vec<(f64, f64)> = self.points.iter().map(|p| (p.acc_s, p.acc_u)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
        pts.dedup();
        let path: Vec<String> = pts
            .iter()
            .map(|(s, u)| format!("{:.2},{:.2}", x(*s), y(*u)))
            .collect();
        let total = SIZE + 2.0 * MARGIN;
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let v = i as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{v}</text>"#,
                x(v),
                MARGIN + SIZE + 16.0
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v}</text>"#,
                MARGIN - 6.0,
                y(v) + 4.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">seen accuracy</text>"#,
            MARGIN + SIZE / 2.0,
            total - 10.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="14" y="{:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {:.1})">unseen accuracy</text>"#,
            MARGIN + SIZE / 2.0,
            MARGIN + SIZE / 2.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="30" font-size="14" text-anchor="middle">{} (AUSUC {:.4})</text>"#,
            total / 2.0,
            escape(title),
            self.ausuc
        );
        svg.push_str("</svg>\n");
        svg
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> ClassLayout {
        ClassLayout::new(vec![0, 1], vec![2]).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        let l = layout();
        let labels = [0, 1, 0, 2, 2];
        assert_eq!(accuracy_split(&labels, &labels, &l).unwrap(), (1.0, 1.0));
        let (s, u) = accuracy_split(&[0, 0, 0, 2, 1], &labels, &l).unwrap();
        assert!((s - 2.0 / 3.0).abs() < 1e-12 && u == 0.5);
        let (s, _) = accuracy_split(&[2, 2, 2, 2, 2], &labels, &l).unwrap();
        assert_eq!(s, 0.0);
        assert!(accuracy_split(&[0, 1], &[0, 1], &l).is_err());
        assert!(accuracy_split(&[2], &[2], &l).is_err());
    }

    #[test]
    fn macro_differs_from_micro() {
        let l = layout();
        let labels = [0, 0, 0, 1, 2];
        let preds = [0, 0, 0, 0, 2];
        let (s, _) = accuracy_split(&preds, &labels, &l).unwrap();
        let (ms, mu) = macro_accuracy_split(&preds, &labels, &l).unwrap();
        assert_eq!(s, 0.75);
        assert_eq!(ms, 0.5);
        assert_eq!(mu, 1.0);
    }

    #[test]
    fn harmonic_identities() {
        assert_eq!(harmonic_mean(0.3, 0.3), 0.3);
        assert_eq!(harmonic_mean(0.0, 0.8), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert!((harmonic_mean(0.1, 1.0) - 0.181_818).abs() < 1e-6);
    }

    #[test]
    fn grid_layout() {
        let g = gamma_grid();
        assert_eq!(g.len(), 1021);
        assert_eq!(g[0], -1.0);
        assert_eq!(g[20], 0.0);
        assert_eq!(g[21], 0.001);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!((g[1] - g[0] - 0.05).abs() < 1e-12);
        assert!(g[21..].windows(2).all(|w| (w[1] - w[0] - 0.001).abs() < 1e-9));
    }

    #[test]
    fn area_examples() {
        assert!((area_under_curve(&[(0.0, 1.0), (1.0, 0.0)]) - 0.5).abs() < 1e-15);
        assert_eq!(area_under_curve(&[(1.0, 1.0); 5]), 1.0);
        // Staircase with a vertical step at acc_s = 0.5.
        let a = area_under_curve(&[(0.0, 1.0), (0.5, 1.0), (0.5, 0.5), (1.0, 0.5)]);
        assert!((a - 0.75).abs() < 1e-15);
        assert_eq!(area_under_curve(&[]), 0.0);
    }

    #[test]
    fn perfect_classifier_sweep() {
        let l = layout();
        let labels = vec![0, 1, 2, 2];
        let probs: Vec<Vec<f64>> = labels
            .iter()
            .map(|&c| {
                let mut p = vec![0.0; 3];
                p[c] = 1.0;
                p
            })
            .collect();
        let curve = ausuc_sweep(&probs, &labels, &l).unwrap();
        assert_eq!(curve.points.len(), 1021);
        assert_eq!(curve.ausuc, 1.0);
        let best = curve.best_h().unwrap();
        assert_eq!(harmonic_mean(best.acc_s, best.acc_u), 1.0);
        assert_eq!(curve.to_csv().lines().count(), 1022);
        assert!(curve.to_svg("t<1>").contains("t&lt;1&gt;"));
    }
}
