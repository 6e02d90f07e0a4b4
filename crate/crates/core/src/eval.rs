//! Evaluation: per-vertex L1 reconstruction error, PCK curves with AUC, and
//! the loss-ablation grid.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::mesh::Mesh;
use crate::tensor::Tensor;

/// Mean over vertices of `|pred_i - gt_i|_1`, in mesh units (mm).
pub fn reconstruction_error(pred: &Mesh, gt: &Mesh) -> Result<f64> {
    if pred.num_vertices() != gt.num_vertices() {
        return Err(Error::Topology(format!(
            "reconstruction error needs equal vertex counts, got {} and {}",
            pred.num_vertices(),
            gt.num_vertices()
        )));
    }
    if gt.num_vertices() == 0 {
        return Ok(0.0);
    }
    let total: f64 = pred
        .vertices()
        .iter()
        .zip(gt.vertices())
        .map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs())
        .sum();
    Ok(total / gt.num_vertices() as f64)
}

/// 20 to 50 mm in 1 mm steps.
pub fn default_thresholds() -> Vec<f64> {
    (20..=50).map(f64::from).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub auc: f64,
}

fn keypoint_errors(pred: &Tensor, gt: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != gt.shape() || pred.rank() != 2 || pred.shape()[1] != 3 {
        return Err(Error::Shape {
            op: "pck",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    Ok((0..pred.shape()[0])
        .map(|k| {
            let (a, b) = (pred.row(k), gt.row(k));
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .collect())
}

/// Trapezoidal area under `values` over the thresholds, normalized by the
/// threshold range (a single threshold gives its own value).
pub fn trapezoid_auc(thresholds: &[f64], values: &[f64]) -> f64 {
    if thresholds.len() == 1 {
        return values[0];
    }
    let range = thresholds[thresholds.len() - 1] - thresholds[0];
    let area: f64 = thresholds
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum();
    area / range
}

fn curve(errors: &[f64], thresholds: &[f64]) -> Result<PckCurve> {
    if thresholds.is_empty() {
        return Err(Error::Config("PCK needs at least one threshold".into()));
    }
    if thresholds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("PCK thresholds must be strictly increasing".into()));
    }
    if errors.is_empty() {
        return Err(Error::Config("PCK needs at least one keypoint".into()));
    }
    let values: Vec<f64> = thresholds
        .iter()
        .map(|&r| errors.iter().filter(|&&e| e <= r).count() as f64 / errors.len() as f64)
        .collect();
    let auc = trapezoid_auc(thresholds, &values);
    Ok(PckCurve {
        thresholds: thresholds.to_vec(),
        values,
        auc,
    })
}

/// Fraction of keypoints (`K x 3`) within each radius.
pub fn pck(pred: &Tensor, gt: &Tensor, thresholds: &[f64]) -> Result<PckCurve> {
    curve(&keypoint_errors(pred, gt)?, thresholds)
}

/// PCK pooled over the keypoints of many samples.
pub fn pck_pooled(pairs: &[(Tensor, Tensor)], thresholds: &[f64]) -> Result<PckCurve> {
    let mut errors = Vec::new();
    for (p, g) in pairs {
        errors.extend(keypoint_errors(p, g)?);
    }
    curve(&errors, thresholds)
}

impl PckCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold_mm,pck\n");
        for (t, v) in self.thresholds.iter().zip(&self.values) {
            let _ = writeln!(s, "{t},{v}");
        }
        s
    }

    /// Line plot of one or more labelled curves.
    pub fn to_svg(curves: &[(&str, &PckCurve)]) -> String {
        let (w, h, m) = (480.0, 320.0, 48.0);
        let (lo, hi) = curves.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, c)| {
            (lo.min(c.thresholds[0]), hi.max(*c.thresholds.last().expect("non-empty")))
        });
        let span = if hi > lo { hi - lo } else { 1.0 };
        let x = |t: f64| m + (t - lo) / span * (w - 2.0 * m);
        let y = |v: f64| h - m - v * (h - 2.0 * m);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{m} {m} L{m} {} L{} {}" stroke="black" fill="none"/>"#,
            h - m,
            w - m,
            h - m
        );
        for v in [0.0, 0.5, 1.0] {
            let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{v}</text>"#, m - 6.0, y(v) + 4.0);
        }
        for t in [lo, hi] {
            let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{t}</text>"#, x(t), h - m + 16.0);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">error threshold (mm)</text>"#, w / 2.0, h - 10.0);
        let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
        for (i, (label, c)) in curves.iter().enumerate() {
            let color = palette[i % palette.len()];
            let pts: Vec<String> = c.thresholds.iter().zip(&c.values).map(|(&t, &v)| format!("{:.2},{:.2}", x(t), y(v))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#, pts.join(" "));
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="11" fill="{color}">{label} (AUC {:.3})</text>"#,
                m + 8.0,
                m + 14.0 * (i as f64 + 1.0),
                c.auc
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// One configuration of the loss ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub key: String,
    pub objective: String,
    pub weights: LossWeights,
    /// False when the Laplacian weight is zero, so its split does not apply.
    pub alpha_beta_apply: bool,
}

impl AblationRow {
    fn new(key: &str, objective: &str, edit: impl Fn(&mut LossWeights)) -> Self {
        let mut weights = LossWeights::default();
        edit(&mut weights);
        Self {
            key: key.into(),
            objective: objective.into(),
            alpha_beta_apply: weights.gamma != 0.0,
            weights,
        }
    }
}

/// The eight ablation rows, in reporting order.
pub fn ablation_grid() -> Vec<AblationRow> {
    vec![
        AblationRow::new("no_shot", "surface descriptor", |w| w.mu = 0.0),
        AblationRow::new("no_smoothness", "surface smoothness", |w| {
            w.theta = 0.0;
            w.gamma = 0.0;
        }),
        AblationRow::new("no_normal", "surface normal error", |w| w.theta = 0.0),
        AblationRow::new("no_laplacian", "Laplacian error", |w| w.gamma = 0.0),
        AblationRow::new("no_vertex_laplacian", "vertex Laplacian error", |w| w.alpha = 0.0),
        AblationRow::new("no_keypoint_laplacian", "keypoint Laplacian error", |w| w.beta = 0.0),
        AblationRow::new("no_quadratic", "total loss without quadric term", |w| w.phi = 0.0),
        AblationRow::new("full", "total loss", |_| {}),
    ]
}

/// Rows of `grid` whose keys are listed, in grid order.
pub fn select_rows(grid: &[AblationRow], keys: &[String]) -> Result<Vec<AblationRow>> {
    for k in keys {
        if !grid.iter().any(|r| &r.key == k) {
            return Err(Error::Config(format!("unknown ablation row `{k}`")));
        }
    }
    Ok(grid.iter().filter(|r| keys.contains(&r.key)).cloned().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    /// Mean held-out reconstruction error (mm), absent when the row failed.
    pub error_mm: Option<f64>,
    pub failure: Option<String>,
}

/// Runs every row (in parallel, each with its own state) and keeps going
/// past failing rows.
pub fn run_ablation<F>(rows: &[AblationRow], run: F) -> Vec<AblationResult>
where
    F: Fn(&AblationRow) -> Result<f64> + Sync,
{
    rows.par_iter()
        .map(|row| match run(row) {
            Ok(e) => AblationResult {
                row: row.clone(),
                error_mm: Some(e),
                failure: None,
            },
            Err(e) => AblationResult {
                row: row.clone(),
                error_mm: None,
                failure: Some(e.to_string()),
            },
        })
        .collect()
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s = String::from("key,lambda,mu,theta,gamma,alpha,beta,phi,reconstruction_error_mm,status\n");
    for r in results {
        let w = &r.row.weights;
        let ab = |v: f64| if r.row.alpha_beta_apply { v.to_string() } else { "n/a".into() };
        let (err, status) = match (&r.error_mm, &r.failure) {
            (Some(e), _) => (e.to_string(), "ok".to_string()),
            (None, Some(f)) => (String::new(), format!("\"failed: {}\"", f.replace('"', "'"))),
            (None, None) => (String::new(), "failed".into()),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{err},{status}",
            r.row.key,
            w.lambda,
            w.mu,
            w.theta,
            w.gamma,
            ab(w.alpha),
            ab(w.beta),
            w.phi
        );
    }
    s
}

pub fn ablation_json(results: &[AblationResult]) -> Result<String> {
    let rows: Vec<serde_json::Value> = results
        .iter()
        .map(|r| {
            let w = &r.row.weights;
            let ab = |v: f64| if r.row.alpha_beta_apply { serde_json::json!(v) } else { serde_json::Value::Null };
            serde_json::json!({
                "key": r.row.key,
                "objective": r.row.objective,
                "lambda": w.lambda,
                "mu": w.mu,
                "theta": w.theta,
                "gamma": w.gamma,
                "alpha": ab(w.alpha),
                "beta": ab(w.beta),
                "phi": w.phi,
                "delta": w.delta,
                "reconstruction_error_mm": r.error_mm,
                "failure": r.failure,
            })
        })
        .collect();
    Ok(serde_json::to_string_pretty(&rows)? + "\n")
}
