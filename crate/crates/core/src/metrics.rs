use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fm::{group_norms, FmParams, GroupLayout, Side};

/// Magnitudes at or below this count as zero in [`nnz_ratio`].
pub const ZERO_TOL: f64 = 1e-10;

/// `√(Σ (y − ŷ)² / n)`.
pub fn rmse(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Argument("rmse of no samples".into()));
    }
    let ss: f64 = predictions.iter().zip(labels).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok((ss / labels.len() as f64).sqrt())
}

/// Fraction of entries of `w` and `V` with magnitude above [`ZERO_TOL`]; the
/// bias is not counted.
pub fn nnz_ratio(p: &FmParams) -> f64 {
    let total = p.w.len() + p.v.len();
    if total == 0 {
        return 0.0;
    }
    let nz = p.w.iter().chain(&p.v).filter(|x| x.abs() > ZERO_TOL).count();
    nz as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub label: String,
    pub metagraph: String,
    pub side: Side,
    pub w_norm: f64,
    pub v_norm: f64,
    pub w_selected: bool,
    pub v_selected: bool,
}

/// A group is selected on the first (second) order side when its `w` (`V`)
/// block norm exceeds `threshold`.
pub fn report_selected(p: &FmParams, layout: &GroupLayout, threshold: f64) -> Vec<GroupReport> {
    let (nw, nv) = group_norms(p, layout);
    layout
        .groups()
        .iter()
        .enumerate()
        .map(|(l, g)| GroupReport {
            label: g.label(),
            metagraph: g.metagraph.clone(),
            side: g.side,
            w_norm: nw[l],
            v_norm: nv[l],
            w_selected: nw[l] > threshold,
            v_selected: nv[l] > threshold,
        })
        .collect()
}

/// Metagraphs with at least one selected group on either side, in layout
/// order.
pub fn selected_metagraphs(report: &[GroupReport]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for g in report {
        if (g.w_selected || g.v_selected) && !out.contains(&g.metagraph) {
            out.push(g.metagraph.clone());
        }
    }
    out
}

/// Sample mean and (n − 1)-normalized standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 0.0, 0.0], &[1.0, -1.0, 1.0]).unwrap(), 1.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[]).is_err());
    }

    #[test]
    fn nnz_examples() {
        let mut p = FmParams::zeros(4, 2);
        assert_eq!(nnz_ratio(&p), 0.0);
        p.w[0] = 1.0;
        p.w[3] = -2.0;
        p.v[1] = 0.5;
        p.v[2] = 0.5;
        p.v[5] = 0.5;
        p.v[7] = 1e-11;
        p.v[6] = 3.0;
        p.b = 9.0;
        assert_eq!(nnz_ratio(&p), 0.5);
        let dense = FmParams {
            b: 0.0,
            w: vec![1.0; 3],
            v: vec![1.0; 6],
            k: 2,
        };
        assert_eq!(nnz_ratio(&dense), 1.0);
    }

    #[test]
    fn planted_selection() {
        let layout = GroupLayout::from_ranks(&[("A".into(), 1), ("B".into(), 1), ("C".into(), 1)]);
        let mut p = FmParams::zeros(6, 1);
        assert!(report_selected(&p, &layout, 0.0)
            .iter()
            .all(|g| !g.w_selected && !g.v_selected));
        p.w[0] = 1.0;
        p.v[1] = 1.0;
        let r = report_selected(&p, &layout, 1e-6);
        let flagged: Vec<_> = r.iter().map(|g| (g.w_selected, g.v_selected)).collect();
        assert_eq!(
            flagged,
            [
                (true, false),
                (false, true),
                (false, false),
                (false, false),
                (false, false),
                (false, false)
            ]
        );
        assert_eq!(selected_metagraphs(&r), ["A", "B"]);
    }
}
