//! Accuracy and reporting helpers: median posterior-predictive distance and
//! the per-round summary table.

use super::InferenceError;

/// Median Euclidean distance between posterior-predictive samples and the
/// observed outcome.
pub fn median_distance(predictive: &[Vec<f64>], y_o: &[f64]) -> Result<f64, InferenceError> {
    if predictive.is_empty() {
        return Err(InferenceError::EmptySamples);
    }
    let mut dists: Vec<f64> = predictive
        .iter()
        .map(|y| {
            y.iter()
                .zip(y_o)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = dists.len();
    Ok(if n % 2 == 1 { dists[n / 2] } else { 0.5 * (dists[n / 2 - 1] + dists[n / 2]) })
}

/// One row of the cross-seed summary table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ReportRow {
    pub round: usize,
    pub eig_mean: f64,
    /// Standard error over seeds; None with a single seed.
    pub eig_se: Option<f64>,
    pub checkpoint_eig_mean: f64,
    pub median_distance_mean: Option<f64>,
    pub median_distance_se: Option<f64>,
    /// Classifier-based local diagnostic is not part of this pipeline.
    pub lc2st: &'static str,
}

/// Per-seed, per-round metrics feeding the report.
#[derive(Debug, Clone)]
pub struct SeedRound {
    pub eig: f64,
    pub checkpoint_eig: f64,
    pub median_distance: Option<f64>,
}

fn mean_se(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, Some((var / n as f64).sqrt()))
}

/// Aggregate per-seed round metrics into mean +/- SE rows.
pub fn eig_report(per_seed: &[Vec<SeedRound>]) -> Vec<ReportRow> {
    assert!(!per_seed.is_empty(), "no runs to report");
    let rounds = per_seed[0].len();
    assert!(per_seed.iter().all(|s| s.len() == rounds), "seed round counts differ");
    (0..rounds)
        .map(|r| {
            let eigs: Vec<f64> = per_seed.iter().map(|s| s[r].eig).collect();
            let ckpt: Vec<f64> = per_seed.iter().map(|s| s[r].checkpoint_eig).collect();
            let med: Vec<f64> =
                per_seed.iter().filter_map(|s| s[r].median_distance).collect();
            let (eig_mean, eig_se) = mean_se(&eigs);
            let (ckpt_mean, _) = mean_se(&ckpt);
            let (med_mean, med_se) = if med.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_se(&med);
                (Some(m), s)
            };
            ReportRow {
                round: r + 1,
                eig_mean,
                eig_se,
                checkpoint_eig_mean: ckpt_mean,
                median_distance_mean: med_mean,
                median_distance_se: med_se,
                lc2st: "n/a",
            }
        })
        .collect()
}

/// Plain-text table of the report rows.
pub fn render_report(rows: &[ReportRow]) -> String {
    let mut out = String::from("round  EIG (mean +/- SE)      ckpt EIG   Med. dist            L-C2ST\n");
    for r in rows {
        let eig = match r.eig_se {
            Some(se) => format!("{:.4} +/- {:.4}", r.eig_mean, se),
            None => format!("{:.4}", r.eig_mean),
        };
        let med = match (r.median_distance_mean, r.median_distance_se) {
            (Some(m), Some(se)) => format!("{m:.4} +/- {se:.4}"),
            (Some(m), None) => format!("{m:.4}"),
            _ => "-".to_string(),
        };
        out.push_str(&format!(
            "{:<6} {:<22} {:<10.4} {:<20} {}\n",
            r.round, eig, r.checkpoint_eig_mean, med, r.lc2st
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_identical_points_is_zero() {
        let samples = vec![vec![1.0, 2.0]; 10];
        assert_eq!(median_distance(&samples, &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn median_is_robust_to_outliers() {
        let samples = vec![vec![1.0], vec![2.0], vec![100.0]];
        assert_eq!(median_distance(&samples, &[0.0]).unwrap(), 2.0);
    }

    #[test]
    fn empty_sample_set_is_an_error() {
        assert!(median_distance(&[], &[0.0]).is_err());
    }

    #[test]
    fn single_seed_has_no_se() {
        let rows = eig_report(&[vec![SeedRound {
            eig: 1.0,
            checkpoint_eig: 1.2,
            median_distance: Some(3.0),
        }]]);
        assert_eq!(rows.len(), 1);
        assert!(rows[0].eig_se.is_none());
        assert_eq!(rows[0].lc2st, "n/a");
    }

    #[test]
    fn three_seed_summary_arithmetic() {
        let mk = |eig: f64| {
            vec![SeedRound { eig, checkpoint_eig: eig, median_distance: None }]
        };
        let rows = eig_report(&[mk(1.0), mk(1.5), mk(2.0)]);
        assert!((rows[0].eig_mean - 1.5).abs() < 1e-12);
        let se = rows[0].eig_se.unwrap();
        assert!((se - 0.5 / (3.0f64).sqrt()).abs() < 1e-9, "se {se}");
        assert!((se - 0.2887).abs() < 1e-4);
        let table = render_report(&rows);
        assert!(table.contains("n/a"));
    }
}
