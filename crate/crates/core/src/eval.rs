//! One-pass evaluation: success and precision curves, AUC, and the
//! orientation success rate.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Annotation;
use crate::error::{invalid, shape_mismatch, Result};
use crate::geometry::BBox;
use crate::tensor::wrap_angle;
use crate::tracker::ResultRow;

pub const SUCCESS_POINTS: usize = 101;
pub const PRECISION_POINTS: usize = 51;
pub const PRECISION_HEADLINE_PX: usize = 20;

/// Angular ranges `±δ` used in the orientation table.
pub const SR_RANGES: [f64; 3] = [PI / 4.0, PI / 8.0, PI / 16.0];
/// IoU thresholds used in the orientation table.
pub const SR_ALPHAS: [f64; 2] = [0.5, 0.7];

/// Overlap thresholds `0, 0.01, …, 1`.
pub fn success_thresholds() -> Vec<f64> {
    (0..SUCCESS_POINTS).map(|i| i as f64 / 100.0).collect()
}

/// Center-error thresholds `0, 1, …, 50` px.
pub fn precision_thresholds() -> Vec<f64> {
    (0..PRECISION_POINTS).map(|i| i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrEntry {
    /// Half-width of the angular range, radians.
    pub range: f64,
    pub alpha: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub success: Vec<f64>,
    pub precision: Vec<f64>,
    pub success_auc: f64,
    pub precision_at_20: f64,
    pub sr: Vec<SrEntry>,
    pub frames: usize,
}

impl EvalResult {
    pub fn sr_value(&self, range: f64, alpha: f64) -> Option<f64> {
        self.sr
            .iter()
            .find(|e| e.range == range && e.alpha == alpha)
            .map(|e| e.value)
    }
}

/// Success curve (fraction of frames with IoU at least τ) and precision
/// curve (fraction with center error at most d).
pub fn ope_curves(pred: &[BBox], gt: &[BBox]) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.len() != gt.len() {
        return shape_mismatch("ope_curves", &[pred.len()], &[gt.len()]);
    }
    if pred.is_empty() {
        return invalid("cannot score an empty sequence");
    }
    let n = pred.len() as f64;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let errs: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.center_distance(g)).collect();
    let success = success_thresholds()
        .iter()
        .map(|&t| ious.iter().filter(|&&v| v >= t).count() as f64 / n)
        .collect();
    let precision = precision_thresholds()
        .iter()
        .map(|&d| errs.iter().filter(|&&e| e <= d).count() as f64 / n)
        .collect();
    Ok((success, precision))
}

pub fn auc(curve: &[f64]) -> f64 {
    curve.iter().sum::<f64>() / curve.len() as f64
}

/// Fraction of frames with IoU above `alpha` and wrapped angular error at
/// most `range` (all angles in radians).
pub fn orientation_sr(pred: &[f64], gt: &[f64], ious: &[f64], range: f64, alpha: f64) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != ious.len() {
        return shape_mismatch("orientation_sr", &[pred.len(), gt.len()], &[ious.len()]);
    }
    if pred.is_empty() {
        return invalid("orientation success rate of an empty sequence");
    }
    if !(range > 0.0) {
        return invalid(format!("angular range must be positive, got {range}"));
    }
    let hits = pred
        .iter()
        .zip(gt)
        .zip(ious)
        .filter(|((&p, &g), &iou)| iou > alpha && wrap_angle(p - g).abs() <= range)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Expected orientation success rate of a uniform random guess: `δ/π`.
pub fn random_baseline(range: f64) -> Result<f64> {
    if !(range > 0.0 && range <= PI) {
        return invalid(format!("angular range must lie in (0, π], got {range}"));
    }
    Ok(range / PI)
}

/// Scores one tracked sequence against its ground truth.
pub fn evaluate_sequence(results: &[ResultRow], truth: &[Annotation]) -> Result<EvalResult> {
    if results.len() != truth.len() {
        return shape_mismatch("evaluate_sequence", &[results.len()], &[truth.len()]);
    }
    let pred: Vec<BBox> = results.iter().map(|r| r.bbox()).collect();
    let gt: Vec<BBox> = truth.iter().map(|a| a.bbox()).collect();
    let (success, precision) = ope_curves(&pred, &gt)?;
    let ious: Vec<f64> = pred.iter().zip(&gt).map(|(p, g)| p.iou(g)).collect();
    let pa: Vec<f64> = results.iter().map(|r| r.orientation_deg.to_radians()).collect();
    let ga: Vec<f64> = truth.iter().map(|a| a.angle_deg.to_radians()).collect();
    let mut sr = Vec::new();
    for &range in &SR_RANGES {
        for &alpha in &SR_ALPHAS {
            sr.push(SrEntry {
                range,
                alpha,
                value: orientation_sr(&pa, &ga, &ious, range, alpha)?,
            });
        }
    }
    Ok(EvalResult {
        success_auc: auc(&success),
        precision_at_20: precision[PRECISION_HEADLINE_PX],
        success,
        precision,
        sr,
        frames: results.len(),
    })
}

/// Mean of per-sequence curves and table entries, summed in the given
/// order.
pub fn aggregate(results: &[EvalResult]) -> Result<EvalResult> {
    let Some(first) = results.first() else {
        return invalid("nothing to aggregate");
    };
    let n = results.len() as f64;
    let mean = |f: &dyn Fn(&EvalResult) -> &[f64]| -> Vec<f64> {
        let mut acc = vec![0.0; f(first).len()];
        for r in results {
            for (a, v) in acc.iter_mut().zip(f(r)) {
                *a += v;
            }
        }
        acc.iter().map(|v| v / n).collect()
    };
    let success = mean(&|r| &r.success);
    let precision = mean(&|r| &r.precision);
    let sr = first
        .sr
        .iter()
        .enumerate()
        .map(|(i, e)| SrEntry {
            range: e.range,
            alpha: e.alpha,
            value: results.iter().map(|r| r.sr[i].value).sum::<f64>() / n,
        })
        .collect();
    Ok(EvalResult {
        success_auc: auc(&success),
        precision_at_20: precision[PRECISION_HEADLINE_PX],
        success,
        precision,
        sr,
        frames: results.iter().map(|r| r.frames).sum(),
    })
}

/// Writes `metrics.json`, `success.csv` and `precision.csv` into `dir`.
pub fn write_report(dir: &Path, result: &EvalResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(result)?,
    )?;
    let mut w = csv::Writer::from_path(dir.join("success.csv"))?;
    w.write_record(["threshold", "success"])?;
    for (t, v) in success_thresholds().iter().zip(&result.success) {
        w.write_record([t.to_string(), v.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("precision.csv"))?;
    w.write_record(["threshold_px", "precision"])?;
    for (t, v) in precision_thresholds().iter().zip(&result.precision) {
        w.write_record([t.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_tracking() {
        let b = vec![BBox::new(1.0, 2.0, 3.0, 4.0); 5];
        let (s, p) = ope_curves(&b, &b).unwrap();
        assert!(s.iter().all(|&v| v == 1.0));
        assert!(p.iter().all(|&v| v == 1.0));
        assert_eq!(auc(&s), 1.0);
    }

    #[test]
    fn all_lost() {
        let gt = vec![BBox::new(0.0, 0.0, 2.0, 2.0); 3];
        let pred = vec![BBox::new(100.0, 100.0, 2.0, 2.0); 3];
        let (s, p) = ope_curves(&pred, &gt).unwrap();
        assert!(s[1..].iter().all(|&v| v == 0.0));
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_frame_hand_count() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0); 2];
        // IoU 0.4: overlap 40 of union 100 needs width 4 inside the box
        let pred = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(0.0, 0.0, 4.0, 10.0)];
        assert!((pred[1].iou(&gt[1]) - 0.4).abs() < 1e-15);
        let (s, _) = ope_curves(&pred, &gt).unwrap();
        assert_eq!(s[50], 0.5);
        assert!(ope_curves(&pred[..1], &gt).is_err());
    }

    #[test]
    fn curves_monotone_and_bounded() {
        let gt: Vec<BBox> = (0..20).map(|i| BBox::new(i as f64, 0.0, 10.0, 8.0)).collect();
        let pred: Vec<BBox> = (0..20)
            .map(|i| BBox::new(i as f64 * 1.7, (i % 3) as f64, 9.0, 9.0))
            .collect();
        let (s, p) = ope_curves(&pred, &gt).unwrap();
        for c in [&s, &p] {
            assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(s.windows(2).all(|w| w[1] <= w[0]));
        assert!(p.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn orientation_success_rate() {
        let ones = [1.0; 4];
        let a = [0.1, -2.0, 3.0, 0.0];
        for r in [0.01, 0.5, PI] {
            assert_eq!(orientation_sr(&a, &a, &ones, r, 0.5).unwrap(), 1.0);
        }
        let pred = [0.0, 0.1, 1.0, 0.0];
        let gt = [0.0, 0.0, 0.0, 0.0];
        let ious = [0.9, 0.8, 0.9, 0.3];
        assert_eq!(orientation_sr(&pred, &gt, &ious, 0.2, 0.5).unwrap(), 0.5);
        assert!(orientation_sr(&[], &[], &[], 0.2, 0.5).is_err());
    }

    #[test]
    fn wrapped_differences() {
        let pred = [PI - 0.05];
        let gt = [-PI + 0.05];
        assert_eq!(orientation_sr(&pred, &gt, &[1.0], 0.11, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn full_range_equals_plain_success() {
        let ious = [0.2, 0.6, 0.51, 0.5, 0.9];
        let pred = [0.0, 1.0, 2.0, 3.0, -3.0];
        let gt = [3.0, -1.0, 0.5, 0.0, 2.0];
        let sr = orientation_sr(&pred, &gt, &ious, PI, 0.5).unwrap();
        let plain = ious.iter().filter(|&&v| v > 0.5).count() as f64 / 5.0;
        assert_eq!(sr, plain);
    }

    #[test]
    fn random_baselines() {
        assert_eq!(random_baseline(PI / 4.0).unwrap(), 0.25);
        assert_eq!(random_baseline(PI / 8.0).unwrap(), 0.125);
        assert_eq!(random_baseline(PI / 16.0).unwrap(), 0.0625);
        assert_eq!(random_baseline(PI).unwrap(), 1.0);
        assert!(random_baseline(0.0).is_err());
    }

    fn fake(seed: usize) -> EvalResult {
        let gt: Vec<Annotation> = (0..10)
            .map(|i| Annotation::new(i, BBox::new(i as f64, 0.0, 10.0, 10.0), i as f64))
            .collect();
        let rows: Vec<ResultRow> = (0..10)
            .map(|i| ResultRow {
                frame: i,
                x: (i * seed) as f64 * 0.7,
                y: 0.0,
                w: 10.0,
                h: 10.0,
                orientation_deg: (i * seed) as f64,
                score: 0.0,
            })
            .collect();
        evaluate_sequence(&rows, &gt).unwrap()
    }

    #[test]
    fn aggregation_is_mean_and_order_free() {
        let rs = vec![fake(1), fake(2), fake(3)];
        let a = aggregate(&rs).unwrap();
        let b = aggregate(&[rs[2].clone(), rs[0].clone(), rs[1].clone()]).unwrap();
        assert!((a.success_auc - b.success_auc).abs() < 1e-15);
        let m = (rs[0].success[30] + rs[1].success[30] + rs[2].success[30]) / 3.0;
        assert!((a.success[30] - m).abs() < 1e-15);
        assert_eq!(a.frames, 30);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &fake(1)).unwrap();
        let text = std::fs::read_to_string(dir.path().join("success.csv")).unwrap();
        assert_eq!(text.lines().count(), SUCCESS_POINTS + 1);
        let m: EvalResult =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap())
                .unwrap();
        assert_eq!(m, fake(1));
    }
}
