//! Per-phase time totals and loss-curve plots from metrics records.

use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};

use crate::train::{MetricsRecord, Phase};

/// Totals of one phase of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTotal {
    pub stage: usize,
    pub phase: Phase,
    pub epochs: usize,
    pub seconds: f64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub best_val_loss: f64,
}

/// Groups consecutive records of the same stage and phase, in run order.
pub fn phase_totals(records: &[MetricsRecord]) -> Vec<PhaseTotal> {
    let mut out: Vec<PhaseTotal> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some(t) if t.stage == r.stage && t.phase == r.phase => {
                t.epochs += 1;
                t.seconds += r.epoch_seconds;
                t.final_train_loss = r.train_loss;
                t.final_val_loss = r.val_loss;
                t.best_val_loss = t.best_val_loss.min(r.val_loss);
            }
            _ => out.push(PhaseTotal {
                stage: r.stage,
                phase: r.phase,
                epochs: 1,
                seconds: r.epoch_seconds,
                final_train_loss: r.train_loss,
                final_val_loss: r.val_loss,
                best_val_loss: r.val_loss,
            }),
        }
    }
    out
}

pub fn write_phase_totals<W: io::Write>(out: W, totals: &[PhaseTotal]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for t in totals {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

fn color(phase: Phase) -> &'static str {
    match phase {
        Phase::Coarse => "#1f77b4",
        Phase::Dense => "#ff7f0e",
        Phase::Finetune => "#2ca02c",
    }
}

/// Validation loss against the run-wide epoch index, one polyline per
/// phase of each stage. The y axis is log10 when every loss is positive.
pub fn loss_curve_svg(records: &[MetricsRecord]) -> String {
    let log = records.iter().all(|r| r.val_loss > 0.0);
    let y_of = |v: f64| if log { v.log10() } else { v };
    let ys: Vec<f64> = records.iter().map(|r| y_of(r.val_loss)).collect();
    let (mut lo, mut hi) = ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    if !(lo.is_finite() && hi.is_finite()) {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let n = records.len().max(2) as f64;
    let px = |i: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / (n - 1.0);
    let py = |y: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (y - lo) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{x0} {y0} L{x0} {y1} L{x1} {y1}" fill="none" stroke="black"/>"#
    );
    let label = if log {
        "log10 validation loss"
    } else {
        "validation loss"
    };
    let _ = writeln!(s, r#"<text x="{x0}" y="{}" font-size="12">{label}</text>"#, y0 - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="{x1}" y="{}" font-size="12" text-anchor="end">epoch</text>"#,
        y1 + 30.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{hi:.3}</text>"#,
        x0 - 4.0,
        y0 + 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{lo:.3}</text>"#,
        x0 - 4.0,
        y1 + 4.0
    );

    let mut start = 0;
    for t in phase_totals(records) {
        let pts: Vec<String> = (start..start + t.epochs)
            .map(|i| format!("{:.2},{:.2}", px(i), py(ys[i])))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline data-stage="{}" data-phase="{}" points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            t.stage,
            t.phase,
            pts.join(" "),
            color(t.phase)
        );
        start += t.epochs;
    }
    for (k, p) in Phase::ALL.iter().enumerate() {
        let y = y0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y}" font-size="11" fill="{}" text-anchor="end">{p}</text>"#,
            x1,
            color(*p)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(stage: usize, phase: Phase, epoch: usize, val: f64, secs: f64) -> MetricsRecord {
        MetricsRecord {
            stage,
            phase,
            epoch,
            train_loss: val * 0.9,
            val_loss: val,
            epoch_seconds: secs,
            samples_per_sec: 10.0 / secs,
        }
    }

    #[test]
    fn single_phase() {
        let records: Vec<_> = (1..=3)
            .map(|e| rec(0, Phase::Finetune, e, 1.0 / e as f64, 0.25))
            .collect();
        let totals = phase_totals(&records);
        assert_eq!(totals.len(), 1);
        assert_eq!((totals[0].epochs, totals[0].seconds), (3, 0.75));
        assert_eq!(totals[0].best_val_loss, 1.0 / 3.0);
        let svg = loss_curve_svg(&records);
        assert_eq!(svg.matches("<polyline").count(), 1);
        let points = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(points.split(' ').count(), 3);
    }

    #[test]
    fn stages_split_into_curves_and_totals_add_up() {
        let records = vec![
            rec(0, Phase::Coarse, 1, 2.0, 0.1),
            rec(0, Phase::Coarse, 2, 1.5, 0.1),
            rec(0, Phase::Dense, 1, 1.8, 0.4),
            rec(1, Phase::Coarse, 1, 1.2, 0.4),
            rec(1, Phase::Dense, 1, 1.1, 1.6),
            rec(2, Phase::Finetune, 1, 1.0, 1.6),
        ];
        let totals = phase_totals(&records);
        assert_eq!(totals.len(), 5);
        let sum: f64 = totals.iter().map(|t| t.seconds).sum();
        let direct: f64 = records.iter().map(|r| r.epoch_seconds).sum();
        assert!((sum - direct).abs() < 1e-12);
        assert_eq!(loss_curve_svg(&records).matches("<polyline").count(), 5);
        assert_eq!(loss_curve_svg(&records), loss_curve_svg(&records));
    }

    #[test]
    fn totals_csv_has_header() {
        let mut buf = Vec::new();
        write_phase_totals(&mut buf, &phase_totals(&[rec(0, Phase::Dense, 1, 1.0, 1.0)])).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(
            text.starts_with("stage,phase,epochs,seconds,final_train_loss,final_val_loss,best_val_loss\n0,dense,1,")
        );
    }
}
