use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::objectives::BatchSummary;

/// One optimizer step. `step` counts completed steps, so the last row of a
/// run equals the step counter stored in its checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub mlm_rt: f64,
    pub mrc: f64,
    pub mrfr: f64,
    pub l_rt: f64,
    pub mlm_rp: f64,
    pub p_mrtc: f64,
    pub l_rp: f64,
    pub mlm_is: f64,
    pub itm: f64,
    pub l_is: f64,
    pub mean_w_itm: f64,
    pub weighted_rp_is: f64,
    pub lr: f64,
    pub total: f64,
}

impl MetricsRow {
    pub fn new(step: u64, epoch: u64, lr: f64, s: &BatchSummary) -> Self {
        let m = &s.means;
        Self {
            step,
            epoch,
            mlm_rt: m.mlm_rt,
            mrc: m.mrc,
            mrfr: m.mrfr,
            l_rt: m.l_rt(),
            mlm_rp: m.mlm_rp,
            p_mrtc: m.p_mrtc,
            l_rp: m.l_rp(),
            mlm_is: m.mlm_is,
            itm: m.itm,
            l_is: m.l_is(),
            mean_w_itm: s.mean_w_itm,
            weighted_rp_is: s.weighted_rp_is,
            lr,
            total: s.total,
        }
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> TrainError + '_ {
    move |e| TrainError::Io(format!("{}: {e}", path.display()))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize()
        .map(|row| row.map_err(csv_err(path)))
        .collect()
}

/// Writes `rows` to a fresh file, header included.
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    if rows.is_empty() {
        w.write_record([
            "step",
            "epoch",
            "mlm_rt",
            "mrc",
            "mrfr",
            "l_rt",
            "mlm_rp",
            "p_mrtc",
            "l_rp",
            "mlm_is",
            "itm",
            "l_is",
            "mean_w_itm",
            "weighted_rp_is",
            "lr",
            "total",
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| TrainError::Io(e.to_string()))
}

pub fn append_metrics(path: &Path, row: &MetricsRow) -> Result<(), TrainError> {
    let file = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    w.serialize(row).map_err(csv_err(path))?;
    w.flush().map_err(|e| TrainError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::LossBundle;

    #[test]
    fn rows_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let s = BatchSummary {
            means: LossBundle {
                mlm_rt: 0.1 + 0.2,
                mrc: 1.0 / 3.0,
                ..LossBundle::default()
            },
            mean_w_itm: 0.7,
            weighted_rp_is: 2.0f64.sqrt(),
            total: std::f64::consts::PI,
        };
        write_metrics(&path, &[]).unwrap();
        let a = MetricsRow::new(1, 0, 1e-4, &s);
        let b = MetricsRow::new(2, 0, 2e-4, &s);
        append_metrics(&path, &a).unwrap();
        append_metrics(&path, &b).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), vec![a, b]);
    }
}
