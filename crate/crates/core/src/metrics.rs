//! Per-epoch training metrics and their CSV encoding.

use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

pub const METRICS_HEADER: &str =
    "epoch,phase,step,loss_d,loss_worker,loss_manager,nll_oracle,q_mean,intrinsic_mean";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    PretrainD,
    PretrainG,
    AdversarialG,
    AdversarialD,
    Interleaved,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::PretrainD => "pretrain_d",
            Phase::PretrainG => "pretrain_g",
            Phase::AdversarialG => "adv_g",
            Phase::AdversarialD => "adv_d",
            Phase::Interleaved => "mle",
        })
    }
}

/// One metrics line. Missing values are written as empty cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: Phase,
    pub step: usize,
    pub loss_d: Option<f64>,
    pub loss_worker: Option<f64>,
    pub loss_manager: Option<f64>,
    /// Per-sequence oracle NLL of generator samples (when an oracle exists).
    pub nll_oracle: Option<f64>,
    pub q_mean: Option<f64>,
    pub intrinsic_mean: Option<f64>,
}

impl MetricsRow {
    pub fn new(epoch: usize, phase: Phase, step: usize) -> Self {
        MetricsRow {
            epoch,
            phase,
            step,
            loss_d: None,
            loss_worker: None,
            loss_manager: None,
            nll_oracle: None,
            q_mean: None,
            intrinsic_mean: None,
        }
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.phase,
            self.step,
            cell(self.loss_d),
            cell(self.loss_worker),
            cell(self.loss_manager),
            cell(self.nll_oracle),
            cell(self.q_mean),
            cell(self.intrinsic_mean)
        );
        s
    }
}

pub const PROVENANCE_PREFIX: &str = "# leakgen ";

/// Provenance comment placed at the top of every output file.
pub fn provenance_line(digest: &str, seed: u64) -> String {
    format!("{PROVENANCE_PREFIX}config_digest={digest} seed={seed}")
}

/// Writes rows as CSV with a provenance comment and the NLL convention.
pub fn write_metrics(path: &Path, digest: &str, seed: u64, rows: &[MetricsRow]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{}", provenance_line(digest, seed))?;
    writeln!(
        out,
        "# nll_oracle = per-sequence summed NLL (nats) averaged over samples; divide by the horizon for per-token"
    )?;
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_cells_for_missing_values() {
        let mut r = MetricsRow::new(3, Phase::AdversarialG, 7);
        r.loss_worker = Some(0.5);
        assert_eq!(r.to_csv(), "3,adv_g,7,,0.5,,,,");
        assert_eq!(
            METRICS_HEADER.split(',').count(),
            r.to_csv().split(',').count()
        );
    }
}
