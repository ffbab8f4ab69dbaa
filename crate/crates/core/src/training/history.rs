use crate::error::Result;
use std::io::Write;

pub const LOSS_CSV_HEADER: &str = "step,L_E_recon,L_E_codebook,L_E_commit,L_D,L_G_adv,wall_ms";

/// Losses logged after one stage-A step. `l_d` is the critic objective of
/// the last inner update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub l_d: f64,
    pub g_adv: f64,
    pub wall_ms: u64,
}

impl LossRecord {
    /// The first non-finite term, by column name.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("L_E_recon", self.recon),
            ("L_E_codebook", self.codebook),
            ("L_E_commit", self.commit),
            ("L_D", self.l_d),
            ("L_G_adv", self.g_adv),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.recon, self.codebook, self.commit, self.l_d, self.g_adv, self.wall_ms
        )
    }
}

pub fn write_loss_csv<W: Write>(mut w: W, records: &[LossRecord]) -> Result<()> {
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Mean of `f` over the first and last `n` records.
pub fn head_tail_means(records: &[LossRecord], n: usize, f: impl Fn(&LossRecord) -> f64) -> Option<(f64, f64)> {
    if n == 0 || records.len() < n {
        return None;
    }
    let mean = |rs: &[LossRecord]| rs.iter().map(&f).sum::<f64>() / n as f64;
    Some((mean(&records[..n]), mean(&records[records.len() - n..])))
}
