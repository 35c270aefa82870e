use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};

/// One row of the results CSV: a test image in one cell. Columns appear in
/// field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub cell: usize,
    pub image: usize,
    pub users: usize,
    pub n: usize,
    pub m: usize,
    pub ratio: f64,
    pub snr_db: f64,
    pub seed: u64,
    pub x0_formula: String,
    pub lambda_rule: String,
    pub sigma_source: String,
    pub sigma_r: Option<f64>,
    /// OFDM symbols needed to carry one chunk.
    pub time_slots: usize,
    pub mse: Option<f64>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub baseline_psnr_db: Option<f64>,
    pub baseline_ssim: Option<f64>,
    /// Cell-level Fréchet distance over patch-mean features, repeated per row.
    pub frechet: Option<f64>,
    pub ber: Option<f64>,
    /// `ok`, or `error: …` for a failed image.
    pub status: String,
    pub wall_seconds: Option<f64>,
}

impl ResultRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Column names in CSV order.
pub const COLUMNS: [&str; 22] = [
    "cell",
    "image",
    "users",
    "n",
    "m",
    "ratio",
    "snr_db",
    "seed",
    "x0_formula",
    "lambda_rule",
    "sigma_source",
    "sigma_r",
    "time_slots",
    "mse",
    "psnr_db",
    "ssim",
    "baseline_psnr_db",
    "baseline_ssim",
    "frechet",
    "ber",
    "status",
    "wall_seconds",
];

/// Serializes records as RFC 4180 CSV with a header row, even when empty.
pub fn to_csv(records: &[ResultRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(COLUMNS).map_err(|e| HarnessError::Csv(e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| HarnessError::Csv(e.to_string()))?;
    }
    w.into_inner().map_err(|e| HarnessError::Csv(e.to_string()))
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::Csv(e.to_string()))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| HarnessError::Csv(e.to_string()))
}

/// Writes the CSV to a sibling temporary file and renames it into place.
pub fn write_csv(records: &[ResultRecord], path: &Path) -> Result<()> {
    let bytes = to_csv(records)?;
    let tmp = path.with_extension("csv.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| HarnessError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    f.sync_all().map_err(|e| HarnessError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(status: &str) -> ResultRecord {
        ResultRecord {
            cell: 1,
            image: 3,
            users: 2,
            n: 38,
            m: 64,
            ratio: 0.6,
            snr_db: f64::INFINITY,
            seed: 5,
            x0_formula: "corrected".into(),
            lambda_rule: "saturating".into(),
            sigma_source: "formula".into(),
            sigma_r: Some(0.0),
            time_slots: 8,
            mse: Some(0.01),
            psnr_db: Some(26.0),
            ssim: Some(0.9),
            baseline_psnr_db: Some(10.0),
            baseline_ssim: Some(0.5),
            frechet: None,
            ber: Some(0.0),
            status: status.into(),
            wall_seconds: None,
        }
    }

    #[test]
    fn header_matches_fields() {
        let bytes = to_csv(&[sample("ok")]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), COLUMNS.join(","));
        let row = lines.next().unwrap();
        assert!(row.starts_with("1,3,2,38,64,0.6,inf,5,corrected,"), "{row}");
        assert_eq!(row.split(',').count(), COLUMNS.len());
    }

    #[test]
    fn empty_is_header_only() {
        let text = String::from_utf8(to_csv(&[]).unwrap()).unwrap();
        assert_eq!(text, format!("{}\n", COLUMNS.join(",")));
    }

    #[test]
    fn quoting_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rec = sample("error: shape, \"bad\"");
        write_csv(&[rec.clone(), sample("ok")], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"error: shape, \"\"bad\"\"\""));
        let back = read_csv(&path).unwrap();
        assert_eq!(back, vec![rec, sample("ok")]);
        assert!(!path.with_extension("csv.tmp").exists());
    }
}
