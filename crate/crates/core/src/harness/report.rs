//! Error metrics, Monte-Carlo summaries and CSV output.

use std::path::Path;

use nalgebra::DVector;

use super::HarnessError;
use crate::powerflow::StateVector;

/// Mean squared Euclidean error over a sequence of estimates.
pub fn mse(estimates: &[StateVector], truths: &[StateVector]) -> Result<f64, HarnessError> {
    if estimates.len() != truths.len() {
        return Err(HarnessError::LengthMismatch {
            estimates: estimates.len(),
            truths: truths.len(),
        });
    }
    if estimates.is_empty() {
        return Err(HarnessError::LengthMismatch {
            estimates: 0,
            truths: 0,
        });
    }
    let total = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| squared_error(e.as_vector(), t.as_vector()))
        .sum::<f64>();
    Ok(total / estimates.len() as f64)
}

pub(crate) fn squared_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

/// Error in volts: per-unit-per-line MSE scaled by the nominal voltage and the line count.
pub fn net_mse(per_unit_per_line: f64, nominal_volts: f64, line_count: usize) -> f64 {
    per_unit_per_line * nominal_volts * line_count as f64
}

/// Sample mean and standard error of the mean (zero for a single sample).
pub fn mean_and_std_error(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Aggregated accuracy of one filter configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MseReport {
    pub filter: String,
    /// Components for BCF, particles for PF, absent otherwise.
    pub setting: Option<usize>,
    /// Mean over trials of the per-trial MSE (per unit).
    pub mse: f64,
    pub mse_per_line: f64,
    pub net_volts: f64,
    pub trials: usize,
    pub std_error: f64,
    /// Trials where the update degenerated and the prior estimate was kept.
    pub fallbacks: usize,
}

impl MseReport {
    pub fn from_samples(
        filter: &str,
        setting: Option<usize>,
        samples: &[f64],
        fallbacks: usize,
        line_count: usize,
        nominal_volts: f64,
    ) -> Self {
        let (mse, std_error) = mean_and_std_error(samples);
        let per_line = mse / line_count as f64;
        Self {
            filter: filter.to_string(),
            setting,
            mse,
            mse_per_line: per_line,
            net_volts: net_mse(per_line, nominal_volts, line_count),
            trials: samples.len(),
            std_error,
            fallbacks,
        }
    }

    pub const COLUMNS: [&'static str; 8] = [
        "filter",
        "setting",
        "mse_per_unit",
        "mse_per_unit_per_line",
        "net_mse_volts",
        "trials",
        "std_error",
        "fallbacks",
    ];

    pub fn cells(&self) -> Vec<Cell> {
        vec![
            Cell::Text(self.filter.clone()),
            self.setting.map_or(Cell::Empty, |s| Cell::Int(s as i64)),
            Cell::Float(self.mse),
            Cell::Float(self.mse_per_line),
            Cell::Float(self.net_volts),
            Cell::Int(self.trials as i64),
            Cell::Float(self.std_error),
            Cell::Int(self.fallbacks as i64),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Int(i64),
    Float(f64),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Int(i) => i.to_string(),
            Cell::Float(v) => format_sig9(*v),
            Cell::Empty => String::new(),
        }
    }
}

/// Nine significant digits in scientific notation.
pub fn format_sig9(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.8e}")
    } else {
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(columns: &[S]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn from_reports(reports: &[MseReport]) -> Self {
        let mut t = Self::new(&MseReport::COLUMNS);
        for r in reports {
            t.push(r.cells());
        }
        t
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        // Writes to an in-memory buffer do not fail.
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }
}

pub fn emit_csv(table: &Table, path: &Path) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
    }
    std::fs::write(path, table.to_csv_string()).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(xs: &[f64]) -> StateVector {
        StateVector::from_vector(DVector::from_column_slice(xs))
    }

    #[test]
    fn mse_examples() {
        let truths = vec![sv(&[1.0; 26]), sv(&[0.5; 26])];
        assert_eq!(mse(&truths, &truths).unwrap(), 0.0);
        let est = sv(&[1.1; 26]);
        assert!((mse(&[est], &[sv(&[1.0; 26])]).unwrap() - 0.26).abs() < 1e-12);
        let a = vec![sv(&[0.0, 1.0]), sv(&[2.0, 2.0]), sv(&[1.0, 0.0])];
        let b = vec![sv(&[0.5, 1.0]), sv(&[2.0, 1.0]), sv(&[0.0, 0.0])];
        let (ar, br): (Vec<_>, Vec<_>) = a.iter().cloned().zip(b.iter().cloned()).rev().unzip();
        assert!((mse(&a, &b).unwrap() - mse(&ar, &br).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn mse_length_errors() {
        let one = vec![sv(&[1.0, 0.0])];
        assert!(matches!(
            mse(&one, &[]),
            Err(HarnessError::LengthMismatch {
                estimates: 1,
                truths: 0
            })
        ));
        assert!(matches!(mse(&[], &[]), Err(HarnessError::LengthMismatch { .. })));
    }

    #[test]
    fn net_mse_examples() {
        assert!((net_mse(9.66e-4, 110.0, 14) - 1.48764).abs() < 1e-9);
        assert!((net_mse(1.93e-4, 110.0, 14) - 0.29722).abs() < 1e-9);
        assert_eq!(net_mse(0.0, 110.0, 14), 0.0);
    }

    #[test]
    fn std_error_of_known_sample() {
        let (m, se) = mean_and_std_error(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample variance 5/3, divided by n = 4
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_std_error(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn report_scaling() {
        let r = MseReport::from_samples("ukf", None, &[0.014, 0.014], 0, 14, 110.0);
        assert!((r.mse_per_line - 0.001).abs() < 1e-15);
        assert!((r.net_volts - 0.014 * 110.0).abs() < 1e-12);
        assert_eq!(r.trials, 2);
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::from_reports(&[]);
        assert_eq!(t.to_csv_string(), format!("{}\n", MseReport::COLUMNS.join(",")));
    }

    #[test]
    fn csv_round_trip_and_reemission() {
        let reports = vec![
            MseReport::from_samples("bcf", Some(6), &[1.234567891234e-3, 2.2e-3, 9.0e-4], 1, 14, 110.0),
            MseReport::from_samples("ukf", None, &[0.0264], 0, 14, 110.0),
        ];
        let table = Table::from_reports(&reports);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/report.csv");
        emit_csv(&table, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        emit_csv(&table, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());

        // Independent reader: parse the file back with the csv crate.
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let headers: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(headers, MseReport::COLUMNS);
        let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 2);
        for (row, rep) in rows.iter().zip(&reports) {
            assert_eq!(&row[0], rep.filter);
            let back: f64 = row[2].parse().unwrap();
            assert!(((back - rep.mse) / rep.mse).abs() < 5e-9);
            let se: f64 = row[6].parse().unwrap();
            assert!((se - rep.std_error).abs() <= 5e-9 * rep.std_error.abs());
            assert_eq!(row[5].parse::<usize>().unwrap(), rep.trials);
        }
        assert_eq!(&rows[1][1], "");
    }

    #[test]
    fn nine_significant_digits() {
        assert_eq!(format_sig9(0.0264), "2.64000000e-2");
        assert_eq!(format_sig9(-1234.5678912), "-1.23456789e3");
        assert_eq!(format_sig9(0.0), "0.00000000e0");
    }
}
