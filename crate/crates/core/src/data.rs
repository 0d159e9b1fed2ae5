//! Normalization, windowing, chronological splits and the CSV grid format.
//!
//! The grid CSV has a header row `t0,t1,...` followed by one row per node.
//! An empty cell or a `nan` token marks a raw-missing reading. Mask files
//! share the layout with `0`/`1` cells.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::grid::{MaskMatrix, TrafficGrid};

/// Fraction of the series assigned to training.
pub const TRAIN_FRACTION: f64 = 0.6;
/// Fraction of the series assigned to validation.
pub const VALIDATION_FRACTION: f64 = 0.2;

/// Global mean and standard deviation used for z-scoring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        check_moments(mean, std)?;
        Ok(Self { mean, std })
    }

    /// Identity transform (`mean = 0`, `std = 1`).
    pub fn identity() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }

    pub fn apply(&self, grid: &TrafficGrid) -> Result<TrafficGrid> {
        normalize(grid, self.mean, self.std)
    }

    pub fn invert(&self, grid: &TrafficGrid) -> Result<TrafficGrid> {
        denormalize(grid, self.mean, self.std)
    }
}

fn check_moments(mean: f64, std: f64) -> Result<()> {
    if !mean.is_finite() || !std.is_finite() || std <= 0.0 {
        return Err(invalid(format!(
            "normalization needs finite mean and positive std, got mean={mean}, std={std}"
        )));
    }
    Ok(())
}

/// `(e - mean) / std` for every entry.
pub fn normalize(grid: &TrafficGrid, mean: f64, std: f64) -> Result<TrafficGrid> {
    check_moments(mean, std)?;
    Ok(grid.map(|e| (e - mean) / std))
}

/// Inverse of [`normalize`].
pub fn denormalize(grid: &TrafficGrid, mean: f64, std: f64) -> Result<TrafficGrid> {
    check_moments(mean, std)?;
    Ok(grid.map(|e| e * std + mean))
}

/// Cuts an `N x L` series into windows of `window` columns, window `i`
/// starting at column `i * stride`.
pub fn sliding_windows(
    series: &TrafficGrid,
    window: usize,
    stride: usize,
) -> Result<Vec<TrafficGrid>> {
    window_starts(series.n_steps(), window, stride)?
        .map(|start| series.columns(start, window))
        .collect()
}

/// Same windowing applied to a mask.
pub fn sliding_mask_windows(
    mask: &MaskMatrix,
    window: usize,
    stride: usize,
) -> Result<Vec<MaskMatrix>> {
    window_starts(mask.n_steps(), window, stride)?
        .map(|start| mask.columns(start, window))
        .collect()
}

fn window_starts(
    length: usize,
    window: usize,
    stride: usize,
) -> Result<impl Iterator<Item = usize>> {
    if window == 0 || stride == 0 {
        return Err(invalid("window and stride must be positive"));
    }
    if length < window {
        return Err(invalid(format!(
            "series of length {length} is shorter than window {window}"
        )));
    }
    let count = (length - window) / stride + 1;
    Ok((0..count).map(move |i| i * stride))
}

/// End columns `(train_end, validation_end)` of the 60/20/20 chronological
/// split; floor rounding, remainder columns go to test.
pub fn split_boundaries(length: usize) -> (usize, usize) {
    let train = (length as f64 * TRAIN_FRACTION).floor() as usize;
    let validation = (length as f64 * VALIDATION_FRACTION).floor() as usize;
    (train, train + validation)
}

/// A raw series as read from disk: values with raw-missing entries set to
/// zero, plus the availability mask (1 = reading present).
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub values: TrafficGrid,
    pub available: MaskMatrix,
}

impl RawSeries {
    pub fn fully_observed(values: TrafficGrid) -> Self {
        let available = MaskMatrix::all_observed(values.n_nodes(), values.n_steps());
        Self { values, available }
    }

    /// Mean and population std over the available entries of columns
    /// `[0, end)`.
    pub fn moments(&self, end: usize) -> Result<Normalization> {
        let mut n = 0usize;
        let mut sum = 0.0;
        for i in 0..self.values.n_nodes() {
            for t in 0..end.min(self.values.n_steps()) {
                if self.available.is_observed(i, t) {
                    sum += self.values.get(i, t);
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(invalid("no observed entries to compute moments"));
        }
        let mean = sum / n as f64;
        let mut ss = 0.0;
        for i in 0..self.values.n_nodes() {
            for t in 0..end.min(self.values.n_steps()) {
                if self.available.is_observed(i, t) {
                    let d = self.values.get(i, t) - mean;
                    ss += d * d;
                }
            }
        }
        Normalization::new(mean, (ss / n as f64).sqrt())
    }
}

/// One training/evaluation example: a normalized window and its
/// availability mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub values: TrafficGrid,
    pub available: MaskMatrix,
    /// First column of the window in the full series.
    pub start: usize,
}

/// Chronological train/validation/test windows of a normalized series.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Window>,
    pub validation: Vec<Window>,
    pub test: Vec<Window>,
    pub window_length: usize,
    pub normalization: Normalization,
}

/// Splits `raw` 60/20/20 in time, z-scores with the training moments,
/// zeroes raw-missing entries after normalization and windows each part.
pub fn prepare_dataset(
    raw: &RawSeries,
    window: usize,
    train_stride: usize,
    eval_stride: usize,
) -> Result<DatasetSplit> {
    let length = raw.values.n_steps();
    let (train_end, val_end) = split_boundaries(length);
    let normalization = raw.moments(train_end)?;
    let normalized = normalization
        .apply(&raw.values)?
        .masked(&raw.available)?;

    let part = |start: usize, end: usize, stride: usize| -> Result<Vec<Window>> {
        if end - start < window {
            return Err(invalid(format!(
                "split [{start}, {end}) is shorter than window {window}"
            )));
        }
        let values = normalized.columns(start, end - start)?;
        let available = raw.available.columns(start, end - start)?;
        let grids = sliding_windows(&values, window, stride)?;
        let masks = sliding_mask_windows(&available, window, stride)?;
        Ok(grids
            .into_iter()
            .zip(masks)
            .enumerate()
            .map(|(i, (values, available))| Window {
                values,
                available,
                start: start + i * stride,
            })
            .collect())
    };

    Ok(DatasetSplit {
        train: part(0, train_end, train_stride)?,
        validation: part(train_end, val_end, eval_stride)?,
        test: part(val_end, length, eval_stride)?,
        window_length: window,
        normalization,
    })
}

fn parse_err(location: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Parse {
        location: location.into(),
        reason: reason.into(),
    }
}

fn read_table(reader: impl Read, what: &str) -> Result<(usize, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(what, e.to_string()))?
        .clone();
    for (j, h) in headers.iter().enumerate() {
        if h != format!("t{j}") {
            return Err(parse_err(
                format!("{what} header column {j}"),
                format!("expected `t{j}`, found `{h}`"),
            ));
        }
    }
    let width = headers.len();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(format!("{what} row {}", i + 1), e.to_string()))?;
        rows.push(rec.iter().map(str::to_owned).collect());
    }
    if width == 0 || rows.is_empty() {
        return Err(parse_err(what, "empty table"));
    }
    Ok((width, rows))
}

/// Reads a grid CSV; empty cells and `nan` mark raw-missing readings.
pub fn read_grid_csv(reader: impl Read) -> Result<RawSeries> {
    let (width, rows) = read_table(reader, "grid")?;
    let n = rows.len();
    let mut values = Vec::with_capacity(n * width);
    let mut available = Vec::with_capacity(n * width);
    for (i, row) in rows.iter().enumerate() {
        for (t, cell) in row.iter().enumerate() {
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                values.push(0.0);
                available.push(false);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(format!("grid row {}, column {t}", i + 1), format!("bad number `{cell}`"))
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    format!("grid row {}, column {t}", i + 1),
                    "non-finite value",
                ));
            }
            values.push(v);
            available.push(true);
        }
    }
    Ok(RawSeries {
        values: TrafficGrid::new(n, width, values)?,
        available: MaskMatrix::new(n, width, available)?,
    })
}

pub fn read_mask_csv(reader: impl Read) -> Result<MaskMatrix> {
    let (width, rows) = read_table(reader, "mask")?;
    let n = rows.len();
    let mut entries = Vec::with_capacity(n * width);
    for (i, row) in rows.iter().enumerate() {
        for (t, cell) in row.iter().enumerate() {
            entries.push(match cell.as_str() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(parse_err(
                        format!("mask row {}, column {t}", i + 1),
                        format!("expected 0 or 1, found `{other}`"),
                    ))
                }
            });
        }
    }
    MaskMatrix::new(n, width, entries)
}

fn header(n_steps: usize) -> String {
    (0..n_steps)
        .map(|t| format!("t{t}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes a grid; entries where `available` is false are written as `nan`.
pub fn write_grid_csv(
    mut writer: impl Write,
    grid: &TrafficGrid,
    available: Option<&MaskMatrix>,
) -> Result<()> {
    writeln!(writer, "{}", header(grid.n_steps()))?;
    for i in 0..grid.n_nodes() {
        let line = (0..grid.n_steps())
            .map(|t| match available {
                Some(m) if !m.is_observed(i, t) => "nan".to_string(),
                _ => format!("{}", grid.get(i, t)),
            })
            .collect::<Vec<_>>()
            .join(",");
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

pub fn write_mask_csv(mut writer: impl Write, mask: &MaskMatrix) -> Result<()> {
    writeln!(writer, "{}", header(mask.n_steps()))?;
    for i in 0..mask.n_nodes() {
        let line = (0..mask.n_steps())
            .map(|t| if mask.is_observed(i, t) { "1" } else { "0" })
            .collect::<Vec<_>>()
            .join(",");
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<RawSeries> {
    read_grid_csv(File::open(path)?)
}

pub fn load_mask(path: &Path) -> Result<MaskMatrix> {
    read_mask_csv(File::open(path)?)
}

pub fn save_grid(path: &Path, grid: &TrafficGrid, available: Option<&MaskMatrix>) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    write_grid_csv(&mut f, grid, available)?;
    f.flush()?;
    Ok(())
}

pub fn save_mask(path: &Path, mask: &MaskMatrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    write_mask_csv(&mut f, mask)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, t: usize, v: Vec<f64>) -> TrafficGrid {
        TrafficGrid::new(n, t, v).unwrap()
    }

    #[test]
    fn normalize_dataset_mean_gives_zero() {
        let g = TrafficGrid::filled(3, 4, 207.0);
        let z = normalize(&g, 207.0, 156.0).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_identity_and_scalar_case() {
        let g = grid(1, 3, vec![-2.5, 0.0, 363.0]);
        assert_eq!(normalize(&g, 0.0, 1.0).unwrap(), g);
        let z = normalize(&g, 207.0, 156.0).unwrap();
        assert_eq!(z.get(0, 2), 1.0);
    }

    #[test]
    fn denormalize_examples() {
        let z = TrafficGrid::zeros(2, 2);
        let g = denormalize(&z, 207.0, 156.0).unwrap();
        assert!(g.values().iter().all(|&v| v == 207.0));
        let one = grid(1, 1, vec![1.0]);
        assert_eq!(denormalize(&one, 0.0, 2.0).unwrap().get(0, 0), 2.0);
    }

    #[test]
    fn bad_moments_rejected() {
        let g = TrafficGrid::zeros(1, 1);
        assert!(normalize(&g, 0.0, 0.0).is_err());
        assert!(normalize(&g, 0.0, -1.0).is_err());
        assert!(normalize(&g, f64::NAN, 1.0).is_err());
        assert!(denormalize(&g, 0.0, 0.0).is_err());
    }

    #[test]
    fn window_examples() {
        let s = grid(2, 24, (0..48).map(f64::from).collect());
        let w = sliding_windows(&s, 12, 12).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].get(0, 0), 12.0);

        let s = grid(1, 12, (0..12).map(f64::from).collect());
        let w = sliding_windows(&s, 12, 1).unwrap();
        assert_eq!(w, vec![s.clone()]);

        let s = grid(1, 14, (0..14).map(f64::from).collect());
        let w = sliding_windows(&s, 12, 1).unwrap();
        let starts: Vec<f64> = w.iter().map(|g| g.get(0, 0)).collect();
        assert_eq!(starts, vec![0.0, 1.0, 2.0]);

        assert!(sliding_windows(&s, 15, 1).is_err());
        assert!(sliding_windows(&s, 12, 0).is_err());
    }

    #[test]
    fn window_count_matches_closed_form() {
        for length in 1..=100 {
            let s = TrafficGrid::zeros(1, length);
            for window in 1..=length {
                for stride in [1, 2, 3, 7, 12] {
                    let n = sliding_windows(&s, window, stride).unwrap().len();
                    assert_eq!(n, (length - window) / stride + 1);
                }
            }
        }
    }

    #[test]
    fn split_is_exhaustive_and_ordered() {
        for length in 1..500 {
            let (a, b) = split_boundaries(length);
            assert!(a <= b && b <= length);
            assert_eq!(a, length * 6 / 10);
            assert_eq!(b - a, length * 2 / 10);
        }
    }

    #[test]
    fn csv_round_trip_with_missing() {
        let text = "t0,t1,t2\n1,nan,3\n,5,6.5\n";
        let raw = read_grid_csv(text.as_bytes()).unwrap();
        assert_eq!(raw.values.shape(), (2, 3));
        assert!(!raw.available.is_observed(0, 1));
        assert!(!raw.available.is_observed(1, 0));
        assert_eq!(raw.values.get(1, 2), 6.5);
        let mut out = Vec::new();
        write_grid_csv(&mut out, &raw.values, Some(&raw.available)).unwrap();
        let back = read_grid_csv(out.as_slice()).unwrap();
        assert_eq!(back, raw);
    }

    #[test]
    fn mask_csv_rejects_other_tokens() {
        assert!(read_mask_csv("t0,t1\n1,0\n".as_bytes()).is_ok());
        assert!(read_mask_csv("t0,t1\n1,2\n".as_bytes()).is_err());
        assert!(read_mask_csv("a,b\n1,0\n".as_bytes()).is_err());
    }

    #[test]
    fn dataset_split_uses_training_moments() {
        let length = 100;
        let values: Vec<f64> = (0..2 * length).map(|v| (v % length) as f64).collect();
        let mut available = vec![true; 2 * length];
        available[5] = false;
        let raw = RawSeries {
            values: grid(2, length, values),
            available: MaskMatrix::new(2, length, available).unwrap(),
        };
        let split = prepare_dataset(&raw, 12, 1, 12).unwrap();
        assert_eq!(split.train.len(), 60 - 12 + 1);
        assert_eq!(split.validation.len(), 1);
        assert_eq!(split.test.len(), 1);
        assert_eq!(split.test[0].start, 80);
        // Training moments exclude the raw-missing reading at column 5.
        let n = 119.0;
        let mean = (2.0 * (0..60).sum::<usize>() as f64 - 5.0) / n;
        assert!((split.normalization.mean - mean).abs() < 1e-12);
        // Raw-missing reading is zero after normalization.
        assert_eq!(split.train[0].values.get(0, 5), 0.0);
        assert!(!split.train[0].available.is_observed(0, 5));
    }
}
