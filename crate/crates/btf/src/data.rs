//! Shared data model: count series, pre-training/training/test splits,
//! sampler hyperparameters and mixed-radix indexing of the latent cell space.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One or more aligned sequences of nonnegative integer counts.
///
/// Stored series-major: `values[m][t]` is the count of series `m` at time
/// `t` (0-based). All series share the same length. Immutable after
/// construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountSeries {
    names: Vec<String>,
    values: Vec<Vec<u32>>,
}

impl CountSeries {
    pub fn new(names: Vec<String>, values: Vec<Vec<u32>>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Schema("need at least one series".into()));
        }
        if names.len() != values.len() {
            return Err(Error::Schema(format!(
                "{} names for {} series",
                names.len(),
                values.len()
            )));
        }
        let t = values[0].len();
        if t == 0 {
            return Err(Error::Schema("series are empty".into()));
        }
        if values.iter().any(|v| v.len() != t) {
            return Err(Error::Schema("series lengths differ".into()));
        }
        Ok(CountSeries { names, values })
    }

    /// Single unnamed series.
    pub fn univariate(values: Vec<u32>) -> Result<Self> {
        Self::new(vec!["y".into()], vec![values])
    }

    pub fn len(&self) -> usize {
        self.values[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_series(&self) -> usize {
        self.values.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn series(&self, m: usize) -> &[u32] {
        &self.values[m]
    }

    pub fn value(&self, m: usize, t: usize) -> u32 {
        self.values[m][t]
    }

    /// Parses the CSV interchange format: a header row of series names,
    /// then one row per time point of integer cells. Missing values,
    /// negative numbers and ragged rows are schema errors.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Schema(format!("bad CSV header: {e}")))?;
        let names: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
        if names.is_empty() {
            return Err(Error::Schema("empty CSV header".into()));
        }
        let m = names.len();
        let mut values: Vec<Vec<u32>> = vec![Vec::new(); m];
        for (row_idx, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::Schema(format!("row {}: {e}", row_idx + 2)))?;
            if record.len() != m {
                return Err(Error::Schema(format!(
                    "row {}: {} cells, expected {m}",
                    row_idx + 2,
                    record.len()
                )));
            }
            for (col, cell) in record.iter().enumerate() {
                let v: i64 = cell.parse().map_err(|_| {
                    Error::Schema(format!("row {}, column {}: not an integer: {cell:?}", row_idx + 2, col + 1))
                })?;
                if v < 0 {
                    return Err(Error::Schema(format!(
                        "row {}, column {}: negative count {v}",
                        row_idx + 2,
                        col + 1
                    )));
                }
                let v = u32::try_from(v).map_err(|_| {
                    Error::Schema(format!("row {}, column {}: count {v} too large", row_idx + 2, col + 1))
                })?;
                values[col].push(v);
            }
        }
        Self::new(names, values)
    }

    pub fn from_csv_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_csv_reader(bytes)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.names.join(","));
        out.push('\n');
        for t in 0..self.len() {
            for m in 0..self.num_series() {
                if m > 0 {
                    out.push(',');
                }
                out.push_str(&self.values[m][t].to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// Three-way contiguous split of `[0, T)` into pre-training, training and
/// test segments, with the maximal Markov order `q` attached.
///
/// Training likelihood targets are the 1-based indices `[T1+1+q, T1+T2]`,
/// i.e. 0-based `[T1+q, T1+T2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub pre_training_len: usize,
    pub training_len: usize,
    pub test_len: usize,
    pub max_lag: usize,
}

/// Validates a (T1, T2, q) split of a length-T series; the test segment is
/// whatever suffix remains.
pub fn make_split(t: usize, t1: usize, t2: usize, q: usize) -> Result<DataSplit> {
    if q < 1 {
        return Err(Error::Schema("max lag q must be >= 1".into()));
    }
    if t1 < 1 || t2 < 1 {
        return Err(Error::Schema("pre-training and training lengths must be positive".into()));
    }
    if t2 <= q {
        return Err(Error::Schema(format!(
            "training shorter than lag window: T2={t2} <= q={q}"
        )));
    }
    if t1 + t2 > t {
        return Err(Error::Schema(format!(
            "split exceeds series length: T1+T2={} > T={t}",
            t1 + t2
        )));
    }
    Ok(DataSplit {
        pre_training_len: t1,
        training_len: t2,
        test_len: t - t1 - t2,
        max_lag: q,
    })
}

impl DataSplit {
    pub fn total_len(&self) -> usize {
        self.pre_training_len + self.training_len + self.test_len
    }

    /// 0-based pre-training indices `[0, T1)`.
    pub fn pre_training(&self) -> std::ops::Range<usize> {
        0..self.pre_training_len
    }

    /// 0-based indices of the training likelihood targets.
    pub fn training_targets(&self) -> std::ops::Range<usize> {
        self.pre_training_len + self.max_lag..self.pre_training_len + self.training_len
    }

    /// 0-based indices of the test targets.
    pub fn test_targets(&self) -> std::ops::Range<usize> {
        self.pre_training_len + self.training_len..self.total_len()
    }

    pub fn check_series(&self, series: &CountSeries) -> Result<()> {
        if series.len() != self.total_len() {
            return Err(Error::Schema(format!(
                "split covers {} points but series has {}",
                self.total_len(),
                series.len()
            )));
        }
        Ok(())
    }
}

/// Prior and truncation settings shared by the lag-selection search and the
/// main sampler.
///
/// `gamma` is the symmetric Dirichlet concentration on the per-lag mixture
/// probabilities, `phi` the lag-penalty rate in `p(k_j = kappa) ∝
/// exp(-phi*j*kappa)`, `(a, b)` the shape/rate of the Gamma prior on atom
/// rates, `alpha0` the Beta concentration of the stick fractions and `l`
/// the stick-breaking truncation. `a = None` means "half the range of the
/// training counts", resolved when the data are known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub gamma: f64,
    pub phi: f64,
    pub a: Option<f64>,
    pub b: f64,
    pub alpha0: f64,
    pub l: usize,
    pub cell_cap: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma: 0.1,
            phi: 0.5,
            a: None,
            b: 1.0,
            alpha0: 1.0,
            l: 100,
            cell_cap: 1_000_000,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma", self.gamma),
            ("phi", self.phi),
            ("b", self.b),
            ("alpha0", self.alpha0),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(a) = self.a {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("a must be positive, got {a}")));
            }
        }
        if self.l < 1 {
            return Err(Error::Config("stick truncation L must be >= 1".into()));
        }
        if self.cell_cap < 1 {
            return Err(Error::Config("cell_cap must be >= 1".into()));
        }
        Ok(())
    }

    /// Resolves the Gamma shape `a` for a given training-target window:
    /// half the count range, or 1.0 for a constant window.
    pub fn resolve_a(&self, training_counts: &[u32]) -> f64 {
        if let Some(a) = self.a {
            return a;
        }
        let max = training_counts.iter().copied().max().unwrap_or(0);
        let min = training_counts.iter().copied().min().unwrap_or(0);
        let half_range = (max - min) as f64 / 2.0;
        if half_range > 0.0 {
            half_range
        } else {
            1.0
        }
    }
}

/// Mixed-radix index over the latent cell space: radices `(k_1, ..., k_P)`,
/// predictor 1 fastest, so tuples and linear indices are interconvertible
/// and posterior dumps have a reproducible layout.
///
/// Tuple components are 1-based (`h_j` in `[1, k_j]`), matching the label
/// convention of the model; linear indices are 0-based in `[0, prod k_j)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellSpace {
    radices: Vec<u32>,
    size: u64,
}

impl CellSpace {
    pub fn new(radices: Vec<u32>, cell_cap: u64) -> Result<Self> {
        if radices.is_empty() {
            return Err(Error::Schema("cell space needs at least one predictor".into()));
        }
        if radices.iter().any(|&k| k == 0) {
            return Err(Error::Schema("cell radices must be >= 1".into()));
        }
        let mut size: u64 = 1;
        for &k in &radices {
            size = size
                .checked_mul(k as u64)
                .filter(|&s| s <= cell_cap)
                .ok_or_else(|| {
                    Error::Numeric(format!(
                        "cell space exceeds cap: prod k_j > {cell_cap} for radices {radices:?}"
                    ))
                })?;
        }
        Ok(CellSpace { radices, size })
    }

    pub fn radices(&self) -> &[u32] {
        &self.radices
    }

    pub fn num_predictors(&self) -> usize {
        self.radices.len()
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    /// Stride of predictor `j` in the linear index.
    pub fn stride(&self, j: usize) -> u64 {
        self.radices[..j].iter().map(|&k| k as u64).product()
    }

    pub fn encode(&self, tuple: &[u32]) -> Result<u64> {
        if tuple.len() != self.radices.len() {
            return Err(Error::Schema(format!(
                "tuple has {} components, expected {}",
                tuple.len(),
                self.radices.len()
            )));
        }
        let mut linear: u64 = 0;
        let mut stride: u64 = 1;
        for (j, (&h, &k)) in tuple.iter().zip(&self.radices).enumerate() {
            if h < 1 || h > k {
                return Err(Error::Schema(format!(
                    "component {} out of range: h={h} not in [1, {k}]",
                    j + 1
                )));
            }
            linear += (h - 1) as u64 * stride;
            stride *= k as u64;
        }
        Ok(linear)
    }

    pub fn decode(&self, linear: u64) -> Result<Vec<u32>> {
        if linear >= self.size {
            return Err(Error::Schema(format!(
                "linear index {linear} out of range [0, {})",
                self.size
            )));
        }
        let mut rest = linear;
        let tuple = self
            .radices
            .iter()
            .map(|&k| {
                let h = (rest % k as u64) as u32 + 1;
                rest /= k as u64;
                h
            })
            .collect();
        Ok(tuple)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_paper_sizes() {
        let s = make_split(5000, 3000, 1000, 10).unwrap();
        assert_eq!(s.test_len, 1000);
        assert_eq!(s.training_targets(), 3010..4000);
        assert_eq!(s.test_targets(), 4000..5000);

        let s = make_split(514, 154, 257, 10).unwrap();
        assert_eq!(s.test_len, 103);
    }

    #[test]
    fn split_rejects_short_training() {
        assert!(make_split(5000, 3000, 10, 10).is_err());
        assert!(make_split(100, 90, 20, 5).is_err());
        assert!(make_split(100, 0, 20, 5).is_err());
        assert!(make_split(100, 10, 20, 0).is_err());
    }

    #[test]
    fn split_partitions_exactly() {
        let s = make_split(514, 154, 257, 10).unwrap();
        let covered =
            s.pre_training().count() + s.training_len + s.test_targets().count();
        assert_eq!(covered, 514);
        assert_eq!(s.pre_training().end, 154);
        assert_eq!(s.test_targets().start, 154 + 257);
    }

    #[test]
    fn cell_encode_examples() {
        let cs = CellSpace::new(vec![2, 3], 1_000_000).unwrap();
        assert_eq!(cs.encode(&[1, 1]).unwrap(), 0);
        assert_eq!(cs.encode(&[2, 3]).unwrap(), 5);
        // all six tuples map to a permutation of {0..5}
        let mut seen = vec![false; 6];
        for h2 in 1..=3 {
            for h1 in 1..=2 {
                let lin = cs.encode(&[h1, h2]).unwrap() as usize;
                assert!(!seen[lin]);
                seen[lin] = true;
                assert_eq!(cs.decode(lin as u64).unwrap(), vec![h1, h2]);
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn cell_rejects_out_of_range() {
        let cs = CellSpace::new(vec![2, 3], 1_000_000).unwrap();
        assert!(cs.encode(&[0, 1]).is_err());
        assert!(cs.encode(&[3, 1]).is_err());
        assert!(cs.encode(&[1]).is_err());
        assert!(cs.decode(6).is_err());
    }

    #[test]
    fn cell_cap_enforced() {
        assert!(CellSpace::new(vec![100, 100, 101], 1_000_000).is_err());
        assert!(CellSpace::new(vec![100, 100, 100], 1_000_000).is_ok());
    }

    proptest! {
        #[test]
        fn cell_roundtrip(radices in proptest::collection::vec(1u32..=10, 1..=4)) {
            let size: u64 = radices.iter().map(|&k| k as u64).product();
            prop_assume!(size <= 10_000);
            let cs = CellSpace::new(radices, 10_000).unwrap();
            for lin in 0..cs.size() {
                let tuple = cs.decode(lin).unwrap();
                prop_assert_eq!(cs.encode(&tuple).unwrap(), lin);
            }
        }
    }

    #[test]
    fn csv_roundtrip_and_validation() {
        let csv_text = "a,b\n1,2\n3,4\n0,5\n";
        let s = CountSeries::from_csv_bytes(csv_text.as_bytes()).unwrap();
        assert_eq!(s.num_series(), 2);
        assert_eq!(s.len(), 3);
        assert_eq!(s.series(0), &[1, 3, 0]);
        assert_eq!(s.to_csv_string(), csv_text);

        assert!(CountSeries::from_csv_bytes(b"a\n-1\n").is_err());
        assert!(CountSeries::from_csv_bytes(b"a,b\n1\n").is_err());
        assert!(CountSeries::from_csv_bytes(b"a\nx\n").is_err());
        assert!(CountSeries::from_csv_bytes(b"a\n").is_err());
        assert!(CountSeries::from_csv_bytes(b"a\n1.5\n").is_err());
    }

    #[test]
    fn hyperparams_resolve_a() {
        let hp = Hyperparams::default();
        assert_eq!(hp.resolve_a(&[0, 10, 4]), 5.0);
        assert_eq!(hp.resolve_a(&[7, 7, 7]), 1.0);
        assert_eq!(Hyperparams { a: Some(2.5), ..Default::default() }.resolve_a(&[0, 10]), 2.5);
        assert!(Hyperparams { gamma: -1.0, ..Default::default() }.validate().is_err());
        assert!(Hyperparams::default().validate().is_ok());
    }
}
