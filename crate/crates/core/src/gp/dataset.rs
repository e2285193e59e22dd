use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evaluated inputs paired with one measurement per constraint.
///
/// Observations are stored column-wise: `observations[k][i]` is the value of
/// constraint `k` measured at `inputs[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dims: usize,
    inputs: Vec<Vec<f64>>,
    observations: Vec<Vec<f64>>,
    #[serde(default)]
    allow_duplicates: bool,
}

impl Dataset {
    pub fn new(dims: usize, constraint_count: usize) -> Result<Self> {
        if dims == 0 {
            return Err(Error::InvalidDataset("input dimension must be at least 1".into()));
        }
        Ok(Self {
            dims,
            inputs: Vec::new(),
            observations: vec![Vec::new(); constraint_count],
            allow_duplicates: false,
        })
    }

    /// Builds a dataset from rows of inputs and rows of per-constraint measurements.
    pub fn from_rows(inputs: Vec<Vec<f64>>, measurements: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.len() != measurements.len() {
            return Err(Error::MeasurementMismatch { expected: inputs.len(), got: measurements.len() });
        }
        let dims = inputs.first().map(Vec::len).ok_or_else(|| {
            Error::InvalidDataset("cannot infer dimensions from an empty row set".into())
        })?;
        let constraints = measurements[0].len();
        let mut ds = Self::new(dims, constraints)?;
        for (x, c) in inputs.into_iter().zip(measurements) {
            ds.push(x, &c)?;
        }
        Ok(ds)
    }

    pub fn with_duplicates(mut self, allow: bool) -> Self {
        self.allow_duplicates = allow;
        self
    }

    pub fn allows_duplicates(&self) -> bool {
        self.allow_duplicates
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn constraint_count(&self) -> usize {
        self.observations.len()
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    /// All measurements of constraint `k`, in insertion order.
    pub fn observations(&self, k: usize) -> &[f64] {
        &self.observations[k]
    }

    /// The measurement row (one value per constraint) of point `i`.
    pub fn measurement(&self, i: usize) -> Vec<f64> {
        self.observations.iter().map(|col| col[i]).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.inputs.iter().any(|p| bitwise_eq(p, x))
    }

    pub fn push(&mut self, x: Vec<f64>, measurement: &[f64]) -> Result<()> {
        if x.len() != self.dims {
            return Err(Error::DimensionMismatch { expected: self.dims, got: x.len() });
        }
        if measurement.len() != self.constraint_count() {
            return Err(Error::MeasurementMismatch {
                expected: self.constraint_count(),
                got: measurement.len(),
            });
        }
        if x.iter().chain(measurement).any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite value".into()));
        }
        if !self.allow_duplicates && self.contains(&x) {
            return Err(Error::InvalidDataset(format!("duplicate input {x:?}")));
        }
        self.inputs.push(x);
        for (col, &v) in self.observations.iter_mut().zip(measurement) {
            col.push(v);
        }
        Ok(())
    }

    /// Drops every point after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.inputs.truncate(len);
        for col in &mut self.observations {
            col.truncate(len);
        }
    }

    /// Checks the structural invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 {
            return Err(Error::InvalidDataset("input dimension must be at least 1".into()));
        }
        if let Some(x) = self.inputs.iter().find(|x| x.len() != self.dims) {
            return Err(Error::DimensionMismatch { expected: self.dims, got: x.len() });
        }
        for col in &self.observations {
            if col.len() != self.inputs.len() {
                return Err(Error::MeasurementMismatch { expected: self.inputs.len(), got: col.len() });
            }
        }
        if !self.allow_duplicates {
            for (i, a) in self.inputs.iter().enumerate() {
                if self.inputs[..i].iter().any(|b| bitwise_eq(a, b)) {
                    return Err(Error::InvalidDataset(format!("duplicate input {a:?}")));
                }
            }
        }
        Ok(())
    }

    /// Reads the `x1,...,xn,c1,...,cK` CSV layout.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let dims = headers.iter().take_while(|h| h.starts_with('x')).count();
        let constraints = headers.len() - dims;
        if headers.iter().skip(dims).any(|h| !h.starts_with('c')) {
            return Err(Error::InvalidDataset(format!(
                "header must be x1..xn followed by c1..cK, got {headers:?}"
            )));
        }
        let mut ds = Self::new(dims, constraints)?;
        for record in rdr.records() {
            let record = record?;
            let values = record
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::InvalidDataset(format!("cannot parse {s:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let (x, c) = values.split_at(dims);
            ds.push(x.to_vec(), c)?;
        }
        Ok(ds)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let header: Vec<String> = (1..=self.dims)
            .map(|i| format!("x{i}"))
            .chain((1..=self.constraint_count()).map(|k| format!("c{k}")))
            .collect();
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let row: Vec<String> = self.inputs[i]
                .iter()
                .copied()
                .chain(self.measurement(i))
                .map(|v| v.to_string())
                .collect();
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

pub(crate) fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
