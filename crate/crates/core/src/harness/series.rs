//! Observation series: synthesis and CSV persistence.
//!
//! File layout is a block of `# key=value` metadata lines followed by a CSV
//! table with columns `t,x1,..,xd`. Floats are written in shortest
//! round-trip form, so a save/load cycle is bitwise exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MpdError, Result};
use crate::models::{ModelId, OuModel, SlvModel};
use crate::rng::StreamFactory;
use crate::sde::{make_grid, simulate_path, SdeModel};

/// Whole-series retries allowed when a positive model leaves its domain.
pub const MAX_GENERATION_RETRIES: u32 = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub model: String,
    pub theta_true: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub fine_factor: Option<usize>,
    pub retries: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSeries {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub meta: SeriesMeta,
}

impl ObservationSeries {
    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>, meta: SeriesMeta) -> Result<Self> {
        let s = ObservationSeries { times, states, meta };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.states.len() {
            return Err(MpdError::Invariant(format!(
                "{} times but {} states",
                self.times.len(),
                self.states.len()
            )));
        }
        let d = self.dim();
        for (i, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            if !t.is_finite() || x.len() != d || !x.iter().all(|v| v.is_finite()) {
                return Err(MpdError::Invariant(format!(
                    "non-finite or ragged observation at row {i}"
                )));
            }
        }
        if let Some(i) = self.times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(MpdError::Invariant(format!(
                "times not strictly increasing at row {}",
                i + 1
            )));
        }
        Ok(())
    }

    /// Fixed-size view of the states.
    pub fn states_as<const D: usize>(&self) -> Result<Vec<[f64; D]>> {
        self.states
            .iter()
            .map(|x| {
                <[f64; D]>::try_from(x.as_slice())
                    .map_err(|_| MpdError::Invariant(format!("state of dimension {} where {D} expected", x.len())))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv_str(&fs::read_to_string(path)?)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(&format!("# model={}\n", self.meta.model));
        if let Some(theta) = &self.meta.theta_true {
            out.push_str(&format!("# theta_true={}\n", join(theta)));
        }
        if let Some(seed) = self.meta.seed {
            out.push_str(&format!("# seed={seed}\n"));
        }
        if let Some(f) = self.meta.fine_factor {
            out.push_str(&format!("# fine_factor={f}\n"));
        }
        out.push_str(&format!("# retries={}\n", self.meta.retries));

        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim()).map(|i| format!("x{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for (t, x) in self.times.iter().zip(&self.states) {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().map(f64::to_string));
            w.write_record(&row).map_err(csv_err)?;
        }
        let body = w.into_inner().map_err(|e| MpdError::Invariant(e.to_string()))?;
        out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut meta_map = BTreeMap::new();
        let mut n_meta = 0;
        for line in text.lines() {
            let Some(rest) = line.strip_prefix('#') else { break };
            n_meta += 1;
            let Some((k, v)) = rest.trim().split_once('=') else {
                return Err(MpdError::Parse {
                    line: n_meta,
                    message: format!("metadata line without `=`: {line}"),
                });
            };
            meta_map.insert(k.trim().to_string(), (n_meta, v.trim().to_string()));
        }
        let body: String = text.lines().skip(n_meta).map(|l| format!("{l}\n")).collect();

        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(body.as_bytes());
        let headers = reader.headers().map_err(|e| parse_error(n_meta + 1, e))?.clone();
        if !headers.iter().any(|h| h == "t") {
            return Err(MpdError::Schema { column: "t".into() });
        }
        let n_state = headers.iter().filter(|h| h.starts_with('x')).count();
        if n_state == 0 {
            return Err(MpdError::Schema { column: "x1".into() });
        }
        let mut cols = Vec::with_capacity(n_state);
        for i in 1..=n_state {
            let name = format!("x{i}");
            cols.push(
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or(MpdError::Schema { column: name })?,
            );
        }
        let t_col = headers.iter().position(|h| h == "t").expect("checked above");

        let mut times = Vec::new();
        let mut states = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let line = n_meta + 2 + row;
            let record = record.map_err(|e| parse_error(line, e))?;
            let field = |c: usize| -> Result<f64> {
                let raw = record.get(c).ok_or(MpdError::Parse {
                    line,
                    message: format!("missing field {}", c + 1),
                })?;
                raw.parse::<f64>().map_err(|e| MpdError::Parse {
                    line,
                    message: format!("`{raw}`: {e}"),
                })
            };
            times.push(field(t_col)?);
            states.push(cols.iter().map(|&c| field(c)).collect::<Result<Vec<_>>>()?);
        }

        let get = |k: &str| meta_map.get(k);
        let parse_meta = |k: &str| -> Result<Option<String>> { Ok(get(k).map(|(_, v)| v.clone())) };
        let meta_num = |k: &str| -> Result<Option<u64>> {
            match get(k) {
                None => Ok(None),
                Some((line, v)) => v.parse().map(Some).map_err(|e| MpdError::Parse {
                    line: *line,
                    message: format!("{k}: {e}"),
                }),
            }
        };
        let theta_true = match get("theta_true") {
            None => None,
            Some((line, v)) => Some(split_floats(v).map_err(|message| MpdError::Parse { line: *line, message })?),
        };
        let meta = SeriesMeta {
            model: parse_meta("model")?.unwrap_or_default(),
            theta_true,
            seed: meta_num("seed")?,
            fine_factor: meta_num("fine_factor")?.map(|v| v as usize),
            retries: meta_num("retries")?.unwrap_or(0) as u32,
        };
        ObservationSeries::new(times, states, meta)
    }
}

fn csv_err(e: csv::Error) -> MpdError {
    MpdError::Invariant(e.to_string())
}

fn parse_error(line: usize, e: csv::Error) -> MpdError {
    let line = e.position().map_or(line, |p| p.line() as usize);
    MpdError::Parse {
        line,
        message: e.to_string(),
    }
}

pub(crate) fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

pub(crate) fn split_floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(';')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

/// What to simulate.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSpec {
    pub model: ModelId,
    pub theta: Vec<f64>,
    pub x0: Vec<f64>,
    /// Number of intervals; the series holds `n_obs + 1` states.
    pub n_obs: usize,
    pub gap: f64,
    pub substeps: usize,
    pub fine_factor: usize,
    pub seed: u64,
    pub ou: OuModel,
    pub slv: SlvModel,
}

/// Simulates on a grid of spacing `gap / (substeps · fine_factor)` and keeps
/// the states at the observation times.
pub fn generate_data(spec: &GenerateSpec) -> Result<ObservationSeries> {
    if spec.fine_factor == 0 || spec.substeps == 0 {
        return Err(MpdError::Config("fine_factor and substeps must be at least 1".into()));
    }
    if spec.n_obs == 0 || !(spec.gap > 0.0) {
        return Err(MpdError::Config("n_obs must be positive and gap > 0".into()));
    }
    match spec.model {
        ModelId::Ou => generate_with(&spec.ou, spec),
        ModelId::Slv => generate_with(&spec.slv, spec),
    }
}

fn generate_with<M: SdeModel<D, P>, const D: usize, const P: usize>(
    model: &M,
    spec: &GenerateSpec,
) -> Result<ObservationSeries> {
    let theta: [f64; P] = spec
        .theta
        .as_slice()
        .try_into()
        .map_err(|_| MpdError::Config(format!("model {} needs {P} parameters", model.id())))?;
    let x0: [f64; D] = spec
        .x0
        .as_slice()
        .try_into()
        .map_err(|_| MpdError::Config(format!("model {} needs a {D}-dimensional x0", model.id())))?;
    if !model.in_domain(&x0) {
        return Err(MpdError::Config(format!("x0 = {x0:?} outside the model domain")));
    }
    let times: Vec<f64> = (0..=spec.n_obs).map(|i| i as f64 * spec.gap).collect();
    let streams = StreamFactory::new(spec.seed);
    let mut retries = 0;
    loop {
        let attempt = streams.child(retries as u64);
        match simulate_series(model, &theta, x0, &times, spec, attempt) {
            Ok(states) => {
                return ObservationSeries::new(
                    times,
                    states.into_iter().map(|x| x.to_vec()).collect(),
                    SeriesMeta {
                        model: model.id().to_string(),
                        theta_true: Some(spec.theta.clone()),
                        seed: Some(spec.seed),
                        fine_factor: Some(spec.fine_factor),
                        retries,
                    },
                );
            }
            Err(MpdError::DomainExit { .. }) if retries < MAX_GENERATION_RETRIES => retries += 1,
            Err(e) => return Err(e),
        }
    }
}

fn simulate_series<M: SdeModel<D, P>, const D: usize, const P: usize>(
    model: &M,
    theta: &[f64; P],
    x0: [f64; D],
    times: &[f64],
    spec: &GenerateSpec,
    streams: StreamFactory,
) -> Result<Vec<[f64; D]>> {
    let mut states = vec![x0];
    let mut x = x0;
    for (i, w) in times.windows(2).enumerate() {
        let grid = make_grid(w[0], w[1], spec.substeps * spec.fine_factor)?;
        let path = simulate_path(model, theta, &x, &grid, &mut streams.stream(&[i as u64]))?;
        x = *path.last().expect("non-empty path");
        states.push(x);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou_spec() -> GenerateSpec {
        GenerateSpec {
            model: ModelId::Ou,
            theta: vec![3.0],
            x0: vec![10.0],
            n_obs: 100,
            gap: 0.2,
            substeps: 16,
            fine_factor: 4,
            seed: 42,
            ou: OuModel::benchmark(),
            slv: SlvModel::benchmark(),
        }
    }

    #[test]
    fn ou_series_shape() {
        let s = generate_data(&ou_spec()).unwrap();
        assert_eq!(s.len(), 101);
        assert_eq!(s.times[0], 0.0);
        assert!((s.times[100] - 20.0).abs() < 1e-12);
        assert_eq!(s.states[0], vec![10.0]);
    }

    #[test]
    fn zero_noise_ou_is_constant() {
        let mut spec = ou_spec();
        spec.ou = OuModel::new(10.0, 0.0).unwrap();
        let s = generate_data(&spec).unwrap();
        assert!(s.states.iter().all(|x| x[0] == 10.0));
    }

    #[test]
    fn slv_series_is_positive() {
        let spec = GenerateSpec {
            model: ModelId::Slv,
            theta: vec![1.0, 0.5, 0.3, 0.8],
            x0: vec![1.0, 1.0],
            gap: 0.1,
            substeps: 8,
            ..ou_spec()
        };
        let s = generate_data(&spec).unwrap();
        assert_eq!(s.len(), 101);
        assert!((s.times[100] - 10.0).abs() < 1e-12);
        assert!(s.states.iter().all(|x| x[0] > 0.0 && x[1] > 0.0));
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let s = generate_data(&ou_spec()).unwrap();
        let back = ObservationSeries::from_csv_str(&s.to_csv_string().unwrap()).unwrap();
        assert_eq!(s, back);
        for (a, b) in s.states.iter().zip(&back.states) {
            assert_eq!(a[0].to_bits(), b[0].to_bits());
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let err = ObservationSeries::from_csv_str("# model=ou\nt,x2\n0,1\n").unwrap_err();
        assert!(
            matches!(err, MpdError::Schema { ref column } if column == "x1"),
            "{err:?}"
        );
        let err = ObservationSeries::from_csv_str("time,x1\n0,1\n").unwrap_err();
        assert!(matches!(err, MpdError::Schema { ref column } if column == "t"));
    }

    #[test]
    fn shuffled_rows_break_the_invariant() {
        let err = ObservationSeries::from_csv_str("t,x1\n0,1\n0.4,2\n0.2,3\n").unwrap_err();
        assert!(matches!(err, MpdError::Invariant(_)));
    }

    #[test]
    fn bad_number_reports_its_line() {
        let err = ObservationSeries::from_csv_str("# model=ou\nt,x1\n0,1\n0.2,abc\n").unwrap_err();
        assert!(matches!(err, MpdError::Parse { line: 4, .. }), "{err:?}");
    }
}
