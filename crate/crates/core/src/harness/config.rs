//! Experiment configuration: a TOML file over a per-model preset, with
//! `key.path=value` overrides applied last.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{MpdError, Result};
use crate::models::{ModelId, OuAuxiliary, OuModel, SlvModel};
use crate::mpd::{MpdSettings, Preconditioner, StepSchedule};
use crate::sampler::SamplerConfig;

use super::series::GenerateSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub id: String,
    pub theta_true: Vec<f64>,
    pub theta0: Vec<f64>,
    pub x0: Vec<f64>,
    /// OU long-run mean.
    pub mu: f64,
    /// Diffusion scales: one for OU, two for SLV.
    pub sigma: Vec<f64>,
    /// Fixed OU auxiliary rate; absent (or `"tied"` in a file) means the
    /// auxiliary tracks θ.
    pub theta_aux: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub substeps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase2Section {
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `"generate"` or a path to a series CSV.
    pub source: String,
    pub n_obs: usize,
    pub gap: f64,
    pub fine_factor: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub kde_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub martingale_draws: usize,
    pub rate_levels: Vec<u32>,
    pub rate_reference: u32,
    pub rate_replications: usize,
    pub rate_n_obs: usize,
    pub rate_phase2_steps: usize,
    /// Observation spacing for the rate and variance studies; levels divide it dyadically.
    pub rate_gap: f64,
    pub variance_levels: Vec<u32>,
    pub variance_samples: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            martingale_draws: 10_000,
            rate_levels: vec![3, 4, 5, 6, 7],
            rate_reference: 9,
            rate_replications: 50,
            rate_n_obs: 20,
            rate_phase2_steps: 20,
            rate_gap: 1.0,
            variance_levels: vec![2, 3, 4, 5, 6],
            variance_samples: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub replications: usize,
    pub seed: u64,
    /// Worker threads; 0 lets rayon decide.
    pub threads: usize,
    pub model: ModelSection,
    pub grid: GridSection,
    pub schedule: StepSchedule,
    pub phase2: Phase2Section,
    pub data: DataSection,
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub preconditioner: Preconditioner,
    pub output: OutputSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
}

impl ExperimentConfig {
    /// OU settings: θ* = 3, μ = 10, σ = 0.5, x₀ = 10, gap 0.2, 16 sub-steps,
    /// θ_aux = 5, θ₀ = 5, γ_k = 30/(k+50), 300 generative steps, 100 runs.
    pub fn ou_benchmark() -> Self {
        ExperimentConfig {
            replications: 100,
            seed: 1,
            threads: 0,
            model: ModelSection {
                id: "ou".into(),
                theta_true: vec![3.0],
                theta0: vec![5.0],
                x0: vec![10.0],
                mu: 10.0,
                sigma: vec![0.5],
                theta_aux: Some(5.0),
            },
            grid: GridSection { substeps: 16 },
            schedule: StepSchedule {
                eta: 30.0,
                offset: 50.0,
            },
            phase2: Phase2Section { steps: 300 },
            data: DataSection {
                source: "generate".into(),
                n_obs: 100,
                gap: 0.2,
                fine_factor: 16,
                seed: 42,
            },
            sampler: SamplerConfig::default(),
            preconditioner: Preconditioner::Identity,
            output: OutputSection {
                dir: PathBuf::from("out/ou"),
                kde_points: 256,
            },
            diagnostics: DiagnosticsSection::default(),
        }
    }

    /// SLV settings: θ* = (1, 0.5, 0.3, 0.8), σ = (0.2, 0.15), gap 0.1,
    /// 8 sub-steps, θ₀ = (0.5, 1, 0.5, 0.5), γ_k = 0.5/(k+100), 100
    /// generative steps, 50 runs.
    pub fn slv_benchmark() -> Self {
        ExperimentConfig {
            replications: 50,
            model: ModelSection {
                id: "slv".into(),
                theta_true: vec![1.0, 0.5, 0.3, 0.8],
                theta0: vec![0.5, 1.0, 0.5, 0.5],
                x0: vec![1.0, 1.0],
                mu: 0.0,
                sigma: vec![0.2, 0.15],
                theta_aux: None,
            },
            grid: GridSection { substeps: 8 },
            schedule: StepSchedule {
                eta: 0.5,
                offset: 100.0,
            },
            phase2: Phase2Section { steps: 100 },
            data: DataSection {
                source: "generate".into(),
                n_obs: 100,
                gap: 0.1,
                fine_factor: 16,
                seed: 42,
            },
            output: OutputSection {
                dir: PathBuf::from("out/slv"),
                kde_points: 256,
            },
            ..Self::ou_benchmark()
        }
    }

    pub fn preset(id: ModelId) -> Self {
        match id {
            ModelId::Ou => Self::ou_benchmark(),
            ModelId::Slv => Self::slv_benchmark(),
        }
    }

    /// Layers: preset for the model id, then `text`, then `overrides`.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let file: Table = text
            .parse()
            .map_err(|e: toml::de::Error| MpdError::Config(e.to_string()))?;
        let mut parsed = Vec::with_capacity(overrides.len());
        for (key, raw) in overrides {
            parsed.push((key.as_str(), parse_value(raw)));
        }
        let id = parsed
            .iter()
            .rev()
            .find(|(k, _)| *k == "model.id")
            .and_then(|(_, v)| v.as_str().map(str::to_string))
            .or_else(|| {
                file.get("model")
                    .and_then(|m| m.get("id"))
                    .and_then(Value::as_str)
                    .map(str::to_string)
            })
            .unwrap_or_else(|| "ou".into());
        let id: ModelId = id.parse()?;
        if let Some((key, _)) = parsed
            .iter()
            .find(|(_, v)| matches!(v, Value::String(s) if s.parse::<u64>().is_ok()))
        {
            return Err(MpdError::Config(format!(
                "{key}: integers must fit in a signed 64-bit value"
            )));
        }

        let mut base = Value::try_from(Self::preset(id)).map_err(|e| MpdError::Config(e.to_string()))?;
        merge(&mut base, Value::Table(file));
        for (key, value) in parsed {
            set_path(&mut base, key, value)?;
        }
        // `theta_aux = "tied"` clears the preset's fixed rate.
        if let Some(model) = base.get_mut("model").and_then(Value::as_table_mut) {
            if model.get("theta_aux").and_then(Value::as_str) == Some("tied") {
                model.remove("theta_aux");
            }
        }
        let config: ExperimentConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| MpdError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| MpdError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MpdError::Config(e.to_string()))
    }

    pub fn model_id(&self) -> Result<ModelId> {
        self.model.id.parse()
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.model_id()?;
        let bad = |m: String| Err(MpdError::Config(m));
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        let (d, p) = (id.state_dim(), id.param_dim());
        if self.model.theta0.len() != p || self.model.theta_true.len() != p {
            return bad(format!("model {id} needs {p} parameters in theta0 and theta_true"));
        }
        if self.model.x0.len() != d {
            return bad(format!("model {id} needs a {d}-dimensional x0"));
        }
        if self.model.sigma.len() != d {
            return bad(format!("model {id} needs {d} sigma values"));
        }
        if !self
            .model
            .theta0
            .iter()
            .chain(&self.model.theta_true)
            .all(|v| v.is_finite())
        {
            return bad("theta values must be finite".into());
        }
        if self.grid.substeps == 0 {
            return bad("grid.substeps must be at least 1".into());
        }
        StepSchedule::new(self.schedule.eta, self.schedule.offset)?;
        self.sampler.validate()?;
        if self.data.source != "generate" && !Path::new(&self.data.source).exists() {
            return bad(format!("data.source `{}` does not exist", self.data.source));
        }
        if self.data.n_obs == 0 || !(self.data.gap > 0.0) || self.data.fine_factor == 0 {
            return bad("data.n_obs, data.gap and data.fine_factor must be positive".into());
        }
        if self.output.kde_points < 2 {
            return bad("output.kde_points must be at least 2".into());
        }
        self.ou_model()?;
        self.slv_model()?;
        Ok(())
    }

    pub fn ou_model(&self) -> Result<OuModel> {
        OuModel::new(self.model.mu, self.model.sigma[0]).map_err(|e| MpdError::Config(e.to_string()))
    }

    pub fn ou_aux(&self) -> Result<OuAuxiliary> {
        let m = self.ou_model()?;
        Ok(match self.model.theta_aux {
            Some(r) => OuAuxiliary::fixed(&m, r),
            None => OuAuxiliary::tied(&m),
        })
    }

    pub fn slv_model(&self) -> Result<SlvModel> {
        if self.model_id()? != ModelId::Slv {
            return Ok(SlvModel::benchmark());
        }
        SlvModel::new(self.model.sigma[0], self.model.sigma[1]).map_err(|e| MpdError::Config(e.to_string()))
    }

    pub fn settings<const P: usize>(&self) -> Result<MpdSettings<P>> {
        let theta0 = self
            .model
            .theta0
            .as_slice()
            .try_into()
            .map_err(|_| MpdError::Config(format!("theta0 must have {P} entries")))?;
        Ok(MpdSettings {
            theta0,
            schedule: self.schedule,
            substeps: self.grid.substeps,
            phase2_steps: self.phase2.steps,
            sampler: self.sampler,
            preconditioner: self.preconditioner,
        })
    }

    pub fn generate_spec(&self) -> Result<GenerateSpec> {
        Ok(GenerateSpec {
            model: self.model_id()?,
            theta: self.model.theta_true.clone(),
            x0: self.model.x0.clone(),
            n_obs: self.data.n_obs,
            gap: self.data.gap,
            substeps: self.grid.substeps,
            fine_factor: self.data.fine_factor,
            seed: self.data.seed,
            ou: self.ou_model()?,
            slv: self.slv_model()?,
        })
    }
}

/// TOML literal if it parses as one, else a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| MpdError::Config(format!("`{key}` does not name a table path")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| MpdError::Config(format!("`{key}` does not name a table path")))?;
    let leaf = parts[parts.len() - 1].to_string();
    // A scalar override of a list field sets a one-element list.
    let value = match (table.get(&leaf), value) {
        (Some(Value::Array(_)), v @ (Value::Float(_) | Value::Integer(_))) => Value::Array(vec![v]),
        (Some(Value::Array(_)), Value::String(s)) if s.contains(';') || s.contains(',') => {
            Value::Array(s.split([';', ',']).map(|p| parse_value(p.trim())).collect())
        }
        (_, v) => v,
    };
    table.insert(leaf, value);
    Ok(())
}
