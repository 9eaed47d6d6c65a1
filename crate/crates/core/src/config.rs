//! Experiment files: TOML with `[run]`, `[data]` and `[sweep]` tables, plus
//! `key=value` overrides from the command line.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_clients, DataConfig};
use crate::error::{Error, Result};
use crate::federation::{run_experiment, Method, RunConfig, RunOutcome, RunReport};
use crate::fusion::FusionMode;
use crate::model::ModelArch;

/// Sweep axes. An absent axis uses the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub methods: Option<Vec<Method>>,
    pub betas: Option<Vec<f64>>,
    pub label_ratios: Option<Vec<f64>>,
    pub fusions: Option<Vec<FusionMode>>,
    pub seeds: Option<Vec<u64>>,
}

impl SweepAxes {
    pub fn validate(&self) -> Result<()> {
        let lens = [
            ("methods", self.methods.as_ref().map(Vec::len)),
            ("betas", self.betas.as_ref().map(Vec::len)),
            ("label_ratios", self.label_ratios.as_ref().map(Vec::len)),
            ("fusions", self.fusions.as_ref().map(Vec::len)),
            ("seeds", self.seeds.as_ref().map(Vec::len)),
        ];
        if let Some((name, _)) = lens.iter().find(|(_, n)| *n == Some(0)) {
            return Err(Error::Config(format!("sweep axis `{name}` is empty")));
        }
        Ok(())
    }
}

/// One run: training settings and the benchmark it trains on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.data.validate()
    }

    pub fn arch(&self) -> Result<ModelArch> {
        ModelArch::new(
            &self.data.modalities,
            &[],
            self.run.feature_dim,
            self.data.num_classes,
            self.run.fusion,
        )
    }

    /// Builds the benchmark for `run.seed` and trains on it.
    pub fn execute(&self) -> Result<RunOutcome> {
        self.validate()?;
        let arch = self.arch()?;
        let clients = build_clients(&self.data, self.run.seed)?;
        let mut outcome = run_experiment(&self.run, &arch, clients)?;
        outcome.report.body.data = Some(self.data.clone());
        Ok(outcome)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentFile {
    pub run: RunConfig,
    pub data: DataConfig,
    pub sweep: SweepAxes,
}

const SECTIONS: [&str; 3] = ["run", "data", "sweep"];

/// The tuned benchmark preset shipped with the crate.
pub const BENCHMARK_TOML: &str = include_str!("../configs/benchmark.toml");

impl ExperimentFile {
    pub fn parse(text: &str, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid experiment file: {e}")))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let mut file: ExperimentFile = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(seed) = seed {
            file.run.seed = seed;
        }
        file.experiment().validate()?;
        file.sweep.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides, seed)
    }

    /// The shipped benchmark preset with `overrides` applied.
    pub fn benchmark(overrides: &[String], seed: Option<u64>) -> Result<Self> {
        Self::parse(BENCHMARK_TOML, overrides, seed)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            run: self.run.clone(),
            data: self.data.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// One point of a sweep grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    /// File-name-safe identifier, unique within the grid.
    pub label: String,
    pub experiment: ExperimentConfig,
}

impl ExperimentFile {
    /// The cartesian product of the sweep axes, in a fixed order: methods
    /// outermost, seeds innermost.
    pub fn cells(&self) -> Vec<SweepCell> {
        fn axis<T: Clone>(v: &Option<Vec<T>>, dflt: T) -> Vec<T> {
            v.clone().unwrap_or_else(|| vec![dflt])
        }
        let base = self.experiment();
        let methods = axis(&self.sweep.methods, base.run.method);
        let betas = axis(&self.sweep.betas, base.data.beta);
        let ratios = axis(&self.sweep.label_ratios, base.data.label_ratio);
        let fusions = axis(&self.sweep.fusions, base.run.fusion);
        let seeds = axis(&self.sweep.seeds, base.run.seed);
        let mut out = Vec::new();
        for &method in &methods {
            for &beta in &betas {
                for &ratio in &ratios {
                    for &fusion in &fusions {
                        for &seed in &seeds {
                            let mut e = base.clone();
                            e.run.method = method;
                            e.run.fusion = fusion;
                            e.run.seed = seed;
                            e.data.beta = beta;
                            e.data.label_ratio = ratio;
                            out.push(SweepCell {
                                label: format!("{method}_beta{beta}_ratio{ratio}_{fusion}_seed{seed}"),
                                experiment: e,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Runs every cell, on the rayon pool when `parallel`. Each cell draws only
/// from its own seed, so the results do not depend on scheduling. A failed
/// cell does not stop the others.
pub fn run_sweep(cells: &[SweepCell], parallel: bool) -> Vec<Result<RunReport>> {
    let one = |c: &SweepCell| {
        log::info!("sweep cell {}", c.label);
        c.experiment.execute().map(|o| o.report)
    };
    if parallel {
        cells.par_iter().map(one).collect()
    } else {
        cells.iter().map(one).collect()
    }
}

/// Field names of each section, taken from the defaults.
fn section_keys(section: &str) -> Vec<String> {
    let value = serde_json::to_value(ExperimentFile::default()).unwrap_or_default();
    value
        .get(section)
        .and_then(|v| v.as_object())
        .map(|o| o.keys().cloned().collect())
        .unwrap_or_default()
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `key=value`. `key` is a dotted path (`run.align.tau`) or a field
/// name that occurs in exactly one section (`method`).
fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
    let key = key.trim();
    let mut path: Vec<String> = key.split('.').map(str::to_string).collect();
    if !SECTIONS.contains(&path[0].as_str()) {
        let owners: Vec<&str> = SECTIONS
            .into_iter()
            .filter(|s| section_keys(s).contains(&path[0]))
            .collect();
        match owners.as_slice() {
            [one] => path.insert(0, one.to_string()),
            [] => return Err(Error::Config(format!("unknown override key `{key}`"))),
            _ => {
                return Err(Error::Config(format!(
                    "override key `{key}` is ambiguous; qualify it as one of {owners:?}"
                )))
            }
        }
    }
    let (last, parents) = path.split_last().expect("path is nonempty");
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    node.insert(last.clone(), parse_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let f = ExperimentFile::parse("", &[], None).unwrap();
        assert_eq!(f, ExperimentFile::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentFile::parse("[run]\nmethd = \"fedavg\"\n", &[], None).is_err());
        assert!(ExperimentFile::parse("[runn]\n", &[], None).is_err());
        assert!(ExperimentFile::parse("", &["nonsense=1".into()], None).is_err());
    }

    #[test]
    fn overrides_bare_and_dotted() {
        let ovs = vec![
            "method=fedavg".to_string(),
            "run.align.tau=0.5".to_string(),
            "beta=10".to_string(),
            "sweep.methods=[\"fedepa\", \"fedprox\"]".to_string(),
        ];
        let f = ExperimentFile::parse("[run]\nrounds = 3\n", &ovs, Some(9)).unwrap();
        assert_eq!(f.run.method, Method::Fedavg);
        assert_eq!(f.run.align.tau, 0.5);
        assert_eq!(f.run.rounds, 3);
        assert_eq!(f.run.seed, 9);
        assert_eq!(f.data.beta, 10.0);
        assert_eq!(f.sweep.methods, Some(vec![Method::Fedepa, Method::Fedprox]));
    }

    #[test]
    fn integer_literal_for_float_field() {
        let f = ExperimentFile::parse("", &["lr=1".into()], None).unwrap();
        assert_eq!(f.run.lr, 1.0);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentFile::parse("", &["method=fedfoo".into()], None).is_err());
        assert!(ExperimentFile::parse("", &["rounds=0".into()], None).is_err());
        assert!(ExperimentFile::parse("", &["beta=-1".into()], None).is_err());
        assert!(ExperimentFile::parse("[sweep]\nmethods = []\n", &[], None).is_err());
    }

    #[test]
    fn benchmark_preset_parses() {
        let f = ExperimentFile::benchmark(&[], None).unwrap();
        assert_eq!(f.run.batch_size, 32);
        assert_eq!(f.data.clients, 8);
        assert!(f.run.lr > RunConfig::default().lr);
    }

    #[test]
    fn sweep_grid_order_and_labels() {
        let ovs = vec![
            "sweep.methods=[\"fedavg\", \"fedepa\"]".to_string(),
            "sweep.seeds=[1, 2, 3]".to_string(),
            "sweep.betas=[0.1]".to_string(),
        ];
        let f = ExperimentFile::parse("", &ovs, None).unwrap();
        let cells = f.cells();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0].experiment.run.method, Method::Fedavg);
        assert_eq!(cells[0].experiment.run.seed, 1);
        assert_eq!(cells[5].experiment.run.method, Method::Fedepa);
        assert_eq!(cells[5].experiment.data.beta, 0.1);
        assert_eq!(cells[0].label, "fedavg_beta0.1_ratio0.2_full_seed1");
        let mut labels: Vec<_> = cells.iter().map(|c| c.label.clone()).collect();
        labels.dedup();
        assert_eq!(labels.len(), 6);
        assert_eq!(ExperimentFile::default().cells().len(), 1);
    }

    #[test]
    fn toml_round_trip() {
        let f = ExperimentFile::default();
        let back = ExperimentFile::parse(&f.to_toml().unwrap(), &[], None).unwrap();
        assert_eq!(back, f);
    }
}
