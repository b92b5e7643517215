//! Experiment configuration: TOML tables whose dotted paths are the documented
//! keys (`kernel.kind`, `grid.n`, `chaos.beta`, ...). Unknown keys are errors.

use crate::chaos::ChaosParams;
use crate::covariance::{GffSquare, Kernel, PeriodicLog, PureLog, Regularization};
use crate::estimator::{EstimatorConfig, EvalPath, ScaleRule, WeightMode};
use crate::grid::{Boundary, Grid, TestFunction};
use crate::sampler::{CholeskySampler, FieldSampler, GffSpectralSampler, PeriodicSampler};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Environment variable overriding the default output directory.
pub const OUTPUT_DIR_ENV: &str = "CHAOSGRAD_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    GffSquare,
    PureLog,
    PeriodicLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub kind: KernelKind,
    /// Spectral modes of the reference (untruncated) kernel used by oracles.
    #[serde(default = "default_reference_modes")]
    pub modes: usize,
}

fn default_reference_modes() -> usize {
    1024
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub dim: usize,
    pub n: usize,
    #[serde(default = "one")]
    pub side: f64,
    #[serde(default = "default_boundary")]
    pub boundary: BoundaryKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Box,
    Torus,
}

fn default_boundary() -> BoundaryKind {
    BoundaryKind::Box
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizationMode {
    SpectralTruncation,
    MollifyConvolution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizationSection {
    pub mode: RegularizationMode,
    /// J for spectral truncation.
    pub modes: Option<usize>,
    /// δ for mollification.
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosSection {
    pub beta: f64,
    #[serde(default)]
    pub allow_out_of_range: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunctionSection {
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    List,
    Geometric,
    DoubleExp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    /// One-based derivative coordinate.
    #[serde(default = "one_usize")]
    pub coordinate: usize,
    #[serde(default = "default_rule")]
    pub rule: RuleKind,
    pub scales: Option<Vec<f64>>,
    pub eta0: Option<f64>,
    pub ratio: Option<f64>,
    pub count: Option<usize>,
    pub k_base: Option<f64>,
    #[serde(default = "default_weight")]
    pub weight: WeightMode,
    #[serde(default = "default_path")]
    pub path: EvalPath,
}

fn one_usize() -> usize {
    1
}

fn default_rule() -> RuleKind {
    RuleKind::List
}

fn default_weight() -> WeightMode {
    WeightMode::RegularizedCDelta
}

fn default_path() -> EvalPath {
    EvalPath::Direct
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub replicas: usize,
    pub seed: u64,
    /// 0 = rayon default.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_batches")]
    pub batches: usize,
}

fn default_batches() -> usize {
    crate::estimator::DEFAULT_BATCHES
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// Also write per-replica records.
    #[serde(default)]
    pub records: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_verify_eta")]
    pub eta: f64,
    /// Constant added to the oracle kernel; non-zero only for fault injection.
    #[serde(default)]
    pub oracle_g_offset: f64,
}

fn default_verify_eta() -> f64 {
    0.1
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection { eta: default_verify_eta(), oracle_g_offset: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kernel: KernelSection,
    pub grid: GridSection,
    pub regularization: RegularizationSection,
    pub chaos: ChaosSection,
    pub test_function: TestFunctionSection,
    pub estimator: EstimatorSection,
    pub mc: McSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub verify: VerifySection,
}

/// Everything derived from a validated config.
pub struct Setup {
    pub grid: Grid,
    pub kernel: Kernel,
    pub regularization: Regularization,
    /// C_δ, the covariance of the sampled field.
    pub field_kernel: Kernel,
    pub chaos: ChaosParams,
    pub estimator: EstimatorConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Re-runs every cross-module rule; wraps failures as config errors.
    pub fn validate(&self) -> Result<()> {
        self.setup().map(|_| ()).map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        if self.mc.replicas == 0 {
            return Err(Error::Config("mc.replicas must be at least 1".into()));
        }
        if !(self.verify.eta > 0.0) {
            return Err(Error::Config("verify.eta must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        let b = match self.grid.boundary {
            BoundaryKind::Box => Boundary::Box,
            BoundaryKind::Torus => Boundary::Torus,
        };
        Grid::with_boundary(self.grid.dim, self.grid.n, self.grid.side, b)
    }

    pub fn kernel(&self) -> Result<Kernel> {
        let d = self.grid.dim;
        Ok(match self.kernel.kind {
            KernelKind::GffSquare => {
                if d != 2 {
                    return Err(Error::Config("gff_square is two-dimensional".into()));
                }
                Arc::new(GffSquare::new(self.kernel.modes)?)
            }
            KernelKind::PureLog => Arc::new(PureLog),
            KernelKind::PeriodicLog => Arc::new(PeriodicLog::new(d, self.kernel.modes, self.grid.side)?),
        })
    }

    pub fn regularization(&self) -> Result<Regularization> {
        let r = &self.regularization;
        match r.mode {
            RegularizationMode::SpectralTruncation => match r.modes {
                Some(modes) if r.delta.is_none() => Ok(Regularization::SpectralTruncation { modes }),
                _ => Err(Error::Config("spectral_truncation needs regularization.modes and no delta".into())),
            },
            RegularizationMode::MollifyConvolution => match r.delta {
                Some(delta) if r.modes.is_none() => Ok(Regularization::MollifyConvolution { delta }),
                _ => Err(Error::Config("mollify_convolution needs regularization.delta and no modes".into())),
            },
        }
    }

    pub fn scales(&self) -> Result<(Vec<f64>, ScaleRule)> {
        let e = &self.estimator;
        let missing = |k: &str| Error::Config(format!("estimator.{k} required by rule {:?}", e.rule));
        Ok(match e.rule {
            RuleKind::List => (e.scales.clone().ok_or_else(|| missing("scales"))?, ScaleRule::List),
            RuleKind::Geometric => {
                let rule = ScaleRule::Geometric {
                    eta0: e.eta0.ok_or_else(|| missing("eta0"))?,
                    ratio: e.ratio.ok_or_else(|| missing("ratio"))?,
                };
                (rule.generate(e.count.ok_or_else(|| missing("count"))?), rule)
            }
            RuleKind::DoubleExp => {
                let rule = ScaleRule::PaperDoubleExp { k: e.k_base.ok_or_else(|| missing("k_base"))? };
                (rule.generate(e.count.ok_or_else(|| missing("count"))?), rule)
            }
        })
    }

    pub fn setup(&self) -> Result<Setup> {
        let grid = self.grid()?;
        let kernel = self.kernel()?;
        let regularization = self.regularization()?;
        regularization.check_resolved(&grid)?;
        let field_kernel = regularization.apply(&kernel, grid.dim())?;
        let chaos = ChaosParams { beta: self.chaos.beta, allow_out_of_range: self.chaos.allow_out_of_range };
        chaos.validate(grid.dim())?;
        let tf = TestFunction::new(
            grid.dim(),
            &self.test_function.center,
            self.test_function.radius,
            self.test_function.amplitude,
        )?;
        if self.estimator.coordinate == 0 || self.estimator.coordinate > grid.dim() {
            return Err(Error::Config(format!(
                "estimator.coordinate = {} must be in 1..={}",
                self.estimator.coordinate,
                grid.dim()
            )));
        }
        let (scales, rule) = self.scales()?;
        let estimator = EstimatorConfig {
            beta: self.chaos.beta,
            test_function: tf,
            axis: self.estimator.coordinate - 1,
            scales,
            rule,
            weight: self.estimator.weight,
            path: self.estimator.path,
        };
        estimator.validate(&grid, Some(&regularization))?;
        Ok(Setup { grid, kernel, regularization, field_kernel, chaos, estimator })
    }

    /// Field sampler matching the kernel and regularization.
    pub fn sampler(&self, setup: &Setup) -> Result<Box<dyn FieldSampler>> {
        Ok(match (self.kernel.kind, setup.regularization) {
            (KernelKind::GffSquare, Regularization::SpectralTruncation { modes }) => {
                Box::new(GffSpectralSampler::new(&setup.grid, modes)?)
            }
            (KernelKind::PeriodicLog, Regularization::SpectralTruncation { modes }) => {
                Box::new(PeriodicSampler::new(&setup.grid, modes)?)
            }
            (_, reg) => Box::new(CholeskySampler::for_grid(&setup.grid, &setup.kernel, reg)?),
        })
    }

    /// Output directory: config, then the environment, then ./results.
    pub fn output_dir(&self) -> PathBuf {
        self.output
            .dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("results"))
    }

    /// SHA-256 of the canonical config with run-placement keys (workers,
    /// output directory) cleared, so the hash names the experiment only.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.mc.workers = 0;
        c.output = OutputSection::default();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SMALL: &str = r#"
[kernel]
kind = "gff_square"

[grid]
dim = 2
n = 64

[regularization]
mode = "spectral_truncation"
modes = 32

[chaos]
beta = 1.0

[test_function]
center = [0.5, 0.5]
radius = 0.08

[estimator]
scales = [0.2, 0.125]

[mc]
replicas = 10
seed = 3
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml_str(SMALL).unwrap();
        assert_eq!(c.kernel.modes, 1024);
        assert_eq!(c.estimator.coordinate, 1);
        assert_eq!(c.estimator.weight, WeightMode::RegularizedCDelta);
        assert_eq!(c.mc.batches, 20);
        let s = c.setup().unwrap();
        assert_eq!(s.estimator.axis, 0);
        assert_eq!(s.estimator.scales, vec![0.2, 0.125]);
    }

    #[test]
    fn unknown_key_is_error() {
        let bad = SMALL.replace("beta = 1.0", "beta = 1.0\nbtea = 2.0");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn invariants_checked_at_load() {
        // β out of range, η unresolved, support too close to the boundary
        for (from, to) in [
            ("beta = 1.0", "beta = 1.5"),
            ("scales = [0.2, 0.125]", "scales = [0.2, 0.1]"),
            ("radius = 0.08", "radius = 0.2"),
            ("modes = 32", "modes = 40"),
        ] {
            let bad = SMALL.replace(from, to);
            assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(Error::Config(_))), "{to}");
        }
    }

    #[test]
    fn geometric_rule() {
        let c = SMALL.replace("scales = [0.2, 0.125]", "rule = \"geometric\"\neta0 = 0.2\nratio = 0.625\ncount = 2");
        let c = ExperimentConfig::from_toml_str(&c).unwrap();
        let s = c.setup().unwrap();
        assert_eq!(s.estimator.scales, vec![0.2, 0.125]);
    }

    #[test]
    fn hash_ignores_workers_and_output() {
        let a = ExperimentConfig::from_toml_str(SMALL).unwrap();
        let mut b = a.clone();
        b.mc.workers = 7;
        b.output.dir = Some("/tmp/x".into());
        assert_eq!(a.hash(), b.hash());
        b.mc.seed = 4;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn toml_roundtrip() {
        let a = ExperimentConfig::from_toml_str(SMALL).unwrap();
        let b = ExperimentConfig::from_toml_str(&a.to_toml_string()).unwrap();
        assert_eq!(a, b);
    }
}
