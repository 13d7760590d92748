//! Declarative run configuration, read from TOML and overridden by flags.

use std::path::{Path, PathBuf};

use axdt::optim::Algorithm;
use axdt::simulate::{CrossedRods, SimulationConfig};
use axdt::{ModelKind, OptimizerConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Feeds every random stream of a run.
    pub seed: u64,
    pub paths: Paths,
    pub scan: ScanConfig,
    pub phantom: CrossedRods,
    pub simulation: SimulationConfig,
    pub reconstruct: ReconstructConfig,
    pub optimizer: OptimizerConfig,
    pub extract: ExtractConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding geometry and measurements.
    pub data: Option<PathBuf>,
    /// Directory holding a reconstruction.
    pub reconstruction: Option<PathBuf>,
    /// Output directory of the command.
    pub output: Option<PathBuf>,
    /// Scalar volume to compute statistics on.
    pub strength: Option<PathBuf>,
    /// Scalar volume selecting the segmentation (nonzero = inside).
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    /// Edge length of the cubic volume in voxels.
    pub size: usize,
    pub spacing: f64,
    pub poses: usize,
    /// Detector pixel pitch in world units.
    pub pitch: f64,
    pub quadrature_level: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            size: 16,
            spacing: 1.0,
            poses: 60,
            pitch: 1.0,
            quadrature_level: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructConfig {
    pub model: ModelKind,
    pub max_degree: usize,
    /// CGLS iterations for the m2 attenuation start point.
    pub attenuation_iters: usize,
    /// Iterations of the operator-norm power iteration.
    pub power_iters: usize,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::M3,
            max_degree: 4,
            attenuation_iters: 50,
            power_iters: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    /// Minimum scattering strength of a kept voxel.
    pub threshold: f64,
    /// Icosphere level of the ODF search grid.
    pub quadrature_level: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            quadrature_level: 3,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Copies the top-level seed into every component.
    pub fn propagate_seed(&mut self) {
        self.simulation.seed = self.seed;
        self.optimizer.seed = self.seed;
    }

    pub fn validate_simulation(&self) -> Result<(), CliError> {
        let s = &self.scan;
        if s.size < 4 || !(s.spacing > 0.0) || s.poses == 0 || !(s.pitch > 0.0) {
            return Err(CliError::Usage(
                "scan needs size >= 4, poses >= 1 and positive spacing and pitch".into(),
            ));
        }
        if s.quadrature_level < 2 {
            return Err(CliError::Usage("scan.quadrature_level must be at least 2".into()));
        }
        self.simulation.validate()?;
        Ok(())
    }

    pub fn validate_reconstruction(&self) -> Result<(), CliError> {
        let model = self.reconstruct.model;
        let opt = &self.optimizer;
        if opt.algorithm == Algorithm::Cgls && model != ModelKind::M1 {
            return Err(CliError::Usage(format!(
                "cgls solves the linear model only; use m1 or pick nlcg, lbfgs or fgm for {model}"
            )));
        }
        if opt.algorithm == Algorithm::Fgm && model == ModelKind::M2 && opt.fgm_step.is_none() {
            return Err(CliError::Usage(
                "fgm on m2 has no Lipschitz bound; set optimizer.fgm_step".into(),
            ));
        }
        if !self.reconstruct.max_degree.is_multiple_of(2) {
            return Err(CliError::Usage("reconstruct.max_degree must be even".into()));
        }
        // fgm on m1/m3 derives its step from the bound when none is given.
        let mut check = opt.clone();
        if check.algorithm == Algorithm::Fgm && check.fgm_step.is_none() {
            check.fgm_step = Some(1.0);
        }
        check.validate()?;
        Ok(())
    }

    pub fn validate_extraction(&self) -> Result<(), CliError> {
        if self.extract.quadrature_level < 3 {
            return Err(CliError::Usage("extract.quadrature_level must be at least 3".into()));
        }
        if !self.extract.threshold.is_finite() {
            return Err(CliError::Usage("extract.threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Fails unless `path` names an existing file or directory.
pub fn require_exists(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{what} {} does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig {
            seed: 17,
            ..RunConfig::default()
        };
        cfg.reconstruct.model = ModelKind::M2;
        cfg.optimizer.fgm_step = Some(0.25);
        cfg.paths.data = Some("scan".into());
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::parse(
            "seed = 3\n[scan]\nsize = 8\n[reconstruct]\nmodel = \"m1\"\n\
             [optimizer]\nalgorithm = \"cgls\"\nmax_iters = 7\n[simulation]\nnoise = false\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.scan.size, 8);
        assert_eq!(cfg.reconstruct.model, ModelKind::M1);
        assert_eq!(cfg.optimizer.max_iters, 7);
        assert!(!cfg.simulation.noise);
        assert!(cfg.validate_reconstruction().is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("sed = 3").is_err());
        assert!(RunConfig::parse("[scan]\nsizes = 3").is_err());
    }

    #[test]
    fn seed_reaches_every_component() {
        let mut cfg = RunConfig {
            seed: 99,
            ..RunConfig::default()
        };
        cfg.propagate_seed();
        assert_eq!(cfg.simulation.seed, 99);
        assert_eq!(cfg.optimizer.seed, 99);
    }

    #[test]
    fn model_optimizer_combinations() {
        let mut cfg = RunConfig::default();
        cfg.optimizer.algorithm = Algorithm::Cgls;
        for (model, ok) in [(ModelKind::M1, true), (ModelKind::M2, false), (ModelKind::M3, false)] {
            cfg.reconstruct.model = model;
            assert_eq!(cfg.validate_reconstruction().is_ok(), ok, "{model}");
        }
        cfg.optimizer.algorithm = Algorithm::Fgm;
        cfg.reconstruct.model = ModelKind::M2;
        assert!(cfg.validate_reconstruction().is_err());
        cfg.optimizer.fgm_step = Some(1e-3);
        assert!(cfg.validate_reconstruction().is_ok());
        cfg.reconstruct.model = ModelKind::M3;
        cfg.optimizer.fgm_step = None;
        assert!(cfg.validate_reconstruction().is_ok());
    }

    #[test]
    fn simulation_checks() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate_simulation().is_ok());
        cfg.simulation.alpha0 = 1.0;
        assert!(matches!(cfg.validate_simulation(), Err(CliError::Usage(_))));
        cfg.simulation.alpha0 = 0.3;
        cfg.scan.poses = 0;
        assert!(cfg.validate_simulation().is_err());
    }
}
