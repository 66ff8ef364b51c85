//! Run configuration shared by the config file and the command line.
//!
//! Every flag has a file key of the same name (dashes become underscores).
//! Ensemble atoms can only come from a file. Flags override file values.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use clap::Args;
use serde::{Deserialize, Deserializer};

use crate::ensemble::{AtomConfig, EnsembleConfig, EnsembleSpec};
use crate::error::{Error, Result};
use crate::estimators::{DEFAULT_BURN_IN, DEFAULT_STEPS};
use crate::linalg::Vector;

pub const DEFAULT_REPLICAS: usize = 16;
pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_TAIL: usize = 200;
pub const DEFAULT_EPS: f64 = 1e-3;

/// A start vector given as comma-separated floats on the command line or as
/// an array in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSpec(pub Vec<f64>);

impl FromStr for TrackSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        s.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad entry `{t}` in --track: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(TrackSpec)
    }
}

impl<'de> Deserialize<'de> for TrackSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Vec::<f64>::deserialize(d).map(TrackSpec)
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Builtin ensemble: scalar_iid, signed_pair, diag_rotation, pure_rotation,
    /// positive_bernoulli (or custom_parametric together with --dim)
    #[arg(long)]
    pub builtin: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub replicas: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Perturbation sizes for gamma-eps (repeatable)
    #[arg(long, allow_hyphen_values = true)]
    #[serde(default)]
    pub eps: Vec<f64>,
    #[arg(long)]
    pub tail: Option<usize>,
    /// Tracked start vector as comma-separated floats (repeatable)
    #[arg(long, allow_hyphen_values = true)]
    #[serde(default)]
    pub track: Vec<TrackSpec>,
    #[arg(long)]
    pub record_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
    /// Estimator: psi, phi, integral, orbit, gamma-eps, lyapunov
    #[arg(long)]
    pub method: Option<String>,
    /// Verification suite: oracles, examples, theorems, all
    #[arg(long)]
    pub suite: Option<String>,

    /// Ensemble kind (file only; `--builtin` on the command line)
    #[arg(skip)]
    pub kind: Option<String>,
    #[arg(skip)]
    #[serde(default)]
    pub atoms: Vec<AtomConfig>,
    #[arg(skip)]
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Values set in `flags` win over values in `self`.
    pub fn overridden_by(mut self, flags: RunConfig) -> RunConfig {
        macro_rules! take {
            ($($f:ident),*) => { $( if flags.$f.is_some() { self.$f = flags.$f; } )* };
        }
        take!(
            theta,
            alpha,
            beta,
            tau,
            dim,
            steps,
            replicas,
            burn_in,
            samples,
            tail,
            record_every,
            seed,
            out_csv,
            out_json,
            method,
            suite
        );
        if flags.builtin.is_some() {
            // a builtin on the command line replaces whatever ensemble the file described
            self.builtin = flags.builtin;
            self.kind = None;
            self.atoms.clear();
        }
        if !flags.eps.is_empty() {
            self.eps = flags.eps;
        }
        if !flags.track.is_empty() {
            self.track = flags.track;
        }
        self
    }

    fn merged_params(&self) -> BTreeMap<String, f64> {
        let mut p = self.params.clone();
        for (k, v) in [("theta", self.theta), ("alpha", self.alpha), ("beta", self.beta), ("tau", self.tau)] {
            if let Some(v) = v {
                p.insert(k.into(), v);
            }
        }
        p
    }

    pub fn ensemble(&self) -> Result<EnsembleSpec> {
        if self.builtin.is_some() && !self.atoms.is_empty() {
            return Err(Error::Validation { atom: None, msg: "give either `builtin` or `atoms`, not both".into() });
        }
        let kind = self.builtin.clone().or_else(|| self.kind.clone());
        if kind.is_none() && self.atoms.is_empty() {
            return Err(Error::Validation {
                atom: None,
                msg: "no ensemble: use --builtin or --config with atoms".into(),
            });
        }
        EnsembleConfig { dim: self.dim, kind, atoms: self.atoms.clone(), params: self.merged_params() }.build()
    }

    fn positive(value: Option<usize>, default: usize, name: &str) -> Result<usize> {
        match value.unwrap_or(default) {
            0 => Err(Error::BadParams(format!("{name} must be at least 1"))),
            v => Ok(v),
        }
    }

    pub fn steps(&self) -> Result<usize> {
        Self::positive(self.steps, DEFAULT_STEPS, "steps")
    }

    pub fn replicas(&self) -> Result<usize> {
        Self::positive(self.replicas, DEFAULT_REPLICAS, "replicas")
    }

    pub fn burn_in(&self) -> Result<usize> {
        Self::positive(self.burn_in, DEFAULT_BURN_IN, "burn_in")
    }

    pub fn samples(&self) -> Result<usize> {
        Self::positive(self.samples, DEFAULT_SAMPLES, "samples")
    }

    pub fn tail(&self) -> Result<usize> {
        Self::positive(self.tail, DEFAULT_TAIL, "tail")
    }

    pub fn record_every(&self) -> Result<usize> {
        Self::positive(self.record_every, 1, "record_every")
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn eps_list(&self) -> Vec<f64> {
        if self.eps.is_empty() {
            vec![DEFAULT_EPS]
        } else {
            self.eps.clone()
        }
    }

    /// Tracked start vectors, checked against the ensemble dimension.
    pub fn tracked(&self, dim: usize) -> Result<Vec<Vector>> {
        self.track
            .iter()
            .map(|t| {
                if t.0.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: t.0.len() });
                }
                let v = Vector::new(t.0.clone())?;
                v.normalized()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn track_parses_csv() {
        assert_eq!("1,0".parse::<TrackSpec>().unwrap(), TrackSpec(vec![1.0, 0.0]));
        assert_eq!(" -0.5 , 2".parse::<TrackSpec>().unwrap(), TrackSpec(vec![-0.5, 2.0]));
        assert!("1,x".parse::<TrackSpec>().is_err());
    }

    #[test]
    fn file_keys_mirror_flags() {
        let cfg = RunConfig::from_toml(
            "builtin = \"pure_rotation\"\ntheta = 0.5\nsteps = 10\nrecord_every = 2\ntrack = [[1.0, 0.0]]\neps = [1e-3]\n",
        )
        .unwrap();
        assert_eq!(cfg.steps().unwrap(), 10);
        assert_eq!(cfg.record_every().unwrap(), 2);
        let spec = cfg.ensemble().unwrap();
        assert_eq!(spec.param("theta"), Some(0.5));
        assert_eq!(cfg.tracked(2).unwrap().len(), 1);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::from_toml("stepz = 3\n"), Err(Error::Parse(_))));
    }

    #[test]
    fn flags_override_file() {
        let file = RunConfig::from_toml("builtin = \"pure_rotation\"\nsteps = 10\nseed = 3\n").unwrap();
        let flags = RunConfig { steps: Some(20), builtin: Some("signed_pair".into()), ..Default::default() };
        let merged = file.overridden_by(flags);
        assert_eq!(merged.steps().unwrap(), 20);
        assert_eq!(merged.seed(), 3);
        assert_eq!(merged.ensemble().unwrap().kind().name(), "signed_pair");
    }

    #[test]
    fn atoms_from_file() {
        let cfg = RunConfig::from_toml("steps = 5\n[[atoms]]\nprob = 1.0\nA = [[2.0]]\nB = [[1.0]]\n").unwrap();
        assert_eq!(cfg.ensemble().unwrap().dim(), 1);
    }

    #[test]
    fn zero_steps_is_validation_error() {
        let cfg = RunConfig { steps: Some(0), ..Default::default() };
        assert!(cfg.steps().unwrap_err().is_validation());
    }

    #[test]
    fn missing_ensemble() {
        assert!(RunConfig::default().ensemble().unwrap_err().is_validation());
    }

    #[test]
    fn track_dimension_checked() {
        let cfg = RunConfig { track: vec![TrackSpec(vec![1.0, 0.0, 0.0])], ..Default::default() };
        assert!(matches!(cfg.tracked(2), Err(Error::DimensionMismatch { .. })));
    }
}
