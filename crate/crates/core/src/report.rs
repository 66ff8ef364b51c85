//! JSON reports. Output contains no timestamps, so identical runs give
//! identical bytes.

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::ensemble::EnsembleSpec;
use crate::estimators::{EpsRatio, LyapunovEstimate, XiEstimate};

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub method: String,
    pub value: f64,
    pub abs_value: f64,
    pub std_err: f64,
    pub replicas: usize,
    pub steps: usize,
    pub seed: u64,
    pub ensemble_digest: String,
    pub rejected_samples: usize,
    /// Method-specific fields, sorted by key.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Report {
    pub fn new(method: &str, spec: &EnsembleSpec, seed: u64) -> Self {
        Report {
            method: method.to_string(),
            value: f64::NAN,
            abs_value: f64::NAN,
            std_err: f64::NAN,
            replicas: 0,
            steps: 0,
            seed,
            ensemble_digest: spec.digest(),
            rejected_samples: 0,
            extra: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.extra.insert(key.to_string(), serde_json::to_value(value).expect("serializable"));
        self
    }

    pub fn from_xi(est: &XiEstimate, spec: &EnsembleSpec, steps: usize, seed: u64) -> Self {
        let mut r = Report::new(est.method.name(), spec, seed);
        r.value = est.value;
        r.abs_value = est.abs_value;
        r.std_err = est.std_err;
        r.replicas = est.replicas.len();
        r.steps = steps;
        r.rejected_samples = est.rejected_samples;
        r.with("replica_values", &est.replicas)
    }

    pub fn from_lyapunov(est: &LyapunovEstimate, spec: &EnsembleSpec, seed: u64) -> Self {
        let mut r = Report::new("lyapunov", spec, seed);
        r.value = est.gamma;
        r.abs_value = est.gamma.abs();
        r.std_err = est.std_err_gamma;
        r.replicas = est.n_replicas;
        r.steps = est.n_steps;
        r.with("gamma2", est.gamma2).with("std_err_gamma2", est.std_err_gamma2).with("replica_values", &est.replicas)
    }

    /// The headline value is the ratio at the first eps.
    pub fn from_gamma_eps(ratios: &[EpsRatio], spec: &EnsembleSpec, steps: usize, replicas: usize, seed: u64) -> Self {
        let mut r = Report::new("gamma_eps", spec, seed);
        if let Some(first) = ratios.first() {
            r.value = first.ratio;
            r.abs_value = first.ratio.abs();
            r.std_err = first.std_err;
        }
        r.replicas = replicas;
        r.steps = steps;
        let table: Vec<Value> =
            ratios.iter().map(|e| json!({"eps": e.eps, "ratio": e.ratio, "std_err": e.std_err})).collect();
        r.with("ratios", table)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::builtin;
    use crate::estimators::XiMethod;

    #[test]
    fn required_fields_present() {
        let spec = builtin("signed_pair", &Default::default()).unwrap();
        let est = XiEstimate {
            value: -0.25,
            abs_value: 0.25,
            method: XiMethod::PsiRoute,
            replicas: vec![-0.5, 0.0],
            std_err: 0.25,
            rejected_samples: 0,
        };
        let v: Value = serde_json::from_str(&Report::from_xi(&est, &spec, 100, 7).to_json()).unwrap();
        for key in [
            "method",
            "value",
            "abs_value",
            "std_err",
            "replicas",
            "steps",
            "seed",
            "ensemble_digest",
            "rejected_samples",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["method"], "psi_route");
        assert_eq!(v["replicas"], 2);
        assert_eq!(v["ensemble_digest"].as_str().unwrap().len(), 64);
    }

    #[test]
    fn output_is_stable() {
        let spec = builtin("signed_pair", &Default::default()).unwrap();
        let a = Report::new("x", &spec, 1).with("b", 2).with("a", 1).to_json();
        let b = Report::new("x", &spec, 1).with("a", 1).with("b", 2).to_json();
        assert_eq!(a, b);
    }
}
