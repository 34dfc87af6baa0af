//! JSON system descriptions.

use crate::CliError;
use delaycert::gamma::GammaDelaySystem;
use delaycert::poisson::PoissonDelaySystem;
use delaycert::Matrix;
use serde::Deserialize;
use std::path::Path;

pub const TWO_CARS: &str = include_str!("../specs/two_cars.json");
pub const DISCRETE_EXAMPLE: &str = include_str!("../specs/discrete_example.json");

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpecFile {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "A1")]
    pub a1: Vec<Vec<f64>>,
    pub distribution: Distribution,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Distribution {
    Gamma {
        #[serde(rename = "N")]
        n: u32,
        #[serde(rename = "T")]
        t: f64,
        h: f64,
    },
    Poisson {
        lambda: f64,
        #[serde(default)]
        h: u32,
    },
}

#[derive(Clone, Debug)]
pub enum System {
    Gamma(GammaDelaySystem),
    Poisson(PoissonDelaySystem),
}

impl System {
    pub fn dim(&self) -> usize {
        match self {
            System::Gamma(s) => s.dim(),
            System::Poisson(s) => s.dim(),
        }
    }
}

fn matrix(field: &str, rows: &[Vec<f64>], origin: &str) -> Result<Matrix, CliError> {
    let bad = |msg: String| CliError::Spec(format!("{origin}: field {field}: {msg}"));
    let n = rows.len();
    if n == 0 {
        return Err(bad("matrix is empty".into()));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != n {
            return Err(bad(format!("row {} has {} entries, expected {n} (matrices must be square)", i + 1, r.len())));
        }
    }
    Matrix::from_rows(rows).map_err(|e| bad(e.to_string()))
}

pub fn parse(text: &str, origin: &str) -> Result<(SystemSpecFile, System), CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let spec: SystemSpecFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { String::new() } else { format!("field {path}: ") };
        // serde_json appends the line and column itself
        CliError::Spec(format!("{origin}: {field}{}", e.inner()))
    })?;
    let a = matrix("A", &spec.a, origin)?;
    let a1 = matrix("A1", &spec.a1, origin)?;
    if a.rows() != a1.rows() {
        return Err(CliError::Spec(format!("{origin}: field A1: dimension {} differs from A ({})", a1.rows(), a.rows())));
    }
    let dist_err = |e: delaycert::Error| CliError::Spec(format!("{origin}: field distribution: {e}"));
    let sys = match spec.distribution {
        Distribution::Gamma { n, t, h } => System::Gamma(GammaDelaySystem::new(a, a1, n, t, h).map_err(dist_err)?),
        Distribution::Poisson { lambda, h } => System::Poisson(PoissonDelaySystem::new(a, a1, lambda, h).map_err(dist_err)?),
    };
    Ok((spec, sys))
}

pub fn load(path: Option<&Path>, builtin: &str) -> Result<System, CliError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Spec(format!("{}: {e}", p.display())))?;
            Ok(parse(&text, &p.display().to_string())?.1)
        }
        None => Ok(parse(builtin, "<builtin>")?.1),
    }
}
