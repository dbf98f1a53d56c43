//! Generator truth as a flat key-value file.

use std::collections::BTreeMap;
use std::path::Path;

use vfmodel_core::linalg::Matrix2;
use vfmodel_core::simulate::{GeneratorTruth, TruthConfig};
use vfmodel_core::{Design, FixedEffects, IndividualData, ModelVariant, VarianceParams};

use super::{num, read_key_values, write_key_values};
use crate::error::{CliError, Result};

const BLOCKS: [&str; 4] = ["cov_alpha", "cov_gamma", "cov_eta", "cov_lambda"];

fn matrices(c: &TruthConfig) -> [Matrix2; 4] {
    [c.cov_alpha, c.cov_gamma, c.cov_eta, c.cov_lambda]
}

/// Population values, then `<id>.alpha0`, `<id>.alpha1` and one key per
/// random effect of every individual. `alpha` holds the deviation from beta.
pub fn write_truth(path: &Path, truth: &GeneratorTruth, data: &[IndividualData]) -> Result<()> {
    let c = &truth.config;
    let mut kv: Vec<(String, String)> = vec![
        ("model".into(), c.variant.number().to_string()),
        ("beta0".into(), num(c.fixed.beta0)),
        ("beta1".into(), num(c.fixed.beta1)),
        ("sigma2".into(), num(c.var.sigma2)),
        ("beta_star0".into(), num(c.var.beta_star0)),
        ("beta_star1".into(), num(c.var.beta_star1)),
        ("sigma2_phi".into(), num(c.sigma2_phi)),
    ];
    for (name, m) in BLOCKS.iter().zip(matrices(c)) {
        kv.push((format!("{name}11"), num(m.0[0][0])));
        kv.push((format!("{name}21"), num(m.0[1][0])));
        kv.push((format!("{name}22"), num(m.0[1][1])));
    }
    kv.push(("cap_events".into(), truth.cap_events.to_string()));
    kv.push(("individuals".into(), truth.individuals.len().to_string()));
    for (ind, d) in truth.individuals.iter().zip(data) {
        let design = Design::new(d)?;
        let id = &ind.individual_id;
        kv.push((format!("{id}.alpha0"), num(ind.effects.alpha[0])));
        kv.push((format!("{id}.alpha1"), num(ind.effects.alpha[1])));
        for (name, v) in design
            .effect_names(true)
            .iter()
            .zip(ind.effects.to_flat(true))
        {
            kv.push((format!("{id}.{name}"), num(v)));
        }
    }
    write_key_values(path, &kv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruthFile {
    pub config: TruthConfig,
    pub cap_events: usize,
    /// Per-individual effect values keyed by `<id>.<effect>`.
    pub effects: BTreeMap<String, f64>,
}

pub fn read_truth(path: &Path) -> Result<TruthFile> {
    let kv = read_key_values(path)?;
    let get = |k: &str| -> Result<f64> {
        kv.get(k)
            .ok_or_else(|| CliError::Artifact(format!("{}: missing key {k}", path.display())))?
            .parse()
            .map_err(|_| CliError::Artifact(format!("{}: key {k} is not a number", path.display())))
    };
    let variant = ModelVariant::from_number(get("model")? as u8)?;
    let mut m = [Matrix2::zeros(); 4];
    for (slot, name) in m.iter_mut().zip(BLOCKS) {
        let (a, b, d) = (
            get(&format!("{name}11"))?,
            get(&format!("{name}21"))?,
            get(&format!("{name}22"))?,
        );
        *slot = Matrix2::new(a, b, b, d);
    }
    let config = TruthConfig {
        variant,
        fixed: FixedEffects {
            beta0: get("beta0")?,
            beta1: get("beta1")?,
        },
        var: VarianceParams {
            beta_star0: get("beta_star0")?,
            beta_star1: get("beta_star1")?,
            sigma2: get("sigma2")?,
        },
        sigma2_phi: get("sigma2_phi")?,
        cov_alpha: m[0],
        cov_gamma: m[1],
        cov_eta: m[2],
        cov_lambda: m[3],
    };
    let mut effects = BTreeMap::new();
    for k in kv.keys().filter(|k| k.contains('.')) {
        effects.insert(k.clone(), get(k)?);
    }
    Ok(TruthFile {
        config,
        cap_events: get("cap_events")? as usize,
        effects,
    })
}
