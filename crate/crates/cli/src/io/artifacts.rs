//! Files of a run directory.
//!
//! ```text
//! run.txt                 manifest (model, seed, settings, individual ids)
//! pools/<id>.csv          stage-1 sample pool
//! ppp_individual.csv      per-individual predictive p-values from stage 1
//! chain_<c>.csv           stage-2 population draws
//! indices_<c>.csv         pool row of each individual at each stage-2 draw
//! summary.csv             posterior summaries with split R-hat
//! recovered/<id>.csv      random effects recovered by composition
//! recovered/skipped.csv   draws whose inner chain diverged
//! ppp.csv, dic.csv, evaluation.txt
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use vfmodel_core::evaluation::{DicReport, PppEntry, PppReport, RecoveredDraw, RecoveredEffects};
use vfmodel_core::stage1::{PoolDraw, SamplePool};
use vfmodel_core::stage2::{ParameterSummary, PopulationState};
use vfmodel_core::{Design, ModelVariant};

use super::{
    num, parse_num, read_key_values, read_numeric, read_table, write_key_values, write_numeric,
    write_table,
};
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "run.txt";

/// Key-value description of a run directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest(pub BTreeMap<String, String>);

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Manifest(read_key_values(&dir.join(MANIFEST))?))
    }

    pub fn read_or_default(dir: &Path) -> Result<Self> {
        if dir.join(MANIFEST).exists() {
            Self::read(dir)
        } else {
            Ok(Manifest::default())
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let pairs: Vec<(String, String)> =
            self.0.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        write_key_values(&dir.join(MANIFEST), &pairs)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn require(&self, dir: &Path, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| CliError::Artifact(format!("{}: manifest lacks {key}", dir.display())))
    }

    pub fn model(&self, dir: &Path) -> Result<ModelVariant> {
        let n: u8 = self
            .require(dir, "model")?
            .parse()
            .map_err(|_| CliError::Artifact(format!("{}: bad model in manifest", dir.display())))?;
        Ok(ModelVariant::from_number(n)?)
    }

    pub fn parse<T: std::str::FromStr>(&self, dir: &Path, key: &str) -> Result<T> {
        self.require(dir, key)?
            .parse()
            .map_err(|_| CliError::Artifact(format!("{}: bad {key} in manifest", dir.display())))
    }

    pub fn individuals(&self, dir: &Path) -> Result<Vec<String>> {
        Ok(self
            .require(dir, "individuals")?
            .split(',')
            .map(String::from)
            .collect())
    }
}

pub fn pool_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("pools").join(format!("{id}.csv"))
}

pub fn write_pool(dir: &Path, pool: &SamplePool) -> Result<()> {
    let rows: Vec<Vec<f64>> = pool.draws.iter().map(PoolDraw::values).collect();
    write_numeric(
        &pool_path(dir, &pool.individual_id),
        &PoolDraw::column_names(pool.variant),
        &rows,
    )
}

pub fn read_pool(dir: &Path, id: &str, variant: ModelVariant) -> Result<SamplePool> {
    let path = pool_path(dir, id);
    let header: Vec<String> = PoolDraw::column_names(variant)
        .into_iter()
        .map(String::from)
        .collect();
    let rows = read_numeric(&path, &header)?;
    let draws = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            PoolDraw::from_values(variant, r)
                .map_err(|e| CliError::parse(&path, i as u64 + 2, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SamplePool::new(id, variant, draws)?)
}

/// Pools of `ids`, failing with the full list of absent individuals.
pub fn read_pools(dir: &Path, ids: &[String], variant: ModelVariant) -> Result<Vec<SamplePool>> {
    let missing: Vec<&str> = ids
        .iter()
        .filter(|id| !pool_path(dir, id).exists())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Artifact(format!(
            "no stage-1 pool for individual(s) {}",
            missing.join(", ")
        )));
    }
    ids.iter().map(|id| read_pool(dir, id, variant)).collect()
}

pub fn write_individual_ppp(dir: &Path, entries: &[PppEntry]) -> Result<()> {
    let rows: Vec<Vec<String>> = entries
        .iter()
        .map(|e| vec![e.individual_id.clone(), num(e.ppp)])
        .collect();
    write_table(
        &dir.join("ppp_individual.csv"),
        &["individual_id", "ppp"],
        &rows,
    )
}

pub fn read_individual_ppp(dir: &Path) -> Result<Vec<PppEntry>> {
    let path = dir.join("ppp_individual.csv");
    let t = read_table(&path)?;
    t.rows
        .iter()
        .map(|(line, f)| {
            Ok(PppEntry {
                individual_id: f[0].clone(),
                ppp: parse_num(&path, *line, &f[1])?,
            })
        })
        .collect()
}

pub fn chain_path(dir: &Path, c: usize) -> PathBuf {
    dir.join(format!("chain_{}.csv", c + 1))
}

pub fn indices_path(dir: &Path, c: usize) -> PathBuf {
    dir.join(format!("indices_{}.csv", c + 1))
}

pub fn write_chain(
    dir: &Path,
    c: usize,
    variant: ModelVariant,
    draws: &[PopulationState],
) -> Result<()> {
    let rows: Vec<Vec<f64>> = draws.iter().map(PopulationState::values).collect();
    write_numeric(
        &chain_path(dir, c),
        &PopulationState::column_names(variant),
        &rows,
    )
}

/// Column-major view of one chain file: (names, rows).
pub fn read_chain(
    dir: &Path,
    c: usize,
    variant: ModelVariant,
) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let names = PopulationState::column_names(variant);
    let rows = read_numeric(&chain_path(dir, c), &names)?;
    Ok((names, rows))
}

pub fn write_indices(dir: &Path, c: usize, ids: &[String], indices: &[Vec<u32>]) -> Result<()> {
    let rows: Vec<Vec<String>> = indices
        .iter()
        .map(|r| r.iter().map(u32::to_string).collect())
        .collect();
    write_table(&indices_path(dir, c), ids, &rows)
}

pub fn read_indices(dir: &Path, c: usize, ids: &[String]) -> Result<Vec<Vec<usize>>> {
    let path = indices_path(dir, c);
    let t = read_table(&path)?;
    if t.header != ids {
        return Err(CliError::parse(
            &path,
            1,
            "individual columns differ from the manifest",
        ));
    }
    t.rows
        .iter()
        .map(|(line, f)| {
            f.iter()
                .map(|v| {
                    v.parse()
                        .map_err(|_| CliError::parse(&path, *line, format!("bad pool row {v:?}")))
                })
                .collect()
        })
        .collect()
}

pub const SUMMARY_HEADER: [&str; 7] = [
    "parameter",
    "mean",
    "sd",
    "median",
    "ci2.5",
    "ci97.5",
    "rhat",
];

pub fn write_summary(dir: &Path, summaries: &[ParameterSummary]) -> Result<()> {
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            let m = &s.summary;
            vec![
                s.name.clone(),
                num(m.mean),
                num(m.sd),
                num(m.median),
                num(m.q025),
                num(m.q975),
                num(s.rhat),
            ]
        })
        .collect();
    write_table(&dir.join("summary.csv"), &SUMMARY_HEADER, &rows)
}

pub fn recovered_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("recovered").join(format!("{id}.csv"))
}

fn recovered_header(design: &Design, variant: ModelVariant) -> Vec<String> {
    let mut h = vec!["draw".to_string(), "pool_row".to_string()];
    h.extend(design.effect_names(variant.has_visit_effects()));
    h
}

/// One file per individual: stage-2 draw, pool row and the recovered effects.
pub fn write_recovered(
    dir: &Path,
    design: &Design,
    rec: &RecoveredEffects,
    rows: &[usize],
) -> Result<()> {
    let with_phi = rec.variant.has_visit_effects();
    let table: Vec<Vec<f64>> = rec
        .draws
        .iter()
        .zip(rows)
        .map(|(d, &row)| {
            let mut v = vec![d.draw as f64, row as f64];
            v.extend(d.effects.to_flat(with_phi));
            v
        })
        .collect();
    write_numeric(
        &recovered_path(dir, &rec.individual_id),
        &recovered_header(design, rec.variant),
        &table,
    )
}

pub fn read_recovered(dir: &Path, design: &Design, pool: &SamplePool) -> Result<RecoveredEffects> {
    let path = recovered_path(dir, &design.individual_id);
    let variant = pool.variant;
    let rows = read_numeric(&path, &recovered_header(design, variant))?;
    let mut draws = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let line = i as u64 + 2;
        let row = r[1] as usize;
        let theta = pool
            .draws
            .get(row)
            .ok_or_else(|| CliError::parse(&path, line, format!("pool has no row {row}")))?
            .clone();
        let effects = vfmodel_core::RandomEffects::from_flat(
            design,
            theta.alpha,
            &r[2..],
            variant.has_visit_effects(),
        )
        .map_err(|e| CliError::parse(&path, line, e.to_string()))?;
        draws.push(RecoveredDraw {
            draw: r[0] as usize,
            theta,
            effects,
        });
    }
    Ok(RecoveredEffects {
        individual_id: design.individual_id.clone(),
        variant,
        draws,
        skipped: Vec::new(),
    })
}

pub fn write_skipped(dir: &Path, skipped: &[(String, usize, String)]) -> Result<()> {
    let rows: Vec<Vec<String>> = skipped
        .iter()
        .map(|(id, k, why)| vec![id.clone(), k.to_string(), why.replace(',', ";")])
        .collect();
    write_table(
        &dir.join("recovered").join("skipped.csv"),
        &["individual_id", "draw", "reason"],
        &rows,
    )
}

pub fn read_skipped(dir: &Path) -> Result<Vec<(String, usize, String)>> {
    let path = dir.join("recovered").join("skipped.csv");
    let t = read_table(&path)?;
    t.rows
        .iter()
        .map(|(line, f)| {
            let k = f[1]
                .parse()
                .map_err(|_| CliError::parse(&path, *line, "bad draw index"))?;
            Ok((f[0].clone(), k, f[2].clone()))
        })
        .collect()
}

pub fn write_ppp_report(dir: &Path, report: &PppReport) -> Result<()> {
    let flagged: Vec<&str> = report
        .flagged()
        .iter()
        .map(|e| e.individual_id.as_str())
        .collect();
    let rows: Vec<Vec<String>> = report
        .entries
        .iter()
        .map(|e| {
            let flag = flagged.contains(&e.individual_id.as_str()) as u8;
            vec![e.individual_id.clone(), num(e.ppp), flag.to_string()]
        })
        .collect();
    write_table(
        &dir.join("ppp.csv"),
        &["individual_id", "ppp", "flagged"],
        &rows,
    )
}

pub fn write_dic(dir: &Path, variant: ModelVariant, dic: &DicReport) -> Result<()> {
    let row = vec![
        variant.number().to_string(),
        num(dic.dbar),
        num(dic.dhat),
        num(dic.p_d),
        num(dic.dic),
        dic.draws.to_string(),
    ];
    write_table(
        &dir.join("dic.csv"),
        &["model", "dbar", "dhat", "p_d", "dic", "draws"],
        &[row],
    )
}
