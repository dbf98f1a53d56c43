//! Subcommands: file-level wrappers around [`crate::pipeline`].

use std::fs;
use std::path::{Path, PathBuf};

use vfmodel_core::diagnostics;
use vfmodel_core::evaluation::{compute_dic, select_draws, PppReport, RecoveryConfig};
use vfmodel_core::simulate::{simulate as generate, SimulationLayout, TruthConfig};
use vfmodel_core::stage1::{Stage1Config, MIN_RETAINED};
use vfmodel_core::stage2::{ParameterSummary, Stage2Config};
use vfmodel_core::{Design, ModelVariant};

use crate::config::{Command, Preset, RunConfig};
use crate::error::{CliError, Result};
use crate::io::artifacts::{self, Manifest, MANIFEST};
use crate::io::records::{ingest, write_records};
use crate::io::truth::write_truth;
use crate::io::{create_dir, num, write_text};
use crate::pipeline;

pub const DATA_FILE: &str = "data.csv";
pub const TRUTH_FILE: &str = "truth.txt";

pub fn run(command: &Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Simulate(_) => simulate(cfg),
        Command::FitStage1(_) => fit_stage1(cfg),
        Command::FitStage2(_) => fit_stage2(cfg),
        Command::RecoverEffects(_) => recover_effects(cfg),
        Command::Evaluate(_) => evaluate(cfg),
        Command::Summarize(_) => summarize(cfg),
    }
}

fn thread_pool(cfg: &RunConfig) -> Result<rayon::ThreadPool> {
    pipeline::thread_pool(cfg.jobs())
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", cfg.jobs())))
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let model = cfg.model.unwrap_or(ModelVariant::Model3);
    let out = cfg.out()?;
    let layout = SimulationLayout::new(
        cfg.individuals.unwrap_or(20),
        cfg.visits.unwrap_or_else(SimulationLayout::default_visits),
    );
    create_dir(out)?;
    let sim = generate(
        &TruthConfig::preset(model),
        &layout,
        &mut pipeline::simulation_stream(seed).rng(),
    )?;
    write_records(&out.join(DATA_FILE), &sim.data)?;
    write_truth(&out.join(TRUTH_FILE), &sim.truth, &sim.data)?;
    let readings: usize = sim.data.iter().map(|d| d.observations.len()).sum();
    eprintln!(
        "simulated {model}: {} individuals, {readings} readings, {:.2}% censored, {} capped at 50 dB",
        sim.data.len(),
        100.0 * sim.censored_fraction(),
        sim.truth.cap_events
    );
    Ok(())
}

fn stage1_config(cfg: &RunConfig, model: ModelVariant) -> Stage1Config {
    let mut s = match cfg.preset {
        Preset::Desk => Stage1Config::desk(model),
        Preset::Paper => Stage1Config::paper(model),
    };
    if let Some(it) = cfg.iterations {
        s.iterations = it;
        s.burn_in = it / 2;
    }
    if let Some(b) = cfg.burn_in {
        s.burn_in = b;
    }
    if let Some(t) = cfg.thin {
        s.thin = t;
    }
    s
}

fn stage2_config(cfg: &RunConfig) -> Stage2Config {
    let mut s = Stage2Config::default();
    if let Some(it) = cfg.iterations {
        s.iterations = it;
        s.burn_in = it / 5;
    }
    if let Some(b) = cfg.burn_in {
        s.burn_in = b;
    }
    if let Some(t) = cfg.thin {
        s.thin = t;
    }
    if let Some(c) = cfg.chains {
        s.chains = c;
    }
    s
}

fn remove_dir(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}

pub fn fit_stage1(cfg: &RunConfig) -> Result<()> {
    let model = cfg.model()?;
    let seed = cfg.seed()?;
    let input = cfg.input()?;
    let out = cfg.out()?;
    let s1 = stage1_config(cfg, model);
    s1.validate()?;
    let ing = ingest(input)?;
    if ing.data.is_empty() {
        return Err(CliError::Artifact(format!(
            "{}: no usable readings",
            input.display()
        )));
    }
    eprintln!(
        "read {} individuals; dropped {} unreliable and {} blind-spot rows",
        ing.data.len(),
        ing.dropped_unreliable,
        ing.dropped_blind_spot
    );
    create_dir(out)?;
    remove_dir(&out.join("pools"))?;
    remove_dir(&out.join("recovered"))?;
    let tp = thread_pool(cfg)?;
    eprintln!(
        "stage 1 ({model}): {} iterations, burn-in {}, thin {}, {} workers",
        s1.iterations,
        s1.burn_in,
        s1.thin,
        cfg.jobs()
    );
    let results = pipeline::fit_stage1(&ing.data, &s1, seed, &tp)?;
    let mut entries = Vec::with_capacity(results.len());
    for r in &results {
        artifacts::write_pool(out, &r.pool)?;
        entries.push(vfmodel_core::evaluation::PppEntry {
            individual_id: r.pool.individual_id.clone(),
            ppp: r.ppp,
        });
        if !r.acceptance.is_empty() {
            let acc: Vec<String> = r
                .acceptance
                .iter()
                .map(|(k, v)| format!("{k} {v:.2}"))
                .collect();
            eprintln!("  {}: acceptance {}", r.pool.individual_id, acc.join(", "));
        }
    }
    artifacts::write_individual_ppp(out, &entries)?;
    let mut man = Manifest::default();
    man.set("model", model.number());
    man.set("seed", seed);
    man.set("data", input.display());
    man.set("stage1_iterations", s1.iterations);
    man.set("stage1_burn_in", s1.burn_in);
    man.set("stage1_thin", s1.thin);
    let ids: Vec<&str> = ing.data.iter().map(|d| d.individual_id.as_str()).collect();
    man.set("individuals", ids.join(","));
    man.write(out)?;
    eprintln!(
        "wrote {} pools of {} draws to {}",
        results.len(),
        s1.retained(),
        out.display()
    );
    Ok(())
}

/// Run directory, its manifest and model, checking any `--model` request.
fn open_run(dir: &Path, cfg: &RunConfig) -> Result<(Manifest, ModelVariant, Vec<String>)> {
    let man = Manifest::read(dir)?;
    let model = man.model(dir)?;
    if let Some(m) = cfg.model {
        if m != model {
            return Err(CliError::Artifact(format!(
                "{} holds {model} artifacts but {m} was requested",
                dir.display()
            )));
        }
    }
    let ids = man.individuals(dir)?;
    Ok((man, model, ids))
}

pub fn fit_stage2(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out()?;
    let seed = cfg.seed()?;
    let (mut man, model, ids) = open_run(out, cfg)?;
    let s2 = stage2_config(cfg);
    s2.validate()?;
    let pools = artifacts::read_pools(out, &ids, model)?;
    for p in &pools {
        if p.draws.len() < MIN_RETAINED {
            eprintln!(
                "warning: pool of {} holds only {} draws (fewer than {MIN_RETAINED}); the stage-2 proposal is coarse",
                p.individual_id,
                p.draws.len()
            );
        }
    }
    remove_dir(&out.join("recovered"))?;
    let tp = thread_pool(cfg)?;
    eprintln!(
        "stage 2 ({model}): {} chains, {} iterations, burn-in {}, thin {}",
        s2.chains, s2.iterations, s2.burn_in, s2.thin
    );
    let run = pipeline::fit_stage2(&pools, &s2, seed, &tp)?;
    for (c, chain) in run.chains.iter().enumerate() {
        artifacts::write_chain(out, c, model, &chain.draws)?;
        artifacts::write_indices(out, c, &ids, &chain.indices)?;
        eprintln!(
            "  chain {} ({} init): acceptance {:.3}",
            c + 1,
            chain.init.name(),
            chain.acceptance
        );
    }
    let summaries = run.summaries()?;
    artifacts::write_summary(out, &summaries)?;
    for s in &summaries {
        eprintln!("  {:<24} R-hat {:.4}", s.name, s.rhat);
    }
    man.set("stage2_seed", seed);
    man.set("chains", s2.chains);
    man.set("stage2_iterations", s2.iterations);
    man.set("stage2_burn_in", s2.burn_in);
    man.set("stage2_thin", s2.thin);
    man.0.remove("recovery_draws");
    man.write(out)?;
    Ok(())
}

/// Designs of `ids` from the data set, in manifest order.
fn load_designs(input: &Path, ids: &[String]) -> Result<Vec<Design>> {
    let ing = ingest(input)?;
    ids.iter()
        .map(|id| {
            let d = ing
                .data
                .iter()
                .find(|d| &d.individual_id == id)
                .ok_or_else(|| {
                    CliError::Artifact(format!(
                        "{} has no readings for individual {id}",
                        input.display()
                    ))
                })?;
            Ok(Design::new(d)?)
        })
        .collect()
}

fn data_path(dir: &Path, man: &Manifest, cfg: &RunConfig) -> Result<PathBuf> {
    match &cfg.input {
        Some(_) => Ok(cfg.input()?.to_path_buf()),
        None => Ok(PathBuf::from(man.require(dir, "data")?)),
    }
}

fn stage2_rows(dir: &Path, man: &Manifest, ids: &[String]) -> Result<Vec<Vec<usize>>> {
    let chains: usize = man.parse(dir, "chains")?;
    let mut rows = Vec::new();
    for c in 0..chains {
        rows.extend(artifacts::read_indices(dir, c, ids)?);
    }
    Ok(rows)
}

fn recover_run(dir: &Path, cfg: &RunConfig, seed: u64) -> Result<()> {
    let (mut man, model, ids) = open_run(dir, cfg)?;
    let designs = load_designs(&data_path(dir, &man, cfg)?, &ids)?;
    let pools = artifacts::read_pools(dir, &ids, model)?;
    let rows = stage2_rows(dir, &man, &ids)?;
    let rc = RecoveryConfig {
        draws: cfg.draws.unwrap_or(RecoveryConfig::default().draws),
        ..RecoveryConfig::default()
    };
    let draws = select_draws(rows.len(), rc.draws);
    eprintln!(
        "recovering random effects of {} individuals at {} stage-2 draws",
        ids.len(),
        draws.len()
    );
    let tp = thread_pool(cfg)?;
    let recovered = pipeline::recover_all(&designs, &pools, &rows, &draws, &rc, seed, &tp)?;
    remove_dir(&dir.join("recovered"))?;
    let mut skipped = Vec::new();
    for (i, (d, r)) in designs.iter().zip(&recovered).enumerate() {
        let used: Vec<usize> = r.draws.iter().map(|x| rows[x.draw][i]).collect();
        artifacts::write_recovered(dir, d, r, &used)?;
        for (k, why) in &r.skipped {
            eprintln!("warning: {} draw {k} skipped: {why}", r.individual_id);
            skipped.push((r.individual_id.clone(), *k, why.clone()));
        }
    }
    artifacts::write_skipped(dir, &skipped)?;
    man.set("recovery_draws", draws.len());
    man.set("recovery_seed", seed);
    man.write(dir)
}

pub fn recover_effects(cfg: &RunConfig) -> Result<()> {
    recover_run(cfg.out()?, cfg, cfg.seed()?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub model: ModelVariant,
    pub ppp: PppReport,
    pub dic: vfmodel_core::evaluation::DicReport,
}

fn evaluate_run(dir: &Path, cfg: &RunConfig) -> Result<Evaluation> {
    let (man, model, ids) = open_run(dir, cfg)?;
    if man.get("recovery_draws").is_none() || !dir.join("recovered").exists() {
        let seed = match cfg.seed {
            Some(s) => s,
            None => man.parse(dir, "seed")?,
        };
        eprintln!(
            "note: {} has no recovered effects; recovering with K = {}",
            dir.display(),
            cfg.draws.unwrap_or(RecoveryConfig::default().draws)
        );
        recover_run(dir, cfg, seed)?;
    }
    let man = Manifest::read(dir)?;
    let designs = load_designs(&data_path(dir, &man, cfg)?, &ids)?;
    let pools = artifacts::read_pools(dir, &ids, model)?;
    let skipped = artifacts::read_skipped(dir)?;
    let mut recovered = Vec::with_capacity(ids.len());
    for (d, p) in designs.iter().zip(&pools) {
        let mut r = artifacts::read_recovered(dir, d, p)?;
        r.skipped = skipped
            .iter()
            .filter(|s| s.0 == d.individual_id)
            .map(|s| (s.1, s.2.clone()))
            .collect();
        recovered.push(r);
    }
    let dic = compute_dic(&designs, model, &recovered)?;
    let ppp = PppReport::new(artifacts::read_individual_ppp(dir)?)?;
    artifacts::write_ppp_report(dir, &ppp)?;
    artifacts::write_dic(dir, model, &dic)?;
    let flagged: Vec<&str> = ppp
        .flagged()
        .iter()
        .map(|e| e.individual_id.as_str())
        .collect();
    let block = format!(
        "model = {}\nmean_ppp = {}\nflagged = {}\ndbar = {}\ndhat = {}\np_d = {}\ndic = {}\ndraws = {}\n",
        model.number(),
        num(ppp.mean_ppp),
        flagged.join(","),
        num(dic.dbar),
        num(dic.dhat),
        num(dic.p_d),
        num(dic.dic),
        dic.draws
    );
    write_text(&dir.join("evaluation.txt"), &block)?;
    Ok(Evaluation { model, ppp, dic })
}

/// Run directories under `out`: itself if it holds a manifest, otherwise
/// every immediate subdirectory that does.
fn run_dirs(out: &Path) -> Result<Vec<PathBuf>> {
    if out.join(MANIFEST).exists() {
        return Ok(vec![out.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)
        .map_err(|e| CliError::io(out, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Artifact(format!(
            "{} holds no fitted runs",
            out.display()
        )));
    }
    Ok(dirs)
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out()?;
    let mut results = Vec::new();
    for dir in run_dirs(out)? {
        let e = evaluate_run(&dir, cfg)?;
        println!(
            "{}: mean ppp {:.4} ({} flagged), DIC {:.2} (Dbar {:.2}, pD {:.2}, {} draws)",
            e.model,
            e.ppp.mean_ppp,
            e.ppp.flagged().len(),
            e.dic.dic,
            e.dic.dbar,
            e.dic.p_d,
            e.dic.draws
        );
        results.push(e);
    }
    if results.len() > 1 {
        results.sort_by(|a, b| a.dic.dic.total_cmp(&b.dic.dic));
        let order: Vec<String> = results
            .iter()
            .map(|e| format!("{} ({:.2})", e.model, e.dic.dic))
            .collect();
        println!("DIC ordering: {}", order.join(" < "));
    }
    Ok(())
}

/// Summaries over the chain files, computed exactly as for an in-memory run.
pub fn summaries_from_files(
    dir: &Path,
    man: &Manifest,
    model: ModelVariant,
) -> Result<Vec<ParameterSummary>> {
    let chains: usize = man.parse(dir, "chains")?;
    let mut names = Vec::new();
    let mut per_chain = Vec::with_capacity(chains);
    for c in 0..chains {
        let (n, rows) = artifacts::read_chain(dir, c, model)?;
        names = n;
        per_chain.push(rows);
    }
    let mut out = Vec::with_capacity(names.len());
    for (col, name) in names.into_iter().enumerate() {
        let cols: Vec<Vec<f64>> = per_chain
            .iter()
            .map(|c| c.iter().map(|r| r[col]).collect())
            .collect();
        let all: Vec<f64> = cols.iter().flatten().copied().collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        out.push(ParameterSummary {
            name,
            summary: diagnostics::summarize(&all)?,
            rhat: diagnostics::split_rhat(&refs).unwrap_or(f64::NAN),
        });
    }
    Ok(out)
}

pub fn summarize(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out()?;
    let (man, model, _) = open_run(out, cfg)?;
    let summaries = summaries_from_files(out, &man, model)?;
    artifacts::write_summary(out, &summaries)?;
    println!(
        "{:<24} {:>12} {:>10} {:>12} {:>12} {:>8}",
        "parameter", "mean", "sd", "ci2.5", "ci97.5", "rhat"
    );
    for s in &summaries {
        let m = &s.summary;
        println!(
            "{:<24} {:>12.4} {:>10.4} {:>12.4} {:>12.4} {:>8.4}",
            s.name, m.mean, m.sd, m.q025, m.q975, s.rhat
        );
    }
    Ok(())
}
