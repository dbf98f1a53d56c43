//! In-memory pipeline steps with deterministic parallelism: every random
//! stream is keyed by seed and individual id (or chain number), never by
//! the worker that happens to run it.

use rayon::prelude::*;
use rayon::ThreadPool;

use vfmodel_core::distributions::RngStream;
use vfmodel_core::evaluation::{
    ppc_individual, recover_random_effects, RecoveredEffects, RecoveryConfig,
};
use vfmodel_core::stage1::{fit_individual, PoolDraw, SamplePool, Stage1Config};
use vfmodel_core::stage2::{chain_stream, run_chain, PreparedPools, Stage2Config, Stage2Run};
use vfmodel_core::{Design, IndividualData, Result};

pub fn thread_pool(jobs: usize) -> std::result::Result<ThreadPool, rayon::ThreadPoolBuildError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
}

pub fn default_jobs() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

pub fn stage1_stream(seed: u64, id: &str) -> RngStream {
    RngStream::derive_named(seed, "stage1", id, 0)
}

pub fn ppc_stream(seed: u64, id: &str) -> RngStream {
    RngStream::derive_named(seed, "ppc", id, 0)
}

pub fn simulation_stream(seed: u64) -> RngStream {
    RngStream::derive(seed, "simulate", &[])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Result {
    pub pool: SamplePool,
    /// Predictive p-value over the retained stage-1 states.
    pub ppp: f64,
    pub acceptance: Vec<(&'static str, f64)>,
}

/// Fits every individual and runs its predictive check while the full
/// stage-1 states are still in memory.
pub fn fit_stage1(
    data: &[IndividualData],
    cfg: &Stage1Config,
    seed: u64,
    pool: &ThreadPool,
) -> Result<Vec<Stage1Result>> {
    let mut cfg = cfg.clone();
    cfg.keep_effects = true;
    pool.install(|| {
        data.par_iter()
            .map(|d| {
                let fit =
                    fit_individual(d, &cfg, &mut stage1_stream(seed, &d.individual_id).rng())?;
                let design = Design::new(d)?;
                let ppp = ppc_individual(
                    &design,
                    &fit.psi,
                    cfg.model,
                    &mut ppc_stream(seed, &d.individual_id).rng(),
                )?;
                Ok(Stage1Result {
                    pool: fit.pool,
                    ppp,
                    acceptance: fit.acceptance,
                })
            })
            .collect()
    })
}

/// Stage 2 with chains run in parallel; identical to the sequential run.
pub fn fit_stage2(
    pools: &[SamplePool],
    cfg: &Stage2Config,
    seed: u64,
    pool: &ThreadPool,
) -> Result<Stage2Run> {
    cfg.validate()?;
    let prep = PreparedPools::new(pools, &cfg.stage1_priors)?;
    let chains = pool.install(|| {
        (0..cfg.chains)
            .into_par_iter()
            .map(|c| run_chain(&prep, cfg, c, &mut chain_stream(seed, c).rng()))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(Stage2Run {
        variant: prep.variant,
        individual_ids: prep.individual_ids,
        chains,
    })
}

/// Pool row of every individual at every retained stage-2 draw, chains in order.
pub fn pool_rows(run: &Stage2Run) -> Vec<Vec<usize>> {
    run.chains
        .iter()
        .flat_map(|c| {
            c.indices
                .iter()
                .map(|r| r.iter().map(|&j| j as usize).collect())
        })
        .collect()
}

/// Composition step for every individual at the selected draws.
pub fn recover_all(
    designs: &[Design],
    pools: &[SamplePool],
    rows: &[Vec<usize>],
    draws: &[usize],
    cfg: &RecoveryConfig,
    seed: u64,
    pool: &ThreadPool,
) -> Result<Vec<RecoveredEffects>> {
    let variant = pools[0].variant;
    pool.install(|| {
        designs
            .par_iter()
            .zip(pools)
            .enumerate()
            .map(|(i, (d, p))| {
                let conditions: Vec<(usize, PoolDraw)> = draws
                    .iter()
                    .map(|&k| {
                        let row = rows[k][i];
                        let theta = p.draws.get(row).ok_or_else(|| {
                            vfmodel_core::Error::Structure(format!(
                                "pool of {} has no row {row}",
                                p.individual_id
                            ))
                        })?;
                        Ok((k, theta.clone()))
                    })
                    .collect::<Result<_>>()?;
                recover_random_effects(d, variant, &conditions, cfg, seed)
            })
            .collect()
    })
}
