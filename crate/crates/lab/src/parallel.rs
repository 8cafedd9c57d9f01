//! Episodes on the rayon pool. Seeds come from the episode index, so the
//! results match the serial harness bit for bit.

use feedback_lab_core::sim::{aggregate, episode_seed, run_episode, summarize, EpisodeConfig, McReport};
use feedback_lab_core::Result;
use rayon::prelude::*;

pub fn monte_carlo(config: &EpisodeConfig, master: u64, n_seeds: usize) -> Result<McReport> {
    Ok(monte_carlo_many(std::slice::from_ref(config), master, n_seeds)?.remove(0))
}

/// One report per config, all episodes scheduled together.
pub fn monte_carlo_many(configs: &[EpisodeConfig], master: u64, n_seeds: usize) -> Result<Vec<McReport>> {
    if n_seeds == 0 {
        return Err(feedback_lab_core::Error::Domain("need at least one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| (0..n_seeds as u64).map(move |i| (c, i)))
        .collect();
    let summaries = jobs
        .par_iter()
        .map(|&(c, i)| summarize(&configs[c], master, i).map(|s| (c, s)))
        .collect::<Result<Vec<_>>>()?;
    let mut grouped: Vec<Vec<_>> = configs.iter().map(|_| Vec::with_capacity(n_seeds)).collect();
    for (c, s) in summaries {
        grouped[c].push(s);
    }
    Ok(grouped.into_iter().map(aggregate).collect())
}

/// Runs episodes `0..n_seeds` and maps each finished episode through `f`.
pub fn map_episodes<T, F>(config: &EpisodeConfig, master: u64, n_seeds: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &feedback_lab_core::sim::Trajectory, &feedback_lab_core::sim::EpisodeVerdict) -> T + Sync,
{
    (0..n_seeds as u64)
        .into_par_iter()
        .map(|i| {
            let (traj, verdict) = run_episode(config, episode_seed(master, i))?;
            Ok(f(i, &traj, &verdict))
        })
        .collect()
}
