//! Replica-parallel experiments and limit estimators.
//!
//! Replica `r` walks on the tree `replica_tree_seed(master, r, attempt)`
//! with the walk seed `replica_walk_seed(master, r)`; the attempt counter
//! only moves when the tree of the previous attempt turned out to be
//! finite. Replicas run on a dedicated thread pool and their results are
//! reduced in replica order, so output bytes do not depend on the number
//! of threads.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, EnvironmentSpec};
use crate::error::{Error, Result};
use crate::json::{self, format_g17};
use crate::numeric::mean_stderr;
use crate::rng;
use crate::walk::{self, Snapshot, StopRule};

pub const DEFAULT_MAX_RESAMPLES: u32 = 64;
/// Default step cap for `ROOT_RETURNS` experiments.
pub const DEFAULT_RETURNS_STEP_CAP: u64 = 1 << 28;

/// A rayon pool with exactly `threads` workers.
pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    if threads == 0 {
        return Err(Error::Usage("thread count must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Resource(format!("cannot start thread pool: {e}")))
}

/// `2^j0, ..., 2^j1` in the unit of `kind`.
pub fn dyadic_grid(kind: StopRule, j0: u32, j1: u32) -> Result<Vec<StopRule>> {
    if j0 > j1 || j1 > 62 {
        return Err(Error::Usage(format!("bad dyadic range {j0}..{j1}")));
    }
    Ok((j0..=j1).map(|j| kind.with_parameter(1u64 << j)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub spec: EnvironmentSpec,
    pub stop_grid: Vec<StopRule>,
    pub replicas: u64,
    pub master_seed: u64,
    pub max_resamples_per_replica: u32,
    /// Per-replica step cap; runs hitting it are flagged `truncated`.
    pub max_steps: Option<u64>,
    pub threads: usize,
}

impl ExperimentPlan {
    /// A plan with the default resampling budget, the default step cap for
    /// return-time grids and one thread.
    pub fn new(spec: EnvironmentSpec, stop_grid: Vec<StopRule>, replicas: u64, master_seed: u64) -> Self {
        let max_steps = match stop_grid.first() {
            Some(StopRule::RootReturns(_)) => Some(DEFAULT_RETURNS_STEP_CAP),
            _ => None,
        };
        ExperimentPlan {
            spec,
            stop_grid,
            replicas,
            master_seed,
            max_resamples_per_replica: DEFAULT_MAX_RESAMPLES,
            max_steps,
            threads: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.replicas < 1 {
            return Err(Error::Config("replicas must be at least 1".into()));
        }
        let first = self.stop_grid.first().ok_or_else(|| Error::Config("empty stop grid".into()))?;
        if self.stop_grid.iter().any(|s| s.kind() != first.kind()) {
            return Err(Error::Config("stop grid mixes stop kinds".into()));
        }
        if self.stop_grid.windows(2).any(|w| w[0].parameter() >= w[1].parameter()) {
            return Err(Error::Config("stop grid must be strictly increasing".into()));
        }
        if first.parameter() == 0 {
            return Err(Error::Config("stop parameters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Observable {
    /// Largest fully visited generation at a fixed time.
    R,
    /// Largest fully visited generation at a return time to the root.
    Rtilde,
    Xstar,
    /// `ln max(ℓ(φ, n), 1)`.
    LogLroot,
    /// `ℓ(φ, n)`.
    Lroot,
    /// Elapsed steps (for return-time and hitting-time grids).
    Steps,
}

impl Observable {
    pub fn tag(self) -> &'static str {
        match self {
            Observable::R => "R",
            Observable::Rtilde => "RTILDE",
            Observable::Xstar => "XSTAR",
            Observable::LogLroot => "LOG_LROOT",
            Observable::Lroot => "LROOT",
            Observable::Steps => "STEPS",
        }
    }

    /// Observables recorded for a grid of the given stop kind.
    pub fn for_stop(stop: StopRule) -> &'static [Observable] {
        use Observable::*;
        match stop {
            StopRule::Steps(_) => &[R, Xstar, LogLroot, Lroot],
            StopRule::RootReturns(_) => &[Rtilde, Xstar, LogLroot, Lroot, Steps],
            StopRule::HitGeneration(_) => &[R, Xstar, LogLroot, Lroot, Steps],
        }
    }

    fn value(self, s: &Snapshot) -> f64 {
        match self {
            Observable::R | Observable::Rtilde => s.largest_full_generation as f64,
            Observable::Xstar => s.max_generation as f64,
            Observable::LogLroot => (s.root_local_time.max(1) as f64).ln(),
            Observable::Lroot => s.root_local_time as f64,
            Observable::Steps => s.steps as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub n: u64,
    pub observable: Observable,
    pub mean: f64,
    pub stderr: f64,
    pub replica_count: u64,
}

/// Bookkeeping of a plan run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub replicas: u64,
    /// Replicas that produced a surviving run.
    pub completed: u64,
    /// Replicas whose run hit the step cap.
    pub truncated: u64,
    /// Tree seeds found to give finite trees, as `(replica, attempt, tree_seed)`.
    pub extinct: Vec<(u64, u32, u64)>,
    /// Replicas that exhausted the resampling budget.
    pub abandoned: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub records: Vec<EstimateRecord>,
    pub snapshots: Vec<Snapshot>,
    pub manifest: RunManifest,
}

struct ReplicaOutcome {
    snapshots: Vec<Snapshot>,
    extinct: Vec<(u64, u32, u64)>,
    completed: bool,
}

fn run_replica(env: &Environment, plan: &ExperimentPlan, r: u64) -> Result<ReplicaOutcome> {
    let stop = *plan.stop_grid.last().expect("validated");
    let checkpoints: Vec<u64> = plan.stop_grid.iter().map(|s| s.parameter()).collect();
    let walk_seed = rng::replica_walk_seed(plan.master_seed, r);
    let mut extinct = Vec::new();
    for attempt in 0..=plan.max_resamples_per_replica {
        let tree_seed = rng::replica_tree_seed(plan.master_seed, r, attempt as u64);
        let mut snaps = walk::run(env, tree_seed, walk_seed, stop, &checkpoints, plan.max_steps)?;
        if snaps.last().is_some_and(|s| s.extinct) {
            extinct.push((r, attempt, tree_seed));
            continue;
        }
        for s in &mut snaps {
            s.replica = r;
        }
        return Ok(ReplicaOutcome { snapshots: snaps, extinct, completed: true });
    }
    Ok(ReplicaOutcome { snapshots: Vec::new(), extinct, completed: false })
}

fn progress(stop: StopRule, s: &Snapshot) -> u64 {
    match stop {
        StopRule::Steps(_) => s.steps,
        StopRule::RootReturns(_) => s.returns,
        StopRule::HitGeneration(_) => s.max_generation,
    }
}

/// Runs every replica once up to the last grid point, snapshotting at each
/// grid point, and aggregates per grid point and observable. Truncated
/// runs contribute only the grid points they reached.
pub fn run_plan(plan: &ExperimentPlan) -> Result<PlanResult> {
    plan.validate()?;
    let env = Environment::new(plan.spec.clone())?;
    let outcomes: Vec<ReplicaOutcome> = thread_pool(plan.threads)?
        .install(|| (0..plan.replicas).into_par_iter().map(|r| run_replica(&env, plan, r)).collect::<Result<_>>())?;

    let mut manifest =
        RunManifest { replicas: plan.replicas, completed: 0, truncated: 0, extinct: Vec::new(), abandoned: Vec::new() };
    let mut snapshots = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        manifest.extinct.extend(o.extinct);
        if o.completed {
            manifest.completed += 1;
            if o.snapshots.last().is_some_and(|s| s.truncated) {
                manifest.truncated += 1;
            }
        } else {
            manifest.abandoned.push(r as u64);
        }
        snapshots.extend(o.snapshots);
    }
    if manifest.completed == 0 {
        return Err(Error::Config("every replica died out; is the environment super-critical?".into()));
    }
    let records = aggregate(plan, &snapshots);
    Ok(PlanResult { records, snapshots, manifest })
}

fn aggregate(plan: &ExperimentPlan, snapshots: &[Snapshot]) -> Vec<EstimateRecord> {
    let kind = plan.stop_grid[0];
    let mut records = Vec::new();
    for stop in &plan.stop_grid {
        let n = stop.parameter();
        let at_n: Vec<&Snapshot> =
            snapshots.iter().filter(|s| !s.truncated && !s.extinct && progress(kind, s) == n).collect();
        if at_n.is_empty() {
            continue;
        }
        for &obs in Observable::for_stop(kind) {
            let values: Vec<f64> = at_n.iter().map(|s| obs.value(s)).collect();
            let (mean, stderr) = mean_stderr(&values);
            records.push(EstimateRecord { n, observable: obs, mean, stderr, replica_count: values.len() as u64 });
        }
    }
    records
}

/// Writes `raw.jsonl`, `summary.csv`, `manifest.json` and one
/// `plot_<OBS>.dat` per observable into `dir`.
pub fn write_outputs(dir: &Path, result: &PlanResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut raw = String::new();
    for s in &result.snapshots {
        raw.push_str(&json::to_string(s)?);
        raw.push('\n');
    }
    fs::write(dir.join("raw.jsonl"), raw)?;

    let mut csv = String::from("n,observable,mean,stderr,count\n");
    for r in &result.records {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.n,
            r.observable.tag(),
            format_g17(r.mean),
            format_g17(r.stderr),
            r.replica_count
        )
        .expect("write to string");
    }
    fs::write(dir.join("summary.csv"), csv)?;

    let mut observables: Vec<Observable> = result.records.iter().map(|r| r.observable).collect();
    observables.sort();
    observables.dedup();
    for obs in observables {
        let mut dat = String::new();
        for r in result.records.iter().filter(|r| r.observable == obs) {
            writeln!(dat, "{} {}", format_g17((r.n as f64).ln()), format_g17(r.mean)).expect("write to string");
        }
        fs::write(dir.join(format!("plot_{}.dat", obs.tag())), dat)?;
    }
    fs::write(dir.join("manifest.json"), json::to_string(&result.manifest)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EstimateMode {
    /// Mean over `log n` at the largest `n`.
    Ratio,
    /// Least-squares slope of the mean against `log n`.
    Slope,
    /// Least-squares slope of `log(mean)` against `log n`.
    Exponent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    /// Propagated from the per-point standard errors.
    pub stderr: f64,
}

/// Reduces the records of one observable to a limit estimate.
pub fn estimate_limit(records: &[EstimateRecord], observable: Observable, mode: EstimateMode) -> Result<Estimate> {
    let mut pts: Vec<&EstimateRecord> = records.iter().filter(|r| r.observable == observable).collect();
    pts.sort_by_key(|r| r.n);
    if pts.len() < 3 {
        return Err(Error::Usage(format!("{} grid points for {}, need 3", pts.len(), observable.tag())));
    }
    let xs: Vec<f64> = pts.iter().map(|r| (r.n as f64).ln()).collect();
    match mode {
        EstimateMode::Ratio => {
            let last = pts.last().expect("nonempty");
            let l = (last.n as f64).ln();
            Ok(Estimate { value: last.mean / l, stderr: last.stderr / l })
        }
        EstimateMode::Slope | EstimateMode::Exponent => {
            let (ys, ses): (Vec<f64>, Vec<f64>) = if mode == EstimateMode::Slope {
                pts.iter().map(|r| (r.mean, r.stderr)).unzip()
            } else {
                pts.iter().map(|r| (r.mean.ln(), r.stderr / r.mean)).unzip()
            };
            let mx = xs.iter().sum::<f64>() / xs.len() as f64;
            let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
            let w: Vec<f64> = xs.iter().map(|x| (x - mx) / sxx).collect();
            let value = w.iter().zip(&ys).map(|(w, y)| w * y).sum();
            let stderr = w.iter().zip(&ses).map(|(w, s)| w * w * s * s).sum::<f64>().sqrt();
            Ok(Estimate { value, stderr })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{OffspringLaw, WeightLaw};

    fn synthetic(f: impl Fn(f64) -> f64) -> Vec<EstimateRecord> {
        (4..=12)
            .map(|j| {
                let n = 1u64 << j;
                EstimateRecord { n, observable: Observable::R, mean: f(n as f64), stderr: 0.0, replica_count: 1 }
            })
            .collect()
    }

    #[test]
    fn estimator_examples() {
        let r = synthetic(|n| 2.0 * n.ln());
        let s = estimate_limit(&r, Observable::R, EstimateMode::Slope).unwrap();
        assert!((s.value - 2.0).abs() < 1e-12);
        let q = estimate_limit(&r, Observable::R, EstimateMode::Ratio).unwrap();
        assert!((q.value - 2.0).abs() < 1e-12);
        let r = synthetic(|n| n.sqrt());
        let e = estimate_limit(&r, Observable::R, EstimateMode::Exponent).unwrap();
        assert!((e.value - 0.5).abs() < 1e-12);
        assert_eq!(e.stderr, 0.0);
        assert!(matches!(estimate_limit(&r[..2], Observable::R, EstimateMode::Slope), Err(Error::Usage(_))));
        assert!(matches!(estimate_limit(&r, Observable::Xstar, EstimateMode::Slope), Err(Error::Usage(_))));
    }

    #[test]
    fn slope_stderr_is_propagated() {
        let mut r = synthetic(|n| n.ln());
        for x in &mut r {
            x.stderr = 0.5;
        }
        let s = estimate_limit(&r, Observable::R, EstimateMode::Slope).unwrap();
        let xs: Vec<f64> = r.iter().map(|x| (x.n as f64).ln()).collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        assert!((s.stderr - 0.5 / sxx.sqrt()).abs() < 1e-14);
    }

    fn plan(replicas: u64, threads: usize) -> ExperimentPlan {
        let mut p = ExperimentPlan::new(
            EnvironmentSpec::regular(2, 0.4),
            dyadic_grid(StopRule::Steps(0), 6, 10).unwrap(),
            replicas,
            42,
        );
        p.threads = threads;
        p
    }

    #[test]
    fn single_replica_has_zero_stderr() {
        let res = run_plan(&plan(1, 1)).unwrap();
        assert_eq!(res.snapshots.len(), 5);
        for rec in &res.records {
            assert_eq!(rec.stderr, 0.0);
            assert_eq!(rec.replica_count, 1);
            let s = res.snapshots.iter().find(|s| s.steps == rec.n).unwrap();
            assert_eq!(rec.mean, rec.observable.value(s));
        }
    }

    #[test]
    fn outputs_do_not_depend_on_threads() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_outputs(a.path(), &run_plan(&plan(12, 1)).unwrap()).unwrap();
        write_outputs(b.path(), &run_plan(&plan(12, 3)).unwrap()).unwrap();
        for f in ["raw.jsonl", "summary.csv", "manifest.json", "plot_R.dat", "plot_XSTAR.dat"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let csv = fs::read_to_string(a.path().join("summary.csv")).unwrap();
        assert!(csv.starts_with("n,observable,mean,stderr,count\n64,R,"));
    }

    #[test]
    fn extinct_trees_are_resampled_without_touching_other_replicas() {
        let spec = EnvironmentSpec {
            offspring: OffspringLaw { support: vec![(0, 0.3), (2, 0.3), (3, 0.4)] },
            weights: WeightLaw { support: vec![(0.5, 1.0)] },
        };
        let p = ExperimentPlan::new(spec.clone(), dyadic_grid(StopRule::Steps(0), 4, 8).unwrap(), 40, 5);
        let res = run_plan(&p).unwrap();
        assert!(!res.manifest.extinct.is_empty());
        assert_eq!(res.manifest.completed, 40);
        // a replica's surviving run depends only on its own attempts
        let env = Environment::new(spec).unwrap();
        for r in [0u64, 7, 39] {
            let one = run_replica(&env, &p, r).unwrap();
            let mine: Vec<&Snapshot> = res.snapshots.iter().filter(|s| s.replica == r).collect();
            assert_eq!(one.snapshots.iter().collect::<Vec<_>>(), mine);
        }
    }

    #[test]
    fn plan_validation() {
        let mut p = plan(1, 1);
        p.stop_grid = vec![StopRule::Steps(4), StopRule::Steps(4)];
        assert!(matches!(run_plan(&p), Err(Error::Config(_))));
        p.stop_grid = vec![StopRule::Steps(4), StopRule::RootReturns(8)];
        assert!(matches!(run_plan(&p), Err(Error::Config(_))));
        p.stop_grid = vec![];
        assert!(matches!(run_plan(&p), Err(Error::Config(_))));
        let mut p = plan(0, 1);
        assert!(matches!(run_plan(&p), Err(Error::Config(_))));
        p.replicas = 1;
        p.threads = 0;
        assert!(matches!(run_plan(&p), Err(Error::Usage(_))));
    }

    #[test]
    fn truncated_runs_are_counted_and_left_out() {
        let mut p = ExperimentPlan::new(
            EnvironmentSpec::regular(2, 0.5),
            dyadic_grid(StopRule::RootReturns(0), 2, 6).unwrap(),
            10,
            3,
        );
        p.max_steps = Some(300);
        let res = run_plan(&p).unwrap();
        assert!(res.manifest.truncated > 0);
        let last = res.records.iter().filter(|r| r.n == 64).map(|r| r.replica_count).max().unwrap_or(0);
        assert_eq!(last, 10 - res.manifest.truncated);
        assert!(res.records.iter().any(|r| r.observable == Observable::Rtilde));
    }
}
