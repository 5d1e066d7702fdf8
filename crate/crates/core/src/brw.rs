//! The potential as a branching random walk.
//!
//! Checks of the many-to-one identity
//! `E[Σ_{|x|=n} e^{-V(x)-nψ(1)} 1{V(x) ≥ c}] = P(S_n ≥ c)`, where `S` is a
//! random walk with the tilted step law, of the unit means of the
//! martingales `W_n = Z_n / E[N]^n` and `M_n = Σ_{|x|=n} e^{-V(x)}`, and of
//! the growth of the maximal potential.
//!
//! Trees are traversed depth first straight from the offspring streams, so
//! no arena is kept; the realizations are the same as those of
//! [`crate::env::TreeArena`] for the same tree seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, EnvironmentSpec};
use crate::error::{Error, Result};
use crate::harness::thread_pool;
use crate::numeric::mean_stderr;
use crate::regime::psi;
use crate::rng;

/// Values closer than this are merged into one atom of the convolution.
const MERGE_TOL: f64 = 1e-12;
/// `V(x) ≥ c` is tested with this slack, so that sums of the same steps
/// taken in a different order land on the same side of an atom.
pub const THRESHOLD_TOL: f64 = 1e-9;
const MAX_ATOMS: usize = 1_000_000;
const MAX_CONVOLUTION_STEPS: u32 = 30;
const MAX_TREE_DEPTH: u32 = 12;
const MIN_REPLICAS: u64 = 1000;

/// Law of one step of the tilted walk `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltedStepLaw {
    /// `(value, probability)`, sorted by value.
    pub support: Vec<(f64, f64)>,
}

/// `P(S_1 = -ln a_j) = E[N] e^{-ψ(1)} a_j p_j`.
pub fn tilted_step_law(spec: &EnvironmentSpec) -> TiltedStepLaw {
    let shift = spec.offspring.mean().ln() - psi(spec, 1.0);
    let mut support: Vec<(f64, f64)> =
        spec.weights.atoms().map(|(a, p)| (-a.ln(), (shift + a.ln() + p.ln()).exp())).collect();
    support.sort_by(|x, y| x.0.total_cmp(&y.0));
    TiltedStepLaw { support: merge(support) }
}

fn merge(sorted: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
    for (v, p) in sorted {
        match out.last_mut() {
            Some(last) if (v - last.0).abs() < MERGE_TOL => last.1 += p,
            _ => out.push((v, p)),
        }
    }
    out
}

/// Law of `S_n`, by `n`-fold convolution of the step law.
pub fn sn_law(spec: &EnvironmentSpec, n: u32) -> Result<Vec<(f64, f64)>> {
    if n > MAX_CONVOLUTION_STEPS {
        return Err(Error::Usage(format!("n = {n} exceeds {MAX_CONVOLUTION_STEPS}")));
    }
    let step = tilted_step_law(spec).support;
    let mut law = vec![(0.0, 1.0)];
    for _ in 0..n {
        let mut next = Vec::with_capacity(law.len() * step.len());
        for &(v, p) in &law {
            for &(s, q) in &step {
                next.push((v + s, p * q));
            }
        }
        next.sort_by(|x, y| x.0.total_cmp(&y.0));
        law = merge(next);
        if law.len() > MAX_ATOMS {
            return Err(Error::Resource(format!("convolution support exceeds {MAX_ATOMS} atoms")));
        }
    }
    Ok(law)
}

/// `P(S_n ≥ c)`, normalized by the total mass so that it is exactly 1 for
/// `c = -∞`.
pub fn sn_tail_exact(spec: &EnvironmentSpec, n: u32, c: f64) -> Result<f64> {
    let (mut above, mut below) = (0.0, 0.0);
    for (v, p) in sn_law(spec, n)? {
        if v >= c - THRESHOLD_TOL {
            above += p;
        } else {
            below += p;
        }
    }
    Ok(above / (above + below))
}

/// Smallest atom `v` of `S_n` with `P(S_n ≤ v) ≥ 1/2`.
pub fn sn_median(spec: &EnvironmentSpec, n: u32) -> Result<f64> {
    let law = sn_law(spec, n)?;
    let mut acc = 0.0;
    for &(v, p) in &law {
        acc += p;
        if acc >= 0.5 {
            return Ok(v);
        }
    }
    Ok(law.last().expect("nonempty law").0)
}

/// Visits every vertex of generation `n` of the tree `tree_seed`, passing
/// `(V(x), max_{y ∈ ]]φ,x]]} V(y))`. Returns the number of vertices seen.
fn for_each_in_generation(
    env: &Environment,
    tree_seed: u64,
    n: u32,
    cap: usize,
    mut f: impl FnMut(u32, f64, f64),
) -> Result<usize> {
    struct Frame {
        key: u64,
        depth: u32,
        v: f64,
        vbar: f64,
    }
    let mut stack = vec![Frame { key: rng::root_key(tree_seed), depth: 0, v: 0.0, vbar: f64::NEG_INFINITY }];
    let mut atoms = Vec::new();
    let mut seen = 0usize;
    while let Some(fr) = stack.pop() {
        seen += 1;
        if seen > cap {
            return Err(Error::Resource(format!("vertex cap {cap} exceeded at generation {}", fr.depth)));
        }
        f(fr.depth, fr.v, fr.vbar);
        if fr.depth == n {
            continue;
        }
        env.draw_offspring(fr.key, &mut atoms);
        for (i, &a) in atoms.iter().enumerate() {
            let v = fr.v - env.atom_ln(a);
            stack.push(Frame { key: rng::child_key(fr.key, i as u32), depth: fr.depth + 1, v, vbar: fr.vbar.max(v) });
        }
    }
    Ok(seen)
}

/// Mean and standard error of a Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: u64,
}

/// Per-replica values computed in parallel and reduced in replica order.
fn replicate(replicas: u64, threads: usize, f: impl Fn(u64) -> Result<f64> + Sync + Send) -> Result<MeanEstimate> {
    let values: Vec<f64> =
        thread_pool(threads)?.install(|| (0..replicas).into_par_iter().map(&f).collect::<Result<Vec<f64>>>())?;
    let (mean, stderr) = mean_stderr(&values);
    Ok(MeanEstimate { mean, stderr, count: replicas })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManyToOneReport {
    pub lhs_estimate: f64,
    pub lhs_stderr: f64,
    pub rhs_exact: f64,
    pub z_score: f64,
}

/// `(lhs - rhs)/stderr`; with a zero standard error, 0 when the two agree
/// to 1e-9 and infinite otherwise.
pub fn z_score(lhs: f64, stderr: f64, rhs: f64) -> f64 {
    if stderr > 0.0 {
        (lhs - rhs) / stderr
    } else if (lhs - rhs).abs() <= 1e-9 {
        0.0
    } else {
        (lhs - rhs).signum() * f64::INFINITY
    }
}

/// Monte Carlo left side of the many-to-one identity over unconditioned
/// trees, against the exact right side.
pub fn verify_many_to_one(
    env: &Environment,
    n: u32,
    c: f64,
    replicas: u64,
    seed: u64,
    threads: usize,
) -> Result<ManyToOneReport> {
    if n > MAX_TREE_DEPTH {
        return Err(Error::Usage(format!("n = {n} exceeds {MAX_TREE_DEPTH}")));
    }
    if replicas < MIN_REPLICAS {
        return Err(Error::Usage(format!("at least {MIN_REPLICAS} replicas required")));
    }
    let spec = env.spec();
    let rhs = sn_tail_exact(spec, n, c)?;
    let shift = n as f64 * psi(spec, 1.0);
    let est = replicate(replicas, threads, |r| {
        let mut sum = 0.0;
        for_each_in_generation(env, rng::replica_tree_seed(seed, r, 0), n, usize::MAX, |d, v, _| {
            if d == n && v >= c - THRESHOLD_TOL {
                sum += (-v - shift).exp();
            }
        })?;
        Ok(sum)
    })?;
    Ok(ManyToOneReport {
        lhs_estimate: est.mean,
        lhs_stderr: est.stderr,
        rhs_exact: rhs,
        z_score: z_score(est.mean, est.stderr, rhs),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Martingale {
    /// `W_n = Z_n / E[N]^n`.
    W,
    /// `M_n = Σ_{|x|=n} e^{-V(x)}`, a martingale when `ψ(1) = 0`.
    M,
}

pub fn martingale_mean(
    env: &Environment,
    which: Martingale,
    n: u32,
    replicas: u64,
    seed: u64,
    threads: usize,
) -> Result<MeanEstimate> {
    let spec = env.spec();
    if which == Martingale::M && psi(spec, 1.0).abs() > 1e-9 {
        return Err(Error::Usage(format!("M is not a martingale: psi(1) = {}", psi(spec, 1.0))));
    }
    // e^{nψ(0)} = E[N]^n
    let norm = spec.offspring.mean().powi(n as i32);
    replicate(replicas, threads, |r| {
        let (mut count, mut sum) = (0u64, 0.0);
        for_each_in_generation(env, rng::replica_tree_seed(seed, r, 0), n, usize::MAX, |d, v, _| {
            if d == n {
                count += 1;
                sum += (-v).exp();
            }
        })?;
        Ok(match which {
            Martingale::W => count as f64 / norm,
            Martingale::M => sum,
        })
    })
}

/// Maximal potentials at one level of one tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxPotentialRecord {
    pub level: u32,
    /// `max_{|z|=ℓ} V(z)`.
    pub max_v: f64,
    /// `max_{|z|=ℓ} V̄(z)` with `V̄(z) = max_{x ∈ ]]φ,z]]} V(x)`.
    pub max_bar_v: f64,
}

/// Per-level aggregates over surviving trees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxPotentialAggregate {
    pub level: u32,
    pub count: u64,
    /// Mean of `max_V/ℓ`.
    pub mean_max_v: f64,
    pub stderr_max_v: f64,
    /// Mean of `max_V̄/ℓ`.
    pub mean_max_bar_v: f64,
    pub stderr_max_bar_v: f64,
    /// Largest sampled `max_V̄/ℓ`.
    pub sample_max_bar_v: f64,
}

/// Records for each tree reaching the deepest level; `None` for trees that
/// die out before it.
pub fn max_potential_records(
    env: &Environment,
    levels: &[u32],
    replicas: u64,
    seed: u64,
    threads: usize,
) -> Result<Vec<Option<Vec<MaxPotentialRecord>>>> {
    let depth = levels.iter().copied().max().ok_or_else(|| Error::Usage("no levels given".into()))?;
    if levels.contains(&0) {
        return Err(Error::Usage("levels must be positive".into()));
    }
    let one = |r: u64| -> Result<Option<Vec<MaxPotentialRecord>>> {
        let mut max_v = vec![f64::NEG_INFINITY; depth as usize + 1];
        let mut max_bar_v = vec![f64::NEG_INFINITY; depth as usize + 1];
        for_each_in_generation(
            env,
            rng::replica_tree_seed(seed, r, 0),
            depth,
            crate::exact::DEFAULT_VERTEX_CAP,
            |d, v, vb| {
                let d = d as usize;
                max_v[d] = max_v[d].max(v);
                max_bar_v[d] = max_bar_v[d].max(vb);
            },
        )?;
        if max_v[depth as usize] == f64::NEG_INFINITY {
            return Ok(None);
        }
        Ok(Some(
            levels
                .iter()
                .map(|&l| MaxPotentialRecord { level: l, max_v: max_v[l as usize], max_bar_v: max_bar_v[l as usize] })
                .collect(),
        ))
    };
    thread_pool(threads)?.install(|| (0..replicas).into_par_iter().map(one).collect())
}

pub fn max_potential_profile(
    env: &Environment,
    levels: &[u32],
    replicas: u64,
    seed: u64,
    threads: usize,
) -> Result<Vec<MaxPotentialAggregate>> {
    let records = max_potential_records(env, levels, replicas, seed, threads)?;
    let surviving: Vec<&Vec<MaxPotentialRecord>> = records.iter().flatten().collect();
    Ok(levels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let lf = l as f64;
            let v: Vec<f64> = surviving.iter().map(|r| r[i].max_v / lf).collect();
            let vb: Vec<f64> = surviving.iter().map(|r| r[i].max_bar_v / lf).collect();
            let (mean_max_v, stderr_max_v) = mean_stderr(&v);
            let (mean_max_bar_v, stderr_max_bar_v) = mean_stderr(&vb);
            MaxPotentialAggregate {
                level: l,
                count: surviving.len() as u64,
                mean_max_v,
                stderr_max_v,
                mean_max_bar_v,
                stderr_max_bar_v,
                sample_max_bar_v: vb.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{OffspringLaw, TreeArena, VertexId, WeightLaw};
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn two_point() -> EnvironmentSpec {
        EnvironmentSpec {
            offspring: OffspringLaw { support: vec![(2, 1.0)] },
            weights: WeightLaw { support: vec![(2.0, 0.1), (1.0 / 3.0, 0.9)] },
        }
    }

    #[test]
    fn tilted_law_examples() {
        let l = tilted_step_law(&EnvironmentSpec::regular(2, 0.5));
        assert_eq!(l.support.len(), 1);
        assert!((l.support[0].0 - LN_2).abs() < 1e-15 && (l.support[0].1 - 1.0).abs() < 1e-15);

        let l = tilted_step_law(&two_point());
        assert!((l.support[0].0 + LN_2).abs() < 1e-15 && (l.support[0].1 - 0.4).abs() < 1e-12);
        assert!((l.support[1].0 - 3f64.ln()).abs() < 1e-15 && (l.support[1].1 - 0.6).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn tilted_law_is_normalized(
            n in 2u32..5, pn in 0.55f64..1.0,
            a in proptest::collection::vec((0.05f64..5.0, 0.01f64..1.0), 1..5),
        ) {
            let total: f64 = a.iter().map(|x| x.1).sum();
            let spec = EnvironmentSpec {
                offspring: OffspringLaw { support: vec![(n, pn), (1, 1.0 - pn)] },
                weights: WeightLaw { support: a.iter().map(|&(v, p)| (v, p / total)).collect() },
            };
            let s: f64 = tilted_step_law(&spec).support.iter().map(|x| x.1).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tail_examples() {
        let spec = two_point();
        assert_eq!(sn_tail_exact(&spec, 1, f64::NEG_INFINITY).unwrap(), 1.0);
        let half = EnvironmentSpec::regular(2, 0.5);
        assert!((sn_tail_exact(&half, 5, 5.0 * LN_2).unwrap() - 1.0).abs() < 1e-15);
        assert!(sn_tail_exact(&half, 5, 5.0 * LN_2 + 1e-6).unwrap() == 0.0);

        // enumeration of the 2³ paths
        let step = tilted_step_law(&spec).support;
        for c in [-3.0, -1.0, 0.0, 0.4, 1.1, 2.0, 3.3] {
            let mut want = 0.0;
            for mask in 0..8u32 {
                let (mut v, mut p) = (0.0, 1.0);
                for k in 0..3 {
                    let (s, q) = step[((mask >> k) & 1) as usize];
                    v += s;
                    p *= q;
                }
                if v >= c - THRESHOLD_TOL {
                    want += p;
                }
            }
            assert!((sn_tail_exact(&spec, 3, c).unwrap() - want).abs() < 1e-14);
        }
        assert!(matches!(sn_tail_exact(&spec, 31, 0.0), Err(Error::Usage(_))));
    }

    #[test]
    fn convolution_merges_commensurable_atoms() {
        let spec = two_point();
        let law = sn_law(&spec, 20).unwrap();
        assert_eq!(law.len(), 21);
        let s: f64 = law.iter().map(|x| x.1).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn median_splits_mass() {
        let spec = two_point();
        for n in [4, 6] {
            let m = sn_median(&spec, n).unwrap();
            let law = sn_law(&spec, n).unwrap();
            let below: f64 = law.iter().filter(|x| x.0 <= m + 1e-12).map(|x| x.1).sum();
            let strictly_below: f64 = law.iter().filter(|x| x.0 < m - 1e-12).map(|x| x.1).sum();
            assert!(below >= 0.5 && strictly_below < 0.5);
        }
    }

    #[test]
    fn traversal_matches_arena() {
        let env = Environment::new(EnvironmentSpec {
            offspring: OffspringLaw { support: vec![(0, 0.2), (1, 0.3), (3, 0.5)] },
            weights: WeightLaw { support: vec![(0.5, 0.5), (1.5, 0.5)] },
        })
        .unwrap();
        for seed in 0..20 {
            let mut vs = Vec::new();
            for_each_in_generation(&env, seed, 5, usize::MAX, |d, v, _| {
                if d == 5 {
                    vs.push(v)
                }
            })
            .unwrap();
            let mut arena = TreeArena::new(&env, seed);
            let mut gen = vec![VertexId::ROOT];
            for _ in 0..5 {
                gen = gen.iter().flat_map(|&x| arena.ensure_expanded(x)).collect();
            }
            let mut want: Vec<f64> = gen.iter().map(|&x| arena.potential(x)).collect();
            vs.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            assert_eq!(vs.len(), want.len());
            for (a, b) in vs.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn many_to_one_degenerate_case() {
        let env = Environment::new(EnvironmentSpec::regular(2, 0.5)).unwrap();
        let r = verify_many_to_one(&env, 4, 4.0 * LN_2, 10_000, 1, 1).unwrap();
        assert!((r.rhs_exact - 1.0).abs() < 1e-15);
        assert!(r.z_score.abs() <= 4.0);
        assert!(matches!(verify_many_to_one(&env, 13, 0.0, 10_000, 1, 1), Err(Error::Usage(_))));
        assert!(matches!(verify_many_to_one(&env, 4, 0.0, 10, 1, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn many_to_one_unconditional_mean() {
        let env = Environment::new(two_point()).unwrap();
        let r = verify_many_to_one(&env, 5, f64::NEG_INFINITY, 20_000, 3, 1).unwrap();
        assert_eq!(r.rhs_exact, 1.0);
        assert!(r.z_score.abs() <= 4.0, "{r:?}");
    }

    #[test]
    fn z_scores_over_many_settings() {
        // at most one |z| > 3 over 20 (n, c) settings
        let env = Environment::new(two_point()).unwrap();
        let spec = env.spec();
        let mut large = 0;
        for k in 0..20u64 {
            let n = 2 + (k % 5) as u32;
            let law = sn_law(spec, n).unwrap();
            let c = law[(k as usize * 7) % law.len()].0;
            let r = verify_many_to_one(&env, n, c, 4000, 100 + k, 1).unwrap();
            if r.z_score.abs() > 3.0 {
                large += 1;
            }
        }
        assert!(large <= 1);
    }

    #[test]
    fn martingale_examples() {
        let env = Environment::new(EnvironmentSpec::regular(2, 0.5)).unwrap();
        let w = martingale_mean(&env, Martingale::W, 6, 100, 0, 1).unwrap();
        assert_eq!((w.mean, w.stderr), (1.0, 0.0));
        let m = martingale_mean(&env, Martingale::M, 6, 100, 0, 1).unwrap();
        assert!((m.mean - 1.0).abs() < 1e-14);

        let env = Environment::new(EnvironmentSpec::regular(2, 0.4)).unwrap();
        assert!(matches!(martingale_mean(&env, Martingale::M, 3, 10, 0, 1), Err(Error::Usage(_))));

        let env = Environment::new(EnvironmentSpec {
            offspring: OffspringLaw { support: vec![(0, 0.1), (3, 0.9)] },
            weights: WeightLaw { support: vec![(0.5, 0.5), (0.25, 0.5)] },
        })
        .unwrap();
        let w = martingale_mean(&env, Martingale::W, 8, 20_000, 5, 1).unwrap();
        assert!((w.mean - 1.0).abs() <= 4.0 * w.stderr, "{w:?}");
    }

    #[test]
    fn results_do_not_depend_on_threads() {
        let env = Environment::new(two_point()).unwrap();
        let a = verify_many_to_one(&env, 6, 0.5, 2000, 9, 1).unwrap();
        let b = verify_many_to_one(&env, 6, 0.5, 2000, 9, 3).unwrap();
        assert_eq!(a.lhs_estimate.to_bits(), b.lhs_estimate.to_bits());
        assert_eq!(a.lhs_stderr.to_bits(), b.lhs_stderr.to_bits());
    }

    #[test]
    fn max_potential_examples() {
        let env = Environment::new(EnvironmentSpec::regular(2, 0.5)).unwrap();
        let p = max_potential_profile(&env, &[3, 7, 10], 5, 0, 1).unwrap();
        for a in &p {
            assert!((a.mean_max_v - LN_2).abs() < 1e-14);
            assert!((a.mean_max_bar_v - LN_2).abs() < 1e-14);
            assert_eq!(a.count, 5);
        }

        let env = Environment::new(two_point()).unwrap();
        for rec in max_potential_records(&env, &[1, 5, 10], 50, 2, 1).unwrap().into_iter().flatten() {
            for r in rec {
                assert!(r.max_bar_v >= r.max_v && r.max_v.is_finite());
            }
        }
        assert!(matches!(max_potential_profile(&env, &[], 5, 0, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn extinct_trees_are_skipped() {
        let env = Environment::new(EnvironmentSpec {
            offspring: OffspringLaw { support: vec![(0, 0.3), (3, 0.7)] },
            weights: WeightLaw { support: vec![(0.5, 1.0)] },
        })
        .unwrap();
        let recs = max_potential_records(&env, &[4], 200, 0, 1).unwrap();
        let dead = recs.iter().filter(|r| r.is_none()).count();
        assert!(dead > 0 && dead < 200);
        let p = max_potential_profile(&env, &[4], 200, 0, 1).unwrap();
        assert_eq!(p[0].count as usize, 200 - dead);
    }
}
