//! Exact quantities on a frozen tree.
//!
//! A [`FrozenTree`] is a realization expanded breadth first down to a fixed
//! depth, so vertex ids increase with generation and a reverse id scan is a
//! bottom-up pass. On it we evaluate
//!
//! * the birth-death path formulas for hitting one end of an
//!   ancestor/descendant path before the other,
//! * the escape probabilities `β_m(x) = P_x(𝒯_m < T_{←x})`, their root
//!   aggregate `ρ_m = P_φ(𝒯_m < T_φ)` and the numerators `γ_m(x)`,
//! * the quotient `γ_m(φ)/ρ_m`, proposed as `E[𝒯_m]`,
//!
//! together with an independent solver of the first-step equations (tree
//! elimination or Gauss-Seidel) used as an oracle for all of the above.
//!
//! In the oracle, vertices at the truncation depth have no children, so the
//! walk reflects there. Hitting times of generations up to the depth do
//! not see the truncation.

use serde::{Deserialize, Serialize};

use crate::env::{Environment, TreeArena, VertexId};
use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::walk::Position;

pub const DEFAULT_VERTEX_CAP: usize = 20_000_000;

const VIRTUAL: u32 = u32::MAX;

/// A tree fully expanded below a fixed depth, with potentials and child
/// weight sums cached.
#[derive(Debug, Clone)]
pub struct FrozenTree<'e> {
    arena: TreeArena<'e>,
    m_max: u32,
    /// `gen_start[g]` is the first id of generation `g`; `m_max + 2` entries.
    gen_start: Vec<usize>,
    potential: Vec<f64>,
    child_weight_sum: Vec<f64>,
}

/// Expands every vertex of generation `< depth`, breadth first.
pub fn freeze(env: &Environment, depth: u32, tree_seed: u64) -> Result<FrozenTree<'_>> {
    freeze_with_cap(env, depth, tree_seed, DEFAULT_VERTEX_CAP)
}

pub fn freeze_with_cap(env: &Environment, depth: u32, tree_seed: u64, cap: usize) -> Result<FrozenTree<'_>> {
    if depth < 1 {
        return Err(Error::Usage("freeze depth must be at least 1".into()));
    }
    let mut arena = TreeArena::new(env, tree_seed);
    let mut gen_start = vec![0usize, 1];
    for g in 0..depth {
        let (lo, hi) = (gen_start[g as usize], gen_start[g as usize + 1]);
        for x in lo..hi {
            arena.ensure_expanded(VertexId(x as u32));
            if arena.len() > cap {
                return Err(Error::Resource(format!("vertex cap {cap} exceeded at generation {}", g + 1)));
            }
        }
        gen_start.push(arena.len());
    }
    let n = arena.len();
    let mut potential = vec![0.0; n];
    let mut child_weight_sum = vec![0.0; n];
    for x in 0..n {
        if let Some(kids) = arena.children(VertexId(x as u32)) {
            for c in kids {
                potential[c.index()] = potential[x] + arena.potential_step(c);
                child_weight_sum[x] += arena.weight(c);
            }
        }
    }
    Ok(FrozenTree { arena, m_max: depth, gen_start, potential, child_weight_sum })
}

impl<'e> FrozenTree<'e> {
    pub fn arena(&self) -> &TreeArena<'e> {
        &self.arena
    }

    pub fn m_max(&self) -> u32 {
        self.m_max
    }

    pub fn vertex_count(&self) -> usize {
        self.arena.len()
    }

    /// True when the realization is a finite tree.
    pub fn is_extinct(&self) -> bool {
        self.arena.detect_extinction()
    }

    /// Ids of generation `g` (empty beyond the depth).
    pub fn generation(&self, g: u32) -> std::ops::Range<usize> {
        let g = g as usize;
        if g + 1 >= self.gen_start.len() {
            return 0..0;
        }
        self.gen_start[g]..self.gen_start[g + 1]
    }

    pub fn potential(&self, x: VertexId) -> f64 {
        self.potential[x.index()]
    }

    /// Children, empty for dead leaves and for vertices at the depth.
    pub fn children(&self, x: VertexId) -> impl Iterator<Item = VertexId> + '_ {
        self.arena.children(x).into_iter().flatten()
    }

    /// `p(x, ←x)`.
    pub fn p_up(&self, x: VertexId) -> f64 {
        1.0 / (1.0 + self.child_weight_sum[x.index()])
    }

    /// `p(x, c)` for a child `c` of `x`.
    pub fn p_down(&self, x: VertexId, c: VertexId) -> f64 {
        self.arena.weight(c) / (1.0 + self.child_weight_sum[x.index()])
    }

    fn check_m(&self, m: u32) -> Result<()> {
        if m < 1 || m > self.m_max {
            return Err(Error::Usage(format!("m = {m} outside 1..={}", self.m_max)));
        }
        Ok(())
    }

    fn check_vertex(&self, x: VertexId) -> Result<()> {
        if !self.arena.contains(x) {
            return Err(Error::Usage(format!("unknown vertex id {}", x.0)));
        }
        Ok(())
    }

    /// Vertices of `]]xp, x]]`, top down; fails unless `xp` is a strict ancestor of `x`.
    fn path_below(&self, xp: VertexId, x: VertexId) -> Result<Vec<VertexId>> {
        self.check_vertex(xp)?;
        self.check_vertex(x)?;
        let mut path = Vec::new();
        for z in self.arena.ancestry(x) {
            if z == xp {
                path.reverse();
                return if path.is_empty() {
                    Err(Error::Usage("a vertex is not its own strict ancestor".into()))
                } else {
                    Ok(path)
                };
            }
            path.push(z);
        }
        Err(Error::Usage(format!("vertex {} is not an ancestor of vertex {}", xp.0, x.0)))
    }
}

/// `P_{x'_x}(T_x < T_{x'})` where `x'_x` is the child of `x'` towards `x`:
/// `e^{V(x'_x)} / Σ_{z ∈ ]]x', x]]} e^{V(z)}`.
pub fn path_hit_prob_up(tree: &FrozenTree, xp: VertexId, x: VertexId) -> Result<f64> {
    let path = tree.path_below(xp, x)?;
    let lse = log_sum_exp(path.iter().map(|&z| tree.potential(z)));
    Ok((tree.potential(path[0]) - lse).exp())
}

/// `P_{←x}(T_{x'} < T_x)`: `e^{V(x)} / Σ_{z ∈ ]]x', x]]} e^{V(z)}`.
pub fn path_hit_prob_down(tree: &FrozenTree, xp: VertexId, x: VertexId) -> Result<f64> {
    let path = tree.path_below(xp, x)?;
    let lse = log_sum_exp(path.iter().map(|&z| tree.potential(z)));
    Ok((tree.potential(x) - lse).exp())
}

/// `β_m` for every vertex of generation `≤ m` (a prefix of the ids):
/// 1 on generation `m`, `S/(1+S)` above with `S = Σ_i A(xⁱ) β_m(xⁱ)`.
pub fn beta_recursion(tree: &FrozenTree, m: u32) -> Result<Vec<f64>> {
    tree.check_m(m)?;
    let n = tree.generation(m).end;
    let mut beta = vec![1.0; n];
    for x in (0..tree.generation(m).start).rev() {
        let x = VertexId(x as u32);
        let s: f64 = tree.children(x).map(|c| tree.arena.weight(c) * beta[c.index()]).sum();
        beta[x.index()] = s / (1.0 + s);
    }
    Ok(beta)
}

/// `ρ_m = Σ_i p(φ, φⁱ) β_m(φⁱ)`.
pub fn rho(tree: &FrozenTree, m: u32) -> Result<f64> {
    let beta = beta_recursion(tree, m)?;
    Ok(rho_from_beta(tree, &beta))
}

fn rho_from_beta(tree: &FrozenTree, beta: &[f64]) -> f64 {
    tree.children(VertexId::ROOT).map(|c| tree.p_down(VertexId::ROOT, c) * beta[c.index()]).sum()
}

/// `γ_m` for every vertex of generation `≤ m`: 0 on generation `m`,
/// `(1/p(x,←x) + Σ A(xⁱ)γ_m(xⁱ)) / (1 + Σ A(xⁱ)β_m(xⁱ))` for `1 ≤ |x| < m`,
/// and `Σ p(φ,φⁱ) γ_m(φⁱ)` at the root.
pub fn gamma_recursion(tree: &FrozenTree, m: u32, beta: &[f64]) -> Result<Vec<f64>> {
    tree.check_m(m)?;
    let n = tree.generation(m).end;
    if beta.len() != n {
        return Err(Error::Usage(format!("beta has {} entries, expected {n}", beta.len())));
    }
    let mut gamma = vec![0.0; n];
    for x in (1..tree.generation(m).start).rev() {
        let x = VertexId(x as u32);
        let (mut sg, mut sb) = (0.0, 0.0);
        for c in tree.children(x) {
            let a = tree.arena.weight(c);
            sg += a * gamma[c.index()];
            sb += a * beta[c.index()];
        }
        gamma[x.index()] = (1.0 / tree.p_up(x) + sg) / (1.0 + sb);
    }
    if n > 0 {
        gamma[0] = tree.children(VertexId::ROOT).map(|c| tree.p_down(VertexId::ROOT, c) * gamma[c.index()]).sum();
    }
    Ok(gamma)
}

/// The quotient `γ_m(φ)/ρ_m`.
pub fn expected_hit_time(tree: &FrozenTree, m: u32) -> Result<f64> {
    Ok(exact_quantities(tree, m)?.expected_hit_time)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactQuantities {
    pub beta: Vec<f64>,
    pub rho: f64,
    pub gamma: Vec<f64>,
    pub expected_hit_time: f64,
}

pub fn exact_quantities(tree: &FrozenTree, m: u32) -> Result<ExactQuantities> {
    let beta = beta_recursion(tree, m)?;
    let rho = rho_from_beta(tree, &beta);
    if !(rho > 0.0) {
        return Err(Error::Degenerate(format!("rho_{m} = 0: generation {m} is unreachable")));
    }
    let gamma = gamma_recursion(tree, m, &beta)?;
    let expected_hit_time = gamma[0] / rho;
    Ok(ExactQuantities { beta, rho, gamma, expected_hit_time })
}

/// How the oracle solves the first-step equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    /// Leaf-to-root elimination `h(x) = a_x + b_x h(←x)`, then back substitution.
    Elimination,
    /// Gauss-Seidel sweeps to a relative residual of 1e-13.
    GaussSeidel,
}

const GS_RESIDUAL: f64 = 1e-13;
const GS_MAX_SWEEPS: usize = 1_000_000;
const GS_STALL: f64 = 1e-15;

/// First-step system `h(s) = cost + Σ_t p(s,t) h(t)` on every state not
/// pinned by `fixed`, including the virtual parent. Returns the values on
/// the vertices and the value at the virtual parent.
fn solve(
    tree: &FrozenTree,
    cost: f64,
    fixed: &dyn Fn(u32) -> Option<f64>,
    method: OracleMethod,
) -> Result<(Vec<f64>, f64)> {
    match method {
        OracleMethod::Elimination => solve_elimination(tree, cost, fixed),
        OracleMethod::GaussSeidel => solve_gauss_seidel(tree, cost, fixed),
    }
}

fn solve_elimination(tree: &FrozenTree, cost: f64, fixed: &dyn Fn(u32) -> Option<f64>) -> Result<(Vec<f64>, f64)> {
    let n = tree.vertex_count();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for x in (0..n).rev() {
        if let Some(v) = fixed(x as u32) {
            a[x] = v;
            continue;
        }
        let xv = VertexId(x as u32);
        let (mut pa, mut pb) = (0.0, 0.0);
        for c in tree.children(xv) {
            let p = tree.p_down(xv, c);
            pa += p * a[c.index()];
            pb += p * b[c.index()];
        }
        let d = 1.0 - pb;
        a[x] = (cost + pa) / d;
        b[x] = tree.p_up(xv) / d;
    }
    let mut h = vec![0.0; n];
    let (root, vp) = match fixed(VIRTUAL) {
        Some(v) => (a[0] + b[0] * v, v),
        None => {
            if fixed(0).is_none() && 1.0 - b[0] <= 1e-15 {
                return Err(Error::Degenerate("no pinned state is reachable".into()));
            }
            let r = (a[0] + b[0] * cost) / (1.0 - b[0]);
            (r, cost + r)
        }
    };
    h[0] = root;
    for x in 1..n {
        let p = tree.arena.parent(VertexId(x as u32)).expect("non-root").index();
        h[x] = a[x] + b[x] * h[p];
    }
    Ok((h, vp))
}

fn solve_gauss_seidel(tree: &FrozenTree, cost: f64, fixed: &dyn Fn(u32) -> Option<f64>) -> Result<(Vec<f64>, f64)> {
    let n = tree.vertex_count();
    let pinned: Vec<Option<f64>> = (0..n as u32).map(fixed).collect();
    let vp_pinned = fixed(VIRTUAL);
    let mut h: Vec<f64> = pinned.iter().map(|v| v.unwrap_or(0.0)).collect();
    let mut vp = vp_pinned.unwrap_or(0.0);
    let update = |h: &[f64], vp: f64, x: usize| -> f64 {
        let xv = VertexId(x as u32);
        let up = if x == 0 { vp } else { h[tree.arena.parent(xv).expect("non-root").index()] };
        cost + tree.p_up(xv) * up + tree.children(xv).map(|c| tree.p_down(xv, c) * h[c.index()]).sum::<f64>()
    };
    for sweep in 0..GS_MAX_SWEEPS {
        let order: Box<dyn Iterator<Item = usize>> =
            if sweep % 2 == 0 { Box::new(0..n) } else { Box::new((0..n).rev()) };
        let mut change: f64 = 0.0;
        for x in order {
            if pinned[x].is_none() {
                let v = update(&h, vp, x);
                change = change.max((v - h[x]).abs() / v.abs().max(1.0));
                h[x] = v;
            }
        }
        if vp_pinned.is_none() {
            vp = cost + h[0];
        }
        let mut worst: f64 = 0.0;
        for x in 0..n {
            if pinned[x].is_none() {
                worst = worst.max((update(&h, vp, x) - h[x]).abs() / h[x].abs().max(1.0));
            }
        }
        if vp_pinned.is_none() {
            worst = worst.max((cost + h[0] - vp).abs() / vp.abs().max(1.0));
        }
        // A small residual alone is not enough on slowly mixing trees, so
        // sweeping continues until the iterates stop moving.
        if worst < GS_RESIDUAL && change < GS_STALL {
            return Ok((h, vp));
        }
    }
    Err(Error::Numerical(format!("Gauss-Seidel did not converge in {GS_MAX_SWEEPS} sweeps")))
}

fn state_of(p: Position) -> u32 {
    match p {
        Position::VirtualParent => VIRTUAL,
        Position::Vertex(v) => v.0,
    }
}

/// `P_start(hit targets before avoid)` by solving the first-step equations.
pub fn oracle_hit_prob(
    tree: &FrozenTree,
    start: Position,
    targets: &[Position],
    avoid: &[Position],
    method: OracleMethod,
) -> Result<f64> {
    for &p in targets.iter().chain(avoid).chain([&start]) {
        if let Position::Vertex(v) = p {
            tree.check_vertex(v)?;
        }
    }
    let targets: Vec<u32> = targets.iter().map(|&p| state_of(p)).collect();
    let avoid: Vec<u32> = avoid.iter().map(|&p| state_of(p)).collect();
    if targets.iter().any(|t| avoid.contains(t)) {
        return Err(Error::Usage("target and avoid sets overlap".into()));
    }
    let fixed = |s: u32| {
        if targets.contains(&s) {
            Some(1.0)
        } else if avoid.contains(&s) {
            Some(0.0)
        } else {
            None
        }
    };
    let (h, vp) = solve(tree, 0.0, &fixed, method)?;
    Ok(match start {
        Position::VirtualParent => vp,
        Position::Vertex(v) => h[v.index()],
    })
}

/// `E_start[𝒯_m]`, the expected hitting time of generation `m`.
pub fn oracle_expected_time(tree: &FrozenTree, start: Position, m: u32, method: OracleMethod) -> Result<f64> {
    tree.check_m(m)?;
    if let Position::Vertex(v) = start {
        tree.check_vertex(v)?;
    }
    let target = tree.generation(m);
    let fixed = |s: u32| (s != VIRTUAL && target.contains(&(s as usize))).then_some(0.0);
    let (h, vp) = solve(tree, 1.0, &fixed, method)?;
    Ok(match start {
        Position::VirtualParent => vp,
        Position::Vertex(v) => h[v.index()],
    })
}

/// `P_x(𝒯_m < T_{←x})` for every vertex of generation `≤ m`, each from a
/// separate elimination over the subtree of `x` with `←x` pinned to 0.
pub fn oracle_escape_probabilities(tree: &FrozenTree, m: u32) -> Result<Vec<f64>> {
    tree.check_m(m)?;
    let n = tree.generation(m).end;
    let first_target = tree.generation(m).start;
    let mut out = vec![1.0; n];
    let mut order = Vec::new();
    let mut stack = Vec::new();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for x in 0..first_target {
        order.clear();
        stack.push(VertexId(x as u32));
        while let Some(z) = stack.pop() {
            order.push(z);
            if z.index() < first_target {
                stack.extend(tree.children(z));
            }
        }
        for &z in order.iter().rev() {
            if z.index() >= first_target {
                a[z.index()] = 1.0;
                b[z.index()] = 0.0;
                continue;
            }
            let (mut pa, mut pb) = (0.0, 0.0);
            for c in tree.children(z) {
                let p = tree.p_down(z, c);
                pa += p * a[c.index()];
                pb += p * b[c.index()];
            }
            a[z.index()] = pa / (1.0 - pb);
            b[z.index()] = tree.p_up(z) / (1.0 - pb);
        }
        out[x] = a[x];
    }
    Ok(out)
}

/// `P_φ(𝒯_m < T_φ)` from the oracle: one step, then escape through a child.
pub fn oracle_rho(tree: &FrozenTree, m: u32, method: OracleMethod) -> Result<f64> {
    tree.check_m(m)?;
    let targets: Vec<Position> = tree.generation(m).map(|x| Position::Vertex(VertexId(x as u32))).collect();
    let root = [Position::Vertex(VertexId::ROOT)];
    let mut total = 0.0;
    for c in tree.children(VertexId::ROOT) {
        let h = if m == 1 { 1.0 } else { oracle_hit_prob(tree, Position::Vertex(c), &targets, &root, method)? };
        total += tree.p_down(VertexId::ROOT, c) * h;
    }
    Ok(total)
}

/// Output of the `exact` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactReport {
    pub depth: u32,
    pub m: u32,
    pub rho: f64,
    pub gamma_root: f64,
    pub expected_hit_time_paper: f64,
    pub expected_hit_time_oracle: Option<f64>,
    pub max_abs_beta_error: Option<f64>,
}

pub fn exact_report(tree: &FrozenTree, m: u32, with_oracle: bool) -> Result<ExactReport> {
    let q = exact_quantities(tree, m)?;
    let (oracle_time, beta_error) = if with_oracle {
        let t = oracle_expected_time(tree, Position::Vertex(VertexId::ROOT), m, OracleMethod::Elimination)?;
        let o = oracle_escape_probabilities(tree, m)?;
        let err = q.beta.iter().zip(&o).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        (Some(t), Some(err))
    } else {
        (None, None)
    };
    Ok(ExactReport {
        depth: tree.m_max(),
        m,
        rho: q.rho,
        gamma_root: q.gamma[0],
        expected_hit_time_paper: q.expected_hit_time,
        expected_hit_time_oracle: oracle_time,
        max_abs_beta_error: beta_error,
    })
}
