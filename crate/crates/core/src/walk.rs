//! The nearest-neighbour walk on a lazily expanded tree.
//!
//! From a vertex `x` with children `x^1..x^N` the walk moves to `x^i` with
//! probability `A(x^i) / (1 + Σ_j A(x^j))` and to the parent otherwise. The
//! root's parent is a virtual vertex from which the walk returns to the root
//! with probability one; steps through it are counted as ordinary steps.
//! Local times count visits at times `1..=n`, so the occupation of the root
//! at time 0 is not counted.

use rand::RngCore;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::alias::fill_alias;
use crate::env::{Environment, TreeArena, VertexId};
use crate::error::{Error, Result};
use crate::rng;

/// Position of the walk: a tree vertex or the virtual parent of the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Position {
    VirtualParent,
    Vertex(VertexId),
}

/// When to stop a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopRule {
    /// After `n` steps.
    Steps(u64),
    /// At the `n`-th return to the root.
    RootReturns(u64),
    /// When generation `m` is first hit.
    HitGeneration(u64),
}

impl StopRule {
    pub fn parameter(self) -> u64 {
        match self {
            StopRule::Steps(n) | StopRule::RootReturns(n) | StopRule::HitGeneration(n) => n,
        }
    }

    pub fn kind(self) -> &'static str {
        match self {
            StopRule::Steps(_) => "steps",
            StopRule::RootReturns(_) => "returns",
            StopRule::HitGeneration(_) => "hitgen",
        }
    }

    pub fn with_parameter(self, n: u64) -> StopRule {
        match self {
            StopRule::Steps(_) => StopRule::Steps(n),
            StopRule::RootReturns(_) => StopRule::RootReturns(n),
            StopRule::HitGeneration(_) => StopRule::HitGeneration(n),
        }
    }
}

/// Transition law out of `x`; expands `x` on first query.
pub fn transition_distribution(arena: &mut TreeArena, x: Position) -> Result<Vec<(Position, f64)>> {
    let x = match x {
        Position::VirtualParent => return Ok(vec![(Position::Vertex(VertexId::ROOT), 1.0)]),
        Position::Vertex(x) => x,
    };
    if !arena.contains(x) {
        return Err(Error::Usage(format!("unknown vertex id {}", x.0)));
    }
    let children = arena.ensure_expanded(x);
    let denom = 1.0 + children.iter().map(|c| arena.weight(c)).sum::<f64>();
    let mut out: Vec<(Position, f64)> =
        children.iter().map(|c| (Position::Vertex(c), arena.weight(c) / denom)).collect();
    let up = match arena.parent(x) {
        Some(p) => Position::Vertex(p),
        None => Position::VirtualParent,
    };
    out.push((up, 1.0 / denom));
    Ok(out)
}

/// Immutable summary of a walk at one instant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub replica: u64,
    pub steps: u64,
    pub returns: u64,
    #[serde(rename = "R")]
    pub largest_full_generation: u64,
    #[serde(rename = "Xstar")]
    pub max_generation: u64,
    #[serde(rename = "L_root")]
    pub root_local_time: u64,
    pub extinct: bool,
    /// The step cap was hit before the stop rule fired.
    pub truncated: bool,
}

/// Full online state of a walk (local times are read through [`Walker::local_time`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalkObservables {
    pub steps: u64,
    pub position: Position,
    pub root_local_time: u64,
    pub root_returns: u64,
    pub visited_per_generation: Vec<u64>,
    pub largest_full_generation: u64,
    pub max_generation: u64,
    pub extinct_flag: bool,
}

const VIRTUAL: u32 = u32::MAX;
const NO_TABLE: u32 = u32::MAX;

/// Per-vertex walk state. `table` indexes the alias table of the vertex;
/// slots `0..len-1` are the children and slot `len-1` is the parent.
#[derive(Debug, Clone, Copy)]
struct Cell {
    local_time: u32,
    table: u32,
}

impl Default for Cell {
    fn default() -> Self {
        Cell { local_time: 0, table: NO_TABLE }
    }
}

/// Alias tables shared between vertices whose children carry the same
/// sequence of weights.
#[derive(Default)]
struct TableCache {
    by_atoms: HashMap<Vec<u16>, u32>,
    /// `(start, len)` into the pools, per table id.
    spans: Vec<(u32, u32)>,
    threshold: Vec<f64>,
    alias: Vec<u32>,
}

impl TableCache {
    fn get(&mut self, env: &Environment, atoms: &[u16]) -> u32 {
        if let Some(&id) = self.by_atoms.get(atoms) {
            return id;
        }
        let mut weights: Vec<f64> = atoms.iter().map(|&a| env.atom_value(a)).collect();
        weights.push(1.0);
        let start = self.threshold.len();
        let len = weights.len();
        self.threshold.resize(start + len, 0.0);
        self.alias.resize(start + len, 0);
        fill_alias(&weights, &mut self.threshold[start..], &mut self.alias[start..]);
        let id = self.spans.len() as u32;
        self.spans.push((start as u32, len as u32));
        self.by_atoms.insert(atoms.to_vec(), id);
        id
    }
}

/// A walk on its own lazily expanded tree.
pub struct Walker<'e> {
    arena: TreeArena<'e>,
    rng: Xoshiro256PlusPlus,
    cells: Vec<Cell>,
    tables: TableCache,
    pos: u32,
    generation: u32,
    steps: u64,
    virtual_local_time: u64,
    visited: Vec<u64>,
    largest_full: u32,
    max_generation: u32,
    extinct: bool,
    scratch: Vec<u16>,
}

impl<'e> Walker<'e> {
    /// Starts a walk at the root of the tree `tree_seed`.
    pub fn new(env: &'e Environment, tree_seed: u64, walk_seed: u64) -> Self {
        let mut w = Walker {
            arena: TreeArena::new(env, tree_seed),
            rng: rng::walk_stream(walk_seed),
            cells: Vec::new(),
            tables: TableCache::default(),
            pos: VertexId::ROOT.0,
            generation: 0,
            steps: 0,
            virtual_local_time: 0,
            visited: vec![1],
            largest_full: 0,
            max_generation: 0,
            extinct: false,
            scratch: Vec::new(),
        };
        w.arrive_first_time(VertexId::ROOT.0);
        w
    }

    pub fn arena(&self) -> &TreeArena<'e> {
        &self.arena
    }

    pub fn position(&self) -> Position {
        if self.pos == VIRTUAL {
            Position::VirtualParent
        } else {
            Position::Vertex(VertexId(self.pos))
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn is_extinct(&self) -> bool {
        self.extinct
    }

    /// `ℓ(z, n)` for the current `n`.
    pub fn local_time(&self, z: Position) -> u64 {
        match z {
            Position::VirtualParent => self.virtual_local_time,
            Position::Vertex(v) => self.cells.get(v.index()).map_or(0, |c| c.local_time as u64),
        }
    }

    pub fn root_local_time(&self) -> u64 {
        self.cells[0].local_time as u64
    }

    pub fn largest_full_generation(&self) -> u64 {
        self.largest_full as u64
    }

    pub fn max_generation(&self) -> u64 {
        self.max_generation as u64
    }

    pub fn observables(&self) -> WalkObservables {
        WalkObservables {
            steps: self.steps,
            position: self.position(),
            root_local_time: self.root_local_time(),
            root_returns: self.root_local_time(),
            visited_per_generation: self.visited.clone(),
            largest_full_generation: self.largest_full as u64,
            max_generation: self.max_generation as u64,
            extinct_flag: self.extinct,
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            replica: 0,
            steps: self.steps,
            returns: self.root_local_time(),
            largest_full_generation: self.largest_full as u64,
            max_generation: self.max_generation as u64,
            root_local_time: self.root_local_time(),
            extinct: self.extinct,
            truncated: false,
        }
    }

    /// Expands `x`, caches its alias table and updates the generation counts.
    fn arrive_first_time(&mut self, x: u32) {
        let children = self.arena.ensure_expanded(VertexId(x));
        if self.cells.len() < self.arena.len() {
            self.cells.resize(self.arena.len(), Cell::default());
        }
        let mut atoms = std::mem::take(&mut self.scratch);
        atoms.clear();
        atoms.extend(children.iter().filter_map(|c| self.arena.weight_atom(c)));
        self.cells[x as usize].table = self.tables.get(self.arena.env(), &atoms);
        self.scratch = atoms;

        if x != VertexId::ROOT.0 {
            let g = self.arena.generation(VertexId(x)) as usize;
            if self.visited.len() <= g {
                self.visited.resize(g + 1, 0);
            }
            self.visited[g] += 1;
            self.update_largest_full_generation();
        }
        if self.arena.detect_extinction() {
            self.extinct = true;
        }
    }

    /// Advances the prefix of fully visited generations. Each call is
    /// amortized O(1): the front only moves forward.
    pub fn update_largest_full_generation(&mut self) -> u64 {
        self.largest_full = largest_full_generation(&self.visited, &self.arena, self.largest_full);
        self.largest_full as u64
    }

    /// One step of the walk.
    #[inline]
    pub fn step(&mut self) {
        let next;
        if self.pos == VIRTUAL {
            next = VertexId::ROOT.0;
            self.generation = 0;
        } else {
            let table = self.cells[self.pos as usize].table;
            let (start, len) = self.tables.spans[table as usize];
            let u = rng::unit_f64(self.rng.next_u64());
            let x = u * len as f64;
            let i = (x as u32).min(len - 1);
            let slot = (start + i) as usize;
            let chosen = if x - (i as f64) < self.tables.threshold[slot] { i } else { self.tables.alias[slot] };
            let (parent, first_child) = self.arena.links(self.pos);
            if chosen + 1 == len {
                next = parent;
                self.generation = self.generation.wrapping_sub(1);
            } else {
                next = first_child + chosen;
                self.generation += 1;
                if self.generation > self.max_generation {
                    self.max_generation = self.generation;
                }
            }
        }
        self.steps += 1;
        self.pos = next;
        if next == VIRTUAL {
            self.virtual_local_time += 1;
            return;
        }
        let first = self.cells[next as usize].table == NO_TABLE;
        self.cells[next as usize].local_time += 1;
        if first {
            self.arrive_first_time(next);
        }
    }
}

/// Largest `k` such that every generation `1..=k` is finalized and fully
/// visited, scanning forward from `from`.
pub fn largest_full_generation(visited: &[u64], arena: &TreeArena, from: u32) -> u32 {
    let mut k = from as usize;
    loop {
        let next = k + 1;
        let z = arena.created_at(next);
        if z > 0 && arena.is_finalized(next) && visited.get(next).copied() == Some(z) {
            k = next;
        } else {
            return k as u32;
        }
    }
}

/// Runs one walk from the root and returns a snapshot at each checkpoint
/// (in the stop rule's unit) and at the stop condition.
///
/// `max_steps` caps the run; a capped run ends with `truncated` set. A run
/// on a tree found to be finite ends with `extinct` set.
pub fn run(
    env: &Environment,
    tree_seed: u64,
    walk_seed: u64,
    stop: StopRule,
    checkpoints: &[u64],
    max_steps: Option<u64>,
) -> Result<Vec<Snapshot>> {
    if checkpoints.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Usage("checkpoints must be sorted".into()));
    }
    if checkpoints.last().is_some_and(|&c| c > stop.parameter()) {
        return Err(Error::Usage(format!("checkpoint beyond stop parameter {}", stop.parameter())));
    }
    let mut walker = Walker::new(env, tree_seed, walk_seed);
    let progress = |w: &Walker| match stop {
        StopRule::Steps(_) => w.steps,
        StopRule::RootReturns(_) => w.root_local_time(),
        StopRule::HitGeneration(_) => w.max_generation as u64,
    };
    let target = stop.parameter();
    let cap = max_steps.unwrap_or(u64::MAX);
    let mut out = Vec::with_capacity(checkpoints.len() + 1);
    let mut next_cp = 0;
    loop {
        let p = progress(&walker);
        while next_cp < checkpoints.len() && checkpoints[next_cp] <= p {
            out.push(walker.snapshot());
            next_cp += 1;
        }
        if p >= target {
            if checkpoints.last() != Some(&target) {
                out.push(walker.snapshot());
            }
            break;
        }
        if walker.extinct || walker.steps >= cap {
            let mut s = walker.snapshot();
            s.truncated = !walker.extinct;
            out.push(s);
            break;
        }
        walker.step();
    }
    Ok(out)
}
