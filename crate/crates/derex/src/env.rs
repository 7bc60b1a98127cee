//! Four-rooms gridworld in three observation regimes: tabular one-hot,
//! rendered pixels, and the partially observable variant where the agent
//! marker is hidden with probability `p` per frame. Data collection uses a
//! uniform random policy.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::matrix::Matrix;

pub const GRID: usize = 11;
/// One-hot dimension: every grid cell, walls included.
pub const NUM_CELLS: usize = GRID * GRID;
pub const IMG: usize = 30;
pub const IMG_CHANNELS: usize = 3;
/// Pixels per cell when rasterizing; the remaining border is split evenly.
const CELL_PX: usize = 2;
const BORDER_PX: usize = (IMG - GRID * CELL_PX) / 2;

pub const ACTIONS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
pub const NUM_ACTIONS: usize = 4;

/// Default episode horizon for trajectory collection.
pub const DEFAULT_HORIZON: usize = 250;

// quantized to u8-representable levels so byte round-trips are exact
const FLOOR_GRAY: f64 = 128.0 / 255.0;
const WALL_BLACK: f64 = 0.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid action id {0}")]
    BadAction(usize),
    #[error("state {0} is a wall cell")]
    WallState(usize),
    #[error("dataset parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoder {
    Onehot,
    Pixel,
}

impl Encoder {
    pub fn tag(&self) -> &'static str {
        match self {
            Encoder::Onehot => "onehot",
            Encoder::Pixel => "pixel",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self, EnvError> {
        match tag {
            "onehot" => Ok(Encoder::Onehot),
            "pixel" => Ok(Encoder::Pixel),
            other => Err(EnvError::Parse(format!("unknown encoder {other:?}"))),
        }
    }
}

/// The fixed 11x11 four-rooms map: outer boundary walls plus a central
/// cross with four (asymmetric) doorways.
#[derive(Debug, Clone)]
pub struct GridSpec {
    walls: [bool; NUM_CELLS],
    open_states: Vec<usize>,
    open_index: [usize; NUM_CELLS], // NUM_CELLS for walls
    pub start: usize,
    pub goal: usize,
}

pub const DOORWAYS: [(usize, usize); 4] = [(5, 1), (5, 8), (2, 5), (9, 5)];

impl Default for GridSpec {
    fn default() -> Self {
        Self::new()
    }
}

impl GridSpec {
    pub fn new() -> Self {
        let mut walls = [false; NUM_CELLS];
        for r in 0..GRID {
            for c in 0..GRID {
                let boundary = r == 0 || c == 0 || r == GRID - 1 || c == GRID - 1;
                let cross = r == 5 || c == 5;
                walls[r * GRID + c] = boundary || cross;
            }
        }
        for (r, c) in DOORWAYS {
            walls[r * GRID + c] = false;
        }
        let open_states: Vec<usize> = (0..NUM_CELLS).filter(|&s| !walls[s]).collect();
        let mut open_index = [NUM_CELLS; NUM_CELLS];
        for (i, &s) in open_states.iter().enumerate() {
            open_index[s] = i;
        }
        Self { walls, open_states, open_index, start: GRID + 1, goal: 9 * GRID + 9 }
    }

    pub fn is_wall(&self, state: usize) -> bool {
        self.walls[state]
    }

    /// Non-wall states in cell-id order.
    pub fn open_states(&self) -> &[usize] {
        &self.open_states
    }

    pub fn num_open(&self) -> usize {
        self.open_states.len()
    }

    /// Index of a non-wall state within `open_states`.
    pub fn open_index(&self, state: usize) -> Option<usize> {
        let i = self.open_index[state];
        (i < NUM_CELLS).then_some(i)
    }

    pub fn coords(&self, state: usize) -> (usize, usize) {
        (state / GRID, state % GRID)
    }

    /// Deterministic move; bumping a wall (or the boundary) leaves the
    /// state unchanged.
    pub fn step(&self, state: usize, action: usize) -> Result<usize, EnvError> {
        if action >= NUM_ACTIONS {
            return Err(EnvError::BadAction(action));
        }
        if self.walls[state] {
            return Err(EnvError::WallState(state));
        }
        let (r, c) = self.coords(state);
        let (dr, dc) = ACTIONS[action];
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        if nr < 0 || nc < 0 || nr >= GRID as isize || nc >= GRID as isize {
            return Ok(state);
        }
        let next = nr as usize * GRID + nc as usize;
        Ok(if self.walls[next] { state } else { next })
    }

    /// Channels-first (3, 30, 30) image in [0,1]; all values are exact
    /// multiples of 1/255 so byte export round-trips losslessly.
    pub fn render(&self, state: usize, hide: bool) -> Vec<f64> {
        let mut img = vec![0.0; IMG_CHANNELS * IMG * IMG];
        let mut put = |y: usize, x: usize, rgb: [f64; 3]| {
            for (ch, v) in rgb.iter().enumerate() {
                img[ch * IMG * IMG + y * IMG + x] = *v;
            }
        };
        for y in 0..IMG {
            for x in 0..IMG {
                let inside = y >= BORDER_PX
                    && x >= BORDER_PX
                    && y < BORDER_PX + GRID * CELL_PX
                    && x < BORDER_PX + GRID * CELL_PX;
                let rgb = if inside {
                    let r = (y - BORDER_PX) / CELL_PX;
                    let c = (x - BORDER_PX) / CELL_PX;
                    if self.walls[r * GRID + c] {
                        [WALL_BLACK; 3]
                    } else {
                        [FLOOR_GRAY; 3]
                    }
                } else {
                    [WALL_BLACK; 3]
                };
                put(y, x, rgb);
            }
        }
        if !hide {
            let (r, c) = self.coords(state);
            for dy in 0..CELL_PX {
                for dx in 0..CELL_PX {
                    put(BORDER_PX + r * CELL_PX + dy, BORDER_PX + c * CELL_PX + dx, [1.0, 0.0, 0.0]);
                }
            }
        }
        img
    }

    /// Pixel footprint (index set within the flattened image) of a cell:
    /// where the marker may appear for that state.
    pub fn marker_footprint(&self, state: usize) -> Vec<usize> {
        let (r, c) = self.coords(state);
        let mut out = Vec::with_capacity(CELL_PX * CELL_PX * IMG_CHANNELS);
        for ch in 0..IMG_CHANNELS {
            for dy in 0..CELL_PX {
                for dx in 0..CELL_PX {
                    out.push(
                        ch * IMG * IMG + (BORDER_PX + r * CELL_PX + dy) * IMG + BORDER_PX
                            + c * CELL_PX
                            + dx,
                    );
                }
            }
        }
        out
    }

    /// Row-stochastic transition matrix of the uniform random policy over
    /// the non-wall states (in `open_states` order).
    pub fn exact_transition_matrix(&self) -> Matrix {
        let n = self.num_open();
        let mut p = Matrix::zeros(n, n);
        for (i, &s) in self.open_states.iter().enumerate() {
            for a in 0..NUM_ACTIONS {
                let next = self.step(s, a).expect("open state");
                let j = self.open_index(next).expect("steps stay off walls");
                p.set(i, j, p.get(i, j) + 1.0 / NUM_ACTIONS as f64);
            }
        }
        p
    }

    /// States reachable from `from` (BFS over the step dynamics).
    pub fn reachable_from(&self, from: usize) -> Vec<usize> {
        let mut seen = vec![false; NUM_CELLS];
        let mut queue = std::collections::VecDeque::new();
        seen[from] = true;
        queue.push_back(from);
        while let Some(s) = queue.pop_front() {
            for a in 0..NUM_ACTIONS {
                let t = self.step(s, a).expect("open state");
                if !seen[t] {
                    seen[t] = true;
                    queue.push_back(t);
                }
            }
        }
        (0..NUM_CELLS).filter(|&s| seen[s]).collect()
    }

    /// Exact marginal source-state distribution over `open_states` for a
    /// rollout of `n` transitions started at `start`, restarting every
    /// `horizon` steps when episodic: d(i) = (1/n) sum_t Pr(S_t = i).
    pub fn exact_source_marginal(&self, n: usize, horizon: Option<usize>) -> Vec<f64> {
        let p = self.exact_transition_matrix();
        let m = self.num_open();
        let start = self.open_index(self.start).expect("start is open");
        let mut cur = vec![0.0; m];
        cur[start] = 1.0;
        let mut acc = vec![0.0; m];
        for t in 0..n {
            if let Some(h) = horizon {
                if t > 0 && t % h == 0 {
                    cur = vec![0.0; m];
                    cur[start] = 1.0;
                }
            }
            for (a, c) in acc.iter_mut().zip(&cur) {
                *a += c;
            }
            // cur <- cur P
            let mut next = vec![0.0; m];
            for i in 0..m {
                let ci = cur[i];
                if ci == 0.0 {
                    continue;
                }
                for (j, nj) in next.iter_mut().enumerate() {
                    *nj += ci * p.get(i, j);
                }
            }
            cur = next;
        }
        for a in acc.iter_mut() {
            *a /= n as f64;
        }
        acc
    }
}

/// Transition tuples under the uniform random policy, with one-hot or pixel
/// observation encoding. Rewards are zero during collection.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<usize>,
    pub encoder: Encoder,
    pub seed: u64,
    /// Episode horizon used during collection (`None` = one long rollout).
    pub horizon: Option<usize>,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Empirical source-state distribution over all cells (walls get zero).
    pub fn empirical_d(&self) -> Vec<f64> {
        let mut d = vec![0.0; NUM_CELLS];
        for &s in &self.states {
            d[s] += 1.0;
        }
        let n = self.len().max(1) as f64;
        for v in d.iter_mut() {
            *v /= n;
        }
        d
    }

    pub fn visit_counts(&self) -> Vec<usize> {
        let mut c = vec![0usize; NUM_CELLS];
        for &s in &self.states {
            c[s] += 1;
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        let mut f =
            std::fs::File::create(path).map_err(|e| EnvError::Io(format!("{path:?}: {e}")))?;
        let horizon = self.horizon.map(|h| h.to_string()).unwrap_or_else(|| "none".into());
        write!(
            f,
            "TRANSITIONS n={} encoder={} p=0 seed={} horizon={}\n",
            self.len(),
            self.encoder.tag(),
            self.seed,
            horizon
        )
        .map_err(|e| EnvError::Io(e.to_string()))?;
        for i in 0..self.len() {
            write!(f, "{} {} {} {}\n", self.states[i], self.actions[i], self.rewards[i], self.next_states[i])
                .map_err(|e| EnvError::Io(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let f = std::fs::File::open(path).map_err(|e| EnvError::Io(format!("{path:?}: {e}")))?;
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| EnvError::Parse("empty file".into()))?
            .map_err(|e| EnvError::Io(e.to_string()))?;
        let fields = parse_header(&header, "TRANSITIONS")?;
        let n: usize = field(&fields, "n")?;
        let encoder = Encoder::from_tag(&field::<String>(&fields, "encoder")?)?;
        let seed: u64 = field(&fields, "seed")?;
        let horizon = match field::<String>(&fields, "horizon")?.as_str() {
            "none" => None,
            h => Some(h.parse().map_err(|_| EnvError::Parse("bad horizon".into()))?),
        };
        let mut ds = TransitionDataset {
            states: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            next_states: Vec::with_capacity(n),
            encoder,
            seed,
            horizon,
        };
        for line in lines.take(n) {
            let line = line.map_err(|e| EnvError::Io(e.to_string()))?;
            let mut it = line.split_whitespace();
            let mut next = || {
                it.next().ok_or_else(|| EnvError::Parse(format!("short record {line:?}")))
            };
            ds.states.push(next()?.parse().map_err(|_| EnvError::Parse("bad state".into()))?);
            ds.actions.push(next()?.parse().map_err(|_| EnvError::Parse("bad action".into()))?);
            ds.rewards.push(next()?.parse().map_err(|_| EnvError::Parse("bad reward".into()))?);
            ds.next_states.push(next()?.parse().map_err(|_| EnvError::Parse("bad next".into()))?);
        }
        if ds.len() != n {
            return Err(EnvError::Parse(format!("expected {n} records, got {}", ds.len())));
        }
        Ok(ds)
    }
}

fn parse_header(line: &str, magic: &str) -> Result<Vec<(String, String)>, EnvError> {
    let mut it = line.split_whitespace();
    if it.next() != Some(magic) {
        return Err(EnvError::Parse(format!("expected {magic} header, got {line:?}")));
    }
    Ok(it
        .filter_map(|tok| tok.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect())
}

fn field<T: std::str::FromStr>(fields: &[(String, String)], key: &str) -> Result<T, EnvError> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| EnvError::Parse(format!("missing or bad header field {key:?}")))
}

/// Uniform-policy rollout of `n` transitions from the fixed start; one long
/// rollout when `horizon` is `None`, otherwise restarting each `horizon`
/// steps.
pub fn collect_transitions(
    env: &GridSpec,
    n: usize,
    seed: u64,
    encoder: Encoder,
    horizon: Option<usize>,
) -> TransitionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = TransitionDataset {
        states: Vec::with_capacity(n),
        actions: Vec::with_capacity(n),
        rewards: Vec::with_capacity(n),
        next_states: Vec::with_capacity(n),
        encoder,
        seed,
        horizon,
    };
    let mut s = env.start;
    let mut t_in_ep = 0usize;
    for _ in 0..n {
        if let Some(h) = horizon {
            if t_in_ep >= h {
                s = env.start;
                t_in_ep = 0;
            }
        }
        let a = rng.gen_range(0..NUM_ACTIONS);
        let s2 = env.step(s, a).expect("rollout stays on open cells");
        ds.states.push(s);
        ds.actions.push(a);
        ds.rewards.push(0.0);
        ds.next_states.push(s2);
        s = s2;
        t_in_ep += 1;
    }
    ds
}

/// Trajectories of horizon `T` under the uniform random policy in the
/// partially observable regime: per-frame i.i.d. Bernoulli(p) marker hiding.
/// Ground-truth states are retained for probes only.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    /// Per trajectory: T+1 states.
    pub states: Vec<Vec<usize>>,
    /// Per trajectory: T actions.
    pub actions: Vec<Vec<usize>>,
    /// Per trajectory: T+1 hide flags.
    pub hidden: Vec<Vec<bool>>,
    pub horizon: usize,
    pub p_hide: f64,
    pub seed: u64,
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Observation image for trajectory `i` at time `t` (marker hidden per
    /// the stored flags).
    pub fn observation(&self, env: &GridSpec, i: usize, t: usize) -> Vec<f64> {
        env.render(self.states[i][t], self.hidden[i][t])
    }

    pub fn save(&self, env: &GridSpec, path: &Path) -> Result<(), EnvError> {
        let mut f =
            std::fs::File::create(path).map_err(|e| EnvError::Io(format!("{path:?}: {e}")))?;
        write!(
            f,
            "TRAJECTORIES n={} encoder=pixel p={} seed={} horizon={}\n",
            self.len(),
            self.p_hide,
            self.seed,
            self.horizon
        )
        .map_err(|e| EnvError::Io(e.to_string()))?;
        for i in 0..self.len() {
            let states: Vec<String> = self.states[i].iter().map(|s| s.to_string()).collect();
            let actions: Vec<String> = self.actions[i].iter().map(|a| a.to_string()).collect();
            let hides: Vec<String> =
                self.hidden[i].iter().map(|h| if *h { "1".into() } else { "0".to_string() }).collect();
            write!(f, "states {}\nactions {}\nhidden {}\n", states.join(" "), actions.join(" "), hides.join(" "))
                .map_err(|e| EnvError::Io(e.to_string()))?;
            // observations as raw byte triples, frame by frame
            let mut bytes = Vec::with_capacity((self.horizon + 1) * IMG * IMG * IMG_CHANNELS);
            for t in 0..=self.horizon {
                let img = self.observation(env, i, t);
                for px in 0..IMG * IMG {
                    for ch in 0..IMG_CHANNELS {
                        bytes.push((img[ch * IMG * IMG + px] * 255.0).round() as u8);
                    }
                }
            }
            f.write_all(&bytes).map_err(|e| EnvError::Io(e.to_string()))?;
            f.write_all(b"\n").map_err(|e| EnvError::Io(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let f = std::fs::File::open(path).map_err(|e| EnvError::Io(format!("{path:?}: {e}")))?;
        let mut r = BufReader::new(f);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| EnvError::Io(e.to_string()))?;
        let fields = parse_header(line.trim_end(), "TRAJECTORIES")?;
        let n: usize = field(&fields, "n")?;
        let p_hide: f64 = field(&fields, "p")?;
        let seed: u64 = field(&fields, "seed")?;
        let horizon: usize = field(&fields, "horizon")?;
        let mut ds = TrajectoryDataset {
            states: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            hidden: Vec::with_capacity(n),
            horizon,
            p_hide,
            seed,
        };
        let parse_usizes = |line: &str, tag: &str| -> Result<Vec<usize>, EnvError> {
            line.trim_end()
                .strip_prefix(tag)
                .ok_or_else(|| EnvError::Parse(format!("expected {tag:?} line")))?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| EnvError::Parse(format!("bad {tag} entry"))))
                .collect()
        };
        for _ in 0..n {
            line.clear();
            r.read_line(&mut line).map_err(|e| EnvError::Io(e.to_string()))?;
            ds.states.push(parse_usizes(&line, "states ")?);
            line.clear();
            r.read_line(&mut line).map_err(|e| EnvError::Io(e.to_string()))?;
            ds.actions.push(parse_usizes(&line, "actions ")?);
            line.clear();
            r.read_line(&mut line).map_err(|e| EnvError::Io(e.to_string()))?;
            let hides: Vec<bool> = line
                .trim_end()
                .strip_prefix("hidden ")
                .ok_or_else(|| EnvError::Parse("expected hidden line".into()))?
                .split_whitespace()
                .map(|t| t == "1")
                .collect();
            ds.hidden.push(hides);
            // skip the raw frame payload plus trailing newline
            let mut bytes = vec![0u8; (horizon + 1) * IMG * IMG * IMG_CHANNELS + 1];
            r.read_exact(&mut bytes).map_err(|e| EnvError::Io(e.to_string()))?;
        }
        Ok(ds)
    }
}

pub fn collect_trajectories(
    env: &GridSpec,
    p_hide: f64,
    n: usize,
    seed: u64,
    horizon: usize,
) -> TrajectoryDataset {
    assert!((0.0..=1.0).contains(&p_hide), "p must be in [0,1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = TrajectoryDataset {
        states: Vec::with_capacity(n),
        actions: Vec::with_capacity(n),
        hidden: Vec::with_capacity(n),
        horizon,
        p_hide,
        seed,
    };
    for _ in 0..n {
        let mut states = Vec::with_capacity(horizon + 1);
        let mut actions = Vec::with_capacity(horizon);
        let mut hidden = Vec::with_capacity(horizon + 1);
        let mut s = env.start;
        states.push(s);
        hidden.push(rng.gen::<f64>() < p_hide);
        for _ in 0..horizon {
            let a = rng.gen_range(0..NUM_ACTIONS);
            s = env.step(s, a).expect("rollout stays on open cells");
            actions.push(a);
            states.push(s);
            hidden.push(rng.gen::<f64>() < p_hide);
        }
        ds.states.push(states);
        ds.actions.push(actions);
        ds.hidden.push(hidden);
    }
    ds
}

/// Stationary distribution of a row-stochastic matrix by power iteration
/// (test oracle; deterministic).
pub fn stationary_distribution(p: &Matrix, iters: usize) -> Vec<f64> {
    let n = p.rows();
    let mut d = vec![1.0 / n as f64; n];
    for _ in 0..iters {
        let mut next = vec![0.0; n];
        for i in 0..n {
            let di = d[i];
            if di == 0.0 {
                continue;
            }
            for (j, nj) in next.iter_mut().enumerate() {
                *nj += di * p.get(i, j);
            }
        }
        d = next;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_121_cells_and_consistent_open_count() {
        let env = GridSpec::new();
        assert_eq!(NUM_CELLS, 121);
        let open = env.num_open();
        assert_eq!(env.exact_transition_matrix().rows(), open);
        let reach = env.reachable_from(env.start);
        assert_eq!(reach.len(), open);
        assert_eq!(reach, env.open_states());
        assert!(!env.is_wall(env.start));
        assert!(!env.is_wall(env.goal));
    }

    #[test]
    fn step_bumps_and_moves() {
        let env = GridSpec::new();
        // (1,1) moving up hits the boundary wall
        let s = GRID + 1;
        assert_eq!(env.step(s, 0).unwrap(), s);
        // moving right in the open corridor
        assert_eq!(env.step(s, 3).unwrap(), s + 1);
        assert!(matches!(env.step(s, 9), Err(EnvError::BadAction(9))));
    }

    #[test]
    fn render_hide_is_state_independent_and_marker_is_local() {
        let env = GridSpec::new();
        let opens = env.open_states();
        let base = env.render(opens[0], true);
        for &s in opens.iter().skip(1).step_by(7) {
            assert_eq!(env.render(s, true), base);
        }
        let s1 = opens[3];
        let s2 = opens[40];
        assert_ne!(env.render(s1, false), env.render(s2, false));
        // pixel difference between hidden/shown confined to the marker footprint
        let shown = env.render(s1, false);
        let hidden = env.render(s1, true);
        let footprint = env.marker_footprint(s1);
        for i in 0..shown.len() {
            if shown[i] != hidden[i] {
                assert!(footprint.contains(&i), "diff outside footprint at {i}");
            }
        }
        for v in &shown {
            // values stay byte-exact
            assert_eq!((v * 255.0).round() / 255.0, *v);
        }
    }

    #[test]
    fn transition_matrix_is_row_stochastic_with_quarter_entries() {
        let env = GridSpec::new();
        let p = env.exact_transition_matrix();
        for i in 0..p.rows() {
            let sum: f64 = p.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
        // (3,3) has all four neighbors free
        let i = env.open_index(3 * GRID + 3).unwrap();
        let row = p.row(i);
        let quarters = row.iter().filter(|v| (**v - 0.25).abs() < 1e-15).count();
        assert_eq!(quarters, 4);
        assert!((row[i]).abs() < 1e-15);
    }

    #[test]
    fn empirical_transitions_match_exact_rows() {
        let env = GridSpec::new();
        let ds = collect_transitions(&env, 100_000, 5, Encoder::Onehot, None);
        for i in 0..ds.len() {
            assert_eq!(ds.next_states[i], env.step(ds.states[i], ds.actions[i]).unwrap());
            assert_eq!(ds.rewards[i], 0.0);
        }
        let p = env.exact_transition_matrix();
        // multinomial 3-sigma check on rows with enough visits
        let counts = ds.visit_counts();
        let mut trans = vec![vec![0usize; env.num_open()]; env.num_open()];
        for t in 0..ds.len() {
            let i = env.open_index(ds.states[t]).unwrap();
            let j = env.open_index(ds.next_states[t]).unwrap();
            trans[i][j] += 1;
        }
        // transitions out of a fixed state are i.i.d. multinomial draws, so a
        // per-entry 3-sigma bound holds for each entry; across hundreds of
        // entries a few 3-sigma events are expected, so bound the fraction
        let mut checked = 0usize;
        let mut violations = 0usize;
        for (i, &s) in env.open_states().iter().enumerate() {
            let n_i = counts[s];
            if n_i < 500 {
                continue;
            }
            for j in 0..env.num_open() {
                let phat = trans[i][j] as f64 / n_i as f64;
                let pij = p.get(i, j);
                let sigma = (pij * (1.0 - pij) / n_i as f64).sqrt();
                checked += 1;
                if (phat - pij).abs() > 3.0 * sigma + 1e-12 {
                    violations += 1;
                }
            }
        }
        assert!(checked > 1000, "too few visited rows: {checked}");
        assert!(
            (violations as f64) <= 0.01 * checked as f64,
            "{violations} of {checked} entries outside 3 sigma"
        );
    }

    #[test]
    fn single_transition_gives_point_mass() {
        let env = GridSpec::new();
        let ds = collect_transitions(&env, 1, 0, Encoder::Onehot, None);
        let d = ds.empirical_d();
        assert_eq!(d[env.start], 1.0);
        assert_eq!(d.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn empirical_marginal_approaches_stationary() {
        let env = GridSpec::new();
        let p = env.exact_transition_matrix();
        let stat = stationary_distribution(&p, 20_000);
        // symmetric walk: stationary uniform
        for v in &stat {
            assert!((v - 1.0 / env.num_open() as f64).abs() < 1e-9);
        }
        let mut errs = Vec::new();
        for n in [2_000usize, 20_000, 200_000] {
            let ds = collect_transitions(&env, n, 11, Encoder::Onehot, None);
            let d = ds.empirical_d();
            let err = env
                .open_states()
                .iter()
                .enumerate()
                .map(|(i, &s)| (d[s] - stat[i]).abs())
                .fold(0.0f64, f64::max);
            errs.push(err);
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "errors not decreasing: {errs:?}");
    }

    #[test]
    fn trajectory_hide_flags_follow_p() {
        let env = GridSpec::new();
        for (p, expect_all, expect_none) in [(0.0, false, true), (1.0, true, false)] {
            let ds = collect_trajectories(&env, p, 3, 1, 50);
            let any_hidden = ds.hidden.iter().flatten().any(|h| *h);
            let all_hidden = ds.hidden.iter().flatten().all(|h| *h);
            assert_eq!(all_hidden, expect_all);
            assert_eq!(!any_hidden, expect_none);
        }
        let p = 0.3;
        let ds = collect_trajectories(&env, p, 50, 2, DEFAULT_HORIZON);
        let total: usize = ds.hidden.iter().map(|h| h.len()).sum();
        let hidden: usize = ds.hidden.iter().flatten().filter(|h| **h).count();
        assert!(total >= 10_000);
        let sigma = (p * (1.0 - p) / total as f64).sqrt();
        assert!((hidden as f64 / total as f64 - p).abs() <= 3.0 * sigma);
        for states in &ds.states {
            assert_eq!(states.len(), DEFAULT_HORIZON + 1);
        }
    }

    #[test]
    fn collection_is_bit_reproducible() {
        let env = GridSpec::new();
        let a = collect_transitions(&env, 500, 7, Encoder::Pixel, Some(100));
        let b = collect_transitions(&env, 500, 7, Encoder::Pixel, Some(100));
        assert_eq!(a, b);
        let ta = collect_trajectories(&env, 0.3, 4, 9, 60);
        let tb = collect_trajectories(&env, 0.3, 4, 9, 60);
        assert_eq!(ta, tb);
    }

    #[test]
    fn transition_dataset_roundtrip() {
        let env = GridSpec::new();
        let ds = collect_transitions(&env, 200, 3, Encoder::Onehot, Some(50));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.txt");
        ds.save(&path).unwrap();
        let loaded = TransitionDataset::load(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn trajectory_dataset_roundtrip() {
        let env = GridSpec::new();
        let ds = collect_trajectories(&env, 0.6, 3, 4, 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.bin");
        ds.save(&env, &path).unwrap();
        let loaded = TrajectoryDataset::load(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn exact_source_marginal_sums_to_one() {
        let env = GridSpec::new();
        for horizon in [None, Some(50)] {
            let d = env.exact_source_marginal(300, horizon);
            let sum: f64 = d.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
