use serde::{Deserialize, Serialize};

use super::StabilizerConfig;
use crate::imaging::Translation;

/// Per-timestep, per-tile drift estimates. Timestep 0 has no estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileDriftStore {
    n_tiles: usize,
    drift: Vec<Vec<Option<Translation>>>,
}

impl TileDriftStore {
    pub fn new(n_tiles: usize, n_timesteps: usize) -> Self {
        Self {
            n_tiles,
            drift: vec![vec![None; n_tiles]; n_timesteps],
        }
    }

    pub fn n_tiles(&self) -> usize {
        self.n_tiles
    }

    pub fn n_timesteps(&self) -> usize {
        self.drift.len()
    }

    /// Record an estimate. Writes at timestep 0 or of non-finite values are ignored.
    pub fn set(&mut self, t: usize, tile: usize, value: Option<Translation>) {
        if t == 0 {
            return;
        }
        self.drift[t][tile] = value.filter(|v| v.is_finite());
    }

    pub fn get(&self, t: usize, tile: usize) -> Option<Translation> {
        self.drift.get(t).and_then(|row| row.get(tile).copied().flatten())
    }

    pub fn is_valid(&self, t: usize, tile: usize) -> bool {
        self.get(t, tile).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub n: usize,
    /// Row-major n x n values.
    pub c: Vec<f64>,
    /// Tiles whose dx series had zero variance or too few observations.
    pub flagged: Vec<usize>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.c[i * self.n + j]
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        Self {
            n,
            c: rows.into_iter().flatten().collect(),
            flagged: Vec::new(),
        }
    }
}

/// Pearson correlation of every pair of tiles' dx series over the timesteps
/// where both are valid. Undefined correlations are 0; the diagonal is 1.
pub fn build_correlation_matrix(store: &TileDriftStore) -> CorrelationMatrix {
    let n = store.n_tiles();
    let mut c = vec![0.0; n * n];
    let mut flagged = std::collections::BTreeSet::new();
    for i in 0..n {
        c[i * n + i] = 1.0;
        for j in i + 1..n {
            let pairs: Vec<(f64, f64)> = (1..store.n_timesteps())
                .filter_map(|t| Some((store.get(t, i)?.dx, store.get(t, j)?.dx)))
                .collect();
            if pairs.len() < 2 {
                flagged.insert(i);
                flagged.insert(j);
                continue;
            }
            let m = pairs.len() as f64;
            let ma = pairs.iter().map(|p| p.0).sum::<f64>() / m;
            let mb = pairs.iter().map(|p| p.1).sum::<f64>() / m;
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for &(a, b) in &pairs {
                sab += (a - ma) * (b - mb);
                saa += (a - ma) * (a - ma);
                sbb += (b - mb) * (b - mb);
            }
            if saa == 0.0 {
                flagged.insert(i);
            }
            if sbb == 0.0 {
                flagged.insert(j);
            }
            let r = if saa > 0.0 && sbb > 0.0 {
                (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            c[i * n + j] = r;
            c[j * n + i] = r;
        }
    }
    CorrelationMatrix {
        n,
        c,
        flagged: flagged.into_iter().collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelatedGroup {
    /// Sorted tile indices.
    pub tiles: Vec<usize>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GroupError {
    #[error("need at least 3 tiles, have {0}")]
    TooFewTiles(usize),
    #[error("no group of 3 correlated tiles at any threshold")]
    NotFound,
}

/// Thresholds tried in order, rounded so that e.g. 0.5 is exact.
pub fn threshold_ladder(config: &StabilizerConfig) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let theta = ((config.ladder_start - k as f64 * config.ladder_step) * 1e9).round() / 1e9;
        if theta < config.ladder_floor - 1e-12 || config.ladder_step <= 0.0 && k > 0 {
            break;
        }
        out.push(theta);
        k += 1;
    }
    out
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn components(c: &CorrelationMatrix, theta: f64) -> Vec<Vec<usize>> {
    let n = c.n;
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if c.get(i, j) >= theta {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups.into_values().collect()
}

fn mean_internal(c: &CorrelationMatrix, g: &[usize]) -> f64 {
    let mut s = 0.0;
    let mut k = 0;
    for (a, &i) in g.iter().enumerate() {
        for &j in &g[a + 1..] {
            s += c.get(i, j);
            k += 1;
        }
    }
    if k == 0 {
        0.0
    } else {
        s / k as f64
    }
}

/// Descend the threshold ladder until some connected component of the graph
/// `c >= theta` has at least three tiles, and return the largest one.
pub fn find_correlated_group(c: &CorrelationMatrix, config: &StabilizerConfig) -> Result<CorrelatedGroup, GroupError> {
    if c.n < 3 {
        return Err(GroupError::TooFewTiles(c.n));
    }
    for theta in threshold_ladder(config) {
        let comps = components(c, theta);
        let best = comps.into_iter().filter(|g| g.len() >= 3).max_by(|a, b| {
            a.len()
                .cmp(&b.len())
                .then(mean_internal(c, a).total_cmp(&mean_internal(c, b)))
                // members are sorted, so a smaller first index wins the final tie
                .then(b[0].cmp(&a[0]))
        });
        if let Some(tiles) = best {
            return Ok(CorrelatedGroup { tiles, threshold: theta });
        }
    }
    Err(GroupError::NotFound)
}

/// Per-timestep averaged drift; `d[0]` is always zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDrift {
    pub d: Vec<Translation>,
    /// Timesteps where no contributing tile had a valid estimate.
    pub empty_steps: Vec<usize>,
}

impl FrameDrift {
    pub fn cumulative(&self) -> Vec<Translation> {
        let mut s = Translation::ZERO;
        self.d
            .iter()
            .enumerate()
            .map(|(t, d)| {
                if t > 0 {
                    s += *d;
                }
                s
            })
            .collect()
    }
}

/// Mean of the valid estimates of `tiles` at each timestep.
pub fn average_drift(store: &TileDriftStore, tiles: &[usize]) -> FrameDrift {
    let mut d = vec![Translation::ZERO; store.n_timesteps()];
    let mut empty_steps = Vec::new();
    for (t, slot) in d.iter_mut().enumerate().skip(1) {
        let valid: Vec<Translation> = tiles.iter().filter_map(|&i| store.get(t, i)).collect();
        if valid.is_empty() {
            empty_steps.push(t);
            continue;
        }
        *slot = valid.iter().fold(Translation::ZERO, |a, v| a + *v).scale(1.0 / valid.len() as f64);
    }
    FrameDrift { d, empty_steps }
}

pub fn average_group_drift(store: &TileDriftStore, group: &CorrelatedGroup) -> FrameDrift {
    average_drift(store, &group.tiles)
}
