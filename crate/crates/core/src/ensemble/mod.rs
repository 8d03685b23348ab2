//! Weighted averaging of per-sample gaze predictions and grid search over
//! the blending weights.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::{angles_to_vector, angular_error_deg, vector_to_angles, GazeLabel, GazeVector};

/// Ordered `(id, prediction)` pairs with unique IDs.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub source: String,
    pub entries: Vec<(String, GazeLabel)>,
}

impl PredictionSet {
    pub fn new(source: impl Into<String>, entries: Vec<(String, GazeLabel)>) -> Result<Self> {
        let source = source.into();
        let mut seen = BTreeSet::new();
        for (id, _) in &entries {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("{source}: duplicate id {id:?}")));
            }
        }
        Ok(PredictionSet { source, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|(id, _)| id.as_str()).collect()
    }

    fn lookup(&self) -> HashMap<&str, GazeLabel> {
        self.entries.iter().map(|(id, g)| (id.as_str(), *g)).collect()
    }

    /// Reads `id,pitch,yaw` columns by header name; other columns (as in a
    /// dataset manifest) are ignored.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let src = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{src}: {other:?}")),
        })?;
        let header = rdr.headers().map_err(|e| Error::Data(format!("{src}: {e}")))?.clone();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Data(format!("{src}: missing column {name:?}")))
        };
        let (ci, cp, cy) = (col("id")?, col("pitch")?, col("yaw")?);
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let at = |m: String| Error::Data(format!("{src} row {}: {m}", i + 1));
            let rec = rec.map_err(|e| at(e.to_string()))?;
            let num = |c: usize| -> Result<f64> {
                let v = rec.get(c).unwrap_or("").trim();
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| at(format!("{v:?} is not a finite number")))
            };
            let id = rec.get(ci).unwrap_or("").trim().to_string();
            if id.is_empty() {
                return Err(at("empty id".into()));
            }
            entries.push((id, GazeLabel::new(num(cp)?, num(cy)?)));
        }
        if entries.is_empty() {
            return Err(Error::Data(format!("{src}: no predictions")));
        }
        Self::new(src, entries)
    }

    /// `id,pitch,yaw` with shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,pitch,yaw\n");
        for (id, g) in &self.entries {
            s.push_str(&format!("{id},{},{}\n", g.pitch, g.yaw));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Space in which member predictions are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AverageMode {
    /// Componentwise on (pitch, yaw).
    #[default]
    Angles,
    /// On unit gaze vectors, converted back to angles.
    Vectors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub pred: PathBuf,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub members: Vec<MemberSpec>,
}

impl EnsembleSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid ensemble spec: {e}")))
    }

    /// Loads the spec and every member file; relative paths resolve against
    /// the spec's directory.
    pub fn load(path: &Path) -> Result<(Self, Vec<PredictionSet>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let sets = spec
            .members
            .iter()
            .map(|m| PredictionSet::read_csv(&base.join(&m.pred)))
            .collect::<Result<Vec<_>>>()?;
        Ok((spec, sets))
    }

    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.weight).collect()
    }
}

fn normalized(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::Config("an ensemble needs at least one member".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Config(format!("ensemble weights must be finite and ≥ 0, got {w}")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("all ensemble weights are zero".into()));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

fn blend(preds: &[GazeLabel], w: &[f64], mode: AverageMode) -> Result<GazeLabel> {
    match mode {
        AverageMode::Angles => {
            let (mut p, mut y) = (0.0, 0.0);
            for (g, wi) in preds.iter().zip(w) {
                p += wi * g.pitch;
                y += wi * g.yaw;
            }
            Ok(GazeLabel::new(p, y))
        }
        AverageMode::Vectors => {
            let mut v = GazeVector { x: 0.0, y: 0.0, z: 0.0 };
            for (g, wi) in preds.iter().zip(w) {
                let u = angles_to_vector(*g);
                v.x += wi * u.x;
                v.y += wi * u.y;
                v.z += wi * u.z;
            }
            vector_to_angles(v)
        }
    }
}

fn id_mismatch(a: &PredictionSet, b: &PredictionSet) -> Option<String> {
    let (ia, ib) = (a.ids(), b.ids());
    if ia == ib {
        return None;
    }
    let diff: Vec<&str> = ia.symmetric_difference(&ib).copied().collect();
    let shown = diff.iter().take(10).copied().collect::<Vec<_>>().join(", ");
    let more = if diff.len() > 10 { format!(" and {} more", diff.len() - 10) } else { String::new() };
    Some(format!(
        "id sets of {} and {} differ in {} ids: {shown}{more}",
        a.source,
        b.source,
        diff.len()
    ))
}

/// Member predictions re-ordered to `order`'s IDs.
fn aligned(members: &[&PredictionSet], order: &PredictionSet) -> Result<Vec<Vec<GazeLabel>>> {
    members
        .iter()
        .map(|m| {
            if let Some(msg) = id_mismatch(order, m) {
                return Err(Error::Data(msg));
            }
            let map = m.lookup();
            Ok(order.entries.iter().map(|(id, _)| map[id.as_str()]).collect())
        })
        .collect()
}

/// Weighted average of the members (weights normalized to sum 1), in the
/// first member's ID order.
pub fn combine(members: &[&PredictionSet], weights: &[f64], mode: AverageMode) -> Result<PredictionSet> {
    if members.len() != weights.len() {
        return Err(Error::Config(format!("{} members but {} weights", members.len(), weights.len())));
    }
    let w = normalized(weights)?;
    let cols = aligned(members, members[0])?;
    let mut buf = vec![GazeLabel::default(); members.len()];
    let entries = members[0]
        .entries
        .iter()
        .enumerate()
        .map(|(r, (id, _))| {
            for (b, col) in buf.iter_mut().zip(&cols) {
                *b = col[r];
            }
            Ok((id.clone(), blend(&buf, &w, mode)?))
        })
        .collect::<Result<Vec<_>>>()?;
    PredictionSet::new("ensemble", entries)
}

/// Mean angular error in degrees. The sum runs in sorted-ID order, so the
/// result does not depend on entry order.
pub fn score(pred: &PredictionSet, truth: &PredictionSet) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Data("cannot score against an empty truth set".into()));
    }
    if let Some(msg) = id_mismatch(pred, truth) {
        return Err(Error::Data(msg));
    }
    let (p, t) = (pred.lookup(), truth.lookup());
    let total: f64 = truth.ids().iter().map(|id| angular_error_deg(p[id], t[id])).sum();
    Ok(total / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub weights: Vec<f64>,
    pub score: f64,
    pub nodes: usize,
}

pub const MAX_SEARCH_MEMBERS: usize = 8;
pub const MAX_SEARCH_NODES: u128 = 10_000_000;

fn binomial(n: u128, k: u128) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of weight vectors with `m` entries in multiples of `1/steps`
/// summing to one.
pub fn grid_size(m: usize, steps: usize) -> u128 {
    binomial((steps + m - 1) as u128, (m - 1) as u128)
}

/// Compositions of `n` into `m` non-negative parts, lexicographically
/// ascending.
fn compositions(n: usize, m: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if m == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k);
            rec(left - k, m - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, m, &mut Vec::with_capacity(m), &mut out);
    out
}

/// Exhaustive search over the simplex grid with spacing `step`; returns the
/// weights with the lowest angle-space ensemble score on `truth`, the
/// lexicographically smallest on ties.
pub fn weight_search(members: &[&PredictionSet], truth: &PredictionSet, step: f64) -> Result<SearchResult> {
    let m = members.len();
    if !(1..=MAX_SEARCH_MEMBERS).contains(&m) {
        return Err(Error::Config(format!("weight search takes 1..={MAX_SEARCH_MEMBERS} members, got {m}")));
    }
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("grid step must be in (0, 1], got {step}")));
    }
    let steps = (1.0 / step).round() as usize;
    if ((steps as f64) * step - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("grid step {step} does not divide 1 evenly")));
    }
    let size = grid_size(m, steps);
    if size > MAX_SEARCH_NODES {
        return Err(Error::Config(format!(
            "weight grid has {size} nodes (limit {MAX_SEARCH_NODES}); use a coarser --step"
        )));
    }
    if truth.is_empty() {
        return Err(Error::Data("cannot search against an empty truth set".into()));
    }
    for mem in members {
        if let Some(msg) = id_mismatch(mem, truth) {
            return Err(Error::Data(msg));
        }
    }
    // rows in sorted-ID order, matching `score`
    let order: Vec<&str> = truth.ids().into_iter().collect();
    let truth_map = truth.lookup();
    let truth_rows: Vec<GazeLabel> = order.iter().map(|id| truth_map[id]).collect();
    let cols: Vec<Vec<GazeLabel>> = members
        .iter()
        .map(|mem| {
            let map = mem.lookup();
            order.iter().map(|id| map[id]).collect()
        })
        .collect();
    let nodes = compositions(steps, m);
    let scored: Vec<f64> = nodes
        .par_iter()
        .map(|k| {
            let w = normalized(&k.iter().map(|&x| x as f64).collect::<Vec<_>>())?;
            let mut buf = vec![GazeLabel::default(); m];
            let mut total = 0.0;
            for (r, t) in truth_rows.iter().enumerate() {
                for (b, col) in buf.iter_mut().zip(&cols) {
                    *b = col[r];
                }
                total += angular_error_deg(blend(&buf, &w, AverageMode::Angles)?, *t);
            }
            Ok(total / truth_rows.len() as f64)
        })
        .collect::<Result<_>>()?;
    let best = (0..nodes.len()).fold(0, |b, i| if scored[i] < scored[b] { i } else { b });
    Ok(SearchResult {
        weights: nodes[best].iter().map(|&k| k as f64 / steps as f64).collect(),
        score: scored[best],
        nodes: nodes.len(),
    })
}
