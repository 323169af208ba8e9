//! System description, split parameters and the spatio-temporal
//! decomposition.
//!
//! A system lives on a state box `X` over a horizon `[0, T]` with inputs
//! confined to a semialgebraic set `U` and a target set described by
//! polynomial inequalities. A [`SplitConfig`] carries the positions of
//! interior time splits and of per-axis state splits; those positions are
//! the parameter vector the optimizer moves. [`build_decomposition`]
//! expands them into the cell grid with deterministic indexing and the
//! neighbor/normal bookkeeping the compiler consumes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::Polynomial;

/// Polynomial control system with its constraint sets.
///
/// Variable order everywhere is `(t, x_1..x_n, u_1..u_m)`; `f` components
/// live in the full tuple, target and input inequalities in the tuples
/// noted on the fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    /// State dimension.
    pub n: usize,
    /// Input dimension.
    pub m: usize,
    /// Dynamics, one polynomial in `(t, x, u)` per state.
    pub f: Vec<Polynomial>,
    /// State box, one `(lo, hi)` interval per axis.
    pub x_box: Vec<(f64, f64)>,
    /// Input set inequalities `g(u) >= 0`, polynomials in `(u_1..u_m)`.
    pub u_set: Vec<Polynomial>,
    /// Bounding box of the input set, used for sampling.
    pub u_box: Vec<(f64, f64)>,
    /// Target set inequalities `g(x) >= 0`, polynomials in `(x_1..x_n)`.
    pub xt_set: Vec<Polynomial>,
    /// Final time.
    pub t_final: f64,
}

impl SystemSpec {
    pub fn nvars_full(&self) -> usize {
        1 + self.n + self.m
    }

    pub fn validate(&self) -> Result<()> {
        if self.f.len() != self.n {
            return Err(Error::InvalidConfig(format!(
                "dynamics has {} components for {} states",
                self.f.len(),
                self.n
            )));
        }
        for (j, fj) in self.f.iter().enumerate() {
            if fj.nvars() != self.nvars_full() {
                return Err(Error::InvalidConfig(format!(
                    "dynamics component {j} has {} variables, expected {}",
                    fj.nvars(),
                    self.nvars_full()
                )));
            }
        }
        if self.x_box.len() != self.n || self.u_box.len() != self.m {
            return Err(Error::InvalidConfig("box dimension mismatch".into()));
        }
        for &(lo, hi) in self.x_box.iter().chain(&self.u_box) {
            if !(lo < hi) {
                return Err(Error::InvalidConfig(format!(
                    "empty or reversed interval [{lo}, {hi}]"
                )));
            }
        }
        if !(self.t_final > 0.0) {
            return Err(Error::InvalidConfig("final time must be positive".into()));
        }
        for g in &self.u_set {
            if g.nvars() != self.m {
                return Err(Error::InvalidConfig(
                    "input inequality must be a polynomial in the inputs".into(),
                ));
            }
        }
        for g in &self.xt_set {
            if g.nvars() != self.n {
                return Err(Error::InvalidConfig(
                    "target inequality must be a polynomial in the states".into(),
                ));
            }
        }
        Ok(())
    }

    /// Double integrator: `x1' = x2`, `x2' = u` on
    /// `X = [-0.7, 0.7] x [-1.2, 1.2]`, `U = [-1, 1]`, target `{0}`, `T = 1`.
    pub fn double_integrator() -> SystemSpec {
        let f = vec![Polynomial::var(4, 2), Polynomial::var(4, 3)];
        // 1 - u^2 >= 0
        let u_set = vec![Polynomial::from_terms(
            1,
            [(vec![0], 1.0), (vec![2], -1.0)],
        )];
        // target {0} as -(x1^2 + x2^2) >= 0
        let xt_set = vec![Polynomial::from_terms(
            2,
            [(vec![2, 0], -1.0), (vec![0, 2], -1.0)],
        )];
        SystemSpec {
            n: 2,
            m: 1,
            f,
            x_box: vec![(-0.7, 0.7), (-1.2, 1.2)],
            u_set,
            u_box: vec![(-1.0, 1.0)],
            xt_set,
            t_final: 1.0,
        }
    }

    /// Brockett integrator: `x1' = u1`, `x2' = u2`, `x3' = u1 x2 - u2 x1`
    /// on the unit box with `U` the unit disc, target `{0}`, `T = 1`.
    pub fn brockett() -> SystemSpec {
        let nv = 1 + 3 + 2;
        let f = vec![
            Polynomial::var(nv, 4),
            Polynomial::var(nv, 5),
            Polynomial::from_terms(
                nv,
                [
                    (vec![0, 0, 1, 0, 1, 0], 1.0),  // u1 x2
                    (vec![0, 1, 0, 0, 0, 1], -1.0), // -u2 x1
                ],
            ),
        ];
        let u_set = vec![Polynomial::from_terms(
            2,
            [(vec![0, 0], 1.0), (vec![2, 0], -1.0), (vec![0, 2], -1.0)],
        )];
        let xt_set = vec![Polynomial::from_terms(
            3,
            [
                (vec![2, 0, 0], -1.0),
                (vec![0, 2, 0], -1.0),
                (vec![0, 0, 2], -1.0),
            ],
        )];
        SystemSpec {
            n: 3,
            m: 2,
            f,
            x_box: vec![(-1.0, 1.0); 3],
            u_set,
            u_box: vec![(-1.0, 1.0); 2],
            xt_set,
            t_final: 1.0,
        }
    }
}

/// Positions of the interior splits: the parameter vector of the whole
/// optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Interior time splits, sorted ascending, strictly inside `(0, T)`.
    pub time_splits: Vec<f64>,
    /// Per state axis, sorted split coordinates strictly inside the axis
    /// interval.
    pub axis_splits: Vec<Vec<f64>>,
}

impl SplitConfig {
    pub fn none(n: usize) -> SplitConfig {
        SplitConfig {
            time_splits: Vec::new(),
            axis_splits: vec![Vec::new(); n],
        }
    }

    /// Equidistant interior positions: `count` splits per entry.
    pub fn equidistant(sys: &SystemSpec, time_count: usize, axis_counts: &[usize]) -> SplitConfig {
        assert_eq!(axis_counts.len(), sys.n);
        let place = |lo: f64, hi: f64, count: usize| -> Vec<f64> {
            (1..=count)
                .map(|j| lo + (hi - lo) * j as f64 / (count + 1) as f64)
                .collect()
        };
        SplitConfig {
            time_splits: place(0.0, sys.t_final, time_count),
            axis_splits: sys
                .x_box
                .iter()
                .zip(axis_counts)
                .map(|(&(lo, hi), &c)| place(lo, hi, c))
                .collect(),
        }
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.time_splits.len() + self.axis_splits.iter().map(Vec::len).sum::<usize>()
    }

    /// Split counts, the structural signature that stays fixed during
    /// optimization.
    pub fn counts(&self) -> (usize, Vec<usize>) {
        (
            self.time_splits.len(),
            self.axis_splits.iter().map(Vec::len).collect(),
        )
    }

    /// Flattens to the parameter vector: time splits first, then each
    /// axis in order, each block sorted ascending.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.time_splits.clone();
        for axis in &self.axis_splits {
            v.extend_from_slice(axis);
        }
        v
    }

    /// Rebuilds a config with the same split counts from a flat vector;
    /// each block is re-sorted, so out-of-order entries are legal input.
    pub fn unflatten(&self, theta: &[f64]) -> SplitConfig {
        assert_eq!(theta.len(), self.num_params(), "parameter count mismatch");
        let mut out = self.clone();
        let mut pos = 0;
        let nt = out.time_splits.len();
        out.time_splits = theta[pos..pos + nt].to_vec();
        out.time_splits.sort_by(f64::total_cmp);
        pos += nt;
        for axis in &mut out.axis_splits {
            let na = axis.len();
            *axis = theta[pos..pos + na].to_vec();
            axis.sort_by(f64::total_cmp);
            pos += na;
        }
        out
    }

    pub fn validate(&self, sys: &SystemSpec) -> Result<()> {
        if self.axis_splits.len() != sys.n {
            return Err(Error::InvalidConfig(format!(
                "{} axis split lists for {} states",
                self.axis_splits.len(),
                sys.n
            )));
        }
        for (k, &s) in self.time_splits.iter().enumerate() {
            if !(s > 0.0 && s < sys.t_final) {
                return Err(Error::SplitOutOfBounds {
                    axis: usize::MAX,
                    pos: s,
                    lo: 0.0,
                    hi: sys.t_final,
                });
            }
            if k > 0 && self.time_splits[k - 1] > s {
                return Err(Error::InvalidConfig("time splits not sorted".into()));
            }
        }
        for (axis, splits) in self.axis_splits.iter().enumerate() {
            let (lo, hi) = sys.x_box[axis];
            for (k, &s) in splits.iter().enumerate() {
                if !(s > lo && s < hi) {
                    return Err(Error::SplitOutOfBounds {
                        axis,
                        pos: s,
                        lo,
                        hi,
                    });
                }
                if k > 0 && splits[k - 1] > s {
                    return Err(Error::InvalidConfig(format!(
                        "axis {axis} splits not sorted"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One shared face between two adjacent cells.
///
/// The normal is the standard basis vector along `axis`, oriented so that
/// cell `b` lies on its positive side. `face` is the box of the shared
/// boundary: zero width on `axis`, the common extent elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborFace {
    pub a: usize,
    pub b: usize,
    pub axis: usize,
    pub face: Vec<(f64, f64)>,
}

/// The expanded cell grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// Cells in row-major order over the axes (last axis fastest).
    pub boxes: Vec<Vec<(f64, f64)>>,
    /// Time intervals `[T_k, T_{k+1}]` in order.
    pub intervals: Vec<(f64, f64)>,
    /// All codimension-1 neighbor pairs.
    pub neighbors: Vec<NeighborFace>,
    /// Cells per axis.
    pub cells_per_axis: Vec<usize>,
}

impl Decomposition {
    pub fn num_boxes(&self) -> usize {
        self.boxes.len()
    }

    pub fn num_intervals(&self) -> usize {
        self.intervals.len()
    }

    pub fn box_volume(&self, i: usize) -> f64 {
        self.boxes[i].iter().map(|(lo, hi)| hi - lo).product()
    }

    /// Indices of all boxes containing `x` (more than one on shared
    /// boundaries).
    pub fn boxes_containing(&self, x: &[f64]) -> Vec<usize> {
        (0..self.boxes.len())
            .filter(|&i| {
                self.boxes[i]
                    .iter()
                    .zip(x)
                    .all(|(&(lo, hi), &xi)| xi >= lo && xi <= hi)
            })
            .collect()
    }

    /// Indices of all intervals containing `t`.
    pub fn intervals_containing(&self, t: f64) -> Vec<usize> {
        (0..self.intervals.len())
            .filter(|&k| {
                let (lo, hi) = self.intervals[k];
                t >= lo && t <= hi
            })
            .collect()
    }
}

/// Expands split positions into the cell grid.
///
/// Box indexing is row-major over the axes and the neighbor list is
/// ordered by axis, then by grid position, so equal inputs always produce
/// identical layouts. Coincident splits are allowed and produce
/// zero-width cells.
pub fn build_decomposition(sys: &SystemSpec, splits: &SplitConfig) -> Result<Decomposition> {
    splits.validate(sys)?;

    // per-axis breakpoints: lo, splits..., hi
    let mut axis_points: Vec<Vec<f64>> = Vec::with_capacity(sys.n);
    for (axis, list) in splits.axis_splits.iter().enumerate() {
        let (lo, hi) = sys.x_box[axis];
        let mut pts = Vec::with_capacity(list.len() + 2);
        pts.push(lo);
        pts.extend_from_slice(list);
        pts.push(hi);
        axis_points.push(pts);
    }
    let cells_per_axis: Vec<usize> = axis_points.iter().map(|p| p.len() - 1).collect();
    let total: usize = cells_per_axis.iter().product();

    // row-major strides, last axis fastest
    let mut strides = vec![1usize; sys.n];
    for axis in (0..sys.n.saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * cells_per_axis[axis + 1];
    }

    let mut boxes = Vec::with_capacity(total);
    let mut idx = vec![0usize; sys.n];
    for flat in 0..total {
        let mut rem = flat;
        for axis in 0..sys.n {
            idx[axis] = rem / strides[axis];
            rem %= strides[axis];
        }
        let cell: Vec<(f64, f64)> = (0..sys.n)
            .map(|axis| {
                (
                    axis_points[axis][idx[axis]],
                    axis_points[axis][idx[axis] + 1],
                )
            })
            .collect();
        boxes.push(cell);
    }

    let mut neighbors = Vec::new();
    for axis in 0..sys.n {
        for flat in 0..total {
            let mut rem = flat;
            for a in 0..sys.n {
                idx[a] = rem / strides[a];
                rem %= strides[a];
            }
            if idx[axis] + 1 >= cells_per_axis[axis] {
                continue;
            }
            let a = flat;
            let b = flat + strides[axis];
            let coord = axis_points[axis][idx[axis] + 1];
            let face: Vec<(f64, f64)> = (0..sys.n)
                .map(|ax| {
                    if ax == axis {
                        (coord, coord)
                    } else {
                        boxes[a][ax]
                    }
                })
                .collect();
            neighbors.push(NeighborFace { a, b, axis, face });
        }
    }

    let mut time_points = Vec::with_capacity(splits.time_splits.len() + 2);
    time_points.push(0.0);
    time_points.extend_from_slice(&splits.time_splits);
    time_points.push(sys.t_final);
    let intervals = time_points.windows(2).map(|w| (w[0], w[1])).collect();

    Ok(Decomposition {
        boxes,
        intervals,
        neighbors,
        cells_per_axis,
    })
}

/// Flow margin of one face over one time interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaceFlowReport {
    pub neighbor_index: usize,
    pub interval: usize,
    /// Smallest `|h . f|` seen over the samples.
    pub min_abs_flow: f64,
    /// Largest `|h . f|` seen over the samples.
    pub max_abs_flow: f64,
    /// Set when the minimum is indistinguishable from zero: a hazard for
    /// strong duality and for differentiability of the split problem.
    pub flagged: bool,
}

/// Advisory diagnostics for the simple-flow and bound-description
/// assumptions the duality argument rests on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub faces: Vec<FaceFlowReport>,
    /// Whether every cell description carries per-axis quadratic bound
    /// constraints (always true for the box compiler; reported so
    /// downstream checks do not need to know compiler internals).
    pub boxes_have_axis_bounds: bool,
    pub nsamples: usize,
    pub seed: u64,
}

impl AssumptionReport {
    pub fn any_flagged(&self) -> bool {
        self.faces.iter().any(|f| f.flagged)
    }
}

/// Samples each face x input set x time interval and reports the observed
/// range of the normal flow `h . f`.
///
/// A vanishing minimum means the flow is tangential somewhere on a split
/// boundary; the report is advisory and nothing downstream refuses to
/// run, but gradients near such configurations are suspect.
pub fn check_assumptions(
    sys: &SystemSpec,
    dec: &Decomposition,
    nsamples: usize,
    seed: u64,
) -> AssumptionReport {
    assert!(nsamples >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut faces = Vec::new();
    for (ni, nb) in dec.neighbors.iter().enumerate() {
        // h = e_axis, so h.f is just the axis component of the dynamics
        let flow = &sys.f[nb.axis];
        for (ki, &(t_lo, t_hi)) in dec.intervals.iter().enumerate() {
            let mut min_abs = f64::INFINITY;
            let mut max_abs: f64 = 0.0;
            let mut probe = |t: f64, x: &[f64], u: &[f64]| {
                let mut z = Vec::with_capacity(sys.nvars_full());
                z.push(t);
                z.extend_from_slice(x);
                z.extend_from_slice(u);
                let v = flow.eval(&z).abs();
                min_abs = min_abs.min(v);
                max_abs = max_abs.max(v);
            };
            // deterministic probes: face center with input-box center and corners
            let x_mid: Vec<f64> = nb.face.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
            let u_mid: Vec<f64> = sys.u_box.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
            let t_mid = 0.5 * (t_lo + t_hi);
            if point_in_set(&sys.u_set, &u_mid) {
                probe(t_mid, &x_mid, &u_mid);
            }
            for corner in 0..(1usize << sys.m) {
                let u: Vec<f64> = (0..sys.m)
                    .map(|j| {
                        if corner >> j & 1 == 1 {
                            sys.u_box[j].1
                        } else {
                            sys.u_box[j].0
                        }
                    })
                    .collect();
                if point_in_set(&sys.u_set, &u) {
                    probe(t_mid, &x_mid, &u);
                }
            }
            // random probes
            let mut drawn = 0;
            let mut attempts = 0;
            while drawn < nsamples && attempts < 100 * nsamples {
                attempts += 1;
                let t = rng.random_range(t_lo..=t_hi);
                let x: Vec<f64> = nb
                    .face
                    .iter()
                    .map(|&(lo, hi)| {
                        if lo == hi {
                            lo
                        } else {
                            rng.random_range(lo..=hi)
                        }
                    })
                    .collect();
                let u: Vec<f64> = sys
                    .u_box
                    .iter()
                    .map(|&(lo, hi)| rng.random_range(lo..=hi))
                    .collect();
                if !point_in_set(&sys.u_set, &u) {
                    continue;
                }
                drawn += 1;
                probe(t, &x, &u);
            }
            let flagged = min_abs <= 1e-6 * (1.0 + max_abs);
            faces.push(FaceFlowReport {
                neighbor_index: ni,
                interval: ki,
                min_abs_flow: min_abs,
                max_abs_flow: max_abs,
                flagged,
            });
        }
    }
    AssumptionReport {
        faces,
        boxes_have_axis_bounds: true,
        nsamples,
        seed,
    }
}

pub(crate) fn point_in_set(ineqs: &[Polynomial], point: &[f64]) -> bool {
    ineqs.iter().all(|g| g.eval(point) >= 0.0)
}
