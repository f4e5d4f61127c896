//! The micro-adapter.
//!
//! An adapted `d × k` weight `W` gets the update
//!
//! ```text
//! ΔW = U Σ R Vᵀ,    R = Σᵢ vᵢ Pᵢ
//! ```
//!
//! where `(U, Σ, V)` is an `r`-column window of the SVD of `W`, each `Pᵢ` is a
//! frozen `r × r` random matrix, and `v ∈ ℝᵘ` is the only trainable object.
//! Modules are tiled into tying groups that share one `v` (and one set of
//! projections), so a round trains `groups × proj_dim` scalars in total.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{dot, norm2, truncate, Matrix, SvdFactors, DEFAULT_EPS_RANK};

/// Which singular directions a round's adapter lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// Top-`r` singular vectors every round.
    Top,
    /// Round `t` takes singular vectors `r(t-1)+1 ..= rt`.
    Rotate,
}

impl std::fmt::Display for Basis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Basis::Top => "top",
            Basis::Rotate => "rotate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub proj_dim: usize,
    pub groups: usize,
    pub basis: Basis,
    pub seed: u64,
    /// Epsilon of the ε-rank diagnostic.
    pub epsilon_rank_eps: f64,
    /// Recompute the top-basis SVD from the current merged weights every
    /// round instead of reusing the SVD of the initial weights.
    pub recompute_top: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            proj_dim: 3,
            groups: 4,
            basis: Basis::Rotate,
            seed: 0,
            epsilon_rank_eps: DEFAULT_EPS_RANK,
            recompute_top: false,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.proj_dim == 0 || self.groups == 0 {
            return Err(Error::Config(format!(
                "rank ({}), proj_dim ({}) and groups ({}) must all be at least 1",
                self.rank, self.proj_dim, self.groups
            )));
        }
        if !(self.epsilon_rank_eps > 0.0 && self.epsilon_rank_eps < 1.0) {
            return Err(Error::Config(format!(
                "epsilon_rank_eps {} must lie in (0, 1)",
                self.epsilon_rank_eps
            )));
        }
        Ok(())
    }

    /// Trainable scalars per round.
    pub fn num_params(&self) -> usize {
        self.groups * self.proj_dim
    }
}

/// Frozen `r × r` projections of one tying group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    mats: Vec<Matrix>,
}

impl ProjectionSet {
    pub fn new(mats: Vec<Matrix>) -> Result<Self> {
        let r = mats.first().map_or(0, Matrix::rows);
        if mats.is_empty() || mats.iter().any(|m| m.shape() != (r, r)) {
            return Err(Error::InvalidInput(
                "projection set needs at least one matrix, all square of equal size".into(),
            ));
        }
        Ok(Self { mats })
    }

    pub fn mats(&self) -> &[Matrix] {
        &self.mats
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.mats[0].rows()
    }
}

/// Draws the projections of `group`.
///
/// Entries are i.i.d. `N(0, 1/r)`. Matrix `i` of group `g` comes from its own
/// ChaCha stream keyed by `(seed, g, i)`, so adding groups or growing
/// `proj_dim` leaves existing matrices untouched.
pub fn make_projections(cfg: &AdapterConfig, group: usize) -> ProjectionSet {
    let r = cfg.rank;
    let scale = (1.0 / r as f64).sqrt();
    let mats = (0..cfg.proj_dim)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(((group as u64) << 32) | i as u64);
            Matrix::from_fn(r, r, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
        })
        .collect();
    ProjectionSet { mats }
}

/// Module → tying-group map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TyingAssignment {
    groups: Vec<usize>,
    num_groups: usize,
}

impl TyingAssignment {
    pub fn group_of(&self, module: usize) -> usize {
        self.groups[module]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn num_modules(&self) -> usize {
        self.groups.len()
    }

    pub fn members(&self, group: usize) -> impl Iterator<Item = usize> + '_ {
        self.groups
            .iter()
            .enumerate()
            .filter(move |(_, &g)| g == group)
            .map(|(m, _)| m)
    }
}

/// Tiled assignment: module `m` joins group `m mod g`.
pub fn tie_modules(num_modules: usize, g: usize) -> Result<TyingAssignment> {
    if g == 0 || g > num_modules {
        return Err(Error::Config(format!(
            "cannot tile {num_modules} modules into {g} nonempty groups"
        )));
    }
    Ok(TyingAssignment {
        groups: (0..num_modules).map(|m| m % g).collect(),
        num_groups: g,
    })
}

/// `R = Σᵢ vᵢ Pᵢ`.
pub fn build_r(v: &[f64], p: &ProjectionSet) -> Result<Matrix> {
    if v.len() != p.len() {
        return Err(shape_err("build_r", p.len(), v.len()));
    }
    let r = p.rank();
    let mut out = Matrix::zeros(r, r);
    for (vi, pi) in v.iter().zip(&p.mats) {
        for (o, x) in out.data_mut().iter_mut().zip(pi.data()) {
            *o += vi * x;
        }
    }
    Ok(out)
}

/// `ΔW = U · diag(σ) · R · Vᵀ`.
pub fn delta_w(window: &SvdFactors, r: &Matrix) -> Result<Matrix> {
    let w = window.width();
    if r.shape() != (w, w) {
        return Err(shape_err(
            "delta_w",
            format!("{w}x{w}"),
            format!("{}x{}", r.rows(), r.cols()),
        ));
    }
    let us = Matrix::from_fn(window.u.rows(), w, |i, j| window.u.get(i, j) * window.sigma[j]);
    us.matmul(r)?.matmul(&window.v.transpose())
}

/// Picks the SVD window for round `round` (1-based).
pub fn select_window(f: &SvdFactors, basis: Basis, r: usize, round: usize) -> Result<SvdFactors> {
    let p = f.width();
    match basis {
        Basis::Top => truncate(f, 0, r),
        Basis::Rotate => {
            let round = round.max(1);
            if r * round > p {
                return Err(Error::CapacityExhausted {
                    round,
                    needed: r * round,
                    available: p,
                });
            }
            truncate(f, r * (round - 1), r)
        }
    }
}

/// `W + ΔW`.
pub fn merge(w: &Matrix, delta: &Matrix) -> Result<Matrix> {
    w.add(delta)
}

/// `φᵢ = readoutᵀ · U · diag(σ) · Pᵢ · Vᵀ · h`.
///
/// `⟨v, φ⟩` is exactly `readoutᵀ · ΔW(v) · h`.
pub fn feature_map(
    window: &SvdFactors,
    p: &ProjectionSet,
    h: &[f64],
    readout: &[f64],
) -> Result<Vec<f64>> {
    let (left, right) = sandwich(window, p, h, readout)?;
    Ok(project(p, &left, &right))
}

/// `∂L/∂vᵢ` for one module given per-example upstream gradients (rows of
/// `upstream`, `n × d`) and module inputs (rows of `inputs`, `n × k`),
/// summed over the rows.
pub fn grad_v(
    upstream: &Matrix,
    window: &SvdFactors,
    p: &ProjectionSet,
    inputs: &Matrix,
) -> Result<Vec<f64>> {
    if upstream.rows() != inputs.rows() {
        return Err(shape_err("grad_v", upstream.rows(), inputs.rows()));
    }
    let mut g = vec![0.0; p.len()];
    for row in 0..upstream.rows() {
        let phi = feature_map(window, p, inputs.row(row), upstream.row(row))?;
        for (gi, x) in g.iter_mut().zip(phi) {
            *gi += x;
        }
    }
    Ok(g)
}

/// `(diag(σ) Uᵀ readout, Vᵀ h)`.
fn sandwich(
    window: &SvdFactors,
    p: &ProjectionSet,
    h: &[f64],
    readout: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if p.rank() != window.width() {
        return Err(shape_err("feature_map", window.width(), p.rank()));
    }
    let mut left = window.u.tr_matvec(readout)?;
    for (l, s) in left.iter_mut().zip(&window.sigma) {
        *l *= s;
    }
    let right = window.v.tr_matvec(h)?;
    Ok((left, right))
}

fn project(p: &ProjectionSet, left: &[f64], right: &[f64]) -> Vec<f64> {
    p.mats
        .iter()
        .map(|pi| {
            let pr = pi.matvec(right).expect("square projection");
            dot(left, &pr)
        })
        .collect()
}

/// One tying group: the trainable vector and its frozen projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupParams {
    pub v: Vec<f64>,
    pub projections: ProjectionSet,
}

/// Per-module frozen window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleAdapter {
    pub group: usize,
    pub window: SvdFactors,
}

/// A live adapter over every adapted module of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    groups: Vec<GroupParams>,
    modules: Vec<ModuleAdapter>,
    r_cache: Vec<Matrix>,
}

impl AdapterState {
    /// Fresh adapter with `v = 0` in every group.
    pub fn new(cfg: &AdapterConfig, windows: Vec<SvdFactors>) -> Result<Self> {
        cfg.validate()?;
        let tying = tie_modules(windows.len(), cfg.groups)?;
        let projections = (0..cfg.groups).map(|g| make_projections(cfg, g)).collect();
        Self::from_parts(projections, windows, &tying)
    }

    pub fn from_parts(
        projections: Vec<ProjectionSet>,
        windows: Vec<SvdFactors>,
        tying: &TyingAssignment,
    ) -> Result<Self> {
        if tying.num_modules() != windows.len() || tying.num_groups() != projections.len() {
            return Err(shape_err(
                "AdapterState",
                format!("{} modules, {} groups", tying.num_modules(), tying.num_groups()),
                format!("{} windows, {} projection sets", windows.len(), projections.len()),
            ));
        }
        for w in &windows {
            if projections.iter().any(|p| p.rank() != w.width()) {
                return Err(shape_err("AdapterState", w.width(), projections[0].rank()));
            }
        }
        let groups: Vec<GroupParams> = projections
            .into_iter()
            .map(|p| GroupParams {
                v: vec![0.0; p.len()],
                projections: p,
            })
            .collect();
        let modules = windows
            .into_iter()
            .enumerate()
            .map(|(m, window)| ModuleAdapter {
                group: tying.group_of(m),
                window,
            })
            .collect();
        let r_cache = groups
            .iter()
            .map(|g| Matrix::zeros(g.projections.rank(), g.projections.rank()))
            .collect();
        Ok(Self {
            groups,
            modules,
            r_cache,
        })
    }

    pub fn groups(&self) -> &[GroupParams] {
        &self.groups
    }

    pub fn modules(&self) -> &[ModuleAdapter] {
        &self.modules
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_modules(&self) -> usize {
        self.modules.len()
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().map(|g| g.v.len()).sum()
    }

    pub fn set_group_v(&mut self, group: usize, v: &[f64]) -> Result<()> {
        let g = &mut self.groups[group];
        if v.len() != g.v.len() {
            return Err(shape_err("set_group_v", g.v.len(), v.len()));
        }
        g.v.copy_from_slice(v);
        self.r_cache[group] = build_r(&g.v, &g.projections)?;
        Ok(())
    }

    /// All group vectors concatenated in group order.
    pub fn v_flat(&self) -> Vec<f64> {
        self.groups.iter().flat_map(|g| g.v.iter().copied()).collect()
    }

    pub fn set_v_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.num_params() {
            return Err(shape_err("set_v_flat", self.num_params(), v.len()));
        }
        let mut at = 0;
        for g in 0..self.groups.len() {
            let n = self.groups[g].v.len();
            self.set_group_v(g, &v[at..at + n])?;
            at += n;
        }
        Ok(())
    }

    /// `‖v‖₂` over all groups.
    pub fn v_norm(&self) -> f64 {
        norm2(&self.v_flat())
    }

    pub fn r_matrix(&self, group: usize) -> &Matrix {
        &self.r_cache[group]
    }

    /// Materialized `ΔW` of `module`.
    pub fn delta(&self, module: usize) -> Result<Matrix> {
        let m = &self.modules[module];
        delta_w(&m.window, &self.r_cache[m.group])
    }

    /// `ΔW · x` without materializing `ΔW`.
    pub fn apply(&self, module: usize, x: &[f64]) -> Result<Vec<f64>> {
        let m = &self.modules[module];
        let mut z = m.window.v.tr_matvec(x)?;
        z = self.r_cache[m.group].matvec(&z)?;
        for (zi, s) in z.iter_mut().zip(&m.window.sigma) {
            *zi *= s;
        }
        m.window.u.matvec(&z)
    }

    /// `ΔWᵀ · y` without materializing `ΔW`.
    pub fn apply_transpose(&self, module: usize, y: &[f64]) -> Result<Vec<f64>> {
        let m = &self.modules[module];
        let mut z = m.window.u.tr_matvec(y)?;
        for (zi, s) in z.iter_mut().zip(&m.window.sigma) {
            *zi *= s;
        }
        z = self.r_cache[m.group].tr_matvec(&z)?;
        m.window.v.matvec(&z)
    }

    /// Per-module feature map `φ` (length `proj_dim`).
    pub fn module_feature(&self, module: usize, h: &[f64], readout: &[f64]) -> Result<Vec<f64>> {
        let m = &self.modules[module];
        feature_map(&m.window, &self.groups[m.group].projections, h, readout)
    }
}
