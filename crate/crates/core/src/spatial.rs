//! Spatial regularizers over the topographic layer and the joint objective.
//!
//! * [`ws_loss`] pulls the afferent weight vectors of grid neighbors together
//!   (mean Euclidean distance over ordered Moore pairs).
//! * [`as_loss_local`] pushes the batch activation profiles of grid neighbors
//!   toward perfect Pearson correlation (mean `1 - r` over ordered pairs).
//! * [`as_loss_global`] matches cosine similarity of every unit pair to the
//!   proximity target `1/(d+1)`.
//!
//! Each loss is recorded on the tape as a single fused node with an analytic
//! backward pass.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::TopoGrid;
use crate::tensor::{CustomOp, Tape, Tensor, Var};

/// A unit whose batch variance falls below this is treated as degenerate.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Which spatial regularizer a model is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Constraint {
    None,
    Ws,
    As,
    AsGlobal,
}

impl Constraint {
    pub fn tag(self) -> &'static str {
        match self {
            Constraint::None => "control",
            Constraint::Ws => "ws",
            Constraint::As => "as",
            Constraint::AsGlobal => "as_global",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "control" => Some(Constraint::None),
            "ws" => Some(Constraint::Ws),
            "as" => Some(Constraint::As),
            "as_global" | "as-global" => Some(Constraint::AsGlobal),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Constraint::None => 0,
            Constraint::Ws => 1,
            Constraint::As => 2,
            Constraint::AsGlobal => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [Constraint::None, Constraint::Ws, Constraint::As, Constraint::AsGlobal]
            .into_iter()
            .find(|k| k.code() == c)
    }
}

/// Per-batch record of the objective's components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub spatial: f64,
    pub lambda: f64,
    pub joint: f64,
}

fn check_units(op: &'static str, t: &Tensor, grid: &TopoGrid, axis: usize) -> Result<()> {
    if t.ndim() != 2 || t.shape()[axis] != grid.unit_count() {
        return Err(Error::shape(
            op,
            alloc::format!(
                "expected {} units along axis {axis}, got shape {:?}",
                grid.unit_count(),
                t.shape()
            ),
        ));
    }
    Ok(())
}

struct WsLoss {
    pairs: Vec<(usize, usize)>,
}

impl WsLoss {
    fn distance(w: &Tensor, i: usize, j: usize) -> f64 {
        let s: f64 = w.row(i).iter().zip(w.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
        libm::sqrt(s)
    }
}

impl CustomOp for WsLoss {
    fn name(&self) -> &'static str {
        "ws_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let w = inputs[0];
        let d = w.cols();
        let scale = grad_out[0] / self.pairs.len() as f64;
        let mut g = vec![0.0; w.len()];
        for &(i, j) in &self.pairs {
            let dist = Self::distance(w, i, j);
            if dist == 0.0 {
                continue;
            }
            let (wi, wj) = (w.row(i), w.row(j));
            for k in 0..d {
                let v = scale * (wi[k] - wj[k]) / dist;
                g[i * d + k] += v;
                g[j * d + k] -= v;
            }
        }
        vec![Some(g)]
    }
}

/// Mean Euclidean distance between the weight rows of every ordered Moore
/// neighbor pair. `weights` is `[units, fan_in]`.
pub fn ws_loss(tape: &mut Tape, weights: Var, grid: &TopoGrid) -> Result<Var> {
    let w = tape.value(weights);
    check_units("ws_loss", w, grid, 0)?;
    let pairs: Vec<(usize, usize)> = grid.ordered_pairs().collect();
    let total: f64 = pairs.iter().map(|&(i, j)| WsLoss::distance(w, i, j)).sum();
    let value = Tensor::scalar(total / pairs.len() as f64);
    Ok(tape.custom(&[weights], value, Box::new(WsLoss { pairs })))
}

/// Column-wise statistics of a `[batch, units]` activation matrix.
struct UnitProfiles {
    /// `units × batch`, each row divided by its norm (zeros when degenerate).
    unit: Vec<f64>,
    norm: Vec<f64>,
    degenerate: Vec<bool>,
    batch: usize,
}

impl UnitProfiles {
    fn new(acts: &Tensor, centered: bool) -> Self {
        let (b, n) = (acts.shape()[0], acts.shape()[1]);
        let data = acts.data();
        let mut unit = vec![0.0; n * b];
        let mut norm = vec![0.0; n];
        let mut degenerate = vec![false; n];
        for u in 0..n {
            let mean = if centered {
                (0..b).map(|s| data[s * n + u]).sum::<f64>() / b as f64
            } else {
                0.0
            };
            let row = &mut unit[u * b..(u + 1) * b];
            for (s, r) in row.iter_mut().enumerate() {
                *r = data[s * n + u] - mean;
            }
            let sq: f64 = row.iter().map(|v| v * v).sum();
            norm[u] = libm::sqrt(sq);
            degenerate[u] = if centered {
                sq / (b as f64) < DEGENERATE_VARIANCE
            } else {
                sq == 0.0
            };
            if degenerate[u] {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= norm[u]);
            }
        }
        Self {
            unit,
            norm,
            degenerate,
            batch: b,
        }
    }

    fn row(&self, u: usize) -> &[f64] {
        &self.unit[u * self.batch..(u + 1) * self.batch]
    }

    fn similarity(&self, i: usize, j: usize) -> f64 {
        if self.degenerate[i] || self.degenerate[j] {
            return 0.0;
        }
        self.row(i).iter().zip(self.row(j)).map(|(a, b)| a * b).sum()
    }

    /// Scatters `g_hat` (gradient w.r.t. the normalized row of unit `u`)
    /// back to the raw activations, projecting out the radial component.
    fn scatter(&self, u: usize, g_hat: &[f64], units: usize, out: &mut [f64]) {
        if self.degenerate[u] {
            return;
        }
        let row = self.row(u);
        let radial: f64 = row.iter().zip(g_hat).map(|(a, b)| a * b).sum();
        for s in 0..self.batch {
            out[s * units + u] += (g_hat[s] - radial * row[s]) / self.norm[u];
        }
    }
}

struct AsLocalLoss {
    pairs: Vec<(usize, usize)>,
}

impl CustomOp for AsLocalLoss {
    fn name(&self) -> &'static str {
        "as_loss_local"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let acts = inputs[0];
        let (b, n) = (acts.shape()[0], acts.shape()[1]);
        let prof = UnitProfiles::new(acts, true);
        // d(1 - r)/d(c_hat_i) = -c_hat_j for each ordered pair.
        let scale = -grad_out[0] / self.pairs.len() as f64;
        let mut g_hat = vec![0.0; n * b];
        for &(i, j) in &self.pairs {
            if prof.degenerate[i] || prof.degenerate[j] {
                continue;
            }
            for s in 0..b {
                g_hat[i * b + s] += scale * prof.row(j)[s];
                g_hat[j * b + s] += scale * prof.row(i)[s];
            }
        }
        let mut g = vec![0.0; acts.len()];
        for u in 0..n {
            prof.scatter(u, &g_hat[u * b..(u + 1) * b], n, &mut g);
        }
        vec![Some(g)]
    }
}

/// Mean correlation distance `1 - r` over ordered Moore neighbor pairs, with
/// `r` the Pearson correlation of two units across the batch. `acts` is
/// `[batch, units]`. Units with (near-)zero batch variance count as `r = 0`
/// and pass no gradient.
pub fn as_loss_local(tape: &mut Tape, acts: Var, grid: &TopoGrid) -> Result<Var> {
    let a = tape.value(acts);
    check_units("as_loss_local", a, grid, 1)?;
    if a.shape()[0] < 2 {
        return Err(Error::input("activation-similarity loss needs a batch of at least 2"));
    }
    let prof = UnitProfiles::new(a, true);
    let pairs: Vec<(usize, usize)> = grid.ordered_pairs().collect();
    let total: f64 = pairs.iter().map(|&(i, j)| 1.0 - prof.similarity(i, j)).sum();
    let value = Tensor::scalar(total / pairs.len() as f64);
    Ok(tape.custom(&[acts], value, Box::new(AsLocalLoss { pairs })))
}

struct AsGlobalLoss {
    target: Vec<f64>,
}

impl CustomOp for AsGlobalLoss {
    fn name(&self) -> &'static str {
        "as_loss_global"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let acts = inputs[0];
        let (b, n) = (acts.shape()[0], acts.shape()[1]);
        let prof = UnitProfiles::new(acts, false);
        // Both (i,j) and (j,i) contribute 2(S-A) each.
        let scale = 4.0 * grad_out[0] / (n * (n - 1)) as f64;
        let mut g_hat = vec![0.0; n * b];
        for i in 0..n {
            if prof.degenerate[i] {
                continue;
            }
            for j in 0..n {
                if i == j || prof.degenerate[j] {
                    continue;
                }
                let e = scale * (prof.similarity(i, j) - self.target[i * n + j]);
                let rj = prof.row(j);
                for s in 0..b {
                    g_hat[i * b + s] += e * rj[s];
                }
            }
        }
        let mut g = vec![0.0; acts.len()];
        for u in 0..n {
            prof.scatter(u, &g_hat[u * b..(u + 1) * b], n, &mut g);
        }
        vec![Some(g)]
    }
}

/// Mean over ordered pairs `i ≠ j` of `(cos(a_i, a_j) - 1/(d_ij + 1))²`.
/// Zero-norm activation vectors have similarity 0 to everything.
pub fn as_loss_global(tape: &mut Tape, acts: Var, grid: &TopoGrid) -> Result<Var> {
    let a = tape.value(acts);
    check_units("as_loss_global", a, grid, 1)?;
    if a.shape()[0] < 2 {
        return Err(Error::input("activation-similarity loss needs a batch of at least 2"));
    }
    let n = grid.unit_count();
    let mut target = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            target[i * n + j] = 1.0 / (grid.distance(i, j) + 1.0);
        }
    }
    let prof = UnitProfiles::new(a, false);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let e = prof.similarity(i, j) - target[i * n + j];
                total += e * e;
            }
        }
    }
    let value = Tensor::scalar(total / (n * (n - 1)) as f64);
    Ok(tape.custom(&[acts], value, Box::new(AsGlobalLoss { target })))
}

/// `L_CE + λ·L_spatial`, returned as a differentiable node plus its breakdown.
pub fn joint_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    spatial: Option<Var>,
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    if !(lambda >= 0.0) {
        return Err(Error::input(alloc::format!("lambda must be nonnegative, got {lambda}")));
    }
    let ce = tape.softmax_cross_entropy(logits, targets)?;
    let ce_value = tape.value(ce).data()[0];
    let (joint, spatial_value) = match spatial {
        Some(s) => {
            let sv = tape.value(s).data()[0];
            let weighted = tape.scale(s, lambda);
            (tape.add(ce, weighted)?, sv)
        }
        None => (ce, 0.0),
    };
    let breakdown = LossBreakdown {
        ce: ce_value,
        spatial: spatial_value,
        lambda,
        joint: tape.value(joint).data()[0],
    };
    Ok((joint, breakdown))
}

/// Spatial loss for `constraint` on the topographic layer: WS reads the fc1
/// weight rows, the AS variants read the pre-ReLU batch activations.
pub fn spatial_loss(
    tape: &mut Tape,
    constraint: Constraint,
    fc1_weights: Var,
    fc1_pre_relu: Var,
    grid: &TopoGrid,
) -> Result<Option<Var>> {
    Ok(match constraint {
        Constraint::None => None,
        Constraint::Ws => Some(ws_loss(tape, fc1_weights, grid)?),
        Constraint::As => Some(as_loss_local(tape, fc1_pre_relu, grid)?),
        Constraint::AsGlobal => Some(as_loss_global(tape, fc1_pre_relu, grid)?),
    })
}
