//! Least-squares objective `Σ_i (Y_i − f_G(X_i))²` and its analytic gradient.
//!
//! The pre-trained experts do not depend on the fitted parameters, so their
//! contribution is folded once per dataset into a log-mass and a mean output
//! per sample ([`Design`]). Each evaluation then costs `O(n · L' · d)`.

use nalgebra::DMatrix;

use crate::error::{config, Result};
use crate::model::{Dataset, MixingMeasure, PretrainedBank, ProjectionPair};

/// Dataset with the pre-trained part of the mixture precomputed.
#[derive(Debug, Clone)]
pub struct Design<'a> {
    x: &'a [f64],
    y: &'a [f64],
    dim: usize,
    /// `log Σ_j exp(X^T A⁰_j X + a⁰_j)` per sample.
    log_pre_mass: Vec<f64>,
    /// Gate-weighted mean of the pre-trained expert outputs per sample.
    pre_value: Vec<f64>,
}

impl<'a> Design<'a> {
    pub fn new(dataset: &'a Dataset, bank: &PretrainedBank) -> Result<Self> {
        let dim = dataset.dim();
        if bank.dim() != dim {
            return config(format!("bank dimension {} differs from dataset dimension {dim}", bank.dim()));
        }
        let mut log_pre_mass = Vec::with_capacity(dataset.len());
        let mut pre_value = Vec::with_capacity(dataset.len());
        let mut logits = vec![0.0; bank.len()];
        for x in dataset.rows() {
            for (j, l) in logits.iter_mut().enumerate() {
                *l = bank.logit(j, x);
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (mut mass, mut value) = (0.0, 0.0);
            for (j, l) in logits.iter().enumerate() {
                let w = (l - max).exp();
                mass += w;
                value += w * bank.output(j, x);
            }
            log_pre_mass.push(max + mass.ln());
            pre_value.push(value / mass);
        }
        Ok(Self { x: &dataset.x, y: &dataset.y, dim, log_pre_mass, pre_value })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Prefix expert of atom `i` plus what the chain rule needs.
struct AtomView {
    b: f64,
    /// `B k_i`
    gate: Vec<f64>,
    /// `C v_i`
    value: f64,
    /// Pre-activations `W₁ p_i`, `W₂ p_i` for the neural setting.
    key_pre: Vec<f64>,
    value_pre: Vec<f64>,
}

fn atom_views(measure: &MixingMeasure, proj: &ProjectionPair) -> Vec<AtomView> {
    let experts = measure.prefix_experts(proj);
    experts
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let (key_pre, value_pre) = match measure {
                MixingMeasure::NeuralShared(m) => (m.key_pre(i), m.value_pre(i)),
                _ => (Vec::new(), Vec::new()),
            };
            AtomView { b: e.log_weight, gate: e.gate, value: e.value, key_pre, value_pre }
        })
        .collect()
}

fn check(measure: &MixingMeasure, proj: &ProjectionPair, design: &Design<'_>) -> Result<()> {
    if proj.dim() != design.dim {
        return config(format!("projection dimension {} differs from data dimension {}", proj.dim(), design.dim));
    }
    measure.validate(design.dim)
}

/// Objective value and, when `grad` is given, its gradient in the flat order
/// of [`MixingMeasure::params`].
pub fn loss_and_grad(
    measure: &MixingMeasure,
    proj: &ProjectionPair,
    design: &Design<'_>,
    grad: Option<&mut [f64]>,
) -> f64 {
    let atoms = atom_views(measure, proj);
    let (l, d) = (atoms.len(), design.dim);
    let want = grad.is_some();
    // per-atom accumulators: ∂J/∂b_i, ∂J/∂(B k_i), ∂J/∂(C v_i)
    let mut gb = vec![0.0; l];
    let mut gk = vec![0.0; l * d];
    let mut gv = vec![0.0; l];
    let mut logit = vec![0.0; l];
    let mut ew = vec![0.0; l];
    let mut total = 0.0;

    for (n, x) in design.x.chunks_exact(d).enumerate() {
        let lp = design.log_pre_mass[n];
        let mut max = lp;
        for (s, a) in logit.iter_mut().zip(&atoms) {
            *s = a.b + a.gate.iter().zip(x).map(|(g, v)| g * v).sum::<f64>();
            max = max.max(*s);
        }
        let e0 = (lp - max).exp();
        let (mut den, mut num) = (e0, e0 * design.pre_value[n]);
        for ((e, s), a) in ew.iter_mut().zip(&logit).zip(&atoms) {
            *e = (s - max).exp();
            den += *e;
            num += *e * a.value;
        }
        let f = num / den;
        let r = design.y[n] - f;
        total += r * r;
        if want {
            let c = -2.0 * r / den;
            for (i, a) in atoms.iter().enumerate() {
                let ce = c * ew[i];
                let t = ce * (a.value - f);
                gb[i] += t;
                gv[i] += ce;
                for (g, xv) in gk[i * d..(i + 1) * d].iter_mut().zip(x) {
                    *g += t * xv;
                }
            }
        }
    }

    if let Some(grad) = grad {
        chain_rule(measure, proj, &atoms, &gb, &gk, &gv, grad);
    }
    total
}

/// `B^T g`
fn bt_times(b: &DMatrix<f64>, g: &[f64]) -> Vec<f64> {
    (0..b.ncols()).map(|c| (0..b.nrows()).map(|r| b[(r, c)] * g[r]).sum()).collect()
}

fn chain_rule(
    measure: &MixingMeasure,
    proj: &ProjectionPair,
    atoms: &[AtomView],
    gb: &[f64],
    gk: &[f64],
    gv: &[f64],
    grad: &mut [f64],
) {
    let d = proj.dim();
    assert_eq!(grad.len(), measure.param_count(), "gradient buffer length");
    let key_grad = |i: usize| bt_times(&proj.b, &gk[i * d..(i + 1) * d]);
    let value_grad = |i: usize| proj.c.iter().map(|c| c * gv[i]).collect::<Vec<f64>>();
    let mut k = 0;
    match measure {
        MixingMeasure::NonShared(m) => {
            for i in 0..m.atoms.len() {
                grad[k] = gb[i];
                grad[k + 1..k + 1 + d].copy_from_slice(&key_grad(i));
                grad[k + 1 + d..k + 1 + 2 * d].copy_from_slice(&value_grad(i));
                k += 1 + 2 * d;
            }
        }
        MixingMeasure::LinearShared(m) => {
            for i in 0..m.atoms.len() {
                grad[k] = gb[i];
                for ((g, a), b) in grad[k + 1..k + 1 + d].iter_mut().zip(key_grad(i)).zip(value_grad(i)) {
                    *g = a + b;
                }
                k += 1 + d;
            }
        }
        MixingMeasure::NeuralShared(m) => {
            let h = m.hidden_dim();
            let atoms_len = m.atoms.len();
            let w_offset = atoms_len * (1 + h);
            let (atom_part, w_part) = grad.split_at_mut(w_offset);
            let (gw1, gw2) = w_part.split_at_mut(d * h);
            gw1.iter_mut().chain(gw2.iter_mut()).for_each(|g| *g = 0.0);
            for i in 0..atoms_len {
                let av = &atoms[i];
                let gz1: Vec<f64> = key_grad(i)
                    .iter()
                    .zip(&av.key_pre)
                    .map(|(g, z)| g * m.key_activation.derivative(*z))
                    .collect();
                let gz2: Vec<f64> = value_grad(i)
                    .iter()
                    .zip(&av.value_pre)
                    .map(|(g, z)| g * m.value_activation.derivative(*z))
                    .collect();
                let p = &m.atoms[i].p;
                atom_part[k] = gb[i];
                for c in 0..h {
                    atom_part[k + 1 + c] = (0..d).map(|r| m.w1[(r, c)] * gz1[r] + m.w2[(r, c)] * gz2[r]).sum();
                }
                for r in 0..d {
                    for c in 0..h {
                        gw1[r * h + c] += gz1[r] * p[c];
                        gw2[r * h + c] += gz2[r] * p[c];
                    }
                }
                k += 1 + h;
            }
        }
    }
}

/// `Σ_i (Y_i − f_G(X_i))²` with the measure's bank and projections.
pub fn objective(
    measure: &MixingMeasure,
    bank: &PretrainedBank,
    proj: &ProjectionPair,
    dataset: &Dataset,
) -> Result<f64> {
    let design = Design::new(dataset, bank)?;
    check(measure, proj, &design)?;
    Ok(loss_and_grad(measure, proj, &design, None))
}

/// Gradient of [`objective`] in the flat parameter order of [`MixingMeasure::params`].
pub fn gradient(
    measure: &MixingMeasure,
    bank: &PretrainedBank,
    proj: &ProjectionPair,
    dataset: &Dataset,
) -> Result<Vec<f64>> {
    let design = Design::new(dataset, bank)?;
    check(measure, proj, &design)?;
    let mut g = vec![0.0; measure.param_count()];
    loss_and_grad(measure, proj, &design, Some(&mut g));
    Ok(g)
}

pub(crate) fn check_design(measure: &MixingMeasure, proj: &ProjectionPair, design: &Design<'_>) -> Result<()> {
    check(measure, proj, design)
}
