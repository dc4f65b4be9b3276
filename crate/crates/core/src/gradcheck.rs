//! Central finite-difference gradient checking.
//!
//! Each probe perturbs one scalar coordinate by `±eps`, re-evaluates the
//! loss and compares `(L(x+eps) − L(x−eps)) / 2eps` with the analytic
//! gradient. Probes whose perturbation flips a ReLU/clamp sign or moves a
//! max-pool winner (detected through [`Graph::kink_signature`]) are skipped.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::nn::{ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Number of kink-free probes to evaluate (all coordinates if there are
    /// fewer).
    pub probes: usize,
    pub seed: u64,
    /// Relative errors are computed against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-3,
            probes: 100,
            seed: 0,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub tensor: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst: Option<Probe>,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tolerance
    }
}

pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn scalar_loss(g: &Graph<f64>, loss: Var) -> Result<f64> {
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

fn probe_all(
    base: &[Tensor<f64>],
    analytic: &[Vec<f64>],
    base_sig: &[u32],
    cfg: &GradCheckConfig,
    mut eval: impl FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<u32>)>,
) -> Result<GradReport> {
    let sizes: Vec<usize> = base.iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let order = index::sample(&mut rng, total, total).into_vec();
    let mut report = GradReport::default();
    let mut work = base.to_vec();
    for flat in order {
        if report.checked == cfg.probes {
            break;
        }
        let (mut tensor, mut coord) = (0, flat);
        while coord >= sizes[tensor] {
            coord -= sizes[tensor];
            tensor += 1;
        }
        let x0 = base[tensor].data()[coord];
        work[tensor].data_mut()[coord] = x0 + cfg.eps;
        let (lp, sp) = eval(&work)?;
        work[tensor].data_mut()[coord] = x0 - cfg.eps;
        let (lm, sm) = eval(&work)?;
        work[tensor].data_mut()[coord] = x0;
        if sp != base_sig || sm != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * cfg.eps);
        let a = analytic[tensor][coord];
        let e = rel_error(a, numeric, cfg.floor);
        report.checked += 1;
        if report.worst.is_none() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some(Probe {
                tensor,
                coord,
                analytic: a,
                numeric,
                rel_error: e,
            });
        }
    }
    Ok(report)
}

/// Checks `d f / d inputs` where `f` records a scalar loss over leaves made
/// from `inputs`.
pub fn check<F>(inputs: &[Tensor<f64>], cfg: &GradCheckConfig, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let run = |vals: &[Tensor<f64>]| -> Result<(Graph<f64>, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g, loss, vars))
    };
    let (mut g, loss, vars) = run(inputs)?;
    let sig = g.kink_signature();
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match g.grad(v) {
            Some(gr) => gr.data().to_vec(),
            None => vec![0.0; t.len()],
        })
        .collect();
    probe_all(inputs, &analytic, &sig, cfg, |vals| {
        let (g, loss, _) = run(vals)?;
        Ok((scalar_loss(&g, loss)?, g.kink_signature()))
    })
}

/// Checks a parameterized forward pass. Probed tensors are the input
/// (index 0) followed by every learnable store entry in store order.
pub fn check_session<F>(
    store: &ParamStore<f64>,
    input: &Tensor<f64>,
    mode: Mode,
    cfg: &GradCheckConfig,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Session<'_, f64>, Var) -> Result<Var>,
{
    let learnable: Vec<_> = store
        .ids()
        .filter(|&id| store.get(id).kind.is_learnable())
        .collect();
    let mut base = vec![input.clone()];
    base.extend(learnable.iter().map(|&id| store.get(id).value.clone()));

    let mut s = Session::new(store, mode);
    let x = s.input_leaf(input.clone());
    let loss = f(&mut s, x)?;
    let sig = s.graph.kink_signature();
    let grads = s.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = base.iter().map(|t| vec![0.0; t.len()]).collect();
    if let Some(gx) = s.graph.grad(x) {
        analytic[0] = gx.data().to_vec();
    }
    for (id, g) in grads {
        if let Some(pos) = learnable.iter().position(|&l| l == id) {
            analytic[pos + 1] = g.data().to_vec();
        }
    }
    drop(s);

    let mut scratch = store.clone();
    probe_all(&base, &analytic, &sig, cfg, |vals| {
        for (&id, v) in learnable.iter().zip(&vals[1..]) {
            scratch.get_mut(id).value = v.clone();
        }
        let mut s = Session::new(&scratch, mode);
        let x = s.input(vals[0].clone());
        let loss = f(&mut s, x)?;
        Ok((scalar_loss(&s.graph, loss)?, s.graph.kink_signature()))
    })
}

/// `Σ y ⊙ r` for a fixed pseudo-random `r`; turns any output into a scalar
/// loss with a generic (non-symmetric) upstream gradient.
pub fn random_projection(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    use rand::Rng;
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = g.constant(Tensor::new(shape, r)?);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Tensor of uniform values in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("shape has positive extents")
}
