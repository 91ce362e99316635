//! Central finite-difference gradient checking.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Tensor, TensorError};

/// Which coordinates of each parameter tensor get a finite-difference probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordSelection {
    All,
    /// Up to `per_tensor` distinct coordinates per tensor, drawn with `seed`.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub tensor: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn abs_error(&self) -> f64 {
        libm::fabs(self.analytic - self.numeric)
    }

    /// `|a − n| / max(|a|, |n|, floor)`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        self.abs_error() / libm::fabs(self.analytic).max(libm::fabs(self.numeric)).max(floor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, coordinate, analytic, numeric)` at the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub probes: usize,
    pub records: Vec<Probe>,
}

impl GradCheckReport {
    /// Worst relative error over probes whose gradient magnitude is at least
    /// `resolution`, and worst absolute error over the rest. Central
    /// differences cannot resolve gradients much smaller than
    /// `ulp(f) / h`, so the two groups need different yardsticks.
    pub fn split_at(&self, resolution: f64) -> (f64, f64) {
        let mut rel: f64 = 0.0;
        let mut abs: f64 = 0.0;
        for p in &self.records {
            if libm::fabs(p.analytic).max(libm::fabs(p.numeric)) >= resolution {
                rel = rel.max(p.rel_error(0.0));
            } else {
                abs = abs.max(p.abs_error());
            }
        }
        (rel, abs)
    }
}

/// Compares the analytic gradient of `f` to central differences with step
/// `h`. `f` receives a fresh graph and one node per tensor in `params` and
/// must return a single-element node. The relative error of a probe is
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(
    params: &[Tensor],
    h: f64,
    coords: CoordSelection,
    mut f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&mut g, &leaves)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(params)
        .map(|(&n, t)| grads.get(n).map(|s| s.to_vec()).unwrap_or_else(|| alloc::vec![0.0; t.len()]))
        .collect();

    let mut eval = |perturbed: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let root = f(&mut g, &nodes)?;
        Ok(g.value(root).item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, probes: 0, records: Vec::new() };
    for ti in 0..params.len() {
        let n = params[ti].len();
        let idx: Vec<usize> = match coords {
            CoordSelection::All => (0..n).collect(),
            CoordSelection::Sample { per_tensor, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ti as u64).wrapping_mul(0x9E37_79B9));
                sample(&mut rng, n, per_tensor.min(n)).into_vec()
            }
        };
        for i in idx {
            let orig = params[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti][i];
            let probe = Probe { tensor: ti, coord: i, analytic: a, numeric };
            let rel = probe.rel_error(1e-8);
            report.records.push(probe);
            report.probes += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((ti, i, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
