//! Central finite-difference oracle.
//!
//! Only forward evaluations are used here, so the check stays independent of
//! the tape's backward rules.

use lexki::numerics::{Graph, ParamId, ParamStore, Rng, Var};
use lexki::Result;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_err: f64,
    pub diff_norm: f64,
    pub coords: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheck {
    pub fn coords(&self) -> usize {
        self.tensors.iter().map(|t| t.coords).sum()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    /// Norm-wise relative error over every probed coordinate of every
    /// tensor, so exactly-zero gradients (attention key biases, say) are not
    /// judged on f32 rounding alone.
    pub fn global_rel_err(&self) -> f64 {
        let sq = |f: fn(&TensorCheck) -> f64| self.tensors.iter().map(|t| f(t) * f(t)).sum::<f64>().sqrt();
        let (diff, an, nn) = (sq(|t| t.diff_norm), sq(|t| t.analytic_norm), sq(|t| t.numeric_norm));
        let denom = an.max(nn);
        if denom < 1e-6 {
            0.0
        } else {
            diff / denom
        }
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

// Forward only, with every ReLU held at the base point's mask.
fn eval(store: &ParamStore, pattern: &[bool], f: &dyn Fn(&mut Graph) -> Result<Var>) -> f64 {
    let mut g = Graph::pinned(store, pattern.to_vec());
    let loss = f(&mut g).expect("forward");
    g.value(loss).item() as f64
}

/// Compare tape gradients with central differences of step `h`.
///
/// Per parameter tensor, up to `max_coords` coordinates are probed (all of
/// them when the tensor is small; otherwise the largest-gradient half plus a
/// random half). The reported error is the norm-wise relative error
/// `|a - n| / max(|a|, |n|)` over the probed coordinates; tensors whose
/// probed gradients are both below `1e-6` in norm count as exact.
///
/// The perturbed passes keep each ReLU at the base point's mask. That
/// function matches the network on the base point's linear piece, so it has
/// the same gradient there, but a `±h` step can no longer straddle a kink.
pub fn check(
    store: &mut ParamStore,
    f: &dyn Fn(&mut Graph) -> Result<Var>,
    h: f32,
    max_coords: usize,
    rng: &mut Rng,
) -> GradCheck {
    let (grads, base) = {
        let mut g = Graph::new(store);
        let loss = f(&mut g).expect("forward");
        (g.backward(loss).expect("backward"), g.relu_pattern())
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut tensors = Vec::new();
    for id in ids {
        let analytic = grads.get(id).data().to_vec();
        let n = analytic.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut by_mag: Vec<usize> = (0..n).collect();
            by_mag.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()).then(a.cmp(&b)));
            let mut picked: Vec<usize> = by_mag[..max_coords / 2].to_vec();
            while picked.len() < max_coords {
                let c = rng.below(n);
                if !picked.contains(&c) {
                    picked.push(c);
                }
            }
            picked
        };
        let mut diff = 0.0f64;
        let mut an = 0.0f64;
        let mut nn = 0.0f64;
        for &c in &coords {
            let orig = store.get(id).data()[c];
            store.get_mut(id).data_mut()[c] = orig + h;
            let lp = eval(store, &base, f);
            store.get_mut(id).data_mut()[c] = orig - h;
            let lm = eval(store, &base, f);
            store.get_mut(id).data_mut()[c] = orig;
            let num = (lp - lm) / (2.0 * h as f64);
            let a = analytic[c] as f64;
            diff += (a - num) * (a - num);
            an += a * a;
            nn += num * num;
        }
        let (an, nn, diff) = (an.sqrt(), nn.sqrt(), diff.sqrt());
        let denom = an.max(nn);
        let rel_err = if denom < 1e-6 { 0.0 } else { diff / denom };
        tensors.push(TensorCheck {
            name: store.name(id).to_string(),
            analytic_norm: an,
            numeric_norm: nn,
            rel_err,
            diff_norm: diff,
            coords: coords.len(),
        });
    }
    GradCheck { tensors }
}
