//! Helpers shared by unit tests.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Graph, ParamId, ParamStore, Var};
use crate::{Result, Tensor};

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Central finite differences of `f` with respect to every parameter entry,
/// compared against the analytic gradient.
pub fn fd_check(store: &mut ParamStore, f: &dyn Fn(&mut Graph) -> Result<Var>, tol: f64) {
    let mut grads = Gradients::zeros_like(store);
    {
        let mut g = Graph::new(store);
        let loss = f(&mut g).unwrap();
        g.backward(loss, &mut grads).unwrap();
    }
    let h = 1e-5;
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let plus = {
                let mut g = Graph::new(store);
                let l = f(&mut g).unwrap();
                g.value(l).item()
            };
            store.get_mut(id).data_mut()[k] = orig - h;
            let minus = {
                let mut g = Graph::new(store);
                let l = f(&mut g).unwrap();
                g.value(l).item()
            };
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id).data()[k];
            let denom = numeric.abs().max(analytic.abs()).max(1e-3);
            assert!(
                (numeric - analytic).abs() / denom <= tol,
                "{}[{k}]: analytic {analytic} vs numeric {numeric}",
                store.name(id)
            );
        }
    }
}

/// Reduces a matrix to a scalar through a fixed random linear functional so
/// that every output entry contributes a distinct weight.
pub fn probe(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.value(x).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&mut rng, r, c))?;
    let y = g.mul(x, w)?;
    g.sum(y)
}
