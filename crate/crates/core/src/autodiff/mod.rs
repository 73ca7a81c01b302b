//! Minimal reverse-mode automatic differentiation over dense tensors.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{sigmoid, Graph, Var};
pub use tensor::{Real, Tensor};

use crate::error::{PulseError, Result};

/// `softmax(q kᵀ / sqrt(d)) v` over the last two axes of `[.., t, d]` inputs.
pub fn scaled_dot_product_attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Var {
    let d = *g.shape(q).last().expect("attention rank");
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(scores);
    g.matmul(attn, v)
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences and returns the worst relative error
/// `|g_ad - g_fd| / max(1e-6, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor<f64>], track: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let out = f(&mut g, &vars);
        if g.value(out).numel() != 1 {
            return Err(PulseError::InvalidArgument(
                "grad_check needs a scalar-valued function".into(),
            ));
        }
        let y = g.value(out).item();
        if !y.is_finite() {
            return Err(PulseError::NonFinite("grad_check objective".into()));
        }
        let mut grads = Vec::new();
        if track {
            g.backward(out);
            for (v, t) in vars.iter().zip(inputs) {
                grads.push(
                    g.grad(*v)
                        .map(|s| s.to_vec())
                        .unwrap_or_else(|| vec![0.0; t.numel()]),
                );
            }
        }
        Ok((y, grads))
    };

    let (_, analytic) = eval(xs, true)?;
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = xs.to_vec();
    for (ti, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let orig = x.data()[i];
            probe[ti].data_mut()[i] = orig + eps;
            let (fp, _) = eval(&probe, false)?;
            probe[ti].data_mut()[i] = orig - eps;
            let (fm, _) = eval(&probe, false)?;
            probe[ti].data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let ad = analytic[ti][i];
            if !ad.is_finite() {
                return Err(PulseError::NonFinite("analytic gradient".into()));
            }
            let err = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let err = grad_check(
            |g, v| {
                let sq = g.mul(v, v);
                g.sum_all(sq)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");

        let mut g = Graph::<f64>::new();
        let v = g.leaf(x.clone(), true);
        let sq = g.mul(v, v);
        let s = g.sum_all(sq);
        g.backward(s);
        for (gr, xv) in g.grad(v).unwrap().iter().zip(x.data()) {
            assert!((gr - 2.0 * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_matches_naive_index_mapping() {
        let shape = [2, 3, 4];
        let src: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let out = kernels::permute(&shape, &[2, 0, 1], &src);
        // out[k][i][j] = src[i][j][k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(out[k * 6 + i * 3 + j], src[i * 12 + j * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Tensor<f32> = rand_tensor(&mut rng, &[5, 7]).cast();
        let b: Tensor<f32> = rand_tensor(&mut rng, &[7, 3]).cast();
        let run = || {
            let mut g = Graph::<f32>::new();
            let va = g.constant(a.clone());
            let vb = g.constant(b.clone());
            let m = g.matmul(va, vb);
            let s = g.softmax(m);
            g.value(s).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn relu_kink_subgradient_is_zero() {
        let x = Tensor::new(vec![3], vec![0.0f64, 1.0, -1.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let v = g.leaf(x, true);
        let r = g.relu(v);
        let s = g.sum_all(r);
        g.backward(s);
        assert_eq!(g.grad(v).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_tensor(&mut rng, &[2, 5, 4]);
        let k = rand_tensor(&mut rng, &[2, 5, 4]);
        let ones = Tensor::full(vec![2, 5, 4], 1.0);
        let mut g = Graph::<f64>::new();
        let (q, k, v) = (g.constant(q), g.constant(k), g.constant(ones));
        let o = scaled_dot_product_attention(&mut g, q, k, v);
        assert!(g.value(o).data().iter().all(|x| (x - 1.0).abs() < 1e-12));
    }
}
