//! Minimal reverse-mode automatic differentiation over batched 2-D arrays.
//!
//! Every tensor in the model is a `rows × features` matrix: image batches
//! are flattened channel-major, biases are `1 × n` rows. That keeps the op
//! set small enough to gradient-check exhaustively.

mod conv;
mod graph;

pub use conv::{col2im, im2col, ConvGeom};
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::softmax_rows;

#[cfg(test)]
pub(crate) mod testing {
    use ndarray::Array2;

    use super::{Graph, Var};

    /// Relative error between an analytic gradient and central finite
    /// differences of `f` around `inputs`, taken over the whole gradient
    /// vector: `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.
    pub fn check<F>(inputs: &[Array2<f64>], f: F) -> f64
    where
        F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let analytic: Vec<f64> = vars
            .iter()
            .zip(inputs)
            .flat_map(|(v, x)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(x.dim()))
                    .into_iter()
            })
            .collect();

        let eval = |perturbed: &[Array2<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = perturbed.iter().map(|x| g.constant(x.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).sum()
        };
        let h = 1e-6;
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs.len() {
            for j in 0..inputs[i].len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[i].as_slice_mut().unwrap()[j] += h;
                minus[i].as_slice_mut().unwrap()[j] -= h;
                numeric.push((eval(&plus) - eval(&minus)) / (2.0 * h));
            }
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / norm(&analytic).max(norm(&numeric)).max(1e-8)
    }

    /// Deterministic pseudo-random matrix in `[-1, 1]`.
    pub fn matrix(rows: usize, cols: usize, salt: u64) -> Array2<f64> {
        let mut state = salt.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Array2::from_shape_fn((rows, cols), |_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array2};

    use super::testing::{check, matrix};
    use super::*;

    const TOL: f64 = 1e-6;

    #[test]
    fn dense_ops_match_finite_differences() {
        let a = matrix(4, 3, 1);
        let w = matrix(3, 5, 2);
        let b = matrix(1, 5, 3);
        let err = check(&[a, w, b], |g, v| {
            let h = g.matmul(v[0], v[1]);
            let h = g.add_row(h, v[2]);
            let h = g.leaky_relu(h, 0.2);
            let t = g.sigmoid(h);
            let sq = g.square(t);
            g.mean(sq)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x = matrix(3, 4, 4);
        let y = matrix(3, 4, 5).mapv(|v| v.abs() + 0.5);
        let row = matrix(1, 4, 6);
        let err = check(&[x, y, row], |g, v| {
            let p = g.mul(v[0], v[1]);
            let q = g.sub(p, v[1]);
            let r = g.add(q, v[0]);
            let e = g.exp(r);
            let l = g.ln(v[1]);
            let m = g.mul_row(l, v[2]);
            let a = g.abs(m);
            let s = g.scale(a, -1.7);
            let o = g.offset(s, 3.0);
            let t = g.add(e, o);
            let rs = g.row_sum(t);
            g.sum(rs)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_family_matches_finite_differences() {
        let x = matrix(5, 4, 7).mapv(|v| 3.0 * v);
        let wts = matrix(5, 4, 8);
        let err = check(&[x.clone(), wts.clone()], |g, v| {
            let s = g.softmax(v[0]);
            let p = g.mul(s, v[1]);
            g.sum(p)
        });
        assert!(err < TOL, "{err}");
        let err = check(&[x, wts], |g, v| {
            let s = g.log_softmax(v[0]);
            let c = g.clamp(s, -2.0, 0.0);
            let p = g.mul(c, v[1]);
            g.sum(p)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let a = matrix(3, 2, 9);
        let b = matrix(3, 4, 10);
        let err = check(&[a, b], |g, v| {
            let c = g.concat(&[v[0], v[1], v[0]]);
            let s = g.slice_cols(c, 1, 6);
            let r = g.relu(s);
            let q = g.square(r);
            g.sum(q)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn batch_norm_matches_finite_differences() {
        let x = matrix(6, 3, 11).mapv(|v| 2.0 * v + 0.3);
        let wts = matrix(6, 3, 12);
        let err = check(&[x, wts], |g, v| {
            let n = g.batch_norm(v[0], 0.7, 1e-5);
            let p = g.mul(n, v[1]);
            let e = g.exp(p);
            g.sum(e)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn batch_norm_centers_and_rescales() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(array![[1.0, 10.0], [3.0, 20.0], [5.0, 60.0]]);
        let y = g.batch_norm(x, 2.0, 0.0);
        let out = g.value(y);
        for col in out.columns() {
            let mean = col.sum() / 3.0;
            let var = col.mapv(|v| (v - mean).powi(2)).sum() / 3.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bce_with_logits_matches_finite_differences() {
        let logits = matrix(3, 5, 13).mapv(|v| 4.0 * v);
        let target = matrix(3, 5, 14).mapv(|v| 0.5 + 0.5 * v);
        let err = check(&[logits, target], |g, v| {
            let l = g.bce_with_logits(v[0], v[1]);
            g.sum(l)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn conv_ops_match_finite_differences() {
        let geom = ConvGeom::new(2, 8, 8, 3, 4, 2, 1);
        let x = matrix(2, geom.in_len(), 15);
        let w = matrix(geom.out_c, geom.patch_len(), 16);
        let b = matrix(1, geom.out_c, 17);
        let err = check(&[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], geom);
            let y = g.square(y);
            g.sum(y)
        });
        assert!(err < TOL, "{err}");

        let z = matrix(2, geom.out_len(), 18);
        let wt = matrix(geom.out_c, geom.patch_len(), 19);
        let bt = matrix(1, geom.in_c, 20);
        let err = check(&[z, wt, bt], |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], v[2], geom);
            let y = g.square(y);
            g.sum(y)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        let geom = ConvGeom::new(2, 8, 8, 3, 4, 2, 1);
        let x = matrix(1, geom.in_len(), 21);
        let y = matrix(1, geom.out_len(), 22);
        let w = matrix(geom.out_c, geom.patch_len(), 23);
        let mut g = Graph::<f64>::new();
        let (xv, yv, wv) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(w));
        let zero_out = g.constant(Array2::zeros((1, geom.out_c)));
        let zero_in = g.constant(Array2::zeros((1, geom.in_c)));
        let conv = g.conv2d(xv, wv, zero_out, geom);
        let convt = g.conv_transpose2d(yv, wv, zero_in, geom);
        let lhs = (&g.value(conv) * &y).sum();
        let rhs = (&g.value(convt) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let w = array![[1.0, 2.0]];
        let c = g.constant(array![[3.0, 4.0]]);
        let p = g.param(w.view());
        let y = g.mul(c, p);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &array![[3.0, 4.0]]);
    }
}
