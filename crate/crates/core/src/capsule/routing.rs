//! Reference (non-differentiable) capsule aggregation with dynamic routing.
//!
//! These functions operate on one image's local features and mirror, step
//! for step, what the encoder records on the tape for a whole batch. They
//! serve as the readable definition and as an oracle for the batched path.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::tape::squash_factor;
use crate::tensor::Tensor;

/// How the mean term of the residual is normalised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ResidualNorm {
    /// Divide the cluster sum by K, so residuals sum to zero over clusters.
    #[default]
    Clusters,
    /// Divide by the number of local features N.
    LocalFeatures,
}

impl ResidualNorm {
    pub(crate) fn divisor(self, n_local: usize, n_clusters: usize) -> usize {
        match self {
            ResidualNorm::Clusters => n_clusters,
            ResidualNorm::LocalFeatures => n_local,
        }
    }
}

/// N local feature vectors of a common dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeatureSet<T> {
    dim: usize,
    vectors: Vec<Vec<T>>,
}

impl<T: Real> LocalFeatureSet<T> {
    pub fn new(vectors: Vec<Vec<T>>) -> Result<Self> {
        let dim = vectors.first().map(Vec::len).ok_or_else(|| Error::invalid("local_features", "empty set"))?;
        if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::invalid("local_features", "vectors must share a positive dimension"));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("local_features", "non-finite value"));
        }
        Ok(Self { dim, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize) -> &[T] {
        &self.vectors[i]
    }
}

/// Per-(local feature, cluster) linear maps `W [N, K, Df, Dp]` and
/// per-cluster biases `b [K, Df]`. Cluster centres are implicit in them.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleParams<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> CapsuleParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let ws = weights.shape();
        if ws.len() != 4 || bias.shape() != [ws[1], ws[2]] {
            return Err(Error::shape("capsule_params", ws, bias.shape()));
        }
        Ok(Self { weights, bias })
    }

    pub fn n_local(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn n_clusters(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[3]
    }
}

/// `f(x_i, mu_k) = W_ik x_i + b_k`.
pub fn linear_map<T: Real>(x: &[T], i: usize, k: usize, params: &CapsuleParams<T>) -> Result<Vec<T>> {
    if x.len() != params.in_dim() {
        return Err(Error::shape("linear_map", &[x.len()], &[params.in_dim()]));
    }
    if i >= params.n_local() || k >= params.n_clusters() {
        return Err(Error::invalid(
            "linear_map",
            format!("index ({i}, {k}) outside {}x{}", params.n_local(), params.n_clusters()),
        ));
    }
    let (kk, df, dp) = (params.n_clusters(), params.out_dim(), params.in_dim());
    let w = params.weights.data();
    let b = params.bias.data();
    Ok((0..df)
        .map(|d| {
            let row = &w[((i * kk + k) * df + d) * dp..((i * kk + k) * df + d + 1) * dp];
            row.iter().zip(x).map(|(&a, &c)| a * c).sum::<T>() + b[k * df + d]
        })
        .collect())
}

/// Residuals `r_k = f(x_i, mu_k) - (1/M) sum_k f(x_i, mu_k)` for all K
/// clusters, where M is K or N according to `norm`.
pub fn residual<T: Real>(x: &[T], i: usize, params: &CapsuleParams<T>, norm: ResidualNorm) -> Result<Vec<Vec<T>>> {
    let k = params.n_clusters();
    let maps = (0..k).map(|c| linear_map(x, i, c, params)).collect::<Result<Vec<_>>>()?;
    let divisor = T::from_usize(norm.divisor(params.n_local(), k)).unwrap();
    let mut mean = vec![T::zero(); params.out_dim()];
    for f in &maps {
        mean.iter_mut().zip(f).for_each(|(m, &v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= divisor);
    Ok(maps
        .into_iter()
        .map(|f| f.iter().zip(&mean).map(|(&a, &m)| a - m).collect())
        .collect())
}

/// Softmax of one local feature's routing logits.
pub fn soft_assignment<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&b| (b - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `s_k = sum_i Q_ik r(x_i, mu_k)`; `q` is N x K, `r` is N x K x D.
pub fn aggregate<T: Real>(q: &[Vec<T>], r: &[Vec<Vec<T>>]) -> Result<Vec<Vec<T>>> {
    if q.len() != r.len() || q.is_empty() {
        return Err(Error::shape("aggregate", &[q.len()], &[r.len()]));
    }
    let k = q[0].len();
    let d = r[0].first().map(Vec::len).unwrap_or(0);
    if q.iter().any(|row| row.len() != k) || r.iter().any(|row| row.len() != k || row.iter().any(|v| v.len() != d)) {
        return Err(Error::invalid("aggregate", "ragged routing weights or residuals"));
    }
    let mut s = vec![vec![T::zero(); d]; k];
    for (qi, ri) in q.iter().zip(r) {
        for ((sk, &w), rk) in s.iter_mut().zip(qi).zip(ri) {
            sk.iter_mut().zip(rk).for_each(|(o, &v)| *o += w * v);
        }
    }
    Ok(s)
}

/// `v = (|s|^2 / (1 + |s|^2)) s / |s|`, and 0 at `s = 0`.
pub fn squash<T: Real>(s: &[T]) -> Vec<T> {
    let n = s.iter().map(|&v| v * v).sum::<T>().sqrt();
    let f = squash_factor(n);
    s.iter().map(|&v| v * f).collect()
}

/// One routing iteration's state, recorded for inspection.
#[derive(Clone, Debug)]
pub struct RoutingStep<T> {
    /// Logits used in this iteration (N x K).
    pub logits: Vec<Vec<T>>,
    /// Routing weights derived from them (N x K).
    pub weights: Vec<Vec<T>>,
    /// Capsule outputs (K x D).
    pub capsules: Vec<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct RoutingOutput<T> {
    pub capsules: Vec<Vec<T>>,
    pub trace: Vec<RoutingStep<T>>,
}

/// Dynamic routing: logits start at zero; each iteration computes the
/// routing weights, aggregates residuals, squashes, and then adds the
/// agreement `r(x_i, mu_k) . v_k` to the logits.
pub fn dynamic_routing<T: Real>(
    x: &LocalFeatureSet<T>,
    params: &CapsuleParams<T>,
    iters: usize,
    norm: ResidualNorm,
) -> Result<RoutingOutput<T>> {
    if iters == 0 {
        return Err(Error::invalid("dynamic_routing", "iterations must be at least 1"));
    }
    if x.len() != params.n_local() {
        return Err(Error::shape("dynamic_routing", &[x.len(), x.dim()], &[params.n_local(), params.in_dim()]));
    }
    let k = params.n_clusters();
    let r = (0..x.len())
        .map(|i| residual(x.get(i), i, params, norm))
        .collect::<Result<Vec<_>>>()?;
    let mut logits = vec![vec![T::zero(); k]; x.len()];
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let q: Vec<Vec<T>> = logits.iter().map(|b| soft_assignment(b)).collect();
        let s = aggregate(&q, &r)?;
        let v: Vec<Vec<T>> = s.iter().map(|sk| squash(sk)).collect();
        trace.push(RoutingStep {
            logits: logits.clone(),
            weights: q,
            capsules: v.clone(),
        });
        for (bi, ri) in logits.iter_mut().zip(&r) {
            for ((b, rk), vk) in bi.iter_mut().zip(ri).zip(&v) {
                *b += rk.iter().zip(vk).map(|(&p, &q)| p * q).sum::<T>();
            }
        }
    }
    let capsules = trace.last().unwrap().capsules.clone();
    Ok(RoutingOutput { capsules, trace })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_params(rng: &mut ChaCha8Rng, n: usize, k: usize, df: usize, dp: usize, scale: f64) -> CapsuleParams<f64> {
        CapsuleParams::new(
            Tensor::from_fn(&[n, k, df, dp], |_| rng.random_range(-scale..scale)),
            Tensor::from_fn(&[k, df], |_| rng.random_range(-scale..scale)),
        )
        .unwrap()
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, dp: usize) -> LocalFeatureSet<f64> {
        LocalFeatureSet::new((0..n).map(|_| (0..dp).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()).unwrap()
    }

    fn identity_params(n: usize, k: usize, d: usize) -> CapsuleParams<f64> {
        CapsuleParams::new(
            Tensor::from_fn(&[n, k, d, d], |idx| if (idx / d) % d == idx % d { 1.0 } else { 0.0 }),
            Tensor::zeros(&[k, d]),
        )
        .unwrap()
    }

    #[test]
    fn linear_map_examples() {
        let p = identity_params(1, 1, 3);
        assert_eq!(linear_map(&[1.0, -2.0, 0.5], 0, 0, &p).unwrap(), vec![1.0, -2.0, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng, 2, 3, 2, 4, 1.0);
        let f = linear_map(&[0.0; 4], 1, 2, &p).unwrap();
        assert_eq!(f, p.bias.data()[4..6].to_vec());

        // W = [[1,2],[3,4]], b = [1,1], x = [1,1] -> [4, 8]
        let p = CapsuleParams::new(
            Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(linear_map(&[1.0, 1.0], 0, 0, &p).unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn linear_map_rejects_bad_dims() {
        let p = identity_params(1, 2, 3);
        assert!(linear_map(&[1.0, 2.0], 0, 0, &p).is_err());
        assert!(linear_map(&[1.0, 2.0, 3.0], 0, 2, &p).is_err());
    }

    #[test]
    fn residual_examples() {
        // identical maps for every cluster -> all residuals zero
        let p = identity_params(1, 4, 2);
        for r in residual(&[0.3, -0.7], 0, &p, ResidualNorm::Clusters).unwrap() {
            assert_eq!(r, vec![0.0, 0.0]);
        }
        // K = 2 with f_1 = [2, 0], f_2 = [0, 2] -> r_1 = [1, -1], r_2 = [-1, 1]
        let p = CapsuleParams::new(Tensor::zeros(&[1, 2, 2, 1]), Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap()).unwrap();
        let r = residual(&[0.0], 0, &p, ResidualNorm::Clusters).unwrap();
        assert_eq!(r, vec![vec![1.0, -1.0], vec![-1.0, 1.0]]);
    }

    #[test]
    fn literal_local_feature_normalisation_differs() {
        // N = 4 local features, K = 2: the mean term is divided by 4, not 2.
        let p = CapsuleParams::new(Tensor::zeros(&[4, 2, 2, 1]), Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap()).unwrap();
        let r = residual(&[0.0], 0, &p, ResidualNorm::LocalFeatures).unwrap();
        assert_eq!(r, vec![vec![1.5, -0.5], vec![-0.5, 1.5]]);
    }

    #[test]
    fn soft_assignment_examples() {
        let q = soft_assignment(&[0.7f64; 5]);
        assert!(q.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let q = soft_assignment(&[0.0f64, 2f64.ln()]);
        assert!((q[0] - 1.0 / 3.0).abs() < 1e-15 && (q[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn aggregate_examples() {
        let r = vec![vec![vec![0.5, -1.0]]];
        assert_eq!(aggregate(&[vec![1.0]], &r).unwrap(), vec![vec![0.5, -1.0]]);
        let zero = vec![vec![vec![0.0; 3]; 2]; 4];
        let q = vec![vec![0.3, 0.7]; 4];
        assert!(aggregate(&q, &zero).unwrap().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_matches_double_loop_on_small_instance() {
        // N = 2, K = 2, D = 2 written out term by term
        let q = vec![vec![0.25, 0.75], vec![0.6, 0.4]];
        let r = vec![
            vec![vec![1.0, 2.0], vec![-1.0, 0.5]],
            vec![vec![0.0, -3.0], vec![2.0, 2.0]],
        ];
        let s = aggregate(&q, &r).unwrap();
        let s0 = [0.25 * 1.0 + 0.6 * 0.0, 0.25 * 2.0 + 0.6 * -3.0];
        let s1 = [-0.75 + 0.4 * 2.0, 0.75 * 0.5 + 0.4 * 2.0];
        assert_eq!(s, vec![s0.to_vec(), s1.to_vec()]);
    }

    #[test]
    fn squash_examples() {
        assert_eq!(squash(&[0.0f64, 0.0]), vec![0.0, 0.0]);
        let s = [0.6f64, 0.8];
        let v = squash(&s);
        assert!((v[0] - 0.3).abs() < 1e-15 && (v[1] - 0.4).abs() < 1e-15);
        let v = squash(&[0.0f64, 3.0, 0.0]);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 0.9).abs() < 1e-15);
    }

    #[test]
    fn single_iteration_routes_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, 3, 4, 2, 3, 1.0);
        let x = random_set(&mut rng, 3, 3);
        let out = dynamic_routing(&x, &p, 1, ResidualNorm::Clusters).unwrap();
        let q = &out.trace[0].weights;
        assert!(q.iter().flatten().all(|&v| (v - 0.25).abs() < 1e-15));
        let r: Vec<_> = (0..3).map(|i| residual(x.get(i), i, &p, ResidualNorm::Clusters).unwrap()).collect();
        let want: Vec<Vec<f64>> = aggregate(&q.clone(), &r).unwrap().iter().map(|s| squash(s)).collect();
        assert_eq!(out.capsules, want);
    }

    #[test]
    fn identical_residuals_give_identical_routing_rows() {
        // Same map for every local feature and same input -> residuals equal
        // across i, so every row of Q is the same at every iteration.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let one = random_params(&mut rng, 1, 3, 2, 2, 1.0);
        let n = 4;
        let w: Vec<f64> = (0..n).flat_map(|_| one.weights.data().to_vec()).collect();
        let p = CapsuleParams::new(Tensor::new(vec![n, 3, 2, 2], w).unwrap(), one.bias.clone()).unwrap();
        let x = LocalFeatureSet::new(vec![vec![0.4, -0.2]; n]).unwrap();
        let out = dynamic_routing(&x, &p, 5, ResidualNorm::Clusters).unwrap();
        for step in &out.trace {
            for row in &step.weights {
                assert_eq!(row, &step.weights[0]);
            }
        }
        // and with identical maps across clusters too, Q stays uniform
        let p = identity_params(n, 3, 2);
        let out = dynamic_routing(&x, &p, 5, ResidualNorm::Clusters).unwrap();
        for step in &out.trace {
            assert!(step.weights.iter().flatten().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn routing_settles_on_small_instance() {
        // N = 4, K = 3, D = 2, the trace itself is the oracle. Logits grow by
        // r.v every round; what settles is that per-round change, because
        // the capsules converge.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let p = random_params(&mut rng, 4, 3, 2, 2, 1.0);
        let x = random_set(&mut rng, 4, 2);
        let out = dynamic_routing(&x, &p, 11, ResidualNorm::Clusters).unwrap();
        let t = &out.trace;
        let delta = |a: usize| -> Vec<f64> {
            t[a + 1].logits.iter().flatten().zip(t[a].logits.iter().flatten()).map(|(x, y)| x - y).collect()
        };
        let (d9, d10) = (delta(8), delta(9));
        let change = d9.iter().zip(&d10).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(change < 1e-3, "logit update change {change}");
        let dv = t[10].capsules.iter().flatten().zip(t[9].capsules.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dv < 1e-3, "capsule change {dv}");
    }

    #[test]
    fn routing_rejects_zero_iterations() {
        let p = identity_params(1, 1, 1);
        let x = LocalFeatureSet::new(vec![vec![1.0]]).unwrap();
        assert!(dynamic_routing(&x, &p, 0, ResidualNorm::Clusters).is_err());
    }

    proptest! {
        #[test]
        fn residuals_sum_to_zero(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, 3, 5, 4, 3, 2.0);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let r = residual(&x, 1, &p, ResidualNorm::Clusters).unwrap();
            let norm = (0..4).map(|d| r.iter().map(|rk| rk[d]).sum::<f64>().powi(2)).sum::<f64>().sqrt();
            prop_assert!(norm < 1e-5);
        }

        #[test]
        fn routing_weights_normalised_every_iteration(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..8);
            let k = rng.random_range(1..6);
            let p = random_params(&mut rng, n, k, 3, 2, 1.5);
            let x = random_set(&mut rng, n, 2);
            let out = dynamic_routing(&x, &p, 4, ResidualNorm::Clusters).unwrap();
            for step in &out.trace {
                for row in &step.weights {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
            for v in &out.capsules {
                prop_assert!(v.iter().map(|a| a * a).sum::<f64>() < 1.0);
            }
        }

        #[test]
        fn aggregate_matches_naive_loop(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, k, d) = (rng.random_range(1..=32), rng.random_range(1..=8), rng.random_range(1..5));
            let q: Vec<Vec<f64>> = (0..n).map(|_| {
                let b: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
                soft_assignment(&b)
            }).collect();
            let r: Vec<Vec<Vec<f64>>> = (0..n)
                .map(|_| (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
                .collect();
            let s = aggregate(&q, &r).unwrap();
            for c in 0..k {
                for e in 0..d {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += q[i][c] * r[i][c][e];
                    }
                    prop_assert!((s[c][e] - acc).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn squash_is_parallel_and_inside_unit_ball(s in proptest::collection::vec(-50.0f64..50.0, 1..8)) {
            let v = squash(&s);
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(nv < 1.0);
            let ns = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            if ns > 0.0 {
                let cos = s.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (ns * nv);
                prop_assert!((cos - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn soft_assignment_normalises_and_is_shift_invariant(
            b in proptest::collection::vec(-20.0f64..20.0, 1..10),
            c in -100.0f64..100.0,
        ) {
            let q = soft_assignment(&b);
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(q.iter().all(|&v| v >= 0.0));
            let shifted: Vec<f64> = b.iter().map(|v| v + c).collect();
            for (x, y) in q.iter().zip(soft_assignment(&shifted)) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
