//! Central finite-difference oracle for tape gradients, in f64.

use mdfl::tensor::{Tape, Tensor, Var};
use mdfl::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
/// Denominator floor for the relative error; gradients smaller than this in
/// magnitude are compared absolutely against it.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink at 0.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn projected_loss<F>(f: &F, inputs: &[Tensor<f64>], wrt: &[bool], proj_seed: u64) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(wrt)
        .map(|(t, &g)| if g { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let out = f(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let mut r = rng(proj_seed);
    let proj = tape.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let prod = tape.mul(out, proj)?;
    let loss = tape.sum(prod);
    Ok((tape, vars, loss))
}

/// Max relative error between tape gradients and central differences of
/// `sum(c * f(inputs))` for a fixed random projection `c`.
pub fn max_rel_error<F>(f: F, inputs: &[Tensor<f64>], wrt: &[bool]) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let proj_seed = 0xC0FFEE;
    let (mut tape, vars, loss) = projected_loss(&f, inputs, wrt, proj_seed).expect("forward");
    tape.backward(loss).expect("backward");
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        if !wrt[i] {
            continue;
        }
        let analytic = tape.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.len() {
            let eval = |delta: f64| {
                let mut shifted = inputs.to_vec();
                shifted[i].data_mut()[j] += delta;
                let (t, _, l) = projected_loss(&f, &shifted, wrt, proj_seed).expect("forward");
                t.value(l).item().unwrap()
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
type Sample = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Vec<bool>)>;

pub struct OpCase {
    pub name: &'static str,
    pub sample: Sample,
    pub build: Build,
}

fn case(
    name: &'static str,
    sample: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Vec<bool>) + 'static,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        sample: Box::new(sample),
        build: Box::new(build),
    }
}

/// One entry per differentiable op (plus a few compositions).
pub fn op_catalog() -> Vec<OpCase> {
    use mdfl::tensor::tape::BnMode;
    vec![
        case(
            "conv2d_stride1",
            |r| (vec![uniform(r, &[2, 2, 5, 5], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)], vec![true; 3]),
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1),
        ),
        case(
            "conv2d_stride2",
            |r| (vec![uniform(r, &[2, 2, 5, 6], -1.0, 1.0), uniform(r, &[2, 2, 5, 5], -1.0, 1.0)], vec![true; 2]),
            |t, v| t.conv2d(v[0], v[1], None, 2),
        ),
        case(
            "conv_transpose2d",
            |r| (vec![uniform(r, &[2, 2, 3, 3], -1.0, 1.0), uniform(r, &[2, 3, 5, 5], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)], vec![true; 3]),
            |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2),
        ),
        case(
            "dense",
            |r| (vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 5], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)], vec![true; 3]),
            |t, v| t.dense(v[0], v[1], Some(v[2])),
        ),
        case(
            "leaky_relu",
            |r| (vec![away_from_zero(r, &[4, 6])], vec![true]),
            |t, v| Ok(t.leaky_relu(v[0], 0.2)),
        ),
        case("sigmoid", |r| (vec![uniform(r, &[4, 5], -3.0, 3.0)], vec![true]), |t, v| Ok(t.sigmoid(v[0]))),
        case(
            "softmax_axis1",
            |r| (vec![uniform(r, &[2, 4, 3], -2.0, 2.0)], vec![true]),
            |t, v| t.softmax(v[0], 1),
        ),
        case(
            "softmax_last_axis",
            |r| (vec![uniform(r, &[3, 5], -2.0, 2.0)], vec![true]),
            |t, v| t.softmax(v[0], 1),
        ),
        case(
            "batch_norm_train_nchw",
            |r| (vec![uniform(r, &[4, 2, 2, 3], -2.0, 2.0), uniform(r, &[2], 0.5, 1.5), uniform(r, &[2], -0.5, 0.5)], vec![true; 3]),
            |t, v| Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Train)?.0),
        ),
        case(
            "batch_norm_train_dense",
            |r| (vec![uniform(r, &[8, 3], -2.0, 2.0), uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -0.5, 0.5)], vec![true; 3]),
            |t, v| Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Train)?.0),
        ),
        case(
            "batch_norm_eval",
            |r| (vec![uniform(r, &[3, 2, 2, 2], -2.0, 2.0), uniform(r, &[2], 0.5, 1.5), uniform(r, &[2], -0.5, 0.5)], vec![true; 3]),
            |t, v| {
                let (mean, var) = ([0.3, -0.2], [1.5, 0.7]);
                Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var })?.0)
            },
        ),
        case(
            "reshape",
            |r| (vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], vec![true]),
            |t, v| t.reshape(v[0], &[6, 4]),
        ),
        case(
            "permute",
            |r| (vec![uniform(r, &[2, 3, 4, 2], -1.0, 1.0)], vec![true]),
            |t, v| t.permute(v[0], &[0, 2, 3, 1]),
        ),
        case(
            "l2_distance",
            |r| (vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], vec![true; 2]),
            |t, v| t.l2_distance(v[0], v[1]),
        ),
        case(
            "add",
            |r| (vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], vec![true; 2]),
            |t, v| t.add(v[0], v[1]),
        ),
        case(
            "mul",
            |r| (vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], vec![true; 2]),
            |t, v| t.mul(v[0], v[1]),
        ),
        case("scale", |r| (vec![uniform(r, &[5], -1.0, 1.0)], vec![true]), |t, v| Ok(t.scale(v[0], -1.7))),
        case(
            "caps_predict",
            |r| (vec![uniform(r, &[2, 3, 2], -1.0, 1.0), uniform(r, &[3, 2, 3, 2], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)], vec![true; 3]),
            |t, v| t.caps_predict(v[0], v[1], v[2]),
        ),
        case(
            "center_mean",
            |r| (vec![uniform(r, &[2, 3, 4, 2], -1.0, 1.0)], vec![true]),
            |t, v| t.center(v[0], 2, 4.0),
        ),
        case(
            "center_scaled",
            |r| (vec![uniform(r, &[2, 3, 4, 2], -1.0, 1.0)], vec![true]),
            |t, v| t.center(v[0], 2, 3.0),
        ),
        case(
            "route_sum",
            |r| (vec![uniform(r, &[2, 3, 2], 0.0, 1.0), uniform(r, &[2, 3, 2, 3], -1.0, 1.0)], vec![true; 2]),
            |t, v| t.route_sum(v[0], v[1]),
        ),
        case(
            "route_agree",
            |r| (vec![uniform(r, &[2, 3, 2, 3], -1.0, 1.0), uniform(r, &[2, 2, 3], -1.0, 1.0)], vec![true; 2]),
            |t, v| t.route_agree(v[0], v[1]),
        ),
        case("squash", |r| (vec![uniform(r, &[3, 4], -1.5, 1.5)], vec![true]), |t, v| Ok(t.squash(v[0]))),
        case(
            "slice_last",
            |r| (vec![uniform(r, &[2, 3, 5], -1.0, 1.0)], vec![true]),
            |t, v| t.slice_last(v[0], 1, 4),
        ),
        case(
            "mean_axis",
            |r| (vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], vec![true]),
            |t, v| t.mean_axis(v[0], 1),
        ),
        case("sum", |r| (vec![uniform(r, &[2, 3], -1.0, 1.0)], vec![true]), |t, v| Ok(t.sum(v[0]))),
        case(
            "mse",
            |r| (vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)], vec![true; 2]),
            |t, v| t.mse(v[0], v[1]),
        ),
        case(
            "l2_loss",
            |r| (vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)], vec![true; 2]),
            |t, v| t.l2_loss(v[0], v[1]),
        ),
        case(
            "cross_entropy",
            |r| (vec![uniform(r, &[3, 4], -2.0, 2.0)], vec![true]),
            |t, v| t.cross_entropy(v[0], &[0, 3, 1]),
        ),
        case(
            "bce_with_logits",
            |r| (vec![uniform(r, &[4], -3.0, 3.0)], vec![true]),
            |t, v| {
                let a = t.bce_with_logits(v[0], 1.0);
                let b = t.bce_with_logits(v[0], 0.0);
                t.weighted_sum(&[(a, 0.7), (b, 0.3)])
            },
        ),
        case(
            "dynamic_routing_unrolled",
            |r| (vec![uniform(r, &[2, 4, 3, 2], -1.0, 1.0)], vec![true]),
            |t, v| {
                let shape = t.shape(v[0]).to_vec();
                let mut logits = t.constant(Tensor::zeros(&shape[..3]));
                let mut out = None;
                for it in 0..3 {
                    let q = t.softmax(logits, 2)?;
                    let s = t.route_sum(q, v[0])?;
                    let vv = t.squash(s);
                    out = Some(vv);
                    if it < 2 {
                        let a = t.route_agree(v[0], vv)?;
                        logits = t.add(logits, a)?;
                    }
                }
                Ok(out.unwrap())
            },
        ),
        case(
            "three_layer_net",
            |r| {
                (
                    vec![
                        uniform(r, &[4, 3], -1.0, 1.0),
                        uniform(r, &[3, 5], -1.0, 1.0),
                        uniform(r, &[5], -0.5, 0.5),
                        uniform(r, &[5, 4], -1.0, 1.0),
                        uniform(r, &[4], -0.5, 0.5),
                        uniform(r, &[4, 2], -1.0, 1.0),
                        uniform(r, &[2], -0.5, 0.5),
                    ],
                    vec![true; 7],
                )
            },
            |t, v| {
                let h = t.dense(v[0], v[1], Some(v[2]))?;
                let h = t.sigmoid(h);
                let h = t.dense(h, v[3], Some(v[4]))?;
                let h = t.sigmoid(h);
                let o = t.dense(h, v[5], Some(v[6]))?;
                t.softmax(o, 1)
            },
        ),
    ]
}
