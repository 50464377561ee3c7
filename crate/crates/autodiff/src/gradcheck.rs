//! Central finite differences, used as an independent oracle for tape gradients.

use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute difference norm when both
/// vectors are (numerically) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: &'static str,
    pub rel_err: f64,
}

type Build = fn(&mut Tape<'_>, &[Var]) -> Result<Var>;

#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
    AwayFromZero,
}

struct Case {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    domain: Domain,
    build: Build,
}

const CASES: &[Case] = &[
    Case { name: "matmul", shapes: &[&[3, 4], &[4, 2]], domain: Domain::Any, build: |t, v| t.matmul(v[0], v[1]) },
    Case { name: "matmul_vec_mat", shapes: &[&[4], &[4, 3]], domain: Domain::Any, build: |t, v| t.matmul(v[0], v[1]) },
    Case { name: "matmul_mat_vec", shapes: &[&[3, 4], &[4]], domain: Domain::Any, build: |t, v| t.matmul(v[0], v[1]) },
    Case { name: "add", shapes: &[&[2, 3], &[2, 3]], domain: Domain::Any, build: |t, v| t.add(v[0], v[1]) },
    Case { name: "add_broadcast", shapes: &[&[4, 3], &[3]], domain: Domain::Any, build: |t, v| t.add(v[0], v[1]) },
    Case { name: "sub", shapes: &[&[5], &[5]], domain: Domain::Any, build: |t, v| t.sub(v[0], v[1]) },
    Case { name: "sub_scalar", shapes: &[&[5], &[1]], domain: Domain::Any, build: |t, v| t.sub(v[0], v[1]) },
    Case { name: "mul", shapes: &[&[2, 3], &[2, 3]], domain: Domain::Any, build: |t, v| t.mul(v[0], v[1]) },
    Case { name: "mul_broadcast", shapes: &[&[3, 4], &[1, 4]], domain: Domain::Any, build: |t, v| t.mul(v[0], v[1]) },
    Case { name: "minimum", shapes: &[&[6], &[6]], domain: Domain::AwayFromZero, build: |t, v| t.minimum(v[0], v[1]) },
    Case { name: "maximum", shapes: &[&[6], &[6]], domain: Domain::AwayFromZero, build: |t, v| t.maximum(v[0], v[1]) },
    Case { name: "scale", shapes: &[&[4]], domain: Domain::Any, build: |t, v| Ok(t.scale(v[0], -1.7)) },
    Case { name: "concat", shapes: &[&[2, 3], &[1, 3], &[3, 3]], domain: Domain::Any, build: |t, v| t.concat(v) },
    Case { name: "slice", shapes: &[&[3, 4]], domain: Domain::Any, build: |t, v| t.slice(v[0], 2, 7) },
    Case { name: "reshape", shapes: &[&[6]], domain: Domain::Any, build: |t, v| t.reshape(v[0], vec![2, 3]) },
    Case { name: "sum", shapes: &[&[2, 3]], domain: Domain::Any, build: |t, v| Ok(t.sum(v[0])) },
    Case { name: "mean", shapes: &[&[7]], domain: Domain::Any, build: |t, v| Ok(t.mean(v[0])) },
    Case { name: "max", shapes: &[&[7]], domain: Domain::AwayFromZero, build: |t, v| Ok(t.max(v[0])) },
    Case { name: "tanh", shapes: &[&[5]], domain: Domain::Any, build: |t, v| Ok(t.tanh(v[0])) },
    Case { name: "sigmoid", shapes: &[&[5]], domain: Domain::Any, build: |t, v| Ok(t.sigmoid(v[0])) },
    Case { name: "relu", shapes: &[&[6]], domain: Domain::AwayFromZero, build: |t, v| Ok(t.relu(v[0])) },
    Case { name: "exp", shapes: &[&[5]], domain: Domain::Any, build: |t, v| Ok(t.exp(v[0])) },
    Case { name: "log", shapes: &[&[5]], domain: Domain::Positive, build: |t, v| Ok(t.log(v[0])) },
    Case { name: "softmax_axis0", shapes: &[&[4, 3]], domain: Domain::Any, build: |t, v| t.softmax(v[0], 0) },
    Case { name: "softmax_axis1", shapes: &[&[4, 3]], domain: Domain::Any, build: |t, v| t.softmax(v[0], 1) },
    Case { name: "log_softmax", shapes: &[&[6]], domain: Domain::Any, build: |t, v| t.log_softmax(v[0], 0) },
];

/// Checks every tape primitive against central differences (step `h`) on
/// inputs drawn from `seed`. The probe loss is `Σ w ⊙ op(inputs)` with random
/// weights `w`, so every output element contributes.
pub fn primitive_suite(seed: u64, h: f64) -> Result<Vec<GradCheck>> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(CASES.len());
    for case in CASES {
        let inputs: Vec<Tensor> = case
            .shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|_| sample(&mut rng, case.domain)).collect();
                Tensor::new(s.to_vec(), data)
            })
            .collect::<Result<_>>()?;

        // Output size is needed before weights can be drawn.
        let probe_len = {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| t.input(x)).collect();
            let y = (case.build)(&mut t, &vars)?;
            t.numel(y)
        };
        let weights: Vec<f64> = (0..probe_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss_of = |t: &mut Tape<'_>, vars: &[Var]| -> Result<Var> {
            let y = (case.build)(t, vars)?;
            let shape = t.shape(y).to_vec();
            let w = t.constant(shape, weights.clone())?;
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|x| tape.input(&x.clone().with_grad()))
            .collect();
        let loss = loss_of(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        let analytic: Vec<f64> = vars
            .iter()
            .flat_map(|v| grads.input(*v).expect("input grad").to_vec())
            .collect();

        let flat: Vec<f64> = inputs.iter().flat_map(|x| x.data().to_vec()).collect();
        let numeric = central_difference(
            |x| {
                let mut t = Tape::new();
                let mut offset = 0;
                let vars: Vec<Var> = inputs
                    .iter()
                    .map(|inp| {
                        let n = inp.numel();
                        let v = t
                            .constant(inp.shape().to_vec(), x[offset..offset + n].to_vec())
                            .expect("shape");
                        offset += n;
                        v
                    })
                    .collect();
                let l = loss_of(&mut t, &vars).expect("probe loss");
                t.item(l)
            },
            &flat,
            h,
        );
        out.push(GradCheck {
            name: case.name,
            rel_err: relative_error(&analytic, &numeric),
        });
    }
    Ok(out)
}

fn sample<R: Rng>(rng: &mut R, domain: Domain) -> f64 {
    match domain {
        Domain::Any => rng.gen_range(-2.0..2.0),
        Domain::Positive => rng.gen_range(0.2..3.0),
        Domain::AwayFromZero => {
            let mag = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        }
    }
}
