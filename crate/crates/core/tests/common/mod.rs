#![allow(dead_code)]

use atdn::geometry::Pose;
use atdn::tensor::{ParamStore, SeededRng, Tape, Tensor, Var};
use nalgebra::{DMatrix, Matrix3, Vector3};

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between reverse-mode gradients and central
/// differences of `f` with respect to every element of every input.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    floor: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(&format!("in{i}"), t.clone()))
        .collect();
    let eval = |store: &ParamStore<f64>| -> (f64, Tape<f64>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let loss = f(&mut tape, &vars);
        (tape.value(loss).item(), tape, vars, loss)
    };
    let (_, tape, vars, loss) = eval(&store);
    let grads = tape.backward(loss).expect("backward");
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, &id) in ids.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for e in 0..inputs[k].numel() {
            let orig = store.get(id).value.data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + h;
            let up = eval(&store).0;
            store.get_mut(id).value.data_mut()[e] = orig - h;
            let down = eval(&store).0;
            store.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[e], numeric, floor));
        }
    }
    worst
}

/// Largest relative gradient error over every parameter of `store`.
pub fn gradcheck_store(
    store: &mut ParamStore<f64>,
    floor: f64,
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    let grads = tape.backward(loss).expect("backward");
    store.set_grads(&grads);
    let analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|(_, p)| p.grad.clone().unwrap_or_else(|| vec![0.0; p.value.numel()]))
        .collect();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let value = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let l = f(&mut tape, store);
        tape.value(l).item()
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, &id) in ids.iter().enumerate() {
        for e in 0..analytic[k].len() {
            let orig = store.get(id).value.data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + h;
            let up = value(store);
            store.get_mut(id).value.data_mut()[e] = orig - h;
            let down = value(store);
            store.get_mut(id).value.data_mut()[e] = orig;
            worst = worst.max(rel_err(analytic[k][e], (up - down) / (2.0 * h), floor));
        }
    }
    worst
}

pub fn random_tensor(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Uniform random values bounded away from zero, with random sign.
pub fn signed_away_from_zero(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = 0.1 + rng.uniform();
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::from_f64(shape, &data).unwrap()
}

pub fn random_vec3(rng: &mut SeededRng, scale: f64) -> Vector3<f64> {
    Vector3::new(rng.normal(), rng.normal(), rng.normal()) * scale
}

/// Rotation angle uniform in `[0, max_angle)` about a random axis.
pub fn random_pose(rng: &mut SeededRng, max_angle: f64, trans_scale: f64) -> Pose {
    let axis = random_vec3(rng, 1.0).normalize();
    Pose::from_axis_angle(axis * (max_angle * rng.uniform()), random_vec3(rng, trans_scale))
}

pub fn random_rotation(rng: &mut SeededRng) -> Matrix3<f64> {
    *random_pose(rng, std::f64::consts::PI, 0.0).rotation()
}

/// Orthonormal `d × d` matrix from the QR factorization of a Gaussian matrix.
pub fn random_orthonormal(rng: &mut SeededRng, d: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.normal());
    m.qr().q()
}
