//! Reverse-mode gradients from the tape compared with central differences.

use atdn::tensor::{ParamStore, Tape, Tensor};

fn loss(store: &ParamStore<f64>) -> (Tape<f64>, atdn::tensor::Var) {
    let mut tape = Tape::new();
    let w = tape.param(store, store.find("w").unwrap());
    let x = tape.param(store, store.find("x").unwrap());
    let h = tape.matmul(x, w).unwrap();
    let h = tape.tanh(h).unwrap();
    let l = tape.sum_sq(h).unwrap();
    (tape, l)
}

fn main() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::new(vec![3, 2], vec![0.3, -0.5, 0.8, 0.1, -0.2, 0.6]).unwrap());
    store.add("x", Tensor::new(vec![2, 3], vec![1.0, -0.4, 0.7, 0.2, 0.9, -1.1]).unwrap());
    let (tape, l) = loss(&store);
    let grads = tape.backward(l).unwrap();
    store.set_grads(&grads);

    let h = 1e-6;
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let analytic = store.get(id).grad.clone().unwrap();
        for (i, a) in analytic.iter().enumerate() {
            let mut probe = store.clone();
            probe.get_mut(id).value.data_mut()[i] += h;
            let (t1, l1) = loss(&probe);
            probe.get_mut(id).value.data_mut()[i] -= 2.0 * h;
            let (t2, l2) = loss(&probe);
            let numeric = (t1.value(l1).data()[0] - t2.value(l2).data()[0]) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
    }
    println!("loss {:.6}, worst relative gradient error {worst:.2e}", tape.value(l).data()[0]);
}
