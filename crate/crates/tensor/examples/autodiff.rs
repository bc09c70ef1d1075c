// Reverse-mode gradients, synchronized group norm and a finite-difference check.

use std::error::Error;

use cubepano_tensor::{grad_check, Graph, Tensor};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0))?;
    let w = g.param(Tensor::from_fn(&[3, 2], |i| (i as f64).cos()))?;
    let y = g.linear(x, w, None)?;
    let y = g.silu(y)?;
    let loss = g.mse(y, &Tensor::zeros(&[2, 2]), &[1.0])?;
    let grads = g.backward(loss)?;
    println!("loss {:.4}", g.value(loss).item());
    println!("dL/dw {:?}", grads.get(w).map(|t| t.data().to_vec()));

    // six faces of one sample, each offset by its index
    let faces = Tensor::from_fn(&[6, 4, 2, 2], |i| (i % 16) as f64 * 0.1 + (i / 16) as f64);
    for sync in [false, true] {
        let mut g = Graph::new();
        let xv = g.constant(faces.clone())?;
        let gamma = g.constant(Tensor::full(&[4], 1.0))?;
        let beta = g.constant(Tensor::zeros(&[4]))?;
        let y = g.group_norm(xv, gamma, beta, 2, 6, sync, 1e-5)?;
        let face_means: Vec<f64> = g.value(y).data().chunks(16).map(|c| c.iter().sum::<f64>() / 16.0).collect();
        println!("synchronized={sync}: per-face means {face_means:.2?}");
    }

    let rep = grad_check(&[faces], 1e-5, |g, v| {
        let gamma = g.constant(Tensor::full(&[4], 1.5))?;
        let beta = g.constant(Tensor::full(&[4], 0.1))?;
        g.group_norm(v[0], gamma, beta, 2, 6, true, 1e-5)
    })?;
    println!("group norm grad check: max rel error {:.1e} over {} entries", rep.max_rel_error, rep.checked);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
