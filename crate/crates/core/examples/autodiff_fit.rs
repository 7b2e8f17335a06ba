//! Reverse-mode tape basics: gradients of a small expression, a finite
//! difference check, then fitting sin(x) with a two-layer net and AdamW.

use flowlab::autodiff::Tape;
use flowlab::gradcheck::{grad_check, grad_check_params, GradCheckConfig};
use flowlab::models::Linear;
use flowlab::optim::{AdamW, ParamStore};
use flowlab::rng::Rng;
use flowlab::tensor::Tensor;
use flowlab::Result;

fn main() -> Result<()> {
    // f(x, y) = sum(tanh(x) * y)
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.5, -1.0]));
    let y = tape.leaf(Tensor::vector(vec![2.0, 3.0]));
    let th = tape.tanh(x)?;
    let p = tape.mul(th, y)?;
    let f = tape.sum(p)?;
    let g = tape.backward(f)?;
    println!("f = {:.6}", tape.value(f).item());
    println!("df/dx = {:?}", g.get(x).map(|t| t.data().to_vec()));
    println!("df/dy = {:?}", g.get(y).map(|t| t.data().to_vec()));

    let report = grad_check(
        |tape, v| {
            let s = tape.softmax(v[0])?;
            let l = tape.log(s)?;
            let m = tape.mul(l, v[1])?;
            tape.sum(m)
        },
        &[Tensor::vector(vec![0.1, 0.7, -0.4]), Tensor::vector(vec![1.0, 0.0, 0.0])],
        GradCheckConfig::new(1e-5, 1e-6),
    );
    println!("softmax cross-entropy grad check: passed {}, max rel err {:.2e}", report.passed(), report.max_rel_err());

    let mut rng = Rng::new(0);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 1, 32, 1.0, &mut rng);
    let l2 = Linear::new(&mut store, "l2", 32, 1, 1.0, &mut rng);
    let xs: Vec<f64> = (0..128).map(|i| -3.0 + 6.0 * i as f64 / 127.0).collect();
    let inputs = Tensor::matrix(128, 1, xs.clone())?;
    let targets = Tensor::matrix(128, 1, xs.iter().map(|v| v.sin()).collect())?;
    let loss_fn = |tape: &mut Tape, store: &ParamStore| {
        let x = tape.constant(inputs.clone());
        let h = l1.forward(tape, store, x)?;
        let h = tape.tanh(h)?;
        let out = l2.forward(tape, store, h)?;
        let t = tape.constant(targets.clone());
        let d = tape.sub(out, t)?;
        let sq = tape.square(d)?;
        tape.mean(sq)
    };

    let report = grad_check_params(&store, loss_fn, GradCheckConfig::new(1e-5, 1e-5), 1);
    println!("net grad check over {} coordinates: passed {}", report.coords.len(), report.passed());

    let opt = AdamW { lr: 1e-2, ..AdamW::default() };
    for step in 0..=2000 {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, &store)?;
        if step % 500 == 0 {
            println!("step {step:>4}: mse {:.6}", tape.value(loss).item());
        }
        tape.backward_into(loss, &mut store)?;
        opt.step(&mut store)?;
    }
    Ok(())
}
