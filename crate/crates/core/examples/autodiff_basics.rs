//! Reverse-mode gradients on a scalar tape, checked against finite differences.

use neemo::autodiff::{finite_diff_check, Tape};

fn main() {
    // f(x, y) = sqrt(x² + y²) * sin(x) + max(x, y)
    let point = [0.7, -1.3];
    let tape = Tape::new();
    let v = tape.leaves(&point);
    let (x, y) = (v[0], v[1]);
    let f = (x.square() + y.square()).sqrt() * x.sin() + x.max(y);
    let grads = tape.backward(f).expect("finite graph");
    println!("f({:?}) = {:.6}", point, f.value());
    println!("grad = {:?}", grads.wrt(&v));

    let err = finite_diff_check(
        |_, v| (v[0].square() + v[1].square()).sqrt() * v[0].sin() + v[0].max(v[1]),
        &point,
        1e-5,
    );
    println!("max relative error vs central differences: {err:.2e}");
}
