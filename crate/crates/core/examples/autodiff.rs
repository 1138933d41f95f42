//! Reverse-mode gradients of a tiny conv + dense model, checked against a
//! central difference.

use caim::{Tape, Tensor};

fn loss(tape: &mut Tape, x: &Tensor, w: &Tensor, b: &Tensor) -> caim::Result<(caim::Var, caim::Var)> {
    let xv = tape.constant(x.clone());
    let wv = tape.leaf(w);
    let bv = tape.leaf(b);
    let y = tape.conv2d(xv, wv, bv, 1, 1)?;
    let y = tape.relu(y);
    let pooled = tape.global_average_pool(y)?;
    let sq = tape.square(pooled);
    Ok((tape.sum(sq), wv))
}

fn main() -> caim::Result<()> {
    let x = Tensor::new([1, 1, 3, 3], (0..9).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let w = Tensor::new([2, 1, 3, 3], (0..18).map(|i| ((i * 7) % 5) as f64 / 5.0 - 0.3).collect())?.with_grad();
    let b = Tensor::new([2], vec![0.13, -0.21])?.with_grad();

    let mut tape = Tape::new();
    let (l, wv) = loss(&mut tape, &x, &w, &b)?;
    println!("loss = {:.6}, tape nodes = {}", tape.value(l)[0], tape.len());
    let grads = tape.backward(l)?;
    let analytic = grads.get(wv).expect("weight is trainable");

    let h = 1e-5;
    println!("{:>4} {:>14} {:>14}", "w_i", "reverse", "central diff");
    for i in [0, 4, 9, 13] {
        let mut plus = w.clone();
        plus.data_mut()[i] += h;
        let mut minus = w.clone();
        minus.data_mut()[i] -= h;
        let eval = |w: &Tensor| -> caim::Result<f64> {
            let mut t = Tape::new();
            let (l, _) = loss(&mut t, &x, w, &b)?;
            Ok(t.value(l)[0])
        };
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        println!("{i:>4} {:>14.8} {:>14.8}", analytic[i], numeric);
    }
    Ok(())
}
