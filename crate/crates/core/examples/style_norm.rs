//! Instance normalization and AdaIN on random feature maps.

use caim::style_norm::{adain, instance_norm, InstanceNormParams, DEFAULT_EPSILON};
use caim::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stats(t: &Tensor) -> Vec<(f64, f64)> {
    let hw = t.shape()[2] * t.shape()[3];
    t.data()
        .chunks(hw)
        .map(|p| {
            let m = p.iter().sum::<f64>() / hw as f64;
            let v = p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / hw as f64;
            (m, v.sqrt())
        })
        .collect()
}

fn main() -> caim::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut map = |scale: f64, shift: f64| {
        let data = (0..2 * 3 * 8 * 8).map(|_| rng.random_range(-1.0..1.0) * scale + shift).collect();
        Tensor::new([2, 3, 8, 8], data).unwrap()
    };
    let content = map(4.0, 3.0);
    let style = map(0.5, -1.0);

    let mut tape = Tape::new();
    let c = tape.constant(content.clone());
    let s = tape.constant(style.clone());
    let affine = InstanceNormParams::with_values(vec![2.0, 1.0, 0.5], vec![5.0, 0.0, -1.0])?;
    let normed = instance_norm(&mut tape, c, &InstanceNormParams::affine_free(3), DEFAULT_EPSILON)?;
    let scaled = instance_norm(&mut tape, c, &affine, DEFAULT_EPSILON)?;
    let styled = adain(&mut tape, c, s, DEFAULT_EPSILON)?;

    println!("plane   content(mean,std)   IN            IN(γ,β)        style          AdaIN");
    let rows = [
        stats(&content),
        stats(&tape.tensor(normed)),
        stats(&tape.tensor(scaled)),
        stats(&style),
        stats(&tape.tensor(styled)),
    ];
    for i in 0..rows[0].len() {
        print!("{i:>5}");
        for r in &rows {
            print!("  ({:>6.3},{:>6.3})", r[i].0, r[i].1);
        }
        println!();
    }
    Ok(())
}
