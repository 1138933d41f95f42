//! One CAIM block: the closed gate is an exact identity, the open gate
//! re-styles the feature map.

use caim::{count_block_cost, CaimBlock, Gate, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> caim::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let block = CaimBlock::new(8, &mut rng);
    let data = (0..2 * 8 * 6 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = Tensor::new([2, 8, 6, 6], data)?;

    let mut tape = Tape::new();
    let bound = block.bind(&mut tape);
    let x = tape.constant(f.clone());
    let closed = bound.forward(&mut tape, x, Gate::Closed)?;
    let open = bound.forward(&mut tape, x, Gate::Open)?;
    let xi = bound.style_features(&mut tape, x)?;
    let m = bound.modulation_params(&mut tape, xi)?;

    println!("gate 0 bit-exact identity: {}", tape.tensor(closed).bit_eq(&f));
    println!("gate 1 max |Δ|:            {:.4}", tape.tensor(open).max_abs_diff(&f));
    println!("sigma (sample 0): {:?}", &tape.value(m.sigma)[..8]);
    println!("mu    (sample 0): {:?}", &tape.value(m.mu)[..8]);

    let cost = count_block_cost(8, 6, 6);
    println!("parameters: {} (counted {}), FLOPs per sample: {}", cost.params, block.num_parameters(), cost.flops);
    Ok(())
}
