//! Parameter and FLOP overhead of every prefix insertion plan.

use caim::count_block_cost;
use caim::experiment::cost_table;
use caim::network::BackboneSpec;

fn main() -> caim::Result<()> {
    let spec = BackboneSpec::default();
    println!("{}", cost_table(&spec)?);
    println!();
    println!("{:>4} {:>10} {:>12}", "C", "params", "flops@8x8");
    for c in [1, 4, 16, 64, 128] {
        let b = count_block_cost(c, 8, 8);
        println!("{c:>4} {:>10} {:>12}", b.params, b.flops);
    }
    Ok(())
}
