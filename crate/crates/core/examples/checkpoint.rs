//! Saving a network, reloading it, and detecting a flipped bit.

use caim::checkpoint::Checkpoint;
use caim::network::{insert_caim, BackboneSpec, Conditioning, FrozenBackbone, InsertionPlan};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> caim::Result<()> {
    let spec = BackboneSpec::default();
    let mut backbone = FrozenBackbone::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    backbone.freeze();
    let net = insert_caim(backbone, InsertionPlan::new([1, 2])?, 7)?;

    let ck = Checkpoint::from_network(&net);
    let bytes = ck.to_bytes();
    println!("{} tensors, {} bytes", ck.entries().len(), bytes.len());
    for name in ck.names().filter(|n| n.starts_with("caim/1/")) {
        println!("  {name} {:?}", ck.get(name).unwrap().shape());
    }

    let back = Checkpoint::from_bytes(&bytes)?.to_network(&spec, Conditioning::Conditional)?;
    println!("round trip equal: {}", back == net);
    println!("re-encoded identical: {}", Checkpoint::from_network(&back).to_bytes() == bytes);

    let mut damaged = bytes;
    let i = damaged.len() / 3;
    damaged[i] ^= 0x10;
    match Checkpoint::from_bytes(&damaged) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("corruption detected: {e}"),
    }
    Ok(())
}
