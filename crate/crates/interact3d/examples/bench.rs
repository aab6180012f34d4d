//! Times one training step of the toy model.

use std::time::Instant;

use interact3d::network::{Network, NetworkConfig};
use interact3d::trainer::{backward, batch_loss, prepare};
use interact3d_core::losses::LossConfig;
use interact3d_core::synthgen::generate_split;

fn main() -> anyhow::Result<()> {
    let net = Network::new(&NetworkConfig::toy())?;
    println!("parameters: {}", net.params().num_scalars());
    let data = prepare(&net, generate_split(2, 1)?.into_iter().map(|g| g.sample).collect())?;
    let items: Vec<_> = data.iter().collect();
    for _ in 0..3 {
        let t = Instant::now();
        let (_, out, g) = batch_loss(&net, &items, &LossConfig::default())?;
        let fwd = t.elapsed();
        let t = Instant::now();
        let _grads = backward(&out, &g)?;
        println!("forward+loss {fwd:?} backward {:?}", t.elapsed());
    }
    Ok(())
}
