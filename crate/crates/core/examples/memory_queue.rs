//! A fixed-capacity memory bank evicts its oldest entry once full.

use gckd::memory::MemoryBank;
use gckd::numerics::l2_normalize;
use gckd::synth_data::{Domain, Modality};

fn main() -> gckd::Result<()> {
    let mut bank = MemoryBank::new(Domain::Target, Modality::Text, 4, 2)?;
    for it in 0..7u64 {
        let angle = it as f64;
        bank.push(&l2_normalize(&[angle.cos(), angle.sin()])?, it)?;
        let ages: Vec<u64> = bank.entries().map(|e| e.iteration).collect();
        println!("after push {it}: len {} full {:5} entries (oldest first) {ages:?}", bank.len(), bank.is_full());
    }
    let snap = bank.snapshot();
    println!("snapshot is {} x {}", snap.rows(), snap.cols());
    Ok(())
}
