//! Saves a refocused model, reloads it and re-saves it; prints the manifest
//! entries and whether every blob came back byte-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refconv::checkpoint::{Checkpoint, Stage};
use refconv::models::{build_zoo, Network, SurgeryOptions};
use refconv::training::Precision;

fn main() -> refconv::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("refconv-ckpt"));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = Network::<f32>::init(build_zoo("tiny_dense")?, &mut rng)?;
    let rc = base.surgery(&SurgeryOptions::default(), &mut rng)?;
    let ck = Checkpoint::new(&rc, Stage::Refconv, Precision::F32, 0)?.with_metadata("note", "example")?;
    ck.save(&out.join("a"))?;
    let back = Checkpoint::load(&out.join("a"))?;
    back.save(&out.join("b"))?;
    for e in &ck.manifest.tensors {
        let same = std::fs::read(out.join("a").join(&e.file))? == std::fs::read(out.join("b").join(&e.file))?;
        println!("{:<28} {:<9} {:?} {}", e.file, format!("{:?}", e.kind), e.dims, if same { "same" } else { "DIFFERENT" });
    }
    println!("network equal after reload: {}", back.network == rc);
    println!("written to {}", out.display());
    Ok(())
}
