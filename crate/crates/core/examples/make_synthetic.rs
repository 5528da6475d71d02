//! Writes a synthetic BIDS dataset: `make_synthetic <dir> [subjects] [seed]`.

use std::path::PathBuf;

use segkit::synth::{generate_dataset, SynthSpec};

fn main() -> std::io::Result<()> {
    let mut args = std::env::args().skip(1);
    let root = PathBuf::from(args.next().unwrap_or_else(|| "synthetic_bids".into()));
    let mut spec = SynthSpec::default();
    if let Some(n) = args.next() {
        spec.subjects = n.parse().expect("subjects must be a number");
    }
    if let Some(s) = args.next() {
        spec.seed = s.parse().expect("seed must be a number");
    }
    let ids = generate_dataset(&root, &spec)?;
    println!("wrote {} subjects to {}", ids.len(), root.display());
    Ok(())
}
