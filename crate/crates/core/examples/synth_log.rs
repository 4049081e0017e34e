//! Writes a synthetic interaction log in the 4-column tab-separated layout
//! the CLI ingests, for trying the engine without a real dataset.
//!
//! ```text
//! cargo run --release -p cfct-core --example synth_log -- out.tsv          # small corpus
//! cargo run --release -p cfct-core --example synth_log -- out.tsv ml100k   # MovieLens-100K scale
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};

use cfct_core::synth::{generate, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args.next().ok_or("usage: synth_log <out.tsv> [ml100k]")?;
    let cfg = match args.next().as_deref() {
        None => SynthConfig::default(),
        Some("ml100k") => SynthConfig::ml100k_scale(),
        Some(other) => return Err(format!("unknown preset {other:?}, expected `ml100k`").into()),
    };

    let rows = generate(&cfg)?;
    let mut w = BufWriter::new(File::create(&path)?);
    for r in &rows {
        writeln!(w, "{}\t{}\t{}\t0", r.user_token, r.item_token, r.weight)?;
    }
    w.flush()?;
    eprintln!("wrote {} interactions to {path}", rows.len());
    Ok(())
}
