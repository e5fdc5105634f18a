//! Regenerates the bundled sample images.
//!
//! cargo run -p walmafa-cli --example make_samples [-- <dir>]

use std::path::PathBuf;

fn main() {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets"));
    if let Err(e) = walmafa_cli::samples::write_bundle(&dir) {
        eprintln!("{e}");
        std::process::exit(i32::from(e.exit_code()));
    }
    println!("wrote samples to {}", dir.display());
}
