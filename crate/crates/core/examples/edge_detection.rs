//! Difference-of-Gaussians edges, thinning and chain linking on one frame.
//!
//! `cargo run --example edge_detection [image.png]`; without an argument a
//! frame of the rendered test scene is used.

use edgepoint_slam::dataset::load_gray;
use edgepoint_slam::edges::{dog_edges, link_edges, thin_edges};
use edgepoint_slam::synthetic::{write_textured_sequence, SyntheticConfig};
use edgepoint_slam::{Config, ImageFrame};

fn main() -> edgepoint_slam::Result<()> {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let path = match std::env::args().nth(1) {
        Some(p) => p.into(),
        None => {
            let cfg = SyntheticConfig { frames: 1, ..SyntheticConfig::default() };
            write_textured_sequence(tmp.path(), &cfg)?;
            tmp.path().join("rgb/00000.png")
        }
    };
    let (w, h, pixels) = load_gray(&path)?;
    let frame = ImageFrame::new(0, 0.0, w, h, pixels)?;

    let e = Config::default().edges;
    let raw = dog_edges(&frame, e.sigma_small, e.sigma_large, e.threshold);
    let thin = thin_edges(&raw);
    let chains = link_edges(&thin, e.min_chain_len);
    let longest = chains.iter().map(|c| c.len()).max().unwrap_or(0);

    println!("{}: {w}x{h}", path.display());
    println!("edge pixels {} -> {} after thinning", raw.count(), thin.count());
    println!("{} chains of at least {} pixels, longest {longest}", chains.len(), e.min_chain_len);
    Ok(())
}
