//! Writes a few scenes in every style as netpbm files.

use std::path::PathBuf;

use tqdm_core::synthdata::{generate_scene, write_scene, DomainStyle};

fn main() -> tqdm_core::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "scenes".into()));
    std::fs::create_dir_all(&out)?;
    let mut styles = vec![DomainStyle::Source];
    styles.extend(DomainStyle::targets());
    for seed in 0..4 {
        for style in &styles {
            let scene = generate_scene(seed, 8, 64, *style)?;
            write_scene(&out, &format!("{seed}_{style}"), &scene)?;
        }
    }
    Ok(())
}
