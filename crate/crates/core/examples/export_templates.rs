//! Rewrites the shipped template assets from their generators.

use meshrecon::mesh::{save_mesh, templates::TemplateKind};

fn main() -> meshrecon::Result<()> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("assets");
    for kind in [TemplateKind::Icosphere, TemplateKind::CapsuleHand] {
        let t = kind.generate();
        let stem = kind.asset_stem();
        save_mesh(&t.coarse, dir.join(format!("{stem}.obj")))?;
        save_mesh(&t.fine, dir.join(format!("{stem}_fine.obj")))?;
        std::fs::write(dir.join(format!("{stem}_keypoints.json")), t.keypoints.to_json() + "\n")?;
    }
    Ok(())
}
