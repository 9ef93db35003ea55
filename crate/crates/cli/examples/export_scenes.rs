//! Writes the sample scene files under scenes/ at the workspace root.
//! Numbers print in shortest round-trip form, so loading a written file
//! reproduces the generator output bit for bit.

use binflow::scene::{gen_quad, gen_teapot, write_patches, TriScene};
use std::fmt::Write as _;
use std::path::PathBuf;

fn obj_text(scene: &TriScene) -> String {
    let mut out = String::from("# two triangles covering a camera-facing square\n");
    for (k, t) in scene.tris.iter().enumerate() {
        for p in &t.pos {
            writeln!(out, "v {} {} {}", p.x, p.y, p.z).unwrap();
        }
        for n in &t.normal {
            writeln!(out, "vn {} {} {}", n.x, n.y, n.z).unwrap();
        }
        let b = 3 * k + 1;
        writeln!(out, "f {}//{} {}//{} {}//{}", b, b, b + 1, b + 1, b + 2, b + 2).unwrap();
    }
    out
}

fn main() {
    let scenes = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenes");
    std::fs::create_dir_all(&scenes).unwrap();
    std::fs::write(scenes.join("quad.obj"), obj_text(&gen_quad())).unwrap();
    std::fs::write(scenes.join("teapot.patch"), write_patches(&gen_teapot())).unwrap();
    println!("wrote {}", scenes.canonicalize().unwrap().display());
}
