#![allow(dead_code)]

use patchvote::geom::{sample_icosahedron_views, CameraIntrinsics};
use patchvote::mesh::{colored_icosphere, cube, l_prism, Mesh};
use patchvote::patch::{sample_view_patches, Patch, PatchConfig};
use patchvote::render::render_views;

pub fn toy_meshes() -> Vec<Mesh> {
    vec![
        cube(0.1),
        colored_icosphere(0.06, 1, 7),
        l_prism(0.14, 0.05, 0.06),
    ]
}

/// Foreground patches from a few rendered views of the toy objects.
pub fn toy_patches(n: usize, step: usize) -> Vec<Patch> {
    let k = CameraIntrinsics::default();
    let views = sample_icosahedron_views(0, 0.6, 1).unwrap();
    let cfg = PatchConfig {
        grid_step: step,
        ..PatchConfig::default()
    };
    let mut out = Vec::new();
    let meshes = toy_meshes();
    'outer: for v in 0..views.len() {
        for mesh in &meshes {
            let view = render_views(mesh, &views, &k).nth(v).unwrap();
            for (p, _) in sample_view_patches(&view, &cfg) {
                out.push(p);
                if out.len() == n {
                    break 'outer;
                }
            }
        }
    }
    out
}
