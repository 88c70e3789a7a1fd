mod common;

use patchvote::ann::{brute_force_knn, AnnParams};
use patchvote::codebook::{
    build_codebook, entry_bytes, merge, Codebook, CodebookEntry, LocalVote, SearchMode,
    HEADER_BYTES,
};
use patchvote::descriptor::Regressor;
use patchvote::geom::{sample_icosahedron_views, CameraIntrinsics, Vec3, ViewpointSet};
use patchvote::mesh::{cube, l_prism};
use patchvote::patch::{sample_view_patches, PatchConfig, PatchMask};
use patchvote::render::render_window;
use patchvote::Error;
use proptest::prelude::*;

fn regressor() -> Regressor {
    Regressor::fit_pca(&common::toy_patches(150, 12), 8).unwrap()
}

fn cfg(step: usize) -> PatchConfig {
    PatchConfig {
        grid_step: step,
        ..PatchConfig::default()
    }
}

fn one_view(views: &ViewpointSet, i: usize) -> ViewpointSet {
    ViewpointSet {
        poses: vec![views.poses[i]],
        vertex_count: 1,
        ..views.clone()
    }
}

#[test]
fn entry_count_matches_an_independent_recount() {
    let mesh = cube(0.1);
    let k = CameraIntrinsics::default();
    let views = sample_icosahedron_views(1, 0.6, 1).unwrap();
    assert_eq!(views.len(), 42);
    let book = build_codebook(
        &mesh,
        0,
        &views,
        &k,
        &regressor(),
        &cfg(8),
        &AnnParams::default(),
    )
    .unwrap();
    let expected: usize = views
        .poses
        .iter()
        .map(|pose| sample_view_patches(&render_window(&mesh, pose, &k, 2).view, &cfg(8)).len())
        .sum();
    assert_eq!(book.len(), expected);
    assert_eq!(book.descriptors().len(), expected * 8);
    assert_eq!(book.object_ids(), vec![0]);
}

#[test]
fn single_view_stores_one_entry_per_patch() {
    let mesh = l_prism(0.14, 0.05, 0.06);
    let k = CameraIntrinsics::default();
    let views = sample_icosahedron_views(0, 0.6, 1).unwrap();
    let reg = regressor();
    let single = one_view(&views, 3);
    let book = build_codebook(&mesh, 9, &single, &k, &reg, &cfg(6), &AnnParams::default()).unwrap();
    let window = render_window(&mesh, &single.poses[0], &k, 2);
    let samples = sample_view_patches(&window.view, &cfg(6));
    assert_eq!(book.len(), samples.len());

    // Each stored offset leads from its patch center to the object centroid.
    let centroid = single.poses[0].transform_point(&mesh.centroid());
    for (i, (p, mask)) in samples.iter().enumerate() {
        let e = book.entry(i);
        assert_eq!(e.object_id, 9);
        assert_eq!(&e.mask, mask);
        assert!((p.center_point + e.vote.offset - centroid).norm() < 1e-6);
        let d = reg.encode(p).unwrap();
        assert_eq!(book.descriptor(i), &d[..]);
    }
}

#[test]
fn stored_orientations_are_canonical_unit_quaternions() {
    let views = sample_icosahedron_views(0, 0.6, 3).unwrap();
    let book = build_codebook(
        &cube(0.1),
        0,
        &views,
        &CameraIntrinsics::default(),
        &regressor(),
        &cfg(10),
        &AnnParams::default(),
    )
    .unwrap();
    for e in book.entries() {
        let q = e.vote.orientation.quaternion();
        assert!(q.w >= 0.0);
        assert!((q.norm() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn save_load_identity_and_file_size() {
    let views = sample_icosahedron_views(0, 0.6, 2).unwrap();
    let book = build_codebook(
        &cube(0.1),
        4,
        &views,
        &CameraIntrinsics::default(),
        &regressor(),
        &cfg(12),
        &AnnParams::default(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("book.bin");
    book.save(&path).unwrap();
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(size, HEADER_BYTES + book.len() * entry_bytes(8));
    assert_eq!(entry_bytes(8), 4 * 8 + 12 + 16 + 128 + 4);

    let back = Codebook::load(&path, &AnnParams::default()).unwrap();
    assert_eq!(back, book);
    assert_eq!(back.to_bytes(), book.to_bytes());

    let bytes = book.to_bytes();
    for cut in [0, 10, HEADER_BYTES, bytes.len() - 1] {
        assert!(matches!(
            Codebook::from_bytes(&bytes[..cut], &AnnParams::default()),
            Err(Error::Format { .. })
        ));
    }
    assert!(matches!(
        Codebook::load(dir.path().join("absent.bin"), &AnnParams::default()),
        Err(Error::Io { .. })
    ));
}

#[test]
fn merging() {
    let views = sample_icosahedron_views(0, 0.6, 1).unwrap();
    let k = CameraIntrinsics::default();
    let reg = regressor();
    let ann = AnnParams::default();
    let a = build_codebook(&cube(0.1), 0, &views, &k, &reg, &cfg(12), &ann).unwrap();
    let b = build_codebook(
        &l_prism(0.14, 0.05, 0.06),
        1,
        &views,
        &k,
        &reg,
        &cfg(12),
        &ann,
    )
    .unwrap();
    assert_eq!(merge(std::slice::from_ref(&a), &ann).unwrap(), a);
    let ab = merge(&[a.clone(), b.clone()], &ann).unwrap();
    assert_eq!(ab.len(), a.len() + b.len());
    assert_eq!(ab.object_ids(), vec![0, 1]);
    assert_eq!(ab.entry(a.len()), b.entry(0));
    assert!(merge(&[], &ann).is_err());
    let narrow = build_codebook(
        &cube(0.1),
        0,
        &views,
        &k,
        &Regressor::fit_pca(&common::toy_patches(60, 12), 4).unwrap(),
        &cfg(12),
        &ann,
    )
    .unwrap();
    assert!(matches!(
        merge(&[a, narrow], &ann),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn build_rejects_bad_inputs() {
    let views = sample_icosahedron_views(0, 0.6, 1).unwrap();
    let k = CameraIntrinsics::default();
    let ann = AnnParams::default();
    let empty = ViewpointSet {
        poses: vec![],
        ..views.clone()
    };
    assert!(build_codebook(&cube(0.1), 0, &empty, &k, &regressor(), &cfg(8), &ann).is_err());
    let untrained =
        patchvote::descriptor::RegressorSpec::new(patchvote::descriptor::RegressorKind::Pca, 4)
            .build(0)
            .unwrap();
    assert!(matches!(
        build_codebook(&cube(0.1), 0, &views, &k, &untrained, &cfg(8), &ann),
        Err(Error::State(_))
    ));
}

fn synthetic_book(n: usize, f: usize, values: &[f32]) -> Codebook {
    let entries = (0..n)
        .map(|i| CodebookEntry {
            vote: LocalVote::new(Vec3::new(i as f64, 0.0, 0.0), Default::default()),
            mask: PatchMask::default(),
            object_id: 0,
        })
        .collect();
    Codebook::from_parts(
        f,
        values[..n * f].to_vec(),
        entries,
        &AnnParams {
            trees: 4,
            checks: 16,
            leaf_size: 4,
            seed: 1,
        },
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_search_equals_brute_force(
        n in 1usize..60,
        values in proptest::collection::vec(-1.0f32..1.0, 60 * 5),
        query in proptest::collection::vec(-1.0f32..1.0, 5),
        k in 1usize..8,
    ) {
        let book = synthetic_book(n, 5, &values);
        let exact = book.knn(&query, k, SearchMode::Exact).unwrap();
        let brute = brute_force_knn(&values[..n * 5], 5, &query, k);
        prop_assert_eq!(&exact, &brute);
        prop_assert_eq!(exact.len(), k.min(n));
        prop_assert!(exact.windows(2).all(|w| w[0].1 <= w[1].1));
        let approx = book.knn(&query, k, SearchMode::Approx).unwrap();
        prop_assert_eq!(approx.len(), k.min(n));
        prop_assert!(approx.iter().zip(&exact).all(|(a, e)| a.1 >= e.1 - 1e-6));
    }

    #[test]
    fn serialization_round_trips(
        n in 1usize..30,
        values in proptest::collection::vec(-10.0f32..10.0, 30 * 3),
    ) {
        let book = synthetic_book(n, 3, &values);
        let bytes = book.to_bytes();
        prop_assert_eq!(bytes.len(), HEADER_BYTES + n * entry_bytes(3));
        let back = Codebook::from_bytes(&bytes, book.ann_params()).unwrap();
        prop_assert_eq!(back, book);
    }
}
