//! Projection oracles: the pinned origin-pixel example, clamping, set
//! invariances, and the exact one-pixel-pitch translation property.

use pointprompt::geometry::PointCloud;
use pointprompt::projection::{project_depth, ProjectionError, VIEW_ORDER};

fn cloud(points: Vec<[f32; 3]>) -> PointCloud {
    PointCloud::new(points, 0, "proj-test").unwrap()
}

#[test]
fn origin_point_lands_in_center_cell_with_half_closeness() {
    // Single point at the origin, res 4: the +z view has exactly one lit
    // pixel, at (row 2, col 2), with value 0.5.
    let set = project_depth(&cloud(vec![[0.0, 0.0, 0.0]]), 4, 6).unwrap();
    let plus_z = set.view(4);
    for (i, &px) in plus_z.iter().enumerate() {
        if i == 2 * 4 + 2 {
            assert_eq!(px, 0.5);
        } else {
            assert_eq!(px, 0.0, "pixel {i} should be empty");
        }
    }
}

#[test]
fn closeness_encodes_signed_depth() {
    // A point at +x appears with closeness 1 in the +x view and 0 in −x.
    let set = project_depth(&cloud(vec![[1.0, 0.0, 0.0]]), 4, 6).unwrap();
    assert_eq!(set.view(0)[2 * 4 + 2], 1.0);
    assert!(set.view(1).iter().all(|&p| p == 0.0));
}

#[test]
fn boundary_coordinates_clamp_into_the_grid() {
    let n = 1.0f32 / 3.0f32.sqrt();
    let set = project_depth(&cloud(vec![[n, n, n], [-n, -n, -n]]), 4, 6).unwrap();
    // Both points project inside the grid in every view (no panic, one or
    // two lit pixels depending on the cell).
    for v in 0..6 {
        let lit = set.view(v).iter().filter(|&&p| p > 0.0).count();
        assert!(lit >= 1 && lit <= 2);
    }
    // Exact corner +1 coordinates clamp to the last cell.
    let norm_corner = cloud(vec![[0.0, 1.0, 0.0]]);
    let s2 = project_depth(&norm_corner, 4, 6).unwrap();
    // +x view: in-plane axes (y, z) → col from y = 1 clamps to 3.
    let lit: Vec<usize> = s2
        .view(0)
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(i, _)| i)
        .collect();
    assert_eq!(lit, vec![2 * 4 + 3], "row 2 (z=0), col 3 (y=1 clamped)");
}

#[test]
fn projection_is_permutation_invariant_bitwise() {
    let pts = vec![
        [0.3, -0.2, 0.4],
        [-0.5, 0.1, 0.2],
        [0.0, 0.8, -0.1],
        [0.3, -0.2, 0.41],
    ];
    let mut rev = pts.clone();
    rev.reverse();
    let a = project_depth(&cloud(pts), 8, 6).unwrap();
    let b = project_depth(&cloud(rev), 8, 6).unwrap();
    assert_eq!(a, b);
}

#[test]
fn adding_a_point_never_darkens_any_pixel() {
    let base = vec![[0.2, 0.3, -0.4], [-0.6, 0.0, 0.1]];
    let mut more = base.clone();
    more.push([0.21, 0.29, 0.9]);
    let a = project_depth(&cloud(base), 8, 6).unwrap();
    let b = project_depth(&cloud(more), 8, 6).unwrap();
    for v in 0..6 {
        for (pa, pb) in a.view(v).iter().zip(b.view(v)) {
            assert!(pb >= pa);
        }
    }
}

#[test]
fn one_pixel_pitch_translation_shifts_the_footprint_by_one_cell() {
    let res = 8usize;
    let pitch = 2.0 / res as f32;
    let p = [0.1f32, 0.1, 0.3];
    let a = project_depth(&cloud(vec![p]), res, 6).unwrap();
    let b = project_depth(&cloud(vec![[p[0] + pitch, p[1], p[2]]]), res, 6).unwrap();
    // +z view: u = x → column shifts by exactly one.
    let find = |img: &[f32]| -> (usize, usize) {
        let i = img.iter().position(|&px| px > 0.0).unwrap();
        (i / res, i % res)
    };
    let (ra, ca) = find(a.view(4));
    let (rb, cb) = find(b.view(4));
    assert_eq!(ra, rb);
    assert_eq!(cb, ca + 1);
}

#[test]
fn view_subsets_take_the_canonical_prefix() {
    let pc = cloud(vec![[0.0, 0.0, 0.5]]);
    let two = project_depth(&pc, 4, 2).unwrap();
    assert_eq!(two.view_count(), 2);
    assert_eq!(two.directions(), &VIEW_ORDER[..2]);
    let four = project_depth(&pc, 4, 4).unwrap();
    assert_eq!(four.directions(), &VIEW_ORDER[..4]);
    let six = project_depth(&pc, 4, 6).unwrap();
    // The first views of the 2-, 4-, and 6-view sets are identical pixels.
    assert_eq!(two.view(0), six.view(0));
    assert_eq!(four.view(1), six.view(1));
}

#[test]
fn invalid_parameters_are_rejected() {
    let pc = cloud(vec![[0.0, 0.0, 0.0]]);
    assert!(matches!(
        project_depth(&pc, 3, 6),
        Err(ProjectionError::ResolutionTooSmall { got: 3 })
    ));
    for bad in [0usize, 1, 3, 5, 7] {
        assert!(matches!(
            project_depth(&pc, 4, bad),
            Err(ProjectionError::BadViewCount { .. })
        ));
    }
}

#[test]
fn unnormalized_input_is_rejected() {
    let pc = cloud(vec![[1.5, 0.0, 0.0]]);
    assert!(matches!(
        project_depth(&pc, 4, 6),
        Err(ProjectionError::UnnormalizedInput { index: 0, .. })
    ));
}

#[test]
fn flattened_tensor_has_view_rows() {
    let pc = cloud(vec![[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]]);
    let set = project_depth(&pc, 4, 4).unwrap();
    let t = set.flattened();
    assert_eq!(t.shape(), &[4, 16]);
    assert_eq!(&t.data()[..16], set.view(0));
}

#[test]
fn pgm_dump_roundtrips_header_and_values() {
    let dir = tempfile::tempdir().unwrap();
    let pc = cloud(vec![[0.0, 0.0, 0.0]]);
    let set = project_depth(&pc, 4, 6).unwrap();
    let path = dir.path().join("view4.pgm");
    set.write_pgm(4, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut toks = text.split_whitespace();
    assert_eq!(toks.next(), Some("P2"));
    assert_eq!(toks.next(), Some("4"));
    assert_eq!(toks.next(), Some("4"));
    assert_eq!(toks.next(), Some("255"));
    let pixels: Vec<u32> = toks.map(|t| t.parse().unwrap()).collect();
    assert_eq!(pixels.len(), 16);
    assert_eq!(pixels[2 * 4 + 2], 128, "closeness 0.5 → 128");
    assert_eq!(pixels.iter().sum::<u32>(), 128);
}
