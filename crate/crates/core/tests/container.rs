use proptest::prelude::*;
use tdd_core::hsi::{load_cube, save_cube};
use tdd_core::{extract_patches, normalize_cube, BinaryMask, HsiCube, ScoreMap};

fn cube_strategy() -> impl Strategy<Value = HsiCube> {
    (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(h, w, b)| {
        prop::collection::vec(-1e6f32..1e6, h * w * b)
            .prop_map(move |data| HsiCube::new(h, w, b, data).unwrap())
    })
}

proptest! {
    #[test]
    fn cube_round_trip_is_bit_exact(cube in cube_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.hsi.json");
        save_cube(&cube, &p).unwrap();
        let back = load_cube(&p).unwrap();
        prop_assert_eq!(&back, &cube);
        let first = std::fs::read(dir.path().join("c.hsi.bin")).unwrap();
        save_cube(&back, &dir.path().join("d")).unwrap();
        prop_assert_eq!(first, std::fs::read(dir.path().join("d.hsi.bin")).unwrap());
        prop_assert_eq!(
            std::fs::read(dir.path().join("c.hsi.json")).unwrap(),
            std::fs::read(dir.path().join("d.hsi.json")).unwrap()
        );
    }

    #[test]
    fn mask_and_score_round_trip(bits in prop::collection::vec(0u8..2, 12), scores in prop::collection::vec(0.0f64..50.0, 12)) {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::new(3, 4, bits).unwrap();
        m.save(dir.path().join("m")).unwrap();
        prop_assert_eq!(BinaryMask::load(dir.path().join("m.hsi.json")).unwrap(), m);
        // score maps are stored as f32
        let s = ScoreMap::new(4, 3, scores.iter().map(|&v| v as f32 as f64).collect()).unwrap();
        s.save(dir.path().join("s")).unwrap();
        prop_assert_eq!(ScoreMap::load(dir.path().join("s")).unwrap(), s);
    }

    #[test]
    fn normalized_bands_span_unit_interval(cube in cube_strategy()) {
        let n = normalize_cube(&cube);
        for b in 0..n.bands() {
            let band = n.band(b);
            let lo = band.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = band.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(lo == 0.0);
            prop_assert!(hi == 1.0 || hi == 0.0);
            prop_assert!(band.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let twice = normalize_cube(&n);
        for (a, b) in twice.data().iter().zip(n.data()) {
            prop_assert!((a - b).abs() <= f32::EPSILON);
        }
    }

    #[test]
    fn patches_cover_every_pixel(h in 2usize..30, w in 2usize..30, p in 2usize..12, s in 1usize..15) {
        prop_assume!(p <= h.min(w));
        let cube = HsiCube::from_fn(h, w, 1, |r, c, _| (r * w + c) as f32).unwrap();
        let patches = extract_patches(&cube, p, s).unwrap();
        let mut hits = vec![0u32; h * w];
        for patch in &patches {
            prop_assert!(patch.row + p <= h && patch.col + p <= w);
            for r in 0..p {
                for c in 0..p {
                    prop_assert_eq!(patch.data.get(r, c, 0), cube.get(patch.row + r, patch.col + c, 0));
                    hits[(patch.row + r) * w + patch.col + c] += 1;
                }
            }
        }
        prop_assert!(hits.iter().all(|&n| n >= 1));
    }
}

#[test]
fn grid_fixture_values_are_exact_under_renormalization() {
    let cube = HsiCube::from_fn(2, 2, 2, |r, c, b| [0.0, 0.25, 0.5, 1.0][r * 2 + c] * (b + 1) as f32)
        .unwrap();
    let n = normalize_cube(&cube);
    assert_eq!(normalize_cube(&n), n);
    let seeded = normalize_cube(
        &HsiCube::from_fn(5, 5, 2, |r, c, b| ((r * 13 + c * 7 + b * 3) % 11) as f32 * 1.5 - 4.0)
            .unwrap(),
    );
    for b in 0..2 {
        let band = seeded.band(b);
        assert_eq!(band.iter().cloned().fold(f32::INFINITY, f32::min), 0.0);
        assert_eq!(band.iter().cloned().fold(f32::NEG_INFINITY, f32::max), 1.0);
    }
}

#[test]
fn whole_image_patch_and_oversized_patch() {
    let cube = HsiCube::zeros(10, 10, 2);
    let one = extract_patches(&cube, 10, 10).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!((one[0].row, one[0].col), (0, 0));
    assert!(extract_patches(&cube, 11, 1).is_err());
    assert!(extract_patches(&cube, 1, 1).is_err());
    assert!(extract_patches(&cube, 4, 0).is_err());
}
