//! Shape sampling uniformity, codec round trips, Chamfer oracles, dataset
//! determinism, and the XYZ interchange format.

use hseq_core::layout::{Modality, Mode};
use hseq_core::worldgen::{
    build_dataset, chamfer, condition_tokens, dequantize_param, quantize_param, read_xyz,
    sample_surface, spec_from_tokens, vocab, write_xyz, Codec, DatasetConfig, Point3, PointCloud,
    ShapeFamily, ShapeSpec,
};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn norm(p: &Point3) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

#[test]
fn sphere_samples_sit_on_the_sphere() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &r in &[1.0, 0.5, 0.0625] {
        let cloud = sample_surface(&ShapeSpec::Sphere { radius: r }, 500, &mut rng).unwrap();
        for p in cloud.points() {
            assert!((norm(p) - r).abs() < 1e-6);
        }
    }
}

#[test]
fn sphere_samples_average_to_the_center() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 10_000usize;
    let cloud = sample_surface(&ShapeSpec::Sphere { radius: 1.0 }, n, &mut rng).unwrap();
    let mut mean = [0.0f64; 3];
    for p in cloud.points() {
        for k in 0..3 {
            mean[k] += p[k];
        }
    }
    // Per-coordinate variance on the unit sphere is 1/3.
    let bound = 3.0 * (1.0f64 / 3.0 / n as f64).sqrt();
    for m in mean {
        assert!((m / n as f64).abs() < bound);
    }
}

#[test]
fn box_samples_lie_on_exactly_one_face() {
    let he = [0.5, 0.3, 0.1];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = sample_surface(&ShapeSpec::Box { half_extents: he }, 2_000, &mut rng).unwrap();
    for p in cloud.points() {
        let mut on_faces = 0;
        for k in 0..3 {
            assert!(p[k].abs() <= he[k] + 1e-9);
            if (p[k].abs() - he[k]).abs() < 1e-6 {
                on_faces += 1;
            }
        }
        assert_eq!(on_faces, 1, "point {p:?} touches {on_faces} faces");
    }
}

#[test]
fn box_faces_are_hit_proportionally_to_area() {
    let he = [0.5, 0.3, 0.1];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10_000usize;
    let cloud = sample_surface(&ShapeSpec::Box { half_extents: he }, n, &mut rng).unwrap();
    let mut hits = [0usize; 3];
    for p in cloud.points() {
        for k in 0..3 {
            if (p[k].abs() - he[k]).abs() < 1e-6 {
                hits[k] += 1;
            }
        }
    }
    let areas = [he[1] * he[2], he[0] * he[2], he[0] * he[1]];
    let total: f64 = areas.iter().sum();
    for k in 0..3 {
        let expected = areas[k] / total;
        let observed = hits[k] as f64 / n as f64;
        assert!(
            (observed - expected).abs() < 0.02,
            "axis {k}: observed {observed:.3}, expected {expected:.3}"
        );
    }
}

#[test]
fn cylinder_samples_cover_side_and_caps_by_area() {
    let (r, h) = (0.4, 0.5);
    let spec = ShapeSpec::Cylinder { radius: r, half_height: h };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000usize;
    let cloud = sample_surface(&spec, n, &mut rng).unwrap();

    let mut side = 0usize;
    let mut z_sum = 0.0;
    for p in cloud.points() {
        let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
        let on_side = (rho - r).abs() < 1e-6 && p[2].abs() <= h + 1e-9;
        let on_cap = (p[2].abs() - h).abs() < 1e-6 && rho <= r + 1e-9;
        assert!(on_side || on_cap, "point {p:?} is off-surface");
        if on_side {
            side += 1;
            z_sum += p[2];
        }
    }
    let side_area = 4.0 * std::f64::consts::PI * r * h;
    let cap_area = 2.0 * std::f64::consts::PI * r * r;
    let expected = side_area / (side_area + cap_area);
    let observed = side as f64 / n as f64;
    assert!((observed - expected).abs() < 0.02);
    // Height is uniform along the side: mean z near 0 within 3 sigma.
    let sigma = h / (3.0f64).sqrt() / (side as f64).sqrt();
    assert!((z_sum / side as f64).abs() < 3.0 * sigma);
}

#[test]
fn codec_round_trips_to_machine_precision() {
    let codec = Codec::fixed();
    assert_eq!(codec.latent_dim(), 64);
    let mut r = StdRng::seed_from_u64(6);
    let points: Vec<Point3> = (0..128)
        .map(|_| {
            let p = [
                r.gen_range(-0.5..0.5),
                r.gen_range(-0.5..0.5),
                r.gen_range(-0.5..0.5),
            ];
            p
        })
        .collect();
    let cloud = PointCloud::new(points.clone()).unwrap();
    let block = codec.encode(&cloud);
    assert_eq!(block.tokens.shape(), &[128, 64]);
    let back = codec.decode(&block).unwrap();
    for (p, q) in points.iter().zip(back.points()) {
        for k in 0..3 {
            assert!((p[k] - q[k]).abs() < 1e-6);
        }
    }
    // Raw per-point left inverse is much tighter than the cloud bound.
    for p in &points {
        let q = codec.decode_point(&codec.encode_point(p));
        for k in 0..3 {
            assert!((p[k] - q[k]).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_latent_decodes_to_the_origin() {
    let codec = Codec::fixed();
    let z = vec![0.0; codec.latent_dim()];
    assert_eq!(codec.decode_point(&z), [0.0, 0.0, 0.0]);
}

#[test]
fn encoding_is_tokenwise() {
    let codec = Codec::fixed();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cloud = sample_surface(&ShapeSpec::Sphere { radius: 0.8 }, 16, &mut rng).unwrap();
    let block = codec.encode(&cloud);

    let perm: Vec<usize> = vec![7, 0, 15, 3, 9, 1, 14, 2, 8, 4, 13, 5, 10, 6, 12, 11];
    let permuted_points: Vec<Point3> = perm.iter().map(|&i| cloud.points()[i]).collect();
    let permuted = codec.encode(&PointCloud::new(permuted_points).unwrap());

    let d = codec.latent_dim();
    for (row, &src) in perm.iter().enumerate() {
        assert_eq!(
            &permuted.tokens.data()[row * d..(row + 1) * d],
            &block.tokens.data()[src * d..(src + 1) * d]
        );
    }
}

#[test]
fn chamfer_matches_hand_values() {
    let a = PointCloud::new(vec![[0.0, 0.0, 0.0]]).unwrap();
    let b = PointCloud::new(vec![[1.0, 0.0, 0.0]]).unwrap();
    assert_eq!(chamfer(&a, &b), 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = sample_surface(&ShapeSpec::Sphere { radius: 0.9 }, 64, &mut rng).unwrap();
    assert_eq!(chamfer(&p, &p), 0.0);
}

#[test]
fn chamfer_equals_the_double_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = sample_surface(&ShapeSpec::Sphere { radius: 0.7 }, 33, &mut rng).unwrap();
    let b = sample_surface(
        &ShapeSpec::Box { half_extents: [0.4, 0.4, 0.3] },
        47,
        &mut rng,
    )
    .unwrap();

    let directed = |from: &PointCloud, to: &PointCloud| -> f64 {
        let mut acc = 0.0;
        for p in from.points() {
            let mut best = f64::INFINITY;
            for q in to.points() {
                let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d2 < best {
                    best = d2;
                }
            }
            acc += best;
        }
        acc / from.len() as f64
    };
    let oracle = 0.5 * (directed(&a, &b) + directed(&b, &a));
    assert_eq!(chamfer(&a, &b), oracle);
    assert_eq!(chamfer(&a, &b), chamfer(&b, &a));
}

#[test]
fn condition_tokens_round_trip_bin_center_specs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for family in ShapeFamily::ALL {
        for _ in 0..20 {
            let spec = hseq_core::worldgen::sample_spec(family, &mut rng);
            let tokens = condition_tokens(&spec);
            assert_eq!(tokens[0], vocab::BOS);
            assert_eq!(tokens[1], vocab::family_token(family));
            assert!(tokens.len() >= 3 && tokens.len() <= 5);
            assert!(tokens.iter().all(|&t| t < vocab::SIZE));
            let back = spec_from_tokens(&tokens).unwrap();
            assert_eq!(back, spec);
        }
    }
    // Quantizer maps every bin center back to its own bin.
    for family in ShapeFamily::ALL {
        let scale = family.param_scale();
        for bin in 0..vocab::PARAM_BINS {
            assert_eq!(quantize_param(dequantize_param(bin, scale), scale), bin);
        }
    }
    assert!(spec_from_tokens(&[vocab::BOS]).is_err());
    assert!(spec_from_tokens(&[vocab::BOS, vocab::PARAM_BASE]).is_err());
    assert!(spec_from_tokens(&[vocab::BOS, vocab::SPHERE, vocab::SPHERE]).is_err());
}

fn desk_config() -> DatasetConfig {
    DatasetConfig {
        families: ShapeFamily::ALL.to_vec(),
        samples_per_family: 10,
        points_per_shape: 64,
        block_size: 32,
        seed: 11,
    }
}

#[test]
fn dataset_counts_layouts_and_ground_truth_fidelity() {
    let codec = Codec::fixed();
    let data = build_dataset(&desk_config(), &codec).unwrap();
    assert_eq!(data.len(), 30);

    for sample in &data {
        let segs = sample.layout.segments();
        assert_eq!(segs[0].modality, Modality::Condition);
        assert_eq!(segs[0].mode, Mode::Serial);
        assert_eq!(segs[0].length, sample.tokens.len());
        assert_eq!(segs.len(), 1 + sample.blocks.len());
        assert_eq!(sample.blocks.len(), 2);
        for (seg, block) in segs[1..].iter().zip(&sample.blocks) {
            assert_eq!(seg.modality, Modality::Latent3d);
            assert_eq!(seg.mode, Mode::Parallel);
            assert_eq!(seg.length, block.len());
        }
        assert_eq!(sample.tokens[1], vocab::family_token(sample.shape.family()));

        // Decoded ground truth recovers the sampled surface exactly.
        let all: Vec<Point3> = sample
            .blocks
            .iter()
            .flat_map(|b| codec.project(b).unwrap())
            .collect();
        let decoded = PointCloud::new(all).unwrap();
        let truth = sample_surface(&sample.shape, 64, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert!(chamfer(&decoded, &decoded) == 0.0);
        // Same family and size: decoded cloud must sit on the spec surface.
        let d = chamfer(&decoded, &truth);
        assert!(d < 0.2, "decoded cloud far from its own spec: {d}");
    }
}

#[test]
fn dataset_is_bit_deterministic_under_its_seed() {
    let codec = Codec::fixed();
    let a = build_dataset(&desk_config(), &codec).unwrap();
    let b = build_dataset(&desk_config(), &codec).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.tokens, y.tokens);
        assert_eq!(x.shape, y.shape);
        assert_eq!(x.blocks.len(), y.blocks.len());
        for (bx, by) in x.blocks.iter().zip(&y.blocks) {
            assert_eq!(bx.tokens.data(), by.tokens.data());
        }
    }

    let mut other = desk_config();
    other.seed = 12;
    let c = build_dataset(&other, &codec).unwrap();
    assert!(a.iter().zip(&c).any(|(x, y)| x.blocks[0].tokens.data() != y.blocks[0].tokens.data()));
}

#[test]
fn dataset_rejects_indivisible_blocks() {
    let mut cfg = desk_config();
    cfg.block_size = 48;
    assert!(build_dataset(&cfg, &Codec::fixed()).is_err());
    let mut empty = desk_config();
    empty.families.clear();
    assert!(build_dataset(&empty, &Codec::fixed()).is_err());
}

#[test]
fn xyz_round_trips_through_its_parser() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cloud = sample_surface(
        &ShapeSpec::Cylinder { radius: 0.5, half_height: 0.4 },
        100,
        &mut rng,
    )
    .unwrap();
    let mut buf = Vec::new();
    write_xyz(&cloud, &mut buf).unwrap();
    let back = read_xyz(&buf[..]).unwrap();
    assert_eq!(back.len(), cloud.len());
    for (p, q) in cloud.points().iter().zip(back.points()) {
        for k in 0..3 {
            assert!((p[k] - q[k]).abs() < 1e-6);
        }
    }
}

#[test]
fn xyz_parser_reports_the_failing_line() {
    let err = read_xyz("0 0 0\n0.1 oops 0.2\n".as_bytes()).unwrap_err();
    match err {
        hseq_core::Error::Parse { pos, .. } => assert_eq!(pos, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
    let err = read_xyz("0 0\n".as_bytes()).unwrap_err();
    match err {
        hseq_core::Error::Parse { pos, .. } => assert_eq!(pos, 1),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn cloud_and_spec_validation() {
    assert!(PointCloud::new(vec![]).is_err());
    assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
    assert!(PointCloud::new(vec![[1.5, 0.0, 0.0]]).is_err());
    let scaled = PointCloud::normalized(vec![[3.0, 0.0, 0.0], [0.0, 1.5, 0.0]]).unwrap();
    assert_eq!(scaled.points()[0], [1.0, 0.0, 0.0]);
    assert_eq!(scaled.points()[1], [0.0, 0.5, 0.0]);

    assert!(ShapeSpec::Sphere { radius: -0.1 }.validate().is_err());
    assert!(ShapeSpec::Sphere { radius: 1.2 }.validate().is_err());
    assert!(ShapeSpec::Box { half_extents: [0.9, 0.9, 0.9] }.validate().is_err());
    assert!(
        ShapeSpec::Cylinder { radius: 0.9, half_height: 0.9 }
            .validate()
            .is_err()
    );
    assert!(ShapeSpec::Sphere { radius: 0.9 }.validate().is_ok());
    assert!(sample_surface(&ShapeSpec::Sphere { radius: 0.5 }, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

proptest! {
    #[test]
    fn codec_round_trip_anywhere_in_the_ball(
        x in -0.57f64..0.57, y in -0.57f64..0.57, z in -0.57f64..0.57
    ) {
        let codec = Codec::fixed();
        let q = codec.decode_point(&codec.encode_point(&[x, y, z]));
        prop_assert!((q[0] - x).abs() < 1e-9);
        prop_assert!((q[1] - y).abs() < 1e-9);
        prop_assert!((q[2] - z).abs() < 1e-9);
    }

    #[test]
    fn chamfer_is_symmetric_and_nonnegative(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let na = rng.gen_range(1..12);
        let nb = rng.gen_range(1..12);
        let draw = |rng: &mut ChaCha8Rng, n: usize| {
            PointCloud::new(
                (0..n)
                    .map(|_| {
                        [
                            rng.gen_range(-0.5..0.5),
                            rng.gen_range(-0.5..0.5),
                            rng.gen_range(-0.5..0.5),
                        ]
                    })
                    .collect(),
            )
            .unwrap()
        };
        let a = draw(&mut rng, na);
        let b = draw(&mut rng, nb);
        prop_assert_eq!(chamfer(&a, &b), chamfer(&b, &a));
        prop_assert!(chamfer(&a, &b) >= 0.0);
    }
}
