use gaitfield::matching::{build_template, compute_field, BranchConfig, FieldKind, MatchingBranch, TextureSuppression};
use gaitfield::sequence::{FeatureSequence, MaskSequence};
use gaitfield::tensor::Tensor4;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    seq: FeatureSequence,
    masks: MaskSequence,
    branch: MatchingBranch,
}

fn instance(seed: u64, len: usize, side: usize, dh: usize, dw: usize, dl: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = BranchConfig {
        in_channels: 3,
        channels: 4,
        delta_h: dh,
        delta_w: dw,
        delta_l: dl,
        ..BranchConfig::static_branch()
    };
    let branch = MatchingBranch::init(&cfg, &mut rng).unwrap();
    let f = Tensor4::from_fn((len, side, side + 1, 3), |_, _, _, _| rng.random_range(-2.0..2.0));
    let m = Tensor4::from_fn((len, side, side + 1, 1), |_, _, _, _| f64::from(rng.random_bool(0.6)));
    Instance { seq: FeatureSequence::new(f, "prop").unwrap(), masks: MaskSequence::new(m).unwrap(), branch }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn template_is_symmetric_and_raster_ordered(dh in 0usize..6, dw in 0usize..6) {
        let t = build_template(dh, dw);
        prop_assert_eq!(t.len(), (2 * dh + 1) * (2 * dw + 1));
        let sums = t.rows().iter().fold([0i32; 2], |acc, r| [acc[0] + r[0], acc[1] + r[1]]);
        prop_assert_eq!(sums, [0, 0]);
        for (k, r) in t.rows().iter().enumerate() {
            prop_assert_eq!(t.index_of(r[0], r[1]), Some(k));
        }
        prop_assert!(t.rows().windows(2).all(|p| (p[0][0], p[0][1]) < (p[1][0], p[1][1])));
    }

    #[test]
    fn fields_are_zero_off_the_silhouette_and_inside_the_window(
        seed in 0u64..10_000, dh in 0usize..3, dw in 0usize..3, dl in 0usize..2,
    ) {
        let inst = instance(seed, 3, 5, dh, dw, dl);
        let field = compute_field(&inst.seq, &inst.masks, &inst.branch).unwrap();
        prop_assert_eq!(field.kind, FieldKind::of_offset(dl));
        let (n, h, w, _) = field.frames.dims();
        prop_assert_eq!(n, 3 - dl);
        for f in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let g = field.frames.pixel(f, y, x);
                    if inst.masks.frames().at(f, y, x, 0) == 0.0 {
                        prop_assert!(g[0].abs() <= 1e-12 && g[1].abs() <= 1e-12);
                    }
                    // A convex combination of template offsets.
                    prop_assert!(g[0].abs() <= dh as f64 + 1e-12);
                    prop_assert!(g[1].abs() <= dw as f64 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn static_frames_depend_only_on_their_own_frame(seed in 0u64..10_000) {
        let inst = instance(seed, 4, 4, 1, 1, 0);
        let full = compute_field(&inst.seq, &inst.masks, &inst.branch).unwrap();
        let tail_seq = FeatureSequence::new(inst.seq.frames().frames(2, 2), "tail").unwrap();
        let tail_masks = MaskSequence::new(inst.masks.frames().frames(2, 2)).unwrap();
        let tail = compute_field(&tail_seq, &tail_masks, &inst.branch).unwrap();
        prop_assert_eq!(tail.frames, full.frames.frames(2, 2));
    }

    #[test]
    fn full_suppression_leaves_nothing_above_threshold(seed in 0u64..10_000, m in 0.0f64..1.5) {
        let inst = instance(seed, 2, 6, 2, 2, 0);
        let field = compute_field(&inst.seq, &inst.masks, &inst.branch).unwrap();
        let sup = TextureSuppression::new(m, 1.0).unwrap();
        let (kept, keep) = sup.apply(&field, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (px, k) in kept.frames.data().chunks(2).zip(keep.data()) {
            prop_assert!(px[0].hypot(px[1]) <= m);
            if *k == 0.0 {
                prop_assert_eq!(px, &[0.0, 0.0][..]);
            }
        }
        // Nothing is left to suppress on a second pass.
        let (again, _) = sup.apply(&kept, &mut ChaCha8Rng::seed_from_u64(seed + 1)).unwrap();
        prop_assert_eq!(again.frames, kept.frames);
    }
}

#[test]
fn suppression_never_touches_dynamic_fields() {
    let inst = instance(3, 3, 4, 1, 1, 1);
    let field = compute_field(&inst.seq, &inst.masks, &inst.branch).unwrap();
    let sup = TextureSuppression::new(0.0, 1.0).unwrap();
    assert!(sup.apply(&field, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}
