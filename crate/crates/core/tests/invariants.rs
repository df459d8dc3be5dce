use proptest::prelude::*;
use rrrn_core::augment::enrich_apex_positions;
use rrrn_core::dataset::{map_aus_to_objective_class, normalize_au_code};
use rrrn_core::flow::{crop_regions, FlowField, RegionCropSpec};
use rrrn_core::image::{Plane, Rect, RgbImage};
use rrrn_core::loss::{cor_loss, cross_entropy, rb_loss};
use rrrn_core::metrics::{compute_metrics, ConfusionMatrix};
use rrrn_core::nn::{build_graph, gcn_forward, Tensor};
use rrrn_core::occlusion::{random_block_rect, BLOCK_GRAY};
use rrrn_core::seed::rng_for;
use rrrn_core::REGIONS;

fn au_token() -> impl Strategy<Value = String> {
    (1u32..64, prop::sample::select(vec!["", "L", "R", "B", "l"]), prop::bool::ANY)
        .prop_map(|(n, side, prefix)| format!("{}{side}{n}", if prefix { "AU" } else { "" }))
}

proptest! {
    #[test]
    fn au_normalization_is_idempotent_and_order_free(tokens in prop::collection::vec(au_token(), 1..5), rot in 0usize..5) {
        let code = tokens.join("+");
        let once = normalize_au_code(&code);
        prop_assert_eq!(normalize_au_code(&once), once.clone());
        let mut rotated = tokens.clone();
        rotated.rotate_left(rot % tokens.len());
        prop_assert_eq!(normalize_au_code(&rotated.join(" + ")), once.clone());
        prop_assert_eq!(map_aus_to_objective_class(&code), map_aus_to_objective_class(&once));
    }

    #[test]
    fn crops_are_linear(
        w in 8usize..40,
        h in 8usize..40,
        out in 4usize..24,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = rng_for(seed, "crop");
        let mut random = || Plane::from_fn(w, h, |_, _| rng.gen_range(-2.0..2.0));
        let (f1, f2) = (FlowField::new(random(), random()).unwrap(), FlowField::new(random(), random()).unwrap());
        let mix = |p: &Plane, q: &Plane| Plane::from_fn(w, h, |x, y| a * p.get(x, y) + b * q.get(x, y));
        let combined = FlowField::new(mix(&f1.u, &f2.u), mix(&f1.v, &f2.v)).unwrap();
        let spec = RegionCropSpec::with_output_size(out);
        let (c1, c2, c) = (crop_regions(&f1, &spec).unwrap(), crop_regions(&f2, &spec).unwrap(), crop_regions(&combined, &spec).unwrap());
        for k in 0..REGIONS {
            for (got, (p, q)) in [(&c.vertical[k], (&c1.vertical[k], &c2.vertical[k])), (&c.horizontal[k], (&c1.horizontal[k], &c2.horizontal[k]))] {
                for i in 0..got.data().len() {
                    prop_assert!((got.data()[i] - (a * p.data()[i] + b * q.data()[i])).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn crop_windows_fit_inside_the_field(w in 1usize..500, h in 1usize..500) {
        for r in RegionCropSpec::default().windows(w, h) {
            prop_assert!(Rect::new(0, 0, w, h).contains_rect(&r));
            prop_assert!(r.area() > 0);
        }
    }

    #[test]
    fn graph_rows_are_stochastic_and_permutation_equivariant(
        f in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 4), REGIONS),
        p0 in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), REGIONS),
        w in prop::collection::vec(-1.0f64..1.0, 32),
        perm in Just((0..REGIONS).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        prop_assume!(f.iter().all(|v| v.iter().any(|x| *x > 1e-3)));
        let graph = build_graph(&f);
        for row in graph.transition() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
        let (w0, w1) = (Tensor::from_vec(&[4, 4], w[..16].to_vec()), Tensor::from_vec(&[4, 4], w[16..].to_vec()));
        let out = gcn_forward(&p0, &graph, &w0, &w1).unwrap();
        let pf: Vec<_> = perm.iter().map(|&i| f[i].clone()).collect();
        let pp: Vec<_> = perm.iter().map(|&i| p0[i].clone()).collect();
        let pout = gcn_forward(&pp, &build_graph(&pf), &w0, &w1).unwrap();
        for (a, &i) in perm.iter().enumerate() {
            prop_assert_eq!(&pout[a], &out[i]);
        }
    }

    #[test]
    fn cross_entropy_ignores_logit_shifts(z in prop::collection::vec(-30.0f64..30.0, 5), y in 0usize..5, c in -200.0f64..200.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let a = cross_entropy(&[z], &[y]).unwrap();
        let b = cross_entropy(&[shifted], &[y]).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn auxiliary_losses_are_non_negative(
        alpha in prop::collection::vec(0.0f64..1.0, REGIONS),
        region in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 5), REGIONS),
        main in prop::collection::vec(-5.0f64..5.0, 5),
        y in 0usize..5,
    ) {
        prop_assert!(rb_loss(&alpha, 0.02) >= 0.0);
        prop_assert!(cor_loss(&region, &main, y).unwrap() >= 0.0);
    }

    #[test]
    fn metrics_stay_in_the_unit_interval(counts in prop::collection::vec(prop::collection::vec(0u64..30, 5), 5)) {
        prop_assume!(counts.iter().flatten().sum::<u64>() > 0);
        let m = compute_metrics(&ConfusionMatrix::from_counts(counts)).unwrap();
        for v in [m.war, m.uar, m.f1, m.wf1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn apex_positions_are_sorted_and_in_range(onset in 0usize..20, rise in 1usize..60, fall in 1usize..60) {
        let (apex, offset) = (onset + rise, onset + rise + fall);
        let positions = enrich_apex_positions(onset, apex, offset).unwrap();
        prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(positions.contains(&apex));
        prop_assert!(positions.iter().all(|p| *p >= onset && *p <= offset));
    }

    #[test]
    fn random_blocks_stay_in_the_face(x in 0usize..20, y in 0usize..20, w in 20usize..120, h in 20usize..120, pct in 5u32..=50, seed in any::<u64>()) {
        let face = Rect::new(x, y, w, h);
        let ratio = f64::from(pct) / 100.0;
        let block = random_block_rect(&face, ratio, &mut rng_for(seed, "block")).unwrap();
        prop_assert!(face.contains_rect(&block));
        let frame = RgbImage::filled(150, 150, [0, 0, 0]);
        let out = rrrn_core::occlusion::fill_block(&frame, &block);
        let gray = out.pixels.iter().filter(|p| **p == [BLOCK_GRAY; 3]).count();
        prop_assert_eq!(gray, block.area());
    }

    #[test]
    fn rotation_round_trip_keeps_the_centre(deg in -15.0f64..15.0, gx in -2.0f64..2.0, gy in -2.0f64..2.0) {
        // Bilinear sampling reproduces an affine ramp exactly away from the
        // replicated border.
        let ramp = Plane::from_fn(41, 41, |x, y| gx * x as f64 + gy * y as f64);
        let back = ramp.rotate(deg).rotate(-deg);
        for y in 12..29 {
            for x in 12..29 {
                prop_assert!((back.get(x, y) - ramp.get(x, y)).abs() < 1e-9);
            }
        }
    }
}
