//! Property tests for the prompt geometry invariants.

use ndarray::Array3;
use proptest::prelude::*;

use pixelprompt::geometry::{make_mask, MaskMatrix, PromptGeometry, PromptMode, PromptTemplate};
use pixelprompt::util::{self, Interpolation};

fn geometry_strategy() -> impl Strategy<Value = (usize, usize, usize)> {
    (2usize..24, 1usize..24, 1usize..4).prop_filter("inner <= outer", |(outer, inner, _)| inner <= outer)
}

proptest! {
    #[test]
    fn parameter_count_equals_mask_sum((outer, inner, channels) in geometry_strategy()) {
        let g = PromptGeometry::new(outer, inner, channels, PromptMode::ShrinkPad).unwrap();
        let m = make_mask(outer, inner, channels).unwrap();
        prop_assert_eq!(g.parameter_count(), m.ones_count());
        let brute: f64 = m.entries().iter().sum();
        prop_assert_eq!(brute as usize, g.parameter_count());
    }

    #[test]
    fn mask_is_idempotent((outer, inner, channels) in geometry_strategy()) {
        let m = make_mask(outer, inner, channels).unwrap();
        let twice = m.entries() * m.entries();
        prop_assert_eq!(&twice, m.entries());
    }

    #[test]
    fn center_preservation_under_random_prompts(
        (outer, inner, channels) in geometry_strategy(),
        img_seed in 0u64..1000,
        w_seed in 0u64..1000,
    ) {
        let g = PromptGeometry::new(outer, inner, channels, PromptMode::ShrinkPad).unwrap();
        let mut t = PromptTemplate::init(g, 0.5, w_seed).unwrap();
        // arbitrary (unmasked) parameters too: compose must still paste the
        // shrunk image over them exactly
        let mut rng = util::seeded_rng(w_seed, "raw_w", &[]);
        t.w = util::normal_array3(&mut rng, (channels, outer, outer), 1.0);
        let mut rng = util::seeded_rng(img_seed, "img", &[]);
        let img = util::normal_array3(&mut rng, (channels, inner, inner), 1.0);
        let composed = t.compose(&img, Interpolation::Bilinear).unwrap();
        let center = t.center_block(&composed);
        prop_assert_eq!(center, img);
    }

    #[test]
    fn effective_prompt_is_zero_under_mask_zero(
        (outer, inner, channels) in geometry_strategy(),
        w_seed in 0u64..1000,
    ) {
        let g = PromptGeometry::new(outer, inner, channels, PromptMode::ShrinkPad).unwrap();
        let mask = MaskMatrix::for_geometry(&g).unwrap();
        let mut rng = util::seeded_rng(w_seed, "w", &[]);
        let w = util::normal_array3(&mut rng, (channels, outer, outer), 1.0);
        let t = PromptTemplate::from_parts(g, w).unwrap();
        let v = t.effective();
        for ((idx, &m), &ve) in mask.entries().indexed_iter().zip(v.iter()) {
            if m == 0.0 {
                prop_assert_eq!(ve, 0.0, "leak at {:?}", idx);
            }
        }
    }

    #[test]
    fn shrink_bounds_are_respected(side in 2usize..32, target in 1usize..32) {
        let mut rng = util::seeded_rng(side as u64, "img", &[]);
        let img = util::normal_array3(&mut rng, (2, side, side), 1.0);
        for interp in [Interpolation::Bilinear, Interpolation::Area] {
            let out = pixelprompt::geometry::shrink(&img, target, interp).unwrap();
            prop_assert_eq!(out.dim(), (2, target, target));
            let (lo, hi) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            for &v in out.iter() {
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "resampling overshot the input range");
            }
        }
    }
}

#[test]
fn outer_pad_center_preservation() {
    let g = PromptGeometry::new(40, 32, 3, PromptMode::OuterPadWithPe).unwrap();
    let mut t = PromptTemplate::init(g, 0.5, 3).unwrap();
    let mut rng = util::seeded_rng(8, "w", &[]);
    t.w = util::normal_array3(&mut rng, (3, 40, 40), 1.0);
    let img = {
        let mut rng = util::seeded_rng(9, "img", &[]);
        util::normal_array3(&mut rng, (3, 32, 32), 1.0)
    };
    let composed = t.compose(&img, Interpolation::Bilinear).unwrap();
    assert_eq!(t.center_block(&composed), img);
}

#[test]
fn degenerate_all_zero_mask_composes_to_pure_image() {
    let g = PromptGeometry::new(3, 3, 1, PromptMode::ShrinkPad).unwrap();
    let mut t = PromptTemplate::zeros(g).unwrap();
    t.w.fill(7.0); // fully masked out
    let img = Array3::from_elem((1, 3, 3), 0.2);
    let composed = t.compose(&img, Interpolation::Bilinear).unwrap();
    assert_eq!(composed, img);
    assert_eq!(t.parameter_count(), 0);
}
