#[path = "common/prompts.rs"]
mod prompts;
#[path = "common/shapes.rs"]
mod shapes;

use gensynth_core::guidance::{extract_edges, EdgeParams, MaskSource};
use gensynth_core::prompting::{strip_geometry, GeometryLexicon};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapes::Rect;

fn plain() -> EdgeParams {
    EdgeParams {
        foreground_mask_source: MaskSource::None,
        ..EdgeParams::default()
    }
}

#[test]
fn constant_images_have_no_edges() {
    for v in [0, 37, 128, 255] {
        let e = extract_edges(&shapes::constant_image(40, 30, v), &plain(), 0).unwrap();
        assert_eq!(e.edge_count(), 0);
    }
}

#[test]
fn rectangle_outline() {
    for r in [
        Rect { x0: 16, y0: 20, x1: 48, y1: 44 },
        Rect { x0: 5, y0: 5, x1: 20, y1: 60 },
        Rect { x0: 30, y0: 10, x1: 58, y1: 22 },
    ] {
        let e = extract_edges(&shapes::rectangle_image(64, 64, r, 20, 220), &plain(), 0).unwrap();
        let cov = shapes::border_coverage(&e, r);
        assert!(cov >= 0.9, "{r:?}: coverage {cov}");
        assert_eq!(shapes::stray_edges(&e, r, 1.0), 0, "{r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn higher_thresholds_give_subset(seed in any::<u64>(), dl in 0.0f64..60.0, dh in 0.0f64..60.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = shapes::random_image(&mut rng, 48, 40);
        let lo = plain();
        let hi = EdgeParams {
            low_threshold: lo.low_threshold + dl,
            high_threshold: lo.high_threshold + dl + dh,
            ..lo.clone()
        };
        let a = extract_edges(&img, &lo, 0).unwrap();
        let b = extract_edges(&img, &hi, 0).unwrap();
        for (x, y) in a.pixels.iter().zip(&b.pixels) {
            prop_assert!(*y == 0 || *x > 0);
        }
    }
}

#[test]
fn stripping_removes_every_lexicon_phrase() {
    let lex = GeometryLexicon::default();
    let fixture = prompts::geometry_prompts();
    assert_eq!(fixture.len(), 50);
    assert_eq!(fixture.iter().filter(|p| lex.matches(p)).count(), 45);
    for p in &fixture {
        let out = strip_geometry(p, &lex);
        assert!(!lex.matches(&out.text), "{p:?} -> {:?}", out.text);
        assert_eq!(strip_geometry(&out.text, &lex).text, out.text, "not idempotent on {p:?}");
        if !lex.matches(p) {
            assert_eq!(&out.text, p);
        }
    }
}
