use std::collections::BTreeSet;

use tbs_core::episodes::{
    downsample_mask, fold_split, generate_episode, generate_episode_with, rasterize_mask, read_dump, write_dump,
    Difficulty, EpisodeSampler, GenConfig, ShapeClass, IMAGE_SIZE, NUM_CLASSES, NUM_FOLDS,
};

fn classes_in(shapes: &[tbs_core::episodes::ShapeInstance]) -> BTreeSet<ShapeClass> {
    shapes.iter().map(|s| s.class).collect()
}

#[test]
fn irrelevant_support_distractors_never_appear_in_the_query() {
    let cfg = GenConfig {
        shots: 2,
        ..GenConfig::default().only(Difficulty::IrrelevantBg)
    };
    let mut seen = 0;
    for seed in 0..1000 {
        let ep = generate_episode(&cfg, seed).unwrap();
        let query = classes_in(&ep.query.shapes);
        for s in &ep.supports {
            for d in s.distractors() {
                assert!(!query.contains(&d.class), "seed {seed}: {} also in query", d.class);
                seen += 1;
            }
        }
    }
    assert!(seen >= 1000);
}

#[test]
fn target_similar_supports_carry_the_lookalike() {
    let cfg = GenConfig::default().only(Difficulty::TargetSimilarBg);
    for seed in 0..200 {
        let ep = generate_episode(&cfg, seed).unwrap();
        let class = ShapeClass::from_id(ep.category).unwrap();
        for s in &ep.supports {
            let d: Vec<_> = s.distractors().collect();
            assert_eq!(d.len(), 1, "seed {seed}");
            assert_eq!(d[0].class, class.lookalike());
            assert_ne!(d[0].class, class);
        }
    }
}

#[test]
fn mixed_supports_carry_both_kinds() {
    let cfg = GenConfig::default().only(Difficulty::Mixed);
    for seed in 0..200 {
        let ep = generate_episode(&cfg, seed).unwrap();
        let class = ShapeClass::from_id(ep.category).unwrap();
        let query = classes_in(&ep.query.shapes);
        for s in &ep.supports {
            let d: Vec<_> = s.distractors().collect();
            assert!(d.iter().any(|x| x.class == class.lookalike()), "seed {seed}");
            assert!(d.iter().any(|x| x.class != class.lookalike() && !query.contains(&x.class)), "seed {seed}");
        }
    }
}

#[test]
fn clean_images_hold_only_the_target() {
    let cfg = GenConfig::default().only(Difficulty::Clean);
    for seed in 0..200 {
        let ep = generate_episode(&cfg, seed).unwrap();
        for s in std::iter::once(&ep.query).chain(&ep.supports) {
            assert_eq!(s.distractors().count(), 0);
            assert_eq!(s.shapes.len(), 1);
            assert_eq!(s.shapes[0].class.id(), ep.category);
        }
    }
}

#[test]
fn masks_are_exactly_the_rasterized_targets() {
    let cfg = GenConfig {
        shots: 3,
        ..GenConfig::default()
    };
    for seed in 0..200 {
        let ep = generate_episode(&cfg, seed).unwrap();
        for s in std::iter::once(&ep.query).chain(&ep.supports) {
            assert_eq!(rasterize_mask(&s.shapes, IMAGE_SIZE), s.mask);
            assert!(s.mask.iter().any(|&m| m) && s.mask.iter().any(|&m| !m));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for s in &ep.supports {
            let cells = downsample_mask(&s.mask);
            assert!(cells.iter().any(|&m| m) && cells.iter().any(|&m| !m), "seed {seed}");
        }
    }
}

#[test]
fn generation_is_a_pure_function_of_config_and_seed() {
    let cfg = GenConfig {
        shots: 2,
        ..GenConfig::default()
    };
    for seed in [0, 1, u64::MAX] {
        assert_eq!(generate_episode(&cfg, seed).unwrap(), generate_episode(&cfg, seed).unwrap());
    }
    assert_ne!(generate_episode(&cfg, 1).unwrap(), generate_episode(&cfg, 2).unwrap());
}

#[test]
fn sampler_balances_categories_round_robin() {
    let split = fold_split(1).unwrap();
    let s = EpisodeSampler::new(GenConfig::default().with_classes(&split.train_classes), 9);
    let mut counts = [0usize; NUM_CLASSES];
    for i in 0..60 {
        counts[s.episode(i).unwrap().category] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        let want = if split.train_classes.contains(&c) { 10 } else { 0 };
        assert_eq!(n, want, "class {c}");
    }
}

#[test]
fn folds_partition_the_classes() {
    let mut all = BTreeSet::new();
    for f in 0..NUM_FOLDS {
        let s = fold_split(f).unwrap();
        assert_eq!(s.test_classes, vec![2 * f, 2 * f + 1]);
        assert!(s.train_classes.iter().all(|c| !s.test_classes.contains(c)));
        assert_eq!(s.train_classes.len() + s.test_classes.len(), NUM_CLASSES);
        all.extend(s.test_classes);
    }
    assert_eq!(all.len(), NUM_CLASSES);
    assert!(fold_split(NUM_FOLDS).is_err());
}

#[test]
fn unsatisfiable_configs_are_rejected() {
    let lonely = GenConfig::default().with_classes(&[0]);
    let no_lookalike = GenConfig {
        distractor_classes: vec![0],
        ..lonely.clone()
    };
    assert!(generate_episode_with(&no_lookalike, 0, Difficulty::TargetSimilarBg, 0).is_err());
    assert!(generate_episode_with(&lonely, 9, Difficulty::Clean, 0).is_err());
    let zero_mix = GenConfig {
        mix: [0.0; 4],
        ..GenConfig::default()
    };
    assert!(generate_episode(&zero_mix, 0).is_err());
    let no_shots = GenConfig {
        shots: 0,
        ..GenConfig::default()
    };
    assert!(generate_episode(&no_shots, 0).is_err());
}

#[test]
fn dump_round_trips() {
    let cfg = GenConfig {
        shots: 2,
        ..GenConfig::default()
    };
    let eps: Vec<_> = (0..5).map(|s| generate_episode(&cfg, s).unwrap()).collect();
    let mut buf = Vec::new();
    write_dump(&mut buf, &eps).unwrap();
    let back = read_dump(&mut buf.as_slice()).unwrap();
    assert_eq!(back.len(), eps.len());
    for (a, b) in eps.iter().zip(&back) {
        assert_eq!((a.seed, a.category, a.difficulty), (b.seed, b.category, b.difficulty));
        for (x, y) in std::iter::once((&a.query, &b.query)).chain(a.supports.iter().zip(&b.supports)) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
        }
    }
    buf.truncate(buf.len() - 3);
    assert!(read_dump(&mut buf.as_slice()).is_err());
}
