mod common;

use biomeval_core::align::{solve_transform, warp_crop, AlignmentSpec, Point};
use biomeval_core::embedding::{enroll_all, Similarity};
use biomeval_core::evaluator::openset_evaluate;
use biomeval_core::image::Image;
use biomeval_core::metrics::{
    eer_threshold, fmr_at, fnmr_at, roc_points, threshold_at_fmr, ScoreSet,
};
use biomeval_core::openset::{interpolate_tpir_at_fpir, OpenSetCurve, OpenSetPoint};
use biomeval_core::protocol::{GroupFilter, ProtocolKind};
use biomeval_core::synth::{generate, LabelNoise, NormalStream, SynthConfig};

use common::oracle;

fn random_set(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = NormalStream::new(seed);
    let n_gen = 1 + (rng.uniform() * 150.0) as usize;
    let n_imp = 1 + (rng.uniform() * 300.0) as usize;
    // coarse grid so ties are common
    let mut draw = |mean: f64| ((rng.normal(mean, 1.0)) * 8.0).round() / 8.0;
    let g = (0..n_gen).map(|_| draw(1.5)).collect();
    let i = (0..n_imp).map(|_| draw(0.0)).collect();
    (g, i)
}

#[test]
fn metrics_match_brute_force() {
    for seed in 0..200 {
        let (g, i) = random_set(seed);
        let s = ScoreSet::from_scores(g.clone(), i.clone()).unwrap();
        for t in oracle::candidates(&[g.clone(), i.clone()].concat()) {
            assert_eq!(fmr_at(&s, t).unwrap(), oracle::fmr(&i, t));
            assert_eq!(fnmr_at(&s, t).unwrap(), oracle::fnmr(&g, t));
        }
        for alpha in [0.5, 0.1, 0.01, 0.001] {
            assert_eq!(threshold_at_fmr(&s, alpha).unwrap(), oracle::threshold_at_fmr(&i, alpha));
        }
        let e = eer_threshold(&s).unwrap();
        assert_eq!((e.threshold, e.eer, e.fmr, e.fnmr), oracle::eer(&g, &i), "seed {seed}");
        let roc: Vec<_> = roc_points(&s)
            .unwrap()
            .into_iter()
            .map(|p| (p.threshold, p.fmr, p.fnmr))
            .collect();
        assert_eq!(roc, oracle::roc(&g, &i));
    }
}

#[test]
fn separable_and_symmetric_eer() {
    let s = ScoreSet::from_scores(vec![2.0, 3.0], vec![0.0, 1.0]).unwrap();
    assert_eq!(eer_threshold(&s).unwrap().eer, 0.0);
    let (g, _) = random_set(9);
    let s = ScoreSet::from_scores(g.clone(), g.clone()).unwrap();
    let step = 1.0 / g.len() as f64;
    assert!((eer_threshold(&s).unwrap().eer - 0.5).abs() <= step);
}

fn open_set_config(seed: u64, sigma: f64) -> SynthConfig {
    SynthConfig {
        name: "open".into(),
        kind: ProtocolKind::OpenSet,
        seed,
        n_subjects: 50,
        n_unknown_subjects: 20,
        samples_per_subject: 3,
        enroll_per_subject: 1,
        models_per_subject: 1,
        dim: 16,
        noise_sigma: sigma,
        sub_protocols: vec![LabelNoise {
            label: "all".into(),
            extra_noise: 0.0,
        }],
        fmr_target: 0.001,
    }
}

fn to_oracle_probes(
    data: &biomeval_core::synth::SynthData,
    templates: &[biomeval_core::embedding::Template],
) -> Vec<oracle::OpenSetProbe> {
    data.protocol
        .probes()
        .map(|p| {
            let e = data.embeddings.get(&p.sample_id).unwrap();
            let scores = templates
                .iter()
                .map(|t| {
                    // plain cosine, written out
                    let dot: f64 = t.vector.iter().zip(&e.vector).map(|(a, b)| a * b).sum();
                    let na: f64 = t.vector.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nb: f64 = e.vector.iter().map(|b| b * b).sum::<f64>().sqrt();
                    (t.subject_id.clone(), (dot / (na * nb)).clamp(-1.0, 1.0))
                })
                .collect();
            oracle::OpenSetProbe {
                subject: p.subject_id.clone(),
                known: !data.protocol.unknown_subjects.contains(&p.subject_id),
                scores,
            }
        })
        .collect()
}

#[test]
fn open_set_curve_matches_double_loop() {
    for seed in 0..10 {
        let data = generate(&open_set_config(seed, 0.3)).unwrap();
        let templates = enroll_all(&data.protocol, &data.embeddings).unwrap();
        let r = openset_evaluate(&data.protocol, &templates, &data.embeddings, Similarity::Cosine).unwrap();
        let probes = to_oracle_probes(&data, &templates);
        let expected = oracle::openset(&probes);
        let got: Vec<_> = r.curve.points.iter().map(|p| (p.fpir, p.tpir, p.threshold)).collect();
        assert_eq!(got, expected, "seed {seed}");
        assert_eq!(r.closed_set_rank1, oracle::closed_set_accuracy(&probes));
        let last = r.curve.points.last().unwrap();
        assert_eq!((last.fpir, last.tpir), (1.0, r.closed_set_rank1));
    }
}

#[test]
fn tpir_interpolation_hand_steps() {
    let curve = OpenSetCurve {
        points: vec![
            OpenSetPoint { fpir: 0.0, tpir: 0.1, threshold: 0.8 },
            OpenSetPoint { fpir: 0.5, tpir: 0.6, threshold: 0.4 },
            OpenSetPoint { fpir: 1.0, tpir: 0.9, threshold: f64::NEG_INFINITY },
        ],
    };
    for (target, expected) in [(0.0, 0.1), (0.49, 0.1), (0.5, 0.6), (0.99, 0.6), (1.0, 0.9)] {
        assert_eq!(interpolate_tpir_at_fpir(&curve, target), expected, "{target}");
    }
}

#[test]
fn warp_matches_naive_resampler() {
    let mut rng = NormalStream::new(42);
    for channels in [1, 3] {
        let img = Image::from_fn(64, 64, channels, |_, _, _| (rng.uniform() * 255.0).floor()).unwrap();
        let spec = AlignmentSpec::preset("arcface112").unwrap();
        for k in 0..20 {
            let a = Point::new(10.0 + 40.0 * rng.uniform(), 5.0 + 20.0 * rng.uniform());
            let b = Point::new(10.0 + 40.0 * rng.uniform(), 35.0 + 25.0 * rng.uniform());
            let t = solve_transform(a, b, spec.anchor_a_target, spec.anchor_b_target).unwrap();
            let out = warp_crop(&img, &t, &spec);
            let expected = oracle::naive_warp(
                |y, x, c| {
                    (y >= 0 && x >= 0 && y < 64 && x < 64).then(|| img.get(y as usize, x as usize, c))
                },
                channels,
                t.matrix(),
                112,
                112,
            );
            for (got, want) in out.data().iter().zip(&expected) {
                assert!((got - want).abs() <= 1e-6, "case {k}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn half_scale_checkerboard() {
    let board = Image::from_fn(16, 16, 1, |y, x, _| if (y + x) % 2 == 0 { 255.0 } else { 0.0 }).unwrap();
    let spec = AlignmentSpec {
        name: "half".into(),
        target_height: 8,
        target_width: 8,
        anchor_a_name: "right_eye".into(),
        anchor_b_name: "left_eye".into(),
        anchor_a_target: Point::new(1.0, 1.0),
        anchor_b_target: Point::new(1.0, 5.0),
        fallback: None,
    };
    let t = solve_transform(Point::new(2.0, 2.0), Point::new(2.0, 10.0), Point::new(1.0, 1.0), Point::new(1.0, 5.0))
        .unwrap();
    assert_eq!(t.scale(), 0.5);
    let out = warp_crop(&board, &t, &spec);
    let expected = oracle::naive_warp(
        |y, x, c| (y >= 0 && x >= 0 && y < 16 && x < 16).then(|| board.get(y as usize, x as usize, c)),
        1,
        t.matrix(),
        8,
        8,
    );
    for (a, b) in out.data().iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn pair_count_matches_nested_loops() {
    let cfg = SynthConfig {
        samples_per_subject: 5,
        enroll_per_subject: 2,
        sub_protocols: vec![
            LabelNoise { label: "a".into(), extra_noise: 0.0 },
            LabelNoise { label: "b".into(), extra_noise: 0.1 },
        ],
        ..SynthConfig::verification(17, 50, 8, 0.1)
    };
    let p = generate(&cfg).unwrap().protocol;
    for (filter, group) in [
        (GroupFilter::Dev, biomeval_core::protocol::Group::Dev),
        (GroupFilter::Eval, biomeval_core::protocol::Group::Eval),
    ] {
        let pairs = p.comparison_pairs(filter).unwrap();
        let (mut total, mut genuine) = (0, 0);
        for m in &p.models {
            let mg = p.sample(&m.enroll_sample_ids[0]).unwrap().group;
            for s in &p.samples {
                if s.role == biomeval_core::protocol::Role::Probe && s.group == group && mg == group {
                    total += 1;
                    if s.subject_id == m.subject_id {
                        genuine += 1;
                    }
                }
            }
        }
        assert_eq!(pairs.len(), total);
        assert_eq!(pairs.iter().filter(|x| x.is_genuine).count(), genuine);
    }
}
