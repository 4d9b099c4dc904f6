use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{Architecture, Prediction};
use crate::testutil::{random_frame, random_triplet, tiny};

fn v(x: &[f64]) -> Tensor {
    Tensor::from_vec(x.to_vec())
}

#[test]
fn endpoints_decode_to_the_endpoint_codes() {
    for arch in Architecture::ALL {
        let cfg = tiny(arch);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let t = random_triplet(&cfg, 2);
        let (a, b) = (&t.frames[0], &t.frames[2]);
        let out = interpolate(a, b, &DEFAULT_TAUS, &params, &cfg).unwrap();
        assert_eq!(out.len(), 7);
        let za = model::decode(&model::encode(a, &params, &cfg).unwrap(), &params, &cfg).unwrap();
        let zb = model::decode(&model::encode(b, &params, &cfg).unwrap(), &params, &cfg).unwrap();
        assert!(out[0].bit_eq(&za), "{arch}");
        assert!(out[2].bit_eq(&zb), "{arch}");
    }
}

#[test]
fn flat_interpolation_is_affine() {
    let (a, b) = (Encoding::Flat(v(&[0.0, 2.0])), Encoding::Flat(v(&[1.0, 0.0])));
    let Encoding::Flat(mid) = interpolate_code(&a, &b, 0.5).unwrap() else { unreachable!() };
    assert_eq!(mid.data(), &[0.5, 1.0]);
    let Encoding::Flat(far) = interpolate_code(&a, &b, 3.0).unwrap() else { unreachable!() };
    assert_eq!(far.data(), &[3.0, -4.0]);
    assert!(interpolate_code(&a, &b, f64::NAN).is_err());
}

#[test]
fn extrapolated_phases_stay_in_range() {
    let cfg = tiny(Architecture::Deep3);
    let params = ModelParams::init(&cfg, 3).unwrap();
    let t = random_triplet(&cfg, 4);
    let za = model::encode(&t.frames[0], &params, &cfg).unwrap();
    let zb = model::encode(&t.frames[1], &params, &cfg).unwrap();
    for tau in [-5.0, 3.0, 40.0] {
        let Encoding::Pooled(c) = interpolate_code(&za, &zb, tau).unwrap() else { unreachable!() };
        assert!(c.p.data().iter().all(|p| (-1.0..=1.0).contains(p)));
    }
}

#[test]
fn empty_tau_list_is_rejected() {
    let cfg = tiny(Architecture::Deep2);
    let params = ModelParams::init(&cfg, 0).unwrap();
    let t = random_triplet(&cfg, 0);
    assert!(interpolate(&t.frames[0], &t.frames[1], &[], &params, &cfg).is_err());
}

#[test]
fn interpolation_images_are_reproducible() {
    let cfg = tiny(Architecture::Shallow1);
    let params = ModelParams::init(&cfg, 5).unwrap();
    let t = random_triplet(&cfg, 6);
    let render = |dir: &Path| {
        let frames = interpolate(&t.frames[0], &t.frames[1], &DEFAULT_TAUS, &params, &cfg).unwrap();
        write_interpolation(dir, &DEFAULT_TAUS, &frames).unwrap()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (p1, p2) = (render(d1.path()), render(d2.path()));
    assert_eq!(p1.len(), 7);
    assert!(p1[3].ends_with("interp_03_tau_1.5.pgm"));
    for (a, b) in p1.iter().zip(&p2) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}

#[test]
fn straight_sequence_has_unit_cosine() {
    let seq: Vec<Tensor> = (0..6).map(|t| v(&[t as f64, 2.0 * t as f64, -1.0])).collect();
    assert!((mean_cosine(&seq, 1e-6).unwrap() - 1.0).abs() < 1e-12);
    assert!(mean_cosine(&seq[..2], 1e-6).is_err());
}

#[test]
fn random_walk_has_zero_mean_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut pos = [0.0f64; 2];
    let seq: Vec<Tensor> = (0..10_002)
        .map(|_| {
            pos[0] += rng.gen_range(-1.0..1.0);
            pos[1] += rng.gen_range(-1.0..1.0);
            v(&pos)
        })
        .collect();
    let c = mean_cosine(&seq, 1e-6).unwrap();
    assert!(c.abs() < 0.05, "{c}");
}

#[test]
fn curvature_report_for_an_untrained_encoder() {
    for arch in [Architecture::Shallow1, Architecture::Deep2] {
        let cfg = tiny(arch);
        let params = ModelParams::init(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seqs: Vec<Vec<Tensor>> = (0..3)
            .map(|_| (0..5).map(|_| random_frame(cfg.input_shape, &mut rng)).collect())
            .collect();
        let r = measure_curvature(&seqs, &params, &cfg).unwrap();
        assert_eq!(r.triples, 9);
        assert!(r.input_cosine.is_finite() && r.code_cosine.is_finite());
        assert!((-1.0..=1.0).contains(&r.input_cosine));
    }
}

#[test]
fn r2_of_lines_and_bends() {
    let line: Vec<Tensor> = (0..5).map(|t| v(&[0.5 * t as f64 - 1.0, 3.0])).collect();
    assert!((linear_fit_r2(&line).unwrap() - 1.0).abs() < 1e-12);
    // y = [0, 1, 0]: slope 0, so the fit explains nothing.
    let tent = [v(&[0.0]), v(&[1.0]), v(&[0.0])];
    assert!(linear_fit_r2(&tent).unwrap().abs() < 1e-12);
    // y = [0, 0, 1]: slope 1/2, residuals (1/6, -1/3, 1/6), SS_tot = 2/3.
    let kink = [v(&[0.0]), v(&[0.0]), v(&[1.0])];
    assert!((linear_fit_r2(&kink).unwrap() - 0.75).abs() < 1e-12);
    assert!(linear_fit_r2(&kink[..2]).is_err());
}

#[test]
fn held_out_error_matches_loss_terms() {
    let cfg = tiny(Architecture::Deep2);
    let params = ModelParams::init(&cfg, 9).unwrap();
    let ts: Vec<FrameTriplet> = (0..4).map(|s| random_triplet(&cfg, s)).collect();
    let direct = ts
        .iter()
        .map(|t| model::loss_eq1(t, &params, &cfg).unwrap().prediction)
        .sum::<f64>()
        / 4.0;
    assert_eq!(prediction_error(&ts, &params, &cfg, None).unwrap(), direct);
    assert!(prediction_error(&[], &params, &cfg, None).is_err());
}

#[test]
fn one_group_of_four_is_one_row() {
    let l = FilterLayout::new(4, 3, 4, GROUPS_PER_ROW).unwrap();
    assert_eq!((l.rows, l.width, l.height), (1, 15, 3));
    assert_eq!(l.origin(3), (0, 12));
}

#[test]
fn layout_arithmetic() {
    for (n, side, group, per_row) in [(10, 5, 4, 2), (16, 3, 4, 4), (1, 7, 4, 4), (9, 2, 1, 3)] {
        let l = FilterLayout::new(n, side, group, per_row).unwrap();
        let groups = (n + group - 1) / group;
        let rows = (groups + per_row - 1) / per_row;
        let cols = groups.min(per_row);
        assert_eq!(l.rows, rows);
        assert_eq!(l.height, rows * side + (rows - 1) * TILE_GAP);
        assert_eq!(l.width, cols * (group * side + (group - 1) * TILE_GAP) + (cols - 1) * GROUP_GAP);
        let (r, c) = l.origin(n - 1);
        assert!(r + side <= l.height && c + side <= l.width);
    }
}

#[test]
fn constant_filter_is_mid_gray() {
    let t = normalize_tile(&Tensor::full(&[3, 3], -0.7));
    assert!(t.data().iter().all(|&v| v == 0.5));
    let r = normalize_tile(&Tensor::new(vec![1, 2], vec![-2.0, 6.0]).unwrap());
    assert_eq!(r.data(), &[0.0, 1.0]);
}

#[test]
fn filter_images_for_conv_models() {
    let cfg = tiny(Architecture::Shallow1);
    let params = ModelParams::init(&cfg, 0).unwrap();
    let imgs = filter_images(&params, &cfg).unwrap();
    let names: Vec<&str> = imgs.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["enc_0", "dec_1"]);
    // 4 filters of 3×3 in one group of 4.
    assert_eq!(imgs[0].1.shape(), &[1, 3, 15]);
}

#[test]
fn fc_only_model_has_no_filters() {
    let cfg = ModelConfig {
        arch: Architecture::Deep2,
        input_shape: [1, 4, 4],
        encoder: vec![Layer::Fc { out: 8, relu: true }],
        prediction: Prediction::Extrapolate,
        decoder: vec![Layer::Fc { out: 16, relu: false }, Layer::Reshape { shape: vec![1, 4, 4] }],
        pool: None,
        a: [2.0, -1.0],
        lambda: 0.1,
        curvature_phase_only: true,
        eps_curv: 1e-6,
    };
    let params = ModelParams::init(&cfg, 0).unwrap();
    let err = filter_images(&params, &cfg).unwrap_err().to_string();
    assert!(err.contains("no convolution layers"), "{err}");
}

#[test]
fn probe_needs_labels() {
    let cfg = tiny(Architecture::Deep3);
    let dcfg = DeltaConfig::default();
    let mut params = ModelParams::init(&cfg, 0).unwrap();
    uncertainty::init_w1(&mut params, &cfg, &dcfg, 1).unwrap();
    let ts = vec![random_triplet(&cfg, 0)];
    assert!(probe_deltas(&ts, &params, &cfg, &dcfg, 0).is_err());
}
