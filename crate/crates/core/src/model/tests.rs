use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::{grad_check, GradCheckConfig, TOLERANCE_F64};
use crate::phase_pool::PoolSpec;

fn random_frame(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&shape, |_| rng.gen_range(0.05..0.95))
}

fn random_triplet(cfg: &ModelConfig, seed: u64) -> FrameTriplet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.input_shape;
    FrameTriplet::new([random_frame(s, &mut rng), random_frame(s, &mut rng), random_frame(s, &mut rng)]).unwrap()
}

/// Identity encoder and decoder on 4×4 frames: code = flattened frame.
fn linear_config(lambda: f64) -> (ModelConfig, ModelParams) {
    let cfg = ModelConfig {
        arch: Architecture::Deep2,
        input_shape: [1, 4, 4],
        encoder: vec![Layer::Fc { out: 16, relu: false }],
        prediction: Prediction::Extrapolate,
        decoder: vec![
            Layer::Fc { out: 16, relu: false },
            Layer::Reshape { shape: vec![1, 4, 4] },
        ],
        pool: None,
        a: config::DEFAULT_A,
        lambda,
        curvature_phase_only: true,
        eps_curv: config::DEFAULT_EPS_CURV,
    };
    let mut params = ModelParams::init(&cfg, 0).unwrap();
    let eye = Tensor::from_fn(&[16, 16], |i| if i / 16 == i % 16 { 1.0 } else { 0.0 });
    params.insert("enc.0.weight", eye.clone());
    params.insert("dec.0.weight", eye);
    (cfg, params)
}

fn tiny_shallow() -> ModelConfig {
    ModelConfig::shallow(
        Architecture::Shallow1,
        ShallowSize {
            input_shape: [1, 8, 8],
            filters: 4,
            kernel: 3,
            group: [4, 4, 4],
            beta: 2.0,
        },
    )
    .unwrap()
}

fn tiny_deep(arch: Architecture) -> ModelConfig {
    ModelConfig::deep(
        arch,
        DeepSize {
            input_shape: [1, 8, 8],
            channels: [2, 2],
            kernel: 3,
            code_dim: 6,
            pooled_features: 3,
            pooled_grid: 2,
            beta: 2.0,
        },
    )
    .unwrap()
}

#[test]
fn shallow_code_shapes_follow_layer_arithmetic() {
    // 16 filters of 5×5 with same padding keep 16×16; groups of 4 in
    // (feature, x, y) give 4×4×4 groups with three phase coordinates each.
    let cfg = ModelConfig::preset(Architecture::Shallow1).unwrap();
    let params = ModelParams::init(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let Encoding::Pooled(code) = encode(&random_frame([1, 16, 16], &mut rng), &params, &cfg).unwrap() else {
        panic!("shallow-1 pools")
    };
    assert_eq!(code.m.shape(), &[4, 4, 4]);
    assert_eq!(code.p.shape(), &[3, 4, 4, 4]);
    assert_eq!(code.input_shape, [16, 16, 16]);

    // Feature stride 2 over 16 features: (16 - 4) / 2 + 1 = 7 groups.
    let cfg = ModelConfig::preset(Architecture::Shallow2).unwrap();
    let shapes = cfg.validate().unwrap();
    assert_eq!(
        shapes.code,
        CodeShape::Pooled {
            groups: [7, 4, 4],
            phase_dim: 3,
            volume: [16, 16, 16]
        }
    );
}

#[test]
fn deep_shapes_follow_layer_arithmetic() {
    let cfg = ModelConfig::preset(Architecture::Deep1).unwrap();
    let s = cfg.validate().unwrap();
    assert_eq!(s.encoder, vec![vec![4, 12, 12], vec![4, 8, 8], vec![64]]);
    assert_eq!(s.code, CodeShape::Flat(64));
    assert_eq!(s.decoder[0], vec![256]);
    assert_eq!(s.decoder.last().unwrap(), &vec![1, 16, 16]);

    // 16 pooled features on a 4×4 grid, one group per feature with phases
    // on the two spatial axes: 16 magnitudes + 32 phases.
    let cfg = ModelConfig::preset(Architecture::Deep3).unwrap();
    let params = ModelParams::init(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let code = encode(&random_frame([1, 16, 16], &mut rng), &params, &cfg).unwrap();
    assert_eq!(code.dim(), 3 * 16);
    assert_eq!(decode(&code, &params, &cfg).unwrap().shape(), &[1, 16, 16]);
}

#[test]
fn zero_frame_gives_zero_magnitudes_and_centered_phases() {
    let cfg = ModelConfig::preset(Architecture::Shallow1).unwrap();
    let params = ModelParams::init(&cfg, 3).unwrap();
    let Encoding::Pooled(code) = encode(&Tensor::zeros(&[1, 16, 16]), &params, &cfg).unwrap() else {
        panic!("shallow-1 pools")
    };
    assert!(code.m.max_abs() == 0.0);
    assert!(code.p.max_abs() < 1e-15);
}

#[test]
fn encode_is_deterministic() {
    for arch in Architecture::ALL {
        let cfg = ModelConfig::preset(arch).unwrap();
        let params = ModelParams::init(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_frame(cfg.input_shape, &mut rng);
        let a = encode(&x, &params, &cfg).unwrap().to_flat();
        let b = encode(&x.clone(), &params, &cfg).unwrap().to_flat();
        assert!(a.bit_eq(&b), "{arch}");
    }
}

#[test]
fn encode_rejects_bad_frames() {
    let cfg = ModelConfig::preset(Architecture::Deep2).unwrap();
    let params = ModelParams::init(&cfg, 0).unwrap();
    assert!(matches!(
        encode(&Tensor::zeros(&[1, 8, 8]), &params, &cfg),
        Err(Error::Shape { .. })
    ));
    assert!(encode(&Tensor::full(&[1, 16, 16], 1.5), &params, &cfg).is_err());
}

#[test]
fn extrapolation_examples() {
    let z = |v: &[f64]| Tensor::from_vec(v.to_vec());
    let out = extrapolate_code(&z(&[1.0]), &z(&[0.0]), [2.0, -1.0]).unwrap();
    assert_eq!(out.data(), &[2.0]);
    let c = z(&[0.3, -1.2, 4.0]);
    assert_eq!(extrapolate_code(&c, &c, [2.0, -1.0]).unwrap(), c);
    let prev = z(&[9.0, 9.0, 9.0]);
    assert_eq!(extrapolate_code(&c, &prev, [1.0, 0.0]).unwrap(), c);
    assert!(extrapolate_code(&c, &z(&[1.0]), [2.0, -1.0]).is_err());
}

fn one_group_code(m: f64, p: f64) -> Code {
    let spec = PoolSpec::new([1, 1, 2], 1.0);
    let mut code = phase_pool::phase_pool(&Tensor::from_vec(vec![1.0, 1.0]).reshape(&[1, 1, 2]).unwrap(), &spec)
        .unwrap();
    code.m.data_mut()[0] = m;
    code.p.data_mut()[0] = p;
    code
}

#[test]
fn mag_phase_prediction_examples() {
    let out = predict_mag_phase(&one_group_code(2.0, 0.5), &one_group_code(4.0, 0.25)).unwrap();
    assert_eq!(out.m.data(), &[3.0]);
    assert_eq!(out.p.data(), &[0.75]);
    let out = predict_mag_phase(&one_group_code(1.0, 0.9), &one_group_code(1.0, 0.0)).unwrap();
    assert_eq!(out.p.data(), &[1.0]);

    let mut other = one_group_code(1.0, 0.0);
    other.spec.beta = 3.0;
    assert!(predict_mag_phase(&one_group_code(1.0, 0.0), &other).is_err());
}

#[test]
fn zero_code_through_linear_decoder_is_the_bias() {
    let (cfg, mut params) = linear_config(0.0);
    let bias = Tensor::from_fn(&[16], |i| i as f64 / 16.0);
    params.insert("dec.0.bias", bias.clone());
    let out = decode(&Encoding::Flat(Tensor::zeros(&[16])), &params, &cfg).unwrap();
    assert_eq!(out.data(), bias.data());
    let again = decode(&Encoding::Flat(Tensor::zeros(&[16])), &params, &cfg).unwrap();
    assert!(out.bit_eq(&again));
}

#[test]
fn curvature_examples() {
    let v = |x: &[f64]| Tensor::from_vec(x.to_vec());
    let eps = config::DEFAULT_EPS_CURV;
    let c = curvature_penalty(&v(&[0.0]), &v(&[1.0]), &v(&[2.0]), eps).unwrap();
    assert!((c - 1.0).abs() < 1e-15);
    let c = curvature_penalty(&v(&[0.0]), &v(&[1.0]), &v(&[0.0]), eps).unwrap();
    assert!((c + 1.0).abs() < 1e-15);
    let c = curvature_penalty(&v(&[0.0, 0.0]), &v(&[1.0, 0.0]), &v(&[1.0, 1.0]), eps).unwrap();
    assert!(c.abs() < 1e-15);
    // Static codes stay finite.
    let z = v(&[0.5, 0.5]);
    assert_eq!(curvature_penalty(&z, &z, &z, eps).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn curvature_is_scale_invariant(
        z in prop::collection::vec(-3.0f64..3.0, 12),
        c in 0.01f64..100.0,
    ) {
        let [a, b, d] = [0, 4, 8].map(|o| Tensor::from_vec(z[o..o + 4].to_vec()));
        let steps_ok = [(&a, &b), (&b, &d)].iter().all(|(x, y)| {
            x.zip_map(y, |p, q| p - q).unwrap().norm() * c.min(1.0) > 1e-3
        });
        prop_assume!(steps_ok);
        let eps = config::DEFAULT_EPS_CURV;
        let base = curvature_penalty(&a, &b, &d, eps).unwrap();
        let s = |t: &Tensor| t.map(|v| v * c);
        let scaled = curvature_penalty(&s(&a), &s(&b), &s(&d), eps).unwrap();
        prop_assert!((base - scaled).abs() < 1e-10);
        prop_assert!((-1.0..=1.0).contains(&base));
    }
}

/// Three frames on a straight pixel-space line with dyadic values, so the
/// identity model extrapolates them exactly.
fn linear_path() -> FrameTriplet {
    let x0 = Tensor::from_fn(&[1, 4, 4], |i| 0.125 + (i % 4) as f64 / 16.0);
    let d = Tensor::from_fn(&[1, 4, 4], |i| (i / 4) as f64 / 32.0);
    let step = |k: f64| x0.zip_map(&d, |a, b| a + k * b).unwrap();
    FrameTriplet::new([step(0.0), step(1.0), step(2.0)]).unwrap()
}

#[test]
fn perfect_prediction_losses() {
    let (cfg, params) = linear_config(0.0);
    let l = loss_eq1(&linear_path(), &params, &cfg).unwrap();
    assert_eq!(l.prediction, 0.0);
    assert_eq!(l.total, 0.0);

    let (cfg, params) = linear_config(0.1);
    let l = loss_eq1(&linear_path(), &params, &cfg).unwrap();
    assert!((l.cosine - 1.0).abs() < 1e-12);
    assert!((l.total + 0.1).abs() < 1e-12);
    assert!((l.curvature - 0.1).abs() < 1e-12);
}

#[test]
fn loss_matches_its_parts() {
    for (arch, seed) in [(Architecture::Deep1, 5), (Architecture::Deep2, 6), (Architecture::Deep3, 7)] {
        let cfg = tiny_deep(arch);
        let params = ModelParams::init(&cfg, seed).unwrap();
        let t = random_triplet(&cfg, seed);
        let l = loss_eq1(&t, &params, &cfg).unwrap();

        let codes: Vec<Encoding> = t.frames.iter().map(|f| encode(f, &params, &cfg).unwrap()).collect();
        let predicted = match (&codes[1], &codes[0]) {
            (Encoding::Flat(zt), Encoding::Flat(ztm1)) if arch == Architecture::Deep1 => {
                Encoding::Flat(Tensor::concat_flat(&[zt, ztm1]))
            }
            (Encoding::Flat(zt), Encoding::Flat(ztm1)) => Encoding::Flat(extrapolate_code(zt, ztm1, cfg.a).unwrap()),
            (Encoding::Pooled(ct), Encoding::Pooled(ctm1)) => Encoding::Pooled(predict_mag_phase(ct, ctm1).unwrap()),
            _ => unreachable!(),
        };
        let frame = decode(&predicted, &params, &cfg).unwrap();
        let err = 0.5 * frame.zip_map(&t.frames[2], |a, b| (a - b) * (a - b)).unwrap().sum();
        let v: Vec<Tensor> = codes.iter().map(|c| c.curvature_vector(cfg.curvature_phase_only)).collect();
        let cos = curvature_penalty(&v[0], &v[1], &v[2], cfg.eps_curv).unwrap();

        assert!((l.prediction - err).abs() < 1e-12, "{arch}");
        assert!((l.cosine - cos).abs() < 1e-12, "{arch}");
        assert!((l.total - (err - cfg.lambda * cos)).abs() < 1e-12, "{arch}");
        assert!(l.prediction >= 0.0 && l.curvature.abs() <= cfg.lambda);
    }
}

#[test]
fn static_triplet_reduces_to_autoencoding() {
    for arch in [Architecture::Deep2, Architecture::Deep3, Architecture::Shallow1] {
        let cfg = if arch == Architecture::Shallow1 { tiny_shallow() } else { tiny_deep(arch) };
        let params = ModelParams::init(&cfg, 8).unwrap();
        let x = random_triplet(&cfg, 9).frames[0].clone();
        let t = FrameTriplet::new([x.clone(), x.clone(), x.clone()]).unwrap();
        let l = loss_eq1(&t, &params, &cfg).unwrap();
        let recon = decode(&encode(&x, &params, &cfg).unwrap(), &params, &cfg).unwrap();
        let err = 0.5 * recon.zip_map(&x, |a, b| (a - b) * (a - b)).unwrap().sum();
        assert!((l.prediction - err).abs() < 1e-12, "{arch}");
        assert_eq!(l.cosine, 0.0);
    }
}

#[test]
fn encoder_weights_are_shared_across_frames() {
    let cfg = tiny_deep(Architecture::Deep2);
    let params = ModelParams::init(&cfg, 10).unwrap();
    let t = random_triplet(&cfg, 11);
    let run = |order: [usize; 2]| {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let ids = order.map(|k| g.constant(t.frames[k].clone()));
        let codes = ids.map(|id| encode_node(&mut g, &cfg, &bound, id).unwrap());
        (g, bound, codes, order)
    };
    let (ga, _, ca, _) = run([0, 1]);
    let (gb, _, cb, _) = run([1, 0]);
    let val = |g: &Graph, c: &CodeNode| match c {
        CodeNode::Flat(id) => g.value(*id).clone(),
        _ => unreachable!(),
    };
    assert!(val(&ga, &ca[0]).bit_eq(&val(&gb, &cb[1])));
    assert!(val(&ga, &ca[1]).bit_eq(&val(&gb, &cb[0])));

    // Both frames feed the same weight node: its gradient is the sum of the
    // per-frame contributions.
    let grad_of = |frames: &[usize]| {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let mut total = None;
        for &k in frames {
            let x = g.constant(t.frames[k].clone());
            let CodeNode::Flat(z) = encode_node(&mut g, &cfg, &bound, x).unwrap() else { unreachable!() };
            let s = g.sum(z).unwrap();
            total = Some(match total {
                None => s,
                Some(prev) => g.add(prev, s).unwrap(),
            });
        }
        let w = bound.id("enc.0.weight").unwrap();
        g.backward(total.unwrap()).unwrap().get_or_zeros(w, params.get("enc.0.weight").unwrap())
    };
    let both = grad_of(&[0, 1]);
    let sum = grad_of(&[0]).zip_map(&grad_of(&[1]), |a, b| a + b).unwrap();
    for (a, b) in both.data().iter().zip(sum.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn check_full_gradient(cfg: &ModelConfig, trials: usize) {
    let template = ModelParams::init(cfg, 0).unwrap();
    let shape = cfg.input_shape;
    let n_params = template.len();
    let report = grad_check(
        cfg.arch.id(),
        |g, ids| {
            let bound = template.bind_nodes(ids[..n_params].to_vec());
            let frames = [ids[n_params], ids[n_params + 1], ids[n_params + 2]];
            Ok(loss_graph(g, cfg, &bound, frames)?.total)
        },
        |rng| {
            let seed = rng.gen();
            let mut inputs: Vec<Tensor> = ModelParams::init(cfg, seed).unwrap().tensors().cloned().collect();
            for t in inputs.iter_mut().filter(|t| t.rank() == 1) {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
            inputs.extend((0..3).map(|_| random_frame(shape, rng)));
            inputs
        },
        &GradCheckConfig {
            trials,
            seed: 21,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(TOLERANCE_F64), "{report:?}");
}

#[test]
fn full_loss_gradient_matches_finite_differences_shallow() {
    check_full_gradient(&tiny_shallow(), 4);
}

#[test]
fn full_loss_gradient_matches_finite_differences_deep() {
    for arch in [Architecture::Deep1, Architecture::Deep2, Architecture::Deep3] {
        check_full_gradient(&tiny_deep(arch), 2);
    }
}

#[test]
fn loss_and_grads_matches_graph_backward() {
    let cfg = tiny_shallow();
    let params = ModelParams::init(&cfg, 12).unwrap();
    let t = random_triplet(&cfg, 13);
    let (l, grads) = loss_and_grads(&t, &params, &cfg, Precision::F64).unwrap();
    assert_eq!(l, loss_eq1(&t, &params, &cfg).unwrap());
    assert_eq!(grads.len(), params.len());
    for (g, p) in grads.iter().zip(params.tensors()) {
        assert_eq!(g.shape(), p.shape());
        assert!(g.all_finite());
    }
    let (l32, _) = loss_and_grads(&t, &params, &cfg, Precision::F32).unwrap();
    assert!((l32.total - l.total).abs() < 1e-4);
}
