mod common;

use std::f64::consts::FRAC_PI_2;
use std::time::Instant;

use cubepano::diffusion::*;
use cubepano::net::{assemble_input, ConditioningBundle, Denoiser, DenoiserConfig, ForwardCond, PosEnc};
use cubepano::rng::stream;
use cubepano::{Error, Result};
use cubepano_tensor::{FaceLatentBatch, Tensor, TextLayout, CUBE_FACES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use common::ddim::{bundle, oracle_sample, Analytic, C, N};

#[test]
fn schedule_invariants() {
    for total in [10, 100, 1000] {
        let s = cosine_schedule(total).unwrap();
        assert_eq!(s.len(), total);
        assert_eq!(s.alphas()[0], 1.0);
        assert_eq!(s.sigmas()[0], 0.0);
        for t in 0..total {
            let (a, sg) = (s.alphas()[t], s.sigmas()[t]);
            assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&sg));
            assert!((a * a + sg * sg - 1.0).abs() <= 1e-12);
            if t > 0 {
                assert!(a < s.alphas()[t - 1], "T={total} t={t}");
            }
        }
        assert!(s.alphas()[total - 1] < 0.2);
    }
}

#[test]
fn schedule_matches_closed_form() {
    let total = 1000;
    let s = cosine_schedule(total).unwrap();
    let f = |t: f64| ((t / total as f64 + 0.008) / 1.008 * FRAC_PI_2).cos();
    for t in [0, 1, 7, 250, 500, 998, 999] {
        assert!((s.alphas()[t] - f(t as f64) / f(0.0)).abs() <= 1e-15);
    }
}

#[test]
fn schedule_values_frozen() {
    let s = cosine_schedule(1000).unwrap();
    assert!((s.alphas()[1] - 0.999_979_357_674_536_3).abs() <= 1e-12);
    assert!((s.alphas()[500] - 0.702_740_058_941_169_1).abs() <= 1e-12);
    assert!((s.alphas()[999] - 0.001_558_450_161_870_712_9).abs() <= 1e-12);
}

#[test]
fn short_schedules_rejected() {
    assert!(matches!(cosine_schedule(1), Err(Error::Config(_))));
    assert!(matches!(cosine_schedule(0), Err(Error::Config(_))));
    let s = cosine_schedule(10).unwrap();
    assert!(matches!(s.coeffs(10), Err(Error::Domain(_))));
}

#[test]
fn parameterization_round_trips() {
    let s = cosine_schedule(1000).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100_000 {
        let t = r.random_range(0..1000);
        let x0: f64 = StandardNormal.sample(&mut r);
        let eps: f64 = StandardNormal.sample(&mut r);
        let c = s.coeffs(t).unwrap();
        let xt = c.add_noise(x0, eps);
        let v = c.v_target(x0, eps);
        assert!((c.x0_from_v(xt, v) - x0).abs() <= 1e-9);
        assert!((c.eps_from_v(xt, v) - eps).abs() <= 1e-9);
    }
}

#[test]
fn slice_forms_agree_with_scalars() {
    let s = cosine_schedule(100).unwrap();
    let x0 = [0.3f32, -1.2, 0.0];
    let eps = [1.0f32, 0.5, -2.0];
    let xt = add_noise(&x0, &eps, 40, &s).unwrap();
    let v = v_target(&x0, &eps, 40, &s).unwrap();
    let back = x0_from_v(&xt, &v, 40, &s).unwrap();
    let e = eps_from_v(&xt, &v, 40, &s).unwrap();
    for k in 0..3 {
        assert!((back[k] - x0[k]).abs() <= 1e-5 && (e[k] - eps[k]).abs() <= 1e-5);
    }
    assert!(add_noise(&x0, &eps[..2], 40, &s).is_err());
    assert!(add_noise(&x0, &eps, 100, &s).is_err());
}

#[test]
fn limit_cases() {
    let s = cosine_schedule(1000).unwrap();
    let c0 = s.coeffs(0).unwrap();
    assert_eq!(c0.add_noise(0.7, -3.0), 0.7);
    assert_eq!(c0.v_target(0.7, -3.0), -3.0);
    assert_eq!(c0.x0_from_v(0.7, 123.0), 0.7);
    let last = s.coeffs(999).unwrap();
    assert!((last.add_noise(0.7, -3.0) + 3.0).abs() < 0.01);
    assert!((last.v_target(0.7, -3.0) + 0.7).abs() < 0.01);
}

#[test]
fn guidance_examples() {
    let (u, c) = ([1.0f64, -2.0], [3.0f64, 0.5]);
    assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
    assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
    assert_eq!(cfg_combine(&u, &c, 2.0).unwrap(), vec![5.0, 3.0]);
    assert!(cfg_combine(&u, &c[..1], 2.0).is_err());
    let ct = [0.0f64, 0.0];
    assert_eq!(cfg_combine_dual(&u, &ct, &c, 1.0, 1.0).unwrap(), c);
    // equal scales collapse to single-axis guidance towards the full branch
    let d = cfg_combine_dual(&u, &ct, &c, 2.5, 2.5).unwrap();
    let single = cfg_combine(&u, &c, 2.5).unwrap();
    assert!(d.iter().zip(&single).all(|(a, b)| (a - b).abs() <= 1e-12));
}

#[test]
fn guidance_is_affine_in_scale() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let u: Vec<f64> = (0..50).map(|_| r.random_range(-2.0..2.0)).collect();
    let c: Vec<f64> = (0..50).map(|_| r.random_range(-2.0..2.0)).collect();
    let (a, b) = (0.3, 4.1);
    let fa = cfg_combine(&u, &c, a).unwrap();
    let fb = cfg_combine(&u, &c, b).unwrap();
    let fm = cfg_combine(&u, &c, (a + b) / 2.0).unwrap();
    for k in 0..50 {
        assert!((fm[k] - (fa[k] + fb[k]) / 2.0).abs() <= 1e-12);
    }
}

#[test]
fn timestep_grid() {
    let ts = ddim_timesteps(1000, 50);
    assert_eq!(ts.len(), 50);
    assert_eq!((ts[0], ts[49]), (999, 0));
    assert!(ts.windows(2).all(|w| w[0] > w[1]));
    assert_eq!(ddim_timesteps(1000, 1), vec![999]);
    assert_eq!(ddim_timesteps(5, 5), vec![4, 3, 2, 1, 0]);
    assert_eq!(ddim_timesteps(10, 4), vec![9, 6, 3, 0]);
}

#[test]
fn sampler_config_validated() {
    let s = cosine_schedule(10).unwrap();
    for bad in [
        SamplerConfig { ddim_steps: 0, ..Default::default() },
        SamplerConfig { ddim_steps: 11, ..Default::default() },
        SamplerConfig { ddim_steps: 5, cfg_scale_text: f64::NAN, ..Default::default() },
    ] {
        assert!(bad.validate(&s).is_err());
    }
    assert!(SamplerConfig { ddim_steps: 10, ..Default::default() }.validate(&s).is_ok());
}

#[test]
fn ddim_matches_oracle() {
    let sched = cosine_schedule(1000).unwrap();
    let pe = PosEnc::new(N, 95.0).unwrap();
    for steps in [1, 10, 50] {
        for (img, st, si) in [(false, 1.0, 1.0), (false, 3.0, 1.0), (true, 1.0, 1.0), (true, 1.0, 2.0), (true, 2.5, 1.5)] {
            let b = bundle(img);
            let cfg = SamplerConfig { ddim_steps: steps, cfg_scale_text: st, cfg_scale_image: si, seed: 7 };
            let got = ddim_sample(&Analytic, &b, &pe, &sched, C, &cfg).unwrap();
            let want = oracle_sample(&b, &sched, &cfg, &pe);
            let d = got.tensor().data().iter().zip(&want).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(d <= 1e-5, "steps {steps} image {img} scales {st}/{si}: {d}");
        }
    }
}

#[test]
fn full_grid_matches_eps_recursion() {
    // every timestep visited: DDIM reduces to the eps-form update
    // x_{t-1} = a' (x - s eps) / a + s' eps
    let total = 100;
    let sched = cosine_schedule(total).unwrap();
    let pe = PosEnc::new(N, 90.0).unwrap();
    let b = bundle(false);
    let cfg = SamplerConfig { ddim_steps: total, seed: 3, ..Default::default() };
    let got = ddim_sample(&Analytic, &b, &pe, &sched, C, &cfg).unwrap();

    let mut r = stream(3, "ddim", &[]);
    let mut x: Vec<f64> = (0..2 * 6 * C * N * N).map(|_| StandardNormal.sample(&mut r)).collect();
    let mut x0 = vec![0.0; x.len()];
    for t in (0..total).rev() {
        let lat = FaceLatentBatch::new(Tensor::new(&[2, 6, C, N, N], x.clone()).unwrap()).unwrap();
        let inp = assemble_input(&lat, &b, &pe).unwrap();
        let text = b.effective_text();
        let fc = ForwardCond { timesteps: &[t, t], text: &text, text_layout: TextLayout::Shared, drop_image: &[true, true] };
        let v = Analytic.predict_v(&inp, &fc).unwrap();
        let (a, s) = (sched.alphas()[t], sched.sigmas()[t]);
        for i in 0..x.len() {
            let eps = s * x[i] + a * v.tensor().data()[i];
            x0[i] = (x[i] - s * eps) / a;
            if t > 0 {
                x[i] = sched.alphas()[t - 1] * x0[i] + sched.sigmas()[t - 1] * eps;
            }
        }
    }
    let d = got.tensor().data().iter().zip(&x0).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(d <= 1e-6, "{d}");
}

#[test]
fn conditioned_front_is_returned_verbatim() {
    let sched = cosine_schedule(50).unwrap();
    let pe = PosEnc::new(N, 95.0).unwrap();
    let mut b = bundle(true);
    b.drop_image = vec![false, true];
    let out = ddim_sample(&Analytic, &b, &pe, &sched, C, &SamplerConfig { ddim_steps: 5, ..Default::default() }).unwrap();
    let cl = b.cond_latent.as_ref().unwrap();
    assert_eq!(out.face(0, 0), &cl.data()[..C * N * N]);
    assert_ne!(out.face(1, 0), &cl.data()[C * N * N..]);
}

#[test]
fn sampling_is_deterministic() {
    let sched = cosine_schedule(100).unwrap();
    let pe = PosEnc::new(N, 95.0).unwrap();
    let b = bundle(true);
    let cfg = SamplerConfig { ddim_steps: 8, cfg_scale_text: 2.0, cfg_scale_image: 1.5, seed: 11 };
    let a = ddim_sample(&Analytic, &b, &pe, &sched, C, &cfg).unwrap();
    let again = ddim_sample(&Analytic, &b, &pe, &sched, C, &cfg).unwrap();
    assert_eq!(a, again);
    let other = ddim_sample(&Analytic, &b, &pe, &sched, C, &SamplerConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a, other);
}

struct Exploding;

impl VModel<f64> for Exploding {
    fn predict_v(&self, input: &FaceLatentBatch<f64>, _: &ForwardCond<f64>) -> Result<FaceLatentBatch<f64>> {
        let (b, _, _, n, _) = input.dims();
        let mut out = FaceLatentBatch::zeros(b, C, n, n);
        out.tensor_mut().data_mut()[3] = f64::INFINITY;
        Ok(out)
    }
}

#[test]
fn non_finite_prediction_is_reported() {
    let sched = cosine_schedule(100).unwrap();
    let pe = PosEnc::new(N, 95.0).unwrap();
    let err = ddim_sample(&Exploding, &bundle(false), &pe, &sched, C, &SamplerConfig { ddim_steps: 4, ..Default::default() })
        .unwrap_err();
    assert!(matches!(&err, Error::NonFinite(m) if m.contains("ddim step 0")), "{err}");
}

#[test]
fn default_model_samples_within_a_minute() {
    let cfg = DenoiserConfig::default();
    let model = Denoiser::<f32>::new(cfg.clone(), 0).unwrap();
    let sched = cosine_schedule(1000).unwrap();
    let pe = PosEnc::new(cfg.face_latent_size, 95.0).unwrap();
    let n = cfg.face_latent_size;
    let b = ConditioningBundle {
        cond_latent: Some(Tensor::zeros(&[1, cfg.latent_channels, n, n])),
        text_tokens: Tensor::zeros(&[1, CUBE_FACES * cfg.text_tokens, cfg.text_dim]),
        text_layout: TextLayout::PerFace,
        drop_text: vec![false],
        drop_image: vec![false],
    };
    let start = Instant::now();
    let out = ddim_sample(&model, &b, &pe, &sched, cfg.latent_channels, &SamplerConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(out.dims(), (1, 6, cfg.latent_channels, n, n));
    assert!(secs < 60.0, "{secs} s");
}
