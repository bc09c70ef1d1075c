use cubepano::diffusion::{NoiseSchedule, SamplerConfig, VModel};
use cubepano::net::{assemble_input, ConditioningBundle, ForwardCond, PosEnc};
use cubepano::rng::stream;
use cubepano::Result;
use cubepano_tensor::{FaceLatentBatch, Tensor, TextLayout, CUBE_FACES};
use rand_distr::{Distribution, StandardNormal};

pub const C: usize = 2;
pub const N: usize = 4;

/// Closed-form v-model touching every input: the latent, positions, mask,
/// the text, the timestep and (through the Front face) other faces.
pub struct Analytic;

pub fn analytic_v(input: &[f64], text: &[f64], t: usize, row: usize, face: usize, front: &[f64]) -> Vec<f64> {
    let plane = N * N;
    let tr = text[row * 3];
    let front_mean: f64 = front[..C * plane].iter().sum::<f64>() / (C * plane) as f64;
    (0..C * plane)
        .map(|k| {
            let p = k % plane;
            0.4 * input[k] + 0.1 * (t as f64 / 100.0).sin() + 0.05 * input[C * plane + p] - 0.07 * input[(C + 2) * plane + p]
                + 0.2 * tr
                + 0.03 * front_mean * (face as f64 + 1.0)
        })
        .collect()
}

impl VModel<f64> for Analytic {
    fn predict_v(&self, input: &FaceLatentBatch<f64>, cond: &ForwardCond<f64>) -> Result<FaceLatentBatch<f64>> {
        let b = input.batch();
        let mut out = FaceLatentBatch::zeros(b, C, N, N);
        for row in 0..b {
            for f in 0..CUBE_FACES {
                let v = analytic_v(input.face(row, f), cond.text.data(), cond.timesteps[row], row, f, input.face(row, 0));
                out.face_mut(row, f).copy_from_slice(&v);
            }
        }
        Ok(out)
    }
}

pub fn bundle(with_image: bool) -> ConditioningBundle<f64> {
    ConditioningBundle {
        cond_latent: with_image.then(|| Tensor::from_fn(&[2, C, N, N], |i| (i as f64 * 0.3).cos())),
        text_tokens: Tensor::new(&[2, 1, 3], vec![0.5, 0.1, 0.2, -0.4, 0.3, 0.0]).unwrap(),
        text_layout: TextLayout::Shared,
        drop_text: vec![false; 2],
        drop_image: vec![false; 2],
    }
}

/// Independent sampler: evaluates each guidance branch separately, one row
/// at a time, and applies the update in plain f64.
pub fn oracle_sample(bundle: &ConditioningBundle<f64>, sched: &NoiseSchedule, cfg: &SamplerConfig, posenc: &PosEnc) -> Vec<f64> {
    let b = 2;
    let mut r = stream(cfg.seed, "ddim", &[]);
    let mut x: Vec<f64> = (0..b * 6 * C * N * N).map(|_| StandardNormal.sample(&mut r)).collect();
    let steps = cfg.ddim_steps;
    let total = sched.len();
    let ts: Vec<usize> = if steps == 1 {
        vec![total - 1]
    } else {
        (0..steps).rev().map(|i| ((i * (total - 1)) as f64 / (steps - 1) as f64).round() as usize).collect()
    };
    let branch_v = |x: &[f64], drop_text: bool, drop_image: bool, t: usize| -> Vec<f64> {
        let mut bb = bundle.clone();
        bb.drop_text = vec![drop_text; b];
        bb.drop_image = vec![drop_image; b];
        let lat = FaceLatentBatch::new(Tensor::new(&[b, 6, C, N, N], x.to_vec()).unwrap()).unwrap();
        let inp = assemble_input(&lat, &bb, posenc).unwrap();
        let text = bb.effective_text();
        let mut v = Vec::new();
        for row in 0..b {
            for f in 0..6 {
                v.extend(analytic_v(inp.face(row, f), text.data(), t, row, f, inp.face(row, 0)));
            }
        }
        v
    };
    let (st, si) = (cfg.cfg_scale_text, cfg.cfg_scale_image);
    let mut x0 = vec![0.0; x.len()];
    for (k, &t) in ts.iter().enumerate() {
        let full = branch_v(&x, false, false, t);
        let v: Vec<f64> = if bundle.cond_latent.is_some() {
            let u = branch_v(&x, true, true, t);
            let ct = branch_v(&x, false, true, t);
            (0..x.len()).map(|i| u[i] + st * (ct[i] - u[i]) + si * (full[i] - ct[i])).collect()
        } else {
            let u = branch_v(&x, true, true, t);
            (0..x.len()).map(|i| u[i] + st * (full[i] - u[i])).collect()
        };
        let (a, s) = (sched.alphas()[t], sched.sigmas()[t]);
        for i in 0..x.len() {
            x0[i] = a * x[i] - s * v[i];
        }
        if let Some(&tn) = ts.get(k + 1) {
            let (an, sn) = (sched.alphas()[tn], sched.sigmas()[tn]);
            for i in 0..x.len() {
                let eps = s * x[i] + a * v[i];
                x[i] = an * x0[i] + sn * eps;
            }
        }
    }
    if let Some(cl) = &bundle.cond_latent {
        let len = C * N * N;
        for row in 0..b {
            x0[row * 6 * len..][..len].copy_from_slice(&cl.data()[row * len..(row + 1) * len]);
        }
    }
    x0
}
