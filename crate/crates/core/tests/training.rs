mod common;

use common::tiny_run;
use cubepano::checkpoint::{self, Checkpoint, MAGIC};
use cubepano::config::RunConfig;
use cubepano::geometry::FaceId;
use cubepano::io::save_png;
use cubepano::rng::stream;
use cubepano::synth::{synth_panorama, PanoramaKind};
use cubepano::train::*;
use cubepano::Error;
use cubepano_tensor::CUBE_FACES;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn dropout_rates_and_independence() {
    let p = 0.1;
    let n = 40_000usize;
    let mut table = [[0usize; 2]; 2];
    for i in 0..n {
        let mut r = stream(1, "dropout", &[i as u64]);
        let (t, im) = dropout_conditions(&mut r, p);
        table[t as usize][im as usize] += 1;
    }
    let nf = n as f64;
    let sigma = (p * (1.0 - p) / nf).sqrt();
    let text = (table[1][0] + table[1][1]) as f64 / nf;
    let image = (table[0][1] + table[1][1]) as f64 / nf;
    assert!((text - p).abs() <= 3.0 * sigma, "{text}");
    assert!((image - p).abs() <= 3.0 * sigma, "{image}");
    let both = table[1][1] as f64 / nf;
    assert!((both - p * p).abs() <= 3.0 * (p * p * (1.0 - p * p) / nf).sqrt(), "{both}");
    // chi-squared test of independence, 1 dof, 0.1% level
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let mut chi2 = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let e = rows[a] as f64 * cols[b] as f64 / nf;
            chi2 += (table[a][b] as f64 - e).powi(2) / e;
        }
    }
    assert!(chi2 < 10.83, "{chi2}");
}

#[test]
fn dropout_extremes() {
    let mut r = stream(0, "x", &[]);
    for _ in 0..100 {
        assert_eq!(dropout_conditions(&mut r, 0.0), (false, false));
    }
}

#[test]
fn lr_warmup_examples() {
    let cfg = TrainConfig { peak_lr: 1e-3, warmup_steps: 100, ..Default::default() };
    assert_eq!(lr_schedule(0, &cfg), 0.0);
    assert!((lr_schedule(50, &cfg) - 5e-4).abs() < 1e-15);
    assert_eq!(lr_schedule(100, &cfg), 1e-3);
    assert_eq!(lr_schedule(4000, &cfg), 1e-3);
    let none = TrainConfig { warmup_steps: 0, ..cfg };
    assert_eq!(lr_schedule(0, &none), 1e-3);
}

#[test]
fn train_config_checks() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        TrainConfig { warmup_steps: 6000, ..ok.clone() },
        TrainConfig { dropout_prob: 1.0, ..ok.clone() },
        TrainConfig { batch_size: 0, ..ok.clone() },
        TrainConfig { overlap_fov_deg: 80.0, ..ok.clone() },
        TrainConfig { kinds: vec![], ..ok.clone() },
        TrainConfig { peak_lr: f64::NAN, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn codec_mismatch_rejected() {
    let mut run = tiny_run();
    run.model.latent_channels = 8;
    assert!(matches!(Trainer::new(run), Err(Error::Config(_))));
}

#[test]
fn examples_are_reproducible() {
    let t = Trainer::new(tiny_run()).unwrap();
    let a = t.example(3, 1).unwrap();
    assert_eq!(a, t.example(3, 1).unwrap());
    assert_ne!(a.latent, t.example(3, 0).unwrap().latent);
    let mc = &t.config().model;
    assert_eq!(a.latent.shape(), [6, mc.latent_channels, 8, 8]);
    assert_eq!(a.text.shape(), [CUBE_FACES * mc.text_tokens, mc.text_dim]);
}

#[test]
fn first_loss_is_mean_square_target() {
    // the output head starts at zero, so the first loss is the weighted mean
    // of v^2 with the conditioned Front faces excluded
    let run = tiny_run();
    let mut t = Trainer::new(run.clone()).unwrap();
    let tc = &run.train;
    let sched = t.schedule().clone();
    let mut tr = stream(tc.seed, "timestep", &[0]);
    let ts: Vec<usize> = (0..tc.batch_size).map(|_| tr.random_range(0..sched.len())).collect();
    let mut er = stream(tc.seed, "noise", &[0]);
    let (mut sum, mut count) = (0.0, 0.0);
    for (bi, &tt) in ts.iter().enumerate() {
        let ex = t.example(0, bi).unwrap();
        let c = sched.coeffs(tt).unwrap();
        let face = ex.latent.numel() / 6;
        for (k, &x) in ex.latent.data().iter().enumerate() {
            let e: f64 = StandardNormal.sample(&mut er);
            let counted = ex.drop_image || k / face != FaceId::Front.index();
            if counted {
                sum += c.v_target(x as f64, e).powi(2);
                count += 1.0;
            }
        }
    }
    let loss = t.train_step().unwrap();
    let want = sum / count;
    assert!((loss - want).abs() <= 1e-5 * want, "{loss} vs {want}");
    assert_eq!(t.step(), 1);
}

fn losses(t: &mut Trainer, n: usize) -> Vec<f64> {
    (0..n).map(|_| t.train_step().unwrap()).collect()
}

#[test]
fn training_is_deterministic() {
    let mut a = Trainer::new(tiny_run()).unwrap();
    let mut b = Trainer::new(tiny_run()).unwrap();
    let la = losses(&mut a, 10);
    assert_eq!(la, losses(&mut b, 10));
    assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
    assert!(la.iter().all(|l| l.is_finite() && *l > 0.0));
    let mut other = tiny_run();
    other.train.seed = 6;
    assert_ne!(la, losses(&mut Trainer::new(other).unwrap(), 10));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny_run()).unwrap();
    losses(&mut t, 3);
    let p1 = dir.path().join("a.ck");
    let p2 = dir.path().join("b.ck");
    t.save(&p1).unwrap();
    let ck = checkpoint::load(&p1).unwrap();
    assert_eq!(ck.step, 3);
    checkpoint::save(&ck, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let m = ck.model().unwrap();
    for ((na, ta), (nb, tb)) in m.params().iter().zip(t.model().params().iter()) {
        assert_eq!((na, ta), (nb, tb));
    }
    assert!(!dir.path().join("a.ck.tmp").exists());
}

#[test]
fn checkpoint_corruption_detected() {
    let t = Trainer::new(tiny_run()).unwrap();
    let bytes = t.checkpoint().to_bytes();
    assert_eq!(&bytes[..5], MAGIC);
    let mut cases: Vec<(&str, Vec<u8>)> = vec![
        ("empty", vec![]),
        ("truncated header", bytes[..7].to_vec()),
        ("truncated blob", bytes[..bytes.len() - 3].to_vec()),
        ("trailing", [bytes.clone(), vec![0]].concat()),
    ];
    let mut magic = bytes.clone();
    magic[0] = b'X';
    cases.push(("magic", magic));
    let mut version = bytes.clone();
    version[4] = b'9';
    cases.push(("version", version));
    let mut meta = bytes.clone();
    meta[12] ^= 0x55;
    cases.push(("metadata", meta));
    for (what, b) in cases {
        match Checkpoint::from_bytes(&b) {
            Err(Error::Checkpoint(m)) => {
                if what == "version" {
                    assert!(m.contains("version"), "{m}");
                }
            }
            other => panic!("{what}: {other:?}"),
        }
    }
}

#[test]
fn missing_checkpoint_is_io_error() {
    let err = checkpoint::load(std::path::Path::new("/nonexistent/x.ck")).err().unwrap();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut straight = Trainer::new(tiny_run()).unwrap();
    let full = losses(&mut straight, 10);

    let mut first = Trainer::new(tiny_run()).unwrap();
    let mut split = losses(&mut first, 5);
    let p = dir.path().join("mid.ck");
    first.save(&p).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(&p).unwrap();
    assert_eq!(resumed.step(), 5);
    split.extend(losses(&mut resumed, 5));
    assert_eq!(full, split);
    assert_eq!(straight.checkpoint().to_bytes(), resumed.checkpoint().to_bytes());
}

#[test]
fn run_reports_every_step_and_checkpoints() {
    let mut run = tiny_run();
    run.train.steps = 6;
    run.train.checkpoint_every = 4;
    let mut t = Trainer::new(run).unwrap();
    let mut logs = Vec::new();
    let mut saved = Vec::new();
    t.run(
        |r| {
            logs.push(r.clone());
            Ok(())
        },
        |tr| {
            saved.push(tr.step());
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(logs.iter().map(|r| r.step).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    assert_eq!(logs[0].lr, 0.0);
    assert_eq!(logs[5].lr, 1e-3);
    assert_eq!(saved, vec![4, 6]);
    // a finished run has nothing left to do
    let mut more = 0;
    t.run(|_| { more += 1; Ok(()) }, |_| Ok(())).unwrap();
    assert_eq!(more, 0);
}

#[test]
fn loss_drops_over_a_short_run() {
    let mut run = tiny_run();
    run.train.kinds = vec![PanoramaKind::SkyGradient];
    run.train.batch_size = 4;
    run.train.peak_lr = 3e-3;
    let mut t = Trainer::new(run).unwrap();
    let l = losses(&mut t, 60);
    let head: f64 = l[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = l[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn trains_from_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    for (i, kind) in [PanoramaKind::CheckerSphere, PanoramaKind::SkyGradient].into_iter().enumerate() {
        let eq = synth_panorama(i as u64, kind, 32);
        save_png(eq.image(), &dir.path().join(format!("p{i}.png"))).unwrap();
        std::fs::write(dir.path().join(format!("p{i}.txt")), kind.caption()).unwrap();
    }
    let mut run: RunConfig = tiny_run();
    run.train.data_dir = Some(dir.path().to_path_buf());
    let mut t = Trainer::new(run).unwrap();
    let ex = t.example(0, 0).unwrap();
    assert!(ex.latent.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(t.train_step().unwrap().is_finite());

    let empty = tempfile::tempdir().unwrap();
    let mut run = tiny_run();
    run.train.data_dir = Some(empty.path().to_path_buf());
    assert!(matches!(Trainer::new(run), Err(Error::Config(_))));
}
