use latmap_core::baselines::train_plain_ae;
use latmap_core::checkpoint::Checkpoint;
use latmap_core::data::DatasetSpec;
use latmap_core::model::ModelBundle;
use latmap_core::training::{run_experiment, Stage, TrainConfig, Trainer};
use latmap_core::Error;

fn small(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::swiss_roll(seed);
    c.data = DatasetSpec::swiss_roll_3d(300, 3);
    c.heldout = 60;
    c.model.width = 24;
    c.model.depth = 3;
    c.batch = 32;
    c.stage_a_steps = 30;
    c.stage_b_steps = 20;
    c.eval.interval = 10;
    c.eval.n_proj = 16;
    c.eval.k = 5;
    c.eval.n_topo = 0;
    c
}

fn same_nets(a: &ModelBundle<f32>, b: &ModelBundle<f32>) -> [bool; 5] {
    let (na, nb) = (a.networks(), b.networks());
    std::array::from_fn(|i| na[i].1.net.bit_eq(&nb[i].1.net))
}

#[test]
fn regularizers_off_matches_plain_autoencoder() {
    let mut c = small(4);
    c.hp.omega1 = 0.0;
    c.hp.omega2 = 0.0;
    c.critic_steps = 0;
    let mut t = Trainer::new(c.clone()).unwrap();
    t.run_stage_a().unwrap();

    let mut plain = ModelBundle::<f32>::new(c.model, c.hp, c.ae_opt, c.adv_opt, c.seed).unwrap();
    let losses = train_plain_ae(&mut plain, &t.train, c.batch, c.stage_a_steps, c.seed).unwrap();

    let logged: Vec<f64> = t.log.series("ae_mse").into_iter().map(|(_, v)| v).collect();
    assert_eq!(logged, losses);
    assert!(t.bundle.encoder.net.bit_eq(&plain.encoder.net));
    assert!(t.bundle.decoder.net.bit_eq(&plain.decoder.net));
    assert_eq!(t.bundle.bn, plain.bn);
}

#[test]
fn critic_step_touches_only_the_critic() {
    let mut t = Trainer::new(small(5)).unwrap();
    let before = t.bundle.clone();
    let x = t.train.slice_rows(0, 8);
    let xh = t.bundle.reconstruct(&x).unwrap();
    let mu = latmap_core::Tensor::full(&[8, 1], 0.25f32);
    t.critic_step(&x, &xh, &xh, &mu).unwrap();
    assert_eq!(same_nets(&before, &t.bundle), [true, true, false, true, true]);
    assert_eq!(before.bn, t.bundle.bn);
}

#[test]
fn autoencoder_step_leaves_adversarial_nets_to_their_own_updates() {
    let mut c = small(6);
    c.critic_steps = 0;
    let mut t = Trainer::new(c).unwrap();
    let before = t.bundle.clone();
    t.stage_a_step().unwrap();
    assert_eq!(same_nets(&before, &t.bundle), [false, false, true, true, true]);
    assert_eq!(t.bundle.bn.updates, 1);
}

#[test]
fn stage_b_freezes_the_autoencoder() {
    let mut t = Trainer::new(small(7)).unwrap();
    t.run_stage_a().unwrap();
    assert_eq!(t.stage(), Stage::B);
    let before = t.bundle.clone();
    t.run_stage_b().unwrap();
    assert_eq!(t.stage(), Stage::Done);
    assert_eq!(same_nets(&before, &t.bundle), [true, true, true, false, false]);
    assert_eq!(before.bn, t.bundle.bn);
}

#[test]
fn batch_statistics_are_normalized_every_step() {
    let mut t = Trainer::new(small(8)).unwrap();
    t.run_stage_a().unwrap();
    let means = t.log.series("bn_mean_max");
    assert_eq!(means.len(), 30);
    assert!(means.iter().all(|&(_, m)| m < 1e-6), "{means:?}");
    assert_eq!(t.bn_audit.batches, 30);
}

#[test]
fn same_seed_same_log_and_report() {
    let (a, ra) = run_experiment(small(9)).unwrap();
    let (b, rb) = run_experiment(small(9)).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(ra.csv_rows("r", 50), rb.csv_rows("r", 50));
    let (c, _) = run_experiment(small(10)).unwrap();
    assert_ne!(a.log.to_csv(), c.log.to_csv());
}

#[test]
fn resume_mid_stage_reproduces_losses() {
    for split in [13u64, 30, 41] {
        let mut full = Trainer::new(small(11)).unwrap();
        let full_report = full.run().unwrap();

        let mut first = Trainer::new(small(11)).unwrap();
        while first.step() < split {
            match first.stage() {
                Stage::A => first.stage_a_step().map(|_| ()),
                _ => first.stage_b_step().map(|_| ()),
            }
            .unwrap();
        }
        let bytes = first.to_checkpoint().to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut resumed = Trainer::resume(small(11), &ck).unwrap();
        assert_eq!(resumed.step(), split);
        let report = resumed.run().unwrap();

        let tail = |t: &Trainer, key: &str| -> Vec<(u64, f64)> {
            t.log.series(key).into_iter().filter(|&(s, _)| s >= split).collect()
        };
        for key in ["ae_loss", "critic_loss", "d_loss", "g_loss"] {
            assert_eq!(tail(&full, key), tail(&resumed, key), "{key} after split {split}");
        }
        assert_eq!(full_report, report, "split {split}");
    }
}

#[test]
fn runlog_rejects_time_travel_and_non_finite_values() {
    let mut t = Trainer::new(small(12)).unwrap();
    t.log.push(5, "x", 1.0).unwrap();
    assert!(t.log.push(4, "x", 1.0).is_err());
    assert!(matches!(t.log.push(6, "x", f64::NAN), Err(Error::Diverged { .. })));
}
