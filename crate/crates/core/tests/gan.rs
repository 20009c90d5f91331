mod common;

use tch::{nn::VarStore, Tensor};

use trackgen::adversarial::{train_gan, GanConfig, GanTrainer};
use trackgen::content_vae::ContentVae;
use trackgen::generator::Generator;
use trackgen::motion_vae::MotionVae;

use common::*;

fn snapshot(vs: &VarStore) -> Vec<(String, Tensor)> {
    let mut v: Vec<(String, Tensor)> = vs.variables().into_iter().map(|(k, t)| (k, t.detach().copy())).collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

fn identical(a: &[(String, Tensor)], b: &[(String, Tensor)]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|((ka, ta), (kb, tb))| ka == kb && ta.equal(tb))
}

fn trainer(gp_weight: f64, seed: u64) -> GanTrainer {
    let eps = episodes(4, 10);
    let m = MotionVae::new(motion_cfg(), 1).unwrap();
    let c = ContentVae::new(content_cfg(), 2).unwrap();
    let g = Generator::new(generator_cfg(), 3).unwrap();
    let mut critic = critic_cfg();
    critic.gp_weight = gp_weight;
    let cfg = GanConfig {
        critic,
        checkpoint_every: 0,
        ..Default::default()
    };
    GanTrainer::new(g, &eps, &m, &c, cfg, &train_cfg(2, seed)).unwrap()
}

#[test]
fn critic_and_generator_updates_touch_only_their_own_weights() {
    let mut t = trainer(10.0, 5);
    for _ in 0..2 {
        let g0 = snapshot(t.generator.var_store());
        let c0 = snapshot(t.critic.var_store());
        t.critic_step().unwrap();
        assert!(identical(&g0, &snapshot(t.generator.var_store())), "critic step changed the generator");
        assert!(!identical(&c0, &snapshot(t.critic.var_store())), "critic step left the critic unchanged");

        let g1 = snapshot(t.generator.var_store());
        let c1 = snapshot(t.critic.var_store());
        t.generator_step().unwrap();
        assert!(identical(&c1, &snapshot(t.critic.var_store())), "generator step changed the critic");
        assert!(!identical(&g1, &snapshot(t.generator.var_store())), "generator step left the generator unchanged");
    }
    assert_eq!(t.steps(), 2);
}

#[test]
fn critic_loss_trends_down_without_penalty() {
    let mut t = trainer(0.0, 6);
    let losses: Vec<f64> = (0..80).map(|_| t.critic_step().unwrap().critic_loss).collect();
    let head = losses[..15].iter().sum::<f64>() / 15.0;
    let tail = losses[losses.len() - 15..].iter().sum::<f64>() / 15.0;
    assert!(tail < head, "critic loss went from {head} to {tail}");
}

#[test]
fn same_seed_gives_identical_runs() {
    let run = || {
        let eps = episodes(3, 20);
        let m = MotionVae::new(motion_cfg(), 1).unwrap();
        let c = ContentVae::new(content_cfg(), 2).unwrap();
        let g = Generator::new(generator_cfg(), 3).unwrap();
        let cfg = GanConfig {
            critic: critic_cfg(),
            checkpoint_every: 0,
            ..Default::default()
        };
        train_gan(g, &eps, &m, &c, cfg, &train_cfg(3, 9), None).unwrap()
    };
    let (g1, c1, l1) = run();
    let (g2, c2, l2) = run();
    assert_eq!(l1.to_csv(), l2.to_csv());
    assert!(identical(&snapshot(g1.var_store()), &snapshot(g2.var_store())));
    assert!(identical(&snapshot(c1.var_store()), &snapshot(c2.var_store())));
    assert_eq!(g1.steps_trained(), g2.steps_trained());
}

#[test]
fn checkpoints_written_during_training_reload_as_generator() {
    let eps = episodes(3, 30);
    let m = MotionVae::new(motion_cfg(), 1).unwrap();
    let c = ContentVae::new(content_cfg(), 2).unwrap();
    let g = Generator::new(generator_cfg(), 3).unwrap();
    let cfg = GanConfig {
        critic: critic_cfg(),
        checkpoint_every: 1,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (g, _, log) = train_gan(g, &eps, &m, &c, cfg, &train_cfg(2, 1), Some(dir.path().to_path_buf())).unwrap();
    assert_eq!(log.column("gen_loss").len(), 2);
    let ck = trackgen::checkpoint::Checkpoint::load(dir.path(), trackgen::generator::GENERATOR_CKPT).unwrap();
    let back = Generator::from_checkpoint(&ck).unwrap();
    assert_eq!(back.stage(), trackgen::checkpoint::ModelType::Generator);
    assert!(identical(&snapshot(back.var_store()), &snapshot(g.var_store())));
    assert!(dir.path().join(format!("{}.json", trackgen::generator::CRITIC_CKPT)).exists());
}
