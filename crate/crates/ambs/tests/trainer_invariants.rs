//! End-to-end guarantees of the training loop that only show up across a
//! save/load boundary: checkpoints must be invisible in the metrics, and a
//! shielded method with the shield switched off must be indistinguishable
//! from the unshielded baseline from that point on.

use ambs::env::EnvConfig;
use ambs::shield::ShieldConfig;
use ambs::trainer::{
    AgentConfig, AnyTrainer, ExperimentConfig, LagrangianSettings, Method, SeedStreams,
    EXPERIMENT_SCHEMA,
};

fn grid_config(method: Method, total_frames: u64, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        schema: EXPERIMENT_SCHEMA.into(),
        method,
        env: EnvConfig::GridHazard {
            width: 5,
            height: 5,
            hazards: vec![7, 11],
            goals: vec![24],
            vases: vec![],
            starts: vec![0],
            slip: 0.05,
            episode_limit: 60,
            observe_goal: false,
            cost_value: 10.0,
        },
        agent: AgentConfig {
            warmup_frames: 128,
            batch_size: 8,
            horizon: 8,
            ..AgentConfig::default()
        },
        shield: ShieldConfig {
            n_samples: 16,
            horizon: 8,
            lookahead_horizon: 12,
            ..ShieldConfig::default()
        },
        seed_streams: SeedStreams::default(),
        shield_active: true,
        total_frames,
        seed,
        metrics_every: 250,
        lagrangian: if method == Method::Lag { Some(LagrangianSettings::default()) } else { None },
    }
}

fn csv_bytes(t: &AnyTrainer) -> Vec<u8> {
    let mut buf = Vec::new();
    t.metrics().write_csv(&mut buf).unwrap();
    buf
}

#[test]
fn resume_replays_the_uninterrupted_run() {
    let mut full = AnyTrainer::build(grid_config(Method::AmbsPenl, 2000, 42)).unwrap();
    full.run().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.json");
    let mut half = AnyTrainer::build(grid_config(Method::AmbsPenl, 1000, 42)).unwrap();
    half.run().unwrap();
    half.save(&path).unwrap();

    let mut resumed = AnyTrainer::load(&path, Some(grid_config(Method::AmbsPenl, 2000, 42))).unwrap();
    resumed.run().unwrap();

    assert_eq!(resumed.frames(), 2000);
    assert_eq!(csv_bytes(&full), csv_bytes(&resumed));
}

#[test]
fn shield_toggle_resumes_as_the_unshielded_baseline() {
    // A snapshot mid-way through a shielded run, continued two ways: the
    // same method with the shield disabled, and the plain baseline. The
    // shield draws from its own stream and the pure-shielding method uses
    // the baseline's gradient, so the two continuations must agree bit for
    // bit — the shield's entire influence is confined to its overrides.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shielded.json");
    let mut shielded = AnyTrainer::build(grid_config(Method::Ambs, 1000, 7)).unwrap();
    shielded.run().unwrap();
    shielded.save(&path).unwrap();

    let mut toggled_cfg = grid_config(Method::Ambs, 2000, 7);
    toggled_cfg.shield_active = false;
    let mut toggled = AnyTrainer::load(&path, Some(toggled_cfg)).unwrap();
    toggled.run().unwrap();

    let mut vanilla = AnyTrainer::load(&path, Some(grid_config(Method::Vanilla, 2000, 7))).unwrap();
    vanilla.run().unwrap();

    assert_eq!(csv_bytes(&toggled), csv_bytes(&vanilla));

    // Sanity: the shield was actually doing something before the toggle.
    let rows = &toggled.metrics().rows;
    let pre = rows.iter().find(|r| r.frames == 1000).unwrap();
    assert!(pre.interventions > 0, "snapshot run never intervened");
    let post = rows.last().unwrap();
    assert_eq!(post.interventions, pre.interventions, "no interventions after the toggle");
}
