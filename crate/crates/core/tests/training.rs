use autograd::Graph;
use priorsr::checkpoint::{Checkpoint, Stage};
use priorsr::config::{RunConfig, TrainConfig};
use priorsr::data::synth_train_set;
use priorsr::diffusion::diff_loss;
use priorsr::error::Error;
use priorsr::model::{image_loss, is_stage_two_only, stage1_loss, Batch, Model};
use priorsr::training::{train_to_dir, StepRecord, Trainer, CHECKPOINT_FILE};
use proptest::prelude::*;

/// 16×16 HR, scale 2, one stage of one block.
fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.hr_size = 16;
    cfg.data.scale = 2;
    cfg.data.num_ellipses = 3;
    cfg.data.train_samples = 3;
    let m = &mut cfg.model;
    m.channels = 8;
    m.latent_channels = 2;
    m.window = 4;
    m.blocks = vec![1];
    m.heads = vec![2];
    m.fusion_heads = 2;
    m.head_channels = 4;
    m.encoder_blocks = 3;
    m.denoiser_hidden = 16;
    m.denoiser_layers = 2;
    m.time_embed_dim = 4;
    cfg.train.batch_size = 2;
    cfg.train = cfg.train.with_total_steps(20);
    cfg.validate().unwrap();
    cfg
}

fn trainer_after(cfg: &RunConfig, stage: Stage, steps: u64) -> Trainer {
    let samples = synth_train_set(cfg).unwrap();
    let mut t = Trainer::stage_one(cfg, samples.clone()).unwrap();
    if stage == Stage::Two {
        for _ in 0..2 {
            t.step_once().unwrap();
        }
        t = Trainer::stage_two(cfg, &t.checkpoint(), samples).unwrap();
    }
    for _ in 0..steps {
        t.step_once().unwrap();
    }
    t
}

fn snapshot(t: &Trainer, keep: impl Fn(&str) -> bool) -> Vec<(String, Vec<f32>)> {
    t.params
        .iter()
        .filter(|(_, n, _)| keep(n))
        .map(|(_, n, v)| (n.to_string(), v.iter().copied().collect()))
        .collect()
}

#[test]
fn learning_rate_halves_at_each_milestone() {
    let t = TrainConfig::default();
    assert_eq!(t.lr_at(0), 2e-4);
    assert_eq!(t.lr_at(2499), 2e-4);
    assert_eq!(t.lr_at(2500), 1e-4);
    assert_eq!(t.lr_at(4000), 5e-5);
    assert_eq!(t.lr_at(4500), 2.5e-5);
    assert_eq!(t.lr_at(4999), 1.25e-5);
    let short = t.with_total_steps(200);
    assert_eq!(short.lr_milestones, vec![100, 160, 180, 190]);
    assert_eq!(short.lr_at(100), 1e-4);
}

#[test]
fn milestones_must_increase_and_stay_below_total() {
    let mut cfg = RunConfig::default();
    cfg.train.lr_milestones = vec![10, 5];
    assert!(cfg.validate().unwrap_err().to_string().contains("lr_milestones"));
    cfg.train.lr_milestones = vec![5000];
    assert!(cfg.validate().is_err());
}

#[test]
fn exact_reconstruction_has_zero_loss() {
    let cfg = tiny();
    let samples = synth_train_set(&cfg).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let batch = Batch::new(&refs, cfg.data.scale).unwrap();
    let (store, _): (_, Model) = Model::init::<f64>(&cfg);
    let mut g = Graph::inference(&store);
    let sr = g.constant(batch.hr.mapv(|v| v as f64));
    let (loss, parts) = image_loss(&mut g, sr, &batch, &cfg);
    assert_eq!(parts.l_img, 0.0);
    assert!(parts.l_dc.abs() < 1e-12, "{}", parts.l_dc);
    assert!(g.item(loss).abs() < 1e-12);
    // Adding a matching prior keeps the stage-two total at zero.
    let z = g.constant(ndarray::ArrayD::from_elem(vec![3, cfg.model.prior_dim()], 0.3));
    let z2 = g.constant(ndarray::ArrayD::from_elem(vec![3, cfg.model.prior_dim()], 0.3));
    let d = diff_loss(&mut g, z, z2);
    assert_eq!(g.item(d), 0.0);
}

#[test]
fn without_dc_weight_the_loss_is_the_image_term() {
    let mut cfg = tiny();
    cfg.train.lambda_dc = 0.0;
    let samples = synth_train_set(&cfg).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let batch = Batch::new(&refs, cfg.data.scale).unwrap();
    let (store, model) = Model::init::<f64>(&cfg);
    let mut g = Graph::inference(&store);
    let (loss, parts) = stage1_loss(&mut g, &model, &batch, &cfg);
    assert!(parts.l_dc > 0.0);
    assert_eq!(parts.total, parts.l_img);
    assert!((g.item(loss) - parts.l_img).abs() < 1e-15);
}

fn check_record(cfg: &RunConfig, r: &StepRecord) {
    assert!(r.l_img >= 0.0 && r.l_dc >= 0.0 && r.l_diff >= 0.0);
    let weighted = cfg.train.lambda_img * r.l_img + cfg.train.lambda_dc * r.l_dc + r.l_diff;
    assert_eq!(r.total, weighted);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn loss_components_are_nonnegative_and_sum_exactly(seed in 0u64..1000, lambda_dc in 0.0f64..0.1) {
        let mut cfg = tiny();
        cfg.train.seed = seed;
        cfg.train.lambda_dc = lambda_dc;
        let samples = synth_train_set(&cfg).unwrap();
        let mut t = Trainer::stage_one(&cfg, samples.clone()).unwrap();
        let r = t.step_once().unwrap();
        check_record(&cfg, &r);
        prop_assert_eq!(r.l_diff, 0.0);
        let mut t2 = Trainer::stage_two(&cfg, &t.checkpoint(), samples).unwrap();
        let r = t2.step_once().unwrap();
        check_record(&cfg, &r);
        prop_assert!(r.l_diff > 0.0);
    }

    #[test]
    fn every_epoch_visits_each_sample_once(seed in 0u64..1000, batch in 1usize..5) {
        let mut cfg = tiny();
        cfg.train.seed = seed;
        cfg.train.batch_size = batch;
        let t = Trainer::stage_one(&cfg, synth_train_set(&cfg).unwrap()).unwrap();
        let n = 3;
        let drawn: Vec<usize> = (0..6).flat_map(|s| t.batch_indices(s)).collect();
        for epoch in drawn.chunks_exact(n) {
            let mut sorted = epoch.to_vec();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, vec![0, 1, 2]);
        }
    }
}

#[test]
fn overfits_a_single_sample() {
    let mut cfg = RunConfig::default();
    cfg.data.train_samples = 1;
    cfg.train.batch_size = 1;
    cfg.train = cfg.train.with_total_steps(200);
    cfg.train.base_lr = 1e-3;
    let mut t = Trainer::stage_one(&cfg, synth_train_set(&cfg).unwrap()).unwrap();
    let first = t.step_once().unwrap().total;
    let mut last = first;
    t.run(|_, r| {
        last = r.total;
        Ok(())
    })
    .unwrap();
    assert!(last < 0.2 * first, "{first} -> {last}");
}

#[test]
fn zero_condition_keeps_stage_two_finite() {
    let mut cfg = tiny();
    cfg.model.use_condition = false;
    let t = trainer_after(&cfg, Stage::Two, 3);
    let p = t.peek_loss().unwrap();
    assert!(p.total.is_finite() && p.l_diff.is_finite());
}

#[test]
fn separate_training_only_moves_condition_and_denoiser() {
    let mut cfg = tiny();
    cfg.model.use_joint_training = false;
    let before = trainer_after(&cfg, Stage::Two, 0);
    let mut after = trainer_after(&cfg, Stage::Two, 0);
    let r = after.step_once().unwrap();
    assert_eq!(r.total, r.l_diff);
    let frozen = |n: &str| !is_stage_two_only(n);
    assert_eq!(snapshot(&before, frozen), snapshot(&after, frozen));
    let moved = snapshot(&before, is_stage_two_only)
        .into_iter()
        .zip(snapshot(&after, is_stage_two_only))
        .filter(|(a, b)| a != b)
        .count();
    assert!(moved > 0);
}

#[test]
fn stage_two_leaves_the_prior_extractor_bit_identical() {
    let cfg = tiny();
    let start = trainer_after(&cfg, Stage::Two, 0);
    let end = trainer_after(&cfg, Stage::Two, 4);
    let pe = |n: &str| n.starts_with("pe.");
    assert!(!snapshot(&start, pe).is_empty());
    assert_eq!(snapshot(&start, pe), snapshot(&end, pe));
    let net = |n: &str| n.starts_with("trunk.");
    assert_ne!(snapshot(&start, net), snapshot(&end, net));
}

#[test]
fn stage_one_leaves_stage_two_modules_untouched() {
    let cfg = tiny();
    let a = trainer_after(&cfg, Stage::One, 0);
    let b = trainer_after(&cfg, Stage::One, 3);
    assert_eq!(snapshot(&a, is_stage_two_only), snapshot(&b, is_stage_two_only));
}

#[test]
fn resume_reproduces_the_next_step_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for stage in [Stage::One, Stage::Two] {
        let cfg = tiny();
        let mut straight = trainer_after(&cfg, stage, 3);
        let path = dir.path().join(format!("{stage}.safetensors"));
        straight.checkpoint().save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 3);
        assert_eq!(loaded.stage, stage);
        let mut resumed = Trainer::resume(loaded, synth_train_set(&cfg).unwrap()).unwrap();
        assert_eq!(resumed.peek_loss().unwrap(), straight.peek_loss().unwrap());
        for _ in 0..2 {
            assert_eq!(resumed.step_once().unwrap(), straight.step_once().unwrap());
        }
    }
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let cfg = tiny();
    let run = || {
        let samples = synth_train_set(&cfg).unwrap();
        let mut t = Trainer::stage_one(&cfg, samples.clone()).unwrap();
        let mut records: Vec<StepRecord> = (0..3).map(|_| t.step_once().unwrap()).collect();
        let mut t2 = Trainer::stage_two(&cfg, &t.checkpoint(), samples).unwrap();
        records.extend((0..3).map(|_| t2.step_once().unwrap()));
        records
    };
    assert_eq!(run(), run());
    let mut other = cfg.clone();
    other.train.seed = 1;
    let mut t = Trainer::stage_one(&other, synth_train_set(&other).unwrap()).unwrap();
    assert_ne!(t.step_once().unwrap(), run()[0]);
}

#[test]
fn non_finite_loss_aborts_with_batch_ids() {
    let cfg = tiny();
    let mut t = trainer_after(&cfg, Stage::One, 1);
    let id = t.params.id("head.out.weight").or_else(|| t.params.ids().next()).unwrap();
    t.params.get_mut(id).fill(f32::NAN);
    let expected: Vec<String> = t.batch_indices(1).iter().map(|&i| t.samples()[i].sample_id.clone()).collect();
    match t.step_once() {
        Err(Error::NonFinite { step, batch }) => {
            assert_eq!(step, 2);
            assert_eq!(batch, expected);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
    assert_eq!(t.step, 1);
}

#[test]
fn metrics_and_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train = cfg.train.with_total_steps(3);
    cfg.train.checkpoint_every = 2;
    let mut t = Trainer::stage_one(&cfg, synth_train_set(&cfg).unwrap()).unwrap();
    let path = train_to_dir(&mut t, dir.path(), false).unwrap();
    assert_eq!(path, dir.path().join(CHECKPOINT_FILE));
    assert!(dir.path().join("checkpoint-2.safetensors").exists());
    let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for (i, line) in lines.iter().enumerate() {
        assert_eq!(line["step"], (i + 1) as u64);
        for key in ["l_img", "l_dc", "l_diff", "lr"] {
            assert!(line[key].is_number(), "{key}");
        }
    }
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!((ck.stage, ck.step), (Stage::One, 3));
    assert_eq!(ck.config, cfg);
    for (id, name, value) in t.params.iter() {
        assert_eq!(ck.params.get(ck.params.id(name).unwrap()), value, "{name}");
        let _ = id;
    }
}

#[test]
fn stage_two_needs_a_stage_one_checkpoint_and_a_prior() {
    let cfg = tiny();
    let t2 = trainer_after(&cfg, Stage::Two, 0);
    let Err(err) = Trainer::stage_two(&cfg, &t2.checkpoint(), synth_train_set(&cfg).unwrap()) else {
        panic!("stage two accepted a stage-two checkpoint");
    };
    assert!(err.is_config());
    let t1 = trainer_after(&cfg, Stage::One, 0);
    let mut no_prior = cfg.clone();
    no_prior.model.use_prior = false;
    assert!(Trainer::stage_two(&no_prior, &t1.checkpoint(), synth_train_set(&cfg).unwrap()).is_err());
    assert!(Trainer::stage_one(&cfg, Vec::new()).is_err());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let t = trainer_after(&cfg, Stage::One, 1);
    let path = dir.path().join("c.safetensors");
    t.checkpoint().save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&path, bytes).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::MissingFile(_))));
}
