use priorsr::checkpoint::Stage;
use priorsr::config::{RunConfig, Variant};
use priorsr::data::{synth_train_set, ComplexImage};
use priorsr::eval::{evaluate, evaluate_inference, run_ablation, PriorSource, Predictor};
use priorsr::model::{Batch, Inputs};
use priorsr::training::Trainer;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.hr_size = 16;
    cfg.data.scale = 2;
    cfg.data.num_ellipses = 3;
    cfg.data.train_samples = 2;
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
    cfg.train = cfg.train.with_total_steps(2);
    cfg
}

fn stage_two(cfg: &RunConfig) -> Predictor {
    let samples = synth_train_set(cfg).unwrap();
    let mut t1 = Trainer::stage_one(cfg, samples.clone()).unwrap();
    t1.run(|_, _| Ok(())).unwrap();
    let mut t2 = Trainer::stage_two(cfg, &t1.checkpoint(), samples).unwrap();
    t2.run(|_, _| Ok(())).unwrap();
    Predictor::new(&t2.checkpoint()).unwrap()
}

fn inputs(cfg: &RunConfig) -> (Inputs, Vec<priorsr::data::MultiContrastSample>) {
    let samples = synth_train_set(cfg).unwrap();
    let lr: Vec<&ComplexImage> = samples.iter().map(|s| &s.target_lr).collect();
    let r: Vec<&ComplexImage> = samples.iter().map(|s| &s.ref_hr).collect();
    let inputs = Inputs::new(&lr, Some(&r), cfg.data.scale).unwrap();
    (inputs, samples)
}

#[test]
fn inference_upsamples_and_is_deterministic_per_seed() {
    let cfg = tiny();
    let pred = stage_two(&cfg);
    let (x, _) = inputs(&cfg);
    let a = pred.infer(&x, 7).unwrap();
    assert_eq!(a.len(), 2);
    assert_eq!((a[0].height(), a[0].width()), (16, 16));
    let b = pred.infer(&x, 7).unwrap();
    assert_eq!(a, b);
    let z7 = pred.sample_prior(&x, 7).unwrap();
    let z8 = pred.sample_prior(&x, 8).unwrap();
    assert_ne!(z7, z8);
    // Rerunning the evaluation reproduces every number.
    let samples = synth_train_set(&cfg).unwrap();
    let r1 = evaluate_inference(&pred, &samples, 3).unwrap();
    let r2 = evaluate_inference(&pred, &samples, 3).unwrap();
    assert_eq!(r1, r2);
    r1.validate().unwrap();
}

#[test]
fn batch_elements_do_not_interact() {
    let cfg = tiny();
    let pred = stage_two(&cfg);
    let (x, samples) = inputs(&cfg);
    let joint = pred.infer(&x, 5).unwrap();
    let alone = Inputs::new(&[&samples[0].target_lr], Some(&[&samples[0].ref_hr]), 2).unwrap();
    let single = pred.infer(&alone, 5).unwrap();
    let diff = joint[0]
        .values()
        .iter()
        .zip(single[0].values().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn inference_never_reads_the_target() {
    let cfg = tiny();
    let pred = stage_two(&cfg);
    let samples = synth_train_set(&cfg).unwrap();
    let mut tampered = samples.clone();
    for s in &mut tampered {
        s.target_hr = ComplexImage::zeros(16, 16);
    }
    let seed = 11;
    let a = evaluate(&pred, &samples, PriorSource::Sampled, seed).unwrap();
    let b = evaluate(&pred, &tampered, PriorSource::Sampled, seed).unwrap();
    // Metrics change because the reference changed, reconstructions do not.
    assert_ne!(a.mean_psnr_db, b.mean_psnr_db);
    let ba = Batch::new(&[&samples[0]], 2).unwrap();
    let bb = Batch::new(&[&tampered[0]], 2).unwrap();
    assert_eq!(pred.infer(&ba.inputs, seed).unwrap(), pred.infer(&bb.inputs, seed).unwrap());
}

#[test]
fn stage_one_models_with_a_prior_cannot_infer() {
    let cfg = tiny();
    let samples = synth_train_set(&cfg).unwrap();
    let t1 = Trainer::stage_one(&cfg, samples.clone()).unwrap();
    let pred = Predictor::new(&t1.checkpoint()).unwrap();
    assert_eq!(pred.stage, Stage::One);
    let (x, _) = inputs(&cfg);
    assert!(pred.infer(&x, 0).unwrap_err().is_config());
    // Target-prior reconstruction works at any stage.
    let report = evaluate(&pred, &samples, PriorSource::Target, 0).unwrap();
    assert_eq!(report.samples.len(), 2);
}

#[test]
fn single_contrast_models_take_no_reference() {
    let cfg = tiny().with_variant(Variant::NoReference);
    let pred = stage_two(&cfg);
    let samples = synth_train_set(&cfg).unwrap();
    let lr_only = Inputs::new(&[&samples[0].target_lr], None, 2).unwrap();
    assert_eq!(pred.infer(&lr_only, 0).unwrap()[0].height(), 16);
    assert!(Inputs::new(&[&samples[0].target_lr], Some(&[&samples[0].target_lr]), 2).is_err());
}

#[test]
fn variant_flags() {
    let full = RunConfig::default().with_variant(Variant::Full).model;
    assert!(
        full.use_reference
            && full.use_prior
            && full.use_joint_training
            && full.use_dc
            && full.use_condition
            && full.use_large_window
    );
    let np = RunConfig::default().with_variant(Variant::NoPrior).model;
    assert!(!np.use_prior && !np.use_joint_training && !np.use_condition);
    assert!(np.use_reference && np.use_dc && np.use_large_window);
    for v in Variant::ALL {
        let m = RunConfig::default().with_variant(v).model;
        let off = [
            m.use_reference,
            m.use_prior,
            m.use_joint_training,
            m.use_dc,
            m.use_condition,
            m.use_large_window,
        ]
        .iter()
        .filter(|f| !**f)
        .count();
        let expected = match v {
            Variant::Full => 0,
            Variant::NoPrior => 3,
            _ => 1,
        };
        assert_eq!(off, expected, "{}", v.name());
    }
}

#[test]
fn ablation_reports_carry_accounting() {
    let cfg = tiny();
    let full = run_ablation(Variant::Full, &cfg, synth_train_set(&cfg).unwrap()).unwrap();
    let np = run_ablation(Variant::NoPrior, &cfg, synth_train_set(&cfg).unwrap()).unwrap();
    assert!(full.stage_two.is_some() && np.stage_two.is_none());
    assert_eq!(full.report.variant, Some(Variant::Full));
    assert!(full.report.param_count > np.report.param_count);
    assert!(full.report.macs_per_sample > np.report.macs_per_sample);
    assert!(np.report.macs_per_sample > 0);
    assert_eq!(np.report.prior_source, PriorSource::None);
    let analytic = priorsr::flops::count_flops(&cfg.model, 8, 8, 2, cfg.diffusion.steps).total;
    assert_eq!(full.report.macs_per_sample, analytic);
}
