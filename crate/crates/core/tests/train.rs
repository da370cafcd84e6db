use motionsplat::blur::blur_path_counters;
use motionsplat::imagebuf::ImageBuffer;
use motionsplat::model::{AvatarModel, ModelConfig};
use motionsplat::render::RenderSettings;
use motionsplat::synthdata::{synthesize, Dataset, SceneConfig, SynthConfig};
use motionsplat::train::{evaluate, train, Stage, TrainConfig, TrainFrame, Trainer};

fn toy_dataset(seed: u64, frames: usize) -> Dataset {
    let cfg = SynthConfig {
        seed,
        frames,
        blur_size: 9,
        scene: SceneConfig {
            num_gaussians: 250,
            width: 20,
            height: 20,
            ..SceneConfig::default()
        },
        ..SynthConfig::default()
    };
    synthesize(&cfg).unwrap().1
}

fn toy_model(data: &Dataset, gaussians: usize, seed: u64) -> AvatarModel {
    let config = ModelConfig {
        num_gaussians: gaussians,
        ..ModelConfig::compact()
    };
    AvatarModel::new(data.manifest.chain.clone(), config, data.num_frames(), RenderSettings::default(), seed).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn defaults_follow_the_three_stage_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!((cfg.iterations, cfg.trajectory_start, cfg.fusion_start), (15000, 3000, 7000));
    assert_eq!(cfg.stage(2999), Stage::Sharp);
    assert_eq!(cfg.stage(3000), Stage::Blur);
    assert_eq!(cfg.stage(7000), Stage::Fusion);
    assert_eq!(cfg.loss_weights(0).skin, 10.0);

    let short = TrainConfig::scaled(3000);
    assert_eq!((short.trajectory_start, short.fusion_start), (600, 1400));
    assert!(TrainConfig::default().rescaled(3000) == short);
}

#[test]
fn two_hundred_iterations_reduce_the_loss() {
    let data = toy_dataset(11, 4);
    let frames = data.train_frames();
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let mut cfg = TrainConfig::scaled(200);
        cfg.seed = seed;
        cfg.densify.max_gaussians = 600;
        let (_, log) = train(toy_model(&data, 150, seed), &frames, cfg, None).unwrap();
        assert_eq!(log.len(), 200);
        // Average over one epoch at each end so frame difficulty cancels.
        let head: f64 = log[..4].iter().map(|r| r.total).sum();
        let tail: f64 = log[log.len() - 4..].iter().map(|r| r.total).sum();
        ratios.push(tail / head);
    }
    assert!(median(ratios.clone()) < 1.0, "final / initial loss per seed: {ratios:?}");
}

#[test]
fn single_virtual_pose_is_the_sharp_trainer() {
    let data = toy_dataset(12, 3);
    let frames = data.train_frames();
    let mut sharp_cfg = TrainConfig::scaled(60);
    sharp_cfg.motion_model = false;
    let mut single = TrainConfig::scaled(60);
    single.virtual_poses = 1;
    single.fusion = false;

    let before = blur_path_counters();
    let (a, log_a) = train(toy_model(&data, 120, 3), &frames, single, None).unwrap();
    assert_eq!(blur_path_counters(), before, "n = 1 must bypass the blur path");
    let (b, log_b) = train(toy_model(&data, 120, 3), &frames, sharp_cfg, None).unwrap();

    assert!(log_a.iter().all(|r| r.stage == Stage::Sharp));
    assert_eq!(a.model, b.model);
    let totals = |log: &[motionsplat::train::LossRecord]| log.iter().map(|r| r.total).collect::<Vec<_>>();
    assert_eq!(totals(&log_a), totals(&log_b));
}

#[test]
fn a_perfect_fit_is_a_fixed_point() {
    let data = toy_dataset(13, 2);
    let model = toy_model(&data, 80, 5);
    // Targets rendered by the model itself, at the poses it is fed.
    let frames: Vec<TrainFrame> = data
        .train_frames()
        .into_iter()
        .map(|mut f| {
            let img = model.render_sharp(&f.pose, &f.camera).unwrap();
            f.image = ImageBuffer::from_parts(img.width(), img.height(), img.rgb().to_vec(), vec![1.0; img.num_pixels()]).unwrap();
            f
        })
        .collect();
    let mut cfg = TrainConfig::scaled(20);
    cfg.motion_model = false;
    cfg.lambda_mask = 0.0;
    cfg.lambda_skin_start = 0.0;
    cfg.lambda_skin_end = 0.0;
    cfg.lambda_isopos = 0.0;
    cfg.lambda_isocov = 0.0;
    cfg.skin_warmup_steps = 0;
    cfg.densify.start = cfg.iterations + 1;
    let (ckpt, log) = train(model.clone(), &frames, cfg, None).unwrap();
    assert!(log.iter().all(|r| r.rgb == 0.0));
    assert_eq!(ckpt.model, model);
}

#[test]
fn evaluation_leaves_training_state_alone() {
    let data = toy_dataset(14, 2);
    let frames = data.train_frames();
    let mut cfg = TrainConfig::scaled(30);
    cfg.densify.max_gaussians = 300;
    let mut trainer = Trainer::new(toy_model(&data, 100, 1), &frames, cfg).unwrap();
    for _ in 0..30 {
        trainer.step().unwrap();
    }
    let snapshot = trainer.checkpoint();
    let counters = blur_path_counters();
    let ckpt = trainer.checkpoint();
    let report = evaluate(&trainer.model, &data.eval_frames(|f| ckpt.frame_pose(f))).unwrap();
    assert_eq!(blur_path_counters(), counters);
    assert_eq!(trainer.iteration, 30);
    assert_eq!(trainer.checkpoint(), snapshot);
    assert_eq!(report.frames.len(), 2 * (1 + data.eval_cameras.len()));
    assert!(report.mean_psnr.is_finite() && report.mean_ssim <= 1.0);
}

#[test]
fn identical_seeds_train_identically() {
    let data = toy_dataset(15, 3);
    let frames = data.train_frames();
    let run = || {
        let mut cfg = TrainConfig::scaled(40);
        cfg.seed = 8;
        train(toy_model(&data, 100, 8), &frames, cfg, None).unwrap()
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(log_a.len(), log_b.len());
}

#[test]
fn checkpoints_round_trip_and_missing_files_fail() {
    let data = toy_dataset(16, 2);
    let frames = data.train_frames();
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = train(toy_model(&data, 60, 2), &frames, TrainConfig::scaled(12), Some(dir.path())).unwrap();
    let loaded = motionsplat::train::Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(loaded, ckpt);
    assert!(dir.path().join("loss.csv").is_file());
    assert!(motionsplat::train::Checkpoint::load(&dir.path().join("absent.json")).is_err());
}
