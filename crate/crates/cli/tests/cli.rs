use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use stiv::conditioning::TaskKind;
use stiv::flow::{GuidanceScheme, SIT_GRID_SCALES};
use stiv::model::{StivConfig, StivModel};
use stiv::synth::{corpus, ppm, CorpusConfig};
use stiv::train::{Origin, RopeMode, TrainConfig, Trainer, TrainExample};
use stiv::RngState;
use stiv_cli::checkpoint::Checkpoint;
use stiv_cli::commands::gridsearch::{cmd_gridsearch, GridsearchArgs};
use stiv_cli::commands::long_video::{cmd_long_video, LongVideoArgs};
use stiv_cli::commands::sample::{cmd_sample, GuidanceArgs, SampleArgs};
use stiv_cli::commands::surgery::{cmd_surgery, SurgeryArgs};
use stiv_cli::commands::train::{checkpoint_path, cmd_train, TrainArgs};
use stiv_cli::config::RunConfig;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn smoke_data() -> CorpusConfig {
    RunConfig::load(&smoke_config()).unwrap().data
}

/// One smoke training run shared by the sampling tests.
fn trained() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        cmd_train(&TrainArgs {
            config: smoke_config(),
            out_dir: dir.clone(),
            resume: None,
        })
        .unwrap();
        dir
    })
}

fn losses(path: &Path) -> Vec<(u64, String)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].parse().unwrap(), rec[1].to_string())
        })
        .collect()
}

fn guidance(scheme: GuidanceScheme, scale: f64) -> GuidanceArgs {
    GuidanceArgs {
        scheme,
        scale,
        s1: scale,
        s2: scale,
        renorm: false,
    }
}

fn sample_args(out: &Path, mode: TaskKind, images: Vec<PathBuf>) -> SampleArgs {
    SampleArgs {
        ckpt: trained().join("final.stiv"),
        mode,
        caption: "a red circle moves slowly right".into(),
        images,
        steps: 6,
        guidance: guidance(GuidanceScheme::Jit, 3.0),
        seed: 9,
        raw: false,
        out_dir: out.to_path_buf(),
    }
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn stiv(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_stiv")).args(args).output().unwrap()
}

#[test]
fn smoke_run_is_fast_and_its_smoothed_loss_never_rises() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let summary = cmd_train(&TrainArgs {
        config: smoke_config(),
        out_dir: dir.path().to_path_buf(),
        resume: None,
    })
    .unwrap();
    assert!(start.elapsed().as_secs_f64() < 60.0);
    assert_eq!(summary.steps, 50);
    let text = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert!(text.starts_with("step,loss,grad_norm,lr\n"));
    assert!(!text.contains('\r'));
    let loss: Vec<f64> = losses(&dir.path().join("loss.csv")).iter().map(|(_, l)| l.parse().unwrap()).collect();
    assert_eq!(loss.len(), 50);
    let smooth: Vec<f64> = loss.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(smooth.windows(2).all(|w| w[1] <= w[0]), "{smooth:?}");
    assert!(dir.path().join("eval.json").exists());
}

#[test]
fn resumed_run_replays_the_uninterrupted_loss_sequence() {
    let full = tempfile::tempdir().unwrap();
    let cfg_path = full.path().join("run.json");
    let mut run = RunConfig::load(&smoke_config()).unwrap();
    run.steps = 30;
    run.checkpoint_every = 10;
    run.eval.enabled = false;
    std::fs::write(&cfg_path, serde_json::to_string(&run).unwrap()).unwrap();
    cmd_train(&TrainArgs {
        config: cfg_path.clone(),
        out_dir: full.path().to_path_buf(),
        resume: None,
    })
    .unwrap();

    let resumed = tempfile::tempdir().unwrap();
    std::fs::copy(full.path().join("loss.csv"), resumed.path().join("loss.csv")).unwrap();
    cmd_train(&TrainArgs {
        config: cfg_path,
        out_dir: resumed.path().to_path_buf(),
        resume: Some(checkpoint_path(full.path(), 10)),
    })
    .unwrap();
    assert_eq!(losses(&full.path().join("loss.csv")), losses(&resumed.path().join("loss.csv")));
    assert_eq!(
        std::fs::read(full.path().join("final.stiv")).unwrap(),
        std::fs::read(resumed.path().join("final.stiv")).unwrap()
    );
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (train, _) = corpus(&smoke_data()).unwrap();
    let data: Vec<TrainExample<f32>> = train.iter().take(4).map(|c| TrainExample::from_clip(c).unwrap()).collect();
    let run = RunConfig::load(&smoke_config()).unwrap();
    let model = StivModel::<f32>::new(run.model.clone(), &mut RngState::new(1)).unwrap();
    let mut tr = Trainer::new(model, run.train.clone()).unwrap();
    tr.step(&data).unwrap();
    let ck = Checkpoint::from_trainer(&tr, None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.stiv");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.tensors.len(), ck.tensors.len());
    for (name, t) in &ck.tensors {
        let u = &back.tensors[name];
        assert_eq!(t.shape(), u.shape());
        let bits = |x: &stiv::Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t), bits(u), "{name}");
    }
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());

    // Continuing from the restored state matches continuing the original.
    let mut a = tr;
    let mut b = back.trainer().unwrap();
    assert_eq!(a.step(&data).unwrap().loss, b.step(&data).unwrap().loss);
}

#[test]
fn checkpoint_manifest_is_sorted_and_unique() {
    let model = StivModel::<f32>::new(StivConfig::default(), &mut RngState::new(0)).unwrap();
    let bytes = Checkpoint::from_model(&model).to_bytes().unwrap();
    assert_eq!(&bytes[..5], b"STIV1");
    let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[13..13 + len]).unwrap();
    let names: Vec<&str> = header["manifest"].as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(names, sorted);
    assert_eq!(names.len(), model.params.len());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = StivModel::<f32>::new(StivConfig::default(), &mut RngState::new(0)).unwrap();
    let bytes = Checkpoint::from_model(&model).to_bytes().unwrap();
    let p = Path::new("x.stiv");
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4], p).is_err());
    assert!(Checkpoint::from_bytes(b"NOPE!", p).is_err());
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(Checkpoint::from_bytes(&wrong, p).is_err());
}

#[test]
fn golden_checkpoint_still_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden.stiv");
    let bytes = std::fs::read(&path).unwrap();
    let ck = Checkpoint::from_bytes(&bytes, &path).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), bytes);
    assert!(ck.has_ema());
    let state = ck.train.as_ref().unwrap();
    assert_eq!(state.step, 2);
    let model = ck.model().unwrap();
    let rebuilt = golden_trainer().model;
    assert_eq!(model.params.len(), rebuilt.params.len());
    for ((n, a), (m, b)) in model.params.iter().zip(rebuilt.params.iter()) {
        assert_eq!(n, m);
        assert_eq!(a, b, "{n}");
    }
}

/// The run the golden checkpoint was cut from.
fn golden_trainer() -> Trainer<f32> {
    let config = StivConfig {
        n_blocks: 1,
        n_decoder_blocks: 1,
        hidden_dim: 16,
        n_heads: 2,
        text_dim: 8,
        vocab_size: 64,
        freq_dim: 8,
        temporal_patch: 1,
        frames: 2,
        height: 4,
        width: 4,
        ..StivConfig::default()
    };
    let data_cfg = CorpusConfig {
        frames: 2,
        height: 8,
        width: 8,
        object_size: 2,
        ..CorpusConfig::default()
    };
    let (train, _) = corpus(&data_cfg).unwrap();
    let data: Vec<TrainExample<f32>> = train.iter().take(4).map(|c| TrainExample::from_clip(c).unwrap()).collect();
    let model = StivModel::<f32>::new(config, &mut RngState::new(3)).unwrap();
    let mut tr = Trainer::new(
        model,
        TrainConfig {
            batch_size: 2,
            seed: 4,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    tr.step(&data).unwrap();
    tr.step(&data).unwrap();
    tr
}

#[test]
#[ignore = "regenerates tests/data/golden.stiv"]
fn write_golden_checkpoint() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden.stiv");
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    Checkpoint::from_trainer(&golden_trainer(), None).save(&path).unwrap();
}

#[test]
fn unknown_config_key_is_named_and_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model": {"hiden_dim": 32}}"#).unwrap();
    let out = stiv(&["--out-dir", dir.path().to_str().unwrap(), "train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("hiden_dim"), "{err}");
    assert!(err.contains("line 1"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));
}

#[test]
fn ti2v_first_frame_is_the_condition_image() {
    let dir = tempfile::tempdir().unwrap();
    let (_, heldout) = corpus(&smoke_data()).unwrap();
    let clip = &heldout[0];
    let image = dir.path().join("cond.ppm");
    std::fs::write(&image, ppm::encode(clip.video.frame(0), clip.video.width, clip.video.height)).unwrap();
    let out = dir.path().join("out");
    cmd_sample(&sample_args(&out, TaskKind::Ti2v, vec![image.clone()])).unwrap();
    assert_eq!(std::fs::read(out.join("frame_0000.ppm")).unwrap(), std::fs::read(&image).unwrap());
    assert!(out.join("frame_0003.ppm").exists());
    assert!(out.join("latent.bin").exists() && out.join("latent.json").exists());
}

#[test]
fn sampling_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_sample(&sample_args(&a, TaskKind::T2v, vec![])).unwrap();
    cmd_sample(&sample_args(&b, TaskKind::T2v, vec![])).unwrap();
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
}

#[test]
fn unit_joint_guidance_equals_no_guidance() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("jit"), dir.path().join("none"));
    let mut args = sample_args(&a, TaskKind::T2v, vec![]);
    args.guidance = guidance(GuidanceScheme::Jit, 1.0);
    cmd_sample(&args).unwrap();
    args.out_dir = b.clone();
    args.guidance = guidance(GuidanceScheme::None, 7.5);
    cmd_sample(&args).unwrap();
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
}

#[test]
fn missing_condition_images_and_unknown_tokens_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_sample(&sample_args(dir.path(), TaskKind::Interpolate, vec![])).unwrap_err();
    assert!(err.to_string().contains("2 condition image"), "{err}");
    let mut args = sample_args(dir.path(), TaskKind::T2v, vec![]);
    args.caption = "purple hexagon".into();
    assert!(cmd_sample(&args).is_err());

    let ckpt = trained().join("final.stiv");
    let out = stiv(&["sample", "--ckpt", ckpt.to_str().unwrap(), "--mode", "ti2v", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn long_video_with_two_keyframes_is_one_segment() {
    let dir = tempfile::tempdir().unwrap();
    let args = |k: usize| LongVideoArgs {
        ckpt: trained().join("final.stiv"),
        caption: "a blue square moves quickly down".into(),
        keyframe_stride: 20,
        segment_frames: None,
        keyframes: Some(k),
        steps: 4,
        guidance: guidance(GuidanceScheme::Jit, 2.0),
        seed: 3,
        raw: false,
        out_dir: dir.path().to_path_buf(),
    };
    let (video, report) = cmd_long_video(&args(2)).unwrap();
    assert_eq!(report.frames, 4);
    assert_eq!(video.frames, 4);
    let keys = ppm::read(&dir.path().join("keyframes/frame_0000.ppm")).unwrap();
    assert_eq!(video.frame(0), keys.frame(0));
    let last = ppm::read(&dir.path().join("keyframes/frame_0001.ppm")).unwrap();
    assert_eq!(video.frame(3), last.frame(0));

    let (video, report) = cmd_long_video(&args(5)).unwrap();
    assert_eq!(video.frames, 4 * 4);
    assert_eq!(report.segment_starts, vec![0, 4, 8, 12]);
    for s in 1..4 {
        assert_eq!(video.frame(4 * s - 1), video.frame(4 * s));
    }
    assert!(cmd_long_video(&args(1)).is_err());
}

#[test]
fn surgery_writes_a_checkpoint_and_a_complete_audit() {
    let dir = tempfile::tempdir().unwrap();
    let image_cfg = StivConfig {
        n_blocks: 1,
        n_decoder_blocks: 1,
        hidden_dim: 16,
        n_heads: 2,
        text_dim: 8,
        freq_dim: 8,
        frames: 4,
        height: 4,
        width: 4,
        ..StivConfig::default()
    }
    .image_only();
    let t2i = StivModel::<f32>::new(image_cfg.clone(), &mut RngState::new(2)).unwrap();
    let t2i_path = dir.path().join("t2i.stiv");
    Checkpoint::from_model(&t2i).save(&t2i_path).unwrap();
    let target = StivConfig {
        temporal: true,
        temporal_patch: 1,
        frames: 4,
        ..image_cfg
    };
    let target_path = dir.path().join("target.json");
    std::fs::write(&target_path, serde_json::to_string(&target).unwrap()).unwrap();

    let out = dir.path().join("video");
    let summary = cmd_surgery(&SurgeryArgs {
        from_t2i: Some(t2i_path.clone()),
        from_t2v: None,
        target: target_path.clone(),
        rope: None,
        seed: 0,
        out_dir: out.clone(),
    })
    .unwrap();
    let model = Checkpoint::load(&summary.checkpoint).unwrap().model().unwrap();
    let audit: std::collections::BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(&std::fs::read(out.join("audit.json")).unwrap()).unwrap();
    let names: Vec<String> = model.params.names().to_vec();
    assert_eq!(audit.keys().cloned().collect::<std::collections::BTreeSet<_>>(), names.iter().cloned().collect());
    assert!(summary.count(Origin::Copied) > 0 && summary.count(Origin::Fresh) > 0);

    let longer = dir.path().join("longer.json");
    std::fs::write(&longer, serde_json::to_string(&StivConfig { frames: 8, ..target }).unwrap()).unwrap();
    let ext = cmd_surgery(&SurgeryArgs {
        from_t2i: None,
        from_t2v: Some(summary.checkpoint.clone()),
        target: longer,
        rope: Some(RopeMode::Extrapolate),
        seed: 0,
        out_dir: dir.path().join("ext"),
    })
    .unwrap();
    assert_eq!(ext.count(Origin::Copied), ext.audit.len());

    let missing = dir.path().join("nope.stiv");
    let status = stiv(&[
        "surgery",
        "--from-t2i",
        missing.to_str().unwrap(),
        "--target",
        target_path.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!status.status.success());
}

fn grid_args(out: &Path, s1: Vec<f64>, s2: Vec<f64>) -> GridsearchArgs {
    GridsearchArgs {
        ckpt: trained().join("final.stiv"),
        scales1: s1,
        scales2: s2,
        modes: vec![TaskKind::Ti2v],
        max_clips: Some(1),
        steps: 2,
        renorm: false,
        seed: 0,
        raw: false,
        out_dir: out.to_path_buf(),
    }
}

#[test]
fn gridsearch_covers_the_cartesian_product_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let rows = cmd_gridsearch(&grid_args(dir.path(), SIT_GRID_SCALES.to_vec(), SIT_GRID_SCALES.to_vec())).unwrap();
    assert_eq!(rows.len(), 25);
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.s1, r.s2)).collect();
    let mut sorted = pairs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(pairs, sorted);
    let text = std::fs::read_to_string(dir.path().join("gridsearch.csv")).unwrap();
    assert_eq!(text.lines().count(), 26);

    let again = tempfile::tempdir().unwrap();
    cmd_gridsearch(&grid_args(again.path(), vec![4.5], vec![1.1])).unwrap();
    let single = std::fs::read_to_string(again.path().join("gridsearch.csv")).unwrap();
    assert_eq!(single.lines().count(), 2);
    let row = text.lines().find(|l| l.starts_with("4.5,1.1,")).unwrap();
    assert_eq!(single.lines().nth(1).unwrap(), row);

    assert!(cmd_gridsearch(&grid_args(dir.path(), vec![], vec![1.0])).is_err());
    assert!(cmd_gridsearch(&grid_args(dir.path(), vec![1.0], vec![])).is_err());
}

#[test]
fn bad_thread_cap_is_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_stiv"))
        .env("STIV_THREADS", "zero")
        .args(["export-corpus", "--out-dir", "/nonexistent/never"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("STIV_THREADS"));
}
