use std::collections::{BTreeMap, BTreeSet};

use stiv::conditioning::TaskKind;
use stiv::flow::{GuidanceConfig, SamplerConfig, VelocityField};
use stiv::model::{text, ModelInput, PixelVideo, StivConfig, StivModel, ToyCodec};
use stiv::synth::{
    combinations, corpus, corpus_specs, eval_suite, generate_clip, heldout_loss, motion_oracle, ppm, ClipSpec,
    Clip, Color, CorpusConfig, Direction, EvalOptions, Shape, STATIC_SPEED,
};
use stiv::{Result, RngState, Tensor};

fn spec(direction: Direction, speed: u32) -> ClipSpec {
    ClipSpec {
        shape: Shape::Square,
        color: Color::Green,
        direction,
        speed,
        start: (12, 12),
        frames: 8,
        height: 32,
        width: 32,
        size: 6,
    }
}

/// Mean coordinate of lit pixels, computed straight from the bytes.
fn lit_centroid(video: &PixelVideo, f: usize) -> (f64, f64) {
    let (mut n, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (i, px) in video.frame(f).chunks(3).enumerate() {
        if px.iter().any(|&v| v > 0) {
            n += 1.0;
            sx += (i % video.width) as f64;
            sy += (i / video.width) as f64;
        }
    }
    (sx / n, sy / n)
}

#[test]
fn static_clip_repeats_its_first_frame() {
    let clip = generate_clip(&spec(Direction::Left, 0)).unwrap();
    for f in 1..8 {
        assert_eq!(clip.video.frame(f), clip.video.frame(0));
    }
    let v = motion_oracle(&clip.video);
    assert!(v.is_static());
    assert_eq!(v.speed, 0.0);
}

#[test]
fn rightward_clip_advances_one_pixel_per_frame() {
    let clip = generate_clip(&spec(Direction::Right, 1)).unwrap();
    for f in 1..8 {
        let (x0, y0) = lit_centroid(&clip.video, f - 1);
        let (x1, y1) = lit_centroid(&clip.video, f);
        assert_eq!(x1 - x0, 1.0);
        assert_eq!(y1, y0);
    }
    let v = motion_oracle(&clip.video);
    assert_eq!(v.direction, Some(Direction::Right));
    assert!((v.speed - 1.0).abs() <= STATIC_SPEED, "speed {}", v.speed);
}

#[test]
fn generation_is_deterministic_and_captions_follow_the_spec() {
    let mut s = spec(Direction::Up, 2);
    s.start = (12, 20);
    let (a, b) = (generate_clip(&s).unwrap(), generate_clip(&s).unwrap());
    assert_eq!(a.video.data, b.video.data);
    assert_eq!(s.caption(), "a green square moves quickly up");
    assert_eq!(text::detokenize(&a.tokens), s.caption());
    assert_eq!((a.micro.num_frames, a.micro.sampling_stride, a.micro.crop_coords), (8, 1, (0, 0)));
    assert_eq!(a.micro.original_resolution, (32, 32));
}

#[test]
fn trajectories_leaving_the_frame_are_rejected() {
    let mut s = spec(Direction::Right, 2);
    s.start = (20, 0);
    assert!(generate_clip(&s).is_err());
}

#[test]
fn shapes_have_distinct_footprints() {
    let lit = |shape| {
        let mut s = spec(Direction::Down, 1);
        s.shape = shape;
        s.size = 8;
        let c = generate_clip(&s).unwrap();
        c.video.frame(0).chunks(3).filter(|p| p.iter().any(|&v| v > 0)).count()
    };
    let (sq, ci, tr) = (lit(Shape::Square), lit(Shape::Circle), lit(Shape::Triangle));
    assert_eq!(sq, 64);
    assert!(ci < sq && tr < ci, "{sq} {ci} {tr}");
}

#[test]
fn oracle_recovers_every_corpus_direction_and_speed() {
    let cfg = CorpusConfig::default();
    let (train, heldout) = corpus(&cfg).unwrap();
    for clip in train.iter().chain(&heldout) {
        let v = motion_oracle(&clip.video);
        assert_eq!(v.direction, Some(clip.spec.direction), "{:?}", clip.spec);
        assert!((v.speed - clip.spec.speed as f64).abs() <= STATIC_SPEED, "{:?} {v:?}", clip.spec);
        assert_eq!(v.confidence, 1.0);
    }
}

#[test]
fn oracle_calls_black_video_static() {
    let v = motion_oracle(&PixelVideo::black(4, 16, 16));
    assert!(v.is_static());
    assert_eq!((v.speed, v.confidence), (0.0, 0.0));
}

#[test]
fn corpus_covers_all_combinations_and_splits_deterministically() {
    let cfg = CorpusConfig::default();
    assert_eq!(combinations().len(), 72);
    let specs = corpus_specs(&cfg).unwrap();
    let combos: BTreeSet<_> = specs
        .iter()
        .map(|s| (s.shape.word(), s.color.word(), s.direction.word(), s.speed))
        .collect();
    assert_eq!(combos.len(), 72);
    assert_eq!(specs.len(), 72 * cfg.starts_per_combo);
    assert!(specs.iter().all(|s| s.in_bounds()));

    let (train, heldout) = corpus(&cfg).unwrap();
    let (train2, heldout2) = corpus(&cfg).unwrap();
    let key = |c: &[Clip]| c.iter().map(|c| c.spec.digest()).collect::<Vec<_>>();
    assert_eq!(key(&train), key(&train2));
    assert_eq!(key(&heldout), key(&heldout2));
    assert_eq!(train.len() + heldout.len(), specs.len());
    let frac = heldout.len() as f64 / specs.len() as f64;
    assert!((0.1..0.3).contains(&frac), "held-out fraction {frac}");
    let train_keys: BTreeSet<_> = key(&train).into_iter().collect();
    assert!(key(&heldout).iter().all(|k| !train_keys.contains(k)));
}

#[test]
fn codec_round_trips_corpus_clips_exactly() {
    let (train, _) = corpus(&CorpusConfig::default()).unwrap();
    for clip in train.iter().step_by(17) {
        let z32 = clip.latent::<f32>().unwrap();
        assert_eq!(z32.shape(), &[8, 16, 16, 12]);
        assert_eq!(ToyCodec::decode(&z32).unwrap(), clip.video);
        assert_eq!(ToyCodec::decode(&clip.latent::<f64>().unwrap()).unwrap(), clip.video);
    }
}

#[test]
fn ppm_round_trip_and_corpus_export_layout() {
    let clip = generate_clip(&spec(Direction::Down, 1)).unwrap();
    let bytes = ppm::encode(clip.video.frame(3), 32, 32);
    assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
    let back = ppm::decode(&bytes).unwrap();
    assert_eq!(back.data, clip.video.frame(3));

    let commented = [b"P6\n# made by hand\n32 32\n255\n".as_slice(), clip.video.frame(3)].concat();
    assert_eq!(ppm::decode(&commented).unwrap().data, clip.video.frame(3));
    assert!(ppm::decode(b"P5\n2 2\n255\n\0\0\0\0").is_err());
    assert!(ppm::decode(b"P6\n2 2\n255\n\0\0").is_err());

    let dir = tempfile::tempdir().unwrap();
    ppm::export_corpus(dir.path(), std::slice::from_ref(&clip)).unwrap();
    let clip_dir = dir.path().join("clip_0000");
    let caption = std::fs::read_to_string(clip_dir.join("caption.txt")).unwrap();
    assert_eq!(caption, format!("{}\n", clip.spec.caption()));
    for f in 0..8 {
        let frame = ppm::read(&clip_dir.join(format!("frame_{f:04}.ppm"))).unwrap();
        assert_eq!(frame.data, clip.video.frame(f));
    }
}

/// Transports noise exactly onto the clip whose caption matches: along the straight
/// path the velocity is `(x1 - x) / (1 - t)`.
struct Teleport(BTreeMap<Vec<usize>, Tensor<f64>>);

impl VelocityField<f64> for Teleport {
    fn velocity(&self, input: &ModelInput<f64>) -> Result<Tensor<f64>> {
        let parts = (0..input.batch())
            .map(|b| {
                let x1 = &self.0[&input.tokens[b]];
                let x = input.x.index0(b);
                let k = 1.0 / (1.0 - input.t[b]);
                x1.zip_map(&x, |a, c| (a - c) * k)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&parts)
    }
}

fn one_clip_per_caption() -> Vec<Clip> {
    let (train, _) = corpus(&CorpusConfig::default()).unwrap();
    let mut seen = BTreeSet::new();
    train.into_iter().filter(|c| seen.insert(c.tokens.clone())).take(24).collect()
}

#[test]
fn eval_suite_scores_ground_truth_generations_perfectly() {
    let clips = one_clip_per_caption();
    let field = Teleport(clips.iter().map(|c| (c.tokens.clone(), c.latent().unwrap())).collect());
    let opts = EvalOptions {
        modes: vec![TaskKind::Ti2v, TaskKind::T2v, TaskKind::Interpolate],
        guidance: GuidanceConfig::none(),
        sampler: SamplerConfig {
            n_steps: 4,
            ..SamplerConfig::default()
        },
        ..EvalOptions::default()
    };
    let report = eval_suite(&field, &clips, &opts).unwrap();
    for m in &report.modes {
        assert_eq!(m.samples, clips.len());
        assert_eq!((m.direction_accuracy, m.motion_presence, m.nan_free), (1.0, 1.0, 1.0), "{m:?}");
    }
    assert_eq!(report.mode(TaskKind::Ti2v).unwrap().first_frame_exact, Some(1.0));
    assert_eq!(report.mode(TaskKind::T2v).unwrap().first_frame_exact, None);
    assert!(report.heldout_loss.is_finite());
}

#[test]
fn untrained_model_is_at_chance_and_keeps_the_first_frame() {
    let cfg = StivConfig::default();
    let model = StivModel::<f32>::new(cfg, &mut RngState::new(3)).unwrap();
    let (train, heldout) = corpus(&CorpusConfig::default()).unwrap();
    let clips: Vec<Clip> = heldout.into_iter().chain(train).take(64).collect();
    let opts = EvalOptions {
        modes: vec![TaskKind::Ti2v],
        sampler: SamplerConfig {
            n_steps: 2,
            ..SamplerConfig::default()
        },
        batch: 32,
        ..EvalOptions::default()
    };
    let report = eval_suite(&model, &clips, &opts).unwrap();
    let ti2v = report.mode(TaskKind::Ti2v).unwrap();
    assert_eq!(ti2v.first_frame_exact, Some(1.0));
    assert_eq!(ti2v.nan_free, 1.0);
    // Noise frames mostly read as static, which only ever lowers the hit rate. Among
    // the clips the oracle does call moving, hits stay inside a 3-sigma binomial band
    // around 1/4.
    let moving = (ti2v.motion_presence * 64.0).round();
    assert!(moving >= 16.0, "{ti2v:?}");
    let rate = ti2v.direction_accuracy / ti2v.motion_presence;
    let sigma = (0.25f64 * 0.75 / moving).sqrt();
    assert!((rate - 0.25).abs() <= 3.0 * sigma, "{ti2v:?}");
    assert!(ti2v.direction_accuracy <= 0.35, "{ti2v:?}");

    // A zero velocity field costs E‖x1 - eps‖².
    let loss = heldout_loss(&model, &clips[..16], 0).unwrap();
    let data: f64 = clips[..16]
        .iter()
        .map(|c| c.latent::<f64>().unwrap().data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / (16 * 8 * 16 * 16 * 12) as f64;
    assert!((loss - (data + 1.0)).abs() < 0.05 * (data + 1.0), "{loss} vs {}", data + 1.0);
}
