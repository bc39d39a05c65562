use std::cell::RefCell;

use proptest::prelude::*;

use stiv::conditioning::{TaskKind, TaskMode};
use stiv::flow::{
    cfg_renorm, euler_sample, fm_loss, interpolant, jit_cfg, sit_cfg, sit_grid, velocity_target, velocity_to_score,
    GuidanceConfig, SampleRequest, SamplerConfig, VelocityField, DEFAULT_DELTA, DEFAULT_GUIDANCE_SCALE,
    SIT_GRID_SCALES,
};
use stiv::conditioning::LossMask;
use stiv::model::{Condition, ImageCondition, MicroConditions, ModelInput, StivConfig, StivModel, TextCondition};
use stiv::{Result, RngState, Tape, Tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
    RngState::new(seed).gaussian(shape)
}

#[test]
fn interpolant_endpoints_and_midpoint() {
    let (x1, eps) = (randn(1, &[3, 5]), randn(2, &[3, 5]));
    assert_eq!(interpolant(&x1, &eps, 0.0).unwrap(), eps);
    assert_eq!(interpolant(&x1, &eps, 1.0).unwrap(), x1);
    let mid = interpolant(&t(&[1], &[2.0]), &t(&[1], &[0.0]), 0.5).unwrap();
    assert_eq!(mid.data(), &[1.0]);
    assert!(interpolant(&x1, &randn(3, &[5, 3]), 0.5).is_err());
}

#[test]
fn velocity_target_is_the_time_derivative_of_the_interpolant() {
    assert_eq!(velocity_target(&t(&[1], &[3.0]), &t(&[1], &[1.0])).unwrap().data(), &[2.0]);
    let x = randn(4, &[2, 3]);
    assert!(velocity_target(&x, &x).unwrap().data().iter().all(|&v| v == 0.0));
    for seed in 0..5 {
        let (x1, eps) = (randn(10 + seed, &[4, 6]), randn(20 + seed, &[4, 6]));
        let v = velocity_target(&x1, &eps).unwrap();
        for tt in [0.1, 0.37, 0.5, 0.9] {
            let h = 1e-4;
            let hi = interpolant(&x1, &eps, tt + h).unwrap();
            let lo = interpolant(&x1, &eps, tt - h).unwrap();
            let fd = hi.sub(&lo).unwrap().scale(1.0 / (2.0 * h));
            assert!(fd.max_abs_diff(&v) < 1e-6, "t {tt}: {}", fd.max_abs_diff(&v));
        }
    }
}

#[test]
fn flow_loss_is_masked_mean_squared_error() {
    let target = randn(5, &[1, 2, 2, 2, 1]);
    let tape = Tape::new();
    let same = tape.param(target.clone());
    let all = [LossMask::all(2)];
    assert_eq!(fm_loss(&same, &target, &all).unwrap().value().item(), 0.0);

    let shifted = tape.param(target.map(|v| v + 0.5));
    let l = fm_loss(&shifted, &target, &all).unwrap().value().item();
    assert!((l - 0.25).abs() < 1e-15);

    // Only frame 1 counts under the first-frame mask: hand-evaluated mean over 4 values.
    let pred = t(&[1, 2, 2, 2, 1], &[9.0, 9.0, 9.0, 9.0, 1.0, 2.0, 3.0, 4.0]);
    let target = t(&[1, 2, 2, 2, 1], &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let ti2v = TaskMode::new(TaskKind::Ti2v, 2).unwrap();
    let masks = [LossMask::for_mode(&ti2v, false)];
    let l = fm_loss(&tape.param(pred.clone()), &target, &masks).unwrap().value().item();
    assert_eq!(l, (1.0 + 4.0 + 9.0 + 16.0) / 4.0);

    let empty = [LossMask { frames: vec![false, false] }];
    assert!(fm_loss(&tape.param(pred), &target, &empty).is_err());
}

#[test]
fn joint_guidance_identities() {
    let (null, joint) = (randn(6, &[2, 8]), randn(7, &[2, 8]));
    assert_eq!(jit_cfg(&null, &joint, 1.0).unwrap(), joint);
    assert_eq!(jit_cfg(&null, &joint, 0.0).unwrap(), null);
    let v = jit_cfg(&t(&[1], &[1.0]), &t(&[1], &[3.0]), 7.5).unwrap();
    assert_eq!(v.data(), &[16.0]);
    assert_eq!(DEFAULT_GUIDANCE_SCALE, 7.5);
    assert_eq!(GuidanceConfig::default().s, 7.5);
}

proptest! {
    #[test]
    fn joint_guidance_is_affine_in_scale(seed in 0u64..500, s in -5.0f64..15.0) {
        let (null, joint) = (randn(seed, &[3, 4]), randn(seed + 1000, &[3, 4]));
        let step = jit_cfg(&null, &joint, s + 1.0).unwrap().sub(&jit_cfg(&null, &joint, s).unwrap()).unwrap();
        let slope = joint.sub(&null).unwrap();
        prop_assert!(step.max_abs_diff(&slope) < 1e-12);
    }
}

#[test]
fn separate_guidance_identities() {
    let (null, img, joint) = (randn(8, &[2, 5]), randn(9, &[2, 5]), randn(10, &[2, 5]));
    assert_eq!(sit_cfg(&null, &img, &joint, 1.0, 1.0).unwrap(), joint);
    let reduced = sit_cfg(&null, &null, &joint, 3.3, 7.5).unwrap();
    assert!(reduced.max_abs_diff(&jit_cfg(&null, &joint, 7.5).unwrap()) < 1e-12);
    let v = sit_cfg(&t(&[1], &[0.0]), &t(&[1], &[1.0]), &t(&[1], &[2.0]), 1.5, 7.5).unwrap();
    assert_eq!(v.data(), &[9.0]);
}

#[test]
fn renormalization_restores_the_conditional_norm() {
    let cond = t(&[2], &[3.0, 4.0]);
    assert_eq!(cfg_renorm(&t(&[2], &[10.0, 0.0]), &cond).unwrap().data(), &[5.0, 0.0]);
    assert_eq!(cfg_renorm(&cond, &cond).unwrap(), cond);
    assert_eq!(cfg_renorm(&t(&[2], &[0.0, 0.0]), &cond).unwrap(), cond);
    for seed in 0..5 {
        let (hat, c) = (randn(30 + seed, &[4, 7]), randn(40 + seed, &[4, 7]));
        let out = cfg_renorm(&hat, &c).unwrap();
        assert!((out.norm() - c.norm()).abs() < 1e-6);
        let cosine = out.dot(&hat) / (out.norm() * hat.norm());
        assert!((cosine - 1.0).abs() < 1e-6);
    }
}

#[test]
fn score_conversion_matches_the_gaussian_conditional_score() {
    let x = randn(11, &[3, 3]);
    let at0 = velocity_to_score(&randn(12, &[3, 3]), &x, 0.0, DEFAULT_DELTA).unwrap();
    assert_eq!(at0, x.scale(-1.0));
    for seed in 0..5 {
        let (x1, eps) = (randn(50 + seed, &[4, 4]), randn(60 + seed, &[4, 4]));
        let v = velocity_target(&x1, &eps).unwrap();
        for i in 1..10 {
            let tt = i as f64 / 10.0;
            let x_t = interpolant(&x1, &eps, tt).unwrap();
            let score = velocity_to_score(&v, &x_t, tt, DEFAULT_DELTA).unwrap();
            let analytic = eps.scale(-1.0 / (1.0 - tt));
            assert!(score.max_abs_diff(&analytic) < 1e-5, "t {tt}");
        }
    }
    assert!(velocity_to_score(&x, &x, 1.0 - DEFAULT_DELTA / 2.0, DEFAULT_DELTA).is_err());
}

#[test]
fn score_conversion_is_affine_in_the_velocity() {
    let (f1, f2, x) = (randn(70, &[5]), randn(71, &[5]), randn(72, &[5]));
    let (a, b, tt) = (0.3, -1.7, 0.4);
    let mix = f1.scale(a).add(&f2.scale(b)).unwrap();
    let lhs = velocity_to_score(&mix, &x, tt, DEFAULT_DELTA).unwrap();
    let s1 = velocity_to_score(&f1, &x, tt, DEFAULT_DELTA).unwrap();
    let s2 = velocity_to_score(&f2, &x, tt, DEFAULT_DELTA).unwrap();
    // The x-term enters once on the left and (a + b) times on the right.
    let correction = x.scale(-(1.0 - a - b) / (1.0 - tt));
    let rhs = s1.scale(a).add(&s2.scale(b)).unwrap().add(&correction).unwrap();
    assert!(lhs.max_abs_diff(&rhs) < 1e-12);
}

#[test]
fn grid_search_enumerates_the_twenty_five_pairs() {
    let grid = sit_grid(&SIT_GRID_SCALES, &SIT_GRID_SCALES);
    assert_eq!(grid.len(), 25);
    let mut expected = Vec::new();
    for a in [1.1, 1.5, 4.5, 7.5, 10.5] {
        for b in [1.1, 1.5, 4.5, 7.5, 10.5] {
            expected.push((a, b));
        }
    }
    assert_eq!(grid, expected);
    assert_eq!(sit_grid(&[2.0], &[3.0]), vec![(2.0, 3.0)]);
}

const LATENT: [usize; 4] = [4, 2, 2, 3];

fn micro() -> MicroConditions {
    MicroConditions::for_clip(4, 4, 4)
}

fn t2v_request(seed: u64) -> SampleRequest<f64> {
    SampleRequest {
        cond: Condition::text_only(TextCondition::from_caption("a blue square moves quickly left").unwrap()),
        mode: TaskMode::new(TaskKind::T2v, 4).unwrap(),
        micro: micro(),
        seed,
    }
}

/// Records every input it sees and returns `f(x, t)` per batch row.
struct Stub<F> {
    f: F,
    seen: RefCell<Vec<ModelInput<f64>>>,
}

impl<F: Fn(&Tensor<f64>, f64) -> Tensor<f64>> Stub<F> {
    fn new(f: F) -> Self {
        Self {
            f,
            seen: RefCell::new(Vec::new()),
        }
    }
}

impl<F: Fn(&Tensor<f64>, f64) -> Tensor<f64>> VelocityField<f64> for Stub<F> {
    fn velocity(&self, input: &ModelInput<f64>) -> Result<Tensor<f64>> {
        self.seen.borrow_mut().push(input.clone());
        let rows: Vec<_> = (0..input.batch()).map(|b| (self.f)(&input.x.index0(b), input.t[b])).collect();
        Tensor::stack(&rows)
    }
}

#[test]
fn one_euler_step_of_a_constant_field() {
    let v0 = randn(80, &LATENT);
    let stub = Stub::new(|_: &Tensor<f64>, _| v0.clone());
    let sc = SamplerConfig {
        n_steps: 1,
        ..SamplerConfig::default()
    };
    let out = euler_sample(&stub, &[t2v_request(5)], LATENT, &GuidanceConfig::none(), &sc).unwrap();
    let eps = randn(5, &LATENT);
    assert_eq!(out[0].data, eps.add(&v0).unwrap());
    assert_eq!(stub.seen.borrow()[0].t, vec![0.0]);
}

#[test]
fn euler_recursion_of_a_contracting_field() {
    let target = randn(81, &LATENT);
    let n = 50;
    let sc = SamplerConfig {
        n_steps: n,
        ..SamplerConfig::default()
    };
    let eps = randn(6, &LATENT);
    let gap0 = eps.sub(&target).unwrap().norm();

    // dx/dt = x1 - x: each step multiplies the gap by (1 - 1/n).
    let pull = Stub::new(|x: &Tensor<f64>, _| target.sub(x).unwrap());
    let out = euler_sample(&pull, &[t2v_request(6)], LATENT, &GuidanceConfig::none(), &sc).unwrap();
    let closed = target
        .add(&eps.sub(&target).unwrap().scale((1.0 - 1.0 / n as f64).powi(n as i32)))
        .unwrap();
    assert!(out[0].data.max_abs_diff(&closed) < 1e-12);

    // The straight-path field (x1 - x) / (1 - t) lands on x1.
    let straight = Stub::new(|x: &Tensor<f64>, tt| target.sub(x).unwrap().scale(1.0 / (1.0 - tt)));
    let out = euler_sample(&straight, &[t2v_request(6)], LATENT, &GuidanceConfig::none(), &sc).unwrap();
    assert!(out[0].data.sub(&target).unwrap().norm() < 0.05 * gap0);
    assert!(out[0].data.max_abs_diff(&target) < 1e-9);
}

fn tiny_model() -> StivModel<f64> {
    let cfg = StivConfig {
        n_blocks: 1,
        n_decoder_blocks: 1,
        hidden_dim: 16,
        n_heads: 2,
        text_dim: 16,
        vocab_size: 16,
        freq_dim: 16,
        frames: 4,
        height: 2,
        width: 2,
        channels: 3,
        spatial_patch: 1,
        temporal_patch: 1,
        ..StivConfig::default()
    };
    let mut m = StivModel::new(cfg, &mut RngState::new(1)).unwrap();
    // Open the zero-initialized paths so guidance branches actually differ.
    let mut rng = RngState::new(2);
    for p in m.params.tensors_mut() {
        if p.data().iter().all(|&v| v == 0.0) {
            let shape = p.shape().to_vec();
            *p = rng.gaussian::<f64>(&shape).scale(0.2);
        }
    }
    m
}

fn ti2v_request(seed: u64) -> SampleRequest<f64> {
    let clean = randn(500 + seed, &LATENT);
    let mode = TaskMode::new(TaskKind::Ti2v, 4).unwrap();
    SampleRequest {
        cond: Condition {
            text: Some(TextCondition::from_caption("a red triangle moves slowly down").unwrap()),
            image: Some(ImageCondition::from_clip(&clean, vec![0]).unwrap()),
        },
        mode,
        micro: micro(),
        seed,
    }
}

#[test]
fn unit_joint_scale_reproduces_unguided_sampling() {
    let model = tiny_model();
    let sc = SamplerConfig {
        n_steps: 6,
        ..SamplerConfig::default()
    };
    let reqs = [ti2v_request(1), t2v_request(2)];
    let plain = euler_sample(&model, &reqs, LATENT, &GuidanceConfig::none(), &sc).unwrap();
    let unit = euler_sample(&model, &reqs, LATENT, &GuidanceConfig::jit(1.0), &sc).unwrap();
    assert_eq!(plain, unit);
    let guided = euler_sample(&model, &reqs, LATENT, &GuidanceConfig::jit(7.5), &sc).unwrap();
    assert_ne!(plain, guided);
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let model = tiny_model();
    let sc = SamplerConfig {
        n_steps: 5,
        ..SamplerConfig::default()
    };
    let g = GuidanceConfig {
        renorm: true,
        ..GuidanceConfig::sit(1.5, 4.5)
    };
    let a = euler_sample(&model, &[ti2v_request(3)], LATENT, &g, &sc).unwrap();
    let b = euler_sample(&model, &[ti2v_request(3)], LATENT, &g, &sc).unwrap();
    assert_eq!(a, b);
    assert!(a[0].data.all_finite());
    let c = euler_sample(&model, &[ti2v_request(4)], LATENT, &g, &sc).unwrap();
    assert_ne!(a[0].data, c[0].data);
}

#[test]
fn pinned_frames_hold_at_every_step_and_guidance_branches_are_labelled() {
    let stub = Stub::new(|x: &Tensor<f64>, _| x.scale(-0.5));
    let req = ti2v_request(7);
    let clean = req.cond.image.as_ref().unwrap().frames.data().to_vec();
    let sc = SamplerConfig {
        n_steps: 5,
        ..SamplerConfig::default()
    };
    let out = euler_sample(&stub, std::slice::from_ref(&req), LATENT, &GuidanceConfig::sit(2.0, 3.0), &sc).unwrap();
    let n = clean.len();
    assert_eq!(&out[0].data.data()[..n], clean.as_slice());
    let eps = randn(7, &LATENT);
    let seen = stub.seen.borrow();
    assert_eq!(seen.len(), 5);
    for input in seen.iter() {
        assert_eq!(input.batch(), 3);
        let tt = input.t[0];
        let frame0 = |b: usize| input.x.index0(b).data()[..n].to_vec();
        // Joint and image-only branches see the pinned state.
        assert_eq!(frame0(0), clean);
        assert_eq!(frame0(1), clean);
        // The image-free branch sees the frame as if it had never been pinned.
        let renoised: Vec<f64> = clean.iter().zip(eps.data()).map(|(c, e)| tt * c + (1.0 - tt) * e).collect();
        assert_eq!(frame0(2), renoised);
        assert_eq!(input.tokens[0], req.cond.tokens());
        assert_eq!(input.tokens[1], vec![0]);
        assert_eq!(input.tokens[2], vec![0]);
        // Unpinned frames are shared by all branches.
        assert_eq!(input.x.index0(0).data()[n..], input.x.index0(2).data()[n..]);
    }
    let times: Vec<f64> = seen.iter().map(|i| i.t[0]).collect();
    assert_eq!(times, vec![0.0, 0.2, 0.4, 0.6, 0.8]);
}

#[test]
fn non_finite_states_abort_sampling() {
    let stub = Stub::new(|x: &Tensor<f64>, _| x.map(|_| f64::INFINITY));
    let sc = SamplerConfig {
        n_steps: 2,
        ..SamplerConfig::default()
    };
    assert!(euler_sample(&stub, &[t2v_request(1)], LATENT, &GuidanceConfig::none(), &sc).is_err());
    let zero = SamplerConfig {
        n_steps: 0,
        ..SamplerConfig::default()
    };
    assert!(euler_sample(&stub, &[t2v_request(1)], LATENT, &GuidanceConfig::none(), &zero).is_err());
}
