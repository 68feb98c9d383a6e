use multimode_asr::data::{gen_dataset, TaskSpec};
use multimode_asr::eval::{context_sweep, default_schedules, TrainTag};
use multimode_asr::losses::{brute_force_transducer_loss, distill_kl, merge_posteriors, transducer_loss};
use multimode_asr::masking::{
    build_mask, latency_ms, receptive_future, sample_schedule, ContextSchedule, Latency, SamplerSpec,
};
use multimode_asr::model::{forward_lattice, init_params, Dropout, ModelConfig, PosteriorLattice};
use multimode_asr::params::write_checkpoint;
use multimode_asr::tensor::{Graph, Tensor};
use multimode_asr::ParamSet;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sampler() -> impl Strategy<Value = SamplerSpec> {
    prop_oneof![
        (0usize..3, 0usize..3).prop_map(|(lo, w)| SamplerSpec::TiedUniform { lo, hi: lo + w }),
        (0usize..3, 0usize..3).prop_map(|(lo, w)| SamplerSpec::UntiedUniform { lo, hi: lo + w }),
        (-1.0f64..2.0, 0.1f64..2.0).prop_map(|(mu, sigma)| SamplerSpec::TiedNormal { mu, sigma }),
        (-1.0f64..2.0, 0.1f64..2.0).prop_map(|(mu, sigma)| SamplerSpec::UntiedNormal { mu, sigma }),
        (0usize..16, 1.0f64..4.0).prop_map(|(c_max, d)| SamplerSpec::Constrained { c_max, d }),
        (0usize..4).prop_map(SamplerSpec::Fixed),
    ]
}

fn small_model() -> ModelConfig {
    ModelConfig {
        audio_layers: 3,
        label_layers: 1,
        d_model: 8,
        d_ff: 16,
        heads: 2,
        d_joint: 8,
        vocab: 5,
        feat_dim: 4,
        downsample: 2,
        frontend_history: 1,
    }
}

fn features(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> Tensor<f64> {
    Tensor::new(
        vec![frames, dim],
        (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn lattice(p: &ParamSet, cfg: &ModelConfig, x: &Tensor<f64>, y: &[usize], s: &ContextSchedule) -> Tensor<f64> {
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let v = forward_lattice(&mut g, &b, cfg, x, y, s, &mut Dropout::eval()).unwrap();
    g.value(v).clone()
}

fn random_lattice(rng: &mut ChaCha8Rng, t: usize, u: usize, v: usize) -> PosteriorLattice<f64> {
    let mut logp = Vec::new();
    for _ in 0..t * (u + 1) {
        let raw: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z = raw.iter().map(|x| x.exp()).sum::<f64>().ln();
        logp.extend(raw.iter().map(|x| x - z));
    }
    PosteriorLattice {
        frames: t,
        label_rows: u + 1,
        vocab: v,
        logp,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constrained_totals_stay_within_budget(seed in any::<u64>(), c_max in 0usize..20, d in 1.0f64..4.0, layers in 1usize..13) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let s = sample_schedule(SamplerSpec::Constrained { c_max, d }, layers, &mut rng);
            prop_assert!(s.total().unwrap() <= c_max);
            prop_assert_eq!(s.num_layers(), layers);
        }
    }

    #[test]
    fn tied_draws_share_one_value(seed in any::<u64>(), spec in sampler(), layers in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_schedule(spec, layers, &mut rng);
        let cs = s.per_layer().unwrap();
        if matches!(spec, SamplerSpec::TiedUniform { .. } | SamplerSpec::TiedNormal { .. } | SamplerSpec::Fixed(_)) {
            prop_assert!(cs.iter().all(|&c| c == cs[0]));
        }
        // every draw is in the sampler's own support
        prop_assert!(spec.supports(&s));
    }

    #[test]
    fn causal_mask_and_monotone_allowance(frames in 1usize..24, c in 0usize..24) {
        prop_assert_eq!(build_mask(frames, Some(0)).allowed_count(), frames * (frames + 1) / 2);
        let a = build_mask(frames, Some(c)).flags();
        let b = build_mask(frames, Some(c + 1)).flags();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| !x || *y));
        prop_assert!(build_mask(frames, None).flags().iter().all(|&f| f));
    }

    #[test]
    fn latency_is_linear_in_total_lookahead(cs in prop::collection::vec(0usize..5, 1..13), ms in 1.0f64..40.0, ds in 1usize..8, fe in 0usize..8) {
        let layers = cs.len();
        let s = ContextSchedule::from_layers(cs, SamplerSpec::Fixed(0));
        let r = receptive_future(&s).unwrap();
        let base = ContextSchedule::fixed(0, layers);
        let (Latency::Millis(l), Latency::Millis(l0)) = (latency_ms(&s, ms, ds, fe), latency_ms(&base, ms, ds, fe)) else {
            panic!("bounded schedules have finite latency");
        };
        prop_assert!((l - l0 - (r * ds) as f64 * ms).abs() < 1e-9);
        prop_assert_eq!(latency_ms(&ContextSchedule::full(layers), ms, ds, fe), Latency::Unbounded);
    }

    #[test]
    fn transducer_dp_matches_enumeration(seed in any::<u64>(), t in 1usize..6, u in 0usize..5, v in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lat = random_lattice(&mut rng, t, u, v);
        let y: Vec<usize> = (0..u).map(|_| rng.random_range(1..v)).collect();
        let dp = transducer_loss(&lat, &y).unwrap();
        let bf = brute_force_transducer_loss(&lat, &y).unwrap();
        prop_assert!(((dp - bf) / bf).abs() < 1e-9);
    }

    #[test]
    fn distillation_is_non_negative_and_zero_on_itself(seed in any::<u64>(), t in 1usize..5, u in 0usize..4, shift in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<usize> = (0..u).map(|_| rng.random_range(1..5)).collect();
        let a = merge_posteriors(&random_lattice(&mut rng, t, u, 5), &y).unwrap();
        let b = merge_posteriors(&random_lattice(&mut rng, t, u, 5), &y).unwrap();
        prop_assert_eq!(distill_kl(&a, &a, 0).unwrap(), 0.0);
        if shift < t {
            prop_assert!(distill_kl(&a, &b, shift).unwrap() >= -1e-15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn lattice_columns_ignore_frames_beyond_the_bound(seed in any::<u64>(), spec in sampler(), frames in 6usize..12) {
        let cfg = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: ParamSet = init_params(&cfg, &mut rng);
        let s = sample_schedule(spec, cfg.audio_layers, &mut rng);
        let c = receptive_future(&s).unwrap();
        let ds = cfg.downsample;
        let x = features(&mut rng, frames * ds, cfg.feat_dim);
        let y = [1, 3];
        let base = lattice(&p, &cfg, &x, &y, &s);
        let per_col = base.len() / frames;
        for t in 0..frames {
            let first_hidden = t * ds + ds * (c + 1);
            if first_hidden >= frames * ds {
                break;
            }
            let mut z = x.clone();
            for v in &mut z.data_mut()[first_hidden * cfg.feat_dim..] {
                *v = rng.random_range(-3.0..3.0);
            }
            let out = lattice(&p, &cfg, &z, &y, &s);
            let col = t * per_col..(t + 1) * per_col;
            let diff = base.data()[col.clone()].iter().zip(&out.data()[col]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(diff < 1e-10, "column {} moved by {}", t, diff);
        }
    }

    #[test]
    fn lattice_rows_are_normalized(seed in any::<u64>(), frames in 1usize..6, u in 0usize..4) {
        let cfg = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: ParamSet = init_params(&cfg, &mut rng);
        let x = features(&mut rng, frames * cfg.downsample, cfg.feat_dim);
        let y: Vec<usize> = (0..u).map(|_| rng.random_range(1..cfg.vocab)).collect();
        let lat = lattice(&p, &cfg, &x, &y, &ContextSchedule::fixed(1, cfg.audio_layers));
        for node in lat.data().chunks(cfg.vocab) {
            let total: f64 = node.iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

fn checkpoint_bytes(p: &ParamSet, cfg: &ModelConfig) -> Vec<u8> {
    let mut v = Vec::new();
    write_checkpoint(&mut v, &cfg.header(), p).unwrap();
    v
}

#[test]
fn sweeps_leave_weights_untouched_and_repeat_exactly() {
    let cfg = ModelConfig {
        vocab: 8,
        feat_dim: 8,
        ..small_model()
    };
    let p: ParamSet = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
    let data = gen_dataset(&TaskSpec::default(), 5, 11, "t").unwrap();
    let before = checkpoint_bytes(&p, &cfg);
    let tag = TrainTag {
        sampler: SamplerSpec::TiedUniform { lo: 0, hi: 2 },
        full_branch: true,
    };
    let scheds = default_schedules(cfg.audio_layers);
    let a = context_sweep(&p, &cfg, &data, &scheds, &tag, 4).unwrap();
    let b = context_sweep(&p, &cfg, &data, &scheds, &tag, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(checkpoint_bytes(&p, &cfg), before);
    // utterance order does not change the corpus-level result
    let mut rev = data.clone();
    rev.reverse();
    assert_eq!(context_sweep(&p, &cfg, &rev, &scheds, &tag, 4).unwrap(), a);
}
