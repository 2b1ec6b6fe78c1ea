use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spd_autograd::{Graph, Tensor};
use spd_core::agent::{ReplayBuffer, Transition};
use spd_core::config::TrainConfig;
use spd_core::imageops::{
    augment_strong, augment_weak, color_jitter, cutout_color, grayscale, random_convolution, random_shift,
    shift_with_offsets, AugmentationSpec, ImageBatch, JitterStrength,
};
use spd_core::nets::{Bind, Discriminator, ForwardModel, HeadDepth, InverseModel};
use spd_core::objectives::{
    discriminator_loss, encoder_adv_loss, forward_loss, inverse_loss, spd_total, SpdLatents, SpdOptions, SpdWeights,
};
use spd_core::pixelenv::{BackgroundKind, EnvConfig, Observation, PixelEnv, SpawnMode};

fn batch_strategy() -> impl Strategy<Value = ImageBatch> {
    (1usize..4, 1usize..3, 8usize..14).prop_flat_map(|(n, frames, size)| {
        let len = n * 3 * frames * size * size;
        prop::collection::vec(0.0f32..=1.0, len)
            .prop_map(move |data| ImageBatch::new(Tensor::new(&[n, 3 * frames, size, size], data).unwrap()).unwrap())
    })
}

fn in_unit_range(b: &ImageBatch) -> bool {
    b.tensor().data().iter().all(|v| (0.0..=1.0).contains(v))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn primitives_keep_shape_and_range(batch in batch_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let outs = [
            random_shift(&batch, 2, &mut rng).unwrap(),
            grayscale(&batch, 0.5, &mut rng),
            random_convolution(&batch, &mut rng),
            color_jitter(&batch, JitterStrength::default(), &mut rng),
            cutout_color(&batch, (0.1, 0.3), &mut rng),
        ];
        for out in &outs {
            prop_assert_eq!(out.shape(), batch.shape());
            prop_assert!(in_unit_range(out));
        }
    }

    #[test]
    fn augmentations_are_seed_deterministic(batch in batch_strategy(), seed in any::<u64>()) {
        let spec = AugmentationSpec { pad_pixels: 2, ..AugmentationSpec::default() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = augment_weak(&batch, &spec, &mut rng).unwrap();
            let s = augment_strong(&batch, &spec, &mut rng).unwrap();
            (w.into_tensor(), s.0.into_tensor(), s.1)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn grayscale_channels_are_equal(batch in batch_strategy(), seed in any::<u64>()) {
        let out = grayscale(&batch, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        for i in 0..out.batch() {
            for f in 0..out.frames() {
                for r in 0..out.height() {
                    for c in 0..out.width() {
                        let v = out.at(i, 3 * f, r, c);
                        prop_assert_eq!(v, out.at(i, 3 * f + 1, r, c));
                        prop_assert_eq!(v, out.at(i, 3 * f + 2, r, c));
                    }
                }
            }
        }
    }

    #[test]
    fn shift_preserves_interior(batch in batch_strategy(), dy in 0usize..5, dx in 0usize..5) {
        let pad = 2;
        let out = shift_with_offsets(&batch, pad, &vec![(dy, dx); batch.batch()]).unwrap();
        let (h, w) = (batch.height() as isize, batch.width() as isize);
        for i in 0..batch.batch() {
            for ch in 0..batch.channels() {
                for r in 0..h {
                    for c in 0..w {
                        let (sr, sc) = (r + dy as isize - pad as isize, c + dx as isize - pad as isize);
                        if (0..h).contains(&sr) && (0..w).contains(&sc) {
                            prop_assert_eq!(
                                out.at(i, ch, r as usize, c as usize),
                                batch.at(i, ch, sr as usize, sc as usize)
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn softplus_pair_identity_holds_for_all_gaps(gap in -20.0f64..20.0, base in 20.0f64..30.0) {
        // D(z) = relu(z) on one-dimensional latents, so the score gap is set directly.
        let mut d = Discriminator::<f64>::new(1, 1, false, &mut ChaCha8Rng::seed_from_u64(0));
        for (i, v) in [1.0, 0.0, 1.0, 0.0].into_iter().enumerate() {
            d.params_mut().get_mut(i).data_mut()[0] = v;
        }
        let mut g = Graph::new();
        let zw = g.input(Tensor::new(&[1, 1], vec![base + gap]).unwrap());
        let zs = g.input(Tensor::new(&[1, 1], vec![base]).unwrap());
        let adv = encoder_adv_loss(&mut g, &d, zw, zs).unwrap();
        let dl = discriminator_loss(&mut g, &d, zw, zs).unwrap();
        let (adv, dl) = (g.value(adv).item(), g.value(dl).item());
        prop_assert!((adv - softplus(gap)).abs() < 1e-9);
        prop_assert!((dl - softplus(-gap)).abs() < 1e-9);
        prop_assert!((adv - dl - gap).abs() < 1e-9);
        prop_assert!(((-adv).exp() + (-dl).exp() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dynamics_terms_stay_in_range(seed in any::<u64>(), n in 1usize..6) {
        const LAT: usize = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inv = InverseModel::<f64>::new(LAT, 8, 2, HeadDepth::Deep, &mut rng);
        let fwd = ForwardModel::<f64>::new(LAT, 8, 2, HeadDepth::Deep, &mut rng);
        let mut g = Graph::new();
        let mut lat = || {
            let data = (0..n * LAT).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
            Tensor::new(&[n, LAT], data).unwrap()
        };
        let lat = SpdLatents {
            z_w_t: g.input(lat()),
            z_s_t: g.input(lat()),
            z_w_t1: g.input(lat()),
            z_s_t1: g.input(lat()),
        };
        let actions = g.input(Tensor::from_fn(&[n, 2], |i| ((i as f64) * 0.37).sin()));
        let it = inverse_loss(&mut g, &inv, &lat, actions, Bind::Train).unwrap();
        let ft = forward_loss(&mut g, &fwd, &lat, it.a_tilde, it.a_bar, &SpdOptions::default(), Bind::Train).unwrap();
        let (ji, jf) = (g.value(it.loss).item(), g.value(ft.loss).item());
        prop_assert!(ji >= 0.0);
        prop_assert!((-1.0..=1.0).contains(&jf));
        for v in [it.a_tilde, it.a_bar] {
            prop_assert!(g.value(v).data().iter().all(|a| (-1.0..=1.0).contains(a)));
        }
        for v in [ft.z_tilde, ft.z_bar] {
            prop_assert!(g.value(v).data().iter().all(|z| z.abs() < 1.0));
        }
        let w = SpdWeights::default();
        prop_assert_eq!(spd_total(w, ji, jf, 0.7), w.lambda_psi * (ji + jf) + w.lambda_adv * 0.7);
    }

    #[test]
    fn rewards_bounded_and_physics_background_free(
        seed in any::<u64>(),
        actions in prop::collection::vec((-1.5f64..1.5, -1.5f64..1.5), 1..60),
    ) {
        let make = |background| {
            PixelEnv::new(EnvConfig {
                image_size: 32,
                episode_length: 40,
                background,
                spawn: SpawnMode::Uniform,
                seed,
                ..EnvConfig::default()
            })
            .unwrap()
        };
        let mut envs = [
            make(BackgroundKind::Default),
            make(BackgroundKind::SimpleDistractor),
            make(BackgroundKind::TexturedVideo),
        ];
        for env in envs.iter_mut() {
            env.reset().unwrap();
        }
        let repeat = envs[0].config().action_repeat as f64;
        for (ax, ay) in actions {
            let mut states = Vec::new();
            for env in envs.iter_mut() {
                if env.is_done() {
                    env.reset().unwrap();
                }
                let out = env.step([ax, ay]).unwrap();
                prop_assert!(out.reward >= 0.0 && out.reward <= repeat);
                let s = *env.state();
                prop_assert!(s.agent_pos.iter().all(|p| p.abs() <= 1.0));
                prop_assert!(s.step_count <= env.config().episode_length);
                let r = env.config().reward(&s);
                prop_assert!((r - (-std::f64::consts::LN_2 * s.distance()).exp()).abs() < 1e-12);
                states.push(s);
            }
            prop_assert_eq!(&states[0], &states[1]);
            prop_assert_eq!(&states[0], &states[2]);
        }
    }

    #[test]
    fn replay_keeps_the_newest_items(capacity in 1usize..12, pushes in 0usize..40) {
        let frame = Observation::new(vec![vec![0u8; 3 * 8 * 8].into()], 8).unwrap();
        let mut buf = ReplayBuffer::new(capacity).unwrap();
        for i in 0..pushes {
            buf.push(Transition {
                obs: frame.clone(),
                action: vec![0.0, 0.0],
                reward: i as f32,
                next_obs: frame.clone(),
                done: false,
            });
        }
        prop_assert_eq!(buf.len(), pushes.min(capacity));
        let mut kept: Vec<usize> = buf.items().iter().map(|t| t.reward as usize).collect();
        kept.sort_unstable();
        let expected: Vec<usize> = (pushes.saturating_sub(capacity)..pushes).collect();
        prop_assert_eq!(kept, expected);
        if !buf.is_empty() {
            let idx = buf.sample_indices(17, &mut ChaCha8Rng::seed_from_u64(pushes as u64)).unwrap();
            prop_assert_eq!(idx.len(), 17);
            prop_assert!(idx.iter().all(|&i| i < buf.len()));
        }
    }

    #[test]
    fn config_overrides_round_trip(psi in 0.0f64..10.0, adv in 0.0f64..1.0, batch in 1usize..512) {
        let mut c = TrainConfig::profile("micro").unwrap();
        c.apply_override(&format!("spd.lambda_psi={psi}")).unwrap();
        c.apply_override(&format!("spd.lambda_adv={adv}")).unwrap();
        c.apply_override(&format!("agent.batch_size={batch}")).unwrap();
        let back = TrainConfig::parse_text(&c.canonical_text()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back, c);
    }
}

#[test]
fn frame_stack_after_reset_is_uniform() {
    let mut env = PixelEnv::new(EnvConfig {
        image_size: 32,
        frame_stack: 3,
        background: BackgroundKind::TexturedVideo,
        seed: 9,
        ..EnvConfig::default()
    })
    .unwrap();
    let obs = env.reset().unwrap();
    let frames = obs.frames();
    assert_eq!(frames.len(), 3);
    assert!(frames.windows(2).all(|w| w[0] == w[1]));
    let next = env.step([0.5, -0.5]).unwrap().observation;
    // Oldest first: the newest frame is appended at the end.
    assert_eq!(next.frames()[0], frames[1]);
    assert_ne!(next.frames()[2], frames[2]);
}
