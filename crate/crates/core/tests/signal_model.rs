use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wssnet_core::signal_model::{
    draw_occupancy, mean_power, place_pus, render_noiseless, sample_received_signal, Noise,
    PuPlacement, ScenarioConfig,
};

fn scenario(l: usize, k: usize) -> ScenarioConfig {
    ScenarioConfig {
        subbands: l,
        bandwidth_hz: 64e6,
        num_pus: k,
        duration_s: 2e-6,
        noise: Noise::Noiseless,
        pu_energy: 1.0,
        seed: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// The received signal is the superposition of the individual PU pulses.
    #[test]
    fn rendering_is_linear(l in 2usize..24, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 1 + (seed as usize) % l;
        let cfg = scenario(l, k);
        let occ = draw_occupancy(l, k, &mut rng).unwrap();
        let placement = place_pus(&occ, &cfg, &mut rng).unwrap();
        let instants: Vec<f64> = (0..64).map(|i| i as f64 * 0.3e-7).collect();
        let whole = render_noiseless(&placement, &cfg, &instants);
        let mut sum = vec![num_complex::Complex64::new(0.0, 0.0); instants.len()];
        for pu in &placement.users {
            let single = PuPlacement { users: vec![*pu] };
            for (s, v) in sum.iter_mut().zip(render_noiseless(&single, &cfg, &instants)) {
                *s += v;
            }
        }
        for (a, b) in whole.iter().zip(&sum) {
            prop_assert!((a - b).norm() <= 1e-12 * (1.0 + a.norm()));
        }
    }

    #[test]
    fn snr_sets_noise_variance(snr_db in -10.0f64..30.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = scenario(8, 3);
        cfg.noise = Noise::SnrDb(snr_db);
        let occ = draw_occupancy(8, 3, &mut rng).unwrap();
        let placement = place_pus(&occ, &cfg, &mut rng).unwrap();
        let instants: Vec<f64> = (0..128).map(|i| i as f64 * 1.5e-8).collect();
        let power = mean_power(&render_noiseless(&placement, &cfg, &instants));
        let rx = sample_received_signal(&placement, &cfg, &instants, &mut rng).unwrap();
        let ratio = power / rx.noise_variance;
        prop_assert!((10.0 * ratio.log10() - snr_db).abs() < 1e-9);
    }

    #[test]
    fn generation_is_seed_deterministic(seed in any::<u64>()) {
        let cfg = ScenarioConfig { noise: Noise::SnrDb(5.0), ..scenario(16, 5) };
        let instants: Vec<f64> = (0..32).map(|i| i as f64 * 1e-8).collect();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let occ = draw_occupancy(16, 5, &mut rng).unwrap();
            let placement = place_pus(&occ, &cfg, &mut rng).unwrap();
            let rx = sample_received_signal(&placement, &cfg, &instants, &mut rng).unwrap();
            (occ, placement, rx)
        };
        prop_assert_eq!(draw(), draw());
    }

    #[test]
    fn offsets_lie_inside_the_duration(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = scenario(12, 12);
        let occ = draw_occupancy(12, 12, &mut rng).unwrap();
        for pu in place_pus(&occ, &cfg, &mut rng).unwrap().users {
            prop_assert!(pu.offset_s > 0.0 && pu.offset_s < cfg.duration_s);
        }
    }
}
