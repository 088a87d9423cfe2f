//! Scene sampling.

use super::{Scene, SceneConstraints};
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Draw a scene from the constraint ranges. Everything (room, placements,
/// noise count, SNR) is a pure function of the seed, which the scene records.
pub fn sample_scene(seed: u64, c: &SceneConstraints) -> Result<Scene> {
    c.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.gen_range(r[0]..r[1])
        }
    };
    let room = super::RoomSpec::new(
        draw(&mut rng, c.length_range),
        draw(&mut rng, c.width_range),
        draw(&mut rng, c.height_range),
        draw(&mut rng, c.t60_range),
    );
    let m = c.wall_margin;
    let place = |rng: &mut ChaCha8Rng| {
        [
            rng.gen_range(m..room.length - m),
            rng.gen_range(m..room.width - m),
            rng.gen_range(m..room.height - m),
        ]
    };
    let source_pos = place(&mut rng);
    let mic_pos: Vec<[f64; 3]> = (0..c.mics).map(|_| place(&mut rng)).collect();
    let n_noise = rng.gen_range(c.noise_count[0]..=c.noise_count[1]);
    let noise_pos: Vec<[f64; 3]> = (0..n_noise).map(|_| place(&mut rng)).collect();
    let snr_db = draw(&mut rng, c.snr_range_db);
    let scene = Scene { room, source_pos, mic_pos, noise_pos, snr_db, seed };
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_the_scene() {
        let c = SceneConstraints::default();
        let a = sample_scene(99, &c).unwrap();
        let b = sample_scene(99, &c).unwrap();
        assert_eq!(format!("{:?}", a), format!("{:?}", b));
    }

    #[test]
    fn placements_respect_the_wall_margin() {
        let c = SceneConstraints::default();
        for seed in 0..10_000u64 {
            let s = sample_scene(seed, &c).unwrap();
            let dims = s.room.dims();
            for p in std::iter::once(&s.source_pos).chain(&s.mic_pos).chain(&s.noise_pos) {
                for a in 0..3 {
                    assert!(
                        p[a] >= c.wall_margin && p[a] <= dims[a] - c.wall_margin,
                        "seed {}: coordinate {} out of bounds",
                        seed,
                        p[a]
                    );
                }
            }
            assert!((1..=3).contains(&s.noise_pos.len()));
            assert!((-5.0..=15.0).contains(&s.snr_db));
            assert!((0.1..=0.5).contains(&s.room.t60));
        }
    }

    #[test]
    fn noise_count_is_roughly_uniform() {
        let c = SceneConstraints::default();
        let mut counts = [0usize; 3];
        let n = 10_000;
        for seed in 0..n as u64 {
            counts[sample_scene(seed, &c).unwrap().noise_pos.len() - 1] += 1;
        }
        // 3 sigma for a binomial proportion at p = 1/3
        let tol = 3.0 * (1.0 / 3.0 * 2.0 / 3.0 / n as f64).sqrt();
        for (k, &got) in counts.iter().enumerate() {
            let frac = got as f64 / n as f64;
            assert!((frac - 1.0 / 3.0).abs() < tol, "{} sources: fraction {}", k + 1, frac);
        }
    }

    #[test]
    fn rejects_degenerate_constraints() {
        let mut c = SceneConstraints::default();
        c.mics = 0;
        assert!(sample_scene(1, &c).is_err());
        let mut c = SceneConstraints::default();
        c.wall_margin = 3.0;
        assert!(sample_scene(1, &c).is_err());
        let mut c = SceneConstraints::default();
        c.noise_count = [0, 2];
        assert!(sample_scene(1, &c).is_err());
    }
}
