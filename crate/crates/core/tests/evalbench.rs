use clab::evalbench::{
    chance_rates, decode_attributes, eval_cases, evaluate, features, median_bandwidth, mmd2, CondMode, Decoding,
    OracleGenerator,
};
use clab::imageio::Image;
use clab::synthdata::{render, LengthMode, Motif, Scene, RESOLUTIONS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn decoder_inverts_every_motif_free_scene() {
    for res in RESOLUTIONS {
        for s in Scene::all() {
            assert_eq!(decode_attributes(&render(&s, res).unwrap()), Decoding::Accepted(s), "{s:?} at {res}");
        }
    }
}

#[test]
fn decoder_reports_every_motif() {
    for res in RESOLUTIONS {
        for s in Scene::all() {
            for &m in Motif::ALL {
                let s = s.with_motif(Some(m));
                assert_eq!(decode_attributes(&render(&s, res).unwrap()), Decoding::Accepted(s), "{s:?} at {res}");
            }
        }
    }
}

#[test]
fn uniform_noise_is_rejected() {
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for res in RESOLUTIONS {
            let img = Image::new(res, res, (0..res * res * 3).map(|_| rng.gen::<f64>()).collect()).unwrap();
            assert!(matches!(decode_attributes(&img), Decoding::Rejected(_)), "seed {seed}");
        }
    }
}

#[test]
fn oracle_generator_is_perfect() {
    for cond in [CondMode::A, CondMode::B] {
        let every = if cond == CondMode::B { 2 } else { 0 };
        let cases = eval_cases(cond, 120, every, LengthMode::Long, 3).unwrap();
        let r = evaluate(&OracleGenerator, &cases, 16, 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.rejection_rate, 0.0);
        assert!(r.mmd2.abs() < 1e-12);
        if cond == CondMode::B {
            assert_eq!(r.per_attribute.motif, Some(1.0));
        }
        let again = evaluate(&OracleGenerator, &cases, 16, 0).unwrap();
        assert_eq!(r, again);
    }
}

/// An untrained generator: uniform guesses over the outcome grid match at
/// the brute-force chance rate.
#[test]
fn guessing_generator_scores_at_chance() {
    let cases = eval_cases(CondMode::B, 2000, 2, LengthMode::Short, 9).unwrap();
    let (chance, motif_chance) = chance_rates(&cases);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut hits = 0usize;
    let mut motif_hits = 0usize;
    let mut motif_n = 0usize;
    for c in &cases {
        let guess = Scene::from_class(rng.gen_range(0..108)).with_motif(Some(Motif::ALL[rng.gen_range(0..8)]));
        let d = decode_attributes(&render(&guess, 16).unwrap());
        let d = d.scene().unwrap();
        hits += clab::evalbench::matches(c, d) as usize;
        if let Some(m) = c.scene.motif {
            motif_n += 1;
            motif_hits += (d.motif == Some(m)) as usize;
        }
    }
    let n = cases.len() as f64;
    let acc = hits as f64 / n;
    let sd = (chance * (1.0 - chance) / n).sqrt();
    assert!((acc - chance).abs() <= 4.0 * sd, "acc {acc} chance {chance}");
    let macc = motif_hits as f64 / motif_n as f64;
    let msd = (motif_chance * (1.0 - motif_chance) / motif_n as f64).sqrt();
    assert!((macc - motif_chance).abs() <= 4.0 * msd, "motif acc {macc} chance {motif_chance}");
}

#[test]
fn mmd_noise_floor_on_split_halves() {
    let cases = eval_cases(CondMode::B, 400, 2, LengthMode::Short, 1).unwrap();
    let f: Vec<Vec<f64>> = cases.iter().map(|c| features(&render(&c.scene, 16).unwrap())).collect();
    let (a, b) = f.split_at(200);
    let sigma = median_bandwidth(a);
    let same = mmd2(a, b, sigma);
    let black: Vec<Vec<f64>> = (0..200).map(|_| features(&Image::black(16, 16))).collect();
    let far = mmd2(a, &black, sigma);
    assert!(same < 0.05 * far, "same {same} far {far}");
}
