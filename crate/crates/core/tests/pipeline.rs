mod common;

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sigan::checkpoint::{save_run, scale_dir, CONFIG_FILE};
use sigan::metrics::diversity;
use sigan::networks::score;
use sigan::params::noise;
use sigan::pyramid::{resize, ResizeMode};
use sigan::{Error, RunConfig, Sampler, Tensor, Trainer};

/// Three scales: 33, 25 and 19 px.
fn three_scale_config(epochs: usize) -> RunConfig {
    RunConfig {
        max_size: 33,
        sa_scales: 2,
        ..common::toy_config(epochs)
    }
}

fn trained() -> &'static Trainer {
    static RUN: OnceLock<Trainer> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut t = Trainer::new(three_scale_config(120), &common::texture(33, 33, 1)).unwrap();
        t.train_all().unwrap();
        t
    })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn toy_run_reduces_reconstruction_error() {
    let mut t = Trainer::new(common::toy_config(50), &common::texture(25, 25, 0)).unwrap();
    assert_eq!(t.pyramid().all_dims(), vec![(25, 25), (19, 19)]);
    let n = t.coarsest();
    let log = t.train_scale(n).unwrap().log.clone();
    assert_eq!(log.len(), 50);
    assert!(log[49].rec < log[0].rec, "{} vs {}", log[49].rec, log[0].rec);
    assert!(log.iter().all(|l| l.sigma.is_some()), "the coarsest scale carries attention");
}

#[test]
fn scales_train_in_order_once() {
    let mut t = Trainer::new(common::toy_config(2), &common::texture(25, 25, 0)).unwrap();
    assert!(matches!(t.train_scale(0), Err(Error::Contract(_))));
    t.train_scale(1).unwrap();
    assert!(matches!(t.train_scale(1), Err(Error::Contract(_))));
    t.train_scale(0).unwrap();
    assert!(t.is_complete());
    assert!(matches!(t.train_scale(0), Err(Error::Contract(_))));
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut t = Trainer::new(common::toy_config(15), &common::texture(25, 25, 2)).unwrap();
        t.train_all().unwrap();
        t
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log(), b.log());
    assert_eq!(bits(&a.scale(0).unwrap().rec), bits(&b.scale(0).unwrap().rec));
}

#[test]
fn frozen_scales_stay_untouched() {
    let mut t = Trainer::new(common::toy_config(5), &common::texture(25, 25, 0)).unwrap();
    t.train_scale(1).unwrap();
    let before = t.scale(1).unwrap().clone();
    t.train_scale(0).unwrap();
    assert_eq!(t.scale(1).unwrap(), &before);
}

#[test]
fn noise_amplitude_follows_reconstruction_error() {
    let t = trained();
    let cfg = t.config();
    assert_eq!(t.scale(t.coarsest()).unwrap().model.noise_amp, 1.0);
    for n in 0..t.coarsest() {
        let above = &t.scale(n + 1).unwrap().rec;
        let up = resize(above, t.pyramid().dims(n), ResizeMode::Auto);
        let expected = cfg.noise_amp_base * up.mse(t.pyramid().level(n)).sqrt() as f32;
        assert_eq!(t.scale(n).unwrap().model.noise_amp, expected);
    }
}

#[test]
fn reconstruction_chain_reproduces_stored_output() {
    let t = trained();
    let s = Sampler::new(t).unwrap();
    assert_eq!(bits(&s.reconstruct().unwrap()), bits(&t.scale(0).unwrap().rec));
}

#[test]
fn feedback_maps() {
    let t = trained();
    let real = t.pyramid().level(1);
    let fb = t.compute_feedback(1, real).unwrap();
    assert_eq!(fb.dims(), t.pyramid().dims(0));
    assert_eq!(fb.source_scale, 1);
    assert!(t.compute_feedback(0, real).is_err());

    let partial = Trainer::new(three_scale_config(1), &common::texture(33, 33, 1)).unwrap();
    assert!(matches!(partial.compute_feedback(1, real), Err(Error::Contract(_))));

    let mut zeroed = t.scale(1).unwrap().model.clone();
    for (_, p) in zeroed.critic.params.iter_mut() {
        *p = Tensor::zeros(p.shape());
    }
    let map = score(&zeroed, real).unwrap();
    assert!(map.scores.data().iter().all(|&v| v == 0.0));
}

#[test]
fn critic_scores_a_spliced_noise_patch_lower() {
    let t = trained();
    let n = t.coarsest();
    let real = t.pyramid().level(n).clone();
    let (_, h, w) = real.chw();
    let mut spliced = real.clone();
    let patch = noise(&[3, h, w], &mut rng(5));
    let inside = |y: usize, x: usize| (5..13).contains(&y) && (5..13).contains(&x);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                if inside(y, x) {
                    let i = (c * h + y) * w + x;
                    spliced.data_mut()[i] = patch.data()[i].clamp(-1.0, 1.0);
                }
            }
        }
    }
    let map = score(&t.scale(n).unwrap().model, &spliced).unwrap().scores;
    let (mut a, mut na, mut b, mut nb) = (0.0, 0, 0.0, 0);
    for y in 0..h {
        for x in 0..w {
            let v = map.data()[y * w + x] as f64;
            if inside(y, x) {
                a += v;
                na += 1;
            } else {
                b += v;
                nb += 1;
            }
        }
    }
    let (patch_mean, rest_mean) = (a / na as f64, b / nb as f64);
    assert!(patch_mean < rest_mean, "patch {patch_mean} vs rest {rest_mean}");
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    save_run(dir.path(), t).unwrap();
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("log.jsonl").exists());
    assert!(scale_dir(dir.path(), 2).join("meta").exists());

    let loaded = Trainer::load(dir.path()).unwrap();
    assert!(loaded.is_complete());
    assert_eq!(loaded.log(), t.log());
    let a = Sampler::new(t).unwrap().generate(t.coarsest(), 2, &mut rng(7), None).unwrap();
    let b = Sampler::new(&loaded).unwrap().generate(t.coarsest(), 2, &mut rng(7), None).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(bits(x), bits(y));
    }

    // A different attention depth changes the config hash.
    let cfg_path = dir.path().join(CONFIG_FILE);
    let original = std::fs::read_to_string(&cfg_path).unwrap();
    let mut edited = t.config().clone();
    edited.sa_scales = 1;
    std::fs::write(&cfg_path, edited.to_toml()).unwrap();
    let err = Trainer::load(dir.path()).err().expect("hash mismatch");
    assert!(err.to_string().contains("hash mismatch"), "{err}");
    std::fs::write(&cfg_path, original).unwrap();

    let g = scale_dir(dir.path(), 0).join("G.bin");
    let bytes = std::fs::read(&g).unwrap();
    std::fs::write(&g, &bytes[..bytes.len() / 2]).unwrap();
    let err = Trainer::load(dir.path()).err().expect("truncated file");
    assert!(err.to_string().contains("G.bin"), "{err}");
    std::fs::remove_file(&g).unwrap();
    let err = Trainer::load(dir.path()).err().expect("missing file");
    assert!(err.to_string().contains("G.bin"), "{err}");
}

#[test]
fn partial_runs_resume() {
    let dir = tempfile::tempdir().unwrap();
    let img = common::texture(33, 33, 1);
    let mut t = Trainer::new(three_scale_config(3), &img).unwrap().with_run_dir(dir.path()).unwrap();
    t.train_scale(2).unwrap();
    t.train_scale(1).unwrap();
    drop(t);
    let mut resumed = Trainer::load(dir.path()).unwrap();
    assert_eq!(resumed.next_scale(), Some(0));
    resumed.train_scale(0).unwrap();
    assert!(resumed.is_complete());

    let mut straight = Trainer::new(three_scale_config(3), &img).unwrap();
    straight.train_all().unwrap();
    assert_eq!(straight.log(), resumed.log());
    assert_eq!(straight.scale(0).unwrap(), resumed.scale(0).unwrap());
}

#[test]
fn generation_shapes_seeds_and_errors() {
    let t = trained();
    let s = Sampler::new(t).unwrap();
    let n = t.coarsest();
    let a = s.generate(n, 1, &mut rng(1), None).unwrap().remove(0);
    let b = s.generate(n, 1, &mut rng(2), None).unwrap().remove(0);
    let a2 = s.generate(n, 1, &mut rng(1), None).unwrap().remove(0);
    assert_eq!(a.shape(), &[3, 33, 33]);
    assert!(a.max_abs_diff(&b) > 0.0);
    assert_eq!(bits(&a), bits(&a2));
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));

    for out in [(33, 66), (66, 33), (40, 40)] {
        let x = s.generate(n, 1, &mut rng(3), Some(out)).unwrap().remove(0);
        assert_eq!(x.shape(), &[3, out.0, out.1]);
    }
    let from_mid = s.generate(1, 1, &mut rng(3), Some((33, 66))).unwrap().remove(0);
    assert_eq!(from_mid.shape(), &[3, 33, 66]);
    assert!(matches!(s.generate(n, 1, &mut rng(3), Some((12, 33))), Err(Error::Argument(_))));
    assert!(matches!(s.generate(n + 1, 1, &mut rng(3), None), Err(Error::Argument(_))));

    let partial = Trainer::new(three_scale_config(1), &common::texture(33, 33, 1)).unwrap();
    assert!(matches!(Sampler::new(&partial), Err(Error::Contract(_))));
}

#[test]
fn landscape_width_doubling() {
    let mut t = Trainer::new(three_scale_config(3), &common::texture(25, 33, 0)).unwrap();
    t.train_all().unwrap();
    let s = Sampler::new(&t).unwrap();
    let (h, w) = s.finest_dims();
    let out = s.generate(t.coarsest(), 2, &mut rng(0), Some((h, 2 * w))).unwrap();
    assert!(out.iter().all(|x| x.shape() == [3, h, 2 * w]));
}

#[test]
fn starting_lower_keeps_closer_to_the_image() {
    let t = trained();
    let s = Sampler::new(t).unwrap();
    let real = t.pyramid().level(0);
    let div = |start| diversity(&s.generate(start, 12, &mut rng(11), None).unwrap(), real).unwrap().scalar;
    let (top, bottom) = (div(t.coarsest()), div(0));
    assert!(top >= bottom, "{top} < {bottom}");
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.mse(b)
}

#[test]
fn harmonization() {
    let t = trained();
    let s = Sampler::new(t).unwrap();
    let real = t.pyramid().level(0).clone();
    let rec = &t.scale(0).unwrap().rec;
    assert!(matches!(s.harmonize(&real, t.coarsest(), true, &mut rng(0)), Err(Error::Argument(_))));

    let h = s.harmonize(&real, 0, true, &mut rng(0)).unwrap();
    assert_eq!(h.shape(), real.shape());
    let best_random = s
        .generate(t.coarsest(), 8, &mut rng(1), None)
        .unwrap()
        .iter()
        .map(|x| mse(x, rec))
        .fold(f64::INFINITY, f64::min);
    assert!(mse(&h, rec) < best_random, "{} vs {best_random}", mse(&h, rec));

    let fine = s.harmonize(&real, 0, false, &mut rng(0)).unwrap();
    let coarse = s.harmonize(&real, 1, false, &mut rng(0)).unwrap();
    assert!(mse(&fine, &real) < mse(&coarse, &real));
    assert_eq!(bits(&fine), bits(&s.harmonize(&real, 0, false, &mut rng(9)).unwrap()));
}

fn laplacian_energy(img: &Tensor, y0: usize, y1: usize, x0: usize, x1: usize) -> f64 {
    let (c, _, w) = img.chw();
    let h = img.shape()[1];
    let at = |ch: usize, y: usize, x: usize| img.data()[(ch * h + y) * w + x] as f64;
    let mut e = 0.0;
    for ch in 0..c {
        for y in y0.max(1)..y1.min(h - 1) {
            for x in x0.max(1)..x1.min(w - 1) {
                let l = 4.0 * at(ch, y, x) - at(ch, y - 1, x) - at(ch, y + 1, x) - at(ch, y, x - 1) - at(ch, y, x + 1);
                e += l * l;
            }
        }
    }
    e
}

fn paste_square(img: &Tensor, y0: usize, x0: usize, side: usize, color: [f32; 3]) -> Tensor {
    let (_, h, w) = img.chw();
    let mut out = img.clone();
    for (c, &v) in color.iter().enumerate() {
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                out.data_mut()[(c * h + y) * w + x] = v;
            }
        }
    }
    out
}

#[test]
fn harmonization_adds_texture_to_a_flat_paste() {
    let t = trained();
    let s = Sampler::new(t).unwrap();
    let composite = paste_square(t.pyramid().level(0), 10, 10, 12, [0.6, -0.2, 0.1]);
    let out = s.harmonize(&composite, 1, true, &mut rng(4)).unwrap();
    let before = laplacian_energy(&composite, 11, 21, 11, 21);
    let after = laplacian_energy(&out, 11, 21, 11, 21);
    assert_eq!(before, 0.0);
    assert!(after > before);
}

#[test]
fn editing_composites_through_the_mask() {
    let t = trained();
    let s = Sampler::new(t).unwrap();
    let edited = paste_square(t.pyramid().level(0), 10, 10, 8, [0.6, -0.2, 0.1]);
    let (h, w) = s.finest_dims();

    let none = Tensor::zeros(&[1, h, w]);
    let out = s.edit(&edited, &none, 1, true, &mut rng(2)).unwrap();
    assert_eq!(bits(&out), bits(&edited));

    let all = Tensor::ones(&[1, h, w]);
    let out = s.edit(&edited, &all, 1, true, &mut rng(2)).unwrap();
    let harmonized = s.harmonize(&edited, 1, true, &mut rng(2)).unwrap();
    assert_eq!(bits(&out), bits(&harmonized));

    let mut rect = Tensor::zeros(&[1, h, w]);
    for y in 10..18 {
        for x in 10..18 {
            rect.data_mut()[y * w + x] = 1.0;
        }
    }
    let out = s.edit(&edited, &rect, 1, true, &mut rng(2)).unwrap();
    let far = |y: usize, x: usize| {
        let dy = if y < 10 { 10 - y } else { y.saturating_sub(17) };
        let dx = if x < 10 { 10 - x } else { x.saturating_sub(17) };
        dy * dy + dx * dx > 25
    };
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let i = (c * h + y) * w + x;
                if far(y, x) {
                    assert_eq!(out.data()[i].to_bits(), edited.data()[i].to_bits());
                }
            }
        }
    }
    assert!(out.max_abs_diff(&edited) > 0.0);

    let mut gray = rect.clone();
    gray.data_mut()[0] = 0.5;
    assert!(matches!(s.edit(&edited, &gray, 1, true, &mut rng(2)), Err(Error::Argument(_))));
}
