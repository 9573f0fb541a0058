//! Synthetic speech-like corpus so the whole pipeline runs without external
//! data. Each letter becomes a short voiced segment whose pitch and two
//! formant peaks are fixed by the letter; spaces and punctuation become
//! pauses. The seed only picks each segment's starting phase, so the corpus is
//! reproducible bit for bit and free of noise.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::wav::write_wav;
use crate::dsp::Waveform;
use crate::error::Result;

pub const TOY_TEXTS: [&str; 4] = ["a cat sat.", "we go home.", "blue sky!", "hi, bob?"];

const LETTER_MS: f64 = 70.0;
const SPACE_MS: f64 = 40.0;
const PAUSE_MS: f64 = 90.0;
const FADE_MS: f64 = 8.0;
const AMPLITUDE: f64 = 0.3;

/// Pitch and two formant centers for a letter.
fn voice(c: char) -> (f64, f64, f64) {
    let k = (c as u32 - 'a' as u32) as f64;
    let f0 = 110.0 + 7.0 * ((k * 5.0) % 26.0);
    let f1 = 300.0 + 25.0 * ((k * 7.0) % 26.0);
    let f2 = 900.0 + 60.0 * ((k * 11.0) % 26.0);
    (f0, f1, f2)
}

fn segment(c: char, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let ms = match c {
        'a'..='z' => LETTER_MS,
        ' ' => SPACE_MS,
        _ => PAUSE_MS,
    };
    let n = (ms * rate / 1000.0).round() as usize;
    if !c.is_ascii_lowercase() {
        return vec![0.0; n];
    }
    let (f0, f1, f2) = voice(c);
    let fade = (FADE_MS * rate / 1000.0) as usize;
    let harmonics: Vec<(f64, f64)> = (1..)
        .map(|h| h as f64 * f0)
        .take_while(|&f| f < 4000.0)
        .map(|f| {
            let g = |fc: f64, bw: f64| (-((f - fc) / bw).powi(2)).exp();
            (f, 0.15 + g(f1, 150.0) + 0.6 * g(f2, 250.0))
        })
        .collect();
    let norm: f64 = harmonics.iter().map(|h| h.1).sum();
    let phase0: f64 = rng.random::<f64>() * 2.0 * PI;
    (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let v: f64 = harmonics
                .iter()
                .map(|&(f, a)| a * (2.0 * PI * f * t + phase0 * f / f0).sin())
                .sum::<f64>()
                / norm;
            let env = if i < fade {
                0.5 - 0.5 * (PI * i as f64 / fade as f64).cos()
            } else if i + fade >= n {
                0.5 - 0.5 * (PI * (n - 1 - i) as f64 / fade as f64).cos()
            } else {
                1.0
            };
            env * v
        })
        .collect()
}

/// Audio for an already-normalized transcript, in `[−1, 1]`.
pub fn render(text: &str, rate: u32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<f64> = Vec::new();
    for c in text.chars() {
        out.extend(segment(c, rate as f64, &mut rng));
    }
    out.iter().map(|&x| (AMPLITUDE * x) as f32).collect()
}

/// Writes `toy-<n>.wav` files and `manifest.txt` into `dir`; returns the
/// manifest path.
pub fn write_toy_corpus(dir: &Path, rate: u32, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("wavs"))?;
    let mut manifest = String::new();
    for (i, text) in TOY_TEXTS.iter().enumerate() {
        let id = format!("toy-{i}");
        let rel = format!("wavs/{id}.wav");
        let samples = render(text, rate, seed.wrapping_add(i as u64));
        write_wav(dir.join(&rel), &Waveform::new(samples, rate))?;
        manifest.push_str(&format!("{id}|{text}|{rel}\n"));
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_seeded_and_bounded() {
        let a = render("hi, bob?", 24_000, 1);
        assert_eq!(a, render("hi, bob?", 24_000, 1));
        assert_ne!(a, render("hi, bob?", 24_000, 2));
        assert!(a.iter().all(|x| x.abs() < 1.0));
        let expected = 5.0 * LETTER_MS + SPACE_MS + 2.0 * PAUSE_MS;
        assert_eq!(a.len(), (expected * 24.0) as usize);
    }

    #[test]
    fn pauses_are_silent() {
        let a = render("a b", 24_000, 0);
        let gap = &a[(LETTER_MS * 24.0) as usize..((LETTER_MS + SPACE_MS) * 24.0) as usize];
        assert!(gap.iter().all(|&x| x == 0.0));
    }
}
