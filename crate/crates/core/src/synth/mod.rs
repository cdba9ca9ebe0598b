//! Synthetic face-video generator with a known pulse.
//!
//! Skin pixels follow
//! `flicker(t) * (tone * (1 + strength * pulse(t) * CHROM_GAIN) + specular(t)) + noise`,
//! so the pulse lives on a fixed chrominance direction while flicker is a
//! pure intensity change.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{write_frames, write_gold_csv, DatasetManifest, SubjectEntry};
use crate::sigproc::HR_BAND_BPM;
use crate::types::quantize;
use crate::{FrameSequence, PulseTrace, SkinType};

pub const CHROM_GAIN: [f64; 3] = [0.33, 0.77, 0.53];
pub const DEFAULT_SIZE: usize = 64;
pub const DEFAULT_FPS: f64 = 30.0;
/// Semi-axes of the skin ellipse as fractions of width and height; covers
/// about 40% of the frame.
const ELLIPSE_AXES: (f64, f64) = (0.31, 0.41);
/// Static multiplicative skin texture; also dithers 8-bit quantization.
const SKIN_TEXTURE: f64 = 0.04;

/// Darkening of tone and pulse strength per skin class.
pub fn melanin_factor(t: SkinType) -> f64 {
    match t {
        SkinType::II => 1.0,
        SkinType::III => 0.85,
        SkinType::IV => 0.7,
        SkinType::VVI => 0.4,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub id: String,
    pub skin_type: SkinType,
    /// Diffuse RGB before melanin darkening.
    pub skin_tone: [f64; 3],
    pub hr_bpm: f64,
    pub drift_depth_bpm: f64,
    pub drift_period_s: f64,
    pub pulse_strength: f64,
    pub noise_sigma: f64,
    pub flicker_amp: f64,
    pub flicker_hz: f64,
    pub motion_amp: f64,
    pub specular_amp: f64,
    /// Seed of the rendering noise/motion stream.
    pub seed: u64,
}

impl SubjectProfile {
    /// A clean, drift-free profile; the starting point for hand-built cases.
    pub fn clean(id: impl Into<String>, skin_type: SkinType, hr_bpm: f64, seed: u64) -> Self {
        SubjectProfile {
            id: id.into(),
            skin_type,
            skin_tone: [0.85, 0.62, 0.52],
            hr_bpm,
            drift_depth_bpm: 0.0,
            drift_period_s: 30.0,
            pulse_strength: 0.015,
            noise_sigma: 0.0,
            flicker_amp: 0.0,
            flicker_hz: 1.0,
            motion_amp: 0.0,
            specular_amp: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lo = self.hr_bpm - self.drift_depth_bpm;
        let hi = self.hr_bpm + self.drift_depth_bpm;
        if !(lo >= HR_BAND_BPM.0 && hi <= HR_BAND_BPM.1) {
            return Err(Error::invalid(format!(
                "{}: heart rate range [{lo}, {hi}] leaves the analysis band",
                self.id
            )));
        }
        if !self.skin_tone.iter().all(|&c| c > 0.0 && c <= 1.0) {
            return Err(Error::invalid(format!("{}: skin tone outside (0,1]", self.id)));
        }
        let amps = [
            self.drift_depth_bpm,
            self.pulse_strength,
            self.noise_sigma,
            self.flicker_amp,
            self.motion_amp,
            self.specular_amp,
        ];
        if !amps.iter().all(|&a| a >= 0.0 && a.is_finite()) {
            return Err(Error::invalid(format!("{}: negative amplitude", self.id)));
        }
        if !(self.drift_period_s > 0.0) {
            return Err(Error::invalid(format!("{}: drift period must be positive", self.id)));
        }
        Ok(())
    }

    /// Instantaneous heart rate at time `t` seconds.
    pub fn hr_at(&self, t: f64) -> f64 {
        self.hr_bpm + self.drift_depth_bpm * (2.0 * PI * t / self.drift_period_s).sin()
    }
}

/// `sin φ + 0.3 sin(2φ + π/4)` with `φ' / 2π` following the drifting rate,
/// standardized to zero mean and unit std.
pub fn generate_pulse(profile: &SubjectProfile, duration_s: f64, fps: f64) -> Result<PulseTrace> {
    let n = (duration_s * fps).round();
    if !(n >= 2.0) {
        return Err(Error::TooShort {
            needed: 2,
            got: n.max(0.0) as usize,
        });
    }
    let n = n as usize;
    let (d, per) = (profile.drift_depth_bpm, profile.drift_period_s);
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fps;
            // closed-form integral of the instantaneous rate
            let cycles = (profile.hr_bpm * t + d * per / (2.0 * PI) * (1.0 - (2.0 * PI * t / per).cos())) / 60.0;
            let phi = 2.0 * PI * cycles;
            phi.sin() + 0.3 * (2.0 * phi + PI / 4.0).sin()
        })
        .collect();
    let m = raw.iter().sum::<f64>() / n as f64;
    let s = (raw.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
    Ok(PulseTrace::new(fps, raw.iter().map(|v| (v - m) / s).collect()))
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub frames: FrameSequence,
    pub gold: PulseTrace,
    /// Row-major skin mask at the rest position.
    pub mask: Vec<bool>,
    pub profile: SubjectProfile,
}

/// Smoothed AR(1) walk rescaled to std `amp`.
fn random_walk(n: usize, amp: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = 0.0;
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            x = 0.97 * x + e;
            x
        })
        .collect();
    let smooth = crate::sigproc::moving_average(&raw, 15);
    let m = smooth.iter().sum::<f64>() / n as f64;
    let s = (smooth.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
    if amp == 0.0 || s == 0.0 {
        return vec![0.0; n];
    }
    smooth.iter().map(|v| (v - m) / s * amp).collect()
}

pub fn render_video(profile: &SubjectProfile, pulse: &PulseTrace) -> Result<SynthSample> {
    render_video_sized(profile, pulse, DEFAULT_SIZE, DEFAULT_SIZE)
}

pub fn render_video_sized(
    profile: &SubjectProfile,
    pulse: &PulseTrace,
    height: usize,
    width: usize,
) -> Result<SynthSample> {
    profile.validate()?;
    if height < 4 || width < 4 {
        return Err(Error::invalid("frames must be at least 4x4"));
    }
    let n = pulse.len();
    let fps = pulse.fps;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let npix = height * width;

    let mel = melanin_factor(profile.skin_type);
    let tone: Vec<f64> = profile.skin_tone.iter().map(|c| c * mel).collect();
    let strength = profile.pulse_strength * mel;

    let mut tex_skin = vec![0.0f64; npix];
    for v in tex_skin.iter_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v = 1.0 + SKIN_TEXTURE * e.clamp(-3.0, 3.0);
    }
    let bg_base = [
        rng.random_range(0.15..0.45),
        rng.random_range(0.15..0.45),
        rng.random_range(0.15..0.45),
    ];
    let mut tex_bg = vec![[0.0f64; 3]; npix];
    for (i, v) in tex_bg.iter_mut().enumerate() {
        let (y, x) = ((i / width) as f64, (i % width) as f64);
        let stripe = 0.05 * (0.4 * x + 0.25 * y).sin();
        for c in 0..3 {
            let e: f64 = StandardNormal.sample(&mut rng);
            v[c] = (bg_base[c] + stripe + 0.03 * e).clamp(0.0, 1.0);
        }
    }
    let dx = random_walk(n, profile.motion_amp, &mut rng);
    let dy = random_walk(n, profile.motion_amp, &mut rng);
    let flicker_phase = rng.random_range(0.0..2.0 * PI);
    let spec_period = rng.random_range(5.0..15.0);
    let spec_phase = rng.random_range(0.0..2.0 * PI);

    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let (ax, ay) = (ELLIPSE_AXES.0 * width as f64, ELLIPSE_AXES.1 * height as f64);
    let coverage = |x: f64, y: f64| -> f64 {
        let (u, v) = ((x - cx) / ax, (y - cy) / ay);
        let d = ((u * u + v * v).sqrt() - 1.0) * ax.min(ay);
        (0.5 - d).clamp(0.0, 1.0)
    };
    let mask: Vec<bool> = (0..npix)
        .map(|i| coverage((i % width) as f64, (i / width) as f64) >= 0.5)
        .collect();

    let mut data = Vec::with_capacity(n * npix * 3);
    for t in 0..n {
        let ts = t as f64 / fps;
        let f = 1.0 + profile.flicker_amp * (2.0 * PI * profile.flicker_hz * ts + flicker_phase).sin();
        let spec = profile.specular_amp * 0.5 * (1.0 + (2.0 * PI * ts / spec_period + spec_phase).sin());
        let p = pulse.samples[t];
        let skin: [f64; 3] = std::array::from_fn(|c| tone[c] * (1.0 + strength * p * CHROM_GAIN[c]));
        let (sx, sy) = (dx[t].round() as isize, dy[t].round() as isize);
        for y in 0..height {
            for x in 0..width {
                let cov = coverage(x as f64 - dx[t], y as f64 - dy[t]);
                // texture moves with the face
                let ty = (y as isize - sy).rem_euclid(height as isize) as usize;
                let tx = (x as isize - sx).rem_euclid(width as isize) as usize;
                let tex = tex_skin[ty * width + tx];
                let bg = tex_bg[y * width + x];
                for c in 0..3 {
                    let s = skin[c] * tex + spec;
                    let mut v = f * (cov * s + (1.0 - cov) * bg[c]);
                    if profile.noise_sigma > 0.0 {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        v += profile.noise_sigma * e;
                    }
                    data.push(quantize(v as f32));
                }
            }
        }
    }
    Ok(SynthSample {
        frames: FrameSequence::new(fps, height, width, data)?,
        gold: pulse.clone(),
        mask,
        profile: profile.clone(),
    })
}

/// Ranges from which subject profiles are drawn. Skin classes are assigned
/// round-robin from `skin_types`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainKnobs {
    pub name: String,
    pub skin_types: Vec<SkinType>,
    pub tone_jitter: f64,
    pub hr_bpm: (f64, f64),
    pub drift_depth_bpm: (f64, f64),
    pub drift_period_s: (f64, f64),
    pub pulse_strength: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub flicker_amp: (f64, f64),
    pub flicker_hz: (f64, f64),
    pub motion_amp: (f64, f64),
    pub specular_amp: (f64, f64),
}

impl DomainKnobs {
    /// Light skin, low noise, mostly steady light.
    pub fn domain_a() -> Self {
        DomainKnobs {
            name: "A".into(),
            skin_types: vec![SkinType::II, SkinType::III],
            tone_jitter: 0.05,
            hr_bpm: (55.0, 110.0),
            drift_depth_bpm: (0.0, 4.0),
            drift_period_s: (20.0, 40.0),
            pulse_strength: (0.012, 0.02),
            noise_sigma: (0.005, 0.015),
            flicker_amp: (0.0, 0.02),
            flicker_hz: (0.5, 3.0),
            motion_amp: (0.0, 0.3),
            specular_amp: (0.0, 0.02),
        }
    }

    /// Darker skin, more sensor noise, flickering light, more motion.
    pub fn domain_b() -> Self {
        DomainKnobs {
            name: "B".into(),
            skin_types: vec![SkinType::III, SkinType::IV, SkinType::VVI, SkinType::IV, SkinType::VVI],
            tone_jitter: 0.05,
            hr_bpm: (55.0, 120.0),
            drift_depth_bpm: (0.0, 4.0),
            drift_period_s: (20.0, 40.0),
            pulse_strength: (0.012, 0.02),
            noise_sigma: (0.04, 0.07),
            flicker_amp: (0.01, 0.03),
            flicker_hz: (0.8, 2.0),
            motion_amp: (0.3, 1.0),
            specular_amp: (0.0, 0.04),
        }
    }

    /// Noise-, flicker- and motion-free variant of `self`.
    pub fn clean(mut self) -> Self {
        self.noise_sigma = (0.0, 0.0);
        self.flicker_amp = (0.0, 0.0);
        self.motion_amp = (0.0, 0.0);
        self.specular_amp = (0.0, 0.0);
        self
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "A" | "a" => Ok(Self::domain_a()),
            "B" | "b" => Ok(Self::domain_b()),
            other => Err(Error::invalid(format!("unknown domain preset `{other}`"))),
        }
    }

    /// Profile of subject `index`, drawn from its own substream of `seed`.
    pub fn sample_profile(&self, index: usize, seed: u64) -> SubjectProfile {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64 + 1);
        let mut draw = |r: (f64, f64)| if r.1 > r.0 { rng.random_range(r.0..r.1) } else { r.0 };
        let base = [0.85, 0.62, 0.52];
        let skin_tone = std::array::from_fn(|c| (base[c] + draw((-self.tone_jitter, self.tone_jitter))).clamp(0.05, 1.0));
        let hr_bpm = draw(self.hr_bpm);
        let drift_depth_bpm = draw(self.drift_depth_bpm)
            .min(hr_bpm - HR_BAND_BPM.0)
            .min(HR_BAND_BPM.1 - hr_bpm)
            .max(0.0);
        SubjectProfile {
            id: format!("{}-s{index:02}", self.name),
            skin_type: self.skin_types[index % self.skin_types.len()],
            skin_tone,
            hr_bpm,
            drift_depth_bpm,
            drift_period_s: draw(self.drift_period_s),
            pulse_strength: draw(self.pulse_strength),
            noise_sigma: draw(self.noise_sigma),
            flicker_amp: draw(self.flicker_amp),
            flicker_hz: draw(self.flicker_hz),
            motion_amp: draw(self.motion_amp),
            specular_amp: draw(self.specular_amp),
            seed: rng.random(),
        }
    }

    pub fn generate_subject(&self, index: usize, seed: u64, duration_s: f64) -> Result<SynthSample> {
        let profile = self.sample_profile(index, seed);
        let pulse = generate_pulse(&profile, duration_s, DEFAULT_FPS)?;
        render_video(&profile, &pulse)
    }
}

/// Render `n_subjects` subjects into `dir` in the harness dataset layout.
pub fn generate_dataset(
    dir: &Path,
    knobs: &DomainKnobs,
    n_subjects: usize,
    duration_s: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if n_subjects == 0 {
        return Err(Error::invalid("n_subjects must be at least 1"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut subjects = Vec::with_capacity(n_subjects);
    for i in 0..n_subjects {
        let sample = knobs.generate_subject(i, seed, duration_s)?;
        let id = sample.profile.id.clone();
        let sub = dir.join(&id);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        write_frames(&sub.join("frames.pbvid"), &sample.frames)?;
        write_gold_csv(&sub.join("gold.csv"), &sample.gold)?;
        log::info!("rendered {id} ({} frames)", sample.frames.len());
        subjects.push(SubjectEntry {
            frames: Path::new(&id).join("frames.pbvid"),
            gold: Some(Path::new(&id).join("gold.csv")),
            skin_type: Some(sample.profile.skin_type),
            profile: Some(sample.profile),
            id,
        });
    }
    let manifest = DatasetManifest {
        name: knobs.name.clone(),
        fps: DEFAULT_FPS,
        height: DEFAULT_SIZE,
        width: DEFAULT_SIZE,
        subjects,
    };
    manifest.write(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demix::{pos, spatial_average};
    use crate::sigproc::{estimate_hr, pearson, power_spectrum};

    #[test]
    fn pulse_peaks_at_hr_and_harmonic() {
        let p = SubjectProfile::clean("x", SkinType::II, 72.0, 1);
        let tr = generate_pulse(&p, 60.0, 30.0).unwrap();
        assert!((estimate_hr(&tr).unwrap() - 72.0).abs() <= 0.5);
        let sp = power_spectrum(&tr.samples, 30.0);
        let k = |bpm: f64| (bpm / sp.bin_bpm()).round() as usize;
        let local_max = |k0: usize| (k0 - 3..=k0 + 3).map(|i| sp.power[i]).fold(0.0, f64::max);
        let second = local_max(k(144.0));
        assert!(second > 0.05 * local_max(k(72.0)));
        assert!(second > 100.0 * local_max(k(108.0)));
        let m = tr.samples.iter().sum::<f64>() / tr.len() as f64;
        let s = (tr.samples.iter().map(|v| (v - m).powi(2)).sum::<f64>() / tr.len() as f64).sqrt();
        assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn drift_traverses_the_expected_range() {
        let mut p = SubjectProfile::clean("x", SkinType::II, 72.0, 1);
        p.drift_depth_bpm = 6.0;
        p.drift_period_s = 30.0;
        let tr = generate_pulse(&p, 120.0, 30.0).unwrap();
        let w = 360;
        let mut hrs = Vec::new();
        for i in 0..tr.len() / w {
            let est = estimate_hr(&tr.slice(i * w..(i + 1) * w)).unwrap();
            // the Hann taper weights the middle of the window
            let hw = crate::sigproc::hann(w);
            let mean_rate = (0..w).map(|k| hw[k] * p.hr_at((i * w + k) as f64 / 30.0)).sum::<f64>()
                / hw.iter().sum::<f64>();
            assert!((est - mean_rate).abs() <= 1.0, "window {i}: {est} vs {mean_rate}");
            hrs.push(est);
        }
        let lo = hrs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = hrs.iter().cloned().fold(0.0, f64::max);
        assert!(lo <= 70.0 && hi >= 74.0, "{lo} {hi}");
    }

    #[test]
    fn profile_validation() {
        let mut p = SubjectProfile::clean("x", SkinType::II, 148.0, 1);
        p.drift_depth_bpm = 4.0;
        assert!(p.validate().is_err());
        let mut p = SubjectProfile::clean("x", SkinType::II, 70.0, 1);
        p.noise_sigma = -0.1;
        assert!(p.validate().is_err());
    }

    #[test]
    fn clean_render_gives_pos_match() {
        let p = SubjectProfile::clean("x", SkinType::III, 80.0, 3);
        let s = render_video(&p, &generate_pulse(&p, 60.0, 30.0).unwrap()).unwrap();
        assert_eq!(s.frames.len(), 1800);
        let frac = s.mask.iter().filter(|&&m| m).count() as f64 / s.mask.len() as f64;
        assert!((0.35..0.45).contains(&frac), "{frac}");
        let out = pos(&spatial_average(&s.frames, None).unwrap()).unwrap();
        let gold = crate::sigproc::bandpass(&s.gold).unwrap();
        // the overlap-add ramps over the first and last window cost a little
        let r = pearson(&out.samples, &gold.samples).unwrap();
        assert!(r >= 0.99, "{r}");
    }

    #[test]
    fn flicker_keeps_pos_correlated() {
        let mut p = SubjectProfile::clean("x", SkinType::III, 66.0, 4);
        p.flicker_amp = 0.05;
        p.flicker_hz = 1.4;
        let s = render_video(&p, &generate_pulse(&p, 24.0, 30.0).unwrap()).unwrap();
        let out = pos(&spatial_average(&s.frames, None).unwrap()).unwrap();
        let gold = crate::sigproc::bandpass(&s.gold).unwrap();
        let r = pearson(&out.samples, &gold.samples).unwrap();
        assert!(r >= 0.9, "{r}");
    }

    #[test]
    fn no_pulse_gives_flat_demix_output() {
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let mut p = SubjectProfile::clean("x", SkinType::II, 70.0, 5);
        let pulse = generate_pulse(&p, 12.0, 30.0).unwrap();
        let with = rms(&pos(&spatial_average(&render_video(&p, &pulse).unwrap().frames, None).unwrap()).unwrap().samples);
        p.pulse_strength = 0.0;
        let without = rms(&pos(&spatial_average(&render_video(&p, &pulse).unwrap().frames, None).unwrap()).unwrap().samples);
        assert!(without < 1e-4 * with, "{without} vs {with}");
    }

    #[test]
    fn melanin_reduces_skin_pulse_amplitude() {
        let amp = |t: SkinType| {
            let p = SubjectProfile::clean("x", t, 75.0, 9);
            let s = render_video(&p, &generate_pulse(&p, 8.0, 30.0).unwrap()).unwrap();
            let g = spatial_average(&s.frames, Some(&s.mask)).unwrap().g;
            let m = g.iter().sum::<f64>() / g.len() as f64;
            (g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / g.len() as f64).sqrt()
        };
        let a: Vec<f64> = SkinType::ALL.iter().map(|&t| amp(t)).collect();
        for w in a.windows(2) {
            assert!(w[1] <= w[0], "{a:?}");
        }
    }

    #[test]
    fn profiles_are_seeded_per_subject() {
        let k = DomainKnobs::domain_b();
        assert_eq!(k.sample_profile(3, 7), k.sample_profile(3, 7));
        assert_ne!(k.sample_profile(3, 7).seed, k.sample_profile(4, 7).seed);
        assert_ne!(k.sample_profile(3, 7).hr_bpm, k.sample_profile(3, 8).hr_bpm);
        for i in 0..20 {
            k.sample_profile(i, 1).validate().unwrap();
        }
    }

    #[test]
    fn dataset_is_bitwise_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let k = DomainKnobs::domain_a();
        let m = generate_dataset(a.path(), &k, 2, 4.0, 11).unwrap();
        generate_dataset(b.path(), &k, 2, 4.0, 11).unwrap();
        assert_eq!(m.subjects.len(), 2);
        for s in &m.subjects {
            for rel in [&s.frames, s.gold.as_ref().unwrap()] {
                assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
            }
        }
        let ds = crate::harness::load_dataset(a.path()).unwrap();
        assert_eq!(ds.subject("A-s01").unwrap().frame_count, 120);
    }
}
