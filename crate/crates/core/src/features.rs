//! Log-mel front end: waveform → 64-band log-mel frames → 50×64 acoustic
//! blocks → linearized patches.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub const N_MELS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    /// Subtract the utterance mean and divide by its standard deviation, one
    /// scalar pair per utterance so the spectral shape is preserved.
    PerUtterance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    /// patch extent along time (frames)
    pub patch_t: usize,
    /// patch extent along frequency (mel bands)
    pub patch_f: usize,
    pub stride_t: usize,
    pub stride_f: usize,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        PatchGeometry { patch_t: 10, patch_f: 16, stride_t: 5, stride_f: 8 }
    }
}

impl PatchGeometry {
    pub fn new(patch_t: usize, patch_f: usize, stride_t: usize, stride_f: usize) -> Self {
        PatchGeometry { patch_t, patch_f, stride_t, stride_f }
    }

    pub fn patch_len(&self) -> usize {
        self.patch_t * self.patch_f
    }

    pub fn validate(&self, block_t: usize, block_f: usize) -> Result<()> {
        if self.patch_t == 0 || self.patch_f == 0 || self.stride_t == 0 || self.stride_f == 0 {
            bail!(Config, "patch and stride extents must be positive: {:?}", self);
        }
        if self.patch_t > block_t || self.patch_f > block_f {
            bail!(Config, "patch {}x{} larger than block {}x{}", self.patch_t, self.patch_f, block_t, block_f);
        }
        Ok(())
    }

    /// `(time positions, frequency positions)` on a `block_t × block_f` block.
    pub fn grid(&self, block_t: usize, block_f: usize) -> (usize, usize) {
        ((block_t - self.patch_t) / self.stride_t + 1, (block_f - self.patch_f) / self.stride_f + 1)
    }

    pub fn n_patches(&self, block_t: usize, block_f: usize) -> usize {
        let (a, b) = self.grid(block_t, block_f);
        a * b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub n_fft: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_eps: f64,
    pub normalization: Normalization,
    pub block_frames: usize,
    pub block_shift: usize,
    pub patch: PatchGeometry,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16_000,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            n_fft: 512,
            f_min: 0.0,
            f_max: 8_000.0,
            log_eps: 1e-10,
            normalization: Normalization::PerUtterance,
            block_frames: 50,
            block_shift: 30,
            patch: PatchGeometry::default(),
        }
    }
}

impl FeatureConfig {
    pub fn frame_length(&self) -> usize {
        libm::round(self.sample_rate as f64 * self.frame_length_ms / 1000.0) as usize
    }

    pub fn frame_shift(&self) -> usize {
        libm::round(self.sample_rate as f64 * self.frame_shift_ms / 1000.0) as usize
    }

    pub fn block_len(&self) -> usize {
        self.block_frames * N_MELS
    }

    pub fn n_patches(&self) -> usize {
        self.patch.n_patches(self.block_frames, N_MELS)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != 16_000 {
            bail!(Config, "only 16 kHz input is supported, got {}", self.sample_rate);
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < self.frame_length() {
            bail!(Config, "n_fft {} must be a power of two ≥ frame length {}", self.n_fft, self.frame_length());
        }
        if self.frame_shift() == 0 || self.block_frames == 0 || self.block_shift == 0 {
            bail!(Config, "frame shift, block size and block shift must be positive");
        }
        if !(self.f_max > self.f_min && self.f_max <= self.sample_rate as f64 / 2.0) {
            bail!(Config, "mel range {}..{} Hz invalid", self.f_min, self.f_max);
        }
        self.patch.validate(self.block_frames, N_MELS)
    }
}

/// `[T × 64]` log-mel frames, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMel {
    pub frames: Vec<f32>,
    pub n_frames: usize,
    /// Value a zero-energy frame takes, after any normalization.
    pub floor: f32,
}

impl LogMel {
    /// Wraps unnormalized frames as produced by [`log_mel`], e.g. from a cache.
    pub fn raw(frames: Vec<f32>, cfg: &FeatureConfig) -> Result<LogMel> {
        if !frames.len().is_multiple_of(N_MELS) {
            bail!(Shape, "{} values is not a whole number of {N_MELS}-band frames", frames.len());
        }
        Ok(LogMel { n_frames: frames.len() / N_MELS, frames, floor: libm::log(cfg.log_eps) as f32 })
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * N_MELS..(t + 1) * N_MELS]
    }

    pub fn mean_frame(&self) -> Vec<f64> {
        let mut m = vec![0.0; N_MELS];
        for t in 0..self.n_frames {
            for (a, &b) in m.iter_mut().zip(self.frame(t)) {
                *a += b as f64;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.n_frames.max(1) as f64);
        m
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the triangular filters.
pub fn mel_centers(cfg: &FeatureConfig) -> Vec<f64> {
    let edges = mel_edges(cfg);
    edges[1..=N_MELS].to_vec()
}

fn mel_edges(cfg: &FeatureConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    (0..N_MELS + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64)).collect()
}

/// `[64 × (n_fft/2+1)]` HTK triangular filter weights.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Vec<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let edges = mel_edges(cfg);
    let mut w = vec![0.0; N_MELS * n_bins];
    for m in 0..N_MELS {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
            let v = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            w[m * n_bins + k] = v;
        }
    }
    w
}

/// In-place iterative radix-2 FFT on separate real/imaginary buffers.
pub fn fft(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    assert!(n.is_power_of_two() && im.len() == n);
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -core::f64::consts::TAU / len as f64;
        let (wr, wi) = (libm::cos(ang), libm::sin(ang));
        for start in (0..n).step_by(len) {
            let (mut cr, mut ci) = (1.0, 0.0);
            for k in 0..len / 2 {
                let (a, b) = (start + k, start + k + len / 2);
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
        len <<= 1;
    }
}

pub fn frame_count(n_samples: usize, frame_length: usize, frame_shift: usize) -> usize {
    if n_samples < frame_length {
        0
    } else {
        (n_samples - frame_length) / frame_shift + 1
    }
}

/// Natural-log mel energies `ln(power + eps)` with a periodic Hann window.
/// No normalization is applied here; see [`normalize`].
pub fn log_mel(samples: &[f32], cfg: &FeatureConfig) -> Result<LogMel> {
    cfg.validate()?;
    let (flen, fshift) = (cfg.frame_length(), cfg.frame_shift());
    if samples.len() < flen {
        bail!(InvalidInput, "{} samples is shorter than one {}-sample analysis window", samples.len(), flen);
    }
    if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
        bail!(NonFinite, "sample {i}");
    }
    let n_frames = frame_count(samples.len(), flen, fshift);
    let n_bins = cfg.n_fft / 2 + 1;
    let bank = mel_filterbank(cfg);
    let window: Vec<f64> =
        (0..flen).map(|n| 0.5 - 0.5 * libm::cos(core::f64::consts::TAU * n as f64 / flen as f64)).collect();
    let mut frames = Vec::with_capacity(n_frames * N_MELS);
    let mut re = vec![0.0; cfg.n_fft];
    let mut im = vec![0.0; cfg.n_fft];
    let mut power = vec![0.0; n_bins];
    for t in 0..n_frames {
        let s = &samples[t * fshift..t * fshift + flen];
        re.iter_mut().for_each(|v| *v = 0.0);
        im.iter_mut().for_each(|v| *v = 0.0);
        for n in 0..flen {
            re[n] = s[n] as f64 * window[n];
        }
        fft(&mut re, &mut im);
        for k in 0..n_bins {
            power[k] = re[k] * re[k] + im[k] * im[k];
        }
        for m in 0..N_MELS {
            let e: f64 = bank[m * n_bins..(m + 1) * n_bins].iter().zip(&power).map(|(w, p)| w * p).sum();
            frames.push(libm::log(e + cfg.log_eps) as f32);
        }
    }
    Ok(LogMel { frames, n_frames, floor: libm::log(cfg.log_eps) as f32 })
}

/// Applies the configured per-utterance normalization.
pub fn normalize(mut lm: LogMel, mode: Normalization) -> LogMel {
    if mode == Normalization::None || lm.frames.is_empty() {
        return lm;
    }
    let n = lm.frames.len() as f64;
    let mean = lm.frames.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = lm.frames.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var).max(1e-5);
    for v in &mut lm.frames {
        *v = ((*v as f64 - mean) / std) as f32;
    }
    lm.floor = ((lm.floor as f64 - mean) / std) as f32;
    lm
}

/// A `block_frames × 64` slice of log-mel frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticBlock {
    pub values: Vec<f32>,
    pub start_frame: usize,
    pub utterance_id: String,
    /// set when the utterance was shorter than one block and was floor-padded
    pub padded: bool,
}

/// Blocks start at `0, shift, 2·shift, …`; frames after the last full block
/// are dropped. An utterance shorter than one block yields a single block
/// padded with the log floor and flagged `padded`.
pub fn extract_blocks(lm: &LogMel, cfg: &FeatureConfig, utterance_id: &str) -> Vec<AcousticBlock> {
    let bf = cfg.block_frames;
    let len = bf * N_MELS;
    if lm.n_frames < bf {
        let mut values = vec![lm.floor; len];
        values[..lm.n_frames * N_MELS].copy_from_slice(&lm.frames[..lm.n_frames * N_MELS]);
        return vec![AcousticBlock { values, start_frame: 0, utterance_id: String::from(utterance_id), padded: true }];
    }
    let count = (lm.n_frames - bf) / cfg.block_shift + 1;
    (0..count)
        .map(|b| {
            let start = b * cfg.block_shift;
            AcousticBlock {
                values: lm.frames[start * N_MELS..(start + bf) * N_MELS].to_vec(),
                start_frame: start,
                utterance_id: String::from(utterance_id),
                padded: false,
            }
        })
        .collect()
}

/// Linearized patches of one block, ordered by position index.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// `n_patches × patch_len`, each patch flattened time-major
    pub values: Vec<f32>,
    pub positions: Vec<usize>,
    pub geometry: PatchGeometry,
    pub n_time: usize,
    pub n_freq: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let l = self.geometry.patch_len();
        &self.values[i * l..(i + 1) * l]
    }

    /// Top-left `(time, freq)` cell of the patch with position index `p`.
    /// The index advances along time first, then along frequency.
    pub fn origin(&self, p: usize) -> (usize, usize) {
        ((p % self.n_time) * self.geometry.stride_t, (p / self.n_time) * self.geometry.stride_f)
    }
}

pub fn extract_patches(block: &[f32], block_frames: usize, geometry: PatchGeometry) -> Result<PatchSet> {
    if block.len() != block_frames * N_MELS {
        bail!(Shape, "block has {} values, expected {}x{}", block.len(), block_frames, N_MELS);
    }
    geometry.validate(block_frames, N_MELS)?;
    let (n_time, n_freq) = geometry.grid(block_frames, N_MELS);
    let n = n_time * n_freq;
    let mut values = Vec::with_capacity(n * geometry.patch_len());
    for p in 0..n {
        let (t0, f0) = ((p % n_time) * geometry.stride_t, (p / n_time) * geometry.stride_f);
        for t in t0..t0 + geometry.patch_t {
            values.extend_from_slice(&block[t * N_MELS + f0..t * N_MELS + f0 + geometry.patch_f]);
        }
    }
    Ok(PatchSet { values, positions: (0..n).collect(), geometry, n_time, n_freq })
}

/// Averages overlapping patches back onto the block grid; cells no patch
/// covers are reported with coverage 0 and value 0.
pub fn reassemble(ps: &PatchSet, block_frames: usize) -> (Vec<f32>, Vec<u32>) {
    let mut sum = vec![0.0f64; block_frames * N_MELS];
    let mut cover = vec![0u32; block_frames * N_MELS];
    let g = ps.geometry;
    for (i, &p) in ps.positions.iter().enumerate() {
        let (t0, f0) = ps.origin(p);
        let patch = ps.patch(i);
        for dt in 0..g.patch_t {
            for df in 0..g.patch_f {
                let c = (t0 + dt) * N_MELS + f0 + df;
                sum[c] += patch[dt * g.patch_f + df] as f64;
                cover[c] += 1;
            }
        }
    }
    let vals = sum.iter().zip(&cover).map(|(&s, &c)| if c > 0 { (s / c as f64) as f32 } else { 0.0 }).collect();
    (vals, cover)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64, amp: f64) -> Vec<f32> {
        let n = (16_000.0 * seconds) as usize;
        (0..n).map(|i| (amp * libm::sin(core::f64::consts::TAU * freq * i as f64 / 16_000.0)) as f32).collect()
    }

    #[test]
    fn fft_matches_naive_dft() {
        let n = 64;
        let x: Vec<f64> = (0..n).map(|i| libm::sin(i as f64 * 0.37) + 0.1 * i as f64).collect();
        let mut re = x.clone();
        let mut im = vec![0.0; n];
        fft(&mut re, &mut im);
        for k in 0..n {
            let (mut sr, mut si) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let a = -core::f64::consts::TAU * (k * t) as f64 / n as f64;
                sr += v * libm::cos(a);
                si += v * libm::sin(a);
            }
            assert!((re[k] - sr).abs() < 1e-9 && (im[k] - si).abs() < 1e-9);
        }
    }

    #[test]
    fn one_second_gives_98_frames() {
        // floor((16000 - 400) / 160) + 1
        let lm = log_mel(&vec![0.1f32; 16_000], &FeatureConfig::default()).unwrap();
        assert_eq!(lm.n_frames, 98);
        assert_eq!(lm.frames.len(), 98 * N_MELS);
    }

    #[test]
    fn silence_is_the_log_floor() {
        let lm = log_mel(&vec![0.0f32; 4_000], &FeatureConfig::default()).unwrap();
        let floor = libm::log(1e-10) as f32;
        assert!(lm.frames.iter().all(|&v| v == floor));
        assert_eq!(lm.floor, floor);
    }

    #[test]
    fn tone_peaks_in_nearest_band() {
        let cfg = FeatureConfig::default();
        let lm = log_mel(&tone(1000.0, 0.5, 0.5), &cfg).unwrap();
        let centers = mel_centers(&cfg);
        let expected = (0..N_MELS)
            .min_by(|&a, &b| (centers[a] - 1000.0).abs().partial_cmp(&(centers[b] - 1000.0).abs()).unwrap())
            .unwrap();
        for t in 0..lm.n_frames {
            let f = lm.frame(t);
            let arg = (0..N_MELS).max_by(|&a, &b| f[a].partial_cmp(&f[b]).unwrap()).unwrap();
            assert_eq!(arg, expected, "frame {t}");
        }
    }

    #[test]
    fn errors_on_short_or_non_finite_input() {
        let cfg = FeatureConfig::default();
        assert!(log_mel(&[0.0; 399], &cfg).is_err());
        let mut x = vec![0.0f32; 800];
        x[10] = f32::NAN;
        assert!(log_mel(&x, &cfg).is_err());
    }

    #[test]
    fn louder_input_raises_every_value() {
        let cfg = FeatureConfig::default();
        let mut state = 12345u64;
        let noise: Vec<f32> = (0..8_000)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64 - 0.5) as f32 * 0.2
            })
            .collect();
        let loud: Vec<f32> = noise.iter().map(|v| v * 2.0).collect();
        let a = log_mel(&noise, &cfg).unwrap();
        let b = log_mel(&loud, &cfg).unwrap();
        assert!(a.frames.iter().zip(&b.frames).all(|(x, y)| y > x));
    }

    fn fake_logmel(n_frames: usize) -> LogMel {
        LogMel { frames: (0..n_frames * N_MELS).map(|i| i as f32).collect(), n_frames, floor: -5.0 }
    }

    #[test]
    fn block_starts_and_counts() {
        let cfg = FeatureConfig::default();
        let blocks = extract_blocks(&fake_logmel(110), &cfg, "u");
        assert_eq!(blocks.iter().map(|b| b.start_frame).collect::<Vec<_>>(), vec![0, 30, 60]);
        assert_eq!(extract_blocks(&fake_logmel(50), &cfg, "u").len(), 1);
        let short = extract_blocks(&fake_logmel(49), &cfg, "u");
        assert_eq!(short.len(), 1);
        assert!(short[0].padded);
        assert!(short[0].values[49 * N_MELS..].iter().all(|&v| v == -5.0));
        assert_eq!(short[0].values[..49 * N_MELS], fake_logmel(49).frames[..]);
    }

    #[test]
    fn default_geometry_gives_63_patches_of_160() {
        let block: Vec<f32> = (0..50 * N_MELS).map(|i| i as f32).collect();
        let ps = extract_patches(&block, 50, PatchGeometry::default()).unwrap();
        assert_eq!((ps.n_time, ps.n_freq), (9, 7));
        assert_eq!(ps.len(), 63);
        assert_eq!(ps.patch(0).len(), 160);
        // index 1 is the next time step at the same frequency offset
        assert_eq!(ps.origin(1), (5, 0));
        assert_eq!(ps.origin(9), (0, 8));
        assert_eq!(ps.patch(1)[0], block[5 * N_MELS]);
        // second row of the first patch starts one frame later
        assert_eq!(ps.patch(0)[16], block[N_MELS]);
    }

    #[test]
    fn whole_block_and_tiled_geometries() {
        let block = vec![1.0f32; 50 * N_MELS];
        let whole = extract_patches(&block, 50, PatchGeometry::new(50, 64, 1, 1)).unwrap();
        assert_eq!(whole.positions, vec![0]);
        let tiled = extract_patches(&block, 50, PatchGeometry::new(25, 16, 25, 16)).unwrap();
        assert_eq!(tiled.len(), 8);
        assert!(extract_patches(&block, 50, PatchGeometry::new(51, 16, 5, 8)).is_err());
        assert!(extract_patches(&block, 50, PatchGeometry::new(10, 65, 5, 8)).is_err());
    }

    #[test]
    fn reassembly_reproduces_covered_cells() {
        let block: Vec<f32> = (0..50 * N_MELS).map(|i| ((i * 7919) % 1000) as f32 / 100.0).collect();
        for g in [PatchGeometry::default(), PatchGeometry::new(12, 20, 7, 9), PatchGeometry::new(25, 16, 25, 16)] {
            let ps = extract_patches(&block, 50, g).unwrap();
            let (vals, cover) = reassemble(&ps, 50);
            for c in 0..block.len() {
                if cover[c] > 0 {
                    assert!((vals[c] - block[c]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn shifting_by_one_block_shift_shifts_block_identities() {
        let cfg = FeatureConfig::default();
        let x = tone(700.0, 1.3, 0.3);
        let mut y: Vec<f32> = x.clone();
        // prepend exactly 30 frames worth of samples
        let pre: Vec<f32> = tone(300.0, 30.0 * 160.0 / 16_000.0, 0.3);
        y.splice(0..0, pre);
        let a = extract_blocks(&log_mel(&x, &cfg).unwrap(), &cfg, "a");
        let b = extract_blocks(&log_mel(&y, &cfg).unwrap(), &cfg, "b");
        assert_eq!(b.len(), a.len() + 1);
        // frames whose analysis windows lie wholly in the shared part are identical
        for (i, blk) in a.iter().enumerate() {
            let d: f32 =
                blk.values.iter().zip(&b[i + 1].values).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
            assert!(d < 1e-3, "block {i} differs by {d}");
        }
    }

    #[test]
    fn per_utterance_normalization() {
        let cfg = FeatureConfig::default();
        let lm = normalize(log_mel(&tone(440.0, 0.5, 0.2), &cfg).unwrap(), Normalization::PerUtterance);
        let n = lm.frames.len() as f64;
        let mean: f64 = lm.frames.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = lm.frames.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-4);
        assert!((var - 1.0).abs() < 1e-3);
    }
}
