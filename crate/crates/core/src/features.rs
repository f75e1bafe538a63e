//! Per-segment spectrograms and the on-disk feature cache.
//!
//! The short-time transform uses a 256-sample Tukey(0.25) window with hop
//! 224 and a one-sided power-spectral-density scaling, which turns a
//! 1102-sample segment into a 129 x 4 matrix. Cached features are written
//! once in a little-endian binary format ("DKFC") so training never has to
//! recompute them; payloads are stored as f32 and promoted to f64 on load.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 4] = b"DKFC";
const VERSION: u32 = 1;

/// Window kind codes stored in the cache parameter block.
pub const WINDOW_RECT: u32 = 0;
pub const WINDOW_TUKEY_025: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("segment of {len} samples is shorter than the {window} sample window")]
    TooShort { len: usize, window: usize },
    #[error("fft size must be a power of two")]
    BadFftSize,
    #[error("unknown window kind code {0}")]
    BadWindowKind(u32),
    #[error("cache entry {id:?} has {data} values but dims imply {expect}")]
    BadEntryShape { id: String, data: usize, expect: usize },
    #[error("{0}: not a feature cache (bad magic)")]
    BadMagic(String),
    #[error("{path}: unsupported cache version {version}")]
    BadVersion { path: String, version: u32 },
    #[error("{0}: cache file is truncated")]
    Truncated(String),
    #[error("cannot merge caches with different STFT parameters")]
    ParamMismatch,
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Short-time transform parameters pinned into every cache file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftParams {
    pub window_len: u32,
    pub hop: u32,
    pub fft_size: u32,
    pub window_kind: u32,
}

impl Default for StftParams {
    fn default() -> Self {
        StftParams {
            window_len: 256,
            hop: 224,
            fft_size: 256,
            window_kind: WINDOW_TUKEY_025,
        }
    }
}

impl StftParams {
    /// Number of whole frames a signal of `len` samples yields.
    pub fn frame_count(&self, len: usize) -> usize {
        let w = self.window_len as usize;
        if len < w {
            0
        } else {
            1 + (len - w) / self.hop as usize
        }
    }

    fn window(&self) -> Result<Vec<f64>, FeatureError> {
        match self.window_kind {
            WINDOW_RECT => Ok(vec![1.0; self.window_len as usize]),
            WINDOW_TUKEY_025 => Ok(tukey_periodic(self.window_len as usize, 0.25)),
            other => Err(FeatureError::BadWindowKind(other)),
        }
    }
}

/// Periodic Tukey window: the symmetric window of length n+1 minus its last
/// point, matching FFT-oriented conventions.
fn tukey_periodic(n: usize, alpha: f64) -> Vec<f64> {
    let m = n + 1;
    (0..n)
        .map(|i| {
            let x = i as f64 / (m - 1) as f64;
            if x < alpha / 2.0 {
                0.5 * (1.0 + (2.0 * PI / alpha * (x - alpha / 2.0)).cos())
            } else if x >= 1.0 - alpha / 2.0 {
                0.5 * (1.0 + (2.0 * PI / alpha * (x - 1.0 + alpha / 2.0)).cos())
            } else {
                1.0
            }
        })
        .collect()
}

/// In-place iterative radix-2 FFT.
fn fft(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    // Bit-reversal permutation.
    let mut j = 0usize;
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
        let ang = -2.0 * PI / len as f64;
        let (w_re, w_im) = (ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let (mut cur_re, mut cur_im) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let t_re = re[b] * cur_re - im[b] * cur_im;
                let t_im = re[b] * cur_im + im[b] * cur_re;
                re[b] = re[a] - t_re;
                im[b] = im[a] - t_im;
                re[a] += t_re;
                im[a] += t_im;
                let next_re = cur_re * w_re - cur_im * w_im;
                cur_im = cur_re * w_im + cur_im * w_re;
                cur_re = next_re;
            }
        }
        len <<= 1;
    }
}

/// One-sided power spectrogram of a segment: height = fft/2 + 1 frequency
/// bins, width = whole frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// Row-major height x width.
    pub magnitudes: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Frequency resolution of one bin.
    pub bin_hz: f64,
}

impl Spectrogram {
    pub fn at(&self, freq_bin: usize, frame: usize) -> f64 {
        self.magnitudes[freq_bin * self.width + frame]
    }
}

/// Compute the spectrogram of one segment with the default parameters.
pub fn spectrogram(segment: &[f64], sample_rate: f64) -> Result<Spectrogram, FeatureError> {
    spectrogram_with(segment, sample_rate, &StftParams::default())
}

/// PSD-scaled one-sided spectrogram: bin k of frame t is
/// `|X_k|^2 / (fs * sum(w^2))`, doubled for interior bins.
pub fn spectrogram_with(
    segment: &[f64],
    sample_rate: f64,
    params: &StftParams,
) -> Result<Spectrogram, FeatureError> {
    let w = params.window_len as usize;
    let nfft = params.fft_size as usize;
    if !nfft.is_power_of_two() || nfft < w {
        return Err(FeatureError::BadFftSize);
    }
    if segment.len() < w {
        return Err(FeatureError::TooShort {
            len: segment.len(),
            window: w,
        });
    }
    let window = params.window()?;
    let win_sq: f64 = window.iter().map(|v| v * v).sum();
    let scale = 1.0 / (sample_rate * win_sq);
    let frames = params.frame_count(segment.len());
    let height = nfft / 2 + 1;

    let mut magnitudes = vec![0.0; height * frames];
    let mut re = vec![0.0; nfft];
    let mut im = vec![0.0; nfft];
    for frame in 0..frames {
        let start = frame * params.hop as usize;
        re[..w]
            .iter_mut()
            .zip(&segment[start..start + w])
            .zip(&window)
            .for_each(|((r, &s), &wv)| *r = s * wv);
        re[w..].fill(0.0);
        im.fill(0.0);
        fft(&mut re, &mut im);
        for k in 0..height {
            let p = (re[k] * re[k] + im[k] * im[k]) * scale;
            let one_sided = if k == 0 || k == nfft / 2 { p } else { 2.0 * p };
            magnitudes[k * frames + frame] = one_sided;
        }
    }
    Ok(Spectrogram {
        magnitudes,
        height,
        width: frames,
        bin_hz: sample_rate / nfft as f64,
    })
}

/// One cached source: spectrograms for every segment of a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEntry {
    pub n_segments: u32,
    pub height: u32,
    pub width: u32,
    /// Row-major (segment, freq, time), single precision as stored on disk.
    pub data: Vec<f32>,
}

/// In-memory image of one cache file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub params: StftParams,
    entries: BTreeMap<String, FeatureEntry>,
}

impl FeatureCache {
    pub fn new(params: StftParams) -> Self {
        FeatureCache {
            params,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: &str, entry: FeatureEntry) -> Result<(), FeatureError> {
        let expect = entry.n_segments as usize * entry.height as usize * entry.width as usize;
        if entry.data.len() != expect {
            return Err(FeatureError::BadEntryShape {
                id: id.to_string(),
                data: entry.data.len(),
                expect,
            });
        }
        self.entries.insert(id.to_string(), entry);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&FeatureEntry> {
        self.entries.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Absorb another cache built with identical parameters; colliding ids
    /// take the other cache's entry.
    pub fn merge(&mut self, other: FeatureCache) -> Result<(), FeatureError> {
        if other.params != self.params {
            return Err(FeatureError::ParamMismatch);
        }
        self.entries.extend(other.entries);
        Ok(())
    }

    /// Spectrograms for every row of a segment matrix, as one cache entry.
    pub fn entry_from_segments(
        matrix: &crate::segment::SegmentMatrix,
        params: &StftParams,
    ) -> Result<FeatureEntry, FeatureError> {
        let mut data = Vec::new();
        let mut dims = (0u32, 0u32);
        for row in matrix.rows().take(matrix.n_segments()) {
            let s = spectrogram_with(row, matrix.effective_rate, params)?;
            dims = (s.height as u32, s.width as u32);
            data.extend(s.magnitudes.iter().map(|&v| v as f32));
        }
        Ok(FeatureEntry {
            n_segments: matrix.n_segments() as u32,
            height: dims.0,
            width: dims.1,
            data,
        })
    }
}

/// Serialize a cache. The write is atomic: a temp file in the same
/// directory is renamed over the target.
pub fn cache_write(cache: &FeatureCache, path: &Path) -> Result<(), FeatureError> {
    let display = path.display().to_string();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cache.params.window_len,
        cache.params.hop,
        cache.params.fft_size,
        cache.params.window_kind,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(cache.entries.len() as u32).to_le_bytes());
    for (id, entry) in &cache.entries {
        buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        for d in [entry.n_segments, entry.height, entry.width] {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &entry.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let io = |source| FeatureError::Io {
        path: display.clone(),
        source,
    };
    let tmp = path.with_extension("dkfc.tmp");
    fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FeatureError> {
        if self.pos + n > self.bytes.len() {
            return Err(FeatureError::Truncated(self.path.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, FeatureError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, FeatureError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Load a cache written by [`cache_write`].
pub fn cache_read(path: &Path) -> Result<FeatureCache, FeatureError> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| FeatureError::Io {
        path: display.clone(),
        source,
    })?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: &display,
    };
    if r.take(4)? != MAGIC {
        return Err(FeatureError::BadMagic(display));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FeatureError::BadVersion {
            path: display,
            version,
        });
    }
    let params = StftParams {
        window_len: r.u32()?,
        hop: r.u32()?,
        fft_size: r.u32()?,
        window_kind: r.u32()?,
    };
    let count = r.u32()?;
    let mut cache = FeatureCache::new(params);
    for _ in 0..count {
        let id_len = r.u16()? as usize;
        let id = String::from_utf8_lossy(r.take(id_len)?).into_owned();
        let n_segments = r.u32()?;
        let height = r.u32()?;
        let width = r.u32()?;
        let n = n_segments as usize * height as usize * width as usize;
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        cache.insert(
            &id,
            FeatureEntry {
                n_segments,
                height,
                width,
                data,
            },
        )?;
    }
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent O(n^2) discrete Fourier transform.
    fn dft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (t, &v) in x.iter().enumerate() {
                    let ang = -2.0 * PI * k as f64 * t as f64 / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re, im)
            })
            .collect()
    }

    #[test]
    fn fft_matches_direct_dft() {
        let x: Vec<f64> = (0..256).map(|i| (i as f64 * 0.071).sin() + 0.3).collect();
        let mut re = x.clone();
        let mut im = vec![0.0; 256];
        fft(&mut re, &mut im);
        let want = dft(&x);
        for k in 0..256 {
            assert!((re[k] - want[k].0).abs() < 1e-8, "bin {k} re");
            assert!((im[k] - want[k].1).abs() < 1e-8, "bin {k} im");
        }
    }

    #[test]
    fn segment_of_1102_gives_129_by_4() {
        let seg: Vec<f64> = (0..1102).map(|i| (i as f64 * 0.01).sin()).collect();
        let s = spectrogram(&seg, 11025.0).unwrap();
        assert_eq!((s.height, s.width), (129, 4));
        assert!(s.magnitudes.iter().all(|&m| m >= 0.0));
    }

    #[test]
    fn zero_segment_gives_zero_matrix() {
        let s = spectrogram(&vec![0.0; 1102], 11025.0).unwrap();
        assert_eq!((s.height, s.width), (129, 4));
        assert!(s.magnitudes.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn too_short_segment_errors() {
        assert!(matches!(
            spectrogram(&vec![0.0; 255], 11025.0),
            Err(FeatureError::TooShort { len: 255, window: 256 })
        ));
    }

    #[test]
    fn sine_at_bin_center_peaks_at_that_bin() {
        let rate = 11025.0;
        for k in [3usize, 10, 40, 100] {
            let freq = k as f64 * rate / 256.0;
            let seg: Vec<f64> = (0..1102)
                .map(|i| (2.0 * PI * freq * i as f64 / rate).sin())
                .collect();
            let s = spectrogram(&seg, rate).unwrap();
            for frame in 0..s.width {
                let argmax = (0..s.height)
                    .max_by(|&a, &b| s.at(a, frame).total_cmp(&s.at(b, frame)))
                    .unwrap();
                assert_eq!(argmax, k, "frame {frame}");
            }
        }
    }

    #[test]
    fn frame_count_law() {
        let p = StftParams::default();
        for len in [256usize, 300, 479, 480, 1102, 2000] {
            // Oracle: place frames one at a time.
            let mut count = 0;
            let mut start = 0;
            while start + 256 <= len {
                count += 1;
                start += 224;
            }
            assert_eq!(p.frame_count(len), count, "len {len}");
        }
        assert_eq!(p.frame_count(1102), 4);
        assert_eq!(p.frame_count(255), 0);
    }

    #[test]
    fn parseval_single_frame() {
        let rate = 11025.0;
        let x: Vec<f64> = (0..256)
            .map(|i| (i as f64 * 0.37).sin() * 0.8 + (i as f64 * 0.11).cos() * 0.3)
            .collect();
        let s = spectrogram(&x, rate).unwrap();
        assert_eq!(s.width, 1);
        let total: f64 = s.magnitudes.iter().sum();
        // Direct-sum oracle over the windowed signal.
        let w = tukey_periodic(256, 0.25);
        let windowed_power: f64 = x.iter().zip(&w).map(|(v, wv)| (v * wv).powi(2)).sum();
        let win_sq: f64 = w.iter().map(|v| v * v).sum();
        let expect = 256.0 * windowed_power / (rate * win_sq);
        assert!(
            (total - expect).abs() < 0.01 * expect,
            "total {total} expect {expect}"
        );
    }

    #[test]
    fn power_scales_quadratically() {
        let seg: Vec<f64> = (0..1102).map(|i| (i as f64 * 0.013).sin()).collect();
        let scaled: Vec<f64> = seg.iter().map(|v| v * 3.0).collect();
        let a = spectrogram(&seg, 11025.0).unwrap();
        let b = spectrogram(&scaled, 11025.0).unwrap();
        let peak = a.magnitudes.iter().fold(0.0f64, |m, &v| m.max(v));
        for (x, y) in a.magnitudes.iter().zip(&b.magnitudes) {
            assert!((y - 9.0 * x).abs() < 1e-9 * 9.0 * peak);
        }
    }

    fn entry(seed: u64, n: u32, h: u32, w: u32) -> FeatureEntry {
        let len = (n * h * w) as usize;
        FeatureEntry {
            n_segments: n,
            height: h,
            width: w,
            data: (0..len)
                .map(|i| ((i as u64).wrapping_mul(seed) % 1000) as f32 / 7.0)
                .collect(),
        }
    }

    #[test]
    fn empty_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.dkfc");
        let cache = FeatureCache::new(StftParams::default());
        cache_write(&cache, &path).unwrap();
        assert_eq!(cache_read(&path).unwrap(), cache);
    }

    #[test]
    fn single_zero_entry_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.dkfc");
        let mut cache = FeatureCache::new(StftParams::default());
        cache
            .insert(
                "a",
                FeatureEntry {
                    n_segments: 1,
                    height: 129,
                    width: 4,
                    data: vec![0.0; 129 * 4],
                },
            )
            .unwrap();
        cache_write(&cache, &path).unwrap();
        assert_eq!(cache_read(&path).unwrap(), cache);
    }

    #[test]
    fn cache_read_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.dkfc");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(cache_read(&path), Err(FeatureError::BadMagic(_))));

        let mut cache = FeatureCache::new(StftParams::default());
        cache.insert("a", entry(3, 2, 5, 3)).unwrap();
        cache_write(&cache, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(cache_read(&path), Err(FeatureError::Truncated(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // version
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            cache_read(&path),
            Err(FeatureError::BadVersion { version: 99, .. })
        ));
    }

    #[test]
    fn merge_requires_matching_params() {
        let mut a = FeatureCache::new(StftParams::default());
        a.insert("x", entry(5, 1, 4, 2)).unwrap();
        let mut b = FeatureCache::new(StftParams::default());
        b.insert("y", entry(7, 1, 4, 2)).unwrap();
        a.merge(b).unwrap();
        assert_eq!(a.len(), 2);

        let other = FeatureCache::new(StftParams {
            hop: 128,
            ..StftParams::default()
        });
        assert!(matches!(a.merge(other), Err(FeatureError::ParamMismatch)));
    }

    proptest! {
        #[test]
        fn randomized_cache_round_trips_bit_exactly(seeds in prop::collection::vec(1u64..9999, 3)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rand.dkfc");
            let mut cache = FeatureCache::new(StftParams::default());
            for (i, &s) in seeds.iter().enumerate() {
                cache.insert(&format!("entry_{i}"), entry(s, 2, 6, 3)).unwrap();
            }
            cache_write(&cache, &path).unwrap();
            let back = cache_read(&path).unwrap();
            prop_assert_eq!(&back, &cache);
            // Bytes are reproducible as well.
            let path2 = dir.path().join("rand2.dkfc");
            cache_write(&back, &path2).unwrap();
            prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        }
    }
}
