use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the mel scale, one row per Mel bin, one column per
/// one-sided FFT bin.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    matrix: Tensor,
    mel_centers: Vec<f64>,
    pub n_fft: usize,
    pub sample_rate: u32,
    pub f_min: f64,
    pub f_max: f64,
}

impl MelFilterbank {
    /// Builds `n_mels` triangles whose edges and centres are uniformly spaced
    /// in mel between `f_min` and `f_max`. Each row is scaled to peak 1.
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Result<Self> {
        let nyquist = f64::from(sample_rate) / 2.0;
        if n_mels == 0 {
            return Err(Error::Config("need at least one Mel bin".into()));
        }
        if !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) {
            return Err(Error::Config(format!(
                "need 0 <= f_min < f_max <= {nyquist}, got f_min={f_min}, f_max={f_max}"
            )));
        }
        if n_fft < 2 {
            return Err(Error::Config(format!("n_fft={n_fft} too small")));
        }
        let bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let mut edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        // pin the outer edges against round-off in the mel round trip
        edges[0] = f_min;
        edges[n_mels + 1] = f_max;
        let bin_hz = f64::from(sample_rate) / n_fft as f64;

        let mut matrix = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut matrix[m * bins..(m + 1) * bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                *w = if f > left && f < centre {
                    (f - left) / (centre - left)
                } else if f >= centre && f < right {
                    (right - f) / (right - centre)
                } else {
                    0.0
                };
            }
            let peak = row.iter().copied().fold(0.0, f64::max);
            if peak <= 0.0 {
                return Err(Error::Config(format!(
                    "{n_mels} Mel bins exceed the FFT resolution: filter {m} \
                     ({left:.1}-{right:.1} Hz) covers no FFT bin"
                )));
            }
            row.iter_mut().for_each(|w| *w /= peak);
        }
        Ok(Self {
            matrix: Tensor::new(&[n_mels, bins], matrix)?,
            mel_centers: edges,
            n_fft,
            sample_rate,
            f_min,
            f_max,
        })
    }

    /// `[n_mels × (n_fft/2 + 1)]` weights.
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// The `n_mels + 2` triangle edge/centre frequencies in Hz; filter `m`
    /// peaks at `mel_centers()[m + 1]`.
    pub fn mel_centers(&self) -> &[f64] {
        &self.mel_centers
    }

    pub fn n_mels(&self) -> usize {
        self.matrix.shape()[0]
    }

    /// Centre frequency of filter `m` in Hz.
    pub fn center_hz(&self, m: usize) -> f64 {
        self.mel_centers[m + 1]
    }

    /// Filters whose support contains `hz`.
    pub fn bins_covering(&self, hz: f64) -> Vec<usize> {
        (0..self.n_mels())
            .filter(|&m| self.mel_centers[m] < hz && hz < self.mel_centers[m + 2])
            .collect()
    }

    /// Filter whose centre is nearest `hz`.
    pub fn nearest_bin(&self, hz: f64) -> usize {
        (0..self.n_mels())
            .min_by(|&a, &b| (self.center_hz(a) - hz).abs().total_cmp(&(self.center_hz(b) - hz).abs()))
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_of_700_hz() {
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn default_bank_rows_peak_at_one() {
        let fb = MelFilterbank::new(128, 1024, 16000, 0.0, 8000.0).unwrap();
        assert_eq!(fb.matrix().shape(), &[128, 513]);
        for m in 0..128 {
            let row = fb.matrix().row(m);
            let peak = row.iter().copied().fold(0.0, f64::max);
            assert!((peak - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&w| w >= 0.0));
            // contiguous support
            let nz: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len());
        }
        assert!(fb.mel_centers().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_filter_spans_whole_range() {
        let fb = MelFilterbank::new(1, 512, 16000, 0.0, 8000.0).unwrap();
        let mid = mel_to_hz(hz_to_mel(8000.0) / 2.0);
        assert!((fb.center_hz(0) - mid).abs() < 1e-9);
        let row = fb.matrix().row(0);
        let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let bin_hz = 16000.0 / 512.0;
        assert!((argmax as f64 * bin_hz - mid).abs() <= bin_hz);
        assert_eq!(row[argmax], 1.0);
        assert_eq!(row[0], 0.0);
        assert_eq!(row[256], 0.0);
    }

    #[test]
    fn too_many_filters_is_a_config_error() {
        assert!(matches!(
            MelFilterbank::new(128, 64, 16000, 0.0, 8000.0),
            Err(Error::Config(_))
        ));
        assert!(MelFilterbank::new(8, 64, 16000, 0.0, 9000.0).is_err());
        assert!(MelFilterbank::new(0, 64, 16000, 0.0, 8000.0).is_err());
    }
}
