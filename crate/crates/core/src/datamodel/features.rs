use std::f64::consts::PI;

/// Number of frequencies on the periodogram grid.
pub const LOMB_GRID_LEN: usize = 256;
pub const LOMB_GRID_MIN_HZ: f64 = 0.04;
pub const LOMB_GRID_MAX_HZ: f64 = 0.5;
const HF_BAND: (f64, f64) = (0.15, 0.40);

/// RR-derived channels of one bin; `None` marks a channel without enough
/// intervals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RrFeatures {
    pub rr_mean: Option<f64>,
    pub rmssd: Option<f64>,
    pub sdnn: Option<f64>,
    pub hf_lomb_power: Option<f64>,
}

pub fn rr_features(rr_ms: &[f64]) -> RrFeatures {
    let n = rr_ms.len();
    let rr_mean = (n >= 1).then(|| rr_ms.iter().sum::<f64>() / n as f64);
    let (rmssd, sdnn) = if n >= 2 {
        let mean = rr_mean.unwrap_or_default();
        let ss: f64 = rr_ms.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
        let var = rr_ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        (Some((ss / (n - 1) as f64).sqrt()), Some(var.sqrt()))
    } else {
        (None, None)
    };
    let hf_lomb_power = (n >= 4).then(|| hf_power(rr_ms));
    RrFeatures {
        rr_mean,
        rmssd,
        sdnn,
        hf_lomb_power,
    }
}

/// Lomb–Scargle power of the centred series `x` sampled at `t` (seconds)
/// at frequency `f` (Hz).
pub fn lomb_scargle(t: &[f64], x: &[f64], f: f64) -> f64 {
    let w = 2.0 * PI * f;
    let (s2, c2) = t.iter().fold((0.0, 0.0), |(s, c), &ti| {
        let (a, b) = (2.0 * w * ti).sin_cos();
        (s + a, c + b)
    });
    let tau = s2.atan2(c2) / (2.0 * w);
    let (mut xc, mut xs, mut cc, mut ss) = (0.0, 0.0, 0.0, 0.0);
    for (&ti, &xi) in t.iter().zip(x) {
        let (s, c) = (w * (ti - tau)).sin_cos();
        xc += xi * c;
        xs += xi * s;
        cc += c * c;
        ss += s * s;
    }
    let mut p = 0.0;
    if cc > 1e-12 {
        p += xc * xc / cc;
    }
    if ss > 1e-12 {
        p += xs * xs / ss;
    }
    0.5 * p
}

/// Beat times (s) and mean-removed intervals.
fn beat_series(rr_ms: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mean = rr_ms.iter().sum::<f64>() / rr_ms.len() as f64;
    let mut acc = 0.0;
    let t = rr_ms
        .iter()
        .map(|r| {
            acc += r / 1000.0;
            acc
        })
        .collect();
    (t, rr_ms.iter().map(|r| r - mean).collect())
}

fn hf_power(rr_ms: &[f64]) -> f64 {
    let (t, x) = beat_series(rr_ms);
    let step = (LOMB_GRID_MAX_HZ - LOMB_GRID_MIN_HZ) / (LOMB_GRID_LEN - 1) as f64;
    let freq = |i: usize| LOMB_GRID_MIN_HZ + step * i as f64;
    let power: Vec<f64> = (0..LOMB_GRID_LEN).map(|i| lomb_scargle(&t, &x, freq(i))).collect();
    let at = |f: f64| {
        let pos = (f - LOMB_GRID_MIN_HZ) / step;
        let i = (pos.floor() as usize).min(LOMB_GRID_LEN - 2);
        let frac = pos - i as f64;
        power[i] * (1.0 - frac) + power[i + 1] * frac
    };
    let (lo, hi) = HF_BAND;
    let mut pts = vec![(lo, at(lo))];
    pts.extend(
        (0..LOMB_GRID_LEN)
            .map(|i| (freq(i), power[i]))
            .filter(|&(f, _)| f > lo && f < hi),
    );
    pts.push((hi, at(hi)));
    pts.windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn constant_series() {
        let f = rr_features(&[800.0, 800.0, 800.0]);
        assert_eq!(f.rr_mean, Some(800.0));
        assert_eq!(f.rmssd, Some(0.0));
        assert_eq!(f.sdnn, Some(0.0));
        assert_eq!(f.hf_lomb_power, None);
    }

    #[test]
    fn two_intervals() {
        let f = rr_features(&[790.0, 810.0]);
        assert!(close(f.rr_mean.unwrap(), 800.0));
        assert!(close(f.rmssd.unwrap(), 20.0));
        assert!(close(f.sdnn.unwrap(), 10.0));
    }

    #[test]
    fn too_few_intervals_mark_channels_missing() {
        let f = rr_features(&[800.0]);
        assert_eq!(f.rr_mean, Some(800.0));
        assert!(f.rmssd.is_none() && f.sdnn.is_none());
        assert!(rr_features(&[]).rr_mean.is_none());
        assert!(rr_features(&[800.0, 810.0, 790.0, 805.0]).hf_lomb_power.is_some());
    }

    /// Intervals whose values follow a sinusoid in beat time.
    fn modulated(mean: f64, amp: f64, hz: f64, span_s: f64) -> Vec<f64> {
        let mut t = 0.0;
        let mut rr = Vec::new();
        while t < span_s * 1000.0 {
            let r = mean + amp * (2.0 * PI * hz * t / 1000.0).sin();
            t += r;
            rr.push(r);
        }
        rr
    }

    /// Independent oracle: the periodogram definition written out with
    /// explicit sums, evaluated on a dense uniform grid over the band.
    fn dense_band_power(rr: &[f64]) -> f64 {
        let n = rr.len() as f64;
        let mean = rr.iter().sum::<f64>() / n;
        let mut times = Vec::new();
        let mut clock = 0.0;
        for r in rr {
            clock += r / 1000.0;
            times.push(clock);
        }
        let periodogram = |f: f64| {
            let w = 2.0 * PI * f;
            let num: f64 = times.iter().map(|t| (2.0 * w * t).sin()).sum();
            let den: f64 = times.iter().map(|t| (2.0 * w * t).cos()).sum();
            let tau = num.atan2(den) / (2.0 * w);
            let mut terms = [0.0f64; 4];
            for (t, r) in times.iter().zip(rr) {
                let arg = w * (t - tau);
                terms[0] += (r - mean) * arg.cos();
                terms[1] += arg.cos().powi(2);
                terms[2] += (r - mean) * arg.sin();
                terms[3] += arg.sin().powi(2);
            }
            0.5 * (terms[0].powi(2) / terms[1] + terms[2].powi(2) / terms[3])
        };
        let m = 20_000;
        let h = 0.25 / m as f64;
        (0..m)
            .map(|i| {
                let a = 0.15 + h * i as f64;
                0.5 * h * (periodogram(a) + periodogram(a + h))
            })
            .sum()
    }

    #[test]
    fn hf_power_matches_dense_reference() {
        for &(mean, amp) in &[(600.0, 30.0), (800.0, 20.0), (1000.0, 50.0), (1200.0, 30.0)] {
            let rr = modulated(mean, amp, 0.25, 300.0);
            let got = rr_features(&rr).hf_lomb_power.unwrap();
            let want = dense_band_power(&rr);
            assert!((got / want - 1.0).abs() < 0.02, "{mean}: {got} vs {want}");
        }
    }

    #[test]
    fn out_of_band_tone_has_little_hf_power() {
        let inband = rr_features(&modulated(800.0, 30.0, 0.25, 300.0)).hf_lomb_power.unwrap();
        let low = rr_features(&modulated(800.0, 30.0, 0.07, 300.0)).hf_lomb_power.unwrap();
        assert!(low < 0.1 * inband, "{low} vs {inband}");
    }

    proptest! {
        #[test]
        fn shift_moves_only_the_mean(
            rr in prop::collection::vec(300.0f64..2000.0, 2..60),
            shift in -250.0f64..250.0,
        ) {
            let a = rr_features(&rr);
            let shifted: Vec<f64> = rr.iter().map(|r| r + shift).collect();
            let b = rr_features(&shifted);
            prop_assert!((b.rr_mean.unwrap() - a.rr_mean.unwrap() - shift).abs() < 1e-9);
            prop_assert!((b.rmssd.unwrap() - a.rmssd.unwrap()).abs() < 1e-7);
            prop_assert!((b.sdnn.unwrap() - a.sdnn.unwrap()).abs() < 1e-7);
        }

        #[test]
        fn channels_are_non_negative(rr in prop::collection::vec(300.0f64..2000.0, 4..40)) {
            let f = rr_features(&rr);
            prop_assert!(f.rmssd.unwrap() >= 0.0);
            prop_assert!(f.sdnn.unwrap() >= 0.0);
            prop_assert!(f.hf_lomb_power.unwrap() >= 0.0);
        }
    }
}
