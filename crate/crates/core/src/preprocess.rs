//! The two branch front ends: local standard-deviation filtering and the
//! 2D discrete cosine transform.

use thiserror::Error;

use crate::featuremap::FeatureMap;
use crate::imageio::{self, ImageError, RawImage};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("pad width {k} too wide for a {height}x{width} image")]
    PadTooWide {
        k: usize,
        height: usize,
        width: usize,
    },
    #[error("filter window must be odd and at least 3, got {0}")]
    InvalidWindow(usize),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Sliding-window geometry for the standard-deviation filter. The pad width
/// is tied to the window size so filtering preserves the image size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterSpec {
    window_size: usize,
}

impl FilterSpec {
    pub fn new(window_size: usize) -> Result<Self, PreprocessError> {
        if window_size < 3 || window_size.is_multiple_of(2) {
            return Err(PreprocessError::InvalidWindow(window_size));
        }
        Ok(Self { window_size })
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn pad_width(&self) -> usize {
        (self.window_size - 1) / 2
    }
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self { window_size: 3 }
    }
}

/// Mirror-reflects `k` pixels on every side, edge row/column included:
/// a 4x4 input with k = 1 becomes 6x6.
pub fn symmetric_pad(img: &FeatureMap, k: usize) -> Result<FeatureMap, PreprocessError> {
    let (h, w) = (img.height(), img.width());
    if k >= h.min(w) {
        return Err(PreprocessError::PadTooWide {
            k,
            height: h,
            width: w,
        });
    }
    if k == 0 {
        return Ok(img.clone());
    }
    let reflect = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i - 1) as usize
        } else if i as usize >= n {
            2 * n - 1 - i as usize
        } else {
            i as usize
        }
    };
    Ok(FeatureMap::from_fn(h + 2 * k, w + 2 * k, |r, c| {
        let sr = reflect(r as isize - k as isize, h);
        let sc = reflect(c as isize - k as isize, w);
        img.get(sr, sc)
    }))
}

/// Window mean over an already-padded image; the output shrinks back to
/// `padded size - 2 * pad_width`. Constant windows yield their value exactly.
pub fn local_mean(img_padded: &FeatureMap, spec: FilterSpec) -> FeatureMap {
    let ws = spec.window_size();
    let (hp, wp) = (img_padded.height(), img_padded.width());
    assert!(
        hp >= ws && wp >= ws,
        "padded image smaller than the filter window"
    );
    let p = (ws * ws) as f64;
    FeatureMap::from_fn(hp - ws + 1, wp - ws + 1, |r, c| {
        // Anchoring on the first window element keeps constant windows exact.
        let x0 = img_padded.get(r, c);
        let mut acc = 0.0;
        for u in 0..ws {
            for v in 0..ws {
                acc += img_padded.get(r + u, c + v) - x0;
            }
        }
        x0 + acc / p
    })
}

/// Population standard deviation of each window after symmetric padding.
/// Output size equals input size; constant regions map to exactly zero.
pub fn local_std_filter(img: &FeatureMap, spec: FilterSpec) -> Result<FeatureMap, PreprocessError> {
    let padded = symmetric_pad(img, spec.pad_width())?;
    let ws = spec.window_size();
    let p = (ws * ws) as f64;
    Ok(FeatureMap::from_fn(img.height(), img.width(), |r, c| {
        let x0 = padded.get(r, c);
        let mut sum = 0.0;
        for u in 0..ws {
            for v in 0..ws {
                sum += padded.get(r + u, c + v) - x0;
            }
        }
        let mean_shifted = sum / p;
        let mut sq = 0.0;
        for u in 0..ws {
            for v in 0..ws {
                let d = (padded.get(r + u, c + v) - x0) - mean_shifted;
                sq += d * d;
            }
        }
        (sq / p).sqrt()
    }))
}

/// Orthonormal DCT-II of a vector:
/// `X(k) = a(k) * sum_n x(n) * cos(k*pi*(2n+1) / 2N)` with `a(0) = 1/sqrt(N)`
/// and `a(k) = sqrt(2/N)` otherwise.
pub fn dct1d(x: &[f64]) -> Vec<f64> {
    let basis = CosBasis::forward(x.len());
    basis.apply(x)
}

/// Inverse of [`dct1d`].
pub fn idct1d(coeffs: &[f64]) -> Vec<f64> {
    let basis = CosBasis::inverse(coeffs.len());
    basis.apply(coeffs)
}

/// Cosine basis matrix for one transform length. Forward rows are indexed by
/// frequency; the inverse is its transpose (the basis is orthonormal).
struct CosBasis {
    n: usize,
    rows: Vec<f64>,
}

impl CosBasis {
    fn forward(n: usize) -> Self {
        let mut rows = Vec::with_capacity(n * n);
        let norm0 = 1.0 / (n as f64).sqrt();
        let norm = (2.0 / n as f64).sqrt();
        for k in 0..n {
            let a = if k == 0 { norm0 } else { norm };
            for m in 0..n {
                let angle = (k as f64) * std::f64::consts::PI * (2.0 * m as f64 + 1.0)
                    / (2.0 * n as f64);
                rows.push(a * angle.cos());
            }
        }
        Self { n, rows }
    }

    fn inverse(n: usize) -> Self {
        let fwd = Self::forward(n);
        let mut rows = vec![0.0; n * n];
        for k in 0..n {
            for m in 0..n {
                rows[m * n + k] = fwd.rows[k * n + m];
            }
        }
        Self { n, rows }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|k| {
                let row = &self.rows[k * self.n..][..self.n];
                let mut acc = 0.0;
                for (r, v) in row.iter().zip(x) {
                    acc += r * v;
                }
                acc
            })
            .collect()
    }
}

fn transform_2d(img: &FeatureMap, make_basis: fn(usize) -> CosBasis) -> FeatureMap {
    let (h, w) = (img.height(), img.width());
    // Rows first, then columns: the separable evaluation of the 2D transform.
    let row_basis = make_basis(w);
    let mut row_pass = Vec::with_capacity(h * w);
    for r in 0..h {
        row_pass.extend(row_basis.apply(img.row(r)));
    }
    let col_basis = make_basis(h);
    let mut out = vec![0.0; h * w];
    let mut column = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            column[r] = row_pass[r * w + c];
        }
        for (r, v) in col_basis.apply(&column).into_iter().enumerate() {
            out[r * w + c] = v;
        }
    }
    FeatureMap::new(h, w, out).expect("transform of finite input is finite")
}

/// 2D DCT-II, evaluated as two 1D passes (all rows, then all columns).
/// Equals the direct double-sum definition; a constant image concentrates
/// all energy in the (0,0) coefficient.
pub fn dct2(img: &FeatureMap) -> FeatureMap {
    transform_2d(img, CosBasis::forward)
}

/// Inverse 2D DCT; `idct2(dct2(x))` recovers `x` to within roundoff.
pub fn idct2(coeffs: &FeatureMap) -> FeatureMap {
    transform_2d(coeffs, CosBasis::inverse)
}

/// Applies `sign(x) * ln(1 + |x|)` elementwise. Optional conditioning for
/// the DCT branch, off by default.
pub fn signed_log(img: &FeatureMap) -> FeatureMap {
    FeatureMap::from_fn(img.height(), img.width(), |r, c| {
        let v = img.get(r, c);
        v.signum() * v.abs().ln_1p()
    })
}

/// Preprocessing knobs shared by training, evaluation, and prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PreprocessOptions {
    /// Square resize target on both axes.
    pub target_size: usize,
    /// Standard-deviation filter window.
    pub window_size: usize,
    /// Signed-log transform of the DCT coefficients.
    pub dct_log: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            target_size: 128,
            window_size: 3,
            dct_log: false,
        }
    }
}

/// Produces both branch inputs for one image: normalize to [0,1], resize to
/// the target square, then filter (branch one) and transform (branch two).
pub fn branch_inputs(
    img: &RawImage,
    opts: &PreprocessOptions,
) -> Result<(FeatureMap, FeatureMap), PreprocessError> {
    let spec = FilterSpec::new(opts.window_size)?;
    let normalized = imageio::normalize(img);
    let resized = imageio::resize_bilinear(&normalized, opts.target_size, opts.target_size)?;
    let filtered = local_std_filter(&resized, spec)?;
    let coeffs = dct2(&resized);
    let coeffs = if opts.dct_log {
        signed_log(&coeffs)
    } else {
        coeffs
    };
    Ok((filtered, coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256StarStar;

    fn rand_map(rng: &mut Xoshiro256StarStar, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(h, w, |_, _| rng.gen_range(0.0..1.0))
    }

    /// Brute-force reference: pad by reflection via index arithmetic (no
    /// shared padding code), then mean/std per window the obvious way.
    fn std_filter_oracle(img: &FeatureMap, ws: usize) -> FeatureMap {
        let k = (ws - 1) / 2;
        let (h, w) = (img.height(), img.width());
        let fetch = |r: isize, c: isize| -> f64 {
            let fix = |i: isize, n: usize| -> usize {
                if i < 0 {
                    (-i - 1) as usize
                } else if i as usize >= n {
                    2 * n - 1 - i as usize
                } else {
                    i as usize
                }
            };
            img.get(fix(r, h), fix(c, w))
        };
        FeatureMap::from_fn(h, w, |r, c| {
            let mut vals = Vec::with_capacity(ws * ws);
            for u in 0..ws {
                for v in 0..ws {
                    vals.push(fetch(
                        r as isize + u as isize - k as isize,
                        c as isize + v as isize - k as isize,
                    ));
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                / vals.len() as f64;
            var.sqrt()
        })
    }

    /// Direct quadruple-loop evaluation of the 2D transform definition.
    fn dct2_oracle(img: &FeatureMap) -> FeatureMap {
        let (m_dim, n_dim) = (img.height(), img.width());
        let alpha = |i: usize, n: usize| -> f64 {
            if i == 0 {
                1.0 / (n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            }
        };
        FeatureMap::from_fn(m_dim, n_dim, |k, l| {
            let mut acc = 0.0;
            for m in 0..m_dim {
                for n in 0..n_dim {
                    acc += img.get(m, n)
                        * ((k as f64) * std::f64::consts::PI * (2.0 * m as f64 + 1.0)
                            / (2.0 * m_dim as f64))
                            .cos()
                        * ((l as f64) * std::f64::consts::PI * (2.0 * n as f64 + 1.0)
                            / (2.0 * n_dim as f64))
                            .cos();
                }
            }
            alpha(k, m_dim) * alpha(l, n_dim) * acc
        })
    }

    #[test]
    fn pad_reflects_edges_inclusive() {
        let img = FeatureMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let padded = symmetric_pad(&img, 1).unwrap();
        let expected = [
            1.0, 1.0, 2.0, 2.0, //
            1.0, 1.0, 2.0, 2.0, //
            3.0, 3.0, 4.0, 4.0, //
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(padded.values(), &expected);
    }

    #[test]
    fn pad_zero_is_identity_and_sizes_grow() {
        let img = FeatureMap::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
        assert_eq!(symmetric_pad(&img, 0).unwrap(), img);
        let padded = symmetric_pad(&img, 1).unwrap();
        assert_eq!((padded.height(), padded.width()), (6, 6));
    }

    #[test]
    fn pad_too_wide_is_rejected() {
        let img = FeatureMap::from_fn(3, 5, |_, _| 0.0);
        assert!(matches!(
            symmetric_pad(&img, 3),
            Err(PreprocessError::PadTooWide { .. })
        ));
    }

    #[test]
    fn local_mean_examples() {
        let spec = FilterSpec::default();
        let constant = FeatureMap::from_fn(5, 5, |_, _| 0.1);
        let mean = local_mean(&constant, spec);
        assert_eq!((mean.height(), mean.width()), (3, 3));
        assert!(mean.values().iter().all(|&v| v == 0.1));

        let window = FeatureMap::new(3, 3, (1..=9).map(f64::from).collect()).unwrap();
        assert_eq!(local_mean(&window, spec).values(), &[5.0]);
    }

    #[test]
    fn local_mean_matches_direct_summation() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(21);
        let img = rand_map(&mut rng, 5, 5);
        let got = local_mean(&img, FilterSpec::default());
        for r in 0..3 {
            for c in 0..3 {
                let mut acc = 0.0;
                for u in 0..3 {
                    for v in 0..3 {
                        acc += img.get(r + u, c + v);
                    }
                }
                assert!((got.get(r, c) - acc / 9.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn std_filter_constant_is_exactly_zero() {
        for value in [0.0, 0.1, 1.0 / 3.0, 0.7] {
            let img = FeatureMap::from_fn(8, 8, |_, _| value);
            let out = local_std_filter(&img, FilterSpec::default()).unwrap();
            assert!(out.values().iter().all(|&v| v == 0.0), "value {value}");
        }
    }

    #[test]
    fn std_filter_hand_window() {
        // Window 1..9: deviations -4..4, population variance 60/9.
        let img = FeatureMap::new(3, 3, (1..=9).map(f64::from).collect()).unwrap();
        let out = local_std_filter(&img, FilterSpec::default()).unwrap();
        let center = out.get(1, 1);
        assert!((center - (60.0f64 / 9.0).sqrt()).abs() < 1e-12);
        assert!((center - 2.581989).abs() < 1e-6);
    }

    #[test]
    fn std_filter_matches_brute_force_oracle() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(22);
        for &ws in &[3usize, 5] {
            let img = rand_map(&mut rng, 16, 16);
            let got = local_std_filter(&img, FilterSpec::new(ws).unwrap()).unwrap();
            let want = std_filter_oracle(&img, ws);
            for (g, w) in got.values().iter().zip(want.values()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn std_filter_shift_and_scale_behavior() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(23);
        let img = rand_map(&mut rng, 10, 10);
        let spec = FilterSpec::default();
        let base = local_std_filter(&img, spec).unwrap();

        let shift = 2.5;
        let shifted = FeatureMap::from_fn(10, 10, |r, c| img.get(r, c) + shift);
        let out = local_std_filter(&shifted, spec).unwrap();
        for (a, b) in out.values().iter().zip(base.values()) {
            assert!((a - b).abs() < 1e-12);
        }

        let c = -3.0;
        let scaled = FeatureMap::from_fn(10, 10, |r, cc| img.get(r, cc) * c);
        let out = local_std_filter(&scaled, spec).unwrap();
        for (a, b) in out.values().iter().zip(base.values()) {
            assert!((a - c.abs() * b).abs() < 1e-12);
        }
    }

    #[test]
    fn dct1d_examples() {
        let flat = dct1d(&[1.0, 1.0, 1.0, 1.0]);
        assert!((flat[0] - 2.0).abs() < 1e-12);
        for &v in &flat[1..] {
            assert!(v.abs() < 1e-12);
        }
        assert_eq!(dct1d(&[3.7]), vec![3.7]);
    }

    #[test]
    fn dct1d_matches_direct_definition() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(24);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = dct1d(&x);
        let n = x.len();
        for (k, &got_k) in got.iter().enumerate() {
            let a = if k == 0 {
                1.0 / (n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            let direct: f64 = x
                .iter()
                .enumerate()
                .map(|(m, v)| {
                    v * ((k as f64) * std::f64::consts::PI * (2.0 * m as f64 + 1.0)
                        / (2.0 * n as f64))
                        .cos()
                })
                .sum::<f64>()
                * a;
            assert!((got_k - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn dct2_constant_concentrates_at_dc() {
        let img = FeatureMap::from_fn(6, 6, |_, _| 0.4);
        let coeffs = dct2(&img);
        assert!((coeffs.get(0, 0) - 0.4 * 6.0).abs() < 1e-12);
        for r in 0..6 {
            for c in 0..6 {
                if (r, c) != (0, 0) {
                    assert!(coeffs.get(r, c).abs() < 1e-12);
                }
            }
        }

        let ones = FeatureMap::from_fn(2, 2, |_, _| 1.0);
        let coeffs = dct2(&ones);
        assert!((coeffs.get(0, 0) - 2.0).abs() < 1e-12);
        assert!(coeffs.get(0, 1).abs() < 1e-12);
        assert!(coeffs.get(1, 0).abs() < 1e-12);
        assert!(coeffs.get(1, 1).abs() < 1e-12);
    }

    #[test]
    fn dct2_matches_quadruple_loop() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(25);
        let img = rand_map(&mut rng, 8, 8);
        let got = dct2(&img);
        let want = dct2_oracle(&img);
        for (g, w) in got.values().iter().zip(want.values()) {
            assert!((g - w).abs() < 1e-9);
        }
        // Non-square sizes exercise the two distinct normalizations.
        let img = rand_map(&mut rng, 5, 9);
        let got = dct2(&img);
        let want = dct2_oracle(&img);
        for (g, w) in got.values().iter().zip(want.values()) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn idct2_inverts_and_handles_edge_cases() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(26);
        let img = rand_map(&mut rng, 16, 16);
        let back = idct2(&dct2(&img));
        for (a, b) in back.values().iter().zip(img.values()) {
            assert!((a - b).abs() < 1e-9);
        }

        let dc_only = FeatureMap::new(2, 2, vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let flat = idct2(&dc_only);
        for &v in flat.values() {
            assert!((v - 1.0).abs() < 1e-12);
        }

        let zeros = FeatureMap::zeros(4, 4);
        assert!(idct2(&zeros).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parseval_energy_identity() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(27);
        let img = rand_map(&mut rng, 12, 12);
        let coeffs = dct2(&img);
        let e_img: f64 = img.values().iter().map(|v| v * v).sum();
        let e_coef: f64 = coeffs.values().iter().map(|v| v * v).sum();
        assert!((e_img - e_coef).abs() / e_img < 1e-9);
    }

    #[test]
    fn branch_inputs_constant_image() {
        let img = RawImage::new(64, 64, vec![128; 64 * 64]).unwrap();
        let opts = PreprocessOptions::default();
        let (filtered, coeffs) = branch_inputs(&img, &opts).unwrap();
        assert_eq!((filtered.height(), filtered.width()), (128, 128));
        assert!(filtered.values().iter().all(|&v| v == 0.0));
        // DC only: every other coefficient vanishes.
        assert!(coeffs.get(0, 0) > 0.0);
        let off_dc: f64 = coeffs
            .values()
            .iter()
            .skip(1)
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(off_dc < 1e-9);
    }

    #[test]
    fn branch_inputs_is_pure() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(28);
        let pixels: Vec<u8> = (0..32 * 32).map(|_| rng.gen()).collect();
        let img = RawImage::new(32, 32, pixels).unwrap();
        let opts = PreprocessOptions::default();
        let a = branch_inputs(&img, &opts).unwrap();
        let b = branch_inputs(&img, &opts).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn filter_output_size_matches_input(
            h in 3usize..20,
            w in 3usize..20,
            ws_idx in 0usize..2,
            seed in 0u64..500,
        ) {
            let ws = [3usize, 5][ws_idx];
            prop_assume!(ws / 2 < h.min(w));
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let img = FeatureMap::from_fn(h, w, |_, _| rng.gen_range(0.0..1.0));
            let out = local_std_filter(&img, FilterSpec::new(ws).unwrap()).unwrap();
            prop_assert_eq!((out.height(), out.width()), (h, w));
            prop_assert!(out.values().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn dct_is_linear(seed in 0u64..500) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let x = FeatureMap::from_fn(6, 6, |_, _| rng.gen_range(-1.0..1.0));
            let y = FeatureMap::from_fn(6, 6, |_, _| rng.gen_range(-1.0..1.0));
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let combined = FeatureMap::from_fn(6, 6, |r, c| a * x.get(r, c) + b * y.get(r, c));
            let lhs = dct2(&combined);
            let (tx, ty) = (dct2(&x), dct2(&y));
            for ((l, xv), yv) in lhs.values().iter().zip(tx.values()).zip(ty.values()) {
                prop_assert!((l - (a * xv + b * yv)).abs() < 1e-12);
            }
        }
    }
}
