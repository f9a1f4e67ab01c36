//! Image-quality metrics (SSIM, PSNR) and string metrics (Levenshtein,
//! tiered recognition tallies).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pixelops::ImageTensor;

/// Side length of the Gaussian SSIM window.
pub const SSIM_WINDOW: usize = 11;
/// Standard deviation of the Gaussian SSIM window.
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of `[0,1]` images.
pub const DYNAMIC_RANGE: f64 = 1.0;

pub const SSIM_C1: f64 = (SSIM_K1 * DYNAMIC_RANGE) * (SSIM_K1 * DYNAMIC_RANGE);
pub const SSIM_C2: f64 = (SSIM_K2 * DYNAMIC_RANGE) * (SSIM_K2 * DYNAMIC_RANGE);

/// Length of a plate transcription.
pub const PLATE_LEN: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub ssim: f64,
    /// `f64::INFINITY` when the images are identical.
    pub psnr_db: f64,
}

impl QualityScore {
    pub fn between(a: &ImageTensor, b: &ImageTensor) -> Result<Self> {
        Ok(Self {
            ssim: ssim(a, b)?,
            psnr_db: psnr(a, b)?,
        })
    }
}

fn gaussian_window(len: usize) -> Vec<f64> {
    let centre = (len as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..len)
        .map(|i| {
            let d = i as f64 - centre;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" Gaussian filter of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, wy: &[f64], wx: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h - wy.len() + 1, w - wx.len() + 1);
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        let out = &mut horiz[y * ow..(y + 1) * ow];
        for (x, o) in out.iter_mut().enumerate() {
            *o = row[x..x + wx.len()].iter().zip(wx).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for (k, &wk) in wy.iter().enumerate() {
        for y in 0..oh {
            let src = &horiz[(y + k) * ow..(y + k + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wk * s;
            }
        }
    }
    out
}

struct ChannelStats {
    mu: Vec<f64>,
    var: Vec<f64>,
}

/// Precomputed reference-side statistics, so repeated comparisons against one
/// image (as the degradation loop does) only filter the candidate.
///
/// Images smaller than the window use a Gaussian truncated to the image extent.
pub struct SsimReference {
    shape: (usize, usize, usize),
    wy: Vec<f64>,
    wx: Vec<f64>,
    reference: Vec<f64>,
    stats: Vec<ChannelStats>,
}

impl SsimReference {
    pub fn new(reference: &ImageTensor) -> Self {
        let (c, h, w) = reference.shape();
        let wy = gaussian_window(SSIM_WINDOW.min(h));
        let wx = gaussian_window(SSIM_WINDOW.min(w));
        let data: Vec<f64> = reference.data().iter().map(|&v| f64::from(v)).collect();
        let stats = (0..c)
            .map(|ch| {
                let plane = &data[ch * h * w..(ch + 1) * h * w];
                let mu = filter_valid(plane, h, w, &wy, &wx);
                let sq: Vec<f64> = plane.iter().map(|v| v * v).collect();
                let var = filter_valid(&sq, h, w, &wy, &wx)
                    .into_iter()
                    .zip(&mu)
                    .map(|(e2, m)| e2 - m * m)
                    .collect();
                ChannelStats { mu, var }
            })
            .collect();
        Self {
            shape: (c, h, w),
            wy,
            wx,
            reference: data,
            stats,
        }
    }

    /// Mean SSIM of `other` against the reference, averaged over channels.
    pub fn score(&self, other: &ImageTensor) -> Result<f64> {
        if other.shape() != self.shape {
            return Err(Error::arg(format!(
                "ssim shape mismatch: {:?} vs {:?}",
                self.shape,
                other.shape()
            )));
        }
        let (c, h, w) = self.shape;
        let plane_len = h * w;
        let mut total = 0.0;
        for ch in 0..c {
            let a: Vec<f64> = other.channel(ch).iter().map(|&v| f64::from(v)).collect();
            let b = &self.reference[ch * plane_len..(ch + 1) * plane_len];
            let mu_a = filter_valid(&a, h, w, &self.wy, &self.wx);
            let a2: Vec<f64> = a.iter().map(|v| v * v).collect();
            let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
            let e_a2 = filter_valid(&a2, h, w, &self.wy, &self.wx);
            let e_ab = filter_valid(&ab, h, w, &self.wy, &self.wx);
            let st = &self.stats[ch];
            let mut acc = 0.0;
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], st.mu[i]);
                let var_a = e_a2[i] - ma * ma;
                let cov = e_ab[i] - ma * mb;
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + st.var[i] + SSIM_C2);
                acc += num / den;
            }
            total += acc / mu_a.len() as f64;
        }
        Ok(total / c as f64)
    }
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// computed per channel and averaged.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::arg(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    SsimReference::new(b).score(a)
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::arg(format!(
            "mse shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB for peak value 1; `+inf` when identical.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / m).log10())
}

/// Edit distance over Unicode scalar values.
pub fn levenshtein(s: &str, t: &str) -> usize {
    let s: Vec<char> = s.chars().collect();
    let t: Vec<char> = t.chars().collect();
    if s.is_empty() {
        return t.len();
    }
    let mut prev: Vec<usize> = (0..=t.len()).collect();
    let mut cur = vec![0; t.len() + 1];
    for (i, sc) in s.iter().enumerate() {
        cur[0] = i + 1;
        for (j, tc) in t.iter().enumerate() {
            let sub = prev[j] + usize::from(sc != tc);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[t.len()]
}

/// Position-wise character matches up to the shorter length.
pub fn positional_matches(pred: &str, gt: &str) -> usize {
    pred.chars().zip(gt.chars()).filter(|(a, b)| a == b).count()
}

/// Counts of plates recognised with all 7, at least 6, and at least 5
/// characters correct.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognitionTally {
    pub n_total: usize,
    pub n_ge7: usize,
    pub n_ge6: usize,
    pub n_ge5: usize,
}

impl RecognitionTally {
    pub fn record(&mut self, pred: &str, gt: &str) {
        let m = positional_matches(pred, gt);
        let same_len = pred.chars().count() == gt.chars().count();
        self.n_total += 1;
        if m == PLATE_LEN && same_len {
            self.n_ge7 += 1;
        }
        if m + 1 >= PLATE_LEN {
            self.n_ge6 += 1;
        }
        if m + 2 >= PLATE_LEN {
            self.n_ge5 += 1;
        }
    }

    pub fn merge(&mut self, other: &RecognitionTally) {
        self.n_total += other.n_total;
        self.n_ge7 += other.n_ge7;
        self.n_ge6 += other.n_ge6;
        self.n_ge5 += other.n_ge5;
    }

    fn pct(&self, n: usize) -> f64 {
        if self.n_total == 0 {
            0.0
        } else {
            100.0 * n as f64 / self.n_total as f64
        }
    }

    /// Percentage with every character correct.
    pub fn all_pct(&self) -> f64 {
        self.pct(self.n_ge7)
    }

    pub fn ge6_pct(&self) -> f64 {
        self.pct(self.n_ge6)
    }

    pub fn ge5_pct(&self) -> f64 {
        self.pct(self.n_ge5)
    }

    pub fn is_nested(&self) -> bool {
        self.n_ge7 <= self.n_ge6 && self.n_ge6 <= self.n_ge5 && self.n_ge5 <= self.n_total
    }
}

pub fn tally_recognition<S: AsRef<str>, T: AsRef<str>>(
    preds: &[S],
    gts: &[T],
) -> Result<RecognitionTally> {
    if preds.len() != gts.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut tally = RecognitionTally::default();
    for (p, g) in preds.iter().zip(gts) {
        let g = g.as_ref();
        if g.chars().count() != PLATE_LEN {
            return Err(Error::arg(format!(
                "ground truth {g:?} is not {PLATE_LEN} characters"
            )));
        }
        tally.record(p.as_ref(), g);
    }
    Ok(tally)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(c, h, w, |_, _, _| rng.random::<f32>()).unwrap()
    }

    /// Exhaustive recursion straight from the definition.
    fn lev_oracle(s: &[char], t: &[char]) -> usize {
        if s.is_empty() {
            return t.len();
        }
        if t.is_empty() {
            return s.len();
        }
        let cost = usize::from(s[0] != t[0]);
        (lev_oracle(&s[1..], &t[1..]) + cost)
            .min(lev_oracle(&s[1..], t) + 1)
            .min(lev_oracle(s, &t[1..]) + 1)
    }

    fn all_strings(alphabet: &[char], max_len: usize) -> Vec<String> {
        let mut out = vec![String::new()];
        let mut frontier = vec![String::new()];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for &c in alphabet {
                    let mut t = s.clone();
                    t.push(c);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn ssim_identity_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 3, 20, 30);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let half = ImageTensor::filled(3, 16, 16, 0.5).unwrap();
        assert!((ssim(&half, &half).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_zeros_vs_ones_closed_form() {
        let zeros = ImageTensor::zeros(3, 24, 24).unwrap();
        let ones = ImageTensor::filled(3, 24, 24, 1.0).unwrap();
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((expect - 9.999e-5).abs() < 1e-8);
        assert!((ssim(&zeros, &ones).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_small_images_use_truncated_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 3, 4, 6);
        let b = random_image(&mut rng, 3, 4, 6);
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_shape_mismatch() {
        let a = ImageTensor::zeros(3, 12, 12).unwrap();
        let b = ImageTensor::zeros(3, 12, 13).unwrap();
        assert!(matches!(ssim(&a, &b), Err(Error::Argument(_))));
        assert!(matches!(psnr(&a, &b), Err(Error::Argument(_))));
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        // Brute-force: evaluate every valid 11x11 window directly with 2-D weights.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_image(&mut rng, 1, 14, 13);
        let b = random_image(&mut rng, 1, 14, 13);
        let g = gaussian_window(11);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=3 {
            for x0 in 0..=2 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wgt = g[dy] * g[dx];
                        let va = f64::from(a.get(0, y0 + dy, x0 + dx));
                        let vb = f64::from(b.get(0, y0 + dy, x0 + dx));
                        ma += wgt * va;
                        mb += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
        let expect = total / count as f64;
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn psnr_fixtures() {
        let x = ImageTensor::filled(3, 8, 8, 0.3).unwrap();
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        let zeros = ImageTensor::zeros(3, 8, 8).unwrap();
        let tenth = ImageTensor::filled(3, 8, 8, 0.1).unwrap();
        assert!((psnr(&zeros, &tenth).unwrap() - 20.0).abs() < 1e-6);
        let ones = ImageTensor::filled(3, 8, 8, 1.0).unwrap();
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
    }

    #[test]
    fn levenshtein_fixtures() {
        assert_eq!(levenshtein("ABC1234", "ABC1234"), 0);
        assert_eq!(levenshtein("ABC1234", "A8C1234"), 1);
        assert_eq!(levenshtein("ABC1234", ""), 7);
        assert_eq!(levenshtein("", "AB"), 2);
    }

    #[test]
    fn levenshtein_matches_exhaustive_oracle() {
        let strings = all_strings(&['A', 'B', '1'], 5);
        assert_eq!(strings.len(), 364);
        let chars: Vec<Vec<char>> = strings.iter().map(|s| s.chars().collect()).collect();
        // Sample the pair space with a stride to keep the debug-profile runtime low; the
        // acceptance suite covers every pair.
        for (i, s) in strings.iter().enumerate().step_by(7) {
            for (j, t) in strings.iter().enumerate() {
                assert_eq!(levenshtein(s, t), lev_oracle(&chars[i], &chars[j]), "{s:?} {t:?}");
            }
        }
    }

    #[test]
    fn tally_fixtures() {
        let gts: Vec<String> = (0..10).map(|i| format!("ABC{:04}", i)).collect();
        let t = tally_recognition(&gts, &gts).unwrap();
        assert_eq!((t.n_total, t.n_ge7, t.n_ge6, t.n_ge5), (10, 10, 10, 10));
        let t = tally_recognition(&["ABC1235"], &["ABC1234"]).unwrap();
        assert_eq!((t.n_ge7, t.n_ge6, t.n_ge5), (0, 1, 1));
        let t = tally_recognition(&["XBC1299"], &["ABC1234"]).unwrap();
        assert_eq!((t.n_ge7, t.n_ge6, t.n_ge5), (0, 0, 0));
        // Short prediction: compared position-wise.
        let t = tally_recognition(&["ABC123"], &["ABC1234"]).unwrap();
        assert_eq!((t.n_ge7, t.n_ge6, t.n_ge5), (0, 1, 1));
        assert!(tally_recognition(&["A"], &["ABC1234", "ABC1234"]).is_err());
        assert!(tally_recognition(&["A"], &["ABC"]).is_err());
    }

    #[test]
    fn noise_lowers_ssim_in_expectation() {
        let base = ImageTensor::from_fn(3, 30, 60, |c, y, x| {
            let v = ((x / 6 + y / 5 + c) % 3) as f32 * 0.3 + 0.1;
            v + 0.05 * ((x as f32) * 0.3).sin()
        })
        .unwrap();
        let sigmas = [0.01f32, 0.03, 0.06, 0.1, 0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let means: Vec<f64> = sigmas
            .iter()
            .map(|&s| {
                let normal = Normal::new(0.0f32, s).unwrap();
                let total: f64 = (0..20)
                    .map(|_| {
                        let mut noisy = base.clone();
                        for v in noisy.data_mut() {
                            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
                        }
                        ssim(&noisy, &base).unwrap()
                    })
                    .sum();
                total / 20.0
            })
            .collect();
        for pair in means.windows(2) {
            assert!(pair[0] >= pair[1], "{means:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ssim_symmetric_and_bounded(seed in any::<u64>(), h in 3usize..20, w in 3usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 3, h, w);
            let b = random_image(&mut rng, 3, h, w);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn levenshtein_triangle(a in "[A-Z0-9]{7}", b in "[A-Z0-9]{7}", c in "[A-Z0-9]{7}") {
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        }

        #[test]
        fn tally_tiers_nest(pairs in proptest::collection::vec(("[A-C1]{5,9}", "[A-C1]{7}"), 1..40)) {
            let preds: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
            let gts: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
            let t = tally_recognition(&preds, &gts).unwrap();
            prop_assert!(t.is_nested());
            prop_assert!(t.all_pct() <= t.ge6_pct() && t.ge6_pct() <= t.ge5_pct());
        }
    }
}
