//! Scalar and small-vector helpers that work without `std`.

#[inline]
pub fn exp(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.exp()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::exp(x)
    }
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

/// `e^y` for `0 ≤ y ≤ 41` without branches, so loops over it vectorize.
/// Relative error is a few ulps.
#[inline(always)]
fn exp_small_nonneg(y: f64) -> f64 {
    const LOG2E: f64 = core::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // adding 1.5·2^52 rounds to the nearest integer in the low mantissa bits
    const MAGIC: f64 = 6_755_399_441_055_744.0;
    let shifted = y * LOG2E + MAGIC;
    let k = shifted - MAGIC;
    let r = (y - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let n = (shifted.to_bits() as i64).wrapping_sub(MAGIC.to_bits() as i64);
    p * f64::from_bits(((n + 1023) << 52) as u64)
}

/// `tanh` through one polynomial `exp`, with a series near zero. Relative
/// error stays below 1e-13; written branch-free so slices vectorize.
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    let a = x.abs().min(20.0);
    let e = exp_small_nonneg(2.0 * a);
    let main = (e - 1.0) / (e + 1.0);
    let a2 = a * a;
    let series = a * (1.0 - a2 * (1.0 / 3.0 - a2 * (2.0 / 15.0)));
    let y = if a < 1e-3 { series } else { main };
    y.copysign(x)
}

/// Applies [`tanh`] to every element, using AVX2/FMA when the CPU has them.
pub fn tanh_in_place(xs: &mut [f64]) {
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required target features were just detected.
            unsafe { tanh_in_place_avx2(xs) };
            return;
        }
    }
    tanh_in_place_generic(xs);
}

#[inline(always)]
fn tanh_in_place_generic(xs: &mut [f64]) {
    for x in xs {
        *x = tanh(*x);
    }
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
#[target_feature(enable = "avx2,fma")]
unsafe fn tanh_in_place_avx2(xs: &mut [f64]) {
    tanh_in_place_generic(xs);
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    sqrt(dot(a, a))
}

#[inline]
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Numerically stable `ln Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + ln(xs.iter().map(|x| exp(x - max)).sum())
}

/// Writes `log_softmax(logits)` into `out`.
pub fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(logits);
    for (o, l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    log_softmax_into(logits, out);
    for o in out.iter_mut() {
        *o = exp(*o);
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}
