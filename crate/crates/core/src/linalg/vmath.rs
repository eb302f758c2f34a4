//! Branch-free `exp` and `tanh` for hot elementwise loops. Written so the
//! compiler can vectorize them; libm's scalar calls dominated the softmax
//! and GELU passes otherwise.
//!
//! Kernels take a `const FMA: bool` and are instantiated twice by
//! [`fma_dispatch!`]: once compiled for AVX2+FMA, once for the baseline.
//! The two differ in the last bits, so results are reproducible per machine.

/// Whether the running CPU has AVX2 and FMA (std caches the query).
#[inline]
pub fn fma_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `fma_dispatch!(pub fn name = kernel(a: A, b: B));` defines `name`, which
/// calls `kernel::<true>` from a function compiled with AVX2+FMA when the CPU
/// has them and `kernel::<false>` otherwise. `kernel` should be
/// `#[inline(always)]` so it is compiled with the caller's features.
macro_rules! fma_dispatch {
    ($(#[$meta:meta])* $vis:vis fn $name:ident = $kernel:ident($($arg:ident: $ty:ty),* $(,)?)) => {
        $(#[$meta])*
        $vis fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,fma")]
                fn fused($($arg: $ty),*) {
                    $kernel::<true>($($arg),*)
                }
                if $crate::linalg::vmath::fma_available() {
                    // SAFETY: both features were detected on this CPU.
                    return unsafe { fused($($arg),*) };
                }
            }
            $kernel::<false>($($arg),*)
        }
    };
}
pub(crate) use fma_dispatch;

const LOG2_E: f64 = std::f64::consts::LOG2_E;
// ln 2 split so that `n · LN2_HI` is exact for |n| < 2^20.
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
// Adding then subtracting 1.5 · 2^52 rounds to the nearest integer and
// leaves that integer in the low mantissa bits.
const ROUNDER: f64 = 6_755_399_441_055_744.0;
const MAX_ARG: f64 = 709.782_712_893_384;
const MIN_ARG: f64 = -708.396_418_532_264_1;

// 1/j! for j = 13 down to 2.
const TAYLOR: [f64; 12] = [
    1.0 / 6_227_020_800.0,
    1.0 / 479_001_600.0,
    1.0 / 39_916_800.0,
    1.0 / 3_628_800.0,
    1.0 / 362_880.0,
    1.0 / 40_320.0,
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    0.5,
];

/// `e^x` within a few ulp for normal results; `+∞` above the overflow
/// threshold, `0` below the normal range, NaN for NaN.
#[inline]
pub fn exp(x: f64) -> f64 {
    exp_with::<false>(x)
}

/// `a·b + c`, fused when `FMA`. Fused calls outside FMA-enabled code go
/// through libm and are slow.
#[inline(always)]
pub fn madd<const FMA: bool>(a: f64, b: f64, c: f64) -> f64 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

#[inline(always)]
pub fn exp_with<const FMA: bool>(x: f64) -> f64 {
    let xc = x.clamp(MIN_ARG, MAX_ARG);
    let shifted = madd::<FMA>(xc, LOG2_E, ROUNDER);
    let n = shifted - ROUNDER;
    let r = madd::<FMA>(-n, LN2_LO, madd::<FMA>(-n, LN2_HI, xc));
    let mut p = TAYLOR[0];
    for c in &TAYLOR[1..] {
        p = madd::<FMA>(p, r, *c);
    }
    let poly = madd::<FMA>(r * r, p, 1.0 + r);
    // Low 11 bits of `shifted` hold n in two's complement; n + 1023 is the
    // biased exponent of 2^n, which stays in [1, 2046] after clamping.
    let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    let y = poly * scale;
    if x > MAX_ARG {
        f64::INFINITY
    } else if x < MIN_ARG {
        0.0
    } else if x.is_nan() {
        x
    } else {
        y
    }
}

/// `tanh(x) = sign(x) · (1 − 2 / (e^{2|x|} + 1))`; absolute error near
/// 1e-16, saturating to ±1 for large |x|.
#[inline]
pub fn tanh(x: f64) -> f64 {
    tanh_with::<false>(x)
}

#[inline(always)]
pub fn tanh_with<const FMA: bool>(x: f64) -> f64 {
    let e = exp_with::<FMA>(2.0 * x.abs());
    (1.0 - 2.0 / (e + 1.0)).copysign(x)
}

const LANES: usize = 8;

/// Sum with eight interleaved accumulators, combined pairwise. The order is
/// fixed, so results are reproducible, but they can differ in the last bits
/// from a left-to-right sum.
#[inline]
pub fn sum(xs: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    fold_lanes(acc, |a, b| a + b) + tail.iter().sum::<f64>()
}

/// Dot product with the same accumulation order as [`sum`].
#[inline]
pub fn dot(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len().min(ys.len());
    let (xs, ys) = (&xs[..n], &ys[..n]);
    let mut acc = [0.0; LANES];
    let split = n - n % LANES;
    for (cx, cy) in xs[..split].chunks_exact(LANES).zip(ys[..split].chunks_exact(LANES)) {
        for ((a, x), y) in acc.iter_mut().zip(cx).zip(cy) {
            *a += x * y;
        }
    }
    let tail: f64 = xs[split..].iter().zip(&ys[split..]).map(|(x, y)| x * y).sum();
    fold_lanes(acc, |a, b| a + b) + tail
}

/// Maximum ignoring NaN; `−∞` for an empty slice. The plain comparison
/// (rather than [`f64::max`]) lets it vectorize.
#[inline]
pub fn max(xs: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            if *v > *a {
                *a = *v;
            }
        }
    }
    let pick = |a: f64, b: f64| if b > a { b } else { a };
    tail.iter().fold(fold_lanes(acc, pick), |m, &v| pick(m, v))
}

#[inline]
fn fold_lanes(acc: [f64; LANES], f: impl Fn(f64, f64) -> f64) -> f64 {
    let quad = [f(acc[0], acc[4]), f(acc[1], acc[5]), f(acc[2], acc[6]), f(acc[3], acc[7])];
    f(f(quad[0], quad[2]), f(quad[1], quad[3]))
}
