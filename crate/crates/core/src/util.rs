//! Small numeric helpers shared by the measure and audit code.

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.comp += (self.sum - t) + value;
        } else {
            self.comp += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &KahanSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = KahanSum::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

/// Shannon entropy in bits of a list of masses; zero cells are skipped.
pub fn entropy_bits<I: IntoIterator<Item = f64>>(masses: I) -> f64 {
    let acc: KahanSum = masses
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.log2())
        .collect();
    acc.value()
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Keyed pseudorandom hash of a word sequence. `domain` separates
/// independent hash families drawn from the same seed.
pub fn keyed_hash(seed: u64, domain: u64, words: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(domain));
    for &w in words {
        h = splitmix64(h ^ splitmix64(w.wrapping_add(GOLDEN)));
    }
    splitmix64(h ^ words.len() as u64)
}

/// Keep the top `bits` bits of a hash value (0 bits gives the constant 0).
pub fn top_bits(h: u64, bits: u32) -> u64 {
    match bits {
        0 => 0,
        b if b >= 64 => h,
        b => h >> (64 - b),
    }
}

/// `ceil(x)` that ignores floating noise just above an integer.
pub fn ceil_bits(x: f64) -> u32 {
    if x <= 0.0 {
        return 0;
    }
    (x - 1e-9).ceil().max(0.0) as u32
}

/// Format a float with 12 significant digits, trailing zeros trimmed.
pub fn fmt_sig12(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() {
            "0".to_string()
        } else {
            x.to_string()
        };
    }
    let magnitude = x.abs().log10().floor() as i32;
    if !(-5..15).contains(&magnitude) {
        let s = format!("{:.11e}", x);
        let (mantissa, exponent) = s.split_once('e').expect("exponent form");
        let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
        return format!("{mantissa}e{exponent}");
    }
    let decimals = (11 - magnitude) as usize;
    let s = format!("{:.*}", decimals, x);
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".to_string()
    } else {
        s
    }
}

/// Round to the value that [`fmt_sig12`] prints.
pub fn round_sig12(x: f64) -> f64 {
    fmt_sig12(x).parse().unwrap_or(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_recovers_small_terms() {
        let mut acc = KahanSum::new();
        acc.add(1.0);
        for _ in 0..10_000 {
            acc.add(1e-16);
        }
        assert!((acc.value() - (1.0 + 1e-12)).abs() < 1e-15);
    }

    #[test]
    fn entropy_of_uniform() {
        assert_eq!(entropy_bits([0.25; 4]), 2.0);
        assert_eq!(entropy_bits([1.0, 0.0]), 0.0);
    }

    #[test]
    fn sig12_formatting() {
        assert_eq!(fmt_sig12(0.5), "0.5");
        assert_eq!(fmt_sig12(0.0), "0");
        assert_eq!(fmt_sig12(-1e-30), "-1e-30");
        assert_eq!(fmt_sig12(4.440892098500626e-16), "4.4408920985e-16");
        assert_eq!(fmt_sig12(0.000123), "0.000123");
        assert_eq!(fmt_sig12(0.18872187554086717), "0.188721875541");
        assert_eq!(fmt_sig12(123.456), "123.456");
        assert_eq!(round_sig12(1.0 / 3.0), 0.333333333333);
    }

    #[test]
    fn top_bits_edges() {
        assert_eq!(top_bits(u64::MAX, 0), 0);
        assert_eq!(top_bits(u64::MAX, 3), 7);
        assert_eq!(top_bits(u64::MAX, 64), u64::MAX);
    }

    #[test]
    fn ceil_bits_ignores_noise() {
        assert_eq!(ceil_bits(3.0000000000001), 3);
        assert_eq!(ceil_bits(1.5), 2);
        assert_eq!(ceil_bits(0.0), 0);
    }
}
