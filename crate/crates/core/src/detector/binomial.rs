use super::DetectorError;

/// Compensated running sum; the log-binomial coefficient adds up to
/// thousands of terms.
#[derive(Default)]
struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    let mut acc = KahanSum::default();
    for i in 1..=k {
        acc.add(((n - k + i) as f64 / i as f64).ln());
    }
    acc.sum
}

fn pmf(n: u64, k: u64, p: f64) -> f64 {
    let ln_q = (-p).ln_1p();
    (ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * ln_q).exp()
}

/// Terms this far below the running sum no longer move it.
const NEGLIGIBLE: f64 = 1e-18;

/// `Pr[Binomial(n, p) <= x]`, summed exactly from the smaller tail.
///
/// The tail that does not contain the mean is accumulated outward from `x`
/// with the ratio recurrence between neighbouring terms; those terms fall
/// monotonically, so the sum stops once they are negligible.
pub fn binomial_cdf(n: u64, p: f64, x: i64) -> Result<f64, DetectorError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(DetectorError::Probability(p));
    }
    if x < 0 || x as u64 > n {
        return Err(DetectorError::Domain { n, x });
    }
    let x = x as u64;
    if x == n {
        return Ok(1.0);
    }
    let q = 1.0 - p;
    if (x as f64) <= n as f64 * p {
        // lower tail: k = x, x-1, ..., 0
        let mut term = pmf(n, x, p);
        let mut sum = term;
        let mut k = x;
        while k > 0 && term > 0.0 {
            term *= (k as f64 / (n - k + 1) as f64) * (q / p);
            k -= 1;
            sum += term;
            if term < sum * NEGLIGIBLE {
                break;
            }
        }
        Ok(sum.min(1.0))
    } else {
        // upper tail: k = x+1, ..., n
        let mut k = x + 1;
        let mut term = pmf(n, k, p);
        let mut sum = term;
        while k < n && term > 0.0 {
            term *= ((n - k) as f64 / (k + 1) as f64) * (p / q);
            k += 1;
            sum += term;
            if term < sum * NEGLIGIBLE {
                break;
            }
        }
        Ok((1.0 - sum).max(0.0))
    }
}
