//! Kaiser-windowed-sinc sample rate conversion. Output positions are kept
//! as exact rationals (n * in_rate / out_rate) so long clips accumulate no
//! phase drift.

/// Resample `x` from `from_hz` to `to_hz`.
pub fn resample(x: &[f32], from_hz: u32, to_hz: u32) -> Vec<f32> {
    assert!(from_hz > 0 && to_hz > 0);
    if from_hz == to_hz || x.is_empty() {
        return x.to_vec();
    }
    let g = gcd(from_hz as u64, to_hz as u64);
    let m = (from_hz as u64 / g) as usize; // input step numerator
    let l = (to_hz as u64 / g) as usize; // per output sample: t += m/l

    // Anti-aliasing cutoff relative to the input Nyquist; 1.0 when
    // upsampling, to_hz/from_hz (with margin) when downsampling.
    let ratio = to_hz as f64 / from_hz as f64;
    let cutoff = 0.945 * ratio.min(1.0);
    let half_width = (32.0 / cutoff).ceil() as isize;
    let beta = 8.0;
    let i0b = bessel_i0(beta);

    let n_out = (x.len() as u64 * to_hz as u64) / from_hz as u64;
    let mut out = Vec::with_capacity(n_out as usize);
    for n in 0..n_out as usize {
        // t = n*m/l in input-sample units.
        let t_num = n * m;
        let t_int = (t_num / l) as isize;
        let t_frac = (t_num % l) as f64 / l as f64;
        let mut acc = 0.0f64;
        for j in -half_width..=half_width {
            let idx = t_int + j;
            if idx < 0 || idx as usize >= x.len() {
                continue;
            }
            // tau: distance from the interpolation point to this tap.
            let tau = j as f64 - t_frac;
            let u = tau / half_width as f64;
            if u.abs() > 1.0 {
                continue;
            }
            let win = bessel_i0(beta * (1.0 - u * u).sqrt()) / i0b;
            acc += x[idx as usize] as f64 * cutoff * sinc(cutoff * tau) * win;
        }
        out.push(acc as f32);
    }
    out
}

fn sinc(t: f64) -> f64 {
    if t.abs() < 1e-12 {
        1.0
    } else {
        let pt = std::f64::consts::PI * t;
        pt.sin() / pt
    }
}

/// Modified Bessel function of the first kind, order zero (series form).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_x = x / 2.0;
    for k in 1..=25 {
        term *= (half_x / k as f64) * (half_x / k as f64);
        sum += term;
        if term < 1e-16 * sum {
            break;
        }
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
