//! Exact one-dimensional total-variation denoising.

/// Solves `argmin_α ½‖α − v‖² + t Σ |α_{i+1} − α_i|` exactly.
///
/// This is Condat's direct algorithm: it sweeps left to right keeping the
/// range of feasible values for the current segment and emits a segment as
/// soon as the running dual variable leaves `[-t, t]`. Linear in practice.
pub fn fused_lasso_prox(v: &[f64], t: f64) -> Vec<f64> {
    let n = v.len();
    let mut x = vec![0.0; n];
    if n == 0 {
        return x;
    }
    if !(t > 0.0) || n == 1 {
        x.copy_from_slice(v);
        return x;
    }
    let (mut k, mut k0, mut kplus, mut kminus) = (0usize, 0usize, 0usize, 0usize);
    let mut umin = t;
    let mut umax = -t;
    let mut vmin = v[0] - t;
    let mut vmax = v[0] + t;
    loop {
        while k == n - 1 {
            if umin < 0.0 {
                while k0 <= kminus {
                    x[k0] = vmin;
                    k0 += 1;
                }
                k = k0;
                kminus = k;
                vmin = v[k];
                umin = t;
                umax = vmin + umin - vmax;
            } else if umax > 0.0 {
                while k0 <= kplus {
                    x[k0] = vmax;
                    k0 += 1;
                }
                k = k0;
                kplus = k;
                vmax = v[k];
                umax = -t;
                umin = vmax + umax - vmin;
            } else {
                vmin += umin / (k - k0 + 1) as f64;
                while k0 <= k {
                    x[k0] = vmin;
                    k0 += 1;
                }
                return x;
            }
        }
        umin += v[k + 1] - vmin;
        if umin < -t {
            while k0 <= kminus {
                x[k0] = vmin;
                k0 += 1;
            }
            k = k0;
            kminus = k;
            kplus = k;
            vmin = v[k];
            vmax = vmin + 2.0 * t;
            umin = t;
            umax = -t;
            continue;
        }
        umax += v[k + 1] - vmax;
        if umax > t {
            while k0 <= kplus {
                x[k0] = vmax;
                k0 += 1;
            }
            k = k0;
            kminus = k;
            kplus = k;
            vmax = v[k];
            vmin = vmax - 2.0 * t;
            umin = t;
            umax = -t;
        } else {
            k += 1;
            if umin >= t {
                kminus = k;
                vmin += (umin - t) / (kminus - k0 + 1) as f64;
                umin = t;
            }
            if umax <= -t {
                kplus = k;
                vmax += (umax + t) / (kplus - k0 + 1) as f64;
                umax = -t;
            }
        }
    }
}
