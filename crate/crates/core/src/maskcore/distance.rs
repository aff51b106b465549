//! Exact Euclidean distance transform (separable lower-envelope method).

use super::BinaryMask;

const INF: i64 = i64::MAX / 4;

/// Squared Euclidean distance from each pixel to the nearest background
/// pixel, where everything outside the image counts as background.
/// Background pixels get `0`.
pub fn squared_distance_to_background(m: &BinaryMask) -> Vec<i64> {
    // Pad by one background pixel on each side so the border acts as boundary.
    let (h, w) = m.dims();
    let (ph, pw) = (h + 2, w + 2);
    let mut grid = vec![0i64; ph * pw];
    for r in 0..h {
        for c in 0..w {
            if m.get(r, c) {
                grid[(r + 1) * pw + c + 1] = INF;
            }
        }
    }

    let mut buf = vec![0i64; ph.max(pw)];
    let mut out = vec![0i64; ph.max(pw)];
    for c in 0..pw {
        for r in 0..ph {
            buf[r] = grid[r * pw + c];
        }
        transform_1d(&buf[..ph], &mut out[..ph]);
        for r in 0..ph {
            grid[r * pw + c] = out[r];
        }
    }
    for r in 0..ph {
        buf[..pw].copy_from_slice(&grid[r * pw..(r + 1) * pw]);
        transform_1d(&buf[..pw], &mut out[..pw]);
        grid[r * pw..(r + 1) * pw].copy_from_slice(&out[..pw]);
    }

    let mut result = Vec::with_capacity(h * w);
    for r in 0..h {
        result.extend_from_slice(&grid[(r + 1) * pw + 1..(r + 1) * pw + 1 + w]);
    }
    result
}

/// 1-D squared distance transform of a sampled function `f`.
fn transform_1d(f: &[i64], d: &mut [i64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    // Index of the first finite sample; an all-infinite row stays infinite.
    let Some(first) = f.iter().position(|&x| x < INF) else {
        d.fill(INF);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if f[q] >= INF {
            continue;
        }
        loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as i64) - (f[p] + (p * p) as i64)) as f64 / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as i64 - p as i64;
        *dq = diff * diff + f[p];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(m: &BinaryMask) -> Vec<i64> {
        let (h, w) = m.dims();
        let mut bg = Vec::new();
        for r in -1..=h as i64 {
            for c in -1..=w as i64 {
                let inside = r >= 0 && c >= 0 && r < h as i64 && c < w as i64;
                if !inside || !m.get(r as usize, c as usize) {
                    bg.push((r, c));
                }
            }
        }
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                let d = bg
                    .iter()
                    .map(|&(br, bc)| (br - r).pow(2) + (bc - c).pow(2))
                    .min()
                    .unwrap();
                out.push(d);
            }
        }
        out
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let h = rng.gen_range(1..14);
            let w = rng.gen_range(1..14);
            let density = rng.gen_range(0.3..1.0);
            let m = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density));
            assert_eq!(squared_distance_to_background(&m), brute_force(&m));
        }
    }

    #[test]
    fn single_pixel() {
        let m = BinaryMask::from_pixels(3, 3, &[(1, 1)]);
        let d = squared_distance_to_background(&m);
        assert_eq!(d[4], 1);
        assert_eq!(d.iter().sum::<i64>(), 1);
    }
}
