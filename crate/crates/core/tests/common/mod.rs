#![allow(dead_code, clippy::needless_range_loop)]

use bpinn::forward_ops::PsfKernel;
use bpinn::ImageGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> ImageGrid {
    ImageGrid::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_psf(k: usize, rng: &mut impl Rng) -> PsfKernel {
    PsfKernel::normalized(k, (0..k * k).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap()
}

/// Row-major dense matrix as nested vectors.
pub type Mat = Vec<Vec<f64>>;

/// `g[y][x] = Σ_{a,b} h[a][b] f[y + c − a][x + c − b]` with zeros outside.
pub fn naive_convolve(f: &ImageGrid, psf: &PsfKernel) -> ImageGrid {
    let k = psf.size() as isize;
    let c = k / 2;
    let (h, w) = (f.height() as isize, f.width() as isize);
    ImageGrid::from_fn(f.height(), f.width(), |y, x| {
        let mut s = 0.0;
        for a in 0..k {
            for b in 0..k {
                let (yy, xx) = (y as isize + c - a, x as isize + c - b);
                if yy >= 0 && yy < h && xx >= 0 && xx < w {
                    s += psf.weight(a as usize, b as usize) * f.get(yy as usize, xx as usize);
                }
            }
        }
        s
    })
}

pub fn naive_downsample(f: &ImageGrid, k: usize) -> ImageGrid {
    ImageGrid::from_fn(f.height() / k, f.width() / k, |y, x| {
        let mut s = 0.0;
        for dy in 0..k {
            for dx in 0..k {
                s += f.get(y * k + dy, x * k + dx);
            }
        }
        s / (k * k) as f64
    })
}

/// Columns are images of unit vectors under `apply`.
pub fn matrix_of(n_in: (usize, usize), apply: impl Fn(&ImageGrid) -> ImageGrid) -> Mat {
    let (h, w) = n_in;
    let n = h * w;
    let cols: Vec<ImageGrid> = (0..n)
        .map(|j| {
            apply(&ImageGrid::from_fn(h, w, |y, x| {
                if y * w + x == j {
                    1.0
                } else {
                    0.0
                }
            }))
        })
        .collect();
    let m = cols[0].len();
    (0..m)
        .map(|i| (0..n).map(|j| cols[j].values()[i]).collect())
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    let (m, n) = (a.len(), a[0].len());
    (0..n).map(|j| (0..m).map(|i| a[i][j]).collect()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    (0..m)
        .map(|i| {
            (0..n)
                .map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum())
                .collect()
        })
        .collect()
}

pub fn matvec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(r, v)| r * v).sum())
        .collect()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn gauss_jordan_inverse(a: &Mat) -> Mat {
    let n = a.len();
    let mut m: Mat = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Gaussian elimination with partial pivoting for `A x = b`.
pub fn gaussian_solve(a: &Mat, b: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut m: Mat = a
        .iter()
        .zip(b)
        .map(|(r, &bi)| {
            let mut row = r.clone();
            row.push(bi);
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..=n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[i][j] * x[j]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    x
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Gradient descent on `‖g − Hf‖²/(2v_ε) + ‖f − f̄‖²/(2v_f)` until `‖∇J‖ ≤ 1e-10`.
pub fn gd_minimizer(h: &Mat, g: &[f64], f_bar: &[f64], v_eps: f64, v_f: f64) -> Vec<f64> {
    let n = f_bar.len();
    let ht = transpose(h);
    // ‖H‖₂ ≤ 1 for a normalized non-negative psf, so 1/L with L = 1/v_ε + 1/v_f is safe
    let step = 1.0 / (1.0 / v_eps + 1.0 / v_f);
    let mut f = vec![0.0; n];
    for _ in 0..1_000_000 {
        let r: Vec<f64> = matvec(h, &f).iter().zip(g).map(|(a, b)| a - b).collect();
        let hr = matvec(&ht, &r);
        let grad: Vec<f64> = (0..n)
            .map(|i| hr[i] / v_eps + (f[i] - f_bar[i]) / v_f)
            .collect();
        if grad.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-10 {
            return f;
        }
        for i in 0..n {
            f[i] -= step * grad[i];
        }
    }
    panic!("gradient descent did not reach the tolerance");
}
