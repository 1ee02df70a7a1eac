//! Bicubic resampling of `[C, H, W]` maps with PyTorch's
//! `interpolate(mode="bicubic", align_corners=False)` semantics, used to
//! adapt position embeddings to a new patch grid.

use ndarray::Array3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BicubicMode {
    /// Plain cubic convolution, A = -0.75, edge-replicated taps.
    Torch,
    /// `antialias=True`: Keys kernel (A = -0.5) stretched by the
    /// downscale factor and renormalized at the borders.
    TorchAntialias,
}

fn cubic1(x: f64, a: f64) -> f64 {
    ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
}

fn cubic2(x: f64, a: f64) -> f64 {
    ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
}

/// Output index → list of (input index, weight).
fn taps(input: usize, output: usize, mode: BicubicMode) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| match mode {
            BicubicMode::Torch => {
                let real = scale * (i as f64 + 0.5) - 0.5;
                let base = real.floor();
                let t = real - base;
                let a = -0.75;
                let w = [cubic2(t + 1.0, a), cubic1(t, a), cubic1(1.0 - t, a), cubic2(2.0 - t, a)];
                (0..4)
                    .map(|k| {
                        let idx = (base as i64 - 1 + k as i64).clamp(0, input as i64 - 1) as usize;
                        (idx, w[k])
                    })
                    .collect()
            }
            BicubicMode::TorchAntialias => {
                let support = if scale >= 1.0 { 2.0 * scale } else { 2.0 };
                let invscale = if scale >= 1.0 { 1.0 / scale } else { 1.0 };
                let center = scale * (i as f64 + 0.5);
                let xmin = ((center - support + 0.5) as i64).max(0) as usize;
                let xmax = ((center + support + 0.5) as i64).min(input as i64) as usize;
                let filter = |x: f64| {
                    let x = x.abs();
                    if x < 1.0 {
                        cubic1(x, -0.5)
                    } else if x < 2.0 {
                        cubic2(x, -0.5)
                    } else {
                        0.0
                    }
                };
                let mut w: Vec<(usize, f64)> = (xmin..xmax)
                    .map(|j| (j, filter((j as f64 - center + 0.5) * invscale)))
                    .collect();
                let total: f64 = w.iter().map(|p| p.1).sum();
                if total != 0.0 {
                    for p in &mut w {
                        p.1 /= total;
                    }
                }
                w
            }
        })
        .collect()
}

/// Separable resize: along width first, then height.
pub fn resize_bicubic(x: &Array3<f32>, out_h: usize, out_w: usize, mode: BicubicMode) -> Array3<f32> {
    let (c, h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let tw = taps(w, out_w, mode);
    let th = taps(h, out_h, mode);
    let mut tmp = Array3::<f64>::zeros((c, h, out_w));
    for ci in 0..c {
        for y in 0..h {
            for (ox, t) in tw.iter().enumerate() {
                tmp[[ci, y, ox]] = t.iter().map(|&(j, wt)| x[[ci, y, j]] as f64 * wt).sum();
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for ci in 0..c {
        for (oy, t) in th.iter().enumerate() {
            for ox in 0..out_w {
                out[[ci, oy, ox]] = t.iter().map(|&(j, wt)| tmp[[ci, j, ox]] * wt).sum::<f64>() as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_constant() {
        let x = Array3::from_shape_fn((2, 5, 5), |(c, y, xx)| (c + y * 5 + xx) as f32);
        assert_eq!(resize_bicubic(&x, 5, 5, BicubicMode::Torch), x);
        let k = Array3::from_elem((1, 7, 7), 3.0f32);
        for mode in [BicubicMode::Torch, BicubicMode::TorchAntialias] {
            for (oh, ow) in [(3, 4), (10, 12)] {
                let out = resize_bicubic(&k, oh, ow, mode);
                assert!(out.iter().all(|v| (v - 3.0).abs() < 1e-5), "{mode:?}");
            }
        }
    }

    #[test]
    fn taps_sum_to_one() {
        for mode in [BicubicMode::Torch, BicubicMode::TorchAntialias] {
            for (i, o) in [(37, 16), (16, 37), (24, 32)] {
                for t in taps(i, o, mode) {
                    let s: f64 = t.iter().map(|p| p.1).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn torch_reference_values() {
        // torch.nn.functional.interpolate(torch.arange(4.).view(1,1,1,4), size=(1,8), mode="bicubic", align_corners=False)
        let x = Array3::from_shape_fn((1, 1, 4), |(_, _, i)| i as f32);
        let out = resize_bicubic(&x, 1, 8, BicubicMode::Torch);
        let expected = [-0.10546875f32, 0.19140625, 0.66796875, 1.296875, 1.703125, 2.33203125, 2.80859375, 3.10546875];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-5, "{o} vs {e}");
        }
        // same call on arange(37) ** 1.5 down to 16 with antialias=True
        let y = Array3::from_shape_fn((1, 1, 37), |(_, _, i)| (i as f32).powf(1.5));
        let out = resize_bicubic(&y, 1, 16, BicubicMode::TorchAntialias);
        let expected = [0.72913706f32, 5.0213442, 12.140509, 20.924212, 31.16925];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-4, "{o} vs {e}");
        }
    }
}
