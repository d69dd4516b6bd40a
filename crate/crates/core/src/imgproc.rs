//! Small raster kernels shared by the generator and the augmentation pipeline.
//! All buffers are row-major `width * height`.

pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with clamp-to-edge borders. `sigma <= 0` is the identity.
pub fn gaussian_blur(src: &[f32], width: usize, height: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = (x as isize + i as isize - r).clamp(0, width as isize - 1) as usize;
                acc += kv * row[sx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = (y as isize + i as isize - r).clamp(0, height as isize - 1) as usize;
                acc += kv * tmp[sy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Bilinear resample of the window `(x0, y0, win_w, win_h)` of `src` to `out_w x out_h`,
/// using pixel-center alignment.
pub fn resize_bilinear(
    src: &[f32],
    width: usize,
    window: (usize, usize, usize, usize),
    out_w: usize,
    out_h: usize,
) -> Vec<f32> {
    let (x0, y0, win_w, win_h) = window;
    let sx = win_w as f32 / out_w as f32;
    let sy = win_h as f32 / out_h as f32;
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (win_h - 1) as f32);
        let y_lo = fy.floor() as usize;
        let y_hi = (y_lo + 1).min(win_h - 1);
        let ty = fy - y_lo as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (win_w - 1) as f32);
            let x_lo = fx.floor() as usize;
            let x_hi = (x_lo + 1).min(win_w - 1);
            let tx = fx - x_lo as f32;
            let at = |x: usize, y: usize| src[(y0 + y) * width + x0 + x];
            let top = at(x_lo, y_lo) * (1.0 - tx) + at(x_hi, y_lo) * tx;
            let bottom = at(x_lo, y_hi) * (1.0 - tx) + at(x_hi, y_hi) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Nearest-neighbour resample of a window; keeps label values exact.
pub fn resize_nearest<T: Copy>(
    src: &[T],
    width: usize,
    window: (usize, usize, usize, usize),
    out_w: usize,
    out_h: usize,
) -> Vec<T> {
    let (x0, y0, win_w, win_h) = window;
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let y = (((oy as f64 + 0.5) * win_h as f64 / out_h as f64) as usize).min(win_h - 1);
        for ox in 0..out_w {
            let x = (((ox as f64 + 0.5) * win_w as f64 / out_w as f64) as usize).min(win_w - 1);
            out.push(src[(y0 + y) * width + x0 + x]);
        }
    }
    out
}

pub fn flip_horizontal<T: Copy>(src: &[T], width: usize, height: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for y in 0..height {
        out.extend(src[y * width..(y + 1) * width].iter().rev());
    }
    out
}
