//! Naive reference implementations used as independent test oracles.
//!
//! Nothing here shares code with the kernels under test: every routine is
//! written as the textbook loop nest over plain `f64` slices.

/// Direct loop convolution. `x` is `[n, cin, h, w]`, `w` is
/// `[cout, cin/groups, k, k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (n, cin, h, wd): (usize, usize, usize, usize),
    w: &[f64],
    (cout, k): (usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    dil: usize,
    groups: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            let grp = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[co]);
                    for ci in 0..cin_g {
                        let c = grp * cin_g + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((b * cin + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((co * cin_g + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Direct loop 1-D convolution. `x` is `[n, cin, l]`, `w` is `[cout, cin/groups, k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d(
    x: &[f64],
    (n, cin, l): (usize, usize, usize),
    w: &[f64],
    (cout, k): (usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    dil: usize,
    groups: usize,
) -> (Vec<f64>, usize) {
    let ol = (l + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = vec![0.0; n * cout * ol];
    for b in 0..n {
        for co in 0..cout {
            let grp = co / cout_g;
            for o in 0..ol {
                let mut acc = bias.map_or(0.0, |bv| bv[co]);
                for ci in 0..cin_g {
                    let c = grp * cin_g + ci;
                    for t in 0..k {
                        let i = (o * stride + t * dil) as isize - pad as isize;
                        if i >= 0 && (i as usize) < l {
                            acc += x[(b * cin + c) * l + i as usize] * w[(co * cin_g + ci) * k + t];
                        }
                    }
                }
                out[(b * cout + co) * ol + o] = acc;
            }
        }
    }
    (out, ol)
}

/// `y[i] = sum_j w[o][j] * x[i][j] + b[o]` by explicit dot products.
pub fn linear(x: &[f64], n: usize, fin: usize, w: &[f64], fout: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n * fout];
    for i in 0..n {
        for o in 0..fout {
            let mut acc = b[o];
            for j in 0..fin {
                acc += x[i * fin + j] * w[o * fin + j];
            }
            y[i * fout + o] = acc;
        }
    }
    y
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn cross_entropy(row: &[f64], target: usize) -> f64 {
    -softmax(row)[target].ln()
}

/// One step of a scalar LSTM whose gates see `x` and `h` through scalar
/// weights `(wx, wh, b)` in gate order input, forget, output, candidate.
pub fn lstm_step(x: f64, h: f64, c: f64, gates: [(f64, f64, f64); 4]) -> (f64, f64) {
    let pre = |(wx, wh, b): (f64, f64, f64)| wx * x + wh * h + b;
    let i = sigmoid(pre(gates[0]));
    let f = sigmoid(pre(gates[1]));
    let o = sigmoid(pre(gates[2]));
    let g = pre(gates[3]).tanh();
    let c2 = f * c + i * g;
    (o * c2.tanh(), c2)
}

/// Spatial mean of each `[n, c]` plane.
pub fn global_avg_pool(x: &[f64], n: usize, c: usize, spatial: usize) -> Vec<f64> {
    (0..n * c)
        .map(|p| x[p * spatial..(p + 1) * spatial].iter().sum::<f64>() / spatial as f64)
        .collect()
}
