//! Dense, 3x3 convolution, ReLU and global average pooling on `[N, C, H, W]` tensors.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{gemm, gemm_nt, gemm_tn, Shape4, Tensor};

/// Fully connected layer over the flattened `C * H * W` features; output is `[N, out, 1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

/// Stride-1, zero-padded ("same") 3x3 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out, in * 9]`, rows ordered `(in_channel, ky, kx)`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

fn he_normal<R: Rng>(rows: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * fan_in).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![rows, fan_in], data).expect("consistent shape")
}

impl Dense {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            in_features,
            out_features,
            weight: he_normal(out_features, in_features, rng),
            bias: vec![0.0; out_features],
        }
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut out = vec![0.0; batch * self.out_features];
        for n in 0..batch {
            out[n * self.out_features..(n + 1) * self.out_features].copy_from_slice(&self.bias);
        }
        gemm_nt(x, self.weight.data(), &mut out, batch, self.in_features, self.out_features);
        out
    }

    /// Returns `(grad_x, grad_weight, grad_bias)`.
    pub fn backward(&self, x: &[f64], grad_y: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (fi, fo) = (self.in_features, self.out_features);
        let mut gw = vec![0.0; fo * fi];
        gemm_tn(grad_y, x, &mut gw, fo, batch, fi);
        let mut gb = vec![0.0; fo];
        for n in 0..batch {
            for (b, g) in gb.iter_mut().zip(&grad_y[n * fo..(n + 1) * fo]) {
                *b += g;
            }
        }
        let mut gx = vec![0.0; batch * fi];
        gemm(grad_y, self.weight.data(), &mut gx, batch, fo, fi);
        (gx, gw, gb)
    }
}

/// Gathers the zero-padded 3x3 neighbourhoods of one sample into a
/// `[C * 9, H * W]` matrix.
pub fn im2col(sample: &[f64], channels: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), channels * 9 * hw);
    for c in 0..channels {
        let plane = &sample[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - 1;
                        row[oy * w + ox] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `[C * 9, H * W]` column gradient back onto the sample.
pub fn col2im(cols: &[f64], channels: usize, h: usize, w: usize, sample: &mut [f64]) {
    let hw = h * w;
    for c in 0..channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            sample[c * hw + iy as usize * w + ix as usize] += row[oy * w + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Conv3x3 {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: he_normal(out_channels, in_channels * 9, rng),
            bias: vec![0.0; out_channels],
        }
    }

    /// Returns the output and the gathered columns of every sample.
    pub fn forward(&self, x: &[f64], s: Shape4) -> (Vec<f64>, Vec<f64>) {
        let hw = s.spatial();
        let k = self.in_channels * 9;
        let mut cols = vec![0.0; s.batch * k * hw];
        let mut out = vec![0.0; s.batch * self.out_channels * hw];
        for n in 0..s.batch {
            let c = &mut cols[n * k * hw..(n + 1) * k * hw];
            im2col(&x[n * self.in_channels * hw..(n + 1) * self.in_channels * hw], self.in_channels, s.height, s.width, c);
            let o = &mut out[n * self.out_channels * hw..(n + 1) * self.out_channels * hw];
            for (oc, plane) in o.chunks_mut(hw).enumerate() {
                plane.fill(self.bias[oc]);
            }
            gemm(self.weight.data(), c, o, self.out_channels, k, hw);
        }
        (out, cols)
    }

    /// Returns `(grad_x, grad_weight, grad_bias)`.
    pub fn backward(&self, cols: &[f64], grad_y: &[f64], s: Shape4) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hw = s.spatial();
        let k = self.in_channels * 9;
        let oc = self.out_channels;
        let mut gw = vec![0.0; oc * k];
        let mut gb = vec![0.0; oc];
        let mut gx = vec![0.0; s.batch * self.in_channels * hw];
        let mut gcols = vec![0.0; k * hw];
        for n in 0..s.batch {
            let g = &grad_y[n * oc * hw..(n + 1) * oc * hw];
            let c = &cols[n * k * hw..(n + 1) * k * hw];
            gemm_nt(g, c, &mut gw, oc, hw, k);
            for (b, plane) in gb.iter_mut().zip(g.chunks(hw)) {
                *b += plane.iter().sum::<f64>();
            }
            gcols.fill(0.0);
            gemm_tn(self.weight.data(), g, &mut gcols, k, oc, hw);
            col2im(
                &gcols,
                self.in_channels,
                s.height,
                s.width,
                &mut gx[n * self.in_channels * hw..(n + 1) * self.in_channels * hw],
            );
        }
        (gx, gw, gb)
    }
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn relu_backward(x: &[f64], grad_y: &[f64]) -> Vec<f64> {
    x.iter().zip(grad_y).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

pub fn avgpool_forward(x: &[f64], s: Shape4) -> Vec<f64> {
    let hw = s.spatial();
    let inv = 1.0 / hw as f64;
    x.chunks(hw).map(|plane| plane.iter().sum::<f64>() * inv).collect()
}

pub fn avgpool_backward(grad_y: &[f64], s: Shape4) -> Vec<f64> {
    let hw = s.spatial();
    let inv = 1.0 / hw as f64;
    grad_y.iter().flat_map(|&g| std::iter::repeat_n(g * inv, hw)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(conv: &Conv3x3, x: &[f64], s: Shape4) -> Vec<f64> {
        let (h, w) = (s.height, s.width);
        let mut out = vec![0.0; s.batch * conv.out_channels * h * w];
        for n in 0..s.batch {
            for o in 0..conv.out_channels {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = conv.bias[o];
                        for c in 0..conv.in_channels {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = y as isize + ky as isize - 1;
                                    let ix = xx as isize + kx as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let v = x[((n * conv.in_channels + c) * h + iy as usize) * w + ix as usize];
                                    acc += v * conv.weight.data()[o * conv.in_channels * 9 + c * 9 + ky * 3 + kx];
                                }
                            }
                        }
                        out[((n * conv.out_channels + o) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Conv3x3::new(2, 3, &mut rng);
        let s = Shape4::new(2, 2, 4, 3);
        let x: Vec<f64> = (0..s.numel()).map(|i| (i as f64 * 0.37).sin()).collect();
        let (out, _) = conv.forward(&x, s);
        let expect = direct_conv(&conv, &x, s);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let (ch, h, w) = (2, 3, 4);
        let x: Vec<f64> = (0..ch * h * w).map(|i| (i as f64).cos()).collect();
        let c: Vec<f64> = (0..ch * 9 * h * w).map(|i| (i as f64 * 0.1).sin()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, ch, h, w, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, ch, h, w, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn dense_weight_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Dense::new(3, 2, &mut rng);
        let x = [1.0, 2.0, 3.0, -1.0, 0.5, 0.0];
        let gy = [0.1, -0.2, 0.3, 0.4];
        let (_, gw, gb) = d.backward(&x, &gy, 2);
        for o in 0..2 {
            for i in 0..3 {
                let expect = gy[o] * x[i] + gy[2 + o] * x[3 + i];
                assert!((gw[o * 3 + i] - expect).abs() < 1e-15);
            }
        }
        assert!((gb[0] - 0.4).abs() < 1e-15 && (gb[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn relu_and_pool() {
        assert_eq!(relu_forward(&[-1.0, 2.0]), vec![0.0, 2.0]);
        assert_eq!(relu_backward(&[-1.0, 2.0], &[5.0, 5.0]), vec![0.0, 5.0]);
        let s = Shape4::new(1, 2, 1, 2);
        assert_eq!(avgpool_forward(&[1.0, 3.0, 2.0, 6.0], s), vec![2.0, 4.0]);
        assert_eq!(avgpool_backward(&[2.0, 4.0], s), vec![1.0, 1.0, 2.0, 2.0]);
    }
}
