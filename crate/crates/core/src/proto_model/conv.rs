use ndarray::{Array1, Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Square-kernel 2-D convolution over a single `[C, H, W]` image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
}

pub struct ConvGrads {
    pub input: Array3<f64>,
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    /// He-normal initialization, zero bias.
    pub fn he_init<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = Array4::from_shape_fn((out_ch, in_ch, kernel, kernel), |_| normal.sample(rng));
        Self {
            weight,
            bias: Array1::zeros(out_ch),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    /// Output positions `o` along one axis whose tap `o*stride + k - pad` lands inside `0..len`.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> std::ops::Range<usize> {
        let s = self.stride as isize;
        let p = self.padding as isize;
        let k = k as isize;
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let hi_tap = len as isize - 1 + p - k;
        if hi_tap < 0 {
            return 0..0;
        }
        let hi = (hi_tap / s + 1).min(out_len as isize);
        (lo as usize)..(hi.max(lo) as usize)
    }

    pub fn forward(&self, input: &Array3<f64>) -> Array3<f64> {
        let (cin, h, w) = input.dim();
        debug_assert_eq!(cin, self.in_channels());
        let (ho, wo) = self.output_size(h, w);
        let cout = self.out_channels();
        let k = self.kernel();
        let s = self.stride;
        let p = self.padding;
        let inp = input.as_standard_layout();
        let inp = inp.as_slice().expect("contiguous");
        let wts = self.weight.as_standard_layout();
        let wts = wts.as_slice().expect("contiguous");
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
            plane.fill(self.bias[co]);
            for ci in 0..cin {
                let src = &inp[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    let oy_range = self.valid_range(ky, h, ho);
                    for kx in 0..k {
                        let wv = wts[((co * cin + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let ox_range = self.valid_range(kx, w, wo);
                        for oy in oy_range.clone() {
                            let iy = oy * s + ky - p;
                            let row = &src[iy * w..(iy + 1) * w];
                            let dst = &mut plane[oy * wo..(oy + 1) * wo];
                            for ox in ox_range.clone() {
                                dst[ox] += wv * row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((cout, ho, wo), out).expect("shape")
    }

    /// Gradients with respect to input, weight and bias given the upstream gradient.
    pub fn backward(&self, input: &Array3<f64>, grad_out: &Array3<f64>) -> ConvGrads {
        let (cin, h, w) = input.dim();
        let (cout, ho, wo) = grad_out.dim();
        let k = self.kernel();
        let s = self.stride;
        let p = self.padding;
        let inp = input.as_standard_layout();
        let inp = inp.as_slice().expect("contiguous");
        let g = grad_out.as_standard_layout();
        let g = g.as_slice().expect("contiguous");
        let wts = self.weight.as_standard_layout();
        let wts = wts.as_slice().expect("contiguous");
        let mut gin = vec![0.0; cin * h * w];
        let mut gw = vec![0.0; cout * cin * k * k];
        let mut gb = vec![0.0; cout];
        for co in 0..cout {
            let gplane = &g[co * ho * wo..(co + 1) * ho * wo];
            gb[co] = gplane.iter().sum();
            for ci in 0..cin {
                let src = &inp[ci * h * w..(ci + 1) * h * w];
                let dst = &mut gin[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    let oy_range = self.valid_range(ky, h, ho);
                    for kx in 0..k {
                        let widx = ((co * cin + ci) * k + ky) * k + kx;
                        let wv = wts[widx];
                        let ox_range = self.valid_range(kx, w, wo);
                        let mut acc = 0.0;
                        for oy in oy_range.clone() {
                            let iy = oy * s + ky - p;
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            for ox in ox_range.clone() {
                                let ix = ox * s + kx - p;
                                let gv = grow[ox];
                                acc += gv * src[iy * w + ix];
                                dst[iy * w + ix] += wv * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        ConvGrads {
            input: Array3::from_shape_vec((cin, h, w), gin).expect("shape"),
            weight: Array4::from_shape_vec((cout, cin, k, k), gw).expect("shape"),
            bias: Array1::from_vec(gb),
        }
    }
}
