//! Independent reference implementations used by test suites.
//!
//! Nothing here shares code with the optimized kernels: the convolution is a
//! plain nested loop over output voxels and taps, and gradients are checked
//! against central finite differences of the forward pass.

use crate::{Result, Tape, Tensor, Var};

/// Direct 3D convolution, `N×Cin×D×H×W` input and `Cout×Cin×k1×k2×k3` kernel.
pub fn direct_conv3(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Tensor<f64> {
    let [n, cin, d, h, w] = input.dims5().expect("5-d input");
    let ks = kernel.shape();
    let (cout, k) = (ks[0], [ks[2], ks[3], ks[4]]);
    assert_eq!(ks[1], cin);
    let out_ext = |i: usize, a: usize| (i + 2 * pad[a] - k[a]) / stride[a] + 1;
    let (od, oh, ow) = (out_ext(d, 0), out_ext(h, 1), out_ext(w, 2));
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; n * cout * od * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias.map_or(0.0, |t| t.data()[co]);
                        for ci in 0..cin {
                            for a in 0..k[0] {
                                for bb in 0..k[1] {
                                    for c in 0..k[2] {
                                        let iz = (z * stride[0] + a) as isize - pad[0] as isize;
                                        let iy = (y * stride[1] + bb) as isize - pad[1] as isize;
                                        let ix = (xx * stride[2] + c) as isize - pad[2] as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= w as isize
                                        {
                                            continue;
                                        }
                                        let xi =
                                            (((b * cin + ci) * d + iz as usize) * h + iy as usize) * w + ix as usize;
                                        let ki = (((co * cin + ci) * k[0] + a) * k[1] + bb) * k[2] + c;
                                        acc += x[xi] * kd[ki];
                                    }
                                }
                            }
                        }
                        out[(((b * cout + co) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, od, oh, ow], out).expect("oracle shape")
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest `|analytic − fd| / (|fd| + 1e-8)` over all checked elements.
    pub max_rel_err: f64,
    pub elements: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        elements: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.leaf(*var).unwrap_or(&zeros).clone();
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (analytic.data()[j] - fd).abs() / (fd.abs() + 1e-8);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.elements += 1;
        }
    }
    Ok(report)
}
