//! Sliding-window inference and per-class DSC / NSD reports.

use autograd::{Element, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split, Volume};
use crate::error::{Error, Result};
use crate::metrics::{dice_score, nsd_score};
use crate::network::Network;

/// Window origins along one axis: stride `window / 2`, last window flush
/// with the far edge.
fn origins(extent: usize, window: usize) -> Vec<usize> {
    if extent <= window {
        return vec![0];
    }
    let stride = (window / 2).max(1);
    let mut v: Vec<usize> = (0..=extent - window).step_by(stride).collect();
    if *v.last().expect("non-empty") != extent - window {
        v.push(extent - window);
    }
    v
}

/// Overlap-averaged finest-level logits `[C, D, H, W]` over windows of size
/// `window`. Volumes smaller than the window are zero-padded symmetrically;
/// the flag reports whether that happened.
pub fn sliding_window_logits<E: Element>(
    net: &Network<E>,
    image: &Volume,
    window: [usize; 3],
) -> Result<(Tensor<f64>, bool)> {
    let dims = image.dims;
    let padded_dims: [usize; 3] = std::array::from_fn(|k| dims[k].max(window[k]));
    let pad: [usize; 3] = std::array::from_fn(|k| (padded_dims[k] - dims[k]) / 2);
    let padded = padded_dims != dims;
    if padded {
        log::warn!("volume {dims:?} smaller than window {window:?}: zero-padded");
    }
    let [pd, ph, pw] = padded_dims;
    let mut vol = vec![E::zero(); pd * ph * pw];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let src = (z * dims[1] + y) * dims[2];
            let dst = ((z + pad[0]) * ph + y + pad[1]) * pw + pad[2];
            for x in 0..dims[2] {
                vol[dst + x] = E::lit(image.data[src + x] as f64);
            }
        }
    }

    let c = net.config().num_classes;
    let plane = pd * ph * pw;
    let mut acc = vec![0f64; c * plane];
    let mut count = vec![0u32; plane];
    let [wd, wh, ww] = window;
    for &oz in &origins(pd, wd) {
        for &oy in &origins(ph, wh) {
            for &ox in &origins(pw, ww) {
                let patch = Tensor::from_fn(&[1, 1, wd, wh, ww], |i| {
                    let (z, r) = (i / (wh * ww), i % (wh * ww));
                    let (y, x) = (r / ww, r % ww);
                    vol[((oz + z) * ph + oy + y) * pw + ox + x]
                });
                let mut tape = Tape::inference();
                let xv = tape.leaf(patch, false);
                let out = net.forward(&mut tape, xv)?;
                let logits = tape.value(out.logits[0]).data();
                let wvol = wd * wh * ww;
                for ch in 0..c {
                    for z in 0..wd {
                        for y in 0..wh {
                            let dst = ch * plane + ((oz + z) * ph + oy + y) * pw + ox;
                            let src = ch * wvol + (z * wh + y) * ww;
                            for x in 0..ww {
                                acc[dst + x] += logits[src + x].as_f64();
                            }
                        }
                    }
                }
                for z in 0..wd {
                    for y in 0..wh {
                        let dst = ((oz + z) * ph + oy + y) * pw + ox;
                        for x in 0..ww {
                            count[dst + x] += 1;
                        }
                    }
                }
            }
        }
    }

    // crop back to the original grid
    let n = dims.iter().product::<usize>();
    let mut out = vec![0f64; c * n];
    for ch in 0..c {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let p = ((z + pad[0]) * ph + y + pad[1]) * pw + x + pad[2];
                    out[ch * n + (z * dims[1] + y) * dims[2] + x] = acc[ch * plane + p] / count[p] as f64;
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[c, dims[0], dims[1], dims[2]], out)?, padded))
}

/// Per-voxel argmax over channels of `[C, D, H, W]` logits (first max wins).
pub fn argmax_labels(logits: &Tensor<f64>) -> Vec<u16> {
    let c = logits.shape()[0];
    let n = logits.numel() / c;
    let d = logits.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * n + i] > d[best * n + i] {
                    best = ch;
                }
            }
            best as u16
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    /// Indexed by foreground class − 1.
    pub dice: Vec<f64>,
    pub nsd: Vec<f64>,
    /// Foreground classes absent from both prediction and ground truth.
    pub empty_classes: Vec<u16>,
    pub padded: bool,
}

/// DSC and NSD of every foreground class for one prediction.
pub fn score_case(
    case: &str,
    dims: [usize; 3],
    spacing: [f64; 3],
    pred: &[u16],
    gt: &[u16],
    num_classes: usize,
    tolerance_mm: f64,
) -> Result<CaseMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "{case}: {} predicted voxels vs {} labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut m = CaseMetrics {
        case: case.to_string(),
        dice: Vec::new(),
        nsd: Vec::new(),
        empty_classes: Vec::new(),
        padded: false,
    };
    for cls in 1..num_classes as u16 {
        if !pred.contains(&cls) && !gt.contains(&cls) {
            m.empty_classes.push(cls);
        }
        m.dice.push(dice_score(dims, pred, gt, cls)?);
        m.nsd.push(nsd_score(dims, spacing, pred, gt, cls, tolerance_mm)?);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub tolerance_mm: f64,
    pub window: [usize; 3],
    /// Per foreground class (class 1 first).
    pub mean_dice: Vec<f64>,
    pub mean_nsd: Vec<f64>,
    pub mean_foreground_dice: f64,
    pub mean_foreground_nsd: f64,
    pub cases: Vec<CaseMetrics>,
}

impl EvalReport {
    pub fn from_cases(split: Split, tolerance_mm: f64, window: [usize; 3], cases: Vec<CaseMetrics>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Data("no cases to report".into()));
        }
        let k = cases[0].dice.len();
        let n = cases.len() as f64;
        let mean = |f: &dyn Fn(&CaseMetrics) -> &Vec<f64>| -> Vec<f64> {
            (0..k).map(|j| cases.iter().map(|c| f(c)[j]).sum::<f64>() / n).collect()
        };
        let mean_dice = mean(&|c| &c.dice);
        let mean_nsd = mean(&|c| &c.nsd);
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        Ok(Self {
            split,
            tolerance_mm,
            window,
            mean_foreground_dice: avg(&mean_dice),
            mean_foreground_nsd: avg(&mean_nsd),
            mean_dice,
            mean_nsd,
            cases,
        })
    }
}

/// Full-volume evaluation of the first `max_cases` cases of `data`.
pub fn evaluate<E: Element>(
    net: &Network<E>,
    data: &Dataset,
    split: Split,
    window: [usize; 3],
    tolerance_mm: f64,
    max_cases: Option<usize>,
) -> Result<EvalReport> {
    let c = net.config().num_classes;
    let mut cases = Vec::new();
    for case in data.cases.iter().take(max_cases.unwrap_or(usize::MAX)) {
        let (logits, padded) = sliding_window_logits(net, &case.image, window)?;
        let pred = argmax_labels(&logits);
        let mut m = score_case(
            &case.name,
            case.label.dims,
            case.label.spacing,
            &pred,
            &case.label.data,
            c,
            tolerance_mm,
        )?;
        m.padded = padded;
        cases.push(m);
    }
    EvalReport::from_cases(split, tolerance_mm, window, cases)
}

/// Loads a checkpoint at its stored precision and evaluates it on `split`
/// of the configured dataset with the configured window and tolerance.
pub fn evaluate_checkpoint(
    config: &crate::train::TrainConfig,
    dir: &std::path::Path,
    split: Split,
) -> Result<crate::report::CheckpointEvaluation> {
    fn go<E: Element>(
        config: &crate::train::TrainConfig,
        dir: &std::path::Path,
        split: Split,
    ) -> Result<crate::report::CheckpointEvaluation> {
        let ck = crate::checkpoint::Checkpoint::<E>::load(dir)?;
        let manifest = crate::data::Manifest::load(&config.dataset)?;
        let data = Dataset::load(&manifest, split)?;
        let report = evaluate(
            &ck.network,
            &data,
            split,
            config.patch_size,
            config.nsd_tolerance_mm,
            None,
        )?;
        Ok(crate::report::CheckpointEvaluation {
            checkpoint: dir.to_path_buf(),
            params: ck.network.param_count(),
            report,
        })
    }
    let m = crate::checkpoint::read_manifest(dir)?;
    match m.dtype.as_str() {
        "f32" => go::<f32>(config, dir, split),
        "f64" => go::<f64>(config, dir, split),
        other => Err(Error::Checkpoint(format!("unknown dtype {other:?}"))),
    }
}
