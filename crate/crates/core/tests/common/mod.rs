#![allow(dead_code)]

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use classfuse::nets::{BundleConfig, ModelBundle, OptimSettings, ParamStore, PerceptualNet, Precision};
use rand::Rng;

pub fn micro_bundle(n: usize, seed: u64, precision: Precision) -> ModelBundle {
    let cfg = BundleConfig {
        precision,
        ..BundleConfig::micro(n, seed)
    };
    ModelBundle::new(&cfg, &OptimSettings::default(), None).unwrap()
}

pub fn random_images<R: Rng>(rng: &mut R, (b, h, w): (usize, usize, usize), dtype: DType) -> Tensor {
    let data: Vec<f64> = (0..b * 3 * h * w).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(data, (b, 3, h, w), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

/// Every entry of a store, buffers included, as plain vectors.
pub fn store_values(store: &ParamStore) -> BTreeMap<String, Vec<f64>> {
    store.iter().map(|(n, e)| (n.clone(), to_vec(e.var.as_tensor()))).collect()
}

/// Raw bit patterns, for exact comparisons that also distinguish -0.0.
pub fn store_bits(store: &ParamStore) -> BTreeMap<String, Vec<u64>> {
    store_values(store)
        .into_iter()
        .map(|(n, v)| (n, v.into_iter().map(f64::to_bits).collect()))
        .collect()
}

/// Add `delta` to element `idx` of a flattened variable.
pub fn nudge(var: &Var, idx: usize, delta: f64) {
    let t = var.as_tensor();
    let mut v = to_vec(t);
    v[idx] += delta;
    let new = Tensor::from_vec(v, t.shape(), t.device()).unwrap().to_dtype(t.dtype()).unwrap();
    var.set(&new).unwrap();
}

/// Denominator floor of the gradient-check relative error. Gradients that
/// vanish identically (a conv bias feeding batch norm) come out as ~1e-17
/// analytically and ~1e-10 numerically; below the floor the comparison is
/// absolute.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Coordinates compared against the analytic gradient.
    pub checked: usize,
    /// Coordinates skipped because an activation kink lies inside the
    /// difference stencil.
    pub kinked: usize,
    pub max_rel_err: f64,
    /// Worst error on kinked coordinates against the `step / 100` stencil,
    /// over those where the `step / 10` and `step / 100` stencils agree.
    pub kinked_max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compare the autograd gradient of `loss` with central differences of
/// step `step` until `count` coordinates have been compared. Every tensor is
/// drawn at least once; further coordinates are uniform over all elements.
///
/// ReLU, PReLU and max-pool make the loss piecewise smooth. A coordinate
/// whose stencil straddles a kink is recognised by its central difference
/// disagreeing with those at `step / 10` or `step / 100` by more than
/// `tol`; it is counted in `kinked` and replaced by a fresh draw. A
/// wrong analytic gradient is still caught: on smooth coordinates the
/// stencils agree with each other and not with it, and on kinked ones the
/// two finer stencils are compared with it separately.
///
/// Panics after `50 * count` draws.
pub fn grad_check<R: Rng>(
    vars: &[(String, Var)],
    count: usize,
    step: f64,
    tol: f64,
    rng: &mut R,
    loss: impl Fn() -> Tensor,
) -> GradCheck {
    let grads = loss().backward().unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|(_, v)| {
            grads
                .get(v.as_tensor())
                .map(to_vec)
                .unwrap_or_else(|| vec![0.0; v.as_tensor().elem_count()])
        })
        .collect();
    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let central = |var: &Var, idx: usize, h: f64| {
        nudge(var, idx, h);
        let plus = scalar(&loss());
        nudge(var, idx, -2.0 * h);
        let minus = scalar(&loss());
        nudge(var, idx, h);
        (plus - minus) / (2.0 * h)
    };
    let mut out = GradCheck {
        checked: 0,
        kinked: 0,
        max_rel_err: 0.0,
        kinked_max_rel_err: 0.0,
        worst: None,
    };
    let mut attempt = 0;
    while out.checked < count {
        assert!(attempt < 50 * count, "kink screen rejected {} of {attempt} draws", out.kinked);
        let (i, idx) = if attempt < vars.len() {
            (attempt, rng.random_range(0..sizes[attempt]))
        } else {
            let mut flat = rng.random_range(0..total);
            let mut i = 0;
            while flat >= sizes[i] {
                flat -= sizes[i];
                i += 1;
            }
            (i, flat)
        };
        attempt += 1;
        let (name, var) = &vars[i];
        let numeric = central(var, idx, step);
        let fine = [central(var, idx, step / 10.0), central(var, idx, step / 100.0)];
        if fine.iter().any(|&f| rel_err(numeric, f) > tol) {
            out.kinked += 1;
            if rel_err(fine[0], fine[1]) <= tol {
                out.kinked_max_rel_err = out.kinked_max_rel_err.max(rel_err(analytic[i][idx], fine[1]));
            }
            continue;
        }
        let a = analytic[i][idx];
        let rel = rel_err(a, numeric);
        out.checked += 1;
        if rel >= out.max_rel_err {
            out.max_rel_err = rel;
            out.worst = Some((name.clone(), idx, a, numeric));
        }
    }
    out
}

pub fn trainable(store: &ParamStore) -> Vec<(String, Var)> {
    store.trainable().map(|(n, v)| (n.clone(), v.clone())).collect()
}

/// Six nested loops over (b, c, h, w) pairs.
pub fn ref_mse(a: &[f64], b: &[f64], dims: [usize; 4]) -> f64 {
    let [nb, nc, nh, nw] = dims;
    let mut acc = 0.0;
    for i in 0..nb {
        for c in 0..nc {
            let mut plane = 0.0;
            for y in 0..nh {
                for x in 0..nw {
                    let o = ((i * nc + c) * nh + y) * nw + x;
                    let d = a[o] - b[o];
                    plane += d * d;
                }
            }
            acc += plane / (nh * nw) as f64;
        }
    }
    acc / (nb * nc) as f64
}

const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

fn ref_conv3x3_relu(x: &[f64], (c, h, w): (usize, usize, usize), weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let co = bias.len();
    let mut out = vec![0.0; co * h * w];
    for o in 0..co {
        for y in 0..h {
            for xx in 0..w {
                let mut s = bias[o];
                for i in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            s += weight[((o * c + i) * 3 + ky) * 3 + kx] * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = s.max(0.0);
            }
        }
    }
    out
}

fn ref_pool2(x: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for i in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x[(i * h + 2 * y + dy) * w + 2 * xx + dx]);
                    }
                }
                out[(i * oh + y) * ow + xx] = m;
            }
        }
    }
    out
}

/// Loop implementation of the VGG-16 stem up to the configured tap, read off
/// the extractor's named tensors (`features.<index>.{weight,bias}`). A 2x2
/// max-pool sits wherever consecutive conv indices are three apart.
pub fn ref_vgg_features(pnet: &PerceptualNet, x: &[f64], dims: [usize; 4]) -> (Vec<f64>, [usize; 4]) {
    let tensors = pnet.named_tensors();
    let mut convs: Vec<(usize, Vec<f64>, Vec<f64>)> = tensors
        .keys()
        .filter_map(|k| k.strip_suffix(".weight"))
        .map(|p| {
            let idx: usize = p.trim_start_matches("features.").parse().unwrap();
            (idx, to_vec(&tensors[&format!("{p}.weight")]), to_vec(&tensors[&format!("{p}.bias")]))
        })
        .collect();
    convs.sort_by_key(|c| c.0);
    let [nb, _, h0, w0] = dims;
    let mut feats = Vec::new();
    let mut shape = (3, h0, w0);
    for b in 0..nb {
        let plane = 3 * h0 * w0;
        let mut y: Vec<f64> = x[b * plane..(b + 1) * plane]
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i / (h0 * w0);
                (v - MEAN[c]) / STD[c]
            })
            .collect();
        let mut s = (3, h0, w0);
        let mut prev: Option<usize> = None;
        for (idx, wgt, bias) in &convs {
            if prev.is_some_and(|p| idx - p == 3) {
                y = ref_pool2(&y, s);
                s = (s.0, s.1 / 2, s.2 / 2);
            }
            y = ref_conv3x3_relu(&y, s, wgt, bias);
            s = (bias.len(), s.1, s.2);
            prev = Some(*idx);
        }
        shape = s;
        feats.extend(y);
    }
    (feats, [nb, shape.0, shape.1, shape.2])
}
