//! Pluggable spatio-temporal feature extractor contract: given an
//! 8-frame RGB cuboid `[3, 8, 224, 224]`, produce a `[480, 14, 14]`
//! feature map. The reference implementation is a small 3D CNN with
//! frozen, seed-derived weights (forward only; stage-2 training never
//! differentiates through it). Temporal collapse happens inside the
//! extractor by average pooling at the tap layer.

use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::init;

pub const EXTRACTOR_OUT_CHANNELS: usize = 480;
pub const EXTRACTOR_OUT_SIZE: usize = 14;
pub const CUBOID_SIZE: usize = 224;
pub const CUBOID_DEPTH: usize = 8;

/// Input layout `[C=3, T=8, H=224, W=224]`.
pub type CuboidTensor = Array4<f64>;

pub trait SpatioTemporalExtractor: Send + Sync {
    /// `[3, 8, 224, 224]` -> `[480, 14, 14]`.
    fn extract(&self, cuboid: &CuboidTensor) -> Result<Array3<f64>>;
    /// Named weights for checkpoint embedding (empty for weightless stubs).
    fn weights(&self) -> Vec<(String, ArrayD<f64>)>;
    fn kind(&self) -> &'static str;
}

pub fn validate_cuboid_tensor(c: &CuboidTensor) -> Result<()> {
    if c.dim() != (3, CUBOID_DEPTH, CUBOID_SIZE, CUBOID_SIZE) {
        return Err(Error::shape(format!(
            "cuboid tensor has shape {:?}, expected (3, {CUBOID_DEPTH}, {CUBOID_SIZE}, {CUBOID_SIZE})",
            c.dim()
        )));
    }
    Ok(())
}

fn out_len(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

/// Direct 3D convolution via im2col + GEMM. `x: [Cin, T, H, W]`,
/// `w: [Cout, Cin, kt, kh, kw]`.
fn conv3d(x: &Array4<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>, stride: (usize, usize, usize), pad: (usize, usize, usize)) -> Array4<f64> {
    let (cin, t, h, wd) = x.dim();
    let ws = w.shape();
    let (cout, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    debug_assert_eq!(ws[1], cin);
    let ot = out_len(t, kt, stride.0, pad.0);
    let oh = out_len(h, kh, stride.1, pad.1);
    let ow = out_len(wd, kw, stride.2, pad.2);
    let k = cin * kt * kh * kw;
    let p = ot * oh * ow;
    let mut cols = Array2::<f64>::zeros((k, p));
    for c in 0..cin {
        for dt in 0..kt {
            for dy in 0..kh {
                for dx in 0..kw {
                    let row = ((c * kt + dt) * kh + dy) * kw + dx;
                    let mut r = cols.row_mut(row);
                    for oz in 0..ot {
                        let sz = (oz * stride.0 + dt) as isize - pad.0 as isize;
                        if sz < 0 || sz >= t as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let sy = (oy * stride.1 + dy) as isize - pad.1 as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let sx = (ox * stride.2 + dx) as isize - pad.2 as isize;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                r[(oz * oh + oy) * ow + ox] = x[[c, sz as usize, sy as usize, sx as usize]];
                            }
                        }
                    }
                }
            }
        }
    }
    let w2 = w.view().into_shape_with_order((cout, k)).unwrap().to_owned();
    let mut out2 = w2.dot(&cols);
    for (mut row, bias) in out2.rows_mut().into_iter().zip(b.iter()) {
        row += *bias;
    }
    let mut out = Array4::zeros((cout, ot, oh, ow));
    for co in 0..cout {
        for oz in 0..ot {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[[co, oz, oy, ox]] = out2[[co, (oz * oh + oy) * ow + ox]];
                }
            }
        }
    }
    out
}

fn relu4(mut x: Array4<f64>) -> Array4<f64> {
    x.mapv_inplace(|v| v.max(0.0));
    x
}

struct ConvSpec3d {
    w: ArrayD<f64>,
    b: ArrayD<f64>,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
}

/// Reference extractor: three strided 3D convolutions, temporal average
/// pooling, and a 1x1 projection to 480 channels.
pub struct Small3dExtractor {
    layers: Vec<ConvSpec3d>,
    proj_w: ArrayD<f64>,
    proj_b: ArrayD<f64>,
    seed: u64,
}

impl Small3dExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng, cout: usize, cin: usize, kt: usize, kh: usize, kw: usize, stride, pad| ConvSpec3d {
            w: init::he_normal(rng, &[cout, cin, kt, kh, kw], cin * kt * kh * kw),
            b: init::zeros(&[cout]),
            stride,
            pad,
        };
        let layers = vec![
            mk(&mut rng, 12, 3, 3, 5, 5, (1, 4, 4), (1, 2, 2)),
            mk(&mut rng, 24, 12, 3, 3, 3, (2, 2, 2), (1, 1, 1)),
            mk(&mut rng, 48, 24, 3, 3, 3, (2, 2, 2), (1, 1, 1)),
        ];
        let proj_w = init::he_normal(&mut rng, &[EXTRACTOR_OUT_CHANNELS, 48, 1, 1], 48);
        let proj_b = init::zeros(&[EXTRACTOR_OUT_CHANNELS]);
        Small3dExtractor { layers, proj_w, proj_b, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn from_weights(seed: u64, tensors: &[(String, ArrayD<f64>)]) -> Result<Self> {
        let mut ex = Small3dExtractor::new(seed);
        for (name, arr) in tensors {
            let slot: &mut ArrayD<f64> = match name.as_str() {
                "st.conv1.w" => &mut ex.layers[0].w,
                "st.conv1.b" => &mut ex.layers[0].b,
                "st.conv2.w" => &mut ex.layers[1].w,
                "st.conv2.b" => &mut ex.layers[1].b,
                "st.conv3.w" => &mut ex.layers[2].w,
                "st.conv3.b" => &mut ex.layers[2].b,
                "st.proj.w" => &mut ex.proj_w,
                "st.proj.b" => &mut ex.proj_b,
                other => {
                    return Err(Error::data(format!("unknown extractor tensor '{other}'")));
                }
            };
            if slot.shape() != arr.shape() {
                return Err(Error::data(format!(
                    "extractor tensor '{name}' shape {:?} != {:?}",
                    arr.shape(),
                    slot.shape()
                )));
            }
            *slot = arr.clone();
        }
        Ok(ex)
    }
}

impl SpatioTemporalExtractor for Small3dExtractor {
    fn extract(&self, cuboid: &CuboidTensor) -> Result<Array3<f64>> {
        validate_cuboid_tensor(cuboid)?;
        let mut x = cuboid.clone();
        for layer in &self.layers {
            x = relu4(conv3d(&x, &layer.w, &layer.b, layer.stride, layer.pad));
        }
        // temporal average pool at the tap layer
        let (c, t, h, w) = x.dim();
        let mut pooled = Array3::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for z in 0..t {
                        acc += x[[ch, z, y, xx]];
                    }
                    pooled[[ch, y, xx]] = acc / t as f64;
                }
            }
        }
        // 1x1 projection to the contract width
        let w2 = self
            .proj_w
            .view()
            .into_shape_with_order((EXTRACTOR_OUT_CHANNELS, 48))
            .unwrap()
            .to_owned();
        let flat = pooled.into_shape_with_order((48, h * w)).unwrap();
        let mut out2 = w2.dot(&flat);
        for (mut row, bias) in out2.rows_mut().into_iter().zip(self.proj_b.iter()) {
            row += *bias;
        }
        out2.mapv_inplace(|v| v.max(0.0));
        Ok(out2.into_shape_with_order((EXTRACTOR_OUT_CHANNELS, h, w)).unwrap())
    }

    fn weights(&self) -> Vec<(String, ArrayD<f64>)> {
        vec![
            ("st.conv1.w".to_string(), self.layers[0].w.clone()),
            ("st.conv1.b".to_string(), self.layers[0].b.clone()),
            ("st.conv2.w".to_string(), self.layers[1].w.clone()),
            ("st.conv2.b".to_string(), self.layers[1].b.clone()),
            ("st.conv3.w".to_string(), self.layers[2].w.clone()),
            ("st.conv3.b".to_string(), self.layers[2].b.clone()),
            ("st.proj.w".to_string(), self.proj_w.clone()),
            ("st.proj.b".to_string(), self.proj_b.clone()),
        ]
    }

    fn kind(&self) -> &'static str {
        "small3d"
    }
}

/// Weightless deterministic stub honoring the output contract; used to
/// property-test shape plumbing without 3D convolution cost.
pub struct StubExtractor;

impl SpatioTemporalExtractor for StubExtractor {
    fn extract(&self, cuboid: &CuboidTensor) -> Result<Array3<f64>> {
        validate_cuboid_tensor(cuboid)?;
        // spatially average-pool each (channel, frame) plane to 14x14,
        // then tile the 24 planes across the 480 output channels
        let bin = CUBOID_SIZE / EXTRACTOR_OUT_SIZE;
        let mut out = Array3::zeros((EXTRACTOR_OUT_CHANNELS, EXTRACTOR_OUT_SIZE, EXTRACTOR_OUT_SIZE));
        for oc in 0..EXTRACTOR_OUT_CHANNELS {
            let c = oc % 3;
            let t = (oc / 3) % CUBOID_DEPTH;
            for y in 0..EXTRACTOR_OUT_SIZE {
                for x in 0..EXTRACTOR_OUT_SIZE {
                    let mut acc = 0.0;
                    for dy in 0..bin {
                        for dx in 0..bin {
                            acc += cuboid[[c, t, y * bin + dy, x * bin + dx]];
                        }
                    }
                    out[[oc, y, x]] = acc / (bin * bin) as f64;
                }
            }
        }
        Ok(out)
    }

    fn weights(&self) -> Vec<(String, ArrayD<f64>)> {
        Vec::new()
    }

    fn kind(&self) -> &'static str {
        "stub"
    }
}

/// Build an extractor by config name.
pub fn make_extractor(kind: &str, seed: u64) -> Result<Box<dyn SpatioTemporalExtractor>> {
    match kind {
        "small3d" => Ok(Box::new(Small3dExtractor::new(seed))),
        "stub" => Ok(Box::new(StubExtractor)),
        other => Err(Error::config(format!(
            "unknown st_extractor '{other}' (expected 'small3d' or 'stub')"
        ))),
    }
}

/// Reconstruct an extractor from checkpoint-embedded weights.
pub fn extractor_from_checkpoint(
    kind: &str,
    seed: u64,
    tensors: &[(String, ArrayD<f64>)],
) -> Result<Box<dyn SpatioTemporalExtractor>> {
    match kind {
        "small3d" => {
            let st: Vec<(String, ArrayD<f64>)> = tensors
                .iter()
                .filter(|(n, _)| n.starts_with("st."))
                .cloned()
                .collect();
            Ok(Box::new(Small3dExtractor::from_weights(seed, &st)?))
        }
        "stub" => Ok(Box::new(StubExtractor)),
        other => Err(Error::config(format!("unknown st_extractor '{other}'"))),
    }
}

#[allow(unused)]
fn _axis_use(_a: Axis) {}

#[allow(unused)]
fn _ixdyn_use(_a: IxDyn) {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small3d_shape_contract_and_determinism() {
        let ex = Small3dExtractor::new(7);
        let cuboid = Array4::from_shape_fn((3, 8, 224, 224), |(c, t, y, x)| {
            ((c + 2 * t + 3 * y + 5 * x) % 17) as f64 / 17.0
        });
        let a = ex.extract(&cuboid).unwrap();
        assert_eq!(a.dim(), (480, 14, 14));
        let b = ex.extract(&cuboid).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_cuboid_finite_output() {
        let ex = Small3dExtractor::new(1);
        let out = ex.extract(&Array4::zeros((3, 8, 224, 224))).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_shape_rejected() {
        let ex = StubExtractor;
        assert!(ex.extract(&Array4::zeros((3, 8, 112, 112))).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let ex = Small3dExtractor::new(3);
        let w = ex.weights();
        let ex2 = Small3dExtractor::from_weights(3, &w).unwrap();
        let cuboid = Array4::from_shape_fn((3, 8, 224, 224), |(c, t, y, x)| {
            ((c * 7 + t * 3 + y + x) % 11) as f64 / 11.0
        });
        assert_eq!(ex.extract(&cuboid).unwrap(), ex2.extract(&cuboid).unwrap());
    }

    #[test]
    fn conv3d_matches_naive_small_case() {
        // tiny exhaustive cross-check of the im2col path
        let x = Array4::from_shape_fn((2, 3, 4, 4), |(c, t, y, xx)| (c + t + y + xx) as f64 * 0.1);
        let w = ArrayD::from_shape_fn(IxDyn(&[3, 2, 2, 2, 2]), |ix| {
            ((ix[0] + ix[1] + ix[2] + ix[3] + ix[4]) % 3) as f64 * 0.2 - 0.1
        });
        let b = ArrayD::from_shape_fn(IxDyn(&[3]), |ix| ix[0] as f64 * 0.05);
        let got = conv3d(&x, &w, &b, (1, 1, 1), (0, 0, 0));
        assert_eq!(got.dim(), (3, 2, 3, 3));
        for co in 0..3 {
            for oz in 0..2 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = b[[co]];
                        for ci in 0..2 {
                            for dt in 0..2 {
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        acc += w[[co, ci, dt, dy, dx]] * x[[ci, oz + dt, oy + dy, ox + dx]];
                                    }
                                }
                            }
                        }
                        approx::assert_abs_diff_eq!(got[[co, oz, oy, ox]], acc, epsilon = 1e-12);
                    }
                }
            }
        }
    }
}
