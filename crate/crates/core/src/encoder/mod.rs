//! Shared-MLP point encoder with max pooling and an affine head.
//!
//! Every point passes through the same stack of `Linear -> ReLU` layers, the
//! per-channel maximum over points forms a pooled feature, and a final affine
//! map produces the `d`-dimensional global descriptor. Descriptors are not
//! length-normalized.
//!
//! Parameters live in one flat `f64` vector (per layer: row-major
//! `fan_in x fan_out` weights, then biases), which is also the layout of
//! gradients and optimizer moments.

mod io;

use std::hash::{Hash, Hasher};
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PointCloud, Sample};
use crate::seed;

pub use io::{load_params, save_params, PARAMS_MAGIC, PARAMS_VERSION};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("non-finite activation in layer {layer} of cloud {cloud}")]
    NonFiniteActivation { cloud: usize, layer: usize },
    #[error("backward called with a batch different from the cached forward pass")]
    StaleCache,
    #[error("upstream gradient has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("parameter file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("config mismatch: file has {found}, expected {expected}")]
    ConfigMismatch { found: String, expected: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub in_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub descriptor_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_dim: 3,
            hidden_dims: vec![32, 64],
            descriptor_dim: 64,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.in_dim != 3 {
            return Err(EncoderError::InvalidConfig("in_dim must be 3".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(EncoderError::InvalidConfig(
                "hidden_dims needs at least one layer, all widths >= 1".into(),
            ));
        }
        if self.descriptor_dim < 2 {
            return Err(EncoderError::InvalidConfig("descriptor_dim must be >= 2".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer, head last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.in_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.descriptor_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    /// True when parameters of `other` fit this architecture.
    pub fn same_shape(&self, other: &EncoderConfig) -> bool {
        self.in_dim == other.in_dim
            && self.hidden_dims == other.hidden_dims
            && self.descriptor_dim == other.descriptor_dim
            && self.activation == other.activation
    }
}

/// A `B x d` matrix of descriptors with the id of the sample behind each row.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBatch {
    pub descriptors: Array2<f64>,
    pub sample_ids: Vec<u64>,
}

impl DescriptorBatch {
    pub fn new(descriptors: Array2<f64>, sample_ids: Vec<u64>) -> Self {
        assert_eq!(descriptors.nrows(), sample_ids.len(), "one id per descriptor row");
        Self {
            descriptors,
            sample_ids,
        }
    }

    /// Rows carry ordinal ids `0..B`.
    pub fn anonymous(descriptors: Array2<f64>) -> Self {
        let ids = (0..descriptors.nrows() as u64).collect();
        Self::new(descriptors, ids)
    }

    pub fn len(&self) -> usize {
        self.descriptors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.descriptors.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.descriptors.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    layout: Vec<LayerSlot>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSlot {
    offset: usize,
    fan_in: usize,
    fan_out: usize,
}

fn layout(config: &EncoderConfig) -> Vec<LayerSlot> {
    let mut offset = 0;
    config
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let slot = LayerSlot {
                offset,
                fan_in,
                fan_out,
            };
            offset += fan_in * fan_out + fan_out;
            slot
        })
        .collect()
}

/// Frozen copy of the encoder from the previous incremental step.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot {
    params: Arc<EncoderParams>,
}

impl TeacherSnapshot {
    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn forward(&self, clouds: &[&PointCloud]) -> Result<Array2<f64>, EncoderError> {
        self.params.forward(clouds)
    }
}

/// What `backward` needs from a forward pass: per cloud, the pooled feature
/// and the point that won each pooled channel.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    clouds: Vec<PooledCloud>,
}

impl ForwardCache {
    /// Index of the point that won each pooled channel of cloud `i`.
    pub fn winners(&self, i: usize) -> &[usize] {
        &self.clouds[i].argmax
    }
}

#[derive(Debug, Clone)]
struct PooledCloud {
    pooled: Vec<f64>,
    argmax: Vec<usize>,
}

fn fingerprint(clouds: &[&PointCloud]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    clouds.len().hash(&mut h);
    for c in clouds {
        c.len().hash(&mut h);
        for p in c.points() {
            for v in p {
                v.to_bits().hash(&mut h);
            }
        }
    }
    h.finish()
}

impl EncoderParams {
    /// Uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init(config: &EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = seed::derived_rng(config.seed, "encoder-init", &[]);
        let mut values = Vec::with_capacity(config.param_count());
        for (fan_in, fan_out) in config.layer_shapes() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            config: config.clone(),
            layout: layout(config),
            values,
        })
    }

    pub fn from_flat(config: &EncoderConfig, values: Vec<f64>) -> Result<Self, EncoderError> {
        config.validate()?;
        if values.len() != config.param_count() {
            return Err(EncoderError::InvalidConfig(format!(
                "{} values for {} parameters",
                values.len(),
                config.param_count()
            )));
        }
        Ok(Self {
            config: config.clone(),
            layout: layout(config),
            values,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn snapshot(&self) -> TeacherSnapshot {
        TeacherSnapshot {
            params: Arc::new(self.clone()),
        }
    }

    /// `(weights, bias)` slices of layer `l`, head last.
    #[inline]
    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let LayerSlot {
            offset,
            fan_in,
            fan_out,
        } = self.layout[l];
        let split = offset + fan_in * fan_out;
        (&self.values[offset..split], &self.values[split..split + fan_out])
    }

    pub fn forward(&self, clouds: &[&PointCloud]) -> Result<Array2<f64>, EncoderError> {
        Ok(self.forward_cached(clouds)?.0)
    }

    pub fn encode(&self, samples: &[&Sample]) -> Result<DescriptorBatch, EncoderError> {
        let clouds: Vec<&PointCloud> = samples.iter().map(|s| s.cloud.as_ref()).collect();
        let descriptors = self.forward(&clouds)?;
        Ok(DescriptorBatch::new(
            descriptors,
            samples.iter().map(|s| s.sample_id).collect(),
        ))
    }

    pub fn forward_cached(
        &self,
        clouds: &[&PointCloud],
    ) -> Result<(Array2<f64>, ForwardCache), EncoderError> {
        let pooled: Vec<PooledCloud> = clouds
            .par_iter()
            .enumerate()
            .map(|(i, c)| self.pool_cloud(i, c))
            .collect::<Result<_, _>>()?;
        let d = self.config.descriptor_dim;
        let head = self.config.hidden_dims.len();
        let (w, b) = self.layer(head);
        let mut out = Array2::<f64>::zeros((clouds.len(), d));
        for (i, pc) in pooled.iter().enumerate() {
            let mut row = b.to_vec();
            affine_accumulate(&pc.pooled, w, &mut row);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EncoderError::NonFiniteActivation { cloud: i, layer: head });
            }
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
        Ok((
            out,
            ForwardCache {
                fingerprint: fingerprint(clouds),
                clouds: pooled,
            },
        ))
    }

    /// Runs the shared MLP over every point and max-pools the last hidden
    /// layer; ties go to the lowest point index.
    fn pool_cloud(&self, cloud_idx: usize, cloud: &PointCloud) -> Result<PooledCloud, EncoderError> {
        let hidden = &self.config.hidden_dims;
        let width = *hidden.last().unwrap();
        let mut pooled = vec![f64::NEG_INFINITY; width];
        let mut argmax = vec![0usize; width];
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        for (pi, p) in cloud.points().iter().enumerate() {
            buf_a.clear();
            buf_a.extend_from_slice(p);
            for l in 0..hidden.len() {
                let (w, b) = self.layer(l);
                buf_b.clear();
                buf_b.extend_from_slice(b);
                affine_accumulate(&buf_a, w, &mut buf_b);
                for v in buf_b.iter_mut() {
                    if !v.is_finite() {
                        return Err(EncoderError::NonFiniteActivation {
                            cloud: cloud_idx,
                            layer: l,
                        });
                    }
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
                std::mem::swap(&mut buf_a, &mut buf_b);
            }
            for (c, &v) in buf_a.iter().enumerate() {
                if v > pooled[c] {
                    pooled[c] = v;
                    argmax[c] = pi;
                }
            }
        }
        Ok(PooledCloud { pooled, argmax })
    }

    /// Pre-activations of every hidden layer for one point.
    fn point_trace(&self, p: &[f64; 3]) -> Vec<Vec<f64>> {
        let mut trace = Vec::with_capacity(self.config.hidden_dims.len());
        let mut input = p.to_vec();
        for l in 0..self.config.hidden_dims.len() {
            let (w, b) = self.layer(l);
            let mut z = b.to_vec();
            affine_accumulate(&input, w, &mut z);
            input = z.iter().map(|&v| if v <= 0.0 { 0.0 } else { v }).collect();
            trace.push(z);
        }
        trace
    }

    /// Gradient of a scalar loss with respect to the flat parameters, given
    /// its gradient with respect to the descriptors of `clouds`.
    ///
    /// Max pooling routes each channel's gradient to its winning point only,
    /// so the shared MLP is re-evaluated just for those points.
    pub fn backward(
        &self,
        clouds: &[&PointCloud],
        cache: &ForwardCache,
        upstream: &Array2<f64>,
    ) -> Result<Vec<f64>, EncoderError> {
        if cache.fingerprint != fingerprint(clouds) || cache.clouds.len() != clouds.len() {
            return Err(EncoderError::StaleCache);
        }
        let expected = (clouds.len(), self.config.descriptor_dim);
        if upstream.dim() != expected {
            return Err(EncoderError::ShapeMismatch {
                got: upstream.dim(),
                expected,
            });
        }
        let per_cloud: Vec<Vec<f64>> = (0..clouds.len())
            .into_par_iter()
            .map(|i| {
                let dv: Vec<f64> = upstream.row(i).to_vec();
                self.cloud_gradient(clouds[i], &cache.clouds[i], &dv)
            })
            .collect();
        // Fixed summation order keeps the result independent of threading.
        let mut grad = vec![0.0; self.values.len()];
        for g in &per_cloud {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(grad)
    }

    fn cloud_gradient(&self, cloud: &PointCloud, pc: &PooledCloud, dv: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.values.len()];
        if dv.iter().all(|&g| g == 0.0) {
            return grad;
        }
        let head = self.layout.len() - 1;
        let LayerSlot {
            offset: off,
            fan_in: fi,
            fan_out: fo,
        } = self.layout[head];
        let (w_head, _) = self.layer(head);

        // Head: v = g W + b.
        for i in 0..fi {
            let gi = pc.pooled[i];
            if gi != 0.0 {
                for j in 0..fo {
                    grad[off + i * fo + j] += gi * dv[j];
                }
            }
        }
        for j in 0..fo {
            grad[off + fi * fo + j] += dv[j];
        }
        let d_pooled: Vec<f64> = (0..fi)
            .map(|i| (0..fo).map(|j| w_head[i * fo + j] * dv[j]).sum())
            .collect();

        let mut winners: Vec<usize> = pc.argmax.clone();
        winners.sort_unstable();
        winners.dedup();
        for &pi in &winners {
            let point = &cloud.points()[pi];
            let trace = self.point_trace(point);
            let mut delta: Vec<f64> = (0..fi)
                .map(|c| if pc.argmax[c] == pi { d_pooled[c] } else { 0.0 })
                .collect();
            for l in (0..head).rev() {
                let LayerSlot {
                    offset: off,
                    fan_in: l_in,
                    fan_out: l_out,
                } = self.layout[l];
                for (d, z) in delta.iter_mut().zip(&trace[l]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
                let input: Vec<f64> = if l == 0 {
                    point.to_vec()
                } else {
                    trace[l - 1].iter().map(|&v| v.max(0.0)).collect()
                };
                for i in 0..l_in {
                    if input[i] != 0.0 {
                        for j in 0..l_out {
                            grad[off + i * l_out + j] += input[i] * delta[j];
                        }
                    }
                }
                for j in 0..l_out {
                    grad[off + l_in * l_out + j] += delta[j];
                }
                if l > 0 {
                    let (w, _) = self.layer(l);
                    delta = (0..l_in)
                        .map(|i| (0..l_out).map(|j| w[i * l_out + j] * delta[j]).sum())
                        .collect();
                }
            }
        }
        grad
    }
}

/// `out += input . W` for row-major `W` of shape `input.len() x out.len()`.
#[inline]
fn affine_accumulate(input: &[f64], w: &[f64], out: &mut [f64]) {
    let fo = out.len();
    for (i, &x) in input.iter().enumerate() {
        if x != 0.0 {
            let row = &w[i * fo..(i + 1) * fo];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += x * wv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        PointCloud::new(points).unwrap()
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = seed::rng(seed);
        cloud(
            (0..n)
                .map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0)))
                .collect(),
        )
    }

    #[test]
    fn parameter_count_by_layer() {
        let cfg = EncoderConfig {
            hidden_dims: vec![4],
            descriptor_dim: 2,
            ..EncoderConfig::default()
        };
        assert_eq!(cfg.param_count(), 26);
        let p = EncoderParams::init(&cfg).unwrap();
        assert_eq!(p.len(), 26);
        // Biases: indices 12..16 and 24..26.
        assert!(p.flat()[12..16].iter().all(|&b| b == 0.0));
        assert!(p.flat()[24..26].iter().all(|&b| b == 0.0));
        let bound = 1.0 / 3f64.sqrt();
        assert!(p.flat()[..12].iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = EncoderConfig::default();
        assert_eq!(EncoderParams::init(&cfg).unwrap(), EncoderParams::init(&cfg).unwrap());
        let other = EncoderConfig { seed: 1, ..cfg.clone() };
        assert_ne!(EncoderParams::init(&cfg).unwrap(), EncoderParams::init(&other).unwrap());
    }

    #[test]
    fn permutation_invariant() {
        let p = EncoderParams::init(&EncoderConfig::default()).unwrap();
        let c = random_cloud(1, 40);
        let mut rev = c.points().to_vec();
        rev.reverse();
        let r = cloud(rev);
        assert_eq!(p.forward(&[&c]).unwrap(), p.forward(&[&r]).unwrap());
    }

    #[test]
    fn zero_head_outputs_bias() {
        let cfg = EncoderConfig {
            hidden_dims: vec![5],
            descriptor_dim: 3,
            ..EncoderConfig::default()
        };
        let mut p = EncoderParams::init(&cfg).unwrap();
        let off = 3 * 5 + 5;
        for v in &mut p.flat_mut()[off..off + 15] {
            *v = 0.0;
        }
        p.flat_mut()[off + 15..].copy_from_slice(&[0.5, -1.0, 2.0]);
        let out = p.forward(&[&random_cloud(2, 10), &random_cloud(3, 12)]).unwrap();
        for row in out.rows() {
            assert_eq!(row.to_vec(), vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn repeated_point_count_does_not_matter() {
        let p = EncoderParams::init(&EncoderConfig::default()).unwrap();
        let a = cloud(vec![[0.3, -0.2, 0.7]; 8]);
        let b = cloud(vec![[0.3, -0.2, 0.7]; 16]);
        assert_eq!(p.forward(&[&a]).unwrap(), p.forward(&[&b]).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = EncoderParams::init(&EncoderConfig::default()).unwrap();
        let c = random_cloud(4, 20);
        let (_, cache) = p.forward_cached(&[&c]).unwrap();
        let g = p.backward(&[&c], &cache, &Array2::zeros((1, 64))).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let p = EncoderParams::init(&EncoderConfig::default()).unwrap();
        let (a, b) = (random_cloud(5, 10), random_cloud(6, 10));
        let (_, cache) = p.forward_cached(&[&a]).unwrap();
        let err = p.backward(&[&b], &cache, &Array2::ones((1, 64))).unwrap_err();
        assert!(matches!(err, EncoderError::StaleCache));
    }

    #[test]
    fn tied_duplicates_route_gradient_to_lowest_index() {
        // Two identical copies of every point: each channel's winner must be
        // the first copy, so its trace is evaluated once per winner index.
        let cfg = EncoderConfig {
            hidden_dims: vec![6],
            descriptor_dim: 2,
            ..EncoderConfig::default()
        };
        let p = EncoderParams::init(&cfg).unwrap();
        let base = random_cloud(7, 8).points().to_vec();
        let doubled: Vec<[f64; 3]> = base.iter().chain(base.iter()).copied().collect();
        let c = cloud(doubled);
        let (_, cache) = p.forward_cached(&[&c]).unwrap();
        assert!(cache.clouds[0].argmax.iter().all(|&i| i < 8));
        // The gradient equals that of the de-duplicated cloud.
        let single = cloud(base);
        let (_, cache_single) = p.forward_cached(&[&single]).unwrap();
        let up = Array2::from_shape_vec((1, 2), vec![1.0, -0.5]).unwrap();
        assert_eq!(
            p.backward(&[&c], &cache, &up).unwrap(),
            p.backward(&[&single], &cache_single, &up).unwrap()
        );
    }

    #[test]
    fn snapshot_is_isolated_from_student_updates() {
        let mut p = EncoderParams::init(&EncoderConfig::default()).unwrap();
        let snap = p.snapshot();
        let c = random_cloud(8, 12);
        assert_eq!(snap.forward(&[&c]).unwrap(), p.forward(&[&c]).unwrap());
        let before = snap.clone();
        for v in p.flat_mut() {
            *v += 0.1;
        }
        assert_eq!(snap, before);
        assert_ne!(snap.params(), &p);
        assert_eq!(p.snapshot().params(), &p);
    }
}
