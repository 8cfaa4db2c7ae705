//! Covariance cost volumes between query and support feature maps, their
//! reduction to query-side similarity maps, and the hard-example-aware
//! sampler that picks GP training points from the query features.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{DacmError, Result};
use crate::gp::GpTrainingSet;
use crate::kernels::{KernelHyperparams, KernelKind, PreparedKernel};

/// Default bias added to mask-positive cells before normalisation.
pub const DEFAULT_LAMBDA: f64 = 1.0;
/// Below this range the probability map degenerates to 0.5 everywhere.
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Level-tagged `c × h × w` feature grid, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    level: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(level: usize, channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(DacmError::dim(format!(
                "feature map {channels}x{height}x{width} got {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DacmError::Numerical("non-finite feature value".into()));
        }
        Ok(FeatureMap {
            level,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(level: usize, channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            level,
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    /// Feature vector at flat position `pos = i·w + j`.
    pub fn vector_at(&self, pos: usize) -> Vec<f64> {
        let hw = self.positions();
        (0..self.channels).map(|c| self.data[c * hw + pos]).collect()
    }

    /// Position-major unit vectors. Zero vectors stay zero.
    pub fn unit_vectors(&self) -> Vec<Vec<f64>> {
        let mut zeros = 0usize;
        let out = (0..self.positions())
            .map(|pos| {
                let mut v = self.vector_at(pos);
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    v.iter_mut().for_each(|x| *x /= n);
                } else {
                    zeros += 1;
                }
                v
            })
            .collect();
        if zeros > 0 {
            log::debug!(
                "level {}: {zeros} zero feature vectors left unnormalised",
                self.level
            );
        }
        out
    }

    fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

/// Binary `h × w` map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height * width != data.len() {
            return Err(DacmError::dim(format!(
                "mask {height}x{width} got {} cells",
                data.len()
            )));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Mask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.width + j] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbour resize; keeps the map binary.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            let si = (((i as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for j in 0..width {
                let sj = (((j as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                data.push(self.get(si, sj));
            }
        }
        Mask {
            height,
            width,
            data,
        }
    }
}

/// Real-valued `h × w` map.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2 {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Map2 {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return Err(DacmError::dim(format!(
                "map {height}x{width} got {} values",
                data.len()
            )));
        }
        Ok(Map2 {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Map2 {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }
}

/// Nonnegative `h_q × w_q × h_s × w_s` tensor, row-major with the query
/// position as the outer index.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    level: usize,
    dims: [usize; 4],
    data: Vec<f64>,
}

impl CostVolume {
    pub fn new(level: usize, dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(DacmError::dim(format!(
                "volume {dims:?} got {} values",
                data.len()
            )));
        }
        Ok(CostVolume { level, dims, data })
    }

    pub fn zeros(level: usize, dims: [usize; 4]) -> Self {
        CostVolume {
            level,
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn query_positions(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn support_positions(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, q: usize, s: usize) -> f64 {
        self.data[q * self.support_positions() + s]
    }

    /// Average-pools the query and support grids by integer factors
    /// (trailing cells that do not fill a whole window are dropped).
    pub fn avg_pool(&self, query_factor: usize, support_factor: usize) -> CostVolume {
        let [hq, wq, hs, ws] = self.dims;
        let (fq, fs) = (query_factor.max(1), support_factor.max(1));
        let dims = [hq / fq, wq / fq, hs / fs, ws / fs];
        let mut out = CostVolume::zeros(self.level, dims);
        let scale = 1.0 / (fq * fq * fs * fs) as f64;
        let s_in = hs * ws;
        let s_out = dims[2] * dims[3];
        for qi in 0..dims[0] * fq {
            for qj in 0..dims[1] * fq {
                let q_in = qi * wq + qj;
                let q_out = (qi / fq) * dims[1] + qj / fq;
                for si in 0..dims[2] * fs {
                    for sj in 0..dims[3] * fs {
                        let v = self.data[q_in * s_in + si * ws + sj];
                        out.data[q_out * s_out + (si / fs) * dims[3] + sj / fs] += v * scale;
                    }
                }
            }
        }
        out
    }
}

/// Every intermediate of one sampler pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub similarity: Map2,
    pub biased: Map2,
    pub probability: Map2,
    pub mask_sample: Mask,
    pub lambda: f64,
    pub epsilon: f64,
}

/// `C(i,j) = ReLU(k(F_q(i)/‖F_q(i)‖, F_s(j)/‖F_s(j)‖))`.
pub fn build_cost_volume(
    kind: KernelKind,
    params: &KernelHyperparams,
    query: &FeatureMap,
    support: &FeatureMap,
) -> Result<CostVolume> {
    if query.channels != support.channels {
        return Err(DacmError::dim(format!(
            "query has {} channels, support has {}",
            query.channels, support.channels
        )));
    }
    if query.level != support.level {
        return Err(DacmError::dim(format!(
            "query level {} vs support level {}",
            query.level, support.level
        )));
    }
    let kernel = PreparedKernel::new(kind, params, query.channels)?;
    let qv = query.unit_vectors();
    let sv = support.unit_vectors();
    let mut data = Vec::with_capacity(qv.len() * sv.len());
    for q in &qv {
        for s in &sv {
            data.push(kernel.eval(q, s).max(0.0));
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(DacmError::Numerical("non-finite cost volume".into()));
    }
    CostVolume::new(
        query.level,
        [query.height, query.width, support.height, support.width],
        data,
    )
}

/// `S(i) = Σ_j C(i,j)`.
pub fn reduce_similarity(volume: &CostVolume) -> Map2 {
    let s = volume.support_positions();
    let data = volume.data.chunks(s).map(|row| row.iter().sum()).collect();
    Map2 {
        height: volume.dims[0],
        width: volume.dims[1],
        data,
    }
}

/// `Ŝ = S + λ·M`.
pub fn biased_similarity(similarity: &Map2, mask: &Mask, lambda: f64) -> Result<Map2> {
    if similarity.height != mask.height || similarity.width != mask.width {
        return Err(DacmError::dim(format!(
            "similarity {}x{} vs mask {}x{}",
            similarity.height, similarity.width, mask.height, mask.width
        )));
    }
    if !(lambda >= 0.0) {
        return Err(DacmError::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let data = similarity
        .data
        .iter()
        .zip(&mask.data)
        .map(|(s, &m)| if m { s + lambda } else { *s })
        .collect();
    Ok(Map2 {
        height: similarity.height,
        width: similarity.width,
        data,
    })
}

/// Min-max normalisation of an already biased map; a range below `epsilon`
/// yields 0.5 everywhere.
pub fn min_max_probability(biased: &Map2, epsilon: f64) -> Map2 {
    let lo = biased.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = biased.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let data = if !(range >= epsilon) {
        vec![0.5; biased.data.len()]
    } else {
        biased
            .data
            .iter()
            .map(|v| ((v - lo) / range).clamp(0.0, 1.0))
            .collect()
    };
    Map2 {
        height: biased.height,
        width: biased.width,
        data,
    }
}

/// `p = minmax(S + λ·M)`.
pub fn sampling_probability(similarity: &Map2, mask: &Mask, lambda: f64, epsilon: f64) -> Result<Map2> {
    let biased = biased_similarity(similarity, mask, lambda)?;
    Ok(min_max_probability(&biased, epsilon))
}

/// Independent Bernoulli draws in row-major order.
pub fn draw_sample_mask<R: Rng + ?Sized>(probability: &Map2, rng: &mut R) -> Mask {
    let data = probability
        .data
        .iter()
        .map(|&p| rng.random::<f64>() < p)
        .collect();
    Mask {
        height: probability.height,
        width: probability.width,
        data,
    }
}

/// GP inputs are the unit-normalised query vectors at selected cells;
/// targets are `+1` inside the query mask and `-1` outside.
pub fn select_training_set(query: &FeatureMap, selected: &Mask, query_mask: &Mask) -> Result<GpTrainingSet> {
    for m in [selected, query_mask] {
        if m.height != query.height || m.width != query.width {
            return Err(DacmError::dim(format!(
                "mask {}x{} vs features {}x{}",
                m.height, m.width, query.height, query.width
            )));
        }
    }
    let picked: Vec<usize> = (0..query.positions()).filter(|&p| selected.data[p]).collect();
    if picked.is_empty() {
        return Err(DacmError::EmptySample);
    }
    let units = query.unit_vectors();
    let d = query.channels;
    let mut x = DMatrix::zeros(picked.len(), d);
    let mut y = DVector::zeros(picked.len());
    for (r, &p) in picked.iter().enumerate() {
        for c in 0..d {
            x[(r, c)] = units[p][c];
        }
        y[r] = if query_mask.data[p] { 1.0 } else { -1.0 };
    }
    GpTrainingSet::new(x, y)
}

/// Runs similarity reduction, biasing, normalisation and Bernoulli sampling.
pub fn run_sampler<R: Rng + ?Sized>(
    volume: &CostVolume,
    query_mask: &Mask,
    lambda: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<SamplerState> {
    let similarity = reduce_similarity(volume);
    let biased = biased_similarity(&similarity, query_mask, lambda)?;
    let probability = min_max_probability(&biased, epsilon);
    let mask_sample = draw_sample_mask(&probability, rng);
    Ok(SamplerState {
        similarity,
        biased,
        probability,
        mask_sample,
        lambda,
        epsilon,
    })
}

/// Builds the GP training set for one sampler pass, falling back to every
/// mask-positive cell (and then every cell) when the draw selected nothing.
pub fn training_set_with_fallback(
    query: &FeatureMap,
    state: &SamplerState,
    query_mask: &Mask,
) -> Result<GpTrainingSet> {
    match select_training_set(query, &state.mask_sample, query_mask) {
        Err(DacmError::EmptySample) => {
            if query_mask.count() > 0 {
                select_training_set(query, query_mask, query_mask)
            } else {
                let all = Mask::filled(query.height, query.width, true);
                select_training_set(query, &all, query_mask)
            }
        }
        other => other,
    }
}

impl FeatureMap {
    /// Elementwise product with a binary mask of matching resolution.
    pub fn masked(&self, mask: &Mask) -> Result<FeatureMap> {
        if mask.height != self.height || mask.width != self.width {
            return Err(DacmError::dim(format!(
                "mask {}x{} vs features {}x{}",
                mask.height, mask.width, self.height, self.width
            )));
        }
        let hw = self.positions();
        let mut out = self.clone();
        for c in 0..self.channels {
            for p in 0..hw {
                if !mask.data[p] {
                    out.data[c * hw + p] = 0.0;
                }
            }
        }
        Ok(out)
    }

    /// Elementwise mean of equally shaped maps.
    pub fn mean_of(maps: &[FeatureMap]) -> Result<FeatureMap> {
        let first = maps
            .first()
            .ok_or_else(|| DacmError::dim("cannot average zero feature maps"))?;
        if maps.iter().any(|m| !m.same_shape(first) || m.level != first.level) {
            return Err(DacmError::dim("feature maps differ in shape or level"));
        }
        if maps.len() == 1 {
            return Ok(first.clone());
        }
        let k = maps.len() as f64;
        let mut out = FeatureMap::zeros(first.level, first.channels, first.height, first.width);
        for m in maps {
            for (o, v) in out.data.iter_mut().zip(&m.data) {
                *o += v;
            }
        }
        out.data.iter_mut().for_each(|v| *v /= k);
        Ok(out)
    }
}
