//! Per-modality MLP encoders producing unit-norm embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{normalize_rows, normalize_rows_backward, Matrix};
use crate::synth_data::{Domain, Modality, RawSample};

/// Affine layer `y = x·W + b` with `W` stored `d_in x d_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(d_in, d_out),
            bias: vec![0.0; d_out],
        }
    }

    /// Weights uniform in `[-1/√d_in, 1/√d_in]`, zero bias.
    pub fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let data = (0..d_in * d_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Matrix::new(d_in, d_out, data).expect("consistent shape"),
            bias: vec![0.0; d_out],
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul(&self.weight)?;
        z.add_row_vector(&self.bias)?;
        Ok(z)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Matrix, dz: &Matrix, grad: &mut Dense) -> Result<Matrix> {
        grad.weight.add_assign(&x.t_matmul(dz)?)?;
        for (g, s) in grad.bias.iter_mut().zip(dz.col_sums()) {
            *g += s;
        }
        dz.matmul_t(&self.weight)
    }
}

/// Stack of dense layers with `tanh` between them and a linear last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations recorded during [`Mlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to every layer; `inputs[0]` is the network input.
    inputs: Vec<Matrix>,
}

impl Mlp {
    /// `dims = [d_in, h1, ..., d_out]`.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Parameter(format!("invalid layer dims {dims:?}")));
        }
        Ok(Self {
            layers: dims.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.d_in(), l.d_out()))
                .collect(),
        }
    }

    pub fn d_in(&self) -> usize {
        self.layers.first().map_or(0, Dense::d_in)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, Dense::d_out)
    }

    pub fn check_chain(&self) -> Result<()> {
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].d_out() != w[1].d_in() {
                return Err(Error::Structural(format!(
                    "layer {i} emits {} features but layer {} expects {}",
                    w[0].d_out(),
                    i + 1,
                    w[1].d_in()
                )));
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.d_out() {
                return Err(Error::Structural("bias length does not match layer width".into()));
            }
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        if x.cols() != self.d_in() {
            return Err(shape_err!("mlp expects width {}, got {}", self.d_in(), x.cols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            inputs.push(h);
            h = if i + 1 < self.layers.len() {
                z.map(f64::tanh)
            } else {
                z
            };
        }
        Ok((h, MlpCache { inputs }))
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    /// Backpropagates `d_out`, accumulating into `grad`; returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache, d_out: &Matrix, grad: &mut Mlp) -> Result<Matrix> {
        let mut dz = d_out.clone();
        for i in (0..self.layers.len()).rev() {
            let dx = self.layers[i].backward(&cache.inputs[i], &dz, &mut grad.layers[i])?;
            if i == 0 {
                return Ok(dx);
            }
            // inputs[i] = tanh(z_{i-1}), so dz_{i-1} = dx ⊙ (1 − inputs[i]²)
            let a = &cache.inputs[i];
            dz = dx;
            for (d, &t) in dz.data_mut().iter_mut().zip(a.data()) {
                *d *= 1.0 - t * t;
            }
        }
        Ok(dz)
    }
}

/// Image and text encoders of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub image: Mlp,
    pub text: Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub d_raw: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl EncoderDims {
    /// The default `d_raw → 2D → D` shape.
    pub fn new(d_raw: usize, embed: usize) -> Self {
        Self {
            d_raw,
            hidden: 2 * embed,
            embed,
        }
    }
}

impl EncoderParams {
    pub fn init(rng_seed: u64, dims: EncoderDims) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        Self::init_with(&mut rng, dims)
    }

    pub fn init_with(rng: &mut impl Rng, dims: EncoderDims) -> Result<Self> {
        let shape = [dims.d_raw, dims.hidden, dims.embed];
        Ok(Self {
            image: Mlp::init(&shape, rng)?,
            text: Mlp::init(&shape, rng)?,
        })
    }

    pub fn tower(&self, modality: Modality) -> &Mlp {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn tower_mut(&mut self, modality: Modality) -> &mut Mlp {
        match modality {
            Modality::Image => &mut self.image,
            Modality::Text => &mut self.text,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.image.d_out()
    }

    pub fn raw_dim(&self) -> usize {
        self.image.d_in()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            image: self.image.zeros_like(),
            text: self.text.zeros_like(),
        }
    }
}

/// Deep copy; the two sides share no storage afterwards.
pub fn clone_params(p: &EncoderParams) -> EncoderParams {
    p.clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Student,
    Teacher,
}

/// What a feature batch stands for in the adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureRole {
    SourceImage,
    SourceText,
    TargetImage,
    TargetText,
    PseudoTargetImage,
    PseudoTargetText,
}

impl FeatureRole {
    pub fn domain(self) -> Domain {
        match self {
            FeatureRole::SourceImage | FeatureRole::SourceText => Domain::Source,
            _ => Domain::Target,
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            FeatureRole::SourceImage | FeatureRole::TargetImage | FeatureRole::PseudoTargetImage => {
                Modality::Image
            }
            _ => Modality::Text,
        }
    }

    pub fn for_output(domain: Domain, modality: Modality, provenance: Provenance) -> Self {
        match (domain, modality, provenance) {
            (Domain::Source, Modality::Image, _) => FeatureRole::SourceImage,
            (Domain::Source, Modality::Text, _) => FeatureRole::SourceText,
            (Domain::Target, Modality::Image, Provenance::Student) => FeatureRole::TargetImage,
            (Domain::Target, Modality::Text, Provenance::Student) => FeatureRole::TargetText,
            (Domain::Target, Modality::Image, Provenance::Teacher) => FeatureRole::PseudoTargetImage,
            (Domain::Target, Modality::Text, Provenance::Teacher) => FeatureRole::PseudoTargetText,
        }
    }
}

/// A batch of unit-norm embeddings with their tags.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    features: Matrix,
    role: FeatureRole,
    provenance: Provenance,
}

pub const UNIT_NORM_TOL: f64 = 1e-9;

impl FeatureBatch {
    pub fn new(features: Matrix, role: FeatureRole, provenance: Provenance) -> Result<Self> {
        for (i, row) in features.row_iter().enumerate() {
            let n = crate::numerics::norm(row);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Domain(format!("feature row {i} has norm {n}, expected 1")));
            }
        }
        let pseudo = matches!(role, FeatureRole::PseudoTargetImage | FeatureRole::PseudoTargetText);
        if pseudo && provenance != Provenance::Teacher {
            return Err(Error::Usage(format!("{role:?} features must come from the teacher")));
        }
        Ok(Self {
            features,
            role,
            provenance,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn into_features(self) -> Matrix {
        self.features
    }

    pub fn role(&self) -> FeatureRole {
        self.role
    }

    pub fn domain(&self) -> Domain {
        self.role.domain()
    }

    pub fn modality(&self) -> Modality {
        self.role.modality()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Cached forward through one tower, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TowerCache {
    mlp: MlpCache,
    output: Matrix,
    norms: Vec<f64>,
}

impl TowerCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

/// Stacks the raw vectors of a single-modality batch.
pub fn stack_raw<S: RawSample>(batch: &[S]) -> Result<(Matrix, Option<Modality>, Option<Domain>)> {
    let Some(first) = batch.first() else {
        return Ok((Matrix::zeros(0, 0), None, None));
    };
    let modality = first.modality();
    let domain = first.domain();
    let width = first.raw().len();
    let mut data = Vec::with_capacity(batch.len() * width);
    for s in batch {
        if s.modality() != modality {
            return Err(Error::Usage("batch mixes image and text samples".into()));
        }
        if s.domain() != domain {
            return Err(Error::Usage("batch mixes source and target samples".into()));
        }
        if s.raw().len() != width {
            return Err(shape_err!("ragged raw vectors in batch"));
        }
        data.extend_from_slice(s.raw());
    }
    Ok((Matrix::new(batch.len(), width, data)?, Some(modality), Some(domain)))
}

/// Runs one tower on raw inputs, normalizing the output rows.
pub fn tower_forward(tower: &Mlp, x: &Matrix) -> Result<TowerCache> {
    let (h, mlp) = tower.forward_cached(x)?;
    let (output, norms) = normalize_rows(&h)?;
    Ok(TowerCache { mlp, output, norms })
}

/// Gradient of the loss w.r.t. tower parameters given `dL/d(output)`.
pub fn tower_backward(tower: &Mlp, cache: &TowerCache, d_out: &Matrix, grad: &mut Mlp) -> Result<()> {
    let dh = normalize_rows_backward(&cache.output, &cache.norms, d_out);
    tower.backward(&cache.mlp, &dh, grad)?;
    Ok(())
}

/// Encodes a single-modality batch into unit-norm features.
pub fn forward<S: RawSample>(
    params: &EncoderParams,
    batch: &[S],
    provenance: Provenance,
) -> Result<FeatureBatch> {
    let (x, modality, domain) = stack_raw(batch)?;
    let (Some(modality), Some(domain)) = (modality, domain) else {
        return Err(Error::Usage("cannot encode an empty batch".into()));
    };
    let cache = tower_forward(params.tower(modality), &x)?;
    FeatureBatch::new(
        cache.output,
        FeatureRole::for_output(domain, modality, provenance),
        provenance,
    )
}

/// Encodes raw rows with one tower; no tags.
pub fn encode_matrix(params: &EncoderParams, modality: Modality, x: &Matrix) -> Result<Matrix> {
    Ok(tower_forward(params.tower(modality), x)?.output)
}
