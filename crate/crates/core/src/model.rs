//! Class-conditioned cross-attention classifier.
//!
//! An image is cut into non-overlapping square patches; each patch is
//! linearly embedded into a token. A learned per-class prompt vector is
//! projected to a query, tokens are projected to keys, and a softmax over
//! `q·k / √d` gives the class attention grid. Two heads read from it:
//!
//! * the aligner head maps each attention cell to `σ(γ·N·a + β)` in `[0, 1]`,
//!   where `N` is the token count, so uniform attention sits at `σ(γ + β)`;
//! * the classifier head is a shared affine on the attention-pooled tokens.
//!
//! Forward passes return a [`ForwardTrace`] which [`backward`] consumes to
//! produce exact parameter gradients.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{dot, matmul, matmul_tn, sigmoid, softmax_row, softmax_row_backward, Grid};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 16,
            num_classes: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.embed_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// All learnable weights. The same struct doubles as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `patch_len × embed_dim`
    pub patch_proj: Grid,
    /// `1 × embed_dim`
    pub patch_bias: Grid,
    /// `num_classes × embed_dim`, one prompt vector per class
    pub class_embed: Grid,
    pub q_proj: Grid,
    pub k_proj: Grid,
    /// `1 × 2`: `[γ, β]`
    pub aligner: Grid,
    /// `1 × embed_dim`
    pub cls_weight: Grid,
    /// `1 × 1`
    pub cls_bias: Grid,
}

pub const FIELD_NAMES: [&str; 8] = [
    "patch_proj",
    "patch_bias",
    "class_embed",
    "q_proj",
    "k_proj",
    "aligner",
    "cls_weight",
    "cls_bias",
];

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        Ok(Self {
            config,
            patch_proj: Grid::zeros(config.patch_len(), d),
            patch_bias: Grid::zeros(1, d),
            class_embed: Grid::zeros(config.num_classes, d),
            q_proj: Grid::zeros(d, d),
            k_proj: Grid::zeros(d, d),
            aligner: Grid::zeros(1, 2),
            cls_weight: Grid::zeros(1, d),
            cls_bias: Grid::zeros(1, 1),
        })
    }

    /// Seeded init: weights `U(−1/√fan_in, 1/√fan_in)`, biases zero,
    /// aligner `γ = 1, β = 0`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim as f64;
        let fill = |g: &mut Grid, fan_in: f64, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / fan_in.sqrt();
            for v in g.as_mut_slice() {
                *v = rng.random_range(-bound..bound);
            }
        };
        fill(&mut p.patch_proj, config.patch_len() as f64, &mut rng);
        fill(&mut p.class_embed, d, &mut rng);
        fill(&mut p.q_proj, d, &mut rng);
        fill(&mut p.k_proj, d, &mut rng);
        fill(&mut p.cls_weight, d, &mut rng);
        p.aligner.as_mut_slice().copy_from_slice(&[1.0, 0.0]);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, g) in z.fields_mut() {
            g.fill(0.0);
        }
        z
    }

    pub fn fields(&self) -> [(&'static str, &Grid); 8] {
        [
            (FIELD_NAMES[0], &self.patch_proj),
            (FIELD_NAMES[1], &self.patch_bias),
            (FIELD_NAMES[2], &self.class_embed),
            (FIELD_NAMES[3], &self.q_proj),
            (FIELD_NAMES[4], &self.k_proj),
            (FIELD_NAMES[5], &self.aligner),
            (FIELD_NAMES[6], &self.cls_weight),
            (FIELD_NAMES[7], &self.cls_bias),
        ]
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut Grid); 8] {
        [
            (FIELD_NAMES[0], &mut self.patch_proj),
            (FIELD_NAMES[1], &mut self.patch_bias),
            (FIELD_NAMES[2], &mut self.class_embed),
            (FIELD_NAMES[3], &mut self.q_proj),
            (FIELD_NAMES[4], &mut self.k_proj),
            (FIELD_NAMES[5], &mut self.aligner),
            (FIELD_NAMES[6], &mut self.cls_weight),
            (FIELD_NAMES[7], &mut self.cls_bias),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.fields().iter().map(|(_, g)| g.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, g) in self.fields() {
            out.extend_from_slice(g.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for (_, g) in self.fields_mut() {
            let n = g.len();
            g.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// `self += scale * other`, field by field.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) -> Result<()> {
        for ((_, a), (_, b)) in self.fields_mut().into_iter().zip(other.fields()) {
            a.add_scaled(b, scale)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|(_, g)| g.is_finite())
    }
}

/// Outputs of one class head.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class_id: usize,
    /// Softmax attention over patches, `grid_side × grid_side`.
    pub raw_attention: Grid,
    /// Aligner output in `[0, 1]`, same shape as `raw_attention`.
    pub aligned_map: Grid,
    pub logit: f64,
    pub prob: f64,
}

/// Per-image activations shared by all class heads.
#[derive(Clone, Debug)]
struct Encoded {
    patches: Grid,
    tokens: Grid,
}

#[derive(Clone, Debug)]
struct ClassTrace {
    class_id: usize,
    query: Vec<f64>,
    /// `k_proj · query`, so that score_j = tokens_j · projected
    projected: Vec<f64>,
    attention: Vec<f64>,
    aligned: Vec<f64>,
    pooled: Vec<f64>,
}

/// Saved activations needed by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    config: ModelConfig,
    encoded: Encoded,
    classes: Vec<ClassTrace>,
}

/// Upstream gradient for one class head.
#[derive(Clone, Debug)]
pub struct ClassUpstream {
    pub class_id: usize,
    /// `∂L/∂aligned_map`, absent when no alignment loss applies.
    pub d_aligned: Option<Grid>,
    pub d_logit: f64,
}

fn extract_patches(config: &ModelConfig, image: &Grid) -> Result<Grid> {
    let s = config.image_size;
    if image.shape() != (s, s) {
        return Err(Error::dimension("image", image.shape(), (s, s)));
    }
    let (ps, side) = (config.patch_size, config.grid_side());
    let mut out = Grid::zeros(config.num_tokens(), config.patch_len());
    for pr in 0..side {
        for pc in 0..side {
            let row = out.row_mut(pr * side + pc);
            for r in 0..ps {
                for c in 0..ps {
                    row[r * ps + c] = image.get(pr * ps + r, pc * ps + c);
                }
            }
        }
    }
    Ok(out)
}

fn encode(params: &ModelParams, image: &Grid) -> Result<Encoded> {
    let patches = extract_patches(&params.config, image)?;
    let mut tokens = matmul(&patches, &params.patch_proj)?;
    let bias = params.patch_bias.as_slice();
    for r in 0..tokens.rows() {
        for (t, b) in tokens.row_mut(r).iter_mut().zip(bias) {
            *t += b;
        }
    }
    Ok(Encoded { patches, tokens })
}

fn attend(params: &ModelParams, enc: &Encoded, class_id: usize) -> Result<(Prediction, ClassTrace)> {
    let cfg = &params.config;
    if class_id >= cfg.num_classes {
        return Err(Error::Dimension(format!(
            "class {class_id} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let d = cfg.embed_dim;
    let n = cfg.num_tokens();
    let embed = params.class_embed.row(class_id);
    let mut query = vec![0.0; d];
    for (i, &e) in embed.iter().enumerate() {
        for (q, w) in query.iter_mut().zip(params.q_proj.row(i)) {
            *q += e * w;
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    // (tokens_j · k_proj) · query == tokens_j · (k_proj · query)
    let projected: Vec<f64> = (0..d).map(|a| dot(params.k_proj.row(a), &query)).collect();
    let scores: Vec<f64> = (0..n).map(|j| dot(&projected, enc.tokens.row(j)) * scale).collect();
    let attention = softmax_row(&scores)?;

    let (gamma, beta) = (params.aligner.as_slice()[0], params.aligner.as_slice()[1]);
    let aligned: Vec<f64> = attention
        .iter()
        .map(|&a| sigmoid(gamma * n as f64 * a + beta))
        .collect();

    let mut pooled = vec![0.0; d];
    for (j, &a) in attention.iter().enumerate() {
        for (p, t) in pooled.iter_mut().zip(enc.tokens.row(j)) {
            *p += a * t;
        }
    }
    let logit = dot(&pooled, params.cls_weight.as_slice()) + params.cls_bias.as_slice()[0];

    let side = cfg.grid_side();
    let pred = Prediction {
        class_id,
        raw_attention: Grid::from_vec(side, side, attention.clone())?,
        aligned_map: Grid::from_vec(side, side, aligned.clone())?,
        logit,
        prob: sigmoid(logit),
    };
    let trace = ClassTrace {
        class_id,
        query,
        projected,
        attention,
        aligned,
        pooled,
    };
    Ok((pred, trace))
}

/// Single-class forward pass.
pub fn forward(params: &ModelParams, image: &Grid, class_id: usize) -> Result<Prediction> {
    let enc = encode(params, image)?;
    Ok(attend(params, &enc, class_id)?.0)
}

/// Forward pass for every class, sharing the patch encoding.
pub fn forward_all(params: &ModelParams, image: &Grid) -> Result<Vec<Prediction>> {
    let classes: Vec<usize> = (0..params.config.num_classes).collect();
    Ok(forward_traced(params, image, &classes)?.0)
}

/// Forward pass for the given classes, keeping what [`backward`] needs.
pub fn forward_traced(
    params: &ModelParams,
    image: &Grid,
    classes: &[usize],
) -> Result<(Vec<Prediction>, ForwardTrace)> {
    let encoded = encode(params, image)?;
    let mut preds = Vec::with_capacity(classes.len());
    let mut traces = Vec::with_capacity(classes.len());
    for &c in classes {
        let (p, t) = attend(params, &encoded, c)?;
        preds.push(p);
        traces.push(t);
    }
    Ok((
        preds,
        ForwardTrace {
            config: params.config,
            encoded,
            classes: traces,
        },
    ))
}

/// Exact parameter gradients given upstream gradients on each class head's
/// aligned map and logit.
pub fn backward(params: &ModelParams, trace: &ForwardTrace, upstream: &[ClassUpstream]) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    backward_into(params, trace, upstream, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into `grads`.
pub fn backward_into(
    params: &ModelParams,
    trace: &ForwardTrace,
    upstream: &[ClassUpstream],
    grads: &mut ModelParams,
) -> Result<()> {
    let cfg = params.config;
    if trace.config != cfg || grads.config != cfg {
        return Err(Error::Usage("forward trace was produced under a different model config".into()));
    }
    let d = cfg.embed_dim;
    let n = cfg.num_tokens();
    let nf = n as f64;
    let scale = 1.0 / (d as f64).sqrt();
    let enc = &trace.encoded;
    let (gamma, _) = (params.aligner.as_slice()[0], params.aligner.as_slice()[1]);

    let mut d_tokens = Grid::zeros(n, d);
    let mut touched = false;

    for up in upstream {
        let ct = trace
            .classes
            .iter()
            .find(|t| t.class_id == up.class_id)
            .ok_or_else(|| {
                Error::Usage(format!("no forward state for class {} in this trace", up.class_id))
            })?;

        let mut d_attn = vec![0.0; n];

        // classifier head
        if up.d_logit != 0.0 {
            touched = true;
            let dz = up.d_logit;
            let w = params.cls_weight.as_slice();
            for (g, &h) in grads.cls_weight.as_mut_slice().iter_mut().zip(&ct.pooled) {
                *g += dz * h;
            }
            grads.cls_bias.as_mut_slice()[0] += dz;
            for j in 0..n {
                let tok = enc.tokens.row(j);
                d_attn[j] += dz * dot(w, tok);
                let a = ct.attention[j];
                for (dt, &wk) in d_tokens.row_mut(j).iter_mut().zip(w) {
                    *dt += a * dz * wk;
                }
            }
        }

        // aligner head
        if let Some(g) = &up.d_aligned {
            if g.shape() != (cfg.grid_side(), cfg.grid_side()) {
                return Err(Error::dimension(
                    "aligned-map upstream",
                    g.shape(),
                    (cfg.grid_side(), cfg.grid_side()),
                ));
            }
            touched = true;
            let (mut d_gamma, mut d_beta) = (0.0, 0.0);
            for (i, &gi) in g.as_slice().iter().enumerate() {
                let p = ct.aligned[i];
                let du = gi * p * (1.0 - p);
                d_gamma += du * nf * ct.attention[i];
                d_beta += du;
                d_attn[i] += du * gamma * nf;
            }
            let al = grads.aligner.as_mut_slice();
            al[0] += d_gamma;
            al[1] += d_beta;
        }

        // softmax -> scores -> tokens / projected query
        let d_scores = softmax_row_backward(&ct.attention, &d_attn);
        let mut d_projected = vec![0.0; d];
        for (j, &ds) in d_scores.iter().enumerate() {
            if ds == 0.0 {
                continue;
            }
            let s = ds * scale;
            for (dp, &t) in d_projected.iter_mut().zip(enc.tokens.row(j)) {
                *dp += s * t;
            }
            for (dt, &u) in d_tokens.row_mut(j).iter_mut().zip(&ct.projected) {
                *dt += s * u;
            }
        }

        // projected = k_proj · query
        let mut d_query = vec![0.0; d];
        for (a, &dp) in d_projected.iter().enumerate() {
            for (g, &q) in grads.k_proj.row_mut(a).iter_mut().zip(&ct.query) {
                *g += dp * q;
            }
            for (dq, &w) in d_query.iter_mut().zip(params.k_proj.row(a)) {
                *dq += dp * w;
            }
        }

        // query = embed · q_proj
        let embed = params.class_embed.row(ct.class_id);
        for (i, &e) in embed.iter().enumerate() {
            for (g, &dq) in grads.q_proj.row_mut(i).iter_mut().zip(&d_query) {
                *g += e * dq;
            }
        }
        let d_embed: Vec<f64> = (0..d).map(|i| dot(params.q_proj.row(i), &d_query)).collect();
        for (g, de) in grads.class_embed.row_mut(ct.class_id).iter_mut().zip(d_embed) {
            *g += de;
        }
    }

    if !touched {
        return Ok(());
    }

    // tokens = patches · patch_proj + bias
    grads.patch_proj.add_scaled(&matmul_tn(&enc.patches, &d_tokens)?, 1.0)?;
    let db = grads.patch_bias.as_mut_slice();
    for r in 0..n {
        for (b, v) in db.iter_mut().zip(d_tokens.row(r)) {
            *b += v;
        }
    }
    Ok(())
}

const CHECKPOINT_FORMAT: &str = "egl-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointField {
    name: String,
    rows: usize,
    cols: usize,
    /// byte offset from the start of the payload
    offset: usize,
    /// number of f64 values
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    fields: Vec<CheckpointField>,
}

/// Serializes parameters as one line of JSON header followed by the raw
/// little-endian `f64` payload.
pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let mut fields = Vec::new();
    let mut offset = 0;
    for (name, g) in params.fields() {
        fields.push(CheckpointField {
            name: name.to_string(),
            rows: g.rows(),
            cols: g.cols(),
            offset,
            len: g.len(),
        });
        offset += g.len() * 8;
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: params.config,
        fields,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for v in params.to_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(0, "checkpoint header is not newline-terminated"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(e.column() as u64, format!("checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::format(0, format!("unknown checkpoint format {:?}", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let payload = &bytes[nl + 1..];
    let mut params = ModelParams::zeros(header.config).map_err(|e| Error::format(0, e.to_string()))?;
    let base = (nl + 1) as u64;
    for (name, grid) in params.fields_mut() {
        let f = header
            .fields
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::format(0, format!("checkpoint lacks field {name}")))?;
        if (f.rows, f.cols) != grid.shape() || f.len != grid.len() {
            return Err(Error::format(
                base + f.offset as u64,
                format!("field {name} has shape {}x{}, expected {}x{}", f.rows, f.cols, grid.rows(), grid.cols()),
            ));
        }
        let end = f.offset + f.len * 8;
        if end > payload.len() {
            return Err(Error::format(
                base + payload.len() as u64,
                format!("payload truncated inside field {name}"),
            ));
        }
        for (v, chunk) in grid
            .as_mut_slice()
            .iter_mut()
            .zip(payload[f.offset..end].chunks_exact(8))
        {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 2,
            embed_dim: 4,
            num_classes: 3,
        }
    }

    fn image(cfg: &ModelConfig, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        Grid::from_vec(s, s, (0..s * s).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(cfg, 7).unwrap();
        let b = ModelParams::init(cfg, 7).unwrap();
        assert_eq!(
            a.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let c = ModelParams::init(cfg, 8).unwrap();
        assert_ne!(a.to_flat(), c.to_flat());
        assert_eq!(a.patch_proj.shape(), (16, 16));
        assert_eq!(a.aligner.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn init_rejects_bad_patch_size() {
        let cfg = ModelConfig {
            patch_size: 5,
            ..Default::default()
        };
        assert!(matches!(ModelParams::init(cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn attention_normalized_and_aligned_in_unit_interval() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(cfg, 3).unwrap();
        for seed in 0..5 {
            let img = image(&cfg, seed);
            for pred in forward_all(&p, &img).unwrap() {
                assert!((pred.raw_attention.sum() - 1.0).abs() <= 1e-9);
                assert!(pred.raw_attention.as_slice().iter().all(|&a| a >= 0.0));
                assert!(pred.aligned_map.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert_eq!(pred.prob, sigmoid(pred.logit));
            }
        }
    }

    #[test]
    fn uniform_attention_with_zero_query_projection() {
        let cfg = ModelConfig::default();
        let mut p = ModelParams::init(cfg, 3).unwrap();
        p.q_proj.fill(0.0);
        let img = Grid::filled(32, 32, 0.4);
        let pred = forward(&p, &img, 1).unwrap();
        for &a in pred.raw_attention.as_slice() {
            assert!((a - 1.0 / 64.0).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small();
        let p = ModelParams::init(cfg, 1).unwrap();
        let img = image(&cfg, 2);
        assert_eq!(forward(&p, &img, 2).unwrap(), forward(&p, &img, 2).unwrap());
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let cfg = small();
        let p = ModelParams::init(cfg, 1).unwrap();
        assert!(matches!(forward(&p, &Grid::zeros(4, 4), 0), Err(Error::Dimension(_))));
        assert!(matches!(forward(&p, &image(&cfg, 0), 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = small();
        let p = ModelParams::init(cfg, 1).unwrap();
        let (_, trace) = forward_traced(&p, &image(&cfg, 4), &[0, 1, 2]).unwrap();
        let up: Vec<_> = (0..3)
            .map(|c| ClassUpstream {
                class_id: c,
                d_aligned: Some(Grid::zeros(4, 4)),
                d_logit: 0.0,
            })
            .collect();
        let g = backward(&p, &trace, &up).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_embed_gradient_is_per_class() {
        let cfg = small();
        let p = ModelParams::init(cfg, 1).unwrap();
        let (_, trace) = forward_traced(&p, &image(&cfg, 4), &[0, 1, 2]).unwrap();
        let up = [ClassUpstream {
            class_id: 1,
            d_aligned: Some(Grid::filled(4, 4, 0.3)),
            d_logit: -0.7,
        }];
        let g = backward(&p, &trace, &up).unwrap();
        assert!(g.class_embed.row(0).iter().all(|&v| v == 0.0));
        assert!(g.class_embed.row(2).iter().all(|&v| v == 0.0));
        assert!(g.class_embed.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_rejects_foreign_state() {
        let cfg = small();
        let p = ModelParams::init(cfg, 1).unwrap();
        let (_, trace) = forward_traced(&p, &image(&cfg, 4), &[0]).unwrap();
        let up = [ClassUpstream {
            class_id: 2,
            d_aligned: None,
            d_logit: 1.0,
        }];
        assert!(matches!(backward(&p, &trace, &up), Err(Error::Usage(_))));
        let other = ModelParams::init(ModelConfig::default(), 1).unwrap();
        assert!(matches!(backward(&other, &trace, &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn permuting_class_order_permutes_outputs() {
        let cfg = small();
        let p = ModelParams::init(cfg, 9).unwrap();
        let img = image(&cfg, 1);
        let (fwd, _) = forward_traced(&p, &img, &[0, 1, 2]).unwrap();
        let (rev, _) = forward_traced(&p, &img, &[2, 1, 0]).unwrap();
        for (a, b) in fwd.iter().zip(rev.iter().rev()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let p = ModelParams::init(ModelConfig::default(), 5).unwrap();
        let bytes = checkpoint_bytes(&p);
        assert_eq!(checkpoint_from_bytes(&bytes).unwrap(), p);
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(checkpoint_from_bytes(truncated), Err(Error::Format { .. })));
        let text = String::from_utf8_lossy(&bytes).replacen("\"version\":1", "\"version\":2", 1);
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let mut bumped = text.as_bytes()[..nl].to_vec();
        bumped.extend_from_slice(&bytes[nl..]);
        assert!(matches!(
            checkpoint_from_bytes(&bumped),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }
}
