//! The attribute-controllable denoiser.
//!
//! Data flow for one sequence of `S` frames and `N` glosses:
//!
//! ```text
//! fused S×(J·7) ─ self_embed (+PE(s) +TE(t)) ─ condition_integrate ⟵ gloss N×d
//!   ─ attribute_separate ─┬ d_c S×(J·3) ─ lift ─ coordinate self-attention ─ d*_c ─┐
//!                         └ d_a S×(J·4) ─ lift ───────────────────── attribute_control
//!   ─ project_pose ─ S×(J·3)
//! ```
//!
//! Every block works on one token per frame. Graph-level functions take a
//! [`Graph`] and the model's [`Bound`] parameters so the same code serves
//! training (differentiable leaves) and inference (constant leaves).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{checkpoint, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::skeleton::SkeletonTopology;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlossSequence {
    pub tokens: Vec<usize>,
}

impl GlossSequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Encoder output, one `d_model` row per gloss.
#[derive(Debug, Clone, PartialEq)]
pub struct GlossEmbedding {
    pub matrix: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcdConfig {
    pub d_model: usize,
    pub heads: usize,
    pub gloss_layers: usize,
    /// Hidden width multiplier of the gloss encoder's feed-forward sublayers.
    pub ffn_mult: usize,
    /// Hidden width of the output MLP.
    pub head_hidden: usize,
    /// Residual connection around each denoiser attention block.
    pub residual: bool,
    /// Pre-norm feed-forward sublayer after each denoiser attention block.
    pub feed_forward: bool,
}

impl Default for AcdConfig {
    /// Desk-scale defaults: 2 encoder layers, 4 heads, width 64.
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            gloss_layers: 2,
            ffn_mult: 2,
            head_hidden: 64,
            residual: true,
            feed_forward: false,
        }
    }
}

impl AcdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::InvalidArgument("d_model must be even".into()));
        }
        if self.ffn_mult == 0 || self.head_hidden == 0 {
            return Err(Error::InvalidArgument(
                "hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gain: ParamId,
    shift: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct MhaIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FeedForwardIds {
    norm: NormIds,
    up: LinearIds,
    down: LinearIds,
}

#[derive(Debug, Clone)]
struct EncoderLayerIds {
    attn_norm: NormIds,
    attn: MhaIds,
    ff: FeedForwardIds,
}

#[derive(Debug, Clone)]
struct Layers {
    token_embedding: ParamId,
    encoder: Vec<EncoderLayerIds>,
    encoder_norm: NormIds,
    self_embed: LinearIds,
    time_embed: LinearIds,
    cond_norm: NormIds,
    cond_attn: MhaIds,
    cond_ff: Option<FeedForwardIds>,
    separate: LinearIds,
    coord_lift: LinearIds,
    coord_norm: NormIds,
    coord_attn: MhaIds,
    coord_ff: Option<FeedForwardIds>,
    attr_lift: LinearIds,
    control_norm: NormIds,
    control_attn: MhaIds,
    control_ff: Option<FeedForwardIds>,
    head_norm: NormIds,
    head_up: LinearIds,
    head_down: LinearIds,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, inp: usize, out: usize) -> LinearIds {
        let weight =
            self.store
                .add_linear_weight(format!("{name}.weight"), out, inp, &mut self.rng);
        let bias = self
            .store
            .add(format!("{name}.bias"), Tensor::zeros(&[out]));
        LinearIds { weight, bias }
    }

    fn norm(&mut self, name: &str, width: usize) -> NormIds {
        NormIds {
            gain: self
                .store
                .add(format!("{name}.gain"), Tensor::filled(&[width], 1.0)),
            shift: self
                .store
                .add(format!("{name}.shift"), Tensor::zeros(&[width])),
        }
    }

    fn mha(&mut self, name: &str, d: usize, q_in: usize, kv_in: usize) -> MhaIds {
        MhaIds {
            wq: self
                .store
                .add_linear_weight(format!("{name}.wq"), d, q_in, &mut self.rng),
            wk: self
                .store
                .add_linear_weight(format!("{name}.wk"), d, kv_in, &mut self.rng),
            wv: self
                .store
                .add_linear_weight(format!("{name}.wv"), d, kv_in, &mut self.rng),
            wo: self
                .store
                .add_linear_weight(format!("{name}.wo"), d, d, &mut self.rng),
        }
    }

    fn ff(&mut self, name: &str, d: usize, hidden: usize) -> FeedForwardIds {
        FeedForwardIds {
            norm: self.norm(&format!("{name}.norm"), d),
            up: self.linear(&format!("{name}.up"), d, hidden),
            down: self.linear(&format!("{name}.down"), hidden, d),
        }
    }
}

/// Mean frames per gloss, learned from a training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationTable {
    pub per_token: Vec<Option<f64>>,
    pub fallback: f64,
}

impl DurationTable {
    pub fn uniform(vocab_size: usize, frames: f64) -> Self {
        Self {
            per_token: vec![None; vocab_size],
            fallback: frames,
        }
    }

    /// Each sample credits `S / N` frames to each of its `N` tokens.
    pub fn fit<'a>(
        vocab_size: usize,
        samples: impl IntoIterator<Item = (&'a [usize], usize)>,
    ) -> Self {
        let mut sums = vec![0.0; vocab_size];
        let mut counts = vec![0usize; vocab_size];
        let (mut total, mut total_n) = (0.0, 0usize);
        for (tokens, frames) in samples {
            if tokens.is_empty() {
                continue;
            }
            let share = frames as f64 / tokens.len() as f64;
            for &t in tokens {
                if t < vocab_size {
                    sums[t] += share;
                    counts[t] += 1;
                }
                total += share;
                total_n += 1;
            }
        }
        let fallback = if total_n > 0 {
            total / total_n as f64
        } else {
            1.0
        };
        let per_token = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        Self {
            per_token,
            fallback,
        }
    }

    pub fn frames_for(&self, gloss: &GlossSequence) -> usize {
        let total: f64 = gloss
            .tokens
            .iter()
            .map(|&t| {
                self.per_token
                    .get(t)
                    .copied()
                    .flatten()
                    .unwrap_or(self.fallback)
            })
            .sum();
        (total.round() as usize).max(1)
    }
}

/// All learnable parameters plus the vocabulary, topology and duration table
/// the model was built for.
#[derive(Debug, Clone)]
pub struct AcdModel {
    config: AcdConfig,
    topology: SkeletonTopology,
    vocab: Vec<String>,
    schedule_steps: usize,
    pub durations: DurationTable,
    params: ParamStore,
    layers: Layers,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    config: AcdConfig,
    topology_id: String,
    topology: crate::skeleton::TopologyFile,
    vocab: Vec<String>,
    schedule_steps: usize,
    durations: DurationTable,
}

const CHECKPOINT_FORMAT: &str = "gloss2pose-acd/1";

impl AcdModel {
    pub fn new(
        config: AcdConfig,
        topology: SkeletonTopology,
        vocab: Vec<String>,
        schedule_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if vocab.is_empty() {
            return Err(Error::InvalidArgument("empty vocabulary".into()));
        }
        let j = topology.num_joints();
        let d = config.d_model;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let token_embedding =
            b.store
                .add_linear_weight("gloss.token_embedding", vocab.len(), d, &mut b.rng);
        let encoder = (0..config.gloss_layers)
            .map(|l| EncoderLayerIds {
                attn_norm: b.norm(&format!("gloss.layer{l}.attn_norm"), d),
                attn: b.mha(&format!("gloss.layer{l}.attn"), d, d, d),
                ff: b.ff(&format!("gloss.layer{l}.ff"), d, d * config.ffn_mult),
            })
            .collect();
        let encoder_norm = b.norm("gloss.final_norm", d);
        let self_embed = b.linear("self_embed", j * 7, d);
        let time_embed = b.linear("time_embed", d, d);
        let cond_norm = b.norm("condition.norm", d);
        let cond_attn = b.mha("condition.attn", d, d, d);
        let ff = |b: &mut Builder, name: &str| {
            config
                .feed_forward
                .then(|| b.ff(name, d, d * config.ffn_mult))
        };
        let cond_ff = ff(&mut b, "condition.ff");
        let separate = b.linear("separate", d, j * 7);
        let coord_lift = b.linear("coord.lift", j * 3, d);
        let coord_norm = b.norm("coord.norm", d);
        let coord_attn = b.mha("coord.attn", d, d, d);
        let coord_ff = ff(&mut b, "coord.ff");
        let attr_lift = b.linear("control.attr_lift", j * 4, d);
        let control_norm = b.norm("control.norm", d);
        let control_attn = b.mha("control.attn", d, d, d);
        let control_ff = ff(&mut b, "control.ff");
        let head_norm = b.norm("head.norm", d);
        let head_up = b.linear("head.up", d, config.head_hidden);
        let head_down = b.linear("head.down", config.head_hidden, j * 3);
        let layers = Layers {
            token_embedding,
            encoder,
            encoder_norm,
            self_embed,
            time_embed,
            cond_norm,
            cond_attn,
            cond_ff,
            separate,
            coord_lift,
            coord_norm,
            coord_attn,
            coord_ff,
            attr_lift,
            control_norm,
            control_attn,
            control_ff,
            head_norm,
            head_up,
            head_down,
        };
        let durations = DurationTable::uniform(vocab.len(), 10.0);
        Ok(Self {
            config,
            topology,
            vocab,
            schedule_steps,
            durations,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &AcdConfig {
        &self.config
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topology
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn schedule_steps(&self) -> usize {
        self.schedule_steps
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Maps token strings to vocabulary indices, naming the first unknown one.
    pub fn tokenize<S: AsRef<str>>(&self, words: &[S]) -> Result<GlossSequence> {
        let tokens = words
            .iter()
            .map(|w| {
                let w = w.as_ref();
                self.vocab
                    .iter()
                    .position(|v| v == w)
                    .ok_or_else(|| Error::UnknownToken(w.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GlossSequence { tokens })
    }

    pub fn check_gloss(&self, gloss: &GlossSequence) -> Result<()> {
        if gloss.is_empty() {
            return Err(Error::InvalidArgument("gloss sequence is empty".into()));
        }
        if let Some(&t) = gloss.tokens.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::InvalidArgument(format!(
                "token index {t} outside vocabulary of {}",
                self.vocab.len()
            )));
        }
        Ok(())
    }

    pub fn predict_length(&self, gloss: &GlossSequence) -> Result<usize> {
        self.check_gloss(gloss)?;
        Ok(self.durations.frames_for(gloss))
    }

    fn metadata(&self) -> String {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            topology_id: self.topology.id().to_string(),
            topology: self.topology.to_file_struct(),
            vocab: self.vocab.clone(),
            schedule_steps: self.schedule_steps,
            durations: self.durations.clone(),
        };
        serde_json::to_string(&meta).expect("metadata serializes")
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.metadata(), &self.params)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, store) = checkpoint::decode(bytes)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {}", meta.format)));
        }
        let topology = SkeletonTopology::from_file_struct(meta.topology_id, meta.topology)?;
        let mut model = Self::new(meta.config, topology, meta.vocab, meta.schedule_steps, 0)?;
        model.params.load_from(&store)?;
        model.durations = meta.durations;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Binds parameters onto `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    pub fn encode_gloss(&self, gloss: &GlossSequence) -> Result<GlossEmbedding> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let out = self.encode_gloss_graph(&mut g, &b, gloss)?;
        Ok(GlossEmbedding {
            matrix: g.value(out).clone(),
        })
    }

    /// Gloss encoder on the graph: scaled token embedding plus sinusoidal
    /// positions, then pre-norm transformer layers and a final norm.
    pub fn encode_gloss_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        gloss: &GlossSequence,
    ) -> Result<Var> {
        self.check_gloss(gloss)?;
        let d = self.config.d_model;
        let emb = g.gather_rows(b.var(self.layers.token_embedding), &gloss.tokens)?;
        let emb = g.scale(emb, (d as f64).sqrt());
        let pe = g.constant(positional_encoding(1..=gloss.len(), d));
        let mut x = g.add(emb, pe)?;
        for layer in &self.layers.encoder {
            let h = norm(g, b, layer.attn_norm, x)?;
            let a = mha(g, h, h, h, &mha_vars(b, layer.attn), self.config.heads)?;
            x = g.add(x, a.output)?;
            x = feed_forward(g, b, layer.ff, x)?;
        }
        norm(g, b, self.layers.encoder_norm, x)
    }

    /// `SE(fused) + PE(s) + TE(t)` with one token per frame.
    pub fn self_embed(&self, g: &mut Graph, b: &Bound, fused: Var, t: usize) -> Result<Var> {
        let d = self.config.d_model;
        let (frames, width) = (g.value(fused).rows(), g.value(fused).cols());
        if width != self.topology.num_joints() * 7 {
            return Err(Error::Shape(format!(
                "self_embed expects {} columns, got {width}",
                self.topology.num_joints() * 7
            )));
        }
        let se = linear(g, b, self.layers.self_embed, fused)?;
        let pe = g.constant(positional_encoding(1..=frames, d));
        let x = g.add(se, pe)?;
        let t_sin = g.constant(positional_encoding(t..=t, d));
        let te = linear(g, b, self.layers.time_embed, t_sin)?;
        g.add_row(x, te)
    }

    /// Cross-attention with frame tokens as queries and glosses as keys/values.
    pub fn condition_integrate(
        &self,
        g: &mut Graph,
        b: &Bound,
        pose: Var,
        gloss: Var,
    ) -> Result<Attended> {
        let d = self.config.d_model;
        if g.value(pose).cols() != d || g.value(gloss).cols() != d {
            return Err(Error::Shape(format!(
                "condition_integrate: widths {} and {} vs d_model {d}",
                g.value(pose).cols(),
                g.value(gloss).cols()
            )));
        }
        let q = norm(g, b, self.layers.cond_norm, pose)?;
        let a = mha(
            g,
            q,
            gloss,
            gloss,
            &mha_vars(b, self.layers.cond_attn),
            self.config.heads,
        )?;
        self.finish_block(g, b, pose, a, self.layers.cond_ff)
    }

    /// Reprojects to `J·7` per frame and splits into coordinate (`J·3`) and
    /// attribute (`J·4`) columns, inverting the fused layout.
    pub fn attribute_separate(&self, g: &mut Graph, b: &Bound, d: Var) -> Result<(Var, Var)> {
        let j = self.topology.num_joints();
        let p = linear(g, b, self.layers.separate, d)?;
        let (coord_idx, attr_idx) = split_indices(j);
        let dc = g.select_cols(p, &coord_idx)?;
        let da = g.select_cols(p, &attr_idx)?;
        Ok((dc, da))
    }

    /// Lifts `d_c` to block width and runs self-attention across frames.
    pub fn coordinate_attention(&self, g: &mut Graph, b: &Bound, dc: Var) -> Result<Attended> {
        let x = linear(g, b, self.layers.coord_lift, dc)?;
        let h = norm(g, b, self.layers.coord_norm, x)?;
        let a = mha(
            g,
            h,
            h,
            h,
            &mha_vars(b, self.layers.coord_attn),
            self.config.heads,
        )?;
        self.finish_block(g, b, x, a, self.layers.coord_ff)
    }

    /// Cross-attention from coordinate features to lifted bone attributes.
    pub fn attribute_control(
        &self,
        g: &mut Graph,
        b: &Bound,
        dc_star: Var,
        da: Var,
    ) -> Result<Attended> {
        let d = self.config.d_model;
        if g.value(dc_star).cols() != d {
            return Err(Error::Shape(format!(
                "attribute_control: coordinate width {} vs {d}",
                g.value(dc_star).cols()
            )));
        }
        let a_lift = linear(g, b, self.layers.attr_lift, da)?;
        let q = norm(g, b, self.layers.control_norm, dc_star)?;
        let a = mha(
            g,
            q,
            a_lift,
            a_lift,
            &mha_vars(b, self.layers.control_attn),
            self.config.heads,
        )?;
        self.finish_block(g, b, dc_star, a, self.layers.control_ff)
    }

    /// LayerNorm then a two-layer MLP to `J·3` coordinates per frame.
    pub fn project_pose(&self, g: &mut Graph, b: &Bound, features: Var) -> Result<Var> {
        let h = norm(g, b, self.layers.head_norm, features)?;
        let h = linear(g, b, self.layers.head_up, h)?;
        let h = g.silu(h);
        linear(g, b, self.layers.head_down, h)
    }

    fn finish_block(
        &self,
        g: &mut Graph,
        b: &Bound,
        input: Var,
        attended: MhaOutput,
        ff: Option<FeedForwardIds>,
    ) -> Result<Attended> {
        let mut x = if self.config.residual {
            g.add(input, attended.output)?
        } else {
            attended.output
        };
        if let Some(ff) = ff {
            x = feed_forward(g, b, ff, x)?;
        }
        Ok(Attended {
            output: x,
            weights: attended.weights,
        })
    }

    /// Full denoiser on the graph. `fused` is `S×(J·7)`, `gloss` is `N×d`.
    pub fn denoise_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        fused: Var,
        gloss: Var,
        t: usize,
    ) -> Result<DenoiseTrace> {
        let p_hat = self
            .self_embed(g, b, fused, t)
            .map_err(|e| e.in_stage("self_embed"))?;
        let d = self
            .condition_integrate(g, b, p_hat, gloss)
            .map_err(|e| e.in_stage("condition_integrate"))?;
        let (dc, da) = self
            .attribute_separate(g, b, d.output)
            .map_err(|e| e.in_stage("attribute_separate"))?;
        let dc_star = self
            .coordinate_attention(g, b, dc)
            .map_err(|e| e.in_stage("coordinate_attention"))?;
        let dp = self
            .attribute_control(g, b, dc_star.output, da)
            .map_err(|e| e.in_stage("attribute_control"))?;
        let pose = self
            .project_pose(g, b, dp.output)
            .map_err(|e| e.in_stage("project_pose"))?;
        let mut attention = d.weights;
        attention.extend(dc_star.weights);
        attention.extend(dp.weights);
        Ok(DenoiseTrace { pose, attention })
    }

    /// Clean-pose estimate `S×(J·3)` for a flat fused buffer of `frames` rows.
    pub fn denoise(
        &self,
        fused: &[f64],
        frames: usize,
        gloss: &GlossEmbedding,
        t: usize,
    ) -> Result<Tensor> {
        let width = self.topology.num_joints() * 7;
        let fused = Tensor::new(vec![frames, width], fused.to_vec())
            .map_err(|e| e.in_stage("denoise input"))?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let f = g.constant(fused);
        let gv = g.constant(gloss.matrix.clone());
        let out = self.denoise_graph(&mut g, &b, f, gv, t)?;
        Ok(g.value(out.pose).clone())
    }
}

/// Output of an attention block plus its per-head attention matrices.
#[derive(Debug, Clone)]
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct DenoiseTrace {
    /// `S×(J·3)` clean-pose estimate.
    pub pose: Var,
    /// Softmax matrices of every attention head in the denoiser.
    pub attention: Vec<Var>,
}

/// Projection matrices of one multi-head attention block, each `out×in`.
#[derive(Debug, Clone, Copy)]
pub struct MhaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Debug, Clone)]
pub struct MhaOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention: each head attends on its own
/// slice of the projected queries, keys and values; the concatenated heads
/// pass through the output projection.
pub fn mha(g: &mut Graph, q: Var, k: Var, v: Var, w: &MhaVars, heads: usize) -> Result<MhaOutput> {
    let d = g.value(w.wq).rows();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Shape(format!(
            "attention width {d} not divisible by {heads} heads"
        )));
    }
    let dk = d / heads;
    let qp = g.matmul_nt(q, w.wq)?;
    let kp = g.matmul_nt(k, w.wk)?;
    let vp = g.matmul_nt(v, w.wv)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qp, kp, vp)
        } else {
            (
                g.slice_cols(qp, h * dk, dk)?,
                g.slice_cols(kp, h * dk, dk)?,
                g.slice_cols(vp, h * dk, dk)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let a = g.softmax_rows(scores);
        outs.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    let output = g.matmul_nt(cat, w.wo)?;
    Ok(MhaOutput { output, weights })
}

fn mha_vars(b: &Bound, ids: MhaIds) -> MhaVars {
    MhaVars {
        wq: b.var(ids.wq),
        wk: b.var(ids.wk),
        wv: b.var(ids.wv),
        wo: b.var(ids.wo),
    }
}

fn linear(g: &mut Graph, b: &Bound, ids: LinearIds, x: Var) -> Result<Var> {
    g.linear(x, b.var(ids.weight), Some(b.var(ids.bias)))
}

fn norm(g: &mut Graph, b: &Bound, ids: NormIds, x: Var) -> Result<Var> {
    g.layer_norm(x, b.var(ids.gain), b.var(ids.shift))
}

fn feed_forward(g: &mut Graph, b: &Bound, ids: FeedForwardIds, x: Var) -> Result<Var> {
    let h = norm(g, b, ids.norm, x)?;
    let h = linear(g, b, ids.up, h)?;
    let h = g.silu(h);
    let h = linear(g, b, ids.down, h)?;
    g.add(x, h)
}

/// Column indices of the coordinate and attribute parts of a `J·7` row.
pub fn split_indices(joints: usize) -> (Vec<usize>, Vec<usize>) {
    let coord = (0..joints)
        .flat_map(|j| (0..3).map(move |k| 7 * j + k))
        .collect();
    let attr = (0..joints)
        .flat_map(|j| (3..7).map(move |k| 7 * j + k))
        .collect();
    (coord, attr)
}

/// Sinusoidal encoding, one row per position:
/// `[sin(p·ω_0), cos(p·ω_0), sin(p·ω_1), …]` with `ω_i = 10000^(−2i/d)`.
pub fn positional_encoding(positions: impl IntoIterator<Item = usize>, d: usize) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    for p in positions {
        rows += 1;
        for i in 0..d / 2 {
            let w = 10000f64.powf(-2.0 * i as f64 / d as f64);
            let a = p as f64 * w;
            data.push(a.sin());
            data.push(a.cos());
        }
        if d % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::new(vec![rows, d], data).expect("shape")
}

#[cfg(test)]
mod tests;
