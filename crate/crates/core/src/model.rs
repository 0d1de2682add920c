//! A small decoder-only multimodal transformer.
//!
//! Sequence layout: all image patches (view-major, row-major within a view),
//! then question tokens, then trajectory tokens. Image tokens enter as
//! `content(patch) + patch_pos[p] + view_emb[view]`; text tokens as
//! `tok_emb[t] + pos_emb[absolute position]`. Attention is causal throughout.
//!
//! Two execution paths share the parameters:
//! * [`Vlm::forward`] records a teacher-forced pass on an autograd [`Graph`];
//! * [`Session`] runs incrementally with a key/value cache for decoding.
//!
//! The "last-layer hidden state" is the output of the final layer norm, i.e.
//! the vector the LM head reads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use think3d_autograd::{tensor, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::projector::{Projector, ProjectorConfig};
use crate::task::render::{ViewImage, CHANNELS};
use crate::trajectory::{FormatGrammar, ReasoningTrajectory};
use crate::vocab::{TokenId, Vocab};

pub const INIT_STD: f64 = 0.02;
/// Number of distinct camera ids the view embedding table covers.
pub const VIEW_SLOTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Width of the feed-forward hidden layer.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub image_side: usize,
    pub patch_size: usize,
    pub max_seq_len: usize,
    pub latent_size: usize,
    /// Longest trajectory the decoder will produce.
    pub max_new_tokens: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            vocab_size: Vocab::standard().size(),
            image_side: 32,
            patch_size: 8,
            max_seq_len: 512,
            latent_size: 12,
            max_new_tokens: 160,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// The config with `init_seed` zeroed: what checkpoints of the same
    /// architecture have in common.
    pub fn without_seed(&self) -> Self {
        Self {
            init_seed: 0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.latent_size == 0 {
            return bad("latent_size must be positive".into());
        }
        if self.patch_size == 0 || self.image_side % self.patch_size != 0 {
            return bad(format!(
                "patch size {} does not divide image side {}",
                self.patch_size, self.image_side
            ));
        }
        if self.vocab_size != Vocab::standard().size() {
            return bad(format!(
                "vocab_size {} differs from the token table ({})",
                self.vocab_size,
                Vocab::standard().size()
            ));
        }
        Ok(())
    }

    pub fn patches_per_view(&self) -> usize {
        (self.image_side / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    /// Trainable parameter count:
    ///
    /// ```text
    /// V*d                      token embedding
    /// + (3p^2 + 1)*d           patch embedder weight and bias
    /// + P*d + 4*d + L*d        patch-position, view and text-position tables
    /// + n_layers * (4d^2 + 2*d*f + f + d + 4d)
    /// + 2d + d*V               final norm and LM head
    /// ```
    pub fn param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let per_layer = 4 * d * d + 2 * d * f + f + d + 4 * d;
        v * d
            + (self.patch_dim() + 1) * d
            + self.patches_per_view() * d
            + VIEW_SLOTS * d
            + self.max_seq_len * d
            + self.n_layers * per_layer
            + 2 * d
            + d * v
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct VlmIds {
    tok_emb: ParamId,
    patch_w: ParamId,
    patch_b: ParamId,
    patch_pos: ParamId,
    view_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    lm_head: ParamId,
}

/// The model definition plus resolved parameter handles. Parameters
/// themselves live in a [`ParamStore`] under the `vlm.` prefix.
#[derive(Debug, Clone)]
pub struct Vlm {
    pub config: ModelConfig,
    ids: VlmIds,
}

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

impl Vlm {
    /// Inserts freshly initialised `vlm.*` parameters into `store`.
    pub fn init(config: ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        store.insert("vlm.tok_emb", normal(v, d, rng));
        store.insert("vlm.patch_w", normal(c.patch_dim(), d, rng));
        store.insert("vlm.patch_b", Tensor::zeros(1, d));
        store.insert("vlm.patch_pos", normal(c.patches_per_view(), d, rng));
        store.insert("vlm.view_emb", normal(VIEW_SLOTS, d, rng));
        store.insert("vlm.pos_emb", normal(c.max_seq_len, d, rng));
        for i in 0..c.n_layers {
            let p = |s: &str| format!("vlm.l{i}.{s}");
            store.insert(p("ln1.g"), Tensor::filled(1, d, 1.0));
            store.insert(p("ln1.b"), Tensor::zeros(1, d));
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(p(w), normal(d, d, rng));
            }
            store.insert(p("ln2.g"), Tensor::filled(1, d, 1.0));
            store.insert(p("ln2.b"), Tensor::zeros(1, d));
            store.insert(p("w1"), normal(d, f, rng));
            store.insert(p("b1"), Tensor::zeros(1, f));
            store.insert(p("w2"), normal(f, d, rng));
            store.insert(p("b2"), Tensor::zeros(1, d));
        }
        store.insert("vlm.ln_f.g", Tensor::filled(1, d, 1.0));
        store.insert("vlm.ln_f.b", Tensor::zeros(1, d));
        store.insert("vlm.lm_head", normal(d, v, rng));
        Self::bind(config, store)
    }

    /// Resolves parameter handles in an already-populated store.
    pub fn bind(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let get = |name: String, rows: usize, cols: usize| -> Result<ParamId> {
            let id = store.id(&name).ok_or_else(|| Error::MissingComponent {
                path: "<parameters>".into(),
                component: name.clone(),
            })?;
            let t = store.get(id);
            if t.shape() != (rows, cols) {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {rows}x{cols}, found {}x{}",
                    t.rows, t.cols
                )));
            }
            Ok(id)
        };
        let c = &config;
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let mut layers = Vec::with_capacity(c.n_layers);
        for i in 0..c.n_layers {
            let p = |s: &str| format!("vlm.l{i}.{s}");
            layers.push(LayerIds {
                ln1_g: get(p("ln1.g"), 1, d)?,
                ln1_b: get(p("ln1.b"), 1, d)?,
                wq: get(p("wq"), d, d)?,
                wk: get(p("wk"), d, d)?,
                wv: get(p("wv"), d, d)?,
                wo: get(p("wo"), d, d)?,
                ln2_g: get(p("ln2.g"), 1, d)?,
                ln2_b: get(p("ln2.b"), 1, d)?,
                w1: get(p("w1"), d, f)?,
                b1: get(p("b1"), 1, f)?,
                w2: get(p("w2"), f, d)?,
                b2: get(p("b2"), 1, d)?,
            });
        }
        let ids = VlmIds {
            tok_emb: get("vlm.tok_emb".into(), v, d)?,
            patch_w: get("vlm.patch_w".into(), c.patch_dim(), d)?,
            patch_b: get("vlm.patch_b".into(), 1, d)?,
            patch_pos: get("vlm.patch_pos".into(), c.patches_per_view(), d)?,
            view_emb: get("vlm.view_emb".into(), VIEW_SLOTS, d)?,
            pos_emb: get("vlm.pos_emb".into(), c.max_seq_len, d)?,
            layers,
            lnf_g: get("vlm.ln_f.g".into(), 1, d)?,
            lnf_b: get("vlm.ln_f.b".into(), 1, d)?,
            lm_head: get("vlm.lm_head".into(), d, v)?,
        };
        Ok(Self { config, ids })
    }

    /// Row-per-patch pixel matrix `(n_views * P) x (3 p^2)`, entries ordered
    /// channel, row, column within a patch.
    pub fn patchify(&self, views: &[ViewImage]) -> Result<Tensor> {
        let c = &self.config;
        if views.is_empty() {
            return Err(Error::ShapeMismatch("no views".into()));
        }
        let (side, p) = (c.image_side, c.patch_size);
        let per_row = side / p;
        let mut out = Tensor::zeros(views.len() * c.patches_per_view(), c.patch_dim());
        for (vi, view) in views.iter().enumerate() {
            if view.side != side || view.pixels.len() != CHANNELS * side * side {
                return Err(Error::ShapeMismatch(format!(
                    "view of side {} with {} values, expected side {side}",
                    view.side,
                    view.pixels.len()
                )));
            }
            for pr in 0..per_row {
                for pc in 0..per_row {
                    let row = out.row_mut(vi * c.patches_per_view() + pr * per_row + pc);
                    let mut k = 0;
                    for ch in 0..CHANNELS {
                        for dy in 0..p {
                            for dx in 0..p {
                                row[k] = view.at(ch, pr * p + dy, pc * p + dx) as f64;
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn check_len(&self, n_views: usize, text_len: usize) -> Result<()> {
        let len = n_views * self.config.patches_per_view() + text_len;
        if len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Patch-content features `F_images`: the linear patch embedding alone,
    /// `(n_views * P) x d_model`. Position and view embeddings are added only
    /// when the patches enter the transformer.
    pub fn encode_images(&self, g: &mut Graph, views: &[ViewImage]) -> Result<Var> {
        let pixels = self.patchify(views)?;
        let x = g.input(pixels);
        let w = g.param(self.ids.patch_w);
        let b = g.param(self.ids.patch_b);
        let h = g.matmul(x, w);
        Ok(g.add_row(h, b))
    }

    /// Teacher-forced pass over `views ++ text`. Returns the per-position
    /// last-layer hidden states (`seq x d`) and the image features.
    pub fn forward(&self, g: &mut Graph, views: &[ViewImage], text: &[TokenId]) -> Result<Forward> {
        let c = &self.config;
        self.check_len(views.len(), text.len())?;
        if let Some(&bad) = text.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::ShapeMismatch(format!("token id {bad} outside vocabulary")));
        }
        let image_features = self.encode_images(g, views)?;
        let ppv = c.patches_per_view();
        let n_img = views.len() * ppv;
        let patch_idx: Vec<usize> = (0..n_img).map(|i| i % ppv).collect();
        let view_idx: Vec<usize> = views
            .iter()
            .flat_map(|v| std::iter::repeat(v.view.index()).take(ppv))
            .collect();
        let pp = g.param(self.ids.patch_pos);
        let pp = g.gather(pp, &patch_idx);
        let ve = g.param(self.ids.view_emb);
        let ve = g.gather(ve, &view_idx);
        let img = g.add(image_features, pp);
        let img = g.add(img, ve);

        let mut parts = vec![img];
        if !text.is_empty() {
            let te = g.param(self.ids.tok_emb);
            let te = g.gather(te, text);
            let positions: Vec<usize> = (n_img..n_img + text.len()).collect();
            let pe = g.param(self.ids.pos_emb);
            let pe = g.gather(pe, &positions);
            parts.push(g.add(te, pe));
        }
        let mut x = g.concat_rows(&parts);
        for l in &self.ids.layers {
            let (g1, b1) = (g.param(l.ln1_g), g.param(l.ln1_b));
            let xn = g.layer_norm(x, g1, b1);
            let (wq, wk, wv, wo) = (g.param(l.wq), g.param(l.wk), g.param(l.wv), g.param(l.wo));
            let q = g.matmul(xn, wq);
            let k = g.matmul(xn, wk);
            let v = g.matmul(xn, wv);
            let a = g.attention(q, k, v, c.n_heads, true);
            let a = g.matmul(a, wo);
            x = g.add(x, a);
            let (g2, b2) = (g.param(l.ln2_g), g.param(l.ln2_b));
            let xn = g.layer_norm(x, g2, b2);
            let (w1, bb1, w2, bb2) = (g.param(l.w1), g.param(l.b1), g.param(l.w2), g.param(l.b2));
            let h = g.matmul(xn, w1);
            let h = g.add_row(h, bb1);
            let h = g.gelu(h);
            let h = g.matmul(h, w2);
            let h = g.add_row(h, bb2);
            x = g.add(x, h);
        }
        let (gf, bf) = (g.param(self.ids.lnf_g), g.param(self.ids.lnf_b));
        let hidden = g.layer_norm(x, gf, bf);
        Ok(Forward {
            hidden,
            image_features,
            text_offset: n_img,
            len: n_img + text.len(),
        })
    }

    /// Next-token logits for the selected sequence positions.
    pub fn logits(&self, g: &mut Graph, hidden: Var, rows: &[usize]) -> Var {
        let h = g.select_rows(hidden, rows);
        let w = g.param(self.ids.lm_head);
        g.matmul(h, w)
    }

    /// Teacher-forced log-probability of every trajectory token, as an
    /// `n x 1` graph node (`n = trajectory.len()`).
    pub fn trajectory_log_probs(
        &self,
        g: &mut Graph,
        views: &[ViewImage],
        question: &[TokenId],
        trajectory: &[TokenId],
    ) -> Result<Var> {
        let mut text = question.to_vec();
        text.extend_from_slice(trajectory);
        let fw = self.forward(g, views, &text)?;
        // The token at sequence position j is predicted from position j - 1.
        let first = fw.text_offset + question.len();
        let rows: Vec<usize> = (first - 1..first - 1 + trajectory.len()).collect();
        let logits = self.logits(g, fw.hidden, &rows);
        let all: Vec<usize> = (0..rows.len()).collect();
        Ok(g.token_log_probs(logits, &all, trajectory))
    }

    pub fn session<'a>(&'a self, params: &'a ParamStore) -> Session<'a> {
        Session {
            vlm: self,
            params,
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
            len: 0,
        }
    }
}

/// The trainable stack: transformer plus latent projector, sharing one
/// parameter store (`vlm.*` and `proj.*`).
#[derive(Debug, Clone)]
pub struct Models {
    pub vlm: Vlm,
    pub projector: Projector,
}

impl Models {
    /// Fresh parameters. The projector's input widths are taken from the
    /// model width.
    pub fn init(model: ModelConfig, projector: ProjectorConfig) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(model.init_seed);
        let projector = Self::sync(&model, projector);
        let vlm = Vlm::init(model, &mut store, &mut rng)?;
        let projector = Projector::init(projector, &mut store, &mut rng)?;
        Ok((Self { vlm, projector }, store))
    }

    pub fn bind(model: ModelConfig, projector: ProjectorConfig, store: &ParamStore) -> Result<Self> {
        let projector = Self::sync(&model, projector);
        Ok(Self {
            vlm: Vlm::bind(model, store)?,
            projector: Projector::bind(projector, store)?,
        })
    }

    fn sync(model: &ModelConfig, mut projector: ProjectorConfig) -> ProjectorConfig {
        projector.d_latent = model.d_model;
        projector.d_image = model.d_model;
        projector
    }
}

/// Handles produced by [`Vlm::forward`].
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub hidden: Var,
    pub image_features: Var,
    /// Sequence index of the first text token.
    pub text_offset: usize,
    pub len: usize,
}

/// Per-token log-probabilities of `trajectory` given the prompt; no
/// gradients are recorded beyond a throwaway tape.
pub fn sequence_logprobs(
    vlm: &Vlm,
    params: &ParamStore,
    question: &[TokenId],
    views: &[ViewImage],
    trajectory: &[TokenId],
) -> Result<Vec<f64>> {
    let mut g = Graph::new(params);
    let lp = vlm.trajectory_log_probs(&mut g, views, question, trajectory)?;
    Ok(g.value(lp).data.clone())
}

fn vec_mat(x: &[f64], w: &Tensor, out: &mut [f64]) {
    debug_assert_eq!(x.len(), w.rows);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
}

fn layer_norm_vec(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    let t = Tensor::from_vec(1, x.len(), x.to_vec());
    tensor::layer_norm(&t, &g.data, &b.data).0.data
}

/// Incremental decoder state with a key/value cache. Cloning forks the
/// state, which lets rollouts share one prompt prefill.
#[derive(Clone)]
pub struct Session<'a> {
    vlm: &'a Vlm,
    params: &'a ParamStore,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'a> Session<'a> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds all image patches; returns nothing because no text follows yet.
    pub fn push_views(&mut self, views: &[ViewImage]) -> Result<()> {
        let vlm = self.vlm;
        let p = self.params;
        let pixels = vlm.patchify(views)?;
        let ppv = vlm.config.patches_per_view();
        let (w, b) = (p.get(vlm.ids.patch_w), p.get(vlm.ids.patch_b));
        let (pp, ve) = (p.get(vlm.ids.patch_pos), p.get(vlm.ids.view_emb));
        let d = vlm.config.d_model;
        let mut x = vec![0.0; d];
        for r in 0..pixels.rows {
            vec_mat(pixels.row(r), w, &mut x);
            let view = views[r / ppv].view.index();
            for j in 0..d {
                x[j] += b.data[j] + pp.get(r % ppv, j) + ve.get(view, j);
            }
            self.push_embedding(x.clone())?;
        }
        Ok(())
    }

    /// Feeds one text token and returns its last-layer hidden state.
    pub fn push_token(&mut self, token: TokenId) -> Result<Vec<f64>> {
        let vlm = self.vlm;
        let te = self.params.get(vlm.ids.tok_emb);
        let pe = self.params.get(vlm.ids.pos_emb);
        if self.len >= vlm.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.len + 1,
                max: vlm.config.max_seq_len,
            });
        }
        let x: Vec<f64> = te.row(token).iter().zip(pe.row(self.len)).map(|(a, b)| a + b).collect();
        self.push_embedding(x)
    }

    fn push_embedding(&mut self, mut x: Vec<f64>) -> Result<Vec<f64>> {
        let vlm = self.vlm;
        let c = &vlm.config;
        let p = self.params;
        if self.len >= c.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.len + 1,
                max: c.max_seq_len,
            });
        }
        let d = c.d_model;
        let dh = d / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = self.len + 1;
        let mut q = vec![0.0; d];
        let mut kv = vec![0.0; d];
        let mut att = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let mut hid = vec![0.0; c.d_ff];
        let mut scores = vec![0.0; t];
        for (li, l) in vlm.ids.layers.iter().enumerate() {
            let xn = layer_norm_vec(&x, p.get(l.ln1_g), p.get(l.ln1_b));
            vec_mat(&xn, p.get(l.wq), &mut q);
            vec_mat(&xn, p.get(l.wk), &mut kv);
            self.keys[li].extend_from_slice(&kv);
            vec_mat(&xn, p.get(l.wv), &mut kv);
            self.values[li].extend_from_slice(&kv);
            let (ks, vs) = (&self.keys[li], &self.values[li]);
            att.iter_mut().for_each(|a| *a = 0.0);
            for h in 0..c.n_heads {
                let qh = &q[h * dh..(h + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = tensor::dot(qh, &ks[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
                }
                tensor::softmax_in_place(&mut scores);
                let out = &mut att[h * dh..(h + 1) * dh];
                for (j, &w) in scores.iter().enumerate() {
                    for (o, &v) in out.iter_mut().zip(&vs[j * d + h * dh..j * d + (h + 1) * dh]) {
                        *o += w * v;
                    }
                }
            }
            vec_mat(&att, p.get(l.wo), &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
            let xn = layer_norm_vec(&x, p.get(l.ln2_g), p.get(l.ln2_b));
            vec_mat(&xn, p.get(l.w1), &mut hid);
            for (h, b) in hid.iter_mut().zip(&p.get(l.b1).data) {
                *h = tensor::gelu(*h + b);
            }
            vec_mat(&hid, p.get(l.w2), &mut proj);
            for ((a, b), bias) in x.iter_mut().zip(&proj).zip(&p.get(l.b2).data) {
                *a += b + bias;
            }
        }
        self.len += 1;
        Ok(layer_norm_vec(&x, p.get(vlm.ids.lnf_g), p.get(vlm.ids.lnf_b)))
    }

    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let w = self.params.get(self.vlm.ids.lm_head);
        let mut out = vec![0.0; w.cols];
        vec_mat(hidden, w, &mut out);
        out
    }
}

/// Decoding policy for free generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSpec {
    pub greedy: bool,
    pub temperature: f64,
    /// Keep only the `top_k` most likely tokens; 0 disables the filter.
    pub top_k: usize,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            greedy: true,
            temperature: 1.0,
            top_k: 0,
        }
    }
}

impl SamplingSpec {
    pub fn sampled(temperature: f64) -> Self {
        Self {
            greedy: false,
            temperature,
            top_k: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.greedy && !(self.temperature > 0.0) {
            return Err(Error::Config("sampling temperature must be positive".into()));
        }
        Ok(())
    }

    /// Picks a token from raw logits. `banned` tokens are never chosen.
    pub fn pick(&self, logits: &[f64], banned: &[TokenId], rng: &mut ChaCha8Rng) -> TokenId {
        let allowed = |i: usize| !banned.contains(&i);
        if self.greedy {
            return argmax_where(logits, allowed);
        }
        let mut cand: Vec<(usize, f64)> = logits
            .iter()
            .enumerate()
            .filter(|&(i, _)| allowed(i))
            .map(|(i, &l)| (i, l / self.temperature))
            .collect();
        if self.top_k > 0 && self.top_k < cand.len() {
            cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            cand.truncate(self.top_k);
        }
        let max = cand.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = cand.iter().map(|c| (c.1 - max).exp()).sum();
        let mut u = rng.gen::<f64>() * total;
        for &(i, l) in &cand {
            u -= (l - max).exp();
            if u <= 0.0 {
                return i;
            }
        }
        cand.last().expect("non-empty candidate set").0
    }
}

/// Index of the largest logit among allowed ids; ties go to the lower id.
pub fn argmax_where(logits: &[f64], allowed: impl Fn(usize) -> bool) -> TokenId {
    let mut best = None;
    for (i, &l) in logits.iter().enumerate() {
        if allowed(i) && best.map_or(true, |(_, b)| l > b) {
            best = Some((i, l));
        }
    }
    best.expect("at least one allowed token").0
}

/// Result of free generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub trajectory: ReasoningTrajectory,
    /// Last-layer hidden state at each emitted latent pad, in order.
    pub latents: Tensor,
    /// `true` for pads inserted by the decoder rather than sampled.
    pub forced: Vec<bool>,
    /// Whether the terminal token was produced within the length budget.
    pub complete: bool,
}

/// Decodes a trajectory after the prompt held in `session`.
///
/// When the model emits `<|latent_start|>`, the decoder appends exactly `k`
/// latent pads; each pad is fed through the shared pad embedding and its
/// output hidden state is read out into `latents`, never fed back. Pads are
/// never sampled directly. Generation stops at the grammar's terminal token
/// or after `max_new_tokens`.
pub fn continue_generation(
    mut session: Session<'_>,
    grammar: &FormatGrammar,
    sampling: &SamplingSpec,
    rng: &mut ChaCha8Rng,
    first_hidden: Vec<f64>,
) -> Result<Generation> {
    let vlm = session.vlm;
    let sp = Vocab::standard().specials();
    let terminal = grammar.terminal_token(&sp);
    let k = vlm.config.latent_size;
    let budget = vlm.config.max_new_tokens;
    let mut tokens = Vec::new();
    let mut forced = Vec::new();
    let mut latent_rows = Vec::new();
    let mut hidden = first_hidden;
    let mut complete = false;
    let mut blocks = 0usize;
    while tokens.len() < budget && session.len() < vlm.config.max_seq_len {
        let logits = session.logits(&hidden);
        let tok = sampling.pick(&logits, &[sp.latent_pad], rng);
        tokens.push(tok);
        forced.push(false);
        if tok == terminal && (tok != sp.latent_end || blocks > 0) {
            complete = true;
            break;
        }
        hidden = session.push_token(tok)?;
        if tok == sp.latent_start {
            blocks += 1;
            for _ in 0..k {
                if tokens.len() >= budget || session.len() >= vlm.config.max_seq_len {
                    break;
                }
                tokens.push(sp.latent_pad);
                forced.push(true);
                hidden = session.push_token(sp.latent_pad)?;
                latent_rows.push(hidden.clone());
            }
        }
    }
    let d = vlm.config.d_model;
    let latents = Tensor::from_vec(latent_rows.len(), d, latent_rows.concat());
    Ok(Generation {
        trajectory: ReasoningTrajectory::new(tokens, &sp),
        latents,
        forced,
        complete,
    })
}

/// Prefills a session with `views ++ question` and returns it together with
/// the hidden state of the final prompt token.
pub fn prefill<'a>(
    vlm: &'a Vlm,
    params: &'a ParamStore,
    question: &[TokenId],
    views: &[ViewImage],
) -> Result<(Session<'a>, Vec<f64>)> {
    if question.is_empty() {
        return Err(Error::ShapeMismatch("empty question".into()));
    }
    vlm.check_len(views.len(), question.len())?;
    let mut s = vlm.session(params);
    s.push_views(views)?;
    let mut h = Vec::new();
    for &t in question {
        h = s.push_token(t)?;
    }
    Ok((s, h))
}

pub fn generate_with_latents(
    vlm: &Vlm,
    params: &ParamStore,
    question: &[TokenId],
    views: &[ViewImage],
    grammar: &FormatGrammar,
    sampling: &SamplingSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Generation> {
    sampling.validate()?;
    let (session, h) = prefill(vlm, params, question, views)?;
    continue_generation(session, grammar, sampling, rng, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            image_side: 16,
            patch_size: 8,
            max_seq_len: 96,
            latent_size: 3,
            max_new_tokens: 20,
            ..Default::default()
        }
    }

    #[test]
    fn param_count_matches_store() {
        for (layers, heads) in [(1, 1), (2, 2), (3, 4)] {
            let cfg = ModelConfig {
                n_layers: layers,
                n_heads: heads,
                ..tiny()
            };
            let mut store = ParamStore::new();
            Vlm::init(cfg.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(store.numel(), cfg.param_count());
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..tiny()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            patch_size: 5,
            ..tiny()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pick_respects_bans_and_top_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = [0.0, 5.0, 4.0, -1.0];
        assert_eq!(SamplingSpec::default().pick(&logits, &[1], &mut rng), 2);
        let s = SamplingSpec {
            greedy: false,
            temperature: 1.0,
            top_k: 2,
        };
        for _ in 0..200 {
            let t = s.pick(&logits, &[], &mut rng);
            assert!(t == 1 || t == 2);
        }
    }
}
