//! Maps latent hidden states, conditioned on per-patch image features, into
//! the teacher feature space.
//!
//! For each patch feature `f` (a row of `F_images`):
//!
//! ```text
//! s  = softmax((f Wq)(H Wk)^T / sqrt(a)) (H Wv)      attention pool over the k latents H
//! x0 = [f, s]
//! h  = x0 L0 + b0
//! h  = h + (gelu((gelu(h) La + ba)) Lb + bb)          once per residual pair
//! y  = gelu(h) Lout + bout                            Lout, bout zero-initialised
//! ```
//!
//! `depth` counts the linear layers of the MLP (`L0`, the pairs, `Lout`); an
//! odd leftover becomes a single-layer residual step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use think3d_autograd::{Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Patch feature concatenated with its attention-pooled latent summary.
    #[default]
    AttnPoolConcat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    pub depth: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub d_latent: usize,
    pub d_image: usize,
    pub d_teacher: usize,
    pub fusion: FusionMode,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            hidden: 128,
            attn_dim: 64,
            d_latent: 128,
            d_image: 128,
            d_teacher: 64,
            fusion: FusionMode::AttnPoolConcat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Pair(usize),
    Single(usize),
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 || self.attn_dim == 0 || self.d_teacher == 0 {
            return Err(Error::Config("projector widths and depth must be positive".into()));
        }
        Ok(())
    }

    fn steps(&self) -> Vec<Step> {
        if self.depth <= 2 {
            return Vec::new();
        }
        let inner = self.depth - 2;
        let mut steps: Vec<Step> = (0..inner / 2).map(Step::Pair).collect();
        if inner % 2 == 1 {
            steps.push(Step::Single(inner / 2));
        }
        steps
    }

    pub fn param_count(&self) -> usize {
        let (a, h) = (self.attn_dim, self.hidden);
        let attn = self.d_image * a + 2 * self.d_latent * a;
        let x0 = self.d_image + a;
        if self.depth == 1 {
            return attn + x0 * self.d_teacher + self.d_teacher;
        }
        let inner: usize = self
            .steps()
            .iter()
            .map(|s| match s {
                Step::Pair(_) => 2 * (h * h + h),
                Step::Single(_) => h * h + h,
            })
            .sum();
        attn + x0 * h + h + inner + h * self.d_teacher + self.d_teacher
    }
}

/// Fan-in scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn fan_in(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

#[derive(Debug, Clone)]
pub struct Projector {
    pub config: ProjectorConfig,
}

impl Projector {
    /// Inserts `proj.*` parameters. The output layer starts at zero.
    pub fn init(config: ProjectorConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        store.insert("proj.attn.wq", fan_in(c.d_image, c.attn_dim, rng));
        store.insert("proj.attn.wk", fan_in(c.d_latent, c.attn_dim, rng));
        store.insert("proj.attn.wv", fan_in(c.d_latent, c.attn_dim, rng));
        let x0 = c.d_image + c.attn_dim;
        if c.depth == 1 {
            store.insert("proj.out.w", Tensor::zeros(x0, c.d_teacher));
            store.insert("proj.out.b", Tensor::zeros(1, c.d_teacher));
            return Ok(Self { config });
        }
        store.insert("proj.in.w", fan_in(x0, c.hidden, rng));
        store.insert("proj.in.b", Tensor::zeros(1, c.hidden));
        for s in c.steps() {
            match s {
                Step::Pair(i) => {
                    for half in ["a", "b"] {
                        store.insert(format!("proj.res{i}{half}.w"), fan_in(c.hidden, c.hidden, rng));
                        store.insert(format!("proj.res{i}{half}.b"), Tensor::zeros(1, c.hidden));
                    }
                }
                Step::Single(i) => {
                    store.insert(format!("proj.res{i}.w"), fan_in(c.hidden, c.hidden, rng));
                    store.insert(format!("proj.res{i}.b"), Tensor::zeros(1, c.hidden));
                }
            }
        }
        store.insert("proj.out.w", Tensor::zeros(c.hidden, c.d_teacher));
        store.insert("proj.out.b", Tensor::zeros(1, c.d_teacher));
        Ok(Self { config })
    }

    /// Checks that `store` holds every projector tensor with the right shape.
    pub fn bind(config: ProjectorConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let mut probe = ParamStore::new();
        Projector::init(config.clone(), &mut probe, &mut rand::SeedableRng::seed_from_u64(0))?;
        for (_, name, t) in probe.iter() {
            match store.by_name(name) {
                None => {
                    return Err(Error::MissingComponent {
                        path: "<parameters>".into(),
                        component: name.to_string(),
                    })
                }
                Some(s) if s.shape() != t.shape() => {
                    return Err(Error::ShapeMismatch(format!("{name}: {:?} vs {:?}", s.shape(), t.shape())))
                }
                _ => {}
            }
        }
        Ok(Self { config })
    }

    fn linear(g: &mut Graph, x: Var, name: &str) -> Var {
        let w = g.param_named(&format!("{name}.w"));
        let b = g.param_named(&format!("{name}.b"));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// Hidden activation feeding the output layer (`gelu(h)`), or `x0` when
    /// `depth == 1`.
    pub fn features(&self, g: &mut Graph, latents: Var, image_features: Var) -> Result<Var> {
        let c = &self.config;
        let (lt, it) = (g.value(latents), g.value(image_features));
        if lt.rows == 0 || lt.cols != c.d_latent || it.cols != c.d_image {
            return Err(Error::ShapeMismatch(format!(
                "projector expects k x {} latents and P x {} image features, got {}x{} and {}x{}",
                c.d_latent, c.d_image, lt.rows, lt.cols, it.rows, it.cols
            )));
        }
        let wq = g.param_named("proj.attn.wq");
        let wk = g.param_named("proj.attn.wk");
        let wv = g.param_named("proj.attn.wv");
        let q = g.matmul(image_features, wq);
        let k = g.matmul(latents, wk);
        let v = g.matmul(latents, wv);
        let pooled = g.attention(q, k, v, 1, false);
        let x0 = g.concat_cols(&[image_features, pooled]);
        if c.depth == 1 {
            return Ok(x0);
        }
        let mut h = Self::linear(g, x0, "proj.in");
        for s in c.steps() {
            let delta = match s {
                Step::Pair(i) => {
                    let a = g.gelu(h);
                    let a = Self::linear(g, a, &format!("proj.res{i}a"));
                    let a = g.gelu(a);
                    Self::linear(g, a, &format!("proj.res{i}b"))
                }
                Step::Single(i) => {
                    let a = g.gelu(h);
                    Self::linear(g, a, &format!("proj.res{i}"))
                }
            };
            h = g.add(h, delta);
        }
        Ok(g.gelu(h))
    }

    /// `F_proj`, one row per image patch: `(n_views * P) x d_teacher`.
    pub fn project(&self, g: &mut Graph, latents: Var, image_features: Var) -> Result<Var> {
        let h = self.features(g, latents, image_features)?;
        Ok(Self::linear(g, h, "proj.out"))
    }
}

/// Non-differentiable convenience wrapper over [`Projector::project`].
pub fn project_latents(
    projector: &Projector,
    params: &ParamStore,
    latents: &Tensor,
    image_features: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let l = g.input(latents.clone());
    let f = g.input(image_features.clone());
    let out = projector.project(&mut g, l, f)?;
    Ok(g.value(out).clone())
}
