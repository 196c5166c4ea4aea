//! Anchor function generator: maps an anchor encoding (and, for the
//! data-dependent variant, pooled image features) to detection-head weights.
//!
//! For one generator the predicted weight vector is
//!
//! ```text
//! theta(b) = theta_star + W2 * relu(W1 * b)                  (data-independent)
//! theta(b) = theta_star + W2 * relu(W11 * b + W12 * gap(x))  (data-dependent)
//! ```
//!
//! Classification and regression weights come from two independent
//! generators. Flat layout of a full head is
//! `[cls filters (C, C_feat, 3, 3) | cls bias (C) | reg filters (4, C_feat, 3, 3) | reg bias (4)]`;
//! the classification generator owns the first block, the regression
//! generator the second.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorEncoding;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const CLS_PREFIX: &str = "gen.cls.";
pub const REG_PREFIX: &str = "gen.reg.";

/// Prior foreground probability used to initialize classification biases.
pub const PRIOR_PROB: f64 = 0.01;

pub fn prior_bias() -> f64 {
    -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorVariant {
    DataIndependent,
    DataDependent,
}

/// Class count and head input channels; fixes the weight layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadGeometry {
    pub num_classes: usize,
    pub feat_channels: usize,
}

impl HeadGeometry {
    pub fn cls_filter_len(&self) -> usize {
        self.num_classes * self.feat_channels * 9
    }

    pub fn cls_dim(&self) -> usize {
        self.cls_filter_len() + self.num_classes
    }

    pub fn reg_filter_len(&self) -> usize {
        4 * self.feat_channels * 9
    }

    pub fn reg_dim(&self) -> usize {
        self.reg_filter_len() + 4
    }
}

/// Length of a full head weight vector.
pub fn theta_dim(num_classes: usize, feat_channels: usize) -> usize {
    let g = HeadGeometry {
        num_classes,
        feat_channels,
    };
    g.cls_dim() + g.reg_dim()
}

/// Which half of the head a generator produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadBlock {
    Cls,
    Reg,
}

impl HeadBlock {
    pub fn dim(self, geom: &HeadGeometry) -> usize {
        match self {
            HeadBlock::Cls => geom.cls_dim(),
            HeadBlock::Reg => geom.reg_dim(),
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            HeadBlock::Cls => CLS_PREFIX,
            HeadBlock::Reg => REG_PREFIX,
        }
    }
}

/// Classification and regression filters of one anchor function.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub cls_filters: Tensor,
    pub cls_bias: Tensor,
    pub reg_filters: Tensor,
    pub reg_bias: Tensor,
}

impl FilterBank {
    pub fn from_theta(theta: &[f64], geom: &HeadGeometry) -> Result<Self> {
        let (c, f) = (geom.num_classes, geom.feat_channels);
        if theta.len() != geom.cls_dim() + geom.reg_dim() {
            return Err(Error::shape(
                "filter bank",
                format!(
                    "weight vector of length {} does not match head of length {}",
                    theta.len(),
                    geom.cls_dim() + geom.reg_dim()
                ),
            ));
        }
        let (cls, reg) = theta.split_at(geom.cls_dim());
        let (cf, cb) = cls.split_at(geom.cls_filter_len());
        let (rf, rb) = reg.split_at(geom.reg_filter_len());
        Ok(FilterBank {
            cls_filters: Tensor::new(vec![c, f, 3, 3], cf.to_vec())?,
            cls_bias: Tensor::vector(cb.to_vec()),
            reg_filters: Tensor::new(vec![4, f, 3, 3], rf.to_vec())?,
            reg_bias: Tensor::vector(rb.to_vec()),
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        [
            self.cls_filters.data(),
            self.cls_bias.data(),
            self.reg_filters.data(),
            self.reg_bias.data(),
        ]
        .concat()
    }

    pub fn geometry(&self) -> HeadGeometry {
        HeadGeometry {
            num_classes: self.cls_filters.shape()[0],
            feat_channels: self.cls_filters.shape()[1],
        }
    }
}

/// Weights of one generator `G(., w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub variant: GeneratorVariant,
    /// Shared weights `theta*`, length `D`.
    pub theta_star: Tensor,
    /// `W1` (or `W11` for the data-dependent variant), `[m, 2]`.
    pub w_enc: Tensor,
    /// `W12`, `[m, d_feat]`; data-dependent variant only.
    pub w_feat: Option<Tensor>,
    /// `W2`, `[D, m]`.
    pub w2: Tensor,
}

impl GeneratorParams {
    /// Uniform `+-1/sqrt(fan_in)` initialization. For the classification block
    /// the biases start at the foreground prior.
    pub fn init<R: Rng + ?Sized>(
        geom: &HeadGeometry,
        block: HeadBlock,
        hidden: usize,
        variant: GeneratorVariant,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::invalid("generator hidden width must be >= 1"));
        }
        let d = block.dim(geom);
        let conv_bound = 1.0 / ((geom.feat_channels * 9) as f64).sqrt();
        let mut theta = Tensor::uniform(vec![d], conv_bound, rng);
        if block == HeadBlock::Cls {
            let start = geom.cls_filter_len();
            theta.data_mut()[start..].iter_mut().for_each(|v| *v = prior_bias());
        }
        let w_enc = Tensor::uniform(vec![hidden, 2], 1.0 / 2f64.sqrt(), rng);
        let w_feat = match variant {
            GeneratorVariant::DataIndependent => None,
            GeneratorVariant::DataDependent => Some(Tensor::uniform(
                vec![hidden, geom.feat_channels],
                1.0 / (geom.feat_channels as f64).sqrt(),
                rng,
            )),
        };
        let w2 = Tensor::uniform(vec![d, hidden], 1.0 / (hidden as f64).sqrt(), rng);
        Self::new(variant, theta, w_enc, w_feat, w2)
    }

    pub fn new(
        variant: GeneratorVariant,
        theta_star: Tensor,
        w_enc: Tensor,
        w_feat: Option<Tensor>,
        w2: Tensor,
    ) -> Result<Self> {
        let d = theta_star.numel();
        let m = w2.shape().get(1).copied().unwrap_or(0);
        if theta_star.rank() != 1 || w2.shape() != [d, m] || m == 0 {
            return Err(Error::shape(
                "generator",
                format!("theta* {:?} vs W2 {:?}", theta_star.shape(), w2.shape()),
            ));
        }
        if w_enc.shape() != [m, 2] {
            return Err(Error::shape(
                "generator",
                format!("encoding projection must be [{m}, 2], got {:?}", w_enc.shape()),
            ));
        }
        match (variant, &w_feat) {
            (GeneratorVariant::DataIndependent, None) => {}
            (GeneratorVariant::DataDependent, Some(w)) if w.rank() == 2 && w.shape()[0] == m => {}
            (GeneratorVariant::DataIndependent, Some(_)) => {
                return Err(Error::invalid("data-independent generator cannot carry a feature projection"))
            }
            (GeneratorVariant::DataDependent, _) => {
                return Err(Error::shape("generator", "data-dependent generator needs W12 of shape [m, d_feat]"))
            }
        }
        Ok(GeneratorParams {
            variant,
            theta_star: strip(theta_star),
            w_enc: strip(w_enc),
            w_feat: w_feat.map(strip),
            w2: strip(w2),
        })
    }

    pub fn dim(&self) -> usize {
        self.theta_star.numel()
    }

    pub fn hidden(&self) -> usize {
        self.w2.shape()[1]
    }

    fn enc_name(&self) -> &'static str {
        match self.variant {
            GeneratorVariant::DataIndependent => "w1",
            GeneratorVariant::DataDependent => "w11",
        }
    }

    pub fn store_into(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}theta"), self.theta_star.clone())?;
        store.insert(format!("{prefix}{}", self.enc_name()), self.w_enc.clone())?;
        store.insert(format!("{prefix}w2"), self.w2.clone())?;
        if let Some(w) = &self.w_feat {
            store.insert(format!("{prefix}w12"), w.clone())?;
        }
        Ok(())
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| -> Result<Tensor> {
            let t = store.get(&format!("{prefix}{n}"))?;
            Tensor::new(t.shape().to_vec(), t.data().to_vec())
        };
        if store.contains(&format!("{prefix}w11")) {
            Self::new(
                GeneratorVariant::DataDependent,
                get("theta")?,
                get("w11")?,
                Some(get("w12")?),
                get("w2")?,
            )
        } else {
            Self::new(GeneratorVariant::DataIndependent, get("theta")?, get("w1")?, None, get("w2")?)
        }
    }
}

fn strip(mut t: Tensor) -> Tensor {
    t.set_requires_grad(false);
    t
}

/// Generator weights pulled onto a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct GeneratorVars {
    pub variant: GeneratorVariant,
    pub theta_star: Var,
    pub w_enc: Var,
    pub w_feat: Option<Var>,
    pub w2: Var,
}

impl GeneratorVars {
    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        let dd = store.contains(&format!("{prefix}w11"));
        let (variant, enc) = if dd {
            (GeneratorVariant::DataDependent, "w11")
        } else {
            (GeneratorVariant::DataIndependent, "w1")
        };
        Ok(GeneratorVars {
            variant,
            theta_star: g.param(store, &format!("{prefix}theta"))?,
            w_enc: g.param(store, &format!("{prefix}{enc}"))?,
            w_feat: if dd {
                Some(g.param(store, &format!("{prefix}w12"))?)
            } else {
                None
            },
            w2: g.param(store, &format!("{prefix}w2"))?,
        })
    }

    /// Constant (non-trainable) copies of explicit parameters.
    pub fn constant(g: &mut Graph, p: &GeneratorParams) -> Self {
        GeneratorVars {
            variant: p.variant,
            theta_star: g.constant(p.theta_star.clone()),
            w_enc: g.constant(p.w_enc.clone()),
            w_feat: p.w_feat.as_ref().map(|w| g.constant(w.clone())),
            w2: g.constant(p.w2.clone()),
        }
    }

    /// Weight rows `[A, D]` for a batch of encodings `[A, 2]`. `pooled` is the
    /// globally pooled feature vector and must be given exactly when the
    /// generator is data-dependent.
    pub fn generate_rows(&self, g: &mut Graph, encodings: Var, pooled: Option<Var>) -> Result<Var> {
        let mut hidden = g.matmul_nt(encodings, self.w_enc)?;
        match (self.w_feat, pooled) {
            (None, None) => {}
            (Some(w12), Some(p)) => {
                let f = g.linear(p, w12, None)?;
                hidden = g.add_row(hidden, f)?;
            }
            (None, Some(_)) => {
                return Err(Error::invalid("data-independent generator was given image features"))
            }
            (Some(_), None) => {
                return Err(Error::invalid("data-dependent generator needs image features"))
            }
        }
        let hidden = g.relu(hidden);
        let residual = g.matmul_nt(hidden, self.w2)?;
        g.add_row(residual, self.theta_star)
    }
}

pub fn encodings_tensor(encs: &[AnchorEncoding]) -> Tensor {
    let data = encs.iter().flat_map(|e| e.as_array()).collect();
    Tensor::new(vec![encs.len(), 2], data).expect("two values per encoding")
}

/// `theta* + W2 relu(W1 b)` for the data-independent variant.
pub fn generate(params: &GeneratorParams, enc: &AnchorEncoding) -> Result<Vec<f64>> {
    if params.variant != GeneratorVariant::DataIndependent {
        return Err(Error::invalid("generate() needs a data-independent generator; use generate_dd()"));
    }
    let mut g = Graph::no_grad();
    let vars = GeneratorVars::constant(&mut g, params);
    let e = g.constant(encodings_tensor(&[*enc]));
    let rows = vars.generate_rows(&mut g, e, None)?;
    Ok(g.value(rows).data().to_vec())
}

/// `theta* + W2 relu(W11 b + W12 gap(feature))` for the data-dependent variant.
pub fn generate_dd(params: &GeneratorParams, enc: &AnchorEncoding, feature: &Tensor) -> Result<Vec<f64>> {
    if params.variant != GeneratorVariant::DataDependent {
        return Err(Error::invalid("generate_dd() needs a data-dependent generator"));
    }
    let want = params.w_feat.as_ref().map(|w| w.shape()[1]).unwrap_or(0);
    if feature.rank() != 3 || feature.shape()[0] != want {
        return Err(Error::shape(
            "generate_dd",
            format!("feature channels: W12 expects {want}, feature is {:?}", feature.shape()),
        ));
    }
    let mut g = Graph::no_grad();
    let vars = GeneratorVars::constant(&mut g, params);
    let e = g.constant(encodings_tensor(&[*enc]));
    let x = g.constant(feature.clone());
    let pooled = g.global_avg_pool(x)?;
    let rows = vars.generate_rows(&mut g, e, Some(pooled))?;
    Ok(g.value(rows).data().to_vec())
}

/// Runs the classification and regression generators and assembles one bank.
pub fn two_head_generate(
    cls: &GeneratorParams,
    reg: &GeneratorParams,
    geom: &HeadGeometry,
    enc: &AnchorEncoding,
    feature: Option<&Tensor>,
) -> Result<FilterBank> {
    if cls.dim() != geom.cls_dim() || reg.dim() != geom.reg_dim() {
        return Err(Error::shape(
            "two_head_generate",
            format!(
                "generators cover {} + {} weights, head layout needs {} + {}",
                cls.dim(),
                reg.dim(),
                geom.cls_dim(),
                geom.reg_dim()
            ),
        ));
    }
    let run = |p: &GeneratorParams| match (p.variant, feature) {
        (GeneratorVariant::DataIndependent, _) => generate(p, enc),
        (GeneratorVariant::DataDependent, Some(f)) => generate_dd(p, enc, f),
        (GeneratorVariant::DataDependent, None) => {
            Err(Error::invalid("data-dependent generator needs image features"))
        }
    };
    let mut theta = run(cls)?;
    theta.extend(run(reg)?);
    FilterBank::from_theta(&theta, geom)
}
