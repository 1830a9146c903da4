use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::ClassId;

/// Index of the "no object" row of the classifier.
pub const NO_OBJECT: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskActivation {
    /// Per-pixel softmax across queries; masks are mutually exclusive.
    Softmax,
    /// Independent per-entry sigmoid.
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub queries: usize,
    pub dim: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub mask_activation: MaskActivation,
    pub new_row_std: f64,
}

impl ModelConfig {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

macro_rules! weights {
    ($($name:ident),* $(,)?) => {
        /// Every trainable tensor of the network. Also used as the gradient record.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Weights {
            $(pub $name: Array2<f64>,)*
        }

        impl Weights {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn named(&self) -> Vec<(&'static str, &Array2<f64>)> {
                vec![$((stringify!($name), &self.$name)),*]
            }

            pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Array2<f64>)> {
                vec![$((stringify!($name), &mut self.$name)),*]
            }

            pub fn zeros_like(&self) -> Self {
                Self { $($name: Array2::zeros(self.$name.raw_dim()),)* }
            }

            pub fn from_named(mut tensors: Vec<(String, Array2<f64>)>) -> Result<Self> {
                let mut take = |name: &str| -> Result<Array2<f64>> {
                    let pos = tensors
                        .iter()
                        .position(|(n, _)| n == name)
                        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
                    Ok(tensors.swap_remove(pos).1)
                };
                Ok(Self { $($name: take(stringify!($name))?,)* })
            }
        }
    };
}

weights!(
    query, conv1_w, conv1_b, conv2_w, conv2_b, attn_q, attn_k, attn_v, attn_o, ffn_w1, ffn_b1, ffn_w2, ffn_b2,
    mask_w1, mask_b1, mask_w2, mask_b2, cls_w, cls_b,
);

impl Weights {
    pub fn add_assign(&mut self, other: &Weights) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, a) in self.named_mut() {
            a.mapv_inplace(|v| v * factor);
        }
    }

    pub fn shapes(&self) -> Vec<(&'static str, (usize, usize))> {
        self.named().into_iter().map(|(n, a)| (n, a.dim())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    pub fn num_entries(&self) -> usize {
        self.named().iter().map(|(_, a)| a.len()).sum()
    }
}

/// Network weights plus the seen-class list; row `k + 1` of the classifier
/// scores `classes[k]`, row 0 is "no object".
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Weights,
    pub classes: Vec<ClassId>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

impl ModelParams {
    pub fn init(config: ModelConfig, classes: &[ClassId], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ModelConfig {
            channels: c,
            queries: n,
            dim: d,
            hidden: h,
            ffn: f,
            ..
        } = config;
        let k1 = classes.len() + 1;
        let lecun = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let weights = Weights {
            query: gaussian(&mut rng, n, d, 1.0),
            conv1_w: gaussian(&mut rng, 9 * c, h, lecun(9 * c)),
            conv1_b: Array2::zeros((1, h)),
            conv2_w: gaussian(&mut rng, 9 * h, d, lecun(9 * h)),
            conv2_b: Array2::zeros((1, d)),
            attn_q: gaussian(&mut rng, d, d, lecun(d)),
            attn_k: gaussian(&mut rng, d, d, lecun(d)),
            attn_v: gaussian(&mut rng, d, d, lecun(d)),
            attn_o: gaussian(&mut rng, d, d, lecun(d)),
            ffn_w1: gaussian(&mut rng, d, f, lecun(d)),
            ffn_b1: Array2::zeros((1, f)),
            ffn_w2: gaussian(&mut rng, f, d, lecun(f)),
            ffn_b2: Array2::zeros((1, d)),
            mask_w1: gaussian(&mut rng, d, d, lecun(d)),
            mask_b1: Array2::zeros((1, d)),
            mask_w2: gaussian(&mut rng, d, d, lecun(d)),
            mask_b2: Array2::zeros((1, d)),
            cls_w: gaussian(&mut rng, k1, d, lecun(d)),
            cls_b: Array2::zeros((1, k1)),
        };
        Self {
            config,
            weights,
            classes: classes.to_vec(),
        }
    }

    /// Number of classifier rows, "no object" included.
    pub fn num_outputs(&self) -> usize {
        self.classes.len() + 1
    }

    /// Classifier row of a class id.
    pub fn class_index(&self, class_id: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class_id).map(|i| i + 1)
    }

    pub fn class_at(&self, index: usize) -> Option<ClassId> {
        index.checked_sub(1).and_then(|i| self.classes.get(i).copied())
    }

    /// Appends classifier rows for `new_classes`. Existing rows, "no object"
    /// included, and all other tensors are left bit-identical.
    pub fn expand_classifier(&self, new_classes: &[ClassId], seed: u64) -> Result<Self> {
        if new_classes.is_empty() {
            return Err(Error::Config("classifier expansion needs at least one class".into()));
        }
        if let Some(dup) = new_classes.iter().find(|c| self.classes.contains(c)) {
            return Err(Error::Config(format!("class {dup} already in classifier")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = gaussian(&mut rng, new_classes.len(), self.config.dim, self.config.new_row_std);
        let mut out = self.clone();
        out.weights.cls_w = concatenate(Axis(0), &[self.weights.cls_w.view(), rows.view()]).expect("same width");
        let bias = Array2::zeros((1, new_classes.len()));
        out.weights.cls_b = concatenate(Axis(1), &[self.weights.cls_b.view(), bias.view()]).expect("same height");
        out.classes.extend_from_slice(new_classes);
        Ok(out)
    }

    /// Checks every tensor shape against the config and class count.
    pub fn validate(&self) -> Result<()> {
        let ModelConfig {
            channels: c,
            queries: n,
            dim: d,
            hidden: h,
            ffn: f,
            ..
        } = self.config;
        let k1 = self.num_outputs();
        let expected = [
            (n, d),
            (9 * c, h),
            (1, h),
            (9 * h, d),
            (1, d),
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (d, f),
            (1, f),
            (f, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (k1, d),
            (1, k1),
        ];
        for ((name, shape), want) in self.weights.shapes().into_iter().zip(expected) {
            if shape != want {
                return Err(crate::error::shape_err(format!("{name} {want:?}"), format!("{shape:?}")));
            }
        }
        if !self.weights.is_finite() {
            return Err(Error::Numeric {
                layer: "parameters".into(),
            });
        }
        Ok(())
    }
}
