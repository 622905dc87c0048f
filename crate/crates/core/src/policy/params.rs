use rand_distr::{Distribution, Normal};

use super::{PolicyConfig, PolicyError};
use crate::numerics::Tensor;
use crate::seeding;

pub(crate) const TOK_EMB: usize = 0;
pub(crate) const POS_EMB: usize = 1;
const PER_BLOCK: usize = 8;
const PER_HEAD: usize = 2;

/// Tensor indices of one decoder block.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockIndex {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub mlp_norm: usize,
    pub w_in: usize,
    pub w_out: usize,
}

pub(crate) fn block_index(layer: usize) -> BlockIndex {
    let b = 2 + PER_BLOCK * layer;
    BlockIndex {
        attn_norm: b,
        wq: b + 1,
        wk: b + 2,
        wv: b + 3,
        wo: b + 4,
        mlp_norm: b + 5,
        w_in: b + 6,
        w_out: b + 7,
    }
}

/// `(norm, projection)` tensor indices of the head at `exit_index`.
pub(crate) fn head_index(config: &PolicyConfig, exit_index: usize) -> (usize, usize) {
    let b = 2 + PER_BLOCK * config.n_layers + PER_HEAD * exit_index;
    (b, b + 1)
}

fn layout(config: &PolicyConfig) -> Vec<(String, Vec<usize>)> {
    let (v, c, d, f) = (
        config.vocab_size,
        config.context_len,
        config.d_model,
        config.mlp_width(),
    );
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![c, d]),
    ];
    for l in 0..config.n_layers {
        out.push((format!("blocks.{l}.attn_norm"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("blocks.{l}.{w}"), vec![d, d]));
        }
        out.push((format!("blocks.{l}.mlp_norm"), vec![d]));
        out.push((format!("blocks.{l}.w_in"), vec![d, f]));
        out.push((format!("blocks.{l}.w_out"), vec![f, d]));
    }
    for &depth in &config.exit_depths {
        out.push((format!("heads.{depth}.norm"), vec![d]));
        out.push((format!("heads.{depth}.out"), vec![d, v]));
    }
    out
}

fn is_norm_offset(name: &str) -> bool {
    name.ends_with("norm")
}

/// All learnable tensors of the familial policy, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    config: PolicyConfig,
    tensors: Vec<Tensor>,
}

impl PolicyParams {
    /// Gaussian init with standard deviation `init_scale`; normalization
    /// offsets start at zero (unit gain).
    pub fn init(config: &PolicyConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = seeding::rng(&[seed, seeding::stream::INIT]);
        let normal = Normal::new(0.0, config.init_scale)
            .map_err(|e| PolicyError::InvalidConfig(e.to_string()))?;
        let tensors = layout(config)
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                let data = if is_norm_offset(&name) {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn from_tensors(config: &PolicyConfig, tensors: Vec<Tensor>) -> Result<Self, PolicyError> {
        config.validate()?;
        let expected = layout(config);
        if expected.len() != tensors.len() {
            return Err(PolicyError::InvalidConfig(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(PolicyError::InvalidConfig(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn names(&self) -> Vec<String> {
        layout(&self.config).into_iter().map(|(n, _)| n).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        layout(&self.config).iter().position(|(n, _)| n == name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All coordinates flattened in tensor order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Maps a flat coordinate to `(tensor, offset)`.
    pub fn locate(&self, flat: usize) -> Option<(usize, usize)> {
        let mut rest = flat;
        for (i, t) in self.tensors.iter().enumerate() {
            if rest < t.len() {
                return Some((i, rest));
            }
            rest -= t.len();
        }
        None
    }

    /// Copy with one coordinate replaced; other tensors keep shared storage.
    pub fn with_coordinate(&self, flat: usize, value: f64) -> Self {
        let (t, off) = self.locate(flat).expect("coordinate in range");
        let mut tensors = self.tensors.clone();
        tensors[t] = tensors[t].with_value(off, value);
        Self {
            config: self.config.clone(),
            tensors,
        }
    }

    pub(crate) fn replace_tensor(&mut self, index: usize, tensor: Tensor) {
        debug_assert_eq!(tensor.shape(), self.tensors[index].shape());
        self.tensors[index] = tensor;
    }

    /// Tensor indices whose values feed the member at `exit_depth`.
    pub fn member_tensor_indices(&self, exit_depth: usize) -> Result<Vec<usize>, PolicyError> {
        let e = self.config.exit_index(exit_depth)?;
        let mut out = vec![TOK_EMB, POS_EMB];
        for l in 0..exit_depth {
            let b = block_index(l);
            out.extend([b.attn_norm, b.wq, b.wk, b.wv, b.wo, b.mlp_norm, b.w_in, b.w_out]);
        }
        let (n, o) = head_index(&self.config, e);
        out.extend([n, o]);
        Ok(out)
    }
}

/// Per-tensor gradients aligned with [`PolicyParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros(params: &PolicyParams) -> Self {
        Self {
            tensors: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// `self += scale * other`, coordinate by coordinate.
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors
            .iter_mut()
            .flat_map(|t| t.iter_mut())
            .for_each(|x| *x *= s);
    }

    pub fn is_all_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|&x| x == 0.0)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }

    pub fn tensor_is_zero(&self, index: usize) -> bool {
        self.tensors[index].iter().all(|&x| x == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let c = PolicyConfig::default();
        let a = PolicyParams::init(&c, 1).unwrap();
        let b = PolicyParams::init(&c, 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        let (v, ctx, d) = (32, 64, 64);
        let block = 2 * d + 4 * d * d + 2 * d * 4 * d;
        let head = d + d * v;
        assert_eq!(a.param_count(), v * d + ctx * d + 4 * block + 2 * head);
        assert_ne!(a, b);
        assert_eq!(a, PolicyParams::init(&c, 1).unwrap());
    }

    #[test]
    fn norm_offsets_start_at_zero() {
        let p = PolicyParams::init(&PolicyConfig::default(), 3).unwrap();
        for (name, t) in p.names().iter().zip(p.tensors()) {
            if name.ends_with("norm") {
                assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn locate_round_trips() {
        let p = PolicyParams::init(&PolicyConfig::default(), 3).unwrap();
        let flat = p.flatten();
        for i in [0, 1, 2047, 2048, flat.len() - 1] {
            let (t, off) = p.locate(i).unwrap();
            assert_eq!(p.tensors()[t].data()[off], flat[i]);
        }
        assert!(p.locate(flat.len()).is_none());
    }

    #[test]
    fn from_tensors_checks_shapes() {
        let c = PolicyConfig::default();
        let p = PolicyParams::init(&c, 3).unwrap();
        let mut ts = p.tensors().to_vec();
        ts.swap(2, 3);
        assert!(PolicyParams::from_tensors(&c, ts).is_err());
    }
}
