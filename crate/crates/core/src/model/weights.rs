use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError, PosScheme};
use crate::numcore::Tensor;

/// One pre-norm transformer block: the unit removed by pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    /// `d × 3d`, columns ordered `[q | k | v]`.
    pub w_qkv: Tensor,
    pub w_o: Tensor,
    pub ffn_norm: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl Block {
    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.attn_norm, &self.w_qkv, &self.w_o, &self.ffn_norm, &self.w_up, &self.w_down]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.attn_norm,
            &mut self.w_qkv,
            &mut self.w_o,
            &mut self.ffn_norm,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights {
    pub embedding: Tensor,
    pub pos_embedding: Option<Tensor>,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    /// `d × V`; `None` when the head is tied to the embedding.
    pub head: Option<Tensor>,
}

fn normal(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("finite init")
}

impl TransformerWeights {
    /// Seeded random initialisation.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let std = 0.02;
        let out_std = std / (2.0 * config.n_layers as f64).sqrt();
        let embedding = normal(vec![config.vocab_size, d], std, &mut rng);
        let pos_embedding = match config.pos_scheme {
            PosScheme::Learned => Some(normal(vec![config.max_seq, d], std, &mut rng)),
            PosScheme::Rotary => None,
        };
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                attn_norm: Tensor::filled(vec![d], 1.0),
                w_qkv: normal(vec![d, 3 * d], std, &mut rng),
                w_o: normal(vec![d, d], out_std, &mut rng),
                ffn_norm: Tensor::filled(vec![d], 1.0),
                w_up: normal(vec![d, config.d_ff], std, &mut rng),
                w_down: normal(vec![config.d_ff, d], out_std, &mut rng),
            })
            .collect();
        let head = (!config.tie_embeddings).then(|| normal(vec![d, config.vocab_size], std, &mut rng));
        Ok(Self { embedding, pos_embedding, blocks, final_norm: Tensor::filled(vec![d], 1.0), head })
    }

    /// All tensors in checkpoint declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        out.extend(self.pos_embedding.iter());
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.final_norm);
        out.extend(self.head.iter());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.pos_embedding.iter_mut());
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.extend(self.head.iter_mut());
        out
    }

    /// Expected shapes, in declaration order, for a config.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
        let d = config.d_model;
        let mut out = vec![vec![config.vocab_size, d]];
        if config.pos_scheme == PosScheme::Learned {
            out.push(vec![config.max_seq, d]);
        }
        for _ in 0..config.n_layers {
            out.extend([vec![d], vec![d, 3 * d], vec![d, d], vec![d], vec![d, config.d_ff], vec![config.d_ff, d]]);
        }
        out.push(vec![d]);
        if !config.tie_embeddings {
            out.push(vec![d, config.vocab_size]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let expected = Self::expected_shapes(config);
        let actual: Vec<Vec<usize>> = self.tensors().iter().map(|t| t.shape().to_vec()).collect();
        if expected != actual {
            return Err(ModelError::Config("weight shapes disagree with the model config".into()));
        }
        Ok(())
    }

    /// Physically deletes the given blocks, returning a shallower model.
    pub fn without_layers(&self, config: &ModelConfig, layers: &[usize]) -> (Self, ModelConfig) {
        let mut w = self.clone();
        w.blocks = self
            .blocks
            .iter()
            .enumerate()
            .filter(|(i, _)| !layers.contains(i))
            .map(|(_, b)| b.clone())
            .collect();
        let mut c = config.clone();
        c.n_layers = w.blocks.len();
        (w, c)
    }
}
