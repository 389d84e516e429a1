use crate::error::{shape_err, Result};
use crate::tensor::{NdTensor, SeedRng};

/// Stand-in text encoder output: `[text_tokens, text_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    tokens: NdTensor,
}

impl TextEmbedding {
    pub fn new(tokens: NdTensor) -> Result<Self> {
        if tokens.rank() != 2 || tokens.dims()[0] == 0 {
            return shape_err(format!("text embedding must be [tokens, dim], got {:?}", tokens.dims()));
        }
        Ok(Self { tokens })
    }

    /// The null condition used for dropout and unconditional guidance branches.
    pub fn null(count: usize, dim: usize) -> Result<Self> {
        Self::new(NdTensor::zeros(&[count, dim])?)
    }

    /// Embeds `words` by looking up rows of a seeded vocabulary table.
    pub fn from_words(words: &[usize], vocab: &NdTensor) -> Result<Self> {
        let dim = vocab.cols();
        let mut data = Vec::with_capacity(words.len() * dim);
        for &w in words {
            if w >= vocab.rows() {
                return shape_err(format!("word {w} outside vocabulary of {}", vocab.rows()));
            }
            data.extend_from_slice(vocab.row(w));
        }
        Self::new(NdTensor::new(vec![words.len(), dim], data)?)
    }

    /// Gaussian vocabulary table scaled to unit expected row norm.
    pub fn vocabulary(size: usize, dim: usize, rng: &mut SeedRng) -> Result<NdTensor> {
        let s = 1.0 / (dim as f32).sqrt();
        Ok(NdTensor::randn(&[size, dim], rng)?.map(|x| x * s))
    }

    pub fn tokens(&self) -> &NdTensor {
        &self.tokens
    }

    pub fn count(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[1]
    }
}
