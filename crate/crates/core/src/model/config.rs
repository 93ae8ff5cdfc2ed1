use crate::error::{Error, Result};

/// Architecture hyper-parameters shared by teacher, student and baseline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    /// Wait parameter used when the model decodes under a wait-k schedule.
    pub k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            src_vocab: 32,
            tgt_vocab: 32,
            max_len: 64,
            k: 3,
        }
    }
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("max_len", self.max_len),
            ("k", self.k),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub(crate) fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_layers", self.n_layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("src_vocab", self.src_vocab.to_string()),
            ("tgt_vocab", self.tgt_vocab.to_string()),
            ("max_len", self.max_len.to_string()),
            ("k", self.k.to_string()),
        ]
    }

    pub(crate) fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let slot = match key {
            "n_layers" => &mut self.n_layers,
            "d_model" => &mut self.d_model,
            "n_heads" => &mut self.n_heads,
            "d_ff" => &mut self.d_ff,
            "src_vocab" => &mut self.src_vocab,
            "tgt_vocab" => &mut self.tgt_vocab,
            "max_len" => &mut self.max_len,
            "k" => &mut self.k,
            _ => return Ok(false),
        };
        *slot = value
            .parse()
            .map_err(|_| Error::Config(format!("{key}: expected an integer, got {value:?}")))?;
        Ok(true)
    }
}
